#pragma once

#include <optional>

#include "ctflow/trainer.hpp"

namespace ctf::cli {

inline constexpr const char* kVersion = "0.1.0";

// Every command drops a run_manifest.json into its output directory: command,
// argument snapshot, seed, version, wall clock, status. Re-running with the
// same manifest reproduces the outputs (timestamps aside).

struct GenShapesOpts {
  std::filesystem::path out;
  std::size_t count = 8;
  std::uint64_t seed = 0;
  std::string kinds = "box,cylinder,plate,table,shell";
  std::size_t points = 16384;
};
int cmd_gen_shapes(const GenShapesOpts& opts);

struct GenDataOpts {
  std::filesystem::path shapes_dir;
  std::filesystem::path out;
  std::string category = "shapes";
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::optional<double> overlap;
  double train_frac = 0.8;
  double val_frac = 0.1;
  int max_attempts = 200;
  int workers = 0;  // 0 = CTF_NUM_WORKERS
};
int cmd_gen_data(const GenDataOpts& opts);

struct TrainOpts {
  std::filesystem::path data;
  std::filesystem::path config_file;
  std::filesystem::path out;
  std::filesystem::path resume;
};
int cmd_train(const TrainOpts& opts);

struct EvalOpts {
  std::filesystem::path data;
  std::filesystem::path checkpoint;
  std::filesystem::path out;
  std::string flow = "cr";
  std::string split = "test";
  bool oracle_registration = false;
};
int cmd_eval(const EvalOpts& opts);

struct StressOpts {
  std::filesystem::path data;
  std::filesystem::path checkpoint;
  std::filesystem::path out;
  std::vector<double> noise;
  std::vector<int> outliers;
  bool filter = false;
  double filter_radius = 0.05;
  int filter_min_neighbors = 4;
  std::string flow = "cr";
  std::string split = "test";
  std::uint64_t seed = 0;
};
int cmd_stress(const StressOpts& opts);

struct PlotOpts {
  std::vector<std::filesystem::path> runs;  // stress/eval CSV files or run dirs
  std::filesystem::path out;                // chart file (.svg); merged CSV sits next to it
  std::string metric = "e_theta";
};
int cmd_plot(const PlotOpts& opts);

// Shared eval driver (also used by stress): evaluates one dataset split and
// returns per-sample rows plus the per-category aggregation.
struct EvalRun {
  std::vector<std::pair<DatasetEntry, EvalRecord>> samples;
  std::vector<CategoryRow> categories;
  EvalRecord average;
};
EvalRun run_eval(const std::filesystem::path& data_dir, const ParamSet& params,
                 const ModelConfig& model, const std::string& split,
                 const EvalFlowChoice& choice, const StressSpec* stress, std::uint64_t seed);

}  // namespace ctf::cli
