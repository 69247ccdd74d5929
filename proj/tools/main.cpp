#include <CLI11.hpp>

#include <iostream>

#include "ctflow/cli.hpp"

namespace {

std::uint64_t parse_seed(const std::string& s) { return std::stoull(s); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-flow tele-registration of partial point clouds: dataset generation,\n"
               "training, evaluation, stress tests and plots."};
  app.require_subcommand(1);
  bool quiet = false, json_logs = false;
  app.add_flag("--quiet", quiet, "suppress info logging");
  app.add_flag("--json-logs", json_logs, "emit log lines as JSON");

  ctf::cli::GenShapesOpts shapes;
  std::string shapes_seed = "0";
  auto* gen_shapes = app.add_subcommand("gen-shapes", "write procedural canonical shapes");
  gen_shapes->add_option("--out", shapes.out, "output directory")->required();
  gen_shapes->add_option("--count", shapes.count, "number of shapes");
  gen_shapes->add_option("--seed", shapes_seed, "random seed");
  gen_shapes->add_option("--kinds", shapes.kinds, "comma list of shape kinds");
  gen_shapes->add_option("--points", shapes.points, "points per shape");

  ctf::cli::GenDataOpts gen;
  std::string gen_seed = "0";
  double overlap = -1.0;
  auto* gen_data = app.add_subcommand("gen-data", "generate scan-pair dataset with ground truth");
  gen_data->add_option("--shapes", gen.shapes_dir, "directory of 16384-point .xyz shapes")
      ->required();
  gen_data->add_option("--out", gen.out, "output dataset directory")->required();
  gen_data->add_option("--category", gen.category, "category label");
  gen_data->add_option("--count", gen.count, "number of samples")->required();
  gen_data->add_option("--seed", gen_seed, "random seed");
  gen_data->add_option("--overlap", overlap, "target overlap IoU in [0, 0.8]");
  gen_data->add_option("--train-frac", gen.train_frac, "train split fraction");
  gen_data->add_option("--val-frac", gen.val_frac, "val split fraction");
  gen_data->add_option("--max-attempts", gen.max_attempts, "rejection budget per sample");
  gen_data->add_option("--workers", gen.workers, "worker threads (default CTF_NUM_WORKERS)");

  ctf::cli::TrainOpts train;
  auto* train_cmd = app.add_subcommand("train", "train the two-flow model");
  train_cmd->add_option("--data", train.data, "dataset directory")->required();
  train_cmd->add_option("--config", train.config_file, "train config JSON")->required();
  train_cmd->add_option("--out", train.out, "run output directory")->required();
  train_cmd->add_option("--resume", train.resume, "checkpoint directory to resume from");

  ctf::cli::EvalOpts eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--data", eval.data, "dataset directory")->required();
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--out", eval.out, "output directory")->required();
  eval_cmd->add_option("--flow", eval.flow, "cr or rc")->check(CLI::IsMember({"cr", "rc"}));
  eval_cmd->add_option("--split", eval.split, "train, val, test or all");
  eval_cmd->add_flag("--oracle-registration", eval.oracle_registration,
                     "score ground-truth transforms instead of predictions");

  ctf::cli::StressOpts stress;
  std::string stress_seed = "0";
  auto* stress_cmd = app.add_subcommand("stress", "noise/outlier stress sweeps");
  stress_cmd->add_option("--data", stress.data, "dataset directory")->required();
  stress_cmd->add_option("--checkpoint", stress.checkpoint, "checkpoint directory")->required();
  stress_cmd->add_option("--out", stress.out, "output directory")->required();
  stress_cmd->add_option("--noise", stress.noise, "noise levels zeta");
  stress_cmd->add_option("--outliers", stress.outliers, "outlier counts K");
  stress_cmd->add_flag("--filter", stress.filter, "apply radius outlier filtering");
  stress_cmd->add_option("--filter-radius", stress.filter_radius, "filter radius");
  stress_cmd->add_option("--filter-min-neighbors", stress.filter_min_neighbors,
                         "filter neighbor threshold");
  stress_cmd->add_option("--flow", stress.flow, "cr or rc")->check(CLI::IsMember({"cr", "rc"}));
  stress_cmd->add_option("--split", stress.split, "dataset split");
  stress_cmd->add_option("--seed", stress_seed, "perturbation seed");

  ctf::cli::PlotOpts plot;
  auto* plot_cmd = app.add_subcommand("plot", "merge run CSVs and render an SVG chart");
  plot_cmd->add_option("--runs", plot.runs, "run directories or CSV files")->required();
  plot_cmd->add_option("--out", plot.out, "output chart file (.svg)")->required();
  plot_cmd->add_option("--metric", plot.metric, "metric column to plot");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  ctf::set_log_quiet(quiet);
  ctf::set_log_json(json_logs);

  try {
    if (*gen_shapes) {
      shapes.seed = parse_seed(shapes_seed);
      return ctf::cli::cmd_gen_shapes(shapes);
    }
    if (*gen_data) {
      gen.seed = parse_seed(gen_seed);
      if (overlap >= 0.0) gen.overlap = overlap;
      return ctf::cli::cmd_gen_data(gen);
    }
    if (*train_cmd) return ctf::cli::cmd_train(train);
    if (*eval_cmd) return ctf::cli::cmd_eval(eval);
    if (*stress_cmd) {
      stress.seed = parse_seed(stress_seed);
      return ctf::cli::cmd_stress(stress);
    }
    if (*plot_cmd) return ctf::cli::cmd_plot(plot);
  } catch (const ctf::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
