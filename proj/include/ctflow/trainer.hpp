#pragma once

#include <optional>

#include "ctflow/datagen.hpp"
#include "ctflow/networks.hpp"

#include <nlohmann/json_fwd.hpp>

namespace ctf {

// Published loss weights; config files may override any of them.
struct LossWeights {
  double w_c_cr = 1.0;
  double w_o_cr = 3.0;
  double w_c_rc = 0.5;
  double w_o_rc = 1.5;
  double w_r_cr = 3.0;
  double w_r_rc = 9.0;
  double w_so = 3.0;
  double w_sc = 1.0;
  double w_sr = 3.0;
  double w_st = 3.0;
};

enum class FlowMode { two_flow, cr_only, rc_only };

FlowMode flow_mode_from_string(const std::string& s);
std::string to_string(FlowMode mode);

struct AblationFlags {
  bool no_ls_o = false;
  bool no_ls_c = false;
  bool no_ls_r = false;
  bool no_ls_t = false;
};

struct TrainConfig {
  std::uint64_t seed = 7;
  int iterations = 2000;
  int batch_size = 8;
  double learning_rate = 1e-4;
  int warmup_steps = 100;
  double clip_norm = 10.0;
  int val_every = 500;
  int checkpoint_every = 500;
  FlowMode flow_mode = FlowMode::two_flow;
  AblationFlags ablation;
  ModelConfig model;
  LossWeights weights;
  std::string category;  // empty keeps every category

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
};

// One sample downsampled to the model's cloud sizes. Datasets are always
// generated at full resolution; reduced-width models train on FPS views.
struct TrainSample {
  std::string id, category;
  Eigen::MatrixXd p1, p2;
  std::array<Eigen::MatrixXd, 3> gt_cr_1, gt_cr_2, gt_rc_1, gt_rc_2;
  Eigen::Vector4d r1o_gt, r2o_gt;  // (w, x, y, z)
  RigidTransform m12_gt, m21_gt;
};

TrainSample make_train_sample(const ScanPair& pair, const ModelConfig& model,
                              std::string id = {}, std::string category = {});

// Record/replay of the discrete choices inside a loss evaluation (FPS
// selections, EMD assignment plans) so finite-difference probes see a fixed
// piecewise-smooth function.
struct ChoiceCache {
  bool replay = false;
  std::size_t cursor = 0;
  std::vector<std::vector<std::size_t>> sets;

  std::vector<std::size_t> take(const std::function<std::vector<std::size_t>()>& compute);
  void rewind();
};

// Everything one flow predicts, as graph values (gradients flow end to end).
struct FlowGraph {
  ad::Value s1, s2;                  // completed shapes, input frames, 2n x 3
  std::array<ad::Value, 3> g1, g2;   // missing-part levels, input frames
  ad::Value r1o, r2o;                // orientation quaternions
  nets::TransformValue m12, m21;
  ad::Value comp_in_1, comp_in_2;    // what the completion network consumed
};

// Concrete mirror of FlowGraph for metrics and tests.
struct FlowOutputs {
  Eigen::MatrixXd s1, s2;
  std::array<Eigen::MatrixXd, 3> g1, g2;
  UnitQuaternion r1o, r2o;
  RigidTransform m12, m21;
  Eigen::MatrixXd comp_in_1, comp_in_2;
};

FlowGraph run_cr_flow(const nets::Workspace& ws, const TrainSample& sample, ChoiceCache& cache);
FlowGraph run_rc_flow(const nets::Workspace& ws, const TrainSample& sample, ChoiceCache& cache);
FlowOutputs materialize(const FlowGraph& graph);

struct LossTerms {
  double l_c_cr = 0, l_o_cr = 0, l_c_rc = 0, l_o_rc = 0;
  double l_r_cr = 0, l_r_rc = 0;
  double l_s_o = 0, l_s_c = 0, l_s_r = 0, l_s_t = 0;
};

// Weighted aggregates from raw term values (zeros where a flow/term is off).
double weighted_completion(const LossTerms& t, const LossWeights& w);
double weighted_registration(const LossTerms& t, const LossWeights& w);
double weighted_consistency(const LossTerms& t, const LossWeights& w);
double weighted_total(const LossTerms& t, const LossWeights& w);

struct SampleLoss {
  ad::Value total;
  LossTerms terms;
};

// Builds the full differentiable loss for one sample under the configured
// flow mode and ablations.
SampleLoss sample_loss_graph(const nets::Workspace& ws, const TrainSample& sample,
                             const TrainConfig& config, ChoiceCache& cache);

// Plain-arithmetic loss path on concrete flow outputs; independent of the
// graph build and used to cross-check it. Null flow pointers mean "flow
// disabled".
double completion_loss(const FlowOutputs* cr, const FlowOutputs* rc, const TrainSample& sample,
                       const LossWeights& w, LossTerms* terms = nullptr);
double registration_loss(const FlowOutputs* cr, const FlowOutputs* rc, const TrainSample& sample,
                         const LossWeights& w, LossTerms* terms = nullptr);
double consistency_loss(const FlowOutputs& cr, const FlowOutputs& rc, int n_points,
                        const LossWeights& w, const AblationFlags& ablation,
                        LossTerms* terms = nullptr);

// --- training loop ----------------------------------------------------------

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  std::vector<double> total_per_iteration;
  std::int64_t start_iteration = 0;
  std::int64_t end_iteration = 0;
};

// Minibatch Adam over both networks; writes train_log.csv, checkpoints and a
// final validation EvalRecord under out_dir. Aborts with a diagnostic dump on
// a non-finite loss.
TrainResult train(const std::filesystem::path& dataset_dir, const TrainConfig& config,
                  const std::filesystem::path& out_dir,
                  const std::filesystem::path& resume_from = {});

// --- evaluation -------------------------------------------------------------

struct EvalFlowChoice {
  std::string reg_flow = "cr";   // which flow's transforms to score
  std::string comp_flow = "cr";  // which flow's completion to score
  bool oracle_registration = false;
};

EvalRecord evaluate_sample(const ParamSet& params, const ModelConfig& model, const ScanPair& pair,
                           const EvalFlowChoice& choice, const StressSpec* stress = nullptr,
                           Rng* stress_rng = nullptr);

// --- gradient checking --------------------------------------------------------

struct GradCheckResult {
  int checked = 0;
  int passed = 0;
  double worst_rel = 0.0;
};

// Central finite differences of the total loss against the tape's gradients,
// with all discrete choices replayed per probe.
GradCheckResult check_gradients(const TrainSample& sample, const TrainConfig& config,
                                int n_probes, std::uint64_t probe_seed);

}  // namespace ctf
