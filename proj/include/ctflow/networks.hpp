#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>

#include "ctflow/autodiff.hpp"
#include "ctflow/geometry.hpp"
#include "ctflow/pointcloud.hpp"

namespace ctf {

// Cloud and layer sizing. width_scale divides every hidden width (16 gives the
// miniature used for gradient checks and CI); levels must grow by integer
// factors and end at n_points.
struct ModelConfig {
  int n_points = 2048;
  std::array<int, 3> levels = {128, 512, 2048};
  int width_scale = 1;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  static ModelConfig full() { return {}; }
  static ModelConfig tiny() { return {32, {2, 8, 32}, 16}; }
};

// Named parameter tensors in a stable order (iteration order defines both the
// init sequence and the checkpoint layout).
struct ParamSet {
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;

  Eigen::MatrixXd& at(const std::string& name);
  const Eigen::MatrixXd& at(const std::string& name) const;
  void add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  std::size_t total_entries() const;
};

// Glorot-uniform weights, zero biases, seeded.
ParamSet init_params(const ModelConfig& config, std::uint64_t seed);

namespace nets {

// Binds every tensor to a differentiable leaf for one forward build.
struct Workspace {
  ModelConfig config;
  std::unordered_map<std::string, ad::Value> leaves;

  ad::Value p(const std::string& name) const;
};

Workspace bind(const ParamSet& params, const ModelConfig& config, bool trainable = true);

struct TransformValue {
  ad::Value q;  // 1x4 unit quaternion
  ad::Value t;  // 1x3
};

RigidTransform to_transform(const TransformValue& tv);

// Permutation-invariant point-set encoders (shared per-point layers + max pool).
ad::Value encode_reg(const Workspace& ws, const ad::Value& points);
ad::Value encode_comp(const Workspace& ws, const ad::Value& points);

struct RegisterResult {
  TransformValue m12;
  ad::Value p1_rotated;
};

// Rotation head first, translation head on the rotated cloud; quaternions are
// normalized before use. Registers p1 onto anchor p2.
RegisterResult register_clouds(const Workspace& ws, const ad::Value& p1, const ad::Value& p2);

struct RegisterPairResult {
  TransformValue m12, m21;
};

// Both directions with shared head weights and swapped inputs; encoder
// features are computed once per cloud.
RegisterPairResult register_pair(const Workspace& ws, const ad::Value& p1, const ad::Value& p2);

struct OrientResult {
  ad::Value r_o;  // 1x4
  ad::Value p_o;  // n x 3
};

OrientResult orient(const Workspace& ws, const ad::Value& p);

struct GenerateResult {
  std::array<ad::Value, 3> levels;  // canonical frame, sizes per config.levels
};

// Coarse-to-fine missing part: the primary level is decoded from the global
// feature, each finer level adds per-parent offset children.
GenerateResult generate_missing(const Workspace& ws, const ad::Value& p_oriented);

struct CompletionResult {
  ad::Value r_o;
  ad::Value p_o;
  std::array<ad::Value, 3> levels_canonical;
  std::array<ad::Value, 3> levels_out;  // rotated back to the input frame
  ad::Value s;                          // 2n x 3 completed shape, input frame
};

CompletionResult complete(const Workspace& ws, const ad::Value& p);

// Convenience inference wrappers on concrete clouds.
RigidTransform register_clouds(const ParamSet& params, const ModelConfig& config,
                               const PointCloud& p1, const PointCloud& p2);
std::pair<PointCloud, UnitQuaternion> complete(const ParamSet& params, const ModelConfig& config,
                                               const PointCloud& p);

}  // namespace nets

// Checkpoints: directory with manifest.json plus one little-endian float32
// row-major blob per tensor ("TNS1" magic, u32 rows, u32 cols).
struct Checkpoint {
  ParamSet params;
  ModelConfig config;
  std::uint64_t seed = 0;
  std::int64_t iteration = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params,
                     const ModelConfig& config, std::uint64_t seed, std::int64_t iteration);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace ctf
