#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "ctflow/pointcloud.hpp"

namespace ctf {

// Optimal (or near-optimal) bijection between two equal-cardinality clouds.
// total_cost is the sum of matched Euclidean distances; the EMD value reported
// everywhere is the mean, total_cost / n, so it is cardinality-independent.
struct MatchPlan {
  std::vector<std::size_t> target_index;  // target_index[i] matches a[i] -> b[...]
  double total_cost = 0.0;
};

// Exact assignment via the O(n^3) shortest-augmenting-path method.
// Requires |a| = |b| <= 512.
std::pair<double, MatchPlan> emd_exact(const PointCloud& a, const PointCloud& b);

// Auction assignment with epsilon scaling; within 2% relative of emd_exact at
// default settings. max_rounds caps the scaling rounds (>= 1); the solver
// stops earlier once the duality gap bound drops below 0.5% of the cost.
// Deterministic. If plan_out is non-null the final assignment is stored.
double emd_approx(const PointCloud& a, const PointCloud& b, int max_rounds = 40,
                  MatchPlan* plan_out = nullptr);
double emd_approx(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int max_rounds = 40,
                  std::vector<std::size_t>* plan_out = nullptr);

// Symmetric chamfer: mean squared nearest-neighbor distance in both directions.
double chamfer(const PointCloud& a, const PointCloud& b);

// Missing-part outputs come in three coupled resolutions.
using LevelTriple = std::array<PointCloud, 3>;

// Mean EMD over the three levels; cardinalities must match per level.
double d_emd_multilevel(const LevelTriple& gen, const LevelTriple& gt);
double d_cd_multilevel(const LevelTriple& gen, const LevelTriple& gt);

struct RegistrationErrors {
  double e_theta = 0.0;  // degrees
  double e_t = 0.0;      // x 10^3
};

struct CompletionErrors {
  double e_emd_g = 0.0;  // x 10^3
  double e_emd_f = 0.0;  // x 10^3
  double e_cd_g = 0.0;   // x 10^4
  double e_cd_f = 0.0;   // x 10^4
};

struct EvalRecord {
  double e_theta = 0.0;
  double e_t = 0.0;
  double e_emd_g = 0.0;
  double e_emd_f = 0.0;
  double e_cd_g = 0.0;
  double e_cd_f = 0.0;

  EvalRecord& operator+=(const EvalRecord& o);
  EvalRecord scaled(double s) const;
};

RegistrationErrors eval_registration(const RigidTransform& pred12, const RigidTransform& pred21,
                                     const RigidTransform& gt12, const RigidTransform& gt21);

CompletionErrors eval_completion(const LevelTriple& gen1, const LevelTriple& gen2,
                                 const PointCloud& full1, const PointCloud& full2,
                                 const LevelTriple& gt1, const LevelTriple& gt2,
                                 const PointCloud& full1_gt, const PointCloud& full2_gt);

// Aggregate CSV: "category,e_theta,e_t,e_emd_g,e_emd_f,e_cd_g,e_cd_f,n_samples"
// rows per category plus a final "average" row (mean over all samples).
struct CategoryRow {
  std::string category;
  EvalRecord record;
  std::size_t n_samples = 0;
};

void write_eval_csv(const std::filesystem::path& path, const std::vector<CategoryRow>& rows);

}  // namespace ctf
