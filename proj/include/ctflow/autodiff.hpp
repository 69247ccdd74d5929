#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <vector>

#include "ctflow/common.hpp"

// Small reverse-mode tape over Eigen matrices: define-by-run graphs built per
// forward pass, freed when the last Value handle drops. Shapes are matrices
// throughout; scalars are 1x1, row vectors 1xN, point clouds Nx3.
namespace ctf::ad {

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
  Eigen::MatrixXd val;
  Eigen::MatrixXd grad;  // allocated lazily; same shape as val
  std::vector<Value> parents;
  std::function<void(Node&)> backfn;  // scatters this->grad into parents
  bool needs_grad = false;
  std::int64_t id = 0;

  bool has_grad() const { return grad.size() != 0; }
  void ensure_grad() {
    if (!has_grad()) grad = Eigen::MatrixXd::Zero(val.rows(), val.cols());
  }
  double scalar() const { return val(0, 0); }
};

Value constant(Eigen::MatrixXd v);
Value leaf(Eigen::MatrixXd v);  // differentiable input (parameter)

// Core ops
Value matmul(const Value& a, const Value& b);
Value add(const Value& a, const Value& b);
// a + s * b, same shapes.
Value add_scaled(const Value& a, const Value& b, double s);
Value scale(const Value& a, double s);
Value add_rowvec(const Value& m, const Value& row);      // broadcast bias row
Value relu(const Value& a);
Value colwise_max(const Value& a);                       // NxC -> 1xC
Value concat_cols(const Value& a, const Value& b);
Value concat_rows(const Value& a, const Value& b);
Value gather_rows(const Value& a, std::vector<std::size_t> idx);
Value repeat_rows(const Value& row, Eigen::Index n);     // 1xC -> NxC
Value repeat_each_row(const Value& a, Eigen::Index k);   // NxC -> (N*k)xC, grouped
Value reshape_rowmajor(const Value& a, Eigen::Index rows, Eigen::Index cols);
Value mean_all(const Value& a);                          // -> 1x1
Value mse(const Value& a, const Value& b);               // mean squared diff -> 1x1
Value vec_norm(const Value& a);                          // L2 norm of all entries -> 1x1
Value normalize_vec(const Value& a);                     // a / |a|
Value min_scalar(const Value& a, const Value& b);
// Weighted sum of scalars.
Value lincomb(const std::vector<std::pair<double, Value>>& terms);

// Geometry ops
// Rotates row points by the unit quaternion q (1x4, order w,x,y,z): P R(q)^T.
Value rotate_points(const Value& points, const Value& q);
Value quat_mul(const Value& a, const Value& b);
Value quat_conj(const Value& q);

// Mean Euclidean distance between rows of a and rows of b under a fixed
// assignment plan (the EMD surrogate with the plan frozen).
Value matched_mean_dist(const Value& a, const Value& b,
                        const std::vector<std::size_t>& plan);

// Seeds d(loss)/d(loss) = 1 and sweeps the reachable graph in reverse
// topological order. loss must be 1x1.
void backward(const Value& loss);

}  // namespace ctf::ad
