#include "ctflow/metrics.hpp"

#include <fstream>
#include <limits>
#include <numeric>

namespace ctf {

namespace {

double matched_cost(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                    const std::vector<std::size_t>& plan) {
  double total = 0.0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    total += (a.row(static_cast<Eigen::Index>(i)) - b.row(static_cast<Eigen::Index>(plan[i]))).norm();
  }
  return total;
}

}  // namespace

std::pair<double, MatchPlan> emd_exact(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size()) throw InvalidArgument("emd_exact: cardinality mismatch");
  if (a.empty()) throw InvalidArgument("emd_exact: empty clouds");
  if (a.size() > 512) throw InvalidArgument("emd_exact: limited to 512 points");
  const int n = static_cast<int>(a.size());

  Eigen::MatrixXd cost(n, n);
  Eigen::MatrixXd am = a.matrix(), bm = b.matrix();
  for (int i = 0; i < n; ++i) {
    cost.row(i) = (bm.rowwise() - am.row(i)).rowwise().norm();
  }

  // Shortest augmenting path with potentials, 1-indexed sentinels.
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0);  // match[j] = row assigned to column j
  std::vector<int> way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = match[j0], j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  MatchPlan plan;
  plan.target_index.resize(static_cast<std::size_t>(n));
  for (int j = 1; j <= n; ++j) plan.target_index[static_cast<std::size_t>(match[j] - 1)] =
      static_cast<std::size_t>(j - 1);
  plan.total_cost = matched_cost(am, bm, plan.target_index);
  return {plan.total_cost / n, plan};
}

double emd_approx(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int max_rounds,
                  std::vector<std::size_t>* plan_out) {
  if (a.rows() != b.rows()) throw InvalidArgument("emd_approx: cardinality mismatch");
  if (a.rows() == 0) throw InvalidArgument("emd_approx: empty clouds");
  if (max_rounds < 1) throw InvalidArgument("emd_approx: max_rounds must be >= 1");
  const int n = static_cast<int>(a.rows());

  if (n == 1) {
    if (plan_out) *plan_out = {0};
    return (a.row(0) - b.row(0)).norm();
  }

  // Dense cost matrix up to 1024 points; on-the-fly rows beyond that.
  Eigen::MatrixXd cost;
  const bool dense = n <= 1024;
  if (dense) {
    cost.resize(n, n);
    for (int i = 0; i < n; ++i) cost.row(i) = (b.rowwise() - a.row(i)).rowwise().norm();
  }
  Eigen::VectorXd row_buf(n);
  auto cost_row = [&](int i) -> const Eigen::VectorXd& {
    if (dense) {
      row_buf = cost.row(i);
    } else {
      row_buf = (b.rowwise() - a.row(i)).rowwise().norm();
    }
    return row_buf;
  };

  Vec3 lo = a.colwise().minCoeff().cwiseMin(b.colwise().minCoeff());
  Vec3 hi = a.colwise().maxCoeff().cwiseMax(b.colwise().maxCoeff());
  double diam = (hi - lo).norm();
  if (diam <= 0.0) diam = 1e-9;

  std::vector<double> price(static_cast<std::size_t>(n), 0.0);
  std::vector<int> owner(static_cast<std::size_t>(n), -1);
  std::vector<int> assigned(static_cast<std::size_t>(n), -1);
  std::vector<int> queue;
  queue.reserve(static_cast<std::size_t>(n));

  double eps = diam / 8.0;
  const double kRelTol = 0.005;
  double total = 0.0;

  for (int round = 0; round < max_rounds; ++round) {
    std::fill(owner.begin(), owner.end(), -1);
    std::fill(assigned.begin(), assigned.end(), -1);
    queue.clear();
    for (int i = n - 1; i >= 0; --i) queue.push_back(i);

    while (!queue.empty()) {
      int i = queue.back();
      queue.pop_back();
      const Eigen::VectorXd& ci = cost_row(i);
      // Best and second-best net value of -cost - price.
      int best_j = -1;
      double best_v = -std::numeric_limits<double>::infinity();
      double second_v = best_v;
      for (int j = 0; j < n; ++j) {
        double val = -ci[j] - price[static_cast<std::size_t>(j)];
        if (val > best_v) {
          second_v = best_v;
          best_v = val;
          best_j = j;
        } else if (val > second_v) {
          second_v = val;
        }
      }
      price[static_cast<std::size_t>(best_j)] += best_v - second_v + eps;
      int prev = owner[static_cast<std::size_t>(best_j)];
      owner[static_cast<std::size_t>(best_j)] = i;
      assigned[static_cast<std::size_t>(i)] = best_j;
      if (prev >= 0) {
        assigned[static_cast<std::size_t>(prev)] = -1;
        queue.push_back(prev);
      }
    }

    total = 0.0;
    for (int i = 0; i < n; ++i) total += cost_row(i)[assigned[static_cast<std::size_t>(i)]];
    // Duality gap is at most n * eps; stop once negligible.
    if (total == 0.0 || n * eps <= kRelTol * total) break;
    eps /= 5.0;
  }

  if (plan_out) {
    plan_out->resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) (*plan_out)[static_cast<std::size_t>(i)] =
        static_cast<std::size_t>(assigned[static_cast<std::size_t>(i)]);
  }
  return total / n;
}

double emd_approx(const PointCloud& a, const PointCloud& b, int max_rounds, MatchPlan* plan_out) {
  std::vector<std::size_t> plan;
  double mean = emd_approx(a.matrix(), b.matrix(), max_rounds, plan_out ? &plan : nullptr);
  if (plan_out) {
    plan_out->target_index = std::move(plan);
    plan_out->total_cost = mean * static_cast<double>(a.size());
  }
  return mean;
}

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw InvalidArgument("chamfer: empty cloud");
  Eigen::MatrixXd am = a.matrix(), bm = b.matrix();
  double ab = 0.0, ba = 0.0;
  for (Eigen::Index i = 0; i < am.rows(); ++i) {
    ab += (bm.rowwise() - am.row(i)).rowwise().squaredNorm().minCoeff();
  }
  for (Eigen::Index j = 0; j < bm.rows(); ++j) {
    ba += (am.rowwise() - bm.row(j)).rowwise().squaredNorm().minCoeff();
  }
  return ab / static_cast<double>(am.rows()) + ba / static_cast<double>(bm.rows());
}

double d_emd_multilevel(const LevelTriple& gen, const LevelTriple& gt) {
  double sum = 0.0;
  for (int l = 0; l < 3; ++l) {
    if (gen[l].size() != gt[l].size()) {
      throw InvalidArgument("d_emd_multilevel: level cardinality mismatch");
    }
    sum += emd_approx(gen[l], gt[l]);
  }
  return sum / 3.0;
}

double d_cd_multilevel(const LevelTriple& gen, const LevelTriple& gt) {
  double sum = 0.0;
  for (int l = 0; l < 3; ++l) sum += chamfer(gen[l], gt[l]);
  return sum / 3.0;
}

EvalRecord& EvalRecord::operator+=(const EvalRecord& o) {
  e_theta += o.e_theta;
  e_t += o.e_t;
  e_emd_g += o.e_emd_g;
  e_emd_f += o.e_emd_f;
  e_cd_g += o.e_cd_g;
  e_cd_f += o.e_cd_f;
  return *this;
}

EvalRecord EvalRecord::scaled(double s) const {
  return {e_theta * s, e_t * s, e_emd_g * s, e_emd_f * s, e_cd_g * s, e_cd_f * s};
}

RegistrationErrors eval_registration(const RigidTransform& pred12, const RigidTransform& pred21,
                                     const RigidTransform& gt12, const RigidTransform& gt21) {
  RegistrationErrors e;
  e.e_theta = 0.5 * (angle_deg(pred12.rotation, gt12.rotation) +
                     angle_deg(pred21.rotation, gt21.rotation));
  e.e_t = 0.5 * ((pred12.translation - gt12.translation).norm() +
                 (pred21.translation - gt21.translation).norm()) * 1e3;
  return e;
}

CompletionErrors eval_completion(const LevelTriple& gen1, const LevelTriple& gen2,
                                 const PointCloud& full1, const PointCloud& full2,
                                 const LevelTriple& gt1, const LevelTriple& gt2,
                                 const PointCloud& full1_gt, const PointCloud& full2_gt) {
  if (full1.size() != full1_gt.size() || full2.size() != full2_gt.size()) {
    throw InvalidArgument("eval_completion: full-shape cardinality mismatch");
  }
  CompletionErrors e;
  e.e_emd_g = 0.5 * (d_emd_multilevel(gen1, gt1) + d_emd_multilevel(gen2, gt2)) * 1e3;
  e.e_emd_f = 0.5 * (emd_approx(full1, full1_gt) + emd_approx(full2, full2_gt)) * 1e3;
  e.e_cd_g = 0.5 * (d_cd_multilevel(gen1, gt1) + d_cd_multilevel(gen2, gt2)) * 1e4;
  e.e_cd_f = 0.5 * (chamfer(full1, full1_gt) + chamfer(full2, full2_gt)) * 1e4;
  return e;
}

void write_eval_csv(const std::filesystem::path& path, const std::vector<CategoryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("write_eval_csv: cannot open " + path.string());
  out << "category,e_theta,e_t,e_emd_g,e_emd_f,e_cd_g,e_cd_f,n_samples\n";
  out.precision(17);
  EvalRecord total;
  std::size_t count = 0;
  for (const CategoryRow& row : rows) {
    const EvalRecord& r = row.record;
    out << row.category << ',' << r.e_theta << ',' << r.e_t << ',' << r.e_emd_g << ','
        << r.e_emd_f << ',' << r.e_cd_g << ',' << r.e_cd_f << ',' << row.n_samples << '\n';
    total += r.scaled(static_cast<double>(row.n_samples));
    count += row.n_samples;
  }
  if (count > 0) {
    EvalRecord avg = total.scaled(1.0 / static_cast<double>(count));
    out << "average," << avg.e_theta << ',' << avg.e_t << ',' << avg.e_emd_g << ','
        << avg.e_emd_f << ',' << avg.e_cd_g << ',' << avg.e_cd_f << ',' << count << '\n';
  }
}

}  // namespace ctf
