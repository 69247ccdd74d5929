#include "ctflow/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace ctf::ad {

namespace {

std::atomic<std::int64_t> g_next_id{1};

Value make_node(Eigen::MatrixXd v, std::vector<Value> parents,
                std::function<void(Node&)> backfn) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->id = g_next_id.fetch_add(1);
  n->needs_grad = false;
  for (const Value& p : parents) n->needs_grad = n->needs_grad || p->needs_grad;
  if (n->needs_grad) {
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
  }
  return n;
}

void check(bool cond, const char* msg) {
  if (!cond) throw InvalidArgument(std::string("autodiff: ") + msg);
}

}  // namespace

Value constant(Eigen::MatrixXd v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->id = g_next_id.fetch_add(1);
  return n;
}

Value leaf(Eigen::MatrixXd v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->id = g_next_id.fetch_add(1);
  n->needs_grad = true;
  return n;
}

Value matmul(const Value& a, const Value& b) {
  check(a->val.cols() == b->val.rows(), "matmul shape mismatch");
  return make_node(a->val * b->val, {a, b}, [a, b](Node& n) {
    if (a->needs_grad) {
      a->ensure_grad();
      a->grad.noalias() += n.grad * b->val.transpose();
    }
    if (b->needs_grad) {
      b->ensure_grad();
      b->grad.noalias() += a->val.transpose() * n.grad;
    }
  });
}

Value add(const Value& a, const Value& b) { return add_scaled(a, b, 1.0); }

Value add_scaled(const Value& a, const Value& b, double s) {
  check(a->val.rows() == b->val.rows() && a->val.cols() == b->val.cols(),
        "add shape mismatch");
  return make_node(a->val + s * b->val, {a, b}, [a, b, s](Node& n) {
    if (a->needs_grad) {
      a->ensure_grad();
      a->grad += n.grad;
    }
    if (b->needs_grad) {
      b->ensure_grad();
      b->grad += s * n.grad;
    }
  });
}

Value scale(const Value& a, double s) {
  return make_node(s * a->val, {a}, [a, s](Node& n) {
    a->ensure_grad();
    a->grad += s * n.grad;
  });
}

Value add_rowvec(const Value& m, const Value& row) {
  check(row->val.rows() == 1 && row->val.cols() == m->val.cols(), "add_rowvec shape mismatch");
  return make_node(m->val.rowwise() + row->val.row(0), {m, row}, [m, row](Node& n) {
    if (m->needs_grad) {
      m->ensure_grad();
      m->grad += n.grad;
    }
    if (row->needs_grad) {
      row->ensure_grad();
      row->grad += n.grad.colwise().sum();
    }
  });
}

Value relu(const Value& a) {
  return make_node(a->val.cwiseMax(0.0), {a}, [a](Node& n) {
    a->ensure_grad();
    a->grad += (a->val.array() > 0.0).cast<double>().matrix().cwiseProduct(n.grad);
  });
}

Value colwise_max(const Value& a) {
  check(a->val.rows() >= 1, "colwise_max on empty");
  Eigen::MatrixXd out(1, a->val.cols());
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(a->val.cols()));
  for (Eigen::Index c = 0; c < a->val.cols(); ++c) {
    Eigen::Index r = 0;
    out(0, c) = a->val.col(c).maxCoeff(&r);
    argmax[static_cast<std::size_t>(c)] = r;
  }
  return make_node(std::move(out), {a}, [a, argmax = std::move(argmax)](Node& n) {
    a->ensure_grad();
    for (Eigen::Index c = 0; c < n.val.cols(); ++c) {
      a->grad(argmax[static_cast<std::size_t>(c)], c) += n.grad(0, c);
    }
  });
}

Value concat_cols(const Value& a, const Value& b) {
  check(a->val.rows() == b->val.rows(), "concat_cols row mismatch");
  Eigen::MatrixXd out(a->val.rows(), a->val.cols() + b->val.cols());
  out << a->val, b->val;
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->needs_grad) {
      a->ensure_grad();
      a->grad += n.grad.leftCols(a->val.cols());
    }
    if (b->needs_grad) {
      b->ensure_grad();
      b->grad += n.grad.rightCols(b->val.cols());
    }
  });
}

Value concat_rows(const Value& a, const Value& b) {
  check(a->val.cols() == b->val.cols(), "concat_rows col mismatch");
  Eigen::MatrixXd out(a->val.rows() + b->val.rows(), a->val.cols());
  out << a->val, b->val;
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->needs_grad) {
      a->ensure_grad();
      a->grad += n.grad.topRows(a->val.rows());
    }
    if (b->needs_grad) {
      b->ensure_grad();
      b->grad += n.grad.bottomRows(b->val.rows());
    }
  });
}

Value gather_rows(const Value& a, std::vector<std::size_t> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), a->val.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] < static_cast<std::size_t>(a->val.rows()), "gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a->val.row(static_cast<Eigen::Index>(idx[i]));
  }
  return make_node(std::move(out), {a}, [a, idx = std::move(idx)](Node& n) {
    a->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      a->grad.row(static_cast<Eigen::Index>(idx[i])) += n.grad.row(static_cast<Eigen::Index>(i));
    }
  });
}

Value repeat_rows(const Value& row, Eigen::Index n) {
  check(row->val.rows() == 1, "repeat_rows expects a row vector");
  Eigen::MatrixXd out = row->val.replicate(n, 1);
  return make_node(std::move(out), {row}, [row](Node& n2) {
    row->ensure_grad();
    row->grad += n2.grad.colwise().sum();
  });
}

Value repeat_each_row(const Value& a, Eigen::Index k) {
  Eigen::MatrixXd out(a->val.rows() * k, a->val.cols());
  for (Eigen::Index r = 0; r < a->val.rows(); ++r) {
    out.middleRows(r * k, k) = a->val.row(r).replicate(k, 1);
  }
  return make_node(std::move(out), {a, }, [a, k](Node& n) {
    a->ensure_grad();
    for (Eigen::Index r = 0; r < a->val.rows(); ++r) {
      a->grad.row(r) += n.grad.middleRows(r * k, k).colwise().sum();
    }
  });
}

Value reshape_rowmajor(const Value& a, Eigen::Index rows, Eigen::Index cols) {
  check(a->val.size() == rows * cols, "reshape size mismatch");
  const Eigen::Index src_cols = a->val.cols();
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      Eigen::Index lin = i * cols + j;
      out(i, j) = a->val(lin / src_cols, lin % src_cols);
    }
  }
  return make_node(std::move(out), {a}, [a, rows, cols, src_cols](Node& n) {
    a->ensure_grad();
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        Eigen::Index lin = i * cols + j;
        a->grad(lin / src_cols, lin % src_cols) += n.grad(i, j);
      }
    }
  });
}

Value mean_all(const Value& a) {
  double inv = 1.0 / static_cast<double>(a->val.size());
  Eigen::MatrixXd out(1, 1);
  out(0, 0) = a->val.sum() * inv;
  return make_node(std::move(out), {a}, [a, inv](Node& n) {
    a->ensure_grad();
    a->grad.array() += n.grad(0, 0) * inv;
  });
}

Value mse(const Value& a, const Value& b) {
  check(a->val.rows() == b->val.rows() && a->val.cols() == b->val.cols(), "mse shape mismatch");
  Eigen::MatrixXd diff = a->val - b->val;
  double inv = 1.0 / static_cast<double>(diff.size());
  Eigen::MatrixXd out(1, 1);
  out(0, 0) = diff.squaredNorm() * inv;
  return make_node(std::move(out), {a, b}, [a, b, diff = std::move(diff), inv](Node& n) {
    double g = 2.0 * inv * n.grad(0, 0);
    if (a->needs_grad) {
      a->ensure_grad();
      a->grad += g * diff;
    }
    if (b->needs_grad) {
      b->ensure_grad();
      b->grad -= g * diff;
    }
  });
}

Value vec_norm(const Value& a) {
  double norm = a->val.norm();
  Eigen::MatrixXd out(1, 1);
  out(0, 0) = norm;
  return make_node(std::move(out), {a}, [a, norm](Node& n) {
    if (norm < 1e-12) return;  // subgradient 0 at the kink
    a->ensure_grad();
    a->grad += (n.grad(0, 0) / norm) * a->val;
  });
}

Value normalize_vec(const Value& a) {
  double norm = a->val.norm();
  check(norm > 1e-12, "normalize_vec: zero norm");
  Eigen::MatrixXd out = a->val / norm;
  return make_node(std::move(out), {a}, [a, norm, unit = out](Node& n) {
    a->ensure_grad();
    double dot = (n.grad.array() * unit.array()).sum();
    a->grad += (n.grad - dot * unit) / norm;
  });
}

Value min_scalar(const Value& a, const Value& b) {
  check(a->val.size() == 1 && b->val.size() == 1, "min_scalar expects scalars");
  bool pick_a = a->val(0, 0) <= b->val(0, 0);
  Eigen::MatrixXd out(1, 1);
  out(0, 0) = pick_a ? a->val(0, 0) : b->val(0, 0);
  return make_node(std::move(out), {a, b}, [a, b, pick_a](Node& n) {
    const Value& target = pick_a ? a : b;
    if (!target->needs_grad) return;
    target->ensure_grad();
    target->grad(0, 0) += n.grad(0, 0);
  });
}

Value lincomb(const std::vector<std::pair<double, Value>>& terms) {
  check(!terms.empty(), "lincomb needs at least one term");
  double sum = 0.0;
  std::vector<Value> parents;
  parents.reserve(terms.size());
  for (const auto& [w, v] : terms) {
    check(v->val.size() == 1, "lincomb expects scalars");
    sum += w * v->val(0, 0);
    parents.push_back(v);
  }
  Eigen::MatrixXd out(1, 1);
  out(0, 0) = sum;
  std::vector<double> weights;
  for (const auto& [w, v] : terms) weights.push_back(w);
  return make_node(std::move(out), std::move(parents),
                   [terms, weights = std::move(weights)](Node& n) {
                     for (std::size_t i = 0; i < terms.size(); ++i) {
                       const Value& v = terms[i].second;
                       if (!v->needs_grad) continue;
                       v->ensure_grad();
                       v->grad(0, 0) += weights[i] * n.grad(0, 0);
                     }
                   });
}

namespace {

Eigen::Matrix3d quat_rotation(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// dR/dq_k for the quadratic quaternion-to-matrix map.
std::array<Eigen::Matrix3d, 4> quat_rotation_jacobian(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  std::array<Eigen::Matrix3d, 4> d;
  d[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  d[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  d[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  d[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  return d;
}

// c = a * b as c_col = L(a) b_col = R(b) a_col.
Eigen::Matrix4d quat_left(const Eigen::Vector4d& a) {
  Eigen::Matrix4d m;
  m << a[0], -a[1], -a[2], -a[3],
       a[1], a[0], -a[3], a[2],
       a[2], a[3], a[0], -a[1],
       a[3], -a[2], a[1], a[0];
  return m;
}

Eigen::Matrix4d quat_right(const Eigen::Vector4d& b) {
  Eigen::Matrix4d m;
  m << b[0], -b[1], -b[2], -b[3],
       b[1], b[0], b[3], -b[2],
       b[2], -b[3], b[0], b[1],
       b[3], b[2], -b[1], b[0];
  return m;
}

}  // namespace

Value rotate_points(const Value& points, const Value& q) {
  check(points->val.cols() == 3, "rotate_points expects Nx3");
  check(q->val.rows() == 1 && q->val.cols() == 4, "rotate_points expects 1x4 quaternion");
  Eigen::Vector4d qv = q->val.row(0);
  Eigen::Matrix3d r = quat_rotation(qv);
  return make_node(points->val * r.transpose(), {points, q}, [points, q, qv, r](Node& n) {
    if (points->needs_grad) {
      points->ensure_grad();
      points->grad.noalias() += n.grad * r;
    }
    if (q->needs_grad) {
      q->ensure_grad();
      Eigen::Matrix3d gr = n.grad.transpose() * points->val;  // dL/dR
      auto jac = quat_rotation_jacobian(qv);
      for (int k = 0; k < 4; ++k) {
        q->grad(0, k) += (gr.array() * jac[static_cast<std::size_t>(k)].array()).sum();
      }
    }
  });
}

Value quat_mul(const Value& a, const Value& b) {
  check(a->val.size() == 4 && b->val.size() == 4, "quat_mul expects 1x4 inputs");
  Eigen::Vector4d av = a->val.row(0), bv = b->val.row(0);
  Eigen::Vector4d cv = quat_left(av) * bv;
  Eigen::MatrixXd out = cv.transpose();
  return make_node(std::move(out), {a, b}, [a, b, av, bv](Node& n) {
    Eigen::Vector4d g = n.grad.row(0);
    if (a->needs_grad) {
      a->ensure_grad();
      a->grad.row(0) += (quat_right(bv).transpose() * g).transpose();
    }
    if (b->needs_grad) {
      b->ensure_grad();
      b->grad.row(0) += (quat_left(av).transpose() * g).transpose();
    }
  });
}

Value quat_conj(const Value& q) {
  check(q->val.size() == 4, "quat_conj expects 1x4");
  Eigen::MatrixXd out = q->val;
  out(0, 1) = -out(0, 1);
  out(0, 2) = -out(0, 2);
  out(0, 3) = -out(0, 3);
  return make_node(std::move(out), {q}, [q](Node& n) {
    q->ensure_grad();
    q->grad(0, 0) += n.grad(0, 0);
    q->grad(0, 1) -= n.grad(0, 1);
    q->grad(0, 2) -= n.grad(0, 2);
    q->grad(0, 3) -= n.grad(0, 3);
  });
}

Value matched_mean_dist(const Value& a, const Value& b, const std::vector<std::size_t>& plan) {
  check(a->val.rows() == b->val.rows(), "matched_mean_dist cardinality mismatch");
  check(plan.size() == static_cast<std::size_t>(a->val.rows()), "plan size mismatch");
  const Eigen::Index n = a->val.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    total += (a->val.row(i) - b->val.row(static_cast<Eigen::Index>(plan[static_cast<std::size_t>(i)]))).norm();
  }
  Eigen::MatrixXd out(1, 1);
  out(0, 0) = total / static_cast<double>(n);
  return make_node(std::move(out), {a, b}, [a, b, plan](Node& nd) {
    const Eigen::Index n2 = a->val.rows();
    double g = nd.grad(0, 0) / static_cast<double>(n2);
    if (a->needs_grad) a->ensure_grad();
    if (b->needs_grad) b->ensure_grad();
    for (Eigen::Index i = 0; i < n2; ++i) {
      Eigen::Index j = static_cast<Eigen::Index>(plan[static_cast<std::size_t>(i)]);
      Eigen::RowVector3d diff = a->val.row(i) - b->val.row(j);
      double d = diff.norm();
      if (d < 1e-12) continue;
      Eigen::RowVector3d dir = (g / d) * diff;
      if (a->needs_grad) a->grad.row(i) += dir;
      if (b->needs_grad) b->grad.row(j) -= dir;
    }
  });
}

void backward(const Value& loss) {
  if (loss->val.size() != 1) throw InvalidArgument("backward: loss must be scalar");
  // Collect the reachable subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.get()};
  seen.insert(loss.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const Value& p : n->parents) {
      if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
  loss->ensure_grad();
  loss->grad(0, 0) = 1.0;
  for (Node* n : order) {
    if (n->backfn && n->has_grad()) n->backfn(*n);
  }
}

}  // namespace ctf::ad
