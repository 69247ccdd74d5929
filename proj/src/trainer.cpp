#include "ctflow/trainer.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <numeric>

namespace ctf {

FlowMode flow_mode_from_string(const std::string& s) {
  if (s == "two_flow") return FlowMode::two_flow;
  if (s == "cr_only") return FlowMode::cr_only;
  if (s == "rc_only") return FlowMode::rc_only;
  throw InvalidArgument("unknown flow mode: " + s);
}

std::string to_string(FlowMode mode) {
  switch (mode) {
    case FlowMode::two_flow: return "two_flow";
    case FlowMode::cr_only: return "cr_only";
    case FlowMode::rc_only: return "rc_only";
  }
  return "?";
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{
      {"seed", seed},
      {"iterations", iterations},
      {"batch_size", batch_size},
      {"learning_rate", learning_rate},
      {"warmup_steps", warmup_steps},
      {"clip_norm", clip_norm},
      {"val_every", val_every},
      {"checkpoint_every", checkpoint_every},
      {"flow_mode", ctf::to_string(flow_mode)},
      {"ablation",
       {{"no_ls_o", ablation.no_ls_o},
        {"no_ls_c", ablation.no_ls_c},
        {"no_ls_r", ablation.no_ls_r},
        {"no_ls_t", ablation.no_ls_t}}},
      {"model",
       {{"n_points", model.n_points},
        {"levels", {model.levels[0], model.levels[1], model.levels[2]}},
        {"width_scale", model.width_scale}}},
      {"loss_weights",
       {{"w_c_cr", weights.w_c_cr},
        {"w_o_cr", weights.w_o_cr},
        {"w_c_rc", weights.w_c_rc},
        {"w_o_rc", weights.w_o_rc},
        {"w_r_cr", weights.w_r_cr},
        {"w_r_rc", weights.w_r_rc},
        {"w_so", weights.w_so},
        {"w_sc", weights.w_sc},
        {"w_sr", weights.w_sr},
        {"w_st", weights.w_st}}},
      {"category", category},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.seed = j.value("seed", c.seed);
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.val_every = j.value("val_every", c.val_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (j.contains("flow_mode")) c.flow_mode = flow_mode_from_string(j.at("flow_mode"));
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    c.ablation.no_ls_o = a.value("no_ls_o", false);
    c.ablation.no_ls_c = a.value("no_ls_c", false);
    c.ablation.no_ls_r = a.value("no_ls_r", false);
    c.ablation.no_ls_t = a.value("no_ls_t", false);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.n_points = m.value("n_points", c.model.n_points);
    if (m.contains("levels")) {
      const auto& l = m.at("levels");
      for (int i = 0; i < 3; ++i) c.model.levels[static_cast<std::size_t>(i)] = l[i].get<int>();
    }
    c.model.width_scale = m.value("width_scale", c.model.width_scale);
  }
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.weights.w_c_cr = w.value("w_c_cr", c.weights.w_c_cr);
    c.weights.w_o_cr = w.value("w_o_cr", c.weights.w_o_cr);
    c.weights.w_c_rc = w.value("w_c_rc", c.weights.w_c_rc);
    c.weights.w_o_rc = w.value("w_o_rc", c.weights.w_o_rc);
    c.weights.w_r_cr = w.value("w_r_cr", c.weights.w_r_cr);
    c.weights.w_r_rc = w.value("w_r_rc", c.weights.w_r_rc);
    c.weights.w_so = w.value("w_so", c.weights.w_so);
    c.weights.w_sc = w.value("w_sc", c.weights.w_sc);
    c.weights.w_sr = w.value("w_sr", c.weights.w_sr);
    c.weights.w_st = w.value("w_st", c.weights.w_st);
  }
  c.category = j.value("category", c.category);
  c.model.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("TrainConfig::load: cannot open " + path.string());
  return from_json(nlohmann::json::parse(in));
}

namespace {

Eigen::MatrixXd view_of(const PointCloud& pc, int target) {
  if (static_cast<int>(pc.size()) == target) return pc.matrix();
  if (static_cast<int>(pc.size()) < target) {
    throw InvalidArgument("make_train_sample: dataset cloud smaller than model size");
  }
  Eigen::MatrixXd m = pc.matrix();
  std::vector<std::size_t> idx = fps_indices(m, static_cast<std::size_t>(target), 0);
  Eigen::MatrixXd out(target, 3);
  for (int i = 0; i < target; ++i) out.row(i) = m.row(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(i)]));
  return out;
}

std::array<Eigen::MatrixXd, 3> level_views(const LevelTriple& levels, const ModelConfig& model) {
  std::array<Eigen::MatrixXd, 3> out;
  for (int l = 0; l < 3; ++l) out[static_cast<std::size_t>(l)] =
      view_of(levels[static_cast<std::size_t>(l)], model.levels[static_cast<std::size_t>(l)]);
  return out;
}

Eigen::Vector4d quat_vec(const UnitQuaternion& q) { return {q.w, q.x, q.y, q.z}; }

UnitQuaternion quat_of_row(const Eigen::MatrixXd& m) {
  return quat_normalize(m(0, 0), m(0, 1), m(0, 2), m(0, 3));
}

}  // namespace

TrainSample make_train_sample(const ScanPair& pair, const ModelConfig& model, std::string id,
                              std::string category) {
  model.validate();
  TrainSample s;
  s.id = std::move(id);
  s.category = std::move(category);
  s.p1 = view_of(pair.p1, model.n_points);
  s.p2 = view_of(pair.p2, model.n_points);
  s.gt_cr_1 = level_views(pair.gt_missing_cr_1, model);
  s.gt_cr_2 = level_views(pair.gt_missing_cr_2, model);
  s.gt_rc_1 = level_views(pair.gt_missing_rc_1, model);
  s.gt_rc_2 = level_views(pair.gt_missing_rc_2, model);
  s.r1o_gt = quat_vec(pair.r1o_gt);
  s.r2o_gt = quat_vec(pair.r2o_gt);
  s.m12_gt = pair.m12_gt;
  s.m21_gt = pair.m21_gt;
  return s;
}

std::vector<std::size_t> ChoiceCache::take(
    const std::function<std::vector<std::size_t>()>& compute) {
  if (replay) {
    if (cursor >= sets.size()) throw Error("ChoiceCache: replay ran past the recorded choices");
    return sets[cursor++];
  }
  sets.push_back(compute());
  return sets.back();
}

void ChoiceCache::rewind() {
  replay = true;
  cursor = 0;
}

// --- flow graphs --------------------------------------------------------------

namespace {

using ad::Value;

Value apply_transform_graph(const Value& pts, const nets::TransformValue& m) {
  return ad::add_rowvec(ad::rotate_points(pts, m.q), m.t);
}

nets::TransformValue compose_graph(const nets::TransformValue& a, const nets::TransformValue& b) {
  return {ad::quat_mul(a.q, b.q), ad::add(ad::rotate_points(b.t, a.q), a.t)};
}

nets::TransformValue identity_graph() {
  Eigen::MatrixXd q(1, 4), t(1, 3);
  q << 1, 0, 0, 0;
  t.setZero();
  return {ad::constant(q), ad::constant(t)};
}

nets::TransformValue constant_graph(const RigidTransform& m) {
  Eigen::MatrixXd q(1, 4), t(1, 3);
  q << m.rotation.w, m.rotation.x, m.rotation.y, m.rotation.z;
  t << m.translation[0], m.translation[1], m.translation[2];
  return {ad::constant(q), ad::constant(t)};
}

Value dist_q_graph(const Value& q1, const Value& q2) {
  return ad::min_scalar(ad::vec_norm(ad::add_scaled(q1, q2, -1.0)),
                        ad::vec_norm(ad::add(q1, q2)));
}

Value dist_m_graph(const nets::TransformValue& a, const nets::TransformValue& b) {
  return ad::lincomb({{1.0, dist_q_graph(a.q, b.q)}, {1.0, ad::mse(a.t, b.t)}});
}

Value emd_graph(const Value& a, const Value& b, ChoiceCache& cache) {
  std::vector<std::size_t> plan = cache.take([&]() {
    std::vector<std::size_t> p;
    emd_approx(a->val, b->val, 40, &p);
    return p;
  });
  return ad::matched_mean_dist(a, b, plan);
}

Value d_emd_multilevel_graph(const std::array<Value, 3>& gen,
                             const std::array<Eigen::MatrixXd, 3>& gt, ChoiceCache& cache) {
  std::vector<std::pair<double, Value>> terms;
  for (int l = 0; l < 3; ++l) {
    terms.emplace_back(1.0 / 3.0,
                       emd_graph(gen[static_cast<std::size_t>(l)],
                                 ad::constant(gt[static_cast<std::size_t>(l)]), cache));
  }
  return ad::lincomb(terms);
}

Value half_sum(const Value& a, const Value& b) {
  return ad::lincomb({{0.5, a}, {0.5, b}});
}

}  // namespace

FlowGraph run_cr_flow(const nets::Workspace& ws, const TrainSample& sample, ChoiceCache& cache) {
  Value p1 = ad::constant(sample.p1);
  Value p2 = ad::constant(sample.p2);
  nets::CompletionResult c1 = nets::complete(ws, p1);
  nets::CompletionResult c2 = nets::complete(ws, p2);
  const std::size_t n = static_cast<std::size_t>(ws.config.n_points);
  // The registered clouds keep the flows' common size: completions are halved.
  Value s1d = ad::gather_rows(c1.s, cache.take([&]() { return fps_indices(c1.s->val, n, 0); }));
  Value s2d = ad::gather_rows(c2.s, cache.take([&]() { return fps_indices(c2.s->val, n, 0); }));
  nets::RegisterPairResult reg = nets::register_pair(ws, s1d, s2d);
  FlowGraph g;
  g.s1 = c1.s;
  g.s2 = c2.s;
  g.g1 = c1.levels_out;
  g.g2 = c2.levels_out;
  g.r1o = c1.r_o;
  g.r2o = c2.r_o;
  g.m12 = reg.m12;
  g.m21 = reg.m21;
  g.comp_in_1 = p1;
  g.comp_in_2 = p2;
  return g;
}

FlowGraph run_rc_flow(const nets::Workspace& ws, const TrainSample& sample, ChoiceCache& cache) {
  Value p1 = ad::constant(sample.p1);
  Value p2 = ad::constant(sample.p2);
  nets::RegisterPairResult reg = nets::register_pair(ws, p1, p2);
  const std::size_t n = static_cast<std::size_t>(ws.config.n_points);

  Value u1 = ad::concat_rows(p1, apply_transform_graph(p2, reg.m21));
  Value u1d = ad::gather_rows(u1, cache.take([&]() { return fps_indices(u1->val, n, 0); }));
  nets::CompletionResult c1 = nets::complete(ws, u1d);

  Value u2 = ad::concat_rows(p2, apply_transform_graph(p1, reg.m12));
  Value u2d = ad::gather_rows(u2, cache.take([&]() { return fps_indices(u2->val, n, 0); }));
  nets::CompletionResult c2 = nets::complete(ws, u2d);

  FlowGraph g;
  g.s1 = c1.s;
  g.s2 = c2.s;
  g.g1 = c1.levels_out;
  g.g2 = c2.levels_out;
  g.r1o = c1.r_o;
  g.r2o = c2.r_o;
  g.m12 = reg.m12;
  g.m21 = reg.m21;
  g.comp_in_1 = u1d;
  g.comp_in_2 = u2d;
  return g;
}

FlowOutputs materialize(const FlowGraph& g) {
  FlowOutputs o;
  o.s1 = g.s1->val;
  o.s2 = g.s2->val;
  for (int l = 0; l < 3; ++l) {
    o.g1[static_cast<std::size_t>(l)] = g.g1[static_cast<std::size_t>(l)]->val;
    o.g2[static_cast<std::size_t>(l)] = g.g2[static_cast<std::size_t>(l)]->val;
  }
  o.r1o = quat_of_row(g.r1o->val);
  o.r2o = quat_of_row(g.r2o->val);
  o.m12 = nets::to_transform(g.m12);
  o.m21 = nets::to_transform(g.m21);
  o.comp_in_1 = g.comp_in_1->val;
  o.comp_in_2 = g.comp_in_2->val;
  return o;
}

// --- loss graphs ---------------------------------------------------------------

double weighted_completion(const LossTerms& t, const LossWeights& w) {
  return w.w_c_cr * t.l_c_cr + w.w_o_cr * t.l_o_cr + w.w_c_rc * t.l_c_rc + w.w_o_rc * t.l_o_rc;
}

double weighted_registration(const LossTerms& t, const LossWeights& w) {
  return w.w_r_cr * t.l_r_cr + w.w_r_rc * t.l_r_rc;
}

double weighted_consistency(const LossTerms& t, const LossWeights& w) {
  return w.w_so * t.l_s_o + w.w_sc * t.l_s_c + w.w_sr * t.l_s_r + w.w_st * t.l_s_t;
}

double weighted_total(const LossTerms& t, const LossWeights& w) {
  return weighted_completion(t, w) + weighted_registration(t, w) + weighted_consistency(t, w);
}

SampleLoss sample_loss_graph(const nets::Workspace& ws, const TrainSample& sample,
                             const TrainConfig& config, ChoiceCache& cache) {
  const bool use_cr = config.flow_mode != FlowMode::rc_only;
  const bool use_rc = config.flow_mode != FlowMode::cr_only;
  const LossWeights& w = config.weights;

  std::optional<FlowGraph> cr, rc;
  if (use_cr) cr = run_cr_flow(ws, sample, cache);
  if (use_rc) rc = run_rc_flow(ws, sample, cache);

  Value gt_r1o = ad::constant(sample.r1o_gt.transpose());
  Value gt_r2o = ad::constant(sample.r2o_gt.transpose());
  nets::TransformValue gt12 = constant_graph(sample.m12_gt);
  nets::TransformValue gt21 = constant_graph(sample.m21_gt);

  SampleLoss out;
  std::vector<std::pair<double, Value>> total_terms;
  auto push = [&](double weight, const Value& v, double& slot) {
    slot = v->scalar();
    total_terms.emplace_back(weight, v);
  };

  if (use_cr) {
    push(w.w_c_cr,
         half_sum(d_emd_multilevel_graph(cr->g1, sample.gt_cr_1, cache),
                  d_emd_multilevel_graph(cr->g2, sample.gt_cr_2, cache)),
         out.terms.l_c_cr);
    push(w.w_o_cr,
         half_sum(dist_q_graph(cr->r1o, gt_r1o), dist_q_graph(cr->r2o, gt_r2o)),
         out.terms.l_o_cr);
    push(w.w_r_cr, half_sum(dist_m_graph(cr->m12, gt12), dist_m_graph(cr->m21, gt21)),
         out.terms.l_r_cr);
  }
  if (use_rc) {
    push(w.w_c_rc,
         half_sum(d_emd_multilevel_graph(rc->g1, sample.gt_rc_1, cache),
                  d_emd_multilevel_graph(rc->g2, sample.gt_rc_2, cache)),
         out.terms.l_c_rc);
    push(w.w_o_rc,
         half_sum(dist_q_graph(rc->r1o, gt_r1o), dist_q_graph(rc->r2o, gt_r2o)),
         out.terms.l_o_rc);
    push(w.w_r_rc, half_sum(dist_m_graph(rc->m12, gt12), dist_m_graph(rc->m21, gt21)),
         out.terms.l_r_rc);
  }
  if (use_cr && use_rc) {
    const std::size_t n = static_cast<std::size_t>(ws.config.n_points);
    const AblationFlags& a = config.ablation;
    if (!a.no_ls_o) {
      push(w.w_so, half_sum(dist_q_graph(cr->r1o, rc->r1o), dist_q_graph(cr->r2o, rc->r2o)),
           out.terms.l_s_o);
    }
    if (!a.no_ls_c) {
      // Completions compared in each flow's own canonical frame at the shared
      // cloud size.
      auto canon_ds = [&](const Value& s, const Value& r_o) {
        Value mapped = ad::rotate_points(s, r_o);
        return ad::gather_rows(mapped,
                               cache.take([&]() { return fps_indices(mapped->val, n, 0); }));
      };
      Value c1 = emd_graph(canon_ds(cr->s1, cr->r1o), canon_ds(rc->s1, rc->r1o), cache);
      Value c2 = emd_graph(canon_ds(cr->s2, cr->r2o), canon_ds(rc->s2, rc->r2o), cache);
      push(w.w_sc, half_sum(c1, c2), out.terms.l_s_c);
    }
    if (!a.no_ls_r) {
      push(w.w_sr, half_sum(dist_m_graph(cr->m12, rc->m12), dist_m_graph(cr->m21, rc->m21)),
           out.terms.l_s_r);
    }
    if (!a.no_ls_t) {
      nets::TransformValue id = identity_graph();
      push(w.w_st,
           half_sum(dist_m_graph(compose_graph(cr->m12, cr->m21), id),
                    dist_m_graph(compose_graph(rc->m12, rc->m21), id)),
           out.terms.l_s_t);
    }
  }
  out.total = ad::lincomb(total_terms);
  return out;
}

// --- plain loss path -------------------------------------------------------------

namespace {

LevelTriple to_levels(const std::array<Eigen::MatrixXd, 3>& m) {
  return {PointCloud::from_matrix(m[0]), PointCloud::from_matrix(m[1]),
          PointCloud::from_matrix(m[2])};
}

double dist_q_vec(const UnitQuaternion& q, const Eigen::Vector4d& gt) {
  return dist_q(q, quat_normalize(gt[0], gt[1], gt[2], gt[3]));
}

double flow_completion_term(const FlowOutputs& f, const std::array<Eigen::MatrixXd, 3>& gt1,
                            const std::array<Eigen::MatrixXd, 3>& gt2) {
  return 0.5 * (d_emd_multilevel(to_levels(f.g1), to_levels(gt1)) +
                d_emd_multilevel(to_levels(f.g2), to_levels(gt2)));
}

double flow_orientation_term(const FlowOutputs& f, const TrainSample& s) {
  return 0.5 * (dist_q_vec(f.r1o, s.r1o_gt) + dist_q_vec(f.r2o, s.r2o_gt));
}

double flow_registration_term(const FlowOutputs& f, const TrainSample& s) {
  return 0.5 * (dist_m(f.m12, s.m12_gt) + dist_m(f.m21, s.m21_gt));
}

PointCloud canonical_downsampled(const Eigen::MatrixXd& s, const UnitQuaternion& r_o, int n) {
  Eigen::MatrixXd mapped = s * quat_to_matrix(r_o).transpose();
  std::vector<std::size_t> idx = fps_indices(mapped, static_cast<std::size_t>(n), 0);
  Eigen::MatrixXd out(n, 3);
  for (int i = 0; i < n; ++i) out.row(i) = mapped.row(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(i)]));
  return PointCloud::from_matrix(out);
}

}  // namespace

double completion_loss(const FlowOutputs* cr, const FlowOutputs* rc, const TrainSample& sample,
                       const LossWeights& w, LossTerms* terms) {
  LossTerms t;
  if (cr) {
    t.l_c_cr = flow_completion_term(*cr, sample.gt_cr_1, sample.gt_cr_2);
    t.l_o_cr = flow_orientation_term(*cr, sample);
  }
  if (rc) {
    t.l_c_rc = flow_completion_term(*rc, sample.gt_rc_1, sample.gt_rc_2);
    t.l_o_rc = flow_orientation_term(*rc, sample);
  }
  if (terms) {
    terms->l_c_cr = t.l_c_cr;
    terms->l_o_cr = t.l_o_cr;
    terms->l_c_rc = t.l_c_rc;
    terms->l_o_rc = t.l_o_rc;
  }
  return weighted_completion(t, w);
}

double registration_loss(const FlowOutputs* cr, const FlowOutputs* rc, const TrainSample& sample,
                         const LossWeights& w, LossTerms* terms) {
  LossTerms t;
  if (cr) t.l_r_cr = flow_registration_term(*cr, sample);
  if (rc) t.l_r_rc = flow_registration_term(*rc, sample);
  if (terms) {
    terms->l_r_cr = t.l_r_cr;
    terms->l_r_rc = t.l_r_rc;
  }
  return weighted_registration(t, w);
}

double consistency_loss(const FlowOutputs& cr, const FlowOutputs& rc, int n_points,
                        const LossWeights& w, const AblationFlags& ablation, LossTerms* terms) {
  LossTerms t;
  if (!ablation.no_ls_o) {
    t.l_s_o = 0.5 * (dist_q(cr.r1o, rc.r1o) + dist_q(cr.r2o, rc.r2o));
  }
  if (!ablation.no_ls_c) {
    double c1 = emd_approx(canonical_downsampled(cr.s1, cr.r1o, n_points),
                           canonical_downsampled(rc.s1, rc.r1o, n_points));
    double c2 = emd_approx(canonical_downsampled(cr.s2, cr.r2o, n_points),
                           canonical_downsampled(rc.s2, rc.r2o, n_points));
    t.l_s_c = 0.5 * (c1 + c2);
  }
  if (!ablation.no_ls_r) {
    t.l_s_r = 0.5 * (dist_m(cr.m12, rc.m12) + dist_m(cr.m21, rc.m21));
  }
  if (!ablation.no_ls_t) {
    RigidTransform id;
    t.l_s_t = 0.5 * (dist_m(compose(cr.m12, cr.m21), id) + dist_m(compose(rc.m12, rc.m21), id));
  }
  if (terms) {
    terms->l_s_o = t.l_s_o;
    terms->l_s_c = t.l_s_c;
    terms->l_s_r = t.l_s_r;
    terms->l_s_t = t.l_s_t;
  }
  return weighted_consistency(t, w);
}

// --- training loop -----------------------------------------------------------------

namespace {

struct AdamState {
  std::vector<Eigen::MatrixXd> m, v;
  std::int64_t t = 0;

  void init(const ParamSet& params) {
    for (const auto& [name, tensor] : params.tensors) {
      m.push_back(Eigen::MatrixXd::Zero(tensor.rows(), tensor.cols()));
      v.push_back(Eigen::MatrixXd::Zero(tensor.rows(), tensor.cols()));
    }
  }
};

void adam_step(ParamSet& params, const std::vector<Eigen::MatrixXd>& grads, AdamState& state,
               double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++state.t;
  double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    Eigen::MatrixXd& theta = params.tensors[k].second;
    state.m[k] = b1 * state.m[k] + (1.0 - b1) * grads[k];
    state.v[k] = b2 * state.v[k] + (1.0 - b2) * grads[k].cwiseProduct(grads[k]);
    Eigen::MatrixXd mhat = state.m[k] / c1;
    Eigen::MatrixXd vhat = state.v[k] / c2;
    theta -= lr * mhat.cwiseQuotient(vhat.cwiseSqrt().array().matrix() +
                                     Eigen::MatrixXd::Constant(theta.rows(), theta.cols(), eps));
  }
}

struct LoadedDataset {
  std::vector<TrainSample> train, val;
  std::vector<std::string> val_ids;
};

LoadedDataset load_for_training(const std::filesystem::path& dataset_dir,
                                const TrainConfig& config) {
  DatasetManifest manifest = read_manifest(dataset_dir);
  LoadedDataset data;
  for (const DatasetEntry& e : manifest.samples) {
    if (!config.category.empty() && e.category != config.category) continue;
    if (e.split == "test") continue;
    ScanPair pair = read_sample(dataset_dir, e.id);
    TrainSample s = make_train_sample(pair, config.model, e.id, e.category);
    if (e.split == "train") {
      data.train.push_back(std::move(s));
    } else {
      data.val.push_back(std::move(s));
      data.val_ids.push_back(e.id);
    }
  }
  if (data.train.empty()) throw InvalidArgument("train: no training samples in dataset");
  return data;
}

void append_terms(LossTerms& acc, const LossTerms& t, double scale) {
  acc.l_c_cr += scale * t.l_c_cr;
  acc.l_o_cr += scale * t.l_o_cr;
  acc.l_c_rc += scale * t.l_c_rc;
  acc.l_o_rc += scale * t.l_o_rc;
  acc.l_r_cr += scale * t.l_r_cr;
  acc.l_r_rc += scale * t.l_r_rc;
  acc.l_s_o += scale * t.l_s_o;
  acc.l_s_c += scale * t.l_s_c;
  acc.l_s_r += scale * t.l_s_r;
  acc.l_s_t += scale * t.l_s_t;
}

double dataset_loss(const ParamSet& params, const TrainConfig& config,
                    const std::vector<TrainSample>& samples) {
  double total = 0.0;
  nets::Workspace ws = nets::bind(params, config.model, /*trainable=*/false);
  for (const TrainSample& s : samples) {
    ChoiceCache cache;
    SampleLoss loss = sample_loss_graph(ws, s, config, cache);
    total += loss.total->scalar();
  }
  return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
}

}  // namespace

TrainResult train(const std::filesystem::path& dataset_dir, const TrainConfig& config,
                  const std::filesystem::path& out_dir,
                  const std::filesystem::path& resume_from) {
  config.model.validate();
  std::filesystem::create_directories(out_dir);
  LoadedDataset data = load_for_training(dataset_dir, config);

  ParamSet params;
  std::int64_t start_iteration = 0;
  if (!resume_from.empty()) {
    Checkpoint ck = load_checkpoint(resume_from);
    if (!(ck.config == config.model)) {
      throw SchemaError("train: resume checkpoint model config does not match");
    }
    params = std::move(ck.params);
    start_iteration = ck.iteration;
  } else {
    params = init_params(config.model, config.seed);
  }

  AdamState adam;
  adam.init(params);

  std::ofstream log(out_dir / "train_log.csv",
                    start_iteration > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("train: cannot open train_log.csv");
  log.precision(17);
  if (start_iteration == 0) {
    log << "iteration,l_c_cr,l_o_cr,l_c_rc,l_o_rc,l_r_cr,l_r_rc,l_s_o,l_s_c,l_s_r,l_s_t,total\n";
  }

  const std::size_t n_train = data.train.size();
  const std::size_t batch_size = std::min<std::size_t>(
      static_cast<std::size_t>(std::max(1, config.batch_size)), n_train);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t pos = n_train;  // triggers a shuffle on the first batch
  std::uint64_t epoch = 0;

  TrainResult result;
  result.start_iteration = start_iteration;
  double best_val = std::numeric_limits<double>::infinity();

  for (std::int64_t it = start_iteration + 1; it <= start_iteration + config.iterations; ++it) {
    if (pos + batch_size > n_train) {
      Rng shuffle_rng(mix_seed(config.seed ^ 0xba7c4ull, epoch++));
      for (std::size_t i = n_train; i > 1; --i) {
        std::size_t j = shuffle_rng.uniform_index(i);
        std::swap(order[i - 1], order[j]);
      }
      pos = 0;
    }

    nets::Workspace ws = nets::bind(params, config.model, /*trainable=*/true);
    std::vector<std::pair<double, ad::Value>> batch_terms;
    LossTerms mean_terms;
    std::vector<std::string> batch_ids;
    const double inv_b = 1.0 / static_cast<double>(batch_size);
    for (std::size_t k = 0; k < batch_size; ++k) {
      const TrainSample& s = data.train[order[pos + k]];
      batch_ids.push_back(s.id);
      ChoiceCache cache;
      SampleLoss loss = sample_loss_graph(ws, s, config, cache);
      batch_terms.emplace_back(inv_b, loss.total);
      append_terms(mean_terms, loss.terms, inv_b);
    }
    pos += batch_size;
    ad::Value total = ad::lincomb(batch_terms);
    double total_value = total->scalar();

    if (!std::isfinite(total_value)) {
      nlohmann::json diag{{"iteration", it},
                          {"samples", batch_ids},
                          {"terms",
                           {{"l_c_cr", mean_terms.l_c_cr},
                            {"l_o_cr", mean_terms.l_o_cr},
                            {"l_c_rc", mean_terms.l_c_rc},
                            {"l_o_rc", mean_terms.l_o_rc},
                            {"l_r_cr", mean_terms.l_r_cr},
                            {"l_r_rc", mean_terms.l_r_rc},
                            {"l_s_o", mean_terms.l_s_o},
                            {"l_s_c", mean_terms.l_s_c},
                            {"l_s_r", mean_terms.l_s_r},
                            {"l_s_t", mean_terms.l_s_t}}}};
      std::ofstream dump(out_dir / "nan_diagnostic.json");
      dump << diag.dump(2) << "\n";
      throw Error("train: non-finite loss at iteration " + std::to_string(it) +
                  "; diagnostic written to nan_diagnostic.json");
    }

    ad::backward(total);

    std::vector<Eigen::MatrixXd> grads;
    grads.reserve(params.tensors.size());
    double sq_norm = 0.0;
    for (const auto& [name, tensor] : params.tensors) {
      const ad::Value& leaf = ws.leaves.at(name);
      if (leaf->has_grad()) {
        grads.push_back(leaf->grad);
      } else {
        grads.push_back(Eigen::MatrixXd::Zero(tensor.rows(), tensor.cols()));
      }
      sq_norm += grads.back().squaredNorm();
    }
    double gnorm = std::sqrt(sq_norm);
    if (config.clip_norm > 0.0 && gnorm > config.clip_norm) {
      double scale = config.clip_norm / gnorm;
      for (Eigen::MatrixXd& g : grads) g *= scale;
    }

    double lr = config.learning_rate;
    if (config.warmup_steps > 0) {
      lr *= std::min(1.0, static_cast<double>(it) / static_cast<double>(config.warmup_steps));
    }
    adam_step(params, grads, adam, lr);

    log << it << ',' << mean_terms.l_c_cr << ',' << mean_terms.l_o_cr << ',' << mean_terms.l_c_rc
        << ',' << mean_terms.l_o_rc << ',' << mean_terms.l_r_cr << ',' << mean_terms.l_r_rc << ','
        << mean_terms.l_s_o << ',' << mean_terms.l_s_c << ',' << mean_terms.l_s_r << ','
        << mean_terms.l_s_t << ',' << total_value << '\n';
    result.total_per_iteration.push_back(total_value);

    if (config.val_every > 0 && it % config.val_every == 0) {
      const std::vector<TrainSample>& val_set = data.val.empty() ? data.train : data.val;
      double val_loss = dataset_loss(params, config, val_set);
      log_info("iteration " + std::to_string(it) + ": train total " + std::to_string(total_value) +
               ", validation total " + std::to_string(val_loss));
      if (val_loss < best_val) {
        best_val = val_loss;
        save_checkpoint(out_dir / "checkpoint_best", params, config.model, config.seed, it);
      }
    }
    if (config.checkpoint_every > 0 && it % config.checkpoint_every == 0) {
      save_checkpoint(out_dir / "checkpoint_latest", params, config.model, config.seed, it);
    }
  }

  result.end_iteration = start_iteration + config.iterations;
  save_checkpoint(out_dir / "checkpoint_final", params, config.model, config.seed,
                  result.end_iteration);
  result.final_checkpoint = out_dir / "checkpoint_final";
  result.best_checkpoint = std::filesystem::exists(out_dir / "checkpoint_best" / "manifest.json")
                               ? out_dir / "checkpoint_best"
                               : result.final_checkpoint;

  // Final validation record: registration from the C-R flow, completion from
  // the R-C flow (each flow's stronger end).
  const std::vector<std::string>* eval_ids = &data.val_ids;
  std::vector<std::string> train_ids;
  if (eval_ids->empty()) {
    for (const TrainSample& s : data.train) train_ids.push_back(s.id);
    eval_ids = &train_ids;
  }
  EvalFlowChoice choice{"cr", "rc", false};
  EvalRecord sum;
  std::size_t count = 0;
  for (const std::string& id : *eval_ids) {
    ScanPair pair = read_sample(dataset_dir, id);
    sum += evaluate_sample(params, config.model, pair, choice);
    ++count;
  }
  if (count > 0) {
    write_eval_csv(out_dir / "final_val_eval.csv",
                   {{config.category.empty() ? "all" : config.category,
                     sum.scaled(1.0 / static_cast<double>(count)), count}});
  }
  return result;
}

// --- evaluation ----------------------------------------------------------------

EvalRecord evaluate_sample(const ParamSet& params, const ModelConfig& model, const ScanPair& pair,
                           const EvalFlowChoice& choice, const StressSpec* stress,
                           Rng* stress_rng) {
  if (choice.reg_flow != "cr" && choice.reg_flow != "rc") {
    throw InvalidArgument("evaluate_sample: reg_flow must be cr or rc");
  }
  if (choice.comp_flow != "cr" && choice.comp_flow != "rc") {
    throw InvalidArgument("evaluate_sample: comp_flow must be cr or rc");
  }
  TrainSample sample;
  if (stress != nullptr) {
    ScanPair stressed = pair;
    Rng fallback(0);
    Rng& rng = stress_rng ? *stress_rng : fallback;
    stressed.p1 = apply_stress(pair.p1, *stress, rng);
    stressed.p2 = apply_stress(pair.p2, *stress, rng);
    sample = make_train_sample(stressed, model);
  } else {
    sample = make_train_sample(pair, model);
  }

  nets::Workspace ws = nets::bind(params, model, /*trainable=*/false);
  const bool need_cr = choice.comp_flow == "cr" || (!choice.oracle_registration && choice.reg_flow == "cr");
  const bool need_rc = choice.comp_flow == "rc" || (!choice.oracle_registration && choice.reg_flow == "rc");
  std::optional<FlowOutputs> cr, rc;
  ChoiceCache cache;
  if (need_cr) cr = materialize(run_cr_flow(ws, sample, cache));
  if (need_rc) rc = materialize(run_rc_flow(ws, sample, cache));

  EvalRecord record;
  if (choice.oracle_registration) {
    record.e_theta = 0.0;
    record.e_t = 0.0;
  } else {
    const FlowOutputs& reg = choice.reg_flow == "cr" ? *cr : *rc;
    RegistrationErrors re = eval_registration(reg.m12, reg.m21, sample.m12_gt, sample.m21_gt);
    record.e_theta = re.e_theta;
    record.e_t = re.e_t;
  }

  const FlowOutputs& comp = choice.comp_flow == "cr" ? *cr : *rc;
  const auto& gt1 = choice.comp_flow == "cr" ? sample.gt_cr_1 : sample.gt_rc_1;
  const auto& gt2 = choice.comp_flow == "cr" ? sample.gt_cr_2 : sample.gt_rc_2;
  auto vstack = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd out(a.rows() + b.rows(), 3);
    out << a, b;
    return out;
  };
  LevelTriple gen1{PointCloud::from_matrix(comp.g1[0]), PointCloud::from_matrix(comp.g1[1]),
                   PointCloud::from_matrix(comp.g1[2])};
  LevelTriple gen2{PointCloud::from_matrix(comp.g2[0]), PointCloud::from_matrix(comp.g2[1]),
                   PointCloud::from_matrix(comp.g2[2])};
  LevelTriple gtl1{PointCloud::from_matrix(gt1[0]), PointCloud::from_matrix(gt1[1]),
                   PointCloud::from_matrix(gt1[2])};
  LevelTriple gtl2{PointCloud::from_matrix(gt2[0]), PointCloud::from_matrix(gt2[1]),
                   PointCloud::from_matrix(gt2[2])};
  // Ground-truth full shape: the flow's own input plus the true missing part.
  CompletionErrors ce = eval_completion(
      gen1, gen2, PointCloud::from_matrix(comp.s1), PointCloud::from_matrix(comp.s2), gtl1, gtl2,
      PointCloud::from_matrix(vstack(comp.comp_in_1, gt1[2])),
      PointCloud::from_matrix(vstack(comp.comp_in_2, gt2[2])));
  record.e_emd_g = ce.e_emd_g;
  record.e_emd_f = ce.e_emd_f;
  record.e_cd_g = ce.e_cd_g;
  record.e_cd_f = ce.e_cd_f;
  return record;
}

// --- gradient checking ------------------------------------------------------------

GradCheckResult check_gradients(const TrainSample& sample, const TrainConfig& config,
                                int n_probes, std::uint64_t probe_seed) {
  ParamSet params = init_params(config.model, config.seed);
  ChoiceCache cache;
  std::vector<Eigen::MatrixXd> analytic;
  {
    nets::Workspace ws = nets::bind(params, config.model, /*trainable=*/true);
    SampleLoss loss = sample_loss_graph(ws, sample, config, cache);
    ad::backward(loss.total);
    for (const auto& [name, tensor] : params.tensors) {
      const ad::Value& leaf = ws.leaves.at(name);
      analytic.push_back(leaf->has_grad() ? leaf->grad
                                          : Eigen::MatrixXd::Zero(tensor.rows(), tensor.cols()));
    }
  }
  cache.rewind();

  auto loss_at = [&](const ParamSet& p) {
    nets::Workspace ws = nets::bind(p, config.model, /*trainable=*/false);
    cache.cursor = 0;
    SampleLoss loss = sample_loss_graph(ws, sample, config, cache);
    return loss.total->scalar();
  };

  Rng rng(probe_seed);
  const double h = 1e-5;
  GradCheckResult result;
  std::size_t total_entries = params.total_entries();
  for (int probe = 0; probe < n_probes; ++probe) {
    std::size_t flat = rng.uniform_index(total_entries);
    std::size_t tensor_idx = 0;
    for (; tensor_idx < params.tensors.size(); ++tensor_idx) {
      std::size_t sz = static_cast<std::size_t>(params.tensors[tensor_idx].second.size());
      if (flat < sz) break;
      flat -= sz;
    }
    Eigen::MatrixXd& tensor = params.tensors[tensor_idx].second;
    Eigen::Index i = static_cast<Eigen::Index>(flat) / tensor.cols();
    Eigen::Index j = static_cast<Eigen::Index>(flat) % tensor.cols();

    double original = tensor(i, j);
    tensor(i, j) = original + h;
    double up = loss_at(params);
    tensor(i, j) = original - h;
    double down = loss_at(params);
    tensor(i, j) = original;

    double fd = (up - down) / (2.0 * h);
    double an = analytic[tensor_idx](i, j);
    double err = std::abs(fd - an);
    double rel = err / std::max({std::abs(fd), std::abs(an), 1e-12});
    ++result.checked;
    if (err <= 1e-8 || rel <= 1e-2) {
      ++result.passed;
    }
    result.worst_rel = std::max(result.worst_rel, rel);
  }
  return result;
}

}  // namespace ctf
