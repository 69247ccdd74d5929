#include "ctflow/networks.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace ctf {

void ModelConfig::validate() const {
  if (n_points < 4) throw InvalidArgument("ModelConfig: n_points must be >= 4");
  if (width_scale < 1) throw InvalidArgument("ModelConfig: width_scale must be >= 1");
  if (levels[2] != n_points) {
    throw InvalidArgument("ModelConfig: final level must equal n_points");
  }
  for (int l = 0; l < 2; ++l) {
    if (levels[l] < 1 || levels[l + 1] % levels[l] != 0) {
      throw InvalidArgument("ModelConfig: levels must grow by integer factors");
    }
  }
}

Eigen::MatrixXd& ParamSet::at(const std::string& name) {
  for (auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw InvalidArgument("ParamSet: unknown tensor " + name);
}

const Eigen::MatrixXd& ParamSet::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw InvalidArgument("ParamSet: unknown tensor " + name);
}

void ParamSet::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  tensors.emplace_back(name, Eigen::MatrixXd::Zero(rows, cols));
}

std::size_t ParamSet::total_entries() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

namespace {

int scaled(int width, int ws) { return std::max(1, width / ws); }

struct LayerDims {
  std::vector<std::pair<int, int>> layers;  // (in, out) per linear layer
};

LayerDims mlp_dims(const std::vector<int>& widths) {
  LayerDims d;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) d.layers.emplace_back(widths[i], widths[i + 1]);
  return d;
}

struct NetShapes {
  LayerDims reg_encoder, comp_encoder;
  LayerDims rot_head, trans_head, orient_head;
  std::pair<int, int> ctx;
  LayerDims gp_head, gs_child, go_child;
  int reg_feat = 0, comp_feat = 0, ctx_width = 0;
};

NetShapes shapes_for(const ModelConfig& c) {
  c.validate();
  const int ws = c.width_scale;
  NetShapes s;
  s.reg_feat = scaled(512, ws);
  s.comp_feat = scaled(1920, ws);
  s.ctx_width = scaled(256, ws);
  s.reg_encoder = mlp_dims({3, scaled(64, ws), scaled(128, ws), scaled(256, ws), s.reg_feat});
  s.comp_encoder = mlp_dims({3, scaled(64, ws), scaled(128, ws), scaled(256, ws), scaled(512, ws),
                             scaled(1024, ws), s.comp_feat});
  int reg_in = 2 * s.reg_feat;
  s.rot_head = mlp_dims({reg_in, std::max(1, reg_in / 2), std::max(1, reg_in / 4), 4});
  s.trans_head = mlp_dims({reg_in, std::max(1, reg_in / 2), std::max(1, reg_in / 4), 3});
  s.orient_head = mlp_dims({s.comp_feat, std::max(1, s.comp_feat / 2), std::max(1, s.comp_feat / 4), 4});
  s.ctx = {s.comp_feat, s.ctx_width};
  s.gp_head = mlp_dims({s.comp_feat, scaled(960, ws), scaled(480, ws), 3 * c.levels[0]});
  int child_in = 3 + s.ctx_width;
  s.gs_child = mlp_dims({child_in, scaled(128, ws), scaled(64, ws), 3 * (c.levels[1] / c.levels[0])});
  s.go_child = mlp_dims({child_in, scaled(128, ws), scaled(64, ws), 3 * (c.levels[2] / c.levels[1])});
  return s;
}

void add_mlp(ParamSet& p, const std::string& prefix, const LayerDims& dims) {
  for (std::size_t i = 0; i < dims.layers.size(); ++i) {
    auto [in, out] = dims.layers[i];
    p.add(prefix + ".l" + std::to_string(i) + ".w", in, out);
    p.add(prefix + ".l" + std::to_string(i) + ".b", 1, out);
  }
}

}  // namespace

ParamSet init_params(const ModelConfig& config, std::uint64_t seed) {
  NetShapes s = shapes_for(config);
  ParamSet p;
  add_mlp(p, "reg.enc", s.reg_encoder);
  add_mlp(p, "reg.rot", s.rot_head);
  add_mlp(p, "reg.tr", s.trans_head);
  add_mlp(p, "comp.enc", s.comp_encoder);
  add_mlp(p, "comp.orient", s.orient_head);
  p.add("comp.ctx.w", s.ctx.first, s.ctx.second);
  p.add("comp.ctx.b", 1, s.ctx.second);
  add_mlp(p, "comp.gp", s.gp_head);
  add_mlp(p, "comp.gs", s.gs_child);
  add_mlp(p, "comp.go", s.go_child);

  Rng rng(seed);
  for (auto& [name, t] : p.tensors) {
    if (name.ends_with(".b")) continue;  // biases stay zero
    double limit = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = rng.uniform(-limit, limit);
    }
  }
  return p;
}

namespace nets {

ad::Value Workspace::p(const std::string& name) const {
  auto it = leaves.find(name);
  if (it == leaves.end()) throw InvalidArgument("Workspace: unknown tensor " + name);
  return it->second;
}

Workspace bind(const ParamSet& params, const ModelConfig& config, bool trainable) {
  config.validate();
  Workspace ws;
  ws.config = config;
  for (const auto& [name, t] : params.tensors) {
    ws.leaves.emplace(name, trainable ? ad::leaf(t) : ad::constant(t));
  }
  return ws;
}

RigidTransform to_transform(const TransformValue& tv) {
  RigidTransform t;
  t.rotation = quat_normalize(tv.q->val(0, 0), tv.q->val(0, 1), tv.q->val(0, 2), tv.q->val(0, 3));
  t.translation = Vec3(tv.t->val(0, 0), tv.t->val(0, 1), tv.t->val(0, 2));
  return t;
}

namespace {

ad::Value run_mlp(const Workspace& ws, const std::string& prefix, ad::Value h, int n_layers,
                  bool relu_last) {
  for (int i = 0; i < n_layers; ++i) {
    std::string base = prefix + ".l" + std::to_string(i);
    h = ad::add_rowvec(ad::matmul(h, ws.p(base + ".w")), ws.p(base + ".b"));
    if (i + 1 < n_layers || relu_last) h = ad::relu(h);
  }
  return h;
}

ad::Value encode(const Workspace& ws, const std::string& prefix, const ad::Value& points,
                 int n_layers) {
  if (points->val.rows() != ws.config.n_points || points->val.cols() != 3) {
    throw InvalidArgument("encode: expected " + std::to_string(ws.config.n_points) +
                          "x3 cloud, got " + std::to_string(points->val.rows()) + "x" +
                          std::to_string(points->val.cols()));
  }
  ad::Value h = run_mlp(ws, prefix, points, n_layers, /*relu_last=*/true);
  return ad::colwise_max(h);
}

ad::Value quat_head(const Workspace& ws, const std::string& prefix, const ad::Value& feature) {
  return ad::normalize_vec(run_mlp(ws, prefix, feature, 3, /*relu_last=*/false));
}

}  // namespace

ad::Value encode_reg(const Workspace& ws, const ad::Value& points) {
  return encode(ws, "reg.enc", points, 4);
}

ad::Value encode_comp(const Workspace& ws, const ad::Value& points) {
  return encode(ws, "comp.enc", points, 6);
}

namespace {

TransformValue register_direction(const Workspace& ws, const ad::Value& moving,
                                  const ad::Value& f_moving, const ad::Value& f_anchor,
                                  ad::Value* rotated_out) {
  ad::Value q = quat_head(ws, "reg.rot", ad::concat_cols(f_moving, f_anchor));
  ad::Value rotated = ad::rotate_points(moving, q);
  ad::Value f_rot = encode_reg(ws, rotated);
  ad::Value t = run_mlp(ws, "reg.tr", ad::concat_cols(f_rot, f_anchor), 3, /*relu_last=*/false);
  if (rotated_out) *rotated_out = rotated;
  return {q, t};
}

}  // namespace

RegisterResult register_clouds(const Workspace& ws, const ad::Value& p1, const ad::Value& p2) {
  ad::Value f1 = encode_reg(ws, p1);
  ad::Value f2 = encode_reg(ws, p2);
  RegisterResult r;
  r.m12 = register_direction(ws, p1, f1, f2, &r.p1_rotated);
  return r;
}

RegisterPairResult register_pair(const Workspace& ws, const ad::Value& p1, const ad::Value& p2) {
  ad::Value f1 = encode_reg(ws, p1);
  ad::Value f2 = encode_reg(ws, p2);
  RegisterPairResult r;
  r.m12 = register_direction(ws, p1, f1, f2, nullptr);
  r.m21 = register_direction(ws, p2, f2, f1, nullptr);
  return r;
}

OrientResult orient(const Workspace& ws, const ad::Value& p) {
  ad::Value f = encode_comp(ws, p);
  ad::Value r_o = quat_head(ws, "comp.orient", f);
  return {r_o, ad::rotate_points(p, r_o)};
}

GenerateResult generate_missing(const Workspace& ws, const ad::Value& p_oriented) {
  const auto& levels = ws.config.levels;
  ad::Value f = encode_comp(ws, p_oriented);
  ad::Value ctx = ad::relu(ad::add_rowvec(ad::matmul(f, ws.p("comp.ctx.w")), ws.p("comp.ctx.b")));

  GenerateResult g;
  g.levels[0] = ad::reshape_rowmajor(run_mlp(ws, "comp.gp", f, 3, false), levels[0], 3);

  auto refine = [&](const ad::Value& parents, const std::string& prefix, int factor) {
    ad::Value in = ad::concat_cols(parents, ad::repeat_rows(ctx, parents->val.rows()));
    ad::Value offsets = run_mlp(ws, prefix, in, 3, false);
    ad::Value children = ad::reshape_rowmajor(offsets, parents->val.rows() * factor, 3);
    return ad::add(ad::repeat_each_row(parents, factor), children);
  };
  g.levels[1] = refine(g.levels[0], "comp.gs", levels[1] / levels[0]);
  g.levels[2] = refine(g.levels[1], "comp.go", levels[2] / levels[1]);
  return g;
}

CompletionResult complete(const Workspace& ws, const ad::Value& p) {
  CompletionResult out;
  OrientResult o = orient(ws, p);
  out.r_o = o.r_o;
  out.p_o = o.p_o;
  GenerateResult g = generate_missing(ws, o.p_o);
  out.levels_canonical = g.levels;
  ad::Value r_inv = ad::quat_conj(o.r_o);
  for (int l = 0; l < 3; ++l) out.levels_out[l] = ad::rotate_points(g.levels[l], r_inv);
  out.s = ad::rotate_points(ad::concat_rows(g.levels[2], o.p_o), r_inv);
  return out;
}

RigidTransform register_clouds(const ParamSet& params, const ModelConfig& config,
                               const PointCloud& p1, const PointCloud& p2) {
  Workspace ws = bind(params, config, /*trainable=*/false);
  RegisterResult r = register_clouds(ws, ad::constant(p1.matrix()), ad::constant(p2.matrix()));
  return to_transform(r.m12);
}

std::pair<PointCloud, UnitQuaternion> complete(const ParamSet& params, const ModelConfig& config,
                                               const PointCloud& p) {
  Workspace ws = bind(params, config, /*trainable=*/false);
  CompletionResult c = complete(ws, ad::constant(p.matrix()));
  UnitQuaternion q = quat_normalize(c.r_o->val(0, 0), c.r_o->val(0, 1), c.r_o->val(0, 2),
                                    c.r_o->val(0, 3));
  return {PointCloud::from_matrix(c.s->val), q};
}

}  // namespace nets

// --- checkpoints -------------------------------------------------------------

namespace {
constexpr char kTensorMagic[4] = {'T', 'N', 'S', '1'};
}

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params,
                     const ModelConfig& config, std::uint64_t seed, std::int64_t iteration) {
  std::filesystem::create_directories(dir / "tensors");
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : params.tensors) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    std::ofstream out(dir / "tensors" / (name + ".bin"), std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot write tensor " + name);
    out.write(kTensorMagic, 4);
    std::uint32_t rows = static_cast<std::uint32_t>(t.rows());
    std::uint32_t cols = static_cast<std::uint32_t>(t.cols());
    out.write(reinterpret_cast<const char*>(&rows), 4);
    out.write(reinterpret_cast<const char*>(&cols), 4);
    std::vector<float> buf;
    buf.reserve(static_cast<std::size_t>(t.size()));
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.cols(); ++j) buf.push_back(static_cast<float>(t(i, j)));
    }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * 4));
  }
  nlohmann::json manifest{
      {"format", "ctflow-checkpoint-v1"},
      {"iteration", iteration},
      {"seed", seed},
      {"model",
       {{"n_points", config.n_points},
        {"levels", {config.levels[0], config.levels[1], config.levels[2]}},
        {"width_scale", config.width_scale}}},
      {"tensors", tensors},
  };
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("save_checkpoint: cannot write manifest");
  out << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("load_checkpoint: cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "ctflow-checkpoint-v1") {
    throw SchemaError("load_checkpoint: unknown checkpoint format");
  }
  Checkpoint ck;
  ck.iteration = manifest.at("iteration").get<std::int64_t>();
  ck.seed = manifest.at("seed").get<std::uint64_t>();
  const auto& model = manifest.at("model");
  ck.config.n_points = model.at("n_points").get<int>();
  const auto& levels = model.at("levels");
  for (int l = 0; l < 3; ++l) ck.config.levels[static_cast<std::size_t>(l)] = levels[l].get<int>();
  ck.config.width_scale = model.at("width_scale").get<int>();
  ck.config.validate();

  // Expected tensor layout for this model; the manifest must agree.
  ParamSet expected = init_params(ck.config, 0);
  const auto& listed = manifest.at("tensors");
  if (listed.size() != expected.tensors.size()) {
    throw SchemaError("load_checkpoint: tensor count mismatch for declared model config");
  }
  for (std::size_t i = 0; i < expected.tensors.size(); ++i) {
    const auto& [name, tensor] = expected.tensors[i];
    const auto& entry = listed[i];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("rows").get<Eigen::Index>() != tensor.rows() ||
        entry.at("cols").get<Eigen::Index>() != tensor.cols()) {
      throw SchemaError("load_checkpoint: tensor " + name +
                        " does not match the declared model config (width-scale mismatch?)");
    }
  }

  ck.params = std::move(expected);
  for (auto& [name, t] : ck.params.tensors) {
    std::ifstream tin(dir / "tensors" / (name + ".bin"), std::ios::binary);
    if (!tin) throw IoError("load_checkpoint: missing tensor blob " + name);
    char magic[4];
    tin.read(magic, 4);
    std::uint32_t rows = 0, cols = 0;
    tin.read(reinterpret_cast<char*>(&rows), 4);
    tin.read(reinterpret_cast<char*>(&cols), 4);
    if (!tin || std::memcmp(magic, kTensorMagic, 4) != 0 ||
        rows != static_cast<std::uint32_t>(t.rows()) ||
        cols != static_cast<std::uint32_t>(t.cols())) {
      throw SchemaError("load_checkpoint: bad tensor header for " + name);
    }
    std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
    tin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!tin) throw IoError("load_checkpoint: truncated tensor " + name);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = static_cast<double>(buf[k++]);
    }
  }
  return ck;
}

}  // namespace ctf
