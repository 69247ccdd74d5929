#include "ctflow/datagen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <unordered_map>

namespace ctf {

namespace {

Vec3 random_unit_vector(Rng& rng) {
  for (;;) {
    Vec3 v(rng.gaussian(), rng.gaussian(), rng.gaussian());
    double n = v.norm();
    if (n > 1e-9) return v / n;
  }
}

PointCloud gather(const PointCloud& pc, const std::vector<std::size_t>& idx) {
  PointCloud out;
  out.points.reserve(idx.size());
  for (std::size_t i : idx) out.points.push_back(pc.points[i]);
  return out;
}

// Everything derived from one accepted crop pair.
struct AcceptedCrops {
  CropSpec spec1, spec2;
  std::vector<std::size_t> crop1, crop2;
  double overlap_iou = 0.0;
};

ScanPair assemble_pair(const PointCloud& shape, const AcceptedCrops& crops, Rng& rng,
                       const GenConfig& config) {
  ScanPair pair;
  pair.gt_shape = shape;
  pair.spec1 = crops.spec1;
  pair.spec2 = crops.spec2;
  pair.crop1_indices = crops.crop1;
  pair.crop2_indices = crops.crop2;
  pair.overlap_iou = crops.overlap_iou;

  std::vector<char> in1(shape.size(), 0), in2(shape.size(), 0);
  for (std::size_t i : crops.crop1) in1[i] = 1;
  for (std::size_t i : crops.crop2) in2[i] = 1;
  std::vector<std::size_t> complement1, complement2, union_complement;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!in1[i]) complement1.push_back(i);
    if (!in2[i]) complement2.push_back(i);
    if (!in1[i] && !in2[i]) union_complement.push_back(i);
  }

  const std::size_t n_part = config.part_points;
  std::uint64_t seed_p1 = rng.next_u64();
  std::uint64_t seed_p2 = rng.next_u64();
  UnitQuaternion r1 = random_rotation(rng);
  UnitQuaternion r2 = random_rotation(rng);
  std::uint64_t seed_c1 = rng.next_u64();
  std::uint64_t seed_c2 = rng.next_u64();
  std::uint64_t seed_u = rng.next_u64();

  PointCloud part1 = downsample_fps(gather(shape, crops.crop1), n_part, seed_p1);
  PointCloud part2 = downsample_fps(gather(shape, crops.crop2), n_part, seed_p2);

  // Each part is translated to the origin, then rotated about its center:
  // x -> R (x - c).
  auto part_transform = [](const UnitQuaternion& r, const Vec3& c) {
    return RigidTransform{r, -rotate(r, c)};
  };
  pair.m1 = part_transform(r1, part1.centroid());
  pair.m2 = part_transform(r2, part2.centroid());
  pair.p1 = apply(pair.m1, part1);
  pair.p2 = apply(pair.m2, part2);
  pair.m21_gt = compose(pair.m1, inverse(pair.m2));
  pair.m12_gt = compose(pair.m2, inverse(pair.m1));
  pair.r1o_gt = r1.conjugate();
  pair.r2o_gt = r2.conjugate();

  // Missing-part levels are prefixes of one FPS ordering, so every level is
  // itself an FPS subset of the complement.
  const std::size_t top = config.levels[2];
  auto fps_order = [&](const std::vector<std::size_t>& src, std::uint64_t seed) {
    std::vector<std::size_t> local = fps_indices(gather(shape, src), top, seed);
    std::vector<std::size_t> global;
    global.reserve(local.size());
    for (std::size_t i : local) global.push_back(src[i]);
    return global;
  };
  pair.missing_cr_src_1 = fps_order(complement1, seed_c1);
  pair.missing_cr_src_2 = fps_order(complement2, seed_c2);
  pair.missing_rc_src = fps_order(union_complement, seed_u);

  auto build_levels = [&](const std::vector<std::size_t>& src, const RigidTransform& m) {
    LevelTriple levels;
    for (int l = 0; l < 3; ++l) {
      std::vector<std::size_t> prefix(src.begin(),
                                      src.begin() + static_cast<std::ptrdiff_t>(config.levels[l]));
      levels[l] = apply(m, gather(shape, prefix));
    }
    return levels;
  };
  pair.gt_missing_cr_1 = build_levels(pair.missing_cr_src_1, pair.m1);
  pair.gt_missing_cr_2 = build_levels(pair.missing_cr_src_2, pair.m2);
  pair.gt_missing_rc_1 = build_levels(pair.missing_rc_src, pair.m1);
  pair.gt_missing_rc_2 = build_levels(pair.missing_rc_src, pair.m2);
  return pair;
}

bool crop_counts_ok(const PointCloud& shape, const std::vector<std::size_t>& crop1,
                    const std::vector<std::size_t>& crop2, const GenConfig& config,
                    std::size_t* union_complement_size) {
  const std::size_t n = shape.size();
  if (crop1.size() <= config.min_crop_points || n - crop1.size() <= config.min_crop_points) {
    return false;
  }
  if (crop2.size() <= config.min_crop_points || n - crop2.size() <= config.min_crop_points) {
    return false;
  }
  std::vector<char> covered(n, 0);
  for (std::size_t i : crop1) covered[i] = 1;
  for (std::size_t i : crop2) covered[i] = 1;
  std::size_t uncovered = 0;
  for (char c : covered) uncovered += (c == 0);
  if (union_complement_size) *union_complement_size = uncovered;
  return uncovered >= config.min_union_complement;
}

void validate_shape(const PointCloud& shape, const GenConfig& config) {
  if (shape.size() != config.shape_points) {
    throw InvalidArgument("generate_pair: shape must have " +
                          std::to_string(config.shape_points) + " points, got " +
                          std::to_string(shape.size()));
  }
}

}  // namespace

std::vector<std::size_t> crop_indices(const PointCloud& shape, const CropSpec& spec) {
  std::vector<std::size_t> idx;
  const double r2 = spec.radius * spec.radius;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if ((shape.points[i] - spec.center).squaredNorm() <= r2) idx.push_back(i);
  }
  return idx;
}

std::pair<PointCloud, PointCloud> crop_by_sphere(const PointCloud& shape, const CropSpec& spec) {
  PointCloud inside, complement;
  const double r2 = spec.radius * spec.radius;
  for (const Vec3& p : shape.points) {
    if ((p - spec.center).squaredNorm() <= r2) {
      inside.points.push_back(p);
    } else {
      complement.points.push_back(p);
    }
  }
  return {std::move(inside), std::move(complement)};
}

ScanPair generate_pair(const PointCloud& shape, Rng& rng, const GenConfig& config) {
  validate_shape(shape, config);
  BoundingSphere bs = bounding_sphere(shape);
  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    CropSpec s1{bs.center + bs.radius * random_unit_vector(rng),
                rng.uniform(config.radius_min, config.radius_max)};
    CropSpec s2{bs.center + bs.radius * random_unit_vector(rng),
                rng.uniform(config.radius_min, config.radius_max)};
    if ((s1.center - s2.center).norm() < config.min_center_dist) continue;
    std::vector<std::size_t> crop1 = crop_indices(shape, s1);
    std::vector<std::size_t> crop2 = crop_indices(shape, s2);
    if (!crop_counts_ok(shape, crop1, crop2, config, nullptr)) continue;
    AcceptedCrops crops{s1, s2, std::move(crop1), std::move(crop2), 0.0};
    crops.overlap_iou = voxel_iou(gather(shape, crops.crop1), gather(shape, crops.crop2),
                                  config.voxel_resolution);
    return assemble_pair(shape, crops, rng, config);
  }
  throw GenerationError("generate_pair: no valid crop pair within " +
                        std::to_string(config.max_attempts) + " attempts");
}

ScanPair generate_pair_overlap(const PointCloud& shape, double eta, Rng& rng,
                               const GenConfig& config) {
  validate_shape(shape, config);
  if (eta < 0.0 || eta > 0.8) throw InvalidArgument("generate_pair_overlap: eta must be in [0, 0.8]");
  const Vec3 c1(0.0, 0.75, 0.0), c2(0.0, -0.75, 0.0);
  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    CropSpec s1{c1, rng.uniform(config.radius_min, config.radius_max)};
    CropSpec s2{c2, rng.uniform(config.radius_min, config.radius_max)};
    std::vector<std::size_t> crop1 = crop_indices(shape, s1);
    std::vector<std::size_t> crop2 = crop_indices(shape, s2);
    if (!crop_counts_ok(shape, crop1, crop2, config, nullptr)) continue;
    double iou = voxel_iou(gather(shape, crop1), gather(shape, crop2), config.voxel_resolution);
    if (eta == 0.0) {
      if (iou != 0.0) continue;
    } else if (iou < 0.9 * eta || iou > 1.1 * eta) {
      continue;
    }
    AcceptedCrops crops{s1, s2, std::move(crop1), std::move(crop2), iou};
    return assemble_pair(shape, crops, rng, config);
  }
  throw GenerationError("generate_pair_overlap: no pair with IoU near " + std::to_string(eta) +
                        " within " + std::to_string(config.max_attempts) + " attempts");
}

PointCloud add_noise(const PointCloud& pc, double zeta, Rng& rng) {
  if (zeta < 0.0) throw InvalidArgument("add_noise: zeta must be >= 0");
  PointCloud out = pc;
  for (Vec3& p : out.points) {
    for (int c = 0; c < 3; ++c) p[c] += rng.uniform(0.0, zeta);
  }
  return out;
}

PointCloud add_outliers(const PointCloud& pc, std::size_t k, Rng& rng) {
  if (k > pc.size()) throw InvalidArgument("add_outliers: K exceeds cloud size");
  PointCloud out = pc;
  // Partial Fisher-Yates picks k distinct indices.
  std::vector<std::size_t> idx(pc.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + rng.uniform_index(idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  for (std::size_t i = 0; i < k; ++i) {
    Vec3 dir = random_unit_vector(rng);
    double len = rng.uniform(0.1, 0.5);
    out.points[idx[i]] += dir * len;
  }
  return out;
}

PointCloud radius_outlier_filter(const PointCloud& pc, double radius,
                                 std::size_t min_neighbors) {
  if (radius <= 0.0) throw InvalidArgument("radius_outlier_filter: radius must be > 0");
  if (min_neighbors < 1) throw InvalidArgument("radius_outlier_filter: min_neighbors must be >= 1");

  // Hash grid with cell size = radius; neighbors live in the 27 adjacent cells.
  auto cell_of = [&](const Vec3& p) {
    return std::array<long, 3>{static_cast<long>(std::floor(p[0] / radius)),
                               static_cast<long>(std::floor(p[1] / radius)),
                               static_cast<long>(std::floor(p[2] / radius))};
  };
  auto key_of = [](const std::array<long, 3>& c) {
    std::uint64_t h = 1469598103934665603ull;
    for (long v : c) {
      h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull;
      h *= 1099511628211ull;
    }
    return h;
  };
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> grid;
  for (std::size_t i = 0; i < pc.size(); ++i) grid[key_of(cell_of(pc.points[i]))].push_back(i);

  const double r2 = radius * radius;
  PointCloud out;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    std::array<long, 3> c = cell_of(pc.points[i]);
    std::size_t count = 0;
    for (long dx = -1; dx <= 1 && count < min_neighbors; ++dx) {
      for (long dy = -1; dy <= 1 && count < min_neighbors; ++dy) {
        for (long dz = -1; dz <= 1 && count < min_neighbors; ++dz) {
          auto it = grid.find(key_of({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == grid.end()) continue;
          for (std::size_t j : it->second) {
            if (j == i) continue;
            if ((pc.points[i] - pc.points[j]).squaredNorm() <= r2) {
              if (++count >= min_neighbors) break;
            }
          }
        }
      }
    }
    if (count >= min_neighbors) out.points.push_back(pc.points[i]);
  }
  return out;
}

PointCloud apply_stress(const PointCloud& pc, const StressSpec& spec, Rng& rng) {
  PointCloud out = pc;
  if (spec.noise_level > 0.0) out = add_noise(out, spec.noise_level, rng);
  if (spec.outlier_count > 0) out = add_outliers(out, spec.outlier_count, rng);
  if (spec.filter_enabled) {
    PointCloud kept = radius_outlier_filter(out, spec.filter_radius, spec.filter_min_neighbors);
    if (kept.empty()) throw GenerationError("apply_stress: filter removed every point");
    while (kept.size() < pc.size()) {
      kept.points.push_back(kept.points[kept.size() % kept.points.size()]);
    }
    out = std::move(kept);
  }
  return out;
}

// --- procedural shapes -------------------------------------------------------

namespace {

struct Box {
  Vec3 center;
  Vec3 half;  // half extents
  double area() const {
    Vec3 d = 2.0 * half;
    return 2.0 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2]);
  }
};

Vec3 sample_box_surface(const Box& b, Rng& rng) {
  Vec3 d = 2.0 * b.half;
  double axy = d[0] * d[1], ayz = d[1] * d[2], axz = d[0] * d[2];
  double total = 2.0 * (axy + ayz + axz);
  double pick = rng.uniform(0.0, total);
  double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
  double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  Vec3 p;
  if (pick < 2.0 * axy) {
    p = Vec3(u * b.half[0], v * b.half[1], sign * b.half[2]);
  } else if (pick < 2.0 * (axy + ayz)) {
    p = Vec3(sign * b.half[0], u * b.half[1], v * b.half[2]);
  } else {
    p = Vec3(u * b.half[0], sign * b.half[1], v * b.half[2]);
  }
  return b.center + p;
}

PointCloud sample_boxes(const std::vector<Box>& boxes, std::size_t n, Rng& rng) {
  std::vector<double> cumulative;
  double total = 0.0;
  for (const Box& b : boxes) {
    total += b.area();
    cumulative.push_back(total);
  }
  PointCloud pc;
  pc.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double pick = rng.uniform(0.0, total);
    std::size_t k = static_cast<std::size_t>(
        std::lower_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
    k = std::min(k, boxes.size() - 1);
    pc.points.push_back(sample_box_surface(boxes[k], rng));
  }
  return pc;
}

PointCloud sample_cylinder(double radius, double height, std::size_t n, Rng& rng) {
  double lateral = 2.0 * M_PI * radius * height;
  double caps = 2.0 * M_PI * radius * radius;
  PointCloud pc;
  pc.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double pick = rng.uniform(0.0, lateral + caps);
    double a = rng.uniform(0.0, 2.0 * M_PI);
    if (pick < lateral) {
      double y = rng.uniform(-0.5, 0.5) * height;
      pc.points.emplace_back(radius * std::cos(a), y, radius * std::sin(a));
    } else {
      double r = radius * std::sqrt(rng.uniform());
      double y = (rng.uniform() < 0.5 ? -0.5 : 0.5) * height;
      pc.points.emplace_back(r * std::cos(a), y, r * std::sin(a));
    }
  }
  return pc;
}

PointCloud sample_shell(std::size_t n, Rng& rng) {
  // Slightly anisotropic ellipsoid shell so poses are identifiable.
  Vec3 radii(0.5, rng.uniform(0.35, 0.5), rng.uniform(0.3, 0.45));
  PointCloud pc;
  pc.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 u = random_unit_vector(rng);
    pc.points.push_back(u.cwiseProduct(radii));
  }
  return pc;
}

}  // namespace

ShapeKind shape_kind_from_string(const std::string& name) {
  if (name == "box") return ShapeKind::box;
  if (name == "cylinder") return ShapeKind::cylinder;
  if (name == "plate") return ShapeKind::plate;
  if (name == "table") return ShapeKind::table;
  if (name == "shell") return ShapeKind::shell;
  throw InvalidArgument("unknown shape kind: " + name);
}

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::box: return "box";
    case ShapeKind::cylinder: return "cylinder";
    case ShapeKind::plate: return "plate";
    case ShapeKind::table: return "table";
    case ShapeKind::shell: return "shell";
  }
  return "?";
}

PointCloud make_shape(ShapeKind kind, std::size_t n, Rng& rng) {
  PointCloud pc;
  switch (kind) {
    case ShapeKind::box: {
      Vec3 half(rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5));
      pc = sample_boxes({Box{Vec3::Zero(), half}}, n, rng);
      break;
    }
    case ShapeKind::cylinder:
      pc = sample_cylinder(rng.uniform(0.2, 0.4), rng.uniform(0.7, 1.0), n, rng);
      break;
    case ShapeKind::plate: {
      Vec3 half(rng.uniform(0.42, 0.5), rng.uniform(0.02, 0.04), rng.uniform(0.42, 0.5));
      pc = sample_boxes({Box{Vec3::Zero(), half}}, n, rng);
      break;
    }
    case ShapeKind::table: {
      std::vector<Box> parts;
      double top_y = rng.uniform(0.3, 0.42);
      Vec3 top_half(0.5, rng.uniform(0.02, 0.05), 0.5);
      parts.push_back(Box{Vec3(0, top_y, 0), top_half});
      double leg = rng.uniform(0.035, 0.06);
      double inset = rng.uniform(0.08, 0.16);
      double leg_top = top_y - top_half[1];
      Vec3 leg_half(leg, 0.5 * (leg_top + 0.5), leg);
      double leg_y = leg_top - leg_half[1];
      for (double sx : {-1.0, 1.0}) {
        for (double sz : {-1.0, 1.0}) {
          parts.push_back(Box{Vec3(sx * (0.5 - inset), leg_y, sz * (0.5 - inset)), leg_half});
        }
      }
      pc = sample_boxes(parts, n, rng);
      break;
    }
    case ShapeKind::shell:
      pc = sample_shell(n, rng);
      break;
  }
  return normalize_unit_cube(pc).first;
}

// --- dataset io ----------------------------------------------------------------

namespace {

const char* kLevelNames[3] = {"128", "512", "2048"};

nlohmann::json quat_to_json(const UnitQuaternion& q) {
  return nlohmann::json::array({q.w, q.x, q.y, q.z});
}

UnitQuaternion quat_from_json(const nlohmann::json& j) {
  if (j.size() != 4) throw SchemaError("quaternion array must have 4 entries");
  return quat_normalize(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
                        j[3].get<double>());
}

void write_levels(const std::filesystem::path& dir, const std::string& tag,
                  const LevelTriple& levels) {
  for (int l = 0; l < 3; ++l) {
    write_xyz(dir / ("missing_" + tag + "_" + kLevelNames[l] + ".xyz"), levels[l]);
  }
}

LevelTriple read_levels(const std::filesystem::path& dir, const std::string& tag) {
  LevelTriple levels;
  for (int l = 0; l < 3; ++l) {
    levels[l] = read_xyz(dir / ("missing_" + tag + "_" + kLevelNames[l] + ".xyz"));
  }
  return levels;
}

}  // namespace

void write_sample(const std::filesystem::path& dir, const ScanPair& pair,
                  const std::string& id, const std::string& category, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  write_xyz(dir / "part1.xyz", pair.p1);
  write_xyz(dir / "part2.xyz", pair.p2);
  write_xyz(dir / "gt.xyz", pair.gt_shape);
  write_levels(dir, "cr1", pair.gt_missing_cr_1);
  write_levels(dir, "cr2", pair.gt_missing_cr_2);
  write_levels(dir, "rc1", pair.gt_missing_rc_1);
  write_levels(dir, "rc2", pair.gt_missing_rc_2);

  nlohmann::json meta{
      {"id", id},
      {"category", category},
      {"seed", seed},
      {"m1", transform_to_json(pair.m1)},
      {"m2", transform_to_json(pair.m2)},
      {"m12_gt", transform_to_json(pair.m12_gt)},
      {"m21_gt", transform_to_json(pair.m21_gt)},
      {"r1o_gt", quat_to_json(pair.r1o_gt)},
      {"r2o_gt", quat_to_json(pair.r2o_gt)},
      {"overlap_iou", pair.overlap_iou},
  };
  std::ofstream out(dir / "meta.json");
  if (!out) throw IoError("write_sample: cannot open meta.json under " + dir.string());
  out << meta.dump(2) << "\n";
}

ScanPair read_sample(const std::filesystem::path& dataset_dir, const std::string& id) {
  std::filesystem::path dir = dataset_dir / id;
  ScanPair pair;
  pair.p1 = read_xyz(dir / "part1.xyz");
  pair.p2 = read_xyz(dir / "part2.xyz");
  pair.gt_shape = read_xyz(dir / "gt.xyz");
  pair.gt_missing_cr_1 = read_levels(dir, "cr1");
  pair.gt_missing_cr_2 = read_levels(dir, "cr2");
  pair.gt_missing_rc_1 = read_levels(dir, "rc1");
  pair.gt_missing_rc_2 = read_levels(dir, "rc2");

  std::ifstream in(dir / "meta.json");
  if (!in) throw IoError("read_sample: cannot open meta.json under " + dir.string());
  nlohmann::json meta = nlohmann::json::parse(in);
  pair.m1 = transform_from_json(meta.at("m1"));
  pair.m2 = transform_from_json(meta.at("m2"));
  pair.m12_gt = transform_from_json(meta.at("m12_gt"));
  pair.m21_gt = transform_from_json(meta.at("m21_gt"));
  pair.r1o_gt = quat_from_json(meta.at("r1o_gt"));
  pair.r2o_gt = quat_from_json(meta.at("r2o_gt"));
  pair.overlap_iou = meta.at("overlap_iou").get<double>();
  return pair;
}

void write_manifest(const std::filesystem::path& dataset_dir, const DatasetManifest& manifest) {
  nlohmann::json samples = nlohmann::json::array();
  for (const DatasetEntry& e : manifest.samples) {
    samples.push_back({{"id", e.id}, {"category", e.category}, {"split", e.split}});
  }
  nlohmann::json j{{"format", "ctflow-dataset-v1"}, {"seed", manifest.seed}, {"samples", samples}};
  std::ofstream out(dataset_dir / "manifest.json");
  if (!out) throw IoError("write_manifest: cannot open manifest under " + dataset_dir.string());
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& dataset_dir) {
  std::ifstream in(dataset_dir / "manifest.json");
  if (!in) throw IoError("read_manifest: cannot open " + (dataset_dir / "manifest.json").string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", "") != "ctflow-dataset-v1") {
    throw SchemaError("read_manifest: unknown dataset format");
  }
  DatasetManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& s : j.at("samples")) {
    m.samples.push_back({s.at("id").get<std::string>(), s.at("category").get<std::string>(),
                         s.at("split").get<std::string>()});
  }
  return m;
}

BuildResult build_dataset(const std::filesystem::path& out_dir, const BuildOptions& options) {
  if (options.shapes.empty()) throw InvalidArgument("build_dataset: no shapes");
  if (options.count == 0) throw InvalidArgument("build_dataset: count must be > 0");
  std::filesystem::create_directories(out_dir);

  struct Slot {
    bool ok = false;
    std::string id;
  };
  std::vector<Slot> slots(options.count);

  parallel_for(options.count, options.workers, [&](std::size_t i) {
    const auto& [shape_name, shape] = options.shapes[i % options.shapes.size()];
    Rng rng(mix_seed(options.seed, i));
    char id[32];
    std::snprintf(id, sizeof(id), "sample_%06zu", i);
    try {
      ScanPair pair = options.overlap_eta
                          ? generate_pair_overlap(shape, *options.overlap_eta, rng, options.config)
                          : generate_pair(shape, rng, options.config);
      write_sample(out_dir / id, pair, id, options.category, mix_seed(options.seed, i));
      slots[i] = {true, id};
    } catch (const GenerationError& e) {
      log_warn("skipping " + std::string(id) + " (" + shape_name + "): " + e.what());
      slots[i] = {false, id};
    }
  });

  BuildResult result;
  result.manifest.seed = options.seed;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].ok) kept.push_back(i);
    else ++result.skipped;
  }
  // Split by position among the emitted samples: train, then val, then test.
  std::size_t n = kept.size();
  std::size_t n_train = static_cast<std::size_t>(options.train_frac * static_cast<double>(n));
  std::size_t n_val = static_cast<std::size_t>(options.val_frac * static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k) {
    const char* split = k < n_train ? "train" : (k < n_train + n_val ? "val" : "test");
    result.manifest.samples.push_back({slots[kept[k]].id, options.category, split});
  }
  write_manifest(out_dir, result.manifest);
  return result;
}

}  // namespace ctf
