#pragma once

#include <optional>
#include <string>

#include "ctflow/metrics.hpp"
#include "ctflow/pointcloud.hpp"

namespace ctf {

// Sphere crop: center on the shape's bounding sphere surface (standard pairs)
// or fixed (overlap-controlled pairs), radius in [0.3, 1.3].
struct CropSpec {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
};

struct GenConfig {
  std::size_t shape_points = 16384;
  std::size_t part_points = 2048;
  // Each cropped part and its complement must exceed this before downsampling.
  std::size_t min_crop_points = 4096;
  double min_center_dist = 0.3;
  double radius_min = 0.3;
  double radius_max = 1.3;
  std::array<std::size_t, 3> levels = {128, 512, 2048};
  // The complement of the union of both crops feeds the R-C missing-part
  // levels, so it must hold at least the largest level.
  std::size_t min_union_complement = 2048;
  int max_attempts = 200;
  int voxel_resolution = 32;
};

// One training/eval sample with full ground truth.
struct ScanPair {
  PointCloud p1, p2;      // centered, randomly rotated parts (part_points each)
  PointCloud gt_shape;    // canonical pose (shape_points)
  RigidTransform m1, m2;  // per-part applied transforms (center then rotate)
  RigidTransform m12_gt, m21_gt;
  UnitQuaternion r1o_gt, r2o_gt;  // rotations back to the canonical view
  LevelTriple gt_missing_cr_1, gt_missing_cr_2;  // complement of each crop, per-part frame
  LevelTriple gt_missing_rc_1, gt_missing_rc_2;  // complement of the union, per-part frame
  double overlap_iou = 0.0;

  // Provenance into gt_shape, for disjointness checks and replay tests.
  std::vector<std::size_t> crop1_indices, crop2_indices;
  std::vector<std::size_t> missing_cr_src_1, missing_cr_src_2, missing_rc_src;
  CropSpec spec1, spec2;
};

// Exact partition of the shape into points within the crop sphere and the rest.
std::pair<PointCloud, PointCloud> crop_by_sphere(const PointCloud& shape, const CropSpec& spec);
std::vector<std::size_t> crop_indices(const PointCloud& shape, const CropSpec& spec);

// Rejection-samples crop pairs until the center-distance and cardinality
// constraints hold, then builds the full sample. Throws GenerationError when
// the attempt budget runs out.
ScanPair generate_pair(const PointCloud& shape, Rng& rng, const GenConfig& config);

// Overlap-controlled variant: fixed centers (0, +-0.75, 0), rejection on the
// voxel IoU of the two crops landing in [0.9 eta, 1.1 eta] (exactly 0 when
// eta = 0).
ScanPair generate_pair_overlap(const PointCloud& shape, double eta, Rng& rng,
                               const GenConfig& config);

// Stress procedures -----------------------------------------------------------

// Adds an independent uniform [0, zeta] offset to every coordinate.
PointCloud add_noise(const PointCloud& pc, double zeta, Rng& rng);

// Displaces k distinct points: direction uniform on the unit sphere, length
// uniform in [0.1, 0.5].
PointCloud add_outliers(const PointCloud& pc, std::size_t k, Rng& rng);

// Keeps points with at least min_neighbors other points within radius.
PointCloud radius_outlier_filter(const PointCloud& pc, double radius,
                                 std::size_t min_neighbors);

struct StressSpec {
  double noise_level = 0.0;
  std::size_t outlier_count = 0;
  bool filter_enabled = false;
  double filter_radius = 0.05;
  std::size_t filter_min_neighbors = 4;
};

// noise -> outliers -> optional filter. Filtering can shrink the cloud; the
// result is padded back to the input cardinality by cycling kept points so the
// networks always see a fixed-size cloud.
PointCloud apply_stress(const PointCloud& pc, const StressSpec& spec, Rng& rng);

// Procedural shapes ------------------------------------------------------------
//
// Surface-sampled stand-in shapes so the whole pipeline runs without external
// data. All outputs are normalized to the unit cube.

enum class ShapeKind { box, cylinder, plate, table, shell };

ShapeKind shape_kind_from_string(const std::string& name);
std::string to_string(ShapeKind kind);

PointCloud make_shape(ShapeKind kind, std::size_t n, Rng& rng);

// Dataset layout ----------------------------------------------------------------
//
// <out>/manifest.json plus one directory per sample holding part1.xyz,
// part2.xyz, gt.xyz, missing_{cr1,cr2,rc1,rc2}_{128,512,2048}.xyz and meta.json.

struct DatasetEntry {
  std::string id;
  std::string category;
  std::string split;  // train | val | test
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<DatasetEntry> samples;
};

void write_sample(const std::filesystem::path& dir, const ScanPair& pair,
                  const std::string& id, const std::string& category, std::uint64_t seed);
ScanPair read_sample(const std::filesystem::path& dataset_dir, const std::string& id);

void write_manifest(const std::filesystem::path& dataset_dir, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& dataset_dir);

struct BuildOptions {
  std::vector<std::pair<std::string, PointCloud>> shapes;  // (name, canonical cloud)
  std::string category = "shapes";
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::optional<double> overlap_eta;
  GenConfig config;
  double train_frac = 0.8;
  double val_frac = 0.1;
  int workers = 1;
};

struct BuildResult {
  DatasetManifest manifest;
  std::size_t skipped = 0;
};

BuildResult build_dataset(const std::filesystem::path& out_dir, const BuildOptions& options);

}  // namespace ctf
