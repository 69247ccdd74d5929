#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctflow/geometry.hpp"

namespace ctf {

// Ordered list of 3D points in normalized model coordinates. Order is part
// of the value: union and provenance masks rely on it.
struct PointCloud {
  std::vector<Vec3> points;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }
  Vec3& operator[](std::size_t i) { return points[i]; }

  // N x 3 row-per-point view for numeric code.
  Eigen::MatrixXd matrix() const;
  static PointCloud from_matrix(const Eigen::MatrixXd& m);

  Vec3 centroid() const;
};

PointCloud apply(const RigidTransform& t, const PointCloud& pc);

// Record of a unit-cube normalization; invert() restores original coordinates.
struct NormalizationRecord {
  Vec3 center = Vec3::Zero();  // bounding-box center removed before scaling
  double scale = 1.0;          // uniform scale applied after centering

  Vec3 invert(const Vec3& p) const { return p / scale + center; }
};

// Uniform-scales and centers so the axis-aligned bounding box fits [-0.5, 0.5]^3
// with its center at the origin. Throws InvalidArgument on zero-extent input.
std::pair<PointCloud, NormalizationRecord> normalize_unit_cube(const PointCloud& pc);

// Moves the centroid to the origin; returns the removed offset.
std::pair<PointCloud, Vec3> center_at_origin(const PointCloud& pc);

// Farthest-point sampling to exactly n points; the seed picks the start index
// (seed % size). Output order is the selection order, so any prefix is itself
// an FPS result for the same start. Throws InvalidArgument if |pc| < n.
PointCloud downsample_fps(const PointCloud& pc, std::size_t n, std::uint64_t seed);
std::vector<std::size_t> fps_indices(const PointCloud& pc, std::size_t n, std::uint64_t seed);
std::vector<std::size_t> fps_indices(const Eigen::MatrixXd& pts, std::size_t n, std::uint64_t seed);

// Concatenation, order a-then-b. Both inputs must be nonempty.
PointCloud union_clouds(const PointCloud& a, const PointCloud& b);

// Intersection-over-union of occupied voxels on a resolution^3 grid over
// [-1, 1]^3. Inputs must lie inside [-1, 1]^3.
double voxel_iou(const PointCloud& a, const PointCloud& b, int resolution);

struct BoundingSphere {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
};

// Ritter-style enclosing sphere: contains every point; radius within a few
// percent of the minimal enclosing sphere.
BoundingSphere bounding_sphere(const PointCloud& pc);

// --- File formats ---------------------------------------------------------
//
// Text ".xyz": one "x y z" triple per line, decimal floats with round-trip
// precision. Binary ".pcf": magic "PCF1", little-endian u32 count, then
// count * 3 float32 coordinates.

PointCloud read_xyz(const std::filesystem::path& path);
void write_xyz(const std::filesystem::path& path, const PointCloud& pc);

PointCloud read_pcf(const std::filesystem::path& path);
void write_pcf(const std::filesystem::path& path, const PointCloud& pc);

}  // namespace ctf
