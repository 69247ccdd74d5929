#include "ctflow/pointcloud.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace ctf {

Eigen::MatrixXd PointCloud::matrix() const {
  Eigen::MatrixXd m(points.size(), 3);
  for (std::size_t i = 0; i < points.size(); ++i) m.row(i) = points[i];
  return m;
}

PointCloud PointCloud::from_matrix(const Eigen::MatrixXd& m) {
  if (m.cols() != 3) throw InvalidArgument("PointCloud::from_matrix: expected 3 columns");
  PointCloud pc;
  pc.points.resize(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) pc.points[static_cast<std::size_t>(i)] = m.row(i);
  return pc;
}

Vec3 PointCloud::centroid() const {
  if (points.empty()) throw InvalidArgument("centroid: empty cloud");
  Vec3 sum = Vec3::Zero();
  for (const Vec3& p : points) sum += p;
  return sum / static_cast<double>(points.size());
}

PointCloud apply(const RigidTransform& t, const PointCloud& pc) {
  PointCloud out;
  out.points.reserve(pc.size());
  Mat3 r = quat_to_matrix(t.rotation);
  for (const Vec3& p : pc.points) out.points.push_back(r * p + t.translation);
  return out;
}

std::pair<PointCloud, NormalizationRecord> normalize_unit_cube(const PointCloud& pc) {
  if (pc.empty()) throw InvalidArgument("normalize_unit_cube: empty cloud");
  Vec3 lo = pc.points[0], hi = pc.points[0];
  for (const Vec3& p : pc.points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  double extent = (hi - lo).maxCoeff();
  if (!(extent > 0.0)) throw InvalidArgument("normalize_unit_cube: zero-extent cloud");
  NormalizationRecord rec;
  rec.center = 0.5 * (lo + hi);
  rec.scale = 1.0 / extent;
  PointCloud out;
  out.points.reserve(pc.size());
  for (const Vec3& p : pc.points) out.points.push_back((p - rec.center) * rec.scale);
  return {std::move(out), rec};
}

std::pair<PointCloud, Vec3> center_at_origin(const PointCloud& pc) {
  Vec3 c = pc.centroid();
  PointCloud out;
  out.points.reserve(pc.size());
  for (const Vec3& p : pc.points) out.points.push_back(p - c);
  return {std::move(out), c};
}

std::vector<std::size_t> fps_indices(const Eigen::MatrixXd& pts, std::size_t n, std::uint64_t seed) {
  const std::size_t count = static_cast<std::size_t>(pts.rows());
  if (count < n) throw InvalidArgument("downsample_fps: fewer points than requested");
  std::vector<std::size_t> selected;
  if (n == 0) return selected;
  selected.reserve(n);

  std::size_t start = static_cast<std::size_t>(seed % count);
  selected.push_back(start);

  Eigen::VectorXd best_d2 =
      (pts.rowwise() - pts.row(start)).rowwise().squaredNorm();
  for (std::size_t k = 1; k < n; ++k) {
    Eigen::Index next = 0;
    best_d2.maxCoeff(&next);
    selected.push_back(static_cast<std::size_t>(next));
    Eigen::VectorXd d2 = (pts.rowwise() - pts.row(next)).rowwise().squaredNorm();
    best_d2 = best_d2.cwiseMin(d2);
  }
  return selected;
}

std::vector<std::size_t> fps_indices(const PointCloud& pc, std::size_t n, std::uint64_t seed) {
  return fps_indices(pc.matrix(), n, seed);
}

PointCloud downsample_fps(const PointCloud& pc, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx = fps_indices(pc, n, seed);
  PointCloud out;
  out.points.reserve(n);
  for (std::size_t i : idx) out.points.push_back(pc.points[i]);
  return out;
}

PointCloud union_clouds(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw InvalidArgument("union_clouds: both inputs must be nonempty");
  PointCloud out;
  out.points.reserve(a.size() + b.size());
  out.points.insert(out.points.end(), a.points.begin(), a.points.end());
  out.points.insert(out.points.end(), b.points.begin(), b.points.end());
  return out;
}

namespace {
void mark_voxels(const PointCloud& pc, int res, std::vector<std::uint8_t>& grid) {
  for (const Vec3& p : pc.points) {
    int ix[3];
    for (int c = 0; c < 3; ++c) {
      if (p[c] < -1.0 || p[c] > 1.0) {
        throw InvalidArgument("voxel_iou: point outside [-1, 1]^3");
      }
      int v = static_cast<int>((p[c] + 1.0) * 0.5 * res);
      ix[c] = std::clamp(v, 0, res - 1);
    }
    grid[static_cast<std::size_t>((ix[0] * res + ix[1]) * res + ix[2])] = 1;
  }
}
}  // namespace

double voxel_iou(const PointCloud& a, const PointCloud& b, int resolution) {
  if (resolution <= 0) throw InvalidArgument("voxel_iou: resolution must be positive");
  std::size_t cells = static_cast<std::size_t>(resolution) * resolution * resolution;
  std::vector<std::uint8_t> ga(cells, 0), gb(cells, 0);
  mark_voxels(a, resolution, ga);
  mark_voxels(b, resolution, gb);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < cells; ++i) {
    inter += (ga[i] & gb[i]);
    uni += (ga[i] | gb[i]);
  }
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BoundingSphere bounding_sphere(const PointCloud& pc) {
  if (pc.empty()) throw InvalidArgument("bounding_sphere: empty cloud");
  auto farthest_from = [&](const Vec3& q) {
    std::size_t best = 0;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      double d2 = (pc.points[i] - q).squaredNorm();
      if (d2 > best_d2) {
        best_d2 = d2;
        best = i;
      }
    }
    return best;
  };
  // Ritter: span a diameter-ish pair, then grow over stragglers.
  std::size_t a = farthest_from(pc.points[0]);
  std::size_t b = farthest_from(pc.points[a]);
  Vec3 center = 0.5 * (pc.points[a] + pc.points[b]);
  double radius = 0.5 * (pc.points[a] - pc.points[b]).norm();
  for (int pass = 0; pass < 2; ++pass) {
    for (const Vec3& p : pc.points) {
      double d = (p - center).norm();
      if (d > radius) {
        double shift = 0.5 * (d - radius);
        center += (p - center) * (shift / d);
        radius += shift;
      }
    }
  }
  // Exact containment against the final center.
  double max_d = 0.0;
  for (const Vec3& p : pc.points) max_d = std::max(max_d, (p - center).norm());
  return {center, max_d};
}

// --- io ---------------------------------------------------------------------

PointCloud read_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_xyz: cannot open " + path.string());
  PointCloud pc;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Vec3 p;
    const char* ptr = line.c_str();
    char* end = nullptr;
    for (int c = 0; c < 3; ++c) {
      p[c] = std::strtod(ptr, &end);
      if (end == ptr) {
        throw IoError("read_xyz: malformed line " + std::to_string(lineno) + " in " +
                      path.string());
      }
      ptr = end;
    }
    if (!p.allFinite()) {
      throw IoError("read_xyz: non-finite coordinate at line " + std::to_string(lineno));
    }
    pc.points.push_back(p);
  }
  return pc;
}

void write_xyz(const std::filesystem::path& path, const PointCloud& pc) {
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (f == nullptr) throw IoError("write_xyz: cannot open " + path.string());
  for (const Vec3& p : pc.points) {
    // %.17g round-trips doubles exactly.
    std::fprintf(f, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
  }
  std::fclose(f);
}

namespace {
constexpr char kPcfMagic[4] = {'P', 'C', 'F', '1'};
}

PointCloud read_pcf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_pcf: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kPcfMagic, 4) != 0) {
    throw IoError("read_pcf: bad magic in " + path.string());
  }
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  if (!in) throw IoError("read_pcf: truncated header in " + path.string());
  std::vector<float> buf(static_cast<std::size_t>(count) * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!in) throw IoError("read_pcf: truncated payload in " + path.string());
  PointCloud pc;
  pc.points.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    pc.points.emplace_back(buf[3 * i], buf[3 * i + 1], buf[3 * i + 2]);
  }
  return pc;
}

void write_pcf(const std::filesystem::path& path, const PointCloud& pc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_pcf: cannot open " + path.string());
  out.write(kPcfMagic, 4);
  std::uint32_t count = static_cast<std::uint32_t>(pc.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  std::vector<float> buf;
  buf.reserve(pc.size() * 3);
  for (const Vec3& p : pc.points) {
    buf.push_back(static_cast<float>(p[0]));
    buf.push_back(static_cast<float>(p[1]));
    buf.push_back(static_cast<float>(p[2]));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
}

}  // namespace ctf
