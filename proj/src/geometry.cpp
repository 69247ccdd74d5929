#include "ctflow/geometry.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace ctf {

UnitQuaternion quat_normalize(double w, double x, double y, double z) {
  double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > 1e-12) || !std::isfinite(n)) {
    throw InvalidArgument("quat_normalize: degenerate quaternion (zero or non-finite norm)");
  }
  return {w / n, x / n, y / n, z / n};
}

UnitQuaternion quat_normalize(const Eigen::Vector4d& q) {
  return quat_normalize(q[0], q[1], q[2], q[3]);
}

UnitQuaternion quat_mul(const UnitQuaternion& a, const UnitQuaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Mat3 quat_to_matrix(const UnitQuaternion& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 m;
  m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return m;
}

UnitQuaternion matrix_to_quat(const Mat3& m) {
  if ((m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-5 ||
      std::abs(m.determinant() - 1.0) > 1e-5) {
    throw InvalidRotation("matrix_to_quat: input is not a proper rotation matrix");
  }
  // Shepperd's method: branch on the largest of trace and diagonal entries.
  double w, x, y, z;
  double tr = m.trace();
  if (tr > m(0, 0) && tr > m(1, 1) && tr > m(2, 2)) {
    double s = std::sqrt(tr + 1.0) * 2.0;
    w = 0.25 * s;
    x = (m(2, 1) - m(1, 2)) / s;
    y = (m(0, 2) - m(2, 0)) / s;
    z = (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    w = (m(2, 1) - m(1, 2)) / s;
    x = 0.25 * s;
    y = (m(0, 1) + m(1, 0)) / s;
    z = (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    w = (m(0, 2) - m(2, 0)) / s;
    x = (m(0, 1) + m(1, 0)) / s;
    y = 0.25 * s;
    z = (m(1, 2) + m(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    w = (m(1, 0) - m(0, 1)) / s;
    x = (m(0, 2) + m(2, 0)) / s;
    y = (m(1, 2) + m(2, 1)) / s;
    z = 0.25 * s;
  }
  return quat_normalize(w, x, y, z);
}

Vec3 rotate(const UnitQuaternion& q, const Vec3& v) {
  // v + 2w(u x v) + 2u x (u x v), u = (x, y, z)
  Vec3 u(q.x, q.y, q.z);
  Vec3 uv = u.cross(v);
  return v + 2.0 * (q.w * uv + u.cross(uv));
}

double dist_q(const UnitQuaternion& q1, const UnitQuaternion& q2) {
  Eigen::Vector4d a = q1.coeffs(), b = q2.coeffs();
  return std::min((a - b).norm(), (a + b).norm());
}

double dist_r(const Mat3& r1, const Mat3& r2) {
  return dist_q(matrix_to_quat(r1), matrix_to_quat(r2));
}

double angle_deg(const UnitQuaternion& q1, const UnitQuaternion& q2) {
  UnitQuaternion rel = quat_mul(q1.conjugate(), q2);
  double s = std::sqrt(rel.x * rel.x + rel.y * rel.y + rel.z * rel.z);
  double rad = 2.0 * std::atan2(s, std::abs(rel.w));
  return rad * 180.0 / M_PI;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {quat_mul(a.rotation, b.rotation), rotate(a.rotation, b.translation) + a.translation};
}

RigidTransform inverse(const RigidTransform& t) {
  UnitQuaternion qi = t.rotation.conjugate();
  return {qi, -rotate(qi, t.translation)};
}

Vec3 apply(const RigidTransform& t, const Vec3& p) {
  return rotate(t.rotation, p) + t.translation;
}

double dist_m(const RigidTransform& a, const RigidTransform& b) {
  return dist_q(a.rotation, b.rotation) + (a.translation - b.translation).squaredNorm() / 3.0;
}

UnitQuaternion random_rotation(Rng& rng) {
  for (;;) {
    double w = rng.gaussian(), x = rng.gaussian(), y = rng.gaussian(), z = rng.gaussian();
    double n = std::sqrt(w * w + x * x + y * y + z * z);
    if (n > 1e-9) return {w / n, x / n, y / n, z / n};
  }
}

RigidTransform random_transform(Rng& rng, double translation_bound) {
  UnitQuaternion q = random_rotation(rng);
  Vec3 t = Vec3::Zero();
  if (translation_bound > 0.0) {
    for (int i = 0; i < 3; ++i) t[i] = rng.uniform(-translation_bound, translation_bound);
  }
  return {q, t};
}

nlohmann::json transform_to_json(const RigidTransform& t) {
  return nlohmann::json{
      {"q", {t.rotation.w, t.rotation.x, t.rotation.y, t.rotation.z}},
      {"t", {t.translation[0], t.translation[1], t.translation[2]}},
  };
}

RigidTransform transform_from_json(const nlohmann::json& j) {
  const auto& q = j.at("q");
  const auto& t = j.at("t");
  if (q.size() != 4 || t.size() != 3) throw SchemaError("transform_from_json: bad q/t arity");
  RigidTransform out;
  out.rotation = quat_normalize(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(),
                                q[3].get<double>());
  out.translation = Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
  return out;
}

}  // namespace ctf
