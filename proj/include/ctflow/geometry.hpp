#pragma once

#include <Eigen/Core>

#include "ctflow/common.hpp"

#include <nlohmann/json_fwd.hpp>

namespace ctf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Unit quaternion, component order (w, x, y, z) in memory and on disk.
// q and -q represent the same rotation; every distance below respects that.
struct UnitQuaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static UnitQuaternion identity() { return {1.0, 0.0, 0.0, 0.0}; }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  UnitQuaternion conjugate() const { return {w, -x, -y, -z}; }
  Eigen::Vector4d coeffs() const { return {w, x, y, z}; }
};

// Throws InvalidArgument on (near-)zero norm input.
UnitQuaternion quat_normalize(double w, double x, double y, double z);
UnitQuaternion quat_normalize(const Eigen::Vector4d& q);

// Hamilton product a*b (rotation b applied first).
UnitQuaternion quat_mul(const UnitQuaternion& a, const UnitQuaternion& b);

Mat3 quat_to_matrix(const UnitQuaternion& q);

// Requires a proper orthogonal matrix (orthonormal within 1e-5, det = +1
// within 1e-5); throws InvalidRotation otherwise.
UnitQuaternion matrix_to_quat(const Mat3& m);

Vec3 rotate(const UnitQuaternion& q, const Vec3& v);

// D_q: min(|q1 - q2|, |q1 + q2|), in [0, sqrt(2)].
double dist_q(const UnitQuaternion& q1, const UnitQuaternion& q2);

// D_r on matrix-form rotations: D_q of the converted quaternions.
double dist_r(const Mat3& r1, const Mat3& r2);

// Rotation angle of the relative quaternion q1^-1 * q2, folded to [0, 180].
double angle_deg(const UnitQuaternion& q1, const UnitQuaternion& q2);

// Rigid transform x -> R x + t.
struct RigidTransform {
  UnitQuaternion rotation;
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
};

// compose(a, b): apply b first, then a.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform inverse(const RigidTransform& t);
Vec3 apply(const RigidTransform& t, const Vec3& p);

// D_m: D_q of the rotations plus the mean squared error over the three
// translation components.
double dist_m(const RigidTransform& a, const RigidTransform& b);

// Uniform rotation: normalized 4-D gaussian sample.
UnitQuaternion random_rotation(Rng& rng);

// Uniform rotation plus translation components uniform in [-bound, bound].
RigidTransform random_transform(Rng& rng, double translation_bound);

// JSON form {"q": [w,x,y,z], "t": [x,y,z]}; used by dataset metadata and
// checkpoints.
nlohmann::json transform_to_json(const RigidTransform& t);
RigidTransform transform_from_json(const nlohmann::json& j);

}  // namespace ctf
