#pragma once

#include <array>
#include <cmath>

namespace voxloc {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kPitchMin = -20.0;  // looking up
inline constexpr double kPitchMax = 30.0;   // looking down (exclusive)

// wrap into [-180, 180)
inline double wrap_yaw(double yaw) {
  double y = std::fmod(yaw + 180.0, 360.0);
  if (y < 0) y += 360.0;
  return y - 180.0;
}

inline double clamp_pitch(double pitch) {
  if (pitch < kPitchMin) return kPitchMin;
  // keep strictly inside the half-open domain
  double hi = std::nextafter(kPitchMax, kPitchMin);
  return pitch > hi ? hi : pitch;
}

// 5-DoF camera pose; positions in whatever frame the owner maintains
// (world blocks before normalization, roughly [-1,1] after), angles in
// degrees with yaw in [-180,180) and pitch in [-20,30), positive pitch
// looking down.
struct CameraPose {
  double x = 0, y = 0, z = 0;
  double yaw = 0;
  double pitch = 0;

  CameraPose canonical() const {
    CameraPose p = *this;
    p.yaw = wrap_yaw(p.yaw);
    p.pitch = clamp_pitch(p.pitch);
    return p;
  }
};

// x, y, z, sin(yaw), cos(yaw), sin(pitch), cos(pitch); angles in radians
using PoseEncoding = std::array<double, 7>;

inline PoseEncoding encode_pose(const CameraPose& pose) {
  CameraPose p = pose.canonical();
  double yr = p.yaw * kPi / 180.0;
  double pr = p.pitch * kPi / 180.0;
  return {p.x, p.y, p.z, std::sin(yr), std::cos(yr), std::sin(pr), std::cos(pr)};
}

// Per-episode affine normalization: positions centered at the episode
// centroid and scaled by fixed global constants so typical walks land in
// [-1, 1]. Angles pass through unchanged.
struct PoseNormalization {
  double cx = 0, cy = 0, cz = 0;
  double xy_scale = 1.0 / 20.0;
  double z_scale = 1.0 / 20.0;

  CameraPose apply(const CameraPose& p) const {
    CameraPose q = p;
    q.x = (p.x - cx) * xy_scale;
    q.y = (p.y - cy) * xy_scale;
    q.z = (p.z - cz) * z_scale;
    return q;
  }

  CameraPose invert(const CameraPose& p) const {
    CameraPose q = p;
    q.x = p.x / xy_scale + cx;
    q.y = p.y / xy_scale + cy;
    q.z = p.z / z_scale + cz;
    return q;
  }
};

}  // namespace voxloc
