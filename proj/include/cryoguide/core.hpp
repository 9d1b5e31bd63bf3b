#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cryoguide {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Coords = std::vector<Vec3>;

// Error hierarchy. Everything the library throws derives from Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : Error {
  using Error::Error;
};
struct UnsupportedError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct EmptySelectionError : Error {
  using Error::Error;
};
struct GeometryError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

inline Eigen::VectorXd flatten(std::span<const Vec3> pts) {
  Eigen::VectorXd out(3 * static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) out.segment<3>(3 * static_cast<Eigen::Index>(i)) = pts[i];
  return out;
}

inline Coords unflatten(const Eigen::VectorXd& flat) {
  Coords out(static_cast<std::size_t>(flat.size() / 3));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = flat.segment<3>(3 * static_cast<Eigen::Index>(i));
  return out;
}

inline Vec3 centroid(std::span<const Vec3> pts) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  return pts.empty() ? c : Vec3(c / static_cast<double>(pts.size()));
}

/// Root-mean-square per-point distance between paired point sets, no superposition.
inline double rmsd_no_fit(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.size() != b.size()) throw GeometryError("rmsd: point count mismatch");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]).squaredNorm();
  return std::sqrt(s / static_cast<double>(a.size()));
}

/// Root-mean-square of per-point vector magnitudes.
inline double rms_magnitude(std::span<const Vec3> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (const auto& p : v) s += p.squaredNorm();
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline bool all_finite(std::span<const Vec3> pts) {
  for (const auto& p : pts)
    if (!p.allFinite()) return false;
  return true;
}

}  // namespace cryoguide
