#pragma once

#include "cryoguide/core.hpp"
#include "cryoguide/forward_model.hpp"
#include "cryoguide/structure.hpp"
#include "cryoguide/volume.hpp"

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <algorithm>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace cryoguide {

/// Proper rigid motion p -> R p + t.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Coords apply(std::span<const Vec3> pts) const {
    Coords out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(apply(p));
    return out;
  }
  AtomicModel apply(const AtomicModel& m) const {
    AtomicModel out = m;
    for (auto& a : out.atoms) a.pos = apply(a.pos);
    return out;
  }
  RigidTransform inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }
  /// (this * other)(p) = this(other(p))
  RigidTransform operator*(const RigidTransform& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }
  double rotation_angle() const {
    return std::acos(std::clamp((rotation.trace() - 1.0) / 2.0, -1.0, 1.0));
  }
};

struct KabschResult {
  RigidTransform transform;  // maps mobile onto target
  double rmsd = 0.0;         // after applying transform
};

/// Least-squares proper superposition of mobile onto target (paired points).
inline KabschResult kabsch(std::span<const Vec3> mobile, std::span<const Vec3> target) {
  if (mobile.size() != target.size()) throw GeometryError("kabsch: point count mismatch");
  if (mobile.size() < 3) throw GeometryError("kabsch: need at least 3 points");
  const Vec3 cm = centroid(mobile);
  const Vec3 ct = centroid(target);
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < mobile.size(); ++i) h += (mobile[i] - cm) * (target[i] - ct).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  const double d = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Mat3 r = v * Eigen::Vector3d(1.0, 1.0, d).asDiagonal() * u.transpose();
  KabschResult res;
  res.transform.rotation = r;
  res.transform.translation = ct - r * cm;
  const Coords moved = res.transform.apply(mobile);
  res.rmsd = rmsd_no_fit(moved, target);
  return res;
}

/// Rotation from an axis-angle vector (radians times unit axis).
inline Mat3 rotation_from_vector(const Vec3& w) {
  const double angle = w.norm();
  if (angle == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
}

/// Quasi-uniform rotations (super-Fibonacci spiral on the unit quaternions).
inline std::vector<Mat3> quasi_uniform_rotations(std::size_t n) {
  std::vector<Mat3> out;
  out.reserve(n);
  const double phi = std::numbers::sqrt2;
  const double psi = 1.533751168755204288118041;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double r = std::sqrt(s);
    const double big_r = std::sqrt(1.0 - s);
    const double alpha = 2.0 * std::numbers::pi * static_cast<double>(i) / phi;
    const double beta = 2.0 * std::numbers::pi * static_cast<double>(i) / psi;
    const Eigen::Quaterniond q(r * std::cos(alpha), big_r * std::sin(beta), big_r * std::cos(beta), r * std::sin(alpha));
    out.push_back(q.normalized().toRotationMatrix());
  }
  return out;
}

/// Pearson correlation of two equally sized sample vectors. Throws on zero variance.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw GeometryError("pearson: size mismatch");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) throw NumericError("pearson: zero variance");
  return sab / std::sqrt(saa * sbb);
}

struct DockOptions {
  std::size_t n_rotations = 576;
  std::size_t translation_stride = 2;  // voxels between translation candidates in the global search
  std::size_t refine_top = 4;          // candidates handed to local refinement
  double coarse_resolution = 8.0;      // Å, resolution of the global search and first refinement pass
};

struct DockResult {
  RigidTransform transform;  // applied to the model's coordinates
  double score = 0.0;        // Pearson correlation at `resolution`
  std::size_t candidates = 0;
};

namespace detail {

inline double trilinear(const DensityMap& map, const Vec3& p) {
  const auto& g = map.geometry();
  const Vec3 u = (p - g.origin) / g.voxel_size;
  std::array<std::ptrdiff_t, 3> i0{};
  std::array<double, 3> t{};
  for (int a = 0; a < 3; ++a) {
    const double fl = std::floor(u[a]);
    i0[a] = static_cast<std::ptrdiff_t>(fl);
    t[a] = u[a] - fl;
  }
  double v = 0.0;
  for (int c = 0; c < 8; ++c) {
    std::array<std::ptrdiff_t, 3> ii{i0[0] + (c & 1), i0[1] + ((c >> 1) & 1), i0[2] + ((c >> 2) & 1)};
    bool inside = true;
    double w = 1.0;
    for (int a = 0; a < 3; ++a) {
      if (ii[a] < 0 || ii[a] >= std::ptrdiff_t(g.dims[std::size_t(a)])) inside = false;
      w *= ((c >> a) & 1) ? t[a] : 1.0 - t[a];
    }
    if (inside && w != 0.0) v += w * map.at(std::size_t(ii[0]), std::size_t(ii[1]), std::size_t(ii[2]));
  }
  return v;
}

struct PoseScorer {
  const DensityMap& target;  // possibly blurred target
  Coords centered;           // model coordinates about their centroid
  std::vector<double> amps;
  double sigma;

  double operator()(const Mat3& r, const Vec3& center) const {
    Coords pos;
    pos.reserve(centered.size());
    for (const auto& p : centered) pos.push_back(r * p + center);
    const DensityMap sim = simulate_map(pos, amps, target.geometry(), sigma);
    double v = 0.0;
    try {
      v = pearson(sim.data(), target.data());
    } catch (const NumericError&) {
      v = -1.0;  // model fully outside the grid
    }
    return v;
  }
};

struct Pose {
  Mat3 rotation;
  Vec3 center;
  double score;
  std::size_t index;
};

// Coordinate descent on (rotation vector, centre) until improvement stalls.
inline Pose refine_pose(const PoseScorer& score, Pose pose, double trans_step, double rot_step, double min_step) {
  while (trans_step >= min_step) {
    bool improved = false;
    for (int axis = 0; axis < 6; ++axis) {
      for (double sign : {1.0, -1.0}) {
        Mat3 r = pose.rotation;
        Vec3 c = pose.center;
        if (axis < 3) {
          Vec3 d = Vec3::Zero();
          d[axis] = sign * trans_step;
          c += d;
        } else {
          Vec3 w = Vec3::Zero();
          w[axis - 3] = sign * rot_step;
          r = rotation_from_vector(w) * r;
        }
        const double s = score(r, c);
        if (s > pose.score + 1e-6) {
          pose.rotation = r;
          pose.center = c;
          pose.score = s;
          improved = true;
          break;
        }
      }
    }
    if (!improved) {
      trans_step *= 0.5;
      rot_step *= 0.5;
    }
  }
  return pose;
}

}  // namespace detail

/// Rigid fit of a model into a density map: global search over quasi-uniform rotations and a
/// translation grid at coarse resolution, then coordinate-descent refinement of the best
/// candidates. Score is the Pearson correlation between the simulated and target maps.
inline DockResult dock_to_map(const AtomicModel& model, const DensityMap& map, double resolution,
                              std::size_t n_rotations, std::uint64_t seed, const DockOptions& base = {},
                              const FormFactorTable& table = {}) {
  if (model.empty()) throw EmptySelectionError("dock_to_map: empty model");
  {
    double mn = map.data().front(), mx = mn;
    for (double v : map.data()) {
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    if (mn == mx) throw NumericError("dock_to_map: target map has zero variance");
  }
  DockOptions opt = base;
  opt.n_rotations = n_rotations;

  const Coords pos = model.positions();
  const Vec3 c0 = centroid(pos);
  Coords centered;
  for (const auto& p : pos) centered.push_back(p - c0);
  const auto amps = table.amplitudes(model);
  const double sigma = table.sigma(resolution);
  const double coarse_res = std::max(resolution, opt.coarse_resolution);
  const double coarse_sigma = table.sigma(coarse_res);
  const double extra = std::sqrt(std::max(0.0, coarse_sigma * coarse_sigma - sigma * sigma));
  const DensityMap coarse = apply_blur(map, BlurOperator{extra});

  // Candidate rotations: identity first, then a seeded random offset of the quasi-uniform set.
  std::vector<Mat3> rotations{Mat3::Identity()};
  {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    const Eigen::Quaterniond q(n01(rng), n01(rng), n01(rng), n01(rng));
    const Mat3 offset = q.normalized().toRotationMatrix();
    for (const auto& r : quasi_uniform_rotations(opt.n_rotations)) rotations.push_back(offset * r);
  }

  // Global search: overlap of the (coarse-smoothed) map with point samples of each atom.
  const auto& g = map.geometry();
  const std::size_t stride = std::max<std::size_t>(1, opt.translation_stride);
  std::vector<Vec3> centers;
  for (std::size_t k = 0; k < g.dims[2]; k += stride)
    for (std::size_t j = 0; j < g.dims[1]; j += stride)
      for (std::size_t i = 0; i < g.dims[0]; i += stride) centers.push_back(g.world(i, j, k));
  centers.push_back(c0);

  std::vector<detail::Pose> best;
  for (std::size_t ri = 0; ri < rotations.size(); ++ri) {
    Coords rotated;
    for (const auto& p : centered) rotated.push_back(rotations[ri] * p);
    double top = -std::numeric_limits<double>::infinity();
    Vec3 top_center = c0;
    for (const auto& c : centers) {
      double s = 0.0;
      for (std::size_t a = 0; a < rotated.size(); ++a) s += amps[a] * detail::trilinear(coarse, rotated[a] + c);
      if (s > top) {
        top = s;
        top_center = c;
      }
    }
    best.push_back({rotations[ri], top_center, top, ri});
  }
  std::stable_sort(best.begin(), best.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  best.resize(std::min(best.size(), std::max<std::size_t>(1, opt.refine_top)));

  const detail::PoseScorer coarse_score{coarse, centered, amps, coarse_sigma};
  const detail::PoseScorer fine_score{map, centered, amps, sigma};
  detail::Pose winner{Mat3::Identity(), c0, -std::numeric_limits<double>::infinity(), 0};
  for (auto cand : best) {
    cand.score = coarse_score(cand.rotation, cand.center);
    cand = detail::refine_pose(coarse_score, cand, 2.0 * g.voxel_size, 0.1, 0.05 * g.voxel_size);
    cand.score = fine_score(cand.rotation, cand.center);
    cand = detail::refine_pose(fine_score, cand, 0.5 * g.voxel_size, 0.02, 0.002 * g.voxel_size);
    if (cand.score > winner.score || (cand.score == winner.score && cand.index < winner.index)) winner = cand;
  }

  DockResult res;
  res.transform.rotation = winner.rotation;
  res.transform.translation = winner.center - winner.rotation * c0;
  res.score = winner.score;
  res.candidates = rotations.size();
  return res;
}

}  // namespace cryoguide
