#pragma once

#include "cryoguide/core.hpp"
#include "cryoguide/volume.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace cryoguide {

/// Weighted 3D points. Weights are normalized to sum to one on construction.
class PointCloud {
 public:
  PointCloud() = default;
  PointCloud(Coords points, std::vector<double> weights) : points_(std::move(points)), weights_(std::move(weights)) {
    if (points_.size() != weights_.size()) throw GeometryError("PointCloud: weight count mismatch");
    if (!all_finite(points_)) throw GeometryError("PointCloud: non-finite coordinate");
    double total = 0.0;
    for (double w : weights_) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw GeometryError("PointCloud: weights must be finite and >= 0");
      total += w;
    }
    if (!(total > 0.0)) throw GeometryError("PointCloud: weights must sum to a positive value");
    for (double& w : weights_) w /= total;
  }
  static PointCloud uniform(Coords points) {
    std::vector<double> w(points.size(), 1.0);
    return PointCloud(std::move(points), std::move(w));
  }

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  const Coords& points() const { return points_; }
  const std::vector<double>& weights() const { return weights_; }

 private:
  Coords points_;
  std::vector<double> weights_;
};

/// Number of clusters for n_atoms atoms on a grid of voxel_size Å: floor(N / (4 r^3)), at least 1.
inline std::size_t cluster_count(std::size_t n_atoms, double voxel_size) {
  if (n_atoms < 1) throw GeometryError("cluster_count: need at least one atom");
  if (!(voxel_size > 0.0)) throw GeometryError("cluster_count: voxel size must be positive");
  const double k = std::floor(static_cast<double>(n_atoms) / (4.0 * voxel_size * voxel_size * voxel_size));
  return std::max<std::size_t>(1, static_cast<std::size_t>(k));
}

struct KMeansOptions {
  std::size_t restarts = 10;
  std::size_t max_iterations = 100;
  double tolerance = 1e-4;  // max centroid displacement, Å
};

struct KMeansResult {
  Coords centroids;
  std::vector<double> cluster_mass;     // total point weight per cluster
  std::vector<std::size_t> assignment;  // cluster index per input point
  double objective = 0.0;               // sum_v w_v ||v - c(v)||^2
  std::vector<double> history;          // objective after every Lloyd iteration (best restart)
  std::size_t iterations = 0;
};

namespace detail {

inline std::size_t nearest(const Vec3& p, const Coords& centers, double* dist2 = nullptr) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centers.size(); ++c) {
    const double d = (p - centers[c]).squaredNorm();
    if (d < bd) {  // strict: lowest index wins ties
      bd = d;
      best = c;
    }
  }
  if (dist2) *dist2 = bd;
  return best;
}

inline std::size_t sample_index(const std::vector<double>& mass, std::mt19937_64& rng) {
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  if (!(total > 0.0)) return 0;
  std::uniform_real_distribution<double> u(0.0, total);
  const double target = u(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < mass.size(); ++i) {
    acc += mass[i];
    if (target < acc) return i;
  }
  // Floating round-off: last positive entry.
  for (std::size_t i = mass.size(); i-- > 0;)
    if (mass[i] > 0.0) return i;
  return 0;
}

// Weighted k-means++ seeding: first center ~ w, subsequent ~ w * D^2.
inline Coords seed_plus_plus(std::span<const Vec3> pts, std::span<const double> w, std::size_t k,
                             std::mt19937_64& rng) {
  Coords centers;
  std::vector<double> mass(w.begin(), w.end());
  centers.push_back(pts[sample_index(mass, rng)]);
  std::vector<double> d2(pts.size(), std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      d2[i] = std::min(d2[i], (pts[i] - centers.back()).squaredNorm());
      mass[i] = w[i] * d2[i];
    }
    centers.push_back(pts[sample_index(mass, rng)]);
  }
  return centers;
}

inline double kmeans_objective(std::span<const Vec3> pts, std::span<const double> w, const Coords& centers,
                               const std::vector<std::size_t>& assign) {
  double s = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) s += w[i] * (pts[i] - centers[assign[i]]).squaredNorm();
  return s;
}

// Single-point transfers (Hartigan): move a point to another cluster whenever that strictly
// lowers the objective, accounting for both centroids shifting. Never empties a cluster.
inline void transfer_refine(std::span<const Vec3> pts, std::span<const double> w, std::vector<std::size_t>& assign,
                            std::size_t k, std::size_t max_passes = 100) {
  Coords sum(k, Vec3::Zero());
  std::vector<double> mass(k, 0.0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    sum[assign[i]] += w[i] * pts[i];
    mass[assign[i]] += w[i];
  }
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    bool moved = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const std::size_t a = assign[i];
      const double wi = w[i];
      if (!(wi > 0.0) || mass[a] - wi <= 1e-12 * mass[a]) continue;
      const double remove_gain = wi * mass[a] / (mass[a] - wi) * (pts[i] - sum[a] / mass[a]).squaredNorm();
      std::size_t best = a;
      double best_delta = 0.0;
      for (std::size_t b = 0; b < k; ++b) {
        if (b == a || !(mass[b] > 0.0)) continue;
        const double add_cost = wi * mass[b] / (mass[b] + wi) * (pts[i] - sum[b] / mass[b]).squaredNorm();
        const double delta = add_cost - remove_gain;
        if (delta < best_delta - 1e-12 * remove_gain) {
          best_delta = delta;
          best = b;
        }
      }
      if (best == a) continue;
      sum[a] -= wi * pts[i];
      mass[a] -= wi;
      sum[best] += wi * pts[i];
      mass[best] += wi;
      assign[i] = best;
      moved = true;
    }
    if (!moved) break;
  }
}

inline KMeansResult lloyd(std::span<const Vec3> pts, std::span<const double> w, Coords centers,
                          const KMeansOptions& opt) {
  const std::size_t k = centers.size();
  KMeansResult res;
  res.assignment.assign(pts.size(), 0);
  for (std::size_t i = 0; i < pts.size(); ++i) res.assignment[i] = nearest(pts[i], centers);

  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    // Update step.
    Coords sum(k, Vec3::Zero());
    std::vector<double> mass(k, 0.0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      sum[res.assignment[i]] += w[i] * pts[i];
      mass[res.assignment[i]] += w[i];
    }
    Coords next = centers;
    for (std::size_t c = 0; c < k; ++c)
      if (mass[c] > 0.0) next[c] = sum[c] / mass[c];
    // Empty cluster: move it onto the point contributing most to the objective.
    for (std::size_t c = 0; c < k; ++c) {
      if (mass[c] > 0.0) continue;
      std::size_t worst = 0;
      double worst_cost = -1.0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const double cost = w[i] * (pts[i] - next[res.assignment[i]]).squaredNorm();
        if (cost > worst_cost) {
          worst_cost = cost;
          worst = i;
        }
      }
      next[c] = pts[worst];
      res.assignment[worst] = c;
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, (next[c] - centers[c]).norm());
    centers = std::move(next);

    // Assignment step.
    bool changed = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const std::size_t c = nearest(pts[i], centers);
      changed = changed || c != res.assignment[i];
      res.assignment[i] = c;
    }
    res.iterations = it + 1;
    res.history.push_back(kmeans_objective(pts, w, centers, res.assignment));
    std::vector<bool> used(k, false);
    for (std::size_t c : res.assignment) used[c] = true;
    const bool any_empty = std::find(used.begin(), used.end(), false) != used.end();
    if (!any_empty && (!changed || shift < opt.tolerance)) break;
  }

  transfer_refine(pts, w, res.assignment, k);

  // Final centroids are the exact weighted means of the final partition.
  Coords sum(k, Vec3::Zero());
  res.cluster_mass.assign(k, 0.0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    sum[res.assignment[i]] += w[i] * pts[i];
    res.cluster_mass[res.assignment[i]] += w[i];
  }
  for (std::size_t c = 0; c < k; ++c)
    if (res.cluster_mass[c] > 0.0) centers[c] = sum[c] / res.cluster_mass[c];
  res.centroids = std::move(centers);
  res.objective = kmeans_objective(pts, w, res.centroids, res.assignment);
  res.history.push_back(res.objective);
  return res;
}

}  // namespace detail

/// Weighted k-means with k-means++ seeding; the restart with the lowest objective wins
/// (earliest restart on ties). Deterministic for a given seed.
inline KMeansResult weighted_kmeans(std::span<const Vec3> points, std::span<const double> weights, std::size_t k,
                                    std::uint64_t seed, const KMeansOptions& opt = {}) {
  if (points.size() != weights.size()) throw GeometryError("weighted_kmeans: weight count mismatch");
  std::size_t positive = 0;
  for (double w : weights) positive += w > 0.0 ? 1 : 0;
  if (k < 1) throw GeometryError("weighted_kmeans: k must be >= 1");
  if (positive < k) throw EmptySelectionError("weighted_kmeans: fewer positive-weight points than clusters");
  std::mt19937_64 rng(seed);
  KMeansResult best;
  bool have = false;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, opt.restarts); ++r) {
    KMeansResult res = detail::lloyd(points, weights, detail::seed_plus_plus(points, weights, k, rng), opt);
    if (!have || res.objective < best.objective) {
      best = std::move(res);
      have = true;
    }
  }
  return best;
}

/// Point cloud from the strictly positive voxels of a map: k weighted-k-means centroids with
/// weights equal to each cluster's share of total intensity.
inline PointCloud extract_pointcloud(const DensityMap& map, std::size_t k, std::uint64_t seed,
                                     const KMeansOptions& opt = {}) {
  Coords pts;
  std::vector<double> w;
  const auto& g = map.geometry();
  for (std::size_t idx = 0; idx < map.size(); ++idx) {
    const double v = map.data()[idx];
    if (v > 0.0) {
      pts.push_back(g.world(idx));
      w.push_back(v);
    }
  }
  if (pts.size() < k)
    throw EmptySelectionError("extract_pointcloud: " + std::to_string(pts.size()) + " positive voxels for k = " +
                              std::to_string(k));
  KMeansResult res = weighted_kmeans(pts, w, k, seed, opt);
  return PointCloud(std::move(res.centroids), std::move(res.cluster_mass));
}

}  // namespace cryoguide
