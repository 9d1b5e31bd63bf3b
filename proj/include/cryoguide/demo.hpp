#pragma once

#include "cryoguide/core.hpp"
#include "cryoguide/forward_model.hpp"
#include "cryoguide/sampler.hpp"
#include "cryoguide/structure.hpp"

#include <array>
#include <numbers>

namespace cryoguide {

/// Two straight arms of beads joined at a hinge bead; the second arm is rotated by
/// angle_deg in the xy-plane. One CA atom per residue, centered on its centroid.
inline AtomicModel hinge_chain(double angle_deg, std::size_t n_beads = 30, double bond = 3.8) {
  if (n_beads < 3) throw GeometryError("hinge_chain: need at least 3 beads");
  const std::size_t first = n_beads / 2;
  const double th = angle_deg * std::numbers::pi / 180.0;
  const Vec3 dir(std::cos(th), std::sin(th), 0.0);
  Coords pts;
  for (std::size_t i = 0; i < first; ++i) pts.emplace_back(static_cast<double>(i) * bond, 0.0, 0.0);
  const Vec3 hinge = pts.back();
  for (std::size_t i = 1; pts.size() < n_beads; ++i) pts.push_back(hinge + static_cast<double>(i) * bond * dir);
  const Vec3 c = centroid(pts);
  AtomicModel m;
  m.provenance = "hinge_chain";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    Atom a;
    a.element = element_or_throw("C");
    a.pos = pts[i] - c;
    a.chain_id = "A";
    a.res_index = static_cast<int>(i) + 1;
    a.res_name = "GLY";
    a.atom_name = "CA";
    m.atoms.push_back(a);
  }
  return m;
}

/// Stage lengths for the demo. The analytic prior settles on a conformation while sigma is still
/// large, so point-cloud guidance has to start earlier than in the published schedules.
inline constexpr std::array<std::size_t, 4> kDemoStages{60, 90, 25, 25};

struct TwoModeDemoOptions {
  std::size_t n_beads = 30;
  double majority_angle = 0.0;   // degrees
  double minority_angle = 60.0;  // degrees
  double majority_weight = 0.95;
  double tau = 1.0;
  double resolution = 2.0;
  double voxel_size = 1.0;
  std::size_t pad = 8;
};

/// A two-conformation prior and a map simulated from its minority conformation.
struct TwoModeDemo {
  AtomicModel majority;
  AtomicModel minority;
  GaussianMixturePrior prior;
  DensityMap map;
  double resolution;
};

inline TwoModeDemo make_two_mode_demo(const TwoModeDemoOptions& o = {}, const std::string& label = "hinge") {
  AtomicModel major = hinge_chain(o.majority_angle, o.n_beads);
  AtomicModel minor = hinge_chain(o.minority_angle, o.n_beads);
  GaussianMixturePrior prior({{flatten(major.positions()), o.tau, o.majority_weight},
                              {flatten(minor.positions()), o.tau, 1.0 - o.majority_weight}},
                             label);
  const GridGeometry grid = enclosing_grid(minor, o.voxel_size, o.pad);
  DensityMap map = simulate_map(minor, grid, o.resolution);
  return {std::move(major), std::move(minor), std::move(prior), std::move(map), o.resolution};
}

}  // namespace cryoguide
