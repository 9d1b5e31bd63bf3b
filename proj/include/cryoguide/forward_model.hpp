#pragma once

#include "cryoguide/core.hpp"
#include "cryoguide/structure.hpp"
#include "cryoguide/volume.hpp"

#include <map>
#include <string>
#include <vector>

namespace cryoguide {

/// Per-element Gaussian amplitudes and the resolution -> width policy.
struct FormFactorTable {
  double sigma_factor = 0.225;                           // sigma = sigma_factor * resolution
  std::map<std::string, double> amplitude_overrides;     // keyed by element symbol

  double amplitude(const Element& e) const {
    if (auto it = amplitude_overrides.find(e.symbol); it != amplitude_overrides.end()) return it->second;
    return static_cast<double>(e.atomic_number);
  }
  double sigma(double resolution) const {
    if (!(resolution > 0.0)) throw GeometryError("resolution must be positive");
    return sigma_factor * resolution;
  }
  std::vector<double> amplitudes(const AtomicModel& model) const {
    std::vector<double> out;
    out.reserve(model.size());
    for (const auto& a : model.atoms) {
      const double amp = amplitude(a.element);
      if (!(amp > 0.0)) throw GeometryError("non-positive amplitude for element " + a.element.symbol);
      out.push_back(amp);
    }
    return out;
  }
};

/// Isotropic Gaussian blur of width sigma_b (Å). sigma_b = 0 is the identity.
struct BlurOperator {
  double sigma_b = 0.0;
};

namespace detail {

// Splat profile: exact Gaussian out to 3.5 sigma, then a quintic taper reaching zero
// (with zero first and second derivative) at the 4 sigma cutoff.
inline constexpr double kTaperStart = 3.5;
inline constexpr double kCutoff = 4.0;

struct SplatValue {
  double value;
  double dvalue_dr_over_r;  // d(value)/dr divided by r; gradient wrt atom = -(v - p) * this
};

inline SplatValue splat_profile(double r2, double sigma) {
  const double rc = kCutoff * sigma;
  if (r2 >= rc * rc) return {0.0, 0.0};
  const double inv_s2 = 1.0 / (sigma * sigma);
  const double g = std::exp(-0.5 * r2 * inv_s2);
  const double rt = kTaperStart * sigma;
  if (r2 <= rt * rt) return {g, -g * inv_s2};
  const double r = std::sqrt(r2);
  const double width = rc - rt;
  const double t = (r - rt) / width;
  const double s = t * t * t * (t * (6.0 * t - 15.0) + 10.0);
  const double ds = 30.0 * t * t * (1.0 - t) * (1.0 - t) / width;
  const double w = 1.0 - s;
  // d/dr [g w] = -r/sigma^2 g w - g ds
  return {g * w, -g * w * inv_s2 - g * ds / r};
}

struct VoxelBox {
  std::array<std::ptrdiff_t, 3> lo{}, hi{};
  bool empty() const { return lo[0] > hi[0] || lo[1] > hi[1] || lo[2] > hi[2]; }
};

inline VoxelBox footprint(const GridGeometry& g, const Vec3& p, double radius) {
  VoxelBox b;
  for (int a = 0; a < 3; ++a) {
    const double c = (p[a] - g.origin[a]) / g.voxel_size;
    const double r = radius / g.voxel_size;
    b.lo[a] = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(c - r)));
    b.hi[a] = std::min<std::ptrdiff_t>(std::ptrdiff_t(g.dims[static_cast<std::size_t>(a)]) - 1,
                                       static_cast<std::ptrdiff_t>(std::floor(c + r)));
  }
  return b;
}

template <typename Fn>
void for_each_in_footprint(const GridGeometry& g, const Vec3& p, double sigma, Fn&& fn) {
  if (!p.allFinite()) return;
  const VoxelBox b = footprint(g, p, kCutoff * sigma);
  if (b.empty()) return;
  for (auto k = b.lo[2]; k <= b.hi[2]; ++k)
    for (auto j = b.lo[1]; j <= b.hi[1]; ++j)
      for (auto i = b.lo[0]; i <= b.hi[0]; ++i) {
        const std::size_t idx = g.index(std::size_t(i), std::size_t(j), std::size_t(k));
        const Vec3 d = g.world(std::size_t(i), std::size_t(j), std::size_t(k)) - p;
        fn(idx, d);
      }
}

inline std::vector<double> blur_kernel(double sigma_vox) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(kCutoff * sigma_vox));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t m = -radius; m <= radius; ++m) {
    const double v = std::exp(-0.5 * double(m * m) / (sigma_vox * sigma_vox));
    k[static_cast<std::size_t>(m + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

// One separable pass along `axis` with clamp-to-edge boundaries. The adjoint variant
// scatters instead of gathers.
inline std::vector<double> convolve_axis(const std::vector<double>& in, const Dims& dims, int axis,
                                         const std::vector<double>& kernel, bool adjoint) {
  std::vector<double> out(in.size(), 0.0);
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const std::array<std::size_t, 3> stride{1, dims[0], dims[0] * dims[1]};
  const auto n = static_cast<std::ptrdiff_t>(dims[static_cast<std::size_t>(axis)]);
  const std::size_t s = stride[static_cast<std::size_t>(axis)];
  for (std::size_t k = 0; k < dims[2]; ++k)
    for (std::size_t j = 0; j < dims[1]; ++j)
      for (std::size_t i = 0; i < dims[0]; ++i) {
        const std::array<std::size_t, 3> ijk{i, j, k};
        const std::size_t base = i + dims[0] * (j + dims[1] * k);
        const auto pos = static_cast<std::ptrdiff_t>(ijk[static_cast<std::size_t>(axis)]);
        const std::size_t line_start = base - static_cast<std::size_t>(pos) * s;
        for (std::ptrdiff_t m = -radius; m <= radius; ++m) {
          const std::ptrdiff_t q = std::clamp<std::ptrdiff_t>(pos + m, 0, n - 1);
          const std::size_t other = line_start + static_cast<std::size_t>(q) * s;
          const double w = kernel[static_cast<std::size_t>(m + radius)];
          if (adjoint) {
            out[other] += w * in[base];
          } else {
            out[base] += w * in[other];
          }
        }
      }
  return out;
}

inline std::vector<double> blur_data(const std::vector<double>& data, const GridGeometry& g, const BlurOperator& blur,
                                     bool adjoint) {
  if (blur.sigma_b < 0.0) throw GeometryError("blur sigma must be >= 0");
  if (blur.sigma_b == 0.0) return data;
  const auto kernel = blur_kernel(blur.sigma_b / g.voxel_size);
  std::vector<double> cur = data;
  for (int axis = 0; axis < 3; ++axis) cur = convolve_axis(cur, g.dims, axis, kernel, adjoint);
  return cur;
}

}  // namespace detail

/// Sum of per-atom Gaussians evaluated at voxel centers of `grid`.
inline DensityMap simulate_map(std::span<const Vec3> positions, std::span<const double> amplitudes,
                               const GridGeometry& grid, double sigma) {
  if (positions.size() != amplitudes.size()) throw GeometryError("simulate_map: amplitude count mismatch");
  if (!(sigma > 0.0)) throw GeometryError("simulate_map: sigma must be positive");
  DensityMap out(grid);
  auto& d = out.data();
  for (std::size_t a = 0; a < positions.size(); ++a) {
    const double amp = amplitudes[a];
    detail::for_each_in_footprint(grid, positions[a], sigma, [&](std::size_t idx, const Vec3& dv) {
      d[idx] += amp * detail::splat_profile(dv.squaredNorm(), sigma).value;
    });
  }
  return out;
}

inline DensityMap simulate_map(const AtomicModel& model, const GridGeometry& grid, double resolution,
                               const FormFactorTable& table = {}) {
  if (model.empty()) throw EmptySelectionError("simulate_map: empty model");
  const auto pos = model.positions();
  const auto amp = table.amplitudes(model);
  DensityMap out = simulate_map(pos, amp, grid, table.sigma(resolution));
  out.set_resolution(resolution);
  return out;
}

inline DensityMap apply_blur(const DensityMap& map, const BlurOperator& blur) {
  return DensityMap(map.geometry(), detail::blur_data(map.data(), map.geometry(), blur, false), map.resolution());
}

/// Squared-norm misfit ||y - B(Gamma(x))||^2 against a fixed target map, with its analytic
/// coordinate gradient. Positions/amplitudes are held by the caller.
class DensityFit {
 public:
  DensityFit(DensityMap target, double resolution, BlurOperator blur = {}, FormFactorTable table = {})
      : target_(std::move(target)), sigma_(table.sigma(resolution)), blur_(blur), table_(std::move(table)) {}

  const DensityMap& target() const { return target_; }
  double sigma() const { return sigma_; }
  const FormFactorTable& table() const { return table_; }

  std::vector<double> residual(std::span<const Vec3> pos, std::span<const double> amp) const {
    const DensityMap sim = simulate_map(pos, amp, target_.geometry(), sigma_);
    std::vector<double> r = detail::blur_data(sim.data(), target_.geometry(), blur_, false);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= target_.data()[i];
    return r;
  }

  double loss(std::span<const Vec3> pos, std::span<const double> amp) const {
    double s = 0.0;
    for (double v : residual(pos, amp)) s += v * v;
    return s;
  }

  Coords gradient(std::span<const Vec3> pos, std::span<const double> amp) const {
    // d loss / d sim = 2 B^T r, then chain through each splat.
    std::vector<double> r = residual(pos, amp);
    for (double& v : r) v *= 2.0;
    const std::vector<double> back = detail::blur_data(r, target_.geometry(), blur_, true);
    Coords grad(pos.size(), Vec3::Zero());
    for (std::size_t a = 0; a < pos.size(); ++a) {
      Vec3 acc = Vec3::Zero();
      detail::for_each_in_footprint(target_.geometry(), pos[a], sigma_, [&](std::size_t idx, const Vec3& dv) {
        const auto sp = detail::splat_profile(dv.squaredNorm(), sigma_);
        // d value / d p = -(dv) * (dvalue/dr)/r
        acc -= back[idx] * amp[a] * sp.dvalue_dr_over_r * dv;
      });
      grad[a] = acc;
    }
    return grad;
  }

 private:
  DensityMap target_;
  double sigma_;
  BlurOperator blur_;
  FormFactorTable table_;
};

inline void require_same_grid(const DensityMap& a, const GridGeometry& g) {
  if (!(a.geometry() == g)) throw GeometryError("density maps are on different grids");
}

inline double density_loss(const AtomicModel& model, const DensityMap& target, double resolution,
                           const BlurOperator& blur = {}, const FormFactorTable& table = {}) {
  if (model.empty()) throw EmptySelectionError("density_loss: empty model");
  const DensityFit fit(target, resolution, blur, table);
  const auto pos = model.positions();
  return fit.loss(pos, table.amplitudes(model));
}

inline Coords density_loss_grad(const AtomicModel& model, const DensityMap& target, double resolution,
                                const BlurOperator& blur = {}, const FormFactorTable& table = {}) {
  if (model.empty()) throw EmptySelectionError("density_loss_grad: empty model");
  const DensityFit fit(target, resolution, blur, table);
  const auto pos = model.positions();
  return fit.gradient(pos, table.amplitudes(model));
}

/// Loss of a simulated map against a target that must share its grid.
inline double map_misfit(const DensityMap& simulated, const DensityMap& target) {
  require_same_grid(simulated, target.geometry());
  double s = 0.0;
  for (std::size_t i = 0; i < simulated.size(); ++i) {
    const double d = simulated.data()[i] - target.data()[i];
    s += d * d;
  }
  return s;
}

/// Smallest grid enclosing the model with `pad` voxels of margin on every side.
inline GridGeometry enclosing_grid(const AtomicModel& model, double voxel_size, std::size_t pad) {
  if (model.empty()) throw EmptySelectionError("enclosing_grid: empty model");
  if (!(voxel_size > 0.0)) throw GeometryError("voxel size must be positive");
  Vec3 lo = model.atoms.front().pos, hi = lo;
  for (const auto& a : model.atoms) {
    lo = lo.cwiseMin(a.pos);
    hi = hi.cwiseMax(a.pos);
  }
  GridGeometry g;
  g.voxel_size = voxel_size;
  for (int a = 0; a < 3; ++a) {
    const double start = std::floor(lo[a] / voxel_size) - double(pad);
    const double stop = std::ceil(hi[a] / voxel_size) + double(pad);
    g.origin[a] = start * voxel_size;
    g.dims[static_cast<std::size_t>(a)] = static_cast<std::size_t>(stop - start) + 1;
  }
  return g;
}

/// Grow a grid symmetrically so every dimension is at least `box` voxels.
inline GridGeometry pad_to_box(GridGeometry g, std::size_t box) {
  for (int a = 0; a < 3; ++a) {
    auto& n = g.dims[static_cast<std::size_t>(a)];
    if (n >= box) continue;
    const std::size_t extra = box - n;
    g.origin[a] -= g.voxel_size * double(extra / 2);
    n = box;
  }
  return g;
}

}  // namespace cryoguide
