#pragma once

#include "cryoguide/core.hpp"
#include "cryoguide/structure.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace cryoguide {

static_assert(std::endian::native == std::endian::little, "MRC payloads are read as little-endian");

using Dims = std::array<std::size_t, 3>;

/// Placement of a voxel grid in world space. Voxel (i,j,k) sits at origin + voxel_size*(i,j,k).
struct GridGeometry {
  Dims dims{1, 1, 1};
  double voxel_size = 1.0;
  Vec3 origin = Vec3::Zero();

  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return i + dims[0] * (j + dims[1] * k); }
  Vec3 world(std::size_t i, std::size_t j, std::size_t k) const {
    return origin + voxel_size * Vec3(double(i), double(j), double(k));
  }
  Vec3 world(std::size_t flat) const {
    const std::size_t i = flat % dims[0];
    const std::size_t j = (flat / dims[0]) % dims[1];
    const std::size_t k = flat / (dims[0] * dims[1]);
    return world(i, j, k);
  }
  bool operator==(const GridGeometry& o) const {
    return dims == o.dims && voxel_size == o.voxel_size && origin == o.origin;
  }

  void validate() const {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1) throw GeometryError("grid dimensions must be >= 1");
    if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) throw GeometryError("voxel size must be positive");
    if (!origin.allFinite()) throw GeometryError("grid origin must be finite");
  }
};

/// 3D scalar field on a regular grid, x index fastest.
class DensityMap {
 public:
  DensityMap() = default;
  explicit DensityMap(GridGeometry geom, std::optional<double> resolution = std::nullopt)
      : geom_(geom), data_(geom.voxel_count(), 0.0), resolution_(resolution) {
    geom_.validate();
  }
  DensityMap(GridGeometry geom, std::vector<double> data, std::optional<double> resolution = std::nullopt)
      : geom_(geom), data_(std::move(data)), resolution_(resolution) {
    geom_.validate();
    if (data_.size() != geom_.voxel_count()) throw GeometryError("density data size does not match grid");
  }

  const GridGeometry& geometry() const { return geom_; }
  const Dims& dims() const { return geom_.dims; }
  double voxel_size() const { return geom_.voxel_size; }
  const Vec3& origin() const { return geom_.origin; }
  std::optional<double> resolution() const { return resolution_; }
  void set_resolution(std::optional<double> r) { resolution_ = r; }

  std::size_t size() const { return data_.size(); }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double& at(std::size_t i, std::size_t j, std::size_t k) { return data_[geom_.index(i, j, k)]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const { return data_[geom_.index(i, j, k)]; }
  Vec3 world(std::size_t i, std::size_t j, std::size_t k) const { return geom_.world(i, j, k); }

 private:
  GridGeometry geom_;
  std::vector<double> data_;
  std::optional<double> resolution_;
};

namespace detail {

inline constexpr std::size_t kMrcHeaderBytes = 1024;

template <typename T>
T load(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void store(unsigned char* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

// Resolution metadata travels in a header label of this form.
inline constexpr std::string_view kResolutionLabel = "cryoguide resolution=";

}  // namespace detail

/// Read an MRC2014 volume (modes 0, 1, 2). Axis permutations given by MAPC/MAPR/MAPS are
/// transposed so the result is always x-fastest.
inline DensityMap read_mrc(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::array<unsigned char, detail::kMrcHeaderBytes> h{};
  in.read(reinterpret_cast<char*>(h.data()), h.size());
  if (in.gcount() != static_cast<std::streamsize>(h.size())) throw FormatError(path + ": file shorter than MRC header");

  if (std::memcmp(h.data() + 208, "MAP ", 4) != 0) throw FormatError(path + ": missing MRC 'MAP ' stamp");
  if (h[212] == 0x11 && h[213] == 0x11) throw UnsupportedError(path + ": big-endian MRC files are not supported");

  std::array<std::int32_t, 3> n{}, nstart{}, sampling{}, axis{};
  for (int a = 0; a < 3; ++a) {
    n[a] = detail::load<std::int32_t>(h.data() + 4 * a);
    nstart[a] = detail::load<std::int32_t>(h.data() + 16 + 4 * a);
    sampling[a] = detail::load<std::int32_t>(h.data() + 28 + 4 * a);
    axis[a] = detail::load<std::int32_t>(h.data() + 64 + 4 * a);
  }
  const auto mode = detail::load<std::int32_t>(h.data() + 12);
  const auto nsymbt = detail::load<std::int32_t>(h.data() + 92);
  std::array<float, 3> cell{}, origin_f{};
  for (int a = 0; a < 3; ++a) {
    cell[a] = detail::load<float>(h.data() + 40 + 4 * a);
    origin_f[a] = detail::load<float>(h.data() + 196 + 4 * a);
  }

  for (int a = 0; a < 3; ++a)
    if (n[a] < 1) throw FormatError(path + ": non-positive dimension in header");
  if (nsymbt < 0) throw FormatError(path + ": negative extended header size");
  {
    std::array<std::int32_t, 3> sorted = axis;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != std::array<std::int32_t, 3>{1, 2, 3}) throw FormatError(path + ": invalid MAPC/MAPR/MAPS");
  }
  std::size_t bytes_per_voxel = 0;
  switch (mode) {
    case 0: bytes_per_voxel = 1; break;
    case 1: bytes_per_voxel = 2; break;
    case 2: bytes_per_voxel = 4; break;
    default: throw UnsupportedError(path + ": unsupported MRC mode " + std::to_string(mode));
  }

  // Grid extent along world x,y,z: the file axis c/r/s maps onto world axis axis[c]-1.
  Dims dims{};
  std::array<std::int32_t, 3> start_xyz{};
  for (int a = 0; a < 3; ++a) {
    dims[static_cast<std::size_t>(axis[a] - 1)] = static_cast<std::size_t>(n[a]);
    start_xyz[static_cast<std::size_t>(axis[a] - 1)] = nstart[a];
  }
  std::array<double, 3> vox{};
  for (int a = 0; a < 3; ++a) {
    const double m = sampling[a] > 0 ? sampling[a] : static_cast<double>(dims[static_cast<std::size_t>(a)]);
    vox[a] = cell[a] > 0.0f ? static_cast<double>(cell[a]) / m : 1.0;
  }
  const double tol = 1e-4 * vox[0];
  if (std::abs(vox[0] - vox[1]) > tol || std::abs(vox[0] - vox[2]) > tol)
    throw UnsupportedError(path + ": anisotropic voxel size");
  // Keep full float precision of the cell-derived voxel size.
  const double voxel_size = vox[0];

  GridGeometry geom;
  geom.dims = dims;
  geom.voxel_size = voxel_size;
  if (origin_f[0] != 0.0f || origin_f[1] != 0.0f || origin_f[2] != 0.0f) {
    geom.origin = Vec3(origin_f[0], origin_f[1], origin_f[2]);
  } else {
    geom.origin = voxel_size * Vec3(start_xyz[0], start_xyz[1], start_xyz[2]);
  }

  std::optional<double> resolution;
  const auto nlabl = std::min<std::int32_t>(10, std::max<std::int32_t>(0, detail::load<std::int32_t>(h.data() + 220)));
  for (std::int32_t l = 0; l < nlabl; ++l) {
    std::string_view label(reinterpret_cast<const char*>(h.data() + 224 + 80 * l), 80);
    label = label.substr(0, label.find('\0'));
    if (label.starts_with(detail::kResolutionLabel)) {
      resolution = detail::parse_double(label.substr(detail::kResolutionLabel.size()));
    }
  }

  in.seekg(static_cast<std::streamoff>(detail::kMrcHeaderBytes) + nsymbt, std::ios::beg);
  const std::size_t count = geom.voxel_count();
  std::vector<unsigned char> raw(count * bytes_per_voxel);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IoError(path + ": truncated payload (expected " + std::to_string(raw.size()) + " bytes, got " +
                  std::to_string(in.gcount()) + ")");

  DensityMap map(geom, resolution);
  const std::array<std::size_t, 3> nf{static_cast<std::size_t>(n[0]), static_cast<std::size_t>(n[1]),
                                      static_cast<std::size_t>(n[2])};
  std::size_t file_index = 0;
  for (std::size_t s = 0; s < nf[2]; ++s)
    for (std::size_t r = 0; r < nf[1]; ++r)
      for (std::size_t c = 0; c < nf[0]; ++c, ++file_index) {
        std::array<std::size_t, 3> xyz{};
        xyz[static_cast<std::size_t>(axis[0] - 1)] = c;
        xyz[static_cast<std::size_t>(axis[1] - 1)] = r;
        xyz[static_cast<std::size_t>(axis[2] - 1)] = s;
        const unsigned char* p = raw.data() + file_index * bytes_per_voxel;
        double v = 0.0;
        switch (mode) {
          case 0: v = static_cast<double>(static_cast<std::int8_t>(*p)); break;
          case 1: v = static_cast<double>(detail::load<std::int16_t>(p)); break;
          default: v = static_cast<double>(detail::load<float>(p)); break;
        }
        map.at(xyz[0], xyz[1], xyz[2]) = v;
      }
  return map;
}

/// Write an MRC2014 mode-2 volume. Values are stored as float32.
inline void write_mrc(const DensityMap& map, const std::string& path) {
  std::array<unsigned char, detail::kMrcHeaderBytes> h{};
  const auto& g = map.geometry();
  const auto& d = map.data();
  double dmin = d.empty() ? 0.0 : d.front(), dmax = dmin, sum = 0.0;
  for (double v : d) {
    dmin = std::min(dmin, v);
    dmax = std::max(dmax, v);
    sum += v;
  }
  const double mean = sum / static_cast<double>(d.size());
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double rms = std::sqrt(ss / static_cast<double>(d.size()));

  for (int a = 0; a < 3; ++a) {
    const auto na = static_cast<std::int32_t>(g.dims[static_cast<std::size_t>(a)]);
    detail::store<std::int32_t>(h.data() + 4 * a, na);
    detail::store<std::int32_t>(h.data() + 16 + 4 * a, 0);
    detail::store<std::int32_t>(h.data() + 28 + 4 * a, na);
    detail::store<float>(h.data() + 40 + 4 * a, static_cast<float>(g.voxel_size * na));
    detail::store<float>(h.data() + 52 + 4 * a, 90.0f);
    detail::store<std::int32_t>(h.data() + 64 + 4 * a, a + 1);
    detail::store<float>(h.data() + 196 + 4 * a, static_cast<float>(g.origin[a]));
  }
  detail::store<std::int32_t>(h.data() + 12, 2);
  detail::store<float>(h.data() + 76, static_cast<float>(dmin));
  detail::store<float>(h.data() + 80, static_cast<float>(dmax));
  detail::store<float>(h.data() + 84, static_cast<float>(mean));
  detail::store<std::int32_t>(h.data() + 88, 1);
  detail::store<std::int32_t>(h.data() + 92, 0);
  std::memcpy(h.data() + 104, "MRCO", 4);
  detail::store<std::int32_t>(h.data() + 108, 20140);
  std::memcpy(h.data() + 208, "MAP ", 4);
  h[212] = 0x44;
  h[213] = 0x44;
  detail::store<float>(h.data() + 216, static_cast<float>(rms));
  std::int32_t nlabl = 0;
  if (map.resolution()) {
    char label[81] = {};
    std::snprintf(label, sizeof label, "%s%.6g", detail::kResolutionLabel.data(), *map.resolution());
    std::memcpy(h.data() + 224, label, std::strlen(label));
    nlabl = 1;
  }
  detail::store<std::int32_t>(h.data() + 220, nlabl);

  std::vector<float> payload(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) payload[i] = static_cast<float>(d[i]);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(h.data()), static_cast<std::streamsize>(h.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw IoError("write failed for " + path);
}

inline DensityMap threshold(const DensityMap& map, double level) {
  DensityMap out = map;
  for (double& v : out.data())
    if (v < level) v = 0.0;
  return out;
}

/// Zero every 26-connected component of nonzero voxels smaller than min_size voxels.
inline DensityMap dust(const DensityMap& map, std::size_t min_size) {
  DensityMap out = map;
  if (min_size <= 1) return out;
  const auto& g = map.geometry();
  const auto [nx, ny, nz] = g.dims;
  std::vector<std::int32_t> label(map.size(), -1);
  std::vector<std::size_t> stack, members;
  for (std::size_t seed = 0; seed < map.size(); ++seed) {
    if (map.data()[seed] == 0.0 || label[seed] >= 0) continue;
    members.clear();
    stack.assign(1, seed);
    label[seed] = 1;
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      members.push_back(v);
      const std::size_t i = v % nx, j = (v / nx) % ny, k = v / (nx * ny);
      for (int dk = -1; dk <= 1; ++dk)
        for (int dj = -1; dj <= 1; ++dj)
          for (int di = -1; di <= 1; ++di) {
            const auto ii = static_cast<std::ptrdiff_t>(i) + di;
            const auto jj = static_cast<std::ptrdiff_t>(j) + dj;
            const auto kk = static_cast<std::ptrdiff_t>(k) + dk;
            if (ii < 0 || jj < 0 || kk < 0 || ii >= std::ptrdiff_t(nx) || jj >= std::ptrdiff_t(ny) ||
                kk >= std::ptrdiff_t(nz))
              continue;
            const std::size_t w = g.index(std::size_t(ii), std::size_t(jj), std::size_t(kk));
            if (label[w] >= 0 || map.data()[w] == 0.0) continue;
            label[w] = 1;
            stack.push_back(w);
          }
    }
    if (members.size() < min_size)
      for (std::size_t v : members) out.data()[v] = 0.0;
  }
  return out;
}

/// Crop to the bounding box of voxels >= level, grown by pad voxels per side. Voxels of
/// the new box outside the source grid are zero. World coordinates of kept voxels are unchanged.
inline DensityMap crop_pad(const DensityMap& map, double level, std::size_t pad) {
  const auto& g = map.geometry();
  std::array<std::ptrdiff_t, 3> lo{PTRDIFF_MAX, PTRDIFF_MAX, PTRDIFF_MAX}, hi{-1, -1, -1};
  for (std::size_t k = 0; k < g.dims[2]; ++k)
    for (std::size_t j = 0; j < g.dims[1]; ++j)
      for (std::size_t i = 0; i < g.dims[0]; ++i) {
        if (!(map.at(i, j, k) >= level)) continue;
        const std::array<std::ptrdiff_t, 3> ijk{std::ptrdiff_t(i), std::ptrdiff_t(j), std::ptrdiff_t(k)};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], ijk[a]);
          hi[a] = std::max(hi[a], ijk[a]);
        }
      }
  if (hi[0] < 0) throw EmptySelectionError("crop_pad: no voxel at or above level");

  GridGeometry ng;
  ng.voxel_size = g.voxel_size;
  const auto p = static_cast<std::ptrdiff_t>(pad);
  for (int a = 0; a < 3; ++a) {
    lo[a] -= p;
    hi[a] += p;
    ng.dims[static_cast<std::size_t>(a)] = static_cast<std::size_t>(hi[a] - lo[a] + 1);
  }
  ng.origin = g.origin + g.voxel_size * Vec3(double(lo[0]), double(lo[1]), double(lo[2]));
  DensityMap out(ng, map.resolution());
  for (std::size_t k = 0; k < ng.dims[2]; ++k)
    for (std::size_t j = 0; j < ng.dims[1]; ++j)
      for (std::size_t i = 0; i < ng.dims[0]; ++i) {
        const std::ptrdiff_t si = lo[0] + std::ptrdiff_t(i), sj = lo[1] + std::ptrdiff_t(j),
                             sk = lo[2] + std::ptrdiff_t(k);
        if (si < 0 || sj < 0 || sk < 0 || si >= std::ptrdiff_t(g.dims[0]) || sj >= std::ptrdiff_t(g.dims[1]) ||
            sk >= std::ptrdiff_t(g.dims[2]))
          continue;
        out.at(i, j, k) = map.at(std::size_t(si), std::size_t(sj), std::size_t(sk));
      }
  return out;
}

/// Zero voxels whose centers are farther than radius (Å) from every atom.
inline DensityMap mask_near_model(const DensityMap& map, const AtomicModel& model, double radius) {
  if (model.empty()) throw EmptySelectionError("mask_near_model: empty model");
  const auto& g = map.geometry();
  std::vector<char> keep(map.size(), 0);
  const double r2 = radius * radius;
  for (const auto& atom : model.atoms) {
    std::array<std::ptrdiff_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      const double c = (atom.pos[a] - g.origin[a]) / g.voxel_size;
      const double r = radius / g.voxel_size;
      lo[a] = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(c - r)));
      hi[a] = std::min<std::ptrdiff_t>(std::ptrdiff_t(g.dims[static_cast<std::size_t>(a)]) - 1,
                                       static_cast<std::ptrdiff_t>(std::floor(c + r)));
    }
    for (auto k = lo[2]; k <= hi[2]; ++k)
      for (auto j = lo[1]; j <= hi[1]; ++j)
        for (auto i = lo[0]; i <= hi[0]; ++i) {
          const std::size_t idx = g.index(std::size_t(i), std::size_t(j), std::size_t(k));
          if (keep[idx]) continue;
          if ((g.world(std::size_t(i), std::size_t(j), std::size_t(k)) - atom.pos).squaredNorm() <= r2) keep[idx] = 1;
        }
  }
  DensityMap out = map;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!keep[i]) out.data()[i] = 0.0;
  return out;
}

}  // namespace cryoguide
