#pragma once

#include "cryoguide/structure.hpp"
#include "cryoguide/volume.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace fixtures {

using namespace cryoguide;

// Three glycines, four heavy atoms each.
inline const char* kPolyGly =
    "ATOM      1  N   GLY A   1      -1.195   0.540   0.000  1.00  0.00           N\n"
    "ATOM      2  CA  GLY A   1       0.000   1.360   0.000  1.00  0.00           C\n"
    "ATOM      3  C   GLY A   1       1.250   0.500   0.000  1.00  0.00           C\n"
    "ATOM      4  O   GLY A   1       1.250  -0.730   0.000  1.00  0.00           O\n"
    "ATOM      5  N   GLY A   2       2.390   1.180   0.000  1.00  0.00           N\n"
    "ATOM      6  CA  GLY A   2       3.660   0.470   0.000  1.00  0.00           C\n"
    "ATOM      7  C   GLY A   2       4.860   1.410   0.000  1.00  0.00           C\n"
    "ATOM      8  O   GLY A   2       4.690   2.630   0.000  1.00  0.00           O\n"
    "ATOM      9  N   GLY A   3       6.060   0.840   0.000  1.00  0.00           N\n"
    "ATOM     10  CA  GLY A   3       7.280   1.620   0.000  1.00  0.00           C\n"
    "ATOM     11  C   GLY A   3       8.520   0.740   0.000  1.00  0.00           C\n"
    "ATOM     12  O   GLY A   3       8.410  -0.490   0.000  1.00  0.00           O\n"
    "TER      13      GLY A   3\n"
    "END\n";

inline AtomicModel poly_gly() { return parse_pdb_string(kPolyGly, "poly-gly"); }

inline Coords random_coords(std::size_t n, std::mt19937_64& rng, double scale = 5.0) {
  std::normal_distribution<double> d(0.0, scale);
  Coords out(n);
  for (auto& p : out) p = Vec3(d(rng), d(rng), d(rng));
  return out;
}

/// A random model of n atoms of mixed elements, one atom (named CA) per residue.
inline AtomicModel random_model(std::size_t n, std::mt19937_64& rng, double scale = 5.0) {
  static const char* elems[] = {"C", "N", "O", "S"};
  AtomicModel m;
  const Coords pos = random_coords(n, rng, scale);
  for (std::size_t i = 0; i < n; ++i) {
    Atom a;
    a.element = element_or_throw(elems[i % 4]);
    a.pos = pos[i];
    a.res_index = static_cast<int>(i) + 1;
    a.res_name = "ALA";
    a.atom_name = "CA";
    m.atoms.push_back(a);
  }
  return m;
}

inline GridGeometry cube_grid(std::size_t n, double voxel, Vec3 origin = Vec3::Zero()) {
  GridGeometry g;
  g.dims = {n, n, n};
  g.voxel_size = voxel;
  g.origin = origin;
  return g;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("cryoguide_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace fixtures
