#pragma once

#include "cryoguide/alignment.hpp"
#include "cryoguide/config.hpp"
#include "cryoguide/demo.hpp"
#include "cryoguide/forward_model.hpp"
#include "cryoguide/metrics.hpp"
#include "cryoguide/pipeline.hpp"
#include "cryoguide/pointcloud.hpp"
#include "cryoguide/structure.hpp"
#include "cryoguide/volume.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

// Command implementations behind the cryoguide executable. Each returns a process exit code
// and reports errors on `err` instead of throwing.
namespace cryoguide::cmd {

namespace detail {

template <class Body>
int guarded(std::ostream& err, Body body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace detail

struct SimulateArgs {
  std::string model;
  double resolution = 2.0;
  double voxel = 1.0;
  std::size_t pad = 5;
  std::size_t box = 0;  // pad the grid to at least box^3
  std::string out;
};

inline int simulate_map(const SimulateArgs& a, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    if (!(a.resolution > 0.0)) throw ConfigError("resolution must be > 0");
    if (!(a.voxel > 0.0)) throw ConfigError("voxel size must be > 0");
    const AtomicModel m = read_pdb(a.model);
    GridGeometry g = enclosing_grid(m, a.voxel, a.pad);
    if (a.box > 0) g = pad_to_box(g, a.box);
    const DensityMap map = cryoguide::simulate_map(m, g, a.resolution);
    write_mrc(map, a.out);
    out << "wrote " << a.out << " (" << g.dims[0] << "x" << g.dims[1] << "x" << g.dims[2] << ", " << m.size()
        << " atoms)\n";
    return 0;
  });
}

struct PointCloudArgs {
  std::string map;
  std::size_t k = 0;
  std::size_t n_atoms = 0;  // with k = 0, k = cluster_count(n_atoms, voxel size)
  double threshold = 0.0;
  std::size_t dust = 0;
  std::uint64_t seed = 0;
  std::string out;
  std::string pdb;
};

inline int pointcloud(const PointCloudArgs& a, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    DensityMap map = read_mrc(a.map);
    if (a.threshold > 0.0) map = threshold(map, a.threshold);
    if (a.dust > 1) map = dust(map, a.dust);
    std::size_t k = a.k;
    if (k == 0) {
      if (a.n_atoms == 0) throw ConfigError("give --k or --atoms");
      k = cluster_count(a.n_atoms, map.voxel_size());
    }
    const PointCloud cloud = extract_pointcloud(map, k, a.seed);
    std::ofstream f;
    std::ostream* dst = &out;
    if (!a.out.empty()) {
      f.open(a.out);
      if (!f) throw IoError("cannot write " + a.out);
      dst = &f;
    }
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto& p = cloud.points()[i];
      *dst << detail::fixed(p.x(), 4) << ' ' << detail::fixed(p.y(), 4) << ' ' << detail::fixed(p.z(), 4) << ' '
           << std::setprecision(10) << cloud.weights()[i] << '\n';
    }
    if (!a.pdb.empty()) {
      AtomicModel pseudo;
      for (std::size_t i = 0; i < cloud.size(); ++i) {
        Atom at;
        at.element = element_or_throw("C");
        at.pos = cloud.points()[i];
        at.res_index = static_cast<int>(i) + 1;
        at.res_name = "PTS";
        at.atom_name = "CA";
        pseudo.atoms.push_back(at);
      }
      write_pdb(pseudo, a.pdb);
    }
    if (!a.out.empty()) out << "wrote " << k << " points to " << a.out << '\n';
    return 0;
  });
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValues kv = path.empty() ? KeyValues{} : KeyValues::read(path);
  for (const auto& o : overrides) kv.set_assignment(o);
  return RunConfig::from(kv);
}

inline int guide(const std::string& config, const std::vector<std::string>& overrides, std::ostream& out,
                 std::ostream& err) {
  return detail::guarded(err, [&] {
    const RunConfig cfg = load_run_config(config, overrides);
    const RunResult res = run_guide(cfg, out);
    out << "wrote " << res.manifest.string() << " (" << res.records.size() - res.failures << " of "
        << res.records.size() << " samples)\n";
    return 0;
  });
}

inline int sample(const std::string& config, const std::vector<std::string>& overrides, std::ostream& out,
                  std::ostream& err) {
  return detail::guarded(err, [&] {
    const RunConfig cfg = load_run_config(config, overrides);
    const RunResult res = run_sample(cfg, out);
    out << "wrote " << res.manifest.string() << " (" << res.records.size() - res.failures << " of "
        << res.records.size() << " samples)\n";
    return 0;
  });
}

struct ScoreArgs {
  std::string sample;
  std::string reference;
  std::string map;
  std::optional<double> resolution;
  std::string local;  // CHAIN:LO-HI
  bool key_value = false;
};

inline ResidueRange parse_range(const std::string& s) {
  const auto colon = s.find(':');
  const auto dash = s.find('-', colon == std::string::npos ? 0 : colon + 1);
  if (colon == std::string::npos || dash == std::string::npos) throw ConfigError("local range must be CHAIN:LO-HI");
  ResidueRange r;
  r.chain = s.substr(0, colon);
  try {
    r.lo = std::stoi(s.substr(colon + 1, dash - colon - 1));
    r.hi = std::stoi(s.substr(dash + 1));
  } catch (const std::exception&) {
    throw ConfigError("local range must be CHAIN:LO-HI");
  }
  return r;
}

inline int score(const ScoreArgs& a, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const AtomicModel s = read_pdb(a.sample);
    const AtomicModel r = read_pdb(a.reference);
    std::optional<DensityMap> map;
    double res = 2.0;
    if (!a.map.empty()) {
      map = read_mrc(a.map);
      if (a.resolution) res = *a.resolution;
      else if (map->resolution()) res = *map->resolution();
      else throw ConfigError("--resolution is required: the map header does not record one");
    }
    std::optional<ResidueRange> local;
    if (!a.local.empty()) local = parse_range(a.local);
    const EvalReport rep = evaluate(s, r, map ? &*map : nullptr, local, res);
    if (a.key_value) {
      out << "rmsd_all=" << format_metric(rep.rmsd_all) << '\n'
          << "rmsd_ca=" << format_metric(rep.rmsd_ca) << '\n'
          << "tm_score=" << format_metric(rep.tm_score) << '\n';
      if (rep.rmsd_local) out << "rmsd_local=" << format_metric(rep.rmsd_local) << '\n';
      if (rep.rscc) out << "rscc=" << format_metric(rep.rscc) << '\n';
      out << "paired_atoms=" << rep.paired_atoms << '\n' << "unpaired_atoms=" << rep.unpaired_atoms << '\n';
    } else {
      out << "rmsd_all    " << detail::fixed(rep.rmsd_all, 3) << " A\n"
          << "rmsd_ca     " << detail::fixed(rep.rmsd_ca, 3) << " A\n";
      if (rep.rmsd_local) out << "rmsd_local  " << detail::fixed(*rep.rmsd_local, 3) << " A\n";
      out << "tm_score    " << detail::fixed(rep.tm_score, 3) << '\n';
      if (rep.rscc) out << "rscc        " << detail::fixed(*rep.rscc, 3) << '\n';
      out << "paired      " << rep.paired_atoms << " atoms (" << rep.paired_ca << " CA), " << rep.unpaired_atoms
          << " unpaired\n";
    }
    return 0;
  });
}

inline int align(const std::string& mobile_path, const std::string& target_path, const std::string& out_path,
                 std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const AtomicModel mobile = read_pdb(mobile_path);
    const AtomicModel target = read_pdb(target_path);
    const AtomPairing p = pair_atoms(mobile, target);
    if (p.all.size() < 3) throw GeometryError("align: fewer than 3 paired atoms");
    Coords a, b;
    for (auto [i, j] : p.all) {
      a.push_back(mobile.atoms[i].pos);
      b.push_back(target.atoms[j].pos);
    }
    const KabschResult k = kabsch(a, b);
    out << "rotation\n";
    for (int r = 0; r < 3; ++r)
      out << "  " << detail::fixed(k.transform.rotation(r, 0), 6) << ' ' << detail::fixed(k.transform.rotation(r, 1), 6)
          << ' ' << detail::fixed(k.transform.rotation(r, 2), 6) << '\n';
    out << "translation " << detail::fixed(k.transform.translation.x(), 4) << ' '
        << detail::fixed(k.transform.translation.y(), 4) << ' ' << detail::fixed(k.transform.translation.z(), 4) << '\n';
    out << "rmsd " << detail::fixed(k.rmsd, 4) << " A over " << p.all.size() << " atoms\n";
    if (!out_path.empty()) write_pdb(k.transform.apply(mobile), out_path);
    return 0;
  });
}

struct PrepArgs {
  std::string map;
  std::string out;
  double threshold = 0.0;
  std::size_t dust = 0;
  std::optional<double> crop_level;
  std::size_t pad = 5;
  std::string mask_model;
  double mask_radius = 3.0;
};

/// Threshold, dust, crop and mask, in that order; each step only when requested.
inline int prep(const PrepArgs& a, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    DensityMap map = read_mrc(a.map);
    if (a.threshold > 0.0) map = threshold(map, a.threshold);
    if (a.dust > 1) map = dust(map, a.dust);
    if (a.crop_level) map = crop_pad(map, *a.crop_level, a.pad);
    if (!a.mask_model.empty()) map = mask_near_model(map, read_pdb(a.mask_model), a.mask_radius);
    write_mrc(map, a.out);
    const auto& d = map.dims();
    out << "wrote " << a.out << " (" << d[0] << "x" << d[1] << "x" << d[2] << ")\n";
    return 0;
  });
}

struct DemoArgs {
  std::string out = "demo";
  std::size_t n_samples = 50;
  std::uint64_t seed = 0;
  bool run = false;
};

/// Writes the two-conformation demo (mode PDBs, target map, config) and optionally runs it.
inline int demo(const DemoArgs& a, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    namespace fs = std::filesystem;
    const fs::path dir(a.out);
    fs::create_directories(dir);
    const TwoModeDemo d = make_two_mode_demo();
    write_pdb(d.majority, (dir / "majority.pdb").string());
    write_pdb(d.minority, (dir / "minority.pdb").string());
    DensityMap map = d.map;
    map.set_resolution(d.resolution);
    write_mrc(map, (dir / "target.mrc").string());
    const std::string cfg_path = (dir / "demo.cfg").string();
    {
      std::ofstream c(cfg_path);
      c << "# two-conformation demo: 0.95/0.05 prior, map of the minority conformation\n"
        << "prior_modes=" << (dir / "majority.pdb").string() << "," << (dir / "minority.pdb").string() << '\n'
        << "prior_weights=0.95,0.05\n"
        << "prior_tau=1.0\n"
        << "condition=hinge\n"
        << "map=" << (dir / "target.mrc").string() << '\n'
        << "resolution=" << d.resolution << '\n'
        << "reference=" << (dir / "minority.pdb").string() << '\n'
        << "alt_reference=" << (dir / "majority.pdb").string() << '\n'
        << "schedule=custom\n"
        << "stages=" << kDemoStages[0] << ',' << kDemoStages[1] << ',' << kDemoStages[2] << ',' << kDemoStages[3] << '\n'
        << "dock=false\n"
        << "n_samples=" << a.n_samples << '\n'
        << "n_replicates=1\n"
        << "seed=" << a.seed << '\n'
        << "output=" << (dir / "run").string() << '\n';
    }
    out << "wrote " << cfg_path << '\n';
    if (!a.run) return 0;
    const RunResult res = run_guide(RunConfig::from(KeyValues::read(cfg_path)), out);
    std::size_t minority = 0, ok = 0;
    for (const auto& r : res.records) {
      if (!r.rmsd_all || !r.rmsd_alt) continue;
      ++ok;
      if (*r.rmsd_all < *r.rmsd_alt) ++minority;
    }
    out << "minority-conformation samples: " << minority << " of " << ok << '\n';
    return 0;
  });
}

}  // namespace cryoguide::cmd
