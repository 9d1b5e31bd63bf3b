#pragma once

#include "cryoguide/alignment.hpp"
#include "cryoguide/config.hpp"
#include "cryoguide/forward_model.hpp"
#include "cryoguide/metrics.hpp"
#include "cryoguide/pointcloud.hpp"
#include "cryoguide/sampler.hpp"
#include "cryoguide/structure.hpp"
#include "cryoguide/volume.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>
#include <vector>

namespace cryoguide {

/// Loaded, validated inputs of a run.
struct RunInputs {
  GaussianMixturePrior prior;
  AtomicModel templ;
  std::optional<DensityMap> map;
  double resolution = 2.0;
  std::optional<AtomicModel> reference;
  std::optional<AtomicModel> alt_reference;
};

inline RunInputs load_inputs(const RunConfig& cfg, bool need_map) {
  namespace fs = std::filesystem;
  auto require_file = [](const std::string& what, const std::string& path) {
    if (path.empty()) throw ConfigError(what + " path is not set");
    if (!fs::is_regular_file(path)) throw ConfigError(what + " not found: " + path);
  };
  for (const auto& p : cfg.prior_modes) require_file("prior mode", p);
  if (need_map) require_file("map", cfg.map);
  if (!cfg.reference.empty()) require_file("reference", cfg.reference);
  if (!cfg.alt_reference.empty()) require_file("alt_reference", cfg.alt_reference);
  if (!cfg.template_path.empty()) require_file("template", cfg.template_path);

  std::vector<GaussianMixturePrior::Mode> modes;
  std::optional<AtomicModel> first;
  for (std::size_t m = 0; m < cfg.prior_modes.size(); ++m) {
    AtomicModel mode = read_pdb(cfg.prior_modes[m]);
    if (first && mode.size() != first->size()) throw ConfigError("prior modes differ in atom count");
    const Coords pos = mode.positions();
    const Vec3 c = centroid(pos);
    Coords centered;
    for (const auto& p : pos) centered.push_back(p - c);
    const double w = cfg.prior_weights.empty() ? 1.0 : cfg.prior_weights[m];
    modes.push_back({flatten(centered), cfg.prior_tau, w});
    if (!first) first = std::move(mode);
  }
  AtomicModel templ = cfg.template_path.empty() ? *first : read_pdb(cfg.template_path);
  if (templ.size() != first->size()) throw ConfigError("template atom count differs from the prior modes");

  RunInputs in{GaussianMixturePrior(std::move(modes), cfg.condition), std::move(templ), std::nullopt, 2.0,
               std::nullopt, std::nullopt};
  if (!cfg.map.empty()) {
    require_file("map", cfg.map);
    in.map = read_mrc(cfg.map);
  }
  if (cfg.resolution) in.resolution = *cfg.resolution;
  else if (in.map && in.map->resolution()) in.resolution = *in.map->resolution();
  else if (need_map) throw ConfigError("resolution is not set and the map header does not record one");
  if (!cfg.reference.empty()) in.reference = read_pdb(cfg.reference);
  if (!cfg.alt_reference.empty()) in.alt_reference = read_pdb(cfg.alt_reference);
  return in;
}

inline NoiseSchedule noise_schedule_from(const RunConfig& cfg) {
  NoiseSchedule s;
  s.sigma_min = cfg.sigma_min;
  s.sigma_max = cfg.sigma_max;
  s.rho = cfg.rho;
  s.n_steps = cfg.n_steps;
  s.step_scale = cfg.step_scale;
  s.gamma_0 = cfg.gamma_0;
  s.gamma_min = cfg.gamma_min;
  s.noise_scale = cfg.noise_scale;
  s.validate();
  return s;
}

inline GuidanceSchedule guidance_schedule_from(const RunConfig& cfg) {
  GuidanceSchedule g;
  if (cfg.schedule == "synthetic") g = make_schedule(ScheduleKind::synthetic, cfg.n_steps);
  else if (cfg.schedule == "experimental") g = make_schedule(ScheduleKind::experimental, cfg.n_steps);
  else g = make_custom_schedule({cfg.stages[0], cfg.stages[1], cfg.stages[2], cfg.stages[3]}, cfg.n_steps);
  g.lambda_global_start = cfg.lambda_global_start;
  g.lambda_global_end = cfg.lambda_global_end;
  g.lambda_local = cfg.lambda_local;
  g.validate(cfg.n_steps);
  return g;
}

inline SinkhornConfig sinkhorn_from(const RunConfig& cfg) {
  SinkhornConfig s;
  s.epsilon = cfg.sinkhorn_epsilon;
  s.reach = cfg.sinkhorn_reach;
  s.tol = cfg.sinkhorn_tol;
  s.max_iters = cfg.sinkhorn_iters;
  s.use_weights = cfg.cloud_weighted;
  s.validate();
  return s;
}

/// Point cloud of the map after the optional threshold and dust steps.
inline PointCloud target_cloud_from(const RunConfig& cfg, const DensityMap& map, std::size_t n_atoms) {
  DensityMap prepared = cfg.cloud_threshold > 0.0 ? threshold(map, cfg.cloud_threshold) : map;
  if (cfg.cloud_dust > 1) prepared = dust(prepared, cfg.cloud_dust);
  const std::size_t k = cfg.cloud_k > 0 ? cfg.cloud_k : cluster_count(n_atoms, map.voxel_size());
  return extract_pointcloud(prepared, k, cfg.seed);
}

/// Worker count from CRYOGUIDE_THREADS, default 1.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("CRYOGUIDE_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

/// Runs job(i) for i in [0, n) on `workers` threads.
template <class Job>
void parallel_for(std::size_t n, std::size_t workers, Job job) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  for (auto& t : pool) t.join();
}

struct SampleRecord {
  std::size_t replicate = 0;
  std::size_t sample = 0;
  std::uint64_t seed = 0;
  std::string file;  // relative to the output directory
  std::string error;  // empty on success
  std::optional<double> rscc, rmsd_all, rmsd_ca, tm_score, rmsd_alt;
};

struct RunResult {
  std::vector<SampleRecord> records;
  std::size_t failures = 0;
  std::filesystem::path manifest;
};

inline constexpr std::uint64_t kDockStream = ~std::uint64_t{0};

inline std::string format_metric(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.8f", *v);
  return buf;
}

namespace detail {

struct Trajectory {
  std::optional<Coords> world;
  std::string error;
  std::vector<std::string> log;
};

inline void write_outputs(const RunConfig& cfg, const RunInputs& in, const std::vector<Trajectory>& traj,
                          RunResult& res, std::ostream& log) {
  namespace fs = std::filesystem;
  const fs::path out_dir(cfg.output);
  fs::create_directories(out_dir);
  for (std::size_t idx = 0; idx < traj.size(); ++idx) {
    SampleRecord rec;
    rec.replicate = idx / cfg.n_samples;
    rec.sample = idx % cfg.n_samples;
    rec.seed = derive_seed(cfg.seed, rec.replicate, rec.sample);
    const std::string tag = "rep" + std::to_string(rec.replicate) + "/sample" + std::to_string(rec.sample);
    for (const auto& line : traj[idx].log) log << tag << ": " << line << '\n';
    if (!traj[idx].world) {
      rec.error = traj[idx].error;
      ++res.failures;
      log << tag << ": FAILED: " << rec.error << '\n';
      res.records.push_back(std::move(rec));
      continue;
    }
    rec.file = tag + ".pdb";
    fs::create_directories(out_dir / ("rep" + std::to_string(rec.replicate)));
    write_pdb(in.templ.with_positions(*traj[idx].world), (out_dir / rec.file).string());
    // Metrics from the file as written, so they agree with `score` on the same file.
    const AtomicModel written = read_pdb((out_dir / rec.file).string());
    try {
      if (in.map) rec.rscc = rscc(written, *in.map, in.resolution);
      if (in.reference) {
        const EvalReport r = evaluate(written, *in.reference);
        rec.rmsd_all = r.rmsd_all;
        rec.rmsd_ca = r.rmsd_ca;
        rec.tm_score = r.tm_score;
      }
      if (in.alt_reference) rec.rmsd_alt = evaluate(written, *in.alt_reference).rmsd_all;
    } catch (const Error& e) {
      log << tag << ": metrics unavailable: " << e.what() << '\n';
    }
    res.records.push_back(std::move(rec));
  }

  res.manifest = out_dir / "manifest.tsv";
  std::ofstream m(res.manifest);
  if (!m) throw IoError("cannot write " + res.manifest.string());
  m << "replicate\tsample\tseed\tfile\tstatus\trscc\trmsd_all\trmsd_ca\ttm_score";
  if (in.alt_reference) m << "\trmsd_alt";
  m << '\n';
  for (const auto& r : res.records) {
    m << r.replicate << '\t' << r.sample << '\t' << r.seed << '\t' << (r.file.empty() ? "-" : r.file) << '\t'
      << (r.error.empty() ? "ok" : "failed") << '\t' << format_metric(r.rscc) << '\t' << format_metric(r.rmsd_all)
      << '\t' << format_metric(r.rmsd_ca) << '\t' << format_metric(r.tm_score);
    if (in.alt_reference) m << '\t' << format_metric(r.rmsd_alt);
    m << '\n';
  }

  // Best-of-N per replicate.
  std::ofstream s(out_dir / "summary.tsv");
  s << "replicate\tcriterion\tsample\tvalue\n";
  for (std::size_t rep = 0; rep < cfg.n_replicates; ++rep) {
    std::optional<std::size_t> by_rscc, by_rmsd;
    for (const auto& r : res.records) {
      if (r.replicate != rep || !r.error.empty()) continue;
      if (r.rscc && (!by_rscc || *r.rscc > *res.records[*by_rscc].rscc)) by_rscc = &r - res.records.data();
      if (r.rmsd_all && (!by_rmsd || *r.rmsd_all < *res.records[*by_rmsd].rmsd_all)) by_rmsd = &r - res.records.data();
    }
    if (by_rscc) {
      const auto& r = res.records[*by_rscc];
      s << rep << "\tbest_rscc\t" << r.sample << '\t' << format_metric(r.rscc) << '\n';
      log << "replicate " << rep << ": best rscc " << format_metric(r.rscc) << " (sample " << r.sample << ")";
      if (r.rmsd_all) log << ", its rmsd " << format_metric(r.rmsd_all);
      log << '\n';
    }
    if (by_rmsd) {
      const auto& r = res.records[*by_rmsd];
      s << rep << "\tbest_rmsd\t" << r.sample << '\t' << format_metric(r.rmsd_all) << '\n';
      log << "replicate " << rep << ": best rmsd " << format_metric(r.rmsd_all) << " (sample " << r.sample << ")\n";
    }
  }
}

}  // namespace detail

/// Guided sampling over all replicates and samples; writes <output>/rep<k>/sample<j>.pdb,
/// manifest.tsv and summary.tsv.
inline RunResult run_guide(const RunConfig& cfg, std::ostream& log) {
  const RunInputs in = load_inputs(cfg, true);
  const NoiseSchedule ns = noise_schedule_from(cfg);
  const GuidanceSchedule gs = guidance_schedule_from(cfg);
  const std::size_t n_atoms = in.prior.n_atoms();

  GuidanceContext base;
  base.global_term = std::make_shared<PointCloudGuidance>(target_cloud_from(cfg, *in.map, n_atoms), sinkhorn_from(cfg));
  base.local_term = std::make_shared<DensityGuidance>(*in.map, in.resolution, BlurOperator{cfg.blur_sigma},
                                                      FormFactorTable{}.amplitudes(in.templ));
  base.calibration = cfg.calibration == "likelihood" ? Calibration::likelihood : Calibration::normalized;

  std::vector<GuidanceContext> contexts(cfg.n_replicates, base);
  DockOptions dopt;
  dopt.n_rotations = cfg.dock_rotations;
  const bool dock_each = cfg.dock && cfg.dock_per_sample && gs.global_active();
  if (cfg.dock && !cfg.dock_per_sample && gs.global_active()) {
    for (std::size_t rep = 0; rep < cfg.n_replicates; ++rep) {
      const auto ref = prepare_docked_reference(in.prior, cfg.condition, ns, in.templ, *in.map, in.resolution,
                                                derive_seed(cfg.seed, rep, kDockStream), dopt);
      contexts[rep].docked_reference = ref.coords;
      log << "replicate " << rep << ": docked reference, correlation " << format_metric(ref.dock.score) << '\n';
    }
  }

  std::vector<detail::Trajectory> traj(cfg.n_replicates * cfg.n_samples);
  parallel_for(traj.size(), worker_count(), [&](std::size_t idx) {
    const std::size_t rep = idx / cfg.n_samples, j = idx % cfg.n_samples;
    auto& t = traj[idx];
    try {
      GuidanceContext own;
      if (dock_each) {
        own = contexts[rep];
        const auto ref = prepare_docked_reference(in.prior, cfg.condition, ns, in.templ, *in.map, in.resolution,
                                                  derive_seed(derive_seed(cfg.seed, rep, kDockStream), 0, j), dopt);
        own.docked_reference = ref.coords;
        t.log.push_back("docked reference, correlation " + format_metric(ref.dock.score));
      }
      const auto out = sample_guided(in.prior, cfg.condition, dock_each ? own : contexts[rep], ns, gs, in.templ,
                                     derive_seed(cfg.seed, rep, j), [&](std::string_view msg) { t.log.emplace_back(msg); });
      t.world = out.model.positions();
    } catch (const Error& e) {
      t.error = e.what();
    }
  });

  RunResult res;
  detail::write_outputs(cfg, in, traj, res, log);
  if (res.failures == res.records.size()) throw NumericError("all samples failed");
  return res;
}

/// Unguided sampling with the same seeds and output layout as run_guide.
inline RunResult run_sample(const RunConfig& cfg, std::ostream& log) {
  const RunInputs in = load_inputs(cfg, false);
  const NoiseSchedule ns = noise_schedule_from(cfg);
  std::vector<detail::Trajectory> traj(cfg.n_replicates * cfg.n_samples);
  parallel_for(traj.size(), worker_count(), [&](std::size_t idx) {
    const std::size_t rep = idx / cfg.n_samples, j = idx % cfg.n_samples;
    try {
      traj[idx].world = sample_unguided(in.prior, cfg.condition, ns, derive_seed(cfg.seed, rep, j));
    } catch (const Error& e) {
      traj[idx].error = e.what();
    }
  });
  RunResult res;
  detail::write_outputs(cfg, in, traj, res, log);
  if (res.failures == res.records.size()) throw NumericError("all samples failed");
  return res;
}

}  // namespace cryoguide
