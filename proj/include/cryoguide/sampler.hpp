#pragma once

#include "cryoguide/alignment.hpp"
#include "cryoguide/core.hpp"
#include "cryoguide/forward_model.hpp"
#include "cryoguide/pointcloud.hpp"
#include "cryoguide/structure.hpp"
#include "cryoguide/transport.hpp"
#include "cryoguide/volume.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace cryoguide {

// ---------------------------------------------------------------------------
// Noise schedule

/// Variance-exploding noise levels with Karras spacing (uniform in sigma^(1/rho)), plus the
/// stochastic-churn and step-scale knobs of the sampler.
struct NoiseSchedule {
  double sigma_min = 0.004;
  double sigma_max = 160.0;
  double rho = 7.0;
  std::size_t n_steps = 200;
  double step_scale = 1.0;   // multiplies the score term of each update (sampling temperature)
  double gamma_0 = 0.8;      // churn: sigma is inflated to sigma*(1+gamma_0) ...
  double gamma_min = 1.0;    // ... while sigma > gamma_min
  double noise_scale = 1.0;  // scale of the churn noise

  void validate() const {
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min)) throw ConfigError("noise schedule needs 0 < sigma_min < sigma_max");
    if (n_steps < 2) throw ConfigError("noise schedule needs n_steps >= 2");
    if (!(rho > 0.0)) throw ConfigError("noise schedule needs rho > 0");
    if (!(step_scale > 0.0) || gamma_0 < 0.0 || noise_scale < 0.0) throw ConfigError("invalid sampler scale parameters");
  }

  /// n_steps noise levels from sigma_max down to sigma_min, followed by a terminal 0.
  std::vector<double> sigmas() const {
    validate();
    std::vector<double> s(n_steps + 1, 0.0);
    const double a = std::pow(sigma_max, 1.0 / rho);
    const double b = std::pow(sigma_min, 1.0 / rho);
    for (std::size_t i = 0; i < n_steps; ++i) {
      const double t = static_cast<double>(i) / static_cast<double>(n_steps - 1);
      s[i] = std::pow(a + t * (b - a), rho);
    }
    s[0] = sigma_max;
    s[n_steps - 1] = sigma_min;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Score models

/// Conditional score s(x, c, sigma) ~ grad log p_sigma(x | c) on flat 3N coordinate vectors.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;
  virtual std::size_t n_atoms() const = 0;
  /// The condition this model answers to (for analytic priors: the prior's identity).
  virtual const std::string& label() const = 0;
  virtual Eigen::VectorXd score(const Eigen::VectorXd& x, std::string_view condition, double sigma) const = 0;

  /// Per-coordinate variance of x0 given x at level sigma (second-order Tweedie, isotropic).
  /// The default assumes a Gaussian data distribution of scale data_scale().
  virtual double denoising_variance(const Eigen::VectorXd& /*x*/, std::string_view /*condition*/, double sigma) const {
    const double s2 = sigma * sigma, d2 = data_scale() * data_scale();
    return s2 * d2 / (s2 + d2);
  }
  virtual double data_scale() const { return 16.0; }

 protected:
  void check_input(const Eigen::VectorXd& x, std::string_view condition) const {
    if (static_cast<std::size_t>(x.size()) != 3 * n_atoms()) throw GeometryError("score model: coordinate size mismatch");
    if (condition != label()) throw ConfigError("score model '" + label() + "' cannot condition on '" + std::string(condition) + "'");
  }
};

/// Mixture of isotropic Gaussians. Under VE noising mode m at level sigma has covariance
/// (tau_m^2 + sigma^2) I, so the noised score is available in closed form.
class GaussianMixturePrior final : public ScoreModel {
 public:
  struct Mode {
    Eigen::VectorXd mean;
    double tau = 1.0;
    double weight = 1.0;
  };

  GaussianMixturePrior(std::vector<Mode> modes, std::string label) : modes_(std::move(modes)), label_(std::move(label)) {
    if (modes_.empty()) throw ConfigError("mixture prior needs at least one mode");
    const auto dim = modes_.front().mean.size();
    if (dim == 0 || dim % 3 != 0) throw ConfigError("mixture prior mean must have 3N entries");
    double total = 0.0;
    for (const auto& m : modes_) {
      if (m.mean.size() != dim) throw ConfigError("mixture prior modes differ in dimension");
      if (!(m.tau > 0.0) || !(m.weight > 0.0)) throw ConfigError("mixture prior needs tau > 0 and weight > 0");
      total += m.weight;
    }
    for (auto& m : modes_) m.weight /= total;
  }

  static GaussianMixturePrior gaussian(Eigen::VectorXd mean, double tau, std::string label) {
    return GaussianMixturePrior({Mode{std::move(mean), tau, 1.0}}, std::move(label));
  }

  const std::vector<Mode>& modes() const { return modes_; }
  std::size_t n_atoms() const override { return static_cast<std::size_t>(modes_.front().mean.size() / 3); }
  const std::string& label() const override { return label_; }

  /// Posterior mode responsibilities at level sigma.
  Eigen::VectorXd responsibilities(const Eigen::VectorXd& x, double sigma) const {
    const double dim = static_cast<double>(x.size());
    Eigen::VectorXd logp(static_cast<Eigen::Index>(modes_.size()));
    for (std::size_t m = 0; m < modes_.size(); ++m) {
      const double v = modes_[m].tau * modes_[m].tau + sigma * sigma;
      logp[Eigen::Index(m)] =
          std::log(modes_[m].weight) - 0.5 * (x - modes_[m].mean).squaredNorm() / v - 0.5 * dim * std::log(v);
    }
    const double mx = logp.maxCoeff();
    Eigen::VectorXd r = (logp.array() - mx).exp();
    return r / r.sum();
  }

  Eigen::VectorXd score(const Eigen::VectorXd& x, std::string_view condition, double sigma) const override {
    check_input(x, condition);
    const Eigen::VectorXd r = responsibilities(x, sigma);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(x.size());
    for (std::size_t m = 0; m < modes_.size(); ++m) {
      const double v = modes_[m].tau * modes_[m].tau + sigma * sigma;
      s += r[Eigen::Index(m)] * (modes_[m].mean - x) / v;
    }
    return s;
  }

  double denoising_variance(const Eigen::VectorXd& x, std::string_view condition, double sigma) const override {
    check_input(x, condition);
    const Eigen::VectorXd r = responsibilities(x, sigma);
    const double s2 = sigma * sigma;
    std::vector<Eigen::VectorXd> means;
    Eigen::VectorXd mix = Eigen::VectorXd::Zero(x.size());
    for (std::size_t m = 0; m < modes_.size(); ++m) {
      const double t2 = modes_[m].tau * modes_[m].tau;
      means.push_back((t2 * x + s2 * modes_[m].mean) / (t2 + s2));
      mix += r[Eigen::Index(m)] * means.back();
    }
    double var = 0.0;
    for (std::size_t m = 0; m < modes_.size(); ++m) {
      const double t2 = modes_[m].tau * modes_[m].tau;
      var += r[Eigen::Index(m)] * (t2 * s2 / (t2 + s2) + (means[m] - mix).squaredNorm() / static_cast<double>(x.size()));
    }
    return var;
  }

  double data_scale() const override { return modes_.front().tau; }

 private:
  std::vector<Mode> modes_;
  std::string label_;
};

/// Denoised estimate x + sigma^2 * score (VE Tweedie formula).
inline Coords tweedie_estimate(std::span<const Vec3> x, double sigma, const ScoreModel& model, std::string_view condition) {
  const Eigen::VectorXd flat = flatten(x);
  const Eigen::VectorXd s = model.score(flat, condition, sigma);
  if (!s.allFinite()) throw NumericError("tweedie_estimate: non-finite score");
  return unflatten(flat + sigma * sigma * s);
}

// ---------------------------------------------------------------------------
// Guidance schedule

enum class ScheduleKind { synthetic, experimental, custom };

struct GuidanceSchedule {
  std::size_t t_warm = 125, t_global = 25, t_local = 25, t_relax = 25;
  double lambda_global_start = 0.25;
  double lambda_global_end = 0.05;
  double lambda_local = 0.5;

  std::size_t total() const { return t_warm + t_global + t_local + t_relax; }
  bool global_active() const { return t_global > 0 && (lambda_global_start != 0.0 || lambda_global_end != 0.0); }
  bool local_active() const { return t_local > 0 && lambda_local != 0.0; }
  void validate(std::size_t n_steps) const {
    if (total() != n_steps)
      throw ConfigError("guidance stages sum to " + std::to_string(total()) + " but the noise schedule has " +
                        std::to_string(n_steps) + " steps");
    if (lambda_global_start < 0.0 || lambda_global_end < 0.0 || lambda_local < 0.0)
      throw ConfigError("guidance strengths must be >= 0");
  }
};

/// Stage lengths of the two published protocols; custom schedules go through make_custom_schedule.
inline GuidanceSchedule make_schedule(ScheduleKind kind, std::size_t n_steps) {
  GuidanceSchedule s;
  switch (kind) {
    case ScheduleKind::synthetic: s.t_warm = 125, s.t_global = 25, s.t_local = 25, s.t_relax = 25; break;
    case ScheduleKind::experimental: s.t_warm = 100, s.t_global = 50, s.t_local = 25, s.t_relax = 25; break;
    case ScheduleKind::custom: throw ConfigError("custom schedules need explicit stage lengths");
  }
  s.validate(n_steps);
  return s;
}

inline GuidanceSchedule make_custom_schedule(std::array<std::size_t, 4> stages, std::size_t n_steps) {
  GuidanceSchedule s;
  s.t_warm = stages[0], s.t_global = stages[1], s.t_local = stages[2], s.t_relax = stages[3];
  s.validate(n_steps);
  return s;
}

/// Cosine annealing of the global strength over the global stage, t in [0, T_g].
inline double lambda_global(double t, const GuidanceSchedule& s) {
  if (s.t_global == 0) return s.lambda_global_end;
  const double tg = static_cast<double>(s.t_global);
  if (t < 0.0 || t > tg) throw ConfigError("lambda_global: step outside the global stage");
  return s.lambda_global_end +
         0.5 * (s.lambda_global_start - s.lambda_global_end) * (1.0 + std::cos(std::numbers::pi * t / tg));
}

inline double lambda_local(const GuidanceSchedule& s) { return s.lambda_local; }

// ---------------------------------------------------------------------------
// Guidance terms

/// A differentiable misfit evaluated on world-frame coordinates.
class GuidanceTerm {
 public:
  virtual ~GuidanceTerm() = default;
  virtual double loss(std::span<const Vec3> x) const = 0;
  virtual Coords gradient(std::span<const Vec3> x) const = 0;
  virtual std::string_view name() const = 0;
};

/// Sinkhorn divergence between the atoms and a target point cloud.
class PointCloudGuidance final : public GuidanceTerm {
 public:
  PointCloudGuidance(PointCloud target, SinkhornConfig cfg) : target_(std::move(target)), cfg_(cfg) { cfg_.validate(); }
  double loss(std::span<const Vec3> x) const override {
    return sinkhorn_divergence(PointCloud::uniform(Coords(x.begin(), x.end())), target_, cfg_);
  }
  Coords gradient(std::span<const Vec3> x) const override {
    return divergence_grad(PointCloud::uniform(Coords(x.begin(), x.end())), target_, cfg_);
  }
  std::string_view name() const override { return "pointcloud"; }
  const PointCloud& target() const { return target_; }

 private:
  PointCloud target_;
  SinkhornConfig cfg_;
};

/// Squared misfit between a target map and the blurred simulated map of the atoms.
class DensityGuidance final : public GuidanceTerm {
 public:
  DensityGuidance(DensityMap target, double resolution, BlurOperator blur, std::vector<double> amplitudes,
                  FormFactorTable table = {})
      : fit_(std::move(target), resolution, blur, std::move(table)), amps_(std::move(amplitudes)) {}
  double loss(std::span<const Vec3> x) const override { return fit_.loss(x, amps_); }
  Coords gradient(std::span<const Vec3> x) const override { return fit_.gradient(x, amps_); }
  std::string_view name() const override { return "density"; }

 private:
  DensityFit fit_;
  std::vector<double> amps_;
};

/// ||x - x*||^2: a map surrogate with one exactly observed voxel per atom coordinate.
class QuadraticGuidance final : public GuidanceTerm {
 public:
  explicit QuadraticGuidance(Coords target) : target_(std::move(target)) {}
  double loss(std::span<const Vec3> x) const override {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - target_[i]).squaredNorm();
    return s;
  }
  Coords gradient(std::span<const Vec3> x) const override {
    Coords g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = 2.0 * (x[i] - target_[i]);
    return g;
  }
  std::string_view name() const override { return "quadratic"; }

 private:
  Coords target_;
};

/// How lambda turns a loss gradient into a coordinate update.
enum class Calibration {
  /// Unit-RMS gradient scaled by the denoiser displacement of the current step: lambda is a
  /// dimensionless fraction of that displacement.
  normalized,
  /// lambda is a likelihood weight, p(y|x0) ~ exp(-lambda L(x0)); the denoised estimate gets the
  /// Gaussian posterior correction -c lambda grad L / (1 + 2 lambda c), c = denoising variance.
  likelihood,
};

struct GuidanceContext {
  std::shared_ptr<const GuidanceTerm> global_term;  // point-cloud stage
  std::shared_ptr<const GuidanceTerm> local_term;   // density stage
  /// World-frame reference (a docked unguided sample). When set, the denoised estimate is
  /// superposed onto it at global-stage entry and guidance is evaluated in that frame.
  std::optional<Coords> docked_reference;
  Calibration calibration = Calibration::normalized;
};

/// Everything needed to guide against a density map, mirroring the map-preparation protocol.
struct DensityGuidanceSpec {
  DensityMap target_map;
  PointCloud target_cloud;
  double resolution = 2.0;
  SinkhornConfig sinkhorn;
  BlurOperator blur;
  std::optional<Coords> docked_reference;
  FormFactorTable table;
};

inline GuidanceContext make_guidance_context(const DensityGuidanceSpec& spec, const AtomicModel& templ) {
  GuidanceContext ctx;
  ctx.global_term = std::make_shared<PointCloudGuidance>(spec.target_cloud, spec.sinkhorn);
  ctx.local_term = std::make_shared<DensityGuidance>(spec.target_map, spec.resolution, spec.blur,
                                                     spec.table.amplitudes(templ), spec.table);
  ctx.docked_reference = spec.docked_reference;
  return ctx;
}

/// Rescale a per-atom gradient to unit RMS magnitude, then to reference_step. Zero stays zero.
inline Coords gradient_normalize(std::span<const Vec3> grad, double reference_step) {
  if (!all_finite(grad)) throw NumericError("gradient_normalize: non-finite gradient");
  const double rms = rms_magnitude(grad);
  Coords out(grad.begin(), grad.end());
  if (rms == 0.0) {
    for (auto& g : out) g.setZero();
    return out;
  }
  const double scale = reference_step / rms;
  for (auto& g : out) g *= scale;
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

enum class Stage { warmup, global, local, relax };

inline std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::warmup: return "warm-up";
    case Stage::global: return "global";
    case Stage::local: return "local";
    case Stage::relax: return "relax";
  }
  return "?";
}

struct SamplerStats {
  std::size_t score_evaluations = 0;
  std::size_t global_evaluations = 0;
  std::size_t local_evaluations = 0;
};

using ProgressFn = std::function<void(std::string_view)>;

/// Seed for stream (a, b) of a run seeded with `seed` (splitmix64 mixing).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b + 0x632be59bd9b4e019ULL));
}

namespace detail {

struct GuidancePlan {
  const GuidanceContext* ctx = nullptr;
  const GuidanceSchedule* sched = nullptr;
};

struct TrajectoryResult {
  Eigen::VectorXd x;  // model frame
  RigidTransform frame;
  SamplerStats stats;
};

inline Stage stage_at(std::size_t i, const GuidanceSchedule* s) {
  if (!s) return Stage::warmup;
  if (i < s->t_warm) return Stage::warmup;
  if (i < s->t_warm + s->t_global) return Stage::global;
  if (i < s->t_warm + s->t_global + s->t_local) return Stage::local;
  return Stage::relax;
}

// Shared reverse-diffusion loop. With no guidance plan, or all strengths zero, it performs
// exactly the unguided arithmetic and consumes the RNG identically.
inline TrajectoryResult run_trajectory(const ScoreModel& model, std::string_view condition, const NoiseSchedule& schedule,
                                       std::uint64_t seed, const GuidancePlan& plan, const ProgressFn& progress) {
  const std::vector<double> sig = schedule.sigmas();
  const auto dim = static_cast<Eigen::Index>(3 * model.n_atoms());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);

  TrajectoryResult out;
  Eigen::VectorXd x(dim);
  for (Eigen::Index d = 0; d < dim; ++d) x[d] = schedule.sigma_max * n01(rng);

  const GuidanceSchedule* gs = plan.sched;
  const GuidanceContext* ctx = plan.ctx;
  const bool global_on = ctx && gs && ctx->global_term && gs->global_active();
  const bool local_on = ctx && gs && ctx->local_term && gs->local_active();
  Stage current = Stage::warmup;
  if (progress) progress("stage warm-up");

  for (std::size_t i = 0; i < schedule.n_steps; ++i) {
    const Stage stage = stage_at(i, gs);
    if (stage != current) {
      current = stage;
      if (progress) progress("stage " + std::string(stage_name(stage)) + " at step " + std::to_string(i));
    }
    const double s = sig[i], s_next = sig[i + 1];
    const double gamma = s > schedule.gamma_min ? schedule.gamma_0 : 0.0;
    const double t_hat = s * (1.0 + gamma);
    const double churn = schedule.noise_scale * std::sqrt(std::max(0.0, t_hat * t_hat - s * s));
    Eigen::VectorXd noisy = x;
    if (gamma > 0.0)
      for (Eigen::Index d = 0; d < dim; ++d) noisy[d] += churn * n01(rng);

    const Eigen::VectorXd score = model.score(noisy, condition, t_hat);
    ++out.stats.score_evaluations;
    Eigen::VectorXd denoised = noisy + t_hat * t_hat * score;

    // Guidance for this step, if any.
    const GuidanceTerm* term = nullptr;
    double lambda = 0.0;
    if (stage == Stage::global && global_on) {
      term = ctx->global_term.get();
      lambda = lambda_global(static_cast<double>(i - gs->t_warm), *gs);
      if (i == gs->t_warm && ctx->docked_reference) {
        const Coords est = unflatten(denoised);
        if (ctx->docked_reference->size() != est.size()) throw GeometryError("docked reference has the wrong atom count");
        out.frame = kabsch(est, *ctx->docked_reference).transform;
      }
    } else if (stage == Stage::local && local_on) {
      term = ctx->local_term.get();
      lambda = lambda_local(*gs);
    }

    Coords grad_model;
    if (term) {
      const Coords world = out.frame.apply(unflatten(denoised));
      const Coords gw = term->gradient(world);
      stage == Stage::global ? ++out.stats.global_evaluations : ++out.stats.local_evaluations;
      grad_model.resize(gw.size());
      const Mat3 rt = out.frame.rotation.transpose();
      for (std::size_t a = 0; a < gw.size(); ++a) grad_model[a] = rt * gw[a];
      if (!all_finite(grad_model))
        throw NumericError("non-finite " + std::string(term->name()) + " gradient at step " + std::to_string(i));
    }

    if (term && lambda > 0.0 && ctx->calibration == Calibration::likelihood) {
      const double c = model.denoising_variance(noisy, condition, t_hat);
      const double k = c * lambda / (1.0 + 2.0 * lambda * c);
      denoised -= k * flatten(grad_model);
    }

    Eigen::VectorXd next = noisy + schedule.step_scale * (s_next - t_hat) / t_hat * (noisy - denoised);

    if (term && lambda > 0.0 && ctx->calibration == Calibration::normalized) {
      const double ref = rms_magnitude(unflatten(noisy - denoised));
      next -= lambda * flatten(gradient_normalize(grad_model, ref));
    }

    if (!next.allFinite())
      throw NumericError("non-finite coordinates at step " + std::to_string(i) + " (" + std::string(stage_name(stage)) +
                         " stage, sigma " + std::to_string(t_hat) + ")");
    x = std::move(next);
  }
  out.x = std::move(x);
  return out;
}

}  // namespace detail

/// Unguided reverse diffusion from N(0, sigma_max^2 I). Deterministic given seed.
inline Coords sample_unguided(const ScoreModel& model, std::string_view condition, const NoiseSchedule& schedule,
                              std::uint64_t seed) {
  return unflatten(detail::run_trajectory(model, condition, schedule, seed, {}, {}).x);
}

struct GuidedSample {
  AtomicModel model;       // template metadata, world-frame coordinates
  Coords model_frame;      // final coordinates in the score model's frame
  RigidTransform frame;    // model frame -> world frame (identity unless aligned)
  SamplerStats stats;
};

/// Four-stage guided sampling: warm-up, point-cloud guidance, density guidance, relaxation.
inline GuidedSample sample_guided(const ScoreModel& model, std::string_view condition, const GuidanceContext& ctx,
                                  const NoiseSchedule& schedule, const GuidanceSchedule& gsched,
                                  const AtomicModel& templ, std::uint64_t seed, const ProgressFn& progress = {}) {
  gsched.validate(schedule.n_steps);
  if (templ.size() != model.n_atoms())
    throw GeometryError("template has " + std::to_string(templ.size()) + " atoms, score model has " +
                        std::to_string(model.n_atoms()));
  const auto traj = detail::run_trajectory(model, condition, schedule, seed, {&ctx, &gsched}, progress);
  GuidedSample out;
  out.model_frame = unflatten(traj.x);
  out.frame = traj.frame;
  out.stats = traj.stats;
  out.model = templ.with_positions(traj.frame.apply(out.model_frame));
  return out;
}

struct DockedReference {
  Coords coords;  // world frame
  DockResult dock;
};

/// One unguided sample docked into the map; guided samples are superposed onto it at
/// global-stage entry.
inline DockedReference prepare_docked_reference(const ScoreModel& model, std::string_view condition,
                                                const NoiseSchedule& schedule, const AtomicModel& templ,
                                                const DensityMap& map, double resolution, std::uint64_t seed,
                                                const DockOptions& dock = {}, const FormFactorTable& table = {}) {
  const Coords x = sample_unguided(model, condition, schedule, seed);
  const AtomicModel placed = templ.with_positions(x);
  DockedReference ref;
  ref.dock = dock_to_map(placed, map, resolution, dock.n_rotations, seed, dock, table);
  ref.coords = ref.dock.transform.apply(x);
  return ref;
}

}  // namespace cryoguide
