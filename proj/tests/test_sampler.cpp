#include "cryoguide/demo.hpp"
#include "cryoguide/metrics.hpp"
#include "cryoguide/sampler.hpp"
#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <random>

using namespace cryoguide;

namespace {

Eigen::VectorXd small_mean() {
  Eigen::VectorXd mu(9);
  mu << 0, 0, 0, 3, 0, 0, 0, 3, 0;
  return mu;
}

AtomicModel carbon_template(std::size_t n) {
  AtomicModel m;
  for (std::size_t i = 0; i < n; ++i) {
    Atom a;
    a.element = element_or_throw("C");
    a.res_index = static_cast<int>(i) + 1;
    a.atom_name = "CA";
    m.atoms.push_back(a);
  }
  return m;
}

// log of the noised mixture density, written out independently of the score code.
double log_mixture(const GaussianMixturePrior& p, const Eigen::VectorXd& x, double sigma) {
  double total = 0.0;
  for (const auto& m : p.modes()) {
    const double v = m.tau * m.tau + sigma * sigma;
    const double d = static_cast<double>(x.size());
    total += m.weight * std::exp(-0.5 * (x - m.mean).squaredNorm() / v) / std::pow(2.0 * std::numbers::pi * v, d / 2.0);
  }
  return std::log(total);
}

bool bitwise_equal(const Coords& a, const Coords& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(Vec3)) == 0;
}

}  // namespace

TEST(NoiseSchedule, SigmasAreMonotone) {
  const NoiseSchedule ns;
  const auto s = ns.sigmas();
  ASSERT_EQ(s.size(), 201u);
  EXPECT_EQ(s.front(), 160.0);
  EXPECT_EQ(s[199], 0.004);
  EXPECT_EQ(s.back(), 0.0);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_LT(s[i], s[i - 1]);
  // Karras spacing: uniform in sigma^(1/rho).
  const double d0 = std::pow(s[1], 1.0 / 7.0) - std::pow(s[0], 1.0 / 7.0);
  const double d1 = std::pow(s[100], 1.0 / 7.0) - std::pow(s[99], 1.0 / 7.0);
  EXPECT_NEAR(d0, d1, 1e-12);
}

TEST(NoiseSchedule, Validation) {
  NoiseSchedule ns;
  ns.sigma_min = 200.0;
  EXPECT_THROW(ns.validate(), ConfigError);
  ns = {};
  ns.n_steps = 1;
  EXPECT_THROW(ns.validate(), ConfigError);
  ns = {};
  ns.step_scale = 0.0;
  EXPECT_THROW(ns.validate(), ConfigError);
}

TEST(GmmPrior, ScoreMatchesLogDensityGradient) {
  std::mt19937_64 rng(41);
  const Eigen::VectorXd a = flatten(fixtures::random_coords(4, rng)), b = flatten(fixtures::random_coords(4, rng));
  const GaussianMixturePrior p({{a, 1.0, 0.7}, {b, 1.7, 0.3}}, "p");
  for (double sigma : {0.01, 0.5, 3.0, 40.0}) {
    const Eigen::VectorXd x = 0.5 * (a + b) + flatten(fixtures::random_coords(4, rng, 0.5));
    const Eigen::VectorXd s = p.score(x, "p", sigma);
    ASSERT_EQ(s.size(), x.size());
    const double h = 1e-5 * std::max(1.0, sigma);
    for (Eigen::Index d = 0; d < x.size(); ++d) {
      Eigen::VectorXd xp = x, xm = x;
      xp[d] += h;
      xm[d] -= h;
      const double fd = (log_mixture(p, xp, sigma) - log_mixture(p, xm, sigma)) / (2.0 * h);
      EXPECT_NEAR(s[d], fd, 1e-5 * std::max(1.0, std::abs(fd))) << "sigma " << sigma;
    }
  }
}

TEST(GmmPrior, WeightsNormalizedAndErrors) {
  const Eigen::VectorXd mu = small_mean();
  const GaussianMixturePrior p({{mu, 1.0, 3.0}, {mu, 1.0, 1.0}}, "p");
  EXPECT_DOUBLE_EQ(p.modes()[0].weight, 0.75);
  EXPECT_EQ(p.n_atoms(), 3u);
  EXPECT_THROW(p.score(Eigen::VectorXd::Zero(6), "p", 1.0), GeometryError);
  EXPECT_THROW(p.score(mu, "other", 1.0), ConfigError);
  EXPECT_THROW(GaussianMixturePrior({}, "x"), ConfigError);
  EXPECT_THROW(GaussianMixturePrior({{mu, 0.0, 1.0}}, "x"), ConfigError);
  EXPECT_THROW(GaussianMixturePrior({{Eigen::VectorXd::Zero(4), 1.0, 1.0}}, "x"), ConfigError);
}

TEST(Tweedie, GaussianClosedForm) {
  std::mt19937_64 rng(42);
  const Eigen::VectorXd mu = small_mean();
  const double tau = 1.3;
  const auto p = GaussianMixturePrior::gaussian(mu, tau, "g");
  for (double sigma : {0.004, 0.7, 12.0, 160.0}) {
    const Coords x = fixtures::random_coords(3, rng, 4.0);
    const Eigen::VectorXd xf = flatten(x);
    const Eigen::VectorXd expect = (tau * tau * xf + sigma * sigma * mu) / (tau * tau + sigma * sigma);
    const Eigen::VectorXd got = flatten(tweedie_estimate(x, sigma, p, "g"));
    EXPECT_LT((got - expect).norm(), 1e-10 * std::max(1.0, expect.norm()));
    EXPECT_NEAR(p.denoising_variance(xf, "g", sigma), tau * tau * sigma * sigma / (tau * tau + sigma * sigma), 1e-12);
  }
  const Coords x = fixtures::random_coords(3, rng);
  EXPECT_LT((flatten(tweedie_estimate(x, 1e-8, p, "g")) - flatten(x)).norm(), 1e-12);
}

TEST(Schedules, PublishedStages) {
  const auto syn = make_schedule(ScheduleKind::synthetic, 200);
  EXPECT_EQ((std::array{syn.t_warm, syn.t_global, syn.t_local, syn.t_relax}), (std::array<std::size_t, 4>{125, 25, 25, 25}));
  const auto exp = make_schedule(ScheduleKind::experimental, 200);
  EXPECT_EQ((std::array{exp.t_warm, exp.t_global, exp.t_local, exp.t_relax}), (std::array<std::size_t, 4>{100, 50, 25, 25}));
  EXPECT_EQ(syn.total(), 200u);
  EXPECT_THROW(make_schedule(ScheduleKind::synthetic, 100), ConfigError);
  EXPECT_THROW(make_schedule(ScheduleKind::custom, 200), ConfigError);
  EXPECT_THROW(make_custom_schedule({25, 25, 25, 25}, 200), ConfigError);
  EXPECT_NO_THROW(make_custom_schedule(kDemoStages, 200));
}

TEST(Schedules, LambdaValues) {
  const auto s = make_schedule(ScheduleKind::synthetic, 200);
  EXPECT_EQ(lambda_global(0.0, s), 0.25);
  EXPECT_NEAR(lambda_global(25.0, s), 0.05, 1e-15);
  EXPECT_NEAR(lambda_global(12.5, s), 0.15, 1e-15);
  EXPECT_EQ(lambda_local(s), 0.5);
  EXPECT_THROW(lambda_global(-1.0, s), ConfigError);
  EXPECT_THROW(lambda_global(26.0, s), ConfigError);
  for (double t = 0.0; t < 25.0; t += 1.0) EXPECT_GE(lambda_global(t, s), lambda_global(t + 1.0, s));
}

TEST(GradientNormalize, Definition) {
  const Coords g{Vec3(3, 0, 0), Vec3(0, -3, 0), Vec3(0, 0, 3)};
  const Coords out = gradient_normalize(g, 0.7);
  for (const auto& v : out) EXPECT_NEAR(v.norm(), 0.7, 1e-15);
  Coords big = g;
  for (auto& v : big) v *= 1000.0;
  const Coords out_big = gradient_normalize(big, 0.7);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_TRUE(out_big[i].isApprox(out[i], 1e-14));
  for (const auto& v : gradient_normalize(Coords(4, Vec3::Zero()), 2.0)) EXPECT_EQ(v, Vec3::Zero());
  EXPECT_THROW(gradient_normalize(Coords{Vec3(std::nan(""), 0, 0)}, 1.0), NumericError);
}

TEST(Seeds, DeriveSeedSpreads) {
  std::vector<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 5; ++a)
    for (std::uint64_t b = 0; b < 50; ++b) seen.push_back(derive_seed(11, a, b));
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(std::unique(seen.begin(), seen.end()), seen.end());
  EXPECT_EQ(derive_seed(11, 2, 3), derive_seed(11, 2, 3));
  EXPECT_NE(derive_seed(11, 2, 3), derive_seed(12, 2, 3));
}

TEST(Unguided, DeterministicAndFinite) {
  const auto p = GaussianMixturePrior::gaussian(small_mean(), 1.0, "g");
  const NoiseSchedule ns;
  const Coords a = sample_unguided(p, "g", ns, 5), b = sample_unguided(p, "g", ns, 5), c = sample_unguided(p, "g", ns, 6);
  EXPECT_TRUE(bitwise_equal(a, b));
  EXPECT_FALSE(bitwise_equal(a, c));
  EXPECT_TRUE(all_finite(a));
  EXPECT_THROW(sample_unguided(p, "nope", ns, 5), ConfigError);
}

TEST(Unguided, GaussianMeanOver2000Draws) {
  const Eigen::VectorXd mu = small_mean();
  const double tau = 1.0;
  const auto p = GaussianMixturePrior::gaussian(mu, tau, "g");
  const NoiseSchedule ns;
  const int n = 2000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(mu.size());
  for (int s = 0; s < n; ++s) sum += flatten(sample_unguided(p, "g", ns, derive_seed(1, 0, std::uint64_t(s))));
  const Eigen::VectorXd mean = sum / n;
  for (Eigen::Index d = 0; d < mu.size(); ++d) EXPECT_LT(std::abs(mean[d] - mu[d]), 4.0 * tau / std::sqrt(double(n)));
}

TEST(Unguided, MixtureFrequenciesOver2000Draws) {
  const TwoModeDemo demo = make_two_mode_demo();
  const NoiseSchedule ns;
  const auto& modes = demo.prior.modes();
  int minority = 0;
  const int n = 2000;
  for (int s = 0; s < n; ++s) {
    const Eigen::VectorXd x = flatten(sample_unguided(demo.prior, "hinge", ns, derive_seed(2, 0, std::uint64_t(s))));
    minority += (x - modes[1].mean).norm() < (x - modes[0].mean).norm();
  }
  EXPECT_NEAR(double(minority) / n, 0.05, 0.03);
}

TEST(Guided, LambdaZeroIsBitIdenticalToUnguided) {
  const TwoModeDemo demo = make_two_mode_demo();
  const NoiseSchedule ns;
  GuidanceSchedule gs = make_custom_schedule(kDemoStages, ns.n_steps);
  gs.lambda_global_start = gs.lambda_global_end = gs.lambda_local = 0.0;
  DensityGuidanceSpec spec;
  spec.target_map = demo.map;
  spec.target_cloud = extract_pointcloud(demo.map, 10, 0);
  spec.resolution = demo.resolution;
  spec.docked_reference = demo.majority.positions();
  const GuidanceContext ctx = make_guidance_context(spec, demo.majority);
  for (std::uint64_t seed : {0ull, 17ull, 123456789ull}) {
    const GuidedSample g = sample_guided(demo.prior, "hinge", ctx, ns, gs, demo.majority, seed);
    EXPECT_TRUE(bitwise_equal(g.model_frame, sample_unguided(demo.prior, "hinge", ns, seed)));
    EXPECT_EQ(g.stats.global_evaluations, 0u);
    EXPECT_EQ(g.stats.local_evaluations, 0u);
    EXPECT_TRUE(g.frame.rotation == Mat3::Identity());
  }
}

TEST(Guided, StageAccountingAndProgress) {
  const auto p = GaussianMixturePrior::gaussian(small_mean(), 1.0, "g");
  GuidanceContext ctx;
  auto q = std::make_shared<QuadraticGuidance>(unflatten(small_mean()));
  ctx.global_term = q;
  ctx.local_term = q;
  const NoiseSchedule ns;
  for (auto kind : {ScheduleKind::synthetic, ScheduleKind::experimental}) {
    const GuidanceSchedule gs = make_schedule(kind, ns.n_steps);
    std::vector<std::string> messages;
    const GuidedSample g =
        sample_guided(p, "g", ctx, ns, gs, carbon_template(3), 9, [&](std::string_view m) { messages.emplace_back(m); });
    EXPECT_EQ(g.stats.score_evaluations, gs.total());
    EXPECT_EQ(g.stats.global_evaluations, gs.t_global);
    EXPECT_EQ(g.stats.local_evaluations, gs.t_local);
    ASSERT_EQ(messages.size(), 4u);
    EXPECT_EQ(messages[1], "stage global at step " + std::to_string(gs.t_warm));
    EXPECT_EQ(messages[3], "stage relax at step " + std::to_string(gs.t_warm + gs.t_global + gs.t_local));
  }
}

TEST(Guided, TemplateMismatch) {
  const auto p = GaussianMixturePrior::gaussian(small_mean(), 1.0, "g");
  const NoiseSchedule ns;
  EXPECT_THROW(sample_guided(p, "g", GuidanceContext{}, ns, make_schedule(ScheduleKind::synthetic, 200),
                             carbon_template(4), 0),
               GeometryError);
}

TEST(Guided, FrameFollowsDockedReference) {
  const auto p = GaussianMixturePrior::gaussian(flatten(make_two_mode_demo().minority.positions()), 0.3, "g");
  const Mat3 rot = Eigen::AngleAxisd(1.0, Vec3(1, 2, 3).normalized()).toRotationMatrix();
  const Vec3 shift(20.0, -5.0, 3.0);
  Coords ref;
  for (const auto& v : unflatten(p.modes()[0].mean)) ref.push_back(rot * v + shift);
  GuidanceContext ctx;
  ctx.global_term = std::make_shared<QuadraticGuidance>(ref);
  ctx.docked_reference = ref;
  const NoiseSchedule ns;
  const GuidedSample g = sample_guided(p, "g", ctx, ns, make_custom_schedule(kDemoStages, 200),
                                       carbon_template(p.n_atoms()), 4);
  EXPECT_LT((g.frame.rotation - rot).cwiseAbs().maxCoeff(), 0.05);
  // World-frame output sits on the reference, model-frame output on the prior.
  EXPECT_LT(rmsd_no_fit(g.model.positions(), ref), 1.0);
  EXPECT_LT(rmsd_no_fit(g.model_frame, unflatten(p.modes()[0].mean)), 1.0);
}

TEST(Guided, GaussianPosteriorMean) {
  const Eigen::VectorXd mu = small_mean();
  const Coords target{Vec3(1, 1, 0), Vec3(4, -1, 1), Vec3(-1, 2, 2)};
  const double tau = 1.0, lambda = 0.5;
  const auto p = GaussianMixturePrior::gaussian(mu, tau, "g");
  GuidanceContext ctx;
  auto q = std::make_shared<QuadraticGuidance>(target);
  ctx.global_term = q;
  ctx.local_term = q;
  ctx.calibration = Calibration::likelihood;
  const NoiseSchedule ns;
  GuidanceSchedule gs = make_custom_schedule({0, 100, 100, 0}, ns.n_steps);
  gs.lambda_global_start = gs.lambda_global_end = gs.lambda_local = lambda;
  const int n = 300;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(mu.size());
  for (int s = 0; s < n; ++s)
    sum += flatten(sample_guided(p, "g", ctx, ns, gs, carbon_template(3), derive_seed(3, 0, std::uint64_t(s))).model_frame);
  const double precision = 1.0 / (tau * tau) + 2.0 * lambda;
  const Eigen::VectorXd post_mean = (mu / (tau * tau) + 2.0 * lambda * flatten(target)) / precision;
  const double se = std::sqrt(1.0 / precision / n);
  for (Eigen::Index d = 0; d < mu.size(); ++d) EXPECT_LT(std::abs(sum[d] / n - post_mean[d]), 5.0 * se) << d;
}

TEST(Guided, SelfMapGuidanceNoWorseThanUnguidedMedian) {
  const AtomicModel mode = hinge_chain(30.0, 12);
  const auto p = GaussianMixturePrior::gaussian(flatten(mode.positions()), 1.5, "g");
  DensityGuidanceSpec spec;
  spec.resolution = 2.0;
  spec.target_map = simulate_map(mode, enclosing_grid(mode, 1.0, 6), 2.0);
  spec.target_cloud = extract_pointcloud(threshold(spec.target_map, 0.5), mode.size(), 0);
  const GuidanceContext ctx = make_guidance_context(spec, mode);
  const NoiseSchedule ns;
  const GuidanceSchedule gs = make_custom_schedule(kDemoStages, ns.n_steps);
  std::vector<double> unguided;
  for (std::uint64_t s = 0; s < 15; ++s)
    unguided.push_back(kabsch(sample_unguided(p, "g", ns, derive_seed(4, 0, s)), mode.positions()).rmsd);
  std::nth_element(unguided.begin(), unguided.begin() + 7, unguided.end());
  const GuidedSample g = sample_guided(p, "g", ctx, ns, gs, mode, derive_seed(4, 1, 0));
  EXPECT_LE(kabsch(g.model.positions(), mode.positions()).rmsd, unguided[7]);
}
