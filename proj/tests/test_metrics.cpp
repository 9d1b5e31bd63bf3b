#include "cryoguide/metrics.hpp"
#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace cryoguide;

namespace {

// L residues, backbone N/CA/C per residue, roughly helical.
AtomicModel backbone(std::size_t L, std::uint64_t seed = 0, double jitter = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  AtomicModel m;
  const char* names[] = {"N", "CA", "C"};
  const char* elems[] = {"N", "C", "C"};
  for (std::size_t r = 0; r < L; ++r) {
    for (int k = 0; k < 3; ++k) {
      const double t = 0.35 * static_cast<double>(3 * r + k);
      Atom a;
      a.atom_name = names[k];
      a.element = element_or_throw(elems[k]);
      a.res_index = static_cast<int>(r) + 1;
      a.res_name = "ALA";
      a.pos = Vec3(2.3 * std::cos(t), 2.3 * std::sin(t), 0.5 * t) + jitter * Vec3(n01(rng), n01(rng), n01(rng));
      m.atoms.push_back(a);
    }
  }
  return m;
}

RigidTransform some_transform() {
  const Eigen::Quaterniond q(0.3, -0.5, 0.7, 0.2);
  return {q.normalized().toRotationMatrix(), Vec3(12.0, -7.5, 3.25)};
}

// Cube root by Newton iteration, independent of std::cbrt.
double cube_root(double x) {
  double y = x / 3.0;
  for (int i = 0; i < 200; ++i) y -= (y * y * y - x) / (3.0 * y * y);
  return y;
}

std::vector<double> affine(const std::vector<double>& v, double a, double b) {
  std::vector<double> out(v);
  for (double& x : out) x = a * x + b;
  return out;
}

}  // namespace

TEST(TmScore, D0SpotValue) {
  const double oracle = 1.24 * cube_root(85.0) - 1.8;
  EXPECT_NEAR(tm_d0(100), oracle, 1e-9);
  EXPECT_NEAR(tm_d0(100), 3.6520687934761424, 1e-12);
  EXPECT_EQ(tm_d0(10), 0.5);
  EXPECT_EQ(tm_d0(16), 0.5);
}

TEST(TmScore, OneDisplacedByD0) {
  std::vector<double> d(100, 0.0);
  d[37] = tm_d0(100);
  EXPECT_NEAR(tm_score_from_distances(d, 100), 0.995, 1e-12);
  EXPECT_THROW(tm_score_from_distances(d, 0), GeometryError);
}

TEST(Evaluate, SelfIsExact) {
  const AtomicModel x = backbone(20);
  const EvalReport r = evaluate(x, x);
  EXPECT_NEAR(r.rmsd_all, 0.0, 1e-10);
  EXPECT_NEAR(r.rmsd_ca, 0.0, 1e-10);
  EXPECT_DOUBLE_EQ(r.tm_score, 1.0);
  EXPECT_EQ(r.paired_atoms, 60u);
  EXPECT_EQ(r.paired_ca, 20u);
  EXPECT_EQ(r.unpaired_atoms, 0u);
  EXPECT_FALSE(r.rscc.has_value());
  EXPECT_FALSE(r.rmsd_local.has_value());
}

TEST(Evaluate, RigidTransformIsRemoved) {
  const AtomicModel x = backbone(20);
  const EvalReport r = evaluate(some_transform().apply(x), x);
  EXPECT_LT(r.rmsd_all, 1e-9);
  EXPECT_NEAR(r.tm_score, 1.0, 1e-12);
  EXPECT_TRUE(r.superposition.rotation.isApprox(some_transform().inverse().rotation, 1e-9));
}

TEST(Evaluate, InvariantUnderCommonTransformOfSample) {
  const AtomicModel ref = backbone(25);
  const AtomicModel sample = backbone(25, 7, 0.8);
  GridGeometry g = enclosing_grid(ref, 1.0, 4);
  const DensityMap map = simulate_map(ref, g, 3.0);
  const ResidueRange range{"A", 5, 12};
  const EvalReport a = evaluate(sample, ref, &map, range, 3.0, true);
  const EvalReport b = evaluate(some_transform().apply(sample), ref, &map, range, 3.0, true);
  EXPECT_NEAR(a.rmsd_all, b.rmsd_all, 1e-8);
  EXPECT_NEAR(a.rmsd_ca, b.rmsd_ca, 1e-8);
  EXPECT_NEAR(*a.rmsd_local, *b.rmsd_local, 1e-8);
  EXPECT_NEAR(a.tm_score, b.tm_score, 1e-8);
  EXPECT_NEAR(*a.rscc, *b.rscc, 1e-8);
  EXPECT_GT(a.rmsd_all, 0.1);
  EXPECT_LT(a.tm_score, 1.0);
  EXPECT_GT(a.tm_score, 0.0);
}

TEST(Evaluate, MatchesDirectComputationInSuperposedFrame) {
  const AtomicModel ref = backbone(15);
  const AtomicModel sample = some_transform().apply(backbone(15, 3, 0.5));
  const EvalReport r = evaluate(sample, ref);
  const Coords moved = r.superposition.apply(sample.positions());
  double all = 0.0, ca = 0.0, tm = 0.0;
  EXPECT_EQ(tm_d0(15), 0.5);
  for (std::size_t i = 0; i < ref.atoms.size(); ++i) {
    const double d2 = (moved[i] - ref.atoms[i].pos).squaredNorm();
    all += d2;
    if (ref.atoms[i].atom_name == "CA") {
      ca += d2;
      tm += 1.0 / (1.0 + d2 / 0.25);
    }
  }
  EXPECT_NEAR(r.rmsd_all, std::sqrt(all / 45.0), 1e-10);
  EXPECT_NEAR(r.rmsd_ca, std::sqrt(ca / 15.0), 1e-10);
  EXPECT_NEAR(r.tm_score, tm / 15.0, 1e-10);
  // The CA superposition is optimal for CA atoms.
  Coords s, t;
  for (std::size_t i = 0; i < ref.atoms.size(); ++i)
    if (ref.atoms[i].atom_name == "CA") {
      s.push_back(sample.atoms[i].pos);
      t.push_back(ref.atoms[i].pos);
    }
  EXPECT_NEAR(r.rmsd_ca, kabsch(s, t).rmsd, 1e-10);
}

TEST(Evaluate, PairingCountsUnpairedAtoms) {
  const AtomicModel ref = backbone(10);
  AtomicModel sample = backbone(10);
  sample.atoms[0].atom_name = "CB";   // no partner
  sample.atoms.pop_back();            // reference C of residue 10 left alone
  const EvalReport r = evaluate(sample, ref);
  EXPECT_EQ(r.paired_atoms, 28u);
  EXPECT_EQ(r.unpaired_atoms, 3u);  // CB in the sample, N1 and C10 in the reference
  EXPECT_NEAR(r.rmsd_all, 0.0, 1e-10);
}

TEST(Evaluate, OrderDoesNotMatter) {
  const AtomicModel ref = backbone(12);
  AtomicModel sample = backbone(12, 5, 0.4);
  const EvalReport a = evaluate(sample, ref);
  std::reverse(sample.atoms.begin(), sample.atoms.end());
  const EvalReport b = evaluate(sample, ref);
  EXPECT_NEAR(a.rmsd_all, b.rmsd_all, 1e-10);
  EXPECT_NEAR(a.tm_score, b.tm_score, 1e-10);
}

TEST(Evaluate, Errors) {
  const AtomicModel ref = backbone(10);
  AtomicModel shifted = ref;
  for (auto& a : shifted.atoms) a.res_index += 100;
  EXPECT_THROW(evaluate(shifted, ref), GeometryError);
  AtomicModel other_chain = ref;
  for (auto& a : other_chain.atoms) a.chain_id = "B";
  EXPECT_THROW(evaluate(other_chain, ref), GeometryError);
  EXPECT_THROW(evaluate(ref, ref, nullptr, ResidueRange{"A", 50, 60}), EmptySelectionError);
  EXPECT_THROW(evaluate(ref, ref, nullptr, ResidueRange{"A", 6, 2}), GeometryError);
}

TEST(Evaluate, LocalRangeRmsd) {
  const AtomicModel ref = backbone(20);
  AtomicModel sample = ref;
  // Displace only residues 15..20 by a fixed offset along z.
  for (auto& a : sample.atoms)
    if (a.res_index >= 15) a.pos += Vec3(0.0, 0.0, 0.3);
  const EvalReport r = evaluate(sample, ref, nullptr, ResidueRange{"A", 1, 5});
  ASSERT_TRUE(r.rmsd_local.has_value());
  const EvalReport far = evaluate(sample, ref, nullptr, ResidueRange{"A", 15, 20});
  EXPECT_GT(*far.rmsd_local, *r.rmsd_local);
  const EvalReport self = evaluate(ref, ref, nullptr, ResidueRange{"A", 3, 3});
  EXPECT_NEAR(*self.rmsd_local, 0.0, 1e-10);
}

TEST(Rscc, SelfAndNegated) {
  const AtomicModel m = backbone(12);
  const DensityMap map = simulate_map(m, enclosing_grid(m, 1.0, 4), 2.5);
  EXPECT_NEAR(rscc(m, map, 2.5), 1.0, 1e-10);
  DensityMap neg = map;
  for (double& v : neg.data()) v = -v;
  EXPECT_NEAR(rscc(m, neg, 2.5), -1.0, 1e-10);
}

TEST(Rscc, AffineInvariance) {
  const AtomicModel m = backbone(12);
  const AtomicModel other = backbone(12, 9, 1.0);
  const GridGeometry g = enclosing_grid(m, 1.0, 4);
  const DensityMap map = simulate_map(other, g, 2.5);
  const double base = rscc(m, map, 2.5);
  const DensityMap scaled(g, affine(map.data(), 3.7, -0.25));
  EXPECT_NEAR(rscc(m, scaled, 2.5), base, 1e-10);
  // Rescaling the model side: amplitude overrides multiply every form factor.
  FormFactorTable doubled;
  doubled.amplitude_overrides["C"] = 2.5 * 6;
  doubled.amplitude_overrides["N"] = 2.5 * 7;
  EXPECT_NEAR(rscc(m, map, 2.5, doubled), base, 1e-10);
  const auto sim = simulate_map(m, g, 2.5).data();
  EXPECT_NEAR(pearson(affine(sim, 0.5, 4.0), map.data()), base, 1e-10);
}

TEST(Rscc, NoiseAndDisjointSupport) {
  std::mt19937_64 rng(41);
  const AtomicModel m = backbone(30);
  const GridGeometry g = enclosing_grid(m, 1.0, 4);
  std::normal_distribution<double> n01;
  std::vector<double> noise(g.voxel_count());
  for (double& v : noise) v = n01(rng);
  EXPECT_LT(std::abs(rscc(m, DensityMap(g, noise), 2.0)), 0.05);
  // Entirely outside the box the simulation is flat.
  AtomicModel gone = m;
  for (auto& a : gone.atoms) a.pos += Vec3(1000.0, 0.0, 0.0);
  EXPECT_THROW(rscc(gone, DensityMap(g, noise), 2.0), NumericError);
}

TEST(Rank, SingleSample) {
  const AtomicModel m = backbone(8);
  const DensityMap map = simulate_map(m, enclosing_grid(m, 1.0, 4), 2.0);
  const std::vector<AtomicModel> one{m};
  EXPECT_EQ(rank_samples(one, map, 2.0).order, std::vector<std::size_t>{0});
  EXPECT_THROW(rank_samples(std::span<const AtomicModel>{}, map, 2.0), EmptySelectionError);
}

TEST(Rank, PerturbationOrderIsRecovered) {
  const AtomicModel ref = backbone(20);
  const DensityMap map = simulate_map(ref, enclosing_grid(ref, 1.0, 4), 2.0);
  std::mt19937_64 rng(42);
  std::normal_distribution<double> n01;
  const double amp[] = {0.1, 0.4, 0.8, 1.5, 3.0};
  std::vector<AtomicModel> samples;
  for (double a : amp) {
    AtomicModel s = ref;
    for (auto& at : s.atoms) at.pos += a * Vec3(n01(rng), n01(rng), n01(rng));
    samples.push_back(s);
  }
  // Shuffle the presentation order so ranking cannot rely on input order.
  const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  std::vector<AtomicModel> shown;
  for (std::size_t p : perm) shown.push_back(samples[p]);
  const Ranking byrscc = rank_samples(shown, map, 2.0);
  const Ranking byrmsd = rank_samples_by_rmsd(shown, ref);
  const std::vector<std::size_t> expect{1, 4, 3, 0, 2};
  EXPECT_EQ(byrscc.order, expect);
  EXPECT_EQ(byrmsd.order, expect);
  EXPECT_TRUE(byrscc.skipped.empty());
}

TEST(Rank, TiesKeepIndexOrderAndFailuresAreSkipped) {
  const AtomicModel ref = backbone(10);
  const DensityMap map = simulate_map(ref, enclosing_grid(ref, 1.0, 4), 2.0);
  AtomicModel gone = ref;
  for (auto& a : gone.atoms) a.pos += Vec3(0.0, 1000.0, 0.0);
  const std::vector<AtomicModel> samples{ref, gone, ref};
  const Ranking r = rank_samples(samples, map, 2.0);
  EXPECT_EQ(r.order, (std::vector<std::size_t>{0, 2}));
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0].first, 1u);
  EXPECT_FALSE(r.scores[1].has_value());

  AtomicModel renumbered = ref;
  for (auto& a : renumbered.atoms) a.res_index += 50;
  const std::vector<AtomicModel> byrmsd{renumbered, ref};
  const Ranking q = rank_samples_by_rmsd(byrmsd, ref);
  EXPECT_EQ(q.order, std::vector<std::size_t>{1});
  EXPECT_EQ(q.skipped.size(), 1u);
}
