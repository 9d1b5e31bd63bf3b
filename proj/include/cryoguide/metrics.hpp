#pragma once

#include "cryoguide/alignment.hpp"
#include "cryoguide/core.hpp"
#include "cryoguide/forward_model.hpp"
#include "cryoguide/structure.hpp"
#include "cryoguide/volume.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace cryoguide {

struct ResidueRange {
  std::string chain = "A";
  int lo = 0;
  int hi = 0;
};

struct EvalReport {
  double rmsd_all = 0.0;
  double rmsd_ca = 0.0;
  std::optional<double> rmsd_local;
  double tm_score = 0.0;
  std::optional<double> rscc;
  std::size_t paired_atoms = 0;
  std::size_t unpaired_atoms = 0;  // atoms of either model without a partner
  std::size_t paired_ca = 0;
  RigidTransform superposition;  // sample -> reference, from the paired CA atoms
};

/// TM-score distance scale for a reference of L residues.
inline double tm_d0(std::size_t L) {
  const double l = static_cast<double>(L);
  return std::max(0.5, 1.24 * std::cbrt(l - 15.0) - 1.8);
}

/// (1/L) sum_i 1 / (1 + (d_i/d0)^2) over the paired distances.
inline double tm_score_from_distances(std::span<const double> distances, std::size_t L) {
  if (L == 0) throw GeometryError("tm_score: empty reference");
  const double d0 = tm_d0(L);
  double s = 0.0;
  for (double d : distances) s += 1.0 / (1.0 + (d / d0) * (d / d0));
  return s / static_cast<double>(L);
}

struct AtomPairing {
  std::vector<std::pair<std::size_t, std::size_t>> all;  // (sample index, reference index)
  std::vector<std::pair<std::size_t, std::size_t>> ca;
  std::size_t unpaired = 0;
};

/// Pairs atoms by (chain, residue index, atom name). The first occurrence of a key wins.
inline AtomPairing pair_atoms(const AtomicModel& sample, const AtomicModel& reference) {
  using Key = std::tuple<std::string, int, std::string>;
  std::map<Key, std::size_t> ref_index;
  for (std::size_t j = 0; j < reference.atoms.size(); ++j) {
    const auto& a = reference.atoms[j];
    ref_index.emplace(Key{a.chain_id, a.res_index, a.atom_name}, j);
  }
  AtomPairing p;
  std::vector<bool> used(reference.atoms.size(), false);
  for (std::size_t i = 0; i < sample.atoms.size(); ++i) {
    const auto& a = sample.atoms[i];
    const auto it = ref_index.find(Key{a.chain_id, a.res_index, a.atom_name});
    if (it == ref_index.end() || used[it->second]) {
      ++p.unpaired;
      continue;
    }
    used[it->second] = true;
    p.all.emplace_back(i, it->second);
    if (a.atom_name == "CA") p.ca.emplace_back(i, it->second);
  }
  p.unpaired += static_cast<std::size_t>(std::count(used.begin(), used.end(), false));
  return p;
}

/// Pearson correlation between the map and the model's simulated map on the same grid.
inline double rscc(const AtomicModel& model, const DensityMap& map, double resolution, const FormFactorTable& table = {}) {
  const DensityMap sim = simulate_map(model, map.geometry(), resolution, table);
  return pearson(sim.data(), map.data());
}

namespace detail {

inline double pair_rmsd(const Coords& s, const Coords& r, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  double acc = 0.0;
  for (auto [i, j] : pairs) acc += (s[i] - r[j]).squaredNorm();
  return std::sqrt(acc / static_cast<double>(pairs.size()));
}

}  // namespace detail

/// Superposes the sample onto the reference on paired CA atoms and reports RMSDs in that frame.
/// RSCC uses the sample as given (its own frame), unless realign_for_rscc is set.
inline EvalReport evaluate(const AtomicModel& sample, const AtomicModel& reference, const DensityMap* map = nullptr,
                           std::optional<ResidueRange> local = std::nullopt, double resolution = 2.0,
                           bool realign_for_rscc = false, const FormFactorTable& table = {}) {
  const AtomPairing p = pair_atoms(sample, reference);
  if (p.ca.size() < 3)
    throw GeometryError("evaluate: " + std::to_string(p.ca.size()) + " paired CA atoms (need at least 3)");
  const Coords s = sample.positions();
  const Coords r = reference.positions();
  Coords sa, ra;
  for (auto [i, j] : p.ca) {
    sa.push_back(s[i]);
    ra.push_back(r[j]);
  }
  EvalReport rep;
  rep.superposition = kabsch(sa, ra).transform;
  const Coords moved = rep.superposition.apply(s);
  rep.paired_atoms = p.all.size();
  rep.unpaired_atoms = p.unpaired;
  rep.paired_ca = p.ca.size();
  rep.rmsd_all = detail::pair_rmsd(moved, r, p.all);
  rep.rmsd_ca = detail::pair_rmsd(moved, r, p.ca);

  std::vector<double> dist;
  for (auto [i, j] : p.ca) dist.push_back((moved[i] - r[j]).norm());
  const std::size_t L = ca_subset(reference).size();
  rep.tm_score = tm_score_from_distances(dist, L);

  if (local) {
    if (local->lo > local->hi) throw GeometryError("evaluate: local range lo > hi");
    std::vector<std::pair<std::size_t, std::size_t>> sel;
    for (auto pr : p.ca) {
      const auto& a = reference.atoms[pr.second];
      if (a.chain_id == local->chain && a.res_index >= local->lo && a.res_index <= local->hi) sel.push_back(pr);
    }
    if (sel.empty()) throw EmptySelectionError("evaluate: no paired CA atoms in the local range");
    rep.rmsd_local = detail::pair_rmsd(moved, r, sel);
  }
  if (map) {
    rep.rscc = realign_for_rscc ? rscc(sample.with_positions(moved), *map, resolution, table)
                                : rscc(sample, *map, resolution, table);
  }
  return rep;
}

struct Ranking {
  std::vector<std::size_t> order;                         // best first
  std::vector<std::optional<double>> scores;              // per input sample
  std::vector<std::pair<std::size_t, std::string>> skipped;  // (index, diagnostic)
};

namespace detail {

template <class Better>
inline void finish_ranking(Ranking& r, Better better) {
  for (std::size_t i = 0; i < r.scores.size(); ++i)
    if (r.scores[i]) r.order.push_back(i);
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t a, std::size_t b) { return better(*r.scores[a], *r.scores[b]); });
}

}  // namespace detail

/// Samples by descending RSCC against the map; ties keep index order. Failing samples are skipped.
inline Ranking rank_samples(std::span<const AtomicModel> samples, const DensityMap& map, double resolution,
                            const FormFactorTable& table = {}) {
  if (samples.empty()) throw EmptySelectionError("rank_samples: no samples");
  Ranking r;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      r.scores.emplace_back(rscc(samples[i], map, resolution, table));
    } catch (const Error& e) {
      r.scores.emplace_back(std::nullopt);
      r.skipped.emplace_back(i, e.what());
    }
  }
  detail::finish_ranking(r, [](double a, double b) { return a > b; });
  return r;
}

/// Samples by ascending all-atom RMSD to a reference (best-of-N with an oracle).
inline Ranking rank_samples_by_rmsd(std::span<const AtomicModel> samples, const AtomicModel& reference) {
  if (samples.empty()) throw EmptySelectionError("rank_samples_by_rmsd: no samples");
  Ranking r;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      r.scores.emplace_back(evaluate(samples[i], reference).rmsd_all);
    } catch (const Error& e) {
      r.scores.emplace_back(std::nullopt);
      r.skipped.emplace_back(i, e.what());
    }
  }
  detail::finish_ranking(r, [](double a, double b) { return a < b; });
  return r;
}

}  // namespace cryoguide
