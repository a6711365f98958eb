#pragma once

// Brute-force label merging written straight from the definitions: centroid
// as a mean, radius as the average of the top-p distances after a full sort,
// reference chosen by exhaustive comparison.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace knowfree::testing {

struct MergeInstance {
  std::vector<std::string> pair_labels;             // raw label of pair i
  std::vector<std::vector<double>> pair_vectors;    // embedding of pair i
  std::vector<std::pair<std::string, std::vector<std::string>>> synonym_map;
};

inline std::map<std::string, std::string> brute_force_merge(const MergeInstance& inst,
                                                            double epsilon, int top_p) {
  struct Stats {
    std::size_t count = 0;
    std::vector<double> centroid;
    double radius = 0.0;
  };
  std::map<std::string, std::vector<std::vector<double>>> members;
  for (std::size_t i = 0; i < inst.pair_labels.size(); ++i) {
    members[inst.pair_labels[i]].push_back(inst.pair_vectors[i]);
  }
  std::map<std::string, Stats> stats;
  for (const auto& [label, vecs] : members) {
    Stats s;
    s.count = vecs.size();
    s.centroid.assign(vecs[0].size(), 0.0);
    for (const auto& v : vecs) {
      for (std::size_t d = 0; d < v.size(); ++d) s.centroid[d] += v[d] / static_cast<double>(vecs.size());
    }
    std::vector<double> dist;
    for (const auto& v : vecs) {
      double acc = 0.0;
      for (std::size_t d = 0; d < v.size(); ++d) acc += (v[d] - s.centroid[d]) * (v[d] - s.centroid[d]);
      dist.push_back(std::sqrt(acc));
    }
    std::sort(dist.begin(), dist.end());
    std::reverse(dist.begin(), dist.end());
    const std::size_t p = std::min<std::size_t>(static_cast<std::size_t>(top_p), dist.size());
    double total = 0.0;
    for (std::size_t k = 0; k < p; ++k) total += dist[k];
    s.radius = total / static_cast<double>(p);
    stats[label] = s;
  }

  std::map<std::string, std::string> mapping;
  for (const auto& [label, _] : stats) mapping[label] = label;
  for (const auto& [standard, synonyms] : inst.synonym_map) {
    if (synonyms.empty()) continue;
    std::string ref = synonyms[0];
    for (const auto& cand : synonyms) {
      const Stats& a = stats.at(cand);
      const Stats& b = stats.at(ref);
      bool better = false;
      if (a.count != b.count) {
        better = a.count > b.count;
      } else if (a.radius != b.radius) {
        better = a.radius > b.radius;
      } else {
        better = cand < ref;
      }
      if (better) ref = cand;
    }
    const Stats& r = stats.at(ref);
    for (const auto& cand : synonyms) {
      if (cand == ref) {
        mapping[cand] = standard;
        continue;
      }
      const Stats& c = stats.at(cand);
      double acc = 0.0;
      for (std::size_t d = 0; d < c.centroid.size(); ++d) {
        acc += (c.centroid[d] - r.centroid[d]) * (c.centroid[d] - r.centroid[d]);
      }
      mapping[cand] = std::sqrt(acc) <= epsilon * r.radius ? standard : cand;
    }
  }
  return mapping;
}

// Random instance: several raw labels with Gaussian clouds, grouped at random
// under standard labels. Some labels stay outside the map.
inline MergeInstance random_merge_instance(std::mt19937_64& rng, int dim = 6) {
  std::uniform_int_distribution<int> n_labels(2, 9), n_pairs(1, 12), n_groups(1, 3);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> spread(0.2, 1.5), offset(0.0, 3.0);
  MergeInstance inst;
  const int labels = n_labels(rng);
  std::vector<std::string> names;
  for (int l = 0; l < labels; ++l) {
    names.push_back("label" + std::to_string(l));
    std::vector<double> center(static_cast<std::size_t>(dim));
    const double off = offset(rng);
    for (double& c : center) c = normal(rng) * off;
    const double s = spread(rng);
    const int pairs = n_pairs(rng);
    for (int k = 0; k < pairs; ++k) {
      std::vector<double> v(static_cast<std::size_t>(dim));
      for (std::size_t d = 0; d < v.size(); ++d) v[d] = center[d] + s * normal(rng);
      inst.pair_labels.push_back(names.back());
      inst.pair_vectors.push_back(std::move(v));
    }
  }
  std::shuffle(names.begin(), names.end(), rng);
  const int groups = std::min(n_groups(rng), labels);
  std::uniform_int_distribution<int> pick(0, groups);  // == groups means unmapped
  std::vector<std::vector<std::string>> grouped(static_cast<std::size_t>(groups));
  for (const auto& n : names) {
    const int g = pick(rng);
    if (g < groups) grouped[static_cast<std::size_t>(g)].push_back(n);
  }
  for (int g = 0; g < groups; ++g) {
    if (grouped[static_cast<std::size_t>(g)].empty()) continue;
    inst.synonym_map.emplace_back("STD" + std::to_string(g), grouped[static_cast<std::size_t>(g)]);
  }
  return inst;
}

}  // namespace knowfree::testing
