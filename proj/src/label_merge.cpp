#include "knowfree/label_merge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace knowfree {

void SynonymMap::add(std::string standard, std::vector<std::string> synonyms) {
  for (const auto& [existing, _] : entries_) {
    if (existing == standard) throw std::invalid_argument("duplicate standard label: " + standard);
  }
  for (const auto& s : synonyms) {
    if (!owner_.emplace(s, standard).second) {
      throw std::invalid_argument("synonym '" + s + "' listed under two standard labels");
    }
  }
  entries_.emplace_back(std::move(standard), std::move(synonyms));
}

void MergePolicy::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("merge policy: epsilon must be > 0");
  if (top_p < 1) throw std::invalid_argument("merge policy: top_p must be >= 1");
}

HashingEmbedder::HashingEmbedder(int dimension) : dimension_(dimension) {
  if (dimension < 1) throw std::invalid_argument("embedder dimension must be positive");
}

Embedding HashingEmbedder::embed(std::string_view text) const {
  const auto chars = utf8_code_points(text);
  Embedding v(static_cast<std::size_t>(dimension_), 0.0);
  for (std::size_t n = 1; n <= 3; ++n) {
    for (std::size_t i = 0; i + n <= chars.size(); ++i) {
      std::uint64_t h = 1469598103934665603ULL ^ n;  // FNV-1a
      for (std::size_t k = i; k < i + n; ++k) {
        for (unsigned char c : chars[k]) {
          h ^= c;
          h *= 1099511628211ULL;
        }
      }
      const double sign = (h >> 63) != 0 ? -1.0 : 1.0;
      v[static_cast<std::size_t>(h % static_cast<std::uint64_t>(dimension_))] += sign;
    }
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
  }
  return v;
}

std::string render_pair(const EntityTypePair& pair) {
  return pair.entity + " is " + pair.raw_label;
}

std::vector<Embedding> embed_pairs(std::span<const EntityTypePair> pairs, const Embedder& embedder) {
  std::vector<Embedding> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    try {
      out.push_back(embedder.embed(render_pair(pairs[i])));
    } catch (const std::exception& e) {
      throw std::runtime_error("embedding failed for pair " + std::to_string(i) + ": " + e.what());
    }
    if (static_cast<int>(out.back().size()) != embedder.dimension()) {
      throw std::runtime_error("embedder returned wrong dimension for pair " + std::to_string(i));
    }
  }
  return out;
}

double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("distance: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::pair<Embedding, double> cluster_stats(std::span<const Embedding> vectors,
                                           const MergePolicy& policy) {
  policy.validate();
  if (vectors.empty()) throw std::invalid_argument("cluster_stats: empty vector set");
  const std::size_t dim = vectors.front().size();
  Embedding centroid(dim, 0.0);
  for (const auto& v : vectors) {
    if (v.size() != dim) throw std::invalid_argument("cluster_stats: dimension mismatch");
    for (std::size_t i = 0; i < dim; ++i) centroid[i] += v[i];
  }
  for (double& c : centroid) c /= static_cast<double>(vectors.size());

  std::vector<double> dist;
  dist.reserve(vectors.size());
  for (const auto& v : vectors) dist.push_back(euclidean_distance(v, centroid));
  const std::size_t p = std::min(static_cast<std::size_t>(policy.top_p), dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(p), dist.end(),
                    std::greater<>());
  double radius = 0.0;
  for (std::size_t i = 0; i < p; ++i) radius += dist[i];
  radius /= static_cast<double>(p);
  if (vectors.size() == 1) radius = 0.0;
  return {std::move(centroid), radius};
}

std::vector<LabelCluster> build_clusters(std::span<const EntityTypePair> pairs,
                                         std::span<const Embedding> vectors,
                                         const MergePolicy& policy) {
  if (pairs.size() != vectors.size()) throw std::invalid_argument("build_clusters: size mismatch");
  std::vector<LabelCluster> clusters;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto [it, inserted] = index.emplace(pairs[i].raw_label, clusters.size());
    if (inserted) clusters.push_back(LabelCluster{pairs[i].raw_label, {}, {}, 0.0});
    clusters[it->second].vectors.push_back(vectors[i]);
  }
  for (auto& c : clusters) std::tie(c.centroid, c.radius) = cluster_stats(c.vectors, policy);
  return clusters;
}

const LabelCluster& select_reference(std::span<const LabelCluster* const> clusters) {
  if (clusters.empty()) throw std::invalid_argument("select_reference: no clusters");
  const LabelCluster* best = clusters.front();
  for (const LabelCluster* c : clusters.subspan(1)) {
    const auto key = [](const LabelCluster* x) { return std::make_pair(x->vectors.size(), x->radius); };
    if (key(c) > key(best) || (key(c) == key(best) && c->label < best->label)) best = c;
  }
  return *best;
}

std::string_view to_string(MergeDecision::Kind kind) {
  switch (kind) {
    case MergeDecision::Kind::kReference: return "reference";
    case MergeDecision::Kind::kMerged: return "merged";
    case MergeDecision::Kind::kIndependent: return "independent";
    case MergeDecision::Kind::kUnmapped: return "unmapped";
  }
  return "unmapped";
}

nlohmann::json MergeResult::report() const {
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& d : decisions) {
    labels.push_back({{"raw_label", d.raw_label},
                      {"standard_label", d.standard_label},
                      {"decision", std::string(to_string(d.kind))},
                      {"reference", d.reference},
                      {"count", d.count},
                      {"centroid_norm", d.centroid_norm},
                      {"radius", d.radius},
                      {"reference_radius", d.reference_radius},
                      {"distance", d.distance}});
  }
  return {{"labels", labels}, {"mapping", mapping}};
}

MergeResult merge_labels(const SynonymMap& raw, std::span<const LabelCluster> clusters,
                         const MergePolicy& policy) {
  policy.validate();
  std::map<std::string, const LabelCluster*> by_label;
  for (const auto& c : clusters) by_label[c.label] = &c;

  MergeResult result;
  std::map<std::string, MergeDecision> decisions;
  auto norm = [](const Embedding& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };

  for (const auto& [standard, synonyms] : raw.entries()) {
    std::vector<const LabelCluster*> group;
    for (const auto& s : synonyms) {
      auto it = by_label.find(s);
      if (it == by_label.end()) throw std::invalid_argument("no cluster for mapped label: " + s);
      group.push_back(it->second);
    }
    if (group.empty()) continue;
    const LabelCluster& ref = select_reference(group);
    for (const LabelCluster* c : group) {
      MergeDecision d;
      d.raw_label = c->label;
      d.reference = ref.label;
      d.count = c->vectors.size();
      d.centroid_norm = norm(c->centroid);
      d.radius = c->radius;
      d.reference_radius = ref.radius;
      d.distance = euclidean_distance(c->centroid, ref.centroid);
      if (c == &ref) {
        d.kind = MergeDecision::Kind::kReference;
        d.standard_label = standard;
      } else if (d.distance <= policy.epsilon * ref.radius) {
        d.kind = MergeDecision::Kind::kMerged;
        d.standard_label = standard;
      } else {
        d.kind = MergeDecision::Kind::kIndependent;
        d.standard_label = c->label;
      }
      decisions[d.raw_label] = d;
    }
  }
  for (const auto& c : clusters) {
    if (decisions.count(c.label) != 0) continue;
    MergeDecision d;
    d.raw_label = c.label;
    d.standard_label = c.label;
    d.count = c.vectors.size();
    d.centroid_norm = norm(c.centroid);
    d.radius = c.radius;
    decisions[c.label] = d;
  }
  for (auto& [label, d] : decisions) {
    result.mapping[label] = d.standard_label;
    result.decisions.push_back(std::move(d));
  }
  return result;
}

std::vector<AnnotatedSample> apply_label_mapping(std::vector<AnnotatedSample> samples,
                                                 const std::map<std::string, std::string>& mapping) {
  for (auto& s : samples) {
    for (auto& span : s.extension_spans) {
      auto it = mapping.find(span.label);
      if (it == mapping.end()) throw std::invalid_argument("unmapped label: " + span.label);
      span.label = it->second;
    }
    canonicalize(s.extension_spans);
  }
  return samples;
}

}  // namespace knowfree
