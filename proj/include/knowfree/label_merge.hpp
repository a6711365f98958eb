#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "knowfree/corpus.hpp"

namespace knowfree {

struct EntityTypePair {
  std::string entity;
  std::string raw_label;
};

// Standard label -> synonym labels, in the order the LLM returned them.
class SynonymMap {
 public:
  void add(std::string standard, std::vector<std::string> synonyms);

  const std::vector<std::pair<std::string, std::vector<std::string>>>& entries() const {
    return entries_;
  }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<std::pair<std::string, std::vector<std::string>>> entries_;
  std::map<std::string, std::string> owner_;
};

using Embedding = std::vector<double>;

struct LabelCluster {
  std::string label;
  std::vector<Embedding> vectors;
  Embedding centroid;
  double radius = 0.0;
};

struct MergePolicy {
  double epsilon = 1.5;
  int top_p = 5;

  void validate() const;
};

// Deterministic text-to-vector function.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual int dimension() const = 0;
  virtual Embedding embed(std::string_view text) const = 0;
};

// Signed feature hashing of UTF-8 character 1- to 3-grams, L2-normalized.
class HashingEmbedder : public Embedder {
 public:
  explicit HashingEmbedder(int dimension = 256);
  int dimension() const override { return dimension_; }
  Embedding embed(std::string_view text) const override;

 private:
  int dimension_;
};

// "<entity> is <label>"
std::string render_pair(const EntityTypePair& pair);

std::vector<Embedding> embed_pairs(std::span<const EntityTypePair> pairs, const Embedder& embedder);

// Centroid is the mean; radius is the mean distance to the centroid of the
// min(p, |V|) farthest vectors.
std::pair<Embedding, double> cluster_stats(std::span<const Embedding> vectors,
                                           const MergePolicy& policy);

// One cluster per raw label, in first-appearance order.
std::vector<LabelCluster> build_clusters(std::span<const EntityTypePair> pairs,
                                         std::span<const Embedding> vectors,
                                         const MergePolicy& policy);

// Largest (count, radius); ties broken by the lexicographically smallest label.
const LabelCluster& select_reference(std::span<const LabelCluster* const> clusters);

double euclidean_distance(std::span<const double> a, std::span<const double> b);

struct MergeDecision {
  std::string raw_label;
  std::string standard_label;
  std::string reference;  // empty when the label is not in the synonym map
  std::size_t count = 0;
  double centroid_norm = 0.0;
  double radius = 0.0;
  double reference_radius = 0.0;
  double distance = 0.0;
  enum class Kind { kReference, kMerged, kIndependent, kUnmapped } kind = Kind::kUnmapped;
};

std::string_view to_string(MergeDecision::Kind kind);

struct MergeResult {
  std::map<std::string, std::string> mapping;  // raw label -> standard label
  std::vector<MergeDecision> decisions;        // sorted by raw label

  nlohmann::json report() const;
};

// A synonym T_j joins its standard label iff ||c_j - c_ref|| <= epsilon * r_ref,
// where ref is the selected reference cluster of that standard label; the
// reference itself always joins. Labels outside the map keep their name.
MergeResult merge_labels(const SynonymMap& raw, std::span<const LabelCluster> clusters,
                         const MergePolicy& policy);

// Renames extension span labels and drops duplicate triples.
std::vector<AnnotatedSample> apply_label_mapping(std::vector<AnnotatedSample> samples,
                                                 const std::map<std::string, std::string>& mapping);

}  // namespace knowfree
