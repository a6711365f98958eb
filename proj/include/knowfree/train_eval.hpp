#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knowfree/corpus.hpp"
#include "knowfree/span_model.hpp"

namespace knowfree {

enum class AlphaMode { kDynamic, kFixed };
enum class LrSchedule { kConstant, kLinear };  // kLinear decays to 0 at the last step

struct TrainConfig {
  double lr_encoder = 2e-5;
  double lr_head = 1e-3;
  double weight_decay = 1e-3;
  double beta = 0.4;
  int epochs = 50;
  int batch_size = 8;
  std::uint64_t seed = 13;
  AlphaMode alpha_mode = AlphaMode::kDynamic;
  double fixed_alpha = 1.0;  // used when alpha_mode == kFixed
  LrSchedule schedule = LrSchedule::kLinear;
  double threshold = 0.5;
  int early_stopping_patience = 0;  // 0 disables; needs a dev set

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Decoupled weight decay Adam (beta1 0.9, beta2 0.999, eps 1e-8) with one
// learning rate per parameter group.
class AdamW {
 public:
  AdamW(std::vector<ParameterRef> params, std::map<std::string, double> group_lr,
        double weight_decay);

  void zero_grad();
  // Applies one update with every group's learning rate multiplied by
  // lr_scale.
  void step(double lr_scale = 1.0);
  long steps() const { return t_; }

 private:
  struct Slot {
    Parameter* param;
    double lr;
    Matrix m, v;
  };
  std::vector<Slot> slots_;
  double weight_decay_;
  long t_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;            // mean combined loss per step
  double fusion_loss = 0.0;     // mean per step
  double synthetic_loss = 0.0;  // mean per step, before beta
  // Dropout-free objective over the whole training set at the end of the
  // epoch, scaled to a per-step mean like `loss`.
  double objective = 0.0;
  std::optional<double> dev_f1;
};

struct TrainResult {
  std::vector<EpochRecord> trace;
  std::vector<double> alpha;
  int best_epoch = 0;
  bool early_stopped = false;

  nlohmann::json trace_json() const;
};

struct LabelCounts {
  std::size_t gold = 0;
  std::size_t predicted = 0;
  std::size_t matched = 0;
};

struct EvalReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  LabelCounts total;
  std::map<std::string, LabelCounts> per_label;

  nlohmann::json to_json() const;
};

// Extension label counts and target label counts over the samples, in
// vocabulary order.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> label_counts(
    std::span<const AnnotatedSample> samples, const LabelVocabulary& vocab);

std::vector<double> resolve_alpha(const TrainConfig& config, const LabelVocabulary& vocab,
                                  std::span<const AnnotatedSample> training);

// Per step: sum of fusion item losses + beta * sum of synthetic item losses.
// Synthetic items are spread evenly over the steps of an epoch. With beta == 0
// the synthetic set is ignored entirely.
TrainResult train(SpanModel& model, std::span<const AnnotatedSample> fusion,
                  std::span<const AnnotatedSample> synthetic, const TrainConfig& config,
                  std::span<const AnnotatedSample> dev = {});

// Exact-match micro P/R/F1 over (start, end, label) triples; 0/0 -> 0.
EvalReport score_predictions(std::span<const SpanSet> predicted, std::span<const SpanSet> gold);

// Decodes every sentence (in parallel, up to `threads` workers) and scores
// the target spans.
EvalReport evaluate(const SpanModel& model, std::span<const AnnotatedSample> samples,
                    double threshold = 0.5, unsigned threads = 0);
std::vector<SpanSet> predict_all(const SpanModel& model, std::span<const AnnotatedSample> samples,
                                 double threshold = 0.5, unsigned threads = 0);

struct KShotResult {
  std::vector<std::size_t> indices;  // into the corpus, ascending
  std::map<std::string, std::size_t> coverage;
  std::vector<std::string> under_supplied;
};

// Walk the seed-shuffled corpus, keeping a sentence iff it carries a label
// whose running count is still below k; stop once every label reaches k.
KShotResult sample_kshot(std::span<const AnnotatedSample> corpus,
                         std::span<const std::string> labels, int k, std::uint64_t seed);

// Prefixes of one seed-shuffled permutation; each result holds corpus
// indices in permutation order.
std::vector<std::vector<std::size_t>> sample_nested_subsets(std::size_t corpus_size,
                                                            std::span<const std::size_t> sizes,
                                                            std::uint64_t seed);

// Fisher-Yates with a 64-bit Mersenne twister; portable across standard
// libraries.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

}  // namespace knowfree
