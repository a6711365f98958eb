#include "knowfree/train_eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <thread>

namespace knowfree {

namespace {

std::string_view to_string(AlphaMode mode) {
  return mode == AlphaMode::kDynamic ? "dynamic" : "fixed";
}

std::string_view to_string(LrSchedule schedule) {
  return schedule == LrSchedule::kLinear ? "linear" : "constant";
}

LrSchedule parse_schedule(const std::string& name) {
  if (name == "linear") return LrSchedule::kLinear;
  if (name == "constant") return LrSchedule::kConstant;
  throw std::invalid_argument("unknown schedule: " + name);
}

AlphaMode parse_alpha_mode(const std::string& name) {
  if (name == "dynamic") return AlphaMode::kDynamic;
  if (name == "fixed") return AlphaMode::kFixed;
  throw std::invalid_argument("unknown alpha_mode: " + name);
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double f1_of(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

nlohmann::json counts_json(const LabelCounts& c) {
  const double p = ratio(c.matched, c.predicted);
  const double r = ratio(c.matched, c.gold);
  return {{"precision", p}, {"recall", r}, {"f1", f1_of(p, r)},
          {"gold", c.gold}, {"predicted", c.predicted}, {"matched", c.matched}};
}

struct Item {
  std::vector<int> ids;
  Matrix gold;
};

std::vector<Item> prepare(const SpanModel& model, std::span<const AnnotatedSample> samples,
                          const char* set_name) {
  std::vector<Item> items;
  items.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.sequence.mode() != model.tokenizer()) {
      throw DataError(std::string(set_name) + " sample " + std::to_string(i) +
                      ": tokenizer mode differs from the model");
    }
    try {
      items.push_back({model.tokens().encode(s.sequence), gold_grid(s, model.labels())});
    } catch (const DataError& e) {
      throw DataError(std::string(set_name) + " sample " + std::to_string(i) + ": " + e.what());
    }
  }
  return items;
}

unsigned worker_count(unsigned requested, std::size_t work) {
  unsigned n = requested != 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
  return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(work, 1)));
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_encoder > 0.0) || !(lr_head > 0.0)) {
    throw std::invalid_argument("train config: learning rates must be positive");
  }
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train config: weight_decay must be >= 0");
  if (!(beta >= 0.0)) throw std::invalid_argument("train config: beta must be >= 0");
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (!(fixed_alpha >= 0.0)) throw std::invalid_argument("train config: fixed_alpha must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("train config: threshold must be in (0, 1)");
  }
  if (early_stopping_patience < 0) {
    throw std::invalid_argument("train config: early_stopping_patience must be >= 0");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr_encoder", lr_encoder},
          {"lr_head", lr_head},
          {"weight_decay", weight_decay},
          {"beta", beta},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"seed", seed},
          {"alpha_mode", std::string(to_string(alpha_mode))},
          {"fixed_alpha", fixed_alpha},
          {"schedule", std::string(to_string(schedule))},
          {"threshold", threshold},
          {"early_stopping_patience", early_stopping_patience}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "lr_encoder", "lr_head",   "weight_decay", "beta",      "epochs", "batch_size",
      "seed",       "alpha_mode", "fixed_alpha", "schedule",  "threshold",
      "early_stopping_patience"};
  for (const auto& [key, _] : j.items()) {
    if (known.count(key) == 0) throw std::invalid_argument("train config: unknown key '" + key + "'");
  }
  TrainConfig c;
  c.lr_encoder = j.value("lr_encoder", c.lr_encoder);
  c.lr_head = j.value("lr_head", c.lr_head);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta = j.value("beta", c.beta);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.alpha_mode = parse_alpha_mode(j.value("alpha_mode", std::string(to_string(c.alpha_mode))));
  c.fixed_alpha = j.value("fixed_alpha", c.fixed_alpha);
  c.schedule = parse_schedule(j.value("schedule", std::string(to_string(c.schedule))));
  c.threshold = j.value("threshold", c.threshold);
  c.early_stopping_patience = j.value("early_stopping_patience", c.early_stopping_patience);
  c.validate();
  return c;
}

AdamW::AdamW(std::vector<ParameterRef> params, std::map<std::string, double> group_lr,
             double weight_decay)
    : weight_decay_(weight_decay) {
  for (const auto& ref : params) {
    auto it = group_lr.find(ref.group);
    if (it == group_lr.end()) throw std::invalid_argument("no learning rate for group " + ref.group);
    const Matrix& v = ref.parameter->value;
    slots_.push_back({ref.parameter, it->second, Matrix::Zero(v.rows(), v.cols()),
                      Matrix::Zero(v.rows(), v.cols())});
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.param->zero_grad();
}

void AdamW::step(double lr_scale) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& s : slots_) {
    Matrix& w = s.param->value;
    const Matrix& g = s.param->grad;
    const double lr = s.lr * lr_scale;
    s.m = b1 * s.m + (1.0 - b1) * g;
    s.v = b2 * s.v + (1.0 - b2) * g.cwiseProduct(g);
    w *= 1.0 - lr * weight_decay_;
    w.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps);
  }
}

nlohmann::json TrainResult::trace_json() const {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& r : trace) {
    nlohmann::json e = {{"epoch", r.epoch},
                        {"loss", r.loss},
                        {"fusion_loss", r.fusion_loss},
                        {"synthetic_loss", r.synthetic_loss},
                        {"objective", r.objective}};
    if (r.dev_f1) e["dev_f1"] = *r.dev_f1;
    epochs.push_back(std::move(e));
  }
  return {{"epochs", epochs},
          {"alpha", alpha},
          {"best_epoch", best_epoch},
          {"early_stopped", early_stopped}};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> label_counts(
    std::span<const AnnotatedSample> samples, const LabelVocabulary& vocab) {
  std::vector<std::size_t> ext(vocab.num_extension(), 0), tgt(vocab.num_target(), 0);
  for (const auto& s : samples) {
    for (const auto& span : s.target_spans) {
      if (auto c = vocab.target_channel(span.label)) ++tgt[*c];
    }
    for (const auto& span : s.extension_spans) {
      if (auto c = vocab.extension_channel(span.label)) ++ext[*c - vocab.num_target()];
    }
  }
  return {ext, tgt};
}

std::vector<double> resolve_alpha(const TrainConfig& config, const LabelVocabulary& vocab,
                                  std::span<const AnnotatedSample> training) {
  if (config.alpha_mode == AlphaMode::kFixed) {
    return std::vector<double>(vocab.num_extension(), config.fixed_alpha);
  }
  const auto [ext, tgt] = label_counts(training, vocab);
  return dynamic_alpha(ext, tgt);
}

TrainResult train(SpanModel& model, std::span<const AnnotatedSample> fusion,
                  std::span<const AnnotatedSample> synthetic, const TrainConfig& config,
                  std::span<const AnnotatedSample> dev) {
  config.validate();
  if (fusion.empty()) throw std::invalid_argument("train: empty fusion set");
  if (config.beta == 0.0) synthetic = {};
  if (config.early_stopping_patience > 0 && dev.empty()) {
    throw std::invalid_argument("train: early stopping needs a dev set");
  }

  const auto fusion_items = prepare(model, fusion, "fusion");
  const auto synthetic_items = prepare(model, synthetic, "synthetic");

  std::vector<AnnotatedSample> all(fusion.begin(), fusion.end());
  all.insert(all.end(), synthetic.begin(), synthetic.end());
  TrainResult result;
  result.alpha = resolve_alpha(config, model.labels(), all);
  const std::size_t num_target = model.labels().num_target();

  auto params = model.parameters();
  AdamW optimizer(params, {{"encoder", config.lr_encoder}, {"head", config.lr_head}},
                  config.weight_decay);
  std::mt19937_64 rng(config.seed);

  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps = (fusion_items.size() + batch - 1) / batch;
  const std::size_t syn_per_step =
      synthetic_items.empty() ? 0 : (synthetic_items.size() + steps - 1) / steps;

  const std::size_t total_steps = steps * static_cast<std::size_t>(config.epochs);
  std::vector<std::size_t> fusion_order(fusion_items.size()), syn_order(synthetic_items.size());
  double best_f1 = -1.0;
  int since_best = 0;
  std::vector<Matrix> best_values;

  auto item_loss = [&](const Item& item, double scale) {
    ag::Graph g;
    ag::Var probs = model.forward(g, item.ids, &rng);
    ag::Var loss = knowfree_loss(g, probs, item.gold, num_target, result.alpha);
    const double value = g.value(loss)(0, 0);
    if (!std::isfinite(value)) return value;
    if (scale != 1.0) loss = g.scale(loss, scale);
    g.backward(loss);
    return value;
  };

  auto eval_loss = [&](const Item& item) {
    ag::Graph g(false);
    ag::Var probs = model.forward(g, item.ids, nullptr);
    return g.value(knowfree_loss(g, probs, item.gold, num_target, result.alpha))(0, 0);
  };

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(fusion_order.begin(), fusion_order.end(), 0);
    std::iota(syn_order.begin(), syn_order.end(), 0);
    std::shuffle(fusion_order.begin(), fusion_order.end(), rng);
    std::shuffle(syn_order.begin(), syn_order.end(), rng);

    EpochRecord record;
    record.epoch = epoch;
    for (std::size_t step = 0; step < steps; ++step) {
      optimizer.zero_grad();
      double fusion_loss = 0.0, synthetic_loss = 0.0;
      const std::size_t f_end = std::min(fusion_order.size(), (step + 1) * batch);
      for (std::size_t k = step * batch; k < f_end; ++k) {
        fusion_loss += item_loss(fusion_items[fusion_order[k]], 1.0);
      }
      const std::size_t s_end = std::min(syn_order.size(), (step + 1) * syn_per_step);
      for (std::size_t k = step * syn_per_step; k < s_end; ++k) {
        synthetic_loss += item_loss(synthetic_items[syn_order[k]], config.beta);
      }
      const double total = combined_loss(fusion_loss, synthetic_loss, config.beta);
      if (!std::isfinite(total)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step + 1));
      }
      double scale = 1.0;
      if (config.schedule == LrSchedule::kLinear) {
        const double done = static_cast<double>(optimizer.steps());
        scale = 1.0 - done / static_cast<double>(total_steps);
      }
      optimizer.step(scale);
      record.loss += total;
      record.fusion_loss += fusion_loss;
      record.synthetic_loss += synthetic_loss;
    }
    const double n = static_cast<double>(steps);
    double fusion_total = 0.0, synthetic_total = 0.0;
    for (const auto& item : fusion_items) fusion_total += eval_loss(item);
    for (const auto& item : synthetic_items) synthetic_total += eval_loss(item);
    record.objective = combined_loss(fusion_total, synthetic_total, config.beta) / n;
    record.loss /= n;
    record.fusion_loss /= n;
    record.synthetic_loss /= n;

    if (config.early_stopping_patience > 0) {
      const double f1 = evaluate(model, dev, config.threshold, 1).f1;
      record.dev_f1 = f1;
      if (f1 > best_f1) {
        best_f1 = f1;
        since_best = 0;
        result.best_epoch = epoch;
        best_values.clear();
        for (const auto& p : params) best_values.push_back(p.parameter->value);
      } else if (++since_best >= config.early_stopping_patience) {
        result.trace.push_back(record);
        result.early_stopped = true;
        break;
      }
    } else {
      result.best_epoch = epoch;
    }
    result.trace.push_back(record);
  }
  if (!best_values.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].parameter->value = best_values[i];
  }
  return result;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json labels = nlohmann::json::object();
  for (const auto& [label, c] : per_label) labels[label] = counts_json(c);
  nlohmann::json j = counts_json(total);
  j["per_label"] = labels;
  return j;
}

EvalReport score_predictions(std::span<const SpanSet> predicted, std::span<const SpanSet> gold) {
  if (predicted.size() != gold.size()) {
    throw std::invalid_argument("score_predictions: sentence count mismatch");
  }
  EvalReport report;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    SpanSet p = predicted[i], g = gold[i];
    canonicalize(p);
    canonicalize(g);
    for (const auto& s : g) {
      ++report.per_label[s.label].gold;
      ++report.total.gold;
    }
    for (const auto& s : p) {
      ++report.per_label[s.label].predicted;
      ++report.total.predicted;
    }
    SpanSet common;
    std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(common));
    for (const auto& s : common) {
      ++report.per_label[s.label].matched;
      ++report.total.matched;
    }
  }
  report.precision = ratio(report.total.matched, report.total.predicted);
  report.recall = ratio(report.total.matched, report.total.gold);
  report.f1 = f1_of(report.precision, report.recall);
  return report;
}

std::vector<SpanSet> predict_all(const SpanModel& model, std::span<const AnnotatedSample> samples,
                                 double threshold, unsigned threads) {
  std::vector<SpanSet> out(samples.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < samples.size(); i = next++) {
      out[i] = model.annotate(samples[i].sequence, threshold);
    }
  };
  const unsigned n = worker_count(threads, samples.size());
  if (n <= 1) {
    work();
    return out;
  }
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  return out;
}

EvalReport evaluate(const SpanModel& model, std::span<const AnnotatedSample> samples,
                    double threshold, unsigned threads) {
  std::vector<SpanSet> gold;
  gold.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (const auto& s : samples[i].target_spans) {
      if (!model.labels().target_channel(s.label)) {
        throw DataError("sample " + std::to_string(i) + ": label '" + s.label +
                        "' is not a target label of the model");
      }
    }
    gold.push_back(samples[i].target_spans);
  }
  EvalReport report = score_predictions(predict_all(model, samples, threshold, threads), gold);
  for (const auto& label : model.labels().target_labels()) report.per_label[label];
  return report;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

KShotResult sample_kshot(std::span<const AnnotatedSample> corpus,
                         std::span<const std::string> labels, int k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("sample_kshot: k must be >= 1");
  KShotResult result;
  for (const auto& l : labels) result.coverage[l] = 0;
  const auto k_size = static_cast<std::size_t>(k);
  auto all_full = [&] {
    return std::all_of(result.coverage.begin(), result.coverage.end(),
                       [&](const auto& kv) { return kv.second >= k_size; });
  };
  for (std::size_t idx : seeded_permutation(corpus.size(), seed)) {
    if (all_full()) break;
    bool useful = false;
    for (const auto& s : corpus[idx].target_spans) {
      auto it = result.coverage.find(s.label);
      if (it != result.coverage.end() && it->second < k_size) useful = true;
    }
    if (!useful) continue;
    result.indices.push_back(idx);
    for (const auto& s : corpus[idx].target_spans) {
      auto it = result.coverage.find(s.label);
      if (it != result.coverage.end()) ++it->second;
    }
  }
  std::sort(result.indices.begin(), result.indices.end());
  for (const auto& [label, count] : result.coverage) {
    if (count < k_size) result.under_supplied.push_back(label);
  }
  return result;
}

std::vector<std::vector<std::size_t>> sample_nested_subsets(std::size_t corpus_size,
                                                            std::span<const std::size_t> sizes,
                                                            std::uint64_t seed) {
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] > corpus_size) {
      throw std::invalid_argument("sample_nested_subsets: size " + std::to_string(sizes[i]) +
                                  " exceeds corpus size " + std::to_string(corpus_size));
    }
    if (i > 0 && sizes[i] <= sizes[i - 1]) {
      throw std::invalid_argument("sample_nested_subsets: sizes must be strictly ascending");
    }
  }
  const auto perm = seeded_permutation(corpus_size, seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t size : sizes) {
    out.emplace_back(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(size));
  }
  return out;
}

}  // namespace knowfree
