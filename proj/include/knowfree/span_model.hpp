#pragma once

#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "knowfree/autograd.hpp"
#include "knowfree/corpus.hpp"
#include "knowfree/encoder.hpp"

namespace knowfree {

// Where GeLU sits in the output layer.
//   kGeluFeatures: P = sigmoid(GeLU(H_B + H_G) W_O + b)
//   kGeluLogits:   P = sigmoid(GeLU((H_B + H_G) W_O + b))
// kGeluLogits has a zero-gradient point at GeLU's minimum shared by every
// cell, which training on small corpora collapses into.
enum class ScoreForm { kGeluFeatures, kGeluLogits };

ScoreForm parse_score_form(std::string_view name);
std::string_view to_string(ScoreForm form);

struct HeadConfig {
  int projection_dim = 32;   // D'
  int biaffine_dim = 32;     // D~
  int biaffine_heads = 4;    // K_b
  int attention_heads = 4;   // K
  int window = 3;            // w
  double leaky_slope = 0.01;
  double output_bias_init = -4.0;  // starting logit of every channel, sigmoid(-4) ~ 0.018
  ScoreForm score_form = ScoreForm::kGeluFeatures;

  int head_dim() const { return biaffine_dim / attention_heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static HeadConfig from_json(const nlohmann::json& j);
};

struct LossWeights {
  std::vector<double> alpha;  // one per extension label
  double beta = 1.0;
};

struct BiaffineParams {
  Parameter u;       // (K_b*d) x (d*o): bilinear tensor of head k in rows [k*d, (k+1)*d)
  Parameter v_start; // (K_b*d) x o
  Parameter v_end;   // (K_b*d) x o
  Parameter bias;    // 1 x D~
};

struct GridAttentionParams {
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
};

// H_s = LeakyReLU(H W_s), H_e = LeakyReLU(H W_e).
std::pair<ag::Var, ag::Var> project_endpoints(ag::Graph& g, ag::Var hidden,
                                              Parameter& w_start, Parameter& w_end,
                                              double slope);

// Multi-head biaffine span grid, (L*L) x D~. Head k maps slices of width
// D'/K_b to an output slice of width D~/K_b:
//   hs_i^T U_k he_j + hs_i . Vs_k + he_j . Ve_k + b_k
ag::Var biaffine_grid(ag::Graph& g, ag::Var hs, ag::Var he, BiaffineParams& params,
                      int heads);

// M[i,j] = 0 if |i-j| <= w, -inf otherwise.
Matrix local_mask(int length, int window);

// Row-wise masked multi-head attention over the grid: each start row i is a
// length-L sequence over end positions. Returns H_attn (before the residual).
ag::Var local_attention(ag::Graph& g, ag::Var grid, int length, const Matrix& mask,
                        GridAttentionParams& params, int heads);

// Channel probabilities P from H_B + H_G; see ScoreForm.
ag::Var score_grid(ag::Graph& g, ag::Var biaffine, ag::Var fused, Parameter& w_out,
                   Parameter& b_out, ScoreForm form = ScoreForm::kGeluFeatures);

// Gold indicator y, (L*L) x channels. Throws DataError on labels outside the
// vocabulary.
Matrix gold_grid(const AnnotatedSample& sample, const LabelVocabulary& vocab);

// Loss weight per channel: 1 for targets, alpha for extensions.
std::vector<double> channel_weights(std::size_t num_target, std::span<const double> alpha);

inline constexpr double kProbabilityClamp = 1e-7;

// Full binary cross entropy over all cells; extension channels weighted by
// alpha.
ag::Var knowfree_loss(ag::Graph& g, ag::Var probs, const Matrix& gold,
                      std::size_t num_target, std::span<const double> alpha);
double knowfree_loss(const Matrix& probs, const Matrix& gold, std::size_t num_target,
                     std::span<const double> alpha);

double combined_loss(double loss_original, double loss_synthetic, double beta);

// alpha_i = 0.5 * mean(target_counts) / C_i, clamped to [0, 1]; 0 when
// C_i == 0.
std::vector<double> dynamic_alpha(std::span<const std::size_t> extension_counts,
                                  std::span<const std::size_t> target_counts);

// Target spans with P >= threshold on cells i <= j. Extension channels are
// never read.
SpanSet decode(const Matrix& probs, std::size_t length, const LabelVocabulary& vocab,
               double threshold = 0.5);

class SpanHead {
 public:
  struct Outputs {
    ag::Var start, end;   // L x D'
    ag::Var biaffine;     // H_B
    ag::Var attention;    // H_attn
    ag::Var fused;        // H_G
    ag::Var probs;        // P
  };

  SpanHead() = default;
  SpanHead(int hidden_dim, const HeadConfig& config, int num_channels, std::mt19937_64& rng);

  SpanHead(const SpanHead&) = delete;
  SpanHead& operator=(const SpanHead&) = delete;
  SpanHead(SpanHead&&) = default;
  SpanHead& operator=(SpanHead&&) = default;

  const HeadConfig& config() const { return config_; }
  int num_channels() const { return num_channels_; }

  Outputs forward(ag::Graph& g, ag::Var hidden, int length) const;

  void collect(std::vector<ParameterRef>& out);

 private:
  HeadConfig config_;
  int num_channels_ = 0;
  mutable Parameter w_start_, w_end_;
  mutable BiaffineParams biaffine_;
  mutable GridAttentionParams attention_;
  mutable Parameter ln_gain_, ln_bias_;
  mutable Parameter w_out_, b_out_;
};

// Encoder plus span head plus the vocabularies needed to run it on raw text.
class SpanModel {
 public:
  SpanModel(EncoderConfig encoder_config, HeadConfig head_config, LabelVocabulary labels,
            TokenVocab tokens, TokenizerMode mode, std::uint64_t seed);

  SpanModel(const SpanModel&) = delete;
  SpanModel& operator=(const SpanModel&) = delete;
  SpanModel(SpanModel&&) = default;
  SpanModel& operator=(SpanModel&&) = default;

  const LabelVocabulary& labels() const { return labels_; }
  const TokenVocab& tokens() const { return tokens_; }
  TokenizerMode tokenizer() const { return mode_; }
  const EncoderConfig& encoder_config() const { return encoder_.config(); }
  const HeadConfig& head_config() const { return head_.config(); }

  // Probability grid P for a sentence; rng enables dropout.
  ag::Var forward(ag::Graph& g, std::span<const int> ids, std::mt19937_64* rng) const;
  Matrix predict(const TokenSequence& sequence) const;
  SpanSet annotate(const TokenSequence& sequence, double threshold = 0.5) const;

  std::vector<ParameterRef> parameters();

 private:
  Encoder encoder_;
  SpanHead head_;
  LabelVocabulary labels_;
  TokenVocab tokens_;
  TokenizerMode mode_;
};

}  // namespace knowfree
