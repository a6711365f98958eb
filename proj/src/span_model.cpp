#include "knowfree/span_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace knowfree {

using ConstRowMap = Eigen::Map<const Matrix>;

ScoreForm parse_score_form(std::string_view name) {
  if (name == "gelu_features") return ScoreForm::kGeluFeatures;
  if (name == "gelu_logits") return ScoreForm::kGeluLogits;
  throw std::invalid_argument("unknown score_form: " + std::string(name));
}

std::string_view to_string(ScoreForm form) {
  return form == ScoreForm::kGeluFeatures ? "gelu_features" : "gelu_logits";
}

void HeadConfig::validate() const {
  if (projection_dim <= 0 || biaffine_dim <= 0 || biaffine_heads <= 0 ||
      attention_heads <= 0) {
    throw std::invalid_argument("head: dimensions must be positive");
  }
  if (window < 0) throw std::invalid_argument("head: window must be >= 0");
  if (biaffine_dim % attention_heads != 0 || biaffine_dim % biaffine_heads != 0) {
    throw std::invalid_argument(
        "head: biaffine_dim must be divisible by attention_heads and biaffine_heads");
  }
  if (projection_dim % biaffine_heads != 0) {
    throw std::invalid_argument("head: projection_dim must be divisible by biaffine_heads");
  }
  if (!std::isfinite(output_bias_init)) {
    throw std::invalid_argument("head: output_bias_init must be finite");
  }
}

nlohmann::json HeadConfig::to_json() const {
  return {{"projection_dim", projection_dim}, {"biaffine_dim", biaffine_dim},
          {"biaffine_heads", biaffine_heads}, {"attention_heads", attention_heads},
          {"window", window},                 {"leaky_slope", leaky_slope},
          {"output_bias_init", output_bias_init},
          {"score_form", std::string(to_string(score_form))}};
}

HeadConfig HeadConfig::from_json(const nlohmann::json& j) {
  HeadConfig c;
  c.projection_dim = j.value("projection_dim", c.projection_dim);
  c.biaffine_dim = j.value("biaffine_dim", c.biaffine_dim);
  c.biaffine_heads = j.value("biaffine_heads", c.biaffine_heads);
  c.attention_heads = j.value("attention_heads", c.attention_heads);
  c.window = j.value("window", c.window);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.output_bias_init = j.value("output_bias_init", c.output_bias_init);
  c.score_form = parse_score_form(j.value("score_form", std::string(to_string(c.score_form))));
  return c;
}

std::pair<ag::Var, ag::Var> project_endpoints(ag::Graph& g, ag::Var hidden,
                                              Parameter& w_start, Parameter& w_end,
                                              double slope) {
  ag::Var hs = g.leaky_relu(g.matmul(hidden, g.param(w_start)), slope);
  ag::Var he = g.leaky_relu(g.matmul(hidden, g.param(w_end)), slope);
  return {hs, he};
}

ag::Var biaffine_grid(ag::Graph& g, ag::Var hs, ag::Var he, BiaffineParams& params,
                      int heads) {
  const Matrix& start = g.value(hs);
  const Matrix& end = g.value(he);
  if (start.rows() != end.rows() || start.cols() != end.cols() || start.cols() % heads != 0) {
    throw std::invalid_argument("biaffine_grid: endpoint shape mismatch");
  }
  const int length = static_cast<int>(start.rows());
  const int d = static_cast<int>(start.cols()) / heads;
  const int out_dim = static_cast<int>(params.bias.value.cols());
  if (out_dim % heads != 0 || params.u.value.rows() != heads * d ||
      params.u.value.cols() != d * (out_dim / heads) || params.v_start.value.rows() != heads * d ||
      params.v_end.value.rows() != heads * d) {
    throw std::invalid_argument("biaffine_grid: parameter shape mismatch");
  }
  const int o = out_dim / heads;

  ag::Var u = g.param(params.u);
  ag::Var vs = g.param(params.v_start);
  ag::Var ve = g.param(params.v_end);
  ag::Var bias = g.param(params.bias);
  const Matrix& U = g.value(u);
  const Matrix& Vs = g.value(vs);
  const Matrix& Ve = g.value(ve);

  Matrix out(static_cast<Eigen::Index>(length) * length, out_dim);
  // Per head: T = Hs_k U_k, row i reshaped to d x o.
  std::vector<Matrix> bilinear(static_cast<std::size_t>(heads));
  for (int k = 0; k < heads; ++k) {
    const Matrix hs_k = start.middleCols(k * d, d);
    const Matrix he_k = end.middleCols(k * d, d);
    Matrix t = hs_k * U.middleRows(k * d, d);
    const Matrix a = hs_k * Vs.middleRows(k * d, d);
    const Matrix b = he_k * Ve.middleRows(k * d, d);
    for (int i = 0; i < length; ++i) {
      const ConstRowMap ti(t.row(i).data(), d, o);
      auto block = out.block(static_cast<Eigen::Index>(i) * length, k * o, length, o);
      block.noalias() = he_k * ti;
      block += b;
      block.rowwise() += a.row(i);
    }
    bilinear[static_cast<std::size_t>(k)] = std::move(t);
  }
  out.rowwise() += g.value(bias).row(0);

  const ag::Var in[] = {hs, he, u, vs, ve, bias};
  return g.add_op(std::move(out), in,
                  [hs, he, u, vs, ve, bias, heads, length, d, o,
                   bilinear = std::move(bilinear)](ag::Graph& g, ag::Var self) {
    const Matrix& dy = g.grad(self);
    const Matrix& start = g.value(hs);
    const Matrix& end = g.value(he);
    const Matrix& U = g.value(u);
    const Matrix& Vs = g.value(vs);
    const Matrix& Ve = g.value(ve);
    if (g.requires_grad(bias)) g.grad(bias) += dy.colwise().sum();
    for (int k = 0; k < heads; ++k) {
      const Matrix hs_k = start.middleCols(k * d, d);
      const Matrix he_k = end.middleCols(k * d, d);
      const Matrix& t = bilinear[static_cast<std::size_t>(k)];
      Matrix dt(length, d * o);
      Matrix dhe = Matrix::Zero(length, d);
      Matrix da(length, o);
      Matrix db = Matrix::Zero(length, o);
      for (int i = 0; i < length; ++i) {
        const Matrix gi = dy.block(static_cast<Eigen::Index>(i) * length, k * o, length, o);
        const ConstRowMap ti(t.row(i).data(), d, o);
        Eigen::Map<Matrix>(dt.row(i).data(), d, o).noalias() = he_k.transpose() * gi;
        dhe.noalias() += gi * ti.transpose();
        da.row(i) = gi.colwise().sum();
        db += gi;
      }
      Matrix dhs = dt * U.middleRows(k * d, d).transpose();
      dhs.noalias() += da * Vs.middleRows(k * d, d).transpose();
      dhe.noalias() += db * Ve.middleRows(k * d, d).transpose();
      if (g.requires_grad(u)) g.grad(u).middleRows(k * d, d).noalias() += hs_k.transpose() * dt;
      if (g.requires_grad(vs)) g.grad(vs).middleRows(k * d, d).noalias() += hs_k.transpose() * da;
      if (g.requires_grad(ve)) g.grad(ve).middleRows(k * d, d).noalias() += he_k.transpose() * db;
      if (g.requires_grad(hs)) g.grad(hs).middleCols(k * d, d) += dhs;
      if (g.requires_grad(he)) g.grad(he).middleCols(k * d, d) += dhe;
    }
  });
}

Matrix local_mask(int length, int window) {
  if (length < 1 || window < 0) throw std::invalid_argument("local_mask: need L >= 1, w >= 0");
  Matrix m(length, length);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < length; ++i) {
    for (int j = 0; j < length; ++j) m(i, j) = std::abs(i - j) <= window ? 0.0 : neg_inf;
  }
  return m;
}

ag::Var local_attention(ag::Graph& g, ag::Var grid, int length, const Matrix& mask,
                        GridAttentionParams& p, int heads) {
  auto linear = [&](ag::Var in, Parameter& w, Parameter& b) {
    return g.add_row(g.matmul(in, g.param(w)), g.param(b));
  };
  ag::Var q = linear(grid, p.wq, p.bq);
  ag::Var k = linear(grid, p.wk, p.bk);
  ag::Var v = linear(grid, p.wv, p.bv);
  ag::Var attn = g.attention(q, k, v, length, length, heads, mask);
  return linear(attn, p.wo, p.bo);
}

ag::Var score_grid(ag::Graph& g, ag::Var biaffine, ag::Var fused, Parameter& w_out,
                   Parameter& b_out, ScoreForm form) {
  ag::Var mixed = g.add(biaffine, fused);
  if (form == ScoreForm::kGeluFeatures) {
    return g.sigmoid(g.add_row(g.matmul(g.gelu(mixed), g.param(w_out)), g.param(b_out)));
  }
  ag::Var logits = g.add_row(g.matmul(mixed, g.param(w_out)), g.param(b_out));
  return g.sigmoid(g.gelu(logits));
}

Matrix gold_grid(const AnnotatedSample& sample, const LabelVocabulary& vocab) {
  const auto length = static_cast<Eigen::Index>(sample.sequence.size());
  Matrix y = Matrix::Zero(length * length, static_cast<Eigen::Index>(vocab.num_channels()));
  auto mark = [&](const Span& s, std::optional<std::size_t> channel, const char* kind) {
    if (!channel) throw DataError(std::string("label not in model vocabulary (") + kind + "): " + s.label);
    if (s.end >= sample.sequence.size() || s.start > s.end) throw DataError("span out of bounds");
    y(static_cast<Eigen::Index>(s.start) * length + static_cast<Eigen::Index>(s.end),
      static_cast<Eigen::Index>(*channel)) = 1.0;
  };
  for (const auto& s : sample.target_spans) mark(s, vocab.target_channel(s.label), "target");
  for (const auto& s : sample.extension_spans) mark(s, vocab.extension_channel(s.label), "extension");
  return y;
}

std::vector<double> channel_weights(std::size_t num_target, std::span<const double> alpha) {
  std::vector<double> w(num_target, 1.0);
  w.insert(w.end(), alpha.begin(), alpha.end());
  return w;
}

ag::Var knowfree_loss(ag::Graph& g, ag::Var probs, const Matrix& gold,
                      std::size_t num_target, std::span<const double> alpha) {
  const auto weights = channel_weights(num_target, alpha);
  return g.weighted_bce(probs, gold, weights, kProbabilityClamp);
}

double knowfree_loss(const Matrix& probs, const Matrix& gold, std::size_t num_target,
                     std::span<const double> alpha) {
  ag::Graph g(false);
  return g.value(knowfree_loss(g, g.constant(probs), gold, num_target, alpha))(0, 0);
}

double combined_loss(double loss_original, double loss_synthetic, double beta) {
  return loss_original + beta * loss_synthetic;
}

std::vector<double> dynamic_alpha(std::span<const std::size_t> extension_counts,
                                  std::span<const std::size_t> target_counts) {
  double mean_target = 0.0;
  if (!target_counts.empty()) {
    mean_target = static_cast<double>(std::accumulate(target_counts.begin(), target_counts.end(),
                                                      std::size_t{0})) /
                  static_cast<double>(target_counts.size());
  }
  std::vector<double> alpha;
  alpha.reserve(extension_counts.size());
  for (std::size_t c : extension_counts) {
    if (c == 0) {
      alpha.push_back(0.0);
    } else {
      alpha.push_back(std::clamp(0.5 * (mean_target / static_cast<double>(c)), 0.0, 1.0));
    }
  }
  return alpha;
}

SpanSet decode(const Matrix& probs, std::size_t length, const LabelVocabulary& vocab,
               double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0) {
    throw std::invalid_argument("decode: threshold must be in (0, 1)");
  }
  const auto l = static_cast<Eigen::Index>(length);
  if (probs.rows() != l * l || probs.cols() < static_cast<Eigen::Index>(vocab.num_target())) {
    throw std::invalid_argument("decode: grid shape mismatch");
  }
  SpanSet spans;
  for (Eigen::Index i = 0; i < l; ++i) {
    for (Eigen::Index j = i; j < l; ++j) {
      for (std::size_t c = 0; c < vocab.num_target(); ++c) {
        if (probs(i * l + j, static_cast<Eigen::Index>(c)) >= threshold) {
          spans.push_back(Span{static_cast<std::size_t>(i), static_cast<std::size_t>(j),
                               vocab.target_labels()[c]});
        }
      }
    }
  }
  canonicalize(spans);
  return spans;
}

SpanHead::SpanHead(int hidden_dim, const HeadConfig& config, int num_channels,
                   std::mt19937_64& rng)
    : config_(config), num_channels_(num_channels) {
  config_.validate();
  if (num_channels <= 0) throw std::invalid_argument("head: need at least one label channel");
  const int dp = config_.projection_dim;
  const int dt = config_.biaffine_dim;
  const int kb = config_.biaffine_heads;
  const int d = dp / kb;
  const int o = dt / kb;
  auto zeros = [](int r, int c) { return Matrix::Zero(r, c).eval(); };
  w_start_ = Parameter("head.w_start", glorot(hidden_dim, dp, rng));
  w_end_ = Parameter("head.w_end", glorot(hidden_dim, dp, rng));
  biaffine_.u = Parameter("head.biaffine.u", glorot(kb * d, d * o, rng));
  biaffine_.v_start = Parameter("head.biaffine.v_start", glorot(kb * d, o, rng));
  biaffine_.v_end = Parameter("head.biaffine.v_end", glorot(kb * d, o, rng));
  biaffine_.bias = Parameter("head.biaffine.bias", zeros(1, dt));
  const std::string a = "head.attention.";
  attention_.wq = Parameter(a + "wq", glorot(dt, dt, rng));
  attention_.bq = Parameter(a + "bq", zeros(1, dt));
  attention_.wk = Parameter(a + "wk", glorot(dt, dt, rng));
  attention_.bk = Parameter(a + "bk", zeros(1, dt));
  attention_.wv = Parameter(a + "wv", glorot(dt, dt, rng));
  attention_.bv = Parameter(a + "bv", zeros(1, dt));
  attention_.wo = Parameter(a + "wo", glorot(dt, dt, rng));
  attention_.bo = Parameter(a + "bo", zeros(1, dt));
  ln_gain_ = Parameter("head.ln.gain", Matrix::Ones(1, dt));
  ln_bias_ = Parameter("head.ln.bias", zeros(1, dt));
  w_out_ = Parameter("head.w_out", glorot(dt, num_channels, rng));
  b_out_ = Parameter("head.b_out", Matrix::Constant(1, num_channels, config_.output_bias_init));
}

SpanHead::Outputs SpanHead::forward(ag::Graph& g, ag::Var hidden, int length) const {
  Outputs out;
  std::tie(out.start, out.end) =
      project_endpoints(g, hidden, w_start_, w_end_, config_.leaky_slope);
  out.biaffine = biaffine_grid(g, out.start, out.end, biaffine_, config_.biaffine_heads);
  out.attention = local_attention(g, out.biaffine, length, local_mask(length, config_.window),
                                  attention_, config_.attention_heads);
  out.fused = g.layer_norm(g.add(out.biaffine, out.attention), g.param(ln_gain_),
                           g.param(ln_bias_));
  out.probs = score_grid(g, out.biaffine, out.fused, w_out_, b_out_, config_.score_form);
  return out;
}

void SpanHead::collect(std::vector<ParameterRef>& out) {
  const std::string group = "head";
  for (Parameter* p : {&w_start_, &w_end_, &biaffine_.u, &biaffine_.v_start, &biaffine_.v_end,
                       &biaffine_.bias, &attention_.wq, &attention_.bq, &attention_.wk,
                       &attention_.bk, &attention_.wv, &attention_.bv, &attention_.wo,
                       &attention_.bo, &ln_gain_, &ln_bias_, &w_out_, &b_out_}) {
    out.push_back({group, p});
  }
}

SpanModel::SpanModel(EncoderConfig encoder_config, HeadConfig head_config,
                     LabelVocabulary labels, TokenVocab tokens, TokenizerMode mode,
                     std::uint64_t seed)
    : labels_(std::move(labels)), tokens_(std::move(tokens)), mode_(mode) {
  encoder_config.vocab_size = tokens_.size();
  std::mt19937_64 rng(seed);
  encoder_ = Encoder(encoder_config, rng);
  head_ = SpanHead(encoder_config.hidden_dim, head_config,
                   static_cast<int>(labels_.num_channels()), rng);
}

ag::Var SpanModel::forward(ag::Graph& g, std::span<const int> ids, std::mt19937_64* rng) const {
  ag::Var hidden = encoder_.encode(g, ids, rng);
  return head_.forward(g, hidden, static_cast<int>(ids.size())).probs;
}

Matrix SpanModel::predict(const TokenSequence& sequence) const {
  ag::Graph g(false);
  const auto ids = tokens_.encode(sequence);
  return g.value(forward(g, ids, nullptr));
}

SpanSet SpanModel::annotate(const TokenSequence& sequence, double threshold) const {
  return decode(predict(sequence), sequence.size(), labels_, threshold);
}

std::vector<ParameterRef> SpanModel::parameters() {
  std::vector<ParameterRef> out;
  encoder_.collect(out);
  head_.collect(out);
  return out;
}

}  // namespace knowfree
