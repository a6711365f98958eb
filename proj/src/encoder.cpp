#include "knowfree/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace knowfree {

Matrix glorot(int rows, int cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng);
  return m;
}

void EncoderConfig::validate() const {
  if (vocab_size <= TokenVocab::kReserved - 1) {
    throw std::invalid_argument("encoder: vocab_size must exceed the reserved ids");
  }
  if (hidden_dim <= 0 || layers < 0 || attention_heads <= 0 || feed_forward_dim <= 0 ||
      max_length <= 0) {
    throw std::invalid_argument("encoder: dimensions must be positive");
  }
  if (hidden_dim % attention_heads != 0) {
    throw std::invalid_argument("encoder: hidden_dim must be divisible by attention_heads");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("encoder: dropout must be in [0, 1)");
  }
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"vocab_size", vocab_size},       {"hidden_dim", hidden_dim},
          {"layers", layers},               {"attention_heads", attention_heads},
          {"feed_forward_dim", feed_forward_dim}, {"max_length", max_length},
          {"dropout", dropout}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.layers = j.value("layers", c.layers);
  c.attention_heads = j.value("attention_heads", c.attention_heads);
  c.feed_forward_dim = j.value("feed_forward_dim", c.feed_forward_dim);
  c.max_length = j.value("max_length", c.max_length);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

TokenVocab::TokenVocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i) + kReserved).second) {
      throw std::invalid_argument("duplicate token in vocabulary: " + tokens_[i]);
    }
  }
}

TokenVocab TokenVocab::build(const std::vector<AnnotatedSample>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("cannot build a vocabulary from an empty corpus");
  std::vector<std::string> tokens;
  std::map<std::string, int, std::less<>> seen;
  for (const auto& sample : corpus) {
    for (const auto& t : sample.sequence.tokens()) {
      if (seen.emplace(t, 0).second) tokens.push_back(t);
    }
  }
  return TokenVocab(std::move(tokens));
}

int TokenVocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnknown : it->second;
}

std::vector<int> TokenVocab::encode(const TokenSequence& sequence) const {
  std::vector<int> ids;
  ids.reserve(sequence.size());
  for (const auto& t : sequence.tokens()) ids.push_back(id(t));
  return ids;
}

Encoder::Encoder(const EncoderConfig& config, std::mt19937_64& rng) : config_(config) {
  config_.validate();
  const int d = config_.hidden_dim;
  const int f = config_.feed_forward_dim;
  auto zeros = [](int r, int c) { return Matrix::Zero(r, c).eval(); };
  auto ones = [](int c) { return Matrix::Ones(1, c).eval(); };
  std::normal_distribution<double> normal(0.0, 0.1);
  auto embedding = [&](int rows) {
    Matrix m(rows, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };
  token_embedding_ = Parameter("encoder.token_embedding", embedding(config_.vocab_size));
  token_embedding_.value.row(TokenVocab::kPad).setZero();
  position_embedding_ = Parameter("encoder.position_embedding", embedding(config_.max_length));
  embed_ln_gain_ = Parameter("encoder.embed_ln.gain", ones(d));
  embed_ln_bias_ = Parameter("encoder.embed_ln.bias", zeros(1, d));
  layers_.resize(static_cast<std::size_t>(config_.layers));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    Layer& layer = layers_[l];
    layer.wq = Parameter(p + "attn.wq", glorot(d, d, rng));
    layer.bq = Parameter(p + "attn.bq", zeros(1, d));
    layer.wk = Parameter(p + "attn.wk", glorot(d, d, rng));
    layer.bk = Parameter(p + "attn.bk", zeros(1, d));
    layer.wv = Parameter(p + "attn.wv", glorot(d, d, rng));
    layer.bv = Parameter(p + "attn.bv", zeros(1, d));
    layer.wo = Parameter(p + "attn.wo", glorot(d, d, rng));
    layer.bo = Parameter(p + "attn.bo", zeros(1, d));
    layer.ln1_gain = Parameter(p + "ln1.gain", ones(d));
    layer.ln1_bias = Parameter(p + "ln1.bias", zeros(1, d));
    layer.w1 = Parameter(p + "ffn.w1", glorot(d, f, rng));
    layer.b1 = Parameter(p + "ffn.b1", zeros(1, f));
    layer.w2 = Parameter(p + "ffn.w2", glorot(f, d, rng));
    layer.b2 = Parameter(p + "ffn.b2", zeros(1, d));
    layer.ln2_gain = Parameter(p + "ln2.gain", ones(d));
    layer.ln2_bias = Parameter(p + "ln2.bias", zeros(1, d));
  }
}

ag::Var Encoder::encode(ag::Graph& g, std::span<const int> ids, std::mt19937_64* rng) const {
  const int length = static_cast<int>(ids.size());
  if (length == 0) throw std::invalid_argument("encode: empty sequence");
  if (length > config_.max_length) {
    throw std::length_error("sequence length " + std::to_string(length) +
                            " exceeds max_length " + std::to_string(config_.max_length));
  }
  const double rate = rng != nullptr ? config_.dropout : 0.0;
  std::vector<int> positions(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) positions[static_cast<std::size_t>(i)] = i;

  ag::Var x = g.add(g.gather_rows(g.param(token_embedding_), ids),
                    g.gather_rows(g.param(position_embedding_), positions));
  x = g.layer_norm(x, g.param(embed_ln_gain_), g.param(embed_ln_bias_));
  if (rate > 0) x = g.dropout(x, rate, *rng);

  const Matrix no_mask;
  for (Layer& layer : layers_) {
    auto linear = [&](ag::Var in, Parameter& w, Parameter& b) {
      return g.add_row(g.matmul(in, g.param(w)), g.param(b));
    };
    ag::Var q = linear(x, layer.wq, layer.bq);
    ag::Var k = linear(x, layer.wk, layer.bk);
    ag::Var v = linear(x, layer.wv, layer.bv);
    ag::Var attn = g.attention(q, k, v, 1, length, config_.attention_heads, no_mask);
    attn = linear(attn, layer.wo, layer.bo);
    if (rate > 0) attn = g.dropout(attn, rate, *rng);
    x = g.layer_norm(g.add(x, attn), g.param(layer.ln1_gain), g.param(layer.ln1_bias));

    ag::Var ff = g.gelu(linear(x, layer.w1, layer.b1));
    ff = linear(ff, layer.w2, layer.b2);
    if (rate > 0) ff = g.dropout(ff, rate, *rng);
    x = g.layer_norm(g.add(x, ff), g.param(layer.ln2_gain), g.param(layer.ln2_bias));
  }
  return x;
}

Matrix Encoder::encode(std::span<const int> ids) const {
  ag::Graph g(false);
  return g.value(encode(g, ids, nullptr));
}

void Encoder::collect(std::vector<ParameterRef>& out) {
  const std::string group = "encoder";
  out.push_back({group, &token_embedding_});
  out.push_back({group, &position_embedding_});
  out.push_back({group, &embed_ln_gain_});
  out.push_back({group, &embed_ln_bias_});
  for (Layer& l : layers_) {
    for (Parameter* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                         &l.ln1_gain, &l.ln1_bias, &l.w1, &l.b1, &l.w2, &l.b2,
                         &l.ln2_gain, &l.ln2_bias}) {
      out.push_back({group, p});
    }
  }
}

}  // namespace knowfree
