#pragma once

#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knowfree/autograd.hpp"
#include "knowfree/corpus.hpp"

namespace knowfree {

struct EncoderConfig {
  int vocab_size = 0;
  int hidden_dim = 64;
  int layers = 2;
  int attention_heads = 4;
  int feed_forward_dim = 128;
  int max_length = 128;
  double dropout = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// Token-to-id mapping with reserved ids for padding and unknown tokens.
class TokenVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;
  static constexpr int kReserved = 2;

  TokenVocab() = default;
  explicit TokenVocab(std::vector<std::string> tokens);

  // Ids follow first occurrence in corpus order.
  static TokenVocab build(const std::vector<AnnotatedSample>& corpus);

  int size() const { return static_cast<int>(tokens_.size()) + kReserved; }
  int id(const std::string& token) const;
  std::vector<int> encode(const TokenSequence& sequence) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

struct ParameterRef {
  std::string group;
  Parameter* parameter;
};

// Transformer encoder: token + position embeddings, post-norm self-attention
// blocks with GeLU feed-forward layers.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, std::mt19937_64& rng);

  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;
  Encoder(Encoder&&) = default;
  Encoder& operator=(Encoder&&) = default;

  const EncoderConfig& config() const { return config_; }

  // L x D hidden states. `rng` enables dropout; pass nullptr for eval mode.
  ag::Var encode(ag::Graph& g, std::span<const int> ids, std::mt19937_64* rng) const;
  Matrix encode(std::span<const int> ids) const;

  void collect(std::vector<ParameterRef>& out);

 private:
  struct Layer {
    Parameter wq, bq, wk, bk, wv, bv, wo, bo;
    Parameter ln1_gain, ln1_bias;
    Parameter w1, b1, w2, b2;
    Parameter ln2_gain, ln2_bias;
  };

  EncoderConfig config_;
  // Parameters are mutated through the graph's gradient buffers only; the
  // tape keeps raw pointers into these members.
  mutable Parameter token_embedding_;
  mutable Parameter position_embedding_;
  mutable Parameter embed_ln_gain_, embed_ln_bias_;
  mutable std::vector<Layer> layers_;
};

// Glorot-uniform weights of the given shape.
Matrix glorot(int rows, int cols, std::mt19937_64& rng);

}  // namespace knowfree
