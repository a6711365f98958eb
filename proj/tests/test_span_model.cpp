#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "knowfree/span_model.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace knowfree;

namespace {

Matrix random_matrix(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

BiaffineParams random_biaffine(int heads, int d, int o, std::mt19937_64& rng) {
  BiaffineParams p;
  p.u = Parameter("u", random_matrix(heads * d, d * o, rng));
  p.v_start = Parameter("vs", random_matrix(heads * d, o, rng));
  p.v_end = Parameter("ve", random_matrix(heads * d, o, rng));
  p.bias = Parameter("b", random_matrix(1, heads * o, rng));
  return p;
}

GridAttentionParams random_attention(int dim, std::mt19937_64& rng) {
  GridAttentionParams p;
  for (auto* w : {&p.wq, &p.wk, &p.wv, &p.wo}) *w = Parameter("w", random_matrix(dim, dim, rng, 0.5));
  for (auto* b : {&p.bq, &p.bk, &p.bv, &p.bo}) *b = Parameter("b", random_matrix(1, dim, rng, 0.1));
  return p;
}

}  // namespace

TEST_CASE("project_endpoints: zero input gives zero output and the expected shapes") {
  std::mt19937_64 rng(1);
  Parameter ws("ws", random_matrix(8, 4, rng)), we("we", random_matrix(8, 4, rng));
  ag::Graph g;
  auto [hs, he] = project_endpoints(g, g.constant(Matrix::Zero(3, 8)), ws, we, 0.01);
  CHECK(g.value(hs).rows() == 3);
  CHECK(g.value(hs).cols() == 4);
  CHECK(g.value(hs).isZero(0.0));
  CHECK(g.value(he).isZero(0.0));
}

TEST_CASE("project_endpoints: gradient of sum(H_s) w.r.t. W_s matches central differences") {
  std::mt19937_64 rng(2);
  Parameter ws("ws", random_matrix(8, 4, rng)), we("we", random_matrix(8, 4, rng));
  const Matrix h = random_matrix(3, 8, rng);
  auto loss = [&](bool backward) {
    ag::Graph g;
    auto [hs, he] = project_endpoints(g, g.constant(h), ws, we, 0.01);
    ag::Var s = g.sum(hs);
    if (backward) g.backward(s);
    return g.value(s)(0, 0);
  };
  for (const auto& r : testing::check_gradients({&ws}, loss)) CHECK(r.relative_error <= 1e-4);
}

TEST_CASE("biaffine_grid: zero endpoints give the broadcast bias") {
  std::mt19937_64 rng(3);
  auto p = random_biaffine(2, 4, 4, rng);
  ag::Graph g;
  ag::Var grid = biaffine_grid(g, g.constant(Matrix::Zero(3, 8)), g.constant(Matrix::Zero(3, 8)), p, 2);
  REQUIRE(g.value(grid).rows() == 9);
  for (int r = 0; r < 9; ++r) CHECK(g.value(grid).row(r).isApprox(p.bias.value.row(0), 0.0));
}

TEST_CASE("biaffine_grid: cell (0,1) depends only on h_s[0] and h_e[1]") {
  std::mt19937_64 rng(4);
  auto p = random_biaffine(2, 2, 3, rng);
  Matrix hs = random_matrix(2, 4, rng), he = random_matrix(2, 4, rng);
  auto cell01 = [&](const Matrix& s, const Matrix& e) {
    ag::Graph g;
    return Matrix(g.value(biaffine_grid(g, g.constant(s), g.constant(e), p, 2)).row(1));
  };
  const Matrix base = cell01(hs, he);
  Matrix hs2 = hs, he2 = he;
  hs2.row(1).setRandom();
  he2.row(0).setRandom();
  CHECK(cell01(hs2, he2) == base);
  hs2.row(0).array() += 1.0;
  CHECK(cell01(hs2, he2) != base);
}

TEST_CASE("biaffine_grid: equals a per-cell loop oracle") {
  std::mt19937_64 rng(5);
  const int length = 5, heads = 2, dp = 8, dt = 8;
  auto p = random_biaffine(heads, dp / heads, dt / heads, rng);
  const Matrix hs = random_matrix(length, dp, rng), he = random_matrix(length, dp, rng);
  ag::Graph g;
  const Matrix fast = g.value(biaffine_grid(g, g.constant(hs), g.constant(he), p, heads));
  const Matrix slow = testing::biaffine_loop(hs, he, p.u.value, p.v_start.value, p.v_end.value,
                                             p.bias.value, heads);
  CHECK((fast - slow).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("biaffine_grid: analytic gradients match central differences") {
  std::mt19937_64 rng(6);
  auto p = random_biaffine(2, 3, 2, rng);
  Parameter hs("hs", random_matrix(4, 6, rng)), he("he", random_matrix(4, 6, rng));
  const Matrix weights = random_matrix(16, 4, rng);
  auto loss = [&](bool backward) {
    ag::Graph g;
    ag::Var grid = biaffine_grid(g, g.param(hs), g.param(he), p, 2);
    ag::Var s = g.sum(g.add_op(g.value(grid).cwiseProduct(weights), std::span<const ag::Var>(&grid, 1),
                               [grid, weights](ag::Graph& gg, ag::Var self) {
                                 gg.grad(grid) += gg.grad(self).cwiseProduct(weights);
                               }));
    if (backward) g.backward(s);
    return g.value(s)(0, 0);
  };
  for (const auto& r : testing::check_gradients({&hs, &he, &p.u, &p.v_start, &p.v_end, &p.bias}, loss)) {
    INFO(r.name);
    CHECK(r.relative_error <= 1e-6);
  }
}

TEST_CASE("local_mask: window semantics") {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  const Matrix m = local_mask(6, 3);
  CHECK(m(2, 4) == 0.0);
  CHECK(m(0, 5) == neg_inf);
  CHECK(local_mask(5, 4).isZero(0.0));
  CHECK(local_mask(5, 10).isZero(0.0));
  for (int length = 1; length <= 7; ++length) {
    for (int w = 0; w <= 7; ++w) {
      const Matrix mk = local_mask(length, w);
      CHECK(mk == mk.transpose());
      CHECK(mk.diagonal().isZero(0.0));
    }
  }
  CHECK_THROWS(local_mask(0, 1));
  CHECK_THROWS(local_mask(3, -1));
}

TEST_CASE("local_attention: full window equals the unmasked computation") {
  std::mt19937_64 rng(7);
  const int length = 5, dim = 8;
  auto p = random_attention(dim, rng);
  const Matrix grid = random_matrix(length * length, dim, rng);
  ag::Graph g;
  const Matrix masked = g.value(local_attention(g, g.constant(grid), length, local_mask(length, length - 1), p, 2));
  const Matrix plain = testing::row_attention_loop(grid, length, p.wq.value, p.bq.value, p.wk.value,
                                                   p.bk.value, p.wv.value, p.bv.value, p.wo.value,
                                                   p.bo.value, 2, -1);
  CHECK((masked - plain).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("local_attention: cells outside the window have no influence") {
  std::mt19937_64 rng(8);
  const int length = 8, dim = 8, w = 2;
  auto p = random_attention(dim, rng);
  Matrix grid = random_matrix(length * length, dim, rng);
  const Matrix mask = local_mask(length, w);
  auto run = [&](const Matrix& in) {
    ag::Graph g;
    return Matrix(g.value(local_attention(g, g.constant(in), length, mask, p, 2)));
  };
  const Matrix base = run(grid);
  const int i = 3, jp = 7;
  grid.row(i * length + jp).array() += 5.0;
  const Matrix moved = run(grid);
  for (int j = 0; j < length; ++j) {
    const bool far = std::abs(j - jp) > w;
    if (far) {
      CHECK(moved.row(i * length + j) == base.row(i * length + j));
    }
  }
  CHECK(moved.row(i * length + jp) != base.row(i * length + jp));
  // other rows untouched entirely
  CHECK(moved.row(0) == base.row(0));
}

TEST_CASE("local_attention: masked softmax rows sum to one over the window") {
  // With V = I the attention output is the weight matrix itself.
  std::mt19937_64 rng(9);
  const int length = 7, w = 2;
  const Matrix q = random_matrix(length, length, rng), k = random_matrix(length, length, rng);
  const Matrix mask = local_mask(length, w);
  ag::Graph g;
  const Matrix weights = g.value(g.attention(g.constant(q), g.constant(k),
                                             g.constant(Matrix::Identity(length, length)), 1,
                                             length, 1, mask));
  for (int r = 0; r < length; ++r) {
    double inside = 0.0;
    for (int c = 0; c < length; ++c) {
      if (std::abs(r - c) <= w) {
        inside += weights(r, c);
      } else {
        CHECK(weights(r, c) == 0.0);
      }
    }
    CHECK(inside == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK((weights - testing::masked_softmax_weights(q, k, mask)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("score_grid: zero inputs and parameters give 0.5") {
  for (ScoreForm form : {ScoreForm::kGeluFeatures, ScoreForm::kGeluLogits}) {
    Parameter w("w", Matrix::Zero(4, 3)), b("b", Matrix::Zero(1, 3));
    ag::Graph g;
    ag::Var zero = g.constant(Matrix::Zero(9, 4));
    const Matrix p = g.value(score_grid(g, zero, zero, w, b, form));
    CHECK(p.isConstant(0.5, 0.0));
  }
}

TEST_CASE("score_grid: both forms match a per-cell loop") {
  std::mt19937_64 rng(12);
  Parameter w("w_out", random_matrix(4, 3, rng)), b("b_out", random_matrix(1, 3, rng));
  const Matrix hb = random_matrix(9, 4, rng, 2.0), hg = random_matrix(9, 4, rng, 2.0);
  const auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const auto gelu = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };
  ag::Graph g;
  const Matrix features = g.value(score_grid(g, g.constant(hb), g.constant(hg), w, b, ScoreForm::kGeluFeatures));
  const Matrix logits = g.value(score_grid(g, g.constant(hb), g.constant(hg), w, b, ScoreForm::kGeluLogits));
  for (int r = 0; r < 9; ++r) {
    for (int c = 0; c < 3; ++c) {
      double zf = b.value(0, c), zl = b.value(0, c);
      for (int k = 0; k < 4; ++k) {
        zf += gelu(hb(r, k) + hg(r, k)) * w.value(k, c);
        zl += (hb(r, k) + hg(r, k)) * w.value(k, c);
      }
      CHECK(std::abs(features(r, c) - sig(zf)) <= 1e-12);
      CHECK(std::abs(logits(r, c) - sig(gelu(zl))) <= 1e-12);
    }
  }
}

TEST_CASE("score_grid: probabilities in (0,1) and gradient of mean(P) w.r.t. W_O") {
  for (ScoreForm form : {ScoreForm::kGeluFeatures, ScoreForm::kGeluLogits}) {
    CAPTURE(to_string(form));
    std::mt19937_64 rng(10);
    Parameter w("w_out", random_matrix(4, 3, rng)), b("b_out", random_matrix(1, 3, rng));
    const Matrix hb = random_matrix(9, 4, rng, 2.0), hg = random_matrix(9, 4, rng, 2.0);
    {
      ag::Graph g;
      const Matrix p = g.value(score_grid(g, g.constant(hb), g.constant(hg), w, b, form));
      CHECK(p.minCoeff() > 0.0);
      CHECK(p.maxCoeff() < 1.0);
    }
    auto loss = [&](bool backward) {
      ag::Graph g;
      ag::Var m = g.scale(g.sum(score_grid(g, g.constant(hb), g.constant(hg), w, b, form)), 1.0 / 27.0);
      if (backward) g.backward(m);
      return g.value(m)(0, 0);
    };
    for (const auto& r : testing::check_gradients({&w, &b}, loss)) CHECK(r.relative_error <= 1e-4);
  }
}

TEST_CASE("knowfree_loss: algebra against the per-cell loop oracle") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(0.01, 0.99);
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix p(9, 4), y(9, 4);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      p.data()[i] = unit(rng);
      y.data()[i] = coin(rng) ? 1.0 : 0.0;
    }
    const std::vector<double> alpha = {unit(rng), unit(rng)};
    const double fast = knowfree_loss(p, y, 2, alpha);
    const double slow = testing::bce_loop(p, y, 2, alpha);
    CHECK(std::abs(fast - slow) <= 1e-10);

    const std::vector<double> zero = {0.0, 0.0};
    CHECK(std::abs(knowfree_loss(p, y, 2, zero) - testing::bce_loop(p.leftCols(2), y.leftCols(2), 2, {})) <= 1e-12);
  }
}

TEST_CASE("knowfree_loss: P equal to y is near zero at the clamp") {
  Matrix y = Matrix::Zero(9, 3);
  y(1, 0) = 1.0;
  y(4, 2) = 1.0;
  const double loss = knowfree_loss(y, y, 2, std::vector<double>{0.7});
  CHECK(loss >= 0.0);
  CHECK(loss <= 9 * 3 * 1.3e-6);
}

TEST_CASE("combined_loss") {
  CHECK(combined_loss(3.5, 10.0, 0.0) == 3.5);
  CHECK(combined_loss(2.0, 1.0, 0.4) == doctest::Approx(2.4).epsilon(1e-15));
  CHECK(combined_loss(1.0, 1.0, 1.0) == 2.0);
}

TEST_CASE("dynamic_alpha: formula and clamp") {
  const std::vector<std::size_t> target = {50, 150};  // mean 100
  const std::vector<std::size_t> ext = {100, 400, 10, 0};
  const auto alpha = dynamic_alpha(ext, target);
  CHECK(alpha[0] == 0.5);
  CHECK(alpha[1] == 0.125);
  CHECK(alpha[2] == 1.0);
  CHECK(alpha[3] == 0.0);
}

TEST_CASE("decode: threshold, target channels only") {
  LabelVocabulary vocab({"PER", "LOC"}, {"ext:A"});
  const int length = 4;
  Matrix p = Matrix::Constant(length * length, 3, 0.1);
  CHECK(decode(p, length, vocab).empty());
  p(1 * length + 3, 0) = 0.9;
  p(2 * length + 2, 2) = 0.99;  // extension channel, ignored
  p(3 * length + 1, 1) = 0.99;  // lower triangle, ignored
  const SpanSet spans = decode(p, length, vocab);
  REQUIRE(spans.size() == 1);
  CHECK(spans[0] == Span{1, 3, "PER"});
  CHECK_THROWS(decode(p, length, vocab, 1.0));
}

TEST_CASE("decode: invariant under randomized extension channels") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  LabelVocabulary vocab({"A", "B"}, {"x", "y", "z"});
  const int length = 6;
  Matrix p(length * length, 5);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = unit(rng);
  const SpanSet base = decode(p, length, vocab);
  for (int trial = 0; trial < 100; ++trial) {
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (int c = 2; c < 5; ++c) p(r, c) = unit(rng);
    }
    CHECK(decode(p, length, vocab) == base);
  }
}

TEST_CASE("SpanModel: end-to-end gradient check on a tiny configuration") {
  for (ScoreForm form : {ScoreForm::kGeluFeatures, ScoreForm::kGeluLogits}) {
    CAPTURE(to_string(form));
    EncoderConfig ec;
    ec.hidden_dim = 16;
    ec.layers = 1;
    ec.attention_heads = 2;
    ec.feed_forward_dim = 16;
    ec.max_length = 8;
    ec.dropout = 0.0;
    HeadConfig hc;
    hc.projection_dim = 8;
    hc.biaffine_dim = 8;
    hc.biaffine_heads = 2;
    hc.attention_heads = 2;
    hc.window = 3;
    hc.score_form = form;
    LabelVocabulary labels({"A", "B"}, {"x", "y"});
    TokenVocab tokens({"t0", "t1", "t2", "t3", "t4", "t5"});
    SpanModel model(ec, hc, labels, tokens, TokenizerMode::kWhitespace, 99);
    AnnotatedSample gold{TokenSequence::tokenize("t0 t1 t2 t3 t4 t5", TokenizerMode::kWhitespace),
                         {{0, 1, "A"}, {2, 4, "B"}, {3, 3, "A"}},
                         {{0, 0, "x"}, {1, 5, "y"}},
                         Provenance::kFusion};
    const Matrix y = gold_grid(gold, labels);
    const auto ids = tokens.encode(gold.sequence);
    const std::vector<double> alpha = {0.4, 0.9};
    auto loss = [&](bool backward) {
      ag::Graph g;
      ag::Var l = knowfree_loss(g, model.forward(g, ids, nullptr), y, 2, alpha);
      if (backward) g.backward(l);
      return g.value(l)(0, 0);
    };
    std::vector<Parameter*> params;
    for (auto& ref : model.parameters()) params.push_back(ref.parameter);
    for (const auto& r : testing::check_gradients(params, loss)) {
      INFO(r.name, " analytic=", r.analytic_norm, " numeric=", r.numeric_norm);
      CHECK(r.relative_error <= 1e-4);
    }
  }
}
