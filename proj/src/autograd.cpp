#include "knowfree/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace knowfree::ag {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

Var Graph::push(Matrix value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = grad_enabled_ && requires_grad;
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

bool Graph::any_requires_grad(std::span<const Var> inputs) const {
  for (Var v : inputs) {
    if (nodes_[v.id].requires_grad) return true;
  }
  return false;
}

Var Graph::constant(Matrix value) { return push(std::move(value), false); }

Var Graph::param(Parameter& p) {
  Var v = push(p.value, true);
  nodes_[v.id].param = &p;
  return v;
}

Matrix& Graph::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.size() == 0 && n.value.size() != 0) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

Var Graph::add_op(Matrix value, std::span<const Var> inputs,
                  std::function<void(Graph&, Var)> backward) {
  const bool needs = any_requires_grad(inputs);
  Var v = push(std::move(value), needs);
  if (nodes_[v.id].requires_grad) nodes_[v.id].backward = std::move(backward);
  return v;
}

void Graph::backward(Var out) {
  if (value(out).size() != 1) {
    throw std::invalid_argument("backward: output must be a scalar");
  }
  if (!nodes_[out.id].requires_grad) return;
  grad(out)(0, 0) += 1.0;
  for (int id = out.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, Var{id});
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

Var Graph::matmul(Var a, Var b) {
  if (value(a).cols() != value(b).rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch");
  }
  Matrix out = value(a) * value(b);
  const Var in[] = {a, b};
  return add_op(std::move(out), in, [a, b](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    if (g.requires_grad(a)) g.grad(a).noalias() += dy * g.value(b).transpose();
    if (g.requires_grad(b)) g.grad(b).noalias() += g.value(a).transpose() * dy;
  });
}

Var Graph::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Matrix out = value(a) + value(b);
  const Var in[] = {a, b};
  return add_op(std::move(out), in, [a, b](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    if (g.requires_grad(a)) g.grad(a) += dy;
    if (g.requires_grad(b)) g.grad(b) += dy;
  });
}

Var Graph::add_row(Var a, Var row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
    throw std::invalid_argument("add_row: bias shape mismatch");
  }
  Matrix out = value(a);
  out.rowwise() += value(row).row(0);
  const Var in[] = {a, row};
  return add_op(std::move(out), in, [a, row](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    if (g.requires_grad(a)) g.grad(a) += dy;
    if (g.requires_grad(row)) g.grad(row) += dy.colwise().sum();
  });
}

Var Graph::scale(Var a, double s) {
  Matrix out = value(a) * s;
  const Var in[] = {a};
  return add_op(std::move(out), in, [a, s](Graph& g, Var self) {
    g.grad(a) += g.grad(self) * s;
  });
}

Var Graph::leaky_relu(Var a, double slope) {
  Matrix out = value(a).unaryExpr([slope](double x) { return x > 0 ? x : slope * x; });
  const Var in[] = {a};
  return add_op(std::move(out), in, [a, slope](Graph& g, Var self) {
    const Matrix& x = g.value(a);
    g.grad(a).array() +=
        g.grad(self).array() * x.unaryExpr([slope](double v) { return v > 0 ? 1.0 : slope; }).array();
  });
}

Var Graph::gelu(Var a) {
  Matrix out = value(a).unaryExpr([](double x) { return ag::gelu(x); });
  const Var in[] = {a};
  return add_op(std::move(out), in, [a](Graph& g, Var self) {
    g.grad(a).array() +=
        g.grad(self).array() * g.value(a).unaryExpr([](double x) { return gelu_grad(x); }).array();
  });
}

Var Graph::sigmoid(Var a) {
  Matrix out = value(a).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  const Var in[] = {a};
  return add_op(std::move(out), in, [a](Graph& g, Var self) {
    const Matrix& y = g.value(self);
    g.grad(a).array() += g.grad(self).array() * y.array() * (1.0 - y.array());
  });
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& in = value(x);
  const auto n = in.cols();
  if (value(gain).cols() != n || value(bias).cols() != n) {
    throw std::invalid_argument("layer_norm: parameter shape mismatch");
  }
  Matrix normed(in.rows(), n);
  Eigen::VectorXd inv_std(in.rows());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const double mean = in.row(r).mean();
    const double var = (in.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normed.row(r) = (in.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = normed.array().rowwise() * value(gain).row(0).array();
  out.rowwise() += value(bias).row(0);
  const Var inputs[] = {x, gain, bias};
  return add_op(std::move(out), inputs,
                [x, gain, bias, normed, inv_std](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    if (g.requires_grad(gain)) {
      g.grad(gain) += (dy.array() * normed.array()).colwise().sum().matrix();
    }
    if (g.requires_grad(bias)) g.grad(bias) += dy.colwise().sum();
    if (g.requires_grad(x)) {
      const Matrix dn = dy.array().rowwise() * g.value(gain).row(0).array();
      const double n = static_cast<double>(dn.cols());
      Matrix& dx = g.grad(x);
      for (Eigen::Index r = 0; r < dn.rows(); ++r) {
        const double mean_dn = dn.row(r).sum() / n;
        const double mean_dn_x = dn.row(r).dot(normed.row(r)) / n;
        dx.row(r).array() += inv_std(r) * (dn.row(r).array() - mean_dn -
                                           normed.row(r).array() * mean_dn_x);
      }
    }
  });
}

Var Graph::gather_rows(Var table, std::span<const int> ids) {
  const Matrix& t = value(table);
  Matrix out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) {
      throw std::out_of_range("gather_rows: id out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  const Var in[] = {table};
  return add_op(std::move(out), in, [table, idx](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    Matrix& dt = g.grad(table);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      dt.row(idx[i]) += dy.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var Graph::rows(Var a, int first, int count) {
  Matrix out = value(a).middleRows(first, count);
  const Var in[] = {a};
  return add_op(std::move(out), in, [a, first, count](Graph& g, Var self) {
    g.grad(a).middleRows(first, count) += g.grad(self);
  });
}

Var Graph::dropout(Var a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double keep = 1.0 - rate;
  Matrix mask(value(a).rows(), value(a).cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = uniform(rng) < keep ? 1.0 / keep : 0.0;
  }
  Matrix out = value(a).cwiseProduct(mask);
  const Var in[] = {a};
  return add_op(std::move(out), in, [a, mask](Graph& g, Var self) {
    g.grad(a) += g.grad(self).cwiseProduct(mask);
  });
}

Var Graph::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  const Var in[] = {a};
  return add_op(std::move(out), in, [a](Graph& g, Var self) {
    g.grad(a).array() += g.grad(self)(0, 0);
  });
}

Var Graph::attention(Var q, Var k, Var v, int batches, int seq_len, int heads,
                     const Matrix& mask) {
  const Matrix& Q = value(q);
  const Matrix& K = value(k);
  const Matrix& V = value(v);
  require_same_shape(Q, K, "attention");
  require_same_shape(Q, V, "attention");
  if (Q.rows() != static_cast<Eigen::Index>(batches) * seq_len || Q.cols() % heads != 0) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  const bool masked = mask.size() != 0;
  if (masked && (mask.rows() != seq_len || mask.cols() != seq_len)) {
    throw std::invalid_argument("attention: mask shape mismatch");
  }
  const int dk = static_cast<int>(Q.cols()) / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix out(Q.rows(), Q.cols());
  // Softmax weights per (batch, head), stacked: block (b*heads + h).
  std::vector<Matrix> weights(static_cast<std::size_t>(batches) * heads);
  for (int b = 0; b < batches; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = Q.block(b * seq_len, h * dk, seq_len, dk);
      const auto kb = K.block(b * seq_len, h * dk, seq_len, dk);
      const auto vb = V.block(b * seq_len, h * dk, seq_len, dk);
      Matrix s = (qb * kb.transpose()) * inv_sqrt;
      if (masked) s += mask;
      for (int r = 0; r < seq_len; ++r) {
        const double mx = s.row(r).maxCoeff();
        // std::exp, not Eigen's vectorized exp: masked entries must be exactly 0.
        s.row(r) = (s.row(r).array() - mx).unaryExpr([](double x) { return std::exp(x); });
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * seq_len, h * dk, seq_len, dk).noalias() = s * vb;
      weights[static_cast<std::size_t>(b) * heads + h] = std::move(s);
    }
  }
  const Var in[] = {q, k, v};
  return add_op(std::move(out), in,
                [q, k, v, batches, seq_len, heads, dk, inv_sqrt,
                 weights = std::move(weights)](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    const bool gq = g.requires_grad(q), gk = g.requires_grad(k), gv = g.requires_grad(v);
    for (int b = 0; b < batches; ++b) {
      for (int h = 0; h < heads; ++h) {
        const Matrix& a = weights[static_cast<std::size_t>(b) * heads + h];
        const Matrix dout = dy.block(b * seq_len, h * dk, seq_len, dk);
        const Matrix vb = g.value(v).block(b * seq_len, h * dk, seq_len, dk);
        if (gv) g.grad(v).block(b * seq_len, h * dk, seq_len, dk).noalias() += a.transpose() * dout;
        Matrix da = dout * vb.transpose();
        Matrix ds(seq_len, seq_len);
        for (int r = 0; r < seq_len; ++r) {
          const double dot = da.row(r).dot(a.row(r));
          ds.row(r) = a.row(r).array() * (da.row(r).array() - dot);
        }
        ds *= inv_sqrt;
        if (gq) {
          const Matrix kb = g.value(k).block(b * seq_len, h * dk, seq_len, dk);
          g.grad(q).block(b * seq_len, h * dk, seq_len, dk).noalias() += ds * kb;
        }
        if (gk) {
          const Matrix qb = g.value(q).block(b * seq_len, h * dk, seq_len, dk);
          g.grad(k).block(b * seq_len, h * dk, seq_len, dk).noalias() += ds.transpose() * qb;
        }
      }
    }
  });
}

Var Graph::weighted_bce(Var probs, const Matrix& targets,
                        std::span<const double> channel_weights, double clamp) {
  const Matrix& p = value(probs);
  require_same_shape(p, targets, "weighted_bce");
  if (static_cast<Eigen::Index>(channel_weights.size()) != p.cols()) {
    throw std::invalid_argument("weighted_bce: one weight per channel required");
  }
  std::vector<double> w(channel_weights.begin(), channel_weights.end());
  double total = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double wc = w[static_cast<std::size_t>(c)];
      if (wc == 0.0) continue;
      const double pc = std::clamp(p(r, c), clamp, 1.0 - clamp);
      const double y = targets(r, c);
      total -= wc * (y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
    }
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  const Var in[] = {probs};
  return add_op(std::move(out), in, [probs, targets, w, clamp](Graph& g, Var self) {
    const double upstream = g.grad(self)(0, 0);
    const Matrix& p = g.value(probs);
    Matrix& dp = g.grad(probs);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const double wc = w[static_cast<std::size_t>(c)];
        const double pc = p(r, c);
        if (wc == 0.0 || pc < clamp || pc > 1.0 - clamp) continue;
        const double y = targets(r, c);
        dp(r, c) -= upstream * wc * (y / pc - (1.0 - y) / (1.0 - pc));
      }
    }
  });
}

}  // namespace knowfree::ag
