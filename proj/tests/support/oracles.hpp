#pragma once

// Plain-loop reference computations, written independently of the library's
// vectorized code paths.

#include <cmath>
#include <cstdlib>
#include <vector>

#include "knowfree/autograd.hpp"

namespace knowfree::testing {

// out[i*L+j, k*o+c] = sum_ab hs[i,k*d+a] U[k*d+a, b*o+c] he[j,k*d+b]
//                   + sum_a hs[i,k*d+a] Vs[k*d+a, c] + sum_b he[j,k*d+b] Ve[k*d+b, c] + bias[k*o+c]
inline Matrix biaffine_loop(const Matrix& hs, const Matrix& he, const Matrix& u, const Matrix& vs,
                            const Matrix& ve, const Matrix& bias, int heads) {
  const int length = static_cast<int>(hs.rows());
  const int d = static_cast<int>(hs.cols()) / heads;
  const int out_dim = static_cast<int>(bias.cols());
  const int o = out_dim / heads;
  Matrix out(length * length, out_dim);
  for (int i = 0; i < length; ++i) {
    for (int j = 0; j < length; ++j) {
      for (int k = 0; k < heads; ++k) {
        for (int c = 0; c < o; ++c) {
          double acc = bias(0, k * o + c);
          for (int a = 0; a < d; ++a) {
            for (int b = 0; b < d; ++b) {
              acc += hs(i, k * d + a) * u(k * d + a, b * o + c) * he(j, k * d + b);
            }
          }
          for (int a = 0; a < d; ++a) acc += hs(i, k * d + a) * vs(k * d + a, c);
          for (int b = 0; b < d; ++b) acc += he(j, k * d + b) * ve(k * d + b, c);
          out(i * length + j, k * o + c) = acc;
        }
      }
    }
  }
  return out;
}

// Softmax(q k^T / sqrt(dk) + mask) computed entry by entry; masked entries
// (-inf) are skipped explicitly.
inline Matrix masked_softmax_weights(const Matrix& q, const Matrix& k, const Matrix& mask) {
  const int n = static_cast<int>(q.rows());
  const int dk = static_cast<int>(q.cols());
  Matrix w = Matrix::Zero(n, n);
  for (int r = 0; r < n; ++r) {
    std::vector<double> scores(static_cast<std::size_t>(n));
    double mx = -1e300;
    for (int c = 0; c < n; ++c) {
      if (std::isinf(mask(r, c))) continue;
      double s = 0.0;
      for (int t = 0; t < dk; ++t) s += q(r, t) * k(c, t);
      s /= std::sqrt(static_cast<double>(dk));
      scores[static_cast<std::size_t>(c)] = s;
      if (s > mx) mx = s;
    }
    double total = 0.0;
    for (int c = 0; c < n; ++c) {
      if (std::isinf(mask(r, c))) continue;
      total += std::exp(scores[static_cast<std::size_t>(c)] - mx);
    }
    for (int c = 0; c < n; ++c) {
      if (std::isinf(mask(r, c))) continue;
      w(r, c) = std::exp(scores[static_cast<std::size_t>(c)] - mx) / total;
    }
  }
  return w;
}

inline Matrix affine_loop(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out(x.rows(), w.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      double acc = b(0, c);
      for (Eigen::Index t = 0; t < x.cols(); ++t) acc += x(r, t) * w(t, c);
      out(r, c) = acc;
    }
  }
  return out;
}

// Row-wise multi-head attention over an L x L grid; window < 0 means no mask.
inline Matrix row_attention_loop(const Matrix& grid, int length, const Matrix& wq, const Matrix& bq,
                                 const Matrix& wk, const Matrix& bk, const Matrix& wv,
                                 const Matrix& bv, const Matrix& wo, const Matrix& bo, int heads,
                                 int window) {
  const int dim = static_cast<int>(grid.cols());
  const int dk = dim / heads;
  const Matrix q = affine_loop(grid, wq, bq), k = affine_loop(grid, wk, bk),
               v = affine_loop(grid, wv, bv);
  Matrix mask = Matrix::Zero(length, length);
  for (int r = 0; r < length; ++r) {
    for (int c = 0; c < length; ++c) {
      if (window >= 0 && std::abs(r - c) > window) mask(r, c) = -INFINITY;
    }
  }
  Matrix concat(length * length, dim);
  for (int i = 0; i < length; ++i) {
    for (int h = 0; h < heads; ++h) {
      const Matrix qi = q.block(i * length, h * dk, length, dk);
      const Matrix ki = k.block(i * length, h * dk, length, dk);
      const Matrix a = masked_softmax_weights(qi, ki, mask);
      for (int r = 0; r < length; ++r) {
        for (int t = 0; t < dk; ++t) {
          double acc = 0.0;
          for (int c = 0; c < length; ++c) acc += a(r, c) * v(i * length + c, h * dk + t);
          concat(i * length + r, h * dk + t) = acc;
        }
      }
    }
  }
  return affine_loop(concat, wo, bo);
}

// -sum over cells of [y log p + (1-y) log(1-p)], target channels with weight 1
// and extension channel c with weight alpha[c - num_target]; p clamped to
// [1e-7, 1-1e-7].
inline double bce_loop(const Matrix& p, const Matrix& y, std::size_t num_target,
                       const std::vector<double>& alpha) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double w = static_cast<std::size_t>(c) < num_target
                           ? 1.0
                           : alpha[static_cast<std::size_t>(c) - num_target];
      if (w == 0.0) continue;
      double pc = p(r, c);
      if (pc < 1e-7) pc = 1e-7;
      if (pc > 1.0 - 1e-7) pc = 1.0 - 1e-7;
      total -= w * (y(r, c) * std::log(pc) + (1.0 - y(r, c)) * std::log(1.0 - pc));
    }
  }
  return total;
}

}  // namespace knowfree::testing
