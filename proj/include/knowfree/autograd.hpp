#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace knowfree {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// A named trainable tensor. Gradients accumulate into `grad` across calls to
// Graph::backward until zero_grad().
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ag {

// Handle to a node in a Graph.
struct Var {
  int id = -1;
};

// Reverse-mode tape over dense row-major matrices. A 3-D grid L x L x D is
// stored as an (L*L) x D matrix whose row i*L + j is cell (i, j).
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var param(Parameter& p);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  // Gradient buffer for v, allocated (zero) on first access.
  Matrix& grad(Var v);
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to parameters.
  void backward(Var out);

  // Custom op: `backward` reads grad(result) and accumulates into inputs.
  Var add_op(Matrix value, std::span<const Var> inputs,
             std::function<void(Graph&, Var self)> backward);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);  // broadcast a 1 x n row over every row of a
  Var scale(Var a, double s);
  Var leaky_relu(Var a, double slope);
  Var gelu(Var a);
  Var sigmoid(Var a);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var gather_rows(Var table, std::span<const int> ids);
  Var rows(Var a, int first, int count);  // contiguous row block
  Var dropout(Var a, double rate, std::mt19937_64& rng);
  Var sum(Var a);

  // Scaled dot-product attention over `batches` independent sequences of
  // length `seq_len`. q, k, v are (batches*seq_len) x (heads*d_k); the
  // additive mask is seq_len x seq_len (entries 0 or -inf) or empty.
  Var attention(Var q, Var k, Var v, int batches, int seq_len, int heads,
                const Matrix& mask);

  // Weighted binary cross entropy summed over all entries:
  //   -sum_{r,c} w_c [y log p + (1-y) log(1-p)]
  // with p clamped to [clamp, 1-clamp]; the clamp passes no gradient.
  Var weighted_bce(Var probs, const Matrix& targets,
                   std::span<const double> channel_weights, double clamp);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(Graph&, Var)> backward;
  };

  Var push(Matrix value, bool requires_grad);
  bool any_requires_grad(std::span<const Var> inputs) const;

  std::deque<Node> nodes_;  // stable references across push_back
  bool grad_enabled_;
};

double gelu(double x);
double gelu_grad(double x);

}  // namespace ag
}  // namespace knowfree
