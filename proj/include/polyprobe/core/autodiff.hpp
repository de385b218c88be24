#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "polyprobe/core/tensor.hpp"

namespace polyprobe::core {

// Handle to a node on a Tape. Only meaningful for the tape that created it.
struct Var {
  std::size_t id = 0;
};

class Tape;
class Gradients;

// Writes d(seed)/d(input_k) contributions into input_grads[k] (pre-sized,
// zero-filled, one slot per recorded input) given d(seed)/d(output).
using BackwardFn = std::function<void(const Tape& tape, const Tensor& grad_out, std::span<Tensor> input_grads)>;

// Reverse-mode tape. Nodes are appended in evaluation order, so the record is
// topologically sorted by construction. A node requires a gradient when any
// of its inputs does; constant-only subgraphs keep no backward closure, which
// makes inference on the same code path cheap.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor value);
  Var constant(Tensor value);
  // Borrowing variants: the tape keeps a pointer, so `value` must outlive it.
  Var input_ref(const Tensor& value);
  Var constant_ref(const Tensor& value);
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.borrowed ? *n.borrowed : n.value;
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Gradients;
  friend Gradients backprop(const Tape& tape, Var seed);

  struct Node {
    Tensor value;
    std::vector<Var> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    const Tensor* borrowed = nullptr;
  };
  std::vector<Node> nodes_;
};

// Gradients of one scalar seed, indexed by node id.
class Gradients {
 public:
  bool has(Var v) const { return v.id < grads_.size() && grads_[v.id].has_value(); }
  // Throws if the node is unrelated to the seed or does not require grad.
  const Tensor& at(Var v) const;
  std::size_t visited() const { return visited_; }

 private:
  friend Gradients backprop(const Tape& tape, Var seed);
  std::vector<std::optional<Tensor>> grads_;
  std::size_t visited_ = 0;
};

// Visits every node at or before the seed exactly once, in reverse order.
Gradients backprop(const Tape& tape, Var seed);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
std::vector<double> finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                               std::span<const double> x, double h = 1e-5);

namespace ops {

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double factor);
Var matmul(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
// Same data, new shape (sizes must agree).
Var reshape(Tape& t, Var a, Shape shape);
// a: [m x n], bias: [n]; adds bias to every row.
Var add_row_bias(Tape& t, Var a, Var bias);
// table: [V x d]; returns [ids.size() x d].
Var gather_rows(Tape& t, Var table, std::vector<std::size_t> ids);
// Row r of a matrix as a vector.
Var row(Tape& t, Var a, std::size_t r);
Var dot(Tape& t, Var a, Var b);
Var sum(Tape& t, Var a);
Var sum_squares(Tape& t, Var a);
Var relu(Tape& t, Var a);
// tanh approximation of GELU.
Var gelu(Tape& t, Var a);
Var softmax_rows(Tape& t, Var a);
// Row-wise layer norm. With frozen_scale set, the per-row standard deviation
// is replaced by that constant, which makes the map affine in x.
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps, std::optional<double> frozen_scale = std::nullopt);
// Causal multi-head attention over already-projected q, k, v of shape [T x d].
Var causal_attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads);
// Mean next-token cross entropy; logits [T x V], one target per row.
Var cross_entropy(Tape& t, Var logits, std::vector<std::size_t> targets);
// L2 norm of every column of a matrix; returns [cols].
Var column_norms(Tape& t, Var a);
// Keeps the k largest entries of each row, zeroes the rest.
Var topk_rows(Tape& t, Var a, std::size_t k);

}  // namespace ops

}  // namespace polyprobe::core
