#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fstm/tensor.hpp"

// Tensor-level reverse-mode differentiation. Each op computes its value
// eagerly and, when any input requires a gradient, records a closure that
// pushes the output gradient back into its inputs.
namespace fstm::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Gradient buffer, zero-initialised on first access.
  Tensor& grad_ref();
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  // Accumulated gradient; empty tensor when nothing flowed here.
  const Tensor& grad() const { return node_->grad; }
  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Wraps a freshly computed value into the graph. `fn` receives the output
// node; parents are reachable through `self.parents` in the given order.
Var record(Tensor value, std::vector<Var> parents,
           std::function<void(Node& self)> fn);

// True when parent `i` of `self` needs its gradient.
inline bool wants(const Node& self, std::size_t i) {
  return self.parents[i] && self.parents[i]->requires_grad;
}
inline Tensor& parent_grad(Node& self, std::size_t i) {
  return self.parents[i]->grad_ref();
}

// Seeds d(root)/d(root) = 1 (root must be a scalar) and runs the recorded
// closures in reverse topological order.
void backward(const Var& root);
// Same, with an explicit output seed of the root's shape.
void backward(const Var& root, const Tensor& seed);

using Index = std::vector<std::int64_t>;
using IndexPtr = std::shared_ptr<const Index>;

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_n(std::span<const Var> xs);
Var scale(const Var& a, double s);
Var mul_const(const Var& a, std::shared_ptr<const Tensor> m);

Var sigmoid(const Var& x);
Var silu(const Var& x);
Var softplus(const Var& x);
// -exp(x); parameterises strictly negative state matrices.
Var neg_exp(const Var& x);

// y[..., o] = sum_i x[..., i] * w[o, i] + b[o]. `b` may be undefined.
Var linear(const Var& x, const Var& w, const Var& b = Var());
// Normalises over the last axis.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
               double eps = 1e-5);

Var reshape(const Var& x, Shape shape);
// out[k] = x[index[k]], or 0 where index[k] < 0.
Var gather(const Var& x, IndexPtr index, Shape out_shape);
// out = base with out[index[k]] = src[k]; index entries must be distinct.
Var scatter_overwrite(const Var& base, const Var& src, IndexPtr index);

Var sum_all(const Var& x);
Var mean_all(const Var& x);

// Mean softmax cross-entropy of logits [B, K] against integer labels.
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);
// Mean squared error of predictions [B, 1] against targets.
Var mse_loss(const Var& pred, std::span<const double> targets);

double sigmoid_value(double x) noexcept;
double softplus_value(double x) noexcept;

}  // namespace fstm::ad
