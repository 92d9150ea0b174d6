#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dlmlab/rng.hpp"

namespace dlmlab {

using Shape = std::vector<std::int64_t>;

namespace detail {

// One record of the compute graph: forward value plus the rule that routes
// the output gradient to the parents. Leaves have no rule.
template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S{0});
  }
};

}  // namespace detail

// Dense row-major tensor handle with reverse-mode autodiff. Copying a Tensor
// aliases the underlying node. Values are immutable once the tensor has been
// consumed by an op; parameters are mutated between steps via raw().
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node<S>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor constant(Shape shape, S value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false);
  static Tensor randn(Shape shape, double stddev, Rng rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  std::int64_t dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const S> values() const { return {node_->value.data(), node_->value.size()}; }
  std::span<S> raw() { return {node_->value.data(), node_->value.size()}; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const { return {node_->grad.data(), node_->grad.size()}; }
  std::span<S> grad_raw() {
    node_->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }
  void zero_grad() { node_->grad.clear(); }

  S item() const;

  detail::Node<S>* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node<S>>& handle() const { return node_; }

 private:
  std::shared_ptr<detail::Node<S>> node_;
};

// Elementwise; shapes must match exactly (no broadcasting).
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S> Tensor<S> silu(const Tensor<S>& x);

// [M x K] * [K x N] -> [M x N].
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

// x: [N x D], bias: [D]; adds bias to every row.
template <typename S> Tensor<S> add_row_bias(const Tensor<S>& x, const Tensor<S>& bias);

// Normalizes each contiguous group of gain.numel() values by its RMS and
// multiplies by the learned gain. x.numel() must be a multiple of the group.
template <typename S> Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gain, double eps = 1e-6);

// table: [K x D]; gathers one row per id into [ids.size() x D].
template <typename S> Tensor<S> embedding(const Tensor<S>& table, std::span<const std::int32_t> ids);

// Rotary position encoding over [batch*seq x heads*head_dim]; rotates the
// (i, i + head_dim/2) pairs of every head by the position angle.
template <typename S> Tensor<S> rope(const Tensor<S>& x, std::int64_t batch, std::int64_t seq,
                                     std::int64_t heads, double base);

// Scaled dot-product attention over [batch*seq x heads*head_dim] inputs.
// Causal mode restricts each query to positions <= its own; probabilities are
// optionally dropped out (kept entries rescaled by 1/(1-p)).
template <typename S> Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                          std::int64_t batch, std::int64_t seq, std::int64_t heads,
                                          bool causal, double dropout_p, Rng rng);

template <typename S> Tensor<S> dropout(const Tensor<S>& x, double p, Rng rng);

template <typename S> Tensor<S> sum(const Tensor<S>& x);

template <typename S>
struct CrossEntropy {
  Tensor<S> loss;           // scalar
  std::int64_t count = 0;   // positions that contributed
};

// Mean NLL over non-ignored targets, max-subtraction stabilized.
// All targets ignored yields loss 0 with count 0.
template <typename S>
CrossEntropy<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const std::int32_t> targets,
                                      std::int32_t ignore_index);

// Sum of weights[i] * nll_i; count reports positions with nonzero weight.
template <typename S>
CrossEntropy<S> weighted_softmax_cross_entropy(const Tensor<S>& logits,
                                               std::span<const std::int32_t> targets,
                                               std::span<const double> weights);

// Reverse-mode sweep from a scalar loss; accumulates into every
// requires_grad leaf reachable from it. Visits each node exactly once.
template <typename S> void backward(const Tensor<S>& loss);

// Stable per-row -log softmax(logits)[target], computed in double, no graph.
// Rows whose target is negative produce 0.
template <typename S>
std::vector<double> row_nll(const Tensor<S>& logits, std::span<const std::int32_t> targets);

}  // namespace dlmlab
