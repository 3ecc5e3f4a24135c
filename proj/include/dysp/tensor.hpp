#pragma once

// Reverse-mode automatic differentiation over dense f64 tensors.
//
// A Tensor is a cheap handle onto a graph node. Ops build new nodes that keep
// strong references to their parents; calling backward() on a scalar walks
// the graph once in reverse topological order and accumulates gradients into
// every node that requires them.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dysp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // In-place access for initialisation and optimiser updates. Never use this
  // on a tensor that is part of a graph still awaiting backward().
  std::span<double> mutable_data();

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool requires_grad() const;
  void set_requires_grad(bool value);

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  // Seeds d(self)/d(self) = 1 and propagates. Self must hold one element.
  void backward() const;

  // Same data, no history.
  Tensor detach() const;
  // Deep copy of the data into a fresh leaf.
  Tensor clone() const;

  const detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise arithmetic. The second operand may either match the first's
// shape or match a trailing suffix of it (bias / positional-table broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K] x [K,N]
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,M,K] x [B,K,N]
// x[..., K] * w[K, N] (+ bias[N]).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);

// Identity forward; backward multiplies the incoming gradient by -lambda.
Tensor gradient_reversal(const Tensor& x, double lambda);

// --- image / sequence ops (nn_ops.cpp) ---

// Cross-correlation. x[N,C,H,W], w[F,C,kh,kw], bias[F] optional.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad);
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);
// Bilinear x2 with aligned corners.
Tensor bilinear_upsample2x(const Tensor& x);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

// In training mode normalises with batch statistics and updates the running
// statistics in place; otherwise uses the running statistics.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                    bool training);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // w*: [D,D], b*: [D] (biases optional)
};

// x is [T,D] or [N,T,D]. When `attention` is non-null it receives the
// softmax weights as [N*heads, T, T].
Tensor multi_head_attention(const Tensor& x, const AttentionWeights& w, std::size_t heads,
                            Tensor* attention = nullptr);

}  // namespace dysp
