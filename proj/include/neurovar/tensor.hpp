#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "neurovar/common.hpp"
#include "neurovar/rng.hpp"

namespace nv {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// One vertex of the computation graph. Nodes are created by the op
// functions below; `backward` reads this node's grad and accumulates into
// the parents' grads. The parent links make the graph; construction order
// guarantees acyclicity.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily by backward()
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;
};

// Value-semantics handle to a graph node. Copies share the node.
template <class T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;
  explicit TensorT(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false);
  static TensorT full(Shape shape, T v, bool requires_grad = false);
  static TensorT from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static TensorT scalar(T v, bool requires_grad = false);
  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  // Scalar extraction; throws unless the tensor has exactly one element.
  T item() const;

  void zero_grad() {
    node_->grad.assign(node_->value.size(), T(0));
  }

  std::shared_ptr<Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

// Running statistics for batch normalization; plain data, not graph state.
template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(std::int64_t channels = 0) { resize(channels); }
  void resize(std::int64_t channels) {
    running_mean.assign(static_cast<std::size_t>(channels), T(0));
    running_var.assign(static_cast<std::size_t>(channels), T(1));
  }
};

// ---- elementwise ----------------------------------------------------------
// add: b may have the same shape as a, a shape that is a trailing suffix of
// a's shape (bias patterns), or be a scalar.
template <class T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);  // same shape
template <class T> TensorT<T> scale(const TensorT<T>& a, T s);
template <class T> TensorT<T> neg(const TensorT<T>& a);

// ---- linear algebra -------------------------------------------------------
template <class T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);  // [M,K]x[K,N]
// Batched matmul over the leading dim: [N,M,K] x [N,K,P]. transpose_b treats
// b as [N,P,K]. transpose_a is not supported.
template <class T> TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool transpose_b);
// x: [..., K], w: [K, N], bias: [N] or undefined.
template <class T> TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias);

// ---- convolution family ---------------------------------------------------
// x: [B, Cin, L], w: [Cout, Cin, k]. Cross-correlation convention.
template <class T>
TensorT<T> conv1d(const TensorT<T>& x, const TensorT<T>& w, int stride, int pad_l, int pad_r);
// x: [B, Cin, L], w: [Cin, Cout, k]; output length (L-1)*stride + k - 2*pad.
template <class T>
TensorT<T> conv1d_transpose(const TensorT<T>& x, const TensorT<T>& w, int stride, int pad);
// x: [B, Cin, H, W], w: [Cout, Cin/groups, kh, kw].
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, int stride_h, int stride_w,
                  int pad_t, int pad_b, int pad_l, int pad_r, int groups);
// Average pooling over the last (time) axis of [B, C, H, W]; W % pool == 0.
template <class T> TensorT<T> avg_pool_time(const TensorT<T>& x, int pool);

// ---- normalization --------------------------------------------------------
// x: [B, C], [B, C, L] or [B, C, H, W]; gamma/beta: [C]. In training mode the
// batch statistics are used and `state` is updated in place; in eval mode the
// frozen running statistics are used.
template <class T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      BatchNormState<T>& state, bool training, T momentum = T(0.1),
                      T eps = T(1e-5));
// Normalizes over the last axis; gamma/beta: [last_dim].
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5));

// ---- activations ----------------------------------------------------------
template <class T> TensorT<T> softmax(const TensorT<T>& x);  // last axis
template <class T> TensorT<T> elu(const TensorT<T>& x);
template <class T> TensorT<T> gelu(const TensorT<T>& x);  // exact (erf) form
// Inverted dropout; eval mode returns the input unchanged.
template <class T> TensorT<T> dropout(const TensorT<T>& x, T rate, bool training, Rng& rng);

// ---- lookup ---------------------------------------------------------------
// table: [K, E]; output shape is idx_shape + [E].
template <class T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<std::int32_t>& idx,
                     const Shape& idx_shape);

// ---- shape ----------------------------------------------------------------
template <class T> TensorT<T> reshape(const TensorT<T>& x, Shape shape);
template <class T> TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& axes);

// ---- reductions -----------------------------------------------------------
template <class T> TensorT<T> sum_all(const TensorT<T>& x);
template <class T> TensorT<T> mean_all(const TensorT<T>& x);
template <class T> TensorT<T> sum_axis(const TensorT<T>& x, int axis);
template <class T> TensorT<T> mean_axis(const TensorT<T>& x, int axis);

// ---- autodiff control -----------------------------------------------------
// Detaches: the result carries the same values but no gradient path.
template <class T> TensorT<T> stop_gradient(const TensorT<T>& x);

// ---- loss -----------------------------------------------------------------
// logits: [N, C]; labels in [0, C). Mean negative log-softmax of the true
// class, log-sum-exp stabilized.
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<std::int32_t>& labels);

// Mean squared error between same-shape tensors (composite op).
template <class T> TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b);

// ---- driver ---------------------------------------------------------------
// Reverse pass from a scalar loss. Visits each reachable node exactly once
// in reverse topological order and accumulates gradients.
template <class T> void backward(const TensorT<T>& loss);

template <class T> bool all_finite(const TensorT<T>& x);

}  // namespace nv
