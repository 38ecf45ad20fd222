#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cme {

#ifdef CME_REAL32
using real = float;
#else
using real = double;
#endif

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

/// One recorded node of the computation graph. Nodes are created in forward
/// order; `seq` numbers give a topological order for the backward sweep.
struct Node {
  std::vector<int> shape;
  std::vector<real> values;
  std::vector<real> grad;  // allocated at creation for requires-grad leaves
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  int size() const { return static_cast<int>(values.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), real(0));
  }
};

}  // namespace detail

/// Dense row-major tensor. Copying a Tensor copies a handle to shared
/// storage; clone() makes an independent deep copy. Operations on tensors
/// record themselves so that backward() can later accumulate gradients on
/// every requires-grad leaf reachable from a scalar loss.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, std::vector<real> values, bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, real value, bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return node().shape; }
  int rank() const { return static_cast<int>(node().shape.size()); }
  int size() const { return node().size(); }

  std::span<const real> values() const { return node().values; }
  /// Mutable access to the raw storage. Meant for leaf tensors only
  /// (optimizer updates); mutating a node that already feeds recorded
  /// operations invalidates their saved forward values.
  std::span<real> values_mut() { return node().values; }

  /// Scalar convenience accessor; requires size() == 1.
  real value() const;
  real at(std::initializer_list<int> index) const;
  int flat_index(std::initializer_list<int> index) const;

  bool requires_grad() const { return node().requires_grad; }
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const real> grad() const;
  void zero_grad();

  bool is_leaf() const { return node().leaf; }
  std::uint64_t id() const { return node().seq; }

  /// Deep copy with no graph history.
  Tensor clone(bool requires_grad) const;
  Tensor clone() const { return clone(node().requires_grad); }

  const std::shared_ptr<detail::Node>& node_ptr() const { return n_; }
  detail::Node& node() const;

  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> n_;
};

// ---------------------------------------------------------------------------
// Recorded operations. All are differentiable with respect to every Tensor
// argument that requires grad.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real c);
Tensor sum(const Tensor& a);

/// Concatenate along the channel axis: [Ca,H,W] + [Cb,H,W] -> [Ca+Cb,H,W].
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Copy out channel c of a [C,H,W] tensor as [H,W]; gradient scatters back.
Tensor slice_channel(const Tensor& a, int c);

/// Cross-correlation. input [Cin,H,W], weights [Cout,Cin,k,k] with k odd,
/// bias [Cout]; output [Cout, H+2p-k+1, W+2p-k+1].
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, int padding);

/// Elementwise max(x, slope*x), 0 <= slope < 1. The subgradient at exactly
/// zero is the negative-side slope.
Tensor leaky_relu(const Tensor& a, real slope);

/// 2x2 max pooling, stride 2. Requires even spatial dims. Backward routes
/// the gradient to the first maximum in row-major window order.
Tensor max_pool2(const Tensor& a);

/// Per-channel spatial maximum: [C,H,W] -> [C]. First row-major tie-break.
Tensor global_max_pool(const Tensor& a);

/// Affine map: x [Din], weights [Dout,Din], bias [Dout] -> [Dout].
Tensor fully_connected(const Tensor& x, const Tensor& weights, const Tensor& bias);

/// Multiply each channel of feature [C,H,W] by vector[c].
Tensor channel_scale(const Tensor& feature, const Tensor& vector);

Tensor sigmoid(const Tensor& a);

/// Sum over elements of the stable binary cross-entropy between logits and
/// fixed targets (no gradient flows to targets).
Tensor bce_with_logits_sum(const Tensor& logits, std::span<const real> targets);

/// Cross-entropy of softmax(logits) against a fixed class index. logits [N].
Tensor softmax_cross_entropy(const Tensor& logits, int target);

/// Scalar division a/b; both operands of size 1.
Tensor div_scalar(const Tensor& a, const Tensor& b);

/// Minimum entry of a rank-1 tensor; gradient routes to the first minimum.
Tensor reduce_min(const Tensor& a);

/// Select one element as a scalar tensor; gradient scatters back.
Tensor element(const Tensor& a, int flat);

/// Pack scalar tensors into a rank-1 tensor of length xs.size().
Tensor stack_scalars(std::span<const Tensor> xs);

/// Elementwise mean of same-shaped tensors.
Tensor mean_of(std::span<const Tensor> xs);

/// Reverse sweep from a scalar loss. Accumulates into the grad buffers of
/// all requires-grad leaves reachable from `loss`; leaves keep accumulating
/// across calls until zero_grad().
void backward(const Tensor& loss);

/// The recorded operations reachable from a root, in topological order
/// (inputs strictly before consumers, root last).
struct ComputationTape {
  std::vector<std::shared_ptr<detail::Node>> order;
  static ComputationTape record(const Tensor& root);
};

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Central-difference gradient check of fn at `point`. Compares backward()'s
/// gradient against (f(x+h)-f(x-h))/2h per element and returns the maximum
/// relative discrepancy with denominator max(|analytic|, |numeric|, 1e-8).
real finite_difference_check(const ScalarFn& fn, const Tensor& point, real step);

/// Same, restricted to the given flat coordinates of `point`.
real finite_difference_check(const ScalarFn& fn, const Tensor& point, real step,
                             std::span<const int> coords);

}  // namespace cme
