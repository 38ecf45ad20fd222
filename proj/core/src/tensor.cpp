#include "cme/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <unordered_set>

namespace cme {

namespace {

std::atomic<std::uint64_t> g_seq{0};

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

int shape_product(const std::vector<int>& s) {
  int p = 1;
  for (int d : s) p *= d;
  return p;
}

void check_positive_dims(const std::vector<int>& s, const char* op) {
  for (int d : s) {
    if (d <= 0) throw ShapeError(std::string(op) + ": non-positive dimension in " + shape_str(s));
  }
}

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(std::vector<int> shape, std::vector<real> values, const char* op,
                  std::vector<NodePtr> inputs) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->op = op;
  n->leaf = false;
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed) + 1;
  for (const auto& in : inputs) {
    if (in->requires_grad) n->requires_grad = true;
  }
  n->inputs = std::move(inputs);
  return n;
}

/// Ensure an input can receive gradient and return its buffer, or nullptr if
/// it does not participate in differentiation.
real* grad_sink(detail::Node& in) {
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape, std::vector<real> values, bool requires_grad) {
  check_positive_dims(shape, "Tensor");
  if (shape_product(shape) != static_cast<int>(values.size())) {
    throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  n_ = std::make_shared<detail::Node>();
  n_->shape = std::move(shape);
  n_->values = std::move(values);
  n_->requires_grad = requires_grad;
  n_->seq = g_seq.fetch_add(1, std::memory_order_relaxed) + 1;
  if (requires_grad) n_->ensure_grad();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const int n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<real>(static_cast<size_t>(n), real(0)),
                requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, real value, bool requires_grad) {
  const int n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<real>(static_cast<size_t>(n), value),
                requires_grad);
}

Tensor Tensor::scalar(real value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

detail::Node& Tensor::node() const {
  if (!n_) throw ValueError("use of an undefined Tensor");
  return *n_;
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

real Tensor::value() const {
  if (size() != 1) throw ShapeError("value(): tensor is not scalar, shape " + shape_str(shape()));
  return node().values[0];
}

int Tensor::flat_index(std::initializer_list<int> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " vs tensor rank " +
                     std::to_string(s.size()));
  }
  int flat = 0;
  size_t d = 0;
  for (int i : index) {
    if (i < 0 || i >= s[d]) throw ShapeError("index out of range on axis " + std::to_string(d));
    flat = flat * s[d] + i;
    ++d;
  }
  return flat;
}

real Tensor::at(std::initializer_list<int> index) const {
  return node().values[static_cast<size_t>(flat_index(index))];
}

std::span<const real> Tensor::grad() const {
  const auto& n = node();
  if (n.grad.empty()) throw ValueError("grad(): no gradient present (requires_grad is false?)");
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = node();
  if (n.requires_grad) n.grad.assign(n.values.size(), real(0));
}

Tensor Tensor::clone(bool requires_grad) const {
  const auto& n = node();
  return Tensor(n.shape, n.values, requires_grad);
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto n = make_node(a.shape(), std::move(out), "add", {a.node_ptr(), b.node_ptr()});
  n->backward = [](detail::Node& self) {
    for (int k = 0; k < 2; ++k) {
      if (real* g = grad_sink(*self.inputs[k])) {
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  };
  return Tensor::wrap(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto n = make_node(a.shape(), std::move(out), "sub", {a.node_ptr(), b.node_ptr()});
  n->backward = [](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (real* g = grad_sink(*self.inputs[1])) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  };
  return Tensor::wrap(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto n = make_node(a.shape(), std::move(out), "mul", {a.node_ptr(), b.node_ptr()});
  n->backward = [](detail::Node& self) {
    const auto& av = self.inputs[0]->values;
    const auto& bv = self.inputs[1]->values;
    if (real* g = grad_sink(*self.inputs[0])) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (real* g = grad_sink(*self.inputs[1])) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  };
  return Tensor::wrap(n);
}

Tensor scale(const Tensor& a, real c) {
  const auto& av = a.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto n = make_node(a.shape(), std::move(out), "scale", {a.node_ptr()});
  n->backward = [c](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * c;
    }
  };
  return Tensor::wrap(n);
}

Tensor sum(const Tensor& a) {
  real acc = 0;
  for (real v : a.values()) acc += v;
  auto n = make_node({1}, {acc}, "sum", {a.node_ptr()});
  n->backward = [](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      const real go = self.grad[0];
      for (size_t i = 0; i < self.inputs[0]->values.size(); ++i) g[i] += go;
    }
  };
  return Tensor::wrap(n);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[1] != b.shape()[1] ||
      a.shape()[2] != b.shape()[2]) {
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::vector<real> out;
  out.reserve(a.values().size() + b.values().size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  std::vector<int> shape{a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]};
  auto n = make_node(std::move(shape), std::move(out), "concat_channels",
                     {a.node_ptr(), b.node_ptr()});
  n->backward = [](detail::Node& self) {
    const size_t na = self.inputs[0]->values.size();
    if (real* g = grad_sink(*self.inputs[0])) {
      for (size_t i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (real* g = grad_sink(*self.inputs[1])) {
      for (size_t i = 0; i < self.inputs[1]->values.size(); ++i) g[i] += self.grad[na + i];
    }
  };
  return Tensor::wrap(n);
}

Tensor slice_channel(const Tensor& a, int c) {
  if (a.rank() != 3) throw ShapeError("slice_channel: input must be [C,H,W]");
  if (c < 0 || c >= a.shape()[0]) throw ShapeError("slice_channel: channel out of range");
  const int hw = a.shape()[1] * a.shape()[2];
  const size_t off = static_cast<size_t>(c) * hw;
  std::vector<real> out(a.values().begin() + off, a.values().begin() + off + hw);
  auto n = make_node({a.shape()[1], a.shape()[2]}, std::move(out), "slice_channel",
                     {a.node_ptr()});
  n->backward = [off](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
    }
  };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Network ops
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, int padding) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (weights.rank() != 4) throw ShapeError("conv2d: weights must be [Cout,Cin,k,k], got " + shape_str(weights.shape()));
  if (bias.rank() != 1) throw ShapeError("conv2d: bias must be [Cout], got " + shape_str(bias.shape()));
  const int cin = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const int cout = weights.shape()[0], k = weights.shape()[2];
  if (weights.shape()[1] != cin) {
    throw ShapeError("conv2d: weights expect " + std::to_string(weights.shape()[1]) +
                     " input channels, input has " + std::to_string(cin));
  }
  if (weights.shape()[3] != k) throw ShapeError("conv2d: kernel must be square, got " + shape_str(weights.shape()));
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (bias.shape()[0] != cout) {
    throw ShapeError("conv2d: bias size " + std::to_string(bias.shape()[0]) +
                     " vs output channels " + std::to_string(cout));
  }
  if (padding < 0) throw ValueError("conv2d: negative padding");
  const int ho = h + 2 * padding - k + 1, wo = w + 2 * padding - k + 1;
  if (ho <= 0 || wo <= 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " with padding " +
                     std::to_string(padding) + " exceeds input " + shape_str(input.shape()));
  }

  const real* x = input.values().data();
  const real* wv = weights.values().data();
  const real* bv = bias.values().data();
  std::vector<real> out(static_cast<size_t>(cout) * ho * wo);
  const int p = padding;
  const int patch = cin * k * k;
  const int n = ho * wo;
  std::vector<real>& col = detail::conv_scratch();
  col.resize(static_cast<size_t>(patch) * n);
  detail::im2col(x, cin, h, w, k, p, ho, wo, col.data());
  detail::gemm_block4(wv, col.data(), out.data(), cout, patch, n);
  for (int co = 0; co < cout; ++co) {
    real* o = &out[static_cast<size_t>(co) * n];
    const real bc = bv[co];
    for (int j = 0; j < n; ++j) o[j] += bc;
  }

  auto n = make_node({cout, ho, wo}, std::move(out), "conv2d",
                     {input.node_ptr(), weights.node_ptr(), bias.node_ptr()});
  n->backward = [cin, h, w, cout, k, p, ho, wo](detail::Node& self) {
    auto& in_node = *self.inputs[0];
    auto& w_node = *self.inputs[1];
    auto& b_node = *self.inputs[2];
    const real* go = self.grad.data();
    const real* x = in_node.values.data();
    const real* wv = w_node.values.data();
    real* gx = grad_sink(in_node);
    real* gw = grad_sink(w_node);
    real* gb = grad_sink(b_node);
    const int patch = cin * k * k;
    const int n = ho * wo;
    if (gb) {
      for (int co = 0; co < cout; ++co) {
        const real* gout = &go[static_cast<size_t>(co) * n];
        real acc = 0;
        for (int j = 0; j < n; ++j) acc += gout[j];
        gb[co] += acc;
      }
    }
    if (gw) {
      std::vector<real>& col = detail::conv_scratch();
      col.resize(static_cast<size_t>(patch) * n);
      detail::im2col(x, cin, h, w, k, p, ho, wo, col.data());
      for (int co = 0; co < cout; ++co) {
        const real* __restrict gout = &go[static_cast<size_t>(co) * n];
        real* gwr = &gw[static_cast<size_t>(co) * patch];
        for (int r = 0; r < patch; ++r) {
          const real* __restrict c = &col[static_cast<size_t>(r) * n];
          real acc = 0;
          for (int j = 0; j < n; ++j) acc += c[j] * gout[j];
          gwr[r] += acc;
        }
      }
    }
    if (gx) {
      std::vector<real>& gcol = detail::conv_scratch2();
      gcol.assign(static_cast<size_t>(patch) * n, real(0));
      // gcol = W^T * gout
      for (int co = 0; co < cout; ++co) {
        const real* __restrict gout = &go[static_cast<size_t>(co) * n];
        const real* wr = &wv[static_cast<size_t>(co) * patch];
        for (int r = 0; r < patch; ++r) {
          const real wgt = wr[r];
          real* __restrict c = &gcol[static_cast<size_t>(r) * n];
          for (int j = 0; j < n; ++j) c[j] += wgt * gout[j];
        }
      }
      detail::col2im_add(gcol.data(), cin, h, w, k, p, ho, wo, gx);
    }
  };
  return Tensor::wrap(n);
}

Tensor leaky_relu(const Tensor& a, real slope) {
  if (slope < 0 || slope >= 1) throw ValueError("leaky_relu: slope must be in [0,1)");
  const auto& av = a.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0 ? av[i] : slope * av[i];
  auto n = make_node(a.shape(), std::move(out), "leaky_relu", {a.node_ptr()});
  n->backward = [slope](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      const auto& x = self.inputs[0]->values;
      for (size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * (x[i] > 0 ? real(1) : slope);
      }
    }
  };
  return Tensor::wrap(n);
}

Tensor max_pool2(const Tensor& a) {
  if (a.rank() != 3) throw ShapeError("max_pool2: input must be [C,H,W], got " + shape_str(a.shape()));
  const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("max_pool2: spatial dims must be even, got " + shape_str(a.shape()));
  }
  const int ho = h / 2, wo = w / 2;
  const real* x = a.values().data();
  std::vector<real> out(static_cast<size_t>(c) * ho * wo);
  std::vector<int> argmax(out.size());
  for (int ci = 0; ci < c; ++ci) {
    const real* in = &x[static_cast<size_t>(ci) * h * w];
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        int best_idx = (2 * oy) * w + 2 * ox;
        real best = in[best_idx];
        // row-major window scan keeps the first maximum on ties
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (2 * oy + dy) * w + (2 * ox + dx);
            if (in[idx] > best) {
              best = in[idx];
              best_idx = idx;
            }
          }
        }
        const size_t o = (static_cast<size_t>(ci) * ho + oy) * wo + ox;
        out[o] = best;
        argmax[o] = ci * h * w + best_idx;
      }
    }
  }
  auto n = make_node({c, ho, wo}, std::move(out), "max_pool2", {a.node_ptr()});
  n->backward = [argmax = std::move(argmax)](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[argmax[i]] += self.grad[i];
    }
  };
  return Tensor::wrap(n);
}

Tensor global_max_pool(const Tensor& a) {
  if (a.rank() != 3) throw ShapeError("global_max_pool: input must be [C,H,W], got " + shape_str(a.shape()));
  const int c = a.shape()[0], hw = a.shape()[1] * a.shape()[2];
  const real* x = a.values().data();
  std::vector<real> out(static_cast<size_t>(c));
  std::vector<int> argmax(out.size());
  for (int ci = 0; ci < c; ++ci) {
    const real* in = &x[static_cast<size_t>(ci) * hw];
    int best_idx = 0;
    real best = in[0];
    for (int j = 1; j < hw; ++j) {
      if (in[j] > best) {
        best = in[j];
        best_idx = j;
      }
    }
    out[ci] = best;
    argmax[ci] = ci * hw + best_idx;
  }
  auto n = make_node({c}, std::move(out), "global_max_pool", {a.node_ptr()});
  n->backward = [argmax = std::move(argmax)](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[argmax[i]] += self.grad[i];
    }
  };
  return Tensor::wrap(n);
}

Tensor fully_connected(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  if (x.rank() != 1 || weights.rank() != 2 || bias.rank() != 1) {
    throw ShapeError("fully_connected: expected x [Din], weights [Dout,Din], bias [Dout]; got " +
                     shape_str(x.shape()) + ", " + shape_str(weights.shape()) + ", " +
                     shape_str(bias.shape()));
  }
  const int din = x.shape()[0], dout = weights.shape()[0];
  if (weights.shape()[1] != din || bias.shape()[0] != dout) {
    throw ShapeError("fully_connected: shape mismatch " + shape_str(x.shape()) + " x " +
                     shape_str(weights.shape()) + " + " + shape_str(bias.shape()));
  }
  const real* xv = x.values().data();
  const real* wv = weights.values().data();
  const real* bv = bias.values().data();
  std::vector<real> out(static_cast<size_t>(dout));
  for (int o = 0; o < dout; ++o) {
    real acc = bv[o];
    const real* wr = &wv[static_cast<size_t>(o) * din];
    for (int i = 0; i < din; ++i) acc += wr[i] * xv[i];
    out[o] = acc;
  }
  auto n = make_node({dout}, std::move(out), "fully_connected",
                     {x.node_ptr(), weights.node_ptr(), bias.node_ptr()});
  n->backward = [din, dout](detail::Node& self) {
    const real* go = self.grad.data();
    const real* xv = self.inputs[0]->values.data();
    const real* wv = self.inputs[1]->values.data();
    real* gx = grad_sink(*self.inputs[0]);
    real* gw = grad_sink(*self.inputs[1]);
    real* gb = grad_sink(*self.inputs[2]);
    for (int o = 0; o < dout; ++o) {
      const real g = go[o];
      if (gb) gb[o] += g;
      const real* wr = &wv[static_cast<size_t>(o) * din];
      if (gx) {
        for (int i = 0; i < din; ++i) gx[i] += g * wr[i];
      }
      if (gw) {
        real* gwr = &gw[static_cast<size_t>(o) * din];
        for (int i = 0; i < din; ++i) gwr[i] += g * xv[i];
      }
    }
  };
  return Tensor::wrap(n);
}

Tensor channel_scale(const Tensor& feature, const Tensor& vector) {
  if (feature.rank() != 3 || vector.rank() != 1 || feature.shape()[0] != vector.shape()[0]) {
    throw ShapeError("channel_scale: feature " + shape_str(feature.shape()) +
                     " vs vector " + shape_str(vector.shape()));
  }
  const int c = feature.shape()[0], hw = feature.shape()[1] * feature.shape()[2];
  const real* f = feature.values().data();
  const real* v = vector.values().data();
  std::vector<real> out(feature.values().size());
  for (int ci = 0; ci < c; ++ci) {
    const real s = v[ci];
    for (int j = 0; j < hw; ++j) out[static_cast<size_t>(ci) * hw + j] = s * f[static_cast<size_t>(ci) * hw + j];
  }
  auto n = make_node(feature.shape(), std::move(out), "channel_scale",
                     {feature.node_ptr(), vector.node_ptr()});
  n->backward = [c, hw](detail::Node& self) {
    const real* go = self.grad.data();
    const real* f = self.inputs[0]->values.data();
    const real* v = self.inputs[1]->values.data();
    if (real* gf = grad_sink(*self.inputs[0])) {
      for (int ci = 0; ci < c; ++ci) {
        const real s = v[ci];
        for (int j = 0; j < hw; ++j) gf[static_cast<size_t>(ci) * hw + j] += s * go[static_cast<size_t>(ci) * hw + j];
      }
    }
    if (real* gv = grad_sink(*self.inputs[1])) {
      for (int ci = 0; ci < c; ++ci) {
        real acc = 0;
        for (int j = 0; j < hw; ++j) acc += f[static_cast<size_t>(ci) * hw + j] * go[static_cast<size_t>(ci) * hw + j];
        gv[ci] += acc;
      }
    }
  };
  return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// Loss building blocks
// ---------------------------------------------------------------------------

namespace {
real sigmoid_value(real x) {
  if (x >= 0) return real(1) / (real(1) + std::exp(-x));
  const real e = std::exp(x);
  return e / (real(1) + e);
}
}  // namespace

Tensor sigmoid(const Tensor& a) {
  const auto& av = a.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(av[i]);
  auto n = make_node(a.shape(), std::move(out), "sigmoid", {a.node_ptr()});
  n->backward = [](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      for (size_t i = 0; i < self.grad.size(); ++i) {
        const real y = self.values[i];
        g[i] += self.grad[i] * y * (real(1) - y);
      }
    }
  };
  return Tensor::wrap(n);
}

Tensor bce_with_logits_sum(const Tensor& logits, std::span<const real> targets) {
  if (targets.size() != logits.values().size()) {
    throw ShapeError("bce_with_logits_sum: " + std::to_string(targets.size()) +
                     " targets vs " + std::to_string(logits.values().size()) + " logits");
  }
  const auto& x = logits.values();
  real acc = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    acc += std::max(x[i], real(0)) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  auto n = make_node({1}, {acc}, "bce_with_logits_sum", {logits.node_ptr()});
  n->backward = [t = std::vector<real>(targets.begin(), targets.end())](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      const real go = self.grad[0];
      const auto& x = self.inputs[0]->values;
      for (size_t i = 0; i < x.size(); ++i) g[i] += go * (sigmoid_value(x[i]) - t[i]);
    }
  };
  return Tensor::wrap(n);
}

Tensor softmax_cross_entropy(const Tensor& logits, int target) {
  if (logits.rank() != 1) throw ShapeError("softmax_cross_entropy: logits must be rank 1");
  const int k = logits.shape()[0];
  if (target < 0 || target >= k) throw ValueError("softmax_cross_entropy: target out of range");
  const auto& x = logits.values();
  real m = x[0];
  for (real v : x) m = std::max(m, v);
  real z = 0;
  for (real v : x) z += std::exp(v - m);
  const real loss = std::log(z) + m - x[target];
  auto n = make_node({1}, {loss}, "softmax_cross_entropy", {logits.node_ptr()});
  n->backward = [target, m, z](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) {
      const real go = self.grad[0];
      const auto& x = self.inputs[0]->values;
      for (size_t i = 0; i < x.size(); ++i) {
        const real p = std::exp(x[i] - m) / z;
        g[i] += go * (p - (static_cast<int>(i) == target ? real(1) : real(0)));
      }
    }
  };
  return Tensor::wrap(n);
}

Tensor div_scalar(const Tensor& a, const Tensor& b) {
  if (a.size() != 1 || b.size() != 1) throw ShapeError("div_scalar: operands must be scalars");
  const real av = a.value(), bv = b.value();
  auto n = make_node({1}, {av / bv}, "div_scalar", {a.node_ptr(), b.node_ptr()});
  n->backward = [](detail::Node& self) {
    const real go = self.grad[0];
    const real av = self.inputs[0]->values[0];
    const real bv = self.inputs[1]->values[0];
    if (real* g = grad_sink(*self.inputs[0])) g[0] += go / bv;
    if (real* g = grad_sink(*self.inputs[1])) g[0] -= go * av / (bv * bv);
  };
  return Tensor::wrap(n);
}

Tensor reduce_min(const Tensor& a) {
  if (a.rank() != 1 || a.size() < 1) throw ShapeError("reduce_min: expects a non-empty rank-1 tensor");
  const auto& x = a.values();
  int best = 0;
  for (size_t i = 1; i < x.size(); ++i) {
    if (x[i] < x[best]) best = static_cast<int>(i);
  }
  auto n = make_node({1}, {x[best]}, "reduce_min", {a.node_ptr()});
  n->backward = [best](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) g[best] += self.grad[0];
  };
  return Tensor::wrap(n);
}

Tensor element(const Tensor& a, int flat) {
  if (flat < 0 || flat >= a.size()) throw ShapeError("element: index out of range");
  auto n = make_node({1}, {a.values()[static_cast<size_t>(flat)]}, "element", {a.node_ptr()});
  n->backward = [flat](detail::Node& self) {
    if (real* g = grad_sink(*self.inputs[0])) g[flat] += self.grad[0];
  };
  return Tensor::wrap(n);
}

Tensor stack_scalars(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("stack_scalars: empty input");
  std::vector<real> out;
  std::vector<NodePtr> inputs;
  out.reserve(xs.size());
  inputs.reserve(xs.size());
  for (const auto& t : xs) {
    if (t.size() != 1) throw ShapeError("stack_scalars: all inputs must be scalar");
    out.push_back(t.value());
    inputs.push_back(t.node_ptr());
  }
  auto n = make_node({static_cast<int>(xs.size())}, std::move(out), "stack_scalars",
                     std::move(inputs));
  n->backward = [](detail::Node& self) {
    for (size_t i = 0; i < self.inputs.size(); ++i) {
      if (real* g = grad_sink(*self.inputs[i])) g[0] += self.grad[i];
    }
  };
  return Tensor::wrap(n);
}

Tensor mean_of(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("mean_of: empty input");
  Tensor acc = xs[0];
  for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, real(1) / static_cast<real>(xs.size()));
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

ComputationTape ComputationTape::record(const Tensor& root) {
  ComputationTape tape;
  std::unordered_set<const detail::Node*> seen;
  std::vector<NodePtr> stack{root.node_ptr()};
  while (!stack.empty()) {
    NodePtr n = std::move(stack.back());
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n.get()).second) continue;
    for (const auto& in : n->inputs) stack.push_back(in);
    tape.order.push_back(std::move(n));
  }
  std::sort(tape.order.begin(), tape.order.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->seq < b->seq; });
  return tape;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;  // nothing reachable requires grad
  ComputationTape tape = ComputationTape::record(loss);
  // fresh scratch for non-leaf nodes; leaves accumulate across calls
  for (const auto& n : tape.order) {
    if (!n->leaf) n->grad.assign(n->values.size(), real(0));
    else n->ensure_grad();
  }
  loss.node().grad[0] += real(1);
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward) n.backward(n);
  }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

real finite_difference_check(const ScalarFn& fn, const Tensor& point, real step,
                             std::span<const int> coords) {
  if (step <= 0) throw ValueError("finite_difference_check: step must be positive");
  Tensor leaf = point.clone(true);
  Tensor loss = fn(leaf);
  if (loss.size() != 1) throw ShapeError("finite_difference_check: fn must return a scalar");
  backward(loss);
  const auto analytic = leaf.grad();

  Tensor probe = point.clone(false);
  auto vals = probe.values_mut();
  real max_err = 0;
  for (int c : coords) {
    if (c < 0 || c >= probe.size()) throw ValueError("finite_difference_check: coordinate out of range");
    const real saved = vals[c];
    vals[c] = saved + step;
    const real fp = fn(probe).value();
    vals[c] = saved - step;
    const real fm = fn(probe).value();
    vals[c] = saved;
    const real numeric = (fp - fm) / (2 * step);
    const real denom = std::max({std::abs(analytic[c]), std::abs(numeric), real(1e-8)});
    max_err = std::max(max_err, std::abs(analytic[c] - numeric) / denom);
  }
  return max_err;
}

real finite_difference_check(const ScalarFn& fn, const Tensor& point, real step) {
  std::vector<int> coords(static_cast<size_t>(point.size()));
  for (int i = 0; i < point.size(); ++i) coords[static_cast<size_t>(i)] = i;
  return finite_difference_check(fn, point, step, coords);
}

}  // namespace cme
