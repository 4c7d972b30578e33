#pragma once

// Minimal dense tensor engine with reverse-mode autodiff.
//
// Tensors are immutable values once an operation has produced them; only
// leaf tensors (parameters, inputs) may be mutated between graph builds.
// Every operation appends a node holding its inputs, a `recompute` closure
// (used for deterministic replay) and a `backprop` closure that scatters
// gradients into a GradientMap. Gradients never live on the nodes
// themselves, so independent evaluations over shared parameter leaves can
// run concurrently, each with its own record and gradient map.
//
// Summation order inside every kernel is fixed, which makes forward and
// backward results bit-reproducible run to run. Scalar reductions (sum,
// mean, variance, losses) accumulate in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace stereovit {

// Thrown when an operation would produce or consume NaN/Inf values.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline int64_t shape_numel(const std::vector<int64_t>& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d <= 0) throw std::invalid_argument("tensor shape must be positive, got " + shape_str(s));
    n *= d;
  }
  return n;
}

template <class S>
class GradientMap;

template <class S>
struct Node {
  std::vector<int64_t> shape;
  std::vector<S> value;
  // Scalar reductions keep their double accumulator so finite-difference
  // checks are not limited by the final S cast.
  double scalar_hi = 0.0;
  bool has_scalar_hi = false;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<S>>> inputs;
  // Recomputes `value` from the inputs' current values (replay support).
  std::function<void(Node<S>&)> recompute;
  // Accumulates input gradients given this node's gradient in the map.
  std::function<void(Node<S>&, GradientMap<S>&)> backprop;

  int64_t size() const { return static_cast<int64_t>(value.size()); }

  void set_scalar(double v) {
    value[0] = static_cast<S>(v);
    scalar_hi = v;
    has_scalar_hi = true;
  }
};

template <class S>
using NodePtr = std::shared_ptr<Node<S>>;

template <class S>
void ensure_finite(const std::vector<S>& v, const char* op) {
  for (const S& x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw NonFiniteError(std::string("operation '") + op + "' produced a non-finite value");
    }
  }
}

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), static_cast<S>(0), requires_grad);
  }

  static Tensor filled(std::vector<int64_t> shape, S v, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    ensure_finite(n->value, "leaf");
    return Tensor(std::move(n));
  }

  static Tensor from_data(std::vector<int64_t> shape, std::vector<S> data,
                          bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
      throw std::invalid_argument("from_data: " + shape_str(shape) + " does not hold " +
                                  std::to_string(data.size()) + " values");
    }
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    ensure_finite(n->value, "leaf");
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v, bool requires_grad = false) { return filled({1}, v, requires_grad); }

  explicit Tensor(NodePtr<S> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const std::vector<int64_t>& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape.at(i); }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t size() const { return node_->size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }
  const std::vector<S>& data() const { return node_->value; }

  // Leaf mutation is how parameters are updated between graph builds.
  std::vector<S>& mutable_data() {
    if (!node_->leaf) throw std::logic_error("mutable_data: only leaf tensors may be mutated");
    return node_->value;
  }

  S item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor has " + shape_str(shape()));
    return node_->value[0];
  }

  // Scalar value at double precision when the producing op kept one.
  double item_precise() const {
    if (size() != 1) throw std::invalid_argument("item: tensor has " + shape_str(shape()));
    return node_->has_scalar_hi ? node_->scalar_hi : static_cast<double>(node_->value[0]);
  }

  Node<S>* node() const { return node_.get(); }
  const NodePtr<S>& node_ptr() const { return node_; }

 private:
  NodePtr<S> node_;
};

// ---------------------------------------------------------------------------
// Computation record: topologically ordered list of nodes (inputs precede
// users). Replaying it recomputes every non-leaf value deterministically.

template <class S>
struct ComputationRecord {
  std::vector<Node<S>*> nodes;
};

template <class S>
ComputationRecord<S> record_graph(const Tensor<S>& root) {
  ComputationRecord<S> rec;
  std::unordered_set<const Node<S>*> visited;
  // Iterative post-order DFS; input order is fixed, so the record is
  // deterministic for a given graph.
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx == 0 && visited.count(n)) {
      stack.pop_back();
      continue;
    }
    if (idx < n->inputs.size()) {
      Node<S>* child = n->inputs[idx].get();
      ++idx;
      if (!visited.count(child)) stack.emplace_back(child, 0);
    } else {
      visited.insert(n);
      rec.nodes.push_back(n);
      stack.pop_back();
    }
  }
  return rec;
}

template <class S>
void replay(ComputationRecord<S>& rec) {
  for (Node<S>* n : rec.nodes) {
    if (!n->leaf) {
      n->recompute(*n);
      ensure_finite(n->value, n->op);
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient map: gradients keyed by node, owned by one backward pass.

template <class S>
class GradientMap {
 public:
  std::vector<S>& accum(const Node<S>* n) {
    auto it = grads_.find(n);
    if (it == grads_.end()) {
      it = grads_.emplace(n, std::vector<S>(n->value.size(), static_cast<S>(0))).first;
    }
    return it->second;
  }

  const std::vector<S>* find(const Node<S>* n) const {
    auto it = grads_.find(n);
    return it == grads_.end() ? nullptr : &it->second;
  }

  const std::vector<S>& at(const Node<S>* n) const {
    auto it = grads_.find(n);
    if (it == grads_.end()) throw std::logic_error("GradientMap: missing gradient");
    return it->second;
  }

  bool has(const Tensor<S>& t) const { return grads_.count(t.node()) != 0; }

  // Gradient of a tensor; leaves off the path get zeros.
  Tensor<S> grad_of(const Tensor<S>& t) const {
    auto it = grads_.find(t.node());
    if (it == grads_.end()) return Tensor<S>::zeros(t.shape());
    return Tensor<S>::from_data(t.shape(), it->second);
  }

 private:
  std::unordered_map<const Node<S>*, std::vector<S>> grads_;
};

template <class S>
GradientMap<S> backward(const ComputationRecord<S>& rec, const Tensor<S>& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  GradientMap<S> gm;
  gm.accum(loss.node())[0] = static_cast<S>(1);
  for (auto it = rec.nodes.rbegin(); it != rec.nodes.rend(); ++it) {
    Node<S>* n = *it;
    if (n->leaf || !n->requires_grad) continue;
    if (!gm.find(n)) continue;  // not on the path to the loss
    n->backprop(*n, gm);
  }
  return gm;
}

template <class S>
GradientMap<S> backward(const Tensor<S>& loss) {
  auto rec = record_graph(loss);
  return backward(rec, loss);
}

// ---------------------------------------------------------------------------
// Construction helper shared by all ops.

template <class S>
Tensor<S> make_op(const char* op, std::vector<int64_t> shape, std::vector<NodePtr<S>> inputs,
                  std::function<void(Node<S>&)> recompute,
                  std::function<void(Node<S>&, GradientMap<S>&)> backprop) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->value.resize(static_cast<size_t>(shape_numel(n->shape)));
  n->inputs = std::move(inputs);
  n->leaf = false;
  n->op = op;
  for (const auto& in : n->inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  n->recompute = std::move(recompute);
  n->backprop = std::move(backprop);
  n->recompute(*n);
  ensure_finite(n->value, op);
  return Tensor<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// Dense kernels. The inner loops keep per-element accumulation sequential;
// vectorization only spreads across independent output elements.

namespace detail {

// C[m x n] (+)= A[m x k] * B[k x n]
template <class S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, static_cast<S>(0));
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const S s = arow[p];
      const S* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

template <class S>
void transpose_copy(const S* a, S* at, int64_t m, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) at[j * m + i] = a[i * n + j];
}

// Zero-pads [C x H x W] by `pad` on each spatial side.
template <class S>
std::vector<S> pad_chw(const S* x, int64_t c, int64_t h, int64_t w, int64_t pad) {
  const int64_t hp = h + 2 * pad, wp = w + 2 * pad;
  std::vector<S> out(static_cast<size_t>(c * hp * wp), static_cast<S>(0));
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      std::copy(x + (ch * h + y) * w, x + (ch * h + y) * w + w,
                out.begin() + ((ch * hp + y + pad) * wp + pad));
  return out;
}

// col[(C*kh*kw) x (Ho*Wo)] from padded input [C x Hp x Wp].
template <class S>
void im2col(const S* xp, int64_t c, int64_t hp, int64_t wp, int64_t kh, int64_t kw,
            int64_t stride, int64_t ho, int64_t wo, S* col) {
  const int64_t hw = ho * wo;
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        S* dst = col + ((ch * kh + ky) * kw + kx) * hw;
        for (int64_t y = 0; y < ho; ++y) {
          const S* src = xp + (ch * hp + y * stride + ky) * wp + kx;
          if (stride == 1) {
            std::copy(src, src + wo, dst + y * wo);
          } else {
            for (int64_t x = 0; x < wo; ++x) dst[y * wo + x] = src[x * stride];
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col into a padded buffer [C x Hp x Wp].
template <class S>
void col2im(const S* col, int64_t c, int64_t hp, int64_t wp, int64_t kh, int64_t kw,
            int64_t stride, int64_t ho, int64_t wo, S* xp) {
  const int64_t hw = ho * wo;
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        const S* src = col + ((ch * kh + ky) * kw + kx) * hw;
        for (int64_t y = 0; y < ho; ++y) {
          S* dst = xp + (ch * hp + y * stride + ky) * wp + kx;
          for (int64_t x = 0; x < wo; ++x) dst[x * stride] += src[y * wo + x];
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  return make_op<S>(
      "matmul", {m, n}, {a.node_ptr(), b.node_ptr()},
      [m, k, n](Node<S>& self) {
        detail::gemm(self.inputs[0]->value.data(), self.inputs[1]->value.data(),
                     self.value.data(), m, k, n, false);
      },
      [m, k, n](Node<S>& self, GradientMap<S>& gm) {
        const std::vector<S>& gy = gm.at(&self);
        Node<S>* na = self.inputs[0].get();
        Node<S>* nb = self.inputs[1].get();
        if (na->requires_grad) {
          // dA = dC * B^T
          std::vector<S> bt(static_cast<size_t>(k * n));
          detail::transpose_copy(nb->value.data(), bt.data(), k, n);
          detail::gemm(gy.data(), bt.data(), gm.accum(na).data(), m, n, k, true);
        }
        if (nb->requires_grad) {
          // dB = A^T * dC
          std::vector<S>& gb = gm.accum(nb);
          const S* av = na->value.data();
          for (int64_t i = 0; i < m; ++i) {
            const S* gyrow = gy.data() + i * n;
            for (int64_t p = 0; p < k; ++p) {
              const S s = av[i * k + p];
              S* gbrow = gb.data() + p * n;
              for (int64_t j = 0; j < n; ++j) gbrow[j] += s * gyrow[j];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// conv2d: input [C x H x W], kernels [Co x C x kh x kw], optional bias [Co].
// Cross-correlation (no kernel flip).

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernels, const Tensor<S>& bias,
                 int64_t stride, int64_t padding) {
  if (x.rank() != 3 || kernels.rank() != 4) {
    throw std::invalid_argument("conv2d: expected input [CxHxW] and kernels [CoxCxKhxKw], got " +
                                shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t co = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != c) {
    throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(kernels.shape()));
  }
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw std::invalid_argument("conv2d: kernel " + shape_str(kernels.shape()) +
                                " larger than padded input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) +
                                " does not match output channels");
  }
  const int64_t ho = (h + 2 * padding - kh) / stride + 1;
  const int64_t wo = (w + 2 * padding - kw) / stride + 1;
  const int64_t ckk = c * kh * kw, hw = ho * wo;

  std::vector<NodePtr<S>> inputs = {x.node_ptr(), kernels.node_ptr()};
  if (bias.defined()) inputs.push_back(bias.node_ptr());
  const bool has_bias = bias.defined();

  return make_op<S>(
      "conv2d", {co, ho, wo}, std::move(inputs),
      [=](Node<S>& self) {
        const auto& xv = self.inputs[0]->value;
        auto xp = detail::pad_chw(xv.data(), c, h, w, padding);
        std::vector<S> col(static_cast<size_t>(ckk * hw));
        detail::im2col(xp.data(), c, h + 2 * padding, w + 2 * padding, kh, kw, stride, ho, wo,
                       col.data());
        detail::gemm(self.inputs[1]->value.data(), col.data(), self.value.data(), co, ckk, hw,
                     false);
        if (has_bias) {
          const auto& bv = self.inputs[2]->value;
          for (int64_t oc = 0; oc < co; ++oc) {
            S* row = self.value.data() + oc * hw;
            for (int64_t i = 0; i < hw; ++i) row[i] += bv[oc];
          }
        }
      },
      [=](Node<S>& self, GradientMap<S>& gm) {
        const std::vector<S>& gy = gm.at(&self);
        Node<S>* nx = self.inputs[0].get();
        Node<S>* nk = self.inputs[1].get();
        const int64_t hp = h + 2 * padding, wp = w + 2 * padding;
        if (nk->requires_grad) {
          const auto& xv = nx->value;
          auto xp = detail::pad_chw(xv.data(), c, h, w, padding);
          std::vector<S> col(static_cast<size_t>(ckk * hw));
          detail::im2col(xp.data(), c, hp, wp, kh, kw, stride, ho, wo, col.data());
          std::vector<S> colt(static_cast<size_t>(hw * ckk));
          detail::transpose_copy(col.data(), colt.data(), ckk, hw);
          detail::gemm(gy.data(), colt.data(), gm.accum(nk).data(), co, hw, ckk, true);
        }
        if (nx->requires_grad) {
          // dcol = K^T * dY, then scatter back through col2im.
          std::vector<S> kt(static_cast<size_t>(ckk * co));
          detail::transpose_copy(nk->value.data(), kt.data(), co, ckk);
          std::vector<S> dcol(static_cast<size_t>(ckk * hw));
          detail::gemm(kt.data(), gy.data(), dcol.data(), ckk, co, hw, false);
          std::vector<S> dxp(static_cast<size_t>(c * hp * wp), static_cast<S>(0));
          detail::col2im(dcol.data(), c, hp, wp, kh, kw, stride, ho, wo, dxp.data());
          std::vector<S>& gx = gm.accum(nx);
          for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t y = 0; y < h; ++y) {
              const S* src = dxp.data() + (ch * hp + y + padding) * wp + padding;
              S* dst = gx.data() + (ch * h + y) * w;
              for (int64_t xx = 0; xx < w; ++xx) dst[xx] += src[xx];
            }
        }
        if (has_bias && self.inputs[2]->requires_grad) {
          std::vector<S>& gb = gm.accum(self.inputs[2].get());
          for (int64_t oc = 0; oc < co; ++oc) {
            double acc = 0.0;
            const S* row = gy.data() + oc * hw;
            for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(row[i]);
            gb[oc] += static_cast<S>(acc);
          }
        }
      });
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernels, int64_t stride, int64_t padding) {
  return conv2d(x, kernels, Tensor<S>(), stride, padding);
}

// ---------------------------------------------------------------------------
// transposed_conv2d: input [C x H x W], kernels [C x Co x kh x kw], optional
// bias [Co]. Output spatial size: (H-1)*stride - 2*padding + kh.

template <class S>
Tensor<S> transposed_conv2d(const Tensor<S>& x, const Tensor<S>& kernels, const Tensor<S>& bias,
                            int64_t stride, int64_t padding) {
  if (x.rank() != 3 || kernels.rank() != 4) {
    throw std::invalid_argument(
        "transposed_conv2d: expected input [CxHxW] and kernels [CxCoxKhxKw], got " +
        shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
  }
  if (stride < 1) throw std::invalid_argument("transposed_conv2d: stride must be >= 1");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t co = kernels.dim(1), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(0) != c) {
    throw std::invalid_argument("transposed_conv2d: channel mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(kernels.shape()));
  }
  if (padding < 0 || padding > kh - 1 || padding > kw - 1) {
    throw std::invalid_argument("transposed_conv2d: padding must be in [0, kernel-1]");
  }
  const int64_t ho = (h - 1) * stride - 2 * padding + kh;
  const int64_t wo = (w - 1) * stride - 2 * padding + kw;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("transposed_conv2d: empty output");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw std::invalid_argument("transposed_conv2d: bias shape mismatch");
  }

  std::vector<NodePtr<S>> inputs = {x.node_ptr(), kernels.node_ptr()};
  if (bias.defined()) inputs.push_back(bias.node_ptr());
  const bool has_bias = bias.defined();

  return make_op<S>(
      "transposed_conv2d", {co, ho, wo}, std::move(inputs),
      [=](Node<S>& self) {
        // Scatter formulation: out[o, y*s+ky-p, x*s+kx-p] += in[c,y,x]*K[c,o,ky,kx].
        // Implemented over a full (un-cropped) buffer to stay branch-free.
        const auto& xv = self.inputs[0]->value;
        const auto& kv = self.inputs[1]->value;
        const int64_t hf = (h - 1) * stride + kh, wf = (w - 1) * stride + kw;
        std::vector<S> full(static_cast<size_t>(co * hf * wf), static_cast<S>(0));
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t oc = 0; oc < co; ++oc) {
            const S* kbase = kv.data() + (ch * co + oc) * kh * kw;
            for (int64_t y = 0; y < h; ++y) {
              for (int64_t ky = 0; ky < kh; ++ky) {
                S* orow = full.data() + (oc * hf + y * stride + ky) * wf;
                const S* xrow = xv.data() + (ch * h + y) * w;
                const S* krow = kbase + ky * kw;
                for (int64_t kx = 0; kx < kw; ++kx) {
                  const S kval = krow[kx];
                  for (int64_t xx = 0; xx < w; ++xx) orow[xx * stride + kx] += kval * xrow[xx];
                }
              }
            }
          }
        }
        for (int64_t oc = 0; oc < co; ++oc) {
          const S b = has_bias ? self.inputs[2]->value[oc] : static_cast<S>(0);
          for (int64_t y = 0; y < ho; ++y) {
            const S* src = full.data() + (oc * hf + y + padding) * wf + padding;
            S* dst = self.value.data() + (oc * ho + y) * wo;
            for (int64_t xx = 0; xx < wo; ++xx) dst[xx] = src[xx] + b;
          }
        }
      },
      [=](Node<S>& self, GradientMap<S>& gm) {
        const std::vector<S>& gy = gm.at(&self);
        Node<S>* nx = self.inputs[0].get();
        Node<S>* nk = self.inputs[1].get();
        // Embed dY into the padded frame so strided gathers line up.
        const int64_t hp = ho + 2 * padding, wp = wo + 2 * padding;
        std::vector<S> gyp = detail::pad_chw(gy.data(), co, ho, wo, padding);
        if (nx->requires_grad) {
          // dX[c,y,x] = sum_{o,ky,kx} dYp[o, y*s+ky, x*s+kx] * K[c,o,ky,kx]
          const int64_t okk = co * kh * kw;
          std::vector<S> col(static_cast<size_t>(okk * h * w));
          detail::im2col(gyp.data(), co, hp, wp, kh, kw, stride, h, w, col.data());
          detail::gemm(nk->value.data(), col.data(), gm.accum(nx).data(), c, okk, h * w, true);
        }
        if (nk->requires_grad) {
          // dK[c,o,ky,kx] = sum_{y,x} X[c,y,x] * dYp[o, y*s+ky, x*s+kx]
          const int64_t okk = co * kh * kw;
          std::vector<S> col(static_cast<size_t>(okk * h * w));
          detail::im2col(gyp.data(), co, hp, wp, kh, kw, stride, h, w, col.data());
          std::vector<S> colt(static_cast<size_t>(h * w * okk));
          detail::transpose_copy(col.data(), colt.data(), okk, h * w);
          detail::gemm(nx->value.data(), colt.data(), gm.accum(nk).data(), c, h * w, okk, true);
        }
        if (has_bias && self.inputs[2]->requires_grad) {
          std::vector<S>& gb = gm.accum(self.inputs[2].get());
          for (int64_t oc = 0; oc < co; ++oc) {
            double acc = 0.0;
            const S* row = gy.data() + oc * ho * wo;
            for (int64_t i = 0; i < ho * wo; ++i) acc += static_cast<double>(row[i]);
            gb[oc] += static_cast<S>(acc);
          }
        }
      });
}

template <class S>
Tensor<S> transposed_conv2d(const Tensor<S>& x, const Tensor<S>& kernels, int64_t stride,
                            int64_t padding = 0) {
  return transposed_conv2d(x, kernels, Tensor<S>(), stride, padding);
}

// ---------------------------------------------------------------------------
// softmax along an axis, stabilized by max subtraction.

template <class S>
Tensor<S> softmax(const Tensor<S>& x, int64_t axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) {
    throw std::invalid_argument("softmax: axis out of range for " + shape_str(x.shape()));
  }
  int64_t outer = 1, inner = 1;
  const int64_t n = x.dim(static_cast<size_t>(axis));
  for (int64_t i = 0; i < axis; ++i) outer *= x.dim(static_cast<size_t>(i));
  for (int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(static_cast<size_t>(i));

  return make_op<S>(
      "softmax", x.shape(), {x.node_ptr()},
      [outer, n, inner](Node<S>& self) {
        const auto& xv = self.inputs[0]->value;
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * n * inner + i;
            S mx = xv[base];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            double sum = 0.0;
            for (int64_t j = 0; j < n; ++j) {
              const S e = static_cast<S>(std::exp(static_cast<double>(xv[base + j * inner] - mx)));
              self.value[base + j * inner] = e;
              sum += static_cast<double>(e);
            }
            const S inv = static_cast<S>(1.0 / sum);
            for (int64_t j = 0; j < n; ++j) self.value[base + j * inner] *= inv;
          }
        }
      },
      [outer, n, inner](Node<S>& self, GradientMap<S>& gm) {
        const std::vector<S>& gy = gm.at(&self);
        Node<S>* nx = self.inputs[0].get();
        if (!nx->requires_grad) return;
        std::vector<S>& gx = gm.accum(nx);
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * n * inner + i;
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j) {
              dot += static_cast<double>(gy[base + j * inner]) *
                     static_cast<double>(self.value[base + j * inner]);
            }
            for (int64_t j = 0; j < n; ++j) {
              const int64_t idx = base + j * inner;
              gx[idx] += self.value[idx] * (gy[idx] - static_cast<S>(dot));
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise suite.

namespace detail {
template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}
}  // namespace detail

// add supports equal shapes, or a trailing-dimension row vector broadcast
// (bias add): [.. x k] + [k].
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const bool row_broadcast =
      b.rank() == 1 && a.rank() >= 1 && a.shape() != b.shape() && a.dim(a.rank() - 1) == b.dim(0);
  if (!row_broadcast) detail::check_same_shape(a, b, "add");
  const int64_t k = b.size();
  return make_op<S>(
      "add", a.shape(), {a.node_ptr(), b.node_ptr()},
      [row_broadcast, k](Node<S>& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (row_broadcast) {
          const int64_t rows = self.size() / k;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < k; ++j) self.value[r * k + j] = av[r * k + j] + bv[j];
        } else {
          for (int64_t i = 0; i < self.size(); ++i) self.value[i] = av[i] + bv[i];
        }
      },
      [row_broadcast, k](Node<S>& self, GradientMap<S>& gm) {
        const std::vector<S>& gy = gm.at(&self);
        Node<S>* na = self.inputs[0].get();
        Node<S>* nb = self.inputs[1].get();
        if (na->requires_grad) {
          std::vector<S>& ga = gm.accum(na);
          for (int64_t i = 0; i < self.size(); ++i) ga[i] += gy[i];
        }
        if (nb->requires_grad) {
          std::vector<S>& gb = gm.accum(nb);
          if (row_broadcast) {
            const int64_t rows = self.size() / k;
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t j = 0; j < k; ++j) gb[j] += gy[r * k + j];
          } else {
            for (int64_t i = 0; i < self.size(); ++i) gb[i] += gy[i];
          }
        }
      });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  return make_op<S>(
      "sub", a.shape(), {a.node_ptr(), b.node_ptr()},
      [](Node<S>& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        for (int64_t i = 0; i < self.size(); ++i) self.value[i] = av[i] - bv[i];
      },
      [](Node<S>& self, GradientMap<S>& gm) {
        const std::vector<S>& gy = gm.at(&self);
        if (self.inputs[0]->requires_grad) {
          std::vector<S>& ga = gm.accum(self.inputs[0].get());
          for (int64_t i = 0; i < self.size(); ++i) ga[i] += gy[i];
        }
        if (self.inputs[1]->requires_grad) {
          std::vector<S>& gb = gm.accum(self.inputs[1].get());
          for (int64_t i = 0; i < self.size(); ++i) gb[i] -= gy[i];
        }
      });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  return make_op<S>(
      "mul", a.shape(), {a.node_ptr(), b.node_ptr()},
      [](Node<S>& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        for (int64_t i = 0; i < self.size(); ++i) self.value[i] = av[i] * bv[i];
      },
      [](Node<S>& self, GradientMap<S>& gm) {
        const std::vector<S>& gy = gm.at(&self);
        Node<S>* na = self.inputs[0].get();
        Node<S>* nb = self.inputs[1].get();
        if (na->requires_grad) {
          std::vector<S>& ga = gm.accum(na);
          const auto& bv = nb->value;
          for (int64_t i = 0; i < self.size(); ++i) ga[i] += gy[i] * bv[i];
        }
        if (nb->requires_grad) {
          std::vector<S>& gb = gm.accum(nb);
          const auto& av = na->value;
          for (int64_t i = 0; i < self.size(); ++i) gb[i] += gy[i] * av[i];
        }
      });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return make_op<S>(
      "scale", a.shape(), {a.node_ptr()},
      [c](Node<S>& self) {
        const auto& av = self.inputs[0]->value;
        for (int64_t i = 0; i < self.size(); ++i) self.value[i] = av[i] * c;
      },
      [c](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const std::vector<S>& gy = gm.at(&self);
        std::vector<S>& ga = gm.accum(self.inputs[0].get());
        for (int64_t i = 0; i < self.size(); ++i) ga[i] += gy[i] * c;
      });
}

namespace detail {
inline constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluCubic = 0.044715;
}  // namespace detail

// GELU, tanh approximation.
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  return make_op<S>(
      "gelu", x.shape(), {x.node_ptr()},
      [](Node<S>& self) {
        const auto& xv = self.inputs[0]->value;
        for (int64_t i = 0; i < self.size(); ++i) {
          const double v = static_cast<double>(xv[i]);
          const double t = std::tanh(detail::kGeluScale * (v + detail::kGeluCubic * v * v * v));
          self.value[i] = static_cast<S>(0.5 * v * (1.0 + t));
        }
      },
      [](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const std::vector<S>& gy = gm.at(&self);
        std::vector<S>& gx = gm.accum(self.inputs[0].get());
        const auto& xv = self.inputs[0]->value;
        for (int64_t i = 0; i < self.size(); ++i) {
          const double v = static_cast<double>(xv[i]);
          const double t = std::tanh(detail::kGeluScale * (v + detail::kGeluCubic * v * v * v));
          const double du = detail::kGeluScale * (1.0 + 3.0 * detail::kGeluCubic * v * v);
          const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
          gx[i] += gy[i] * static_cast<S>(d);
        }
      });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return make_op<S>(
      "sigmoid", x.shape(), {x.node_ptr()},
      [](Node<S>& self) {
        const auto& xv = self.inputs[0]->value;
        for (int64_t i = 0; i < self.size(); ++i) {
          const double v = static_cast<double>(xv[i]);
          const double y = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                    : std::exp(v) / (1.0 + std::exp(v));
          self.value[i] = static_cast<S>(y);
        }
      },
      [](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const std::vector<S>& gy = gm.at(&self);
        std::vector<S>& gx = gm.accum(self.inputs[0].get());
        for (int64_t i = 0; i < self.size(); ++i) {
          const S y = self.value[i];
          gx[i] += gy[i] * y * (static_cast<S>(1) - y);
        }
      });
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  return make_op<S>(
      "sum", {1}, {x.node_ptr()},
      [](Node<S>& self) {
        double acc = 0.0;
        for (const S& v : self.inputs[0]->value) acc += static_cast<double>(v);
        self.set_scalar(acc);
      },
      [](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const S g = gm.at(&self)[0];
        std::vector<S>& gx = gm.accum(self.inputs[0].get());
        for (S& v : gx) v += g;
      });
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  const int64_t n = x.size();
  return make_op<S>(
      "mean", {1}, {x.node_ptr()},
      [n](Node<S>& self) {
        double acc = 0.0;
        for (const S& v : self.inputs[0]->value) acc += static_cast<double>(v);
        self.set_scalar(acc / static_cast<double>(n));
      },
      [n](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const S g = gm.at(&self)[0] / static_cast<S>(n);
        std::vector<S>& gx = gm.accum(self.inputs[0].get());
        for (S& v : gx) v += g;
      });
}

// Population variance over all elements.
template <class S>
Tensor<S> variance(const Tensor<S>& x) {
  const int64_t n = x.size();
  return make_op<S>(
      "variance", {1}, {x.node_ptr()},
      [n](Node<S>& self) {
        const auto& xv = self.inputs[0]->value;
        double mu = 0.0;
        for (const S& v : xv) mu += static_cast<double>(v);
        mu /= static_cast<double>(n);
        double acc = 0.0;
        for (const S& v : xv) {
          const double d = static_cast<double>(v) - mu;
          acc += d * d;
        }
        self.set_scalar(acc / static_cast<double>(n));
      },
      [n](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const auto& xv = self.inputs[0]->value;
        double mu = 0.0;
        for (const S& v : xv) mu += static_cast<double>(v);
        mu /= static_cast<double>(n);
        const double g = static_cast<double>(gm.at(&self)[0]) * 2.0 / static_cast<double>(n);
        std::vector<S>& gx = gm.accum(self.inputs[0].get());
        for (int64_t i = 0; i < n; ++i) {
          gx[i] += static_cast<S>(g * (static_cast<double>(xv[i]) - mu));
        }
      });
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<int64_t> new_shape) {
  if (shape_numel(new_shape) != x.size()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " +
                                shape_str(new_shape) + " changes element count");
  }
  return make_op<S>(
      "reshape", std::move(new_shape), {x.node_ptr()},
      [](Node<S>& self) { self.value = self.inputs[0]->value; },
      [](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const std::vector<S>& gy = gm.at(&self);
        std::vector<S>& gx = gm.accum(self.inputs[0].get());
        for (int64_t i = 0; i < self.size(); ++i) gx[i] += gy[i];
      });
}

// 2D transpose.
template <class S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() != 2) {
    throw std::invalid_argument("transpose: expected a matrix, got " + shape_str(x.shape()));
  }
  const int64_t m = x.dim(0), n = x.dim(1);
  return make_op<S>(
      "transpose", {n, m}, {x.node_ptr()},
      [m, n](Node<S>& self) {
        detail::transpose_copy(self.inputs[0]->value.data(), self.value.data(), m, n);
      },
      [m, n](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const std::vector<S>& gy = gm.at(&self);
        std::vector<S>& gx = gm.accum(self.inputs[0].get());
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) gx[i * n + j] += gy[j * m + i];
      });
}

template <class S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int64_t axis) {
  if (a.rank() != b.rank()) {
    throw std::invalid_argument("concat: rank mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  if (axis < 0) axis += a.rank();
  if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("concat: axis out of range");
  for (int64_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(static_cast<size_t>(i)) != b.dim(static_cast<size_t>(i))) {
      throw std::invalid_argument("concat: shapes " + shape_str(a.shape()) + " and " +
                                  shape_str(b.shape()) + " differ off-axis");
    }
  }
  std::vector<int64_t> out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] += b.dim(static_cast<size_t>(axis));
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= a.dim(static_cast<size_t>(i));
  for (int64_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(static_cast<size_t>(i));
  const int64_t na = a.dim(static_cast<size_t>(axis)) * inner;
  const int64_t nb = b.dim(static_cast<size_t>(axis)) * inner;

  return make_op<S>(
      "concat", std::move(out_shape), {a.node_ptr(), b.node_ptr()},
      [outer, na, nb](Node<S>& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        for (int64_t o = 0; o < outer; ++o) {
          std::copy(av.begin() + o * na, av.begin() + (o + 1) * na,
                    self.value.begin() + o * (na + nb));
          std::copy(bv.begin() + o * nb, bv.begin() + (o + 1) * nb,
                    self.value.begin() + o * (na + nb) + na);
        }
      },
      [outer, na, nb](Node<S>& self, GradientMap<S>& gm) {
        const std::vector<S>& gy = gm.at(&self);
        if (self.inputs[0]->requires_grad) {
          std::vector<S>& ga = gm.accum(self.inputs[0].get());
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < na; ++i) ga[o * na + i] += gy[o * (na + nb) + i];
        }
        if (self.inputs[1]->requires_grad) {
          std::vector<S>& gb = gm.accum(self.inputs[1].get());
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < nb; ++i) gb[o * nb + i] += gy[o * (na + nb) + na + i];
        }
      });
}

template <class S>
Tensor<S> slice(const Tensor<S>& x, int64_t axis, int64_t start, int64_t len) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("slice: axis out of range");
  const int64_t n = x.dim(static_cast<size_t>(axis));
  if (start < 0 || len <= 0 || start + len > n) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of bounds for axis size " +
                                std::to_string(n));
  }
  std::vector<int64_t> out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x.dim(static_cast<size_t>(i));
  for (int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(static_cast<size_t>(i));

  return make_op<S>(
      "slice", std::move(out_shape), {x.node_ptr()},
      [outer, inner, n, start, len](Node<S>& self) {
        const auto& xv = self.inputs[0]->value;
        for (int64_t o = 0; o < outer; ++o) {
          std::copy(xv.begin() + (o * n + start) * inner, xv.begin() + (o * n + start + len) * inner,
                    self.value.begin() + o * len * inner);
        }
      },
      [outer, inner, n, start, len](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const std::vector<S>& gy = gm.at(&self);
        std::vector<S>& gx = gm.accum(self.inputs[0].get());
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < len * inner; ++i)
            gx[(o * n + start) * inner + i] += gy[o * len * inner + i];
      });
}

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension of a [rows x k] tensor, with
// learnable per-feature gain/shift. Population variance.

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps) {
  if (x.rank() != 2) {
    throw std::invalid_argument("layer_norm: expected [rows x k], got " + shape_str(x.shape()));
  }
  const int64_t rows = x.dim(0), k = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != k || beta.rank() != 1 || beta.dim(0) != k) {
    throw std::invalid_argument("layer_norm: gamma/beta must be [k] with k=" + std::to_string(k));
  }
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");

  return make_op<S>(
      "layer_norm", x.shape(), {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
      [rows, k, eps](Node<S>& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& gv = self.inputs[1]->value;
        const auto& bv = self.inputs[2]->value;
        for (int64_t r = 0; r < rows; ++r) {
          const S* row = xv.data() + r * k;
          double mu = 0.0;
          for (int64_t j = 0; j < k; ++j) mu += static_cast<double>(row[j]);
          mu /= static_cast<double>(k);
          double var = 0.0;
          for (int64_t j = 0; j < k; ++j) {
            const double d = static_cast<double>(row[j]) - mu;
            var += d * d;
          }
          var /= static_cast<double>(k);
          const double inv = 1.0 / std::sqrt(var + eps);
          S* out = self.value.data() + r * k;
          for (int64_t j = 0; j < k; ++j) {
            const double xhat = (static_cast<double>(row[j]) - mu) * inv;
            out[j] = static_cast<S>(static_cast<double>(gv[j]) * xhat + static_cast<double>(bv[j]));
          }
        }
      },
      [rows, k, eps](Node<S>& self, GradientMap<S>& gm) {
        const std::vector<S>& gy = gm.at(&self);
        Node<S>* nx = self.inputs[0].get();
        Node<S>* ng = self.inputs[1].get();
        Node<S>* nb = self.inputs[2].get();
        const auto& xv = nx->value;
        const auto& gv = ng->value;
        std::vector<S>* gx = nx->requires_grad ? &gm.accum(nx) : nullptr;
        std::vector<S>* gg = ng->requires_grad ? &gm.accum(ng) : nullptr;
        std::vector<S>* gb = nb->requires_grad ? &gm.accum(nb) : nullptr;
        std::vector<double> xhat(static_cast<size_t>(k));
        for (int64_t r = 0; r < rows; ++r) {
          const S* row = xv.data() + r * k;
          const S* gyrow = gy.data() + r * k;
          double mu = 0.0;
          for (int64_t j = 0; j < k; ++j) mu += static_cast<double>(row[j]);
          mu /= static_cast<double>(k);
          double var = 0.0;
          for (int64_t j = 0; j < k; ++j) {
            const double d = static_cast<double>(row[j]) - mu;
            var += d * d;
          }
          var /= static_cast<double>(k);
          const double inv = 1.0 / std::sqrt(var + eps);
          for (int64_t j = 0; j < k; ++j) xhat[j] = (static_cast<double>(row[j]) - mu) * inv;
          if (gb) {
            for (int64_t j = 0; j < k; ++j) (*gb)[j] += gyrow[j];
          }
          if (gg) {
            for (int64_t j = 0; j < k; ++j)
              (*gg)[j] += static_cast<S>(static_cast<double>(gyrow[j]) * xhat[j]);
          }
          if (gx) {
            double m1 = 0.0, m2 = 0.0;
            for (int64_t j = 0; j < k; ++j) {
              const double g = static_cast<double>(gyrow[j]) * static_cast<double>(gv[j]);
              m1 += g;
              m2 += g * xhat[j];
            }
            m1 /= static_cast<double>(k);
            m2 /= static_cast<double>(k);
            S* gxrow = (*gx).data() + r * k;
            for (int64_t j = 0; j < k; ++j) {
              const double g = static_cast<double>(gyrow[j]) * static_cast<double>(gv[j]);
              gxrow[j] += static_cast<S>((g - m1 - xhat[j] * m2) * inv);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Binary cross entropy, mean over all elements; predictions are clamped to
// [1e-7, 1 - 1e-7] before the logs. The target must not require gradients.

template <class S>
Tensor<S> bce_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  detail::check_same_shape(pred, target, "bce_loss");
  if (target.requires_grad()) {
    throw std::invalid_argument("bce_loss: target must not require gradients");
  }
  const int64_t n = pred.size();
  return make_op<S>(
      "bce_loss", {1}, {pred.node_ptr(), target.node_ptr()},
      [n](Node<S>& self) {
        const double lo = 1e-7, hi = 1.0 - 1e-7;
        const auto& pv = self.inputs[0]->value;
        const auto& tv = self.inputs[1]->value;
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          double p = static_cast<double>(pv[i]);
          p = p < lo ? lo : (p > hi ? hi : p);
          const double t = static_cast<double>(tv[i]);
          acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
        }
        self.set_scalar(acc / static_cast<double>(n));
      },
      [n](Node<S>& self, GradientMap<S>& gm) {
        if (!self.inputs[0]->requires_grad) return;
        const double lo = 1e-7, hi = 1.0 - 1e-7;
        const double g = static_cast<double>(gm.at(&self)[0]) / static_cast<double>(n);
        std::vector<S>& gp = gm.accum(self.inputs[0].get());
        const auto& pv = self.inputs[0]->value;
        const auto& tv = self.inputs[1]->value;
        for (int64_t i = 0; i < n; ++i) {
          const double p = static_cast<double>(pv[i]);
          if (p <= lo || p >= hi) continue;  // clamp region: derivative is zero
          const double t = static_cast<double>(tv[i]);
          gp[i] += static_cast<S>(g * (p - t) / (p * (1.0 - p)));
        }
      });
}

// ---------------------------------------------------------------------------
// Central-difference gradient checker. Returns the worst relative
// discrepancy max(|a - n| / max(|a|, |n|, floor)) over the checked
// coordinates. `fn` must rebuild the graph from the current leaf values.

template <class S>
struct GradCheckOptions {
  double eps = std::is_same_v<S, float> ? 6e-3 : 1e-5;
  // Per-coordinate relative error is |a - n| / max(|a|, |n|, f) with
  // f = max(floor, floor_grad_scale * max_j |a_j|), so near-zero coordinates
  // do not drown in finite-difference noise. floor_grad_scale = 1 gives the
  // infinity-norm-relative metric appropriate for deep float32 compositions
  // where rounding noise accumulates along the perturbed path.
  double floor = std::is_same_v<S, float> ? 5e-2 : 1e-4;
  double floor_grad_scale = std::is_same_v<S, float> ? 0.05 : 0.0;
  int64_t max_coords_per_tensor = -1;  // -1: every coordinate
  uint64_t seed = 0x5eedULL;
};

template <class S>
double grad_check(const std::function<Tensor<S>()>& fn, std::vector<Tensor<S>> wrt,
                  GradCheckOptions<S> opt = {}) {
  Tensor<S> loss = fn();
  if (loss.size() != 1) throw std::invalid_argument("grad_check: fn must return a scalar");
  GradientMap<S> gm = backward(loss);

  double worst = 0.0;
  uint64_t rng = opt.seed;
  auto next = [&rng]() {
    rng ^= rng << 13;
    rng ^= rng >> 7;
    rng ^= rng << 17;
    return rng;
  };
  for (Tensor<S>& t : wrt) {
    if (!t.requires_grad()) {
      throw std::invalid_argument("grad_check: tensor does not require gradients");
    }
    Tensor<S> analytic = gm.grad_of(t);
    const int64_t total = t.size();
    std::vector<int64_t> coords;
    if (opt.max_coords_per_tensor < 0 || total <= opt.max_coords_per_tensor) {
      coords.resize(static_cast<size_t>(total));
      for (int64_t i = 0; i < total; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int64_t i = 0; i < opt.max_coords_per_tensor; ++i) {
        coords.push_back(static_cast<int64_t>(next() % static_cast<uint64_t>(total)));
      }
    }
    double grad_scale = 0.0;
    for (const S& g : analytic.data()) {
      grad_scale = std::max(grad_scale, std::fabs(static_cast<double>(g)));
    }
    const double floor = std::max(opt.floor, opt.floor_grad_scale * grad_scale);
    std::vector<S>& data = t.mutable_data();
    for (int64_t idx : coords) {
      const S saved = data[idx];
      const double h = opt.eps * std::max(1.0, std::fabs(static_cast<double>(saved)));
      data[idx] = static_cast<S>(static_cast<double>(saved) + h);
      const double fp = fn().item_precise();
      data[idx] = static_cast<S>(static_cast<double>(saved) - h);
      const double fm = fn().item_precise();
      data[idx] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic.data()[idx]);
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), floor});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

template <class S>
double grad_check(const std::function<Tensor<S>()>& fn, const Tensor<S>& input,
                  double eps) {
  GradCheckOptions<S> opt;
  opt.eps = eps;
  return grad_check<S>(fn, std::vector<Tensor<S>>{input}, opt);
}

}  // namespace stereovit
