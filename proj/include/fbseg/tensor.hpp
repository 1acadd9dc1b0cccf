#pragma once

// Dense 4-D tensors with reverse-mode autodiff. The graph is dynamic:
// every op allocates an output node that keeps shared_ptr references to
// its inputs and a closure implementing the backward rule. backward()
// topologically sorts the reachable graph and runs the closures once.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "fbseg/common.hpp"

namespace fbseg {

namespace detail {

template <typename T>
struct Node {
  Shape shape{0, 0, 0, 0};
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives the node itself so rules can read output data/grad without
  // creating an ownership cycle.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : n_(std::make_shared<detail::Node<T>>()) {
    for (int d : shape)
      if (d < 0) throw DimensionError("negative dimension in " + shape_str(shape));
    n_->shape = shape;
    n_->data.assign(static_cast<size_t>(shape_numel(shape)), T(0));
    n_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(shape, requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t(shape, requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t(shape, requires_grad);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      throw DimensionError("value count does not match shape " + shape_str(shape));
    t.node()->data = std::move(values);
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return full({1, 1, 1, 1}, value, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::int64_t numel() const { return shape_numel(n_->shape); }

  std::vector<T>& data() { return n_->data; }
  const std::vector<T>& data() const { return n_->data; }

  T& at(int n, int c, int h, int w) { return n_->data[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return n_->data[index(n, c, h, w)]; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->data[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return n_->grad.size() == n_->data.size(); }
  std::vector<T>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw UsageError("grad accessed before backward");
    return n_->grad;
  }
  void zero_grad() {
    if (has_grad()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  // Leaf copy of the current values; no lineage, no grad requirement.
  Tensor detach() const {
    Tensor t(shape());
    t.data() = data();
    return t;
  }

  void backward() const {
    if (numel() != 1)
      throw UsageError("backward() requires a scalar loss, got " + shape_str(shape()));
    if (!n_->requires_grad && n_->parents.empty())
      throw UsageError("backward() on a tensor not produced by the tape");
    std::vector<detail::Node<T>*> order = topo_order();
    n_->ensure_grad();
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* node = *it;
      if (node->backward && node->grad.size() == node->data.size()) node->backward(*node);
    }
  }

  NodePtr node() const { return n_; }

  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

 private:
  size_t index(int n, int c, int h, int w) const {
    const Shape& s = n_->shape;
    return ((static_cast<size_t>(n) * s[1] + c) * s[2] + h) * s[3] + w;
  }

  std::vector<detail::Node<T>*> topo_order() const {
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    // Iterative post-order DFS.
    struct Frame {
      detail::Node<T>* node;
      size_t next_parent;
    };
    std::vector<Frame> stack{{n_.get(), 0}};
    seen.insert(n_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        detail::Node<T>* p = f.node->parents[f.next_parent++].get();
        if (seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
    return order;
  }

  NodePtr n_;
};

namespace detail {

template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.requires_grad() || !t.node()->parents.empty();
}

template <typename T, typename... Ts>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::function<void(Node<T>&)> bw,
                      const Ts&... inputs) {
  auto n = std::make_shared<Node<T>>();
  n->shape = shape;
  n->data = std::move(data);
  const bool any = (wants_grad(inputs) || ...);
  if (any) {
    n->requires_grad = true;
    (n->parents.push_back(inputs.node()), ...);
    n->backward = std::move(bw);
  }
  return Tensor<T>(n);
}

template <typename T>
void accumulate(Node<T>& parent, size_t i, T v) {
  parent.grad[i] += v;
}

// Prepares parent grad buffers before a backward rule writes into them.
template <typename T>
void prep_parents(Node<T>& self) {
  for (auto& p : self.parents) p->ensure_grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return detail::make_result<T>(
      a.shape(), std::move(out),
      [](detail::Node<T>& self) {
        detail::prep_parents(self);
        for (size_t i = 0; i < self.grad.size(); ++i) {
          self.parents[0]->grad[i] += self.grad[i];
          self.parents[1]->grad[i] += self.grad[i];
        }
      },
      a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return detail::make_result<T>(
      a.shape(), std::move(out),
      [](detail::Node<T>& self) {
        detail::prep_parents(self);
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        for (size_t i = 0; i < self.grad.size(); ++i) {
          self.parents[0]->grad[i] += self.grad[i] * bv[i];
          self.parents[1]->grad[i] += self.grad[i] * av[i];
        }
      },
      a, b);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data());
  for (T& v : out) v = std::max(v, T(0));
  return detail::make_result<T>(
      x.shape(), std::move(out),
      [](detail::Node<T>& self) {
        detail::prep_parents(self);
        for (size_t i = 0; i < self.grad.size(); ++i)
          if (self.data[i] > T(0)) self.parents[0]->grad[i] += self.grad[i];
      },
      x);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.data());
  for (T& v : out) v = T(1) / (T(1) + std::exp(-v));
  return detail::make_result<T>(
      x.shape(), std::move(out),
      [](detail::Node<T>& self) {
        detail::prep_parents(self);
        for (size_t i = 0; i < self.grad.size(); ++i) {
          T y = self.data[i];
          self.parents[0]->grad[i] += self.grad[i] * y * (T(1) - y);
        }
      },
      x);
}

// out = s*x + f, with s a (1,1,1,1) scale. s==0 copies f's bits so the
// block is an exact identity at initialization.
template <typename T>
Tensor<T> scale_add(const Tensor<T>& s, const Tensor<T>& x, const Tensor<T>& f) {
  if (s.numel() != 1) throw DimensionError("scale_add: scale must be a scalar");
  check_same_shape(x, f, "scale_add");
  const T sv = s.data()[0];
  std::vector<T> out;
  if (sv == T(0)) {
    out = f.data();
  } else {
    out = f.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += sv * x.data()[i];
  }
  return detail::make_result<T>(
      x.shape(), std::move(out),
      [](detail::Node<T>& self) {
        detail::prep_parents(self);
        const T sv = self.parents[0]->data[0];
        const auto& xv = self.parents[1]->data;
        T gs = T(0);
        for (size_t i = 0; i < self.grad.size(); ++i) {
          gs += self.grad[i] * xv[i];
          self.parents[1]->grad[i] += self.grad[i] * sv;
          self.parents[2]->grad[i] += self.grad[i];
        }
        self.parents[0]->grad[0] += gs;
      },
      s, x, f);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>(
      Shape{1, 1, 1, 1}, std::vector<T>{acc},
      [](detail::Node<T>& self) {
        detail::prep_parents(self);
        for (size_t i = 0; i < self.parents[0]->grad.size(); ++i)
          self.parents[0]->grad[i] += self.grad[0];
      },
      x);
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
  std::vector<T> out(x.data());
  return detail::make_result<T>(
      shape, std::move(out),
      [](detail::Node<T>& self) {
        detail::prep_parents(self);
        for (size_t i = 0; i < self.grad.size(); ++i)
          self.parents[0]->grad[i] += self.grad[i];
      },
      x);
}

// Swaps the last two axes independently for every (n, c) slice.
template <typename T>
Tensor<T> transpose_mat(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Shape os{s[0], s[1], s[3], s[2]};
  std::vector<T> out(x.data().size());
  const int H = s[2], W = s[3];
  for (int nc = 0; nc < s[0] * s[1]; ++nc) {
    const T* src = x.data().data() + static_cast<size_t>(nc) * H * W;
    T* dst = out.data() + static_cast<size_t>(nc) * H * W;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) dst[static_cast<size_t>(w) * H + h] = src[static_cast<size_t>(h) * W + w];
  }
  return detail::make_result<T>(
      os, std::move(out),
      [H, W](detail::Node<T>& self) {
        detail::prep_parents(self);
        auto& g = self.parents[0]->grad;
        const int planes = self.shape[0] * self.shape[1];
        for (int nc = 0; nc < planes; ++nc) {
          const T* go = self.grad.data() + static_cast<size_t>(nc) * H * W;
          T* gi = g.data() + static_cast<size_t>(nc) * H * W;
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
              gi[static_cast<size_t>(h) * W + w] += go[static_cast<size_t>(w) * H + h];
        }
      },
      x);
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw DimensionError("concat_channels: incompatible shapes " + shape_str(sa) + " vs " +
                         shape_str(sb));
  Shape os{sa[0], sa[1] + sb[1], sa[2], sa[3]};
  std::vector<T> out(shape_numel(os));
  const size_t plane = static_cast<size_t>(sa[2]) * sa[3];
  const size_t ca = static_cast<size_t>(sa[1]) * plane;
  const size_t cb = static_cast<size_t>(sb[1]) * plane;
  for (int n = 0; n < sa[0]; ++n) {
    std::copy_n(a.data().data() + n * ca, ca, out.data() + n * (ca + cb));
    std::copy_n(b.data().data() + n * cb, cb, out.data() + n * (ca + cb) + ca);
  }
  return detail::make_result<T>(
      os, std::move(out),
      [ca, cb](detail::Node<T>& self) {
        detail::prep_parents(self);
        for (int n = 0; n < self.shape[0]; ++n) {
          const T* g = self.grad.data() + n * (ca + cb);
          T* ga = self.parents[0]->grad.data() + n * ca;
          T* gb = self.parents[1]->grad.data() + n * cb;
          for (size_t i = 0; i < ca; ++i) ga[i] += g[i];
          for (size_t i = 0; i < cb; ++i) gb[i] += g[ca + i];
        }
      },
      a, b);
}

// ---------------------------------------------------------------------------
// Matrix ops. Matrices live in the last two axes; the batch axis must match
// and the channel axis must be 1.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[1] != 1 || sb[1] != 1 || sa[0] != sb[0] || sa[3] != sb[2])
    throw DimensionError("matmul: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  const int N = sa[0], M = sa[2], K = sa[3], L = sb[3];
  Shape os{N, 1, M, L};
  std::vector<T> out(shape_numel(os), T(0));
  for (int n = 0; n < N; ++n) {
    const T* A = a.data().data() + static_cast<size_t>(n) * M * K;
    const T* B = b.data().data() + static_cast<size_t>(n) * K * L;
    T* C = out.data() + static_cast<size_t>(n) * M * L;
    for (int i = 0; i < M; ++i)
      for (int k = 0; k < K; ++k) {
        const T av = A[static_cast<size_t>(i) * K + k];
        const T* Bk = B + static_cast<size_t>(k) * L;
        T* Ci = C + static_cast<size_t>(i) * L;
        for (int j = 0; j < L; ++j) Ci[j] += av * Bk[j];
      }
  }
  return detail::make_result<T>(
      os, std::move(out),
      [N, M, K, L](detail::Node<T>& self) {
        detail::prep_parents(self);
        const auto& A = self.parents[0]->data;
        const auto& B = self.parents[1]->data;
        auto& gA = self.parents[0]->grad;
        auto& gB = self.parents[1]->grad;
        for (int n = 0; n < N; ++n) {
          const T* G = self.grad.data() + static_cast<size_t>(n) * M * L;
          const T* An = A.data() + static_cast<size_t>(n) * M * K;
          const T* Bn = B.data() + static_cast<size_t>(n) * K * L;
          T* gAn = gA.data() + static_cast<size_t>(n) * M * K;
          T* gBn = gB.data() + static_cast<size_t>(n) * K * L;
          // gA = G * B^T
          for (int i = 0; i < M; ++i)
            for (int j = 0; j < L; ++j) {
              const T gv = G[static_cast<size_t>(i) * L + j];
              const T* Bj = Bn;  // column j of B, strided
              for (int k = 0; k < K; ++k)
                gAn[static_cast<size_t>(i) * K + k] += gv * Bj[static_cast<size_t>(k) * L + j];
            }
          // gB = A^T * G
          for (int k = 0; k < K; ++k)
            for (int i = 0; i < M; ++i) {
              const T av = An[static_cast<size_t>(i) * K + k];
              const T* Gi = G + static_cast<size_t>(i) * L;
              T* gBk = gBn + static_cast<size_t>(k) * L;
              for (int j = 0; j < L; ++j) gBk[j] += av * Gi[j];
            }
        }
      },
      a, b);
}

// Row-wise softmax over the last axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const Shape& s = x.shape();
  const int W = s[3];
  const std::int64_t rows = x.numel() / W;
  std::vector<T> out(x.data().size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = x.data().data() + r * W;
    T* dst = out.data() + r * W;
    T mx = src[0];
    for (int j = 1; j < W; ++j) mx = std::max(mx, src[j]);
    T z = T(0);
    for (int j = 0; j < W; ++j) {
      dst[j] = std::exp(src[j] - mx);
      z += dst[j];
    }
    for (int j = 0; j < W; ++j) dst[j] /= z;
  }
  return detail::make_result<T>(
      s, std::move(out),
      [W, rows](detail::Node<T>& self) {
        detail::prep_parents(self);
        auto& gin = self.parents[0]->grad;
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* y = self.data.data() + r * W;
          const T* g = self.grad.data() + r * W;
          T dot = T(0);
          for (int j = 0; j < W; ++j) dot += g[j] * y[j];
          T* gi = gin.data() + r * W;
          for (int j = 0; j < W; ++j) gi[j] += y[j] * (g[j] - dot);
        }
      },
      x);
}

// ---------------------------------------------------------------------------
// Convolutions

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int stride = 1,
                 int padding = 0) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  const int k = ks[2];
  if (k != ks[3] || (k != 1 && k != 3))
    throw ConfigError("conv2d: kernel must be square 1x1 or 3x3, got " + shape_str(ks));
  if (ks[1] != xs[1])
    throw ConfigError("conv2d: input channels " + std::to_string(xs[1]) +
                      " do not match kernel " + shape_str(ks));
  const int hnum = xs[2] + 2 * padding - k;
  const int wnum = xs[3] + 2 * padding - k;
  if (stride < 1 || hnum < 0 || wnum < 0 || hnum % stride || wnum % stride)
    throw ConfigError("conv2d: non-integral output size for input " + shape_str(xs) +
                      " kernel " + shape_str(ks) + " stride " + std::to_string(stride) +
                      " padding " + std::to_string(padding));
  const int N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const int Co = ks[0], OH = hnum / stride + 1, OW = wnum / stride + 1;
  Shape os{N, Co, OH, OW};
  std::vector<T> out(shape_numel(os), T(0));
  const auto& xv = x.data();
  const auto& wv = kernel.data();
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co)
      for (int ci = 0; ci < Ci; ++ci) {
        const T* xp = xv.data() + (static_cast<size_t>(n) * Ci + ci) * H * W;
        const T* wp = wv.data() + (static_cast<size_t>(co) * Ci + ci) * k * k;
        T* op = out.data() + (static_cast<size_t>(n) * Co + co) * OH * OW;
        for (int oh = 0; oh < OH; ++oh)
          for (int kh = 0; kh < k; ++kh) {
            const int ih = oh * stride + kh - padding;
            if (ih < 0 || ih >= H) continue;
            for (int kw = 0; kw < k; ++kw) {
              const T wvv = wp[kh * k + kw];
              if (wvv == T(0)) continue;
              const int iw0 = kw - padding;
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * stride + iw0;
                if (iw < 0 || iw >= W) continue;
                op[static_cast<size_t>(oh) * OW + ow] +=
                    wvv * xp[static_cast<size_t>(ih) * W + iw];
              }
            }
          }
      }
  return detail::make_result<T>(
      os, std::move(out),
      [N, Ci, H, W, Co, OH, OW, k, stride, padding](detail::Node<T>& self) {
        detail::prep_parents(self);
        const auto& xv = self.parents[0]->data;
        const auto& wv = self.parents[1]->data;
        auto& gx = self.parents[0]->grad;
        auto& gw = self.parents[1]->grad;
        for (int n = 0; n < N; ++n)
          for (int co = 0; co < Co; ++co)
            for (int ci = 0; ci < Ci; ++ci) {
              const T* xp = xv.data() + (static_cast<size_t>(n) * Ci + ci) * H * W;
              const T* wp = wv.data() + (static_cast<size_t>(co) * Ci + ci) * k * k;
              T* gxp = gx.data() + (static_cast<size_t>(n) * Ci + ci) * H * W;
              T* gwp = gw.data() + (static_cast<size_t>(co) * Ci + ci) * k * k;
              const T* gop = self.grad.data() + (static_cast<size_t>(n) * Co + co) * OH * OW;
              for (int oh = 0; oh < OH; ++oh)
                for (int kh = 0; kh < k; ++kh) {
                  const int ih = oh * stride + kh - padding;
                  if (ih < 0 || ih >= H) continue;
                  for (int kw = 0; kw < k; ++kw) {
                    const int iw0 = kw - padding;
                    T gw_acc = T(0);
                    const T wvv = wp[kh * k + kw];
                    for (int ow = 0; ow < OW; ++ow) {
                      const int iw = ow * stride + iw0;
                      if (iw < 0 || iw >= W) continue;
                      const T g = gop[static_cast<size_t>(oh) * OW + ow];
                      gxp[static_cast<size_t>(ih) * W + iw] += g * wvv;
                      gw_acc += g * xp[static_cast<size_t>(ih) * W + iw];
                    }
                    gwp[kh * k + kw] += gw_acc;
                  }
                }
            }
      },
      x, kernel);
}

// Upsampling transposed conv, fixed 2x2 kernel with stride 2 (non-overlapping
// scatter). Kernel layout is (C_in, C_out, 2, 2).
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& kernel, int stride = 2) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (stride != 2 || ks[2] != 2 || ks[3] != 2)
    throw ConfigError("conv_transpose2d: only 2x2 kernel with stride 2 supported, got " +
                      shape_str(ks) + " stride " + std::to_string(stride));
  if (ks[0] != xs[1])
    throw ConfigError("conv_transpose2d: input channels " + std::to_string(xs[1]) +
                      " do not match kernel " + shape_str(ks));
  const int N = xs[0], Ci = xs[1], H = xs[2], W = xs[3], Co = ks[1];
  Shape os{N, Co, H * 2, W * 2};
  std::vector<T> out(shape_numel(os), T(0));
  const auto& xv = x.data();
  const auto& wv = kernel.data();
  const int OH = H * 2, OW = W * 2;
  for (int n = 0; n < N; ++n)
    for (int ci = 0; ci < Ci; ++ci)
      for (int co = 0; co < Co; ++co) {
        const T* xp = xv.data() + (static_cast<size_t>(n) * Ci + ci) * H * W;
        const T* wp = wv.data() + (static_cast<size_t>(ci) * Co + co) * 4;
        T* op = out.data() + (static_cast<size_t>(n) * Co + co) * OH * OW;
        for (int ih = 0; ih < H; ++ih)
          for (int iw = 0; iw < W; ++iw) {
            const T v = xp[static_cast<size_t>(ih) * W + iw];
            T* base = op + (static_cast<size_t>(ih) * 2) * OW + iw * 2;
            base[0] += v * wp[0];
            base[1] += v * wp[1];
            base[OW] += v * wp[2];
            base[OW + 1] += v * wp[3];
          }
      }
  return detail::make_result<T>(
      os, std::move(out),
      [N, Ci, H, W, Co](detail::Node<T>& self) {
        detail::prep_parents(self);
        const int OH = H * 2, OW = W * 2;
        const auto& xv = self.parents[0]->data;
        const auto& wv = self.parents[1]->data;
        auto& gx = self.parents[0]->grad;
        auto& gw = self.parents[1]->grad;
        for (int n = 0; n < N; ++n)
          for (int ci = 0; ci < Ci; ++ci)
            for (int co = 0; co < Co; ++co) {
              const T* xp = xv.data() + (static_cast<size_t>(n) * Ci + ci) * H * W;
              const T* wp = wv.data() + (static_cast<size_t>(ci) * Co + co) * 4;
              T* gxp = gx.data() + (static_cast<size_t>(n) * Ci + ci) * H * W;
              T* gwp = gw.data() + (static_cast<size_t>(ci) * Co + co) * 4;
              const T* gop = self.grad.data() + (static_cast<size_t>(n) * Co + co) * OH * OW;
              for (int ih = 0; ih < H; ++ih)
                for (int iw = 0; iw < W; ++iw) {
                  const T* base = gop + (static_cast<size_t>(ih) * 2) * OW + iw * 2;
                  const T xvv = xp[static_cast<size_t>(ih) * W + iw];
                  gxp[static_cast<size_t>(ih) * W + iw] +=
                      base[0] * wp[0] + base[1] * wp[1] + base[OW] * wp[2] + base[OW + 1] * wp[3];
                  gwp[0] += base[0] * xvv;
                  gwp[1] += base[1] * xvv;
                  gwp[2] += base[OW] * xvv;
                  gwp[3] += base[OW + 1] * xvv;
                }
            }
      },
      x, kernel);
}

// 2x2 max pooling, stride 2. Tie-break: first index in row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  const Shape& xs = x.shape();
  if (xs[2] % 2 || xs[3] % 2)
    throw ConfigError("maxpool2d: H and W must be even, got " + shape_str(xs));
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int OH = H / 2, OW = W / 2;
  Shape os{N, C, OH, OW};
  std::vector<T> out(shape_numel(os));
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out.size());
  const auto& xv = x.data();
  for (int nc = 0; nc < N * C; ++nc) {
    const T* xp = xv.data() + static_cast<size_t>(nc) * H * W;
    T* op = out.data() + static_cast<size_t>(nc) * OH * OW;
    std::int32_t* ap = argmax->data() + static_cast<size_t>(nc) * OH * OW;
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        const int h0 = oh * 2, w0 = ow * 2;
        int best = h0 * W + w0;
        T bv = xp[best];
        const int cand[3] = {h0 * W + w0 + 1, (h0 + 1) * W + w0, (h0 + 1) * W + w0 + 1};
        for (int idx : cand)
          if (xp[idx] > bv) {
            bv = xp[idx];
            best = idx;
          }
        op[static_cast<size_t>(oh) * OW + ow] = bv;
        ap[static_cast<size_t>(oh) * OW + ow] = best;
      }
  }
  return detail::make_result<T>(
      os, std::move(out),
      [argmax, N, C, H, W, OH, OW](detail::Node<T>& self) {
        detail::prep_parents(self);
        auto& gx = self.parents[0]->grad;
        for (int nc = 0; nc < N * C; ++nc) {
          T* gxp = gx.data() + static_cast<size_t>(nc) * H * W;
          const T* gop = self.grad.data() + static_cast<size_t>(nc) * OH * OW;
          const std::int32_t* ap = argmax->data() + static_cast<size_t>(nc) * OH * OW;
          for (int i = 0; i < OH * OW; ++i) gxp[ap[i]] += gop[i];
        }
      },
      x);
}

// Channel-wise gate: x (N,C,H,W) scaled by g (N,C,1,1).
template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& g) {
  const Shape& xs = x.shape();
  const Shape& gs = g.shape();
  if (gs[0] != xs[0] || gs[1] != xs[1] || gs[2] != 1 || gs[3] != 1)
    throw DimensionError("mul_channel: gate " + shape_str(gs) + " incompatible with " +
                         shape_str(xs));
  const size_t plane = static_cast<size_t>(xs[2]) * xs[3];
  std::vector<T> out(x.data());
  for (int nc = 0; nc < xs[0] * xs[1]; ++nc) {
    const T gv = g.data()[nc];
    T* p = out.data() + nc * plane;
    for (size_t i = 0; i < plane; ++i) p[i] *= gv;
  }
  return detail::make_result<T>(
      xs, std::move(out),
      [plane](detail::Node<T>& self) {
        detail::prep_parents(self);
        const auto& xv = self.parents[0]->data;
        const auto& gv = self.parents[1]->data;
        const int planes = self.shape[0] * self.shape[1];
        for (int nc = 0; nc < planes; ++nc) {
          const T* go = self.grad.data() + nc * plane;
          const T* xp = xv.data() + nc * plane;
          T* gx = self.parents[0]->grad.data() + nc * plane;
          T acc = T(0);
          for (size_t i = 0; i < plane; ++i) {
            gx[i] += go[i] * gv[nc];
            acc += go[i] * xp[i];
          }
          self.parents[1]->grad[nc] += acc;
        }
      },
      x, g);
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& xs = x.shape();
  const size_t plane = static_cast<size_t>(xs[2]) * xs[3];
  if (plane == 0) throw ConfigError("global_avg_pool: empty spatial extent");
  Shape os{xs[0], xs[1], 1, 1};
  std::vector<T> out(shape_numel(os), T(0));
  for (int nc = 0; nc < xs[0] * xs[1]; ++nc) {
    const T* p = x.data().data() + nc * plane;
    T acc = T(0);
    for (size_t i = 0; i < plane; ++i) acc += p[i];
    out[nc] = acc / static_cast<T>(plane);
  }
  return detail::make_result<T>(
      os, std::move(out),
      [plane](detail::Node<T>& self) {
        detail::prep_parents(self);
        const int planes = self.shape[0] * self.shape[1];
        for (int nc = 0; nc < planes; ++nc) {
          const T g = self.grad[nc] / static_cast<T>(plane);
          T* gx = self.parents[0]->grad.data() + nc * plane;
          for (size_t i = 0; i < plane; ++i) gx[i] += g;
        }
      },
      x);
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BNState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BNState(int channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Normalizes over (N,H,W) per channel. Train mode uses batch statistics and,
// unless update_running is false, folds them into the running stats with
// momentum 0.9. Eval mode uses running stats (a pure per-channel affine).
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BNState<T>& state, Mode mode, bool update_running = true) {
  constexpr T kEps = T(1e-5);
  constexpr T kMomentum = T(0.9);
  const Shape& xs = x.shape();
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::int64_t count = static_cast<std::int64_t>(N) * H * W;
  if (count == 0 || C == 0) throw ConfigError("batchnorm2d: zero-element channel in " + shape_str(xs));
  if (gamma.numel() != C || beta.numel() != C)
    throw DimensionError("batchnorm2d: gamma/beta must have " + std::to_string(C) + " elements");
  if (static_cast<int>(state.running_mean.size()) != C)
    throw ConfigError("batchnorm2d: state channel mismatch");

  const size_t plane = static_cast<size_t>(H) * W;
  auto mean = std::make_shared<std::vector<T>>(C, T(0));
  auto invstd = std::make_shared<std::vector<T>>(C, T(0));
  if (mode == Mode::Train) {
    for (int c = 0; c < C; ++c) {
      T m = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = x.data().data() + (static_cast<size_t>(n) * C + c) * plane;
        for (size_t i = 0; i < plane; ++i) m += p[i];
      }
      m /= static_cast<T>(count);
      T v = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = x.data().data() + (static_cast<size_t>(n) * C + c) * plane;
        for (size_t i = 0; i < plane; ++i) {
          const T d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<T>(count);
      (*mean)[c] = m;
      (*invstd)[c] = T(1) / std::sqrt(v + kEps);
      if (update_running) {
        state.running_mean[c] = kMomentum * state.running_mean[c] + (T(1) - kMomentum) * m;
        state.running_var[c] = kMomentum * state.running_var[c] + (T(1) - kMomentum) * v;
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[c] = state.running_mean[c];
      (*invstd)[c] = T(1) / std::sqrt(state.running_var[c] + kEps);
    }
  }

  std::vector<T> out(x.data().size());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x.data().data() + (static_cast<size_t>(n) * C + c) * plane;
      T* o = out.data() + (static_cast<size_t>(n) * C + c) * plane;
      const T m = (*mean)[c], is = (*invstd)[c];
      const T g = gamma.data()[c], b = beta.data()[c];
      for (size_t i = 0; i < plane; ++i) o[i] = (p[i] - m) * is * g + b;
    }

  const bool train_stats = (mode == Mode::Train);
  return detail::make_result<T>(
      xs, std::move(out),
      [mean, invstd, train_stats, N, C, plane, count](detail::Node<T>& self) {
        detail::prep_parents(self);
        const auto& xv = self.parents[0]->data;
        const auto& gammav = self.parents[1]->data;
        auto& gx = self.parents[0]->grad;
        auto& ggamma = self.parents[1]->grad;
        auto& gbeta = self.parents[2]->grad;
        for (int c = 0; c < C; ++c) {
          const T m = (*mean)[c], is = (*invstd)[c], g = gammav[c];
          T sum_g = T(0), sum_gx = T(0);
          for (int n = 0; n < N; ++n) {
            const T* go = self.grad.data() + (static_cast<size_t>(n) * C + c) * plane;
            const T* xp = xv.data() + (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) {
              sum_g += go[i];
              sum_gx += go[i] * (xp[i] - m) * is;
            }
          }
          ggamma[c] += sum_gx;
          gbeta[c] += sum_g;
          const T inv_count = T(1) / static_cast<T>(count);
          for (int n = 0; n < N; ++n) {
            const T* go = self.grad.data() + (static_cast<size_t>(n) * C + c) * plane;
            const T* xp = xv.data() + (static_cast<size_t>(n) * C + c) * plane;
            T* gi = gx.data() + (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) {
              if (train_stats) {
                const T xhat = (xp[i] - m) * is;
                gi[i] += g * is * (go[i] - sum_g * inv_count - xhat * sum_gx * inv_count);
              } else {
                gi[i] += g * is * go[i];
              }
            }
          }
        }
      },
      x, gamma, beta);
}

// ---------------------------------------------------------------------------
// Loss

// Integer label map aligned with a (N,*,H,W) logits tensor.
struct LabelMap {
  int n = 0, h = 0, w = 0;
  std::vector<int> values;  // n*h*w, row-major
};

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const LabelMap& labels) {
  const Shape& s = logits.shape();
  const int N = s[0], K = s[1], H = s[2], W = s[3];
  if (labels.n != N || labels.h != H || labels.w != W)
    throw DimensionError("cross_entropy_loss: label map " + std::to_string(labels.n) + "x" +
                         std::to_string(labels.h) + "x" + std::to_string(labels.w) +
                         " does not match logits " + shape_str(s));
  const size_t plane = static_cast<size_t>(H) * W;
  const std::int64_t count = static_cast<std::int64_t>(N) * plane;
  auto probs = std::make_shared<std::vector<T>>(logits.data().size());
  auto label_copy = std::make_shared<std::vector<int>>(labels.values);
  T loss = T(0);
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const int lbl = labels.values[(static_cast<size_t>(n) * H + h) * W + w];
        if (lbl < 0 || lbl >= K)
          throw DataError("cross_entropy_loss: label " + std::to_string(lbl) +
                          " out of range at pixel (n=" + std::to_string(n) + ",h=" +
                          std::to_string(h) + ",w=" + std::to_string(w) + ")");
        T mx = logits.at(n, 0, h, w);
        for (int c = 1; c < K; ++c) mx = std::max(mx, logits.at(n, c, h, w));
        T z = T(0);
        for (int c = 0; c < K; ++c) z += std::exp(logits.at(n, c, h, w) - mx);
        const T logz = std::log(z) + mx;
        for (int c = 0; c < K; ++c)
          (*probs)[((static_cast<size_t>(n) * K + c) * H + h) * W + w] =
              std::exp(logits.at(n, c, h, w) - logz);
        loss -= (logits.at(n, lbl, h, w) - logz);
      }
  loss /= static_cast<T>(count);
  return detail::make_result<T>(
      Shape{1, 1, 1, 1}, std::vector<T>{loss},
      [probs, label_copy, N, K, H, W, count](detail::Node<T>& self) {
        detail::prep_parents(self);
        auto& g = self.parents[0]->grad;
        const T scale = self.grad[0] / static_cast<T>(count);
        for (int n = 0; n < N; ++n)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              const int lbl = (*label_copy)[(static_cast<size_t>(n) * H + h) * W + w];
              for (int c = 0; c < K; ++c) {
                const size_t idx = ((static_cast<size_t>(n) * K + c) * H + h) * W + w;
                T p = (*probs)[idx];
                if (c == lbl) p -= T(1);
                g[idx] += scale * p;
              }
            }
      },
      logits);
}

}  // namespace fbseg
