#pragma once

// Dense N-d arrays with tape-free reverse-mode differentiation.
//
// Every op returns a new Tensor whose node keeps shared pointers to its
// inputs plus a closure that scatters the output gradient back into them.
// Layout is always dense row-major; there are no strided views.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

namespace s3ce {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_flag = true;

// Reductions over a batch are split into this many fixed chunks so that the
// summation order never depends on the number of worker threads.
inline constexpr std::size_t kReduceChunks = 8;
}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
  NoGradGuard() : previous_(detail::grad_flag) { detail::grad_flag = false; }
  ~NoGradGuard() { detail::grad_flag = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_flag; }

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  Real* grad_data() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    return grad.data();
  }
};

template <class Real>
class Tensor {
public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0)) : node_(std::make_shared<Node<Real>>()) {
    node_->value.assign(s3ce::numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<Real> values) : node_(std::make_shared<Node<Real>>()) {
    if (s3ce::numel(shape) != values.size())
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       to_string(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor scalar(Real v) { return Tensor(Shape{1}, std::vector<Real>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> values() const { return node_->value; }
  std::span<Real> mutable_values() { return node_->value; }
  const Real* data() const { return node_->value.data(); }
  Real* mutable_data() { return node_->value.data(); }
  Real operator[](std::size_t i) const { return node_->value[i]; }

  Real item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  // Empty span until a backward pass has reached this tensor.
  std::span<const Real> grad() const { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Real(0)); }

  Tensor detach() const { return Tensor(shape(), node_->value); }

  Tensor reshape(Shape new_shape) const;

  Node<Real>& node() const { return *node_; }
  const std::shared_ptr<Node<Real>>& node_ptr() const { return node_; }

  static Tensor from_node(std::shared_ptr<Node<Real>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

private:
  std::shared_ptr<Node<Real>> node_;
};

namespace detail {

template <class Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> value,
                         std::vector<Tensor<Real>> inputs,
                         std::function<void(Node<Real>&)> backward) {
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (s3ce::grad_enabled()) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor<Real>& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (auto& in : inputs) node->parents.push_back(in.node_ptr());
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor<Real>::from_node(std::move(node));
}

template <class Real>
Real* grad_of(Node<Real>& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.grad_data() : nullptr;
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <class Real>
using CMapMat = Eigen::Map<const RowMat<Real>>;

}  // namespace detail

// Reverse-topological accumulation from a scalar. Leaf gradients accumulate
// across calls; interior gradients are reset on every call, so calling twice
// without zeroing the leaves doubles their gradients.
template <class Real>
void backward(const Tensor<Real>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar, got " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<Real>*> order;
  std::unordered_set<Node<Real>*> seen;
  std::vector<std::pair<Node<Real>*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<Real>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (auto* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), Real(0));
  loss.node().grad_data()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
}

template <class Real>
Tensor<Real> Tensor<Real>::reshape(Shape new_shape) const {
  detail::require(s3ce::numel(new_shape) == numel(),
                  "reshape " + to_string(shape()) + " -> " + to_string(new_shape));
  return detail::make_result<Real>(std::move(new_shape), node_->value, {*this}, [](Node<Real>& self) {
    if (Real* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- elementwise

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require(a.shape() == b.shape(), "add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<Real>(a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Real* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require(a.shape() == b.shape(), "sub: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<Real>(a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    if (Real* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (Real* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require(a.shape() == b.shape(), "mul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<Real>(a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (Real* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (Real* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return detail::make_result<Real>(a.shape(), std::move(out), {a}, [c](Node<Real>& self) {
    if (Real* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * c;
  });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > Real(0) ? a[i] : Real(0);
  return detail::make_result<Real>(a.shape(), std::move(out), {a}, [](Node<Real>& self) {
    const auto& av = self.parents[0]->value;
    if (Real* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (av[i] > Real(0)) g[i] += self.grad[i];
  });
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real s = 0;
  for (Real v : a.values()) s += v;
  return detail::make_result<Real>(Shape{1}, {s}, {a}, [](Node<Real>& self) {
    if (Real* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += self.grad[0];
  });
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  detail::require(a.numel() > 0, "mean of empty tensor");
  return scale(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

// Picks flat elements; repeated indices accumulate in backward.
template <class Real>
Tensor<Real> gather(const Tensor<Real>& a, std::vector<std::size_t> index) {
  std::vector<Real> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < a.numel(), "gather: index out of range");
    out[i] = a[index[i]];
  }
  Shape shape{index.size()};
  return detail::make_result<Real>(std::move(shape), std::move(out), {a},
                                   [index = std::move(index)](Node<Real>& self) {
                                     if (Real* g = detail::grad_of(self, 0))
                                       for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
                                   });
}

// Slice [i] along dimension 0.
template <class Real>
Tensor<Real> select(const Tensor<Real>& a, std::size_t i) {
  detail::require(a.ndim() >= 1 && i < a.dim(0), "select: index out of range");
  Shape rest(a.shape().begin() + 1, a.shape().end());
  if (rest.empty()) rest = {1};
  const std::size_t stride = s3ce::numel(rest);
  std::vector<Real> out(a.values().begin() + i * stride, a.values().begin() + (i + 1) * stride);
  return detail::make_result<Real>(std::move(rest), std::move(out), {a}, [i, stride](Node<Real>& self) {
    if (Real* g = detail::grad_of(self, 0))
      for (std::size_t k = 0; k < stride; ++k) g[i * stride + k] += self.grad[k];
  });
}

// Stacks equally shaped tensors along a new leading dimension.
template <class Real>
Tensor<Real> stack(const std::vector<Tensor<Real>>& parts) {
  detail::require(!parts.empty(), "stack of nothing");
  const Shape& inner = parts.front().shape();
  const std::size_t stride = s3ce::numel(inner);
  std::vector<Real> out;
  out.reserve(stride * parts.size());
  for (const auto& p : parts) {
    detail::require(p.shape() == inner, "stack: mismatched shapes");
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return detail::make_result<Real>(std::move(shape), std::move(out), parts, [stride](Node<Real>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k)
      if (Real* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < stride; ++i) g[i] += self.grad[k * stride + i];
  });
}

// ------------------------------------------------------------- linear algebra

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                  "matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n);
  detail::MapMat<Real>(out.data(), m, n).noalias() =
      detail::CMapMat<Real>(a.data(), m, k) * detail::CMapMat<Real>(b.data(), k, n);
  return detail::make_result<Real>(Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node<Real>& self) {
    detail::CMapMat<Real> dc(self.grad.data(), m, n);
    if (Real* g = detail::grad_of(self, 0))
      detail::MapMat<Real>(g, m, k).noalias() +=
          dc * detail::CMapMat<Real>(self.parents[1]->value.data(), k, n).transpose();
    if (Real* g = detail::grad_of(self, 1))
      detail::MapMat<Real>(g, k, n).noalias() +=
          detail::CMapMat<Real>(self.parents[0]->value.data(), m, k).transpose() * dc;
  });
}

// x[B x in] * W[out x in]^T + bias[out]
template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& bias) {
  detail::require(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1) && bias.numel() == w.dim(0),
                  "linear: " + to_string(x.shape()) + " with weight " + to_string(w.shape()));
  const auto bsz = x.dim(0), in = x.dim(1), outf = w.dim(0);
  std::vector<Real> out(bsz * outf);
  detail::MapMat<Real> o(out.data(), bsz, outf);
  o.noalias() = detail::CMapMat<Real>(x.data(), bsz, in) * detail::CMapMat<Real>(w.data(), outf, in).transpose();
  for (std::size_t r = 0; r < bsz; ++r)
    for (std::size_t c = 0; c < outf; ++c) o(r, c) += bias[c];
  return detail::make_result<Real>(Shape{bsz, outf}, std::move(out), {x, w, bias},
                                   [bsz, in, outf](Node<Real>& self) {
                                     detail::CMapMat<Real> dy(self.grad.data(), bsz, outf);
                                     if (Real* g = detail::grad_of(self, 0))
                                       detail::MapMat<Real>(g, bsz, in).noalias() +=
                                           dy * detail::CMapMat<Real>(self.parents[1]->value.data(), outf, in);
                                     if (Real* g = detail::grad_of(self, 1))
                                       detail::MapMat<Real>(g, outf, in).noalias() +=
                                           dy.transpose() * detail::CMapMat<Real>(self.parents[0]->value.data(), bsz, in);
                                     if (Real* g = detail::grad_of(self, 2))
                                       for (std::size_t r = 0; r < bsz; ++r)
                                         for (std::size_t c = 0; c < outf; ++c) g[c] += dy(r, c);
                                   });
}

template <class Real>
Tensor<Real> softmax_lastdim(const Tensor<Real>& x) {
  detail::require(x.ndim() >= 1 && x.shape().back() >= 1, "softmax: empty last dimension");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<Real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = x.data() + r * n;
    Real* o = out.data() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return detail::make_result<Real>(x.shape(), std::move(out), {x}, [rows, n](Node<Real>& self) {
    Real* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = self.value.data() + r * n;
      const Real* dy = self.grad.data() + r * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

template <class Real>
Tensor<Real> log_softmax_lastdim(const Tensor<Real>& x) {
  detail::require(x.ndim() >= 1 && x.shape().back() >= 1, "log_softmax: empty last dimension");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<Real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = x.data() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const Real lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[j] - lse;
  }
  return detail::make_result<Real>(x.shape(), std::move(out), {x}, [rows, n](Node<Real>& self) {
    Real* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = self.value.data() + r * n;
      const Real* dy = self.grad.data() + r * n;
      Real total = 0;
      for (std::size_t j = 0; j < n; ++j) total += dy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += dy[j] - std::exp(y[j]) * total;
    }
  });
}

// Rows scaled to unit Euclidean norm; eps keeps the all-zero row finite.
template <class Real>
Tensor<Real> l2_normalize_rows(const Tensor<Real>& x, Real eps = Real(1e-12)) {
  detail::require(x.ndim() == 2, "l2_normalize_rows expects a matrix");
  const auto rows = x.dim(0), n = x.dim(1);
  std::vector<Real> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += x[r * n + j] * x[r * n + j];
    norms[r] = std::sqrt(ss + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] / norms[r];
  }
  return detail::make_result<Real>(x.shape(), std::move(out), {x},
                                   [rows, n, norms = std::move(norms)](Node<Real>& self) {
                                     Real* g = detail::grad_of(self, 0);
                                     if (!g) return;
                                     for (std::size_t r = 0; r < rows; ++r) {
                                       const Real* y = self.value.data() + r * n;
                                       const Real* dy = self.grad.data() + r * n;
                                       Real dot = 0;
                                       for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                                       for (std::size_t j = 0; j < n; ++j) g[r * n + j] += (dy[j] - y[j] * dot) / norms[r];
                                     }
                                   });
}

// D[i,j] = sqrt(|x_i - x_j|^2 + eps) for the rows of x[B x C].
template <class Real>
Tensor<Real> pairwise_distance(const Tensor<Real>& x, Real eps = Real(1e-12)) {
  detail::require(x.ndim() == 2, "pairwise_distance expects a matrix");
  const auto b = x.dim(0), n = x.dim(1);
  std::vector<Real> out(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      Real ss = 0;
      for (std::size_t c = 0; c < n; ++c) {
        const Real d = x[i * n + c] - x[j * n + c];
        ss += d * d;
      }
      out[i * b + j] = std::sqrt(ss + eps);
    }
  return detail::make_result<Real>(Shape{b, b}, std::move(out), {x}, [b, n](Node<Real>& self) {
    Real* g = detail::grad_of(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        const Real coef = self.grad[i * b + j] / self.value[i * b + j];
        if (coef == Real(0) || i == j) continue;
        for (std::size_t c = 0; c < n; ++c) {
          const Real d = coef * (xv[i * n + c] - xv[j * n + c]);
          g[i * n + c] += d;
          g[j * n + c] -= d;
        }
      }
  });
}

// ---------------------------------------------------------------- convolution

struct Conv2dGeometry {
  std::size_t cin, h, w, cout, kh, kw, stride, pad, hout, wout;
};

namespace detail {

template <class Real>
void im2col(const Real* x, const Conv2dGeometry& g, Real* col) {
  const std::size_t p = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        Real* row = col + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.wout + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : Real(0);
          }
        }
      }
}

template <class Real>
void col2im(const Real* col, const Conv2dGeometry& g, Real* dx) {
  const std::size_t p = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const Real* row = col + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.wout + ox];
          }
        }
      }
}

inline bool is_pointwise(const Conv2dGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace detail

// Cross-correlation of x[B x Cin x H x W] with w[Cout x Cin x kh x kw].
template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, std::size_t stride = 1, std::size_t padding = 0) {
  detail::require(x.ndim() == 4 && w.ndim() == 4 && x.dim(1) == w.dim(1) && stride >= 1,
                  "conv2d: input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  Conv2dGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, padding, 0, 0};
  detail::require(g.h + 2 * padding >= g.kh && g.w + 2 * padding >= g.kw, "conv2d: kernel larger than padded input");
  g.hout = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wout = (g.w + 2 * padding - g.kw) / stride + 1;
  const std::size_t batch = x.dim(0), k = g.cin * g.kh * g.kw, p = g.hout * g.wout;
  const std::size_t in_stride = g.cin * g.h * g.w, out_stride = g.cout * p;

  std::vector<Real> out(batch * out_stride);
  detail::CMapMat<Real> wm(w.data(), g.cout, k);
#pragma omp parallel
  {
    std::vector<Real> col(detail::is_pointwise(g) ? 0 : k * p);
#pragma omp for schedule(static)
    for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(batch); ++bi) {
      const Real* src = x.data() + bi * in_stride;
      if (!col.empty()) {
        detail::im2col(src, g, col.data());
        src = col.data();
      }
      detail::MapMat<Real>(out.data() + bi * out_stride, g.cout, p).noalias() = wm * detail::CMapMat<Real>(src, k, p);
    }
  }

  return detail::make_result<Real>(
      Shape{batch, g.cout, g.hout, g.wout}, std::move(out), {x, w}, [g, batch, k, p, in_stride, out_stride](Node<Real>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        Real* gx = detail::grad_of(self, 0);
        Real* gw = detail::grad_of(self, 1);
        detail::CMapMat<Real> wm(wv.data(), g.cout, k);
        const std::size_t chunks = std::min(batch, detail::kReduceChunks);
        std::vector<std::vector<Real>> partial(gw ? chunks : 0, std::vector<Real>(g.cout * k, Real(0)));
#pragma omp parallel
        {
          std::vector<Real> col(detail::is_pointwise(g) ? 0 : k * p), dcol(k * p);
#pragma omp for schedule(static)
          for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
            const std::size_t lo = batch * c / chunks, hi = batch * (c + 1) / chunks;
            for (std::size_t bi = lo; bi < hi; ++bi) {
              detail::CMapMat<Real> dy(self.grad.data() + bi * out_stride, g.cout, p);
              if (gw) {
                const Real* src = xv.data() + bi * in_stride;
                if (!col.empty()) {
                  detail::im2col(src, g, col.data());
                  src = col.data();
                }
                detail::MapMat<Real>(partial[c].data(), g.cout, k).noalias() +=
                    dy * detail::CMapMat<Real>(src, k, p).transpose();
              }
              if (gx) {
                if (detail::is_pointwise(g)) {
                  detail::MapMat<Real>(gx + bi * in_stride, k, p).noalias() += wm.transpose() * dy;
                } else {
                  detail::MapMat<Real>(dcol.data(), k, p).noalias() = wm.transpose() * dy;
                  detail::col2im(dcol.data(), g, gx + bi * in_stride);
                }
              }
            }
          }
        }
        for (const auto& part : partial)
          for (std::size_t i = 0; i < part.size(); ++i) gw[i] += part[i];
      });
}

// Per-token channel mixing: x[G x C x N], w[C' x C] -> [G x C' x N].
template <class Real>
Tensor<Real> conv1x1_tokens(const Tensor<Real>& x, const Tensor<Real>& w) {
  detail::require(x.ndim() == 3 && w.ndim() == 2 && x.dim(1) == w.dim(1),
                  "conv1x1_tokens: input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  auto as_image = x.reshape({x.dim(0), x.dim(1), x.dim(2), 1});
  auto y = conv2d(as_image, w.reshape({w.dim(0), w.dim(1), 1, 1}));
  return y.reshape({x.dim(0), w.dim(0), x.dim(2)});
}

// ---------------------------------------------------------------- pooling

// Half-open rectangle [h0, h1) x [w0, w1).
struct Region {
  std::size_t h0, h1, w0, w1;
  std::size_t area() const { return (h1 - h0) * (w1 - w0); }
};

// Mean over a spatial rectangle of the trailing two dims: [... x H x W] -> [...].
template <class Real>
Tensor<Real> avg_pool_2d(const Tensor<Real>& x, Region r) {
  detail::require(x.ndim() >= 3, "avg_pool_2d expects at least [... x H x W]");
  const std::size_t h = x.shape()[x.ndim() - 2], w = x.shape().back();
  if (r.h0 >= r.h1 || r.w0 >= r.w1) throw std::invalid_argument("avg_pool_2d: empty region");
  detail::require(r.h1 <= h && r.w1 <= w, "avg_pool_2d: region outside the map");
  Shape lead(x.shape().begin(), x.shape().end() - 2);
  const std::size_t outer = s3ce::numel(lead), plane = h * w;
  const Real inv = Real(1) / static_cast<Real>(r.area());
  std::vector<Real> out(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    Real s = 0;
    for (std::size_t i = r.h0; i < r.h1; ++i)
      for (std::size_t j = r.w0; j < r.w1; ++j) s += x[o * plane + i * w + j];
    out[o] = s * inv;
  }
  return detail::make_result<Real>(std::move(lead), std::move(out), {x}, [r, outer, plane, w, inv](Node<Real>& self) {
    Real* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = r.h0; i < r.h1; ++i)
        for (std::size_t j = r.w0; j < r.w1; ++j) g[o * plane + i * w + j] += self.grad[o] * inv;
  });
}

// Mean over a subset of slices along dimension 0: [N x rest] -> [rest].
template <class Real>
Tensor<Real> mean_slices(const Tensor<Real>& x, std::vector<std::size_t> index) {
  detail::require(!index.empty(), "mean_slices: no slices selected");
  Shape rest(x.shape().begin() + 1, x.shape().end());
  const std::size_t stride = s3ce::numel(rest);
  const Real inv = Real(1) / static_cast<Real>(index.size());
  std::vector<Real> out(stride, Real(0));
  for (std::size_t i : index) {
    detail::require(i < x.dim(0), "mean_slices: index out of range");
    for (std::size_t k = 0; k < stride; ++k) out[k] += x[i * stride + k];
  }
  for (auto& v : out) v *= inv;
  return detail::make_result<Real>(std::move(rest), std::move(out), {x},
                                   [index = std::move(index), stride, inv](Node<Real>& self) {
                                     if (Real* g = detail::grad_of(self, 0))
                                       for (std::size_t i : index)
                                         for (std::size_t k = 0; k < stride; ++k) g[i * stride + k] += self.grad[k] * inv;
                                   });
}

// ---------------------------------------------------------------- batch norm

template <class Real>
struct BatchNormState {
  Tensor<Real> running_mean;
  Tensor<Real> running_var;
};

// x[M x C x ...]: statistics per channel over every non-channel position.
// Training mode normalizes with batch statistics and updates the running
// estimates; evaluation mode is a fixed per-channel affine map.
template <class Real>
Tensor<Real> batch_norm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        BatchNormState<Real>& state, bool training, Real momentum = Real(0.1),
                        Real eps = Real(1e-5)) {
  detail::require(x.ndim() >= 2 && gamma.numel() == x.dim(1) && beta.numel() == x.dim(1),
                  "batch_norm: input " + to_string(x.shape()));
  const std::size_t m = x.dim(0), c = x.dim(1), s = x.numel() / (m * c), count = m * s;
  std::vector<Real> mean(c), inv_std(c), out(x.numel());
  auto& rm = state.running_mean;
  auto& rv = state.running_var;
  for (std::size_t ch = 0; ch < c; ++ch) {
    Real mu, var;
    if (training) {
      Real acc = 0;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < s; ++k) acc += x[(i * c + ch) * s + k];
      mu = acc / static_cast<Real>(count);
      Real sq = 0;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < s; ++k) {
          const Real d = x[(i * c + ch) * s + k] - mu;
          sq += d * d;
        }
      var = sq / static_cast<Real>(count);
      const Real unbiased = count > 1 ? sq / static_cast<Real>(count - 1) : var;
      rm.mutable_data()[ch] = (Real(1) - momentum) * rm[ch] + momentum * mu;
      rv.mutable_data()[ch] = (Real(1) - momentum) * rv[ch] + momentum * unbiased;
    } else {
      mu = rm[ch];
      var = rv[ch];
    }
    mean[ch] = mu;
    inv_std[ch] = Real(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < s; ++k) {
        const std::size_t at = (i * c + ch) * s + k;
        out[at] = gamma[ch] * (x[at] - mu) * inv_std[ch] + beta[ch];
      }
  }
  return detail::make_result<Real>(
      x.shape(), std::move(out), {x, gamma, beta},
      [m, c, s, count, training, mean = std::move(mean), inv_std = std::move(inv_std)](Node<Real>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& gv = self.parents[1]->value;
        Real* gx = detail::grad_of(self, 0);
        Real* gg = detail::grad_of(self, 1);
        Real* gb = detail::grad_of(self, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          Real sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t k = 0; k < s; ++k) {
              const std::size_t at = (i * c + ch) * s + k;
              const Real xhat = (xv[at] - mean[ch]) * inv_std[ch];
              sum_dy += self.grad[at];
              sum_dy_xhat += self.grad[at] * xhat;
            }
          if (gg) gg[ch] += sum_dy_xhat;
          if (gb) gb[ch] += sum_dy;
          if (!gx) continue;
          const Real scale_ = gv[ch] * inv_std[ch];
          const Real n = static_cast<Real>(count);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t k = 0; k < s; ++k) {
              const std::size_t at = (i * c + ch) * s + k;
              if (training) {
                const Real xhat = (xv[at] - mean[ch]) * inv_std[ch];
                gx[at] += scale_ * (self.grad[at] - sum_dy / n - xhat * sum_dy_xhat / n);
              } else {
                gx[at] += scale_ * self.grad[at];
              }
            }
        }
      });
}

}  // namespace s3ce
