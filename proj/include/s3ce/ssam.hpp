#pragma once

// Spike-driven spatiotemporal attention over the T event tensors of a
// sequence. Each step's tokens attend with queries from the current and
// earlier steps only; the same-step block carries a learned relative
// position bias.
//
// Token orientation: per step, Q/K/V are stored C x N but attended as N x C
// (tokens as rows), so every logit block Q_{t'} K_t^T is N x N like the bias.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "spiking.hpp"

namespace s3ce {

enum class AttentionVariant {
  staw,  // causal: blocks with t' > t are zero
  faw,   // full: every step attends to every step
  zaw,   // all logits zero
};

enum class ValueMode {
  literal,          // sum_{t'} softmax(A_{t',t}) V_t
  standard_causal,  // sum_{t'} softmax(A_{t',t}) V_{t'}
};

inline std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::staw: return "staw";
    case AttentionVariant::faw: return "faw";
    case AttentionVariant::zaw: return "zaw";
  }
  return "?";
}

inline AttentionVariant parse_variant(const std::string& s) {
  if (s == "staw") return AttentionVariant::staw;
  if (s == "faw") return AttentionVariant::faw;
  if (s == "zaw") return AttentionVariant::zaw;
  throw std::invalid_argument("unknown attention variant '" + s + "' (staw|faw|zaw)");
}

inline ValueMode parse_value_mode(const std::string& s) {
  if (s == "literal") return ValueMode::literal;
  if (s == "standard-causal") return ValueMode::standard_causal;
  throw std::invalid_argument("unknown value mode '" + s + "' (literal|standard-causal)");
}

struct TableIndex {
  std::size_t row, col;
  friend bool operator==(const TableIndex&, const TableIndex&) = default;
};

// Displacement (dh, dw) -> cell of the (2H-1) x (2W-1) bias table.
inline TableIndex relative_index(long dh, long dw, std::size_t h, std::size_t w) {
  const long hh = static_cast<long>(h), ww = static_cast<long>(w);
  if (dh <= -hh || dh >= hh || dw <= -ww || dw >= ww)
    throw std::out_of_range("relative_index: displacement (" + std::to_string(dh) + "," + std::to_string(dw) +
                            ") outside a " + std::to_string(h) + "x" + std::to_string(w) + " grid");
  return {static_cast<std::size_t>(dh + hh - 1), static_cast<std::size_t>(dw + ww - 1)};
}

// Flat table offsets for every token pair, tokens enumerated row-major.
inline std::vector<std::size_t> bias_gather_index(std::size_t h, std::size_t w) {
  const std::size_t n = h * w, cols = 2 * w - 1;
  std::vector<std::size_t> index(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const auto cell = relative_index(static_cast<long>(i / w) - static_cast<long>(j / w),
                                       static_cast<long>(i % w) - static_cast<long>(j % w), h, w);
      index[i * n + j] = cell.row * cols + cell.col;
    }
  return index;
}

// table[(2H-1) x (2W-1)] -> B[N x N], B[i,j] = table[relative_index(h_i-h_j, w_i-w_j)].
template <class Real>
Tensor<Real> compute_bias_matrix(const Tensor<Real>& table, std::size_t h, std::size_t w) {
  if (table.ndim() != 2 || table.dim(0) != 2 * h - 1 || table.dim(1) != 2 * w - 1)
    throw ShapeError("bias table " + to_string(table.shape()) + " does not match a " + std::to_string(h) + "x" +
                     std::to_string(w) + " grid");
  return gather(table, bias_gather_index(h, w)).reshape({h * w, h * w});
}

namespace detail {

inline bool block_active(AttentionVariant variant, std::size_t tq, std::size_t tk) {
  return variant == AttentionVariant::faw || tq <= tk;
}

// Pre-softmax logits of block (tq, tk) for slabs stored C x N.
template <class Real>
void attention_logits(const Real* q, const Real* k, const Real* bias, std::size_t c, std::size_t n, Real scale,
                      bool diagonal, AttentionVariant variant, Real* out) {
  MapMat<Real> a(out, n, n);
  if (variant == AttentionVariant::zaw) {
    a.setZero();
    return;
  }
  a.noalias() = scale * (CMapMat<Real>(q, c, n).transpose() * CMapMat<Real>(k, c, n));
  if (diagonal) a += CMapMat<Real>(bias, n, n);
}

template <class Real>
void softmax_rows(Real* a, std::size_t n) {
  for (std::size_t r = 0; r < n; ++r) {
    Real* row = a + r * n;
    const Real mx = *std::max_element(row, row + n);
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= z;
  }
}

}  // namespace detail

// Logit block A_{t',t} for one sequence, Q/K given as [T x C x N].
template <class Real>
std::vector<Real> compute_staw(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& bias, std::size_t t,
                               std::size_t t_query, AttentionVariant variant) {
  if (q.ndim() != 3 || q.shape() != k.shape()) throw ShapeError("compute_staw: Q/K must be equal [T x C x N]");
  const std::size_t c = q.dim(1), n = q.dim(2);
  if (bias.numel() != n * n) throw ShapeError("compute_staw: bias must be N x N");
  if (t >= q.dim(0) || t_query >= q.dim(0)) throw std::out_of_range("compute_staw: step out of range");
  std::vector<Real> a(n * n, Real(0));
  if (!detail::block_active(variant, t_query, t)) return a;
  detail::attention_logits(q.data() + t_query * c * n, k.data() + t * c * n, bias.data(), c, n,
                           Real(1) / std::sqrt(static_cast<Real>(c)), t_query == t, variant, a.data());
  return a;
}

// Fused attention core. q, k, v: [T x B x C x N]; bias: [N x N]. Returns the
// pre-LIF aggregate for every (t, b) as a C x N slab:
//   O_t = sum over active t' of softmax_rows(A_{t',t}) applied to V.
template <class Real>
Tensor<Real> spatiotemporal_attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                                      const Tensor<Real>& bias, AttentionVariant variant, ValueMode mode) {
  if (q.ndim() != 4 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("attention: Q, K, V must share a [T x B x C x N] shape, got " + to_string(q.shape()));
  const std::size_t steps = q.dim(0), batch = q.dim(1), c = q.dim(2), n = q.dim(3), slab = c * n;
  if (bias.numel() != n * n) throw ShapeError("attention: bias must be N x N");
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(c));
  auto at = [batch, slab](std::size_t t, std::size_t b) { return (t * batch + b) * slab; };

  std::vector<Real> out(q.numel(), Real(0));
#pragma omp parallel
  {
    std::vector<Real> a(n * n), acc(n * n);
#pragma omp for schedule(static)
    for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(batch); ++bi) {
      const auto b = static_cast<std::size_t>(bi);
      for (std::size_t t = 0; t < steps; ++t) {
        detail::MapMat<Real> o(out.data() + at(t, b), c, n);
        std::fill(acc.begin(), acc.end(), Real(0));
        for (std::size_t tq = 0; tq < steps; ++tq) {
          if (!detail::block_active(variant, tq, t)) continue;
          detail::attention_logits(q.data() + at(tq, b), k.data() + at(t, b), bias.data(), c, n, scale, tq == t, variant,
                                   a.data());
          detail::softmax_rows(a.data(), n);
          if (mode == ValueMode::literal) {
            for (std::size_t i = 0; i < n * n; ++i) acc[i] += a[i];
          } else {
            o.noalias() += detail::CMapMat<Real>(v.data() + at(tq, b), c, n) * detail::CMapMat<Real>(a.data(), n, n).transpose();
          }
        }
        if (mode == ValueMode::literal)
          o.noalias() = detail::CMapMat<Real>(v.data() + at(t, b), c, n) * detail::CMapMat<Real>(acc.data(), n, n).transpose();
      }
    }
  }

  return detail::make_result<Real>(q.shape(), std::move(out), {q, k, v, bias}, [=](Node<Real>& self) {
    const Real* qv = self.parents[0]->value.data();
    const Real* kv = self.parents[1]->value.data();
    const Real* vv = self.parents[2]->value.data();
    const Real* bv = self.parents[3]->value.data();
    Real* gq = detail::grad_of(self, 0);
    Real* gk = detail::grad_of(self, 1);
    Real* gv = detail::grad_of(self, 2);
    Real* gb = detail::grad_of(self, 3);
    const bool logits_learnable = variant != AttentionVariant::zaw;
    const std::size_t chunks = std::min(batch, detail::kReduceChunks);
    std::vector<std::vector<Real>> bias_part(gb ? chunks : 0, std::vector<Real>(n * n, Real(0)));
#pragma omp parallel
    {
      std::vector<Real> a(n * n), acc(n * n), dp(n * n), da(n * n);
#pragma omp for schedule(static)
      for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(chunks); ++ci) {
        const std::size_t lo = batch * ci / chunks, hi = batch * (ci + 1) / chunks;
        for (std::size_t b = lo; b < hi; ++b) {
          for (std::size_t t = 0; t < steps; ++t) {
            detail::CMapMat<Real> dout(self.grad.data() + at(t, b), c, n);
            if (mode == ValueMode::literal) {
              std::fill(acc.begin(), acc.end(), Real(0));
              for (std::size_t tq = 0; tq < steps; ++tq) {
                if (!detail::block_active(variant, tq, t)) continue;
                detail::attention_logits(qv + at(tq, b), kv + at(t, b), bv, c, n, scale, tq == t, variant, a.data());
                detail::softmax_rows(a.data(), n);
                for (std::size_t i = 0; i < n * n; ++i) acc[i] += a[i];
              }
              if (gv)
                detail::MapMat<Real>(gv + at(t, b), c, n).noalias() += dout * detail::CMapMat<Real>(acc.data(), n, n);
              // every block shares dP = dO^T V_t
              detail::MapMat<Real>(dp.data(), n, n).noalias() =
                  dout.transpose() * detail::CMapMat<Real>(vv + at(t, b), c, n);
            }
            if (!logits_learnable && mode == ValueMode::literal) continue;
            for (std::size_t tq = 0; tq < steps; ++tq) {
              if (!detail::block_active(variant, tq, t)) continue;
              detail::attention_logits(qv + at(tq, b), kv + at(t, b), bv, c, n, scale, tq == t, variant, a.data());
              detail::softmax_rows(a.data(), n);
              if (mode == ValueMode::standard_causal) {
                if (gv)
                  detail::MapMat<Real>(gv + at(tq, b), c, n).noalias() += dout * detail::CMapMat<Real>(a.data(), n, n);
                detail::MapMat<Real>(dp.data(), n, n).noalias() =
                    dout.transpose() * detail::CMapMat<Real>(vv + at(tq, b), c, n);
              }
              if (!logits_learnable) continue;
              for (std::size_t r = 0; r < n; ++r) {
                Real dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += dp[r * n + j] * a[r * n + j];
                for (std::size_t j = 0; j < n; ++j) da[r * n + j] = a[r * n + j] * (dp[r * n + j] - dot);
              }
              detail::CMapMat<Real> dam(da.data(), n, n);
              if (gq)
                detail::MapMat<Real>(gq + at(tq, b), c, n).noalias() +=
                    scale * (detail::CMapMat<Real>(kv + at(t, b), c, n) * dam.transpose());
              if (gk)
                detail::MapMat<Real>(gk + at(t, b), c, n).noalias() +=
                    scale * (detail::CMapMat<Real>(qv + at(tq, b), c, n) * dam);
              if (gb && tq == t)
                for (std::size_t i = 0; i < n * n; ++i) bias_part[ci][i] += da[i];
            }
          }
        }
      }
    }
    for (const auto& part : bias_part)
      for (std::size_t i = 0; i < part.size(); ++i) gb[i] += part[i];
  });
}

struct AttentionOptions {
  AttentionVariant variant = AttentionVariant::staw;
  ValueMode value_mode = ValueMode::literal;
  bool residual = true;
};

// Logit blocks captured during a forward pass for inspection.
template <class Real>
struct AttentionDump {
  std::string stage;
  std::size_t steps = 0, tokens = 0;
  std::vector<Real> blocks;  // (T*N) x (T*N); block (t', t) at rows t'*N, cols t*N
  std::vector<Real> bias;    // N x N
};

template <class Real>
class AttentionStage {
public:
  AttentionStage() = default;
  AttentionStage(std::string name, std::size_t channels, std::size_t h, std::size_t w, const AttentionOptions& opts,
                 const LIFParams<Real>& lif, const SurrogateSpec<Real>& sg, Rng& rng)
      : name_(std::move(name)), channels_(channels), h_(h), w_(w), opts_(opts), bn_q_(channels), bn_k_(channels),
        bn_v_(channels), bn_out_(channels) {
    wq_ = kaiming_normal<Real>({channels, channels}, channels, rng);
    wk_ = kaiming_normal<Real>({channels, channels}, channels, rng);
    wv_ = kaiming_normal<Real>({channels, channels}, channels, rng);
    table_ = Tensor<Real>({2 * h - 1, 2 * w - 1}, Real(0)).set_requires_grad(true);
    for (auto* n : {&snn_q_, &snn_k_, &snn_v_, &snn_out_}) {
      n->params = lif;
      n->surrogate = sg;
    }
  }

  std::size_t channels() const { return channels_; }
  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t tokens() const { return h_ * w_; }
  const AttentionOptions& options() const { return opts_; }
  void set_options(const AttentionOptions& o) { opts_ = o; }

  Tensor<Real>& query_weight() { return wq_; }
  Tensor<Real>& key_weight() { return wk_; }
  Tensor<Real>& value_weight() { return wv_; }
  Tensor<Real>& bias_table() { return table_; }
  LIFNeuron<Real>& query_neuron() { return snn_q_; }
  LIFNeuron<Real>& key_neuron() { return snn_k_; }

  // x[T x B x C x N] -> spike-valued (Q, K, V), each [T x B x C x N]; every
  // projection is its own 1x1 conv, BN and LIF layer.
  std::tuple<Tensor<Real>, Tensor<Real>, Tensor<Real>> project_qkv(const Tensor<Real>& x, bool training) {
    check_tokens(x);
    const std::size_t steps = x.dim(0), batch = x.dim(1), n = tokens();
    auto flat = x.reshape({steps * batch, channels_, n});
    auto run = [&](const Tensor<Real>& weight, BatchNormLayer<Real>& bn, LIFNeuron<Real>& neuron) {
      auto y = bn(conv1x1_tokens(flat, weight), training);
      return neuron(y.reshape({steps, batch * channels_ * n})).reshape({steps, batch, channels_, n});
    };
    return {run(wq_, bn_q_, snn_q_), run(wk_, bn_k_, snn_k_), run(wv_, bn_v_, snn_v_)};
  }

  Tensor<Real> bias_matrix() const { return compute_bias_matrix(table_, h_, w_); }

  // x[T x B x C x H x W] -> same shape.
  Tensor<Real> forward(const Tensor<Real>& x, const ForwardContext& ctx, std::vector<AttentionDump<Real>>* dumps = nullptr) {
    if (x.ndim() != 5 || x.dim(2) != channels_ || x.dim(3) != h_ || x.dim(4) != w_)
      throw ShapeError("attention stage " + name_ + " expects [T x B x " + std::to_string(channels_) + " x " +
                       std::to_string(h_) + " x " + std::to_string(w_) + "], got " + to_string(x.shape()));
    const std::size_t steps = x.dim(0), batch = x.dim(1), n = tokens();
    auto tokens_in = x.reshape({steps, batch, channels_, n});
    auto [q, k, v] = project_qkv(tokens_in, ctx.training);
    if (ctx.spike_log) {
      ctx.spike_log->record(name_ + ".q", q);
      ctx.spike_log->record(name_ + ".k", k);
      ctx.spike_log->record(name_ + ".v", v);
    }
    auto bias = bias_matrix();
    if (dumps) dumps->push_back(dump_blocks(q, k, bias));
    auto mixed = spatiotemporal_attention(q, k, v, bias, opts_.variant, opts_.value_mode);
    auto normed = bn_out_(mixed.reshape({steps * batch, channels_, n}), ctx.training);
    auto spikes = snn_out_(normed.reshape({steps, batch * channels_ * n}));
    if (ctx.spike_log) ctx.spike_log->record(name_ + ".out", spikes.reshape({steps, batch * channels_ * n}));
    auto y = spikes.reshape(x.shape());
    return opts_.residual ? add(x, y) : y;
  }

  void collect(ParamList<Real>& out) const {
    out.push_back({name_ + ".q.weight", wq_, true});
    out.push_back({name_ + ".k.weight", wk_, true});
    out.push_back({name_ + ".v.weight", wv_, true});
    bn_q_.collect(out, name_ + ".q.bn");
    bn_k_.collect(out, name_ + ".k.bn");
    bn_v_.collect(out, name_ + ".v.bn");
    bn_out_.collect(out, name_ + ".out.bn");
    out.push_back({name_ + ".bias_table", table_, true});
  }

  template <class F>
  void for_each_neuron(F&& f) {
    f(snn_q_);
    f(snn_k_);
    f(snn_v_);
    f(snn_out_);
  }

private:
  void check_tokens(const Tensor<Real>& x) const {
    if (x.ndim() != 4 || x.dim(2) != channels_ || x.dim(3) != tokens())
      throw ShapeError("project_qkv: expected [T x B x " + std::to_string(channels_) + " x " + std::to_string(tokens()) +
                       "], got " + to_string(x.shape()));
  }

  // First sequence of the batch only.
  AttentionDump<Real> dump_blocks(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& bias) const {
    const std::size_t steps = q.dim(0), batch = q.dim(1), n = tokens(), slab = channels_ * n;
    std::vector<Real> q0(steps * slab), k0(steps * slab);
    for (std::size_t t = 0; t < steps; ++t) {
      std::copy_n(q.data() + t * batch * slab, slab, q0.data() + t * slab);
      std::copy_n(k.data() + t * batch * slab, slab, k0.data() + t * slab);
    }
    Tensor<Real> qs({steps, channels_, n}, std::move(q0)), ks({steps, channels_, n}, std::move(k0));
    AttentionDump<Real> d{name_, steps, n, std::vector<Real>(steps * n * steps * n, Real(0)),
                          std::vector<Real>(bias.values().begin(), bias.values().end())};
    const std::size_t stride = steps * n;
    for (std::size_t tq = 0; tq < steps; ++tq)
      for (std::size_t t = 0; t < steps; ++t) {
        auto block = compute_staw(qs, ks, bias, t, tq, opts_.variant);
        for (std::size_t i = 0; i < n; ++i)
          std::copy_n(block.data() + i * n, n, d.blocks.data() + (tq * n + i) * stride + t * n);
      }
    return d;
  }

  std::string name_;
  std::size_t channels_ = 0, h_ = 0, w_ = 0;
  AttentionOptions opts_;
  Tensor<Real> wq_, wk_, wv_, table_;
  BatchNormLayer<Real> bn_q_, bn_k_, bn_v_, bn_out_;
  LIFNeuron<Real> snn_q_, snn_k_, snn_v_, snn_out_;
};

}  // namespace s3ce
