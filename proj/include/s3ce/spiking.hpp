#pragma once

// Leaky integrate-and-fire neurons trained with a triangular surrogate
// gradient, plus the conv-BN-LIF unit and spike-element-wise residual block.

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace s3ce {

template <class Real>
struct LIFParams {
  Real tau_m = 2;
  Real dt = 1;
  Real v_rest = 0;
  Real v_th = 1;
  Real v_reset = 0;

  Real alpha() const { return dt / tau_m; }

  void validate() const {
    const Real a = alpha();
    if (!(a > 0 && a <= 1)) throw std::invalid_argument("LIF: dt/tau_m must lie in (0, 1]");
    if (!(v_th > v_reset)) throw std::invalid_argument("LIF: threshold must exceed the reset potential");
    if (!(v_th > v_rest)) throw std::invalid_argument("LIF: threshold must exceed the resting potential");
  }
};

template <class Real>
struct SurrogateSpec {
  Real width = 1;  // half-width a of the triangular window
};

// d spike / d v, a triangle of height 1/a centred on the threshold.
template <class Real>
Real surrogate_grad(Real v, const LIFParams<Real>& params, const SurrogateSpec<Real>& spec) {
  if (!(spec.width > 0)) throw std::invalid_argument("surrogate width must be positive");
  const Real u = std::abs(v - params.v_th) / spec.width;
  return u < Real(1) ? (Real(1) - u) / spec.width : Real(0);
}

// Antiderivative of the surrogate window. Used as a smooth stand-in for the
// Heaviside spike when checking gradients numerically.
template <class Real>
Real smooth_spike(Real v, const LIFParams<Real>& params, const SurrogateSpec<Real>& spec) {
  const Real a = spec.width, u = v - params.v_th;
  if (u <= -a) return 0;
  if (u >= a) return 1;
  if (u <= 0) return (u + a) * (u + a) / (2 * a * a);
  return 1 - (a - u) * (a - u) / (2 * a * a);
}

template <class Real>
struct LIFState {
  std::vector<Real> v;

  static LIFState at_rest(std::size_t n, const LIFParams<Real>& params) { return {std::vector<Real>(n, params.v_rest)}; }
};

template <class Real>
struct LIFStepResult {
  std::vector<Real> spikes;
  LIFState<Real> state;
};

// One Euler step of the membrane equation followed by a strict threshold
// test; firing units reset to v_reset.
template <class Real>
LIFStepResult<Real> lif_step(const LIFState<Real>& state, std::span<const Real> input, const LIFParams<Real>& params) {
  if (state.v.size() != input.size()) throw ShapeError("lif_step: state and input sizes differ");
  const Real a = params.alpha();
  LIFStepResult<Real> out{std::vector<Real>(input.size()), state};
  for (std::size_t i = 0; i < input.size(); ++i) {
    Real v = state.v[i] + a * (-(state.v[i] - params.v_rest) + input[i]);
    if (v > params.v_th) {
      out.spikes[i] = 1;
      v = params.v_reset;
    } else {
      out.spikes[i] = 0;
    }
    out.state.v[i] = v;
  }
  return out;
}

enum class SpikeMode {
  hard,           // Heaviside spikes, surrogate gradient in backward
  smooth_frozen,  // smooth_spike() forward with the membrane carry replayed from a recording
};

// Per-layer recording of the membrane carried into each step. In
// smooth_frozen mode the first forward fills it and later forwards replay it,
// so the carry is a constant of the function being differentiated.
template <class Real>
struct MembraneTrace {
  std::vector<Real> v_before;  // steps x units
  void clear() { v_before.clear(); }
};

// inputs[T x ...] -> spikes[T x ...]. The membrane starts at rest. Backward
// treats the carried membrane as a constant (no gradient across steps) and
// applies alpha * surrogate(v_candidate) at every step.
template <class Real>
Tensor<Real> lif_sequence(const Tensor<Real>& inputs, const LIFParams<Real>& params, const SurrogateSpec<Real>& spec,
                          SpikeMode mode = SpikeMode::hard, MembraneTrace<Real>* trace = nullptr) {
  params.validate();
  if (!(spec.width > 0)) throw std::invalid_argument("surrogate width must be positive");
  if (inputs.ndim() < 1 || inputs.dim(0) < 1) throw ShapeError("lif_sequence: need at least one time step");
  const std::size_t steps = inputs.dim(0), units = inputs.numel() / steps;
  const Real a = params.alpha();
  const bool replay = mode == SpikeMode::smooth_frozen && trace && trace->v_before.size() == steps * units;
  const bool record = mode == SpikeMode::smooth_frozen && trace && !replay;
  if (record) trace->v_before.resize(steps * units);

  std::vector<Real> spikes(inputs.numel()), slope(inputs.numel());
  std::vector<Real> v(units, params.v_rest);
  for (std::size_t t = 0; t < steps; ++t) {
    const Real* x = inputs.data() + t * units;
    Real* s = spikes.data() + t * units;
    Real* d = slope.data() + t * units;
    if (replay) std::copy_n(trace->v_before.data() + t * units, units, v.data());
    if (record) std::copy_n(v.data(), units, trace->v_before.data() + t * units);
    for (std::size_t i = 0; i < units; ++i) {
      const Real cand = v[i] + a * (-(v[i] - params.v_rest) + x[i]);
      const bool fires = cand > params.v_th;
      s[i] = mode == SpikeMode::hard ? (fires ? Real(1) : Real(0)) : smooth_spike(cand, params, spec);
      d[i] = a * surrogate_grad(cand, params, spec);
      v[i] = fires ? params.v_reset : cand;
    }
  }
  return detail::make_result<Real>(inputs.shape(), std::move(spikes), {inputs}, [slope = std::move(slope)](Node<Real>& self) {
    if (Real* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < slope.size(); ++i) g[i] += self.grad[i] * slope[i];
  });
}

// Plain parameter record shared by every layer: checkpoints and optimizers
// walk these by name.
template <class Real>
struct NamedTensor {
  std::string name;
  Tensor<Real> tensor;
  bool trainable = true;
};

template <class Real>
using ParamList = std::vector<NamedTensor<Real>>;

template <class Real>
Tensor<Real> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor<Real> t(std::move(shape));
  for (auto& v : t.mutable_values()) v = static_cast<Real>(sd * rng.normal());
  t.set_requires_grad(true);
  return t;
}

// A LIF layer applied over a time-major tensor. Holds no trainable state.
template <class Real>
struct LIFNeuron {
  LIFParams<Real> params;
  SurrogateSpec<Real> surrogate;
  SpikeMode mode = SpikeMode::hard;
  MembraneTrace<Real> trace;

  Tensor<Real> operator()(const Tensor<Real>& x) {
    return lif_sequence(x, params, surrogate, mode, mode == SpikeMode::smooth_frozen ? &trace : nullptr);
  }
};

// Spike-rate log keyed by layer name; filled only when attached.
struct SpikeRateLog {
  std::vector<std::pair<std::string, std::vector<double>>> rates;  // per-step firing fraction

  template <class Real>
  void record(const std::string& name, const Tensor<Real>& spikes_time_major) {
    const std::size_t steps = spikes_time_major.dim(0), units = spikes_time_major.numel() / steps;
    std::vector<double> per_step(steps, 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
      std::size_t fired = 0;
      for (std::size_t i = 0; i < units; ++i) fired += spikes_time_major[t * units + i] != Real(0);
      per_step[t] = static_cast<double>(fired) / static_cast<double>(units);
    }
    rates.emplace_back(name, std::move(per_step));
  }
};

// Everything a forward pass needs besides the input.
struct ForwardContext {
  std::size_t steps = 1;
  bool training = false;
  SpikeRateLog* spike_log = nullptr;
};

// Per-channel batch normalization with learnable affine and running stats.
template <class Real>
class BatchNormLayer {
public:
  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t channels) {
    gamma_ = Tensor<Real>({channels}, Real(1)).set_requires_grad(true);
    beta_ = Tensor<Real>({channels}, Real(0)).set_requires_grad(true);
    state_.running_mean = Tensor<Real>({channels}, Real(0));
    state_.running_var = Tensor<Real>({channels}, Real(1));
  }

  // x[M x C x ...]
  Tensor<Real> operator()(const Tensor<Real>& x, bool training) { return batch_norm(x, gamma_, beta_, state_, training); }

  void collect(ParamList<Real>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", gamma_, true});
    out.push_back({prefix + ".bias", beta_, true});
    out.push_back({prefix + ".running_mean", state_.running_mean, false});
    out.push_back({prefix + ".running_var", state_.running_var, false});
  }

private:
  Tensor<Real> gamma_, beta_;
  BatchNormState<Real> state_;
};

template <class Real>
class ConvBnLif {
public:
  ConvBnLif() = default;
  ConvBnLif(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
            const LIFParams<Real>& lif, const SurrogateSpec<Real>& sg, Rng& rng)
      : name_(std::move(name)), stride_(stride), pad_(kernel / 2), bn_(cout) {
    weight_ = kaiming_normal<Real>({cout, cin, kernel, kernel}, cin * kernel * kernel, rng);
    neuron_.params = lif;
    neuron_.surrogate = sg;
  }

  // x[T x B x C x H x W] -> spikes[T x B x C' x H' x W']
  Tensor<Real> forward(const Tensor<Real>& x, const ForwardContext& ctx) {
    const std::size_t steps = x.dim(0), batch = x.dim(1);
    auto flat = x.reshape({steps * batch, x.dim(2), x.dim(3), x.dim(4)});
    auto y = conv2d(flat, weight_, stride_, pad_);
    y = bn_(y, ctx.training);
    const Shape out{steps, batch, y.dim(1), y.dim(2), y.dim(3)};
    auto spikes = neuron_(y.reshape({steps, y.numel() / steps})).reshape(out);
    if (ctx.spike_log) ctx.spike_log->record(name_, spikes);
    return spikes;
  }

  void collect(ParamList<Real>& out) const {
    out.push_back({name_ + ".conv.weight", weight_, true});
    bn_.collect(out, name_ + ".bn");
  }

  LIFNeuron<Real>& neuron() { return neuron_; }
  Tensor<Real>& weight() { return weight_; }

private:
  std::string name_;
  std::size_t stride_ = 1, pad_ = 0;
  Tensor<Real> weight_;
  BatchNormLayer<Real> bn_;
  LIFNeuron<Real> neuron_;
};

// out = F(x) + shortcut(x) with F = conv-BN-LIF -> conv-BN-LIF. The shortcut
// is the identity when shapes allow, else a strided 1x1 conv-BN-LIF.
template <class Real>
class SEWBlock {
public:
  SEWBlock() = default;
  SEWBlock(const std::string& name, std::size_t cin, std::size_t cout, std::size_t stride, const LIFParams<Real>& lif,
           const SurrogateSpec<Real>& sg, Rng& rng)
      : conv1_(name + ".conv1", cin, cout, 3, stride, lif, sg, rng), conv2_(name + ".conv2", cout, cout, 3, 1, lif, sg, rng) {
    if (stride != 1 || cin != cout)
      downsample_ = std::make_unique<ConvBnLif<Real>>(name + ".downsample", cin, cout, 1, stride, lif, sg, rng);
  }

  Tensor<Real> forward(const Tensor<Real>& x, const ForwardContext& ctx) {
    auto branch = conv2_.forward(conv1_.forward(x, ctx), ctx);
    auto shortcut = downsample_ ? downsample_->forward(x, ctx) : x;
    if (branch.shape() != shortcut.shape())
      throw ShapeError("SEW block: residual branches " + to_string(branch.shape()) + " vs " + to_string(shortcut.shape()));
    return add(branch, shortcut);
  }

  void collect(ParamList<Real>& out) const {
    conv1_.collect(out);
    conv2_.collect(out);
    if (downsample_) downsample_->collect(out);
  }

  template <class F>
  void for_each_unit(F&& f) {
    f(conv1_);
    f(conv2_);
    if (downsample_) f(*downsample_);
  }

private:
  ConvBnLif<Real> conv1_, conv2_;
  std::unique_ptr<ConvBnLif<Real>> downsample_;
};

}  // namespace s3ce
