#pragma once

// The full network: conv-BN-LIF stem, four SEW stages with stride-2
// downsampling, attention stages after stage 2 (shallow) and stage 4 (deep),
// then descriptor branches on the deep feature map. Also the Adam optimizer
// and the epoch loop.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "eval.hpp"
#include "losses.hpp"
#include "spiking.hpp"
#include "ssam.hpp"
#include "stfs.hpp"

namespace s3ce {

class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  double lr = 3.5e-4;
  std::size_t decay_every = 30;  // epochs
  double decay_factor = 1.0 / 3.0;
  std::size_t epochs = 100;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;

  double lr_at(std::size_t epoch) const {
    return decay_every == 0 ? lr : lr * std::pow(decay_factor, static_cast<double>(epoch / decay_every));
  }
};

struct ModelConfig {
  std::size_t steps = 8;
  std::size_t height = 48, width = 24;
  std::vector<std::size_t> widths{16, 32, 64, 128};
  std::vector<std::size_t> blocks{1, 1, 1, 1};
  LIFParams<double> lif{};
  double surrogate_width = 1.0;
  bool ssam_shallow = true, ssam_deep = true;
  AttentionOptions ssam{};
  StfsOptions stfs{};
  LossWeights loss{};
  OptimizerConfig optim{};
  std::size_t batch_p = 4, batch_k = 4;
  std::size_t batches_per_epoch = 16;
  std::size_t eval_every = 1;
  bool flip = true;  // random left-right mirroring of training sequences
  double bn_gamma_init = 2.0;  // initial scale of every BN affine weight

  void validate() const {
    if (steps < 1) throw std::invalid_argument("model: T must be >= 1");
    if (widths.size() != 4 || blocks.size() != 4) throw std::invalid_argument("model: expected 4 stage widths and block counts");
    for (auto b : blocks)
      if (b < 1) throw std::invalid_argument("model: every stage needs at least one block");
    lif.validate();
    loss.validate();
    if (surrogate_width <= 0) throw std::invalid_argument("model: surrogate width must be positive");
    if (!(bn_gamma_init > 0)) throw std::invalid_argument("model: BN weight init must be positive");
  }
};

struct StageGeometry {
  std::size_t channels, height, width;
};

// Output geometry of stages 1..4 (stride 2 each, padding 1 for 3x3).
inline std::vector<StageGeometry> stage_geometry(const ModelConfig& cfg) {
  std::vector<StageGeometry> out;
  std::size_t h = cfg.height, w = cfg.width;
  for (std::size_t s = 0; s < 4; ++s) {
    h = (h - 1) / 2 + 1;
    w = (w - 1) / 2 + 1;
    out.push_back({cfg.widths[s], h, w});
  }
  return out;
}

enum class Mode { train, eval };

template <class Real>
struct ForwardProbe {
  SpikeRateLog spikes;
  std::vector<AttentionDump<Real>> attention;
};

template <class Real>
struct ForwardOutput {
  Tensor<Real> y2;  // [T x B x C2 x H2 x W2] before any pooling
  BranchDescriptors<Real> branches;
};

template <class Real>
class Network {
public:
  Network(const ModelConfig& cfg, std::size_t classes, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "init"));
    const LIFParams<Real> lif{static_cast<Real>(cfg.lif.tau_m), static_cast<Real>(cfg.lif.dt),
                              static_cast<Real>(cfg.lif.v_rest), static_cast<Real>(cfg.lif.v_th),
                              static_cast<Real>(cfg.lif.v_reset)};
    const SurrogateSpec<Real> sg{static_cast<Real>(cfg.surrogate_width)};
    stem_ = ConvBnLif<Real>("stem", 2, cfg.widths[0], 3, 1, lif, sg, rng);
    const auto geo = stage_geometry(cfg);
    std::size_t cin = cfg.widths[0];
    for (std::size_t s = 0; s < 4; ++s) {
      std::vector<std::unique_ptr<SEWBlock<Real>>> stage;
      for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
        const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        stage.push_back(std::make_unique<SEWBlock<Real>>(name, cin, cfg.widths[s], b == 0 ? 2 : 1, lif, sg, rng));
        cin = cfg.widths[s];
      }
      stages_.push_back(std::move(stage));
    }
    if (cfg.ssam_shallow)
      shallow_ = std::make_unique<AttentionStage<Real>>("ssam.shallow", geo[1].channels, geo[1].height, geo[1].width,
                                                        cfg.ssam, lif, sg, rng);
    if (cfg.ssam_deep)
      deep_ = std::make_unique<AttentionStage<Real>>("ssam.deep", geo[3].channels, geo[3].height, geo[3].width, cfg.ssam,
                                                     lif, sg, rng);
    head_ = ClassifierHead<Real>(cfg.widths[3], classes, rng);
    for (auto& p : parameters())
      if (p.name.ends_with(".bn.weight"))
        for (auto& v : p.tensor.mutable_values()) v = static_cast<Real>(cfg.bn_gamma_init);
  }

  const ModelConfig& config() const { return cfg_; }
  ClassifierHead<Real>& head() { return head_; }
  AttentionStage<Real>* shallow_attention() { return shallow_.get(); }
  AttentionStage<Real>* deep_attention() { return deep_.get(); }
  ConvBnLif<Real>& stem() { return stem_; }

  // x[T x B x 2 x H x W]. Train mode draws descriptor branches from
  // `sampler` (global only when it is null); eval mode returns the global
  // descriptor alone and never touches the samplers.
  ForwardOutput<Real> forward(const Tensor<Real>& x, Mode mode, SamplerSeed* sampler = nullptr,
                              ForwardProbe<Real>* probe = nullptr) {
    if (x.ndim() != 5 || x.dim(0) != cfg_.steps || x.dim(2) != 2 || x.dim(3) != cfg_.height || x.dim(4) != cfg_.width)
      throw ShapeError("network input must be [" + std::to_string(cfg_.steps) + " x B x 2 x " +
                       std::to_string(cfg_.height) + " x " + std::to_string(cfg_.width) + "], got " + to_string(x.shape()));
    ForwardContext ctx{cfg_.steps, mode == Mode::train, probe ? &probe->spikes : nullptr};
    auto* dumps = probe ? &probe->attention : nullptr;
    auto y = stem_.forward(x, ctx);
    for (std::size_t s = 0; s < 4; ++s) {
      for (auto& block : stages_[s]) y = block->forward(y, ctx);
      if (s == 1 && shallow_) y = shallow_->forward(y, ctx, dumps);
      if (s == 3 && deep_) y = deep_->forward(y, ctx, dumps);
    }
    ForwardOutput<Real> out;
    out.y2 = y;
    if (mode == Mode::train && sampler) {
      out.branches = sample_branches(y, cfg_.stfs, *sampler);
    } else {
      out.branches.global = global_descriptor(y);
    }
    return out;
  }

  ParamList<Real> parameters() const {
    ParamList<Real> out;
    stem_.collect(out);
    for (const auto& stage : stages_)
      for (const auto& block : stage) block->collect(out);
    if (shallow_) shallow_->collect(out);
    if (deep_) deep_->collect(out);
    head_.collect(out);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters())
      if (p.trainable) n += p.tensor.numel();
    return n;
  }

  // Switches every LIF layer between Heaviside spikes and the smooth,
  // membrane-replaying variant used for numerical gradient checks.
  void set_spike_mode(SpikeMode mode) {
    for_each_neuron([mode](LIFNeuron<Real>& n) {
      n.mode = mode;
      n.trace.clear();
    });
  }

  template <class F>
  void for_each_neuron(F&& f) {
    f(stem_.neuron());
    for (auto& stage : stages_)
      for (auto& block : stage) block->for_each_unit([&](ConvBnLif<Real>& u) { f(u.neuron()); });
    if (shallow_) shallow_->for_each_neuron(f);
    if (deep_) deep_->for_each_neuron(f);
  }

private:
  ModelConfig cfg_;
  ConvBnLif<Real> stem_;
  std::vector<std::vector<std::unique_ptr<SEWBlock<Real>>>> stages_;
  std::unique_ptr<AttentionStage<Real>> shallow_, deep_;
  ClassifierHead<Real> head_;
};

template <class Real>
class Adam {
public:
  explicit Adam(const OptimizerConfig& cfg) : cfg_(cfg) {}

  // Parameters that never received a gradient are left untouched.
  void step(const ParamList<Real>& params, double lr) {
    ++t_;
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.trainable ? p.tensor.numel() : 0, 0.0);
        v_.emplace_back(p.trainable ? p.tensor.numel() : 0, 0.0);
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("Adam: parameter list changed between steps");
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& p = params[k];
      auto grad = p.tensor.grad();
      if (!p.trainable || grad.empty()) continue;
      Tensor<Real> target = p.tensor;
      auto value = target.mutable_values();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]) + cfg_.weight_decay * static_cast<double>(value[i]);
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
        const double update = lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.eps);
        value[i] = static_cast<Real>(static_cast<double>(value[i]) - update);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

private:
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

template <class Real>
void zero_grad(const ParamList<Real>& params) {
  for (auto p : params) p.tensor.zero_grad();
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss_total = 0, loss_tri = 0, loss_cls = 0;
  double map = std::numeric_limits<double>::quiet_NaN();
  double rank1 = std::numeric_limits<double>::quiet_NaN();
};

// Global descriptors for `indices`, computed in eval mode in chunks.
template <class Real>
EmbeddingBatch embed(Network<Real>& net, const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t chunk = 16) {
  NoGradGuard no_grad;
  EmbeddingBatch out;
  out.dim = net.config().widths.back();
  for (std::size_t lo = 0; lo < indices.size(); lo += chunk) {
    std::vector<std::size_t> part(indices.begin() + static_cast<std::ptrdiff_t>(lo),
                                  indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), lo + chunk)));
    auto g = net.forward(make_batch<Real>(ds, part), Mode::eval).branches.global;
    for (Real v : g.values()) out.vectors.push_back(static_cast<double>(v));
    for (auto i : part) {
      out.ids.push_back(ds.samples[i].id);
      out.cams.push_back(ds.samples[i].cam);
    }
  }
  return out;
}

// Every listed sequence serves as query and as gallery; same-camera
// matches of the same identity are excluded per query.
template <class Real>
RetrievalResult evaluate(Network<Real>& net, const Dataset& ds, const std::vector<std::size_t>& indices) {
  const auto emb = embed(net, ds, indices);
  const auto sim = cosine_sim_matrix(emb, emb, ZeroNorm::zero_similarity);
  const LabelSet labels{emb.ids, emb.cams};
  return compute_map_cmc(sim, labels, labels);
}

template <class Real>
struct TrainState {
  TrainState(const Dataset& ds, const Split& split_, const ModelConfig& cfg, std::uint64_t seed)
      : split(split_),
        labels(label_map(ds, split_.train)),
        net(cfg, labels.size(), seed),
        adam(cfg.optim),
        sampler{derive_seed(seed, "stfs"), 0},
        batch_rng(derive_seed(seed, "batches")),
        batches(ds, split_.train, cfg.batch_p, cfg.batch_k) {}

  Split split;
  std::map<int, int> labels;
  Network<Real> net;
  Adam<Real> adam;
  SamplerSeed sampler;
  Rng batch_rng;
  PKSampler batches;
  std::size_t epoch = 0;
};

template <class Real>
EpochMetrics train_epoch(const Dataset& ds, const ModelConfig& cfg, TrainState<Real>& state) {
  EpochMetrics m;
  m.epoch = state.epoch + 1;
  const double lr = cfg.optim.lr_at(state.epoch);
  const auto params = state.net.parameters();
  for (std::size_t it = 0; it < cfg.batches_per_epoch; ++it) {
    const auto idx = state.batches.next(state.batch_rng);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(state.labels.at(ds.samples[i].id));
    std::vector<bool> mirror(idx.size(), false);
    if (cfg.flip)
      for (std::size_t b = 0; b < mirror.size(); ++b) mirror[b] = state.batch_rng.below(2) == 1;
    auto out = state.net.forward(make_batch<Real>(ds, idx, mirror), Mode::train, &state.sampler);
    auto loss = total_loss(out.branches, state.net.head(), labels, cfg.loss);
    if (!std::isfinite(static_cast<double>(loss.total.item())))
      throw NumericError("non-finite loss at epoch " + std::to_string(m.epoch) + ", batch " + std::to_string(it));
    zero_grad(params);
    backward(loss.total);
    state.adam.step(params, lr);
    m.loss_total += static_cast<double>(loss.total.item());
    m.loss_tri += static_cast<double>(loss.triplet.item());
    m.loss_cls += static_cast<double>(loss.classification.item());
  }
  const double n = static_cast<double>(std::max<std::size_t>(cfg.batches_per_epoch, 1));
  m.loss_total /= n;
  m.loss_tri /= n;
  m.loss_cls /= n;
  ++state.epoch;
  if (cfg.eval_every > 0 && state.epoch % cfg.eval_every == 0 && !state.split.test.empty()) {
    const auto r = evaluate(state.net, ds, state.split.test);
    m.map = r.map;
    m.rank1 = r.rank1();
  }
  return m;
}

}  // namespace s3ce
