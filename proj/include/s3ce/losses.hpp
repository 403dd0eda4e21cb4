#pragma once

// Batch-hard triplet loss, label-smoothed cross-entropy, and the weighted
// combination over all descriptor branches.

#include <algorithm>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "spiking.hpp"
#include "stfs.hpp"

namespace s3ce {

struct LossWeights {
  double lambda1 = 1.0;  // triplet
  double lambda2 = 0.1;  // classification
  double margin = 0.3;
  double epsilon = 0.1;  // label smoothing

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || margin < 0 || epsilon < 0 || epsilon >= 1)
      throw std::invalid_argument("loss weights must be nonnegative and epsilon < 1");
  }
};

// Hardest positive and hardest negative for each anchor, by index.
struct HardPairs {
  std::vector<std::size_t> positive, negative;
};

// Needs at least two identities, each with at least two samples.
inline void check_pk_batch(const std::vector<int>& labels) {
  std::map<int, std::size_t> count;
  for (int l : labels) ++count[l];
  if (count.size() < 2) throw std::invalid_argument("triplet loss: batch needs at least 2 identities");
  for (auto [id, n] : count)
    if (n < 2) throw std::invalid_argument("triplet loss: identity " + std::to_string(id) + " has a single sample");
}

template <class Real>
HardPairs mine_hard_pairs(std::span<const Real> dist, const std::vector<int>& labels) {
  const std::size_t b = labels.size();
  HardPairs out{std::vector<std::size_t>(b), std::vector<std::size_t>(b)};
  for (std::size_t a = 0; a < b; ++a) {
    Real far = -std::numeric_limits<Real>::infinity(), near = std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      const Real d = dist[a * b + j];
      if (labels[j] == labels[a]) {
        if (d > far) far = d, out.positive[a] = j;
      } else if (d < near) {
        near = d, out.negative[a] = j;
      }
    }
  }
  return out;
}

// Mean over anchors of max(0, d(a, hardest p) - d(a, hardest n) + margin),
// with Euclidean distance between L2-normalized rows.
template <class Real>
Tensor<Real> triplet_loss_batch_hard(const Tensor<Real>& embeddings, const std::vector<int>& labels, Real margin) {
  if (embeddings.ndim() != 2 || embeddings.dim(0) != labels.size())
    throw ShapeError("triplet loss: embeddings " + to_string(embeddings.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  check_pk_batch(labels);
  const std::size_t b = labels.size();
  auto dist = pairwise_distance(l2_normalize_rows(embeddings));
  const HardPairs hard = mine_hard_pairs(dist.values(), labels);
  std::vector<std::size_t> pos(b), neg(b);
  for (std::size_t a = 0; a < b; ++a) {
    pos[a] = a * b + hard.positive[a];
    neg[a] = a * b + hard.negative[a];
  }
  return mean(relu(add(sub(gather(dist, pos), gather(dist, neg)), Tensor<Real>({b}, margin))));
}

// Targets q_k = eps/K + (1 - eps) [k == y]; loss = mean_b -sum_k q_k log p_k.
template <class Real>
Tensor<Real> label_smoothing_ce(const Tensor<Real>& logits, const std::vector<int>& targets, Real epsilon) {
  if (logits.ndim() != 2 || logits.dim(0) != targets.size())
    throw ShapeError("label_smoothing_ce: logits " + to_string(logits.shape()));
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw std::invalid_argument("label_smoothing_ce: need at least 2 classes");
  if (epsilon < 0 || epsilon >= 1) throw std::invalid_argument("label_smoothing_ce: epsilon must lie in [0, 1)");
  Tensor<Real> q({b, k}, epsilon / static_cast<Real>(k));
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= k)
      throw std::out_of_range("label_smoothing_ce: target " + std::to_string(targets[i]) + " outside [0, " +
                              std::to_string(k) + ")");
    q.mutable_data()[i * k + static_cast<std::size_t>(targets[i])] += Real(1) - epsilon;
  }
  return scale(sum(mul(q, log_softmax_lastdim(logits))), Real(-1) / static_cast<Real>(b));
}

// One linear classifier per branch type, shared across vectors of that type.
template <class Real>
class ClassifierHead {
public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t features, std::size_t classes, Rng& rng) : classes_(classes) {
    const double sd = 0.001;
    for (auto* l : {&temporal_, &spatial_, &global_}) {
      l->weight = Tensor<Real>({classes, features});
      for (auto& v : l->weight.mutable_values()) v = static_cast<Real>(sd * rng.normal());
      l->weight.set_requires_grad(true);
      l->bias = Tensor<Real>({classes}, Real(0)).set_requires_grad(true);
    }
  }

  std::size_t classes() const { return classes_; }

  Tensor<Real> temporal(const Tensor<Real>& x) const { return linear(x, temporal_.weight, temporal_.bias); }
  Tensor<Real> spatial(const Tensor<Real>& x) const { return linear(x, spatial_.weight, spatial_.bias); }
  Tensor<Real> global(const Tensor<Real>& x) const { return linear(x, global_.weight, global_.bias); }

  void collect(ParamList<Real>& out) const {
    out.push_back({"head.temporal.weight", temporal_.weight, true});
    out.push_back({"head.temporal.bias", temporal_.bias, true});
    out.push_back({"head.spatial.weight", spatial_.weight, true});
    out.push_back({"head.spatial.bias", spatial_.bias, true});
    out.push_back({"head.global.weight", global_.weight, true});
    out.push_back({"head.global.bias", global_.bias, true});
  }

private:
  struct Linear {
    Tensor<Real> weight, bias;
  };
  std::size_t classes_ = 0;
  Linear temporal_, spatial_, global_;
};

template <class Real>
struct LossBreakdown {
  Tensor<Real> total, triplet, classification;
};

// Each loss is averaged over the vectors of a branch, then across the
// branches present; total = lambda1 * L_tri + lambda2 * L_cls.
template <class Real>
LossBreakdown<Real> total_loss(const BranchDescriptors<Real>& branches, const ClassifierHead<Real>& heads,
                               const std::vector<int>& labels, const LossWeights& w) {
  w.validate();
  std::vector<Tensor<Real>> tri, cls;
  auto branch = [&](const std::vector<Tensor<Real>>& vectors, auto&& head) {
    if (vectors.empty()) return;
    std::vector<Tensor<Real>> t, c;
    for (const auto& v : vectors) {
      t.push_back(triplet_loss_batch_hard(v, labels, static_cast<Real>(w.margin)));
      c.push_back(label_smoothing_ce(head(v), labels, static_cast<Real>(w.epsilon)));
    }
    tri.push_back(mean(stack(t)));
    cls.push_back(mean(stack(c)));
  };
  branch(branches.temporal, [&](const Tensor<Real>& v) { return heads.temporal(v); });
  branch(branches.spatial, [&](const Tensor<Real>& v) { return heads.spatial(v); });
  branch({branches.global}, [&](const Tensor<Real>& v) { return heads.global(v); });
  LossBreakdown<Real> out;
  out.triplet = mean(stack(tri));
  out.classification = mean(stack(cls));
  out.total = add(scale(out.triplet, static_cast<Real>(w.lambda1)), scale(out.classification, static_cast<Real>(w.lambda2)));
  return out;
}

}  // namespace s3ce
