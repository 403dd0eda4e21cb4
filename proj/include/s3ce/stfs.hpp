#pragma once

// Spatiotemporal feature sampling. Training-only descriptor branches over the
// deep feature map Y2[T x B x C x H x W]: k = floor(T/2) randomly chosen time
// steps, four quadrants around a random split point, and the global mean.
// None of this adds parameters.

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace s3ce {

// Reproducible source of sampler draws: draw i uses a stream derived from
// (seed, i), so a seed plus a counter pins every sample.
struct SamplerSeed {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  Rng next() { return Rng(derive_seed(seed, counter++)); }
};

namespace stfs {

struct CallCounts {
  std::atomic<std::uint64_t> temporal{0};
  std::atomic<std::uint64_t> spatial{0};
};

inline CallCounts& call_counts() {
  static CallCounts counts;
  return counts;
}

}  // namespace stfs

template <class Real>
struct TemporalSample {
  std::vector<std::size_t> steps;
  std::vector<Tensor<Real>> vectors;  // one [B x C] per sampled step
};

template <class Real>
struct SpatialSample {
  std::size_t split_h = 0, split_w = 0;
  std::vector<Tensor<Real>> vectors;  // ul, ur, ll, lr, each [B x C]
};

namespace detail {

inline void check_feature_map(const Shape& s) {
  if (s.size() != 5) throw ShapeError("STFS expects Y2 as [T x B x C x H x W], got " + to_string(s));
}

inline std::vector<std::size_t> all_steps(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace detail

template <class Real>
TemporalSample<Real> sample_temporal(const Tensor<Real>& y2, SamplerSeed& seed) {
  detail::check_feature_map(y2.shape());
  const std::size_t steps = y2.dim(0);
  if (steps < 2) throw std::invalid_argument("sample_temporal: need T >= 2");
  stfs::call_counts().temporal++;
  Rng rng = seed.next();
  TemporalSample<Real> out;
  out.steps = rng.choose(steps, steps / 2);
  auto per_step = avg_pool_2d(y2, Region{0, y2.dim(3), 0, y2.dim(4)});  // [T x B x C]
  for (std::size_t t : out.steps) out.vectors.push_back(select(per_step, t));
  return out;
}

// Quadrants [0:h_r, 0:w_r], [0:h_r, w_r:W], [h_r:H, 0:w_r], [h_r:H, w_r:W]
// around a split drawn from {1..H-1} x {1..W-1}, pooled over time and space.
template <class Real>
SpatialSample<Real> sample_spatial(const Tensor<Real>& y2, SamplerSeed& seed) {
  detail::check_feature_map(y2.shape());
  const std::size_t h = y2.dim(3), w = y2.dim(4);
  if (h < 2 || w < 2) throw std::invalid_argument("sample_spatial: need H >= 2 and W >= 2");
  stfs::call_counts().spatial++;
  Rng rng = seed.next();
  SpatialSample<Real> out;
  out.split_h = 1 + rng.below(h - 1);
  out.split_w = 1 + rng.below(w - 1);
  const auto steps = detail::all_steps(y2.dim(0));
  for (Region r : {Region{0, out.split_h, 0, out.split_w}, Region{0, out.split_h, out.split_w, w},
                   Region{out.split_h, h, 0, out.split_w}, Region{out.split_h, h, out.split_w, w}})
    out.vectors.push_back(mean_slices(avg_pool_2d(y2, r), steps));
  return out;
}

// Mean over time and space, [B x C]. The only descriptor used for retrieval.
template <class Real>
Tensor<Real> global_descriptor(const Tensor<Real>& y2) {
  detail::check_feature_map(y2.shape());
  return mean_slices(avg_pool_2d(y2, Region{0, y2.dim(3), 0, y2.dim(4)}), detail::all_steps(y2.dim(0)));
}

struct StfsOptions {
  bool enabled = true;
  bool temporal = true;
  bool spatial = true;
};

template <class Real>
struct BranchDescriptors {
  std::vector<Tensor<Real>> temporal;
  std::vector<Tensor<Real>> spatial;
  Tensor<Real> global;
};

template <class Real>
BranchDescriptors<Real> sample_branches(const Tensor<Real>& y2, const StfsOptions& opts, SamplerSeed& seed) {
  BranchDescriptors<Real> out;
  out.global = global_descriptor(y2);
  if (!opts.enabled) return out;
  if (opts.temporal) out.temporal = sample_temporal(y2, seed).vectors;
  if (opts.spatial) out.spatial = sample_spatial(y2, seed).vectors;
  return out;
}

}  // namespace s3ce
