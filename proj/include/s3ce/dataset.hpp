#pragma once

// On-disk dataset loading, the sequence-level train/test split, and
// identity-balanced P x K batch sampling.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "events.hpp"
#include "rng.hpp"
#include "synthgen.hpp"
#include "tensor.hpp"

namespace s3ce {

struct Sample {
  int id = 0, cam = 0, seq = 0;
  EventTensorSequence tensor;
};

struct DataOptions {
  std::size_t steps = 8;
  std::int64_t window_us = 266664;
  std::optional<float> clip;
};

struct Dataset {
  SensorGeometry geom;
  std::size_t seqs_per_camera = 0;
  std::vector<Sample> samples;
};

inline Dataset load_dataset(const std::filesystem::path& root, const DataOptions& opts) {
  const auto manifest_path = root / "manifest.csv";
  if (!std::filesystem::exists(manifest_path)) throw FormatError("no manifest.csv under " + root.string());
  const Manifest m = read_manifest(manifest_path);
  Dataset ds;
  ds.geom = m.config.geom;
  ds.seqs_per_camera = m.config.seqs;
  BinningOptions bin;
  bin.clip = opts.clip;
  for (const auto& e : m.entries) {
    const auto events = parse_event_file(root / e.path, ds.geom);
    ds.samples.push_back({e.id, e.cam, e.seq, bin_events(events, opts.steps, opts.window_us, ds.geom, bin)});
  }
  std::sort(ds.samples.begin(), ds.samples.end(), [](const Sample& a, const Sample& b) {
    return std::tie(a.id, a.cam, a.seq) < std::tie(b.id, b.cam, b.seq);
  });
  return ds;
}

// The last `test_seqs` sequence numbers of every (identity, camera) are held
// out; the rest train.
struct Split {
  std::vector<std::size_t> train, test;
};

inline Split split_by_sequence(const Dataset& ds, std::size_t test_seqs) {
  std::size_t max_seq = 0;
  for (const auto& s : ds.samples) max_seq = std::max<std::size_t>(max_seq, static_cast<std::size_t>(s.seq));
  const std::size_t per = std::max(ds.seqs_per_camera, max_seq + 1);
  if (test_seqs >= per) throw std::invalid_argument("split: test_seqs leaves no training sequences");
  Split split;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    (static_cast<std::size_t>(ds.samples[i].seq) + test_seqs >= per ? split.test : split.train).push_back(i);
  return split;
}

// Dense class indices for the identities present in `subset`.
inline std::map<int, int> label_map(const Dataset& ds, const std::vector<std::size_t>& subset) {
  std::set<int> ids;
  for (auto i : subset) ids.insert(ds.samples[i].id);
  std::map<int, int> out;
  for (int id : ids) out.emplace(id, static_cast<int>(out.size()));
  return out;
}

// Draws P identities, then K distinct sequences of each, without replacement.
class PKSampler {
public:
  PKSampler(const Dataset& ds, const std::vector<std::size_t>& subset, std::size_t p, std::size_t k)
      : p_(p), k_(k) {
    std::map<int, std::vector<std::size_t>> by_id;
    for (auto i : subset) by_id[ds.samples[i].id].push_back(i);
    for (auto& [id, v] : by_id)
      if (v.size() >= k) pools_.push_back(v);
    if (p < 2 || k < 2) throw std::invalid_argument("P x K batching needs P >= 2 and K >= 2");
    if (pools_.size() < p)
      throw std::invalid_argument("dataset too small for P x K batching: " + std::to_string(pools_.size()) +
                                  " identities with at least " + std::to_string(k) + " sequences, need " +
                                  std::to_string(p));
  }

  std::vector<std::size_t> next(Rng& rng) const {
    std::vector<std::size_t> batch;
    for (auto pi : rng.choose(pools_.size(), p_))
      for (auto si : rng.choose(pools_[pi].size(), k_)) batch.push_back(pools_[pi][si]);
    return batch;
  }

  std::size_t batch_size() const { return p_ * k_; }

private:
  std::size_t p_, k_;
  std::vector<std::vector<std::size_t>> pools_;
};

// Stacks samples into the network's time-major input [T x B x 2 x H x W].
// Samples whose `mirror` flag is set are flipped left to right.
template <class Real>
Tensor<Real> make_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                        const std::vector<bool>& mirror = {}) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const auto& first = ds.samples[indices.front()].tensor;
  const std::size_t steps = first.steps, plane = 2 * first.height * first.width, batch = indices.size();
  std::vector<Real> data(steps * batch * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& seq = ds.samples[indices[b]].tensor;
    if (seq.steps != steps || seq.height != first.height || seq.width != first.width)
      throw ShapeError("make_batch: samples differ in shape");
    const bool flip = b < mirror.size() && mirror[b];
    for (std::size_t t = 0; t < steps; ++t) {
      const float* src = seq.data.data() + t * plane;
      Real* dst = data.data() + (t * batch + b) * plane;
      if (!flip) {
        std::copy_n(src, plane, dst);
        continue;
      }
      for (std::size_t row = 0; row < plane / first.width; ++row)
        for (std::size_t x = 0; x < first.width; ++x)
          dst[row * first.width + x] = static_cast<Real>(src[row * first.width + first.width - 1 - x]);
    }
  }
  return Tensor<Real>({steps, batch, 2, first.height, first.width}, std::move(data));
}

}  // namespace s3ce
