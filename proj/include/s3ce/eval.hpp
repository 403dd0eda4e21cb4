#pragma once

// Retrieval metrics under the cross-camera protocol: gallery items that
// share both identity and camera with the query are removed from its ranking.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace s3ce {

struct EmbeddingBatch {
  std::size_t dim = 0;
  std::vector<double> vectors;  // count x dim
  std::vector<int> ids;
  std::vector<int> cams;

  std::size_t size() const { return ids.size(); }
  const double* row(std::size_t i) const { return vectors.data() + i * dim; }
};

enum class ZeroNorm {
  reject,           // throw
  zero_similarity,  // a zero vector is dissimilar to everything
};

// S[i, j] = <q_i, g_j> / (|q_i| |g_j|), row-major Q x G.
inline std::vector<double> cosine_sim_matrix(const EmbeddingBatch& queries, const EmbeddingBatch& gallery,
                                             ZeroNorm policy = ZeroNorm::reject) {
  if (queries.dim != gallery.dim) throw std::invalid_argument("cosine_sim_matrix: dimension mismatch");
  auto norms = [&](const EmbeddingBatch& e) {
    std::vector<double> n(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
      double ss = 0;
      for (std::size_t c = 0; c < e.dim; ++c) {
        if (!std::isfinite(e.row(i)[c])) throw std::invalid_argument("cosine_sim_matrix: non-finite embedding");
        ss += e.row(i)[c] * e.row(i)[c];
      }
      n[i] = std::sqrt(ss);
      if (n[i] == 0.0 && policy == ZeroNorm::reject)
        throw std::invalid_argument("cosine_sim_matrix: zero-norm embedding at index " + std::to_string(i));
    }
    return n;
  };
  const auto qn = norms(queries), gn = norms(gallery);
  std::vector<double> s(queries.size() * gallery.size(), 0.0);
  for (std::size_t i = 0; i < queries.size(); ++i)
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      if (qn[i] == 0.0 || gn[j] == 0.0) continue;
      double dot = 0;
      for (std::size_t c = 0; c < queries.dim; ++c) dot += queries.row(i)[c] * gallery.row(j)[c];
      s[i * gallery.size() + j] = dot / (qn[i] * gn[j]);
    }
  return s;
}

struct RetrievalResult {
  double map = 0;
  std::vector<double> cmc;       // cmc[k]: fraction of queries with a hit in the top k+1
  std::vector<double> ap;        // per evaluated query
  std::vector<std::size_t> first_hit_rank;  // 1-based, per evaluated query
  std::vector<std::size_t> evaluated;       // query indices that had a valid positive
  std::vector<std::size_t> skipped;         // query indices without any valid positive

  double rank1() const { return cmc.empty() ? 0.0 : cmc[0]; }
};

struct LabelSet {
  std::vector<int> ids, cams;
};

// Ranks each query's gallery by descending similarity (ties by gallery
// index), then AP = mean over relevant ranks r of precision@r.
inline RetrievalResult compute_map_cmc(const std::vector<double>& sim, const LabelSet& query, const LabelSet& gallery) {
  const std::size_t nq = query.ids.size(), ng = gallery.ids.size();
  if (sim.size() != nq * ng || query.cams.size() != nq || gallery.cams.size() != ng)
    throw std::invalid_argument("compute_map_cmc: label or matrix size mismatch");
  RetrievalResult r;
  r.cmc.assign(ng, 0.0);
  std::vector<std::size_t> order;
  for (std::size_t q = 0; q < nq; ++q) {
    order.clear();
    for (std::size_t g = 0; g < ng; ++g)
      if (!(gallery.ids[g] == query.ids[q] && gallery.cams[g] == query.cams[q])) order.push_back(g);
    const double* row = sim.data() + q * ng;
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::size_t hits = 0, first = 0;
    double precision_sum = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      if (gallery.ids[order[rank]] != query.ids[q]) continue;
      ++hits;
      if (first == 0) first = rank + 1;
      precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
    if (hits == 0) {
      r.skipped.push_back(q);
      continue;
    }
    r.evaluated.push_back(q);
    r.ap.push_back(precision_sum / static_cast<double>(hits));
    r.first_hit_rank.push_back(first);
    for (std::size_t k = first - 1; k < ng; ++k) r.cmc[k] += 1.0;
  }
  if (!r.evaluated.empty()) {
    const double n = static_cast<double>(r.evaluated.size());
    for (auto& c : r.cmc) c /= n;
    r.map = std::accumulate(r.ap.begin(), r.ap.end(), 0.0) / n;
  }
  return r;
}

}  // namespace s3ce
