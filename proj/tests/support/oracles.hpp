#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

// Straightforward reference implementations used to cross-check the library.
// They favour obviousness over speed and share no code with include/.
namespace cascade::testing::oracle {

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (e[i] = std::exp(x[i] - m));
  for (double& v : e) v /= s;
  return e;
}

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline std::vector<double> layer_norm(const std::vector<double>& x, double eps) {
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  std::vector<double> out;
  for (double v : x) out.push_back((v - mean) / std::sqrt(var + eps));
  return out;
}

/// -log softmax(z)[label]
inline double cross_entropy(double z0, double z1, int label) {
  const double p = std::exp(label == 1 ? z1 : z0) / (std::exp(z0) + std::exp(z1));
  return -std::log(p);
}

// Ranking metrics, straight from their definitions.

inline double precision_at(const std::vector<int>& labels, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i) hits += labels[i] != 0;
  return static_cast<double>(hits) / static_cast<double>(k);
}

inline double average_precision(const std::vector<int>& labels) {
  std::size_t relevant = 0;
  double sum = 0.0;
  for (std::size_t k = 1; k <= labels.size(); ++k) {
    if (labels[k - 1]) {
      ++relevant;
      sum += precision_at(labels, k);
    }
  }
  return relevant == 0 ? 0.0 : sum / static_cast<double>(relevant);
}

inline double reciprocal_rank(const std::vector<int>& labels) {
  for (std::size_t k = 1; k <= labels.size(); ++k)
    if (labels[k - 1]) return 1.0 / static_cast<double>(k);
  return 0.0;
}

inline double dcg(const std::vector<int>& labels, std::size_t cutoff) {
  double s = 0.0;
  for (std::size_t rank = 1; rank <= std::min(cutoff, labels.size()); ++rank)
    s += (labels[rank - 1] ? 1.0 : 0.0) / std::log2(static_cast<double>(rank) + 1.0);
  return s;
}

inline double ndcg(const std::vector<int>& labels, std::size_t cutoff) {
  std::vector<int> ideal = labels;
  std::sort(ideal.begin(), ideal.end(), [](int a, int b) { return a > b; });
  const double best = dcg(ideal, cutoff);
  return best == 0.0 ? 0.0 : dcg(labels, cutoff) / best;
}

/// Survivor set of one pruning step: sort all positions by (score desc,
/// index asc) and keep the first `keep`.
inline std::vector<std::size_t> survivors(const std::vector<float>& scores, std::size_t keep) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Number of candidates dropped from k at rate alpha, by integer arithmetic
/// on alpha expressed in hundredths.
inline std::size_t dropped(std::size_t alpha_percent, std::size_t k) {
  return alpha_percent * k / 100;
}

/// Example-layer passes of a cascade, counted one example and one layer at a
/// time, relative to running every example through every layer.
inline double cascade_relative_cost(const std::vector<std::size_t>& stage_sizes,
                                    const std::vector<std::size_t>& schedule,
                                    std::size_t depth) {
  std::size_t passes = 0;
  for (std::size_t layer = 1; layer <= depth; ++layer) {
    std::size_t stage = 0;
    while (schedule[stage] < layer) ++stage;
    for (std::size_t e = 0; e < stage_sizes[stage]; ++e) ++passes;
  }
  return static_cast<double>(passes) / static_cast<double>(depth * stage_sizes[0]);
}

}  // namespace cascade::testing::oracle
