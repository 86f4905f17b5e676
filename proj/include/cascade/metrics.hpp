#pragma once

#include <cmath>
#include <cstddef>
#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cascade/errors.hpp"

namespace cascade::metrics {

/// Binary relevance labels listed in ranked order (best first).
struct LabeledRanking {
  std::vector<int> labels;

  std::size_t positives() const {
    std::size_t n = 0;
    for (int l : labels) n += (l != 0);
    return n;
  }
};

/// Mean over positive positions p of precision@p. nullopt when the query has
/// no positive (it is left out of the MAP mean).
inline std::optional<double> average_precision(const LabeledRanking& r) {
  double hits = 0.0, total = 0.0;
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    if (r.labels[i]) {
      hits += 1.0;
      total += hits / static_cast<double>(i + 1);
    }
  }
  if (hits == 0.0) return std::nullopt;
  return total / hits;
}

inline double reciprocal_rank(const LabeledRanking& r) {
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    if (r.labels[i]) return 1.0 / static_cast<double>(i + 1);
  }
  return 0.0;
}

inline double precision_at_1(const LabeledRanking& r) {
  return !r.labels.empty() && r.labels.front() ? 1.0 : 0.0;
}

/// Binary-gain nDCG truncated at `cutoff`, discount log2(rank + 1).
inline double ndcg_at(const LabeledRanking& r, std::size_t cutoff = 10) {
  double dcg = 0.0;
  for (std::size_t i = 0; i < r.labels.size() && i < cutoff; ++i) {
    if (r.labels[i]) dcg += 1.0 / std::log2(static_cast<double>(i + 2));
  }
  const std::size_t ideal_hits = std::min(r.positives(), cutoff);
  double ideal = 0.0;
  for (std::size_t i = 0; i < ideal_hits; ++i) ideal += 1.0 / std::log2(static_cast<double>(i + 2));
  return ideal > 0.0 ? dcg / ideal : 0.0;
}

inline double ndcg_at_10(const LabeledRanking& r) { return ndcg_at(r, 10); }

struct QueryMetrics {
  std::optional<double> average_precision;
  double reciprocal_rank = 0.0;
  double precision_at_1 = 0.0;
  double ndcg_at_10 = 0.0;
};

inline QueryMetrics evaluate(const LabeledRanking& r) {
  return {average_precision(r), reciprocal_rank(r), precision_at_1(r), ndcg_at_10(r)};
}

struct Summary {
  double map = 0.0;
  double mrr = 0.0;
  double p_at_1 = 0.0;
  double ndcg_at_10 = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

/// Dataset-level means over queries with at least one positive. Queries
/// without positives are counted in `skipped` and excluded from every mean.
inline Summary aggregate(std::span<const QueryMetrics> queries) {
  Summary s;
  for (const QueryMetrics& q : queries) {
    if (!q.average_precision) {
      ++s.skipped;
      continue;
    }
    ++s.evaluated;
    s.map += *q.average_precision;
    s.mrr += q.reciprocal_rank;
    s.p_at_1 += q.precision_at_1;
    s.ndcg_at_10 += q.ndcg_at_10;
  }
  if (s.evaluated == 0) {
    throw DataError("no evaluable query: all " + std::to_string(s.skipped) +
                    " queries lack a positive candidate");
  }
  const double n = static_cast<double>(s.evaluated);
  s.map /= n;
  s.mrr /= n;
  s.p_at_1 /= n;
  s.ndcg_at_10 /= n;
  return s;
}

inline Summary aggregate(std::span<const LabeledRanking> rankings) {
  std::vector<QueryMetrics> per_query;
  per_query.reserve(rankings.size());
  for (const auto& r : rankings) per_query.push_back(evaluate(r));
  return aggregate(std::span<const QueryMetrics>(per_query));
}

}  // namespace cascade::metrics
