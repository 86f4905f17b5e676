#include <gtest/gtest.h>

#include <vector>

#include "cascade/metrics.hpp"
#include "cascade/random.hpp"
#include "support/oracles.hpp"

namespace metrics = cascade::metrics;
namespace oracle = cascade::testing::oracle;
using metrics::LabeledRanking;

TEST(Metrics, FirstPositiveAtTopGivesUnitRrAndP1) {
  const LabeledRanking r{{1, 0, 0, 1}};
  EXPECT_DOUBLE_EQ(metrics::reciprocal_rank(r), 1.0);
  EXPECT_DOUBLE_EQ(metrics::precision_at_1(r), 1.0);
}

TEST(Metrics, AveragePrecisionHandWorked) {
  const LabeledRanking r{{0, 1, 0, 1}};
  // precision at the two hits: 1/2 and 2/4
  EXPECT_DOUBLE_EQ(*metrics::average_precision(r), 0.5);
  EXPECT_DOUBLE_EQ(metrics::reciprocal_rank(r), 0.5);
}

TEST(Metrics, NoPositiveConventions) {
  const LabeledRanking r{{0, 0, 0}};
  EXPECT_FALSE(metrics::average_precision(r).has_value());
  EXPECT_DOUBLE_EQ(metrics::reciprocal_rank(r), 0.0);
  EXPECT_DOUBLE_EQ(metrics::precision_at_1(r), 0.0);
  EXPECT_DOUBLE_EQ(metrics::ndcg_at_10(r), 0.0);
}

TEST(Metrics, NdcgIsOneForIdealOrder) {
  const LabeledRanking r{{1, 1, 0, 0, 0}};
  EXPECT_DOUBLE_EQ(metrics::ndcg_at_10(r), 1.0);
}

TEST(Metrics, NdcgIgnoresHitsBeyondCutoff) {
  std::vector<int> labels(12, 0);
  labels[11] = 1;
  EXPECT_DOUBLE_EQ(metrics::ndcg_at_10({labels}), 0.0);
}

TEST(Metrics, AggregateSkipsQueriesWithoutPositives) {
  const std::vector<LabeledRanking> rs{{{1, 0}}, {{0, 0}}, {{0, 1}}};
  const auto s = metrics::aggregate(std::span<const LabeledRanking>(rs));
  EXPECT_EQ(s.evaluated, 2u);
  EXPECT_EQ(s.skipped, 1u);
  EXPECT_DOUBLE_EQ(s.map, 0.75);
  EXPECT_DOUBLE_EQ(s.mrr, 0.75);
  EXPECT_DOUBLE_EQ(s.p_at_1, 0.5);
}

TEST(Metrics, AggregateOfOnlyNegativeQueriesIsAnError) {
  const std::vector<LabeledRanking> rs{{{0, 0}}};
  EXPECT_THROW(metrics::aggregate(std::span<const LabeledRanking>(rs)), cascade::DataError);
}

TEST(Metrics, AgreeWithDirectFormulasOnRandomRankings) {
  cascade::Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> labels(1 + rng.below(40));
    for (int& l : labels) l = rng.uniform() < 0.2 ? 1 : 0;
    const LabeledRanking r{labels};
    const auto ap = metrics::average_precision(r);
    if (r.positives() > 0) {
      ASSERT_TRUE(ap.has_value());
      EXPECT_NEAR(*ap, oracle::average_precision(labels), 1e-9);
    }
    EXPECT_NEAR(metrics::reciprocal_rank(r), oracle::reciprocal_rank(labels), 1e-9);
    EXPECT_NEAR(metrics::precision_at_1(r), oracle::precision_at(labels, 1), 1e-9);
    EXPECT_NEAR(metrics::ndcg_at_10(r), oracle::ndcg(labels, 10), 1e-9);
  }
}
