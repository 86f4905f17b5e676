#include <gtest/gtest.h>

#include <cmath>

#include "cascade/cascade.hpp"
#include "cascade/data.hpp"
#include "cascade/ranker.hpp"

using cascade::CascadeModel;
using cascade::ForwardMode;
using cascade::TokenBatch;

namespace {

cascade::EncoderConfig small_encoder() {
  cascade::EncoderConfig enc;
  enc.d_model = 16;
  enc.n_heads = 4;
  enc.d_ff = 32;
  enc.vocab_size = 50;
  enc.max_seq_len = 24;
  return enc;
}

CascadeModel small_model(std::uint64_t seed = 7) {
  cascade::Rng rng(seed);
  return CascadeModel(small_encoder(), {}, rng);
}

cascade::data::QuestionGroup random_group(cascade::Rng& rng, std::size_t n) {
  cascade::data::QuestionGroup g{"q", {}};
  std::vector<std::int32_t> q;
  for (std::size_t i = 0; i < 1 + rng.below(5); ++i) q.push_back(3 + static_cast<std::int32_t>(rng.below(47)));
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<std::int32_t> cand;
    for (std::size_t i = 0; i < 1 + rng.below(10); ++i) cand.push_back(3 + static_cast<std::int32_t>(rng.below(47)));
    g.examples.push_back({"q", q, cand, static_cast<int>(rng.below(2))});
  }
  return g;
}

}  // namespace

TEST(Encoder, PackPadsAndMasks) {
  const auto b = TokenBatch::pack({{1, 4, 2}, {1, 2}});
  EXPECT_EQ(b.seq, 3u);
  EXPECT_EQ(b.ids, (std::vector<std::int32_t>{1, 4, 2, 1, 2, 0}));
  EXPECT_EQ(b.mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0}));
}

TEST(Encoder, OverlongSequenceIsDataError) {
  const std::vector<std::int32_t> q(10, 5), c(10, 6);
  EXPECT_THROW(cascade::make_sequence(q, c, 16), cascade::DataError);
}

TEST(Encoder, LayerPastDepthIsConfigError) {
  auto model = small_model();
  auto state = model.encoder().embed(TokenBatch::pack({{1, 3, 2, 4}}), ForwardMode::eval());
  EXPECT_THROW(model.encoder().encode_to_layer(state, 0, 13, ForwardMode::eval()),
               cascade::ConfigError);
}

TEST(Encoder, EncodingInPiecesEqualsOneShot) {
  auto model = small_model();
  const auto batch = TokenBatch::pack({{1, 3, 2, 4, 5}, {1, 6, 2, 7}});
  auto whole = model.encoder().embed(batch, ForwardMode::eval());
  model.encoder().encode_to_layer(whole, 0, 12, ForwardMode::eval());
  auto pieces = model.encoder().embed(batch, ForwardMode::eval());
  for (std::size_t l : {4, 6, 8, 10, 12}) {
    model.encoder().encode_to_layer(pieces, pieces.top_layer(), l, ForwardMode::eval());
  }
  const auto a = whole.layer(12).data(), b = pieces.layer(12).data();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  EXPECT_EQ(whole.layer_passes(), 24u);
  EXPECT_EQ(pieces.layer_passes(), 24u);
}

TEST(Encoder, PaddingDoesNotChangeRealPositions) {
  auto model = small_model();
  const std::vector<std::int32_t> seq{1, 3, 2, 4, 5};
  const auto alone = model.forward_all_stages(TokenBatch::pack({seq}));
  const auto padded = model.forward_all_stages(TokenBatch::pack({seq, {1, 3, 2, 4, 5, 6, 7, 8, 9, 10}}));
  for (std::size_t s = 0; s < alone.size(); ++s) EXPECT_NEAR(alone[s][0], padded[s][0], 1e-6);
}

TEST(Encoder, EvalModeIsDeterministic) {
  auto model = small_model();
  const auto batch = TokenBatch::pack({{1, 3, 2, 4}});
  EXPECT_EQ(model.forward_all_stages(batch), model.forward_all_stages(batch));
}

TEST(Cascade, ScoresAreProbabilities) {
  auto model = small_model();
  for (const auto& stage : model.forward_all_stages(TokenBatch::pack({{1, 3, 2, 4}, {1, 9, 2, 8}})))
    for (float p : stage) {
      EXPECT_GT(p, 0.0f);
      EXPECT_LT(p, 1.0f);
    }
}

TEST(Cascade, ScheduleMustEndAtEncoderDepth) {
  cascade::CascadeConfig cc;
  cc.layer_schedule = {4, 6, 8};
  cascade::Rng rng(1);
  EXPECT_THROW(CascadeModel(small_encoder(), cc, rng), cascade::ConfigError);
  cc.layer_schedule = {4, 4, 12};
  EXPECT_THROW(CascadeModel(small_encoder(), cc, rng), cascade::ConfigError);
}

TEST(Cascade, HeadsAreIndependent) {
  auto model = small_model();
  EXPECT_FALSE(model.head(0).weights[0].same_storage(model.head(1).weights[0]));
  EXPECT_EQ(model.head(0).parameter_count(), model.head(4).parameter_count());
}

TEST(Cascade, FirstTokenPoolingForFinalStage) {
  cascade::CascadeConfig cc;
  cc.final_pooling = cascade::Pooling::kFirstToken;
  cascade::Rng rng(3);
  CascadeModel model(small_encoder(), cc, rng);
  const auto s = model.forward_all_stages(TokenBatch::pack({{1, 3, 2, 4}}));
  EXPECT_EQ(s.size(), 5u);
  EXPECT_THROW(cascade::parse_pooling("max"), cascade::ConfigError);
}

TEST(Cascade, ZeroDropMatchesMonolithicFullDepth) {
  auto model = small_model();
  cascade::Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = random_group(rng, 1 + rng.below(20));
    const auto c = cascade::cascade_infer(g, model, cascade::DropSchedule::uniform(0.0, 5));
    const auto m = cascade::monolithic_rank(g, model, 12);
    EXPECT_EQ(c.ranking, m.ranking);
    const auto& cs = c.trace.stages.back().scores;
    const auto& ms = m.trace.stages.back().scores;
    for (std::size_t i = 0; i < cs.size(); ++i) EXPECT_NEAR(cs[i], ms[i], 1e-6);
  }
}

TEST(Cascade, InstrumentedPassesMatchCostModel) {
  auto model = small_model();
  cascade::Rng rng(8);
  const auto g = random_group(rng, 37);
  for (double alpha : {0.0, 0.3, 0.5}) {
    const auto sched = cascade::DropSchedule::uniform(alpha, 5);
    const auto r = cascade::cascade_infer(g, model, sched);
    const auto cost = cascade::relative_cost_cascade(37, sched, model.cascade_config().layer_schedule);
    EXPECT_EQ(r.trace.layer_passes, cost.layer_passes) << alpha;
  }
}

TEST(Cascade, PartialScoresIgnoreWhichCandidatesWerePruned) {
  auto model = small_model();
  cascade::Rng rng(12);
  const auto g = random_group(rng, 25);
  const auto full = model.forward_all_stages(cascade::data::make_batch(g, 24));
  const auto r = cascade::cascade_infer(g, model, cascade::DropSchedule::uniform(0.5, 5));
  for (std::size_t s = 0; s < r.trace.stages.size(); ++s) {
    const auto& st = r.trace.stages[s];
    for (std::size_t p = 0; p < st.inputs.size(); ++p)
      EXPECT_NEAR(st.scores[p], full[s][st.inputs[p]], 1e-6);
  }
}

TEST(SequentialRerank, WrongModelDepthIsConfigError) {
  auto model = small_model();
  cascade::Rng rng(2);
  const auto g = random_group(rng, 5);
  const std::vector<const CascadeModel*> models(5, &model);
  const std::vector<std::size_t> rho{4, 6, 8, 10, 12};
  EXPECT_THROW(cascade::sequential_rerank(g, models, rho, cascade::DropSchedule::uniform(0.3, 5)),
               cascade::ConfigError);
}
