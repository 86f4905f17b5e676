#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "cascade/checkpoint.hpp"

namespace ck = cascade::checkpoint;

namespace {

cascade::CascadeModel small_model(std::uint64_t seed) {
  cascade::EncoderConfig enc;
  enc.d_model = 8;
  enc.n_heads = 2;
  enc.d_ff = 16;
  enc.vocab_size = 40;
  enc.max_seq_len = 16;
  cascade::Rng rng(seed);
  return cascade::CascadeModel(enc, {}, rng);
}

bool bitwise_equal(const cascade::Tensor& a, const cascade::Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwiseIdentical) {
  auto model = small_model(3);
  const auto path = (std::filesystem::temp_directory_path() / "cascade_ck_test.ckpt").string();
  ck::save(path, ck::capture(model, {{"note", "hello world"}}));
  const auto loaded = ck::load(path);
  EXPECT_EQ(loaded.metadata.at("note"), "hello world");
  auto restored = ck::restore(loaded);
  std::vector<cascade::Tensor> a = model.parameters(), b = restored.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i], b[i])) << i;
  EXPECT_EQ(restored.cascade_config().layer_schedule, model.cascade_config().layer_schedule);
}

TEST(Checkpoint, RestoredModelScoresIdentically) {
  auto model = small_model(4);
  auto restored = ck::restore(ck::deserialize(ck::serialize(ck::capture(model))));
  const auto batch = cascade::TokenBatch::pack({{1, 5, 2, 9, 10}, {1, 6, 2, 7}});
  EXPECT_EQ(model.forward_all_stages(batch), restored.forward_all_stages(batch));
}

TEST(Checkpoint, UnknownVersionIsRejected) {
  auto bytes = ck::serialize(ck::capture(*std::make_unique<cascade::CascadeModel>(small_model(1))));
  bytes[4] = 9;
  try {
    ck::deserialize(bytes);
    FAIL();
  } catch (const cascade::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, TruncationAndBadMagicAreDataErrors) {
  auto model = small_model(2);
  const auto bytes = ck::serialize(ck::capture(model));
  EXPECT_THROW(ck::deserialize(bytes.substr(0, bytes.size() - 3)), cascade::DataError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(ck::deserialize(bad), cascade::DataError);
}

TEST(Checkpoint, MissingParameterIsDataError) {
  auto model = small_model(2);
  auto c = ck::capture(model);
  c.tensors.pop_back();
  EXPECT_THROW(ck::restore(c), cascade::DataError);
}
