#include <cstdio>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "mtp/training/checkpoint.hpp"
#include "test_util.hpp"

namespace mtp {
namespace {

struct Saved {
  ModelBundle<float> model;
  SamplerHead<float> head;
  std::string bytes;
};

Saved make_saved() {
  auto cfg = testing::tiny_config();
  Saved s{init_model<float>(cfg, 1), init_sampler<float>(cfg.d_model, 2), {}};
  testing::randomize_lora(s.model, 3);
  s.bytes = serialize_checkpoint(s.model, &s.head, {{"vocab.chars", "abc"}});
  return s;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto s = make_saved();
  auto ck = deserialize_checkpoint(s.bytes);
  ASSERT_TRUE(ck.sampler.has_value());
  EXPECT_EQ(ck.meta.at("vocab.chars"), "abc");
  EXPECT_EQ(serialize_checkpoint(ck.model, &*ck.sampler, ck.meta), s.bytes);
}

TEST(Checkpoint, FileRoundTrip) {
  auto s = make_saved();
  const std::string path = ::testing::TempDir() + "roundtrip.ckpt";
  save_checkpoint(path, s.model, &s.head, {{"vocab.chars", "abc"}});
  auto ck = load_checkpoint(path, s.model.config);
  EXPECT_EQ(ck.model.config, s.model.config);
  std::remove(path.c_str());
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, WithoutSamplerHead) {
  auto s = make_saved();
  auto ck = deserialize_checkpoint(serialize_checkpoint(s.model, nullptr, {}));
  EXPECT_FALSE(ck.sampler.has_value());
}

TEST(Checkpoint, LoadedModelReplaysLogitsExactly) {
  auto s = make_saved();
  auto ck = deserialize_checkpoint(s.bytes);
  const auto tokens = testing::random_tokens(9, s.model.config.base_vocab(), 4);
  auto batch = build_training_batch(tokens, std::vector<std::uint8_t>(9, 1), s.model.config);
  Tape<float> off(false);
  auto a = forward(off, s.model, batch.tokens, batch.position_ids, batch.attention, batch.gate);
  auto b = forward(off, ck.model, batch.tokens, batch.position_ids, batch.attention, batch.gate);
  for (std::size_t i = 0; i < a.logits.size(); ++i) ASSERT_EQ(a.logits[i], b.logits[i]);
}

TEST(Checkpoint, CorruptedPayloadByteFailsTheChecksum) {
  auto s = make_saved();
  std::string bad = s.bytes;
  bad[bad.size() - 8 - 5] ^= 0x01;  // last payload float, before the checksum
  EXPECT_THROW(deserialize_checkpoint(bad), ChecksumError);
}

TEST(Checkpoint, VersionAndMagicAreChecked) {
  auto s = make_saved();
  std::string v2 = s.bytes;
  v2[8] = 2;
  EXPECT_THROW(deserialize_checkpoint(v2), VersionError);
  std::string junk = s.bytes;
  junk[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(junk), IoError);
  EXPECT_THROW(deserialize_checkpoint(s.bytes.substr(0, s.bytes.size() / 2)), IoError);
}

TEST(Checkpoint, ConfigMismatchReportsTheDifferingKeys) {
  auto s = make_saved();
  auto expected = s.model.config;
  expected.lora_rank = 7;
  expected.d_ff = 64;
  try {
    deserialize_checkpoint(s.bytes, expected);
    FAIL() << "expected a ConfigError";
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("model.lora_rank"), std::string::npos) << what;
    EXPECT_NE(what.find("model.d_ff"), std::string::npos) << what;
    EXPECT_EQ(what.find("model.d_model"), std::string::npos) << what;
  }
}

TEST(Checkpoint, MetadataCannotShadowModelKeys) {
  auto s = make_saved();
  EXPECT_THROW(serialize_checkpoint(s.model, nullptr, {{"model.d_model", "3"}}), std::invalid_argument);
}

}  // namespace
}  // namespace mtp
