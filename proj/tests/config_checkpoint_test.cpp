#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "mltr/checkpoint.hpp"
#include "mltr/config.hpp"
#include "mltr/error.hpp"
#include "mltr/trainer.hpp"

using namespace mltr;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c = ModelConfig::micro();
  c.height = c.width = 16;
  c.patch = 4;
  c.dim = 16;
  c.heads = 2;
  c.enc_depth = 1;
  c.dec_depth = 1;
  c.backbone.stages = {{4, 3, 2}};
  return c;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void reseal(std::vector<std::uint8_t>& bytes) {
  const auto body = bytes.size() - 8;
  const std::uint64_t sum = ckpt::fnv1a64(std::span(bytes).first(body));
  for (int i = 0; i < 8; ++i) bytes[body + i] = static_cast<std::uint8_t>(sum >> (8 * i));
}

fs::path temp(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "mltr_ckpt_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Config, PresetsValidate) {
  EXPECT_NO_THROW(ModelConfig::micro().validate());
  EXPECT_NO_THROW(ModelConfig::small().validate());
  EXPECT_EQ(ModelConfig::micro().num_patches(), 64u);
  EXPECT_EQ(ModelConfig::small().dim, 128u);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  c.model = ModelConfig::small();
  c.model.toggles.relpos_bias = false;
  c.train.epochs = 3;
  c.train.lookahead = true;
  c.data.synth = SynthSpec{5, 9};
  c.data.eval_split = "train";
  const auto back = run_config_from_json(to_json(c));
  EXPECT_EQ(dump(back), dump(c));
  EXPECT_FALSE(back.model.toggles.relpos_bias);
  EXPECT_EQ(back.data.synth->n_per_class, 5u);
}

TEST(Config, UnknownKeysAndBadTypesRejected) {
  EXPECT_THROW(run_config_from_json(json{{"modle", json::object()}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"train", {{"epochs", "ten"}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"toggles", {{"relpos", true}}}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"preset", "huge"}}}}), ConfigError);
}

TEST(Config, PresetWithOverrides) {
  const auto c = run_config_from_json(json{{"model", {{"preset", "micro"}, {"dim", 32}}}});
  EXPECT_EQ(c.model.dim, 32u);
  EXPECT_EQ(c.model.heads, ModelConfig::micro().heads);
}

TEST(Config, InvalidValuesRejected) {
  ModelConfig c = ModelConfig::micro();
  c.heads = 3;  // 64 not divisible
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::micro();
  c.patch = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::micro();
  c.ratio_hi = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  RunConfig r;
  r.data.eval_split = "val";
  EXPECT_THROW(r.validate(), ConfigError);
}

TEST(Config, LoadFromFile) {
  const auto path = temp("cfg.json");
  std::ofstream(path) << R"({"train": {"epochs": 2}})";
  EXPECT_EQ(load_run_config(path).train.epochs, 2u);
  std::ofstream(path) << "{not json";
  EXPECT_THROW(load_run_config(path), ConfigError);
  EXPECT_THROW(load_run_config(temp("missing.json")), IoError);
}

TEST(Checkpoint, EncodeDecodeBitExact) {
  Rng rng(1);
  ckpt::Checkpoint c;
  c.config_json = R"({"k": 1})";
  auto f = ad::Tensor<float>::from({2, 3}, nn::uniform_values<float>(6, 1.0, rng));
  auto d = ad::Tensor<double>::from({4}, {1e-300, -0.0, 3.5, std::numeric_limits<double>::infinity()});
  c.tensors.push_back(ckpt::TensorRecord::from_tensor("a.f", f));
  c.tensors.push_back(ckpt::TensorRecord::from_tensor("b.d", d));
  const auto bytes = ckpt::encode(c);
  const auto back = ckpt::decode(bytes);
  EXPECT_EQ(back.config_json, c.config_json);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.find("a.f")->shape, (Shape{2, 3}));
  const auto fv = back.find("a.f")->values<float>();
  const auto dv = back.find("b.d")->values<double>();
  EXPECT_EQ(std::memcmp(fv.data(), f.data().data(), 6 * sizeof(float)), 0);
  EXPECT_EQ(std::memcmp(dv.data(), d.data().data(), 4 * sizeof(double)), 0);
  EXPECT_EQ(ckpt::encode(back), bytes);
  EXPECT_EQ(back.find("nope"), nullptr);
}

TEST(Checkpoint, DamageIsDetected) {
  ckpt::Checkpoint c;
  c.tensors.push_back(ckpt::TensorRecord::from_tensor("w", ad::Tensor<float>::from({3}, {1, 2, 3})));
  auto bytes = ckpt::encode(c);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() - 1}) {
    EXPECT_THROW(ckpt::decode(std::span(bytes).first(cut)), CorruptFileError) << cut;
  }
  auto flipped = bytes;
  flipped[flipped.size() - 12] ^= 0x40;
  EXPECT_THROW(ckpt::decode(flipped), CorruptFileError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(ckpt::decode(magic), FormatError);
  auto future = bytes;
  future[4] = 2;
  reseal(future);
  EXPECT_THROW(ckpt::decode(future), FormatError);
  EXPECT_THROW(ckpt::read_file(temp("absent.ckpt")), IoError);
}

TEST(Checkpoint, MismatchNamesTensors) {
  model::Model<float> a(tiny(), 1);
  ModelConfig wider = tiny();
  wider.dim = 24;
  model::Model<float> b(wider, 1);
  const auto snap = ckpt::snapshot<float>(a, "{}");
  const auto before = ckpt::snapshot<float>(b, "{}");
  try {
    ckpt::load_parameters<float>(snap, b);
    FAIL() << "no exception";
  } catch (const CheckpointMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("cls_token"), std::string::npos) << e.what();
  }
  EXPECT_EQ(ckpt::encode(ckpt::snapshot<float>(b, "{}")), ckpt::encode(before));

  auto missing = snap;
  missing.tensors.pop_back();
  model::Model<float> c(tiny(), 2);
  EXPECT_THROW(ckpt::load_parameters<float>(missing, c), CheckpointMismatchError);
  auto extra = snap;
  extra.tensors.push_back(ckpt::TensorRecord::from_tensor("ghost", ad::Tensor<float>::from({1}, {0})));
  EXPECT_THROW(ckpt::load_parameters<float>(extra, c), CheckpointMismatchError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  RunConfig cfg;
  cfg.model = tiny();
  app::FloatModel m(cfg.model, 3);
  const json state = {{"epoch", 4}};
  const auto p1 = temp("one.ckpt"), p2 = temp("two.ckpt");
  app::save_checkpoint(m, cfg, state, p1);
  auto loaded = app::load_checkpoint(p1);
  EXPECT_EQ(loaded.state, state);
  EXPECT_EQ(dump(loaded.config), dump(cfg));
  app::save_checkpoint(loaded.model, loaded.config, loaded.state, p2);
  EXPECT_EQ(slurp(p1), slurp(p2));

  Rng rng(4);
  const auto x = ad::Tensor<float>::from({1, 16, 16}, nn::uniform_values<float>(256, 1.0, rng));
  const auto l1 = m.forward_infer(x), l2 = loaded.model.forward_infer(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(l1[i], l2[i]);
}

TEST(Checkpoint, LoadIntoRejectsOtherArchitecture) {
  RunConfig cfg;
  cfg.model = tiny();
  app::FloatModel m(cfg.model, 5);
  const auto c = app::make_checkpoint(m, cfg, json::object());
  ModelConfig deeper = tiny();
  deeper.enc_depth = 2;
  app::FloatModel other(deeper, 5);
  EXPECT_THROW(app::load_into(other, c), CheckpointMismatchError);
  app::FloatModel same(tiny(), 6);
  EXPECT_NO_THROW(app::load_into(same, c));
}
