#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "mltr/latent_embedder.hpp"

namespace mltr {

// One switch per ablatable mechanism.
struct Toggles {
  bool latent_embedder = true;
  bool aux_loss = true;
  bool adaln_final_linear = true;
  bool relpos_bias = true;
  bool masked_shortcut = true;
  bool masking = true;
};

struct ModelConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 1;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t enc_depth = 4;
  std::size_t dec_depth = 2;
  double mlp_ratio = 4.0;
  std::size_t n_classes = 4;
  double ratio_lo = 0.3;
  double ratio_hi = 0.8;
  double ln_eps = 1e-6;
  Toggles toggles;
  latent::BackboneSpec backbone;

  std::size_t num_patches() const { return (height / patch) * (width / patch); }
  // Longest sequence an attention layer sees: all patches plus cls.
  std::size_t max_len() const { return num_patches() + 1; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t mlp_hidden() const;
  std::size_t patch_dim() const { return patch * patch * channels; }

  void validate() const;

  // D=64, 4 heads, 4+2 blocks, 64x64 input, 8x8 patches.
  static ModelConfig micro();
  // D=128, 8 heads, 6+3 blocks, 64x64 input, 8x8 patches.
  static ModelConfig small();
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch = 16;
  double lr_max = 1e-4;
  double lr_min = 0.0;
  double weight_decay = 1e-5;
  bool lookahead = false;
  std::size_t lookahead_k = 5;
  double lookahead_alpha = 0.5;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t eval_every = 1;
  // Pretrain the backbone as a plain classifier for this many epochs first.
  std::size_t backbone_pretrain_epochs = 0;
};

struct SynthSpec {
  std::size_t n_per_class = 8;
  std::uint64_t seed = 0;
};

struct PreprocessConfig {
  bool enabled = true;
  double gamma = 1.2;
  double clahe_clip = 2.0;
  std::size_t clahe_tiles = 8;
};

struct DataConfig {
  std::string root;
  std::optional<SynthSpec> synth;
  std::size_t augment_multiplier = 64;
  double split_ratio = 0.7;
  std::uint64_t split_seed = 0;
  // "test" or "train"; split scored by eval and by the best-checkpoint rule.
  std::string eval_split = "test";
  PreprocessConfig preprocess;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const RunConfig& c);
// Strict: unknown keys and wrong types raise ConfigError. A "preset" key
// ("micro" or "small") in the model object selects the defaults that the
// remaining keys override.
ModelConfig model_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
// Canonical text form (sorted keys, 2-space indent).
std::string dump(const RunConfig& c);

}  // namespace mltr
