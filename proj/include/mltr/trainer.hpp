#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mltr/checkpoint.hpp"
#include "mltr/config.hpp"
#include "mltr/dataset.hpp"
#include "mltr/metrics.hpp"
#include "mltr/model.hpp"

namespace mltr::app {

using FloatModel = model::Model<float>;

struct EpochLog {
  std::size_t epoch = 0;
  std::uint64_t step = 0;  // optimizer steps completed at the end of the epoch
  double lr = 0;           // learning rate of the last step
  double loss_total = 0;
  double loss_ce = 0;
  double loss_aux = 0;
  double train_acc = 0;  // argmax of the training-mode logits over the epoch
  std::optional<double> eval_acc;
};

struct StepLog {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  double rho = 0;
  std::vector<std::size_t> samples;
  std::vector<std::uint64_t> seeds;
  double loss = 0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
  std::size_t best_epoch = 0;
  double best_accuracy = -1;
  nlohmann::json best_metrics;  // metrics of the best checkpoint on the eval split
  bool stopped_early = false;
};

struct TrainOptions {
  // Directory for checkpoints and logs; empty disables file output.
  std::filesystem::path out_dir;
  // Stop once the eval accuracy reaches this value (disabled when unset).
  std::optional<double> stop_at_accuracy;
  std::ostream* progress = nullptr;
};

// In-memory data for a run. `train` is already augmented.
struct RunData {
  std::vector<data::Sample> train;
  std::vector<data::Sample> eval;
  std::string eval_split;
};

// Materializes the dataset named by the config: the synthetic corpus when a
// synth spec is present (images generated in memory), otherwise the directory
// at data.root. Training images are augmented by the configured multiplier.
RunData prepare_data(const RunConfig& cfg);

std::vector<ad::Tensor<float>> to_tensors(const std::vector<data::Sample>& samples);

metrics::ConfusionMatrix evaluate(const FloatModel& m, const std::vector<data::Sample>& samples);

// Pretrains the configured backbone as a plain image classifier
// (conv stack -> pooling -> linear) and returns its weights under the
// "backbone." names used by the model.
ckpt::Checkpoint pretrain_backbone(const RunConfig& cfg, const std::vector<data::Sample>& train, std::ostream* progress);

// Deterministic given (cfg, data): per-sample generators are derived from
// (seed, step, position in batch), the masking ratio from (seed, step), and
// per-sample gradients are summed in batch order whatever the worker count.
TrainResult train(FloatModel& model, const RunConfig& cfg, const RunData& data, const TrainOptions& opt);

// Model parameters plus {"run": config, "state": state} as the embedded JSON.
ckpt::Checkpoint make_checkpoint(FloatModel& m, const RunConfig& cfg, const nlohmann::json& state);
void save_checkpoint(FloatModel& m, const RunConfig& cfg, const nlohmann::json& state, const std::filesystem::path& path);

struct LoadedModel {
  RunConfig config;
  nlohmann::json state;
  FloatModel model;
};
// Rebuilds the model from the embedded configuration and loads every tensor.
LoadedModel load_checkpoint(const std::filesystem::path& path);
// Loads into an existing model; shape or name differences raise
// CheckpointMismatchError.
void load_into(FloatModel& m, const ckpt::Checkpoint& c);

void write_epoch_csv(const std::vector<EpochLog>& epochs, const std::filesystem::path& path);
void write_steps_csv(const std::vector<StepLog>& steps, const std::filesystem::path& path);

}  // namespace mltr::app
