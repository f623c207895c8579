#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mltr/image.hpp"
#include "mltr/preprocess.hpp"
#include "mltr/tensor.hpp"

namespace mltr::data {

inline constexpr std::size_t kNumClasses = 4;
// Ordinal severity order; the index is the class label.
inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {"normal", "mild", "moderate", "severe"};

enum class Split { kTrain, kTest };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct ManifestEntry {
  std::string path;  // relative to the dataset root, '/' separated
  std::size_t label = 0;
  Split split = Split::kTrain;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;

  std::vector<std::size_t> indices(Split s) const;
  std::size_t count(Split s) const { return indices(s).size(); }
  std::size_t count(Split s, std::size_t label) const;
  // Throws DatasetError when a path is listed twice or a label is out of range.
  void validate() const;
};

// Per-class training counts: the overall train total round(ratio * N) is
// apportioned across classes by largest remainder (ties to the lower class).
std::vector<std::size_t> split_counts(const std::vector<std::size_t>& class_sizes, double ratio);

// For each class, the positions (within that class's sorted file list) that
// go to the training split: a seeded per-class shuffle cut at split_counts.
std::vector<std::vector<std::size_t>> train_selection(const std::vector<std::size_t>& class_sizes, double ratio,
                                                      std::uint64_t seed);

// Reads root/{normal,mild,moderate,severe}/*.pgm|*.ppm. A root/split.json
// of the form {"train": [...], "test": [...]} pins the split; otherwise each
// class is shuffled with a seeded generator and cut per split_counts.
DatasetManifest load_manifest(const std::filesystem::path& root, double split_ratio = 0.7, std::uint64_t seed = 0);

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);

struct Sample {
  ImageF image;
  std::size_t label = 0;
};

struct LoadOptions {
  std::size_t width = 64;
  std::size_t height = 64;
  bool preprocess = true;
  PreprocessParams params;
  std::size_t workers = 1;
};

// Decodes (and preprocesses) the given manifest entries. Work may be spread
// over threads; the result is always in the order of `which`.
std::vector<Sample> load_samples(const DatasetManifest& m, const std::vector<std::size_t>& which, const LoadOptions& opt);

// Stacks samples[batch[i]] into [B x C x H x W]; labels in the same order.
ad::Tensor<float> stack_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& batch,
                              std::vector<std::size_t>* labels = nullptr);

struct SynthImage {
  std::size_t label = 0;
  ImageU8 image;
};

// Deterministic 4-class grayscale corpus, n_per_class images per class,
// ordered class-major.
std::vector<SynthImage> synth_generate(std::size_t n_per_class, std::uint64_t seed, std::size_t height, std::size_t width);

// Writes a corpus in the on-disk dataset layout plus manifest.json and
// returns the manifest (split by load_manifest rules).
DatasetManifest write_synth(const std::filesystem::path& root, std::size_t n_per_class, std::uint64_t seed,
                            std::size_t height, std::size_t width, double split_ratio = 0.7);

// Seeded per-epoch shuffle of [0, n) cut into batches; the last partial
// batch is kept.
std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch, std::uint64_t seed, std::uint64_t epoch);

}  // namespace mltr::data
