#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mltr/nn.hpp"
#include "mltr/tensor.hpp"

// Binary checkpoint container.
//
//   "MLTR"                       4-byte magic
//   u32 version                  currently 1; newer versions are rejected
//   u64 n, n bytes               embedded run configuration (JSON text)
//   u32 count                    number of tensors
//   count x {
//     u32 n, n bytes             tensor name
//     u8  dtype                  0 = f32, 1 = f64
//     u32 rank, rank x u64       shape
//     payload                    numel values, IEEE-754 little-endian
//   }
//   u64 checksum                 FNV-1a 64 over every preceding byte
//
// All integers are little-endian.
namespace mltr::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

struct TensorRecord {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> payload;

  template <typename T>
  static TensorRecord from_tensor(std::string name, const ad::Tensor<T>& t);
  template <typename T>
  std::vector<T> values() const;
};

struct Checkpoint {
  std::uint32_t version = kFormatVersion;
  std::string config_json;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode(const Checkpoint& c);
// Throws CorruptFileError on truncation or checksum mismatch and
// FormatError on bad magic or unsupported version.
Checkpoint decode(std::span<const std::uint8_t> bytes);

void write_file(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint read_file(const std::filesystem::path& path);

// Copies records into the visited parameters. Every visited parameter whose
// name starts with `prefix` must have a record of equal shape; records with
// that prefix that match no parameter are also reported. Throws
// CheckpointMismatchError naming each offending tensor; parameters are left
// untouched on error.
template <typename T, typename Visitable>
void load_parameters(const Checkpoint& c, Visitable& target, const std::string& prefix = "");

template <typename T, typename Visitable>
Checkpoint snapshot(Visitable& source, std::string config_json) {
  Checkpoint c;
  c.config_json = std::move(config_json);
  source.visit_params([&](const std::string& name, ad::Tensor<T>& p) {
    c.tensors.push_back(TensorRecord::from_tensor(name, p));
  });
  return c;
}

// Implementation of load_parameters; `visit` enumerates (name, tensor).
template <typename T>
void load_parameters_impl(const Checkpoint& c,
                          const std::function<void(const nn::ParamVisitor<T>&)>& visit,
                          const std::string& prefix);

template <typename T, typename Visitable>
void load_parameters(const Checkpoint& c, Visitable& target, const std::string& prefix) {
  load_parameters_impl<T>(
      c, [&](const nn::ParamVisitor<T>& f) { target.visit_params(f); }, prefix);
}

}  // namespace mltr::ckpt
