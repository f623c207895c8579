#include "mltr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace mltr::ckpt {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void pod(U v) {
    bytes(&v, sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& out() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    if (n > in_.size() - pos_) {
      throw CorruptFileError("checkpoint truncated at byte " + std::to_string(pos_) + " (needed " +
                             std::to_string(n) + " more bytes)");
    }
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  template <typename U>
  U pod() {
    U v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType d) { return d == DType::kF32 ? 4 : 8; }

}  // namespace

template <typename T>
TensorRecord TensorRecord::from_tensor(std::string name, const ad::Tensor<T>& t) {
  TensorRecord r;
  r.name = std::move(name);
  r.dtype = std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
  r.shape = t.shape();
  r.payload.resize(t.numel() * sizeof(T));
  std::memcpy(r.payload.data(), t.data().data(), r.payload.size());
  return r;
}

template <typename T>
std::vector<T> TensorRecord::values() const {
  const std::size_t n = numel(shape);
  std::vector<T> out(n);
  if (dtype == DType::kF32) {
    std::vector<float> raw(n);
    std::memcpy(raw.data(), payload.data(), n * sizeof(float));
    std::copy(raw.begin(), raw.end(), out.begin());
  } else {
    std::vector<double> raw(n);
    std::memcpy(raw.data(), payload.data(), n * sizeof(double));
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(raw[i]);
  }
  return out;
}

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::vector<std::uint8_t> encode(const Checkpoint& c) {
  Writer w;
  w.bytes("MLTR", 4);
  w.pod(c.version);
  w.pod(static_cast<std::uint64_t>(c.config_json.size()));
  w.bytes(c.config_json.data(), c.config_json.size());
  w.pod(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.payload.size() != numel(t.shape) * dtype_size(t.dtype)) {
      throw ContractError("tensor " + t.name + ": payload size does not match shape " + to_string(t.shape));
    }
    w.str(t.name);
    w.pod(static_cast<std::uint8_t>(t.dtype));
    w.pod(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.pod(static_cast<std::uint64_t>(d));
    w.bytes(t.payload.data(), t.payload.size());
  }
  const std::uint64_t sum = fnv1a64(w.out());
  w.pod(sum);
  return std::move(w.out());
}

Checkpoint decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 4 + 8) throw CorruptFileError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), "MLTR", 4) != 0) throw FormatError("not a checkpoint: bad magic at byte 0");
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  Checkpoint c;
  c.version = r.pod<std::uint32_t>();
  if (c.version != kFormatVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(c.version) + " (this build reads " +
                      std::to_string(kFormatVersion) + ")");
  }
  // Verify the trailer before trusting any length field.
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (fnv1a64(bytes.first(body)) != stored) throw CorruptFileError("checkpoint checksum mismatch");

  Reader in(bytes.first(body));
  in.bytes(magic, 4);
  in.pod<std::uint32_t>();
  const auto json_len = in.pod<std::uint64_t>();
  if (json_len > body) throw CorruptFileError("checkpoint config length out of range");
  c.config_json.resize(json_len);
  in.bytes(c.config_json.data(), json_len);
  const auto count = in.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    t.name = in.str();
    const auto dt = in.pod<std::uint8_t>();
    if (dt > 1) throw FormatError("tensor " + t.name + ": unknown dtype " + std::to_string(dt));
    t.dtype = static_cast<DType>(dt);
    const auto rank = in.pod<std::uint32_t>();
    if (rank > 8) throw CorruptFileError("tensor " + t.name + ": implausible rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(in.pod<std::uint64_t>()));
    const std::size_t n = numel(t.shape) * dtype_size(t.dtype);
    if (n > body - in.pos()) throw CorruptFileError("tensor " + t.name + ": payload runs past end of file");
    t.payload.resize(n);
    in.bytes(t.payload.data(), n);
    c.tensors.push_back(std::move(t));
  }
  if (in.pos() != body) throw CorruptFileError("checkpoint has " + std::to_string(body - in.pos()) + " trailing bytes");
  return c;
}

void write_file(const Checkpoint& c, const std::filesystem::path& path) {
  const auto bytes = encode(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

Checkpoint read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

template <typename T>
void load_parameters_impl(const Checkpoint& c,
                          const std::function<void(const nn::ParamVisitor<T>&)>& visit,
                          const std::string& prefix) {
  auto matches = [&](const std::string& n) { return n.compare(0, prefix.size(), prefix) == 0; };
  std::vector<std::string> problems;
  std::set<std::string> seen;
  visit([&](const std::string& name, ad::Tensor<T>& p) {
    if (!matches(name)) return;
    seen.insert(name);
    const TensorRecord* r = c.find(name);
    if (!r) {
      problems.push_back(name + ": missing from checkpoint (model " + to_string(p.shape()) + ")");
    } else if (r->shape != p.shape()) {
      problems.push_back(name + ": checkpoint " + to_string(r->shape) + " vs model " + to_string(p.shape()));
    }
  });
  for (const auto& t : c.tensors) {
    if (matches(t.name) && !seen.count(t.name)) problems.push_back(t.name + ": not present in model");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw CheckpointMismatchError(msg);
  }
  visit([&](const std::string& name, ad::Tensor<T>& p) {
    if (!matches(name)) return;
    const auto v = c.find(name)->template values<T>();
    std::copy(v.begin(), v.end(), p.mutable_data().begin());
  });
}

template TensorRecord TensorRecord::from_tensor(std::string, const ad::Tensor<float>&);
template TensorRecord TensorRecord::from_tensor(std::string, const ad::Tensor<double>&);
template std::vector<float> TensorRecord::values() const;
template std::vector<double> TensorRecord::values() const;
template void load_parameters_impl<float>(const Checkpoint&,
                                          const std::function<void(const nn::ParamVisitor<float>&)>&,
                                          const std::string&);
template void load_parameters_impl<double>(const Checkpoint&,
                                           const std::function<void(const nn::ParamVisitor<double>&)>&,
                                           const std::string&);

}  // namespace mltr::ckpt
