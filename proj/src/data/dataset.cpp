#include "mltr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numbers>
#include <set>

#include "mltr/error.hpp"
#include "mltr/rng.hpp"

namespace mltr::data {

namespace fs = std::filesystem;

std::string_view split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(s) + "' (expected train or test)");
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == s) out.push_back(i);
  return out;
}

std::size_t DatasetManifest::count(Split s, std::size_t label) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.split == s && e.label == label; }));
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (e.label >= kNumClasses) throw DatasetError("label " + std::to_string(e.label) + " out of range for " + e.path);
    if (!seen.insert(e.path).second) throw DatasetError("path listed more than once: " + e.path);
  }
}

std::vector<std::size_t> split_counts(const std::vector<std::size_t>& class_sizes, double ratio) {
  if (!(ratio >= 0 && ratio <= 1)) throw ConfigError("split ratio must lie in [0, 1]");
  std::size_t total = 0;
  for (auto n : class_sizes) total += n;
  const auto target = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  std::vector<std::size_t> counts(class_sizes.size());
  std::vector<double> remainder(class_sizes.size());
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < class_sizes.size(); ++c) {
    const double exact = ratio * static_cast<double>(class_sizes[c]);
    counts[c] = static_cast<std::size_t>(std::floor(exact));
    remainder[c] = exact - static_cast<double>(counts[c]);
    assigned += counts[c];
  }
  std::vector<std::size_t> order(class_sizes.size());
  for (std::size_t c = 0; c < order.size(); ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < target && i < order.size(); ++i) {
    if (counts[order[i]] < class_sizes[order[i]]) {
      ++counts[order[i]];
      ++assigned;
    }
  }
  return counts;
}

namespace {

bool is_image(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".pgm" || ext == ".ppm";
}

std::size_t label_of(const std::string& rel) {
  const auto slash = rel.find('/');
  const auto dir = rel.substr(0, slash);
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (kClassNames[c] == dir) return c;
  throw DatasetError("path '" + rel + "' is not inside a class directory");
}

template <class T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

std::vector<std::vector<std::size_t>> train_selection(const std::vector<std::size_t>& class_sizes, double ratio,
                                                      std::uint64_t seed) {
  const auto n_train = split_counts(class_sizes, ratio);
  std::vector<std::vector<std::size_t>> out(class_sizes.size());
  for (std::size_t c = 0; c < class_sizes.size(); ++c) {
    std::vector<std::size_t> order(class_sizes[c]);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, {c}));
    seeded_shuffle(order, rng);
    out[c].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train[c]));
    std::sort(out[c].begin(), out[c].end());
  }
  return out;
}

DatasetManifest load_manifest(const fs::path& root, double split_ratio, std::uint64_t seed) {
  if (!fs::is_directory(root)) throw DatasetError("dataset root '" + root.string() + "' is not a directory");
  std::vector<std::vector<std::string>> files(kNumClasses);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const fs::path dir = root / std::string(kClassNames[c]);
    if (!fs::is_directory(dir)) throw DatasetError("missing class directory '" + std::string(kClassNames[c]) + "' under " + root.string());
    for (const auto& f : fs::directory_iterator(dir))
      if (f.is_regular_file() && is_image(f.path())) files[c].push_back(std::string(kClassNames[c]) + "/" + f.path().filename().string());
    if (files[c].empty()) throw DatasetError("class directory '" + std::string(kClassNames[c]) + "' contains no images");
    std::sort(files[c].begin(), files[c].end());
  }

  DatasetManifest m;
  m.root = root;
  m.seed = seed;
  const fs::path split_file = root / "split.json";
  if (fs::exists(split_file)) {
    std::ifstream f(split_file);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError("split.json: " + std::string(e.what()));
    }
    std::set<std::string> on_disk;
    for (const auto& cls : files) on_disk.insert(cls.begin(), cls.end());
    for (const Split s : {Split::kTrain, Split::kTest}) {
      const auto key = std::string(split_name(s));
      if (!j.contains(key) || !j[key].is_array()) throw DatasetError("split.json: missing array '" + key + "'");
      for (const auto& p : j[key]) {
        const auto rel = p.get<std::string>();
        if (!on_disk.count(rel)) throw DatasetError("split.json lists '" + rel + "' which is not in the dataset");
        m.entries.push_back({rel, label_of(rel), s});
      }
    }
    m.validate();
    return m;
  }

  std::vector<std::size_t> sizes;
  for (const auto& cls : files) sizes.push_back(cls.size());
  const auto selected = train_selection(sizes, split_ratio, seed);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<bool> is_train(files[c].size(), false);
    for (auto i : selected[c]) is_train[i] = true;
    for (std::size_t i = 0; i < files[c].size(); ++i)
      m.entries.push_back({files[c][i], c, is_train[i] ? Split::kTrain : Split::kTest});
  }
  return m;
}

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) entries.push_back({{"path", e.path}, {"label", e.label}, {"split", split_name(e.split)}});
  return {{"root", m.root.generic_string()}, {"seed", m.seed}, {"entries", entries}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.root = j.at("root").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("entries"))
      m.entries.push_back({e.at("path").get<std::string>(), e.at("label").get<std::size_t>(), parse_split(e.at("split").get<std::string>())});
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed manifest: " + std::string(e.what()));
  }
  m.validate();
  return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << to_json(m).dump(2) << "\n";
}

std::vector<Sample> load_samples(const DatasetManifest& m, const std::vector<std::size_t>& which, const LoadOptions& opt) {
  std::vector<Sample> out(which.size());
  const auto load_one = [&](std::size_t i) {
    const auto& e = m.entries.at(which[i]);
    const auto raw = read_image(m.root / e.path, opt.width, opt.height);
    out[i].image = opt.preprocess ? preprocess(raw, opt.params) : to_float(to_grayscale(raw));
    out[i].label = e.label;
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.workers, which.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < which.size(); ++i) load_one(i);
    return out;
  }
  std::vector<std::future<void>> jobs;
  for (std::size_t w = 0; w < workers; ++w) {
    jobs.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < which.size(); i += workers) load_one(i);
    }));
  }
  for (auto& j : jobs) j.get();
  return out;
}

ad::Tensor<float> stack_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& batch,
                              std::vector<std::size_t>* labels) {
  if (batch.empty()) throw ContractError("empty batch");
  const auto& first = samples.at(batch[0]).image;
  const std::size_t per = first.data.size();
  std::vector<float> data;
  data.reserve(per * batch.size());
  if (labels) labels->clear();
  for (auto i : batch) {
    const auto& s = samples.at(i);
    if (s.image.data.size() != per) throw ShapeError("batch images differ in size");
    data.insert(data.end(), s.image.data.begin(), s.image.data.end());
    if (labels) labels->push_back(s.label);
  }
  return ad::Tensor<float>::from({batch.size(), first.channels, first.height, first.width}, std::move(data));
}

namespace {

void add_disc(std::vector<double>& f, std::size_t w, std::size_t h, double cx, double cy, double r, double delta, bool soft) {
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      if (soft) {
        f[y * w + x] *= 1.0 - delta * std::exp(-d2 / (2 * r * r));
      } else if (d2 <= r * r) {
        f[y * w + x] += delta;
      }
    }
  }
}

}  // namespace

std::vector<SynthImage> synth_generate(std::size_t n_per_class, std::uint64_t seed, std::size_t height, std::size_t width) {
  if (n_per_class < 2) throw ConfigError("synthetic corpus needs at least 2 images per class");
  if (height < 8 || width < 8) throw ConfigError("synthetic images must be at least 8x8");
  std::vector<SynthImage> out;
  const double W = static_cast<double>(width), H = static_cast<double>(height);
  const double S = std::min(W, H);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      Rng rng(derive_seed(seed, {c, i}));
      const double base = rng.uniform(150, 185);
      const double gx = rng.uniform(-30, 30), gy = rng.uniform(-30, 30);
      const double amp = rng.uniform(0, 6), freq = rng.uniform(0.5, 2.0), phase = rng.uniform(0, 2 * std::numbers::pi);
      std::vector<double> f(width * height);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
          f[y * width + x] = base + gx * (x / W - 0.5) + gy * (y / H - 0.5) +
                             amp * std::sin(2 * std::numbers::pi * freq * (x + y) / (W + H) + phase) + rng.uniform(-3, 3);

      if (c == 1) {
        const auto spots = 4 + rng.below(4);
        for (std::uint64_t s = 0; s < spots; ++s)
          add_disc(f, width, height, rng.uniform(0.1, 0.9) * W, rng.uniform(0.1, 0.9) * H, rng.uniform(0.04, 0.07) * S,
                   rng.uniform(55, 80), false);
      }
      if (c >= 2) {
        const auto stains = c == 2 ? 2 + rng.below(2) : 1 + rng.below(2);
        for (std::uint64_t s = 0; s < stains; ++s)
          add_disc(f, width, height, rng.uniform(0.2, 0.8) * W, rng.uniform(0.2, 0.8) * H, rng.uniform(0.15, 0.25) * S,
                   rng.uniform(0.35, 0.5), true);
      }
      if (c == 3) {
        const auto rects = 1 + rng.below(2);
        for (std::uint64_t r = 0; r < rects; ++r) {
          const auto rw = static_cast<std::size_t>(rng.uniform(0.2, 0.35) * W);
          const auto rh = static_cast<std::size_t>(rng.uniform(0.2, 0.35) * H);
          const auto x0 = static_cast<std::size_t>(rng.below(width - rw + 1));
          const auto y0 = static_cast<std::size_t>(rng.below(height - rh + 1));
          for (std::size_t y = y0; y < y0 + rh; ++y)
            for (std::size_t x = x0; x < x0 + rw; ++x) f[y * width + x] = 0;
        }
      }

      ImageU8 img(width, height, 1);
      for (std::size_t k = 0; k < f.size(); ++k)
        img.pixels[k] = static_cast<std::uint8_t>(std::clamp(std::lround(f[k]), 0L, 255L));
      out.push_back({c, std::move(img)});
    }
  }
  return out;
}

DatasetManifest write_synth(const fs::path& root, std::size_t n_per_class, std::uint64_t seed, std::size_t height,
                            std::size_t width, double split_ratio) {
  const auto corpus = synth_generate(n_per_class, seed, height, width);
  try {
    for (const auto& name : kClassNames) fs::create_directories(root / std::string(name));
  } catch (const fs::filesystem_error& e) {
    throw IoError(e.what());
  }
  std::vector<std::size_t> per_class(kNumClasses, 0);
  for (const auto& s : corpus) {
    char name[32];
    std::snprintf(name, sizeof name, "synth_%04zu.pgm", per_class[s.label]++);
    write_pnm(s.image, root / std::string(kClassNames[s.label]) / name);
  }
  auto m = load_manifest(root, split_ratio, seed);
  write_manifest(m, root / "manifest.json");
  return m;
}

std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch, std::uint64_t seed, std::uint64_t epoch) {
  if (batch == 0) throw ConfigError("batch size must be positive");
  if (n == 0) throw ContractError("cannot iterate an empty dataset");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {0xBA7C4ull, epoch}));
  seeded_shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  return out;
}

}  // namespace mltr::data
