// mltr command-line entry point.
//
// Exit codes: 0 ok, 1 internal error, 2 usage/config error, 3 dataset or IO
// error, 4 checkpoint does not match the model.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "mltr/checkpoint.hpp"
#include "mltr/config.hpp"
#include "mltr/dataset.hpp"
#include "mltr/error.hpp"
#include "mltr/gradcheck.hpp"
#include "mltr/metrics.hpp"
#include "mltr/preprocess.hpp"
#include "mltr/trainer.hpp"

namespace fs = std::filesystem;
using namespace mltr;

namespace {

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kData = 3, kMismatch = 4 };

struct TrainArgs {
  std::string config, data, out = "run";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> synth, epochs, workers;
};

struct EvalArgs {
  std::string ckpt, data, split = "test", out;
};

struct PreprocessArgs {
  std::string data, out, config;
};

struct SynthArgs {
  std::string out, config;
  std::size_t n = 8;
  std::uint64_t seed = 0;
};

struct AttnArgs {
  std::string ckpt, image, out = "attn";
  std::size_t layer = 0, head = 0;
};

struct GradcheckArgs {
  std::uint64_t seed = 0;
};

RunConfig base_config(const std::string& path) {
  RunConfig cfg;
  if (!path.empty()) cfg = load_run_config(path);
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = base_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.workers) cfg.train.workers = *a.workers;
  if (!a.data.empty()) {
    cfg.data.root = a.data;
    cfg.data.synth.reset();
  }
  if (a.synth) cfg.data.synth = SynthSpec{*a.synth, cfg.train.seed};
  cfg.validate();
  if (!cfg.data.synth && cfg.data.root.empty()) throw ConfigError("no dataset: pass --data DIR, --synth N, or set data.root");

  const fs::path out = a.out;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  const auto data = app::prepare_data(cfg);
  std::cerr << "train samples " << data.train.size() << " (augmented), " << data.eval_split << " samples "
            << data.eval.size() << "\n";
  if (cfg.train.backbone_pretrain_epochs > 0) {
    auto pre = app::pretrain_backbone(cfg, data.train, &std::cerr);
    ckpt::write_file(pre, out / "backbone.ckpt");
    cfg.model.backbone.pretrained_weights = (out / "backbone.ckpt").string();
  }
  {
    std::ofstream f(out / "config.json", std::ios::trunc);
    f << dump(cfg) << "\n";
  }
  app::FloatModel model(cfg.model, cfg.train.seed);
  app::TrainOptions opt;
  opt.out_dir = out;
  opt.progress = &std::cerr;
  const auto result = app::train(model, cfg, data, opt);
  nlohmann::json summary = {{"best_epoch", result.best_epoch},
                            {"eval_split", data.eval_split},
                            {"epochs_run", result.epochs.size()},
                            {"final_loss_total", result.epochs.back().loss_total},
                            {"final_train_acc", result.epochs.back().train_acc},
                            {"metrics", result.best_metrics}};
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  auto loaded = app::load_checkpoint(a.ckpt);
  auto cfg = loaded.config;
  if (!a.data.empty()) {
    cfg.data.root = a.data;
    cfg.data.synth.reset();
  }
  cfg.data.eval_split = a.split;
  cfg.data.augment_multiplier = 1;
  cfg.validate();
  const auto data = app::prepare_data(cfg);
  const auto cm = app::evaluate(loaded.model, data.eval);
  const auto j = metrics::to_json(cm);
  std::cout << j.dump(2) << "\n";
  if (!a.out.empty()) {
    std::ofstream f(a.out, std::ios::trunc);
    f << j.dump(2) << "\n";
    if (!f) throw IoError("cannot write " + a.out);
  }
  return kOk;
}

int cmd_preprocess(const PreprocessArgs& a) {
  const RunConfig cfg = base_config(a.config);
  data::PreprocessParams p;
  p.gamma = cfg.data.preprocess.gamma;
  p.clahe.clip = cfg.data.preprocess.clahe_clip;
  p.clahe.tiles_x = p.clahe.tiles_y = cfg.data.preprocess.clahe_tiles;
  const fs::path in = a.data, out = a.out;
  if (!fs::is_directory(in)) throw IoError("input directory " + in.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    auto target = out / fs::relative(f, in);
    target.replace_extension(".pgm");
    fs::create_directories(target.parent_path());
    data::write_pnm(data::to_u8(data::preprocess(data::read_pnm(f), p)), target);
  }
  std::cout << "preprocessed " << files.size() << " images into " << out.string() << "\n";
  return kOk;
}

int cmd_synth(const SynthArgs& a) {
  const RunConfig cfg = base_config(a.config);
  const auto m = data::write_synth(a.out, a.n, a.seed, cfg.model.height, cfg.model.width, cfg.data.split_ratio);
  std::cout << "wrote " << m.entries.size() << " images (" << m.count(data::Split::kTrain) << " train, "
            << m.count(data::Split::kTest) << " test) to " << a.out << "\n";
  return kOk;
}

int cmd_attn_dump(const AttnArgs& a) {
  auto loaded = app::load_checkpoint(a.ckpt);
  const auto& mc = loaded.config.model;
  const std::size_t layers = mc.enc_depth + mc.dec_depth;
  if (a.layer >= layers) {
    std::cerr << "error: layer " << a.layer << " out of range (model has " << layers << " layers, encoder first)\n";
    return kUsage;
  }
  if (a.head >= mc.heads) {
    std::cerr << "error: head " << a.head << " out of range (model has " << mc.heads << " heads)\n";
    return kUsage;
  }
  const auto& pc = loaded.config.data.preprocess;
  const auto raw = data::read_image(a.image, mc.width, mc.height);
  data::PreprocessParams p;
  p.gamma = pc.gamma;
  p.clahe.clip = pc.clahe_clip;
  p.clahe.tiles_x = p.clahe.tiles_y = pc.clahe_tiles;
  const auto img = pc.enabled ? data::preprocess(raw, p) : data::to_float(data::to_grayscale(raw));
  const auto x = ad::Tensor<float>::from({img.channels, img.height, img.width}, img.data);
  model::AttentionTrace<float> trace;
  loaded.model.forward_infer(x, &trace);
  const auto& map = trace.layers.at(a.layer).at(a.head);
  const std::size_t len = map.dim(0);

  const fs::path csv = a.out + ".csv", pgm = a.out + ".pgm";
  std::ofstream f(csv, std::ios::trunc);
  if (!f) throw IoError("cannot write " + csv.string());
  f << std::setprecision(9);
  const auto d = map.data();
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  data::ImageU8 heat(len, len, 1);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      const float v = d[i * len + j];
      f << (j ? "," : "") << v;
      const double t = *hi > *lo ? (v - *lo) / (*hi - *lo) : 0.0;
      heat.at(j, i) = static_cast<std::uint8_t>(std::lround(t * 255.0));
    }
    f << "\n";
  }
  if (!f) throw IoError("failed writing " + csv.string());
  data::write_pnm(heat, pgm);
  std::cout << "wrote " << len << "x" << len << " attention map to " << csv.string() << " and " << pgm.string() << "\n";
  return kOk;
}

int cmd_gradcheck(const GradcheckArgs& a) {
  bool ok = true;
  std::cout << std::scientific << std::setprecision(3);
  for (const auto& r : gradcheck::op_suite(a.seed)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " rel_err " << r.rel_error << " (" << r.checked
              << " scalars)\n";
    ok = ok && r.passed;
  }
  const auto r = gradcheck::model_check(a.seed);
  std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " rel_err " << r.rel_error << " (" << r.checked
            << " scalars)\n";
  ok = ok && r.passed;
  return ok ? kOk : kInternal;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked latent transformer: training, evaluation and data tools"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model and write checkpoints, logs and metrics");
  train->add_option("--config", ta.config, "run configuration (JSON)")->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "dataset root with normal/ mild/ moderate/ severe/");
  train->add_option("--synth", ta.synth, "use an in-memory synthetic corpus with N images per class");
  train->add_option("--out", ta.out, "output directory")->capture_default_str();
  train->add_option("--seed", ta.seed, "override train.seed");
  train->add_option("--epochs", ta.epochs, "override train.epochs");
  train->add_option("--workers", ta.workers, "override train.workers");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint in inference mode");
  eval->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
  eval->add_option("--data", ea.data, "dataset root (defaults to the checkpoint's data section)");
  eval->add_option("--split", ea.split, "split to score")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  eval->add_option("--out", ea.out, "also write the metrics JSON here");

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "run the preprocessing pipeline over a directory of PGM/PPM files");
  pre->add_option("--data", pa.data, "input directory")->required();
  pre->add_option("--out", pa.out, "output directory")->required();
  pre->add_option("--config", pa.config, "run configuration supplying preprocessing parameters");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "write a synthetic 4-class corpus and manifest");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--synth", sa.n, "images per class")->capture_default_str();
  synth->add_option("--seed", sa.seed, "generator seed")->capture_default_str();
  synth->add_option("--config", sa.config, "run configuration supplying image size and split ratio");

  AttnArgs aa;
  auto* attn = app.add_subcommand("attn-dump", "export one post-softmax attention map as CSV and PGM");
  attn->add_option("--ckpt", aa.ckpt, "checkpoint file")->required();
  attn->add_option("--image", aa.image, "input PGM/PPM")->required();
  attn->add_option("--layer", aa.layer, "layer index, encoder layers first")->capture_default_str();
  attn->add_option("--head", aa.head, "head index")->capture_default_str();
  attn->add_option("--out", aa.out, "output path prefix (.csv and .pgm are appended)")->capture_default_str();

  GradcheckArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and a tiny model");
  grad->add_option("--seed", ga.seed, "seed for random inputs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*pre) return cmd_preprocess(pa);
    if (*synth) return cmd_synth(sa);
    if (*attn) return cmd_attn_dump(aa);
    if (*grad) return cmd_gradcheck(ga);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointMismatchError& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const DatasetError& e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kData;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kData;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kData;
  } catch (const CorruptFileError& e) {
    std::cerr << "corrupt file: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}
