#include "mltr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "mltr/augment.hpp"
#include "mltr/error.hpp"
#include "mltr/losses.hpp"
#include "mltr/optim.hpp"
#include "mltr/tape.hpp"

namespace mltr::app {

namespace fs = std::filesystem;
using ad::Tensor;

namespace {

data::LoadOptions load_options(const RunConfig& cfg) {
  data::LoadOptions o;
  o.width = cfg.model.width;
  o.height = cfg.model.height;
  o.preprocess = cfg.data.preprocess.enabled;
  o.params.gamma = cfg.data.preprocess.gamma;
  o.params.clahe.clip = cfg.data.preprocess.clahe_clip;
  o.params.clahe.tiles_x = o.params.clahe.tiles_y = cfg.data.preprocess.clahe_tiles;
  o.workers = cfg.train.workers;
  return o;
}

data::Sample to_sample(const data::ImageU8& raw, std::size_t label, const data::LoadOptions& o) {
  const auto sized = data::resize_bilinear(raw, o.width, o.height);
  return {o.preprocess ? data::preprocess(sized, o.params) : data::to_float(data::to_grayscale(sized)), label};
}

std::size_t argmax_row(const Tensor<float>& logits) {
  const auto d = logits.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

struct SampleResult {
  std::vector<std::vector<float>> grads;  // per trainable parameter, in visit order
  double total = 0, ce = 0, aux = 0;
  std::size_t predicted = 0;
};

}  // namespace

std::vector<Tensor<float>> to_tensors(const std::vector<data::Sample>& samples) {
  std::vector<Tensor<float>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(Tensor<float>::from({s.image.channels, s.image.height, s.image.width}, s.image.data));
  }
  return out;
}

RunData prepare_data(const RunConfig& cfg) {
  const auto opt = load_options(cfg);
  std::vector<data::Sample> train, test;
  if (cfg.data.synth) {
    const auto corpus = data::synth_generate(cfg.data.synth->n_per_class, cfg.data.synth->seed, cfg.model.height,
                                             cfg.model.width);
    std::vector<std::size_t> sizes(data::kNumClasses, cfg.data.synth->n_per_class);
    const auto selected = data::train_selection(sizes, cfg.data.split_ratio, cfg.data.split_seed);
    for (std::size_t c = 0; c < data::kNumClasses; ++c) {
      std::vector<bool> is_train(sizes[c], false);
      for (auto i : selected[c]) is_train[i] = true;
      for (std::size_t i = 0; i < sizes[c]; ++i) {
        const auto& s = corpus[c * sizes[c] + i];
        (is_train[i] ? train : test).push_back(to_sample(s.image, s.label, opt));
      }
    }
  } else {
    if (cfg.data.root.empty()) throw ConfigError("data.root or data.synth must be given");
    const auto m = data::load_manifest(cfg.data.root, cfg.data.split_ratio, cfg.data.split_seed);
    train = data::load_samples(m, m.indices(data::Split::kTrain), opt);
    test = data::load_samples(m, m.indices(data::Split::kTest), opt);
  }
  if (train.empty()) throw DatasetError("training split is empty");

  RunData rd;
  rd.eval_split = cfg.data.eval_split;
  rd.eval = cfg.data.eval_split == "train" ? train : test;
  const std::size_t mult = std::max<std::size_t>(1, cfg.data.augment_multiplier);
  for (std::size_t i = 0; i < train.size(); ++i) {
    Rng rng(derive_seed(cfg.train.seed, {0xA06, i}));
    for (auto& img : data::augment(train[i].image, rng, data::AugmentOps{}, mult)) {
      rd.train.push_back({std::move(img), train[i].label});
    }
  }
  return rd;
}

metrics::ConfusionMatrix evaluate(const FloatModel& m, const std::vector<data::Sample>& samples) {
  metrics::ConfusionMatrix cm(m.config().n_classes);
  for (const auto& s : samples) {
    const auto x = Tensor<float>::from({s.image.channels, s.image.height, s.image.width}, s.image.data);
    cm.add(s.label, argmax_row(m.forward_infer(x)));
  }
  return cm;
}

namespace {

struct BackboneClassifier {
  latent::Backbone<float> backbone;
  nn::Linear<float> head;
  void visit_params(const nn::ParamVisitor<float>& f) {
    backbone.visit("backbone", f);
    head.visit("pretrain_head", f);
  }
};

}  // namespace

ckpt::Checkpoint pretrain_backbone(const RunConfig& cfg, const std::vector<data::Sample>& train, std::ostream* progress) {
  auto spec = cfg.model.backbone;
  spec.pretrained_weights.reset();
  spec.freeze = false;
  BackboneClassifier net{latent::build_backbone<float>(spec, derive_seed(cfg.train.seed, {0xB0})), {}};
  Rng rng(derive_seed(cfg.train.seed, {0xB1}));
  net.head = nn::Linear<float>::make(spec.out_channels(), cfg.model.n_classes, rng);
  optim::Adam<float> adam;
  adam.attach(net);
  const auto images = to_tensors(train);
  const std::size_t epochs = cfg.train.backbone_pretrain_epochs;
  const std::size_t per_epoch = (train.size() + cfg.train.batch - 1) / cfg.train.batch;
  const std::uint64_t total = epochs * per_epoch;
  std::uint64_t step = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    double loss_sum = 0;
    std::size_t correct = 0;
    for (const auto& batch : data::batch_order(train.size(), cfg.train.batch, derive_seed(cfg.train.seed, {0xB2}), e)) {
      std::vector<std::vector<double>> acc;
      for (auto idx : batch) {
        ad::GradTape<float> tape;
        const auto logits = latent::embed_latent(net.backbone, images[idx], net.head).z;
        const auto loss = ad::cross_entropy(logits, train[idx].label);
        tape.backward(loss);
        loss_sum += loss.item();
        correct += argmax_row(logits) == train[idx].label;
        std::size_t k = 0;
        net.visit_params([&](const std::string&, Tensor<float>& p) {
          if (acc.size() <= k) acc.emplace_back(p.numel(), 0.0);
          if (p.has_grad()) {
            const auto g = p.grad();
            for (std::size_t j = 0; j < g.size(); ++j) acc[k][j] += g[j];
          }
          ++k;
        });
      }
      std::size_t k = 0;
      const double inv = 1.0 / static_cast<double>(batch.size());
      net.visit_params([&](const std::string&, Tensor<float>& p) {
        auto g = p.mutable_grad();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] = static_cast<float>(acc[k][j] * inv);
        ++k;
      });
      adam.step(optim::cosine_lr(step++, total, cfg.train.lr_max, cfg.train.lr_min), cfg.train.weight_decay);
    }
    if (progress) {
      *progress << "backbone pretrain epoch " << e + 1 << "/" << epochs << " loss "
                << loss_sum / static_cast<double>(train.size()) << " acc "
                << static_cast<double>(correct) / static_cast<double>(train.size()) << "\n";
    }
  }
  ckpt::Checkpoint c;
  net.backbone.visit("backbone", [&](const std::string& name, Tensor<float>& p) {
    c.tensors.push_back(ckpt::TensorRecord::from_tensor(name, p));
  });
  return c;
}

TrainResult train(FloatModel& model, const RunConfig& cfg, const RunData& data, const TrainOptions& opt) {
  const auto& tc = cfg.train;
  if (tc.batch == 0) throw ConfigError("train.batch must be positive");
  if (data.train.empty()) throw DatasetError("no training samples");
  if (!opt.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(opt.out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + opt.out_dir.string() + ": " + ec.message());
  }

  const auto images = to_tensors(data.train);
  const std::size_t n = data.train.size();
  const std::size_t per_epoch = (n + tc.batch - 1) / tc.batch;
  const std::uint64_t total_steps = tc.epochs * per_epoch;
  const auto& mc = model.config();

  optim::Adam<float> adam;
  if (tc.lookahead) adam.enable_lookahead(tc.lookahead_k, tc.lookahead_alpha);
  adam.attach(model);

  // Trainable flags in visit order, shared by the master model and replicas.
  std::vector<bool> trainable;
  model.visit_params([&](const std::string&, Tensor<float>& p) { trainable.push_back(p.requires_grad()); });

  const std::size_t workers = std::max<std::size_t>(1, std::min(tc.workers, tc.batch));
  std::vector<FloatModel> replicas;
  for (std::size_t w = 0; w < workers; ++w) replicas.push_back(model.replica());

  TrainResult result;
  std::uint64_t step = 0;
  std::vector<SampleResult> results(tc.batch);

  const auto run_sample = [&](FloatModel& rep, std::size_t idx, double rho, std::uint64_t seed, SampleResult& out) {
    rep.visit_params([](const std::string&, Tensor<float>& p) { p.clear_grad(); });
    ad::GradTape<float> tape;
    Rng rng(seed);
    const auto fwd = rep.forward_train(images[idx], rho, rng);
    const auto terms = losses::combined_loss(fwd.logits, data.train[idx].label, fwd.reconstruction, images[idx],
                                             mc.toggles.aux_loss);
    tape.backward(terms.total);
    out.total = terms.total.item();
    out.ce = terms.ce.item();
    out.aux = terms.aux.item();
    out.predicted = argmax_row(fwd.logits);
    out.grads.clear();
    std::size_t k = 0;
    rep.visit_params([&](const std::string&, Tensor<float>& p) {
      if (trainable[k++]) {
        if (p.has_grad()) {
          const auto g = p.grad();
          out.grads.emplace_back(g.begin(), g.end());
        } else {
          out.grads.emplace_back(p.numel(), 0.f);
        }
      }
    });
  };

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch + 1;
    std::size_t correct = 0;
    for (const auto& batch : data::batch_order(n, tc.batch, tc.seed, epoch)) {
      StepLog sl;
      sl.step = step;
      sl.epoch = epoch + 1;
      sl.samples = batch;
      sl.rho = 0;
      if (mc.toggles.masking) {
        Rng ratio_rng(derive_seed(tc.seed, {0x5A7, step}));
        sl.rho = masking::sample_ratio(ratio_rng, mc.ratio_lo, mc.ratio_hi);
      }
      for (std::size_t i = 0; i < batch.size(); ++i) sl.seeds.push_back(derive_seed(tc.seed, {step, i}));

      if (workers == 1) {
        for (std::size_t i = 0; i < batch.size(); ++i) run_sample(replicas[0], batch[i], sl.rho, sl.seeds[i], results[i]);
      } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w) {
          pool.emplace_back([&, w] {
            try {
              for (std::size_t i = w; i < batch.size(); i += workers)
                run_sample(replicas[w], batch[i], sl.rho, sl.seeds[i], results[i]);
            } catch (...) {
              errors[w] = std::current_exception();
            }
          });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);
      }

      // Reduce in batch order so the sum does not depend on the worker count.
      const double inv = 1.0 / static_cast<double>(batch.size());
      std::size_t k = 0, t = 0;
      model.visit_params([&](const std::string&, Tensor<float>& p) {
        if (!trainable[k++]) return;
        auto g = p.mutable_grad();
        std::vector<double> acc(g.size(), 0.0);
        for (std::size_t i = 0; i < batch.size(); ++i) {
          const auto& src = results[i].grads[t];
          for (std::size_t j = 0; j < g.size(); ++j) acc[j] += src[j];
        }
        for (std::size_t j = 0; j < g.size(); ++j) g[j] = static_cast<float>(acc[j] * inv);
        ++t;
      });
      double batch_loss = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& r = results[i];
        batch_loss += r.total;
        log.loss_total += r.total;
        log.loss_ce += r.ce;
        log.loss_aux += r.aux;
        correct += r.predicted == data.train[batch[i]].label;
      }
      sl.lr = optim::cosine_lr(step, total_steps, tc.lr_max, tc.lr_min);
      sl.loss = batch_loss * inv;
      adam.step(sl.lr, tc.weight_decay);
      log.lr = sl.lr;
      ++step;
      result.steps.push_back(std::move(sl));
    }
    const auto nd = static_cast<double>(n);
    log.step = step;
    log.loss_total /= nd;
    log.loss_ce /= nd;
    log.loss_aux /= nd;
    log.train_acc = static_cast<double>(correct) / nd;

    const bool last = epoch + 1 == tc.epochs;
    const bool do_eval = !data.eval.empty() && (last || (tc.eval_every > 0 && (epoch + 1) % tc.eval_every == 0));
    if (do_eval) {
      const auto cm = evaluate(model, data.eval);
      const double acc = metrics::accuracy(cm);
      log.eval_acc = acc;
      if (acc > result.best_accuracy) {
        result.best_accuracy = acc;
        result.best_epoch = epoch + 1;
        result.best_metrics = metrics::to_json(cm);
        if (!opt.out_dir.empty()) {
          save_checkpoint(model, cfg, {{"epoch", epoch + 1}, {"step", step}, {"eval_accuracy", acc}, {"eval_split", data.eval_split}},
                          opt.out_dir / "best.ckpt");
        }
      }
    }
    if (opt.progress) {
      auto& os = *opt.progress;
      os << "epoch " << log.epoch << "/" << tc.epochs << " step " << log.step << " lr " << log.lr << " loss "
         << log.loss_total << " (ce " << log.loss_ce << ", aux " << log.loss_aux << ") train_acc " << log.train_acc;
      if (log.eval_acc) os << " eval_acc[" << data.eval_split << "] " << *log.eval_acc;
      os << "\n";
    }
    result.epochs.push_back(log);
    if (opt.stop_at_accuracy && log.eval_acc && *log.eval_acc >= *opt.stop_at_accuracy) {
      result.stopped_early = !last;
      break;
    }
  }

  if (!opt.out_dir.empty()) {
    save_checkpoint(model, cfg, {{"epoch", result.epochs.size()}, {"step", step}}, opt.out_dir / "final.ckpt");
    write_epoch_csv(result.epochs, opt.out_dir / "epochs.csv");
    write_steps_csv(result.steps, opt.out_dir / "steps.csv");
    std::ofstream mf(opt.out_dir / "metrics.json", std::ios::trunc);
    mf << result.best_metrics.dump(2) << "\n";
    if (!mf) throw IoError("cannot write metrics.json");
  }
  return result;
}

ckpt::Checkpoint make_checkpoint(FloatModel& m, const RunConfig& cfg, const nlohmann::json& state) {
  nlohmann::json meta = {{"run", to_json(cfg)}, {"state", state}};
  return ckpt::snapshot<float>(m, meta.dump());
}

void save_checkpoint(FloatModel& m, const RunConfig& cfg, const nlohmann::json& state, const fs::path& path) {
  ckpt::write_file(make_checkpoint(m, cfg, state), path);
}

void load_into(FloatModel& m, const ckpt::Checkpoint& c) { ckpt::load_parameters<float>(c, m); }

LoadedModel load_checkpoint(const fs::path& path) {
  const auto c = ckpt::read_file(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(c.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint configuration is not valid JSON: " + std::string(e.what()));
  }
  if (!meta.is_object() || !meta.contains("run")) throw FormatError("checkpoint configuration lacks a run section");
  auto cfg = run_config_from_json(meta["run"]);
  // Weights come from the checkpoint, not from the original pretrained file.
  cfg.model.backbone.pretrained_weights.reset();
  LoadedModel out{cfg, meta.value("state", nlohmann::json::object()), FloatModel(cfg.model, cfg.train.seed)};
  load_into(out.model, c);
  return out;
}

void write_epoch_csv(const std::vector<EpochLog>& epochs, const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "epoch,step,lr,loss_total,loss_ce,loss_aux,train_acc\n" << std::setprecision(9);
  for (const auto& e : epochs) {
    f << e.epoch << "," << e.step << "," << e.lr << "," << e.loss_total << "," << e.loss_ce << "," << e.loss_aux << ","
      << e.train_acc << "\n";
  }
}

void write_steps_csv(const std::vector<StepLog>& steps, const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "step,epoch,lr,rho,loss,samples,seeds\n" << std::setprecision(17);
  for (const auto& s : steps) {
    f << s.step << "," << s.epoch << "," << s.lr << "," << s.rho << "," << s.loss << ",";
    for (std::size_t i = 0; i < s.samples.size(); ++i) f << (i ? " " : "") << s.samples[i];
    f << ",";
    for (std::size_t i = 0; i < s.seeds.size(); ++i) f << (i ? " " : "") << s.seeds[i];
    f << "\n";
  }
}

}  // namespace mltr::app
