#include "mltr/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace mltr {
namespace {

using nlohmann::json;

// Reads fields from a JSON object and rejects any key nobody asked for.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename U>
  void get(const char* key, U& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<U, std::size_t> || std::is_same_v<U, std::uint64_t>) {
        if (!it->is_number_integer() || (!it->is_number_unsigned() && it->template get<std::int64_t>() < 0)) {
          throw ConfigError("expected a non-negative integer");
        }
        out = it->template get<U>();
      } else if constexpr (std::is_same_v<U, double>) {
        if (!it->is_number()) throw ConfigError("expected a number");
        out = it->template get<double>();
      } else if constexpr (std::is_same_v<U, bool>) {
        if (!it->is_boolean()) throw ConfigError("expected a boolean");
        out = it->template get<bool>();
      } else {
        if (!it->is_string()) throw ConfigError("expected a string");
        out = it->template get<std::string>();
      }
    } catch (const ConfigError& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key \"" + it.key() + "\"");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(dim)));
}

void ModelConfig::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw ConfigError("image dimensions must be > 0");
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ConfigError("patch " + std::to_string(patch) + " must divide image " + std::to_string(height) + "x" +
                      std::to_string(width));
  }
  if (heads == 0 || dim == 0 || dim % heads != 0) {
    throw ConfigError("dim " + std::to_string(dim) + " must be divisible by heads " + std::to_string(heads));
  }
  if (enc_depth < 1 || dec_depth < 1) throw ConfigError("encoder and decoder depth must be >= 1");
  if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (!(mlp_ratio > 0) || mlp_hidden() == 0) throw ConfigError("mlp_ratio must give a positive hidden width");
  if (!(ratio_lo >= 0 && ratio_lo <= ratio_hi && ratio_hi < 1)) {
    throw ConfigError("masking ratio range must satisfy 0 <= lo <= hi < 1");
  }
  if (!(ln_eps > 0)) throw ConfigError("ln_eps must be > 0");
  backbone.validate();
  if (backbone.input_channels != channels) {
    throw ConfigError("backbone input_channels " + std::to_string(backbone.input_channels) +
                      " differs from image channels " + std::to_string(channels));
  }
}

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.backbone.stages = {{8, 3, 2}, {16, 3, 2}, {32, 3, 2}};
  return c;
}

ModelConfig ModelConfig::small() {
  ModelConfig c = micro();
  c.dim = 128;
  c.heads = 8;
  c.enc_depth = 6;
  c.dec_depth = 3;
  c.backbone.stages = {{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
  return c;
}

void RunConfig::validate() const {
  model.validate();
  if (train.batch == 0) throw ConfigError("train.batch must be >= 1");
  if (train.workers == 0) throw ConfigError("train.workers must be >= 1");
  if (train.eval_every == 0) throw ConfigError("train.eval_every must be >= 1");
  if (!(train.lr_max >= train.lr_min && train.lr_min >= 0)) throw ConfigError("need lr_max >= lr_min >= 0");
  if (!(train.weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (train.lookahead && train.lookahead_k == 0) throw ConfigError("lookahead_k must be >= 1");
  if (!(train.lookahead_alpha >= 0 && train.lookahead_alpha <= 1)) throw ConfigError("lookahead_alpha must be in [0, 1]");
  if (data.augment_multiplier == 0) throw ConfigError("data.augment_multiplier must be >= 1");
  if (!(data.split_ratio > 0 && data.split_ratio <= 1)) throw ConfigError("data.split_ratio must be in (0, 1]");
  if (data.eval_split != "test" && data.eval_split != "train") throw ConfigError("data.eval_split must be \"test\" or \"train\"");
  if (data.synth && data.synth->n_per_class < 2) throw ConfigError("data.synth.n_per_class must be >= 2");
  if (data.preprocess.clahe_tiles == 0) throw ConfigError("data.preprocess.clahe_tiles must be >= 1");
  if (!(data.preprocess.gamma > 0)) throw ConfigError("data.preprocess.gamma must be > 0");
}

nlohmann::json to_json(const ModelConfig& c) {
  json stages = json::array();
  for (const auto& s : c.backbone.stages) {
    stages.push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride}});
  }
  json backbone = {{"stages", stages},
                   {"input_channels", c.backbone.input_channels},
                   {"freeze", c.backbone.freeze},
                   {"activation", c.backbone.activation == latent::Activation::kGelu ? "gelu" : "identity"},
                   {"pretrained_weights", c.backbone.pretrained_weights ? json(*c.backbone.pretrained_weights) : json()}};
  json toggles = {{"latent_embedder", c.toggles.latent_embedder}, {"aux_loss", c.toggles.aux_loss},
                  {"adaln_final_linear", c.toggles.adaln_final_linear}, {"relpos_bias", c.toggles.relpos_bias},
                  {"masked_shortcut", c.toggles.masked_shortcut}, {"masking", c.toggles.masking}};
  return {{"height", c.height},       {"width", c.width},         {"channels", c.channels},
          {"patch", c.patch},         {"dim", c.dim},             {"heads", c.heads},
          {"enc_depth", c.enc_depth}, {"dec_depth", c.dec_depth}, {"mlp_ratio", c.mlp_ratio},
          {"n_classes", c.n_classes}, {"ratio_lo", c.ratio_lo},   {"ratio_hi", c.ratio_hi},
          {"ln_eps", c.ln_eps},       {"toggles", toggles},       {"backbone", backbone}};
}

nlohmann::json to_json(const RunConfig& c) {
  json train = {{"epochs", c.train.epochs},
                {"batch", c.train.batch},
                {"lr_max", c.train.lr_max},
                {"lr_min", c.train.lr_min},
                {"weight_decay", c.train.weight_decay},
                {"lookahead", c.train.lookahead},
                {"lookahead_k", c.train.lookahead_k},
                {"lookahead_alpha", c.train.lookahead_alpha},
                {"seed", c.train.seed},
                {"workers", c.train.workers},
                {"eval_every", c.train.eval_every},
                {"backbone_pretrain_epochs", c.train.backbone_pretrain_epochs}};
  json data = {{"root", c.data.root},
               {"augment_multiplier", c.data.augment_multiplier},
               {"split_ratio", c.data.split_ratio},
               {"split_seed", c.data.split_seed},
               {"eval_split", c.data.eval_split},
               {"preprocess",
                {{"enabled", c.data.preprocess.enabled},
                 {"gamma", c.data.preprocess.gamma},
                 {"clahe_clip", c.data.preprocess.clahe_clip},
                 {"clahe_tiles", c.data.preprocess.clahe_tiles}}}};
  data["synth"] = c.data.synth ? json{{"n_per_class", c.data.synth->n_per_class}, {"seed", c.data.synth->seed}} : json();
  return {{"model", to_json(c.model)}, {"train", train}, {"data", data}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  StrictObject o(j, "model");
  std::string preset = "micro";
  o.get("preset", preset);
  ModelConfig c;
  if (preset == "micro") {
    c = ModelConfig::micro();
  } else if (preset == "small") {
    c = ModelConfig::small();
  } else {
    throw ConfigError("model.preset: unknown preset \"" + preset + "\"");
  }
  o.get("height", c.height);
  o.get("width", c.width);
  o.get("channels", c.channels);
  o.get("patch", c.patch);
  o.get("dim", c.dim);
  o.get("heads", c.heads);
  o.get("enc_depth", c.enc_depth);
  o.get("dec_depth", c.dec_depth);
  o.get("mlp_ratio", c.mlp_ratio);
  o.get("n_classes", c.n_classes);
  o.get("ratio_lo", c.ratio_lo);
  o.get("ratio_hi", c.ratio_hi);
  o.get("ln_eps", c.ln_eps);
  if (const json* t = o.child("toggles")) {
    StrictObject to(*t, "model.toggles");
    to.get("latent_embedder", c.toggles.latent_embedder);
    to.get("aux_loss", c.toggles.aux_loss);
    to.get("adaln_final_linear", c.toggles.adaln_final_linear);
    to.get("relpos_bias", c.toggles.relpos_bias);
    to.get("masked_shortcut", c.toggles.masked_shortcut);
    to.get("masking", c.toggles.masking);
    to.finish();
  }
  if (const json* b = o.child("backbone")) {
    StrictObject bo(*b, "model.backbone");
    bo.get("input_channels", c.backbone.input_channels);
    bo.get("freeze", c.backbone.freeze);
    std::string act = c.backbone.activation == latent::Activation::kGelu ? "gelu" : "identity";
    bo.get("activation", act);
    if (act == "gelu") {
      c.backbone.activation = latent::Activation::kGelu;
    } else if (act == "identity") {
      c.backbone.activation = latent::Activation::kIdentity;
    } else {
      throw ConfigError("model.backbone.activation: expected \"gelu\" or \"identity\"");
    }
    if (const json* pw = bo.child("pretrained_weights")) {
      if (!pw->is_string()) throw ConfigError("model.backbone.pretrained_weights: expected a string");
      c.backbone.pretrained_weights = pw->get<std::string>();
    }
    if (const json* st = bo.child("stages")) {
      if (!st->is_array()) throw ConfigError("model.backbone.stages: expected an array");
      c.backbone.stages.clear();
      for (std::size_t i = 0; i < st->size(); ++i) {
        StrictObject so((*st)[i], "model.backbone.stages[" + std::to_string(i) + "]");
        latent::ConvStage s;
        so.get("out_channels", s.out_channels);
        so.get("kernel", s.kernel);
        so.get("stride", s.stride);
        so.finish();
        c.backbone.stages.push_back(s);
      }
    }
    bo.finish();
  }
  o.finish();
  return c;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  StrictObject o(j, "config");
  RunConfig c;
  if (const json* m = o.child("model")) c.model = model_config_from_json(*m);
  else c.model = ModelConfig::micro();
  if (const json* t = o.child("train")) {
    StrictObject to(*t, "train");
    to.get("epochs", c.train.epochs);
    to.get("batch", c.train.batch);
    to.get("lr_max", c.train.lr_max);
    to.get("lr_min", c.train.lr_min);
    to.get("weight_decay", c.train.weight_decay);
    to.get("lookahead", c.train.lookahead);
    to.get("lookahead_k", c.train.lookahead_k);
    to.get("lookahead_alpha", c.train.lookahead_alpha);
    to.get("seed", c.train.seed);
    to.get("workers", c.train.workers);
    to.get("eval_every", c.train.eval_every);
    to.get("backbone_pretrain_epochs", c.train.backbone_pretrain_epochs);
    to.finish();
  }
  if (const json* d = o.child("data")) {
    StrictObject dobj(*d, "data");
    dobj.get("root", c.data.root);
    dobj.get("augment_multiplier", c.data.augment_multiplier);
    dobj.get("split_ratio", c.data.split_ratio);
    dobj.get("split_seed", c.data.split_seed);
    dobj.get("eval_split", c.data.eval_split);
    if (const json* s = dobj.child("synth")) {
      StrictObject so(*s, "data.synth");
      SynthSpec spec;
      so.get("n_per_class", spec.n_per_class);
      so.get("seed", spec.seed);
      so.finish();
      c.data.synth = spec;
    }
    if (const json* p = dobj.child("preprocess")) {
      StrictObject po(*p, "data.preprocess");
      po.get("enabled", c.data.preprocess.enabled);
      po.get("gamma", c.data.preprocess.gamma);
      po.get("clahe_clip", c.data.preprocess.clahe_clip);
      po.get("clahe_tiles", c.data.preprocess.clahe_tiles);
      po.finish();
    }
    dobj.finish();
  }
  o.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string dump(const RunConfig& c) { return to_json(c).dump(2); }

}  // namespace mltr
