#include "mltr/model.hpp"

#include <cmath>
#include <numeric>

namespace mltr::model {

using ad::Tensor;

template <typename T>
void LTBlockParams<T>::visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
  ada.visit(prefix + ".ada", f);
  attn.q.visit(prefix + ".attn.q", f);
  attn.k.visit(prefix + ".attn.k", f);
  attn.v.visit(prefix + ".attn.v", f);
  attn.o.visit(prefix + ".attn.o", f);
  f(prefix + ".attn.relpos_table", attn.relpos_table);
  f(prefix + ".attn.relpos_cls", attn.relpos_cls);
  fc1.visit(prefix + ".mlp.fc1", f);
  fc2.visit(prefix + ".mlp.fc2", f);
}

namespace {

template <typename T>
LTBlockParams<T> make_block(const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.dim;
  LTBlockParams<T> b;
  b.ada = nn::Linear<T>::make(d, 6 * d, rng, nn::Init::kZero);
  b.attn.q = nn::Linear<T>::make(d, d, rng);
  b.attn.k = nn::Linear<T>::make(d, d, rng);
  b.attn.v = nn::Linear<T>::make(d, d, rng);
  b.attn.o = nn::Linear<T>::make(d, d, rng);
  const std::size_t span = 2 * cfg.max_len() - 1;
  b.attn.relpos_table = Tensor<T>::parameter({cfg.heads, span}, nn::uniform_values<T>(cfg.heads * span, 0.02, rng));
  b.attn.relpos_cls = Tensor<T>::parameter({cfg.heads}, nn::uniform_values<T>(cfg.heads, 0.02, rng));
  b.fc1 = nn::Linear<T>::make(d, cfg.mlp_hidden(), rng);
  b.fc2 = nn::Linear<T>::make(cfg.mlp_hidden(), d, rng);
  return b;
}

template <typename T>
Tensor<T> small_param(Shape shape, Rng& rng) {
  const std::size_t n = numel(shape);
  return Tensor<T>::parameter(std::move(shape), nn::uniform_values<T>(n, 0.02, rng));
}

std::vector<std::size_t> iota_positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

}  // namespace

template <typename T>
Tensor<T> relpos_msa(const Tensor<T>& z, const AttentionParams<T>& p, std::size_t heads, std::size_t max_len,
                     std::span<const std::size_t> positions, bool use_bias, std::vector<Tensor<T>>* maps) {
  if (z.rank() != 2) throw ShapeError("relpos_msa expects [L x D], got " + to_string(z.shape()));
  const std::size_t len = z.dim(0), d = z.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("relpos_msa: dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (len > max_len) {
    throw CapacityError("relpos_msa: sequence length " + std::to_string(len) + " exceeds capacity " +
                        std::to_string(max_len));
  }
  if (positions.size() != len) {
    throw ShapeError("relpos_msa: " + std::to_string(positions.size()) + " position ids for " + std::to_string(len) +
                     " rows");
  }
  for (auto pos : positions) {
    if (pos >= max_len) throw CapacityError("relpos_msa: position id " + std::to_string(pos) + " exceeds capacity");
  }
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Tensor<T> q = p.q(z), k = p.k(z), v = p.v(z);

  Tensor<T> bias_src;
  const std::size_t span = 2 * max_len - 1;
  if (use_bias) {
    if (p.relpos_table.shape() != Shape{heads, span} || p.relpos_cls.numel() != heads) {
      throw ShapeError("relpos_msa: bias table " + to_string(p.relpos_table.shape()) + " does not match " +
                       std::to_string(heads) + " heads x " + std::to_string(span) + " offsets");
    }
    bias_src = ad::concat_cols<T>({ad::reshape(p.relpos_table, {1, heads * span}), ad::reshape(p.relpos_cls, {1, heads})});
  }

  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
    const auto kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
    const auto vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
    auto scores = ad::scale(ad::matmul_nt(qh, kh), inv_scale);
    if (use_bias) {
      std::vector<std::size_t> idx(len * len);
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t pi = positions[i], pj = positions[j];
          idx[i * len + j] = (pi == 0 || pj == 0) ? heads * span + h : h * span + (pi + max_len - 1 - pj);
        }
      }
      scores = ad::add(scores, ad::gather(bias_src, std::move(idx), {len, len}));
    }
    const auto attn = ad::softmax(scores, 1);
    if (maps) maps->push_back(attn.detach());
    outs.push_back(ad::matmul(attn, vh));
  }
  return p.o(ad::concat_cols(outs));
}

template <typename T>
Tensor<T> lt_block(const Tensor<T>& z, const Tensor<T>& z_le, const LTBlockParams<T>& p, const BlockOptions& opt,
                   std::span<const std::size_t> positions, std::vector<Tensor<T>>* maps) {
  const std::size_t d = z.dim(1);
  if (z_le.shape() != Shape{1, d}) {
    throw ShapeError("lt_block: latent token " + to_string(z_le.shape()) + " for width " + std::to_string(d));
  }
  const auto mod = p.ada(z_le);
  auto chunk = [&](std::size_t i) { return ad::slice_cols(mod, i * d, (i + 1) * d); };
  const auto gamma1 = chunk(0), beta1 = chunk(1), alpha1 = chunk(2);
  const auto gamma2 = chunk(3), beta2 = chunk(4), alpha2 = chunk(5);
  const T eps = static_cast<T>(opt.ln_eps);

  const auto h1 = ad::add(ad::mul(ad::layer_norm(z, eps), ad::add_scalar(gamma1, T(1))), beta1);
  const auto attn = relpos_msa(h1, p.attn, opt.heads, opt.max_len, positions, opt.relpos_bias, maps);
  const auto mid = ad::add(ad::mul(attn, alpha1), z);

  const auto h2 = ad::add(ad::mul(ad::layer_norm(mid, eps), ad::add_scalar(gamma2, T(1))), beta2);
  const auto mlp = p.fc2(ad::gelu(p.fc1(h2)));
  return ad::add(ad::mul(mlp, alpha2), mid);
}

template <typename T>
Tensor<T> masked_shortcut(const Tensor<T>& dec_in, const Tensor<T>& dec_out, std::span<const std::uint8_t> mask) {
  if (dec_in.shape() != dec_out.shape()) {
    throw ShapeError("masked_shortcut: decoder input " + to_string(dec_in.shape()) + " vs output " +
                     to_string(dec_out.shape()));
  }
  if (dec_in.rank() != 2 || mask.size() + 1 != dec_in.dim(0)) {
    throw ShapeError("masked_shortcut: mask of length " + std::to_string(mask.size()) + " for sequence " +
                     to_string(dec_in.shape()));
  }
  std::vector<std::uint8_t> keep(mask.size() + 1, 0);
  std::copy(mask.begin(), mask.end(), keep.begin() + 1);
  return ad::select_rows<T>(keep, dec_in, dec_out);
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  block_opts_ = {cfg_.heads, cfg_.max_len(), cfg_.toggles.relpos_bias, cfg_.ln_eps};
  backbone = latent::build_backbone<T>(cfg_.backbone, derive_seed(seed, {1}));
  Rng rng(derive_seed(seed, {2}));
  const std::size_t d = cfg_.dim, n = cfg_.num_patches();
  latent_embed = nn::Linear<T>::make(cfg_.backbone.out_channels(), d, rng);
  patch_embed = nn::Linear<T>::make(cfg_.patch_dim(), d, rng);
  cls_token = small_param<T>({1, d}, rng);
  mask_token = small_param<T>({1, d}, rng);
  pos_enc = small_param<T>({n + 1, d}, rng);
  pos_dec = small_param<T>({n + 1, d}, rng);
  for (std::size_t i = 0; i < cfg_.enc_depth; ++i) encoder.push_back(make_block<T>(cfg_, rng));
  for (std::size_t i = 0; i < cfg_.dec_depth; ++i) decoder.push_back(make_block<T>(cfg_, rng));
  final_ada = nn::Linear<T>::make(d, 2 * d, rng, nn::Init::kZero);
  recon = nn::Linear<T>::make(d, cfg_.patch_dim(), rng);
  head = nn::Linear<T>::make(d, cfg_.n_classes, rng);
}

template <typename T>
void Model<T>::visit_params(const nn::ParamVisitor<T>& f) {
  backbone.visit("backbone", f);
  latent_embed.visit("latent.embed", f);
  patch_embed.visit("patch_embed", f);
  f("cls_token", cls_token);
  f("mask_token", mask_token);
  f("pos_embed.enc", pos_enc);
  f("pos_embed.dec", pos_dec);
  for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].visit("encoder." + std::to_string(i), f);
  for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].visit("decoder." + std::to_string(i), f);
  final_ada.visit("final.ada", f);
  recon.visit("recon", f);
  head.visit("head", f);
}

template <typename T>
std::size_t Model<T>::parameter_count() {
  std::size_t n = 0;
  visit_params([&](const std::string&, Tensor<T>& p) { n += p.numel(); });
  return n;
}

template <typename T>
Model<T> Model<T>::replica() const {
  Model copy = *this;
  copy.visit_params([](const std::string&, Tensor<T>& p) { p = p.alias(); });
  return copy;
}

template <typename T>
latent::LatentTokens<T> Model<T>::latent(const Tensor<T>& x) const {
  if (!cfg_.toggles.latent_embedder) return {Tensor<T>::zeros({1, cfg_.dim})};
  return latent::embed_latent(backbone, x, latent_embed);
}

template <typename T>
Tensor<T> Model<T>::embed_patches(const Tensor<T>& x) const {
  if (x.shape() != Shape{cfg_.channels, cfg_.height, cfg_.width}) {
    throw ShapeError("model expects image [" + std::to_string(cfg_.channels) + "x" + std::to_string(cfg_.height) + "x" +
                     std::to_string(cfg_.width) + "], got " + to_string(x.shape()));
  }
  return patch_embed(masking::patchify(x, cfg_.patch).tokens);
}

template <typename T>
SequenceState<T> Model<T>::encode(const Tensor<T>& patch_tokens, const Tensor<T>& z_le, Mode mode,
                                  const masking::MaskPlan* plan, AttentionTrace<T>* trace) const {
  const std::size_t n = cfg_.num_patches();
  const bool expect_plan = mode == Mode::kTrain && cfg_.toggles.masking;
  if (expect_plan != (plan != nullptr)) {
    throw ContractError(plan ? "encode: mask plan given outside masked training"
                             : "encode: masked training requires a mask plan");
  }
  if (patch_tokens.shape() != Shape{n, cfg_.dim}) {
    throw ShapeError("encode: expected " + std::to_string(n) + " patch tokens of width " + std::to_string(cfg_.dim) +
                     ", got " + to_string(patch_tokens.shape()));
  }
  auto tokens = ad::add(patch_tokens, ad::slice_rows(pos_enc, 1, n + 1));
  std::vector<std::size_t> positions;
  if (plan) {
    tokens = masking::gather_kept(tokens, *plan);
    positions.push_back(0);
    for (std::size_t j = 0; j < plan->n_kept; ++j) positions.push_back(plan->perm[j] + 1);
  } else {
    positions = iota_positions(n + 1);
  }
  const auto cls = ad::add(cls_token, ad::slice_rows(pos_enc, 0, 1));
  auto z = ad::concat_rows<T>({cls, tokens});
  for (const auto& blk : encoder) {
    std::vector<Tensor<T>>* maps = nullptr;
    if (trace) maps = &trace->layers.emplace_back();
    z = lt_block(z, z_le, blk, block_opts_, positions, maps);
  }
  return {z, true, plan};
}

template <typename T>
typename Model<T>::Decoded Model<T>::decode(const SequenceState<T>& enc, const Tensor<T>& z_le, Mode mode,
                                            AttentionTrace<T>* trace) const {
  const std::size_t n = cfg_.num_patches();
  if (!enc.has_cls) throw ContractError("decode: encoder output has no cls row");
  if (mode == Mode::kTrain && cfg_.toggles.masking && !enc.plan) {
    throw ContractError("decode: masked training requires a mask plan");
  }
  Tensor<T> z0;
  if (enc.plan) {
    const auto& plan = *enc.plan;
    if (enc.tokens.dim(0) != plan.n_kept + 1) {
      throw ShapeError("decode: encoder output " + to_string(enc.tokens.shape()) + " for " +
                       std::to_string(plan.n_kept) + " kept tokens");
    }
    const auto kept = ad::slice_rows(enc.tokens, 1, plan.n_kept + 1);
    std::vector<Tensor<T>> parts{kept};
    if (plan.n > plan.n_kept) parts.push_back(ad::broadcast_rows(mask_token, plan.n - plan.n_kept));
    const auto restored = masking::restore_order(ad::concat_rows(parts), plan);
    z0 = ad::concat_rows<T>({ad::slice_rows(enc.tokens, 0, 1), restored});
  } else {
    if (enc.tokens.dim(0) != n + 1) {
      throw ShapeError("decode: unmasked encoder output must have " + std::to_string(n + 1) + " rows, got " +
                       to_string(enc.tokens.shape()));
    }
    z0 = enc.tokens;
  }
  const auto positions = iota_positions(n + 1);
  auto z = ad::add(z0, pos_dec);
  for (const auto& blk : decoder) {
    std::vector<Tensor<T>>* maps = nullptr;
    if (trace) maps = &trace->layers.emplace_back();
    z = lt_block(z, z_le, blk, block_opts_, positions, maps);
  }
  return {{z0, true, enc.plan}, {z, true, enc.plan}};
}

template <typename T>
Tensor<T> Model<T>::class_head(const SequenceState<T>& z) const {
  if (!z.has_cls) throw ContractError("class_head: sequence has no cls token");
  return head(ad::slice_rows(z.tokens, 0, 1));
}

template <typename T>
Tensor<T> Model<T>::reconstruction_head(const SequenceState<T>& z, const Tensor<T>& z_le) const {
  const std::size_t n = cfg_.num_patches();
  if (z.tokens.dim(0) != n + 1) {
    throw ShapeError("reconstruction_head: expected " + std::to_string(n + 1) + " rows, got " +
                     to_string(z.tokens.shape()));
  }
  auto rows = ad::slice_rows(z.tokens, 1, n + 1);
  if (cfg_.toggles.adaln_final_linear) {
    const std::size_t d = cfg_.dim;
    const auto mod = final_ada(z_le);
    const auto gamma = ad::slice_cols(mod, 0, d);
    const auto beta = ad::slice_cols(mod, d, 2 * d);
    rows = ad::add(ad::mul(ad::layer_norm(rows, static_cast<T>(cfg_.ln_eps)), ad::add_scalar(gamma, T(1))), beta);
  }
  return masking::unpatchify(recon(rows), cfg_.patch, cfg_.height, cfg_.width, cfg_.channels);
}

template <typename T>
SequenceState<T> Model<T>::finish(const Decoded& d, std::span<const std::uint8_t> mask) const {
  if (!cfg_.toggles.masked_shortcut) return d.output;
  return {masked_shortcut(d.input.tokens, d.output.tokens, mask), true, d.output.plan};
}

template <typename T>
TrainOutput<T> Model<T>::forward_train(const Tensor<T>& x, Rng& rng) const {
  const double rho = cfg_.toggles.masking ? masking::sample_ratio(rng, cfg_.ratio_lo, cfg_.ratio_hi) : 0.0;
  return forward_train(x, rho, rng);
}

template <typename T>
TrainOutput<T> Model<T>::forward_train(const Tensor<T>& x, double rho, Rng& rng) const {
  TrainOutput<T> out;
  const auto z_le = latent(x).z;
  const auto tokens = embed_patches(x);
  if (cfg_.toggles.masking) out.plan = masking::make_mask_plan(cfg_.num_patches(), rho, rng);
  const masking::MaskPlan* plan = out.plan ? &*out.plan : nullptr;
  const auto enc = encode(tokens, z_le, Mode::kTrain, plan);
  const auto dec = decode(enc, z_le, Mode::kTrain);
  const std::vector<std::uint8_t> ones(cfg_.num_patches(), 1);
  const auto z = finish(dec, plan ? std::span<const std::uint8_t>(plan->mask) : std::span<const std::uint8_t>(ones));
  out.logits = class_head(z);
  out.reconstruction = reconstruction_head(z, z_le);
  return out;
}

template <typename T>
Tensor<T> Model<T>::forward_infer(const Tensor<T>& x, AttentionTrace<T>* trace) const {
  const auto z_le = latent(x).z;
  const auto tokens = embed_patches(x);
  const auto enc = encode(tokens, z_le, Mode::kInfer, nullptr, trace);
  const auto dec = decode(enc, z_le, Mode::kInfer, trace);
  const std::vector<std::uint8_t> ones(cfg_.num_patches(), 1);
  return class_head(finish(dec, ones));
}

template <typename T>
Tensor<T> Model<T>::forward_infer_batch(std::span<const Tensor<T>> images) const {
  std::vector<Tensor<T>> rows;
  rows.reserve(images.size());
  for (const auto& x : images) rows.push_back(forward_infer(x));
  if (rows.empty()) return Tensor<T>::zeros({0, cfg_.n_classes});
  return ad::concat_rows(rows);
}

template struct LTBlockParams<float>;
template struct LTBlockParams<double>;
template class Model<float>;
template class Model<double>;

#define MLTR_INSTANTIATE_MODEL_FNS(T)                                                                        \
  template Tensor<T> relpos_msa(const Tensor<T>&, const AttentionParams<T>&, std::size_t, std::size_t,        \
                                std::span<const std::size_t>, bool, std::vector<Tensor<T>>*);                 \
  template Tensor<T> lt_block(const Tensor<T>&, const Tensor<T>&, const LTBlockParams<T>&, const BlockOptions&, \
                              std::span<const std::size_t>, std::vector<Tensor<T>>*);                         \
  template Tensor<T> masked_shortcut(const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>);

MLTR_INSTANTIATE_MODEL_FNS(float)
MLTR_INSTANTIATE_MODEL_FNS(double)

}  // namespace mltr::model
