#include <gtest/gtest.h>

#include <cmath>

#include "mltr/error.hpp"
#include "mltr/losses.hpp"
#include "mltr/model.hpp"
#include "mltr/optim.hpp"
#include "mltr/tape.hpp"

using namespace mltr;
using ad::Tensor;
using model::Mode;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double bound = 1.0) {
  const std::size_t n = numel(s);
  return Tensor<T>::from(std::move(s), nn::uniform_values<T>(n, bound, rng));
}

template <typename T>
void randomize_modulation(model::Model<T>& m, Rng& rng, double bound = 0.3) {
  m.visit_params([&](const std::string& name, Tensor<T>& p) {
    if (name.find(".ada.") != std::string::npos) {
      for (auto& v : p.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
  });
}

// y = x W + b evaluated with plain loops.
std::vector<double> linear_ref(const std::vector<double>& x, std::size_t rows, const nn::Linear<double>& l) {
  const std::size_t in = l.in_features(), out = l.out_features();
  std::vector<double> y(rows * out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = l.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * l.weight[i * out + o];
      y[r * out + o] = acc;
    }
  return y;
}

// Per-head attention with explicit loops; bias(i, j, h) supplies the additive term.
std::vector<double> attention_ref(const Tensor<double>& z, const model::AttentionParams<double>& p, std::size_t heads,
                                  const std::function<double(std::size_t, std::size_t, std::size_t)>& bias) {
  const std::size_t len = z.dim(0), d = z.dim(1), dh = d / heads;
  const std::vector<double> zin(z.data().begin(), z.data().end());
  const auto q = linear_ref(zin, len, p.q), k = linear_ref(zin, len, p.k), v = linear_ref(zin, len, p.v);
  std::vector<double> heads_out(len * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < len; ++i) {
      std::vector<double> s(len);
      double mx = -1e300;
      for (std::size_t j = 0; j < len; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh)) + bias(i, j, h);
        mx = std::max(mx, s[j]);
      }
      double zsum = 0;
      for (auto& e : s) zsum += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t c = 0; c < dh; ++c) heads_out[i * d + h * dh + c] += s[j] / zsum * v[j * d + h * dh + c];
    }
  }
  return linear_ref(heads_out, len, p.o);
}

model::AttentionParams<double> random_attention(std::size_t d, std::size_t heads, std::size_t max_len, Rng& rng) {
  model::AttentionParams<double> p;
  p.q = nn::Linear<double>::make(d, d, rng);
  p.k = nn::Linear<double>::make(d, d, rng);
  p.v = nn::Linear<double>::make(d, d, rng);
  p.o = nn::Linear<double>::make(d, d, rng);
  for (auto* l : {&p.q, &p.k, &p.v, &p.o})
    for (auto& b : l->bias.mutable_data()) b = rng.uniform(-0.3, 0.3);
  const std::size_t span = 2 * max_len - 1;
  p.relpos_table = Tensor<double>::parameter({heads, span}, nn::uniform_values<double>(heads * span, 0.5, rng));
  p.relpos_cls = Tensor<double>::parameter({heads}, nn::uniform_values<double>(heads, 0.5, rng));
  return p;
}

std::vector<ModelConfig> matrix() { return {ModelConfig::micro(), ModelConfig::small()}; }

}  // namespace

TEST(RelposMsa, ZeroTableEqualsPlainAttention) {
  Rng rng(1);
  auto p = random_attention(8, 2, 5, rng);
  for (auto& v : p.relpos_table.mutable_data()) v = 0;
  for (auto& v : p.relpos_cls.mutable_data()) v = 0;
  const auto z = random_tensor<double>({5, 8}, rng);
  const std::vector<std::size_t> pos = {0, 1, 2, 3, 4};
  const auto with = model::relpos_msa<double>(z, p, 2, 5, pos, true);
  const auto without = model::relpos_msa<double>(z, p, 2, 5, pos, false);
  for (std::size_t i = 0; i < with.numel(); ++i) EXPECT_EQ(with[i], without[i]);
}

TEST(RelposMsa, SingleClsRow) {
  Rng rng(2);
  const auto p = random_attention(8, 2, 4, rng);
  const auto z = random_tensor<double>({1, 8}, rng);
  const std::vector<std::size_t> pos = {0};
  std::vector<Tensor<double>> maps;
  const auto out = model::relpos_msa<double>(z, p, 2, 4, pos, true, &maps);
  for (const auto& m : maps) EXPECT_EQ(m[0], 1.0);
  const auto ref = p.o(p.v(z));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out[i], ref[i], 1e-14);
}

TEST(RelposMsa, MatchesLoopOracleWithBias) {
  Rng rng(3);
  const std::size_t max_len = 6, heads = 2, span = 2 * max_len - 1;
  const auto p = random_attention(8, heads, max_len, rng);
  const auto z = random_tensor<double>({3, 8}, rng);
  const std::vector<std::size_t> pos = {0, 4, 2};
  const auto out = model::relpos_msa<double>(z, p, heads, max_len, pos, true);
  const auto ref = attention_ref(z, p, heads, [&](std::size_t i, std::size_t j, std::size_t h) {
    if (pos[i] == 0 || pos[j] == 0) return p.relpos_cls[h];
    return p.relpos_table[h * span + (pos[i] + max_len - 1 - pos[j])];
  });
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_LE(std::abs(out[i] - ref[i]), 1e-6 * std::max(1.0, std::abs(ref[i])));
}

TEST(RelposMsa, CapacityExceeded) {
  Rng rng(4);
  const auto p = random_attention(4, 1, 3, rng);
  const std::vector<std::size_t> pos = {0, 1, 2, 3};
  EXPECT_THROW(model::relpos_msa<double>(random_tensor<double>({4, 4}, rng), p, 1, 3, pos, true), CapacityError);
}

TEST(Architecture, AdaLnZeroBlocksAreIdentityAtInit) {
  for (const auto& cfg : matrix()) {
    model::Model<float> m(cfg, 5);
    Rng rng(6);
    const std::size_t len = cfg.max_len();
    std::vector<std::size_t> pos(len);
    for (std::size_t i = 0; i < len; ++i) pos[i] = i;
    const auto z = random_tensor<float>({len, cfg.dim}, rng), z_le = random_tensor<float>({1, cfg.dim}, rng);
    for (auto* blocks : {&m.encoder, &m.decoder}) {
      for (const auto& b : *blocks) {
        const auto out = model::lt_block<float>(z, z_le, b, {cfg.heads, len, true, cfg.ln_eps}, pos);
        for (std::size_t i = 0; i < z.numel(); ++i) ASSERT_EQ(out[i], z[i]) << "dim " << cfg.dim;
      }
    }
  }
}

TEST(Architecture, ForcedUnitGateReducesToPreNormBlock) {
  Rng rng(7);
  const std::size_t d = 8, heads = 2, len = 4;
  model::LTBlockParams<double> b;
  b.ada = nn::Linear<double>::make(d, 6 * d, rng, nn::Init::kZero);
  // gamma = beta = 0, alpha = 1
  for (std::size_t c = 0; c < d; ++c) {
    b.ada.bias.mutable_data()[2 * d + c] = 1.0;
    b.ada.bias.mutable_data()[5 * d + c] = 1.0;
  }
  b.attn = random_attention(d, heads, len, rng);
  b.fc1 = nn::Linear<double>::make(d, 16, rng);
  b.fc2 = nn::Linear<double>::make(16, d, rng);
  const auto z = random_tensor<double>({len, d}, rng), z_le = random_tensor<double>({1, d}, rng);
  const std::vector<std::size_t> pos = {0, 1, 2, 3};
  const auto out = model::lt_block<double>(z, z_le, b, {heads, len, true, 1e-6}, pos);
  const auto mid = ad::add(model::relpos_msa<double>(ad::layer_norm(z, 1e-6), b.attn, heads, len, pos, true), z);
  const auto ref = ad::add(b.fc2(ad::gelu(b.fc1(ad::layer_norm(mid, 1e-6)))), mid);
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(Architecture, RelposOffEqualsPlainMsaReference) {
  for (auto cfg : matrix()) {
    cfg.toggles.relpos_bias = false;
    Rng rng(8);
    const std::size_t len = cfg.max_len();
    auto p = random_attention(cfg.dim, cfg.heads, len, rng);
    const auto z = random_tensor<double>({len, cfg.dim}, rng);
    std::vector<std::size_t> pos(len);
    for (std::size_t i = 0; i < len; ++i) pos[i] = i;
    const auto out = model::relpos_msa<double>(z, p, cfg.heads, len, pos, cfg.toggles.relpos_bias);
    const auto ref = attention_ref(z, p, cfg.heads, [](std::size_t, std::size_t, std::size_t) { return 0.0; });
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(out[i], ref[i], 1e-6);
  }
}

TEST(Architecture, MaskedShortcutPreservesUnmaskedRows) {
  for (const auto& cfg : matrix()) {
    model::Model<float> m(cfg, 9);
    Rng rng(10);
    randomize_modulation(m, rng);
    const auto x = random_tensor<float>({cfg.channels, cfg.height, cfg.width}, rng);
    const auto z_le = m.latent(x).z;
    const auto plan = masking::make_mask_plan(cfg.num_patches(), 0.5, rng);
    const auto enc = m.encode(m.embed_patches(x), z_le, Mode::kTrain, &plan);
    const auto dec = m.decode(enc, z_le, Mode::kTrain);
    const auto out = model::masked_shortcut(dec.input.tokens, dec.output.tokens, plan.mask);
    const std::size_t d = cfg.dim;
    for (std::size_t c = 0; c < d; ++c) ASSERT_EQ(out[c], dec.output.tokens[c]);
    for (std::size_t i = 0; i < plan.n; ++i) {
      const auto& src = plan.mask[i] ? dec.input.tokens : dec.output.tokens;
      for (std::size_t c = 0; c < d; ++c) ASSERT_EQ(out[(i + 1) * d + c], src[(i + 1) * d + c]);
    }
  }
}

TEST(Architecture, InferenceBuildsNoMaskPlan) {
  for (const auto& cfg : matrix()) {
    model::Model<float> m(cfg, 11);
    Rng rng(12);
    const auto x = random_tensor<float>({cfg.channels, cfg.height, cfg.width}, rng);
    masking::reset_plans_created();
    model::AttentionTrace<float> trace;
    m.forward_infer(x, &trace);
    EXPECT_EQ(masking::plans_created(), 0u);
    EXPECT_EQ(trace.layers.size(), cfg.enc_depth + cfg.dec_depth);
    m.forward_train(x, rng);
    EXPECT_EQ(masking::plans_created(), 1u);
  }
}

TEST(Architecture, ShapeLedger) {
  for (const auto& cfg : matrix()) {
    model::Model<float> m(cfg, 13);
    Rng rng(14);
    const auto x = random_tensor<float>({cfg.channels, cfg.height, cfg.width}, rng);
    const auto z_le = m.latent(x).z;
    EXPECT_EQ(z_le.shape(), (Shape{1, cfg.dim}));
    const auto plan = masking::make_mask_plan(cfg.num_patches(), 0.5, rng);
    const auto enc = m.encode(m.embed_patches(x), z_le, Mode::kTrain, &plan);
    EXPECT_EQ(enc.tokens.shape(), (Shape{plan.n_kept + 1, cfg.dim}));
    const auto dec = m.decode(enc, z_le, Mode::kTrain);
    EXPECT_EQ(dec.output.tokens.shape(), (Shape{cfg.num_patches() + 1, cfg.dim}));
    const auto out = m.forward_train(x, rng);
    EXPECT_EQ(out.reconstruction.shape(), x.shape());
    EXPECT_EQ(out.logits.shape(), (Shape{1, 4}));
    const auto enc_inf = m.encode(m.embed_patches(x), z_le, Mode::kInfer, nullptr);
    EXPECT_EQ(enc_inf.tokens.shape(), (Shape{cfg.num_patches() + 1, cfg.dim}));
  }
}

TEST(Encode, SixteenPatchesHalfMasked) {
  ModelConfig cfg = ModelConfig::micro();
  cfg.height = cfg.width = 32;  // 16 patches of 8x8
  model::Model<float> m(cfg, 15);
  Rng rng(16);
  const auto x = random_tensor<float>({1, 32, 32}, rng);
  const auto z_le = m.latent(x).z;
  const auto plan = masking::make_mask_plan(16, 0.5, rng);
  EXPECT_EQ(m.encode(m.embed_patches(x), z_le, Mode::kTrain, &plan).tokens.shape(), (Shape{9, cfg.dim}));
  EXPECT_EQ(m.encode(m.embed_patches(x), z_le, Mode::kInfer, nullptr).tokens.shape(), (Shape{17, cfg.dim}));
  EXPECT_THROW(m.encode(m.embed_patches(x), z_le, Mode::kTrain, nullptr), ContractError);
  EXPECT_THROW(m.encode(m.embed_patches(x), z_le, Mode::kInfer, &plan), ContractError);
}

TEST(Decode, MaskRowsShareOneToken) {
  ModelConfig cfg = ModelConfig::micro();
  model::Model<float> m(cfg, 17);
  Rng rng(18);
  const auto x = random_tensor<float>({1, 64, 64}, rng);
  const auto z_le = m.latent(x).z;
  const auto plan = masking::make_mask_plan(cfg.num_patches(), 0.75, rng);
  const auto enc = m.encode(m.embed_patches(x), z_le, Mode::kTrain, &plan);
  const auto dec = m.decode(enc, z_le, Mode::kTrain);
  const std::size_t d = cfg.dim;
  std::size_t masked = 0;
  for (std::size_t i = 0; i < plan.n; ++i) {
    if (plan.mask[i]) continue;
    ++masked;
    for (std::size_t c = 0; c < d; ++c) ASSERT_EQ(dec.input.tokens[(i + 1) * d + c], m.mask_token[c]);
  }
  EXPECT_EQ(masked, plan.n - plan.n_kept);
  // inference: the encoder output passes straight in
  const auto enc_inf = m.encode(m.embed_patches(x), z_le, Mode::kInfer, nullptr);
  const auto dec_inf = m.decode(enc_inf, z_le, Mode::kInfer);
  for (std::size_t i = 0; i < enc_inf.tokens.numel(); ++i) ASSERT_EQ(dec_inf.input.tokens[i], enc_inf.tokens[i]);
}

TEST(MaskedShortcut, Examples) {
  Rng rng(19);
  const auto in = random_tensor<float>({4, 3}, rng), out = random_tensor<float>({4, 3}, rng);
  const std::vector<std::uint8_t> ones(3, 1), zeros(3, 0), mixed = {1, 0, 1};
  const auto a = model::masked_shortcut(in, out, ones);
  const auto b = model::masked_shortcut(in, out, zeros);
  const auto c = model::masked_shortcut(in, out, mixed);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t i = r * 3 + k;
      EXPECT_EQ(a[i], r == 0 ? out[i] : in[i]);
      EXPECT_EQ(b[i], out[i]);
      EXPECT_EQ(c[i], (r > 0 && mixed[r - 1]) ? in[i] : out[i]);
    }
  }
}

TEST(Heads, ClassHeadAndReconstruction) {
  ModelConfig cfg = ModelConfig::micro();
  model::Model<float> m(cfg, 20);
  model::SequenceState<float> z{Tensor<float>::zeros({cfg.max_len(), cfg.dim}), true, nullptr};
  for (auto& v : m.head.bias.mutable_data()) v = 0;
  const auto logits = m.class_head(z);
  EXPECT_EQ(logits.numel(), 4u);
  for (float v : logits.data()) EXPECT_EQ(v, 0.f);

  for (auto& v : m.recon.weight.mutable_data()) v = 0;
  for (auto& v : m.recon.bias.mutable_data()) v = 0;
  Rng rng(21);
  z.tokens = random_tensor<float>({cfg.max_len(), cfg.dim}, rng);
  const auto img = m.reconstruction_head(z, Tensor<float>::zeros({1, cfg.dim}));
  EXPECT_EQ(img.shape(), (Shape{1, 64, 64}));
  for (float v : img.data()) EXPECT_EQ(v, 0.f);
}

TEST(Heads, ReconstructionPlacementFollowsPatchMap) {
  ModelConfig cfg = ModelConfig::micro();
  cfg.toggles.adaln_final_linear = false;
  model::Model<float> m(cfg, 22);
  const std::size_t pd = cfg.patch_dim();
  // recon = identity on the first pd coordinates requires dim >= pd; use bias only
  for (auto& v : m.recon.weight.mutable_data()) v = 0;
  for (std::size_t i = 0; i < pd; ++i) m.recon.bias.mutable_data()[i] = static_cast<float>(i);
  model::SequenceState<float> z{Tensor<float>::zeros({cfg.max_len(), cfg.dim}), true, nullptr};
  const auto img = m.reconstruction_head(z, Tensor<float>::zeros({1, cfg.dim}));
  // every patch carries the same values 0..pd-1 laid out row-major inside the patch
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) ASSERT_EQ(img[y * 64 + x], static_cast<float>((y % 8) * 8 + x % 8));
}

TEST(Forward, TrainDeterministicGivenSeed) {
  model::Model<float> m(ModelConfig::micro(), 23);
  Rng data_rng(24);
  const auto x = random_tensor<float>({1, 64, 64}, data_rng);
  Rng a(25), b(25);
  const auto o1 = m.forward_train(x, a), o2 = m.forward_train(x, b);
  for (std::size_t i = 0; i < o1.logits.numel(); ++i) EXPECT_EQ(o1.logits[i], o2.logits[i]);
  for (std::size_t i = 0; i < o1.reconstruction.numel(); ++i) ASSERT_EQ(o1.reconstruction[i], o2.reconstruction[i]);
}

TEST(Forward, InferenceRepeatableAndBatched) {
  model::Model<float> m(ModelConfig::micro(), 26);
  Rng rng(27);
  std::vector<Tensor<float>> xs;
  for (int i = 0; i < 3; ++i) xs.push_back(random_tensor<float>({1, 64, 64}, rng));
  const auto l1 = m.forward_infer(xs[0]), l2 = m.forward_infer(xs[0]);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(l1[i], l2[i]);
  const auto batch = m.forward_infer_batch(xs);
  EXPECT_EQ(batch.shape(), (Shape{3, 4}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(batch[i], l1[i]);
}

TEST(Forward, TogglesOffStillRunsAndDiffers) {
  ModelConfig off = ModelConfig::micro();
  off.toggles = {false, false, false, false, false, false};
  model::Model<float> full(ModelConfig::micro(), 28), plain(off, 28);
  Rng rng(29);
  randomize_modulation(full, rng);
  randomize_modulation(plain, rng);
  const auto x = random_tensor<float>({1, 64, 64}, rng);
  masking::reset_plans_created();
  Rng r1(30), r2(30);
  const auto a = full.forward_train(x, r1);
  const auto b = plain.forward_train(x, r2);
  EXPECT_FALSE(b.plan.has_value());
  EXPECT_EQ(masking::plans_created(), 1u);
  bool differs = false;
  for (std::size_t i = 0; i < 4; ++i) differs |= a.logits[i] != b.logits[i];
  EXPECT_TRUE(differs);
}

TEST(Forward, GradientsReachEveryTrainableParameter) {
  ModelConfig cfg = ModelConfig::micro();
  model::Model<float> m(cfg, 31);
  Rng rng(32);
  const auto x = random_tensor<float>({1, 64, 64}, rng, 0.5);
  const auto step = [&] {
    ad::GradTape<float> tape;
    Rng r(33);
    const auto out = m.forward_train(x, r);
    tape.backward(losses::combined_loss(out.logits, 1, out.reconstruction, x, true).total);
  };
  // the zero-initialized gates block most paths until the first update
  optim::Adam<float> adam;
  adam.attach(m);
  step();
  adam.step(1e-3, 0.0);
  step();
  m.visit_params([&](const std::string& name, Tensor<float>& p) {
    ASSERT_TRUE(p.has_grad()) << name;
    // softmax is shift invariant, so a bias added to every key has zero gradient
    if (name.ends_with("attn.k.bias")) return;
    double norm = 0;
    for (float g : p.grad()) norm += static_cast<double>(g) * g;
    EXPECT_GT(norm, 0.0) << name;
  });
}

TEST(Config, ZeroDepthRejected) {
  ModelConfig cfg = ModelConfig::micro();
  cfg.enc_depth = 0;
  EXPECT_THROW(model::Model<float>(cfg, 0), ConfigError);
}

TEST(Config, OneEncoderBlockChangesInputAfterAStep) {
  ModelConfig cfg = ModelConfig::micro();
  cfg.enc_depth = 1;
  model::Model<float> m(cfg, 34);
  Rng rng(35);
  const auto x = random_tensor<float>({1, 64, 64}, rng);
  optim::Adam<float> adam;
  adam.attach(m);
  {
    ad::GradTape<float> tape;
    Rng r(36);
    const auto out = m.forward_train(x, r);
    tape.backward(losses::combined_loss(out.logits, 0, out.reconstruction, x, true).total);
  }
  adam.step(1e-3, 0.0);
  const auto z_le = m.latent(x).z;
  const auto enc = m.encode(m.embed_patches(x), z_le, Mode::kInfer, nullptr);
  const std::size_t n = cfg.num_patches();
  const auto tokens = ad::add(m.embed_patches(x), ad::slice_rows(m.pos_enc, 1, n + 1));
  const auto before = ad::concat_rows<float>({ad::add(m.cls_token, ad::slice_rows(m.pos_enc, 0, 1)), tokens});
  bool differs = false;
  for (std::size_t i = 0; i < before.numel(); ++i) differs |= before[i] != enc.tokens[i];
  EXPECT_TRUE(differs);
}
