#include "mltr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mltr/losses.hpp"
#include "mltr/masking.hpp"
#include "mltr/model.hpp"
#include "mltr/ops.hpp"
#include "mltr/tape.hpp"

namespace mltr::gradcheck {

using ad::Tensor;
using T = Tensor<double>;

// Inputs whose true gradient is exactly zero (e.g. a bias added to every
// attention key) leave only rounding noise on both sides; their error is
// measured against this fraction of the largest input gradient instead.
constexpr double kRelativeFloor = 1e-6;

Result check(const std::string& name, const ScalarFn& fn, const std::vector<T>& inputs, double h, double tol) {
  Result r;
  r.name = name;
  std::vector<std::vector<double>> analytic;
  {
    ad::GradTape<double> tape;
    for (auto in : inputs) in.clear_grad();
    const auto y = fn();
    tape.backward(y);
    for (const auto& in : inputs) {
      if (in.has_grad()) {
        const auto g = in.grad();
        analytic.emplace_back(g.begin(), g.end());
      } else {
        analytic.emplace_back(in.numel(), 0.0);
      }
    }
  }
  struct Norms {
    double diff2 = 0, a2 = 0, n2 = 0;
  };
  std::vector<Norms> norms(inputs.size());
  double scale = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto in = inputs[k];
    auto data = in.mutable_data();
    auto& nk = norms[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = fn().item();
      data[i] = saved - h;
      const double down = fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      r.max_abs_error = std::max(r.max_abs_error, std::abs(a - numeric));
      nk.diff2 += (a - numeric) * (a - numeric);
      nk.a2 += a * a;
      nk.n2 += numeric * numeric;
      ++r.checked;
    }
    scale = std::max(scale, std::sqrt(nk.n2));
  }
  const double floor = std::max(kRelativeFloor * scale, 1e-12);
  for (const auto& nk : norms) {
    const double denom = std::max(std::sqrt(nk.a2) + std::sqrt(nk.n2), floor);
    r.rel_error = std::max(r.rel_error, std::sqrt(nk.diff2) / denom);
  }
  r.passed = r.rel_error < tol;
  return r;
}

namespace {

T param(Shape s, Rng& rng, double bound = 1.0) {
  const std::size_t n = numel(s);
  return T::parameter(std::move(s), nn::uniform_values<double>(n, bound, rng));
}

T constant(Shape s, Rng& rng) {
  const std::size_t n = numel(s);
  return T::from(std::move(s), nn::uniform_values<double>(n, 1.0, rng));
}

// Weighted sum of every output element so that each one contributes.
ScalarFn reduce(std::function<T()> f, Rng& rng) {
  auto probe = f();
  const auto weights = constant(probe.shape(), rng);
  return [f, weights] { return ad::sum(ad::mul(f(), weights)); };
}

model::LTBlockParams<double> random_block(std::size_t d, std::size_t hidden, std::size_t heads, std::size_t max_len,
                                          Rng& rng) {
  model::LTBlockParams<double> b;
  b.ada = nn::Linear<double>::make(d, 6 * d, rng);
  b.attn.q = nn::Linear<double>::make(d, d, rng);
  b.attn.k = nn::Linear<double>::make(d, d, rng);
  b.attn.v = nn::Linear<double>::make(d, d, rng);
  b.attn.o = nn::Linear<double>::make(d, d, rng);
  b.attn.relpos_table = param({heads, 2 * max_len - 1}, rng, 0.5);
  b.attn.relpos_cls = param({heads}, rng, 0.5);
  b.fc1 = nn::Linear<double>::make(d, hidden, rng);
  b.fc2 = nn::Linear<double>::make(hidden, d, rng);
  for (auto* l : {&b.ada, &b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.fc1, &b.fc2}) {
    for (auto& v : l->bias.mutable_data()) v = rng.uniform(-0.2, 0.2);
  }
  return b;
}

std::vector<T> block_params(model::LTBlockParams<double>& b) {
  std::vector<T> out;
  b.visit("b", [&](const std::string&, T& p) { out.push_back(p); });
  return out;
}

}  // namespace

std::vector<Result> op_suite(std::uint64_t seed, double tol) {
  Rng rng(seed);
  std::vector<Result> out;
  const auto run = [&](const std::string& name, std::function<T()> f, std::vector<T> inputs) {
    out.push_back(check(name, reduce(std::move(f), rng), inputs, 1e-5, tol));
  };

  {
    auto a = param({3, 4}, rng), b = param({4, 5}, rng);
    run("matmul", [=] { return ad::matmul(a, b); }, {a, b});
  }
  {
    auto a = param({3, 4}, rng), b = param({5, 4}, rng);
    run("matmul_nt", [=] { return ad::matmul_nt(a, b); }, {a, b});
  }
  {
    auto a = param({3, 4}, rng);
    run("transpose", [=] { return ad::transpose(a); }, {a});
  }
  {
    auto a = param({3, 4}, rng), b = param({3, 4}, rng), row = param({1, 4}, rng), s = param({1}, rng);
    run("add", [=] { return ad::add(a, b); }, {a, b});
    run("add_broadcast_row", [=] { return ad::add(a, row); }, {a, row});
    run("add_broadcast_scalar", [=] { return ad::add(a, s); }, {a, s});
    run("sub", [=] { return ad::sub(a, b); }, {a, b});
    run("sub_broadcast_row", [=] { return ad::sub(a, row); }, {a, row});
    run("mul", [=] { return ad::mul(a, b); }, {a, b});
    run("mul_broadcast_row", [=] { return ad::mul(a, row); }, {a, row});
    run("mul_broadcast_scalar", [=] { return ad::mul(a, s); }, {a, s});
    run("scale", [=] { return ad::scale(a, 0.7); }, {a});
    run("add_scalar", [=] { return ad::add_scalar(a, -1.3); }, {a});
    run("sum", [=] { return ad::sum(a); }, {a});
    run("mean", [=] { return ad::mean(a); }, {a});
    run("mse", [=] { return ad::mse(a, b); }, {a, b});
  }
  {
    auto x = param({3, 5}, rng, 2.0);
    run("softmax_last_axis", [=] { return ad::softmax(x, 1); }, {x});
    run("softmax_first_axis", [=] { return ad::softmax(x, 0); }, {x});
    run("layer_norm", [=] { return ad::layer_norm(x, 1e-6); }, {x});
    run("gelu", [=] { return ad::gelu(x); }, {x});
  }
  {
    auto x = param({2, 5, 5}, rng), w = param({3, 2, 3, 3}, rng), b = param({3}, rng);
    run("conv2d_stride2_pad1", [=] { return ad::conv2d(x, w, b, 2, 1); }, {x, w, b});
    run("conv2d_stride1_nobias", [=] { return ad::conv2d(x, w, T(), 1, 0); }, {x, w});
  }
  {
    auto x = param({3, 4, 4}, rng);
    run("adaptive_avg_pool", [=] { return ad::adaptive_avg_pool(x); }, {x});
    run("reshape", [=] { return ad::reshape(x, {4, 12}); }, {x});
  }
  {
    auto a = param({4, 3}, rng), b = param({2, 3}, rng), c = param({4, 2}, rng), r = param({1, 3}, rng);
    const std::vector<std::size_t> rows = {2, 0, 2, 3, 1};
    run("index_select", [=] { return ad::index_select<double>(a, rows); }, {a});
    run("gather", [=] { return ad::gather<double>(a, {11, 0, 5, 5, 7, 2}, {2, 3}); }, {a});
    run("slice_rows", [=] { return ad::slice_rows(a, 1, 3); }, {a});
    run("slice_cols", [=] { return ad::slice_cols(a, 1, 3); }, {a});
    run("concat_rows", [=] { return ad::concat_rows<double>({a, b}); }, {a, b});
    run("concat_cols", [=] { return ad::concat_cols<double>({a, c}); }, {a, c});
    run("broadcast_rows", [=] { return ad::broadcast_rows(r, 4); }, {r});
    auto a2 = param({4, 3}, rng);
    const std::vector<std::uint8_t> keep = {1, 0, 0, 1};
    run("select_rows", [=] { return ad::select_rows<double>(keep, a, a2); }, {a, a2});
  }
  {
    auto logits = param({1, 4}, rng, 2.0);
    out.push_back(check("cross_entropy", [=] { return ad::cross_entropy(logits, 2); }, {logits}, 1e-5, tol));
  }
  {
    auto img = param({2, 4, 4}, rng);
    run("patchify", [=] { return masking::patchify(img, 2).tokens; }, {img});
    auto tokens = param({4, 8}, rng);
    run("unpatchify", [=] { return masking::unpatchify(tokens, 2, 4, 4, 2); }, {tokens});
  }
  {
    const std::size_t d = 8, heads = 2, len = 5, max_len = 6;
    auto block = random_block(d, 16, heads, max_len, rng);
    auto z = param({len, d}, rng), z_le = param({1, d}, rng);
    const std::vector<std::size_t> pos = {0, 3, 1, 5, 2};
    auto attn_inputs = std::vector<T>{z, block.attn.q.weight, block.attn.q.bias, block.attn.k.weight,
                                      block.attn.k.bias, block.attn.v.weight, block.attn.o.weight,
                                      block.attn.relpos_table, block.attn.relpos_cls};
    run("relpos_msa", [=] { return model::relpos_msa<double>(z, block.attn, heads, max_len, pos, true); }, attn_inputs);
    auto inputs = block_params(block);
    inputs.push_back(z);
    inputs.push_back(z_le);
    const model::BlockOptions opt{heads, max_len, true, 1e-6};
    run("lt_block", [=] { return model::lt_block<double>(z, z_le, block, opt, pos); }, inputs);
    auto dec_in = param({len, d}, rng), dec_out = param({len, d}, rng);
    const std::vector<std::uint8_t> mask = {1, 0, 1, 0};
    run("masked_shortcut", [=] { return model::masked_shortcut<double>(dec_in, dec_out, mask); }, {dec_in, dec_out});
  }
  return out;
}

Result model_check(std::uint64_t seed, double tol) {
  ModelConfig cfg;
  cfg.height = cfg.width = 8;
  cfg.channels = 1;
  cfg.patch = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.enc_depth = 1;
  cfg.dec_depth = 1;
  cfg.mlp_ratio = 2;
  cfg.backbone.stages = {{4, 3, 2}};
  model::Model<double> m(cfg, seed);
  Rng rng(derive_seed(seed, {7}));
  std::vector<T> params;
  m.visit_params([&](const std::string& name, T& p) {
    if (name.find(".ada.") != std::string::npos) {
      for (auto& v : p.mutable_data()) v = rng.uniform(-0.3, 0.3);
    }
    params.push_back(p);
  });
  const auto x = constant({1, 8, 8}, rng);
  const std::size_t label = 2;
  const ScalarFn loss = [&m, x, seed] {
    Rng plan_rng(derive_seed(seed, {11}));
    const auto out = m.forward_train(x, 0.5, plan_rng);
    return losses::combined_loss(out.logits, label, out.reconstruction, x, true).total;
  };
  return check("model_end_to_end", loss, params, 1e-5, tol);
}

}  // namespace mltr::gradcheck
