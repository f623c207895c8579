#include "mltr/latent_embedder.hpp"

#include <cmath>

#include "mltr/checkpoint.hpp"

namespace mltr::latent {

void BackboneSpec::validate() const {
  if (stages.empty()) throw ConfigError("backbone needs at least one conv stage");
  if (input_channels == 0) throw ConfigError("backbone input_channels must be > 0");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.stride < 1) throw ConfigError("backbone stage " + std::to_string(i) + ": stride must be >= 1");
    if (s.kernel < 1) throw ConfigError("backbone stage " + std::to_string(i) + ": kernel must be >= 1");
    if (s.out_channels == 0) throw ConfigError("backbone stage " + std::to_string(i) + ": out_channels must be > 0");
  }
}

std::pair<std::size_t, std::size_t> BackboneSpec::output_size(std::size_t h, std::size_t w) const {
  for (const auto& s : stages) {
    const std::size_t p = s.kernel / 2;
    if (s.kernel > h + 2 * p || s.kernel > w + 2 * p) {
      throw ShapeError("backbone kernel " + std::to_string(s.kernel) + " exceeds padded input " +
                       std::to_string(h) + "x" + std::to_string(w));
    }
    h = (h + 2 * p - s.kernel) / s.stride + 1;
    w = (w + 2 * p - s.kernel) / s.stride + 1;
  }
  return {h, w};
}

template <typename T>
ad::Tensor<T> Backbone<T>::forward(const ad::Tensor<T>& x) const {
  if (x.rank() != 3 || x.dim(0) != spec.input_channels) {
    throw ShapeError("backbone expects " + std::to_string(spec.input_channels) + " input channels, got " +
                     to_string(x.shape()));
  }
  ad::Tensor<T> h = x;
  for (const auto& c : convs) {
    h = ad::conv2d(h, c.weight, c.bias, c.stride, c.padding);
    if (spec.activation == Activation::kGelu) h = ad::gelu(h);
  }
  return h;
}

template <typename T>
void Backbone<T>::visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const std::string p = prefix + ".stage" + std::to_string(i);
    f(p + ".weight", convs[i].weight);
    f(p + ".bias", convs[i].bias);
  }
}

template <typename T>
void Backbone<T>::set_frozen(bool frozen) {
  for (auto& c : convs) {
    c.weight.set_requires_grad(!frozen);
    c.bias.set_requires_grad(!frozen);
    if (frozen) {
      c.weight.clear_grad();
      c.bias.clear_grad();
    }
  }
}

template <typename T>
Backbone<T> build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Backbone<T> b;
  b.spec = spec;
  Rng rng(seed);
  std::size_t cin = spec.input_channels;
  for (const auto& s : spec.stages) {
    typename Backbone<T>::Conv c;
    const std::size_t fan_in = cin * s.kernel * s.kernel;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    c.weight = ad::Tensor<T>::parameter({s.out_channels, cin, s.kernel, s.kernel},
                                        nn::uniform_values<T>(s.out_channels * fan_in, bound, rng));
    c.bias = ad::Tensor<T>::parameter({s.out_channels}, std::vector<T>(s.out_channels, T(0)));
    c.stride = s.stride;
    c.padding = s.kernel / 2;
    b.convs.push_back(std::move(c));
    cin = s.out_channels;
  }
  if (spec.pretrained_weights) {
    const auto ck = ckpt::read_file(*spec.pretrained_weights);
    try {
      ckpt::load_parameters_impl<T>(
          ck, [&](const nn::ParamVisitor<T>& f) { b.visit("backbone", f); }, "backbone.");
    } catch (const CheckpointMismatchError& e) {
      throw FormatError(std::string("pretrained backbone incompatible with spec: ") + e.what());
    }
  }
  b.set_frozen(spec.freeze);
  return b;
}

template <typename T>
LatentTokens<T> embed_latent(const Backbone<T>& backbone, const ad::Tensor<T>& x, const nn::Linear<T>& embed) {
  const auto features = backbone.forward(x);
  const auto pooled = ad::adaptive_avg_pool(features);
  const auto flat = ad::reshape(pooled, {1, pooled.dim(0)});
  if (flat.dim(1) != embed.in_features()) {
    throw ShapeError("latent embedding expects " + std::to_string(embed.in_features()) + " features, backbone gives " +
                     std::to_string(flat.dim(1)));
  }
  return {embed(flat)};
}

template struct Backbone<float>;
template struct Backbone<double>;
template Backbone<float> build_backbone(const BackboneSpec&, std::uint64_t);
template Backbone<double> build_backbone(const BackboneSpec&, std::uint64_t);
template LatentTokens<float> embed_latent(const Backbone<float>&, const ad::Tensor<float>&, const nn::Linear<float>&);
template LatentTokens<double> embed_latent(const Backbone<double>&, const ad::Tensor<double>&, const nn::Linear<double>&);

}  // namespace mltr::latent
