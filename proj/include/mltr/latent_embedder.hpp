#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mltr/nn.hpp"

// Latent conditioning token: z_le = embed(adaptive_avg_pool(cnn(x))), [1 x D].
namespace mltr::latent {

struct ConvStage {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
};

enum class Activation { kGelu, kIdentity };

struct BackboneSpec {
  std::vector<ConvStage> stages;
  std::size_t input_channels = 1;
  std::optional<std::string> pretrained_weights;
  bool freeze = false;
  Activation activation = Activation::kGelu;

  void validate() const;
  std::size_t out_channels() const { return stages.back().out_channels; }
  // Spatial output size for an HxW input, following the conv2d size formula.
  std::pair<std::size_t, std::size_t> output_size(std::size_t h, std::size_t w) const;
};

// Conv stack with "same"-style padding (k/2) per stage and the configured
// activation after every stage.
template <typename T>
struct Backbone {
  struct Conv {
    ad::Tensor<T> weight;  // [Cout x Cin x k x k]
    ad::Tensor<T> bias;    // [Cout]
    std::size_t stride = 1;
    std::size_t padding = 0;
  };

  BackboneSpec spec;
  std::vector<Conv> convs;

  ad::Tensor<T> forward(const ad::Tensor<T>& x) const;
  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f);
  void set_frozen(bool frozen);
};

// He-uniform (fan-in) weights and zero biases drawn from `seed`. Loads
// spec.pretrained_weights when set; applies spec.freeze.
template <typename T>
Backbone<T> build_backbone(const BackboneSpec& spec, std::uint64_t seed);

template <typename T>
struct LatentTokens {
  ad::Tensor<T> z;  // [1 x D]
};

template <typename T>
LatentTokens<T> embed_latent(const Backbone<T>& backbone, const ad::Tensor<T>& x,
                             const nn::Linear<T>& embed);

}  // namespace mltr::latent
