#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mltr/config.hpp"
#include "mltr/latent_embedder.hpp"
#include "mltr/masking.hpp"
#include "mltr/nn.hpp"

namespace mltr::model {

enum class Mode { kTrain, kInfer };

// Post-softmax attention maps collected during a forward pass:
// layers[l][h] is the [L x L] map of head h in layer l (encoder layers first).
template <typename T>
struct AttentionTrace {
  std::vector<std::vector<ad::Tensor<T>>> layers;
};

template <typename T>
struct AttentionParams {
  nn::Linear<T> q, k, v, o;
  ad::Tensor<T> relpos_table;  // [heads x (2*max_len - 1)]
  ad::Tensor<T> relpos_cls;    // [heads]; bias for any pair involving cls
};

template <typename T>
struct LTBlockParams {
  nn::Linear<T> ada;  // D -> 6D, zero-initialized: gamma1, beta1, alpha1, gamma2, beta2, alpha2
  AttentionParams<T> attn;
  nn::Linear<T> fc1, fc2;

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f);
};

// Multi-head self-attention with an additive learned bias indexed by the
// relative position offset. `positions[i]` is the position id of row i; id 0
// is the cls token and uses the per-head cls bias. Offsets index the table at
// (pos_i - pos_j) + max_len - 1.
template <typename T>
ad::Tensor<T> relpos_msa(const ad::Tensor<T>& z, const AttentionParams<T>& p, std::size_t heads,
                         std::size_t max_len, std::span<const std::size_t> positions, bool use_bias,
                         std::vector<ad::Tensor<T>>* maps = nullptr);

struct BlockOptions {
  std::size_t heads = 1;
  std::size_t max_len = 1;
  bool relpos_bias = true;
  double ln_eps = 1e-6;
};

// z' = a1 * MSA((1 + g1) * LN(z) + b1) + z
// out = a2 * MLP((1 + g2) * LN(z') + b2) + z'
template <typename T>
ad::Tensor<T> lt_block(const ad::Tensor<T>& z, const ad::Tensor<T>& z_le, const LTBlockParams<T>& p,
                       const BlockOptions& opt, std::span<const std::size_t> positions,
                       std::vector<ad::Tensor<T>>* maps = nullptr);

template <typename T>
struct SequenceState {
  ad::Tensor<T> tokens;  // [L x D]
  bool has_cls = true;
  const masking::MaskPlan* plan = nullptr;  // present only when training with masking
};

// Row 0 from the decoder output; row i+1 from the decoder input when
// mask[i] == 1 (unmasked) and from the decoder output otherwise.
template <typename T>
ad::Tensor<T> masked_shortcut(const ad::Tensor<T>& dec_in, const ad::Tensor<T>& dec_out,
                              std::span<const std::uint8_t> mask);

template <typename T>
struct TrainOutput {
  ad::Tensor<T> logits;          // [1 x n_classes]
  ad::Tensor<T> reconstruction;  // [C x H x W]
  std::optional<masking::MaskPlan> plan;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  void visit_params(const nn::ParamVisitor<T>& f);
  std::size_t parameter_count();

  // Copy whose parameters share storage with this model but accumulate
  // gradients separately; used to run samples of a batch on worker threads.
  Model replica() const;

  latent::LatentTokens<T> latent(const ad::Tensor<T>& x) const;
  ad::Tensor<T> embed_patches(const ad::Tensor<T>& x) const;

  // Prepends cls, adds encoder positional embeddings by original patch
  // position, keeps plan's tokens when given, runs the encoder blocks.
  SequenceState<T> encode(const ad::Tensor<T>& patch_tokens, const ad::Tensor<T>& z_le, Mode mode,
                          const masking::MaskPlan* plan, AttentionTrace<T>* trace = nullptr) const;

  struct Decoded {
    SequenceState<T> input;   // after mask-token append and unshuffle, before positional embedding
    SequenceState<T> output;  // after the decoder blocks
  };
  Decoded decode(const SequenceState<T>& enc, const ad::Tensor<T>& z_le, Mode mode,
                 AttentionTrace<T>* trace = nullptr) const;

  ad::Tensor<T> class_head(const SequenceState<T>& z) const;
  ad::Tensor<T> reconstruction_head(const SequenceState<T>& z, const ad::Tensor<T>& z_le) const;

  TrainOutput<T> forward_train(const ad::Tensor<T>& x, Rng& rng) const;
  // Ratio chosen by the caller (shared across a batch).
  TrainOutput<T> forward_train(const ad::Tensor<T>& x, double rho, Rng& rng) const;
  // Full sequence, no masking; masked shortcut with an all-ones mask.
  ad::Tensor<T> forward_infer(const ad::Tensor<T>& x, AttentionTrace<T>* trace = nullptr) const;
  // [B x n_classes]
  ad::Tensor<T> forward_infer_batch(std::span<const ad::Tensor<T>> images) const;

  latent::Backbone<T> backbone;
  nn::Linear<T> latent_embed;
  nn::Linear<T> patch_embed;
  ad::Tensor<T> cls_token;   // [1 x D]
  ad::Tensor<T> mask_token;  // [1 x D]
  ad::Tensor<T> pos_enc;     // [(N+1) x D]
  ad::Tensor<T> pos_dec;     // [(N+1) x D]
  std::vector<LTBlockParams<T>> encoder;
  std::vector<LTBlockParams<T>> decoder;
  nn::Linear<T> final_ada;   // D -> 2D (gamma, beta), zero-initialized
  nn::Linear<T> recon;       // D -> P*P*C
  nn::Linear<T> head;        // D -> n_classes

 private:
  SequenceState<T> finish(const Decoded& d, std::span<const std::uint8_t> mask) const;

  ModelConfig cfg_;
  BlockOptions block_opts_;
};

}  // namespace mltr::model
