#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "convsst/graph.hpp"
#include "convsst/ops.hpp"
#include "convsst/tensor.hpp"
#include "json.hpp"

namespace convsst {

enum class HeadMode { gap, cls };

/// Hyperparameters of the spectral-spatial transformer.
struct ModelConfig {
  std::size_t patch = 11;            // spatial window S (odd)
  std::size_t bands = 0;             // B
  std::size_t classes = 0;           // C
  std::size_t embed_dim = 64;        // token width d_t
  std::size_t depth = 2;             // encoders L
  std::size_t heads = 4;
  std::size_t mlp_dim = 256;
  double dropout = 0.1;
  std::size_t spectral_kernel = 9;   // stem conv3d extent along bands
  std::size_t stem_planes = 8;       // stem conv3d output planes
  std::size_t hetconv_groups = 8;
  bool use_cgrm = true;
  HeadMode head = HeadMode::gap;
  // BN after each HetConv branch (true) or a single BN after their sum.
  bool hetconv_branch_bn = true;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  double ln_eps = 1e-5;

  /// Throws Error on inconsistent settings.
  void validate() const;

  std::size_t grid_tokens() const { return patch * patch; }
  std::size_t tokens() const { return grid_tokens() + (head == HeadMode::cls ? 1 : 0); }
  std::size_t stem_bands() const { return bands - spectral_kernel + 1; }
  std::size_t stem_channels() const { return stem_planes * stem_bands(); }
};

nlohmann::ordered_json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename Scalar>
struct BatchNormParams {
  Parameter<Scalar> gamma, beta;
  Tensor<Scalar> running_mean, running_var;
};

template <typename Scalar>
struct LayerNormParams {
  Parameter<Scalar> gamma, beta;
};

template <typename Scalar>
struct EncoderWeights {
  LayerNormParams<Scalar> attn_norm;
  Parameter<Scalar> query, key, value;     // [d x d]
  Parameter<Scalar> proj, proj_bias;       // [d x d], [d]
  LayerNormParams<Scalar> mlp_norm;
  Parameter<Scalar> fc1, fc1_bias;         // [d x hidden], [hidden]
  Parameter<Scalar> fc2, fc2_bias;         // [hidden x d], [d]
};

/// Every learnable tensor of the network plus BatchNorm running buffers.
/// Shapes are a pure function of the ModelConfig.
template <typename Scalar>
struct ModelWeights {
  Parameter<Scalar> stem_conv;               // [planes x 1 x 3 x 3 x k_spec]
  BatchNormParams<Scalar> stem_bn;           // planes
  Parameter<Scalar> hetconv_group;           // [d x Cmid/g x 3 x 3]
  Parameter<Scalar> hetconv_point;           // [d x Cmid x 1 x 1]
  BatchNormParams<Scalar> hetconv_group_bn;  // used as the shared BN when branch BN is off
  std::optional<BatchNormParams<Scalar>> hetconv_point_bn;
  Parameter<Scalar> pos_embedding;           // [n x d]
  std::optional<Parameter<Scalar>> cls_token;  // [1 x d]
  std::vector<EncoderWeights<Scalar>> encoders;
  std::vector<Parameter<Scalar>> cgrm;       // L-1 kernels, each [1 x 2 x 3 x 3]
  LayerNormParams<Scalar> final_norm;
  Parameter<Scalar> head, head_bias;         // [d x C], [C]

  /// Parameters in a fixed order (checkpoint and optimizer order).
  std::vector<Parameter<Scalar>*> parameters();
  std::vector<const Parameter<Scalar>*> parameters() const;
  /// Named non-learnable state (BatchNorm running statistics).
  std::vector<std::pair<std::string, Tensor<Scalar>*>> buffers();
  std::vector<std::pair<std::string, const Tensor<Scalar>*>> buffers() const;
  void zero_grads();
};

/// Conv and linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); positional
/// embedding and CLS token ~ N(0, 0.02); norm scales 1, shifts and biases 0.
template <typename Scalar>
ModelWeights<Scalar> init_weights(const ModelConfig& config, Rng& rng);

/// Trainable scalar count.
template <typename Scalar>
std::size_t count_parameters(const ModelWeights<Scalar>& weights);

/// Training flag plus the RNG used by dropout.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;
};

/// Intermediate shapes and attention maps captured during a forward pass.
template <typename Scalar>
struct ForwardTrace {
  bool keep_attention = false;
  Shape stem_volume;   // per-sample conv3d output [planes x S x S x B']
  Shape stem_output;   // [N x d x S x S]
  Shape tokens;        // [N x n x d]
  Shape pooled;        // [N x d]
  Shape logits;        // [N x C]
  std::vector<Tensor<Scalar>> attention;  // per encoder: [N*heads x n x n]
};

// Building blocks; all take and return batched Vars.

/// [N x S x S x B] -> [N x d x S x S].
template <typename Scalar>
Var<Scalar> stem_forward(const Var<Scalar>& patches, ModelWeights<Scalar>& weights, const ModelConfig& config,
                         const ForwardMode& mode, ForwardTrace<Scalar>* trace = nullptr);

/// [N x d x S x S] -> [N x n x d]; CLS mode prepends the CLS token.
template <typename Scalar>
Var<Scalar> tokenize(const Var<Scalar>& features, ModelWeights<Scalar>& weights, const ModelConfig& config,
                     const ForwardMode& mode);

/// softmax(Q K^T / sqrt(d_h)) V over [b x n x d_h] operands.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                      Tensor<Scalar>* weights_out = nullptr);

/// Multi-head self-attention on [N x n x d] tokens, including the output projection.
template <typename Scalar>
Var<Scalar> msa(const Var<Scalar>& tokens, EncoderWeights<Scalar>& weights, std::size_t heads,
                Tensor<Scalar>* attention_out = nullptr);

/// Pre-norm encoder block: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'.
template <typename Scalar>
Var<Scalar> encoder_forward(const Var<Scalar>& tokens, EncoderWeights<Scalar>& weights, const ModelConfig& config,
                            const ForwardMode& mode, Tensor<Scalar>* attention_out = nullptr);

/// Fuses two S*S-token grids with a depth-2 (2, 3, 3) convolution shared
/// across channels, padding (0, 1, 1), no bias or activation.
template <typename Scalar>
Var<Scalar> cgrm(const Var<Scalar>& prev, const Var<Scalar>& curr, Parameter<Scalar>& kernel, std::size_t patch);

/// [N x S x S x B] -> logits [N x C].
template <typename Scalar>
Var<Scalar> model_forward(Graph<Scalar>& graph, const Tensor<Scalar>& patches, ModelWeights<Scalar>& weights,
                          const ModelConfig& config, const ForwardMode& mode, ForwardTrace<Scalar>* trace = nullptr);

}  // namespace convsst
