#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtunet/checkpoint.hpp"
#include "mtunet/graph.hpp"
#include "mtunet/raster.hpp"
#include "mtunet/tensor.hpp"

namespace mtunet {

/// Network shape. Level i in 1..k has C_i channels at input_size / 2^i.
struct ModelConfig {
  std::size_t k = 4;
  std::vector<std::size_t> channels{8, 16, 32, 64};  // C_1..C_k
  std::size_t stem_channels = 4;                     // C_0
  std::vector<std::size_t> heads_per_level{1, 1, 1};  // m_1..m_{k-1}
  std::size_t input_size = 64;
  std::size_t mlp_ratio = 2;
  std::uint64_t seed = 0;
  bool use_mvtm = true;      // false: fusion sees F_k alone ("w/o MVTM")
  bool channel_norm = true;  // per-sample channel norm after each encoder/decoder conv

  /// Throws ConfigError on any broken invariant.
  void validate() const;

  std::size_t level_size(std::size_t level) const { return input_size >> level; }
  std::size_t level_channels(std::size_t level) const { return level == 0 ? stem_channels : channels[level - 1]; }
  /// Patch edge P_i = H_k, shared by every ViT branch.
  std::size_t patch_size() const { return level_size(k); }
  std::size_t token_dim(std::size_t level) const;
  std::size_t token_count(std::size_t level) const;

  nlohmann::json to_json() const;
  /// Rejects unknown keys; missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::json& j);
};

class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }

  std::span<NamedTensor> parameters() noexcept { return params_; }
  std::span<const NamedTensor> parameters() const noexcept { return params_; }
  std::vector<Tensor*> parameter_ptrs();
  std::size_t parameter_count() const;
  Tensor& parameter(const std::string& name);
  std::size_t index_of(const std::string& name) const;

  void zero_grad();
  void fill(double value);

  Checkpoint to_checkpoint() const;
  static Model from_checkpoint(const Checkpoint& checkpoint);

  /// Inference on a [1,H,W] image; no gradients are recorded.
  ProbabilityMap predict(const Tensor& image) const;

 private:
  friend class ModelGraph;

  std::size_t add(std::string name, Shape shape, bool zero_init = false);

  ModelConfig config_;
  std::vector<NamedTensor> params_;
};

/// F_0 .. F_k.
struct FeaturePyramid {
  std::vector<Var> levels;
};

struct DecodeResult {
  Var logits;       // [1,H,W], pre-sigmoid
  Var probability;  // sigmoid(logits)
};

struct ForwardResult {
  FeaturePyramid pyramid;
  std::vector<Var> refined;  // V_1..V_{k-1}; empty when MVTM is ablated
  Var fused;                 // M_k
  DecodeResult output;
};

/// Binds a model's parameters into one graph and builds the forward pass.
class ModelGraph {
 public:
  /// Parameters become gradient-collecting leaves.
  ModelGraph(Graph& graph, Model& model);
  /// Parameters are referenced read-only; nothing is differentiated.
  ModelGraph(Graph& graph, const Model& model);

  FeaturePyramid encode(Var image);
  /// Patchify F_i and add the level's position table.
  Var embed(Var feature, std::size_t level);
  /// E_b = MLP(LN(E_a)) + E_a with E_a = MSA(LN(E)) + E.
  Var transformer(Var tokens, std::size_t level);
  Var attention(Var normed_tokens, std::size_t level);
  /// V_i: tokens reassembled to C_i x H_i x W_i, average-pooled to H_k x W_k.
  Var vit_branch(Var feature, std::size_t level);
  /// Concat(F_k, V_{k-1}, ..., V_1) followed by a 1x1 conv to C_k channels.
  /// `refined` holds V_1..V_{k-1} in level order.
  Var fuse(Var top, std::span<const Var> refined);
  DecodeResult decode(Var fused, const FeaturePyramid& pyramid);
  ForwardResult forward(Var image);

  Graph& graph() noexcept { return graph_; }

 private:
  Var param(const std::string& name);
  Var conv(Var x, const std::string& prefix, std::size_t stride, std::size_t pad);
  Var conv_norm(Var x, const std::string& prefix, std::size_t stride, std::size_t pad);
  Var residual_block(Var x, const std::string& prefix, bool downsample);
  Var linear(Var x, const std::string& prefix);
  Var norm(Var x, const std::string& prefix);

  Graph& graph_;
  const Model& model_;
  Model* trainable_ = nullptr;
  std::vector<std::optional<Var>> bound_;
};

}  // namespace mtunet
