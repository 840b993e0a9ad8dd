#include "mtunet/model.hpp"

#include <array>
#include <cmath>
#include <set>

#include "mtunet/error.hpp"
#include "mtunet/ops.hpp"
#include "mtunet/optim.hpp"

namespace mtunet {

namespace {

constexpr std::size_t kInputChannels = 1;
constexpr double kLayerNormEps = 1e-5;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finaliser
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string level_name(const char* prefix, std::size_t level) { return prefix + std::to_string(level); }

}  // namespace

std::size_t ModelConfig::token_dim(std::size_t level) const {
  const std::size_t p = patch_size();
  return p * p * level_channels(level);
}

std::size_t ModelConfig::token_count(std::size_t level) const {
  const std::size_t grid = level_size(level) / patch_size();
  return grid * grid;
}

void ModelConfig::validate() const {
  if (k < 2) throw ConfigError("model: k must be >= 2");
  if (channels.size() != k) throw ConfigError("model: channels must list exactly k widths");
  if (stem_channels == 0) throw ConfigError("model: stem_channels must be positive");
  for (std::size_t i = 0; i < k; ++i) {
    if (channels[i] == 0) throw ConfigError("model: channel widths must be positive");
    if (i > 0 && channels[i] <= channels[i - 1]) throw ConfigError("model: channels must be strictly increasing");
  }
  if (input_size == 0 || input_size % (std::size_t{1} << k) != 0) {
    throw ConfigError("model: input_size " + std::to_string(input_size) + " not divisible by 2^k");
  }
  if (mlp_ratio == 0) throw ConfigError("model: mlp_ratio must be positive");
  if (heads_per_level.size() != k - 1) throw ConfigError("model: heads_per_level must list k-1 head counts");
  for (std::size_t level = 1; level < k; ++level) {
    const std::size_t heads = heads_per_level[level - 1];
    if (heads == 0 || token_dim(level) % heads != 0) {
      throw ConfigError("model: " + std::to_string(heads) + " heads do not divide token dimension " +
                        std::to_string(token_dim(level)) + " at level " + std::to_string(level));
    }
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"k", k},
          {"channels", channels},
          {"stem_channels", stem_channels},
          {"heads_per_level", heads_per_level},
          {"input_size", input_size},
          {"mlp_ratio", mlp_ratio},
          {"seed", seed},
          {"use_mvtm", use_mvtm},
          {"channel_norm", channel_norm}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"k",          "channels",  "stem_channels", "heads_per_level",
                                           "input_size", "mlp_ratio", "seed",          "use_mvtm",
                                           "channel_norm"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("model config: unknown key '" + key + "'");
  }
  ModelConfig c;
  try {
    if (j.contains("k")) c.k = j.at("k").get<std::size_t>();
    if (j.contains("channels")) c.channels = j.at("channels").get<std::vector<std::size_t>>();
    if (j.contains("stem_channels")) c.stem_channels = j.at("stem_channels").get<std::size_t>();
    if (j.contains("heads_per_level")) c.heads_per_level = j.at("heads_per_level").get<std::vector<std::size_t>>();
    if (j.contains("input_size")) c.input_size = j.at("input_size").get<std::size_t>();
    if (j.contains("mlp_ratio")) c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("use_mvtm")) c.use_mvtm = j.at("use_mvtm").get<bool>();
    if (j.contains("channel_norm")) c.channel_norm = j.at("channel_norm").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  auto add_conv = [this](const std::string& name, std::size_t out, std::size_t in, std::size_t kernel) {
    add(name + ".weight", Shape{out, in, kernel, kernel});
    add(name + ".bias", Shape{out}, true);
  };
  auto add_norm = [this](const std::string& name, std::size_t dim) {
    add(name + ".gain", Shape{dim}, true);
    add(name + ".shift", Shape{dim}, true);
    std::fill(params_[params_.size() - 2].tensor.data().begin(), params_[params_.size() - 2].tensor.data().end(),
              1.0);
  };
  // A bias in front of a per-channel norm is cancelled exactly, so normed
  // convolutions carry none.
  auto add_conv_norm = [&, this](const std::string& name, std::size_t out, std::size_t in, std::size_t kernel) {
    if (!config_.channel_norm) return add_conv(name, out, in, kernel);
    add(name + ".weight", Shape{out, in, kernel, kernel});
    add_norm(name + ".norm", out);
  };
  auto add_linear = [this](const std::string& name, std::size_t in, std::size_t out) {
    add(name + ".weight", Shape{in, out});
    add(name + ".bias", Shape{out}, true);
  };

  add_conv_norm("stem", c.stem_channels, kInputChannels, 3);
  for (std::size_t level = 1; level <= c.k; ++level) {
    const std::string p = level_name("enc", level);
    const std::size_t in = c.level_channels(level - 1), out = c.level_channels(level);
    add_conv_norm(p + ".block0.conv1", out, in, 3);
    add_conv_norm(p + ".block0.conv2", out, out, 3);
    add_conv_norm(p + ".block0.shortcut", out, in, 1);
    add_conv_norm(p + ".block1.conv1", out, out, 3);
    add_conv_norm(p + ".block1.conv2", out, out, 3);
  }
  if (c.use_mvtm) {
    for (std::size_t level = 1; level < c.k; ++level) {
      const std::string p = level_name("vit", level);
      const std::size_t d = c.token_dim(level);
      add(p + ".pos", Shape{c.token_count(level), d});
      add_norm(p + ".ln1", d);
      add_linear(p + ".query", d, d);
      add_linear(p + ".key", d, d);
      add_linear(p + ".value", d, d);
      add_linear(p + ".proj", d, d);
      add_norm(p + ".ln2", d);
      add_linear(p + ".mlp1", d, c.mlp_ratio * d);
      add_linear(p + ".mlp2", c.mlp_ratio * d, d);
    }
  }
  std::size_t fused_in = c.channels.back();
  if (c.use_mvtm) {
    for (std::size_t level = 1; level < c.k; ++level) fused_in += c.level_channels(level);
  }
  add_conv_norm("fuse", c.channels.back(), fused_in, 1);
  for (std::size_t level = c.k; level >= 1; --level) {
    const std::size_t skip = c.level_channels(level - 1);
    add_conv_norm(level_name("dec", level), skip, skip + c.level_channels(level), 3);
  }
  add_conv("head", 1, c.stem_channels, 1);
}

std::size_t Model::add(std::string name, Shape shape, bool zero_init) {
  Tensor t = zero_init ? Tensor(shape) : xavier_init(shape, mix_seed(config_.seed, params_.size()));
  t.set_requires_grad(true);
  params_.push_back({std::move(name), std::move(t)});
  return params_.size() - 1;
}

std::vector<Tensor*> Model::parameter_ptrs() {
  std::vector<Tensor*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p.tensor);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t Model::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw ConfigError("model has no parameter '" + name + "'");
}

Tensor& Model::parameter(const std::string& name) { return params_[index_of(name)].tensor; }

void Model::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Model::fill(double value) {
  for (auto& p : params_) std::fill(p.tensor.data().begin(), p.tensor.data().end(), value);
}

Checkpoint Model::to_checkpoint() const {
  Checkpoint ck;
  ck.config = config_.to_json();
  for (const auto& p : params_) ck.tensors.push_back({p.name, Tensor(p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()})});
  return ck;
}

Model Model::from_checkpoint(const Checkpoint& checkpoint) {
  Model model(ModelConfig::from_json(checkpoint.config));
  if (checkpoint.tensors.size() != model.params_.size()) throw DataError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < checkpoint.tensors.size(); ++i) {
    const auto& src = checkpoint.tensors[i];
    auto& dst = model.params_[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
      throw DataError("checkpoint tensor '" + src.name + "' does not match model parameter '" + dst.name + "'");
    }
    std::copy(src.tensor.data().begin(), src.tensor.data().end(), dst.tensor.data().begin());
  }
  return model;
}

ProbabilityMap Model::predict(const Tensor& image) const {
  Graph g;
  ModelGraph mg(g, *this);
  const auto result = mg.forward(g.reference(image));
  const Tensor& p = g.value(result.output.probability);
  ProbabilityMap map;
  map.values = Raster<double>(p.dim(1), p.dim(2));
  std::copy(p.data().begin(), p.data().end(), map.values.data.begin());
  return map;
}

ModelGraph::ModelGraph(Graph& graph, Model& model)
    : graph_(graph), model_(model), trainable_(&model), bound_(model.params_.size()) {}

ModelGraph::ModelGraph(Graph& graph, const Model& model)
    : graph_(graph), model_(model), bound_(model.params_.size()) {}

Var ModelGraph::param(const std::string& name) {
  const std::size_t idx = model_.index_of(name);
  if (!bound_[idx]) {
    bound_[idx] = trainable_ ? graph_.parameter(trainable_->params_[idx].tensor)
                             : graph_.reference(model_.params_[idx].tensor);
  }
  return *bound_[idx];
}

Var ModelGraph::conv(Var x, const std::string& prefix, std::size_t stride, std::size_t pad) {
  return ops::conv2d(graph_, x, param(prefix + ".weight"), param(prefix + ".bias"), stride, pad);
}

Var ModelGraph::conv_norm(Var x, const std::string& prefix, std::size_t stride, std::size_t pad) {
  if (!model_.config().channel_norm) return conv(x, prefix, stride, pad);
  Var y = ops::conv2d(graph_, x, param(prefix + ".weight"), stride, pad);
  return ops::instance_norm(graph_, y, param(prefix + ".norm.gain"), param(prefix + ".norm.shift"), kLayerNormEps);
}

Var ModelGraph::residual_block(Var x, const std::string& prefix, bool downsample) {
  const std::size_t stride = downsample ? 2 : 1;
  Var h = ops::relu(graph_, conv_norm(x, prefix + ".conv1", stride, 1));
  h = conv_norm(h, prefix + ".conv2", 1, 1);
  Var shortcut = downsample ? conv_norm(x, prefix + ".shortcut", 2, 0) : x;
  return ops::relu(graph_, ops::add(graph_, h, shortcut));
}

Var ModelGraph::linear(Var x, const std::string& prefix) {
  return ops::linear(graph_, x, param(prefix + ".weight"), param(prefix + ".bias"));
}

Var ModelGraph::norm(Var x, const std::string& prefix) {
  return ops::layer_norm(graph_, x, param(prefix + ".gain"), param(prefix + ".shift"), kLayerNormEps);
}

FeaturePyramid ModelGraph::encode(Var image) {
  const auto& c = model_.config();
  const Tensor& img = graph_.value(image);
  if (img.rank() != 3 || img.dim(0) != kInputChannels) {
    throw DataError("encode: expected a 1xHxW image, got " + shape_to_string(img.shape()));
  }
  if (img.dim(1) != c.input_size || img.dim(2) != c.input_size) {
    throw DataError("encode: image " + shape_to_string(img.shape()) + " does not match input_size " +
                    std::to_string(c.input_size));
  }
  FeaturePyramid pyramid;
  pyramid.levels.push_back(ops::relu(graph_, conv_norm(image, "stem", 1, 1)));
  for (std::size_t level = 1; level <= c.k; ++level) {
    const std::string p = level_name("enc", level);
    Var x = residual_block(pyramid.levels.back(), p + ".block0", true);
    pyramid.levels.push_back(residual_block(x, p + ".block1", false));
  }
  return pyramid;
}

Var ModelGraph::embed(Var feature, std::size_t level) {
  const auto& c = model_.config();
  if (level < 1 || level >= c.k) throw ConfigError("vit branch level must be in 1..k-1");
  Var tokens = ops::patchify(graph_, feature, c.patch_size());
  return ops::add(graph_, tokens, param(level_name("vit", level) + ".pos"));
}

Var ModelGraph::attention(Var normed, std::size_t level) {
  const auto& c = model_.config();
  const std::string p = level_name("vit", level);
  const std::size_t d = c.token_dim(level);
  const std::size_t heads = c.heads_per_level[level - 1];
  const std::size_t head_dim = d / heads;
  Var q = linear(normed, p + ".query");
  Var k = linear(normed, p + ".key");
  Var v = linear(normed, p + ".value");
  std::vector<Var> outputs;
  outputs.reserve(heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t lo = h * head_dim, hi = lo + head_dim;
    Var qh = ops::slice_cols(graph_, q, lo, hi);
    Var kh = ops::slice_cols(graph_, k, lo, hi);
    Var vh = ops::slice_cols(graph_, v, lo, hi);
    Var scores = ops::scale(graph_, ops::matmul(graph_, qh, ops::transpose(graph_, kh)), inv_sqrt);
    outputs.push_back(ops::matmul(graph_, ops::softmax_rows(graph_, scores), vh));
  }
  Var merged = heads == 1 ? outputs.front() : ops::concat_cols(graph_, outputs);
  return linear(merged, p + ".proj");
}

Var ModelGraph::transformer(Var tokens, std::size_t level) {
  const std::string p = level_name("vit", level);
  Var attended = ops::add(graph_, attention(norm(tokens, p + ".ln1"), level), tokens);
  Var hidden = ops::relu(graph_, linear(norm(attended, p + ".ln2"), p + ".mlp1"));
  return ops::add(graph_, linear(hidden, p + ".mlp2"), attended);
}

Var ModelGraph::vit_branch(Var feature, std::size_t level) {
  const auto& c = model_.config();
  if (!c.use_mvtm) throw ConfigError("vit_branch called on a model without MVTM");
  const Tensor& f = graph_.value(feature);
  const std::size_t channels = c.level_channels(level);
  if (f.rank() != 3 || f.dim(0) != channels) {
    throw DataError("vit_branch: feature " + shape_to_string(f.shape()) + " does not match level " +
                    std::to_string(level));
  }
  const std::size_t h = f.dim(1), w = f.dim(2);
  Var out = transformer(embed(feature, level), level);
  Var grid = ops::unpatchify(graph_, out, channels, h, w, c.patch_size());
  return ops::adaptive_avg_pool(graph_, grid, c.level_size(c.k), c.level_size(c.k));
}

Var ModelGraph::fuse(Var top, std::span<const Var> refined) {
  const auto& c = model_.config();
  const std::size_t expected = c.use_mvtm ? c.k - 1 : 0;
  if (refined.size() != expected) {
    throw ConfigError("fuse: expected " + std::to_string(expected) + " refined features");
  }
  std::vector<Var> parts{top};
  for (auto it = refined.rbegin(); it != refined.rend(); ++it) parts.push_back(*it);
  Var stacked = parts.size() == 1 ? top : ops::concat_channels(graph_, parts);
  return conv_norm(stacked, "fuse", 1, 0);
}

DecodeResult ModelGraph::decode(Var fused, const FeaturePyramid& pyramid) {
  const auto& c = model_.config();
  if (pyramid.levels.size() != c.k + 1) throw DataError("decode: pyramid must hold F_0..F_k");
  Var m = fused;
  for (std::size_t level = c.k; level >= 1; --level) {
    const std::array<Var, 2> parts{pyramid.levels[level - 1], ops::upsample_bilinear2x(graph_, m)};
    m = ops::relu(graph_, conv_norm(ops::concat_channels(graph_, parts), level_name("dec", level), 1, 1));
  }
  Var logits = conv(m, "head", 1, 0);
  return {logits, ops::sigmoid(graph_, logits)};
}

ForwardResult ModelGraph::forward(Var image) {
  const auto& c = model_.config();
  ForwardResult r;
  r.pyramid = encode(image);
  if (c.use_mvtm) {
    for (std::size_t level = 1; level < c.k; ++level) r.refined.push_back(vit_branch(r.pyramid.levels[level], level));
  }
  r.fused = fuse(r.pyramid.levels[c.k], r.refined);
  r.output = decode(r.fused, r.pyramid);
  return r;
}

}  // namespace mtunet
