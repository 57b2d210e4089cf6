#include "convsst/model.hpp"

#include <cmath>

namespace convsst {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("invalid model config: " + m); };
  if (patch == 0 || patch % 2 == 0) fail("patch window must be odd, got " + std::to_string(patch));
  if (classes == 0) fail("classes must be positive");
  if (spectral_kernel == 0 || spectral_kernel > bands) {
    fail("spectral kernel " + std::to_string(spectral_kernel) + " does not fit " + std::to_string(bands) + " bands");
  }
  if (depth == 0) fail("depth must be at least 1");
  if (heads == 0 || embed_dim % heads != 0) {
    fail("embed dim " + std::to_string(embed_dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (mlp_dim == 0) fail("mlp dim must be positive");
  if (stem_planes == 0 || hetconv_groups == 0 || embed_dim % hetconv_groups != 0 ||
      stem_channels() % hetconv_groups != 0) {
    fail("HetConv groups " + std::to_string(hetconv_groups) + " must divide embed dim and stem channels");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["patch"] = c.patch;
  j["bands"] = c.bands;
  j["classes"] = c.classes;
  j["embed_dim"] = c.embed_dim;
  j["depth"] = c.depth;
  j["heads"] = c.heads;
  j["mlp_dim"] = c.mlp_dim;
  j["dropout"] = c.dropout;
  j["spectral_kernel"] = c.spectral_kernel;
  j["stem_planes"] = c.stem_planes;
  j["hetconv_groups"] = c.hetconv_groups;
  j["use_cgrm"] = c.use_cgrm;
  j["head"] = c.head == HeadMode::gap ? "gap" : "cls";
  j["hetconv_branch_bn"] = c.hetconv_branch_bn;
  j["bn_momentum"] = c.bn_momentum;
  j["bn_eps"] = c.bn_eps;
  j["ln_eps"] = c.ln_eps;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.patch = j.value("patch", c.patch);
  c.bands = j.value("bands", c.bands);
  c.classes = j.value("classes", c.classes);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.spectral_kernel = j.value("spectral_kernel", c.spectral_kernel);
  c.stem_planes = j.value("stem_planes", c.stem_planes);
  c.hetconv_groups = j.value("hetconv_groups", c.hetconv_groups);
  c.use_cgrm = j.value("use_cgrm", c.use_cgrm);
  const std::string head = j.value("head", std::string("gap"));
  if (head != "gap" && head != "cls") throw Error("unknown head mode \"" + head + "\"");
  c.head = head == "gap" ? HeadMode::gap : HeadMode::cls;
  c.hetconv_branch_bn = j.value("hetconv_branch_bn", c.hetconv_branch_bn);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.bn_eps = j.value("bn_eps", c.bn_eps);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  return c;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
std::vector<Parameter<Scalar>*> ModelWeights<Scalar>::parameters() {
  std::vector<Parameter<Scalar>*> out{&stem_conv, &stem_bn.gamma, &stem_bn.beta, &hetconv_group, &hetconv_point,
                                      &hetconv_group_bn.gamma, &hetconv_group_bn.beta};
  if (hetconv_point_bn) {
    out.push_back(&hetconv_point_bn->gamma);
    out.push_back(&hetconv_point_bn->beta);
  }
  out.push_back(&pos_embedding);
  if (cls_token) out.push_back(&*cls_token);
  for (auto& e : encoders) {
    for (Parameter<Scalar>* p : {&e.attn_norm.gamma, &e.attn_norm.beta, &e.query, &e.key, &e.value, &e.proj,
                                 &e.proj_bias, &e.mlp_norm.gamma, &e.mlp_norm.beta, &e.fc1, &e.fc1_bias, &e.fc2,
                                 &e.fc2_bias}) {
      out.push_back(p);
    }
  }
  for (auto& k : cgrm) out.push_back(&k);
  out.push_back(&final_norm.gamma);
  out.push_back(&final_norm.beta);
  out.push_back(&head);
  out.push_back(&head_bias);
  return out;
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> ModelWeights<Scalar>::parameters() const {
  auto mut = const_cast<ModelWeights*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename Scalar>
std::vector<std::pair<std::string, Tensor<Scalar>*>> ModelWeights<Scalar>::buffers() {
  std::vector<std::pair<std::string, Tensor<Scalar>*>> out;
  auto add = [&](const std::string& prefix, BatchNormParams<Scalar>& bn) {
    out.emplace_back(prefix + ".running_mean", &bn.running_mean);
    out.emplace_back(prefix + ".running_var", &bn.running_var);
  };
  add("stem.bn", stem_bn);
  add(hetconv_point_bn ? "stem.hetconv.group_bn" : "stem.hetconv.bn", hetconv_group_bn);
  if (hetconv_point_bn) add("stem.hetconv.point_bn", *hetconv_point_bn);
  return out;
}

template <typename Scalar>
std::vector<std::pair<std::string, const Tensor<Scalar>*>> ModelWeights<Scalar>::buffers() const {
  std::vector<std::pair<std::string, const Tensor<Scalar>*>> out;
  for (auto& [name, t] : const_cast<ModelWeights*>(this)->buffers()) out.emplace_back(name, t);
  return out;
}

template <typename Scalar>
void ModelWeights<Scalar>::zero_grads() {
  for (Parameter<Scalar>* p : parameters()) p->zero_grad();
}

namespace {

template <typename Scalar>
Parameter<Scalar> uniform_param(std::string name, Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(dist(rng));
  return Parameter<Scalar>(std::move(name), std::move(t));
}

template <typename Scalar>
Parameter<Scalar> normal_param(std::string name, Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(dist(rng));
  return Parameter<Scalar>(std::move(name), std::move(t));
}

template <typename Scalar>
Parameter<Scalar> constant_param(std::string name, Shape shape, Scalar value) {
  return Parameter<Scalar>(std::move(name), Tensor<Scalar>(std::move(shape), value));
}

template <typename Scalar>
BatchNormParams<Scalar> batchnorm_params(const std::string& prefix, std::size_t channels) {
  return {constant_param<Scalar>(prefix + ".gamma", {channels}, 1), constant_param<Scalar>(prefix + ".beta", {channels}, 0),
          Tensor<Scalar>({channels}, 0), Tensor<Scalar>({channels}, 1)};
}

template <typename Scalar>
LayerNormParams<Scalar> layernorm_params(const std::string& prefix, std::size_t dim) {
  return {constant_param<Scalar>(prefix + ".gamma", {dim}, 1), constant_param<Scalar>(prefix + ".beta", {dim}, 0)};
}

}  // namespace

template <typename Scalar>
ModelWeights<Scalar> init_weights(const ModelConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.embed_dim;
  const std::size_t k = config.spectral_kernel;
  const std::size_t cmid = config.stem_channels();
  const std::size_t g = config.hetconv_groups;

  ModelWeights<Scalar> w;
  w.stem_conv = uniform_param<Scalar>("stem.conv3d.weight", {config.stem_planes, 1, 3, 3, k}, 9 * k, rng);
  w.stem_bn = batchnorm_params<Scalar>("stem.bn", config.stem_planes);
  w.hetconv_group = uniform_param<Scalar>("stem.hetconv.group.weight", {d, cmid / g, 3, 3}, cmid / g * 9, rng);
  w.hetconv_point = uniform_param<Scalar>("stem.hetconv.point.weight", {d, cmid, 1, 1}, cmid, rng);
  if (config.hetconv_branch_bn) {
    w.hetconv_group_bn = batchnorm_params<Scalar>("stem.hetconv.group_bn", d);
    w.hetconv_point_bn = batchnorm_params<Scalar>("stem.hetconv.point_bn", d);
  } else {
    w.hetconv_group_bn = batchnorm_params<Scalar>("stem.hetconv.bn", d);
  }
  w.pos_embedding = normal_param<Scalar>("pos_embedding", {config.tokens(), d}, 0.02, rng);
  if (config.head == HeadMode::cls) w.cls_token = normal_param<Scalar>("cls_token", {1, d}, 0.02, rng);

  for (std::size_t l = 0; l < config.depth; ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    EncoderWeights<Scalar> e;
    e.attn_norm = layernorm_params<Scalar>(p + "attn_norm", d);
    e.query = uniform_param<Scalar>(p + "attn.query", {d, d}, d, rng);
    e.key = uniform_param<Scalar>(p + "attn.key", {d, d}, d, rng);
    e.value = uniform_param<Scalar>(p + "attn.value", {d, d}, d, rng);
    e.proj = uniform_param<Scalar>(p + "attn.proj", {d, d}, d, rng);
    e.proj_bias = constant_param<Scalar>(p + "attn.proj_bias", {d}, 0);
    e.mlp_norm = layernorm_params<Scalar>(p + "mlp_norm", d);
    e.fc1 = uniform_param<Scalar>(p + "mlp.fc1", {d, config.mlp_dim}, d, rng);
    e.fc1_bias = constant_param<Scalar>(p + "mlp.fc1_bias", {config.mlp_dim}, 0);
    e.fc2 = uniform_param<Scalar>(p + "mlp.fc2", {config.mlp_dim, d}, config.mlp_dim, rng);
    e.fc2_bias = constant_param<Scalar>(p + "mlp.fc2_bias", {d}, 0);
    w.encoders.push_back(std::move(e));
  }
  for (std::size_t l = 0; l + 1 < config.depth; ++l) {
    w.cgrm.push_back(uniform_param<Scalar>("cgrm." + std::to_string(l) + ".weight", {1, 2, 3, 3}, 18, rng));
  }
  w.final_norm = layernorm_params<Scalar>("final_norm", d);
  w.head = uniform_param<Scalar>("head.weight", {d, config.classes}, d, rng);
  w.head_bias = constant_param<Scalar>("head.bias", {config.classes}, 0);
  return w;
}

template <typename Scalar>
std::size_t count_parameters(const ModelWeights<Scalar>& weights) {
  std::size_t n = 0;
  for (const Parameter<Scalar>* p : weights.parameters())
    if (p->trainable) n += p->size();
  return n;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Scalar>
Var<Scalar> batchnorm_block(const Var<Scalar>& x, BatchNormParams<Scalar>& bn, const ModelConfig& config,
                            const ForwardMode& mode) {
  Graph<Scalar>& g = x.graph();
  return batchnorm(x, g.parameter(bn.gamma), g.parameter(bn.beta), bn.running_mean, bn.running_var,
                   BatchNormOptions{mode.training, config.bn_momentum, config.bn_eps});
}

template <typename Scalar>
Var<Scalar> layernorm_block(const Var<Scalar>& x, LayerNormParams<Scalar>& ln, const ModelConfig& config) {
  Graph<Scalar>& g = x.graph();
  return layernorm(x, g.parameter(ln.gamma), g.parameter(ln.beta), static_cast<Scalar>(config.ln_eps));
}

template <typename Scalar>
Var<Scalar> drop(const Var<Scalar>& x, const ModelConfig& config, const ForwardMode& mode) {
  if (!mode.training || config.dropout == 0.0) return x;
  if (!mode.rng) throw Error("training-mode forward with dropout needs an RNG");
  return dropout(x, config.dropout, true, *mode.rng);
}

}  // namespace

template <typename Scalar>
Var<Scalar> stem_forward(const Var<Scalar>& patches, ModelWeights<Scalar>& w, const ModelConfig& config,
                         const ForwardMode& mode, ForwardTrace<Scalar>* trace) {
  const Shape& s = patches.shape();
  const std::size_t S = config.patch, B = config.bands;
  if (s.size() != 4 || s[1] != S || s[2] != S || s[3] != B) {
    throw ShapeError("stem expects [N x " + std::to_string(S) + " x " + std::to_string(S) + " x " + std::to_string(B) +
                     "] patches, got " + to_string(s));
  }
  const std::size_t n = s[0];
  Graph<Scalar>& g = patches.graph();

  // [N x 1 x S x S x B] -> [N x planes x S x S x B']
  Var<Scalar> x = reshape(patches, {n, 1, S, S, B});
  x = conv3d(x, g.parameter(w.stem_conv), {1, 1, 0});
  x = relu(batchnorm_block(x, w.stem_bn, config, mode));
  if (trace) trace->stem_volume = Shape(x.shape().begin() + 1, x.shape().end());

  // planes and bands fold into HetConv input channels, plane-major
  x = permute(x, {0, 1, 4, 2, 3});
  x = reshape(x, {n, config.stem_channels(), S, S});

  Var<Scalar> grouped = conv2d(x, g.parameter(w.hetconv_group), config.hetconv_groups, 1);
  Var<Scalar> pointwise = conv2d(x, g.parameter(w.hetconv_point), 1, 0);
  Var<Scalar> out;
  if (w.hetconv_point_bn) {
    out = batchnorm_block(grouped, w.hetconv_group_bn, config, mode) +
          batchnorm_block(pointwise, *w.hetconv_point_bn, config, mode);
  } else {
    out = batchnorm_block(grouped + pointwise, w.hetconv_group_bn, config, mode);
  }
  out = relu(out);
  if (trace) trace->stem_output = out.shape();
  return out;
}

template <typename Scalar>
Var<Scalar> tokenize(const Var<Scalar>& features, ModelWeights<Scalar>& w, const ModelConfig& config,
                     const ForwardMode& mode) {
  const Shape& s = features.shape();
  const std::size_t d = config.embed_dim, S = config.patch;
  if (s.size() != 4 || s[1] != d || s[2] != S || s[3] != S) {
    throw ShapeError("tokenize expects [N x " + std::to_string(d) + " x S x S] features, got " + to_string(s));
  }
  if (w.pos_embedding.value.shape() != Shape{config.tokens(), d}) {
    throw ShapeError("positional embedding " + to_string(w.pos_embedding.value.shape()) + " does not match " +
                     std::to_string(config.tokens()) + " tokens");
  }
  const std::size_t n = s[0];
  Graph<Scalar>& g = features.graph();
  Var<Scalar> tokens = permute(reshape(features, {n, d, S * S}), {0, 2, 1});
  if (config.head == HeadMode::cls) {
    if (!w.cls_token) throw Error("CLS head mode without a CLS token");
    tokens = concat<Scalar>({repeat_leading(g.parameter(*w.cls_token), n), tokens}, 1);
  }
  tokens = tokens + g.parameter(w.pos_embedding);
  return drop(tokens, config, mode);
}

template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Tensor<Scalar>* weights_out) {
  if (q.shape().size() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention operands must share a [b x n x d] shape");
  }
  const auto inv_sqrt = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(q.shape()[2])));
  Var<Scalar> weights = softmax(scale(batched_matmul(q, k, true), inv_sqrt), 2);
  if (weights_out) *weights_out = weights.value();
  return batched_matmul(weights, v);
}

template <typename Scalar>
Var<Scalar> msa(const Var<Scalar>& tokens, EncoderWeights<Scalar>& w, std::size_t heads, Tensor<Scalar>* attention_out) {
  const Shape& s = tokens.shape();
  if (s.size() != 3) throw ShapeError("msa expects [N x n x d] tokens, got " + to_string(s));
  const std::size_t n = s[0], t = s[1], d = s[2];
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("token width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  Graph<Scalar>& g = tokens.graph();
  auto split = [&](const Var<Scalar>& x) {
    return reshape(permute(reshape(x, {n, t, heads, dh}), {0, 2, 1, 3}), {n * heads, t, dh});
  };
  Var<Scalar> q = split(linear(tokens, g.parameter(w.query)));
  Var<Scalar> k = split(linear(tokens, g.parameter(w.key)));
  Var<Scalar> v = split(linear(tokens, g.parameter(w.value)));
  Var<Scalar> heads_out = attention(q, k, v, attention_out);
  Var<Scalar> merged = reshape(permute(reshape(heads_out, {n, heads, t, dh}), {0, 2, 1, 3}), {n, t, d});
  return linear(merged, g.parameter(w.proj), g.parameter(w.proj_bias));
}

template <typename Scalar>
Var<Scalar> encoder_forward(const Var<Scalar>& tokens, EncoderWeights<Scalar>& w, const ModelConfig& config,
                            const ForwardMode& mode, Tensor<Scalar>* attention_out) {
  Graph<Scalar>& g = tokens.graph();
  Var<Scalar> z = msa(layernorm_block(tokens, w.attn_norm, config), w, config.heads, attention_out) + tokens;
  Var<Scalar> h = gelu(linear(layernorm_block(z, w.mlp_norm, config), g.parameter(w.fc1), g.parameter(w.fc1_bias)));
  h = drop(h, config, mode);
  h = drop(linear(h, g.parameter(w.fc2), g.parameter(w.fc2_bias)), config, mode);
  return h + z;
}

template <typename Scalar>
Var<Scalar> cgrm(const Var<Scalar>& prev, const Var<Scalar>& curr, Parameter<Scalar>& kernel, std::size_t patch) {
  const Shape& s = curr.shape();
  if (s.size() != 3 || prev.shape() != s) {
    throw ShapeError("cgrm expects two equal [N x n x d] token sets, got " + to_string(prev.shape()) + " and " +
                     to_string(s));
  }
  const std::size_t n = s[0], t = s[1], d = s[2];
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(t))));
  if (side * side != t || side != patch) {
    throw ShapeError("cgrm needs a " + std::to_string(patch) + "x" + std::to_string(patch) + " token grid, got " +
                     std::to_string(t) + " tokens");
  }
  if (kernel.value.shape() != Shape{1, 2, 3, 3}) throw ShapeError("cgrm kernel must be [1 x 2 x 3 x 3]");
  Graph<Scalar>& g = curr.graph();
  auto grid = [&](const Var<Scalar>& x) { return reshape(permute(x, {0, 2, 1}), {n, d, 1, side, side}); };
  // channels become independent samples of a 1-channel depth-2 volume
  Var<Scalar> stacked = reshape(concat<Scalar>({grid(prev), grid(curr)}, 2), {n * d, 1, 2, side, side});
  Var<Scalar> fused = conv3d(stacked, reshape(g.parameter(kernel), {1, 1, 2, 3, 3}), {0, 1, 1});
  return permute(reshape(fused, {n, d, t}), {0, 2, 1});
}

template <typename Scalar>
Var<Scalar> model_forward(Graph<Scalar>& graph, const Tensor<Scalar>& patches, ModelWeights<Scalar>& w,
                          const ModelConfig& config, const ForwardMode& mode, ForwardTrace<Scalar>* trace) {
  if (w.encoders.size() != config.depth) throw ShapeError("weights hold a different encoder depth than the config");
  Var<Scalar> features = stem_forward(graph.constant(patches), w, config, mode, trace);
  Var<Scalar> z = tokenize(features, w, config, mode);
  if (trace) trace->tokens = z.shape();

  const bool cls = config.head == HeadMode::cls;
  const std::size_t grid = config.grid_tokens();
  for (std::size_t l = 0; l < config.depth; ++l) {
    Tensor<Scalar>* attn = nullptr;
    if (trace && trace->keep_attention) attn = &trace->attention.emplace_back();
    Var<Scalar> y = encoder_forward(z, w.encoders[l], config, mode, attn);
    if (config.use_cgrm && l + 1 < config.depth) {
      if (cls) {
        Var<Scalar> fused = cgrm(slice(z, 1, 1, grid), slice(y, 1, 1, grid), w.cgrm[l], config.patch);
        z = concat<Scalar>({slice(y, 1, 0, 1), fused}, 1);
      } else {
        z = cgrm(z, y, w.cgrm[l], config.patch);
      }
    } else {
      z = y;
    }
  }
  z = layernorm_block(z, w.final_norm, config);
  Var<Scalar> pooled = cls ? reshape(slice(z, 1, 0, 1), {z.shape()[0], config.embed_dim}) : mean(z, 1);
  if (trace) trace->pooled = pooled.shape();
  Var<Scalar> logits = linear(pooled, graph.parameter(w.head), graph.parameter(w.head_bias));
  if (trace) trace->logits = logits.shape();
  return logits;
}

#define CONVSST_INSTANTIATE_MODEL(S)                                                                              \
  template struct ModelWeights<S>;                                                                                \
  template ModelWeights<S> init_weights(const ModelConfig&, Rng&);                                                \
  template std::size_t count_parameters(const ModelWeights<S>&);                                                  \
  template Var<S> stem_forward(const Var<S>&, ModelWeights<S>&, const ModelConfig&, const ForwardMode&,           \
                               ForwardTrace<S>*);                                                                 \
  template Var<S> tokenize(const Var<S>&, ModelWeights<S>&, const ModelConfig&, const ForwardMode&);              \
  template Var<S> attention(const Var<S>&, const Var<S>&, const Var<S>&, Tensor<S>*);                             \
  template Var<S> msa(const Var<S>&, EncoderWeights<S>&, std::size_t, Tensor<S>*);                                \
  template Var<S> encoder_forward(const Var<S>&, EncoderWeights<S>&, const ModelConfig&, const ForwardMode&,      \
                                  Tensor<S>*);                                                                    \
  template Var<S> cgrm(const Var<S>&, const Var<S>&, Parameter<S>&, std::size_t);                                 \
  template Var<S> model_forward(Graph<S>&, const Tensor<S>&, ModelWeights<S>&, const ModelConfig&,                \
                                const ForwardMode&, ForwardTrace<S>*);

CONVSST_INSTANTIATE_MODEL(float)
CONVSST_INSTANTIATE_MODEL(double)

#undef CONVSST_INSTANTIATE_MODEL

}  // namespace convsst
