#include <map>

#include "convsst/error.hpp"
#include "convsst/gradcheck.hpp"
#include "convsst/ops.hpp"

namespace convsst {

namespace {

using P = Parameter<double>;
using V = Var<double>;
using G = Graph<double>;

P random_param(const std::string& name, Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return P(name, std::move(t));
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Contracts an op output against fixed random weights so every output
// element reaches the loss with a distinct sensitivity.
struct Projection {
  Tensor<double> weights;

  V apply(const V& y) const { return sum(mul(y, y.graph().constant(weights))); }
};

Projection projection_for(const Shape& shape, Rng& rng) {
  return {random_param("projection", shape, rng).value};
}

GradcheckReport check(std::vector<P*> params, const std::function<V(G&)>& fn, const GradcheckOptions& o) {
  return gradcheck<double>(fn, params, o);
}

GradcheckReport matmul_check(Rng& rng, const GradcheckOptions& o) {
  const std::size_t m = pick(rng, 2, 5), k = pick(rng, 2, 5), n = pick(rng, 2, 5);
  P a = random_param("a", {m, k}, rng), b = random_param("b", {k, n}, rng);
  Projection r = projection_for({m, n}, rng);
  return check({&a, &b}, [&](G& g) { return r.apply(matmul(g.parameter(a), g.parameter(b))); }, o);
}

GradcheckReport conv2d_check(Rng& rng, const GradcheckOptions& o) {
  const std::size_t groups = pick(rng, 1, 3), cin = groups * pick(rng, 1, 2), cout = groups * pick(rng, 1, 2);
  const std::size_t k = pick(rng, 0, 1) ? 3 : 1, pad = k == 3 ? pick(rng, 0, 1) : 0, hw = pick(rng, 3, 5);
  P x = random_param("x", {2, cin, hw, hw}, rng);
  P w = random_param("w", {cout, cin / groups, k, k}, rng);
  const std::size_t out = hw + 2 * pad - k + 1;
  Projection r = projection_for({2, cout, out, out}, rng);
  return check({&x, &w}, [&](G& g) { return r.apply(conv2d(g.parameter(x), g.parameter(w), groups, pad)); }, o);
}

GradcheckReport conv3d_check(Rng& rng, const GradcheckOptions& o) {
  const std::size_t cin = pick(rng, 1, 2), cout = pick(rng, 1, 3);
  const std::size_t d = pick(rng, 2, 4), hw = pick(rng, 3, 4);
  const std::size_t kd = pick(rng, 1, 2), pd = pick(rng, 0, 1), ph = pick(rng, 0, 1);
  P x = random_param("x", {2, cin, d, hw, hw}, rng);
  P w = random_param("w", {cout, cin, kd, 3, 3}, rng);
  const std::size_t od = d + 2 * pd - kd + 1, ohw = hw + 2 * ph - 2;
  Projection r = projection_for({2, cout, od, ohw, ohw}, rng);
  return check({&x, &w}, [&](G& g) { return r.apply(conv3d(g.parameter(x), g.parameter(w), {pd, ph, ph})); }, o);
}

GradcheckReport softmax_check(Rng& rng, const GradcheckOptions& o) {
  const Shape shape{pick(rng, 2, 3), pick(rng, 2, 4), pick(rng, 2, 5)};
  const std::size_t axis = pick(rng, 0, 2);
  P x = random_param("x", shape, rng, -2.0, 2.0);
  Projection r = projection_for(shape, rng);
  return check({&x}, [&](G& g) { return r.apply(softmax(g.parameter(x), axis)); }, o);
}

GradcheckReport layernorm_check(Rng& rng, const GradcheckOptions& o) {
  const std::size_t rows = pick(rng, 2, 6), d = pick(rng, 2, 8);
  P x = random_param("x", {rows, d}, rng, -2.0, 2.0);
  P gamma = random_param("gamma", {d}, rng, 0.5, 1.5), beta = random_param("beta", {d}, rng);
  Projection r = projection_for({rows, d}, rng);
  return check({&x, &gamma, &beta},
               [&](G& g) { return r.apply(layernorm(g.parameter(x), g.parameter(gamma), g.parameter(beta), 1e-5)); }, o);
}

GradcheckReport batchnorm_check(Rng& rng, const GradcheckOptions& o) {
  const std::size_t n = pick(rng, 2, 3), c = pick(rng, 1, 3), hw = pick(rng, 2, 3);
  P x = random_param("x", {n, c, hw, hw}, rng, -2.0, 2.0);
  P gamma = random_param("gamma", {c}, rng, 0.5, 1.5), beta = random_param("beta", {c}, rng);
  Tensor<double> mean({c}, 0.0), var({c}, 1.0);
  Projection r = projection_for({n, c, hw, hw}, rng);
  return check({&x, &gamma, &beta},
               [&](G& g) {
                 return r.apply(batchnorm(g.parameter(x), g.parameter(gamma), g.parameter(beta), mean, var,
                                          BatchNormOptions{true, 0.1, 1e-5}));
               },
               o);
}

GradcheckReport gelu_check(Rng& rng, const GradcheckOptions& o) {
  const Shape shape{pick(rng, 2, 4), pick(rng, 2, 6)};
  P x = random_param("x", shape, rng, -3.0, 3.0);
  Projection r = projection_for(shape, rng);
  return check({&x}, [&](G& g) { return r.apply(gelu(g.parameter(x))); }, o);
}

GradcheckReport cross_entropy_check(Rng& rng, const GradcheckOptions& o) {
  const std::size_t n = pick(rng, 2, 6), c = pick(rng, 2, 5);
  P logits = random_param("logits", {n, c}, rng, -3.0, 3.0);
  std::vector<std::int32_t> targets(n);
  for (auto& t : targets) t = static_cast<std::int32_t>(pick(rng, 0, c - 1));
  return check({&logits}, [&](G& g) { return cross_entropy(g.parameter(logits), targets); }, o);
}

EncoderWeights<double> random_encoder(std::size_t d, std::size_t hidden, Rng& rng) {
  EncoderWeights<double> e;
  e.attn_norm = {random_param("attn_norm.gamma", {d}, rng, 0.5, 1.5), random_param("attn_norm.beta", {d}, rng)};
  e.query = random_param("query", {d, d}, rng);
  e.key = random_param("key", {d, d}, rng);
  e.value = random_param("value", {d, d}, rng);
  e.proj = random_param("proj", {d, d}, rng);
  e.proj_bias = random_param("proj_bias", {d}, rng);
  e.mlp_norm = {random_param("mlp_norm.gamma", {d}, rng, 0.5, 1.5), random_param("mlp_norm.beta", {d}, rng)};
  e.fc1 = random_param("fc1", {d, hidden}, rng);
  e.fc1_bias = random_param("fc1_bias", {hidden}, rng);
  e.fc2 = random_param("fc2", {hidden, d}, rng);
  e.fc2_bias = random_param("fc2_bias", {d}, rng);
  return e;
}

GradcheckReport msa_check(Rng& rng, const GradcheckOptions& o) {
  const std::size_t heads = pick(rng, 1, 3), d = heads * pick(rng, 2, 3), n = pick(rng, 2, 5);
  P tokens = random_param("tokens", {2, n, d}, rng);
  EncoderWeights<double> w = random_encoder(d, 2 * d, rng);
  Projection r = projection_for({2, n, d}, rng);
  return check({&tokens, &w.query, &w.key, &w.value, &w.proj, &w.proj_bias},
               [&](G& g) { return r.apply(msa(g.parameter(tokens), w, heads)); }, o);
}

GradcheckReport cgrm_check(Rng& rng, const GradcheckOptions& o) {
  const std::size_t s = pick(rng, 2, 4), d = pick(rng, 1, 4);
  P prev = random_param("prev", {2, s * s, d}, rng), curr = random_param("curr", {2, s * s, d}, rng);
  P kernel = random_param("kernel", {1, 2, 3, 3}, rng);
  Projection r = projection_for({2, s * s, d}, rng);
  return check({&prev, &curr, &kernel},
               [&](G& g) { return r.apply(cgrm(g.parameter(prev), g.parameter(curr), kernel, s)); }, o);
}

GradcheckReport model_check(Rng& rng, const GradcheckOptions& o) {
  ModelConfig c;
  c.patch = 5;
  c.bands = 12;
  c.classes = 3;
  c.depth = 2;
  c.heads = 2;
  c.embed_dim = 16;
  c.mlp_dim = 64;
  return gradcheck_model(c, 2, rng(), o);
}

}  // namespace

const std::vector<std::string>& gradcheck_families() {
  static const std::vector<std::string> names{"matmul",    "conv2d", "conv3d",        "softmax", "layernorm", "batchnorm",
                                              "gelu",      "cross_entropy", "msa", "cgrm",    "model"};
  return names;
}

GradcheckReport gradcheck_family(const std::string& family, std::uint64_t seed, const GradcheckOptions& options) {
  using Fn = GradcheckReport (*)(Rng&, const GradcheckOptions&);
  static const std::map<std::string, Fn> table{
      {"matmul", matmul_check},       {"conv2d", conv2d_check},   {"conv3d", conv3d_check},
      {"softmax", softmax_check},     {"layernorm", layernorm_check}, {"batchnorm", batchnorm_check},
      {"gelu", gelu_check},           {"cross_entropy", cross_entropy_check}, {"msa", msa_check},
      {"cgrm", cgrm_check},           {"model", model_check}};
  auto it = table.find(family);
  if (it == table.end()) throw Error("unknown gradcheck family \"" + family + "\"");
  Rng rng(seed);
  return it->second(rng, options);
}

GradcheckReport gradcheck_model(const ModelConfig& config, std::size_t batch, std::uint64_t seed,
                                const GradcheckOptions& options) {
  ModelConfig c = config;
  c.dropout = 0.0;
  Rng rng(seed);
  ModelWeights<double> w = init_weights<double>(c, rng);
  // non-trivial norm affines so their gradients are exercised
  std::uniform_real_distribution<double> jitter(-0.2, 0.2);
  for (Parameter<double>* p : w.parameters())
    for (auto& v : p->value.values()) v += jitter(rng);

  Tensor<double> patches({batch, c.patch, c.patch, c.bands});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& v : patches.values()) v = unit(rng);
  std::vector<std::int32_t> labels(batch);
  for (std::size_t i = 0; i < batch; ++i) labels[i] = static_cast<std::int32_t>(i % c.classes);

  const ForwardMode mode{true, nullptr};
  auto params = w.parameters();
  return gradcheck<double>(
      [&](G& g) { return cross_entropy(model_forward(g, patches, w, c, mode), labels); }, params, options);
}

}  // namespace convsst
