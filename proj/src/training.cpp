#include "convsst/training.hpp"

#include <cmath>

#include "convsst/error.hpp"

namespace convsst {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("learning rate must be a finite non-negative number");
  if (batch == 0) throw Error("batch size must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw Error("Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw Error("Adam eps must be positive");
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["seed"] = c.seed;
  j["eval_interval"] = c.eval_interval;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", c.seed);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  return c;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  // FNV-1a over the stream name, then a splitmix64 finalizer
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : stream) h = (h ^ c) * 1099511628211ULL;
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>* const> params, AdamState<Scalar>& state, const AdamOptions& o) {
  if (state.m.empty()) {
    for (Parameter<Scalar>* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw Error("Adam state does not match the parameter list");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<Scalar>& p = *params[i];
    if (!p.trainable) continue;
    Tensor<Scalar>& m = state.m[i];
    Tensor<Scalar>& v = state.v[i];
    if (m.shape() != p.value.shape()) throw ShapeError("Adam moment shape mismatch for " + p.name);
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = p.grad[k];
      const double mk = o.beta1 * m[k] + (1.0 - o.beta1) * g;
      const double vk = o.beta2 * v[k] + (1.0 - o.beta2) * g * g;
      m[k] = static_cast<Scalar>(mk);
      v[k] = static_cast<Scalar>(vk);
      p.value[k] = static_cast<Scalar>(p.value[k] - o.lr * (mk / c1) / (std::sqrt(vk / c2) + o.eps));
    }
  }
}

template <typename Scalar>
std::vector<std::int32_t> argmax_rows(const Tensor<Scalar>& logits) {
  if (logits.ndim() != 2) throw ShapeError("argmax expects [N x C] logits, got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<std::int32_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    out[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

template <typename Scalar>
std::vector<EpochRecord> train(ModelWeights<Scalar>& weights, AdamState<Scalar>& state, const ModelConfig& model,
                               const HsiCube& cube, std::span<const PixelSample> samples, const TrainConfig& config,
                               const TrainCallbacks& callbacks) {
  config.validate();
  model.validate();
  if (samples.empty()) throw Error("training split is empty");
  if (cube.bands != model.bands) {
    throw ShapeError("cube has " + std::to_string(cube.bands) + " bands, model expects " + std::to_string(model.bands));
  }
  for (const auto& s : samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= model.classes) {
      throw DataError("training label " + std::to_string(s.label) + " outside the model's classes");
    }
  }

  BatchIterator<Scalar> batches(cube, {samples.begin(), samples.end()}, config.batch, model.patch, true,
                                derive_seed(config.seed, "shuffle"));
  Rng dropout_rng(derive_seed(config.seed, "dropout"));
  const ForwardMode mode{true, &dropout_rng};
  const AdamOptions adam{config.lr, config.beta1, config.beta2, config.eps};
  std::vector<Parameter<Scalar>*> params = weights.parameters();

  std::vector<EpochRecord> history;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    batches.start_epoch();
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0, step = 0;
    while (auto batch = batches.next()) {
      ++step;
      weights.zero_grads();
      Graph<Scalar> graph(true);
      graph.set_check_finite(config.check_finite);
      Var<Scalar> logits = model_forward(graph, batch->patches, weights, model, mode);
      Var<Scalar> loss = cross_entropy(logits, std::span<const std::int32_t>(batch->labels));
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NonFiniteError("loss became " + std::to_string(value) + " at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step) + "; lower the learning rate or check the input data");
      }
      graph.backward(loss);
      adam_step<Scalar>(params, state, adam);

      const std::size_t n = batch->labels.size();
      loss_sum += value * static_cast<double>(n);
      const auto predicted = argmax_rows(logits.value());
      for (std::size_t i = 0; i < n; ++i) correct += predicted[i] == batch->labels[i];
      seen += n;
    }
    EpochRecord record{epoch, loss_sum / static_cast<double>(seen),
                       static_cast<double>(correct) / static_cast<double>(seen)};
    history.push_back(record);
    if (callbacks.on_epoch) callbacks.on_epoch(record);
    if (callbacks.on_eval && config.eval_interval > 0 && epoch % config.eval_interval == 0) callbacks.on_eval(epoch);
  }
  return history;
}

template <typename Scalar>
std::vector<std::int32_t> predict(const ModelWeights<Scalar>& weights, const ModelConfig& model, const HsiCube& cube,
                                  std::span<const PixelSample> samples, std::size_t batch) {
  if (batch == 0) throw Error("batch size must be at least 1");
  if (cube.bands != model.bands) {
    throw ShapeError("cube has " + std::to_string(cube.bands) + " bands, model expects " + std::to_string(model.bands));
  }
  // the forward pass binds parameters mutably; evaluation never writes them
  ModelWeights<Scalar> frozen = weights;
  std::vector<std::int32_t> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t n = std::min(batch, samples.size() - start);
    Batch<Scalar> b = assemble_batch<Scalar>(cube, samples.subspan(start, n), model.patch);
    Graph<Scalar> graph(false);
    Var<Scalar> logits = model_forward(graph, b.patches, frozen, model, ForwardMode{});
    for (std::int32_t p : argmax_rows(logits.value())) out.push_back(p);
  }
  return out;
}

template <typename Scalar>
Evaluation evaluate(const ModelWeights<Scalar>& weights, const ModelConfig& model, const HsiCube& cube,
                    std::span<const PixelSample> samples, std::size_t batch) {
  Evaluation result{predict(weights, model, cube, samples, batch), ConfusionMatrix(model.classes)};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    result.confusion.update(static_cast<std::size_t>(samples[i].label),
                            static_cast<std::size_t>(result.predictions[i]));
  }
  return result;
}

#define CONVSST_INSTANTIATE_TRAINING(S)                                                                           \
  template void adam_step(std::span<Parameter<S>* const>, AdamState<S>&, const AdamOptions&);                     \
  template std::vector<std::int32_t> argmax_rows(const Tensor<S>&);                                               \
  template std::vector<EpochRecord> train(ModelWeights<S>&, AdamState<S>&, const ModelConfig&, const HsiCube&,    \
                                          std::span<const PixelSample>, const TrainConfig&, const TrainCallbacks&); \
  template std::vector<std::int32_t> predict(const ModelWeights<S>&, const ModelConfig&, const HsiCube&,          \
                                             std::span<const PixelSample>, std::size_t);                         \
  template Evaluation evaluate(const ModelWeights<S>&, const ModelConfig&, const HsiCube&,                        \
                               std::span<const PixelSample>, std::size_t);

CONVSST_INSTANTIATE_TRAINING(float)
CONVSST_INSTANTIATE_TRAINING(double)

#undef CONVSST_INSTANTIATE_TRAINING

}  // namespace convsst
