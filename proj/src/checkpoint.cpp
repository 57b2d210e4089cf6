#include "convsst/checkpoint.hpp"

#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "binary_io.hpp"
#include "convsst/error.hpp"

namespace convsst {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'S', 'T'};
constexpr std::size_t kMaxNdim = 16;

void write_string(std::ostream& out, const std::string& s) {
  if (s.size() > std::numeric_limits<std::uint32_t>::max()) throw CheckpointError("string too long to store");
  detail::write_le(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {
    const auto here = in_.tellg();
    if (here != std::streampos(-1) && in_.seekg(0, std::ios::end)) {
      remaining_ = static_cast<std::uint64_t>(in_.tellg() - here);
      in_.seekg(here);
    } else {
      in_.clear();
      remaining_ = std::numeric_limits<std::uint64_t>::max();
    }
  }

  template <typename T>
  T scalar(const std::string& what) {
    T v{};
    if (!detail::read_le(in_, v)) truncated(what);
    consume(sizeof(T));
    return v;
  }

  void bytes(char* dst, std::size_t n, const std::string& what) {
    need(n, what);
    if (!in_.read(dst, static_cast<std::streamsize>(n))) truncated(what);
    consume(n);
  }

  std::string string(const std::string& what) {
    const auto n = scalar<std::uint32_t>(what);
    need(n, what);
    std::string s(n, '\0');
    if (!in_.read(s.data(), n)) truncated(what);
    consume(n);
    return s;
  }

  void need(std::uint64_t bytes, const std::string& what) const {
    if (bytes > remaining_) truncated(what);
  }

  [[noreturn]] static void truncated(const std::string& what) {
    throw CheckpointError("corrupt checkpoint: truncated while reading " + what);
  }

 private:
  void consume(std::uint64_t n) {
    if (remaining_ != std::numeric_limits<std::uint64_t>::max()) remaining_ -= n;
  }

  std::istream& in_;
  std::uint64_t remaining_;
};

template <typename Scalar>
constexpr DType dtype_of() {
  return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

template <typename Scalar>
NamedTensor to_named(const std::string& name, const Tensor<Scalar>& t) {
  return {name, t.shape(), dtype_of<Scalar>(), std::vector<double>(t.values().begin(), t.values().end())};
}

template <typename Scalar>
void copy_into(const Checkpoint& ckpt, const std::string& name, Tensor<Scalar>& dst) {
  const NamedTensor* src = ckpt.find(name);
  if (!src) throw CheckpointError("checkpoint is missing tensor \"" + name + "\"");
  if (src->shape != dst.shape()) {
    throw CheckpointError("shape mismatch for tensor \"" + name + "\": checkpoint has " + to_string(src->shape) +
                          ", model expects " + to_string(dst.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Scalar>(src->values[i]);
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

ModelConfig Checkpoint::model_config() const {
  if (!config.contains("model")) throw CheckpointError("checkpoint config has no \"model\" section");
  return model_config_from_json(config["model"]);
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic, 4);
  detail::write_le(out, ckpt.version);
  write_string(out, ckpt.config.dump());
  detail::write_le(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (numel(t.shape) != t.values.size()) throw CheckpointError("tensor \"" + t.name + "\" has inconsistent size");
    write_string(out, t.name);
    detail::write_le(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) detail::write_le(out, static_cast<std::uint64_t>(d));
    detail::write_le(out, static_cast<std::uint8_t>(t.dtype));
    if (t.dtype == DType::f32) {
      for (double v : t.values) detail::write_le(out, static_cast<float>(v));
    } else {
      for (double v : t.values) detail::write_le(out, v);
    }
  }
  if (!out) throw CheckpointError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  Reader r(in);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
    throw CheckpointError("not a checkpoint: bad magic bytes");
  }
  Checkpoint ckpt;
  ckpt.version = r.scalar<std::uint32_t>("version");
  if (ckpt.version != Checkpoint::kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  const std::string config = r.string("config");
  try {
    ckpt.config = nlohmann::ordered_json::parse(config);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint config: ") + e.what());
  }

  const auto count = r.scalar<std::uint32_t>("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = r.string("tensor name");
    const auto ndim = r.scalar<std::uint32_t>("rank of " + t.name);
    if (ndim > kMaxNdim) throw CheckpointError("corrupt checkpoint: tensor \"" + t.name + "\" has rank " + std::to_string(ndim));
    for (std::uint32_t d = 0; d < ndim; ++d) t.shape.push_back(r.scalar<std::uint64_t>("dims of " + t.name));
    const auto dtype = r.scalar<std::uint8_t>("dtype of " + t.name);
    if (dtype > 1) throw CheckpointError("corrupt checkpoint: unknown dtype " + std::to_string(dtype) + " for \"" + t.name + "\"");
    t.dtype = static_cast<DType>(dtype);
    const std::size_t n = numel(t.shape);
    const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
    r.need(n * width, "values of " + t.name);
    std::string raw(n * width, '\0');
    r.bytes(raw.data(), raw.size(), "values of " + t.name);
    std::istringstream values(std::move(raw));
    t.values.resize(n);
    for (auto& v : t.values) {
      if (t.dtype == DType::f32) {
        float f = 0;
        detail::read_le(values, f);
        v = f;
      } else {
        detail::read_le(values, v);
      }
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("corrupt checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

template <typename Scalar>
Checkpoint make_checkpoint(const ModelWeights<Scalar>& weights, const ModelConfig& model, const TrainConfig& train,
                           const nlohmann::ordered_json& meta, const AdamState<Scalar>* adam) {
  Checkpoint ckpt;
  ckpt.config["model"] = to_json(model);
  ckpt.config["train"] = to_json(train);
  ckpt.config["meta"] = meta.is_null() ? nlohmann::ordered_json::object() : meta;
  const auto params = weights.parameters();
  for (const Parameter<Scalar>* p : params) ckpt.tensors.push_back(to_named(p->name, p->value));
  for (const auto& [name, t] : weights.buffers()) ckpt.tensors.push_back(to_named(name, *t));
  if (adam && adam->step > 0) {
    if (adam->m.size() != params.size()) throw CheckpointError("Adam state does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt.tensors.push_back(to_named("adam.m." + params[i]->name, adam->m[i]));
      ckpt.tensors.push_back(to_named("adam.v." + params[i]->name, adam->v[i]));
    }
    ckpt.tensors.push_back({"adam.step", {1}, DType::f64, {static_cast<double>(adam->step)}});
  }
  return ckpt;
}

template <typename Scalar>
void restore_weights(const Checkpoint& ckpt, ModelWeights<Scalar>& weights) {
  for (Parameter<Scalar>* p : weights.parameters()) copy_into(ckpt, p->name, p->value);
  for (auto& [name, t] : weights.buffers()) copy_into(ckpt, name, *t);
}

template <typename Scalar>
bool restore_adam(const Checkpoint& ckpt, const ModelWeights<Scalar>& weights, AdamState<Scalar>& state) {
  const NamedTensor* step = ckpt.find("adam.step");
  if (!step) return false;
  if (step->values.size() != 1) throw CheckpointError("tensor \"adam.step\" must hold one value");
  AdamState<Scalar> restored;
  for (const Parameter<Scalar>* p : weights.parameters()) {
    copy_into(ckpt, "adam.m." + p->name, restored.m.emplace_back(p->value.shape()));
    copy_into(ckpt, "adam.v." + p->name, restored.v.emplace_back(p->value.shape()));
  }
  restored.step = static_cast<std::uint64_t>(step->values[0]);
  state = std::move(restored);
  return true;
}

#define CONVSST_INSTANTIATE_CHECKPOINT(S)                                                                     \
  template Checkpoint make_checkpoint(const ModelWeights<S>&, const ModelConfig&, const TrainConfig&,          \
                                      const nlohmann::ordered_json&, const AdamState<S>*);                     \
  template void restore_weights(const Checkpoint&, ModelWeights<S>&);                                          \
  template bool restore_adam(const Checkpoint&, const ModelWeights<S>&, AdamState<S>&);

CONVSST_INSTANTIATE_CHECKPOINT(float)
CONVSST_INSTANTIATE_CHECKPOINT(double)

#undef CONVSST_INSTANTIATE_CHECKPOINT

}  // namespace convsst
