#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "convsst/graph.hpp"
#include "convsst/model.hpp"

namespace convsst {

struct GradcheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;

  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

struct GradcheckOptions {
  double eps = 1e-5;
  // Denominator floor: rel = |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-3;
};

/// Compares backward gradients of every trainable parameter against central
/// differences (f(x+eps) - f(x-eps)) / 2eps. `loss_fn` must be deterministic
/// and return a scalar built on the graph it is given. Frozen parameters are
/// left out of the report.
template <typename Scalar>
GradcheckReport gradcheck(const std::function<Var<Scalar>(Graph<Scalar>&)>& loss_fn,
                          std::span<Parameter<Scalar>* const> params,
                          const GradcheckOptions& options = {});

/// Names of the built-in 64-bit checks: matmul, conv2d (grouped), conv3d,
/// softmax, layernorm, batchnorm, gelu, cross_entropy, msa, cgrm, model.
const std::vector<std::string>& gradcheck_families();

/// Runs one built-in check on a small random instance whose shapes and
/// values are drawn from `seed`. Every input tensor is checked along with
/// the weights. Throws Error for an unknown family.
GradcheckReport gradcheck_family(const std::string& family, std::uint64_t seed = 1,
                                 const GradcheckOptions& options = {});

/// End-to-end check of model_forward + cross-entropy in training mode with
/// dropout disabled.
GradcheckReport gradcheck_model(const ModelConfig& config, std::size_t batch, std::uint64_t seed,
                                const GradcheckOptions& options = {});

}  // namespace convsst
