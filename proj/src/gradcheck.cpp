#include "convsst/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace convsst {

double GradcheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

template <typename Scalar>
GradcheckReport gradcheck(const std::function<Var<Scalar>(Graph<Scalar>&)>& loss_fn,
                          std::span<Parameter<Scalar>* const> params, const GradcheckOptions& options) {
  for (Parameter<Scalar>* p : params) p->zero_grad();
  {
    Graph<Scalar> graph(true);
    graph.backward(loss_fn(graph));
  }

  auto evaluate = [&]() {
    Graph<Scalar> graph(false);
    return static_cast<double>(loss_fn(graph).value().item());
  };

  GradcheckReport report;
  const auto eps = static_cast<Scalar>(options.eps);
  for (Parameter<Scalar>* p : params) {
    if (!p->trainable) continue;
    GradcheckEntry entry{p->name, p->size(), 0.0, 0.0};
    for (std::size_t i = 0; i < p->size(); ++i) {
      const Scalar saved = p->value[i];
      p->value[i] = saved + eps;
      const double plus = evaluate();
      p->value[i] = saved - eps;
      const double minus = evaluate();
      p->value[i] = saved;
      // divide by the step actually taken after rounding to Scalar
      const double step = static_cast<double>(static_cast<Scalar>(saved + eps)) -
                          static_cast<double>(static_cast<Scalar>(saved - eps));
      const double numeric = (plus - minus) / step;
      const double analytic = p->grad[i];
      const double abs_err = std::abs(analytic - numeric);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

template GradcheckReport gradcheck(const std::function<Var<float>(Graph<float>&)>&,
                                   std::span<Parameter<float>* const>, const GradcheckOptions&);
template GradcheckReport gradcheck(const std::function<Var<double>(Graph<double>&)>&,
                                   std::span<Parameter<double>* const>, const GradcheckOptions&);

}  // namespace convsst
