#pragma once

#include <random>
#include <string>

#include "convsst/tensor.hpp"

namespace convsst::test {

template <typename Scalar = double>
Tensor<Scalar> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar = double>
Parameter<Scalar> random_param(std::string name, Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Parameter<Scalar>(std::move(name), random_tensor<Scalar>(std::move(shape), rng, lo, hi));
}

template <typename Scalar>
double max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

// Plain nested-loop references for the convolution kernels.
inline Tensor<double> conv2d_reference(const Tensor<double>& x, const Tensor<double>& w, std::size_t groups,
                                       std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  const std::size_t oh = h + 2 * pad - k + 1, ow = wd + 2 * pad - k + 1;
  Tensor<double> y({n, cout, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          const std::size_t g = co / cout_g;
          for (std::size_t ci = 0; ci < cin_g; ++ci)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const auto r = static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(pad);
                const auto c = static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(pad);
                if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(h) || c >= static_cast<std::ptrdiff_t>(wd)) continue;
                acc += x.at(b, g * cin_g + ci, r, c) * w.at(co, ci, ki, kj);
              }
          y.at(b, co, i, j) = acc;
        }
  return y;
}

inline Tensor<double> conv3d_reference(const Tensor<double>& x, const Tensor<double>& w,
                                       std::array<std::size_t, 3> pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), d = x.dim(2), h = x.dim(3), wd = x.dim(4);
  const std::size_t cout = w.dim(0), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  const std::size_t od = d + 2 * pad[0] - kd + 1, oh = h + 2 * pad[1] - kh + 1, ow = wd + 2 * pad[2] - kw + 1;
  Tensor<double> y({n, cout, od, oh, ow});
  auto inside = [](std::ptrdiff_t v, std::size_t lim) { return v >= 0 && v < static_cast<std::ptrdiff_t>(lim); };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t p = 0; p < od; ++p)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            double acc = 0.0;
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t a = 0; a < kd; ++a)
                for (std::size_t ki = 0; ki < kh; ++ki)
                  for (std::size_t kj = 0; kj < kw; ++kj) {
                    const auto z = static_cast<std::ptrdiff_t>(p + a) - static_cast<std::ptrdiff_t>(pad[0]);
                    const auto r = static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(pad[1]);
                    const auto c = static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(pad[2]);
                    if (!inside(z, d) || !inside(r, h) || !inside(c, wd)) continue;
                    acc += x.at(b, ci, z, r, c) * w.at(co, ci, a, ki, kj);
                  }
            y.at(b, co, p, i, j) = acc;
          }
  return y;
}

}  // namespace convsst::test
