#include "convsst/ops.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace convsst {
namespace {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

using Eigen::Index;

template <typename Scalar>
MatMap<Scalar> mat(Scalar* p, std::size_t r, std::size_t c) {
  return MatMap<Scalar>(p, static_cast<Index>(r), static_cast<Index>(c));
}
template <typename Scalar>
ConstMatMap<Scalar> mat(const Scalar* p, std::size_t r, std::size_t c) {
  return ConstMatMap<Scalar>(p, static_cast<Index>(r), static_cast<Index>(c));
}

void require(bool cond, const std::string& message) {
  if (!cond) throw ShapeError(message);
}

// outer x axis x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  require(axis < shape.size(), "axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Visits every element of the permuted tensor in row-major order, calling
// fn(dst_index, src_index).
template <typename Fn>
void permute_walk(const Shape& src_shape, const std::vector<std::size_t>& axes, Fn&& fn) {
  const std::size_t rank = src_shape.size();
  const std::size_t total = numel(src_shape);
  if (total == 0) return;
  if (rank == 0) {
    fn(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> src_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) src_stride[i - 1] = src_stride[i] * src_shape[i];
  Shape dst_shape(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    dst_shape[i] = src_shape[axes[i]];
    stride[i] = src_stride[axes[i]];
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  const std::size_t last = dst_shape[rank - 1];
  const std::size_t last_stride = stride[rank - 1];
  for (std::size_t n = 0; n < total; n += last) {
    for (std::size_t j = 0; j < last; ++j) fn(n + j, off + j * last_stride);
    for (std::size_t a = rank - 1; a-- > 0;) {
      ++idx[a];
      off += stride[a];
      if (idx[a] < dst_shape[a]) break;
      off -= stride[a] * dst_shape[a];
      idx[a] = 0;
    }
  }
}

// Geometry shared by the 2D and 3D convolutions (2D runs with depth 1).
struct ConvGeometry {
  std::size_t batch, in_ch, out_ch, groups;
  std::size_t d, h, w;        // input spatial
  std::size_t kd, kh, kw;     // kernel
  std::size_t pd, ph, pw;     // padding
  std::size_t od, oh, ow;     // output spatial

  std::size_t in_g() const { return in_ch / groups; }
  std::size_t out_g() const { return out_ch / groups; }
  std::size_t in_volume() const { return d * h * w; }
  std::size_t out_volume() const { return od * oh * ow; }
  std::size_t col_rows() const { return in_g() * kd * kh * kw; }
};

// Column matrix [in_g*kd*kh*kw x od*oh*ow] for one sample and group.
template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* col) {
  const std::size_t ov = g.out_volume();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_g(); ++c) {
    const Scalar* xc = x + c * g.in_volume();
    for (std::size_t a = 0; a < g.kd; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          Scalar* out = col + row * ov;
          for (std::size_t z = 0; z < g.od; ++z) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z + a) - static_cast<std::ptrdiff_t>(g.pd);
            for (std::size_t y = 0; y < g.oh; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + b) - static_cast<std::ptrdiff_t>(g.ph);
              Scalar* o = out + (z * g.oh + y) * g.ow;
              if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.d) || iy < 0 ||
                  iy >= static_cast<std::ptrdiff_t>(g.h)) {
                std::fill(o, o + g.ow, Scalar(0));
                continue;
              }
              const Scalar* src = xc + (static_cast<std::size_t>(iz) * g.h + static_cast<std::size_t>(iy)) * g.w;
              for (std::size_t xo = 0; xo < g.ow; ++xo) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo + e) - static_cast<std::ptrdiff_t>(g.pw);
                o[xo] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? Scalar(0) : src[ix];
              }
            }
          }
        }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, const ConvGeometry& g, Scalar* dx) {
  const std::size_t ov = g.out_volume();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_g(); ++c) {
    Scalar* xc = dx + c * g.in_volume();
    for (std::size_t a = 0; a < g.kd; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          const Scalar* in = col + row * ov;
          for (std::size_t z = 0; z < g.od; ++z) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z + a) - static_cast<std::ptrdiff_t>(g.pd);
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.d)) continue;
            for (std::size_t y = 0; y < g.oh; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + b) - static_cast<std::ptrdiff_t>(g.ph);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              const Scalar* o = in + (z * g.oh + y) * g.ow;
              Scalar* dst = xc + (static_cast<std::size_t>(iz) * g.h + static_cast<std::size_t>(iy)) * g.w;
              for (std::size_t xo = 0; xo < g.ow; ++xo) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo + e) - static_cast<std::ptrdiff_t>(g.pw);
                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += o[xo];
              }
            }
          }
        }
  }
}

bool pointwise(const ConvGeometry& g) {
  return g.kd == 1 && g.kh == 1 && g.kw == 1 && g.pd == 0 && g.ph == 0 && g.pw == 0;
}

template <typename Scalar>
Tensor<Scalar> conv_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvGeometry& g,
                            const Shape& out_shape) {
  Tensor<Scalar> y(out_shape);
  std::vector<Scalar> col;
  if (!pointwise(g)) col.resize(g.col_rows() * g.out_volume());
  const std::size_t wg = g.out_g() * g.col_rows();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t gr = 0; gr < g.groups; ++gr) {
      const Scalar* xs = x.data() + (n * g.in_ch + gr * g.in_g()) * g.in_volume();
      const Scalar* cols = xs;
      if (!pointwise(g)) {
        im2col(xs, g, col.data());
        cols = col.data();
      }
      auto out = mat(y.data() + (n * g.out_ch + gr * g.out_g()) * g.out_volume(), g.out_g(), g.out_volume());
      out.noalias() = mat(w.data() + gr * wg, g.out_g(), g.col_rows()) *
                      mat(cols, g.col_rows(), g.out_volume());
    }
  }
  return y;
}

template <typename Scalar>
void conv_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& dy,
                   const ConvGeometry& g, Tensor<Scalar>* dx, Tensor<Scalar>* dw) {
  std::vector<Scalar> col;
  std::vector<Scalar> dcol;
  const bool pw = pointwise(g);
  if (!pw) {
    col.resize(g.col_rows() * g.out_volume());
    dcol.resize(col.size());
  }
  const std::size_t wg = g.out_g() * g.col_rows();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t gr = 0; gr < g.groups; ++gr) {
      const std::size_t x_off = (n * g.in_ch + gr * g.in_g()) * g.in_volume();
      auto dys = mat(dy.data() + (n * g.out_ch + gr * g.out_g()) * g.out_volume(), g.out_g(), g.out_volume());
      auto wm = mat(w.data() + gr * wg, g.out_g(), g.col_rows());
      if (dw) {
        const Scalar* cols = x.data() + x_off;
        if (!pw) {
          im2col(x.data() + x_off, g, col.data());
          cols = col.data();
        }
        mat(dw->data() + gr * wg, g.out_g(), g.col_rows()).noalias() +=
            dys * mat(cols, g.col_rows(), g.out_volume()).transpose();
      }
      if (dx) {
        if (pw) {
          mat(dx->data() + x_off, g.col_rows(), g.out_volume()).noalias() += wm.transpose() * dys;
        } else {
          mat(dcol.data(), g.col_rows(), g.out_volume()).noalias() = wm.transpose() * dys;
          col2im_add(dcol.data(), g, dx->data() + x_off);
        }
      }
    }
  }
}

std::size_t conv_extent(std::size_t in, std::size_t pad, std::size_t k, const char* axis) {
  require(k >= 1 && in + 2 * pad >= k, std::string("kernel larger than padded input along ") + axis +
                                           " (input " + std::to_string(in) + ", padding " +
                                           std::to_string(pad) + ", kernel " + std::to_string(k) + ")");
  return in + 2 * pad - k + 1;
}

template <typename Scalar>
Var<Scalar> conv_op(const Var<Scalar>& x, const Var<Scalar>& w, ConvGeometry g, Shape out_shape,
                    const char* name) {
  Tensor<Scalar> y = conv_forward(x.value(), w.value(), g, out_shape);
  return x.graph().record(
      std::move(y), {x, w},
      [g](const BackwardArgs<Scalar>& a) {
        conv_backward(*a.inputs[0], *a.inputs[1], a.grad, g, a.input_grads[0], a.input_grads[1]);
      },
      name);
}

}  // namespace

// ---------------------------------------------------------------------------

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "matmul shape mismatch: " + to_string(sa) + " x " + to_string(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<Scalar> out({m, n});
  out.matrix(m, n).noalias() = a.value().matrix(m, k) * b.value().matrix(k, n);
  return a.graph().record(
      std::move(out), {a, b},
      [m, k, n](const BackwardArgs<Scalar>& g) {
        auto dy = g.grad.matrix(m, n);
        if (g.input_grads[0]) g.input_grads[0]->matrix(m, k).noalias() += dy * g.inputs[1]->matrix(k, n).transpose();
        if (g.input_grads[1]) g.input_grads[1]->matrix(k, n).noalias() += g.inputs[0]->matrix(m, k).transpose() * dy;
      },
      "matmul");
}

namespace {

template <typename Scalar>
Var<Scalar> linear_impl(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>* bias) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  require(!sx.empty() && sw.size() == 2 && sx.back() == sw[0],
          "linear shape mismatch: " + to_string(sx) + " x " + to_string(sw));
  const std::size_t in = sw[0], outd = sw[1], rows = x.value().size() / std::max<std::size_t>(in, 1);
  if (bias) {
    require(bias->shape() == Shape{outd}, "linear bias shape " + to_string(bias->shape()));
  }
  Shape out_shape = sx;
  out_shape.back() = outd;
  Tensor<Scalar> out(out_shape);
  auto om = out.matrix(rows, outd);
  om.noalias() = x.value().matrix(rows, in) * w.value().matrix(in, outd);
  if (bias) om.rowwise() += bias->value().matrix(1, outd).row(0);

  std::vector<Var<Scalar>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return x.graph().record(
      std::move(out), inputs,
      [rows, in, outd](const BackwardArgs<Scalar>& g) {
        auto dy = g.grad.matrix(rows, outd);
        if (g.input_grads[0]) g.input_grads[0]->matrix(rows, in).noalias() += dy * g.inputs[1]->matrix(in, outd).transpose();
        if (g.input_grads[1]) g.input_grads[1]->matrix(in, outd).noalias() += g.inputs[0]->matrix(rows, in).transpose() * dy;
        if (g.input_grads.size() > 2 && g.input_grads[2]) {
          g.input_grads[2]->matrix(1, outd) += dy.colwise().sum();
        }
      },
      "linear");
}

}  // namespace

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w) {
  return linear_impl<Scalar>(x, w, nullptr);
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& bias) {
  return linear_impl<Scalar>(x, w, &bias);
}

template <typename Scalar>
Var<Scalar> batched_matmul(const Var<Scalar>& a, const Var<Scalar>& b, bool transpose_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0],
          "batched_matmul expects [b x m x k] operands, got " + to_string(sa) + " and " + to_string(sb));
  const std::size_t batch = sa[0], m = sa[1], k = sa[2];
  const std::size_t n = transpose_b ? sb[1] : sb[2];
  require((transpose_b ? sb[2] : sb[1]) == k,
          "batched_matmul inner mismatch: " + to_string(sa) + " and " + to_string(sb));
  Tensor<Scalar> out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    auto am = mat(a.value().data() + i * m * k, m, k);
    auto o = mat(out.data() + i * m * n, m, n);
    if (transpose_b) {
      o.noalias() = am * mat(b.value().data() + i * n * k, n, k).transpose();
    } else {
      o.noalias() = am * mat(b.value().data() + i * k * n, k, n);
    }
  }
  return a.graph().record(
      std::move(out), {a, b},
      [batch, m, k, n, transpose_b](const BackwardArgs<Scalar>& g) {
        for (std::size_t i = 0; i < batch; ++i) {
          auto dy = mat(g.grad.data() + i * m * n, m, n);
          auto am = mat(g.inputs[0]->data() + i * m * k, m, k);
          if (transpose_b) {
            auto bm = mat(g.inputs[1]->data() + i * n * k, n, k);
            if (g.input_grads[0]) mat(g.input_grads[0]->data() + i * m * k, m, k).noalias() += dy * bm;
            if (g.input_grads[1]) mat(g.input_grads[1]->data() + i * n * k, n, k).noalias() += dy.transpose() * am;
          } else {
            auto bm = mat(g.inputs[1]->data() + i * k * n, k, n);
            if (g.input_grads[0]) mat(g.input_grads[0]->data() + i * m * k, m, k).noalias() += dy * bm.transpose();
            if (g.input_grads[1]) mat(g.input_grads[1]->data() + i * k * n, k, n).noalias() += am.transpose() * dy;
          }
        }
      },
      "batched_matmul");
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - static_cast<std::ptrdiff_t>(sb.size())),
          "add: " + to_string(sb) + " does not broadcast onto " + to_string(sa));
  const std::size_t inner = b.value().size();
  const std::size_t reps = inner ? a.value().size() / inner : 0;
  Tensor<Scalar> out = a.value();
  if (reps) out.matrix(reps, inner) += b.value().matrix(1, inner).replicate(static_cast<Eigen::Index>(reps), 1);
  return a.graph().record(
      std::move(out), {a, b},
      [reps, inner](const BackwardArgs<Scalar>& g) {
        if (g.input_grads[0]) g.input_grads[0]->array() += g.grad.array();
        if (g.input_grads[1] && reps) g.input_grads[1]->matrix(1, inner) += g.grad.matrix(reps, inner).colwise().sum();
      },
      "add");
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a.shape() == b.shape(), "mul shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<Scalar> out(a.shape());
  out.array() = a.value().array() * b.value().array();
  return a.graph().record(
      std::move(out), {a, b},
      [](const BackwardArgs<Scalar>& g) {
        if (g.input_grads[0]) g.input_grads[0]->array() += g.grad.array() * g.inputs[1]->array();
        if (g.input_grads[1]) g.input_grads[1]->array() += g.grad.array() * g.inputs[0]->array();
      },
      "mul");
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape());
  out.array() = a.value().array() * factor;
  return a.graph().record(
      std::move(out), {a},
      [factor](const BackwardArgs<Scalar>& g) {
        if (g.input_grads[0]) g.input_grads[0]->array() += g.grad.array() * factor;
      },
      "scale");
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  double acc = 0.0;
  for (Scalar v : a.value().values()) acc += v;
  return a.graph().record(
      Tensor<Scalar>::scalar(static_cast<Scalar>(acc)), {a},
      [](const BackwardArgs<Scalar>& g) {
        if (g.input_grads[0]) g.input_grads[0]->array() += g.grad[0];
      },
      "sum");
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis);
  require(s.length > 0, "mean over empty axis");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<Scalar> out(out_shape);
  const Scalar* x = a.value().data();
  std::vector<double> acc(s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t l = 0; l < s.length; ++l) {
      const Scalar* row = x + (o * s.length + l) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) acc[i] += row[i];
    }
    for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] = static_cast<Scalar>(acc[i] / static_cast<double>(s.length));
  }
  return a.graph().record(
      std::move(out), {a},
      [s](const BackwardArgs<Scalar>& g) {
        if (!g.input_grads[0]) return;
        Scalar* dx = g.input_grads[0]->data();
        const Scalar inv = Scalar(1) / static_cast<Scalar>(s.length);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t l = 0; l < s.length; ++l) {
            Scalar* row = dx + (o * s.length + l) * s.inner;
            const Scalar* gr = g.grad.data() + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) row[i] += gr[i] * inv;
          }
      },
      "mean");
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  Tensor<Scalar> out = a.value().reshaped(std::move(shape));
  return a.graph().record(
      std::move(out), {a},
      [](const BackwardArgs<Scalar>& g) {
        if (g.input_grads[0]) g.input_grads[0]->array() += g.grad.array();
      },
      "reshape");
}

template <typename Scalar>
Var<Scalar> permute(const Var<Scalar>& a, std::vector<std::size_t> axes) {
  const Shape& sa = a.shape();
  require(axes.size() == sa.size(), "permute rank mismatch for " + to_string(sa));
  std::vector<bool> seen(axes.size(), false);
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    require(axes[i] < axes.size() && !seen[axes[i]], "permute axes are not a permutation");
    seen[axes[i]] = true;
    out_shape[i] = sa[axes[i]];
  }
  Tensor<Scalar> out(out_shape);
  const Scalar* src = a.value().data();
  Scalar* dst = out.data();
  permute_walk(sa, axes, [&](std::size_t d, std::size_t s) { dst[d] = src[s]; });
  return a.graph().record(
      std::move(out), {a},
      [axes, sa](const BackwardArgs<Scalar>& g) {
        if (!g.input_grads[0]) return;
        Scalar* dx = g.input_grads[0]->data();
        const Scalar* dy = g.grad.data();
        permute_walk(sa, axes, [&](std::size_t d, std::size_t s) { dx[s] += dy[d]; });
      },
      "permute");
}

template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis(a.shape(), axis);
  require(start + length <= s.length, "slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                          ") out of range for " + to_string(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  Tensor<Scalar> out(out_shape);
  const std::size_t chunk = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    const Scalar* src = a.value().data() + (o * s.length + start) * s.inner;
    std::copy(src, src + chunk, out.data() + o * chunk);
  }
  return a.graph().record(
      std::move(out), {a},
      [s, start, chunk](const BackwardArgs<Scalar>& g) {
        if (!g.input_grads[0]) return;
        for (std::size_t o = 0; o < s.outer; ++o) {
          Scalar* dst = g.input_grads[0]->data() + (o * s.length + start) * s.inner;
          const Scalar* src = g.grad.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      },
      "slice");
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat of nothing");
  Shape out_shape = parts[0].shape();
  require(axis < out_shape.size(), "concat axis out of range");
  out_shape[axis] = 0;
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    require(s.size() == out_shape.size(), "concat rank mismatch");
    lengths.push_back(s[axis]);
    out_shape[axis] += s[axis];
    s[axis] = 0;
    Shape ref = out_shape;
    ref[axis] = 0;
    require(s == ref, "concat shape mismatch: " + to_string(p.shape()));
  }
  const AxisSplit s = split_axis(out_shape, axis);
  Tensor<Scalar> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t chunk = lengths[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      const Scalar* src = parts[p].value().data() + o * chunk;
      std::copy(src, src + chunk, out.data() + (o * s.length + offset) * s.inner);
    }
    offset += lengths[p];
  }
  return parts[0].graph().record(
      std::move(out), parts,
      [s, lengths](const BackwardArgs<Scalar>& g) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < lengths.size(); ++p) {
          const std::size_t chunk = lengths[p] * s.inner;
          if (g.input_grads[p]) {
            for (std::size_t o = 0; o < s.outer; ++o) {
              const Scalar* src = g.grad.data() + (o * s.length + off) * s.inner;
              Scalar* dst = g.input_grads[p]->data() + o * chunk;
              for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
          }
          off += lengths[p];
        }
      },
      "concat");
}

template <typename Scalar>
Var<Scalar> repeat_leading(const Var<Scalar>& a, std::size_t count) {
  Shape out_shape = a.shape();
  out_shape.insert(out_shape.begin(), count);
  Tensor<Scalar> out(out_shape);
  const std::size_t n = a.value().size();
  for (std::size_t i = 0; i < count; ++i) std::copy(a.value().data(), a.value().data() + n, out.data() + i * n);
  return a.graph().record(
      std::move(out), {a},
      [count, n](const BackwardArgs<Scalar>& g) {
        if (g.input_grads[0] && count) g.input_grads[0]->matrix(1, n) += g.grad.matrix(count, n).colwise().sum();
      },
      "repeat_leading");
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, std::size_t groups, std::size_t padding) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  require(sx.size() == 4, "conv2d input must be [N x C x H x W], got " + to_string(sx));
  require(sw.size() == 4, "conv2d weight must be [Cout x Cin/g x kh x kw], got " + to_string(sw));
  require(groups >= 1 && sx[1] % groups == 0 && sw[0] % groups == 0,
          "conv2d channels (" + std::to_string(sx[1]) + " in, " + std::to_string(sw[0]) +
              " out) not divisible by groups " + std::to_string(groups));
  require(sw[1] == sx[1] / groups, "conv2d weight " + to_string(sw) + " does not match input channels " +
                                       std::to_string(sx[1]) + " with groups " + std::to_string(groups));
  ConvGeometry g{sx[0], sx[1], sw[0], groups, 1, sx[2], sx[3], 1, sw[2], sw[3], 0, padding, padding, 1, 0, 0};
  g.oh = conv_extent(g.h, padding, g.kh, "height");
  g.ow = conv_extent(g.w, padding, g.kw, "width");
  return conv_op(x, w, g, Shape{g.batch, g.out_ch, g.oh, g.ow}, "conv2d");
}

template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& w, std::array<std::size_t, 3> padding) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  require(sx.size() == 5, "conv3d input must be [N x C x D x H x W], got " + to_string(sx));
  require(sw.size() == 5 && sw[1] == sx[1],
          "conv3d weight " + to_string(sw) + " does not match input " + to_string(sx));
  ConvGeometry g{sx[0], sx[1], sw[0], 1, sx[2], sx[3], sx[4], sw[2], sw[3], sw[4],
                 padding[0], padding[1], padding[2], 0, 0, 0};
  g.od = conv_extent(g.d, g.pd, g.kd, "depth");
  g.oh = conv_extent(g.h, g.ph, g.kh, "height");
  g.ow = conv_extent(g.w, g.pw, g.kw, "width");
  return conv_op(x, w, g, Shape{g.batch, g.out_ch, g.od, g.oh, g.ow}, "conv3d");
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  require(s.length > 0, "softmax over empty axis");
  Tensor<Scalar> out(x.shape());
  const Scalar* in = x.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.length * s.inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) mx = std::max(mx, in[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.length; ++l) {
        const double e = std::exp(static_cast<double>(in[base + l * s.inner] - mx));
        out[base + l * s.inner] = static_cast<Scalar>(e);
        total += e;
      }
      for (std::size_t l = 0; l < s.length; ++l) {
        out[base + l * s.inner] = static_cast<Scalar>(static_cast<double>(out[base + l * s.inner]) / total);
      }
    }
  return x.graph().record(
      std::move(out), {x},
      [s](const BackwardArgs<Scalar>& g) {
        if (!g.input_grads[0]) return;
        const Scalar* y = g.output.data();
        const Scalar* dy = g.grad.data();
        Scalar* dx = g.input_grads[0]->data();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.length * s.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < s.length; ++l) dot += static_cast<double>(dy[base + l * s.inner]) * y[base + l * s.inner];
            for (std::size_t l = 0; l < s.length; ++l) {
              const std::size_t k = base + l * s.inner;
              dx[k] += static_cast<Scalar>(y[k] * (dy[k] - dot));
            }
          }
      },
      "softmax");
}

template <typename Scalar>
Var<Scalar> layernorm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  const Shape& sx = x.shape();
  require(!sx.empty() && sx.back() > 0, "layernorm needs a non-empty last axis, got " + to_string(sx));
  const std::size_t d = sx.back();
  require(gamma.shape() == Shape{d} && beta.shape() == Shape{d},
          "layernorm affine shape mismatch for last dim " + std::to_string(d));
  const std::size_t rows = x.value().size() / d;
  Tensor<Scalar> out(sx);
  std::vector<Scalar> mu(rows), rstd(rows);
  const Scalar* in = x.value().data();
  const Scalar* gm = gamma.value().data();
  const Scalar* bt = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* row = in + r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += row[j];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t j = 0; j < d; ++j) v += (row[j] - m) * (row[j] - m);
    v /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(v + static_cast<double>(eps));
    mu[r] = static_cast<Scalar>(m);
    rstd[r] = static_cast<Scalar>(rs);
    Scalar* o = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) o[j] = static_cast<Scalar>((row[j] - m) * rs) * gm[j] + bt[j];
  }
  return x.graph().record(
      std::move(out), {x, gamma, beta},
      [rows, d, mu = std::move(mu), rstd = std::move(rstd)](const BackwardArgs<Scalar>& g) {
        const Scalar* in = g.inputs[0]->data();
        const Scalar* gm = g.inputs[1]->data();
        const Scalar* dy = g.grad.data();
        std::vector<double> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* row = in + r * d;
          const Scalar* gr = dy + r * d;
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (static_cast<double>(row[j]) - mu[r]) * rstd[r];
            dxhat[j] = static_cast<double>(gr[j]) * gm[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          if (g.input_grads[0]) {
            Scalar* dx = g.input_grads[0]->data() + r * d;
            for (std::size_t j = 0; j < d; ++j) {
              dx[j] += static_cast<Scalar>(rstd[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
            }
          }
          if (g.input_grads[1]) {
            Scalar* dg = g.input_grads[1]->data();
            for (std::size_t j = 0; j < d; ++j) dg[j] += static_cast<Scalar>(gr[j] * xhat[j]);
          }
          if (g.input_grads[2]) {
            Scalar* db = g.input_grads[2]->data();
            for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
          }
        }
      },
      "layernorm");
}

template <typename Scalar>
Var<Scalar> batchnorm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                      Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var,
                      const BatchNormOptions& options) {
  const Shape& sx = x.shape();
  require(sx.size() >= 2, "batchnorm input must be [N x C x ...], got " + to_string(sx));
  const std::size_t n = sx[0], c = sx[1];
  const std::size_t spatial = c ? x.value().size() / (n * c) : 0;
  const std::size_t count = n * spatial;
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c} && running_mean.shape() == Shape{c} &&
              running_var.shape() == Shape{c},
          "batchnorm parameters do not match " + std::to_string(c) + " channels");
  if (options.training && count < 2) {
    throw ShapeError("batchnorm training needs at least 2 values per channel, got " + std::to_string(count));
  }

  std::vector<Scalar> mu(c), rstd(c);
  const Scalar* in = x.value().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m, v;
    if (options.training) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const Scalar* p = in + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) acc += p[i];
      }
      m = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const Scalar* p = in + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      v = sq / static_cast<double>(count);
      const double mom = options.momentum;
      running_mean[ch] = static_cast<Scalar>((1.0 - mom) * running_mean[ch] + mom * m);
      running_var[ch] = static_cast<Scalar>((1.0 - mom) * running_var[ch] +
                                            mom * v * static_cast<double>(count) / static_cast<double>(count - 1));
    } else {
      m = running_mean[ch];
      v = running_var[ch];
    }
    mu[ch] = static_cast<Scalar>(m);
    rstd[ch] = static_cast<Scalar>(1.0 / std::sqrt(v + options.eps));
  }

  Tensor<Scalar> out(sx);
  const Scalar* gm = gamma.value().data();
  const Scalar* bt = beta.value().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const Scalar* p = in + (b * c + ch) * spatial;
      Scalar* o = out.data() + (b * c + ch) * spatial;
      const Scalar a = rstd[ch] * gm[ch];
      const Scalar shift = bt[ch] - mu[ch] * a;
      for (std::size_t i = 0; i < spatial; ++i) o[i] = p[i] * a + shift;
    }

  const bool training = options.training;
  return x.graph().record(
      std::move(out), {x, gamma, beta},
      [n, c, spatial, count, training, mu = std::move(mu), rstd = std::move(rstd)](const BackwardArgs<Scalar>& g) {
        const Scalar* in = g.inputs[0]->data();
        const Scalar* gm = g.inputs[1]->data();
        const Scalar* dy = g.grad.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const Scalar* p = in + (b * c + ch) * spatial;
            const Scalar* gr = dy + (b * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
              sum_dy += gr[i];
              sum_dy_xhat += static_cast<double>(gr[i]) * (p[i] - mu[ch]) * rstd[ch];
            }
          }
          if (g.input_grads[1]) (*g.input_grads[1])[ch] += static_cast<Scalar>(sum_dy_xhat);
          if (g.input_grads[2]) (*g.input_grads[2])[ch] += static_cast<Scalar>(sum_dy);
          if (!g.input_grads[0]) continue;
          const double scale_c = static_cast<double>(gm[ch]) * rstd[ch];
          const double mean_dy = sum_dy / static_cast<double>(count);
          const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b) {
            const Scalar* p = in + (b * c + ch) * spatial;
            const Scalar* gr = dy + (b * c + ch) * spatial;
            Scalar* dx = g.input_grads[0]->data() + (b * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
              if (training) {
                const double xhat = (p[i] - mu[ch]) * static_cast<double>(rstd[ch]);
                dx[i] += static_cast<Scalar>(scale_c * (gr[i] - mean_dy - xhat * mean_dy_xhat));
              } else {
                dx[i] += static_cast<Scalar>(scale_c * gr[i]);
              }
            }
          }
        }
      },
      "batchnorm");
}

template <typename Scalar>
Var<Scalar> activation(const Var<Scalar>& x, Activation kind) {
  Tensor<Scalar> out(x.shape());
  const Scalar* in = x.value().data();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > Scalar(0) ? in[i] : Scalar(0);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(gelu_value(in[i]));
  }
  return x.graph().record(
      std::move(out), {x},
      [kind](const BackwardArgs<Scalar>& g) {
        if (!g.input_grads[0]) return;
        const Scalar* in = g.inputs[0]->data();
        Scalar* dx = g.input_grads[0]->data();
        if (kind == Activation::relu) {
          for (std::size_t i = 0; i < g.grad.size(); ++i) dx[i] += in[i] > Scalar(0) ? g.grad[i] : Scalar(0);
        } else {
          for (std::size_t i = 0; i < g.grad.size(); ++i) dx[i] += g.grad[i] * static_cast<Scalar>(gelu_derivative(in[i]));
        }
      },
      kind == Activation::relu ? "relu" : "gelu");
}

template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  // keep iff a uniform 64-bit draw lands at or above rate * 2^64
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(rate, 64));
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - rate));
  std::vector<Scalar> mask(x.value().size());
  for (auto& m : mask) m = rng() >= threshold ? keep_scale : Scalar(0);
  Tensor<Scalar> out(x.shape());
  out.array() = x.value().array() * Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(mask.data(), static_cast<Index>(mask.size()));
  return x.graph().record(
      std::move(out), {x},
      [mask = std::move(mask)](const BackwardArgs<Scalar>& g) {
        if (!g.input_grads[0]) return;
        Scalar* dx = g.input_grads[0]->data();
        for (std::size_t i = 0; i < mask.size(); ++i) dx[i] += g.grad[i] * mask[i];
      },
      "dropout");
}

template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const std::int32_t> targets) {
  const Shape& sl = logits.shape();
  require(sl.size() == 2, "cross_entropy expects [N x C] logits, got " + to_string(sl));
  const std::size_t n = sl[0], c = sl[1];
  require(targets.size() == n, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                   std::to_string(n) + " rows");
  for (std::int32_t t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw Error("cross_entropy target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  const Scalar* z = logits.value().data();
  std::vector<Scalar> probs(n * c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const Scalar* row = z + r * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[targets[r]];
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = static_cast<Scalar>(std::exp(row[j] - lse));
  }
  std::vector<std::int32_t> t(targets.begin(), targets.end());
  return logits.graph().record(
      Tensor<Scalar>::scalar(static_cast<Scalar>(total / static_cast<double>(n))), {logits},
      [n, c, probs = std::move(probs), t = std::move(t)](const BackwardArgs<Scalar>& g) {
        if (!g.input_grads[0]) return;
        const Scalar w = g.grad[0] / static_cast<Scalar>(n);
        Scalar* dz = g.input_grads[0]->data();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < c; ++j) dz[r * c + j] += w * probs[r * c + j];
          dz[r * c + static_cast<std::size_t>(t[r])] -= w;
        }
      },
      "cross_entropy");
}

#define CONVSST_INSTANTIATE_OPS(S)                                                                  \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                             \
  template Var<S> linear(const Var<S>&, const Var<S>&);                                             \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                              \
  template Var<S> batched_matmul(const Var<S>&, const Var<S>&, bool);                               \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                \
  template Var<S> scale(const Var<S>&, S);                                                          \
  template Var<S> sum(const Var<S>&);                                                               \
  template Var<S> mean(const Var<S>&, std::size_t);                                                 \
  template Var<S> reshape(const Var<S>&, Shape);                                                    \
  template Var<S> permute(const Var<S>&, std::vector<std::size_t>);                                 \
  template Var<S> slice(const Var<S>&, std::size_t, std::size_t, std::size_t);                      \
  template Var<S> concat(const std::vector<Var<S>>&, std::size_t);                                  \
  template Var<S> repeat_leading(const Var<S>&, std::size_t);                                       \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, std::size_t, std::size_t);                   \
  template Var<S> conv3d(const Var<S>&, const Var<S>&, std::array<std::size_t, 3>);                 \
  template Var<S> softmax(const Var<S>&, std::size_t);                                              \
  template Var<S> layernorm(const Var<S>&, const Var<S>&, const Var<S>&, S);                        \
  template Var<S> batchnorm(const Var<S>&, const Var<S>&, const Var<S>&, Tensor<S>&, Tensor<S>&,    \
                            const BatchNormOptions&);                                               \
  template Var<S> activation(const Var<S>&, Activation);                                            \
  template Var<S> dropout(const Var<S>&, double, bool, Rng&);                                       \
  template Var<S> cross_entropy(const Var<S>&, std::span<const std::int32_t>);

CONVSST_INSTANTIATE_OPS(float)
CONVSST_INSTANTIATE_OPS(double)

#undef CONVSST_INSTANTIATE_OPS

}  // namespace convsst
