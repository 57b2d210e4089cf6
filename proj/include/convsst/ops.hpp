#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "convsst/graph.hpp"
#include "convsst/tensor.hpp"

// Differentiable operations over Var<Scalar>. Every op records its own
// backward closure on the graph that owns its inputs.
namespace convsst {

enum class Activation { relu, gelu };

// -- linear algebra ---------------------------------------------------------

/// a[m x k] * b[k x n].
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// x[..., in] * w[in x out] (+ bias[out]) applied to every leading row.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w);
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& bias);

/// Batched a[b x m x k] * b[b x k x n], or * b^T when `transpose_b`
/// (b given as [b x n x k]).
template <typename Scalar>
Var<Scalar> batched_matmul(const Var<Scalar>& a, const Var<Scalar>& b, bool transpose_b = false);

// -- elementwise and reductions --------------------------------------------

/// a + b, where b's shape equals a's shape or a trailing suffix of it.
template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a);
/// Mean over one axis; the axis is removed.
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a, std::size_t axis);

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}

// -- layout -----------------------------------------------------------------

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape);
/// General axis permutation: out.shape[i] = a.shape[axes[i]].
template <typename Scalar>
Var<Scalar> permute(const Var<Scalar>& a, std::vector<std::size_t> axes);
template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& a, std::size_t axis, std::size_t start, std::size_t length);
template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, std::size_t axis);
/// Stack `count` copies of a along a new leading axis.
template <typename Scalar>
Var<Scalar> repeat_leading(const Var<Scalar>& a, std::size_t count);

// -- convolution (stride 1) -------------------------------------------------

/// x[N x Cin x H x W], w[Cout x Cin/g x k x k] -> [N x Cout x H' x W'].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, std::size_t groups,
                   std::size_t padding);

/// x[N x Cin x D x H x W], w[Cout x Cin x kd x kh x kw] -> [N x Cout x D' x H' x W'].
template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& w, std::array<std::size_t, 3> padding);

// -- normalization and activations -----------------------------------------

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, std::size_t axis);

/// Normalizes over the last axis.
template <typename Scalar>
Var<Scalar> layernorm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                      Scalar eps);

struct BatchNormOptions {
  bool training = false;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// x[N x C x ...]. Training mode normalizes with batch statistics and blends
/// them into the running buffers; eval mode uses the buffers.
template <typename Scalar>
Var<Scalar> batchnorm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                      Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var,
                      const BatchNormOptions& options);

template <typename Scalar>
Var<Scalar> activation(const Var<Scalar>& x, Activation kind);
template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return activation(x, Activation::relu);
}
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  return activation(x, Activation::gelu);
}

/// Inverted dropout. Identity when `training` is false or `rate` is 0.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double rate, bool training, Rng& rng);

/// Mean over rows of -log softmax(logits)[target].
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const std::int32_t> targets);

// Scalar kernels shared with tests and the model.
double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace convsst
