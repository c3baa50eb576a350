#pragma once

#include <span>
#include <vector>

#include "ptse/tensor.hpp"

// Differentiable operators. Every function records its backward rule on the
// given tape when at least one input requires a gradient.
namespace ptse {

// Matrix products. matmul_nt computes a * b^T without materializing b^T.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);

// Elementwise, identical shapes.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor hadamard(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
/// factor * a + offset, elementwise.
Tensor affine(Tape& tape, const Tensor& a, double factor, double offset);

/// Adds a length-n bias row to every row of an m x n matrix.
Tensor add_bias(Tape& tape, const Tensor& a, const Tensor& bias);

Tensor relu(Tape& tape, const Tensor& a);
Tensor sigmoid(Tape& tape, const Tensor& a);
/// Row-wise softmax with per-row max subtraction. Throws NumericError on NaN/Inf input.
Tensor softmax_rows(Tape& tape, const Tensor& a);
/// Row-wise normalization to zero mean / unit variance, then gain * x + bias.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

Tensor sum(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);
/// sum(a .* weights) for a constant weight tensor of the same shape.
Tensor weighted_sum(Tape& tape, const Tensor& a, std::span<const double> weights);

Tensor concat(Tape& tape, std::span<const Tensor> parts, std::size_t axis);
Tensor concat(Tape& tape, std::initializer_list<Tensor> parts, std::size_t axis);
/// Copy of the index range [begin, end) along axis.
Tensor slice(Tape& tape, const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor gather_rows(Tape& tape, const Tensor& a, std::span<const std::size_t> rows);
Tensor reshape(Tape& tape, const Tensor& a, Shape shape);

/// 2-D convolution of a [C x H x W] input with [O x C x k x k] filters plus
/// a length-O bias; zero padding. Output is [O x H' x W'].
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding);

}  // namespace ptse
