#pragma once

// Differentiable primitives with explicit forward/backward pairs. All
// functions are pure: they never mutate their inputs and produce identical
// bits for identical arguments.

#include <cstddef>
#include <span>
#include <vector>

#include "prunelab/tensor.hpp"

namespace prunelab::ops {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// weights [out, in, kh, kw], bias [out].
struct ConvParams {
  Tensor weights;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t kernel_h() const { return weights.dim(2); }
  std::size_t kernel_w() const { return weights.dim(3); }
  ConvGeometry geometry() const { return {stride, padding}; }
};

/// Output shape of a cross-correlation, or Error(kShapeMismatch).
Shape conv2d_output_shape(const Shape& input, const Shape& weights, ConvGeometry geom);

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      ConvGeometry geom);
Tensor conv2d_forward(const Tensor& input, const ConvParams& params);

struct ConvGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

struct ConvGradRequest {
  bool input = true;
  bool params = true;
};

/// Gradients not requested are returned as empty tensors.
ConvGrads conv2d_backward(const Tensor& input, const Tensor& weights, ConvGeometry geom,
                          const Tensor& grad_out, ConvGradRequest request = {});
ConvGrads conv2d_backward(const Tensor& input, const ConvParams& params, const Tensor& grad_out,
                          ConvGradRequest request = {});

Tensor relu(const Tensor& input);
/// Passes grad where input > 0; exactly-zero inputs receive zero gradient.
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

struct PoolIndices {
  Shape input_shape;
  std::vector<std::size_t> argmax;  // flat input offset per output element
};

struct PoolResult {
  Tensor output;
  PoolIndices indices;
};

/// 2x2 window, stride 2. Ties resolve to the lowest flat index in the window.
PoolResult maxpool2(const Tensor& input);
Tensor maxpool2_backward(const PoolIndices& indices, const Tensor& grad_out);

/// input [N, D], weights [D, M], bias [M] -> [N, M].
Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias);

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                          bool need_input = true);

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Mean softmax cross-entropy over the batch and its gradient (softmax - onehot) / N.
LossResult softmax_xent(const Tensor& logits, std::span<const int> labels);

}  // namespace prunelab::ops
