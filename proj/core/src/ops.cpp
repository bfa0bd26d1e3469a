#include "prunelab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "prunelab/error.hpp"

namespace prunelab::ops {
namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

[[noreturn]] void shape_error(const std::string& message) {
  throw Error(ErrorCode::kShapeMismatch, message);
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    shape_error(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                to_string(t.shape()));
  }
}

struct ConvDims {
  std::size_t n, c, h, w;     // input
  std::size_t o, kh, kw;      // kernel
  std::size_t oh, ow;         // output
  std::size_t stride, pad;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

ConvDims conv_dims(const Tensor& input, const Tensor& weights, ConvGeometry geom) {
  require_rank(input, 4, "conv2d input");
  const Shape out = conv2d_output_shape(input.shape(), weights.shape(), geom);
  return {input.dim(0), input.dim(1), input.dim(2), input.dim(3), weights.dim(0), weights.dim(2),
          weights.dim(3), out[2], out[3], geom.stride, geom.padding};
}

// Valid output columns [lo, hi) for kernel column j: those whose input
// column x * stride + j - pad falls inside [0, w).
std::pair<std::size_t, std::size_t> valid_columns(const ConvDims& d, std::size_t j) {
  const auto pad = static_cast<std::ptrdiff_t>(d.pad);
  const auto stride = static_cast<std::ptrdiff_t>(d.stride);
  const auto off = static_cast<std::ptrdiff_t>(j) - pad;
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(d.w) - 1 - off) / stride + 1;
  if (static_cast<std::ptrdiff_t>(d.w) - 1 - off < 0) hi = 0;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(d.ow));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Unfolds one image [C,H,W] into a [C*kh*kw, oh*ow] patch block whose rows
// are `ld` floats apart.
void im2col(const float* image, const ConvDims& d, float* col, std::size_t ld) {
  const auto pad = static_cast<std::ptrdiff_t>(d.pad);
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        float* dst = col + ((c * d.kh + i) * d.kw + j) * ld;
        const auto [lo, hi] = valid_columns(d, j);
        for (std::size_t y = 0; y < d.oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * d.stride + i) - pad;
          float* row = dst + y * d.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) {
            std::fill(row, row + d.ow, 0.0f);
            continue;
          }
          const float* src = image + (c * d.h + static_cast<std::size_t>(iy)) * d.w + j - d.pad;
          std::fill(row, row + lo, 0.0f);
          if (d.stride == 1) {
            std::copy(src + lo, src + hi, row + lo);
          } else {
            for (std::size_t x = lo; x < hi; ++x) row[x] = src[x * d.stride];
          }
          std::fill(row + hi, row + d.ow, 0.0f);
        }
      }
    }
  }
}

// Scatter-adds a patch block back onto one image [C,H,W] (adjoint of im2col).
void col2im(const float* col, const ConvDims& d, float* image, std::size_t ld) {
  const auto pad = static_cast<std::ptrdiff_t>(d.pad);
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const float* src = col + ((c * d.kh + i) * d.kw + j) * ld;
        const auto [lo, hi] = valid_columns(d, j);
        for (std::size_t y = 0; y < d.oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * d.stride + i) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          float* dst = image + (c * d.h + static_cast<std::size_t>(iy)) * d.w + j - d.pad;
          const float* row = src + y * d.ow;
          for (std::size_t x = lo; x < hi; ++x) dst[x * d.stride] += row[x];
        }
      }
    }
  }
}


}  // namespace

Shape conv2d_output_shape(const Shape& input, const Shape& weights, ConvGeometry geom) {
  if (input.size() != 4) shape_error("conv2d input must be [N,C,H,W], got " + to_string(input));
  if (weights.size() != 4) {
    shape_error("conv2d weights must be [O,C,kh,kw], got " + to_string(weights));
  }
  if (weights[0] == 0 || weights[2] == 0 || weights[3] == 0) {
    shape_error("conv2d weights need positive extents, got " + to_string(weights));
  }
  if (geom.stride == 0) throw Error(ErrorCode::kInvalidArgument, "conv2d stride must be >= 1");
  if (input[1] != weights[1]) {
    shape_error("conv2d input channels: expected " + std::to_string(weights[1]) + ", got " +
                std::to_string(input[1]));
  }
  const std::size_t ph = input[2] + 2 * geom.padding;
  const std::size_t pw = input[3] + 2 * geom.padding;
  if (ph < weights[2] || pw < weights[3]) {
    shape_error("conv2d input " + to_string(input) + " smaller than kernel " + to_string(weights) +
                " after padding " + std::to_string(geom.padding));
  }
  return {input[0], weights[0], (ph - weights[2]) / geom.stride + 1,
          (pw - weights[3]) / geom.stride + 1};
}

// Convolutions run one GEMM per image, so an image's result does not depend
// on the batch it travels in.
Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      ConvGeometry geom) {
  const ConvDims d = conv_dims(input, weights, geom);
  require_shape(bias, {d.o}, "conv2d bias");

  Tensor out({d.n, d.o, d.oh, d.ow});
  std::vector<float> col(d.patch() * d.pixels());
  const ConstMatrixMap w(weights.ptr(), static_cast<Eigen::Index>(d.o),
                         static_cast<Eigen::Index>(d.patch()));
  const ConstMatrixMap patches(col.data(), static_cast<Eigen::Index>(d.patch()),
                               static_cast<Eigen::Index>(d.pixels()));
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(input.ptr() + n * d.c * d.h * d.w, d, col.data(), d.pixels());
    MatrixMap y(out.ptr() + n * d.o * d.pixels(), static_cast<Eigen::Index>(d.o),
                static_cast<Eigen::Index>(d.pixels()));
    y.noalias() = w * patches;
    for (std::size_t o = 0; o < d.o; ++o) {
      float* row = out.ptr() + (n * d.o + o) * d.pixels();
      const float bo = bias[o];
      for (std::size_t p = 0; p < d.pixels(); ++p) row[p] += bo;
    }
  }
  return out;
}

Tensor conv2d_forward(const Tensor& input, const ConvParams& params) {
  return conv2d_forward(input, params.weights, params.bias, params.geometry());
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& weights, ConvGeometry geom,
                          const Tensor& grad_out, ConvGradRequest request) {
  const ConvDims d = conv_dims(input, weights, geom);
  require_shape(grad_out, {d.n, d.o, d.oh, d.ow}, "conv2d grad_out");

  ConvGrads grads;
  if (request.input) grads.input = Tensor(input.shape());
  if (request.params) {
    grads.weights = Tensor(weights.shape());
    grads.bias = Tensor({d.o});
  }
  if (!request.input && !request.params) return grads;

  const auto patch = static_cast<Eigen::Index>(d.patch());
  const auto pixels = static_cast<Eigen::Index>(d.pixels());
  const auto outs = static_cast<Eigen::Index>(d.o);
  const ConstMatrixMap w(weights.ptr(), outs, patch);
  std::vector<float> col(d.patch() * d.pixels());

  for (std::size_t n = 0; n < d.n; ++n) {
    const ConstMatrixMap g(grad_out.ptr() + n * d.o * d.pixels(), outs, pixels);
    if (request.params) {
      im2col(input.ptr() + n * d.c * d.h * d.w, d, col.data(), d.pixels());
      const ConstMatrixMap patches(col.data(), patch, pixels);
      MatrixMap gw(grads.weights.ptr(), outs, patch);
      gw.noalias() += g * patches.transpose();
      for (std::size_t o = 0; o < d.o; ++o) {
        const float* row = grad_out.ptr() + (n * d.o + o) * d.pixels();
        float sum = 0.0f;
        for (std::size_t p = 0; p < d.pixels(); ++p) sum += row[p];
        grads.bias[o] += sum;
      }
    }
    if (request.input) {
      MatrixMap gcol(col.data(), patch, pixels);
      gcol.noalias() = w.transpose() * g;
      col2im(col.data(), d, grads.input.ptr() + n * d.c * d.h * d.w, d.pixels());
    }
  }
  return grads;
}

ConvGrads conv2d_backward(const Tensor& input, const ConvParams& params, const Tensor& grad_out,
                          ConvGradRequest request) {
  return conv2d_backward(input, params.weights, params.geometry(), grad_out, request);
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  require_shape(grad_out, input.shape(), "relu grad_out");
  Tensor grad(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) grad[i] = input[i] > 0.0f ? grad_out[i] : 0.0f;
  return grad;
}

PoolResult maxpool2(const Tensor& input) {
  require_rank(input, 4, "maxpool2 input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    shape_error("maxpool2 needs even spatial dims, got " + to_string(input.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  PoolResult result{Tensor({n, c, oh, ow}), PoolIndices{input.shape(), {}}};
  result.indices.argmax.resize(result.output.size());
  std::size_t k = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++k) {
        const std::size_t top = base + (2 * y) * w + 2 * x;
        const std::size_t window[4] = {top, top + 1, top + w, top + w + 1};
        std::size_t best = window[0];
        for (std::size_t cand : window) {
          if (input[cand] > input[best]) best = cand;  // strict: ties keep the earlier index
        }
        result.output[k] = input[best];
        result.indices.argmax[k] = best;
      }
    }
  }
  return result;
}

Tensor maxpool2_backward(const PoolIndices& indices, const Tensor& grad_out) {
  if (grad_out.size() != indices.argmax.size()) {
    shape_error("maxpool2 grad_out has " + std::to_string(grad_out.size()) +
                " elements, indices cover " + std::to_string(indices.argmax.size()));
  }
  Tensor grad(indices.input_shape);
  for (std::size_t k = 0; k < grad_out.size(); ++k) grad[indices.argmax[k]] += grad_out[k];
  return grad;
}

Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  require_rank(input, 2, "dense input");
  require_rank(weights, 2, "dense weights");
  if (input.dim(1) != weights.dim(0)) {
    shape_error("dense input features: expected " + std::to_string(weights.dim(0)) + ", got " +
                std::to_string(input.dim(1)));
  }
  require_shape(bias, {weights.dim(1)}, "dense bias");
  const auto n = static_cast<Eigen::Index>(input.dim(0));
  const auto d = static_cast<Eigen::Index>(weights.dim(0));
  const auto m = static_cast<Eigen::Index>(weights.dim(1));
  Tensor out({input.dim(0), weights.dim(1)});
  MatrixMap y(out.ptr(), n, m);
  y.noalias() = ConstMatrixMap(input.ptr(), n, d) * ConstMatrixMap(weights.ptr(), d, m);
  const Eigen::Map<const Eigen::RowVectorXf> b(bias.ptr(), m);
  y.rowwise() += b;
  return out;
}

DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                          bool need_input) {
  require_rank(input, 2, "dense input");
  require_rank(weights, 2, "dense weights");
  if (input.dim(1) != weights.dim(0)) {
    shape_error("dense input features: expected " + std::to_string(weights.dim(0)) + ", got " +
                std::to_string(input.dim(1)));
  }
  require_shape(grad_out, {input.dim(0), weights.dim(1)}, "dense grad_out");
  const auto n = static_cast<Eigen::Index>(input.dim(0));
  const auto d = static_cast<Eigen::Index>(weights.dim(0));
  const auto m = static_cast<Eigen::Index>(weights.dim(1));
  const ConstMatrixMap x(input.ptr(), n, d);
  const ConstMatrixMap w(weights.ptr(), d, m);
  const ConstMatrixMap g(grad_out.ptr(), n, m);

  DenseGrads grads{Tensor(), Tensor(weights.shape()), Tensor({weights.dim(1)})};
  MatrixMap(grads.weights.ptr(), d, m).noalias() = x.transpose() * g;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) grads.bias[static_cast<std::size_t>(j)] += g(i, j);
  }
  if (need_input) {
    grads.input = Tensor(input.shape());
    MatrixMap(grads.input.ptr(), n, d).noalias() = g * w.transpose();
  }
  return grads;
}

LossResult softmax_xent(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_xent logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    shape_error("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                std::to_string(n) + " rows");
  }
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "softmax_xent on an empty batch");
  LossResult result{0.0, Tensor(logits.shape())};
  std::vector<double> probs(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw Error(ErrorCode::kOutOfRange, "label " + std::to_string(labels[i]) + " at row " +
                                              std::to_string(i) + " outside [0," +
                                              std::to_string(k) + ")");
    }
    const float* row = logits.ptr() + i * k;
    const double top = *std::max_element(row, row + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[j] = std::exp(static_cast<double>(row[j]) - top);
      total += probs[j];
    }
    const auto y = static_cast<std::size_t>(labels[i]);
    result.loss += std::log(total) - (static_cast<double>(row[y]) - top);
    for (std::size_t j = 0; j < k; ++j) {
      const double target = j == y ? 1.0 : 0.0;
      result.grad_logits[i * k + j] =
          static_cast<float>((probs[j] / total - target) / static_cast<double>(n));
    }
  }
  result.loss /= static_cast<double>(n);
  return result;
}

}  // namespace prunelab::ops
