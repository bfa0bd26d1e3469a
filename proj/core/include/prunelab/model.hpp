#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "prunelab/ops.hpp"
#include "prunelab/tensor.hpp"

namespace prunelab::nn {

struct Conv {
  std::size_t out_channels = 1;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool operator==(const Conv&) const = default;
};
struct ReLU {
  bool operator==(const ReLU&) const = default;
};
struct MaxPool2 {
  bool operator==(const MaxPool2&) const = default;
};
struct Flatten {
  bool operator==(const Flatten&) const = default;
};
struct Dense {
  std::size_t out_features = 1;
  bool operator==(const Dense&) const = default;
};

using LayerSpec = std::variant<Conv, ReLU, MaxPool2, Flatten, Dense>;

/// Textual form used by checkpoints and config files, e.g. "conv 32 3 3 1 1",
/// "relu", "maxpool2", "flatten", "dense 10".
std::string to_string(const LayerSpec& spec);
LayerSpec parse_layer_spec(std::string_view text);

/// Named architectures ("vgg-mini", "toy") or a comma-separated compact list
/// such as "conv8,relu,pool,flatten,dense10" (conv layers are 3x3, pad 1).
std::vector<LayerSpec> architecture(std::string_view name);

struct InputShape {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  bool operator==(const InputShape&) const = default;
  Shape batch(std::size_t n) const { return {n, channels, height, width}; }
};

/// Empty tensors for parameter-free layers. Conv: weights [O,C,kh,kw],
/// bias [O]. Dense: weights [D,M], bias [M].
struct LayerParams {
  Tensor weights;
  Tensor bias;
};

struct Model {
  InputShape input;
  std::vector<LayerSpec> layers;
  std::vector<LayerParams> params;
  std::vector<LayerParams> velocity;  // SGD momentum buffers, zero after init/surgery
  std::uint64_t seed = 0;
  std::uint64_t step = 0;

  bool is_conv(std::size_t layer) const;
  /// Throws Error(kOutOfRange) unless `layer` is a conv layer.
  const Conv& conv(std::size_t layer) const;
  std::size_t filter_count(std::size_t layer) const;
  std::vector<std::size_t> conv_layers() const;
  std::size_t class_count() const;
  std::size_t parameter_count() const;
  ops::ConvGeometry geometry(std::size_t layer) const;
};

/// Per-layer output shapes (batch dimension 1) for a chain; throws
/// Error(kInvalidModel) naming the first layer that does not type-check.
std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, InputShape input);

/// He-uniform weights (bound sqrt(6 / fan_in)), zero biases.
Model build_model(const std::vector<LayerSpec>& layers, InputShape input, std::uint64_t seed);

/// Throws Error(kInvalidModel) when params disagree with the layer chain.
void validate(const Model& model);

void reset_velocity(Model& model);

struct ForwardTrace {
  Tensor input;
  std::vector<Tensor> outputs;  // outputs[i] is the output of layer i
  std::vector<ops::PoolIndices> pools;  // filled for MaxPool2 layers only

  std::size_t depth() const { return outputs.size(); }
  const Tensor& output() const { return depth() ? outputs.back() : input; }
};

/// Runs layers [0, depth) capturing every intermediate; depth defaults to the
/// whole network.
ForwardTrace forward_trace(const Model& model, const Tensor& batch,
                           std::optional<std::size_t> depth = std::nullopt);

/// Logits only; intermediates are released as soon as they are consumed.
Tensor forward(const Model& model, const Tensor& batch);

struct BackwardOptions {
  bool param_grads = true;
  bool input_grad = false;
  /// Stop once the gradient w.r.t. this layer's output is known.
  std::optional<std::size_t> stop_after_layer;
};

struct Gradients {
  std::vector<LayerParams> params;  // per layer; empty where not computed
  Tensor input;                     // filled when requested
  Tensor at_stop;                   // gradient w.r.t. output of stop_after_layer
};

/// Chain rule over a trace produced by forward_trace on the same model.
/// `grad_output` is the cotangent of the trace's last output. Throws
/// Error(kStaleCapture) if the model changed shape since the trace was taken.
Gradients backward(const Model& model, const ForwardTrace& trace, const Tensor& grad_output,
                   const BackwardOptions& options = {});

/// v <- momentum * v + g; p <- p - lr * v. Throws Error(kDivergence) on
/// non-finite gradients without touching the model.
void sgd_step(Model& model, const Gradients& grads, float lr, float momentum);

struct ActivationProbe {
  Tensor map;          // [N, H', W'] pre-ReLU feature map of one filter
  double summary = 0;  // mean over batch and spatial positions
};

ActivationProbe layer_activation(const Model& model, const Tensor& batch, std::size_t layer_id,
                                 std::size_t filter_id);

inline constexpr char kCheckpointMagic[4] = {'P', 'R', 'L', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: "PRLB", u32 version, u64 header length, UTF-8 header, raw f32
/// blob; all integers and floats little-endian. Velocity is not persisted.
std::string serialize_checkpoint(const Model& model);
Model parse_checkpoint(std::string_view bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace prunelab::nn
