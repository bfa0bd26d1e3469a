#include "prunelab/model.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "prunelab/error.hpp"
#include "prunelab/random.hpp"

namespace prunelab::nn {
using prunelab::to_string;

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::size_t parse_size(std::string_view text, std::string_view context) {
  std::size_t value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw Error(ErrorCode::kInvalidArgument,
                "expected an integer in " + std::string(context) + ", got '" + std::string(text) + "'");
  }
  return value;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t pos = text.find(sep, start);
    const std::size_t stop = pos == std::string_view::npos ? text.size() : pos;
    if (stop > start) parts.push_back(text.substr(start, stop - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::string trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r");
  return std::string(text.substr(first, last - first + 1));
}

std::string layer_label(std::size_t index, const LayerSpec& spec) {
  return "layer " + std::to_string(index) + " (" + to_string(spec) + ")";
}

Tensor channel_map(const Tensor& activations, std::size_t filter) {
  const std::size_t n = activations.dim(0), c = activations.dim(1);
  const std::size_t plane = activations.dim(2) * activations.dim(3);
  Tensor map({n, activations.dim(2), activations.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(map.ptr() + i * plane, activations.ptr() + (i * c + filter) * plane,
                plane * sizeof(float));
  }
  return map;
}

void check_trace(const Model& model, const ForwardTrace& trace) {
  if (trace.depth() > model.layers.size()) {
    throw Error(ErrorCode::kStaleCapture, "trace has " + std::to_string(trace.depth()) +
                                              " layers, model has " +
                                              std::to_string(model.layers.size()));
  }
  const std::size_t n = trace.input.rank() == 4 ? trace.input.dim(0) : 0;
  if (trace.input.shape() != model.input.batch(n)) {
    throw Error(ErrorCode::kStaleCapture,
                "trace input " + to_string(trace.input.shape()) + " does not match model input");
  }
  const auto shapes = infer_shapes(model.layers, model.input);
  for (std::size_t i = 0; i < trace.depth(); ++i) {
    Shape expected = shapes[i];
    expected[0] = n;
    if (trace.outputs[i].shape() != expected) {
      throw Error(ErrorCode::kStaleCapture,
                  "captured output of " + layer_label(i, model.layers[i]) + " has shape " +
                      to_string(trace.outputs[i].shape()) + ", model now produces " +
                      to_string(expected));
    }
  }
}

template <class T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

template <class T>
T get_le(std::string_view bytes, std::size_t offset) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return value;
}

void append_floats(std::string& out, const Tensor& t) {
  for (float v : t.data()) put_le(out, std::bit_cast<std::uint32_t>(v));
}

}  // namespace

std::string to_string(const LayerSpec& spec) {
  return std::visit(
      Overloaded{
          [](const Conv& c) {
            return "conv " + std::to_string(c.out_channels) + " " + std::to_string(c.kernel_h) +
                   " " + std::to_string(c.kernel_w) + " " + std::to_string(c.stride) + " " +
                   std::to_string(c.padding);
          },
          [](const ReLU&) { return std::string("relu"); },
          [](const MaxPool2&) { return std::string("maxpool2"); },
          [](const Flatten&) { return std::string("flatten"); },
          [](const Dense& d) { return "dense " + std::to_string(d.out_features); },
      },
      spec);
}

LayerSpec parse_layer_spec(std::string_view text) {
  const auto parts = split(text, ' ');
  if (parts.empty()) throw Error(ErrorCode::kInvalidArgument, "empty layer spec");
  const std::string_view kind = parts[0];
  auto arity = [&](std::size_t n) {
    if (parts.size() != n + 1) {
      throw Error(ErrorCode::kInvalidArgument,
                  "layer spec '" + std::string(text) + "' expects " + std::to_string(n) + " fields");
    }
  };
  if (kind == "conv") {
    arity(5);
    return Conv{parse_size(parts[1], text), parse_size(parts[2], text), parse_size(parts[3], text),
                parse_size(parts[4], text), parse_size(parts[5], text)};
  }
  if (kind == "relu") {
    arity(0);
    return ReLU{};
  }
  if (kind == "maxpool2") {
    arity(0);
    return MaxPool2{};
  }
  if (kind == "flatten") {
    arity(0);
    return Flatten{};
  }
  if (kind == "dense") {
    arity(1);
    return Dense{parse_size(parts[1], text)};
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown layer kind '" + std::string(kind) + "'");
}

std::vector<LayerSpec> architecture(std::string_view name) {
  if (name == "vgg-mini") {
    return architecture(
        "conv32,relu,conv32,relu,pool,conv64,relu,conv64,relu,pool,"
        "conv128,relu,conv128,relu,pool,flatten,dense10");
  }
  if (name == "toy") return architecture("conv8,relu,pool,conv8,relu,pool,flatten,dense10");

  std::vector<LayerSpec> layers;
  for (std::string_view token : split(name, ',')) {
    if (token == "relu") {
      layers.emplace_back(ReLU{});
    } else if (token == "pool") {
      layers.emplace_back(MaxPool2{});
    } else if (token == "flatten") {
      layers.emplace_back(Flatten{});
    } else if (token.starts_with("conv")) {
      layers.emplace_back(Conv{parse_size(token.substr(4), name), 3, 3, 1, 1});
    } else if (token.starts_with("dense")) {
      layers.emplace_back(Dense{parse_size(token.substr(5), name)});
    } else {
      throw Error(ErrorCode::kConfig, "unknown architecture token '" + std::string(token) +
                                          "' in '" + std::string(name) + "'");
    }
  }
  if (layers.empty()) throw Error(ErrorCode::kConfig, "empty architecture '" + std::string(name) + "'");
  return layers;
}

bool Model::is_conv(std::size_t layer) const {
  return layer < layers.size() && std::holds_alternative<Conv>(layers[layer]);
}

const Conv& Model::conv(std::size_t layer) const {
  if (!is_conv(layer)) {
    throw Error(ErrorCode::kOutOfRange,
                "layer " + std::to_string(layer) + " is not a conv layer (model has " +
                    std::to_string(layers.size()) + " layers)");
  }
  return std::get<Conv>(layers[layer]);
}

std::size_t Model::filter_count(std::size_t layer) const { return conv(layer).out_channels; }

std::vector<std::size_t> Model::conv_layers() const {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (is_conv(i)) ids.push_back(i);
  }
  return ids;
}

std::size_t Model::class_count() const {
  if (layers.empty() || !std::holds_alternative<Dense>(layers.back())) {
    throw Error(ErrorCode::kInvalidModel, "model does not end with a dense layer");
  }
  return std::get<Dense>(layers.back()).out_features;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params) total += p.weights.size() + p.bias.size();
  return total;
}

ops::ConvGeometry Model::geometry(std::size_t layer) const {
  const Conv& c = conv(layer);
  return {c.stride, c.padding};
}

std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, InputShape input) {
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape current = input.batch(1);
  if (input.channels == 0 || input.height == 0 || input.width == 0) {
    throw Error(ErrorCode::kInvalidModel, "input shape " + to_string(current) + " has a zero extent");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& spec = layers[i];
    auto fail = [&](const std::string& why) -> void {
      throw Error(ErrorCode::kInvalidModel,
                  layer_label(i, spec) + " does not accept input " + to_string(current) + ": " + why);
    };
    std::visit(Overloaded{
                   [&](const Conv& c) {
                     if (current.size() != 4) fail("conv needs a [N,C,H,W] input");
                     if (c.out_channels == 0) fail("conv needs at least one filter");
                     try {
                       current = ops::conv2d_output_shape(
                           current, {c.out_channels, current[1], c.kernel_h, c.kernel_w},
                           {c.stride, c.padding});
                     } catch (const Error& e) {
                       fail(e.what());
                     }
                   },
                   [&](const ReLU&) {},
                   [&](const MaxPool2&) {
                     if (current.size() != 4) fail("maxpool2 needs a [N,C,H,W] input");
                     if (current[2] % 2 || current[3] % 2) fail("maxpool2 needs even spatial dims");
                     current = {1, current[1], current[2] / 2, current[3] / 2};
                   },
                   [&](const Flatten&) {
                     if (current.size() != 4) fail("flatten needs a [N,C,H,W] input");
                     current = {1, current[1] * current[2] * current[3]};
                   },
                   [&](const Dense& d) {
                     if (current.size() != 2) fail("dense needs a flattened [N,D] input");
                     if (d.out_features == 0) fail("dense needs at least one output");
                     current = {1, d.out_features};
                   },
               },
               spec);
    shapes.push_back(current);
  }
  return shapes;
}

Model build_model(const std::vector<LayerSpec>& layers, InputShape input, std::uint64_t seed) {
  if (layers.empty() || !std::holds_alternative<Dense>(layers.back())) {
    throw Error(ErrorCode::kInvalidModel, "the final layer must be dense (class logits)");
  }
  const auto shapes = infer_shapes(layers, input);
  Model model{input, layers, {}, {}, seed, 0};
  model.params.resize(layers.size());
  Rng rng(seed);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Shape in = i == 0 ? input.batch(1) : shapes[i - 1];
    LayerParams& p = model.params[i];
    std::size_t fan_in = 0;
    if (const auto* c = std::get_if<Conv>(&layers[i])) {
      p.weights = Tensor({c->out_channels, in[1], c->kernel_h, c->kernel_w});
      p.bias = Tensor({c->out_channels});
      fan_in = in[1] * c->kernel_h * c->kernel_w;
    } else if (const auto* d = std::get_if<Dense>(&layers[i])) {
      p.weights = Tensor({in[1], d->out_features});
      p.bias = Tensor({d->out_features});
      fan_in = in[1];
    } else {
      continue;
    }
    const auto bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    for (float& w : p.weights.data()) w = rng.uniform(-bound, bound);
  }
  reset_velocity(model);
  return model;
}

void validate(const Model& model) {
  const auto shapes = infer_shapes(model.layers, model.input);
  if (model.params.size() != model.layers.size()) {
    throw Error(ErrorCode::kInvalidModel, "model has " + std::to_string(model.params.size()) +
                                              " parameter slots for " +
                                              std::to_string(model.layers.size()) + " layers");
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Shape in = i == 0 ? model.input.batch(1) : shapes[i - 1];
    const LayerParams& p = model.params[i];
    const std::string where = layer_label(i, model.layers[i]);
    if (const auto* c = std::get_if<Conv>(&model.layers[i])) {
      require_shape(p.weights, {c->out_channels, in[1], c->kernel_h, c->kernel_w}, where.c_str());
      require_shape(p.bias, {c->out_channels}, where.c_str());
    } else if (const auto* d = std::get_if<Dense>(&model.layers[i])) {
      require_shape(p.weights, {in[1], d->out_features}, where.c_str());
      require_shape(p.bias, {d->out_features}, where.c_str());
    } else if (!p.weights.empty() || !p.bias.empty()) {
      throw Error(ErrorCode::kInvalidModel, where + " carries parameters");
    }
  }
}

void reset_velocity(Model& model) {
  model.velocity.assign(model.params.size(), {});
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    model.velocity[i].weights = Tensor(model.params[i].weights.shape());
    model.velocity[i].bias = Tensor(model.params[i].bias.shape());
  }
}

namespace {

Tensor apply_layer(const Model& model, std::size_t i, const Tensor& x, ops::PoolIndices* pool) {
  const LayerParams& p = model.params[i];
  return std::visit(Overloaded{
                        [&](const Conv& c) {
                          return ops::conv2d_forward(x, p.weights, p.bias, {c.stride, c.padding});
                        },
                        [&](const ReLU&) { return ops::relu(x); },
                        [&](const MaxPool2&) {
                          auto r = ops::maxpool2(x);
                          if (pool) *pool = std::move(r.indices);
                          return std::move(r.output);
                        },
                        [&](const Flatten&) {
                          return x.reshaped({x.dim(0), x.size() / x.dim(0)});
                        },
                        [&](const Dense&) { return ops::dense_forward(x, p.weights, p.bias); },
                    },
                    model.layers[i]);
}

void check_batch(const Model& model, const Tensor& batch) {
  if (batch.rank() != 4 || batch.shape() != model.input.batch(batch.dim(0))) {
    throw Error(ErrorCode::kShapeMismatch,
                "batch shape " + to_string(batch.shape()) + " does not match model input " +
                    to_string(model.input.batch(batch.rank() ? batch.dim(0) : 0)));
  }
}

}  // namespace

ForwardTrace forward_trace(const Model& model, const Tensor& batch, std::optional<std::size_t> depth) {
  check_batch(model, batch);
  const std::size_t stop = depth.value_or(model.layers.size());
  if (stop > model.layers.size()) {
    throw Error(ErrorCode::kOutOfRange, "forward depth " + std::to_string(stop) + " exceeds " +
                                            std::to_string(model.layers.size()) + " layers");
  }
  ForwardTrace trace;
  trace.input = batch;
  trace.outputs.reserve(stop);
  trace.pools.resize(stop);
  for (std::size_t i = 0; i < stop; ++i) {
    const Tensor& x = i == 0 ? trace.input : trace.outputs[i - 1];
    trace.outputs.push_back(apply_layer(model, i, x, &trace.pools[i]));
  }
  return trace;
}

Tensor forward(const Model& model, const Tensor& batch) {
  check_batch(model, batch);
  Tensor x = batch;
  for (std::size_t i = 0; i < model.layers.size(); ++i) x = apply_layer(model, i, x, nullptr);
  return x;
}

Gradients backward(const Model& model, const ForwardTrace& trace, const Tensor& grad_output,
                   const BackwardOptions& options) {
  check_trace(model, trace);
  require_shape(grad_output, trace.output().shape(), "backward grad_output");
  const std::size_t depth = trace.depth();
  std::size_t lowest = 0;
  if (options.stop_after_layer) {
    if (*options.stop_after_layer >= depth) {
      throw Error(ErrorCode::kOutOfRange,
                  "stop layer " + std::to_string(*options.stop_after_layer) +
                      " not covered by a trace of depth " + std::to_string(depth));
    }
    lowest = *options.stop_after_layer + 1;
  }

  Gradients grads;
  grads.params.resize(model.layers.size());
  Tensor g = grad_output;
  for (std::size_t i = depth; i-- > lowest;) {
    const Tensor& x = i == 0 ? trace.input : trace.outputs[i - 1];
    const bool need_input = i > 0 || options.input_grad;
    const LayerParams& p = model.params[i];
    std::visit(Overloaded{
                   [&](const Conv& c) {
                     auto cg = ops::conv2d_backward(x, p.weights, {c.stride, c.padding}, g,
                                                    {need_input, options.param_grads});
                     if (options.param_grads) {
                       grads.params[i] = {std::move(cg.weights), std::move(cg.bias)};
                     }
                     g = std::move(cg.input);
                   },
                   [&](const ReLU&) { g = ops::relu_backward(x, g); },
                   [&](const MaxPool2&) { g = ops::maxpool2_backward(trace.pools[i], g); },
                   [&](const Flatten&) { g = std::move(g).reshaped(x.shape()); },
                   [&](const Dense&) {
                     auto dg = ops::dense_backward(x, p.weights, g, need_input);
                     if (options.param_grads) {
                       grads.params[i] = {std::move(dg.weights), std::move(dg.bias)};
                     }
                     g = std::move(dg.input);
                   },
               },
               model.layers[i]);
  }
  if (options.stop_after_layer) {
    grads.at_stop = std::move(g);
  } else if (options.input_grad) {
    grads.input = std::move(g);
  }
  return grads;
}

void sgd_step(Model& model, const Gradients& grads, float lr, float momentum) {
  if (!(lr > 0.0f)) throw Error(ErrorCode::kInvalidArgument, "learning rate must be positive");
  if (!(momentum >= 0.0f && momentum < 1.0f)) {
    throw Error(ErrorCode::kInvalidArgument, "momentum must lie in [0, 1)");
  }
  if (grads.params.size() != model.params.size()) {
    throw Error(ErrorCode::kShapeMismatch, "gradient set does not match model layers");
  }
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const LayerParams& p = model.params[i];
    const LayerParams& g = grads.params[i];
    require_shape(g.weights, p.weights.shape(), "sgd weight gradient");
    require_shape(g.bias, p.bias.shape(), "sgd bias gradient");
    if (!g.weights.all_finite() || !g.bias.all_finite()) {
      throw Error(ErrorCode::kDivergence,
                  "non-finite gradient at layer " + std::to_string(i) + " (step " +
                      std::to_string(model.step) + ")");
    }
  }
  if (model.velocity.size() != model.params.size()) reset_velocity(model);
  auto update = [&](Tensor& param, Tensor& velocity, const Tensor& grad) {
    if (velocity.shape() != param.shape()) velocity = Tensor(param.shape());
    for (std::size_t k = 0; k < param.size(); ++k) {
      velocity[k] = momentum * velocity[k] + grad[k];
      param[k] -= lr * velocity[k];
    }
  };
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    update(model.params[i].weights, model.velocity[i].weights, grads.params[i].weights);
    update(model.params[i].bias, model.velocity[i].bias, grads.params[i].bias);
  }
  ++model.step;
}

ActivationProbe layer_activation(const Model& model, const Tensor& batch, std::size_t layer_id,
                                 std::size_t filter_id) {
  const std::size_t filters = model.filter_count(layer_id);
  if (filter_id >= filters) {
    throw Error(ErrorCode::kOutOfRange, "filter " + std::to_string(filter_id) + " out of range [0," +
                                            std::to_string(filters) + ") at layer " +
                                            std::to_string(layer_id));
  }
  const ForwardTrace trace = forward_trace(model, batch, layer_id + 1);
  ActivationProbe probe{channel_map(trace.outputs[layer_id], filter_id), 0.0};
  double total = 0.0;
  for (float v : probe.map.data()) total += v;
  probe.summary = probe.map.size() ? total / static_cast<double>(probe.map.size()) : 0.0;
  return probe;
}

std::string serialize_checkpoint(const Model& model) {
  validate(model);
  std::ostringstream header;
  header << "prunelab-checkpoint\n";
  header << "seed=" << model.seed << "\n";
  header << "step=" << model.step << "\n";
  header << "input=" << model.input.channels << "," << model.input.height << ","
         << model.input.width << "\n";
  for (const LayerSpec& spec : model.layers) header << "layer=" << to_string(spec) << "\n";
  header << "blob_floats=" << model.parameter_count() << "\n";
  const std::string text = header.str();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + model.parameter_count() * 4);
  for (const LayerParams& p : model.params) {
    append_floats(out, p.weights);
    append_floats(out, p.bias);
  }
  return out;
}

Model parse_checkpoint(std::string_view bytes) {
  constexpr std::size_t kPrefix = 4 + 4 + 8;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw Error(ErrorCode::kBadMagic, "not a checkpoint (missing PRLB magic)");
  }
  if (bytes.size() < kPrefix) throw Error(ErrorCode::kTruncated, "checkpoint prefix truncated");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch, "checkpoint version " + std::to_string(version) +
                                                 ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPrefix) {
    throw Error(ErrorCode::kTruncated, "checkpoint header truncated");
  }
  const std::string_view header = bytes.substr(kPrefix, header_len);
  const std::string_view blob = bytes.substr(kPrefix + header_len);

  Model model;
  std::optional<std::size_t> blob_floats;
  bool seen_input = false;
  const auto lines = split(header, '\n');
  if (lines.empty() || trim(lines[0]) != "prunelab-checkpoint") {
    throw Error(ErrorCode::kMalformedHeader, "checkpoint header lacks its title line");
  }
  try {
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const std::string line = trim(lines[i]);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorCode::kMalformedHeader, "header line without '=': " + line);
      }
      const std::string key = line.substr(0, eq);
      const std::string_view value = std::string_view(line).substr(eq + 1);
      if (key == "seed") {
        model.seed = parse_size(value, "seed");
      } else if (key == "step") {
        model.step = parse_size(value, "step");
      } else if (key == "input") {
        const auto dims = split(value, ',');
        if (dims.size() != 3) throw Error(ErrorCode::kMalformedHeader, "input needs C,H,W");
        model.input = {parse_size(dims[0], "input"), parse_size(dims[1], "input"),
                       parse_size(dims[2], "input")};
        seen_input = true;
      } else if (key == "layer") {
        model.layers.push_back(parse_layer_spec(value));
      } else if (key == "blob_floats") {
        blob_floats = parse_size(value, "blob_floats");
      } else {
        throw Error(ErrorCode::kMalformedHeader, "unknown header key '" + key + "'");
      }
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kMalformedHeader) throw;
    throw Error(ErrorCode::kMalformedHeader, e.what());
  }
  if (!blob_floats || !seen_input || model.layers.empty()) {
    throw Error(ErrorCode::kMalformedHeader, "checkpoint header missing input, layers or blob_floats");
  }
  if (blob.size() < *blob_floats * 4) {
    throw Error(ErrorCode::kTruncated, "checkpoint blob holds " + std::to_string(blob.size()) +
                                           " bytes, header declares " +
                                           std::to_string(*blob_floats * 4));
  }
  if (blob.size() > *blob_floats * 4) {
    throw Error(ErrorCode::kSizeMismatch, "checkpoint has " +
                                              std::to_string(blob.size() - *blob_floats * 4) +
                                              " trailing bytes after the declared blob");
  }

  std::vector<Shape> shapes;
  try {
    shapes = infer_shapes(model.layers, model.input);
  } catch (const Error& e) {
    throw Error(ErrorCode::kMalformedHeader, e.what());
  }
  std::size_t expected = 0;
  model.params.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Shape in = i == 0 ? model.input.batch(1) : shapes[i - 1];
    if (const auto* c = std::get_if<Conv>(&model.layers[i])) {
      model.params[i] = {Tensor({c->out_channels, in[1], c->kernel_h, c->kernel_w}),
                         Tensor({c->out_channels})};
    } else if (const auto* d = std::get_if<Dense>(&model.layers[i])) {
      model.params[i] = {Tensor({in[1], d->out_features}), Tensor({d->out_features})};
    }
    expected += model.params[i].weights.size() + model.params[i].bias.size();
  }
  if (expected != *blob_floats) {
    throw Error(ErrorCode::kSizeMismatch, "layer specs need " + std::to_string(expected) +
                                              " floats, blob holds " + std::to_string(*blob_floats));
  }
  std::size_t offset = 0;
  auto read = [&](Tensor& t) {
    for (float& v : t.data()) {
      v = std::bit_cast<float>(get_le<std::uint32_t>(blob, offset));
      offset += 4;
    }
  };
  for (LayerParams& p : model.params) {
    read(p.weights);
    read(p.bias);
  }
  reset_velocity(model);
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_checkpoint(buffer.str());
}

}  // namespace prunelab::nn
