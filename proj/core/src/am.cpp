#include "prunelab/am.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "prunelab/error.hpp"
#include "prunelab/ops.hpp"
#include "prunelab/random.hpp"

namespace prunelab::am {
namespace {

constexpr std::size_t kSeparator = 2;

struct Objective {
  double activation = 0.0;
  Tensor input_grad;
};

// The probed layer restricted to a single filter: the prefix network feeds
// it, and only that filter's map is computed and differentiated.
class FilterObjective {
 public:
  FilterObjective(const nn::Model& model, std::size_t layer_id, std::size_t filter_id)
      : model_(model), layer_id_(layer_id), geometry_(model.geometry(layer_id)) {
    const Tensor& w = model.params[layer_id].weights;
    const std::size_t per_filter = w.size() / w.dim(0);
    weights_ = Tensor({1, w.dim(1), w.dim(2), w.dim(3)});
    std::memcpy(weights_.ptr(), w.ptr() + filter_id * per_filter, per_filter * sizeof(float));
    bias_ = Tensor({1}, model.params[layer_id].bias[filter_id]);
  }

  Objective evaluate(const Tensor& x, bool with_grad) const {
    const nn::ForwardTrace trace = nn::forward_trace(model_, x, layer_id_);
    const Tensor& feed = trace.output();
    const Tensor map = ops::conv2d_forward(feed, weights_, bias_, geometry_);
    double total = 0.0;
    for (float v : map.data()) total += v;
    Objective result{total / static_cast<double>(map.size()), {}};
    if (!with_grad) return result;

    const Tensor grad_map(map.shape(), 1.0f / static_cast<float>(map.size()));
    ops::ConvGrads cg =
        ops::conv2d_backward(feed, weights_, geometry_, grad_map, {.input = true, .params = false});
    if (layer_id_ == 0) {
      result.input_grad = std::move(cg.input);
    } else {
      result.input_grad =
          nn::backward(model_, trace, cg.input, {.param_grads = false, .input_grad = true}).input;
    }
    return result;
  }

 private:
  const nn::Model& model_;
  std::size_t layer_id_;
  ops::ConvGeometry geometry_;
  Tensor weights_;
  Tensor bias_;
};

}  // namespace

void validate(const AmConfig& config) {
  if (!(config.eta > 0.0) || !std::isfinite(config.eta)) {
    throw Error(ErrorCode::kInvalidArgument, "AM step size eta must be positive");
  }
  if (config.iterations == 0) throw Error(ErrorCode::kInvalidArgument, "AM needs >= 1 iteration");
  if (!(config.init_scale >= 0.0f)) {
    throw Error(ErrorCode::kInvalidArgument, "AM init_scale must be non-negative");
  }
}

Pattern activation_maximize(const nn::Model& model, std::size_t layer_id, std::size_t filter_id,
                            const AmConfig& config) {
  validate(config);
  const std::size_t filters = model.filter_count(layer_id);
  if (filter_id >= filters) {
    throw Error(ErrorCode::kOutOfRange, "filter " + std::to_string(filter_id) + " out of range [0," +
                                            std::to_string(filters) + ")");
  }
  const FilterObjective objective(model, layer_id, filter_id);

  Tensor x(model.input.batch(1));
  Rng rng(config.seed);
  for (float& v : x.data()) v = rng.uniform(-config.init_scale, config.init_scale);

  Pattern pattern{layer_id, filter_id, {}, {}, config};
  pattern.activation_trace.reserve(config.iterations + 1);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const Objective step = objective.evaluate(x, true);
    pattern.activation_trace.push_back(step.activation);
    double scale = config.eta;
    if (config.normalize_grad) {
      double sq = 0.0;
      for (float g : step.input_grad.data()) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > 1e-12) scale /= norm;
    }
    const auto s = static_cast<float>(scale);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += s * step.input_grad[i];
    if (!x.all_finite()) {
      throw Error(ErrorCode::kDivergence, "activation maximization diverged at layer " +
                                              std::to_string(layer_id) + " filter " +
                                              std::to_string(filter_id) + " iteration " +
                                              std::to_string(it));
    }
  }
  pattern.activation_trace.push_back(objective.evaluate(x, false).activation);
  pattern.image = std::move(x).reshaped(
      {model.input.channels, model.input.height, model.input.width});
  return pattern;
}

std::vector<Pattern> activation_maximize_all(const nn::Model& model, std::size_t layer_id,
                                             std::span<const std::size_t> filters,
                                             const AmConfig& config, std::size_t threads) {
  std::vector<Pattern> patterns(filters.size());
  parallel_for(
      filters.size(),
      [&](std::size_t i) { patterns[i] = activation_maximize(model, layer_id, filters[i], config); },
      threads);
  return patterns;
}

std::vector<double> pattern_vector(const Tensor& image) {
  std::vector<double> v(image.data().begin(), image.data().end());
  if (v.empty()) return v;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  if (sd < 1e-8) {
    std::fill(v.begin(), v.end(), 0.0);
    return v;
  }
  for (double& x : v) x = (x - mean) / sd;
  return v;
}

std::vector<double> pattern_vector(const Pattern& pattern) { return pattern_vector(pattern.image); }

double vector_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kShapeMismatch, "vector lengths differ: " + std::to_string(a.size()) +
                                               " vs " + std::to_string(b.size()));
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(sq);
}

double pattern_distance(const Tensor& a, const Tensor& b) {
  require_shape(b, a.shape(), "pattern_distance");
  return vector_distance(pattern_vector(a), pattern_vector(b));
}

double pattern_distance(const Pattern& a, const Pattern& b) {
  return pattern_distance(a.image, b.image);
}

PnmImage render(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw Error(ErrorCode::kShapeMismatch,
                "renderable images are [1|3, H, W], got " + to_string(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  PnmImage out{w, h, c, std::vector<unsigned char>(c * h * w, 128)};
  const auto [lo, hi] = std::minmax_element(image.data().begin(), image.data().end());
  const float min = *lo, max = *hi;
  if (!(max > min)) return out;
  const double range = static_cast<double>(max) - min;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = (static_cast<double>(image[(ch * h + y) * w + x]) - min) / range;
        out.pixels[(y * w + x) * c + ch] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  return out;
}

PnmImage compose_grid(std::span<const PnmImage> cells, std::size_t columns) {
  if (cells.empty()) throw Error(ErrorCode::kInvalidArgument, "grid needs at least one cell");
  if (columns == 0) throw Error(ErrorCode::kInvalidArgument, "grid needs at least one column");
  const PnmImage& first = cells.front();
  for (const PnmImage& cell : cells) {
    if (cell.width != first.width || cell.height != first.height || cell.channels != first.channels) {
      throw Error(ErrorCode::kShapeMismatch, "grid cells must share dimensions and channels");
    }
  }
  const std::size_t cols = std::min(columns, cells.size());
  const std::size_t rows = (cells.size() + cols - 1) / cols;
  PnmImage grid;
  grid.channels = first.channels;
  grid.width = cols * first.width + (cols - 1) * kSeparator;
  grid.height = rows * first.height + (rows - 1) * kSeparator;
  grid.pixels.assign(grid.width * grid.height * grid.channels, 0);
  const std::size_t row_bytes = first.width * first.channels;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::size_t ox = (i % cols) * (first.width + kSeparator);
    const std::size_t oy = (i / cols) * (first.height + kSeparator);
    for (std::size_t y = 0; y < first.height; ++y) {
      std::memcpy(grid.pixels.data() + ((oy + y) * grid.width + ox) * grid.channels,
                  cells[i].pixels.data() + y * row_bytes, row_bytes);
    }
  }
  return grid;
}

void write_pnm(const PnmImage& image, const std::filesystem::path& path) {
  if (image.channels != 1 && image.channels != 3) {
    throw Error(ErrorCode::kInvalidArgument, "PNM output supports 1 or 3 channels");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << (image.channels == 3 ? "P6" : "P5") << "\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (!in || (magic != "P6" && magic != "P5") || maxval != 255) {
    throw Error(ErrorCode::kDataFormat, path.string() + " is not an 8-bit binary PPM/PGM");
  }
  in.get();  // single whitespace byte before the raster
  PnmImage image{width, height, magic == "P6" ? std::size_t{3} : std::size_t{1}, {}};
  image.pixels.resize(width * height * image.channels);
  in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.pixels.size())) {
    throw Error(ErrorCode::kDataFormat, path.string() + ": raster truncated");
  }
  return image;
}

void export_pattern_ppm(const Pattern& pattern, const std::filesystem::path& path) {
  write_pnm(render(pattern.image), path);
}

void export_grid_ppm(std::span<const Pattern> patterns, std::size_t columns,
                     const std::filesystem::path& path) {
  std::vector<PnmImage> cells;
  cells.reserve(patterns.size());
  for (const Pattern& p : patterns) cells.push_back(render(p.image));
  write_pnm(compose_grid(cells, columns), path);
}

}  // namespace prunelab::am
