#pragma once

// Activation maximization: gradient ascent on an input image to maximize
// the mean pre-ReLU response of one conv filter, plus the distance and
// rendering helpers used to compare the resulting patterns.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "prunelab/model.hpp"
#include "prunelab/parallel.hpp"
#include "prunelab/tensor.hpp"

namespace prunelab::am {

struct AmConfig {
  double eta = 0.1;
  std::size_t iterations = 256;
  std::uint64_t seed = 0;
  float init_scale = 0.1f;
  bool normalize_grad = true;
};

/// Throws Error(kInvalidArgument) unless eta > 0, iterations >= 1 and
/// init_scale >= 0.
void validate(const AmConfig& config);

struct Pattern {
  std::size_t layer_id = 0;
  std::size_t filter_id = 0;
  Tensor image;                           // [C, H, W]
  std::vector<double> activation_trace;   // iterations + 1 entries
  AmConfig config;

  double initial_activation() const { return activation_trace.front(); }
  double final_activation() const { return activation_trace.back(); }
};

/// The starting image depends only on config.seed, so the same filter index
/// in two models starts from the same noise.
Pattern activation_maximize(const nn::Model& model, std::size_t layer_id, std::size_t filter_id,
                            const AmConfig& config);

/// Independent runs for several filters of a frozen model, in filter order.
std::vector<Pattern> activation_maximize_all(const nn::Model& model, std::size_t layer_id,
                                             std::span<const std::size_t> filters,
                                             const AmConfig& config,
                                             std::size_t threads = worker_threads());

/// Flattened image standardized to zero mean and unit variance; all zeros
/// when the image is (numerically) constant.
std::vector<double> pattern_vector(const Tensor& image);
std::vector<double> pattern_vector(const Pattern& pattern);

double vector_distance(std::span<const double> a, std::span<const double> b);
double pattern_distance(const Tensor& a, const Tensor& b);
double pattern_distance(const Pattern& a, const Pattern& b);

/// 8-bit image with interleaved channels (1 = gray, 3 = RGB).
struct PnmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<unsigned char> pixels;
};

/// Min-max scales a [C,H,W] image (C = 1 or 3) to [0,255]; constant images
/// become mid-gray (128).
PnmImage render(const Tensor& image);

/// Row-major montage with 2-pixel black separators between cells.
PnmImage compose_grid(std::span<const PnmImage> cells, std::size_t columns);

/// P6 for 3 channels, P5 for 1 channel, maxval 255.
void write_pnm(const PnmImage& image, const std::filesystem::path& path);
PnmImage read_pnm(const std::filesystem::path& path);

void export_pattern_ppm(const Pattern& pattern, const std::filesystem::path& path);
void export_grid_ppm(std::span<const Pattern> patterns, std::size_t columns,
                     const std::filesystem::path& path);

}  // namespace prunelab::am
