#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "prunelab/tensor.hpp"

namespace prunelab::data {

struct Dataset {
  Tensor images;            // [N, C, H, W], normalized
  std::vector<int> labels;  // N entries, each < class_count
  std::size_t class_count = 0;
  std::string source;

  std::size_t size() const { return labels.size(); }
};

inline constexpr float kCifarMean[3] = {0.4914f, 0.4822f, 0.4465f};
inline constexpr float kCifarStd[3] = {0.2470f, 0.2435f, 0.2616f};
inline constexpr float kMnistMean = 0.1307f;
inline constexpr float kMnistStd = 0.3081f;

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Reads 3073-byte CIFAR-10 records (label, then R, G, B 32x32 planes) from
/// the files in order, stopping after `limit` records.
Dataset load_cifar10_bin(std::span<const std::filesystem::path> paths,
                         std::size_t limit = std::numeric_limits<std::size_t>::max());

/// IDX image file (magic 0x00000803) and label file (0x00000801).
Dataset load_mnist_idx(const std::filesystem::path& image_path,
                       const std::filesystem::path& label_path,
                       std::size_t limit = std::numeric_limits<std::size_t>::max());

/// Copies of records [begin, begin + count).
Dataset slice(const Dataset& dataset, std::size_t begin, std::size_t count);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

/// One epoch's worth of batches in a fixed order. With shuffle on, the order
/// is a seeded Fisher-Yates permutation; the final short batch is kept.
class BatchSequence {
 public:
  BatchSequence(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed, bool shuffle);

  std::size_t size() const;
  Batch operator[](std::size_t index) const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset* dataset_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
};

BatchSequence batches(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed,
                      bool shuffle);

/// Gathers the listed records into a batch.
Batch gather(const Dataset& dataset, std::span<const std::size_t> indices);

}  // namespace prunelab::data
