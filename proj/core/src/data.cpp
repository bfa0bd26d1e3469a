#include "prunelab/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "prunelab/error.hpp"
#include "prunelab/random.hpp"

namespace prunelab::data {
namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t big_endian_u32(const std::vector<unsigned char>& bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace

Dataset load_cifar10_bin(std::span<const std::filesystem::path> paths, std::size_t limit) {
  constexpr std::size_t kPlane = 32 * 32;
  std::vector<std::vector<unsigned char>> files;
  std::size_t total = 0;
  std::string source;
  for (const auto& path : paths) {
    if (total >= limit) break;
    auto bytes = read_file(path);
    if (bytes.size() % kCifarRecordBytes != 0) {
      throw Error(ErrorCode::kDataFormat, path.string() + ": length " + std::to_string(bytes.size()) +
                                              " is not a multiple of " +
                                              std::to_string(kCifarRecordBytes));
    }
    total += bytes.size() / kCifarRecordBytes;
    if (!source.empty()) source += ";";
    source += path.string();
    files.push_back(std::move(bytes));
  }
  const std::size_t n = std::min(total, limit);

  Dataset ds{Tensor({n, 3, 32, 32}), {}, 10, "cifar10:" + source};
  ds.labels.reserve(n);
  std::size_t record = 0;
  for (std::size_t f = 0; f < files.size() && record < n; ++f) {
    const auto& bytes = files[f];
    for (std::size_t off = 0; off < bytes.size() && record < n; off += kCifarRecordBytes, ++record) {
      const unsigned label = bytes[off];
      if (label > 9) {
        throw Error(ErrorCode::kDataFormat, "record " + std::to_string(record) + " has label byte " +
                                                std::to_string(label));
      }
      ds.labels.push_back(static_cast<int>(label));
      float* dst = ds.images.ptr() + record * 3 * kPlane;
      for (std::size_t c = 0; c < 3; ++c) {
        const unsigned char* src = bytes.data() + off + 1 + c * kPlane;
        for (std::size_t i = 0; i < kPlane; ++i) {
          dst[c * kPlane + i] = (static_cast<float>(src[i]) / 255.0f - kCifarMean[c]) / kCifarStd[c];
        }
      }
    }
  }
  return ds;
}

Dataset load_mnist_idx(const std::filesystem::path& image_path,
                       const std::filesystem::path& label_path, std::size_t limit) {
  const auto images = read_file(image_path);
  const auto labels = read_file(label_path);
  if (images.size() < 16 || big_endian_u32(images, 0) != 0x00000803) {
    throw Error(ErrorCode::kDataFormat, image_path.string() + ": bad IDX image magic");
  }
  if (labels.size() < 8 || big_endian_u32(labels, 0) != 0x00000801) {
    throw Error(ErrorCode::kDataFormat, label_path.string() + ": bad IDX label magic");
  }
  const std::size_t count = big_endian_u32(images, 4);
  const std::size_t rows = big_endian_u32(images, 8);
  const std::size_t cols = big_endian_u32(images, 12);
  const std::size_t label_count = big_endian_u32(labels, 4);
  if (count != label_count) {
    throw Error(ErrorCode::kDataFormat, "IDX image count " + std::to_string(count) +
                                            " disagrees with label count " +
                                            std::to_string(label_count));
  }
  if (images.size() != 16 + count * rows * cols || labels.size() != 8 + count) {
    throw Error(ErrorCode::kDataFormat, "IDX payload length disagrees with header dimensions");
  }
  const std::size_t n = std::min(count, limit);
  Dataset ds{Tensor({n, 1, rows, cols}), {}, 10, "mnist:" + image_path.string()};
  ds.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned label = labels[8 + i];
    if (label > 9) {
      throw Error(ErrorCode::kDataFormat, "IDX label " + std::to_string(label) + " at " + std::to_string(i));
    }
    ds.labels.push_back(static_cast<int>(label));
  }
  for (std::size_t i = 0; i < n * rows * cols; ++i) {
    ds.images[i] = (static_cast<float>(images[16 + i]) / 255.0f - kMnistMean) / kMnistStd;
  }
  return ds;
}

Dataset slice(const Dataset& dataset, std::size_t begin, std::size_t count) {
  if (begin > dataset.size() || count > dataset.size() - begin) {
    throw Error(ErrorCode::kOutOfRange, "slice [" + std::to_string(begin) + ", " +
                                            std::to_string(begin + count) + ") of " +
                                            std::to_string(dataset.size()) + " records");
  }
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  Batch b = gather(dataset, idx);
  return {std::move(b.images), std::move(b.labels), dataset.class_count, dataset.source};
}

Batch gather(const Dataset& dataset, std::span<const std::size_t> indices) {
  Shape shape = dataset.images.shape();
  const std::size_t stride = dataset.size() ? dataset.images.size() / dataset.size() : 0;
  shape[0] = indices.size();
  Batch batch{Tensor(shape), {}};
  batch.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::memcpy(batch.images.ptr() + i * stride, dataset.images.ptr() + indices[i] * stride,
                stride * sizeof(float));
    batch.labels.push_back(dataset.labels[indices[i]]);
  }
  return batch;
}

BatchSequence::BatchSequence(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed,
                             bool shuffle)
    : dataset_(&dataset), batch_size_(batch_size), order_(dataset.size()) {
  if (batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (shuffle && order_.size() > 1) {
    Rng rng(seed);
    for (std::size_t i = order_.size() - 1; i > 0; --i) std::swap(order_[i], order_[rng.index(i + 1)]);
  }
}

std::size_t BatchSequence::size() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

Batch BatchSequence::operator[](std::size_t index) const {
  if (index >= size()) {
    throw Error(ErrorCode::kOutOfRange, "batch " + std::to_string(index) + " of " + std::to_string(size()));
  }
  const std::size_t begin = index * batch_size_;
  const std::size_t end = std::min(order_.size(), begin + batch_size_);
  return gather(*dataset_, std::span(order_).subspan(begin, end - begin));
}

BatchSequence batches(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed,
                      bool shuffle) {
  return BatchSequence(dataset, batch_size, seed, shuffle);
}

}  // namespace prunelab::data
