#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedq/errors.hpp"
#include "fedq/tensor.hpp"

namespace fedq::data {

enum class DatasetName : std::uint8_t { Mnist, Cifar10, Synthetic };

/// Pixel normalization applied at load time: (px/255 - mean) / stddev,
/// the same constants for every channel.
struct Normalization {
  double mean = 0.0;
  double stddev = 1.0;
};

inline constexpr Normalization kMnistNorm{0.1307, 0.3081};
inline constexpr Normalization kCifarNorm{0.5, 0.5};
inline constexpr Normalization kNoNorm{0.0, 1.0};

struct Dataset {
  DatasetName name = DatasetName::Synthetic;
  Tensor images;  // (N, C, H, W)
  std::vector<int> labels;
  Normalization norm = kNoNorm;

  std::size_t size() const { return labels.size(); }
  std::vector<std::size_t> sample_shape() const {
    return {images.shape.begin() + 1, images.shape.end()};
  }
};

/// Reads the four standard IDX files (train-images-idx3-ubyte, ...) from
/// `dir`. Keeps at most the first 50000 training and 10000 test samples.
std::pair<Dataset, Dataset> load_mnist(const std::string& dir,
                                       Normalization norm = kMnistNorm);

/// Reads CIFAR-10 binary batches (data_batch_1..5.bin, test_batch.bin):
/// one label byte followed by 3072 pixel bytes (R, G, B planes) per record.
std::pair<Dataset, Dataset> load_cifar10(const std::string& dir,
                                         Normalization norm = kCifarNorm);

// Inverse of the loaders (denormalizes back to pixel bytes); used for
// fixtures and round-trip checks.
void write_mnist_idx(const std::string& images_path,
                     const std::string& labels_path, const Dataset& ds);
void write_cifar10_batch(const std::string& path, const Dataset& ds);

struct Partition {
  std::vector<std::vector<std::size_t>> client_indices;
};

/// IID split: per class, shuffle by seed and deal round-robin so every
/// client receives exactly floor(class_count / num_clients) samples of
/// every class; leftovers stay unassigned.
Partition partition_iid(const Dataset& ds, std::size_t num_clients,
                        std::uint64_t seed);

/// Gaussian blobs around per-class centroids of norm `margin`; linearly
/// separable with high probability. Deterministic per seed.
Dataset synthetic_dataset(std::size_t num_samples, int num_classes,
                          std::vector<std::size_t> input_shape,
                          std::uint64_t seed, double margin = 5.0);

Dataset take_first(const Dataset& ds, std::size_t n);
Dataset gather(const Dataset& ds, std::span<const std::size_t> indices);

}  // namespace fedq::data
