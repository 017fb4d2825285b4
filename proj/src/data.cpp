#include "fedq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

namespace fedq::data {
namespace {

constexpr std::uint32_t kIdxImagesMagic = 2051;
constexpr std::uint32_t kIdxLabelsMagic = 2049;
constexpr std::size_t kTrainCap = 50000;
constexpr std::size_t kTestCap = 10000;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                        const std::string& path) {
  if (off + 4 > b.size()) throw FormatError("truncated header in " + path);
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

// Images come back unnormalized in [0, 255].
Tensor read_idx_images(const std::string& path, std::size_t cap) {
  auto bytes = read_file(path);
  if (read_be32(bytes, 0, path) != kIdxImagesMagic)
    throw FormatError("bad image magic in " + path);
  std::size_t count = read_be32(bytes, 4, path);
  std::size_t rows = read_be32(bytes, 8, path);
  std::size_t cols = read_be32(bytes, 12, path);
  count = std::min(count, cap);
  std::size_t need = 16 + count * rows * cols;
  if (bytes.size() < need) throw FormatError("truncated image data in " + path);
  Tensor t = Tensor::zeros({count, 1, rows, cols});
  for (std::size_t i = 0; i < count * rows * cols; ++i)
    t.data[i] = double(bytes[16 + i]);
  return t;
}

std::vector<int> read_idx_labels(const std::string& path, std::size_t cap) {
  auto bytes = read_file(path);
  if (read_be32(bytes, 0, path) != kIdxLabelsMagic)
    throw FormatError("bad label magic in " + path);
  std::size_t count = read_be32(bytes, 4, path);
  count = std::min(count, cap);
  if (bytes.size() < 8 + count) throw FormatError("truncated labels in " + path);
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = int(bytes[8 + i]);
  return labels;
}

void normalize(Tensor& images, Normalization norm) {
  for (double& v : images.data) v = (v / 255.0 - norm.mean) / norm.stddev;
}

unsigned char denormalize(double v, Normalization norm) {
  double px = std::round((v * norm.stddev + norm.mean) * 255.0);
  return static_cast<unsigned char>(std::clamp(px, 0.0, 255.0));
}

Dataset make(DatasetName name, Tensor images, std::vector<int> labels,
             Normalization norm, const std::string& origin) {
  if (images.shape[0] != labels.size())
    throw FormatError("image/label count mismatch in " + origin);
  if (labels.empty()) throw EmptyDataset("no samples in " + origin);
  normalize(images, norm);
  return Dataset{name, std::move(images), std::move(labels), norm};
}

// Box-Muller; avoids std::normal_distribution so byte-identical output does
// not depend on the standard library implementation.
template <class Rng>
double gaussian(Rng& rng) {
  double u1 = 1.0 - uniform_unit(rng);  // (0, 1]
  double u2 = uniform_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

std::pair<Dataset, Dataset> load_mnist(const std::string& dir,
                                       Normalization norm) {
  namespace fs = std::filesystem;
  auto p = [&](const char* f) { return (fs::path(dir) / f).string(); };
  Dataset train = make(
      DatasetName::Mnist, read_idx_images(p("train-images-idx3-ubyte"), kTrainCap),
      read_idx_labels(p("train-labels-idx1-ubyte"), kTrainCap), norm, dir);
  Dataset test = make(
      DatasetName::Mnist, read_idx_images(p("t10k-images-idx3-ubyte"), kTestCap),
      read_idx_labels(p("t10k-labels-idx1-ubyte"), kTestCap), norm, dir);
  return {std::move(train), std::move(test)};
}

void write_mnist_idx(const std::string& images_path,
                     const std::string& labels_path, const Dataset& ds) {
  const auto& s = ds.images.shape;
  std::ofstream imgs(images_path, std::ios::binary);
  std::ofstream labs(labels_path, std::ios::binary);
  if (!imgs || !labs) throw FormatError("cannot write MNIST files");
  write_be32(imgs, kIdxImagesMagic);
  write_be32(imgs, std::uint32_t(s[0]));
  write_be32(imgs, std::uint32_t(s[2]));
  write_be32(imgs, std::uint32_t(s[3]));
  for (double v : ds.images.data) {
    unsigned char px = denormalize(v, ds.norm);
    imgs.write(reinterpret_cast<const char*>(&px), 1);
  }
  write_be32(labs, kIdxLabelsMagic);
  write_be32(labs, std::uint32_t(ds.labels.size()));
  for (int l : ds.labels) {
    unsigned char b = static_cast<unsigned char>(l);
    labs.write(reinterpret_cast<const char*>(&b), 1);
  }
}

namespace {

constexpr std::size_t kCifarRecord = 3073;  // label + 32*32*3

void append_cifar_batch(const std::string& path, std::vector<double>& pixels,
                        std::vector<int>& labels, std::size_t cap) {
  auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    throw FormatError("record size mismatch in " + path);
  std::size_t count = bytes.size() / kCifarRecord;
  for (std::size_t i = 0; i < count && labels.size() < cap; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] > 9) throw FormatError("label out of range in " + path);
    labels.push_back(int(rec[0]));
    for (std::size_t j = 0; j < 3072; ++j) pixels.push_back(double(rec[1 + j]));
  }
}

Dataset cifar_dataset(std::vector<double> pixels, std::vector<int> labels,
                      Normalization norm, const std::string& origin) {
  Tensor images({labels.size(), 3, 32, 32}, std::move(pixels));
  return make(DatasetName::Cifar10, std::move(images), std::move(labels), norm,
              origin);
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar10(const std::string& dir,
                                         Normalization norm) {
  namespace fs = std::filesystem;
  std::vector<double> train_px, test_px;
  std::vector<int> train_lab, test_lab;
  for (int b = 1; b <= 5; ++b) {
    char name[32];
    std::snprintf(name, sizeof name, "data_batch_%d.bin", b);
    append_cifar_batch((fs::path(dir) / name).string(), train_px, train_lab,
                       kTrainCap);
  }
  append_cifar_batch((fs::path(dir) / "test_batch.bin").string(), test_px,
                     test_lab, kTestCap);
  return {cifar_dataset(std::move(train_px), std::move(train_lab), norm, dir),
          cifar_dataset(std::move(test_px), std::move(test_lab), norm, dir)};
}

void write_cifar10_batch(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  std::size_t per = 3072;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    unsigned char lab = static_cast<unsigned char>(ds.labels[i]);
    out.write(reinterpret_cast<const char*>(&lab), 1);
    for (std::size_t j = 0; j < per; ++j) {
      unsigned char px = denormalize(ds.images.data[i * per + j], ds.norm);
      out.write(reinterpret_cast<const char*>(&px), 1);
    }
  }
}

Partition partition_iid(const Dataset& ds, std::size_t num_clients,
                        std::uint64_t seed) {
  if (num_clients == 0) throw PartitionError("num_clients must be positive");
  if (ds.size() == 0) throw EmptyDataset("cannot partition an empty dataset");

  std::vector<std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto c = std::size_t(ds.labels[i]);
    if (c >= by_class.size()) by_class.resize(c + 1);
    by_class[c].push_back(i);
  }

  Partition part;
  part.client_indices.resize(num_clients);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < num_clients)
      throw PartitionError("class " + std::to_string(c) + " has only " +
                           std::to_string(idx.size()) + " samples for " +
                           std::to_string(num_clients) + " clients");
    std::mt19937_64 rng(derive_seed(seed, c, 0));
    shuffle_span(std::span<std::size_t>(idx), rng);
    std::size_t per = idx.size() / num_clients;
    for (std::size_t i = 0; i < per * num_clients; ++i)
      part.client_indices[i % num_clients].push_back(idx[i]);
  }
  for (auto& ci : part.client_indices) std::sort(ci.begin(), ci.end());
  return part;
}

Dataset synthetic_dataset(std::size_t num_samples, int num_classes,
                          std::vector<std::size_t> input_shape,
                          std::uint64_t seed, double margin) {
  if (num_samples == 0) throw EmptyDataset("num_samples must be positive");
  if (num_classes < 2) throw ConfigError("need at least two classes");
  std::size_t dim = Tensor::numel(input_shape);
  std::mt19937_64 rng(splitmix64(seed));

  // Per-class centroids: random directions scaled to norm `margin`.
  std::vector<std::vector<double>> centroids(
      static_cast<std::size_t>(num_classes));
  for (auto& c : centroids) {
    c.resize(dim);
    double norm2 = 0.0;
    for (double& v : c) {
      v = gaussian(rng);
      norm2 += v * v;
    }
    double scale = margin / std::sqrt(std::max(norm2, 1e-300));
    for (double& v : c) v *= scale;
  }

  std::vector<std::size_t> shape;
  shape.push_back(num_samples);
  shape.insert(shape.end(), input_shape.begin(), input_shape.end());
  Tensor images = Tensor::zeros(shape);
  std::vector<int> labels(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) {
    int cls = int(i % std::size_t(num_classes));
    labels[i] = cls;
    double* row = images.data.data() + i * dim;
    for (std::size_t j = 0; j < dim; ++j)
      row[j] = centroids[std::size_t(cls)][j] + gaussian(rng);
  }
  return Dataset{DatasetName::Synthetic, std::move(images), std::move(labels),
                 kNoNorm};
}

Dataset take_first(const Dataset& ds, std::size_t n) {
  if (n == 0 || n > ds.size())
    throw EmptyDataset("take_first: invalid sample count");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return gather(ds, idx);
}

Dataset gather(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw EmptyDataset("gather: empty index list");
  std::size_t dim = Tensor::numel(ds.sample_shape());
  std::vector<std::size_t> shape = {indices.size()};
  auto sample = ds.sample_shape();
  shape.insert(shape.end(), sample.begin(), sample.end());
  Tensor images = Tensor::zeros(shape);
  std::vector<int> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw PartitionError("index out of range");
    std::copy_n(ds.images.data.begin() + std::ptrdiff_t(indices[i] * dim), dim,
                images.data.begin() + std::ptrdiff_t(i * dim));
    labels[i] = ds.labels[indices[i]];
  }
  return Dataset{ds.name, std::move(images), std::move(labels), ds.norm};
}

}  // namespace fedq::data
