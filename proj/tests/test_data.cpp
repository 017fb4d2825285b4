#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "fedq/data.hpp"
#include "fedq/errors.hpp"
#include "fedq/tensor.hpp"

using namespace fedq;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("fedq_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// A dataset whose stored values correspond exactly to integer pixel bytes,
// so writing and re-reading it is lossless.
data::Dataset byte_exact_dataset(std::size_t n, std::size_t channels,
                                 std::size_t side, data::Normalization norm,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  data::Dataset ds;
  ds.name = channels == 1 ? data::DatasetName::Mnist : data::DatasetName::Cifar10;
  ds.norm = norm;
  ds.images = Tensor::zeros({n, channels, side, side});
  ds.labels.resize(n);
  for (auto& v : ds.images.data) {
    double px = static_cast<double>(rng() % 256);
    v = (px / 255.0 - norm.mean) / norm.stddev;
  }
  for (auto& l : ds.labels) l = static_cast<int>(rng() % 10);
  return ds;
}

void check_same(const data::Dataset& a, const data::Dataset& b) {
  REQUIRE(a.size() == b.size());
  REQUIRE(a.images.shape == b.images.shape);
  CHECK(a.labels == b.labels);
  for (std::size_t i = 0; i < a.images.data.size(); ++i)
    CHECK(a.images.data[i] == doctest::Approx(b.images.data[i]).epsilon(1e-12));
}

}  // namespace

TEST_CASE("idx files round-trip through writer and loader") {
  fs::path dir = fresh_dir("idx_roundtrip");
  auto train = byte_exact_dataset(7, 1, 28, data::kMnistNorm, 5);
  auto test = byte_exact_dataset(5, 1, 28, data::kMnistNorm, 6);
  data::write_mnist_idx((dir / "train-images-idx3-ubyte").string(),
                        (dir / "train-labels-idx1-ubyte").string(), train);
  data::write_mnist_idx((dir / "t10k-images-idx3-ubyte").string(),
                        (dir / "t10k-labels-idx1-ubyte").string(), test);

  auto [ltrain, ltest] = data::load_mnist(dir.string());
  check_same(train, ltrain);
  check_same(test, ltest);
  CHECK(ltrain.name == data::DatasetName::Mnist);
}

TEST_CASE("idx loader rejects malformed files") {
  fs::path dir = fresh_dir("idx_malformed");
  auto train = byte_exact_dataset(7, 1, 28, data::kMnistNorm, 5);
  auto test = byte_exact_dataset(5, 1, 28, data::kMnistNorm, 6);
  auto img = (dir / "train-images-idx3-ubyte").string();
  auto lab = (dir / "train-labels-idx1-ubyte").string();
  data::write_mnist_idx(img, lab, train);
  data::write_mnist_idx((dir / "t10k-images-idx3-ubyte").string(),
                        (dir / "t10k-labels-idx1-ubyte").string(), test);

  SUBCASE("missing file") {
    fs::remove(img);
    CHECK_THROWS_AS(data::load_mnist(dir.string()), FormatError);
  }
  SUBCASE("bad magic") {
    std::fstream f(img, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('\x42');
    f.close();
    CHECK_THROWS_AS(data::load_mnist(dir.string()), FormatError);
  }
  SUBCASE("truncated image data") {
    fs::resize_file(img, 20);
    CHECK_THROWS_AS(data::load_mnist(dir.string()), FormatError);
  }
  SUBCASE("image/label count mismatch") {
    auto shorter = byte_exact_dataset(4, 1, 28, data::kMnistNorm, 7);
    data::write_mnist_idx((dir / "scratch-images").string(), lab, shorter);
    CHECK_THROWS_AS(data::load_mnist(dir.string()), FormatError);
  }
}

TEST_CASE("cifar batches round-trip through writer and loader") {
  fs::path dir = fresh_dir("cifar_roundtrip");
  auto train = byte_exact_dataset(4, 3, 32, data::kCifarNorm, 11);
  auto test = byte_exact_dataset(3, 3, 32, data::kCifarNorm, 12);
  for (int b = 1; b <= 5; ++b)
    data::write_cifar10_batch(
        (dir / ("data_batch_" + std::to_string(b) + ".bin")).string(), train);
  data::write_cifar10_batch((dir / "test_batch.bin").string(), test);

  auto [ltrain, ltest] = data::load_cifar10(dir.string());
  REQUIRE(ltrain.size() == 20);  // five copies of the same batch
  check_same(test, ltest);
  for (std::size_t copy = 0; copy < 5; ++copy) {
    for (std::size_t i = 0; i < train.size(); ++i)
      CHECK(ltrain.labels[copy * 4 + i] == train.labels[i]);
  }
  std::size_t dim = 3 * 32 * 32;
  for (std::size_t i = 0; i < dim; ++i)
    CHECK(ltrain.images.data[4 * dim + i] ==
          doctest::Approx(train.images.data[i]).epsilon(1e-12));

  SUBCASE("ragged record size is rejected") {
    std::ofstream((dir / "test_batch.bin").string(), std::ios::binary)
        << "short";
    CHECK_THROWS_AS(data::load_cifar10(dir.string()), FormatError);
  }
}

TEST_CASE("iid partition deals every class evenly") {
  auto ds = data::synthetic_dataset(100, 10, {1, 4, 4}, 21);
  auto part = data::partition_iid(ds, 5, 33);
  REQUIRE(part.client_indices.size() == 5);

  std::set<std::size_t> seen;
  for (const auto& idx : part.client_indices) {
    CHECK(idx.size() == 20);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    std::vector<int> per_class(10, 0);
    for (auto i : idx) {
      REQUIRE(i < ds.size());
      CHECK(seen.insert(i).second);  // disjoint across clients
      ++per_class[ds.labels[i]];
    }
    for (int c = 0; c < 10; ++c) CHECK(per_class[c] == 2);
  }
  CHECK(seen.size() == 100);
}

TEST_CASE("iid partition leaves leftovers unassigned") {
  // 103 samples over 10 classes: three classes have 11 samples, so one
  // sample of each stays out when 5 clients each take floor(11/5) = 2.
  auto ds = data::synthetic_dataset(103, 10, {1, 4, 4}, 22);
  auto part = data::partition_iid(ds, 5, 34);
  std::size_t total = 0;
  for (const auto& idx : part.client_indices) total += idx.size();
  CHECK(total == 100);
}

TEST_CASE("iid partition is deterministic per seed") {
  auto ds = data::synthetic_dataset(100, 10, {1, 4, 4}, 23);
  auto a = data::partition_iid(ds, 5, 7);
  auto b = data::partition_iid(ds, 5, 7);
  auto c = data::partition_iid(ds, 5, 8);
  CHECK(a.client_indices == b.client_indices);
  CHECK(a.client_indices != c.client_indices);
}

TEST_CASE("partition error cases") {
  auto ds = data::synthetic_dataset(100, 10, {1, 4, 4}, 24);
  CHECK_THROWS_AS(data::partition_iid(ds, 0, 1), PartitionError);
  // Fewer samples per class than clients.
  auto tiny = data::synthetic_dataset(4, 10, {1, 4, 4}, 25);
  CHECK_THROWS_AS(data::partition_iid(tiny, 5, 1), PartitionError);
  try {
    data::partition_iid(tiny, 5, 1);
  } catch (const PartitionError& e) {
    CHECK(std::string(e.what()).find("class") != std::string::npos);
  }
}

TEST_CASE("synthetic blobs are separable by nearest centroid") {
  auto ds = data::synthetic_dataset(200, 4, {1, 6, 6}, 31);
  REQUIRE(ds.size() == 200);
  std::size_t dim = 36;
  std::vector<std::vector<double>> mean(4, std::vector<double>(dim, 0.0));
  std::vector<double> count(4, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    int c = ds.labels[i];
    for (std::size_t d = 0; d < dim; ++d)
      mean[c][d] += ds.images.data[i * dim + d];
    count[c] += 1.0;
  }
  for (int c = 0; c < 4; ++c)
    for (std::size_t d = 0; d < dim; ++d) mean[c][d] /= count[c];

  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    int best = -1;
    double best_d = 1e300;
    for (int c = 0; c < 4; ++c) {
      double dist = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        double delta = ds.images.data[i * dim + d] - mean[c][d];
        dist += delta * delta;
      }
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    if (best == ds.labels[i]) ++correct;
  }
  CHECK(static_cast<double>(correct) / 200.0 >= 0.98);

  auto again = data::synthetic_dataset(200, 4, {1, 6, 6}, 31);
  CHECK(ds.images.data == again.images.data);
  CHECK(ds.labels == again.labels);
  CHECK_THROWS_AS(data::synthetic_dataset(10, 1, {1, 4, 4}, 1), ConfigError);
  CHECK_THROWS_AS(data::synthetic_dataset(0, 4, {1, 4, 4}, 1), EmptyDataset);
}

TEST_CASE("gather and take_first") {
  auto ds = data::synthetic_dataset(10, 2, {1, 3, 3}, 41);
  std::vector<std::size_t> pick{7, 0, 3};
  auto sub = data::gather(ds, pick);
  REQUIRE(sub.size() == 3);
  CHECK(sub.labels[0] == ds.labels[7]);
  CHECK(sub.labels[1] == ds.labels[0]);
  CHECK(sub.labels[2] == ds.labels[3]);
  std::size_t dim = 9;
  for (std::size_t d = 0; d < dim; ++d)
    CHECK(sub.images.data[d] == ds.images.data[7 * dim + d]);

  auto head = data::take_first(ds, 4);
  CHECK(head.size() == 4);
  CHECK(head.labels[2] == ds.labels[2]);

  std::vector<std::size_t> bad{11};
  CHECK_THROWS_AS(data::gather(ds, bad), PartitionError);
  CHECK_THROWS_AS(data::gather(ds, std::span<const std::size_t>{}),
                  EmptyDataset);
  CHECK_THROWS_AS(data::take_first(ds, 0), EmptyDataset);
  CHECK_THROWS_AS(data::take_first(ds, 11), EmptyDataset);
}
