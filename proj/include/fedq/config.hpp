#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>

#include "fedq/data.hpp"
#include "fedq/federation.hpp"

namespace fedq::cfg {

/// Flat experiment description; the string fields keep the exact spelling
/// used in config files and on the command line.
struct ExperimentConfig {
  std::string dataset = "mnist";  // mnist | cifar10 | synthetic
  std::string data_dir;           // default: $FEDQ_DATA_DIR or data/mnist
  std::string architecture = "mnist_cnn";  // mnist_cnn | cifar_cnn
  std::size_t clients = 5;
  std::size_t rounds = 10;
  double client_fraction = 1.0;
  std::size_t local_epochs = 1;
  std::string bitwidths = "4-4-4-4";
  std::string mode = "det";        // det | stoch
  std::string threshold = "octav"; // octav | max
  std::string strategy = "fedavg"; // fedavg | msqe
  bool full_precision = false;
  std::size_t trials = 1;
  std::uint64_t seed = 0;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 64;
  std::string output_dir = "out";
  std::size_t threads = 1;
  // 0 = keep everything the loader returns.
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;
  std::size_t synthetic_train = 500;
  std::size_t synthetic_test = 200;
};

/// Parses `key = value` lines from `file` (empty string = no file), then
/// applies `overrides` in order (same key=value syntax, typically from
/// flags). '#' starts a comment. Unknown keys and out-of-range values throw
/// ConfigError naming the key.
ExperimentConfig parse_config(const std::string& file,
                              std::span<const std::string> overrides);

/// Canonical `key = value` dump, one line per key, fixed order; equal
/// configs produce identical text.
std::string dump_config(const ExperimentConfig& c);

/// FNV-1a over dump_config(c); recorded as a comment in every output CSV.
std::uint64_t config_hash(const ExperimentConfig& c);

std::uint64_t fnv1a(std::span<const char> bytes);

/// Translates the validated strings into the federation run description.
/// The per-trial seed is filled in by the caller.
fed::RunConfig to_run_config(const ExperimentConfig& c);

std::pair<data::Dataset, data::Dataset> load_datasets(
    const ExperimentConfig& c);

}  // namespace fedq::cfg
