#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedq/codec.hpp"
#include "fedq/data.hpp"
#include "fedq/nn.hpp"
#include "fedq/quant.hpp"
#include "fedq/update.hpp"

namespace fedq::fed {

struct RoundMetrics {
  std::size_t round = 0;  // 1-based
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::uint64_t uplink_bits = 0;  // weight-tensor accounting, summed over
                                  // the round's participants
  double wall_seconds = 0.0;
};

struct ClientTask {
  std::uint32_t client_id = 0;
  AggregationStrategy strategy = AggregationStrategy::FedAvg;
  bool full_precision = false;
  std::vector<quant::QuantSpec> specs;  // one per quantizable layer
  nn::SgdConfig sgd;
  std::size_t local_epochs = 1;
};

/// Quantization-aware local training. The optimizer updates a full-precision
/// master copy of each quantizable weight tensor; after every step the
/// network's tensor is replaced by the master's quantization (threshold per
/// its QuantSpec computed on the master, scale narrowed to 32-bit float), so
/// forward/backward always see grid-valued weights while the threshold always
/// sees the untruncated distribution. The returned update carries the final
/// step's level indices and scales, the per-layer mean squared quantization
/// error of that final projection, and a full-precision side-band with every
/// non-quantized parameter.
///
/// An all-zero weight tensor gets the degenerate substitute: scale 1, all
/// indices on the level nearest zero, msqe 0, local weights left unchanged.
ClientUpdate client_local_train(const nn::ModelParams& global,
                                const data::Dataset& local,
                                const ClientTask& task, std::mt19937_64& rng);

/// Per-coordinate weighted mean. `lambda` must be non-negative and sum to 1.
std::vector<double> weighted_mean(std::span<const std::vector<double>> rows,
                                  std::span<const double> lambda);

/// Normalized aggregation weights 1/max(e_j, 1e-12), one per client.
std::vector<double> normalized_inverse_weights(std::span<const double> errors);

/// Dataset-size-weighted mean of client updates (quantized tensors are
/// dequantized first). `sizes` overrides the updates' own dataset_size
/// fields when non-empty. Biases and batch-norm parameters ride the same
/// client weights.
nn::ModelParams aggregate_fedavg(const nn::ModelParams& reference,
                                 std::span<const ClientUpdate> updates,
                                 std::span<const std::uint32_t> sizes = {});

/// Per-layer inverse-MSQE weighting: client j's weight for layer i is
/// (1/e_ij) / sum_k (1/e_ik). Biases and batch-norm parameters reuse the
/// weights of the nearest preceding quantizable layer. Needs no dataset
/// sizes.
nn::ModelParams aggregate_inverse_msqe(const nn::ModelParams& reference,
                                       std::span<const ClientUpdate> updates);

// Side-band <-> model plumbing (canonical order: per layer, conv/linear
// contribute [bias], batch norm [gamma, beta, running_mean, running_var]).
std::vector<std::vector<float>> extract_sideband(const nn::ModelParams& model);

struct RunConfig {
  nn::ArchitectureId architecture = nn::ArchitectureId::MnistCnn;
  std::size_t num_clients = 5;
  std::size_t rounds = 10;
  double client_fraction = 1.0;
  std::size_t local_epochs = 1;
  BitWidthConfig bitwidths;  // ignored when full_precision
  quant::QuantMode mode = quant::QuantMode::Deterministic;
  quant::ThresholdMode threshold_mode = quant::ThresholdMode::Octav;
  AggregationStrategy strategy = AggregationStrategy::FedAvg;
  bool full_precision = false;
  nn::SgdConfig sgd;
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // client-level parallelism inside a round
};

struct RunResult {
  std::vector<RoundMetrics> metrics;
  nn::ModelParams model;
};

/// Algorithm: T rounds of (select clients, local QAT on each, uplink of
/// codec-encoded updates, aggregate, full-precision downlink). Fully
/// reproducible from config.seed regardless of `threads`.
RunResult run_federation(const RunConfig& config, const data::Dataset& train,
                         const data::Dataset& test);

std::string strategy_name(AggregationStrategy strategy);

/// CSV with header `round,strategy,config,train_acc,test_acc,uplink_bits`.
/// Lines in `comment` are written first, prefixed with '#'.
void write_metrics_csv(const std::string& path, AggregationStrategy strategy,
                       const std::string& config_label,
                       std::span<const RoundMetrics> metrics,
                       std::span<const std::string> comment = {});

}  // namespace fedq::fed
