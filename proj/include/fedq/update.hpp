#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedq/quant.hpp"

namespace fedq {

enum class AggregationStrategy : std::uint8_t { FedAvg = 0, InverseMsqe = 1 };

/// Per-quantizable-layer bit widths, e.g. "4-2-2-4".
struct BitWidthConfig {
  std::vector<int> bits;

  static BitWidthConfig parse(const std::string& dash_string,
                              std::size_t expected_layers);
  std::string to_string() const;
  bool operator==(const BitWidthConfig&) const = default;
};

/// One client's uplink for a round.
///
/// Quantized runs carry one QuantizedTensor per quantizable weight tensor
/// (model order) plus a full-precision side-band with every non-quantized
/// parameter (biases, batch-norm scale/shift/running stats), stored at wire
/// precision (32-bit floats). The strategy decides the bookkeeping fields:
/// FedAvg updates carry the client's dataset size; inverse-MSQE updates
/// instead carry one mean-squared-quantization-error value per layer and
/// deliberately omit the dataset size.
///
/// Full-precision baseline runs put raw 32-bit weights in `raw_layers` and
/// leave `layers` empty; such updates never travel through the codec.
struct ClientUpdate {
  std::uint32_t client_id = 0;
  AggregationStrategy strategy = AggregationStrategy::FedAvg;
  std::vector<quant::QuantizedTensor> layers;
  std::vector<float> layer_msqe;               // iff strategy == InverseMsqe
  std::optional<std::uint32_t> dataset_size;   // iff strategy == FedAvg
  std::vector<std::vector<float>> sideband;
  std::vector<std::vector<float>> raw_layers;  // full-precision baseline only

  bool full_precision() const { return !raw_layers.empty(); }
  bool operator==(const ClientUpdate&) const = default;
};

}  // namespace fedq
