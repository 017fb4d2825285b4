#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedq/nn.hpp"
#include "fedq/update.hpp"

namespace fedq::codec {

// Update payload layout (all integers little-endian):
//   magic "FQNT" | version (1) | strategy | layer_count u16
//   per layer: bits u8 | count u32 | scale f32 | msqe f32 (iff strategy 1)
//              | indices packed LSB-first, zero-padded to a byte
//   dataset_size u32 (iff strategy 0)
//   trailer: client_id u32 | sideband tensor count u16
//            | per tensor: length u32 + values f32
// Everything up to the trailer is the normative update format; the trailer
// carries bookkeeping the server needs that is not part of the accounted
// uplink payload.

std::vector<std::uint8_t> encode(const ClientUpdate& update);
ClientUpdate decode(std::span<const std::uint8_t> bytes);

struct BitBudget {
  std::uint64_t quantized_bits = 0;       // count·bits per layer + 32 per scale
                                          // (+32 per msqe under InverseMsqe)
  std::uint64_t full_precision_bits = 0;  // total weights · 32
  double savings_ratio = 0.0;             // full / quantized
};

/// Uplink accounting for the four quantizable weight tensors; header bytes
/// and the side-band are deliberately not part of the ratio.
BitBudget bit_budget(nn::ArchitectureId arch, const BitWidthConfig& config,
                     AggregationStrategy strategy);

/// On-wire size of an encoded update in bits (8 × encode().size()).
std::uint64_t encoded_bits(const ClientUpdate& update);

/// Bytes a serialized update spends on the accounted payload (header, layer
/// records, dataset size), excluding side-band and trailer.
std::uint64_t payload_wire_bytes(nn::ArchitectureId arch,
                                 const BitWidthConfig& config,
                                 AggregationStrategy strategy);

/// Published accounting rows for the four-layer MNIST model. Two of them
/// are internally inconsistent: the "4-2-2-4" row's expression multiplies
/// the second tensor by 4, and the printed ratios for "4-2-2-4"/"2-1-1-2"
/// do not match their own expressions. `expression_bits` is what the row
/// arithmetic actually uses; `printed_ratio` is the value as published.
struct ReferenceRow {
  const char* label;
  std::array<int, 4> expression_bits;
  double printed_ratio;
};
std::span<const ReferenceRow> reference_rows();

/// Human-readable accounting table: one row per config with exact bit
/// count, savings ratio, and on-wire payload bytes, plus footnotes wherever
/// a published reference row disagrees with the exact arithmetic.
std::vector<std::string> bit_budget_report(
    nn::ArchitectureId arch, std::span<const BitWidthConfig> configs,
    AggregationStrategy strategy);

// Model checkpoints: magic "FQMD" | version | architecture | layer count,
// then per layer kind/quantizable flags and the four parameter tensors with
// shape headers, values as 32-bit little-endian floats.
void save_model(const std::string& path, const nn::ModelParams& model);
nn::ModelParams load_model(const std::string& path);

// Fixed-width bit packing, exposed for direct tests.
std::vector<std::uint8_t> pack_bits(std::span<const std::uint32_t> values,
                                    int bits);
std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> bytes,
                                       int bits, std::size_t count);

}  // namespace fedq::codec
