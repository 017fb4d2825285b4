#include "fedq/codec.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace fedq::codec {
namespace {

constexpr char kUpdateMagic[4] = {'F', 'Q', 'N', 'T'};
constexpr char kModelMagic[4] = {'F', 'Q', 'M', 'D'};
constexpr std::uint8_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(std::uint8_t(v));
  out.push_back(std::uint8_t(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  void require(std::size_t n) const {
    if (pos + n > bytes.size()) throw CorruptPayload("truncated payload");
  }
  std::size_t remaining() const { return bytes.size() - pos; }
  std::uint8_t u8() {
    require(1);
    return bytes[pos++];
  }
  std::uint16_t u16() {
    require(2);
    std::uint16_t v = std::uint16_t(bytes[pos]) |
                      (std::uint16_t(bytes[pos + 1]) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    require(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    require(n);
    auto s = bytes.subspan(pos, n);
    pos += n;
    return s;
  }
};

std::size_t packed_bytes(std::size_t count, int bits) {
  return (count * std::size_t(bits) + 7) / 8;
}

}  // namespace

std::vector<std::uint8_t> pack_bits(std::span<const std::uint32_t> values,
                                    int bits) {
  std::vector<std::uint8_t> out(packed_bytes(values.size(), bits), 0);
  std::size_t bitpos = 0;
  for (std::uint32_t v : values) {
    for (int b = 0; b < bits; ++b, ++bitpos)
      if ((v >> b) & 1u) out[bitpos / 8] |= std::uint8_t(1u << (bitpos % 8));
  }
  return out;
}

std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> bytes,
                                       int bits, std::size_t count) {
  if (bytes.size() < packed_bytes(count, bits))
    throw CorruptPayload("packed index stream too short");
  std::vector<std::uint32_t> values(count, 0);
  std::size_t bitpos = 0;
  for (std::uint32_t& v : values) {
    for (int b = 0; b < bits; ++b, ++bitpos)
      if (bytes[bitpos / 8] & (1u << (bitpos % 8))) v |= 1u << b;
  }
  return values;
}

std::vector<std::uint8_t> encode(const ClientUpdate& update) {
  if (update.full_precision())
    throw EncodeError("full-precision updates are not serialized");
  if (update.layers.size() > std::numeric_limits<std::uint16_t>::max())
    throw EncodeError("too many layers");
  const bool msqe = update.strategy == AggregationStrategy::InverseMsqe;
  if (msqe && update.layer_msqe.size() != update.layers.size())
    throw EncodeError("inverse-MSQE update needs one msqe per layer");
  if (!msqe && !update.dataset_size)
    throw EncodeError("FedAvg update needs a dataset size");

  std::vector<std::uint8_t> out;
  out.insert(out.end(), kUpdateMagic, kUpdateMagic + 4);
  out.push_back(kVersion);
  out.push_back(std::uint8_t(update.strategy));
  put_u16(out, std::uint16_t(update.layers.size()));
  for (std::size_t i = 0; i < update.layers.size(); ++i) {
    const quant::QuantizedTensor& qt = update.layers[i];
    if (qt.bits < 1 || qt.bits > 32) throw EncodeError("bits out of range");
    if (qt.count() > std::numeric_limits<std::uint32_t>::max())
      throw EncodeError("layer too large");
    const std::uint64_t nlevels = quant::level_count(qt.bits);
    for (std::uint32_t v : qt.levels)
      if (std::uint64_t(v) >= nlevels)
        throw EncodeError("level index out of range for bit width");
    out.push_back(std::uint8_t(qt.bits));
    put_u32(out, std::uint32_t(qt.count()));
    put_f32(out, float(qt.scale));
    if (msqe) put_f32(out, update.layer_msqe[i]);
    auto packed = pack_bits(qt.levels, qt.bits);
    out.insert(out.end(), packed.begin(), packed.end());
  }
  if (!msqe) put_u32(out, *update.dataset_size);

  put_u32(out, update.client_id);
  if (update.sideband.size() > std::numeric_limits<std::uint16_t>::max())
    throw EncodeError("too many side-band tensors");
  put_u16(out, std::uint16_t(update.sideband.size()));
  for (const auto& t : update.sideband) {
    if (t.size() > std::numeric_limits<std::uint32_t>::max())
      throw EncodeError("side-band tensor too large");
    put_u32(out, std::uint32_t(t.size()));
    for (float v : t) put_f32(out, v);
  }
  return out;
}

ClientUpdate decode(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kUpdateMagic, 4) != 0)
    throw CorruptPayload("bad update magic");
  if (r.u8() != kVersion) throw CorruptPayload("unsupported version");
  std::uint8_t strat = r.u8();
  if (strat > 1) throw CorruptPayload("unknown strategy byte");

  ClientUpdate u;
  u.strategy = AggregationStrategy(strat);
  const bool msqe = u.strategy == AggregationStrategy::InverseMsqe;
  std::uint16_t layer_count = r.u16();
  u.layers.resize(layer_count);
  for (std::size_t i = 0; i < layer_count; ++i) {
    quant::QuantizedTensor& qt = u.layers[i];
    qt.bits = int(r.u8());
    if (qt.bits < 1 || qt.bits > 32) throw CorruptPayload("bad bit width");
    std::uint32_t count = r.u32();
    qt.scale = double(r.f32());
    if (msqe) u.layer_msqe.push_back(r.f32());
    qt.levels = unpack_bits(r.take(packed_bytes(count, qt.bits)), qt.bits,
                            count);
  }
  if (!msqe) u.dataset_size = r.u32();

  u.client_id = r.u32();
  std::uint16_t nside = r.u16();
  u.sideband.resize(nside);
  for (auto& t : u.sideband) {
    std::uint32_t len = r.u32();
    t.resize(len);
    for (auto& v : t) v = r.f32();
  }
  if (r.pos != bytes.size()) throw CorruptPayload("trailing bytes");
  return u;
}

std::uint64_t encoded_bits(const ClientUpdate& update) {
  return std::uint64_t(encode(update).size()) * 8;
}

BitBudget bit_budget(nn::ArchitectureId arch, const BitWidthConfig& config,
                     AggregationStrategy strategy) {
  auto counts = nn::quantizable_weight_counts(arch);
  if (config.bits.size() != counts.size())
    throw ConfigError("bit-width config does not match architecture layers");
  BitBudget b;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (config.bits[i] < 1 || config.bits[i] > 32)
      throw ConfigError("bit width out of range");
    b.quantized_bits += std::uint64_t(counts[i]) * std::uint64_t(config.bits[i]);
    b.full_precision_bits += std::uint64_t(counts[i]) * 32;
  }
  b.quantized_bits += std::uint64_t(counts.size()) * 32;  // scale factors
  if (strategy == AggregationStrategy::InverseMsqe)
    b.quantized_bits += std::uint64_t(counts.size()) * 32;  // msqe values
  b.savings_ratio =
      double(b.full_precision_bits) / double(b.quantized_bits);
  return b;
}

std::uint64_t payload_wire_bytes(nn::ArchitectureId arch,
                                 const BitWidthConfig& config,
                                 AggregationStrategy strategy) {
  auto counts = nn::quantizable_weight_counts(arch);
  if (config.bits.size() != counts.size())
    throw ConfigError("bit-width config does not match architecture layers");
  const bool msqe = strategy == AggregationStrategy::InverseMsqe;
  std::uint64_t bytes = 8;  // magic + version + strategy + layer count
  for (std::size_t i = 0; i < counts.size(); ++i)
    bytes += (msqe ? 13 : 9) +
             packed_bytes(counts[i], config.bits[i]);
  if (!msqe) bytes += 4;  // dataset size
  return bytes;
}

std::span<const ReferenceRow> reference_rows() {
  static const ReferenceRow rows[] = {
      {"4-4-4-4", {4, 4, 4, 4}, 8.00},
      {"4-2-2-4", {4, 4, 2, 4}, 15.53},
      {"2-2-2-2", {2, 2, 2, 2}, 15.98},
      {"2-1-1-2", {2, 1, 1, 2}, 31.12},
  };
  return rows;
}

std::vector<std::string> bit_budget_report(
    nn::ArchitectureId arch, std::span<const BitWidthConfig> configs,
    AggregationStrategy strategy) {
  std::vector<std::string> lines;
  char buf[192];
  std::uint64_t full =
      std::uint64_t(nn::total_quantizable_weights(arch)) * 32;
  std::snprintf(buf, sizeof buf, "full-precision weights: %llu bits",
                static_cast<unsigned long long>(full));
  lines.push_back(buf);
  std::snprintf(buf, sizeof buf, "%-12s %12s %8s %12s", "config",
                "payload_bits", "ratio", "wire_bytes");
  lines.push_back(buf);
  std::vector<std::string> notes;
  for (const BitWidthConfig& c : configs) {
    BitBudget b = bit_budget(arch, c, strategy);
    std::uint64_t wire = payload_wire_bytes(arch, c, strategy);
    std::string label = c.to_string();
    std::snprintf(buf, sizeof buf, "%-12s %12llu %8.2f %12llu", label.c_str(),
                  static_cast<unsigned long long>(b.quantized_bits),
                  b.savings_ratio, static_cast<unsigned long long>(wire));
    lines.push_back(buf);
    if (arch != nn::ArchitectureId::MnistCnn) continue;
    for (const ReferenceRow& row : reference_rows()) {
      if (label != row.label) continue;
      BitWidthConfig expr;
      expr.bits.assign(row.expression_bits.begin(),
                       row.expression_bits.end());
      // Reference rows count only the four 32-bit scales.
      BitBudget eb = bit_budget(arch, expr, AggregationStrategy::FedAvg);
      bool expr_differs = expr.bits != c.bits;
      bool ratio_differs = std::abs(row.printed_ratio - eb.savings_ratio) >
                           0.02;  // beyond two-decimal rounding
      if (!expr_differs && !ratio_differs) break;
      std::string note = "note: reference accounting for " + label;
      if (expr_differs) {
        std::snprintf(buf, sizeof buf,
                      " follows the expression %s (%llu bits, ratio %.2f)",
                      expr.to_string().c_str(),
                      static_cast<unsigned long long>(eb.quantized_bits),
                      eb.savings_ratio);
        note += buf;
      }
      if (ratio_differs) {
        if (expr_differs) {
          std::snprintf(buf, sizeof buf, " and prints ratio %.2f",
                        row.printed_ratio);
        } else {
          std::snprintf(buf, sizeof buf,
                        " prints ratio %.2f; the expression gives %.2f",
                        row.printed_ratio, eb.savings_ratio);
        }
        note += buf;
      }
      notes.push_back(note);
      break;
    }
  }
  lines.insert(lines.end(), notes.begin(), notes.end());
  return lines;
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
  if (t.shape.size() > 255) throw EncodeError("tensor rank too large");
  if (t.shape.empty() && !t.data.empty())
    throw EncodeError("rank-0 tensors are reserved for empty slots");
  out.push_back(std::uint8_t(t.shape.size()));
  for (auto d : t.shape) {
    if (d > std::numeric_limits<std::uint32_t>::max())
      throw EncodeError("tensor dimension too large");
    put_u32(out, std::uint32_t(d));
  }
  for (double v : t.data) put_f32(out, float(v));
}

Tensor read_tensor(Reader& r) {
  std::uint8_t rank = r.u8();
  if (rank == 0) return Tensor();  // absent slot (e.g. non-BN running stats)
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = r.u32();
  std::size_t n = Tensor::numel(shape);
  // Bound the element count by the bytes actually left before allocating.
  if (n > r.remaining() / 4) throw CorruptPayload("tensor size exceeds payload");
  std::vector<double> data(n);
  for (auto& v : data) v = double(r.f32());
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

void save_model(const std::string& path, const nn::ModelParams& model) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kModelMagic, kModelMagic + 4);
  out.push_back(kVersion);
  out.push_back(std::uint8_t(model.architecture_id));
  put_u16(out, std::uint16_t(model.layers.size()));
  for (const auto& l : model.layers) {
    out.push_back(std::uint8_t(l.kind));
    out.push_back(l.quantizable ? 1 : 0);
    put_tensor(out, l.weight);
    put_tensor(out, l.bias);
    put_tensor(out, l.running_mean);
    put_tensor(out, l.running_var);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw EncodeError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()),
          std::streamsize(out.size()));
  if (!f) throw EncodeError("write failed for " + path);
}

nn::ModelParams load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CorruptPayload("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  Reader r{bytes};
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kModelMagic, 4) != 0)
    throw CorruptPayload("bad model magic in " + path);
  if (r.u8() != kVersion) throw CorruptPayload("unsupported model version");
  std::uint8_t arch = r.u8();
  if (arch > 1) throw CorruptPayload("unknown architecture id");
  nn::ModelParams m;
  m.architecture_id = nn::ArchitectureId(arch);
  std::uint16_t layers = r.u16();
  m.layers.resize(layers);
  for (auto& l : m.layers) {
    std::uint8_t kind = r.u8();
    if (kind > std::uint8_t(nn::LayerKind::Linear))
      throw CorruptPayload("unknown layer kind");
    l.kind = nn::LayerKind(kind);
    l.quantizable = r.u8() != 0;
    l.weight = read_tensor(r);
    l.bias = read_tensor(r);
    l.running_mean = read_tensor(r);
    l.running_var = read_tensor(r);
  }
  if (r.pos != bytes.size()) throw CorruptPayload("trailing bytes in " + path);
  return m;
}

}  // namespace fedq::codec
