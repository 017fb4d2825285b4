#include "fedq/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <future>
#include <numeric>

namespace fedq::fed {
namespace {

constexpr double kMsqeFloor = 1e-12;

// Seed-stream tags; kept far above realistic client ids so the per-client
// streams derive_seed(master, client_id, round) never collide with them.
constexpr std::uint64_t kTagPartition = 0xF0000001ull;
constexpr std::uint64_t kTagModel = 0xF0000002ull;
constexpr std::uint64_t kTagSelect = 0xF0000003ull;

// field: 0 = weight (batch-norm gamma), 1 = bias, 2/3 = running stats
struct SidebandSlot {
  std::size_t layer;
  int field;
};

std::vector<SidebandSlot> sideband_slots(const nn::ModelParams& m) {
  std::vector<SidebandSlot> slots;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (m.layers[i].quantizable) {
      slots.push_back({i, 1});
    } else {
      slots.push_back({i, 0});
      slots.push_back({i, 1});
      slots.push_back({i, 2});
      slots.push_back({i, 3});
    }
  }
  return slots;
}

const Tensor& slot_tensor(const nn::ModelParams& m, SidebandSlot s) {
  const nn::LayerParams& l = m.layers[s.layer];
  switch (s.field) {
    case 0: return l.weight;
    case 1: return l.bias;
    case 2: return l.running_mean;
    default: return l.running_var;
  }
}

Tensor& slot_tensor(nn::ModelParams& m, SidebandSlot s) {
  return const_cast<Tensor&>(
      slot_tensor(static_cast<const nn::ModelParams&>(m), s));
}

// Ordinal (0..3) of the quantizable layer whose aggregation weights a
// non-quantized parameter rides on: the nearest preceding quantizable layer.
std::vector<std::size_t> owning_ordinal(const nn::ModelParams& m) {
  std::vector<std::size_t> own(m.layers.size(), 0);
  std::size_t ord = 0;
  bool seen = false;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (m.layers[i].quantizable) {
      ord = seen ? ord + 1 : 0;
      seen = true;
    }
    own[i] = ord;
  }
  return own;
}

void project_layer(Tensor& w, const quant::QuantSpec& spec,
                   std::mt19937_64& rng, quant::QuantizedTensor& qt,
                   double& msqe) {
  double s_raw = 0.0;
  bool degenerate = false;
  try {
    s_raw = spec.threshold_mode == quant::ThresholdMode::Octav
                ? quant::octav_threshold(w.view(), spec.bits)
                : quant::max_scalar_threshold(w.view());
  } catch (const DegenerateTensor&) {
    degenerate = true;
  }
  double s = double(float(s_raw));  // scale travels as a 32-bit float
  if (!(s > 0.0)) degenerate = true;
  if (degenerate) {
    qt.bits = spec.bits;
    qt.scale = 1.0;
    std::uint32_t mid = quant::detail::nearest_index(
        0.0, 1.0, quant::level_step(1.0, spec.bits),
        quant::level_count(spec.bits));
    qt.levels.assign(w.size(), mid);
    msqe = 0.0;
    return;  // weights stay as they are
  }
  qt = quant::quantize(w.view(), spec, s, rng);
  std::vector<double> deq = quant::dequantize(qt);
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double e = w.data[i] - deq[i];
    acc += e * e;
    w.data[i] = deq[i];
  }
  msqe = w.size() ? acc / double(w.size()) : 0.0;
}

std::vector<double> client_layer_values(const ClientUpdate& u, std::size_t q,
                                        std::size_t expected) {
  std::vector<double> vals;
  if (u.full_precision()) {
    if (q >= u.raw_layers.size() || u.raw_layers[q].size() != expected)
      throw ShapeError("update layer size mismatch");
    vals.assign(u.raw_layers[q].begin(), u.raw_layers[q].end());
  } else {
    if (q >= u.layers.size() || u.layers[q].count() != expected)
      throw ShapeError("update layer size mismatch");
    vals = quant::dequantize(u.layers[q]);
  }
  return vals;
}

nn::ModelParams aggregate_impl(
    const nn::ModelParams& ref, std::span<const ClientUpdate> updates,
    const std::vector<std::vector<double>>& lambda_per_ordinal) {
  auto qidx = nn::quantizable_layer_indices();
  nn::ModelParams out = ref;
  for (std::size_t q = 0; q < qidx.size(); ++q) {
    const std::size_t expected = ref.layers[qidx[q]].weight.size();
    std::vector<std::vector<double>> rows;
    rows.reserve(updates.size());
    for (const ClientUpdate& u : updates)
      rows.push_back(client_layer_values(u, q, expected));
    out.layers[qidx[q]].weight.data = weighted_mean(rows, lambda_per_ordinal[q]);
  }
  auto slots = sideband_slots(ref);
  auto own = owning_ordinal(ref);
  for (std::size_t t = 0; t < slots.size(); ++t) {
    const std::size_t expected = slot_tensor(ref, slots[t]).size();
    std::vector<std::vector<double>> rows;
    rows.reserve(updates.size());
    for (const ClientUpdate& u : updates) {
      if (u.sideband.size() != slots.size() ||
          u.sideband[t].size() != expected)
        throw ShapeError("update side-band does not match the model");
      rows.emplace_back(u.sideband[t].begin(), u.sideband[t].end());
    }
    slot_tensor(out, slots[t]).data =
        weighted_mean(rows, lambda_per_ordinal[own[slots[t].layer]]);
  }
  return out;
}

}  // namespace

std::vector<std::vector<float>> extract_sideband(const nn::ModelParams& model) {
  std::vector<std::vector<float>> side;
  for (SidebandSlot s : sideband_slots(model)) {
    const Tensor& t = slot_tensor(model, s);
    std::vector<float> vals(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) vals[i] = float(t.data[i]);
    side.push_back(std::move(vals));
  }
  return side;
}

ClientUpdate client_local_train(const nn::ModelParams& global,
                                const data::Dataset& local,
                                const ClientTask& task, std::mt19937_64& rng) {
  auto qidx = nn::quantizable_layer_indices();
  if (!task.full_precision && task.specs.size() != qidx.size())
    throw ConfigError("need one QuantSpec per quantizable layer");
  if (task.local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (task.sgd.batch_size < 1) throw ConfigError("batch_size must be >= 1");

  nn::ModelParams model = global;
  nn::SgdState state;
  ClientUpdate up;
  up.client_id = task.client_id;
  up.strategy = task.strategy;
  std::vector<double> msqe(qidx.size(), 0.0);
  if (!task.full_precision) up.layers.resize(qidx.size());

  // Full-precision master copies of the quantizable tensors. The network
  // carries the quantized view, so forward/backward see grid-valued weights,
  // but the optimizer applies gradients to the master (straight-through).
  // Projecting the projection instead would let an adaptive threshold ratchet
  // the weight range down a little on every step: the optimum for an
  // already-clipped distribution sits strictly inside its support.
  std::vector<Tensor> master;
  if (!task.full_precision) {
    master.reserve(qidx.size());
    for (std::size_t qi : qidx) master.push_back(global.layers[qi].weight);
  }

  std::vector<std::size_t> order(local.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < task.local_epochs; ++epoch) {
    shuffle_span(std::span<std::size_t>(order), rng);
    for (std::size_t start = 0; start < order.size();
         start += task.sgd.batch_size) {
      std::size_t count = std::min(task.sgd.batch_size, order.size() - start);
      data::Dataset batch = data::gather(
          local, std::span<const std::size_t>(order).subspan(start, count));
      nn::ForwardCache cache;
      nn::forward(model, batch.images, cache);
      nn::Gradients grads = nn::backward(model, cache, batch.labels);
      if (!task.full_precision) {
        for (std::size_t q = 0; q < qidx.size(); ++q)
          model.layers[qidx[q]].weight = std::move(master[q]);
      }
      nn::sgd_step(model, grads, state, task.sgd);
      if (!task.full_precision) {
        for (std::size_t q = 0; q < qidx.size(); ++q) {
          master[q] = model.layers[qidx[q]].weight;
          project_layer(model.layers[qidx[q]].weight, task.specs[q], rng,
                        up.layers[q], msqe[q]);
        }
      }
    }
  }

  if (task.full_precision) {
    for (std::size_t q = 0; q < qidx.size(); ++q) {
      const Tensor& w = model.layers[qidx[q]].weight;
      std::vector<float> vals(w.size());
      for (std::size_t i = 0; i < w.size(); ++i) vals[i] = float(w.data[i]);
      up.raw_layers.push_back(std::move(vals));
    }
  }
  if (task.strategy == AggregationStrategy::InverseMsqe) {
    for (double e : msqe) up.layer_msqe.push_back(float(e));
  } else {
    up.dataset_size = std::uint32_t(local.size());
  }
  up.sideband = extract_sideband(model);
  return up;
}

std::vector<double> weighted_mean(std::span<const std::vector<double>> rows,
                                  std::span<const double> lambda) {
  if (rows.empty() || rows.size() != lambda.size())
    throw ShapeError("weighted_mean: need one weight per row");
  const std::size_t n = rows[0].size();
  std::vector<double> out(n, 0.0);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (rows[j].size() != n) throw ShapeError("weighted_mean: ragged rows");
    for (std::size_t p = 0; p < n; ++p) out[p] += lambda[j] * rows[j][p];
  }
  return out;
}

std::vector<double> normalized_inverse_weights(
    std::span<const double> errors) {
  std::vector<double> w(errors.size());
  double total = 0.0;
  for (std::size_t j = 0; j < errors.size(); ++j) {
    w[j] = 1.0 / std::max(errors[j], kMsqeFloor);
    total += w[j];
  }
  for (double& v : w) v /= total;
  return w;
}

nn::ModelParams aggregate_fedavg(const nn::ModelParams& reference,
                                 std::span<const ClientUpdate> updates,
                                 std::span<const std::uint32_t> sizes) {
  if (updates.empty()) throw ConfigError("aggregate: no updates");
  if (!sizes.empty() && sizes.size() != updates.size())
    throw ConfigError("aggregate: one dataset size per update");
  std::vector<double> lambda(updates.size());
  double total = 0.0;
  for (std::size_t j = 0; j < updates.size(); ++j) {
    std::uint32_t n;
    if (!sizes.empty()) {
      n = sizes[j];
    } else if (updates[j].dataset_size) {
      n = *updates[j].dataset_size;
    } else {
      throw ConfigError("aggregate: update carries no dataset size");
    }
    lambda[j] = double(n);
    total += lambda[j];
  }
  if (total <= 0.0) throw ConfigError("aggregate: zero total dataset size");
  for (double& v : lambda) v /= total;
  std::vector<std::vector<double>> per_ordinal(
      nn::quantizable_layer_indices().size(), lambda);
  return aggregate_impl(reference, updates, per_ordinal);
}

nn::ModelParams aggregate_inverse_msqe(const nn::ModelParams& reference,
                                       std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw ConfigError("aggregate: no updates");
  const std::size_t nq = nn::quantizable_layer_indices().size();
  std::vector<std::vector<double>> per_ordinal(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<double> errors(updates.size());
    for (std::size_t j = 0; j < updates.size(); ++j) {
      if (updates[j].layer_msqe.size() != updates[j].layers.size() ||
          q >= updates[j].layer_msqe.size())
        throw ConfigError("aggregate: update carries no per-layer msqe");
      errors[j] = double(updates[j].layer_msqe[q]);
    }
    per_ordinal[q] = normalized_inverse_weights(errors);
  }
  return aggregate_impl(reference, updates, per_ordinal);
}

RunResult run_federation(const RunConfig& config, const data::Dataset& train,
                         const data::Dataset& test) {
  const std::size_t m = config.num_clients;
  if (m < 1) throw ConfigError("num_clients must be >= 1");
  if (!(config.client_fraction > 0.0) || config.client_fraction > 1.0)
    throw ConfigError("client_fraction must be in (0, 1]");
  if (config.local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (config.threads < 1) throw ConfigError("threads must be >= 1");
  auto counts = nn::quantizable_weight_counts(config.architecture);
  if (config.full_precision) {
    if (config.strategy != AggregationStrategy::FedAvg)
      throw ConfigError("the full-precision baseline aggregates with FedAvg");
  } else if (config.bitwidths.bits.size() != counts.size()) {
    throw ConfigError("need one bit width per quantizable layer");
  }

  data::Partition part = data::partition_iid(
      train, m, derive_seed(config.seed, kTagPartition, 0));
  std::vector<data::Dataset> client_data;
  client_data.reserve(m);
  for (const auto& idx : part.client_indices)
    client_data.push_back(data::gather(train, idx));

  nn::ModelParams model = nn::build_model(
      config.architecture, derive_seed(config.seed, kTagModel, 0));

  std::vector<quant::QuantSpec> specs;
  std::uint64_t per_client_bits;
  if (config.full_precision) {
    per_client_bits =
        std::uint64_t(nn::total_quantizable_weights(config.architecture)) * 32;
  } else {
    for (int b : config.bitwidths.bits)
      specs.push_back({b, config.mode, config.threshold_mode});
    per_client_bits =
        codec::bit_budget(config.architecture, config.bitwidths,
                          config.strategy)
            .quantized_bits;
  }

  RunResult result;
  for (std::size_t round = 1; round <= config.rounds; ++round) {
    auto t0 = std::chrono::steady_clock::now();

    // Uniform selection without replacement at the configured fraction.
    std::size_t k = std::clamp<std::size_t>(
        std::size_t(std::llround(config.client_fraction * double(m))), 1, m);
    std::vector<std::uint32_t> ids(m);
    std::iota(ids.begin(), ids.end(), 0u);
    std::mt19937_64 sel_rng(derive_seed(config.seed, kTagSelect, round));
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + std::size_t(sel_rng() % (m - i));
      std::swap(ids[i], ids[j]);
    }
    ids.resize(k);
    std::sort(ids.begin(), ids.end());

    std::vector<ClientUpdate> updates(k);
    auto worker = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t slot = lo; slot < hi; ++slot) {
        std::uint32_t cid = ids[slot];
        std::mt19937_64 rng(derive_seed(config.seed, cid, round));
        ClientTask task;
        task.client_id = cid;
        task.strategy = config.strategy;
        task.full_precision = config.full_precision;
        task.specs = specs;
        task.sgd = config.sgd;
        task.local_epochs = config.local_epochs;
        ClientUpdate u =
            client_local_train(model, client_data[cid], task, rng);
        // Quantized uplinks travel through the codec every round.
        updates[slot] =
            config.full_precision ? std::move(u) : codec::decode(codec::encode(u));
      }
    };
    const std::size_t nthreads = std::min(config.threads, k);
    if (nthreads <= 1) {
      worker(0, k);
    } else {
      std::vector<std::future<void>> futures;
      for (std::size_t w = 0; w < nthreads; ++w) {
        std::size_t lo = k * w / nthreads, hi = k * (w + 1) / nthreads;
        if (lo < hi)
          futures.push_back(
              std::async(std::launch::async, worker, lo, hi));
      }
      for (auto& f : futures) f.get();
    }

    model = config.strategy == AggregationStrategy::InverseMsqe
                ? aggregate_inverse_msqe(model, updates)
                : aggregate_fedavg(model, updates);

    RoundMetrics rm;
    rm.round = round;
    rm.train_accuracy = nn::evaluate(model, train);
    rm.test_accuracy = nn::evaluate(model, test);
    rm.uplink_bits = per_client_bits * k;
    rm.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.metrics.push_back(rm);
  }
  result.model = std::move(model);
  return result;
}

std::string strategy_name(AggregationStrategy strategy) {
  return strategy == AggregationStrategy::InverseMsqe ? "msqe" : "fedavg";
}

void write_metrics_csv(const std::string& path, AggregationStrategy strategy,
                       const std::string& config_label,
                       std::span<const RoundMetrics> metrics,
                       std::span<const std::string> comment) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  for (const std::string& line : comment) out << "# " << line << "\n";
  out << "round,strategy,config,train_acc,test_acc,uplink_bits\n";
  char buf[64];
  for (const RoundMetrics& rm : metrics) {
    out << rm.round << ',' << strategy_name(strategy) << ',' << config_label
        << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", rm.train_accuracy,
                  rm.test_accuracy);
    out << buf << ',' << rm.uplink_bits << "\n";
  }
  if (!out) throw ConfigError("write failed for " + path);
}

}  // namespace fedq::fed
