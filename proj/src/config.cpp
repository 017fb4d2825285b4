#include "fedq/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <vector>

#include "fedq/update.hpp"

namespace fedq::cfg {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  throw ConfigError("config key '" + key + "': " + why);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    bad(key, "expected an unsigned integer, got '" + v + "'");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v,
                       std::size_t min_value) {
  auto out = std::size_t(parse_u64(key, v));
  if (out < min_value)
    bad(key, "must be >= " + std::to_string(min_value));
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty())
    bad(key, "expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, "expected true/false, got '" + v + "'");
}

void expect_one_of(const std::string& key, const std::string& v,
                   std::initializer_list<const char*> allowed) {
  for (const char* a : allowed)
    if (v == a) return;
  std::string msg = "expected one of {";
  bool first = true;
  for (const char* a : allowed) {
    if (!first) msg += ", ";
    msg += a;
    first = false;
  }
  bad(key, msg + "}, got '" + v + "'");
}

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

struct KeyHandler {
  const char* name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<KeyHandler>& handlers() {
  static const std::vector<KeyHandler> h = {
      {"dataset",
       [](ExperimentConfig& c, const std::string& v) {
         expect_one_of("dataset", v, {"mnist", "cifar10", "synthetic"});
         c.dataset = v;
       },
       [](const ExperimentConfig& c) { return c.dataset; }},
      {"data_dir",
       [](ExperimentConfig& c, const std::string& v) { c.data_dir = v; },
       [](const ExperimentConfig& c) { return c.data_dir; }},
      {"architecture",
       [](ExperimentConfig& c, const std::string& v) {
         expect_one_of("architecture", v, {"mnist_cnn", "cifar_cnn"});
         c.architecture = v;
       },
       [](const ExperimentConfig& c) { return c.architecture; }},
      {"clients",
       [](ExperimentConfig& c, const std::string& v) {
         c.clients = parse_size("clients", v, 1);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.clients); }},
      {"rounds",
       [](ExperimentConfig& c, const std::string& v) {
         c.rounds = parse_size("rounds", v, 0);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.rounds); }},
      {"client_fraction",
       [](ExperimentConfig& c, const std::string& v) {
         c.client_fraction = parse_real("client_fraction", v);
         if (!(c.client_fraction > 0.0) || c.client_fraction > 1.0)
           bad("client_fraction", "must be in (0, 1]");
       },
       [](const ExperimentConfig& c) { return fmt_real(c.client_fraction); }},
      {"local_epochs",
       [](ExperimentConfig& c, const std::string& v) {
         c.local_epochs = parse_size("local_epochs", v, 1);
       },
       [](const ExperimentConfig& c) {
         return std::to_string(c.local_epochs);
       }},
      {"bitwidths",
       [](ExperimentConfig& c, const std::string& v) {
         try {
           BitWidthConfig::parse(v, 4);  // validation only
         } catch (const ConfigError& e) {
           bad("bitwidths", e.what());
         }
         c.bitwidths = v;
       },
       [](const ExperimentConfig& c) { return c.bitwidths; }},
      {"mode",
       [](ExperimentConfig& c, const std::string& v) {
         expect_one_of("mode", v, {"det", "stoch"});
         c.mode = v;
       },
       [](const ExperimentConfig& c) { return c.mode; }},
      {"threshold",
       [](ExperimentConfig& c, const std::string& v) {
         expect_one_of("threshold", v, {"octav", "max"});
         c.threshold = v;
       },
       [](const ExperimentConfig& c) { return c.threshold; }},
      {"strategy",
       [](ExperimentConfig& c, const std::string& v) {
         expect_one_of("strategy", v, {"fedavg", "msqe"});
         c.strategy = v;
       },
       [](const ExperimentConfig& c) { return c.strategy; }},
      {"full_precision",
       [](ExperimentConfig& c, const std::string& v) {
         c.full_precision = parse_bool("full_precision", v);
       },
       [](const ExperimentConfig& c) {
         return std::string(c.full_precision ? "true" : "false");
       }},
      {"trials",
       [](ExperimentConfig& c, const std::string& v) {
         c.trials = parse_size("trials", v, 1);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.trials); }},
      {"seed",
       [](ExperimentConfig& c, const std::string& v) {
         c.seed = parse_u64("seed", v);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      {"learning_rate",
       [](ExperimentConfig& c, const std::string& v) {
         c.learning_rate = parse_real("learning_rate", v);
         if (c.learning_rate < 0.0) bad("learning_rate", "must be >= 0");
       },
       [](const ExperimentConfig& c) { return fmt_real(c.learning_rate); }},
      {"momentum",
       [](ExperimentConfig& c, const std::string& v) {
         c.momentum = parse_real("momentum", v);
         if (c.momentum < 0.0 || c.momentum >= 1.0)
           bad("momentum", "must be in [0, 1)");
       },
       [](const ExperimentConfig& c) { return fmt_real(c.momentum); }},
      {"weight_decay",
       [](ExperimentConfig& c, const std::string& v) {
         c.weight_decay = parse_real("weight_decay", v);
         if (c.weight_decay < 0.0) bad("weight_decay", "must be >= 0");
       },
       [](const ExperimentConfig& c) { return fmt_real(c.weight_decay); }},
      {"batch_size",
       [](ExperimentConfig& c, const std::string& v) {
         c.batch_size = parse_size("batch_size", v, 1);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.batch_size); }},
      {"output_dir",
       [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; },
       [](const ExperimentConfig& c) { return c.output_dir; }},
      {"threads",
       [](ExperimentConfig& c, const std::string& v) {
         c.threads = parse_size("threads", v, 1);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.threads); }},
      {"train_limit",
       [](ExperimentConfig& c, const std::string& v) {
         c.train_limit = parse_size("train_limit", v, 0);
       },
       [](const ExperimentConfig& c) {
         return std::to_string(c.train_limit);
       }},
      {"test_limit",
       [](ExperimentConfig& c, const std::string& v) {
         c.test_limit = parse_size("test_limit", v, 0);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.test_limit); }},
      {"synthetic_train",
       [](ExperimentConfig& c, const std::string& v) {
         c.synthetic_train = parse_size("synthetic_train", v, 1);
       },
       [](const ExperimentConfig& c) {
         return std::to_string(c.synthetic_train);
       }},
      {"synthetic_test",
       [](ExperimentConfig& c, const std::string& v) {
         c.synthetic_test = parse_size("synthetic_test", v, 1);
       },
       [](const ExperimentConfig& c) {
         return std::to_string(c.synthetic_test);
       }},
  };
  return h;
}

void apply(ExperimentConfig& c, const std::string& key,
           const std::string& value) {
  for (const KeyHandler& h : handlers()) {
    if (key == h.name) {
      h.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void apply_line(ExperimentConfig& c, const std::string& raw,
                const std::string& origin) {
  std::string line = raw;
  if (auto hash = line.find('#'); hash != std::string::npos)
    line.resize(hash);
  line = trim(line);
  if (line.empty()) return;
  std::size_t eq = line.find('=');
  if (eq == std::string::npos)
    throw ConfigError("expected key = value in " + origin + ": '" + raw + "'");
  apply(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
}

void finalize(ExperimentConfig& c) {
  if (c.data_dir.empty()) {
    const char* env = std::getenv("FEDQ_DATA_DIR");
    c.data_dir = env ? env : "data/mnist";
  }
  const bool mnist_arch = c.architecture == "mnist_cnn";
  if (c.dataset == "mnist" && !mnist_arch)
    bad("architecture", "dataset mnist needs mnist_cnn");
  if (c.dataset == "cifar10" && mnist_arch)
    bad("architecture", "dataset cifar10 needs cifar_cnn");
  if (c.full_precision && c.strategy == "msqe")
    bad("strategy", "full_precision baseline aggregates with fedavg");
}

}  // namespace

ExperimentConfig parse_config(const std::string& file,
                              std::span<const std::string> overrides) {
  ExperimentConfig c;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file);
    std::string line;
    while (std::getline(in, line)) apply_line(c, line, file);
  }
  for (const std::string& o : overrides) apply_line(c, o, "overrides");
  finalize(c);
  return c;
}

std::string dump_config(const ExperimentConfig& c) {
  std::string out;
  for (const KeyHandler& h : handlers()) {
    out += h.name;
    out += " = ";
    out += h.get(c);
    out += '\n';
  }
  return out;
}

std::uint64_t fnv1a(std::span<const char> bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (char ch : bytes) {
    h ^= std::uint64_t(static_cast<unsigned char>(ch));
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t config_hash(const ExperimentConfig& c) {
  // Fingerprint of the result-determining keys only: where the data lives,
  // where outputs go, and how many workers run are all free to vary without
  // changing a single CSV byte.
  std::string dump;
  for (const KeyHandler& h : handlers()) {
    std::string_view name(h.name);
    if (name == "data_dir" || name == "output_dir" || name == "threads")
      continue;
    dump += name;
    dump += " = ";
    dump += h.get(c);
    dump += '\n';
  }
  return fnv1a(std::span<const char>(dump.data(), dump.size()));
}

fed::RunConfig to_run_config(const ExperimentConfig& c) {
  fed::RunConfig r;
  r.architecture = c.architecture == "mnist_cnn"
                       ? nn::ArchitectureId::MnistCnn
                       : nn::ArchitectureId::CifarCnn;
  r.num_clients = c.clients;
  r.rounds = c.rounds;
  r.client_fraction = c.client_fraction;
  r.local_epochs = c.local_epochs;
  r.bitwidths = BitWidthConfig::parse(c.bitwidths, 4);
  r.mode = c.mode == "stoch" ? quant::QuantMode::Stochastic
                             : quant::QuantMode::Deterministic;
  r.threshold_mode = c.threshold == "max" ? quant::ThresholdMode::MaxScalar
                                          : quant::ThresholdMode::Octav;
  r.strategy = c.strategy == "msqe" ? AggregationStrategy::InverseMsqe
                                    : AggregationStrategy::FedAvg;
  r.full_precision = c.full_precision;
  r.sgd.learning_rate = c.learning_rate;
  r.sgd.momentum = c.momentum;
  r.sgd.weight_decay = c.weight_decay;
  r.sgd.batch_size = c.batch_size;
  r.seed = c.seed;
  r.threads = c.threads;
  return r;
}

std::pair<data::Dataset, data::Dataset> load_datasets(
    const ExperimentConfig& c) {
  std::pair<data::Dataset, data::Dataset> sets = [&] {
    if (c.dataset == "mnist") return data::load_mnist(c.data_dir);
    if (c.dataset == "cifar10") return data::load_cifar10(c.data_dir);
    auto shape = nn::input_shape(to_run_config(c).architecture);
    constexpr std::uint64_t kTagSynthetic = 0xF0000005ull;
    return std::pair{
        data::synthetic_dataset(c.synthetic_train, 10, shape,
                                derive_seed(c.seed, kTagSynthetic, 0)),
        data::synthetic_dataset(c.synthetic_test, 10, shape,
                                derive_seed(c.seed, kTagSynthetic, 1))};
  }();
  if (c.train_limit > 0 && c.train_limit < sets.first.size())
    sets.first = data::take_first(sets.first, c.train_limit);
  if (c.test_limit > 0 && c.test_limit < sets.second.size())
    sets.second = data::take_first(sets.second, c.test_limit);
  return sets;
}

}  // namespace fedq::cfg
