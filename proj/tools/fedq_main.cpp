// Experiment runner. Subcommands:
//   run   federated training per config file/flags; CSV metrics + checkpoints
//   bits  uplink accounting table for bit-width configs
//   hist  weight histogram of a saved checkpoint layer
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedq/codec.hpp"
#include "fedq/config.hpp"
#include "fedq/federation.hpp"

namespace fs = std::filesystem;
using namespace fedq;

namespace {

std::string hash_comment(std::uint64_t hash) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "config_hash=0x%016llx",
                static_cast<unsigned long long>(hash));
  return buf;
}

void add_override_options(CLI::App* cmd, std::vector<std::string>& overrides) {
  auto opt = [cmd, &overrides](const std::string& flag,
                               const std::string& key,
                               const std::string& help) {
    cmd->add_option_function<std::string>(
        flag,
        [&overrides, key](const std::string& v) {
          overrides.push_back(key + " = " + v);
        },
        help);
  };
  opt("--dataset", "dataset", "mnist | cifar10 | synthetic");
  opt("--data-dir", "data_dir", "directory with the dataset files");
  opt("--architecture", "architecture", "mnist_cnn | cifar_cnn");
  opt("--clients", "clients", "number of federated clients");
  opt("--rounds", "rounds", "communication rounds");
  opt("--client-fraction", "client_fraction", "fraction selected per round");
  opt("--local-epochs", "local_epochs", "local epochs per round");
  opt("--bitwidths", "bitwidths", "per-layer bit widths, e.g. 4-2-2-4");
  opt("--mode", "mode", "det | stoch");
  opt("--threshold", "threshold", "octav | max");
  opt("--strategy", "strategy", "fedavg | msqe");
  opt("--trials", "trials", "independent trials (seed, seed+1, ...)");
  opt("--seed", "seed", "master seed");
  opt("--lr", "learning_rate", "SGD learning rate");
  opt("--momentum", "momentum", "SGD momentum");
  opt("--weight-decay", "weight_decay", "SGD weight decay");
  opt("--batch-size", "batch_size", "minibatch size");
  opt("--out", "output_dir", "output directory");
  opt("--threads", "threads", "parallel clients per round");
  opt("--train-limit", "train_limit", "cap on training samples (0 = all)");
  opt("--test-limit", "test_limit", "cap on test samples (0 = all)");
  cmd->add_flag_function(
      "--full-precision",
      [&overrides](std::int64_t) {
        overrides.push_back("full_precision = true");
      },
      "skip quantization (32-bit baseline)");
  cmd->add_option_function<std::string>(
      "--set",
      [&overrides](const std::string& v) { overrides.push_back(v); },
      "extra key=value override (repeatable)")
      ->take_all();
}

int cmd_run(const std::string& config_file,
            const std::vector<std::string>& overrides) {
  cfg::ExperimentConfig ec = cfg::parse_config(config_file, overrides);
  auto [train, test] = cfg::load_datasets(ec);
  fs::create_directories(ec.output_dir);
  const std::uint64_t hash = cfg::config_hash(ec);

  {
    std::ofstream resolved(fs::path(ec.output_dir) / "config_resolved.txt");
    if (!resolved)
      throw ConfigError("cannot write to output dir " + ec.output_dir);
    resolved << "# " << hash_comment(hash) << "\n" << cfg::dump_config(ec);
  }

  const fed::RunConfig base = cfg::to_run_config(ec);
  const std::string label = ec.full_precision ? "fp32" : ec.bitwidths;
  std::vector<std::vector<fed::RoundMetrics>> all_metrics;
  for (std::size_t t = 0; t < ec.trials; ++t) {
    fed::RunConfig rc = base;
    rc.seed = ec.seed + t;
    fed::RunResult res = fed::run_federation(rc, train, test);
    std::vector<std::string> comments = {
        hash_comment(hash), "trial=" + std::to_string(t),
        "seed=" + std::to_string(rc.seed)};
    fs::path csv =
        fs::path(ec.output_dir) / ("trial_" + std::to_string(t) + ".csv");
    fed::write_metrics_csv(csv.string(), base.strategy, label, res.metrics,
                           comments);
    fs::path ckpt = fs::path(ec.output_dir) /
                    ("model_trial_" + std::to_string(t) + ".fqmd");
    codec::save_model(ckpt.string(), res.model);
    if (!res.metrics.empty()) {
      std::printf("trial %zu: final train %.4f test %.4f (%zu rounds)\n", t,
                  res.metrics.back().train_accuracy,
                  res.metrics.back().test_accuracy, res.metrics.size());
    } else {
      std::printf("trial %zu: 0 rounds\n", t);
    }
    if (t > 0 && res.metrics.size() != all_metrics[0].size())
      throw ConfigError("trials produced differing round counts");
    all_metrics.push_back(std::move(res.metrics));
  }

  // Per-round mean and population standard deviation across trials.
  std::ofstream sum(fs::path(ec.output_dir) / "summary.csv");
  if (!sum) throw ConfigError("cannot write summary.csv");
  sum << "# " << hash_comment(hash) << "\n";
  sum << "round,strategy,config,train_acc_mean,train_acc_std,test_acc_mean,"
         "test_acc_std,uplink_bits\n";
  const std::size_t rounds = all_metrics.empty() ? 0 : all_metrics[0].size();
  const double nt = double(ec.trials);
  for (std::size_t r = 0; r < rounds; ++r) {
    double tr_m = 0, te_m = 0;
    for (const auto& m : all_metrics) {
      tr_m += m[r].train_accuracy;
      te_m += m[r].test_accuracy;
    }
    tr_m /= nt;
    te_m /= nt;
    double tr_v = 0, te_v = 0;
    for (const auto& m : all_metrics) {
      tr_v += (m[r].train_accuracy - tr_m) * (m[r].train_accuracy - tr_m);
      te_v += (m[r].test_accuracy - te_m) * (m[r].test_accuracy - te_m);
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f", tr_m,
                  std::sqrt(tr_v / nt), te_m, std::sqrt(te_v / nt));
    sum << (r + 1) << ',' << fed::strategy_name(base.strategy) << ',' << label
        << ',' << buf << ',' << all_metrics[0][r].uplink_bits << "\n";
  }
  if (!sum) throw ConfigError("write failed for summary.csv");
  return 0;
}

int cmd_bits(const std::string& arch_name,
             const std::vector<std::string>& configs,
             const std::string& strategy_name) {
  nn::ArchitectureId arch = arch_name == "cifar_cnn"
                                ? nn::ArchitectureId::CifarCnn
                                : nn::ArchitectureId::MnistCnn;
  AggregationStrategy strategy = strategy_name == "msqe"
                                     ? AggregationStrategy::InverseMsqe
                                     : AggregationStrategy::FedAvg;
  std::vector<BitWidthConfig> parsed;
  for (const std::string& c : configs)
    parsed.push_back(BitWidthConfig::parse(c, 4));
  for (const std::string& line :
       codec::bit_budget_report(arch, parsed, strategy))
    std::cout << line << "\n";
  return 0;
}

int cmd_hist(const std::string& checkpoint, std::size_t layer,
             std::size_t bins, const std::string& out_path) {
  nn::ModelParams model = codec::load_model(checkpoint);
  nn::Histogram hist = nn::weight_histogram(model, layer, bins);
  std::string desc = "hist checkpoint=" + checkpoint +
                     " layer=" + std::to_string(layer) +
                     " bins=" + std::to_string(bins) + "\n";
  std::uint64_t hash = cfg::fnv1a({desc.data(), desc.size()});
  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw ConfigError("cannot write " + out_path);
    out = &file;
  }
  *out << "# " << hash_comment(hash) << "\n";
  *out << "bin_lo,bin_hi,count\n";
  char buf[96];
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%llu", hist.bin_edges[i],
                  hist.bin_edges[i + 1],
                  static_cast<unsigned long long>(hist.counts[i]));
    *out << buf << "\n";
  }
  if (!*out) throw ConfigError("histogram write failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated quantization experiment runner"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "execute a federated training run");
  std::string config_file;
  std::vector<std::string> overrides;
  run->add_option("--config", config_file, "key = value config file");
  add_override_options(run, overrides);

  auto* bits = app.add_subcommand("bits", "uplink bit accounting table");
  std::string arch_name = "mnist_cnn";
  std::string strategy = "fedavg";
  std::vector<std::string> bit_configs = {"2-2-2-2", "4-4-4-4", "8-8-8-8",
                                          "4-2-2-4", "2-1-1-2"};
  bits->add_option("--architecture", arch_name, "mnist_cnn | cifar_cnn");
  bits->add_option("--strategy", strategy, "fedavg | msqe");
  bits->add_option("--bitwidths", bit_configs,
                   "configs to tabulate (repeatable)");

  auto* hist = app.add_subcommand("hist", "weight histogram of a checkpoint");
  std::string checkpoint, hist_out;
  std::size_t layer = 0, nbins = 50;
  hist->add_option("--checkpoint", checkpoint, "model checkpoint path")
      ->required();
  hist->add_option("--layer", layer, "quantizable layer ordinal (0-3)");
  hist->add_option("--bins", nbins, "histogram bins");
  hist->add_option("--out", hist_out, "output CSV (default stdout)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (run->parsed()) return cmd_run(config_file, overrides);
    if (bits->parsed()) return cmd_bits(arch_name, bit_configs, strategy);
    return cmd_hist(checkpoint, layer, nbins, hist_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
