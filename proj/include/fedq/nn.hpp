#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedq/data.hpp"
#include "fedq/errors.hpp"
#include "fedq/tensor.hpp"

namespace fedq::nn {

enum class ArchitectureId : std::uint8_t { MnistCnn = 0, CifarCnn = 1 };

enum class LayerKind : std::uint8_t {
  Conv2d,      // 3x3 kernel, stride 1, pad 1
  BatchNorm2d,
  BatchNorm1d,
  Linear,
};

struct LayerParams {
  LayerKind kind;
  // Conv/Linear: weight + bias. BatchNorm: weight = gamma, bias = beta,
  // plus running statistics.
  Tensor weight;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;
  bool quantizable = false;  // true for conv/linear weights

  bool operator==(const LayerParams&) const = default;
};

struct ModelParams {
  ArchitectureId architecture_id = ArchitectureId::MnistCnn;
  std::vector<LayerParams> layers;

  bool operator==(const ModelParams&) const = default;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, identity
/// batch-norm. Deterministic per seed.
ModelParams build_model(ArchitectureId id, std::uint64_t seed);

std::vector<std::size_t> input_shape(ArchitectureId id);  // {C, H, W}

/// Indices into ModelParams::layers of the four quantizable layers,
/// in transmission order (conv1, conv2, fc1, fc2).
std::span<const std::size_t> quantizable_layer_indices();
std::vector<std::size_t> quantizable_weight_counts(ArchitectureId id);
std::size_t total_quantizable_weights(ArchitectureId id);

// ---------------------------------------------------------------------------
// Primitive kernels (exposed for finite-difference tests)
// ---------------------------------------------------------------------------

void linear_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                    Tensor& y);
void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                     Tensor& dx, Tensor& dw, Tensor& db);

void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                    Tensor& y);
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                     Tensor& dx, Tensor& dw, Tensor& db);

struct BatchNormCache {
  std::vector<double> xhat;     // normalized input, same layout as x
  std::vector<double> inv_std;  // per channel
  std::size_t channels = 0;
  std::size_t spatial = 0;
};

/// Shared 1d/2d batch norm over x viewed as (N, channels, spatial); 1d is
/// spatial == 1. Train mode normalizes by biased batch statistics and, when
/// the sinks are non-null, folds unbiased batch variance into the running
/// stats with the usual (1 - momentum) * old + momentum * new update.
void batchnorm_forward(const Tensor& x, std::size_t channels,
                       std::size_t spatial, const Tensor& gamma,
                       const Tensor& beta, const Tensor& running_mean,
                       const Tensor& running_var, Tensor* mean_sink,
                       Tensor* var_sink, bool train, double eps,
                       double momentum, Tensor& y, BatchNormCache* cache);
void batchnorm_backward(const Tensor& dy, const Tensor& gamma,
                        const BatchNormCache& cache, Tensor& dx,
                        Tensor& dgamma, Tensor& dbeta);

void maxpool2_forward(const Tensor& x, Tensor& y,
                      std::vector<std::uint32_t>& argmax);
void maxpool2_backward(const Tensor& dy,
                       std::span<const std::uint32_t> argmax,
                       std::span<const std::size_t> in_shape, Tensor& dx);

Tensor softmax_rows(const Tensor& logits);

/// Mean cross-entropy of softmax(logits) against labels; when dlogits is
/// non-null it receives dLoss/dlogits (already divided by the batch size).
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* dlogits);

// ---------------------------------------------------------------------------
// Whole-model passes
// ---------------------------------------------------------------------------

struct ForwardCache {
  struct Step {
    std::vector<std::size_t> in_shape;
    Tensor input;  // conv/linear inputs only; others keep just the shape
    BatchNormCache bn;
    std::vector<std::uint32_t> argmax;
  };
  std::vector<Step> steps;
  Tensor logits;
  Tensor probs;
};

/// Training-mode forward: updates the model's batch-norm running statistics
/// and fills the cache needed by backward(). Returns class probabilities.
Tensor forward(ModelParams& model, const Tensor& batch, ForwardCache& cache);

/// Evaluation-mode forward (running statistics, no cache, model untouched).
Tensor forward_eval(const ModelParams& model, const Tensor& batch);

struct Gradients {
  std::vector<Tensor> weight;  // aligned with ModelParams::layers
  std::vector<Tensor> bias;
};

Gradients backward(const ModelParams& model, const ForwardCache& cache,
                   std::span<const int> labels);

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // applied to quantizable weights only
  std::size_t batch_size = 64;
};

struct SgdState {
  std::vector<Tensor> vel_weight;
  std::vector<Tensor> vel_bias;
};

/// v <- momentum * v + (g + wd * w); w <- w - lr * v. Weight decay skips
/// biases and batch-norm parameters.
void sgd_step(ModelParams& model, const Gradients& grads, SgdState& state,
              const SgdConfig& config);

/// Top-1 accuracy in [0, 1]; evaluation mode, invariant to sample order.
double evaluate(const ModelParams& model, const data::Dataset& dataset,
                std::size_t batch_size = 256);

struct Histogram {
  std::vector<double> bin_edges;  // num_bins + 1 ascending edges
  std::vector<std::uint64_t> counts;
};

/// Histogram of one quantizable layer's weights (ordinal 0..3) over
/// [min, max] with equal-width bins; max lands in the last bin.
Histogram weight_histogram(const ModelParams& model, std::size_t quant_layer,
                           std::size_t num_bins);

}  // namespace fedq::nn
