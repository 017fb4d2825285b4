#include "fedq/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <random>

namespace fedq::nn {
namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

// ---------------------------------------------------------------------------
// Small dense matmul kernels. A is (M, K) row-major unless transposed by the
// variant; all accumulate into C, which callers zero first.
// ---------------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]
void mm_ab(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_abt(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
void mm_atb(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      double av = a[p * m + i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// 3x3 / pad 1 / stride 1 patch matrix: col is (C*9, H*W).
void im2col(const double* x, std::size_t c_in, std::size_t h, std::size_t w,
            double* col) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < c_in; ++c) {
    const double* xc = x + c * hw;
    for (std::size_t ki = 0; ki < 3; ++ki) {
      for (std::size_t kj = 0; kj < 3; ++kj) {
        double* row = col + ((c * 3 + ki) * 3 + kj) * hw;
        const std::ptrdiff_t di = std::ptrdiff_t(ki) - 1;
        const std::ptrdiff_t dj = std::ptrdiff_t(kj) - 1;
        for (std::size_t oh = 0; oh < h; ++oh) {
          std::ptrdiff_t ih = std::ptrdiff_t(oh) + di;
          double* out = row + oh * w;
          if (ih < 0 || ih >= std::ptrdiff_t(h)) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* in = xc + std::size_t(ih) * w;
          for (std::size_t ow = 0; ow < w; ++ow) {
            std::ptrdiff_t iw = std::ptrdiff_t(ow) + dj;
            out[ow] = (iw < 0 || iw >= std::ptrdiff_t(w)) ? 0.0
                                                          : in[std::size_t(iw)];
          }
        }
      }
    }
  }
}

// Scatter-add of a patch-matrix gradient back onto the input image.
void col2im_add(const double* col, std::size_t c_in, std::size_t h,
                std::size_t w, double* x) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < c_in; ++c) {
    double* xc = x + c * hw;
    for (std::size_t ki = 0; ki < 3; ++ki) {
      for (std::size_t kj = 0; kj < 3; ++kj) {
        const double* row = col + ((c * 3 + ki) * 3 + kj) * hw;
        const std::ptrdiff_t di = std::ptrdiff_t(ki) - 1;
        const std::ptrdiff_t dj = std::ptrdiff_t(kj) - 1;
        for (std::size_t oh = 0; oh < h; ++oh) {
          std::ptrdiff_t ih = std::ptrdiff_t(oh) + di;
          if (ih < 0 || ih >= std::ptrdiff_t(h)) continue;
          const double* in = row + oh * w;
          double* out = xc + std::size_t(ih) * w;
          for (std::size_t ow = 0; ow < w; ++ow) {
            std::ptrdiff_t iw = std::ptrdiff_t(ow) + dj;
            if (iw >= 0 && iw < std::ptrdiff_t(w)) out[std::size_t(iw)] += in[ow];
          }
        }
      }
    }
  }
}

void check_conv_shapes(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape.size() != 4) throw ShapeError("conv2d: input must be 4-d");
  if (w.shape.size() != 4 || w.shape[2] != 3 || w.shape[3] != 3)
    throw ShapeError("conv2d: weight must be (F, C, 3, 3)");
  if (x.shape[1] != w.shape[1]) throw ShapeError("conv2d: channel mismatch");
  if (b.size() != w.shape[0]) throw ShapeError("conv2d: bias size mismatch");
}

}  // namespace

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

void linear_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                    Tensor& y) {
  if (x.shape.size() != 2 || w.shape.size() != 2 || x.shape[1] != w.shape[1])
    throw ShapeError("linear: input/weight mismatch");
  if (b.size() != w.shape[0]) throw ShapeError("linear: bias size mismatch");
  const std::size_t n = x.shape[0], in = x.shape[1], out = w.shape[0];
  y = Tensor::zeros({n, out});
  mm_abt(x.data.data(), w.data.data(), y.data.data(), n, in, out);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) y.data[i * out + j] += b.data[j];
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                     Tensor& dx, Tensor& dw, Tensor& db) {
  const std::size_t n = x.shape[0], in = x.shape[1], out = w.shape[0];
  if (dy.shape != std::vector<std::size_t>{n, out})
    throw ShapeError("linear backward: dy shape mismatch");
  dx = Tensor::zeros({n, in});
  dw = Tensor::zeros({out, in});
  db = Tensor::zeros({out});
  mm_ab(dy.data.data(), w.data.data(), dx.data.data(), n, out, in);
  mm_atb(dy.data.data(), x.data.data(), dw.data.data(), out, n, in);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) db.data[j] += dy.data[i * out + j];
}

void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                    Tensor& y) {
  check_conv_shapes(x, w, b);
  const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2],
                    wd = x.shape[3], f = w.shape[0];
  const std::size_t hw = h * wd, ck = c * 9;
  y = Tensor::zeros({n, f, h, wd});
  std::vector<double> col(ck * hw);
  for (std::size_t i = 0; i < n; ++i) {
    im2col(x.data.data() + i * c * hw, c, h, wd, col.data());
    double* yi = y.data.data() + i * f * hw;
    mm_ab(w.data.data(), col.data(), yi, f, ck, hw);
    for (std::size_t fo = 0; fo < f; ++fo) {
      double bv = b.data[fo];
      double* row = yi + fo * hw;
      for (std::size_t s = 0; s < hw; ++s) row[s] += bv;
    }
  }
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                     Tensor& dx, Tensor& dw, Tensor& db) {
  const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2],
                    wd = x.shape[3], f = w.shape[0];
  const std::size_t hw = h * wd, ck = c * 9;
  if (dy.shape != std::vector<std::size_t>{n, f, h, wd})
    throw ShapeError("conv2d backward: dy shape mismatch");
  dx = Tensor::zeros(x.shape);
  dw = Tensor::zeros(w.shape);
  db = Tensor::zeros({f});
  std::vector<double> col(ck * hw), dcol(ck * hw);
  for (std::size_t i = 0; i < n; ++i) {
    const double* dyi = dy.data.data() + i * f * hw;
    im2col(x.data.data() + i * c * hw, c, h, wd, col.data());
    mm_abt(dyi, col.data(), dw.data.data(), f, hw, ck);
    for (std::size_t fo = 0; fo < f; ++fo) {
      const double* row = dyi + fo * hw;
      double acc = 0.0;
      for (std::size_t s = 0; s < hw; ++s) acc += row[s];
      db.data[fo] += acc;
    }
    std::fill(dcol.begin(), dcol.end(), 0.0);
    mm_atb(w.data.data(), dyi, dcol.data(), ck, f, hw);
    col2im_add(dcol.data(), c, h, wd, dx.data.data() + i * c * hw);
  }
}

void batchnorm_forward(const Tensor& x, std::size_t channels,
                       std::size_t spatial, const Tensor& gamma,
                       const Tensor& beta, const Tensor& running_mean,
                       const Tensor& running_var, Tensor* mean_sink,
                       Tensor* var_sink, bool train, double eps,
                       double momentum, Tensor& y, BatchNormCache* cache) {
  const std::size_t cs = channels * spatial;
  if (cs == 0 || x.size() % cs != 0)
    throw ShapeError("batchnorm: input not divisible into (N, C, S)");
  if (gamma.size() != channels || beta.size() != channels)
    throw ShapeError("batchnorm: parameter size mismatch");
  const std::size_t n = x.size() / cs;
  const double rows = double(n * spatial);
  y = Tensor::zeros(x.shape);
  if (cache) {
    cache->xhat.assign(x.size(), 0.0);
    cache->inv_std.assign(channels, 0.0);
    cache->channels = channels;
    cache->spatial = spatial;
  }
  for (std::size_t c = 0; c < channels; ++c) {
    double mean, inv_std, var = 0.0;
    if (train) {
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* xc = x.data.data() + (i * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) sum += xc[s];
      }
      mean = sum / rows;
      for (std::size_t i = 0; i < n; ++i) {
        const double* xc = x.data.data() + (i * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          double d = xc[s] - mean;
          var += d * d;
        }
      }
      var /= rows;  // biased, used for normalization
      inv_std = 1.0 / std::sqrt(var + eps);
    } else {
      if (running_mean.size() != channels || running_var.size() != channels)
        throw ShapeError("batchnorm: running statistics missing");
      mean = running_mean.data[c];
      inv_std = 1.0 / std::sqrt(running_var.data[c] + eps);
    }
    const double g = gamma.data[c], b = beta.data[c];
    for (std::size_t i = 0; i < n; ++i) {
      const double* xc = x.data.data() + (i * channels + c) * spatial;
      double* yc = y.data.data() + (i * channels + c) * spatial;
      double* hc = cache ? cache->xhat.data() + (i * channels + c) * spatial
                         : nullptr;
      for (std::size_t s = 0; s < spatial; ++s) {
        double xhat = (xc[s] - mean) * inv_std;
        if (hc) hc[s] = xhat;
        yc[s] = g * xhat + b;
      }
    }
    if (cache) cache->inv_std[c] = inv_std;
    if (train && mean_sink && var_sink) {
      // Running variance uses the unbiased estimate.
      double var_u = rows > 1.0 ? var * rows / (rows - 1.0) : var;
      mean_sink->data[c] = (1.0 - momentum) * mean_sink->data[c] + momentum * mean;
      var_sink->data[c] = (1.0 - momentum) * var_sink->data[c] + momentum * var_u;
    }
  }
}

void batchnorm_backward(const Tensor& dy, const Tensor& gamma,
                        const BatchNormCache& cache, Tensor& dx,
                        Tensor& dgamma, Tensor& dbeta) {
  const std::size_t channels = cache.channels, spatial = cache.spatial;
  const std::size_t cs = channels * spatial;
  if (cs == 0 || dy.size() != cache.xhat.size())
    throw ShapeError("batchnorm backward: cache/dy mismatch");
  const std::size_t n = dy.size() / cs;
  const double rows = double(n * spatial);
  dx = Tensor::zeros(dy.shape);
  dgamma = Tensor::zeros({channels});
  dbeta = Tensor::zeros({channels});
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* dyc = dy.data.data() + (i * channels + c) * spatial;
      const double* hc = cache.xhat.data() + (i * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        sum_dy += dyc[s];
        sum_dy_xhat += dyc[s] * hc[s];
      }
    }
    dgamma.data[c] = sum_dy_xhat;
    dbeta.data[c] = sum_dy;
    const double k = gamma.data[c] * cache.inv_std[c] / rows;
    for (std::size_t i = 0; i < n; ++i) {
      const double* dyc = dy.data.data() + (i * channels + c) * spatial;
      const double* hc = cache.xhat.data() + (i * channels + c) * spatial;
      double* dxc = dx.data.data() + (i * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s)
        dxc[s] = k * (rows * dyc[s] - sum_dy - hc[s] * sum_dy_xhat);
    }
  }
}

void maxpool2_forward(const Tensor& x, Tensor& y,
                      std::vector<std::uint32_t>& argmax) {
  if (x.shape.size() != 4 || x.shape[2] % 2 != 0 || x.shape[3] % 2 != 0)
    throw ShapeError("maxpool: input must be 4-d with even spatial dims");
  const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2],
                    w = x.shape[3];
  const std::size_t oh = h / 2, ow = w / 2;
  y = Tensor::zeros({n, c, oh, ow});
  argmax.assign(y.size(), 0);
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const double* xp = x.data.data() + nc * h * w;
    double* yp = y.data.data() + nc * oh * ow;
    std::uint32_t* ap = argmax.data() + nc * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t base = (2 * i) * w + 2 * j;
        std::size_t best = base;
        double bv = xp[base];
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            std::size_t idx = base + di * w + dj;
            if (xp[idx] > bv) {  // ties keep the first (row-major) element
              bv = xp[idx];
              best = idx;
            }
          }
        yp[i * ow + j] = bv;
        ap[i * ow + j] = std::uint32_t(nc * h * w + best);
      }
    }
  }
}

void maxpool2_backward(const Tensor& dy,
                       std::span<const std::uint32_t> argmax,
                       std::span<const std::size_t> in_shape, Tensor& dx) {
  if (argmax.size() != dy.size())
    throw ShapeError("maxpool backward: argmax/dy mismatch");
  dx = Tensor::zeros({in_shape.begin(), in_shape.end()});
  for (std::size_t i = 0; i < dy.size(); ++i)
    dx.data[argmax[i]] += dy.data[i];
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.shape.size() != 2) throw ShapeError("softmax: input must be 2-d");
  const std::size_t n = logits.shape[0], k = logits.shape[1];
  Tensor p = Tensor::zeros(logits.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data.data() + i * k;
    double* out = p.data.data() + i * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out[j] = std::exp(row[j] - m);
      sum += out[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[j] /= sum;
  }
  return p;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* dlogits) {
  const std::size_t n = logits.shape[0], k = logits.shape[1];
  if (labels.size() != n)
    throw ShapeError("cross entropy: label count mismatch");
  Tensor p = softmax_rows(logits);
  if (dlogits) *dlogits = p;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    int lab = labels[i];
    if (lab < 0 || std::size_t(lab) >= k)
      throw ShapeError("cross entropy: label out of range");
    loss -= std::log(std::max(p.data[i * k + std::size_t(lab)], 1e-300));
    if (dlogits) dlogits->data[i * k + std::size_t(lab)] -= 1.0;
  }
  if (dlogits)
    for (double& v : dlogits->data) v /= double(n);
  return loss / double(n);
}

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

namespace {

enum class Op { Conv, Bn2d, Pool, Flatten, Linear, Bn1d };

struct PlanStep {
  Op op;
  int layer;  // index into ModelParams::layers, -1 for pool/flatten
};

// Both architectures share the same stack; only tensor sizes differ.
constexpr std::array<PlanStep, 11> kPlan = {{{Op::Conv, 0},
                                             {Op::Bn2d, 1},
                                             {Op::Pool, -1},
                                             {Op::Conv, 2},
                                             {Op::Bn2d, 3},
                                             {Op::Pool, -1},
                                             {Op::Flatten, -1},
                                             {Op::Linear, 4},
                                             {Op::Bn1d, 5},
                                             {Op::Linear, 6},
                                             {Op::Bn1d, 7}}};

constexpr std::array<std::size_t, 4> kQuantLayers = {0, 2, 4, 6};

LayerParams make_conv(std::size_t f, std::size_t c) {
  return {LayerKind::Conv2d, Tensor::zeros({f, c, 3, 3}), Tensor::zeros({f}),
          Tensor{},          Tensor{},                    true};
}

LayerParams make_linear(std::size_t out, std::size_t in) {
  return {LayerKind::Linear, Tensor::zeros({out, in}), Tensor::zeros({out}),
          Tensor{},          Tensor{},                 true};
}

LayerParams make_bn(LayerKind kind, std::size_t c) {
  return {kind,
          Tensor::full({c}, 1.0),
          Tensor::zeros({c}),
          Tensor::zeros({c}),
          Tensor::full({c}, 1.0),
          false};
}

Tensor forward_impl(const ModelParams& model, ModelParams* stats_sink,
                    const Tensor& batch, bool train, ForwardCache* cache) {
  auto in = input_shape(model.architecture_id);
  if (batch.shape.size() != 4 ||
      !std::equal(in.begin(), in.end(), batch.shape.begin() + 1))
    throw ShapeError("forward: batch shape does not match architecture input");
  if (model.layers.size() != 8) throw ShapeError("forward: malformed model");

  if (cache) cache->steps.assign(kPlan.size(), {});
  Tensor cur = batch;
  for (std::size_t si = 0; si < kPlan.size(); ++si) {
    const PlanStep step = kPlan[si];
    ForwardCache::Step* cs = cache ? &cache->steps[si] : nullptr;
    if (cs) cs->in_shape = cur.shape;
    Tensor next;
    switch (step.op) {
      case Op::Conv: {
        const LayerParams& l = model.layers[std::size_t(step.layer)];
        conv2d_forward(cur, l.weight, l.bias, next);
        if (cs) cs->input = std::move(cur);
        break;
      }
      case Op::Linear: {
        const LayerParams& l = model.layers[std::size_t(step.layer)];
        linear_forward(cur, l.weight, l.bias, next);
        if (cs) cs->input = std::move(cur);
        break;
      }
      case Op::Bn2d:
      case Op::Bn1d: {
        const LayerParams& l = model.layers[std::size_t(step.layer)];
        std::size_t channels = cur.shape[1];
        std::size_t spatial =
            step.op == Op::Bn2d ? cur.shape[2] * cur.shape[3] : 1;
        LayerParams* sink =
            stats_sink ? &stats_sink->layers[std::size_t(step.layer)] : nullptr;
        batchnorm_forward(cur, channels, spatial, l.weight, l.bias,
                          l.running_mean, l.running_var,
                          sink ? &sink->running_mean : nullptr,
                          sink ? &sink->running_var : nullptr, train, kBnEps,
                          kBnMomentum, next, cs ? &cs->bn : nullptr);
        break;
      }
      case Op::Pool: {
        std::vector<std::uint32_t> scratch;
        maxpool2_forward(cur, next, cs ? cs->argmax : scratch);
        break;
      }
      case Op::Flatten: {
        next = std::move(cur);
        next.shape = {next.shape[0], next.size() / next.shape[0]};
        break;
      }
    }
    cur = std::move(next);
  }
  Tensor probs = softmax_rows(cur);
  if (cache) {
    cache->logits = std::move(cur);
    cache->probs = probs;
  }
  return probs;
}

}  // namespace

ModelParams build_model(ArchitectureId id, std::uint64_t seed) {
  const std::size_t in_ch = id == ArchitectureId::MnistCnn ? 1 : 3;
  const std::size_t fc_in = id == ArchitectureId::MnistCnn ? 784 : 1024;
  ModelParams m;
  m.architecture_id = id;
  m.layers.push_back(make_conv(16, in_ch));
  m.layers.push_back(make_bn(LayerKind::BatchNorm2d, 16));
  m.layers.push_back(make_conv(16, 16));
  m.layers.push_back(make_bn(LayerKind::BatchNorm2d, 16));
  m.layers.push_back(make_linear(100, fc_in));
  m.layers.push_back(make_bn(LayerKind::BatchNorm1d, 100));
  m.layers.push_back(make_linear(10, 100));
  m.layers.push_back(make_bn(LayerKind::BatchNorm1d, 10));

  std::mt19937_64 rng(splitmix64(seed));
  for (LayerParams& l : m.layers) {
    if (!l.quantizable) continue;
    std::size_t fan_in = l.kind == LayerKind::Conv2d
                             ? l.weight.shape[1] * 9
                             : l.weight.shape[1];
    double bound = 1.0 / std::sqrt(double(fan_in));
    for (double& v : l.weight.data)
      v = (2.0 * uniform_unit(rng) - 1.0) * bound;
  }
  return m;
}

std::vector<std::size_t> input_shape(ArchitectureId id) {
  return id == ArchitectureId::MnistCnn ? std::vector<std::size_t>{1, 28, 28}
                                        : std::vector<std::size_t>{3, 32, 32};
}

std::span<const std::size_t> quantizable_layer_indices() {
  return kQuantLayers;
}

std::vector<std::size_t> quantizable_weight_counts(ArchitectureId id) {
  const std::size_t in_ch = id == ArchitectureId::MnistCnn ? 1 : 3;
  const std::size_t fc_in = id == ArchitectureId::MnistCnn ? 784 : 1024;
  return {16 * in_ch * 9, 16 * 16 * 9, 100 * fc_in, 10 * 100};
}

std::size_t total_quantizable_weights(ArchitectureId id) {
  std::size_t total = 0;
  for (auto c : quantizable_weight_counts(id)) total += c;
  return total;
}

Tensor forward(ModelParams& model, const Tensor& batch, ForwardCache& cache) {
  return forward_impl(model, &model, batch, true, &cache);
}

Tensor forward_eval(const ModelParams& model, const Tensor& batch) {
  return forward_impl(model, nullptr, batch, false, nullptr);
}

Gradients backward(const ModelParams& model, const ForwardCache& cache,
                   std::span<const int> labels) {
  if (cache.steps.size() != kPlan.size())
    throw ShapeError("backward: cache does not match a training forward pass");
  Gradients g;
  g.weight.resize(model.layers.size());
  g.bias.resize(model.layers.size());

  Tensor d;
  softmax_cross_entropy(cache.logits, labels, &d);
  for (std::size_t si = kPlan.size(); si-- > 0;) {
    const PlanStep step = kPlan[si];
    const ForwardCache::Step& cs = cache.steps[si];
    Tensor dx;
    switch (step.op) {
      case Op::Conv: {
        const LayerParams& l = model.layers[std::size_t(step.layer)];
        conv2d_backward(cs.input, l.weight, d, dx,
                        g.weight[std::size_t(step.layer)],
                        g.bias[std::size_t(step.layer)]);
        break;
      }
      case Op::Linear: {
        const LayerParams& l = model.layers[std::size_t(step.layer)];
        linear_backward(cs.input, l.weight, d, dx,
                        g.weight[std::size_t(step.layer)],
                        g.bias[std::size_t(step.layer)]);
        break;
      }
      case Op::Bn2d:
      case Op::Bn1d: {
        const LayerParams& l = model.layers[std::size_t(step.layer)];
        batchnorm_backward(d, l.weight, cs.bn, dx,
                           g.weight[std::size_t(step.layer)],
                           g.bias[std::size_t(step.layer)]);
        break;
      }
      case Op::Pool: {
        maxpool2_backward(d, cs.argmax, cs.in_shape, dx);
        break;
      }
      case Op::Flatten: {
        dx = std::move(d);
        dx.shape = cs.in_shape;
        break;
      }
    }
    d = std::move(dx);
  }
  return g;
}

void sgd_step(ModelParams& model, const Gradients& grads, SgdState& state,
              const SgdConfig& config) {
  const std::size_t n = model.layers.size();
  if (grads.weight.size() != n || grads.bias.size() != n)
    throw ShapeError("sgd: gradient/model layer count mismatch");
  if (state.vel_weight.empty()) {
    state.vel_weight.resize(n);
    state.vel_bias.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      state.vel_weight[i] = Tensor::zeros(model.layers[i].weight.shape);
      state.vel_bias[i] = Tensor::zeros(model.layers[i].bias.shape);
    }
  }
  auto update = [&](Tensor& param, const Tensor& grad, Tensor& vel, double wd) {
    if (!param.same_shape(grad) || !param.same_shape(vel))
      throw ShapeError("sgd: parameter/gradient shape mismatch");
    for (std::size_t i = 0; i < param.size(); ++i) {
      double g = grad.data[i] + wd * param.data[i];
      vel.data[i] = config.momentum * vel.data[i] + g;
      param.data[i] -= config.learning_rate * vel.data[i];
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    LayerParams& l = model.layers[i];
    double wd = l.quantizable ? config.weight_decay : 0.0;
    update(l.weight, grads.weight[i], state.vel_weight[i], wd);
    update(l.bias, grads.bias[i], state.vel_bias[i], 0.0);
  }
}

double evaluate(const ModelParams& model, const data::Dataset& dataset,
                std::size_t batch_size) {
  if (dataset.size() == 0) throw EmptyDataset("evaluate: empty dataset");
  if (batch_size == 0) throw ConfigError("evaluate: batch_size must be > 0");
  const std::size_t dim = Tensor::numel(dataset.sample_shape());
  std::size_t correct = 0;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, dataset.size() - start);
    std::vector<std::size_t> shape = {count};
    auto sample = dataset.sample_shape();
    shape.insert(shape.end(), sample.begin(), sample.end());
    Tensor batch(shape,
                 {dataset.images.data.begin() + std::ptrdiff_t(start * dim),
                  dataset.images.data.begin() +
                      std::ptrdiff_t((start + count) * dim)});
    Tensor probs = forward_eval(model, batch);
    const std::size_t k = probs.shape[1];
    for (std::size_t i = 0; i < count; ++i) {
      const double* row = probs.data.data() + i * k;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
      if (int(best) == dataset.labels[start + i]) ++correct;
    }
  }
  return double(correct) / double(dataset.size());
}

Histogram weight_histogram(const ModelParams& model, std::size_t quant_layer,
                           std::size_t num_bins) {
  if (quant_layer >= kQuantLayers.size())
    throw ConfigError("weight_histogram: layer ordinal out of range");
  if (num_bins == 0) throw ConfigError("weight_histogram: need >= 1 bin");
  const Tensor& w = model.layers[kQuantLayers[quant_layer]].weight;
  double lo = w.data[0], hi = w.data[0];
  for (double v : w.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (lo == hi) {  // constant tensor: widen so every edge is distinct
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram hist;
  hist.bin_edges.resize(num_bins + 1);
  hist.counts.assign(num_bins, 0);
  const double width = (hi - lo) / double(num_bins);
  for (std::size_t i = 0; i <= num_bins; ++i)
    hist.bin_edges[i] = lo + double(i) * width;
  hist.bin_edges[num_bins] = hi;
  for (double v : w.data) {
    auto bin = std::size_t((v - lo) / width);
    if (bin >= num_bins) bin = num_bins - 1;
    ++hist.counts[bin];
  }
  return hist;
}

}  // namespace fedq::nn
