#include "sqa/ndiff.hpp"

#include <malloc.h>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "sqa/errors.hpp"

namespace sqa::ndiff {

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
  Tensor t;
  t.shape = std::move(shape);
  t.values.assign(static_cast<std::size_t>(t.numel()), 0.0);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kBatchNorm: return "batch_norm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool2d: return "max_pool2d";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kGlobalChannelMax: return "global_channel_max";
    case LayerKind::kDense: return "dense";
    case LayerKind::kBilstm: return "bilstm";
    case LayerKind::kSoftplus: return "softplus";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (int i = 0; i <= static_cast<int>(LayerKind::kSoftplus); ++i)
    if (name == to_string(static_cast<LayerKind>(i))) return static_cast<LayerKind>(i);
  throw FormatError("unknown layer kind: " + name);
}

void to_json(nlohmann::json& j, const LayerConfig& cfg) {
  j = nlohmann::json{{"kind", to_string(cfg.kind)}};
  switch (cfg.kind) {
    case LayerKind::kConv2d:
      j["in_channels"] = cfg.in_channels;
      j["out_channels"] = cfg.out_channels;
      j["kernel_h"] = cfg.kernel_h;
      j["kernel_w"] = cfg.kernel_w;
      j["stride_h"] = cfg.stride_h;
      j["stride_w"] = cfg.stride_w;
      break;
    case LayerKind::kBatchNorm:
      j["num_features"] = cfg.num_features;
      break;
    case LayerKind::kMaxPool2d:
      j["pool_h"] = cfg.pool_h;
      j["pool_w"] = cfg.pool_w;
      break;
    case LayerKind::kDropout:
      j["rate"] = cfg.rate;
      break;
    case LayerKind::kDense:
      j["in_features"] = cfg.in_features;
      j["out_features"] = cfg.out_features;
      break;
    case LayerKind::kBilstm:
      j["input_size"] = cfg.input_size;
      j["hidden_size"] = cfg.hidden_size;
      break;
    default:
      break;
  }
}

void from_json(const nlohmann::json& j, LayerConfig& cfg) {
  cfg = LayerConfig{};
  cfg.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  cfg.in_channels = j.value("in_channels", 0);
  cfg.out_channels = j.value("out_channels", 0);
  cfg.kernel_h = j.value("kernel_h", 3);
  cfg.kernel_w = j.value("kernel_w", 3);
  cfg.stride_h = j.value("stride_h", 1);
  cfg.stride_w = j.value("stride_w", 1);
  cfg.num_features = j.value("num_features", 0);
  cfg.pool_h = j.value("pool_h", 2);
  cfg.pool_w = j.value("pool_w", 2);
  cfg.rate = j.value("rate", 0.0);
  cfg.in_features = j.value("in_features", 0);
  cfg.out_features = j.value("out_features", 0);
  cfg.input_size = j.value("input_size", 0);
  cfg.hidden_size = j.value("hidden_size", 0);
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i)
    s += (i ? "," : "") + std::to_string(t.shape[i]);
  return s + "]";
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct ConvCache : LayerCache {
  Tensor input;
};

class Conv2dLayer final : public Layer {
 public:
  explicit Conv2dLayer(const LayerConfig& cfg) : Layer(cfg) {
    weight_ = Tensor::zeros({cfg.out_channels, cfg.in_channels, cfg.kernel_h, cfg.kernel_w});
    bias_ = Tensor::zeros({cfg.out_channels});
    wgrad_ = Tensor::zeros(weight_.shape);
    bgrad_ = Tensor::zeros(bias_.shape);
  }

  void init(Rng& rng) override {
    const double fan_in = static_cast<double>(cfg_.in_channels) * cfg_.kernel_h * cfg_.kernel_w;
    const double std = std::sqrt(2.0 / fan_in);
    for (auto& v : weight_.values) v = rng.normal() * std;
  }

  std::vector<ParamRef> params() override {
    return {{"weight", &weight_, &wgrad_}, {"bias", &bias_, &bgrad_}};
  }

  Tensor forward(Tensor x, Mode, Rng*, CachePtr* cache) override {
    require(x.rank() == 4 && x.dim(1) == cfg_.in_channels,
            "conv2d expects [B,C,H,W] with C=" + std::to_string(cfg_.in_channels) + ", got " +
                shape_str(x));
    Geometry g = geometry(x);
    Tensor out = Tensor::zeros({g.batch, cfg_.out_channels, g.out_h, g.out_w});

    const std::int64_t patch = static_cast<std::int64_t>(cfg_.in_channels) * cfg_.kernel_h * cfg_.kernel_w;
    const std::int64_t cols = g.out_h * g.out_w;
    const int threads = omp_get_max_threads();
    std::vector<std::vector<double>> scratch(static_cast<std::size_t>(threads));

#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < g.batch; ++b) {
      auto& col = scratch[static_cast<std::size_t>(omp_get_thread_num())];
      col.resize(static_cast<std::size_t>(patch * cols));
      im2col(x, b, g, col.data());
      double* out_b = out.values.data() + b * cfg_.out_channels * cols;
      // j-blocked with 4 output channels per pass: each col row read feeds
      // four fmas, which keeps the kernel out of the memory wall
      constexpr std::int64_t kBlock = 1024;
      for (std::int64_t j0 = 0; j0 < cols; j0 += kBlock) {
        const std::int64_t jl = std::min(kBlock, cols - j0);
        for (std::int64_t oc0 = 0; oc0 < cfg_.out_channels; oc0 += 4) {
          const std::int64_t ocl = std::min<std::int64_t>(4, cfg_.out_channels - oc0);
          double* rows[4];
          for (std::int64_t u = 0; u < ocl; ++u) {
            rows[u] = out_b + (oc0 + u) * cols + j0;
            const double bias = bias_.values[static_cast<std::size_t>(oc0 + u)];
            for (std::int64_t j = 0; j < jl; ++j) rows[u][j] = bias;
          }
          for (std::int64_t kk = 0; kk < patch; ++kk) {
            const double* crow = col.data() + kk * cols + j0;
            for (std::int64_t u = 0; u < ocl; ++u) {
              const double wv = weight_.values[static_cast<std::size_t>((oc0 + u) * patch + kk)];
              double* row = rows[u];
              for (std::int64_t j = 0; j < jl; ++j) row[j] += wv * crow[j];
            }
          }
        }
      }
    }

    if (cache) {
      auto c = std::make_unique<ConvCache>();
      c->input = std::move(x);
      *cache = std::move(c);
    }
    return out;
  }

  Tensor backward(LayerCache& cache, Tensor grad_out, bool need_input_grad) override {
    const auto& c = static_cast<ConvCache&>(cache);
    const Tensor& x = c.input;
    Geometry g = geometry(x);
    require(grad_out.rank() == 4 && grad_out.dim(1) == cfg_.out_channels &&
                grad_out.dim(2) == g.out_h && grad_out.dim(3) == g.out_w,
            "conv2d backward shape mismatch " + shape_str(grad_out));

    const std::int64_t patch = static_cast<std::int64_t>(cfg_.in_channels) * cfg_.kernel_h * cfg_.kernel_w;
    const std::int64_t cols = g.out_h * g.out_w;
    Tensor grad_in = need_input_grad ? Tensor::zeros(x.shape) : Tensor();

    // per-sample weight-grad partials, reduced in fixed order afterwards
    std::vector<double> wpart(static_cast<std::size_t>(g.batch * cfg_.out_channels * patch), 0.0);
    const int threads = omp_get_max_threads();
    std::vector<std::vector<double>> scratch(static_cast<std::size_t>(threads));

#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < g.batch; ++b) {
      auto& buf = scratch[static_cast<std::size_t>(omp_get_thread_num())];
      buf.resize(static_cast<std::size_t>(2 * patch * cols));
      double* col = buf.data();
      double* dcol = buf.data() + patch * cols;
      im2col(x, b, g, col);

      const double* gout = grad_out.values.data() + b * cfg_.out_channels * cols;
      double* wp = wpart.data() + b * cfg_.out_channels * patch;
      // j-blocked so grad rows stay cached while col/dcol rows stream;
      // oc == 0 writes dcol so no pre-zeroing pass is needed
      constexpr std::int64_t kBlock = 512;
      for (std::int64_t j0 = 0; j0 < cols; j0 += kBlock) {
        const std::int64_t jl = std::min(kBlock, cols - j0);
        for (std::int64_t kk = 0; kk < patch; ++kk) {
          double* drow = dcol + kk * cols + j0;
          const double* crow = col + kk * cols + j0;
          for (std::int64_t oc = 0; oc < cfg_.out_channels; ++oc) {
            const double* grow = gout + oc * cols + j0;
            const double wv = weight_.values[static_cast<std::size_t>(oc * patch + kk)];
            double acc = 0.0;
            if (need_input_grad) {
              if (oc == 0) {
#pragma omp simd reduction(+ : acc)
                for (std::int64_t j = 0; j < jl; ++j) {
                  acc += grow[j] * crow[j];
                  drow[j] = wv * grow[j];
                }
              } else {
#pragma omp simd reduction(+ : acc)
                for (std::int64_t j = 0; j < jl; ++j) {
                  acc += grow[j] * crow[j];
                  drow[j] += wv * grow[j];
                }
              }
            } else {
#pragma omp simd reduction(+ : acc)
              for (std::int64_t j = 0; j < jl; ++j) acc += grow[j] * crow[j];
            }
            wp[oc * patch + kk] += acc;
          }
        }
      }
      if (need_input_grad) col2im(dcol, b, g, grad_in);
    }

    // deterministic reductions
    for (std::int64_t b = 0; b < g.batch; ++b) {
      const double* wp = wpart.data() + b * cfg_.out_channels * patch;
      for (std::int64_t i = 0; i < cfg_.out_channels * patch; ++i) wgrad_.values[static_cast<std::size_t>(i)] += wp[i];
    }
    for (std::int64_t oc = 0; oc < cfg_.out_channels; ++oc) {
      double acc = 0.0;
      for (std::int64_t b = 0; b < g.batch; ++b) {
        const double* grow = grad_out.values.data() + (b * cfg_.out_channels + oc) * cols;
        for (std::int64_t j = 0; j < cols; ++j) acc += grow[j];
      }
      bgrad_.values[static_cast<std::size_t>(oc)] += acc;
    }
    return grad_in;
  }

 private:
  struct Geometry {
    std::int64_t batch, in_h, in_w, out_h, out_w;
    std::int64_t pad_top, pad_left;
  };

  Geometry geometry(const Tensor& x) const {
    Geometry g;
    g.batch = x.dim(0);
    g.in_h = x.dim(2);
    g.in_w = x.dim(3);
    g.out_h = (g.in_h + cfg_.stride_h - 1) / cfg_.stride_h;
    g.out_w = (g.in_w + cfg_.stride_w - 1) / cfg_.stride_w;
    const std::int64_t pad_h =
        std::max<std::int64_t>(0, (g.out_h - 1) * cfg_.stride_h + cfg_.kernel_h - g.in_h);
    const std::int64_t pad_w =
        std::max<std::int64_t>(0, (g.out_w - 1) * cfg_.stride_w + cfg_.kernel_w - g.in_w);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
    return g;
  }

  void im2col(const Tensor& x, std::int64_t b, const Geometry& g, double* col) const {
    const std::int64_t cols = g.out_h * g.out_w;
    const double* xb = x.values.data() + b * cfg_.in_channels * g.in_h * g.in_w;
    std::int64_t kk = 0;
    for (std::int64_t ic = 0; ic < cfg_.in_channels; ++ic)
      for (std::int64_t ki = 0; ki < cfg_.kernel_h; ++ki)
        for (std::int64_t kj = 0; kj < cfg_.kernel_w; ++kj, ++kk) {
          double* crow = col + kk * cols;
          for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
            const std::int64_t ih = oh * cfg_.stride_h - g.pad_top + ki;
            double* dst = crow + oh * g.out_w;
            if (ih < 0 || ih >= g.in_h) {
              for (std::int64_t ow = 0; ow < g.out_w; ++ow) dst[ow] = 0.0;
              continue;
            }
            const double* xrow = xb + (ic * g.in_h + ih) * g.in_w;
            for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
              const std::int64_t iw = ow * cfg_.stride_w - g.pad_left + kj;
              dst[ow] = (iw >= 0 && iw < g.in_w) ? xrow[iw] : 0.0;
            }
          }
        }
  }

  void col2im(const double* dcol, std::int64_t b, const Geometry& g, Tensor& grad_in) const {
    const std::int64_t cols = g.out_h * g.out_w;
    double* xb = grad_in.values.data() + b * cfg_.in_channels * g.in_h * g.in_w;
    std::int64_t kk = 0;
    for (std::int64_t ic = 0; ic < cfg_.in_channels; ++ic)
      for (std::int64_t ki = 0; ki < cfg_.kernel_h; ++ki)
        for (std::int64_t kj = 0; kj < cfg_.kernel_w; ++kj, ++kk) {
          const double* drow = dcol + kk * cols;
          for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
            const std::int64_t ih = oh * cfg_.stride_h - g.pad_top + ki;
            if (ih < 0 || ih >= g.in_h) continue;
            double* xrow = xb + (ic * g.in_h + ih) * g.in_w;
            const double* src = drow + oh * g.out_w;
            for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
              const std::int64_t iw = ow * cfg_.stride_w - g.pad_left + kj;
              if (iw >= 0 && iw < g.in_w) xrow[iw] += src[ow];
            }
          }
        }
  }

  Tensor weight_, bias_, wgrad_, bgrad_;
};

// ---------------------------------------------------------------------------
// batch_norm (2d feature maps, per-channel statistics)
// ---------------------------------------------------------------------------

struct BatchNormCache : LayerCache {
  Tensor input;
  std::vector<double> mean, inv_std;  // per channel; xhat is recomputed on the fly
};

class BatchNormLayer final : public Layer {
 public:
  explicit BatchNormLayer(const LayerConfig& cfg) : Layer(cfg) {
    gamma_ = Tensor::zeros({cfg.num_features});
    beta_ = Tensor::zeros({cfg.num_features});
    ggrad_ = Tensor::zeros(gamma_.shape);
    bgrad_ = Tensor::zeros(beta_.shape);
    running_mean_ = Tensor::zeros({cfg.num_features});
    running_var_ = Tensor::zeros({cfg.num_features});
    for (auto& v : gamma_.values) v = 1.0;
    for (auto& v : running_var_.values) v = 1.0;
  }

  std::vector<ParamRef> params() override {
    return {{"gamma", &gamma_, &ggrad_}, {"beta", &beta_, &bgrad_}};
  }
  std::vector<ParamRef> buffers() override {
    return {{"running_mean", &running_mean_, nullptr}, {"running_var", &running_var_, nullptr}};
  }

  Tensor forward(Tensor x, Mode mode, Rng*, CachePtr* cache) override {
    require(x.rank() == 4 && x.dim(1) == cfg_.num_features,
            "batch_norm expects [B,C,H,W] with C=" + std::to_string(cfg_.num_features) +
                ", got " + shape_str(x));
    const std::int64_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
    const std::int64_t n = batch * plane;

    auto bn_cache = (cache != nullptr) ? std::make_unique<BatchNormCache>() : nullptr;
    if (bn_cache) {
      bn_cache->mean.assign(static_cast<std::size_t>(channels), 0.0);
      bn_cache->inv_std.assign(static_cast<std::size_t>(channels), 0.0);
    }
    // eval normalizes in place; train writes a fresh tensor and keeps the input
    Tensor out = bn_cache ? Tensor::zeros(x.shape) : Tensor();

#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < channels; ++c) {
      double mean, var;
      if (mode == Mode::kTrain) {
        double sum = 0.0;
        for (std::int64_t b = 0; b < batch; ++b) {
          const double* p = x.values.data() + (b * channels + c) * plane;
#pragma omp simd reduction(+ : sum)
          for (std::int64_t i = 0; i < plane; ++i) sum += p[i];
        }
        mean = sum / static_cast<double>(n);
        double ss = 0.0;
        for (std::int64_t b = 0; b < batch; ++b) {
          const double* p = x.values.data() + (b * channels + c) * plane;
#pragma omp simd reduction(+ : ss)
          for (std::int64_t i = 0; i < plane; ++i) ss += (p[i] - mean) * (p[i] - mean);
        }
        var = ss / static_cast<double>(n);  // biased, used for normalization
      } else {
        mean = running_mean_.values[static_cast<std::size_t>(c)];
        var = running_var_.values[static_cast<std::size_t>(c)];
      }
      const double inv_std = 1.0 / std::sqrt(var + kEps);
      const double gm = gamma_.values[static_cast<std::size_t>(c)];
      const double bt = beta_.values[static_cast<std::size_t>(c)];
      for (std::int64_t b = 0; b < batch; ++b) {
        const double* p = x.values.data() + (b * channels + c) * plane;
        double* o = (bn_cache ? out.values.data() : x.values.data()) + (b * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) o[i] = gm * (p[i] - mean) * inv_std + bt;
      }
      if (bn_cache) {
        bn_cache->mean[static_cast<std::size_t>(c)] = mean;
        bn_cache->inv_std[static_cast<std::size_t>(c)] = inv_std;
      }
      if (mode == Mode::kTrain) {
        // running stats use the unbiased variance, momentum 0.1
        const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1) : var;
        running_mean_.values[static_cast<std::size_t>(c)] =
            (1.0 - kMomentum) * running_mean_.values[static_cast<std::size_t>(c)] + kMomentum * mean;
        running_var_.values[static_cast<std::size_t>(c)] =
            (1.0 - kMomentum) * running_var_.values[static_cast<std::size_t>(c)] + kMomentum * unbiased;
      }
    }
    if (!bn_cache) return x;
    bn_cache->input = std::move(x);
    *cache = std::move(bn_cache);
    return out;
  }

  Tensor backward(LayerCache& cache, Tensor grad_out, bool) override {
    auto& c = static_cast<BatchNormCache&>(cache);
    const Tensor& x = c.input;
    require(grad_out.shape == x.shape, "batch_norm backward shape mismatch");
    const std::int64_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
    const std::int64_t n = batch * plane;
    Tensor& grad_in = grad_out;  // rewritten in place after the sum pass

#pragma omp parallel for schedule(static)
    for (std::int64_t ch = 0; ch < channels; ++ch) {
      const double mean = c.mean[static_cast<std::size_t>(ch)];
      const double inv_std = c.inv_std[static_cast<std::size_t>(ch)];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const double* gy = grad_out.values.data() + (b * channels + ch) * plane;
        const double* px = x.values.data() + (b * channels + ch) * plane;
#pragma omp simd reduction(+ : sum_dy, sum_dy_xhat)
        for (std::int64_t i = 0; i < plane; ++i) {
          sum_dy += gy[i];
          sum_dy_xhat += gy[i] * (px[i] - mean) * inv_std;
        }
      }
      ggrad_.values[static_cast<std::size_t>(ch)] += sum_dy_xhat;
      bgrad_.values[static_cast<std::size_t>(ch)] += sum_dy;
      const double gm = gamma_.values[static_cast<std::size_t>(ch)];
      const double scale = gm * inv_std / static_cast<double>(n);
      for (std::int64_t b = 0; b < batch; ++b) {
        const double* px = x.values.data() + (b * channels + ch) * plane;
        double* gi = grad_in.values.data() + (b * channels + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i)
          gi[i] = scale * (static_cast<double>(n) * gi[i] - sum_dy -
                           (px[i] - mean) * inv_std * sum_dy_xhat);
      }
    }
    return grad_out;
  }

 private:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;
  Tensor gamma_, beta_, ggrad_, bgrad_;
  Tensor running_mean_, running_var_;
};

// ---------------------------------------------------------------------------
// element-wise layers
// ---------------------------------------------------------------------------

struct BitMaskCache : LayerCache {
  std::vector<unsigned char> keep;  // per element: gradient passes through
  double scale = 1.0;               // factor applied to kept elements
};

class ReluLayer final : public Layer {
 public:
  using Layer::Layer;
  Tensor forward(Tensor x, Mode, Rng*, CachePtr* cache) override {
    auto mc = cache ? std::make_unique<BitMaskCache>() : nullptr;
    if (mc) mc->keep.assign(x.values.size(), 0);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const auto idx = static_cast<std::size_t>(i);
      // subgradient 0 at exactly 0
      if (x.values[idx] > 0.0) {
        if (mc) mc->keep[idx] = 1;
      } else {
        x.values[idx] = 0.0;
      }
    }
    if (cache) *cache = std::move(mc);
    return x;
  }
  Tensor backward(LayerCache& cache, Tensor grad_out, bool) override {
    auto& c = static_cast<BitMaskCache&>(cache);
    require(grad_out.values.size() == c.keep.size(), "relu backward shape mismatch");
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < grad_out.numel(); ++i)
      if (!c.keep[static_cast<std::size_t>(i)]) grad_out.values[static_cast<std::size_t>(i)] = 0.0;
    return grad_out;
  }
};

struct SoftplusCache : LayerCache {
  Tensor deriv;  // sigmoid of the input
};

class SoftplusLayer final : public Layer {
 public:
  using Layer::Layer;
  Tensor forward(Tensor x, Mode, Rng*, CachePtr* cache) override {
    auto mc = cache ? std::make_unique<SoftplusCache>() : nullptr;
    if (mc) mc->deriv = Tensor::zeros(x.shape);
    for (std::size_t i = 0; i < x.values.size(); ++i) {
      if (mc) mc->deriv.values[i] = sigmoid(x.values[i]);
      x.values[i] = softplus(x.values[i]);
    }
    if (cache) *cache = std::move(mc);
    return x;
  }
  Tensor backward(LayerCache& cache, Tensor grad_out, bool) override {
    auto& c = static_cast<SoftplusCache&>(cache);
    for (std::size_t i = 0; i < grad_out.values.size(); ++i)
      grad_out.values[i] *= c.deriv.values[i];
    return grad_out;
  }
};

class DropoutLayer final : public Layer {
 public:
  using Layer::Layer;
  Tensor forward(Tensor x, Mode mode, Rng* rng, CachePtr* cache) override {
    if (mode == Mode::kEval || cfg_.rate <= 0.0) {
      if (cache) {
        auto mc = std::make_unique<BitMaskCache>();
        mc->keep.assign(x.values.size(), 1);
        *cache = std::move(mc);
      }
      return x;
    }
    if (rng == nullptr) throw StateError("dropout in train mode needs an rng");
    const double keep = 1.0 - cfg_.rate;
    auto mc = std::make_unique<BitMaskCache>();
    mc->keep.assign(x.values.size(), 0);
    mc->scale = 1.0 / keep;
    // sequential draws keep the stream deterministic
    for (std::size_t i = 0; i < x.values.size(); ++i) {
      if (rng->uniform() < keep) {
        mc->keep[i] = 1;
        x.values[i] *= mc->scale;
      } else {
        x.values[i] = 0.0;
      }
    }
    if (cache) *cache = std::move(mc);
    return x;
  }
  Tensor backward(LayerCache& cache, Tensor grad_out, bool) override {
    auto& c = static_cast<BitMaskCache&>(cache);
    require(grad_out.values.size() == c.keep.size(), "dropout backward shape mismatch");
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < grad_out.numel(); ++i) {
      const auto idx = static_cast<std::size_t>(i);
      grad_out.values[idx] = c.keep[idx] ? grad_out.values[idx] * c.scale : 0.0;
    }
    return grad_out;
  }
};

// ---------------------------------------------------------------------------
// max_pool2d
// ---------------------------------------------------------------------------

struct PoolCache : LayerCache {
  std::vector<std::int64_t> argmax;  // flat input index per output element
  std::vector<std::int64_t> in_shape;
};

class MaxPool2dLayer final : public Layer {
 public:
  using Layer::Layer;
  Tensor forward(Tensor x, Mode, Rng*, CachePtr* cache) override {
    require(x.rank() == 4, "max_pool2d expects [B,C,H,W], got " + shape_str(x));
    const std::int64_t batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = h / cfg_.pool_h, ow = w / cfg_.pool_w;
    require(oh > 0 && ow > 0, "max_pool2d input smaller than the window: " + shape_str(x));
    Tensor out = Tensor::zeros({batch, channels, oh, ow});
    auto pc = cache ? std::make_unique<PoolCache>() : nullptr;
    if (pc) {
      pc->argmax.assign(static_cast<std::size_t>(out.numel()), 0);
      pc->in_shape = x.shape;
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < batch * channels; ++bc) {
      const double* plane = x.values.data() + bc * h * w;
      double* oplane = out.values.data() + bc * oh * ow;
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
          double best = -1e300;
          std::int64_t best_idx = 0;
          for (int pi = 0; pi < cfg_.pool_h; ++pi)
            for (int pj = 0; pj < cfg_.pool_w; ++pj) {
              const std::int64_t idx = (i * cfg_.pool_h + pi) * w + (j * cfg_.pool_w + pj);
              if (plane[idx] > best) {  // ties keep the first position
                best = plane[idx];
                best_idx = idx;
              }
            }
          oplane[i * ow + j] = best;
          if (pc) pc->argmax[static_cast<std::size_t>(bc * oh * ow + i * ow + j)] = bc * h * w + best_idx;
        }
    }
    if (cache) *cache = std::move(pc);
    return out;
  }
  Tensor backward(LayerCache& cache, Tensor grad_out, bool) override {
    auto& c = static_cast<PoolCache&>(cache);
    require(grad_out.numel() == static_cast<std::int64_t>(c.argmax.size()),
            "max_pool2d backward shape mismatch");
    Tensor grad_in = Tensor::zeros(c.in_shape);
    // pool windows are disjoint, so the scatter is race-free
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(c.argmax.size()); ++i)
      grad_in.values[static_cast<std::size_t>(c.argmax[static_cast<std::size_t>(i)])] +=
          grad_out.values[static_cast<std::size_t>(i)];
    return grad_in;
  }
};

// ---------------------------------------------------------------------------
// global_channel_max: [B,C,H,W] -> [B,C] maxima over the time-frequency plane
// ---------------------------------------------------------------------------

class GlobalChannelMaxLayer final : public Layer {
 public:
  using Layer::Layer;
  Tensor forward(Tensor x, Mode, Rng*, CachePtr* cache) override {
    require(x.rank() == 4, "global_channel_max expects [B,C,H,W], got " + shape_str(x));
    const std::int64_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros({batch, channels});
    auto pc = cache ? std::make_unique<PoolCache>() : nullptr;
    if (pc) {
      pc->argmax.assign(static_cast<std::size_t>(batch * channels), 0);
      pc->in_shape = x.shape;
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < batch * channels; ++bc) {
      const double* p = x.values.data() + bc * plane;
      double best = p[0];
      std::int64_t best_i = 0;
      for (std::int64_t i = 1; i < plane; ++i)
        if (p[i] > best) {
          best = p[i];
          best_i = i;
        }
      out.values[static_cast<std::size_t>(bc)] = best;
      if (pc) pc->argmax[static_cast<std::size_t>(bc)] = bc * plane + best_i;
    }
    if (cache) *cache = std::move(pc);
    return out;
  }
  Tensor backward(LayerCache& cache, Tensor grad_out, bool) override {
    auto& c = static_cast<PoolCache&>(cache);
    Tensor grad_in = Tensor::zeros(c.in_shape);
    for (std::size_t i = 0; i < c.argmax.size(); ++i)
      grad_in.values[static_cast<std::size_t>(c.argmax[i])] += grad_out.values[i];
    return grad_in;
  }
};

// ---------------------------------------------------------------------------
// dense (applied to the trailing dimension)
// ---------------------------------------------------------------------------

struct DenseCache : LayerCache {
  Tensor input;
};

class DenseLayer final : public Layer {
 public:
  explicit DenseLayer(const LayerConfig& cfg) : Layer(cfg) {
    weight_ = Tensor::zeros({cfg.out_features, cfg.in_features});
    bias_ = Tensor::zeros({cfg.out_features});
    wgrad_ = Tensor::zeros(weight_.shape);
    bgrad_ = Tensor::zeros(bias_.shape);
  }

  void init(Rng& rng) override {
    const double std = std::sqrt(2.0 / static_cast<double>(cfg_.in_features));
    for (auto& v : weight_.values) v = rng.normal() * std;
  }

  std::vector<ParamRef> params() override {
    return {{"weight", &weight_, &wgrad_}, {"bias", &bias_, &bgrad_}};
  }

  Tensor forward(Tensor x, Mode, Rng*, CachePtr* cache) override {
    require(x.rank() >= 2 && x.shape.back() == cfg_.in_features,
            "dense expects trailing dim " + std::to_string(cfg_.in_features) + ", got " +
                shape_str(x));
    const std::int64_t d = cfg_.in_features, o = cfg_.out_features;
    const std::int64_t rows = x.numel() / d;
    auto out_shape = x.shape;
    out_shape.back() = o;
    Tensor out = Tensor::zeros(out_shape);
#pragma omp parallel for schedule(static)
    for (std::int64_t m = 0; m < rows; ++m) {
      const double* xr = x.values.data() + m * d;
      double* yr = out.values.data() + m * o;
      for (std::int64_t j = 0; j < o; ++j) {
        const double* wr = weight_.values.data() + j * d;
        double acc = bias_.values[static_cast<std::size_t>(j)];
#pragma omp simd reduction(+ : acc)
        for (std::int64_t i = 0; i < d; ++i) acc += wr[i] * xr[i];
        yr[j] = acc;
      }
    }
    if (cache) {
      auto dc = std::make_unique<DenseCache>();
      dc->input = std::move(x);
      *cache = std::move(dc);
    }
    return out;
  }

  Tensor backward(LayerCache& cache, Tensor grad_out, bool) override {
    auto& c = static_cast<DenseCache&>(cache);
    const Tensor& x = c.input;
    const std::int64_t d = cfg_.in_features, o = cfg_.out_features;
    const std::int64_t rows = x.numel() / d;
    require(grad_out.numel() == rows * o, "dense backward shape mismatch");

    Tensor grad_in = Tensor::zeros(x.shape);
#pragma omp parallel for schedule(static)
    for (std::int64_t m = 0; m < rows; ++m) {
      const double* gr = grad_out.values.data() + m * o;
      double* gi = grad_in.values.data() + m * d;
      for (std::int64_t j = 0; j < o; ++j) {
        const double g = gr[j];
        const double* wr = weight_.values.data() + j * d;
        for (std::int64_t i = 0; i < d; ++i) gi[i] += g * wr[i];
      }
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < o; ++j) {
      double* wr = wgrad_.values.data() + j * d;
      double bacc = 0.0;
      for (std::int64_t m = 0; m < rows; ++m) {
        const double g = grad_out.values[static_cast<std::size_t>(m * o + j)];
        bacc += g;
        const double* xr = x.values.data() + m * d;
        for (std::int64_t i = 0; i < d; ++i) wr[i] += g * xr[i];
      }
      bgrad_.values[static_cast<std::size_t>(j)] += bacc;
    }
    return grad_in;
  }

 private:
  Tensor weight_, bias_, wgrad_, bgrad_;
};

// ---------------------------------------------------------------------------
// bilstm: [B,T,D] (or [B,C,T,F], flattened per frame) -> [B,T,2H]
// ---------------------------------------------------------------------------

struct BilstmCache : LayerCache {
  Tensor input;                       // [B,T,D] after any flattening
  std::vector<std::int64_t> orig_shape;
  // per direction, per timestep: activated gates [B,4H], cell [B,H], tanh(c) [B,H], h [B,H]
  std::vector<std::vector<double>> gates[2], cell[2], tanh_c[2], hidden[2];
};

class BilstmLayer final : public Layer {
 public:
  explicit BilstmLayer(const LayerConfig& cfg) : Layer(cfg) {
    const int d = cfg.input_size, h = cfg.hidden_size;
    for (int dir = 0; dir < 2; ++dir) {
      w_ih_[dir] = Tensor::zeros({4 * h, d});
      w_hh_[dir] = Tensor::zeros({4 * h, h});
      bias_[dir] = Tensor::zeros({4 * h});
      gw_ih_[dir] = Tensor::zeros(w_ih_[dir].shape);
      gw_hh_[dir] = Tensor::zeros(w_hh_[dir].shape);
      gbias_[dir] = Tensor::zeros(bias_[dir].shape);
    }
  }

  void init(Rng& rng) override {
    const double k = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_size));
    for (int dir = 0; dir < 2; ++dir) {
      for (auto& v : w_ih_[dir].values) v = rng.uniform(-k, k);
      for (auto& v : w_hh_[dir].values) v = rng.uniform(-k, k);
      for (auto& v : bias_[dir].values) v = rng.uniform(-k, k);
      // forget gate bias starts at 1 so long sequences keep gradient flow
      for (int i = cfg_.hidden_size; i < 2 * cfg_.hidden_size; ++i)
        bias_[dir].values[static_cast<std::size_t>(i)] += 1.0;
    }
  }

  std::vector<ParamRef> params() override {
    return {{"w_ih_fwd", &w_ih_[0], &gw_ih_[0]},   {"w_hh_fwd", &w_hh_[0], &gw_hh_[0]},
            {"bias_fwd", &bias_[0], &gbias_[0]},   {"w_ih_bwd", &w_ih_[1], &gw_ih_[1]},
            {"w_hh_bwd", &w_hh_[1], &gw_hh_[1]},   {"bias_bwd", &bias_[1], &gbias_[1]}};
  }

  Tensor forward(Tensor x_in, Mode, Rng*, CachePtr* cache) override {
    const auto orig_shape = x_in.shape;
    Tensor x = flatten_input(std::move(x_in));
    const std::int64_t batch = x.dim(0), steps = x.dim(1), d = x.dim(2), h = cfg_.hidden_size;
    Tensor out = Tensor::zeros({batch, steps, 2 * h});
    auto bc = cache ? std::make_unique<BilstmCache>() : nullptr;
    if (bc) bc->orig_shape = orig_shape;

    for (int dir = 0; dir < 2; ++dir) {
      std::vector<double> h_prev(static_cast<std::size_t>(batch * h), 0.0);
      std::vector<double> c_prev(static_cast<std::size_t>(batch * h), 0.0);
      if (bc) {
        bc->gates[dir].resize(static_cast<std::size_t>(steps));
        bc->cell[dir].resize(static_cast<std::size_t>(steps));
        bc->tanh_c[dir].resize(static_cast<std::size_t>(steps));
        bc->hidden[dir].resize(static_cast<std::size_t>(steps));
      }
      for (std::int64_t step = 0; step < steps; ++step) {
        const std::int64_t t = dir == 0 ? step : steps - 1 - step;
        std::vector<double> gates(static_cast<std::size_t>(batch * 4 * h));
        std::vector<double> c_new(static_cast<std::size_t>(batch * h));
        std::vector<double> tc(static_cast<std::size_t>(batch * h));
        std::vector<double> h_new(static_cast<std::size_t>(batch * h));
#pragma omp parallel for schedule(static)
        for (std::int64_t b = 0; b < batch; ++b) {
          const double* xt = x.values.data() + (b * steps + t) * d;
          const double* hp = h_prev.data() + b * h;
          double* g = gates.data() + b * 4 * h;
          for (std::int64_t j = 0; j < 4 * h; ++j) {
            const double* wi = w_ih_[dir].values.data() + j * d;
            const double* wh = w_hh_[dir].values.data() + j * h;
            double acc = bias_[dir].values[static_cast<std::size_t>(j)];
#pragma omp simd reduction(+ : acc)
            for (std::int64_t i = 0; i < d; ++i) acc += wi[i] * xt[i];
#pragma omp simd reduction(+ : acc)
            for (std::int64_t i = 0; i < h; ++i) acc += wh[i] * hp[i];
            g[j] = acc;
          }
          const double* cp = c_prev.data() + b * h;
          double* cn = c_new.data() + b * h;
          double* tcn = tc.data() + b * h;
          double* hn = h_new.data() + b * h;
          for (std::int64_t i = 0; i < h; ++i) {
            const double gi = sigmoid(g[i]);
            const double gf = sigmoid(g[h + i]);
            const double gg = std::tanh(g[2 * h + i]);
            const double go = sigmoid(g[3 * h + i]);
            g[i] = gi;
            g[h + i] = gf;
            g[2 * h + i] = gg;
            g[3 * h + i] = go;
            cn[i] = gf * cp[i] + gi * gg;
            tcn[i] = std::tanh(cn[i]);
            hn[i] = go * tcn[i];
          }
          double* orow = out.values.data() + (b * steps + t) * 2 * h + dir * h;
          for (std::int64_t i = 0; i < h; ++i) orow[i] = hn[i];
        }
        if (bc) {
          bc->gates[dir][static_cast<std::size_t>(step)] = gates;
          bc->cell[dir][static_cast<std::size_t>(step)] = c_new;
          bc->tanh_c[dir][static_cast<std::size_t>(step)] = tc;
          bc->hidden[dir][static_cast<std::size_t>(step)] = h_new;
        }
        h_prev.swap(h_new);
        c_prev.swap(c_new);
      }
    }
    if (cache) {
      bc->input = std::move(x);
      *cache = std::move(bc);
    }
    return out;
  }

  Tensor backward(LayerCache& cache, Tensor grad_out, bool) override {
    auto& c = static_cast<BilstmCache&>(cache);
    const Tensor& x = c.input;
    const std::int64_t batch = x.dim(0), steps = x.dim(1), d = x.dim(2), h = cfg_.hidden_size;
    require(grad_out.numel() == batch * steps * 2 * h, "bilstm backward shape mismatch");
    Tensor grad_flat = Tensor::zeros(x.shape);

    for (int dir = 0; dir < 2; ++dir) {
      std::vector<double> dh_next(static_cast<std::size_t>(batch * h), 0.0);
      std::vector<double> dc_next(static_cast<std::size_t>(batch * h), 0.0);
      std::vector<double> dgates(static_cast<std::size_t>(batch * 4 * h));
      for (std::int64_t step = steps; step-- > 0;) {
        const std::int64_t t = dir == 0 ? step : steps - 1 - step;
        const auto& gates = c.gates[dir][static_cast<std::size_t>(step)];
        const auto& tanh_c = c.tanh_c[dir][static_cast<std::size_t>(step)];
        const double* c_prev = step > 0 ? c.cell[dir][static_cast<std::size_t>(step - 1)].data() : nullptr;
        const double* h_prev = step > 0 ? c.hidden[dir][static_cast<std::size_t>(step - 1)].data() : nullptr;

#pragma omp parallel for schedule(static)
        for (std::int64_t b = 0; b < batch; ++b) {
          const double* gy = grad_out.values.data() + (b * steps + t) * 2 * h + dir * h;
          const double* g = gates.data() + b * 4 * h;
          const double* tcb = tanh_c.data() + b * h;
          double* dg = dgates.data() + b * 4 * h;
          double* dhn = dh_next.data() + b * h;
          double* dcn = dc_next.data() + b * h;
          for (std::int64_t i = 0; i < h; ++i) {
            const double gi = g[i], gf = g[h + i], gg = g[2 * h + i], go = g[3 * h + i];
            const double dh = gy[i] + dhn[i];
            const double dc = dh * go * (1.0 - tcb[i] * tcb[i]) + dcn[i];
            const double cp = c_prev ? c_prev[b * h + i] : 0.0;
            dg[i] = dc * gg * gi * (1.0 - gi);
            dg[h + i] = dc * cp * gf * (1.0 - gf);
            dg[2 * h + i] = dc * gi * (1.0 - gg * gg);
            dg[3 * h + i] = dh * tcb[i] * go * (1.0 - go);
            dcn[i] = dc * gf;
          }
        }

        // parameter grads, fixed accumulation order over rows
#pragma omp parallel for schedule(static)
        for (std::int64_t j = 0; j < 4 * h; ++j) {
          double* wi = gw_ih_[dir].values.data() + j * d;
          double* wh = gw_hh_[dir].values.data() + j * h;
          double bacc = 0.0;
          for (std::int64_t b = 0; b < batch; ++b) {
            const double g = dgates[static_cast<std::size_t>(b * 4 * h + j)];
            bacc += g;
            const double* xt = x.values.data() + (b * steps + t) * d;
            for (std::int64_t i = 0; i < d; ++i) wi[i] += g * xt[i];
            if (h_prev) {
              const double* hp = h_prev + b * h;
              for (std::int64_t i = 0; i < h; ++i) wh[i] += g * hp[i];
            }
          }
          gbias_[dir].values[static_cast<std::size_t>(j)] += bacc;
        }

        // input and recurrent grads
#pragma omp parallel for schedule(static)
        for (std::int64_t b = 0; b < batch; ++b) {
          const double* dg = dgates.data() + b * 4 * h;
          double* gx = grad_flat.values.data() + (b * steps + t) * d;
          double* dhn = dh_next.data() + b * h;
          for (std::int64_t i = 0; i < h; ++i) dhn[i] = 0.0;
          for (std::int64_t j = 0; j < 4 * h; ++j) {
            const double g = dg[j];
            const double* wi = w_ih_[dir].values.data() + j * d;
            for (std::int64_t i = 0; i < d; ++i) gx[i] += g * wi[i];
            const double* wh = w_hh_[dir].values.data() + j * h;
            for (std::int64_t i = 0; i < h; ++i) dhn[i] += g * wh[i];
          }
        }
      }
    }

    // restore the caller's layout if the input was [B,C,T,F]
    if (c.orig_shape.size() == 4) {
      Tensor grad_in = Tensor::zeros(c.orig_shape);
      unflatten_grad(grad_flat, grad_in);
      return grad_in;
    }
    return grad_flat;
  }

 private:
  Tensor flatten_input(Tensor x) const {
    if (x.rank() == 3) {
      require(x.dim(2) == cfg_.input_size, "bilstm expects feature dim " +
                                               std::to_string(cfg_.input_size) + ", got " +
                                               shape_str(x));
      return x;
    }
    require(x.rank() == 4, "bilstm expects [B,T,D] or [B,C,T,F], got " + shape_str(x));
    const std::int64_t batch = x.dim(0), channels = x.dim(1), steps = x.dim(2), freq = x.dim(3);
    require(channels * freq == cfg_.input_size,
            "bilstm expects C*F = " + std::to_string(cfg_.input_size) + ", got " + shape_str(x));
    Tensor flat = Tensor::zeros({batch, steps, channels * freq});
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t ch = 0; ch < channels; ++ch)
        for (std::int64_t t = 0; t < steps; ++t) {
          const double* src = x.values.data() + ((b * channels + ch) * steps + t) * freq;
          double* dst = flat.values.data() + (b * steps + t) * (channels * freq) + ch * freq;
          std::memcpy(dst, src, static_cast<std::size_t>(freq) * sizeof(double));
        }
    return flat;
  }

  void unflatten_grad(const Tensor& flat, Tensor& grad_in) const {
    const std::int64_t batch = grad_in.dim(0), channels = grad_in.dim(1), steps = grad_in.dim(2),
                       freq = grad_in.dim(3);
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t ch = 0; ch < channels; ++ch)
        for (std::int64_t t = 0; t < steps; ++t) {
          const double* src = flat.values.data() + (b * steps + t) * (channels * freq) + ch * freq;
          double* dst = grad_in.values.data() + ((b * channels + ch) * steps + t) * freq;
          std::memcpy(dst, src, static_cast<std::size_t>(freq) * sizeof(double));
        }
  }

  Tensor w_ih_[2], w_hh_[2], bias_[2];
  Tensor gw_ih_[2], gw_hh_[2], gbias_[2];
};

}  // namespace

std::unique_ptr<Layer> make_layer(const LayerConfig& cfg) {
  switch (cfg.kind) {
    case LayerKind::kConv2d: {
      if (cfg.in_channels < 1 || cfg.out_channels < 1 || cfg.stride_h < 1 || cfg.stride_w < 1)
        throw ConfigError("bad conv2d config");
      return std::make_unique<Conv2dLayer>(cfg);
    }
    case LayerKind::kBatchNorm:
      if (cfg.num_features < 1) throw ConfigError("bad batch_norm config");
      return std::make_unique<BatchNormLayer>(cfg);
    case LayerKind::kRelu:
      return std::make_unique<ReluLayer>(cfg);
    case LayerKind::kMaxPool2d:
      if (cfg.pool_h < 1 || cfg.pool_w < 1) throw ConfigError("bad max_pool2d config");
      return std::make_unique<MaxPool2dLayer>(cfg);
    case LayerKind::kDropout:
      if (cfg.rate < 0.0 || cfg.rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
      return std::make_unique<DropoutLayer>(cfg);
    case LayerKind::kGlobalChannelMax:
      return std::make_unique<GlobalChannelMaxLayer>(cfg);
    case LayerKind::kDense:
      if (cfg.in_features < 1 || cfg.out_features < 1) throw ConfigError("bad dense config");
      return std::make_unique<DenseLayer>(cfg);
    case LayerKind::kBilstm:
      if (cfg.input_size < 1 || cfg.hidden_size < 1) throw ConfigError("bad bilstm config");
      return std::make_unique<BilstmLayer>(cfg);
    case LayerKind::kSoftplus:
      return std::make_unique<SoftplusLayer>(cfg);
  }
  throw ConfigError("unknown layer kind");
}

Graph::Graph(const std::vector<LayerConfig>& configs, std::uint64_t init_seed) {
  layers_.reserve(configs.size());
  for (std::size_t i = 0; i < configs.size(); ++i) {
    layers_.push_back(make_layer(configs[i]));
    Rng rng(child_seed(init_seed, i));
    layers_.back()->init(rng);
  }
}

Tensor Graph::forward(Tensor x, Mode mode, Rng* rng, Tape* tape) {
  if (mode == Mode::kTrain && tape == nullptr)
    throw StateError("train-mode forward requires a tape");
  if (tape) {
    tape->caches.clear();
    tape->caches.resize(layers_.size());
    tape->consumed = false;
  }
  Tensor cur = std::move(x);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      cur = layers_[i]->forward(std::move(cur), mode, rng, tape ? &tape->caches[i] : nullptr);
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" +
                       to_string(layers_[i]->config().kind) + "): " + e.what());
    }
  }
  return cur;
}

Tensor Graph::backward(Tape& tape, Tensor loss_grad, bool want_input_grad) {
  if (tape.consumed) throw StateError("tape already consumed; run forward again");
  if (tape.caches.size() != layers_.size()) throw StateError("tape does not match this graph");
  Tensor grad = std::move(loss_grad);
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (!tape.caches[i]) throw StateError("missing cache for layer " + std::to_string(i));
    grad = layers_[i]->backward(*tape.caches[i], std::move(grad), want_input_grad || i > 0);
  }
  tape.consumed = true;
  return grad;
}

std::vector<ParamRef> Graph::params() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    for (auto& p : layers_[i]->params())
      out.push_back({"layer" + std::to_string(i) + "." + p.name, p.value, p.grad});
  return out;
}

std::vector<ParamRef> Graph::buffers() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    for (auto& p : layers_[i]->buffers())
      out.push_back({"layer" + std::to_string(i) + "." + p.name, p.value, nullptr});
  return out;
}

void Graph::zero_grads() {
  for (auto& p : params())
    std::fill(p.grad->values.begin(), p.grad->values.end(), 0.0);
}

std::int64_t Graph::parameter_count() {
  std::int64_t n = 0;
  for (auto& p : params()) n += p.value->numel();
  return n;
}

std::vector<LayerConfig> Graph::configs() const {
  std::vector<LayerConfig> out;
  out.reserve(layers_.size());
  for (const auto& l : layers_) out.push_back(l->config());
  return out;
}

void Graph::set_dropout_rate(double rate) {
  for (auto& l : layers_)
    if (l->config().kind == LayerKind::kDropout) l->mutable_config().rate = rate;
}

Adam::Adam(std::vector<ParamRef> params, const AdamConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.value->shape));
    v_.push_back(Tensor::zeros(p.value->shape));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    auto& p = params_[pi];
    if (!p.grad->all_finite())
      throw TrainingError("non-finite gradient in " + p.name + " at step " + std::to_string(t_));
    double* val = p.value->values.data();
    const double* g = p.grad->values.data();
    double* m = m_[pi].values.data();
    double* v = v_[pi].values.data();
    const std::int64_t n = p.value->numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      val[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void tune_allocator_for_training() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

void save_graph(Graph& g, const std::string& dir, const nlohmann::json& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json j;
  j["format_version"] = 1;
  j["layers"] = g.configs();

  std::vector<float> blob;
  nlohmann::json index = nlohmann::json::array();
  auto dump = [&](const std::vector<ParamRef>& refs) {
    for (const auto& p : refs) {
      nlohmann::json entry;
      entry["name"] = p.name;
      entry["shape"] = p.value->shape;
      entry["offset"] = blob.size() * sizeof(float);
      index.push_back(entry);
      for (double v : p.value->values) blob.push_back(static_cast<float>(v));
    }
  };
  dump(g.params());
  dump(g.buffers());
  j["tensors"] = index;
  j["meta"] = meta;

  {
    std::ofstream out(fs::path(dir) / "model.json");
    if (!out) throw IoError("cannot write model.json in " + dir);
    out << j.dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!out) throw IoError("cannot write weights.bin in " + dir);
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * sizeof(float)));
  }
}

Graph load_graph(const std::string& dir, nlohmann::json* meta_out) {
  namespace fs = std::filesystem;
  std::ifstream jin(fs::path(dir) / "model.json");
  if (!jin) throw IoError("cannot open model.json in " + dir);
  nlohmann::json j;
  try {
    jin >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad model.json: " + std::string(e.what()));
  }
  if (j.value("format_version", 0) != 1) throw FormatError("unsupported checkpoint version");

  std::vector<LayerConfig> configs = j.at("layers").get<std::vector<LayerConfig>>();
  Graph g(configs, 0);

  std::ifstream win(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!win) throw IoError("cannot open weights.bin in " + dir);
  std::vector<char> raw((std::istreambuf_iterator<char>(win)), std::istreambuf_iterator<char>());

  auto refs = g.params();
  for (auto& b : g.buffers()) refs.push_back(b);
  std::size_t cursor = 0;
  for (const auto& entry : j.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    auto it = std::find_if(refs.begin(), refs.end(), [&](const ParamRef& p) { return p.name == name; });
    if (it == refs.end()) throw FormatError("checkpoint tensor not in graph: " + name);
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    if (shape != it->value->shape) throw FormatError("checkpoint shape mismatch for " + name);
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t count = it->value->values.size();
    if (offset + count * sizeof(float) > raw.size())
      throw FormatError("weights.bin too small for " + name);
    const float* src = reinterpret_cast<const float*>(raw.data() + offset);
    for (std::size_t i = 0; i < count; ++i) it->value->values[i] = static_cast<double>(src[i]);
    cursor = std::max(cursor, offset + count * sizeof(float));
  }
  if (meta_out) *meta_out = j.value("meta", nlohmann::json::object());
  return g;
}

}  // namespace sqa::ndiff
