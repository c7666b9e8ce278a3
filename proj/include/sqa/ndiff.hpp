#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "sqa/rng.hpp"

namespace sqa::ndiff {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> values;

  Tensor() = default;
  static Tensor zeros(std::vector<std::int64_t> shape);

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }
  bool all_finite() const;
};

// c[m,n] = a[m,k] @ b[k,n]; rows of c are computed independently, each as a
// serial ascending-k reduction, so the result is bit-identical for any
// OpenMP thread count.
void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n);

enum class LayerKind {
  kConv2d,
  kBatchNorm,
  kRelu,
  kMaxPool2d,
  kDropout,
  kGlobalChannelMax,
  kDense,
  kBilstm,
  kSoftplus,
};

const char* to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& name);

enum class Mode { kTrain, kEval };

struct LayerConfig {
  LayerKind kind = LayerKind::kRelu;
  // conv2d
  int in_channels = 0, out_channels = 0;
  int kernel_h = 3, kernel_w = 3;
  int stride_h = 1, stride_w = 1;  // "same" padding in both dimensions
  // batch_norm
  int num_features = 0;
  // max_pool2d
  int pool_h = 2, pool_w = 2;
  // dropout
  double rate = 0.0;
  // dense
  int in_features = 0, out_features = 0;
  // bilstm
  int input_size = 0, hidden_size = 0;
};

void to_json(nlohmann::json& j, const LayerConfig& cfg);
void from_json(const nlohmann::json& j, LayerConfig& cfg);

struct LayerCache {
  virtual ~LayerCache() = default;
};
using CachePtr = std::unique_ptr<LayerCache>;

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

class Layer {
 public:
  explicit Layer(const LayerConfig& cfg) : cfg_(cfg) {}
  virtual ~Layer() = default;

  const LayerConfig& config() const { return cfg_; }
  LayerConfig& mutable_config() { return cfg_; }

  // cache == nullptr means inference: nothing is written to layer state.
  // Train mode additionally updates batch-norm running statistics. The input
  // is taken by value: layers keep (move) it into their cache instead of
  // copying, and element-wise layers transform it in place.
  virtual Tensor forward(Tensor x, Mode mode, Rng* rng, CachePtr* cache) = 0;
  // Returns grad w.r.t. the input and accumulates parameter grads. The
  // incoming grad is taken by value so element-wise layers can transform it
  // in place. When need_input_grad is false (first layer of a training
  // graph) the input gradient may be skipped and an empty tensor returned.
  virtual Tensor backward(LayerCache& cache, Tensor grad_out, bool need_input_grad) = 0;

  virtual std::vector<ParamRef> params() { return {}; }
  virtual std::vector<ParamRef> buffers() { return {}; }
  virtual void init(Rng& rng) { (void)rng; }

 protected:
  LayerConfig cfg_;
};

std::unique_ptr<Layer> make_layer(const LayerConfig& cfg);

// Per-call activation storage for one forward pass; consumed by backward.
struct Tape {
  std::vector<CachePtr> caches;
  bool consumed = false;
};

class Graph {
 public:
  Graph() = default;
  // Builds and initializes layers; each layer gets an independent child
  // stream of init_seed.
  Graph(const std::vector<LayerConfig>& configs, std::uint64_t init_seed);

  // Train mode requires a tape (and an rng when any dropout rate > 0).
  // Eval mode must not be given a tape; it performs no state writes and is
  // safe to call concurrently on shared parameters.
  Tensor forward(Tensor x, Mode mode, Rng* rng, Tape* tape = nullptr);
  // Returns grad w.r.t. the graph input; the tape is consumed. Training
  // loops that do not use the input gradient pass want_input_grad = false.
  Tensor backward(Tape& tape, Tensor loss_grad, bool want_input_grad = true);

  std::vector<ParamRef> params();
  std::vector<ParamRef> buffers();
  void zero_grads();
  std::int64_t parameter_count();

  std::size_t num_layers() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  std::vector<LayerConfig> configs() const;
  // Overrides the rate of every dropout layer (used by fine-tuning).
  void set_dropout_rate(double rate);

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<ParamRef> params, const AdamConfig& cfg);
  // Bias-corrected update from the accumulated grads; throws TrainingError
  // on a non-finite gradient.
  void step();
  std::int64_t step_count() const { return t_; }

 private:
  std::vector<ParamRef> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// Routes big repeated tensor allocations through the heap so pages are
// reused across batches instead of being re-faulted every step.
void tune_allocator_for_training();

// Checkpoint directory: model.json (layer configs + tensor index + metadata)
// and weights.bin (float32 LE values concatenated in index order).
void save_graph(Graph& g, const std::string& dir, const nlohmann::json& meta);
Graph load_graph(const std::string& dir, nlohmann::json* meta_out = nullptr);

// Numerically stable scalar helpers shared with the loss code.
double sigmoid(double x);
double softplus(double x);

}  // namespace sqa::ndiff
