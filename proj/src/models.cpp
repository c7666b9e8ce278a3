#include "sqa/models.hpp"

#include <algorithm>
#include <cmath>

#include "sqa/errors.hpp"

namespace sqa::models {

using ndiff::LayerConfig;
using ndiff::LayerKind;

GaussianPrediction gaussian_from_raw(double mean_raw, double var_raw) {
  return {mean_raw, ndiff::softplus(var_raw) + kVarianceFloor};
}

double clamp_mos(double mean) { return std::clamp(mean, 1.0, 5.0); }

const char* to_string(ModelKind k) {
  return k == ModelKind::kDnsmosPro ? "dnsmos_pro" : "deepmos";
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "dnsmos_pro") return ModelKind::kDnsmosPro;
  if (name == "deepmos") return ModelKind::kDeepmos;
  throw ConfigError("unknown model kind: " + name);
}

ModelConfig ModelConfig::dnsmos_pro_default() {
  ModelConfig cfg;
  cfg.kind = ModelKind::kDnsmosPro;
  cfg.conv_channels = {16, 32, 64, 64};
  return cfg;
}

ModelConfig ModelConfig::deepmos_default() {
  ModelConfig cfg;
  cfg.kind = ModelKind::kDeepmos;
  cfg.conv_channels = {16, 16, 16, 32, 32, 32, 64, 64, 64};
  return cfg;
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"kind", to_string(cfg.kind)},
                     {"conv_channels", cfg.conv_channels},
                     {"dropout_rate", cfg.dropout_rate},
                     {"head_hidden", cfg.head_hidden},
                     {"lstm_hidden", cfg.lstm_hidden}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  cfg.kind = model_kind_from_string(j.at("kind").get<std::string>());
  cfg.conv_channels = j.at("conv_channels").get<std::vector<int>>();
  cfg.dropout_rate = j.value("dropout_rate", 0.3);
  cfg.head_hidden = j.value("head_hidden", 64);
  cfg.lstm_hidden = j.value("lstm_hidden", 128);
}

int input_bins(const features::StftConfig& stft) { return stft.fft_len / 2 + 1; }

namespace {

void validate(const ModelConfig& cfg, ModelKind kind, std::size_t expected_convs) {
  if (cfg.kind != kind) throw ConfigError("model kind mismatch");
  if (cfg.conv_channels.size() != expected_convs)
    throw ConfigError(std::string(to_string(kind)) + " needs " + std::to_string(expected_convs) +
                      " conv widths, got " + std::to_string(cfg.conv_channels.size()));
  for (int c : cfg.conv_channels)
    if (c < 1) throw ConfigError("conv width must be >= 1");
  if (cfg.dropout_rate < 0.0 || cfg.dropout_rate >= 1.0)
    throw ConfigError("dropout rate must be in [0,1)");
}

LayerConfig conv(int in_c, int out_c, int stride_h = 1, int stride_w = 1) {
  LayerConfig c;
  c.kind = LayerKind::kConv2d;
  c.in_channels = in_c;
  c.out_channels = out_c;
  c.kernel_h = 3;
  c.kernel_w = 3;
  c.stride_h = stride_h;
  c.stride_w = stride_w;
  return c;
}

LayerConfig batch_norm(int features) {
  LayerConfig c;
  c.kind = LayerKind::kBatchNorm;
  c.num_features = features;
  return c;
}

LayerConfig relu() {
  LayerConfig c;
  c.kind = LayerKind::kRelu;
  return c;
}

LayerConfig max_pool() {
  LayerConfig c;
  c.kind = LayerKind::kMaxPool2d;
  return c;
}

LayerConfig dropout(double rate) {
  LayerConfig c;
  c.kind = LayerKind::kDropout;
  c.rate = rate;
  return c;
}

LayerConfig dense(int in_f, int out_f) {
  LayerConfig c;
  c.kind = LayerKind::kDense;
  c.in_features = in_f;
  c.out_features = out_f;
  return c;
}

// Start the mean head at the middle of the MOS scale with a small weight
// scale, so the first epochs already produce in-range, non-degenerate
// clamped predictions.
void init_head_bias(ndiff::Graph& g) {
  auto params = g.params();
  for (auto it = params.rbegin(); it != params.rend(); ++it) {
    if (it->name.find("bias") != std::string::npos && it->value->numel() == 2) {
      it->value->values[0] = 3.0;
    } else if (it->name.find("weight") != std::string::npos && !it->value->shape.empty() &&
               it->value->shape.front() == 2) {
      for (auto& v : it->value->values) v *= 0.1;
      return;  // head found; earlier layers keep their normal init
    }
  }
}

}  // namespace

Model build_dnsmos_pro(const ModelConfig& cfg, std::uint64_t init_seed) {
  validate(cfg, ModelKind::kDnsmosPro, 4);
  Model m;
  m.config = cfg;

  std::vector<LayerConfig> layers;
  int in_c = 1;
  for (int width : cfg.conv_channels) {
    layers.push_back(conv(in_c, width));
    layers.push_back(batch_norm(width));
    layers.push_back(relu());
    layers.push_back(max_pool());
    layers.push_back(dropout(cfg.dropout_rate));
    in_c = width;
  }
  LayerConfig pool;
  pool.kind = LayerKind::kGlobalChannelMax;
  layers.push_back(pool);
  layers.push_back(dense(in_c, cfg.head_hidden));
  layers.push_back(relu());
  layers.push_back(dense(cfg.head_hidden, 2));  // mean raw, variance raw

  m.graph = ndiff::Graph(layers, init_seed);
  init_head_bias(m.graph);
  return m;
}

Model build_deepmos(const ModelConfig& cfg, std::uint64_t init_seed) {
  validate(cfg, ModelKind::kDeepmos, 9);
  Model m;
  m.config = cfg;

  std::vector<LayerConfig> layers;
  int in_c = 1;
  int freq = input_bins(m.stft);
  for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    const int width = cfg.conv_channels[i];
    // every third layer strides (1,3): time is preserved, frequency shrinks
    const bool strided = (i + 1) % 3 == 0;
    layers.push_back(conv(in_c, width, 1, strided ? 3 : 1));
    layers.push_back(relu());
    layers.push_back(dropout(cfg.dropout_rate));
    if (strided) freq = (freq + 2) / 3;
    in_c = width;
  }

  LayerConfig lstm;
  lstm.kind = LayerKind::kBilstm;
  lstm.input_size = in_c * freq;
  lstm.hidden_size = cfg.lstm_hidden;
  layers.push_back(lstm);
  layers.push_back(dense(2 * cfg.lstm_hidden, 2));  // per-frame mean raw, variance raw

  m.graph = ndiff::Graph(layers, init_seed);
  init_head_bias(m.graph);
  return m;
}

Model build_model(const ModelConfig& cfg, std::uint64_t init_seed) {
  return cfg.kind == ModelKind::kDnsmosPro ? build_dnsmos_pro(cfg, init_seed)
                                           : build_deepmos(cfg, init_seed);
}

features::Spectrogram extract_features(const Model& m, const audio_io::Waveform& w) {
  auto mag = features::stft(w, m.stft);
  if (m.config.kind == ModelKind::kDnsmosPro) return features::log_magnitude(mag);
  return mag;
}

ndiff::Tensor to_input_tensor(const features::Spectrogram& s) {
  ndiff::Tensor t = ndiff::Tensor::zeros({1, 1, s.frames, s.bins});
  std::copy(s.values.begin(), s.values.end(), t.values.begin());
  return t;
}

std::vector<GaussianPrediction> frame_predictions(const ndiff::Tensor& head_out) {
  if (head_out.shape.empty() || head_out.shape.back() != 2)
    throw ShapeError("expected a trailing dimension of 2 head outputs");
  const std::int64_t rows = head_out.numel() / 2;
  std::vector<GaussianPrediction> out(static_cast<std::size_t>(rows));
  for (std::int64_t i = 0; i < rows; ++i)
    out[static_cast<std::size_t>(i)] = gaussian_from_raw(head_out.values[static_cast<std::size_t>(2 * i)],
                                                         head_out.values[static_cast<std::size_t>(2 * i + 1)]);
  return out;
}

GaussianPrediction clip_score(const std::vector<GaussianPrediction>& frames) {
  if (frames.empty()) throw DegenerateInputError("clip_score needs at least one frame");
  double mean = 0.0, var = 0.0;
  for (const auto& f : frames) {
    mean += f.mean;
    var += f.variance;
  }
  const double n = static_cast<double>(frames.size());
  return {mean / n, var / n};
}

GaussianPrediction predict(Model& m, const audio_io::Waveform& w) {
  if (m.config.kind == ModelKind::kDeepmos) return clip_score(predict_frames(m, w));
  const auto canonical =
      w.sample_rate == audio_io::kPipelineRate ? w : audio_io::resample(w, audio_io::kPipelineRate);
  const auto input = to_input_tensor(extract_features(m, canonical));
  const auto out = m.graph.forward(input, ndiff::Mode::kEval, nullptr);
  if (out.numel() != 2) throw ShapeError("dnsmos_pro head must emit exactly 2 values");
  return gaussian_from_raw(out.values[0], out.values[1]);
}

std::vector<GaussianPrediction> predict_frames(Model& m, const audio_io::Waveform& w) {
  if (m.config.kind != ModelKind::kDeepmos)
    throw ConfigError("frame predictions are a deepmos feature");
  const auto canonical =
      w.sample_rate == audio_io::kPipelineRate ? w : audio_io::resample(w, audio_io::kPipelineRate);
  const auto input = to_input_tensor(extract_features(m, canonical));
  const auto out = m.graph.forward(input, ndiff::Mode::kEval, nullptr);
  return frame_predictions(out);
}

void save_model(Model& m, const std::string& dir, const nlohmann::json& extra_meta) {
  nlohmann::json meta = extra_meta;
  meta["model"] = m.config;
  meta["stft"] = {{"window_len", m.stft.window_len}, {"hop", m.stft.hop}, {"fft_len", m.stft.fft_len}};
  ndiff::save_graph(m.graph, dir, meta);
}

Model load_model(const std::string& dir, nlohmann::json* meta_out) {
  nlohmann::json meta;
  ndiff::Graph g = ndiff::load_graph(dir, &meta);
  Model m;
  m.config = meta.at("model").get<ModelConfig>();
  if (meta.contains("stft")) {
    m.stft.window_len = meta["stft"].value("window_len", 512);
    m.stft.hop = meta["stft"].value("hop", 256);
    m.stft.fft_len = meta["stft"].value("fft_len", 512);
  }
  m.graph = std::move(g);
  if (meta_out) *meta_out = meta;
  return m;
}

}  // namespace sqa::models
