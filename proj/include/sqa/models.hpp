#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "sqa/audio_io.hpp"
#include "sqa/features.hpp"
#include "sqa/ndiff.hpp"

namespace sqa::models {

// A (mean, variance) quality estimate on the MOS scale. The mean is not
// clamped here; reported scores are clamped to [1,5] downstream.
struct GaussianPrediction {
  double mean = 0.0;
  double variance = 0.0;
};

inline constexpr double kVarianceFloor = 1e-4;

// mean passes through; variance = softplus(raw) + floor
GaussianPrediction gaussian_from_raw(double mean_raw, double var_raw);

double clamp_mos(double mean);

enum class ModelKind { kDnsmosPro, kDeepmos };

const char* to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& name);

struct ModelConfig {
  ModelKind kind = ModelKind::kDnsmosPro;
  // dnsmos_pro: 4 conv-block widths; deepmos: 9 conv widths
  std::vector<int> conv_channels;
  double dropout_rate = 0.3;
  int head_hidden = 64;    // dnsmos_pro prediction head
  int lstm_hidden = 128;   // deepmos, per direction

  static ModelConfig dnsmos_pro_default();
  static ModelConfig deepmos_default();
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

struct Model {
  ModelConfig config;
  features::StftConfig stft;  // one transform feeds both model families
  ndiff::Graph graph;
};

// Spectrogram bins the graphs are built for (fft_len/2 + 1).
int input_bins(const features::StftConfig& stft);

Model build_dnsmos_pro(const ModelConfig& cfg, std::uint64_t init_seed);
Model build_deepmos(const ModelConfig& cfg, std::uint64_t init_seed);
Model build_model(const ModelConfig& cfg, std::uint64_t init_seed);

// Features for the model kind: log-magnitude for dnsmos_pro, magnitude for
// deepmos.
features::Spectrogram extract_features(const Model& m, const audio_io::Waveform& w);

// Packs a spectrogram into a [1, 1, frames, bins] tensor.
ndiff::Tensor to_input_tensor(const features::Spectrogram& s);

// Raw head output -> per-frame Gaussians ([T,2] rows).
std::vector<GaussianPrediction> frame_predictions(const ndiff::Tensor& head_out);

// Mean of frame means, mean of frame variances.
GaussianPrediction clip_score(const std::vector<GaussianPrediction>& frames);

// Full-length eval-mode prediction for one clip.
GaussianPrediction predict(Model& m, const audio_io::Waveform& w);
std::vector<GaussianPrediction> predict_frames(Model& m, const audio_io::Waveform& w);

void save_model(Model& m, const std::string& dir, const nlohmann::json& extra_meta);
Model load_model(const std::string& dir, nlohmann::json* meta_out = nullptr);

}  // namespace sqa::models
