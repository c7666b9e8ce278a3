#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sqa/dataeval.hpp"
#include "sqa/models.hpp"

namespace sqa::training {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 64;
  int epochs = 0;  // must be set explicitly (paper defaults: 500 dnsmos_pro, 60 deepmos, 10 finetune)
  bool dropout_enabled = true;
  std::uint64_t seed = 0;
  int crop_frames = 624;  // about 10 s at the 16 ms hop
  std::string run_dir;    // when set: config.json, metrics.jsonl, best/ checkpoint
};

// The outcome of a run: the best-validation-PCC model plus selection metadata.
struct TrainResult {
  models::Model model;
  double best_val_pcc = -2.0;
  int best_epoch = 0;
  std::uint64_t seed = 0;
  std::string train_manifest_hash;
  std::vector<double> epoch_train_loss;
  std::vector<double> epoch_val_pcc;
};

// loss = 0.5 * (ln(2 pi var) + (y - mean)^2 / var)
double gaussian_nll(const models::GaussianPrediction& pred, double y);
// Mean over the first n_valid frames.
double frame_nll(const std::vector<models::GaussianPrediction>& frames, double y,
                 std::size_t n_valid);

// Batch loss and gradient w.r.t. the raw head outputs (variance via
// softplus + floor). For dnsmos_pro `out` is [B,2]; for deepmos [B,T,2] with
// per-clip valid-frame counts masking the padded tail.
struct LossGrad {
  double loss = 0.0;
  ndiff::Tensor grad;
};
LossGrad batch_loss(models::ModelKind kind, const ndiff::Tensor& out,
                    const std::vector<double>& labels, const std::vector<int>& valid_frames);

// 1-based argmax over per-epoch validation PCCs; earliest epoch on ties.
int select_best_epoch(const std::vector<double>& val_pccs);

// One epoch = seeded shuffle, batches of batch_size (last partial kept),
// train-mode forward, Gaussian NLL (clip- or frame-level), Adam step; then a
// full validation pass. The checkpoint is the epoch with the highest
// validation PCC (earliest on ties).
TrainResult train(models::Model model, const std::vector<dataeval::ManifestRecord>& train_set,
                  const std::vector<dataeval::ManifestRecord>& val_set, const TrainConfig& cfg);

// Resumes checkpoint weights with a fresh optimizer, dropout forced off.
TrainResult finetune(const std::string& checkpoint_dir,
                     const std::vector<dataeval::ManifestRecord>& train_set,
                     const std::vector<dataeval::ManifestRecord>& val_set, TrainConfig cfg,
                     std::optional<models::ModelKind> expect_kind = std::nullopt);

// Eval-mode prediction from precomputed features (validation fast path).
models::GaussianPrediction predict_from_features(models::Model& m,
                                                 const features::Spectrogram& feat);

}  // namespace sqa::training
