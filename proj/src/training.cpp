#include "sqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "sqa/dsp.hpp"
#include "sqa/errors.hpp"

namespace sqa::training {

namespace fs = std::filesystem;
using models::GaussianPrediction;
using models::Model;
using models::ModelKind;

double gaussian_nll(const GaussianPrediction& pred, double y) {
  if (pred.variance < models::kVarianceFloor * (1.0 - 1e-12))
    throw ValidationError("variance below the positivity floor");
  const double r = y - pred.mean;
  return 0.5 * (std::log(2.0 * dsp::kPi * pred.variance) + r * r / pred.variance);
}

double frame_nll(const std::vector<GaussianPrediction>& frames, double y, std::size_t n_valid) {
  if (frames.empty() || n_valid == 0) throw DegenerateInputError("frame_nll needs frames");
  n_valid = std::min(n_valid, frames.size());
  double acc = 0.0;
  for (std::size_t t = 0; t < n_valid; ++t) acc += gaussian_nll(frames[t], y);
  return acc / static_cast<double>(n_valid);
}

LossGrad batch_loss(ModelKind kind, const ndiff::Tensor& out, const std::vector<double>& labels,
                    const std::vector<int>& valid_frames) {
  LossGrad res;
  res.grad = ndiff::Tensor::zeros(out.shape);
  const auto batch = static_cast<std::size_t>(out.dim(0));
  if (labels.size() != batch) throw ValidationError("batch_loss: label count mismatch");

  if (kind == ModelKind::kDnsmosPro) {
    if (out.rank() != 2 || out.dim(1) != 2) throw ShapeError("dnsmos_pro head must be [B,2]");
    for (std::size_t b = 0; b < batch; ++b) {
      const double mu = out.values[2 * b];
      const double sv = out.values[2 * b + 1];
      const double var = ndiff::softplus(sv) + models::kVarianceFloor;
      const double r = mu - labels[b];
      res.loss += 0.5 * (std::log(2.0 * dsp::kPi * var) + r * r / var);
      const double dmu = r / var / static_cast<double>(batch);
      const double dvar = 0.5 * (1.0 / var - r * r / (var * var)) / static_cast<double>(batch);
      res.grad.values[2 * b] = dmu;
      res.grad.values[2 * b + 1] = dvar * ndiff::sigmoid(sv);
    }
    res.loss /= static_cast<double>(batch);
    return res;
  }

  if (out.rank() != 3 || out.dim(2) != 2) throw ShapeError("deepmos head must be [B,T,2]");
  if (valid_frames.size() != batch) throw ValidationError("batch_loss: valid_frames mismatch");
  const auto steps = static_cast<std::size_t>(out.dim(1));
  for (std::size_t b = 0; b < batch; ++b) {
    const auto n_valid = static_cast<std::size_t>(std::clamp<int>(valid_frames[b], 1, static_cast<int>(steps)));
    double clip_loss = 0.0;
    for (std::size_t t = 0; t < n_valid; ++t) {
      const std::size_t at = (b * steps + t) * 2;
      const double mu = out.values[at];
      const double sv = out.values[at + 1];
      const double var = ndiff::softplus(sv) + models::kVarianceFloor;
      const double r = mu - labels[b];
      clip_loss += 0.5 * (std::log(2.0 * dsp::kPi * var) + r * r / var);
      const double scale = 1.0 / (static_cast<double>(batch) * static_cast<double>(n_valid));
      res.grad.values[at] = r / var * scale;
      res.grad.values[at + 1] =
          0.5 * (1.0 / var - r * r / (var * var)) * ndiff::sigmoid(sv) * scale;
    }
    res.loss += clip_loss / static_cast<double>(n_valid);
  }
  res.loss /= static_cast<double>(batch);
  return res;
}

GaussianPrediction predict_from_features(Model& m, const features::Spectrogram& feat) {
  const auto input = models::to_input_tensor(feat);
  const auto out = m.graph.forward(input, ndiff::Mode::kEval, nullptr);
  if (m.config.kind == ModelKind::kDnsmosPro)
    return models::gaussian_from_raw(out.values[0], out.values[1]);
  return models::clip_score(models::frame_predictions(out));
}

namespace {

struct ClipSet {
  std::vector<features::Spectrogram> feats;
  std::vector<double> labels;
};

ClipSet load_features(const Model& m, const std::vector<dataeval::ManifestRecord>& records,
                      const char* what) {
  if (records.empty()) throw ValidationError(std::string("empty ") + what + " manifest");
  ClipSet set;
  set.feats.resize(records.size());
  set.labels.resize(records.size());
  std::vector<std::string> errors(records.size());

#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(records.size()); ++i) {
    const auto& rec = records[static_cast<std::size_t>(i)];
    try {
      if (!rec.label)
        throw ValidationError("unlabeled clip in " + std::string(what) + " manifest: " + rec.clip_path);
      auto w = audio_io::read_wav(rec.clip_path);
      w = audio_io::resample(w, audio_io::kPipelineRate);
      set.feats[static_cast<std::size_t>(i)] = models::extract_features(m, w);
      set.labels[static_cast<std::size_t>(i)] = *rec.label;
    } catch (const Error& e) {
      errors[static_cast<std::size_t>(i)] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw IoError(e);
  return set;
}

struct Snapshot {
  std::vector<std::vector<double>> values;
};

Snapshot take_snapshot(ndiff::Graph& g) {
  Snapshot s;
  for (auto& p : g.params()) s.values.push_back(p.value->values);
  for (auto& b : g.buffers()) s.values.push_back(b.value->values);
  return s;
}

void restore_snapshot(ndiff::Graph& g, const Snapshot& s) {
  std::size_t i = 0;
  for (auto& p : g.params()) p.value->values = s.values[i++];
  for (auto& b : g.buffers()) b.value->values = s.values[i++];
}

// nullopt when the clamped predictions collapse to a constant (the
// correlation is undefined for that epoch, which is reported as null and the
// epoch is never selected).
std::optional<double> validation_pcc(Model& model, const ClipSet& val) {
  std::vector<double> preds(val.feats.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(val.feats.size()); ++i)
    preds[static_cast<std::size_t>(i)] =
        models::clamp_mos(predict_from_features(model, val.feats[static_cast<std::size_t>(i)]).mean);
  try {
    return dataeval::pcc(val.labels, preds);
  } catch (const UndefinedCorrelationError&) {
    return std::nullopt;
  }
}

nlohmann::json config_json(const TrainConfig& cfg, const Model& model,
                           const std::string& train_hash, const std::string& val_hash) {
  nlohmann::json j;
  j["lr"] = cfg.lr;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["dropout_enabled"] = cfg.dropout_enabled;
  j["seed"] = cfg.seed;
  j["crop_frames"] = cfg.crop_frames;
  j["model"] = model.config;
  j["train_manifest_hash"] = train_hash;
  j["val_manifest_hash"] = val_hash;
  return j;
}

}  // namespace

TrainResult train(Model model, const std::vector<dataeval::ManifestRecord>& train_set,
                  const std::vector<dataeval::ManifestRecord>& val_set, const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.crop_frames < 1) throw ConfigError("crop_frames must be >= 1");
  ndiff::tune_allocator_for_training();

  if (!cfg.dropout_enabled) model.graph.set_dropout_rate(0.0);
  if (val_set.size() < 2)
    throw ValidationError("validation needs at least 2 clips for a defined correlation");

  const auto train_data = load_features(model, train_set, "train");
  const auto val_data = load_features(model, val_set, "val");
  const std::string train_hash = dataeval::manifest_hash(train_set);
  const std::string val_hash = dataeval::manifest_hash(val_set);

  std::ofstream metrics;
  if (!cfg.run_dir.empty()) {
    fs::create_directories(cfg.run_dir);
    std::ofstream cfg_out(fs::path(cfg.run_dir) / "config.json");
    cfg_out << config_json(cfg, model, train_hash, val_hash).dump(2) << "\n";
    metrics.open(fs::path(cfg.run_dir) / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw IoError("cannot write metrics.jsonl in " + cfg.run_dir);
  }

  ndiff::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  ndiff::Adam adam(model.graph.params(), adam_cfg);

  const std::size_t n = train_data.feats.size();
  const int bins = model.stft.fft_len / 2 + 1;

  TrainResult result;
  result.seed = cfg.seed;
  result.train_manifest_hash = train_hash;
  Snapshot best;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng epoch_rng(child_seed(cfg.seed, 0x10000 + static_cast<std::uint64_t>(epoch)));
    Rng dropout_rng(child_seed(cfg.seed, 0x20000 + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    epoch_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bsz = std::min(static_cast<std::size_t>(cfg.batch_size), n - start);
      ndiff::Tensor batch = ndiff::Tensor::zeros(
          {static_cast<std::int64_t>(bsz), 1, cfg.crop_frames, bins});
      std::vector<double> labels(bsz);
      std::vector<int> valid(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        const auto& feat = train_data.feats[order[start + b]];
        const auto fixed = features::pad_or_crop(feat, cfg.crop_frames, epoch_rng);
        std::copy(fixed.values.begin(), fixed.values.end(),
                  batch.values.begin() +
                      static_cast<std::ptrdiff_t>(b) * cfg.crop_frames * bins);
        labels[b] = train_data.labels[order[start + b]];
        valid[b] = std::min(feat.frames, cfg.crop_frames);
      }

      ndiff::Tape tape;
      const auto out = model.graph.forward(std::move(batch), ndiff::Mode::kTrain, &dropout_rng, &tape);
      auto lg = batch_loss(model.config.kind, out, labels, valid);
      if (!std::isfinite(lg.loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(start / static_cast<std::size_t>(cfg.batch_size)) +
                            " (first label " + std::to_string(labels[0]) + ")");
      model.graph.backward(tape, std::move(lg.grad), false);
      adam.step();
      model.graph.zero_grads();
      loss_sum += lg.loss * static_cast<double>(bsz);
    }

    const double train_loss = loss_sum / static_cast<double>(n);
    const auto val_pcc = validation_pcc(model, val_data);
    result.epoch_train_loss.push_back(train_loss);
    result.epoch_val_pcc.push_back(val_pcc ? *val_pcc : std::nan(""));
    if (metrics.is_open()) {
      nlohmann::json line = {{"epoch", epoch},
                             {"train_loss", train_loss},
                             {"val_pcc", val_pcc ? nlohmann::json(*val_pcc) : nlohmann::json(nullptr)}};
      metrics << line.dump() << "\n";
      metrics.flush();
    }

    if (val_pcc && *val_pcc > result.best_val_pcc) {  // strict: ties keep the earliest epoch
      result.best_val_pcc = *val_pcc;
      result.best_epoch = epoch;
      best = take_snapshot(model.graph);
    }
  }

  if (result.best_epoch == 0)
    throw TrainingError(
        "no epoch produced a defined validation correlation (all clamped predictions constant)");
  restore_snapshot(model.graph, best);
  result.model = std::move(model);

  if (!cfg.run_dir.empty()) {
    nlohmann::json meta;
    meta["training"] = {{"best_val_pcc", result.best_val_pcc},
                        {"best_epoch", result.best_epoch},
                        {"seed", cfg.seed},
                        {"train_manifest_hash", train_hash}};
    models::save_model(result.model, (fs::path(cfg.run_dir) / "best").string(), meta);
  }
  return result;
}

int select_best_epoch(const std::vector<double>& val_pccs) {
  if (val_pccs.empty()) throw ValidationError("no epochs recorded");
  int best = 0;
  double best_val = -2.0;  // NaN entries (undefined correlation) never win
  for (std::size_t i = 0; i < val_pccs.size(); ++i)
    if (!std::isnan(val_pccs[i]) && val_pccs[i] > best_val) {
      best_val = val_pccs[i];
      best = static_cast<int>(i) + 1;
    }
  if (best == 0) throw ValidationError("every epoch had an undefined validation correlation");
  return best;
}

TrainResult finetune(const std::string& checkpoint_dir,
                     const std::vector<dataeval::ManifestRecord>& train_set,
                     const std::vector<dataeval::ManifestRecord>& val_set, TrainConfig cfg,
                     std::optional<models::ModelKind> expect_kind) {
  Model model = models::load_model(checkpoint_dir);
  if (expect_kind && model.config.kind != *expect_kind)
    throw ConfigError(std::string("checkpoint is a ") + models::to_string(model.config.kind) +
                      " model, expected " + models::to_string(*expect_kind));
  cfg.dropout_enabled = false;  // the fine-tuning stage runs with no dropout
  if (cfg.epochs < 1) cfg.epochs = 10;
  return train(std::move(model), train_set, val_set, cfg);
}

}  // namespace sqa::training
