#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sqa/degrade.hpp"
#include "sqa/models.hpp"

namespace sqa::dataeval {

// One clip's row in a JSONL manifest; the dataset exchange unit.
struct ManifestRecord {
  std::string clip_path;
  std::optional<double> label;  // MOS scale [1,5]
  std::string rater = "none";   // human | llm | oracle | none
  std::string rater_detail;
  std::string split;            // train | val | test
  std::optional<degrade::DegradationSpec> condition;
  std::string source_dataset;
  double duration_s = 0.0;
};

void to_json(nlohmann::json& j, const ManifestRecord& r);
void from_json(const nlohmann::json& j, ManifestRecord& r);

std::vector<ManifestRecord> load_manifest(const std::string& path);
void save_manifest(const std::vector<ManifestRecord>& records, const std::string& path);

// FNV-1a over the serialized records; identifies the training data in
// checkpoints.
std::string manifest_hash(const std::vector<ManifestRecord>& records);

// LibriAugmented-style builder: degrade clean sources into out_dir/clips and
// emit unlabeled train/val manifests. Deterministic under (seed, n_clips).
struct BuildConfig {
  std::string clean_dir;
  std::string out_dir;
  int n_clips = 0;
  double val_fraction = 1129.0 / 101129.0;  // published train/val proportions
  std::uint64_t seed = 0;
  std::string noise_dir;  // optional extra noise sources
};

struct BuildResult {
  std::string train_manifest;
  std::string val_manifest;
  int n_train = 0;
  int n_val = 0;
  int n_skipped_sources = 0;
};

BuildResult build_dataset(const BuildConfig& cfg);

// Pearson correlation, centered form. Throws UndefinedCorrelationError when
// either sequence is constant.
double pcc(const std::vector<double>& labels, const std::vector<double>& preds);
// Spearman: pcc over average ranks (ties share the mean rank).
double srcc(const std::vector<double>& labels, const std::vector<double>& preds);

struct DatasetEval {
  std::string dataset;
  double pcc = 0.0;
  double srcc = 0.0;
  int n_clips = 0;
  int n_failed = 0;
};

struct EvalReport {
  std::string strategy;  // training-strategy label (row name in reports)
  std::uint64_t seed = 0;
  std::vector<DatasetEval> datasets;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

// Predicts every clip of every manifest (eval mode, full length, clamped
// means). A manifest with more than 5% unreadable clips fails the run.
EvalReport evaluate(models::Model& model,
                    const std::vector<std::pair<std::string, std::vector<ManifestRecord>>>& tests);

struct AggregateCell {
  double mean_pcc = 0.0;
  double std_pcc = 0.0;  // sample standard deviation over runs
  double mean_srcc = 0.0;
  double std_srcc = 0.0;
  int n_runs = 0;
  bool best_in_column = false;
};

struct AggregateReport {
  std::vector<std::string> strategies;  // rows
  std::vector<std::string> datasets;    // columns
  std::vector<AggregateCell> cells;     // row-major strategies x datasets

  const AggregateCell& cell(std::size_t row, std::size_t col) const {
    return cells[row * datasets.size() + col];
  }
};

// Groups reports by strategy; all reports must cover the same dataset set.
AggregateReport aggregate_runs(const std::vector<EvalReport>& reports);

nlohmann::json to_json(const AggregateReport& report);
// Fixed-width text table, training strategies down, test datasets across;
// the best mean per column is starred.
std::string render_table(const AggregateReport& report);

enum class ImportFormat { kJsonl, kCsvMosmap };

struct CsvMapping {
  std::string path_column;
  std::string mos_column;
  std::string source_dataset;
  char delimiter = ',';
};

// Normalizes an external corpus listing into human-rated ManifestRecords.
// Rows with labels outside [1,5] are rejected; more than 1% rejects fails.
std::vector<ManifestRecord> import_manifest(const std::string& path, ImportFormat format,
                                            const CsvMapping* mapping = nullptr);

}  // namespace sqa::dataeval
