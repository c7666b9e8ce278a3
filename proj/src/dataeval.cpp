#include "sqa/dataeval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "sqa/errors.hpp"

namespace sqa::dataeval {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const ManifestRecord& r) {
  j = nlohmann::json{{"clip_path", r.clip_path},
                     {"label", r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr)},
                     {"rater", r.rater},
                     {"split", r.split},
                     {"source_dataset", r.source_dataset},
                     {"duration_s", r.duration_s}};
  if (!r.rater_detail.empty()) j["rater_detail"] = r.rater_detail;
  if (r.condition) {
    nlohmann::json c;
    c["condition"] = degrade::to_string(r.condition->condition);
    c["params"] = r.condition->params;
    j["condition"] = c;
  } else {
    j["condition"] = nullptr;
  }
}

void from_json(const nlohmann::json& j, ManifestRecord& r) {
  r.clip_path = j.at("clip_path").get<std::string>();
  r.label = j.contains("label") && !j["label"].is_null()
                ? std::optional<double>(j["label"].get<double>())
                : std::nullopt;
  r.rater = j.value("rater", std::string("none"));
  r.rater_detail = j.value("rater_detail", std::string());
  r.split = j.value("split", std::string());
  r.source_dataset = j.value("source_dataset", std::string());
  r.duration_s = j.value("duration_s", 0.0);
  r.condition.reset();
  if (j.contains("condition") && !j["condition"].is_null()) {
    degrade::DegradationSpec spec;
    spec.condition = degrade::condition_from_string(j["condition"].at("condition").get<std::string>());
    spec.params = j["condition"].value("params", std::map<std::string, double>{});
    r.condition = spec;
  }
}

std::vector<ManifestRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::vector<ManifestRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(nlohmann::json::parse(line).get<ManifestRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

void save_manifest(const std::vector<ManifestRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path);
  for (const auto& r : records) out << nlohmann::json(r).dump() << "\n";
  if (!out) throw IoError("short write: " + path);
}

std::string manifest_hash(const std::vector<ManifestRecord>& records) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  auto mix = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& r : records) mix(nlohmann::json(r).dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// dataset builder
// ---------------------------------------------------------------------------

BuildResult build_dataset(const BuildConfig& cfg) {
  if (cfg.n_clips < 1) throw ConfigError("n_clips must be >= 1");
  if (!fs::is_directory(cfg.clean_dir)) throw ConfigError("clean dir not found: " + cfg.clean_dir);

  std::vector<std::string> sources;
  for (const auto& e : fs::directory_iterator(cfg.clean_dir))
    if (e.is_regular_file() && e.path().extension() == ".wav") sources.push_back(e.path().string());
  std::sort(sources.begin(), sources.end());

  // drop unreadable sources up front
  std::vector<std::string> usable;
  int skipped = 0;
  for (const auto& path : sources) {
    try {
      audio_io::read_wav(path);
      usable.push_back(path);
    } catch (const Error& e) {
      ++skipped;
      std::cerr << "[build] skipping unreadable source " << path << ": " << e.what() << "\n";
    }
  }
  if (usable.empty()) throw DegenerateInputError("no usable clean sources in " + cfg.clean_dir);

  Rng order_rng(child_seed(cfg.seed, 0xC0FFEE));
  order_rng.shuffle(usable);

  fs::create_directories(fs::path(cfg.out_dir) / "clips");
  const degrade::NoiseBank bank(cfg.noise_dir);

  std::vector<ManifestRecord> records(static_cast<std::size_t>(cfg.n_clips));
  const auto n_val = static_cast<int>(std::llround(cfg.val_fraction * cfg.n_clips));
  const int n_train = cfg.n_clips - n_val;

  std::vector<std::string> failures(static_cast<std::size_t>(cfg.n_clips));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < cfg.n_clips; ++i) {
    try {
      const std::uint64_t clip_seed = child_seed(cfg.seed, static_cast<std::uint64_t>(i));
      Rng rng(clip_seed);
      auto w = audio_io::read_wav(usable[static_cast<std::size_t>(i) % usable.size()]);
      w = audio_io::resample(w, audio_io::kPipelineRate);
      const auto spec = degrade::sample_spec(rng);
      const auto degraded = degrade::apply(w, spec, child_seed(clip_seed, 1), bank);

      char name[32];
      std::snprintf(name, sizeof(name), "clip_%06d.wav", i);
      const std::string out_path = (fs::path(cfg.out_dir) / "clips" / name).string();
      audio_io::write_wav(degraded, out_path);

      ManifestRecord rec;
      rec.clip_path = out_path;
      rec.split = i < n_train ? "train" : "val";
      rec.condition = spec;
      rec.source_dataset = "built";
      rec.duration_s = degraded.duration_s();
      records[static_cast<std::size_t>(i)] = rec;
    } catch (const Error& e) {
      failures[static_cast<std::size_t>(i)] = e.what();
    }
  }
  for (int i = 0; i < cfg.n_clips; ++i)
    if (!failures[static_cast<std::size_t>(i)].empty())
      throw IoError("building clip " + std::to_string(i) + " failed: " + failures[static_cast<std::size_t>(i)]);

  std::vector<ManifestRecord> train(records.begin(), records.begin() + n_train);
  std::vector<ManifestRecord> val(records.begin() + n_train, records.end());

  BuildResult result;
  result.train_manifest = (fs::path(cfg.out_dir) / "train.jsonl").string();
  result.val_manifest = (fs::path(cfg.out_dir) / "val.jsonl").string();
  result.n_train = n_train;
  result.n_val = n_val;
  result.n_skipped_sources = skipped;
  save_manifest(train, result.train_manifest);
  save_manifest(val, result.val_manifest);
  return result;
}

// ---------------------------------------------------------------------------
// correlation metrics
// ---------------------------------------------------------------------------

double pcc(const std::vector<double>& labels, const std::vector<double>& preds) {
  if (labels.size() != preds.size()) throw ValidationError("pcc: length mismatch");
  if (labels.size() < 2) throw UndefinedCorrelationError("pcc needs at least two points");
  const double n = static_cast<double>(labels.size());
  double my = 0.0, mp = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    my += labels[i];
    mp += preds[i];
  }
  my /= n;
  mp /= n;
  double num = 0.0, dy = 0.0, dp = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    num += (labels[i] - my) * (preds[i] - mp);
    dy += (labels[i] - my) * (labels[i] - my);
    dp += (preds[i] - mp) * (preds[i] - mp);
  }
  if (dy == 0.0 || dp == 0.0)
    throw UndefinedCorrelationError("correlation undefined for a constant sequence");
  return num / (std::sqrt(dy) * std::sqrt(dp));
}

namespace {
std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;  // mean of ranks i+1..j+1
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

double srcc(const std::vector<double>& labels, const std::vector<double>& preds) {
  if (labels.size() != preds.size()) throw ValidationError("srcc: length mismatch");
  return pcc(average_ranks(labels), average_ranks(preds));
}

// ---------------------------------------------------------------------------
// evaluation & aggregation
// ---------------------------------------------------------------------------

EvalReport evaluate(models::Model& model,
                    const std::vector<std::pair<std::string, std::vector<ManifestRecord>>>& tests) {
  EvalReport report;
  for (const auto& [name, records] : tests) {
    if (records.empty()) throw ValidationError("empty test manifest: " + name);
    for (const auto& r : records)
      if (!r.label) throw ValidationError("unlabeled clip in test manifest " + name + ": " + r.clip_path);

    const auto n = static_cast<std::int64_t>(records.size());
    std::vector<double> preds(static_cast<std::size_t>(n), 0.0);
    std::vector<char> ok(static_cast<std::size_t>(n), 0);

#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < n; ++i) {
      try {
        const auto w = audio_io::resample(audio_io::read_wav(records[static_cast<std::size_t>(i)].clip_path),
                                          audio_io::kPipelineRate);
        const auto pred = models::predict(model, w);
        preds[static_cast<std::size_t>(i)] = models::clamp_mos(pred.mean);
        ok[static_cast<std::size_t>(i)] = 1;
      } catch (const Error&) {
        ok[static_cast<std::size_t>(i)] = 0;
      }
    }

    std::vector<double> y, p;
    int failed = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      if (ok[static_cast<std::size_t>(i)]) {
        y.push_back(*records[static_cast<std::size_t>(i)].label);
        p.push_back(preds[static_cast<std::size_t>(i)]);
      } else {
        ++failed;
      }
    }
    if (static_cast<double>(failed) > 0.05 * static_cast<double>(n))
      throw DataError(name + ": " + std::to_string(failed) + "/" + std::to_string(n) +
                      " clips unreadable (over the 5% budget)");

    DatasetEval d;
    d.dataset = name;
    d.n_clips = static_cast<int>(y.size());
    d.n_failed = failed;
    d.pcc = pcc(y, p);
    d.srcc = srcc(y, p);
    report.datasets.push_back(d);
  }
  return report;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"strategy", r.strategy}, {"seed", r.seed}};
  j["datasets"] = nlohmann::json::array();
  for (const auto& d : r.datasets)
    j["datasets"].push_back({{"dataset", d.dataset},
                             {"pcc", d.pcc},
                             {"srcc", d.srcc},
                             {"n_clips", d.n_clips},
                             {"n_failed", d.n_failed}});
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r.strategy = j.value("strategy", std::string());
  r.seed = j.value("seed", std::uint64_t{0});
  r.datasets.clear();
  for (const auto& d : j.at("datasets")) {
    DatasetEval e;
    e.dataset = d.at("dataset").get<std::string>();
    e.pcc = d.at("pcc").get<double>();
    e.srcc = d.at("srcc").get<double>();
    e.n_clips = d.value("n_clips", 0);
    e.n_failed = d.value("n_failed", 0);
    r.datasets.push_back(e);
  }
}

AggregateReport aggregate_runs(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ValidationError("no reports to aggregate");

  std::vector<std::string> datasets;
  for (const auto& d : reports.front().datasets) datasets.push_back(d.dataset);
  for (const auto& r : reports) {
    std::vector<std::string> names;
    for (const auto& d : r.datasets) names.push_back(d.dataset);
    if (names != datasets)
      throw ValidationError("aggregate_runs: reports cover different test datasets");
  }

  std::vector<std::string> strategies;
  for (const auto& r : reports)
    if (std::find(strategies.begin(), strategies.end(), r.strategy) == strategies.end())
      strategies.push_back(r.strategy);

  AggregateReport agg;
  agg.strategies = strategies;
  agg.datasets = datasets;
  agg.cells.resize(strategies.size() * datasets.size());

  for (std::size_t si = 0; si < strategies.size(); ++si)
    for (std::size_t di = 0; di < datasets.size(); ++di) {
      std::vector<double> pccs, srccs;
      for (const auto& r : reports)
        if (r.strategy == strategies[si]) {
          pccs.push_back(r.datasets[di].pcc);
          srccs.push_back(r.datasets[di].srcc);
        }
      auto mean_of = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        return m / static_cast<double>(v.size());
      };
      auto sample_std = [&](const std::vector<double>& v, double m) {
        if (v.size() < 2) return 0.0;
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::sqrt(ss / static_cast<double>(v.size() - 1));
      };
      AggregateCell cell;
      cell.n_runs = static_cast<int>(pccs.size());
      cell.mean_pcc = mean_of(pccs);
      cell.std_pcc = sample_std(pccs, cell.mean_pcc);
      cell.mean_srcc = mean_of(srccs);
      cell.std_srcc = sample_std(srccs, cell.mean_srcc);
      agg.cells[si * datasets.size() + di] = cell;
    }

  // star the exact maxima per column
  for (std::size_t di = 0; di < datasets.size(); ++di) {
    double best = -2.0;
    for (std::size_t si = 0; si < strategies.size(); ++si)
      best = std::max(best, agg.cell(si, di).mean_pcc);
    for (std::size_t si = 0; si < strategies.size(); ++si)
      if (agg.cell(si, di).mean_pcc == best)
        agg.cells[si * datasets.size() + di].best_in_column = true;
  }
  return agg;
}

nlohmann::json to_json(const AggregateReport& report) {
  nlohmann::json j;
  j["datasets"] = report.datasets;
  j["rows"] = nlohmann::json::array();
  for (std::size_t si = 0; si < report.strategies.size(); ++si) {
    nlohmann::json row;
    row["strategy"] = report.strategies[si];
    row["cells"] = nlohmann::json::array();
    for (std::size_t di = 0; di < report.datasets.size(); ++di) {
      const auto& c = report.cell(si, di);
      row["cells"].push_back({{"dataset", report.datasets[di]},
                              {"mean_pcc", c.mean_pcc},
                              {"std_pcc", c.std_pcc},
                              {"mean_srcc", c.mean_srcc},
                              {"std_srcc", c.std_srcc},
                              {"n_runs", c.n_runs},
                              {"best_in_column", c.best_in_column}});
    }
    j["rows"].push_back(row);
  }
  return j;
}

std::string render_table(const AggregateReport& report) {
  auto fmt_cell = [](const AggregateCell& c) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%s%.2f +- %.2f%s", c.best_in_column ? "*" : " ", c.mean_pcc,
                  c.std_pcc, c.best_in_column ? "*" : " ");
    return std::string(buf);
  };

  std::size_t row_w = std::string("Training data v / Test data >").size();
  for (const auto& s : report.strategies) row_w = std::max(row_w, s.size());
  std::vector<std::size_t> col_w(report.datasets.size());
  for (std::size_t di = 0; di < report.datasets.size(); ++di) {
    col_w[di] = report.datasets[di].size();
    for (std::size_t si = 0; si < report.strategies.size(); ++si)
      col_w[di] = std::max(col_w[di], fmt_cell(report.cell(si, di)).size());
  }

  std::ostringstream out;
  const std::string corner = "Training data v / Test data >";
  out << corner << std::string(row_w - corner.size(), ' ');
  for (std::size_t di = 0; di < report.datasets.size(); ++di)
    out << "  " << report.datasets[di] << std::string(col_w[di] - report.datasets[di].size(), ' ');
  out << "\n";
  for (std::size_t si = 0; si < report.strategies.size(); ++si) {
    out << report.strategies[si] << std::string(row_w - report.strategies[si].size(), ' ');
    for (std::size_t di = 0; di < report.datasets.size(); ++di) {
      const auto cell = fmt_cell(report.cell(si, di));
      out << "  " << cell << std::string(col_w[di] - cell.size(), ' ');
    }
    out << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// external manifest import
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line, char delim) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == delim && !quoted) {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

std::vector<ManifestRecord> import_manifest(const std::string& path, ImportFormat format,
                                            const CsvMapping* mapping) {
  std::vector<ManifestRecord> records;
  std::size_t rejected = 0, total = 0;

  auto admit = [&](ManifestRecord rec) {
    ++total;
    if (!rec.label || *rec.label < 1.0 || *rec.label > 5.0) {
      ++rejected;
      std::cerr << "[import] rejecting " << rec.clip_path << ": label outside [1,5]\n";
      return;
    }
    rec.rater = "human";
    records.push_back(std::move(rec));
  };

  if (format == ImportFormat::kJsonl) {
    for (auto& rec : load_manifest(path)) admit(std::move(rec));
  } else {
    if (mapping == nullptr || mapping->path_column.empty() || mapping->mos_column.empty())
      throw ConfigError("csv import needs a column mapping (path and MOS columns)");
    std::ifstream in(path);
    if (!in) throw IoError("cannot open csv: " + path);
    std::string header;
    if (!std::getline(in, header)) throw FormatError("empty csv: " + path);
    const auto cols = split_csv_line(header, mapping->delimiter);
    auto col_of = [&](const std::string& name) {
      auto it = std::find(cols.begin(), cols.end(), name);
      if (it == cols.end()) throw ConfigError("csv has no column named " + name);
      return static_cast<std::size_t>(it - cols.begin());
    };
    const std::size_t path_col = col_of(mapping->path_column);
    const std::size_t mos_col = col_of(mapping->mos_column);

    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto fields = split_csv_line(line, mapping->delimiter);
      if (fields.size() <= std::max(path_col, mos_col)) {
        ++total;
        ++rejected;
        continue;
      }
      ManifestRecord rec;
      rec.clip_path = fields[path_col];
      try {
        rec.label = std::stod(fields[mos_col]);
      } catch (...) {
        rec.label.reset();
      }
      rec.split = "test";
      rec.source_dataset = mapping->source_dataset;
      admit(std::move(rec));
    }
  }

  if (total == 0) throw FormatError("no rows in " + path);
  if (static_cast<double>(rejected) > 0.01 * static_cast<double>(total))
    throw DataError("import rejected " + std::to_string(rejected) + "/" + std::to_string(total) +
                    " rows (over the 1% budget)");
  return records;
}

}  // namespace sqa::dataeval
