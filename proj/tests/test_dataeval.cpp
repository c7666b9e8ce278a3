#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "oracles.hpp"
#include "sqa/dataeval.hpp"
#include "sqa/errors.hpp"

using namespace sqa;
using namespace sqa::dataeval;

TEST_CASE("pcc basics") {
  CHECK(pcc({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0));
  CHECK(pcc({1, 2, 3}, {3, 2, 1}) == doctest::Approx(-1.0));
  // frozen from an independent evaluation of the centered formula (scipy
  // agrees to 12 digits)
  CHECK(pcc({1, 2, 3, 4}, {1.1, 1.9, 3.2, 3.8}) == doctest::Approx(0.9908470001860921).epsilon(1e-10));
  CHECK_THROWS_AS(pcc({1, 1, 1}, {1, 2, 3}), UndefinedCorrelationError);
  CHECK_THROWS_AS(pcc({2}, {3}), UndefinedCorrelationError);
  CHECK_THROWS_AS(pcc({1, 2}, {1, 2, 3}), ValidationError);
}

TEST_CASE("pcc is invariant under positive affine transforms") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(3, 60));
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = rng.normal();
    }
    const double a = rng.uniform(0.1, 5.0), b = rng.uniform(-10.0, 10.0);
    std::vector<double> ax(n);
    for (std::size_t i = 0; i < n; ++i) ax[i] = a * x[i] + b;
    CHECK(std::fabs(pcc(ax, y) - pcc(x, y)) < 1e-12);

    std::vector<double> neg(n);
    for (std::size_t i = 0; i < n; ++i) neg[i] = -x[i] + 3.0;
    CHECK(pcc(x, neg) == doctest::Approx(-1.0).epsilon(1e-12));
  }
}

TEST_CASE("srcc rank behaviour") {
  // any strictly monotone transform correlates perfectly
  CHECK(srcc({1.1, 2.5, 2.6}, {10, 20, 30}) == doctest::Approx(1.0));
  CHECK(srcc({1, 2, 3}, {std::exp(1.0), std::exp(2.0), std::exp(3.0)}) == doctest::Approx(1.0));
  // ties share the mean rank on both sides
  CHECK(srcc({1, 1, 2}, {3, 3, 4}) == doctest::Approx(1.0));
}

TEST_CASE("pcc and srcc match brute-force oracles on random vectors") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(3, 200));
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // quantize some trials to force ties
      x[i] = trial % 3 == 0 ? std::round(rng.uniform(0, 8)) : rng.normal();
      y[i] = trial % 4 == 0 ? std::round(rng.uniform(0, 5)) : rng.normal();
    }
    if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) continue;
    if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })) continue;
    CHECK(std::fabs(pcc(x, y) - oracles::brute_pcc(x, y)) < 1e-10);
    CHECK(std::fabs(srcc(x, y) - oracles::brute_srcc(x, y)) < 1e-10);
  }
}

TEST_CASE("manifest jsonl round-trip") {
  oracles::TempDir tmp("manifest");
  std::vector<ManifestRecord> records(3);
  records[0].clip_path = "a.wav";
  records[0].label = 3.25;
  records[0].rater = "oracle";
  records[0].split = "train";
  records[0].source_dataset = "built";
  records[0].duration_s = 2.0;
  degrade::DegradationSpec spec;
  spec.condition = degrade::Condition::kNoisePlusLowPass;
  spec.params = {{"snr_db", -3.0}, {"cutoff_hz", 640.0}};
  records[0].condition = spec;
  records[1].clip_path = "b.wav";
  records[1].split = "val";
  records[2].clip_path = "c.wav";
  records[2].label = 1.0;
  records[2].rater = "human";
  records[2].split = "test";

  save_manifest(records, tmp.file("m.jsonl"));
  const auto loaded = load_manifest(tmp.file("m.jsonl"));
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[0].label == 3.25);
  CHECK(loaded[0].condition->condition == degrade::Condition::kNoisePlusLowPass);
  CHECK(loaded[0].condition->params.at("cutoff_hz") == 640.0);
  CHECK(!loaded[1].label.has_value());
  CHECK(loaded[1].rater == "none");
  CHECK(loaded[2].rater == "human");
  CHECK(manifest_hash(loaded) == manifest_hash(records));
}

TEST_CASE("aggregate_runs means, stds and table shape") {
  EvalReport r1, r2;
  r1.strategy = r2.strategy = "strategy_a";
  r1.datasets = {{"ds1", 0.6, 0.58, 100, 0}, {"ds2", 0.4, 0.35, 50, 0}};
  r2.datasets = {{"ds1", 0.7, 0.69, 100, 0}, {"ds2", 0.5, 0.48, 50, 0}};
  EvalReport r3;
  r3.strategy = "strategy_b";
  r3.datasets = {{"ds1", 0.55, 0.5, 100, 0}, {"ds2", 0.8, 0.75, 50, 0}};

  const auto agg = aggregate_runs({r1, r2, r3});
  REQUIRE(agg.strategies.size() == 2);
  REQUIRE(agg.datasets.size() == 2);
  CHECK(agg.cell(0, 0).mean_pcc == doctest::Approx(0.65));
  CHECK(agg.cell(0, 0).std_pcc == doctest::Approx(0.0707).epsilon(0.01));
  CHECK(agg.cell(0, 0).n_runs == 2);
  CHECK(agg.cell(0, 0).best_in_column);
  CHECK_FALSE(agg.cell(1, 0).best_in_column);
  CHECK(agg.cell(1, 1).best_in_column);

  const auto table = render_table(agg);
  CHECK(table.find("Training data v / Test data >") != std::string::npos);
  CHECK(table.find("strategy_a") != std::string::npos);
  CHECK(table.find("ds2") != std::string::npos);
  CHECK(table.find("*0.65 +- 0.07*") != std::string::npos);

  // identical reports aggregate to zero std
  const auto same = aggregate_runs({r1, r1, r1});
  CHECK(same.cell(0, 0).std_pcc == 0.0);

  EvalReport bad;
  bad.strategy = "strategy_c";
  bad.datasets = {{"other", 0.1, 0.1, 5, 0}};
  CHECK_THROWS_AS(aggregate_runs({r1, bad}), ValidationError);
}

TEST_CASE("import_manifest jsonl validates the mos scale") {
  oracles::TempDir tmp("import");
  {
    std::ofstream out(tmp.file("h.jsonl"));
    out << R"({"clip_path": "a.wav", "label": 3.2, "split": "test"})" << "\n";
    out << R"({"clip_path": "b.wav", "label": 1.0, "split": "test"})" << "\n";
  }
  const auto records = import_manifest(tmp.file("h.jsonl"), ImportFormat::kJsonl);
  REQUIRE(records.size() == 2);
  CHECK(records[0].rater == "human");
  CHECK(records[0].label == 3.2);

  {
    std::ofstream out(tmp.file("bad.jsonl"));
    out << R"({"clip_path": "a.wav", "label": 7.0})" << "\n";
    out << R"({"clip_path": "b.wav", "label": 3.0})" << "\n";
  }
  CHECK_THROWS_AS(import_manifest(tmp.file("bad.jsonl"), ImportFormat::kJsonl), DataError);
}

TEST_CASE("import_manifest csv with a column mapping") {
  oracles::TempDir tmp("import");
  {
    std::ofstream out(tmp.file("corpus.csv"));
    out << "filename,con,mos,votes\n";
    out << "deg/one.wav,noise,4.25,5\n";
    out << "deg/two.wav,clip,1.75,4\n";
  }
  CsvMapping mapping;
  mapping.path_column = "filename";
  mapping.mos_column = "mos";
  mapping.source_dataset = "external_sim";
  const auto records = import_manifest(tmp.file("corpus.csv"), ImportFormat::kCsvMosmap, &mapping);
  REQUIRE(records.size() == 2);
  CHECK(records[0].clip_path == "deg/one.wav");
  CHECK(records[0].label == 4.25);
  CHECK(records[0].source_dataset == "external_sim");
  CHECK(records[1].label == 1.75);

  CHECK_THROWS_AS(import_manifest(tmp.file("corpus.csv"), ImportFormat::kCsvMosmap, nullptr),
                  ConfigError);
  mapping.mos_column = "missing";
  CHECK_THROWS_AS(import_manifest(tmp.file("corpus.csv"), ImportFormat::kCsvMosmap, &mapping),
                  ConfigError);
}

TEST_CASE("build_dataset produces deterministic clips and paper-ratio splits") {
  oracles::TempDir tmp("build");
  // synthetic clean sources
  std::filesystem::create_directories(tmp.file("clean"));
  Rng rng(5);
  for (int i = 0; i < 3; ++i) {
    audio_io::Waveform w;
    w.sample_rate = 16000;
    w.samples.resize(16000);
    for (std::size_t s = 0; s < w.samples.size(); ++s)
      w.samples[s] = 0.4 * std::sin(2.0 * oracles::kPi * (120.0 + 40.0 * i) * static_cast<double>(s) / 16000.0) +
                     0.05 * rng.normal();
    audio_io::write_wav(w, tmp.file("clean/src" + std::to_string(i) + ".wav"));
  }

  BuildConfig cfg;
  cfg.clean_dir = tmp.file("clean");
  cfg.out_dir = tmp.file("out");
  cfg.n_clips = 50;
  cfg.seed = 77;
  const auto result = build_dataset(cfg);
  // round(50 * 1129/101129) = 1
  CHECK(result.n_val == 1);
  CHECK(result.n_train == 49);

  const auto train = load_manifest(result.train_manifest);
  const auto val = load_manifest(result.val_manifest);
  CHECK(train.size() == 49);
  CHECK(val.size() == 1);
  for (const auto& r : train) {
    CHECK(!r.label.has_value());
    CHECK(r.condition.has_value());
    CHECK(r.split == "train");
    CHECK(std::filesystem::exists(r.clip_path));
  }

  // same seed reproduces byte-identical audio and manifests
  BuildConfig cfg2 = cfg;
  cfg2.out_dir = tmp.file("out2");
  const auto result2 = build_dataset(cfg2);
  const auto train2 = load_manifest(result2.train_manifest);
  REQUIRE(train2.size() == train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    std::ifstream a(train[i].clip_path, std::ios::binary);
    std::ifstream b(train2[i].clip_path, std::ios::binary);
    std::string ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(ba == bb);
    CHECK(train[i].condition->condition == train2[i].condition->condition);
  }
}

TEST_CASE("paper split ratio at 1000 clips") {
  // round(1000 * 1129/101129) = 11 -> 989 train + 11 val
  const double val_fraction = 1129.0 / 101129.0;
  CHECK(std::llround(1000 * val_fraction) == 11);
}

TEST_CASE("evaluate: determinism, completeness, failure budget, degenerate manifests") {
  oracles::TempDir tmp("eval");
  auto cfg = models::ModelConfig::dnsmos_pro_default();
  cfg.conv_channels = {2, 4, 4, 4};
  cfg.head_hidden = 8;
  auto model = models::build_dnsmos_pro(cfg, 5);

  Rng rng(6);
  std::vector<ManifestRecord> records;
  for (int i = 0; i < 12; ++i) {
    audio_io::Waveform w;
    w.sample_rate = 16000;
    w.samples.resize(12000);
    for (auto& v : w.samples) v = rng.uniform(-0.4, 0.4);
    const auto path = tmp.file("clip" + std::to_string(i) + ".wav");
    audio_io::write_wav(w, path);
    ManifestRecord rec;
    rec.clip_path = path;
    rec.label = 1.0 + 0.3 * i;
    rec.rater = "human";
    rec.split = "test";
    records.push_back(rec);
  }

  const auto a = evaluate(model, {{"set_a", records}, {"set_b", records}});
  REQUIRE(a.datasets.size() == 2);
  CHECK(a.datasets[0].dataset == "set_a");
  CHECK(a.datasets[1].dataset == "set_b");
  const auto b = evaluate(model, {{"set_a", records}, {"set_b", records}});
  CHECK(a.datasets[0].pcc == b.datasets[0].pcc);
  CHECK(a.datasets[0].srcc == b.datasets[0].srcc);
  CHECK(a.datasets[0].n_clips == 12);

  // one unreadable clip out of 12 (8%) blows the 5% budget
  auto broken = records;
  broken[3].clip_path = tmp.file("missing.wav");
  CHECK_THROWS_AS(evaluate(model, {{"set_a", broken}}), DataError);

  // a single-clip manifest surfaces the undefined correlation
  std::vector<ManifestRecord> one(records.begin(), records.begin() + 1);
  CHECK_THROWS_AS(evaluate(model, {{"tiny", one}}), UndefinedCorrelationError);

  auto unlabeled = records;
  unlabeled[0].label.reset();
  CHECK_THROWS_AS(evaluate(model, {{"set_a", unlabeled}}), ValidationError);
}
