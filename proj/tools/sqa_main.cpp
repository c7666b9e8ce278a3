// Command-line front end: build -> label -> train/finetune -> eval -> report.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sqa/dataeval.hpp"
#include "sqa/errors.hpp"
#include "sqa/models.hpp"
#include "sqa/rater.hpp"
#include "sqa/training.hpp"

namespace fs = std::filesystem;
using namespace sqa;

namespace {

constexpr const char* kConfigSections[] = {"dataset", "rater", "model", "train", "eval"};

// Known keys per section; unknown keys are rejected up front.
const std::map<std::string, std::vector<std::string>>& config_schema() {
  static const std::map<std::string, std::vector<std::string>> schema = {
      {"dataset", {"clean_dir", "out_dir", "n_clips", "seed", "val_fraction", "noise_dir"}},
      {"rater", {"kind", "endpoint", "concurrency", "timeout_s", "max_retries", "token_env", "force"}},
      {"model", {"kind", "conv_channels", "dropout_rate", "head_hidden", "lstm_hidden"}},
      {"train", {"lr", "batch_size", "epochs", "seed", "crop_frames", "runs", "label"}},
      {"eval", {"tests", "strategy"}},
  };
  return schema;
}

nlohmann::json load_config_file(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad config file " + path + ": " + e.what());
  }
  for (const auto& [section, body] : j.items()) {
    const auto& schema = config_schema();
    auto it = schema.find(section);
    if (it == schema.end()) throw ConfigError("unknown config section: " + section);
    for (const auto& [key, value] : body.items()) {
      (void)value;
      if (std::find(it->second.begin(), it->second.end(), key) == it->second.end())
        throw ConfigError("unknown config key: " + section + "." + key);
    }
  }
  return j;
}

template <class T>
void config_default(const nlohmann::json& cfg, const char* section, const char* key, T& target) {
  if (cfg.contains(section) && cfg[section].contains(key)) target = cfg[section][key].get<T>();
}

void echo_config(const nlohmann::json& resolved, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream out(fs::path(dir) / "resolved_config.json");
  out << resolved.dump(2) << "\n";
}

models::ModelConfig model_config_from(const std::string& kind, std::vector<int> widths,
                                      double dropout, int head_hidden, int lstm_hidden) {
  auto cfg = kind == "deepmos" ? models::ModelConfig::deepmos_default()
                               : models::ModelConfig::dnsmos_pro_default();
  if (!widths.empty()) cfg.conv_channels = widths;
  cfg.dropout_rate = dropout;
  if (head_hidden > 0) cfg.head_hidden = head_hidden;
  if (lstm_hidden > 0) cfg.lstm_hidden = lstm_hidden;
  return cfg;
}

int default_epochs(const std::string& kind) { return kind == "deepmos" ? 60 : 500; }

struct EvalTestArg {
  std::string name;
  std::string path;
};

EvalTestArg parse_test_arg(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 >= arg.size())
    throw ConfigError("--test expects name=manifest.jsonl, got: " + arg);
  return {arg.substr(0, eq), arg.substr(eq + 1)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speech-quality toolkit: degradation simulation, pseudo-labeling, "
               "small-model MOS regression, correlation evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (sections: dataset, rater, model, train, eval)");

  // preload --config so file values become flag defaults
  nlohmann::json cfg = nlohmann::json::object();
  try {
    for (int i = 1; i + 1 < argc; ++i)
      if (std::string(argv[i]) == "--config") cfg = load_config_file(argv[i + 1]);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  // ---- build ----
  auto* build = app.add_subcommand("build", "degrade clean WAVs into a training corpus");
  dataeval::BuildConfig bcfg;
  config_default(cfg, "dataset", "clean_dir", bcfg.clean_dir);
  config_default(cfg, "dataset", "out_dir", bcfg.out_dir);
  config_default(cfg, "dataset", "n_clips", bcfg.n_clips);
  config_default(cfg, "dataset", "seed", bcfg.seed);
  config_default(cfg, "dataset", "val_fraction", bcfg.val_fraction);
  config_default(cfg, "dataset", "noise_dir", bcfg.noise_dir);
  build->add_option("--clean-dir", bcfg.clean_dir, "directory of clean source WAVs")
      ->required(bcfg.clean_dir.empty());
  build->add_option("--out", bcfg.out_dir, "output directory (clips/ + manifests)")
      ->required(bcfg.out_dir.empty());
  build->add_option("--n", bcfg.n_clips, "number of degraded clips")->required(bcfg.n_clips == 0);
  build->add_option("--seed", bcfg.seed, "rng seed")->capture_default_str();
  build->add_option("--val-fraction", bcfg.val_fraction, "validation split fraction")
      ->capture_default_str();
  build->add_option("--noise-dir", bcfg.noise_dir, "extra background-noise WAVs");

  // ---- label ----
  auto* label = app.add_subcommand("label", "pseudo-label a manifest with the oracle or a remote LLM");
  std::string label_manifest_path, label_out, rater_kind = "oracle";
  rater::RaterConfig rcfg;
  int concurrency = 2;
  bool force = false;
  config_default(cfg, "rater", "kind", rater_kind);
  config_default(cfg, "rater", "endpoint", rcfg.endpoint_url);
  config_default(cfg, "rater", "concurrency", concurrency);
  config_default(cfg, "rater", "timeout_s", rcfg.timeout_s);
  config_default(cfg, "rater", "max_retries", rcfg.max_retries);
  config_default(cfg, "rater", "token_env", rcfg.auth_token_env);
  config_default(cfg, "rater", "force", force);
  label->add_option("--manifest", label_manifest_path, "manifest to label (JSONL)")->required();
  label->add_option("--out", label_out, "output manifest (default: in place)");
  label->add_option("--rater", rater_kind, "oracle | llm")->capture_default_str();
  label->add_option("--endpoint", rcfg.endpoint_url, "remote rater URL (llm only)");
  label->add_option("--concurrency", concurrency, "parallel rating requests")->capture_default_str();
  label->add_option("--timeout", rcfg.timeout_s, "per-request timeout, seconds")->capture_default_str();
  label->add_option("--retries", rcfg.max_retries, "retry count with 1s,2s,4s backoff")
      ->capture_default_str();
  label->add_option("--token-env", rcfg.auth_token_env, "env var holding the bearer token")
      ->capture_default_str();
  label->add_flag("--force", force, "relabel rows that already carry a label");

  // ---- train / finetune ----
  std::string model_kind = "dnsmos_pro", train_manifest, val_manifest, out_dir, run_label;
  std::string checkpoint_dir;
  std::vector<int> widths;
  double dropout_rate = 0.3;
  int head_hidden = 0, lstm_hidden = 0, runs = 1;
  training::TrainConfig tcfg;
  config_default(cfg, "model", "kind", model_kind);
  config_default(cfg, "model", "conv_channels", widths);
  config_default(cfg, "model", "dropout_rate", dropout_rate);
  config_default(cfg, "model", "head_hidden", head_hidden);
  config_default(cfg, "model", "lstm_hidden", lstm_hidden);
  config_default(cfg, "train", "lr", tcfg.lr);
  config_default(cfg, "train", "batch_size", tcfg.batch_size);
  config_default(cfg, "train", "epochs", tcfg.epochs);
  config_default(cfg, "train", "seed", tcfg.seed);
  config_default(cfg, "train", "crop_frames", tcfg.crop_frames);
  config_default(cfg, "train", "runs", runs);
  config_default(cfg, "train", "label", run_label);

  auto add_common_train_opts = [&](CLI::App* cmd, bool finetuning) {
    cmd->add_option("--train-manifest", train_manifest, "labeled training manifest")->required();
    cmd->add_option("--val-manifest", val_manifest, "labeled validation manifest")->required();
    cmd->add_option("--out", out_dir, "run directory root")->required();
    cmd->add_option("--model", model_kind, "dnsmos_pro | deepmos")->capture_default_str();
    cmd->add_option("--epochs", tcfg.epochs,
                    finetuning ? "epochs (default 10)" : "epochs (default 500 dnsmos_pro, 60 deepmos)");
    cmd->add_option("--lr", tcfg.lr, "Adam learning rate")->capture_default_str();
    cmd->add_option("--batch-size", tcfg.batch_size, "clips per batch")->capture_default_str();
    cmd->add_option("--seed", tcfg.seed, "base rng seed")->capture_default_str();
    cmd->add_option("--crop-frames", tcfg.crop_frames, "training crop length in frames")
        ->capture_default_str();
    cmd->add_option("--runs", runs, "independent runs with seeds seed, seed+1, ...")
        ->capture_default_str();
    cmd->add_option("--label", run_label, "strategy label used by reports");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model from scratch");
  add_common_train_opts(train_cmd, false);
  train_cmd->add_option("--widths", widths, "conv channel widths (4 for dnsmos_pro, 9 for deepmos)")
      ->delimiter(',');
  train_cmd->add_option("--dropout", dropout_rate, "dropout rate")->capture_default_str();
  train_cmd->add_option("--head-hidden", head_hidden, "dnsmos_pro head width (0 = default)");
  train_cmd->add_option("--lstm-hidden", lstm_hidden, "deepmos lstm width (0 = default)");

  auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune a checkpoint (dropout off)");
  add_common_train_opts(finetune_cmd, true);
  finetune_cmd->add_option("--checkpoint", checkpoint_dir, "pretrained checkpoint directory")
      ->required();

  // ---- eval ----
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on test manifests");
  std::string eval_checkpoint, eval_out = "eval.json", eval_strategy;
  std::vector<std::string> test_args;
  config_default(cfg, "eval", "strategy", eval_strategy);
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--test", test_args, "test manifest as name=path (repeatable)");
  eval_cmd->add_option("--out", eval_out, "output report JSON")->capture_default_str();
  eval_cmd->add_option("--strategy", eval_strategy, "strategy label for aggregation");

  // ---- report ----
  auto* report_cmd = app.add_subcommand("report", "aggregate run evaluations into a table");
  std::vector<std::string> run_dirs;
  std::string report_out;
  report_cmd->add_option("--run", run_dirs, "run directory or eval.json (repeatable)")->required();
  report_cmd->add_option("--out", report_out, "output prefix (.json and .txt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*build) {
      const auto result = dataeval::build_dataset(bcfg);
      echo_config(nlohmann::json{{"dataset",
                                  {{"clean_dir", bcfg.clean_dir},
                                   {"out_dir", bcfg.out_dir},
                                   {"n_clips", bcfg.n_clips},
                                   {"seed", bcfg.seed},
                                   {"val_fraction", bcfg.val_fraction},
                                   {"noise_dir", bcfg.noise_dir}}}},
                  bcfg.out_dir);
      std::cout << "built " << result.n_train << " train + " << result.n_val << " val clips\n"
                << "train manifest: " << result.train_manifest << "\n"
                << "val manifest:   " << result.val_manifest << "\n";
      if (result.n_skipped_sources > 0)
        std::cout << "skipped " << result.n_skipped_sources << " unreadable sources\n";
    } else if (*label) {
      if (rater_kind == "llm") {
        rcfg.kind = rater::RaterConfig::Kind::kLlmRemote;
        if (rcfg.endpoint_url.empty()) throw ConfigError("--rater llm requires --endpoint");
      } else if (rater_kind == "oracle") {
        rcfg.kind = rater::RaterConfig::Kind::kOracle;
      } else {
        throw ConfigError("unknown rater kind: " + rater_kind);
      }
      auto manifest = dataeval::load_manifest(label_manifest_path);
      const auto stats = rater::label_manifest(manifest, rcfg, concurrency, force);
      dataeval::save_manifest(manifest, label_out.empty() ? label_manifest_path : label_out);
      std::cout << "labeled " << stats.labeled << ", skipped " << stats.skipped << ", failed "
                << stats.failed << "\n";
      if (stats.failed > 0) std::cout << "warning: " << stats.failed << " clips left unlabeled\n";
    } else if (*train_cmd || *finetune_cmd) {
      const bool finetuning = static_cast<bool>(*finetune_cmd);
      const auto kind = models::model_kind_from_string(model_kind);
      if (tcfg.epochs < 1) tcfg.epochs = finetuning ? 10 : default_epochs(model_kind);
      if (runs < 1) throw ConfigError("--runs must be >= 1");
      const auto train_set = dataeval::load_manifest(train_manifest);
      const auto val_set = dataeval::load_manifest(val_manifest);
      const auto mcfg = model_config_from(model_kind, widths, dropout_rate, head_hidden, lstm_hidden);
      if (run_label.empty())
        run_label = model_kind + (finetuning ? "+finetune:" : ":") +
                    fs::path(train_manifest).stem().string();

      for (int r = 0; r < runs; ++r) {
        training::TrainConfig run_cfg = tcfg;
        run_cfg.seed = tcfg.seed + static_cast<std::uint64_t>(r);
        run_cfg.run_dir = runs == 1 ? out_dir : (fs::path(out_dir) / ("run_" + std::to_string(r))).string();
        nlohmann::json resolved = {{"model", mcfg},
                                   {"train",
                                    {{"lr", run_cfg.lr},
                                     {"batch_size", run_cfg.batch_size},
                                     {"epochs", run_cfg.epochs},
                                     {"seed", run_cfg.seed},
                                     {"crop_frames", run_cfg.crop_frames},
                                     {"runs", runs},
                                     {"label", run_label}}}};
        if (finetuning) resolved["train"]["checkpoint"] = checkpoint_dir;
        echo_config(resolved, run_cfg.run_dir);

        training::TrainResult result =
            finetuning ? training::finetune(checkpoint_dir, train_set, val_set, run_cfg, kind)
                       : training::train(models::build_model(mcfg, run_cfg.seed), train_set,
                                         val_set, run_cfg);
        // strategy label rides along for eval/report
        {
          std::ofstream out(fs::path(run_cfg.run_dir) / "strategy.txt");
          out << run_label << "\n";
        }
        std::cout << "run " << r << ": best epoch " << result.best_epoch << ", val pcc "
                  << result.best_val_pcc << " -> " << run_cfg.run_dir << "/best\n";
      }
    } else if (*eval_cmd) {
      if (test_args.empty()) throw ConfigError("eval needs at least one --test name=path");
      nlohmann::json meta;
      auto model = models::load_model(eval_checkpoint, &meta);
      std::vector<std::pair<std::string, std::vector<dataeval::ManifestRecord>>> tests;
      for (const auto& arg : test_args) {
        const auto parsed = parse_test_arg(arg);
        tests.emplace_back(parsed.name, dataeval::load_manifest(parsed.path));
      }
      auto report = dataeval::evaluate(model, tests);
      if (eval_strategy.empty()) {
        // default: strategy recorded next to the checkpoint by cmd_train
        const auto strategy_file = fs::path(eval_checkpoint).parent_path() / "strategy.txt";
        if (fs::exists(strategy_file)) {
          std::ifstream in(strategy_file);
          std::getline(in, eval_strategy);
        } else {
          eval_strategy = meta.contains("model") ? meta["model"].value("kind", "model") : "model";
        }
      }
      report.strategy = eval_strategy;
      if (meta.contains("training")) report.seed = meta["training"].value("seed", std::uint64_t{0});
      std::ofstream out(eval_out);
      if (!out) throw IoError("cannot write " + eval_out);
      out << nlohmann::json(report).dump(2) << "\n";
      for (const auto& d : report.datasets)
        std::cout << d.dataset << ": pcc " << d.pcc << ", srcc " << d.srcc << " (" << d.n_clips
                  << " clips)\n";
    } else if (*report_cmd) {
      std::vector<dataeval::EvalReport> reports;
      for (const auto& dir : run_dirs) {
        const auto path = fs::is_directory(dir) ? (fs::path(dir) / "eval.json").string() : dir;
        std::ifstream in(path);
        if (!in) throw IoError("cannot open " + path);
        nlohmann::json j;
        in >> j;
        reports.push_back(j.get<dataeval::EvalReport>());
      }
      const auto agg = dataeval::aggregate_runs(reports);
      const auto table = dataeval::render_table(agg);
      std::cout << table;
      if (!report_out.empty()) {
        std::ofstream jout(report_out + ".json");
        jout << dataeval::to_json(agg).dump(2) << "\n";
        std::ofstream tout(report_out + ".txt");
        tout << table;
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
