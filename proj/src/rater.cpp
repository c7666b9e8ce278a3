#include "sqa/rater.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <regex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "sqa/errors.hpp"

namespace sqa::rater {

std::string base64_encode(const std::string& bytes) {
  static const char* alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 3 <= bytes.size()) {
    const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                            static_cast<unsigned char>(bytes[i + 2]);
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += alphabet[(v >> 6) & 63];
    out += alphabet[v & 63];
    i += 3;
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    const std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += "==";
  } else if (rem == 2) {
    const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += alphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::optional<double> parse_first_number(const std::string& text) {
  static const std::regex number(R"([-+]?(\d+(\.\d+)?|\.\d+))");
  std::smatch m;
  if (!std::regex_search(text, m, number)) return std::nullopt;
  try {
    return std::stod(m.str());
  } catch (...) {
    return std::nullopt;
  }
}

namespace {

struct Endpoint {
  std::string base;  // scheme://host:port
  std::string path;
};

Endpoint split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint url needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

double rate_llm(const audio_io::Waveform& clip, const RaterConfig& cfg) {
  if (cfg.kind != RaterConfig::Kind::kLlmRemote)
    throw ConfigError("rate_llm called with a non-remote rater config");
  if (cfg.endpoint_url.empty()) throw ConfigError("remote rater needs an endpoint url");

  const auto endpoint = split_url(cfg.endpoint_url);
  nlohmann::json body;
  body["audio_b64"] = base64_encode(audio_io::to_wav_bytes(clip));
  body["sample_rate"] = clip.sample_rate;
  body["prompt"] = cfg.prompt;
  const std::string payload = body.dump();

  httplib::Client client(endpoint.base);
  client.set_connection_timeout(std::chrono::milliseconds(static_cast<int>(cfg.timeout_s * 1000)));
  client.set_read_timeout(std::chrono::milliseconds(static_cast<int>(cfg.timeout_s * 1000)));
  httplib::Headers headers;
  if (const char* token = std::getenv(cfg.auth_token_env.c_str()); token && *token)
    headers.emplace("Authorization", std::string("Bearer ") + token);

  std::string last_issue = "no attempt made";
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) {
      const double backoff = cfg.initial_backoff_s * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
    }
    auto res = client.Post(endpoint.path, headers, payload, "application/json");
    if (!res) {
      last_issue = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 400 && res->status < 500)
      throw ConfigError("rater endpoint rejected the request with HTTP " +
                        std::to_string(res->status));
    if (res->status < 200 || res->status >= 300) {
      last_issue = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (const auto score = parse_first_number(res->body)) return std::clamp(*score, 1.0, 5.0);
    last_issue = "no number in response: \"" + res->body.substr(0, 80) + "\"";
  }
  throw LabelParseError("rater gave no usable score after " + std::to_string(cfg.max_retries + 1) +
                        " attempts (" + last_issue + ")");
}

double severity_weight(degrade::Condition condition) {
  using degrade::Condition;
  switch (condition) {
    case Condition::kIdentity: return 0.0;
    case Condition::kAddBackgroundNoise: return 2.5;
    case Condition::kClippingImpairment: return 1.5;
    case Condition::kGainTransition: return 1.5;
    case Condition::kLowPassFilter: return 1.0;
    case Condition::kMp3Compression: return 1.0;
    case Condition::kPitchShift: return 0.8;
    case Condition::kRoomSimulator: return 1.0;
    case Condition::kTimeMask: return 1.0;
    case Condition::kTimeStretch: return 1.0;
    default:
      throw ValidationError("severity_weight: composite condition");
  }
}

namespace {

// 0 at the mildest end of the published range, 1 at the worst.
double normalized_badness(degrade::Condition c, const std::map<std::string, double>& params) {
  using degrade::Condition;
  auto get = [&](const char* name) {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError(std::string("oracle needs parameter ") + name);
    return it->second;
  };
  double v = 0.0;
  switch (c) {
    case Condition::kIdentity: return 0.0;
    case Condition::kAddBackgroundNoise: v = (15.0 - get("snr_db")) / 25.0; break;
    case Condition::kClippingImpairment: v = (get("percentile") - 10.0) / 30.0; break;
    case Condition::kGainTransition: v = (20.0 - get("gain_db")) / 80.0; break;
    case Condition::kLowPassFilter: v = (1000.0 - get("cutoff_hz")) / 500.0; break;
    case Condition::kMp3Compression: v = (14.0 - get("bit_rate_kbps")) / 6.0; break;
    case Condition::kPitchShift: v = std::fabs(get("semitones")) / 4.0; break;
    case Condition::kRoomSimulator: v = (get("rt60_s") - 0.8) / 0.7; break;
    case Condition::kTimeMask: v = (get("band_part") - 0.2) / 0.3; break;
    case Condition::kTimeStretch: v = std::fabs(std::log2(get("rate"))); break;
    default:
      throw ValidationError("normalized_badness: composite condition");
  }
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace

double severity(const degrade::DegradationSpec& spec) {
  const auto parts = degrade::pair_parts(spec.condition);
  const int n_parts = degrade::is_pair(spec.condition) ? 2 : 1;
  double total = 0.0;
  for (int i = 0; i < n_parts; ++i) {
    const auto part = parts[static_cast<std::size_t>(i)];
    total += severity_weight(part) * normalized_badness(part, spec.params);
  }
  return total;
}

double rate_oracle(const degrade::DegradationSpec& spec) {
  return std::clamp(5.0 - severity(spec), 1.0, 5.0);
}

LabelStats label_manifest(std::vector<dataeval::ManifestRecord>& manifest, const RaterConfig& cfg,
                          int concurrency, bool force) {
  if (concurrency < 1) throw ConfigError("concurrency must be >= 1");
  if (cfg.kind == RaterConfig::Kind::kLlmRemote && cfg.endpoint_url.empty())
    throw ConfigError("remote rater needs an endpoint url");

  std::vector<std::size_t> todo;
  LabelStats stats;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (manifest[i].label && !force)
      ++stats.skipped;
    else
      todo.push_back(i);
  }

  std::vector<std::string> failures(todo.size());
  std::string config_failure;
  bool config_abort = false;

#pragma omp parallel for schedule(dynamic) num_threads(concurrency)
  for (std::int64_t t = 0; t < static_cast<std::int64_t>(todo.size()); ++t) {
    auto& rec = manifest[todo[static_cast<std::size_t>(t)]];
    try {
      bool abort = false;
#pragma omp atomic read
      abort = config_abort;
      if (abort) {
        failures[static_cast<std::size_t>(t)] = "skipped after config error";
        continue;
      }
      if (cfg.kind == RaterConfig::Kind::kOracle) {
        if (!rec.condition)
          throw ValidationError("oracle rater needs the degradation spec for " + rec.clip_path);
        rec.label = rate_oracle(*rec.condition);
        rec.rater = "oracle";
        rec.rater_detail = "severity-weights-v1";
      } else {
        const auto clip = audio_io::read_wav(rec.clip_path);
        rec.label = rate_llm(clip, cfg);
        rec.rater = "llm";
        rec.rater_detail = cfg.endpoint_url;
      }
    } catch (const ConfigError& e) {
#pragma omp critical
      {
        config_failure = e.what();
        config_abort = true;
      }
      failures[static_cast<std::size_t>(t)] = e.what();
    } catch (const Error& e) {
      failures[static_cast<std::size_t>(t)] = e.what();
    }
  }

  if (!config_failure.empty()) throw ConfigError(config_failure);

  for (std::size_t t = 0; t < todo.size(); ++t) {
    if (failures[t].empty()) {
      ++stats.labeled;
    } else {
      ++stats.failed;
      std::cerr << "[label] " << manifest[todo[t]].clip_path << ": " << failures[t] << "\n";
    }
  }
  if (!todo.empty() && static_cast<double>(stats.failed) > 0.10 * static_cast<double>(todo.size()))
    throw DataError("labeling failed for " + std::to_string(stats.failed) + "/" +
                    std::to_string(todo.size()) + " clips (over the 10% budget)");
  return stats;
}

}  // namespace sqa::rater
