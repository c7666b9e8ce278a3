#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sqa/audio_io.hpp"
#include "sqa/dataeval.hpp"
#include "sqa/degrade.hpp"

namespace sqa::rater {

// Fixed labeling prompt sent with every clip.
inline constexpr const char* kDefaultPrompt =
    "Please evaluate the quality of the speech sample and only answer me with a score";

struct RaterConfig {
  enum class Kind { kLlmRemote, kOracle };
  Kind kind = Kind::kOracle;
  std::string endpoint_url;                     // required for kLlmRemote
  std::string auth_token_env = "SQA_LLM_TOKEN"; // bearer token variable name
  double timeout_s = 60.0;
  int max_retries = 3;
  double initial_backoff_s = 1.0;  // doubles per retry (1 s, 2 s, 4 s)
  std::string prompt = kDefaultPrompt;
};

// First decimal number in free text, if any.
std::optional<double> parse_first_number(const std::string& text);

// POSTs {audio_b64, sample_rate, prompt} and parses the first number of the
// response, clamped to [1,5]. Transport failures and unparseable responses
// are retried with exponential backoff; HTTP 4xx aborts with ConfigError;
// exhausted retries raise LabelParseError.
double rate_llm(const audio_io::Waveform& clip, const RaterConfig& cfg);

// Severity weight of a single (non-pair) condition.
double severity_weight(degrade::Condition condition);
// Weighted severity in [0, weight]; parameters normalized inside their
// published ranges, oriented so 1 is the worst end.
double severity(const degrade::DegradationSpec& spec);
// score = clamp(5 - total severity, 1, 5); a pure function of the spec.
double rate_oracle(const degrade::DegradationSpec& spec);

struct LabelStats {
  int labeled = 0;
  int skipped = 0;  // already labeled, left untouched
  int failed = 0;   // recorded as unlabeled
};

// Labels every unlabeled row in place (provenance = "llm" or "oracle").
// Ordering is preserved and the call is idempotent unless force is set.
// Fails (DataError) when more than 10% of attempted rows end up unlabeled.
LabelStats label_manifest(std::vector<dataeval::ManifestRecord>& manifest, const RaterConfig& cfg,
                          int concurrency, bool force = false);

std::string base64_encode(const std::string& bytes);

}  // namespace sqa::rater
