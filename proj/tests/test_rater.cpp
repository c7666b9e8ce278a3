#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "oracles.hpp"
#include "sqa/errors.hpp"
#include "sqa/rater.hpp"

using namespace sqa;
using namespace sqa::rater;

namespace {

audio_io::Waveform short_clip(std::uint64_t seed) {
  Rng rng(seed);
  audio_io::Waveform w;
  w.sample_rate = 16000;
  w.samples.resize(1600);
  for (auto& v : w.samples) v = 0.2 * rng.normal();
  return w;
}

// local stand-in for the remote pseudo-rater
struct FakeRaterServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;
  std::atomic<int> flaky_calls{0};
  std::atomic<int> total_posts{0};
  std::string last_prompt;
  std::string last_auth;

  FakeRaterServer() {
    server.Post("/rate", [&](const httplib::Request& req, httplib::Response& res) {
      ++total_posts;
      last_auth = req.get_header_value("Authorization");
      const auto body = nlohmann::json::parse(req.body);
      last_prompt = body.at("prompt").get<std::string>();
      REQUIRE(body.contains("audio_b64"));
      REQUIRE(body.at("sample_rate").get<int>() == 16000);
      res.set_content("The quality is decent, I rate it 4.2 out of 5.", "text/plain");
    });
    server.Post("/big", [&](const httplib::Request&, httplib::Response& res) {
      res.set_content("The score is 6", "text/plain");
    });
    server.Post("/refuse", [&](const httplib::Request&, httplib::Response& res) {
      res.set_content("no idea", "text/plain");
    });
    server.Post("/flaky", [&](const httplib::Request&, httplib::Response& res) {
      if (++flaky_calls <= 2) {
        res.status = 500;
        res.set_content("overloaded", "text/plain");
      } else {
        res.set_content("3.5", "text/plain");
      }
    });
    server.Post("/forbidden", [&](const httplib::Request&, httplib::Response& res) {
      res.status = 403;
      res.set_content("forbidden", "text/plain");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~FakeRaterServer() {
    server.stop();
    thread.join();
  }
  std::string url(const std::string& path) const {
    return "http://127.0.0.1:" + std::to_string(port) + path;
  }
};

RaterConfig remote_cfg(const std::string& url) {
  RaterConfig cfg;
  cfg.kind = RaterConfig::Kind::kLlmRemote;
  cfg.endpoint_url = url;
  cfg.initial_backoff_s = 0.01;
  cfg.timeout_s = 5.0;
  return cfg;
}

}  // namespace

TEST_CASE("parse_first_number grabs the first decimal in free text") {
  CHECK(parse_first_number("4.2") == 4.2);
  CHECK(parse_first_number("The score is 6") == 6.0);
  CHECK(parse_first_number("I'd say 3.75, maybe 4") == 3.75);
  CHECK(parse_first_number("minus: -2.5 dB") == -2.5);
  CHECK(parse_first_number(".5 exactly") == 0.5);
  CHECK(!parse_first_number("no idea").has_value());
  CHECK(!parse_first_number("").has_value());
}

TEST_CASE("rate_llm happy path sends the paper prompt and parses the score") {
  FakeRaterServer fake;
  const auto cfg = remote_cfg(fake.url("/rate"));
  const double score = rate_llm(short_clip(1), cfg);
  CHECK(score == 4.2);
  CHECK(fake.last_prompt ==
        "Please evaluate the quality of the speech sample and only answer me with a score");
}

TEST_CASE("rate_llm clamps out-of-scale answers") {
  FakeRaterServer fake;
  CHECK(rate_llm(short_clip(2), remote_cfg(fake.url("/big"))) == 5.0);
}

TEST_CASE("rate_llm raises a label-parse error when no number ever arrives") {
  FakeRaterServer fake;
  auto cfg = remote_cfg(fake.url("/refuse"));
  cfg.max_retries = 1;
  CHECK_THROWS_AS(rate_llm(short_clip(3), cfg), LabelParseError);
}

TEST_CASE("rate_llm retries transient failures with backoff") {
  FakeRaterServer fake;
  const auto cfg = remote_cfg(fake.url("/flaky"));
  CHECK(rate_llm(short_clip(4), cfg) == 3.5);
  CHECK(fake.flaky_calls == 3);
}

TEST_CASE("rate_llm treats 4xx as a config error") {
  FakeRaterServer fake;
  CHECK_THROWS_AS(rate_llm(short_clip(5), remote_cfg(fake.url("/forbidden"))), ConfigError);
  CHECK_THROWS_AS(rate_llm(short_clip(5), RaterConfig{}), ConfigError);
}

TEST_CASE("rate_llm sends the bearer token from the environment") {
  FakeRaterServer fake;
  auto cfg = remote_cfg(fake.url("/rate"));
  cfg.auth_token_env = "SQA_TEST_TOKEN";
  setenv("SQA_TEST_TOKEN", "sekrit", 1);
  rate_llm(short_clip(6), cfg);
  CHECK(fake.last_auth == "Bearer sekrit");
  unsetenv("SQA_TEST_TOKEN");
}

TEST_CASE("oracle scores match the published severity weights") {
  degrade::DegradationSpec identity;
  identity.condition = degrade::Condition::kIdentity;
  CHECK(rate_oracle(identity) == 5.0);

  degrade::DegradationSpec worst_noise;
  worst_noise.condition = degrade::Condition::kAddBackgroundNoise;
  worst_noise.params = {{"snr_db", -10.0}};
  CHECK(rate_oracle(worst_noise) == doctest::Approx(2.5));

  degrade::DegradationSpec pair;
  pair.condition = degrade::Condition::kNoisePlusRoom;
  pair.params = {{"snr_db", -10.0}, {"rt60_s", 1.5}};
  CHECK(rate_oracle(pair) == doctest::Approx(1.5));

  // scores always within [1,5], pure in the spec
  Rng rng(9);
  for (int i = 0; i < 500; ++i) {
    const auto spec = degrade::sample_spec(rng);
    const double a = rate_oracle(spec);
    CHECK(a >= 1.0);
    CHECK(a <= 5.0);
    CHECK(rate_oracle(spec) == a);
  }
}

TEST_CASE("oracle is monotone: worsening a parameter never raises the score") {
  struct Case {
    degrade::Condition c;
    const char* param;
    double mild, worse;
  };
  const Case cases[] = {
      {degrade::Condition::kAddBackgroundNoise, "snr_db", 10.0, -5.0},
      {degrade::Condition::kClippingImpairment, "percentile", 15.0, 35.0},
      {degrade::Condition::kGainTransition, "gain_db", 10.0, -40.0},
      {degrade::Condition::kLowPassFilter, "cutoff_hz", 900.0, 550.0},
      {degrade::Condition::kMp3Compression, "bit_rate_kbps", 13.0, 9.0},
      {degrade::Condition::kPitchShift, "semitones", 1.0, -3.5},
      {degrade::Condition::kRoomSimulator, "rt60_s", 0.9, 1.4},
      {degrade::Condition::kTimeMask, "band_part", 0.25, 0.45},
      {degrade::Condition::kTimeStretch, "rate", 1.2, 1.9},
  };
  for (const auto& c : cases) {
    degrade::DegradationSpec mild, worse;
    mild.condition = worse.condition = c.c;
    mild.params[c.param] = c.mild;
    worse.params[c.param] = c.worse;
    CAPTURE(c.param);
    CHECK(rate_oracle(worse) <= rate_oracle(mild));
  }
}

TEST_CASE("label_manifest with the oracle labels everything and is idempotent") {
  Rng rng(21);
  std::vector<dataeval::ManifestRecord> manifest(100);
  for (auto& rec : manifest) {
    rec.clip_path = "unused.wav";
    rec.condition = degrade::sample_spec(rng);
  }

  RaterConfig cfg;
  cfg.kind = RaterConfig::Kind::kOracle;
  const auto stats = label_manifest(manifest, cfg, 2);
  CHECK(stats.labeled == 100);
  CHECK(stats.failed == 0);
  for (const auto& rec : manifest) {
    CHECK(rec.label.has_value());
    CHECK(rec.rater == "oracle");
    CHECK(*rec.label >= 1.0);
    CHECK(*rec.label <= 5.0);
  }

  // a second pass touches nothing
  auto copy = manifest;
  const auto again = label_manifest(copy, cfg, 2);
  CHECK(again.skipped == 100);
  CHECK(again.labeled == 0);

  // reproducible across concurrency levels
  auto redo = manifest;
  for (auto& rec : redo) rec.label.reset();
  label_manifest(redo, cfg, 1);
  for (std::size_t i = 0; i < manifest.size(); ++i) CHECK(*redo[i].label == *manifest[i].label);
}

TEST_CASE("label_manifest tolerates failures below the 10% budget") {
  FakeRaterServer fake;
  oracles::TempDir tmp("label");

  std::vector<dataeval::ManifestRecord> manifest;
  for (int i = 0; i < 20; ++i) {
    dataeval::ManifestRecord rec;
    const auto path = tmp.file("c" + std::to_string(i) + ".wav");
    audio_io::write_wav(short_clip(static_cast<std::uint64_t>(i)), path);
    rec.clip_path = path;
    manifest.push_back(rec);
  }
  // one unreadable clip: 5% failure rate
  manifest[7].clip_path = tmp.file("missing.wav");

  auto cfg = remote_cfg(fake.url("/rate"));
  cfg.max_retries = 0;
  const auto stats = label_manifest(manifest, cfg, 2);
  CHECK(stats.labeled == 19);
  CHECK(stats.failed == 1);
  CHECK(!manifest[7].label.has_value());
  CHECK(manifest[6].label.has_value());

  // over the budget: 3 bad clips out of 5
  std::vector<dataeval::ManifestRecord> mostly_bad(manifest.begin(), manifest.begin() + 5);
  for (auto& rec : mostly_bad) rec.label.reset();
  mostly_bad[0].clip_path = tmp.file("gone0.wav");
  mostly_bad[1].clip_path = tmp.file("gone1.wav");
  mostly_bad[2].clip_path = tmp.file("gone2.wav");
  CHECK_THROWS_AS(label_manifest(mostly_bad, cfg, 2), DataError);
}

TEST_CASE("label_manifest aborts on a config-level rejection") {
  FakeRaterServer fake;
  oracles::TempDir tmp("label");
  std::vector<dataeval::ManifestRecord> manifest(3);
  for (int i = 0; i < 3; ++i) {
    const auto path = tmp.file("c" + std::to_string(i) + ".wav");
    audio_io::write_wav(short_clip(static_cast<std::uint64_t>(i)), path);
    manifest[static_cast<std::size_t>(i)].clip_path = path;
  }
  auto cfg = remote_cfg(fake.url("/forbidden"));
  CHECK_THROWS_AS(label_manifest(manifest, cfg, 2), ConfigError);
}

TEST_CASE("base64 round-trips against known vectors") {
  CHECK(base64_encode("") == "");
  CHECK(base64_encode("f") == "Zg==");
  CHECK(base64_encode("fo") == "Zm8=");
  CHECK(base64_encode("foo") == "Zm9v");
  CHECK(base64_encode("foobar") == "Zm9vYmFy");
}
