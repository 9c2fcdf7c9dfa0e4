#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "veritune/types.hpp"

namespace veritune {

struct GeneratorConfig {
  std::string backend = "mock";  // "mock" or "endpoint"
  double temperature = 0.8;
  int max_tokens = 512;
  // mock backend
  double mock_correctness = 0.7;  // chance an unhinted answer matches gold
  double q_follow = 0.95;         // chance a hinted answer follows the hint
  // endpoint backend (chat-completions protocol)
  std::string base_url;  // scheme://host:port
  std::string path = "/v1/chat/completions";
  std::string model;
  int retry_limit = 3;
  double timeout_s = 60.0;

  void validate() const;
};

// Completion source. Implementations count their invocations so callers can
// assert that cache hits issue no backend traffic.
class Generator {
 public:
  virtual ~Generator() = default;
  // Returns n completions. start_index shifts the per-sample stream so a
  // deterministic backend can extend an earlier batch without repeating it.
  virtual std::vector<std::string> complete(const std::string& prompt, int n, int start_index,
                                            double temperature) = 0;
  int calls() const { return calls_; }

 protected:
  int calls_ = 0;
};

// Deterministic stand-in for a hosted model. Output depends only on
// (seed, prompt, sample index): the prompt is re-parsed under the synthetic
// corpus grammar to find the gold answer, an answer hint is honored with
// probability q_follow, and otherwise the gold answer is produced with
// probability mock_correctness. Every completion starts with "Yes, " or
// "No, " followed by a templated body that cites fragments of the claim.
class MockGenerator : public Generator {
 public:
  MockGenerator(std::uint64_t seed, double correctness, double q_follow);
  std::vector<std::string> complete(const std::string& prompt, int n, int start_index,
                                    double temperature) override;

 private:
  std::uint64_t seed_;
  double correctness_;
  double q_follow_;
};

// Client for an OpenAI-style chat-completions endpoint. The bearer token is
// read from the GENERATOR_API_KEY environment variable at construction.
// Transport failures and 5xx responses are retried up to retry_limit times;
// anything else raises BackendError.
class EndpointGenerator : public Generator {
 public:
  explicit EndpointGenerator(GeneratorConfig cfg);
  std::vector<std::string> complete(const std::string& prompt, int n, int start_index,
                                    double temperature) override;

 private:
  GeneratorConfig cfg_;
  std::string api_key_;
};

std::unique_ptr<Generator> make_generator(const GeneratorConfig& cfg, std::uint64_t seed);

// True when a parsed label satisfies the setting's purpose: hinted-Yes and
// tips settings must parse "Yes", hinted-No must parse "No", and the bare
// setting accepts either as long as something parsed.
bool setting_valid(SettingId setting, const std::optional<Label>& parsed);

// S1..S3 always apply; S4 only for counterfactual refuting records with tips.
std::vector<SettingId> settings_for_record(const ClaimRecord& record);

// Prompts the generator n times under one setting and parses the results.
std::vector<GenerationSample> run_setting(const ClaimRecord& record, SettingId setting, int n,
                                          Generator& gen, double temperature);

// JSONL-backed store of generation results keyed by (record id, setting).
// ensure() serves fully-cached requests without touching the backend and
// tops up partial ones, so re-running against an unchanged file is free.
class GenerationCache {
 public:
  explicit GenerationCache(std::filesystem::path path);

  std::vector<GenerationSample> ensure(const ClaimRecord& record, SettingId setting, int n,
                                       Generator& gen, double temperature);
  // Samples currently held for a key, in sample_index order.
  const std::vector<GenerationSample>* lookup(const std::string& record_id,
                                              SettingId setting) const;
  std::size_t size() const;
  void save() const;

 private:
  std::filesystem::path path_;
  std::map<std::pair<std::string, int>, std::vector<GenerationSample>> by_key_;
  std::vector<std::pair<std::string, int>> order_;
};

}  // namespace veritune
