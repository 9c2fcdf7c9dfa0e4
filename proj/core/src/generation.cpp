#include "veritune/generation.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "veritune/io.hpp"
#include "veritune/prompting.hpp"

namespace veritune {

void GeneratorConfig::validate() const {
  if (backend != "mock" && backend != "endpoint")
    throw ConfigError("unknown generator backend: '" + backend + "'");
  if (!(temperature >= 0.0)) throw ConfigError("generator temperature must be nonnegative");
  if (max_tokens < 1) throw ConfigError("generator max_tokens must be at least 1");
  if (!(mock_correctness >= 0.0 && mock_correctness <= 1.0))
    throw ConfigError("mock_correctness must lie in [0, 1]");
  if (!(q_follow >= 0.0 && q_follow <= 1.0)) throw ConfigError("q_follow must lie in [0, 1]");
  if (backend == "endpoint") {
    if (base_url.empty()) throw ConfigError("endpoint backend requires base_url");
    if (model.empty()) throw ConfigError("endpoint backend requires model");
    if (retry_limit < 0) throw ConfigError("retry_limit must be nonnegative");
  }
}

namespace {

// ---- mock internals ----------------------------------------------------

struct PromptView {
  std::string claim;
  std::string first_evidence;
  std::optional<Label> hint;
  bool has_tips = false;
};

std::string line_after(const std::string& text, const std::string& prefix) {
  auto pos = text.find(prefix);
  if (pos == std::string::npos) return {};
  pos += prefix.size();
  const auto end = text.find('\n', pos);
  return text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
}

PromptView scan_prompt(const std::string& prompt) {
  PromptView v;
  v.claim = line_after(prompt, "CLAIM: ");
  v.first_evidence = line_after(prompt, "- ");
  v.has_tips = prompt.find("\nTIPS: ") != std::string::npos;
  const std::string hint = line_after(prompt, "The correct answer is: ");
  if (hint.rfind("Yes", 0) == 0)
    v.hint = Label::Refutes;
  else if (hint.rfind("No", 0) == 0)
    v.hint = Label::Supports;
  return v;
}

constexpr std::string_view kFactPrefix = "records state that ";

// Gold answer under the synthetic grammar: the first evidence line restates
// the true fact, so the claim is refuted iff it differs from that fact.
std::optional<Label> infer_gold(const PromptView& v) {
  if (v.claim.empty() || v.first_evidence.rfind(kFactPrefix, 0) != 0) return std::nullopt;
  const std::string fact = v.first_evidence.substr(kFactPrefix.size());
  return fact == v.claim ? Label::Supports : Label::Refutes;
}

// Second word of "the <obj> in <city> ..." and the word after "in".
std::string claim_word(const std::string& claim, int index) {
  std::size_t start = 0;
  int seen = 0;
  while (start < claim.size()) {
    auto sp = claim.find(' ', start);
    if (sp == std::string::npos) sp = claim.size();
    if (seen == index) return claim.substr(start, sp - start);
    ++seen;
    start = sp + 1;
  }
  return {};
}

const char* kOpeners[16] = {"clearly",    "plainly",    "frankly",     "indeed",
                            "overall",    "on balance", "in short",    "notably",
                            "evidently",  "on review",  "as written",  "in context",
                            "at a glance", "all told",  "on the whole", "put simply"};
const char* kAdverbs[16] = {"directly", "squarely", "flatly",  "openly",  "sharply", "neatly",
                            "firmly",   "broadly",  "strictly", "wholly", "simply",  "surely",
                            "readily",  "roundly",  "exactly", "cleanly"};
const char* kYesVerbs[16] = {"contradicts",    "conflicts with",  "clashes with",
                             "disputes",       "overturns",       "undercuts",
                             "refutes",        "belies",          "is at odds with",
                             "diverges from",  "departs from",    "breaks from",
                             "disagrees with", "cannot square with", "fails to match",
                             "runs against"};
const char* kNoVerbs[16] = {"matches",   "agrees with", "lines up with", "squares with",
                            "accords with", "fits",     "supports",      "confirms",
                            "mirrors",   "echoes",      "is consistent with", "corroborates",
                            "upholds",   "tracks",      "restates",      "bears out"};
const char* kRefs[16] = {"the figure", "the value",  "the total",  "the count",
                         "the number", "the tally",  "the entry",  "the note",
                         "the sum",    "the line",   "the text",   "the amount",
                         "the item",   "the measure", "the datum", "the field"};
const char* kTails[16] = {" here.",           " in the end.",   " as noted.",
                          " on this point.",  " throughout.",   " in every line.",
                          " by a clear margin.", " without question.", " per the file.",
                          " at every step.",  " on the merits.", " in substance.",
                          " beyond doubt.",   " on the facts.",  " as recorded.",
                          " in detail."};

std::size_t pick(std::uint64_t key, std::uint64_t slot, std::size_t n) {
  return static_cast<std::size_t>(splitmix64(hash_combine(key, slot)) % n);
}

std::string mock_body(std::uint64_t key, const PromptView& v, Label answer) {
  const std::string obj = claim_word(v.claim, 1);
  const std::string city = claim_word(v.claim, 3);
  const char* nouns[6] = {"figure", "detail", "record", "account", "claim", "note"};
  std::string noun;
  switch (pick(key, 3, 6)) {
    case 0: noun = obj.empty() ? "figure" : obj; break;
    case 1: noun = city.empty() ? "record" : city + " record"; break;
    default: noun = nouns[pick(key, 4, 6)]; break;
  }
  std::string body = kOpeners[pick(key, 1, 16)];
  body += ", the ";
  body += noun;
  body += ' ';
  body += kAdverbs[pick(key, 2, 16)];
  body += ' ';
  body += (answer == Label::Refutes ? kYesVerbs : kNoVerbs)[pick(key, 5, 16)];
  body += ' ';
  body += kRefs[pick(key, 6, 16)];
  body += kTails[pick(key, 7, 16)];
  return body;
}

// ---- endpoint internals --------------------------------------------------

bool retryable_status(int status) { return status >= 500 && status < 600; }

}  // namespace

MockGenerator::MockGenerator(std::uint64_t seed, double correctness, double q_follow)
    : seed_(seed), correctness_(correctness), q_follow_(q_follow) {}

std::vector<std::string> MockGenerator::complete(const std::string& prompt, int n,
                                                 int start_index, double /*temperature*/) {
  ++calls_;
  const PromptView view = scan_prompt(prompt);
  const std::optional<Label> gold = infer_gold(view);
  const std::uint64_t base = hash_combine(splitmix64(seed_), fnv1a(prompt));
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::uint64_t key = hash_combine(base, static_cast<std::uint64_t>(start_index + i));
    Rng draw(hash_combine(key, 0xD3C151011ULL));
    Label answer;
    if (view.hint && draw.uniform01() < q_follow_) {
      answer = *view.hint;
    } else {
      const bool correct = draw.uniform01() < correctness_;
      // Prompts outside the synthetic grammar get a deterministic coin.
      const Label g = gold ? *gold
                           : (splitmix64(key ^ 0xABCDULL) & 1 ? Label::Refutes : Label::Supports);
      answer = correct ? g : (g == Label::Refutes ? Label::Supports : Label::Refutes);
    }
    std::string text = answer_token(answer);
    text += ", ";
    text += mock_body(key, view, answer);
    out.push_back(std::move(text));
  }
  return out;
}

EndpointGenerator::EndpointGenerator(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const char* key = std::getenv("GENERATOR_API_KEY");
  if (key == nullptr || *key == '\0')
    throw ConfigError("endpoint backend requires GENERATOR_API_KEY in the environment");
  api_key_ = key;
}

std::vector<std::string> EndpointGenerator::complete(const std::string& prompt, int n,
                                                     int /*start_index*/, double temperature) {
  ++calls_;
  nlohmann::json req;
  req["model"] = cfg_.model;
  req["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt}}});
  req["n"] = n;
  req["temperature"] = temperature;
  req["max_tokens"] = cfg_.max_tokens;
  const std::string body = req.dump();

  httplib::Client client(cfg_.base_url);
  client.set_connection_timeout(static_cast<time_t>(cfg_.timeout_s), 0);
  client.set_read_timeout(static_cast<time_t>(cfg_.timeout_s), 0);
  client.set_bearer_token_auth(api_key_);

  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.retry_limit; ++attempt) {
    if (attempt > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(100 * (1 << (attempt - 1))));
    auto res = client.Post(cfg_.path, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (retryable_status(res->status)) {
      last_error = "server status " + std::to_string(res->status);
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      throw BackendError("generation endpoint returned status " + std::to_string(res->status));
    }
    nlohmann::json rep = nlohmann::json::parse(res->body, nullptr, false);
    if (rep.is_discarded() || !rep.contains("choices") || !rep["choices"].is_array())
      throw BackendError("generation endpoint returned malformed JSON");
    std::vector<std::string> out;
    for (const auto& choice : rep["choices"]) {
      if (!choice.contains("message") || !choice["message"].contains("content"))
        throw BackendError("generation choice lacks message content");
      out.push_back(choice["message"]["content"].get<std::string>());
    }
    if (static_cast<int>(out.size()) != n)
      throw BackendError("generation endpoint returned " + std::to_string(out.size()) +
                         " choices, expected " + std::to_string(n));
    return out;
  }
  throw BackendError("generation endpoint unreachable after " +
                     std::to_string(cfg_.retry_limit + 1) + " attempts: " + last_error);
}

std::unique_ptr<Generator> make_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.backend == "mock")
    return std::make_unique<MockGenerator>(seed, cfg.mock_correctness, cfg.q_follow);
  return std::make_unique<EndpointGenerator>(cfg);
}

bool setting_valid(SettingId setting, const std::optional<Label>& parsed) {
  switch (setting) {
    case SettingId::Bare:
      return parsed.has_value();
    case SettingId::GivenYes:
    case SettingId::GivenTips:
      return parsed.has_value() && *parsed == Label::Refutes;
    case SettingId::GivenNo:
      return parsed.has_value() && *parsed == Label::Supports;
  }
  return false;
}

std::vector<SettingId> settings_for_record(const ClaimRecord& record) {
  std::vector<SettingId> out{SettingId::Bare, SettingId::GivenYes, SettingId::GivenNo};
  if (record.counterfactual && record.label == Label::Refutes && record.tips)
    out.push_back(SettingId::GivenTips);
  return out;
}

std::vector<GenerationSample> run_setting(const ClaimRecord& record, SettingId setting, int n,
                                          Generator& gen, double temperature) {
  if (n < 1) throw ConfigError("run_setting requires n >= 1");
  const std::string prompt = build_prompt(record, setting);
  const auto texts = gen.complete(prompt, n, 0, temperature);
  std::vector<GenerationSample> out;
  out.reserve(texts.size());
  for (int i = 0; i < static_cast<int>(texts.size()); ++i) {
    GenerationSample s;
    s.record_id = record.id;
    s.setting = setting;
    s.sample_index = i;
    s.text = texts[static_cast<std::size_t>(i)];
    s.parsed_label = parse_label(s.text);
    s.valid = setting_valid(setting, s.parsed_label);
    out.push_back(std::move(s));
  }
  return out;
}

GenerationCache::GenerationCache(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(path_)) return;
  for (auto& s : load_generations(path_)) {
    const auto key = std::make_pair(s.record_id, static_cast<int>(s.setting));
    auto it = by_key_.find(key);
    if (it == by_key_.end()) {
      order_.push_back(key);
      it = by_key_.emplace(key, std::vector<GenerationSample>{}).first;
    }
    it->second.push_back(std::move(s));
  }
  for (auto& [key, vec] : by_key_) {
    std::sort(vec.begin(), vec.end(),
              [](const GenerationSample& a, const GenerationSample& b) {
                return a.sample_index < b.sample_index;
              });
    for (int i = 0; i < static_cast<int>(vec.size()); ++i) {
      if (vec[static_cast<std::size_t>(i)].sample_index != i)
        throw DataError("generation cache has non-contiguous sample indices for record '" +
                        key.first + "'");
    }
  }
}

const std::vector<GenerationSample>* GenerationCache::lookup(const std::string& record_id,
                                                             SettingId setting) const {
  const auto it = by_key_.find(std::make_pair(record_id, static_cast<int>(setting)));
  return it == by_key_.end() ? nullptr : &it->second;
}

std::size_t GenerationCache::size() const {
  std::size_t n = 0;
  for (const auto& [key, vec] : by_key_) n += vec.size();
  return n;
}

std::vector<GenerationSample> GenerationCache::ensure(const ClaimRecord& record,
                                                      SettingId setting, int n, Generator& gen,
                                                      double temperature) {
  if (n < 1) throw ConfigError("GenerationCache::ensure requires n >= 1");
  const auto key = std::make_pair(record.id, static_cast<int>(setting));
  auto it = by_key_.find(key);
  if (it == by_key_.end()) {
    order_.push_back(key);
    it = by_key_.emplace(key, std::vector<GenerationSample>{}).first;
  }
  auto& have = it->second;
  if (static_cast<int>(have.size()) < n) {
    const int start = static_cast<int>(have.size());
    const std::string prompt = build_prompt(record, setting);
    const auto texts = gen.complete(prompt, n - start, start, temperature);
    for (int i = 0; i < static_cast<int>(texts.size()); ++i) {
      GenerationSample s;
      s.record_id = record.id;
      s.setting = setting;
      s.sample_index = start + i;
      s.text = texts[static_cast<std::size_t>(i)];
      s.parsed_label = parse_label(s.text);
      s.valid = setting_valid(setting, s.parsed_label);
      have.push_back(std::move(s));
    }
  }
  return std::vector<GenerationSample>(have.begin(), have.begin() + n);
}

void GenerationCache::save() const {
  std::vector<GenerationSample> all;
  all.reserve(size());
  for (const auto& key : order_) {
    const auto& vec = by_key_.at(key);
    all.insert(all.end(), vec.begin(), vec.end());
  }
  save_generations(path_, all);
}

}  // namespace veritune
