#include "veritune/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "veritune/prompting.hpp"

namespace veritune {
namespace {

const char* kCities[12] = {"Arlen", "Briny", "Corvo", "Delmo", "Erlon", "Frost",
                           "Galen", "Harlo", "Ivona", "Jurel", "Kovac", "Lumen"};
const char* kObjects[8] = {"museum", "bridge", "harbor", "temple",
                           "cinema", "market", "school", "palace"};

struct Form {
  const char* before;  // between the value and the place
  const char* after;
  const char* tag;
};
// "the <obj> in <city> <before><d><after>"
const Form kForms[4] = {
    {"has ", " floors.", "form:floors"},
    {"is ", " decades old.", "form:age"},
    {"spans ", " acres.", "form:area"},
    {"holds ", " halls.", "form:halls"},
};

const char* kDistractors[8] = {
    "the site stays busy on market days.",
    "local guides praise its long history.",
    "visitors often linger near the gates.",
    "the nearby river floods in spring.",
    "repairs were funded by a town levy.",
    "a walking tour passes it each morning.",
    "the grounds close before dusk.",
    "postcards of it sell well in summer.",
};

std::string sentence(const char* obj, const char* city, int digit, const Form& form) {
  std::string s = "the ";
  s += obj;
  s += " in ";
  s += city;
  s += ' ';
  s += form.before;
  s += static_cast<char>('0' + digit);
  s += form.after;
  return s;
}

std::string make_tips(const std::string& edited, const std::string& original) {
  return "the claim span '" + edited + "' conflicts with '" + original + "' in the records.";
}

Label opposite(Label l) { return l == Label::Refutes ? Label::Supports : Label::Refutes; }

bool is_chosen_source(SettingId s, Label gold) {
  switch (s) {
    case SettingId::Bare: return true;
    case SettingId::GivenYes:
    case SettingId::GivenTips: return gold == Label::Refutes;
    case SettingId::GivenNo: return gold == Label::Supports;
  }
  return false;
}

bool is_rejected_source(SettingId s, Label gold) {
  switch (s) {
    case SettingId::Bare: return true;
    case SettingId::GivenYes:
    case SettingId::GivenTips: return gold == Label::Supports;
    case SettingId::GivenNo: return gold == Label::Refutes;
  }
  return false;
}

}  // namespace

void CorpusOptions::validate() const {
  if (size < 1) throw ConfigError("corpus size must be at least 1");
  if (!(contradiction_rate >= 0.0 && contradiction_rate <= 1.0))
    throw ConfigError("contradiction_rate must lie in [0, 1]");
  if (!(distractor_rate >= 0.0 && distractor_rate <= 1.0))
    throw ConfigError("distractor_rate must lie in [0, 1]");
  if (!(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0))
    throw ConfigError("split fractions must be nonnegative and sum below 1");
}

std::vector<ClaimRecord> synthesize_corpus(std::uint64_t seed, const CorpusOptions& opts) {
  opts.validate();
  Rng rng = derive_rng(seed, "corpus");
  std::vector<ClaimRecord> out;
  out.reserve(opts.size);
  for (std::size_t i = 0; i < opts.size; ++i) {
    const char* obj = kObjects[rng.below(8)];
    const char* city = kCities[rng.below(12)];
    const int digit = 2 + static_cast<int>(rng.below(8));
    const Form& form = kForms[rng.below(4)];
    const bool refute = rng.uniform01() < opts.contradiction_rate;

    ClaimRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "syn%llu-%05zu",
                  static_cast<unsigned long long>(seed), i);
    rec.id = idbuf;
    const std::string fact = sentence(obj, city, digit, form);
    rec.tags.push_back(form.tag);
    if (refute) {
      rec.label = Label::Refutes;
      rec.counterfactual = true;
      if (rng.below(2) == 0) {
        int edited = 2 + static_cast<int>(rng.below(7));
        if (edited >= digit) ++edited;  // uniform over the 7 other digits
        rec.claim = sentence(obj, city, edited, form);
        rec.tips = make_tips(std::string(1, static_cast<char>('0' + edited)),
                             std::string(1, static_cast<char>('0' + digit)));
        rec.tags.push_back("edit:number");
      } else {
        std::size_t swap = rng.below(11);
        std::size_t self = static_cast<std::size_t>(
            std::find(kCities, kCities + 12, std::string_view(city)) - kCities);
        if (swap >= self) ++swap;
        rec.claim = sentence(obj, kCities[swap], digit, form);
        rec.tips = make_tips(kCities[swap], city);
        rec.tags.push_back("edit:entity");
      }
    } else {
      rec.label = Label::Supports;
      rec.claim = fact;
      rec.tags.push_back("edit:none");
    }
    rec.evidence.push_back("records state that " + fact);
    std::size_t first_distractor = 9;  // out of range marker
    for (int dslot = 0; dslot < 2; ++dslot) {
      if (rng.uniform01() < opts.distractor_rate) {
        const std::size_t pickd = rng.below(8);
        if (pickd != first_distractor) rec.evidence.push_back(kDistractors[pickd]);
        if (first_distractor == 9) first_distractor = pickd;
      }
    }
    out.push_back(std::move(rec));
  }

  // Split assignment: shuffle indices, then carve validation and test off
  // the tail so ratios are exact up to rounding.
  std::vector<std::size_t> order(out.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng = derive_rng(seed, "splits");
  split_rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(
      std::llround(opts.val_fraction * static_cast<double>(out.size())));
  const auto n_test = static_cast<std::size_t>(
      std::llround(opts.test_fraction * static_cast<double>(out.size())));
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    Split s = Split::Train;
    if (pos >= order.size() - n_test)
      s = Split::Test;
    else if (pos >= order.size() - n_test - n_val)
      s = Split::Validation;
    out[order[pos]].split = s;
  }
  return out;
}

std::vector<ClaimRecord> ingest_counterfactual(const std::vector<ClaimRecord>& base,
                                               const std::vector<ClaimRecord>& counterfactual) {
  std::set<std::string> ids;
  for (const auto& r : base) ids.insert(r.id);
  std::vector<ClaimRecord> out = base;
  for (const auto& r : counterfactual) {
    if (r.label != Label::Refutes)
      throw DataError("counterfactual record '" + r.id + "' must be refuting");
    if (!r.counterfactual)
      throw DataError("counterfactual record '" + r.id + "' lacks the counterfactual flag");
    if (!r.tips || r.tips->empty())
      throw DataError("counterfactual record '" + r.id + "' lacks tips");
    if (r.evidence.empty())
      throw DataError("counterfactual record '" + r.id + "' has no evidence");
    if (!ids.insert(r.id).second)
      throw DataError("counterfactual record '" + r.id + "' duplicates an existing id");
    out.push_back(r);
  }
  return out;
}

int difficulty_weight(const ClaimRecord& record, const std::vector<GenerationSample>& bare,
                      int k) {
  if (k < 1) throw ConfigError("difficulty_weight requires k >= 1");
  int seen = 0;
  int w = 0;
  for (const auto& s : bare) {
    if (s.record_id != record.id)
      throw DataError("bare sample for record '" + s.record_id + "' passed with record '" +
                      record.id + "'");
    if (s.setting != SettingId::Bare)
      throw DataError("difficulty_weight expects bare-setting samples");
    if (s.sample_index >= k) continue;
    ++seen;
    if (s.parsed_label && *s.parsed_label == record.label) ++w;
  }
  if (seen < k)
    throw DataError("record '" + record.id + "' has " + std::to_string(seen) +
                    " bare samples, needs " + std::to_string(k));
  return w;
}

int sample_count(int w, int k, int n_min, int n_base) {
  if (k < 1) throw ConfigError("sample_count requires k >= 1");
  if (w < 0 || w > k) throw ConfigError("sample_count requires 0 <= w <= k");
  if (n_min < 1 || n_base < 1) throw ConfigError("sample_count requires n_min, n_base >= 1");
  const int scaled = (n_base * w + k - 1) / k;  // ceil(n_base * w / k)
  return std::max(n_min, scaled);
}

std::vector<PreferencePair> build_pairs(
    const std::vector<ClaimRecord>& records,
    const std::map<std::string, std::vector<GenerationSample>>& samples_by_record,
    const Hyperparams& hyper, std::uint64_t seed, const PairingOptions& opts,
    PairingStats* stats) {
  hyper.validate();
  PairingStats local;
  std::vector<PreferencePair> out;
  for (const auto& rec : records) {
    ++local.records_in;
    if (opts.no_counterfactual && rec.counterfactual) continue;
    const auto it = samples_by_record.find(rec.id);
    if (it == samples_by_record.end())
      throw DataError("no generations for record '" + rec.id + "'");
    const auto& samples = it->second;

    std::vector<GenerationSample> bare;
    for (const auto& s : samples)
      if (s.setting == SettingId::Bare) bare.push_back(s);
    const int k = hyper.num_generations;
    const int w = difficulty_weight(rec, bare, k);
    const int n_pairs =
        opts.flat_sampling ? hyper.n_min : sample_count(w, k, hyper.n_min, hyper.n_base);

    const Label gold = rec.label;
    const Label anti = opposite(gold);
    std::vector<const GenerationSample*> chosen_pool, rejected_pool;
    for (const auto& s : samples) {
      if (opts.validity_filter && !s.valid) continue;
      if (!s.parsed_label) continue;
      if (*s.parsed_label == gold && is_chosen_source(s.setting, gold))
        chosen_pool.push_back(&s);
      else if (*s.parsed_label == anti && is_rejected_source(s.setting, gold))
        rejected_pool.push_back(&s);
    }
    if (chosen_pool.empty() || rejected_pool.empty()) {
      ++local.records_skipped;
      continue;
    }

    const std::string prompt = build_training_prompt(rec, opts.tips_in_prompt);
    Rng rng = derive_rng(seed, "pair-draws", fnv1a(rec.id));
    for (int j = 0; j < n_pairs; ++j) {
      const auto* c = chosen_pool[rng.below(chosen_pool.size())];
      const auto* r = rejected_pool[rng.below(rejected_pool.size())];
      if (parse_label(c->text) != gold || parse_label(r->text) != anti)
        throw DataError("pair invariant violated for record '" + rec.id + "'");
      PreferencePair p;
      p.record_id = rec.id;
      p.prompt = prompt;
      p.chosen = c->text;
      p.rejected = r->text;
      p.w = w;
      p.k = k;
      p.chosen_setting = c->setting;
      p.rejected_setting = r->setting;
      out.push_back(std::move(p));
      ++local.pairs_out;
    }
    ++local.records_paired;
  }
  if (stats) *stats = local;
  return out;
}

std::vector<LabelTarget> build_label_only_targets(const std::vector<ClaimRecord>& records) {
  std::vector<LabelTarget> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    LabelTarget t;
    t.record_id = rec.id;
    t.prompt = build_prompt(rec, SettingId::Bare);
    t.target = answer_token(rec.label);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace veritune
