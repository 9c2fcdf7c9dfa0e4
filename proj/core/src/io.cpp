#include "veritune/io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace veritune {
namespace {

using nlohmann::json;

json parse_line(const std::string& line, const std::string& where) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw DataError(where + ": malformed JSON object");
  }
  return j;
}

template <typename T>
T require(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError(where + ": missing field '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw DataError(where + ": field '" + key + "' has the wrong type");
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open for reading: " + path.string());
  return in;
}

const char* kKnownClaimKeys[] = {"id",   "claim",          "evidence", "label",
                                 "tags", "counterfactual", "tips",     "split"};

bool is_known_claim_key(const std::string& k) {
  for (const char* known : kKnownClaimKeys)
    if (k == known) return true;
  return false;
}

ClaimRecord claim_from_json(const json& j, const std::string& where) {
  ClaimRecord rec;
  rec.id = require<std::string>(j, "id", where);
  rec.claim = require<std::string>(j, "claim", where);
  rec.evidence = require<std::vector<std::string>>(j, "evidence", where);
  if (rec.evidence.empty()) throw DataError(where + ": 'evidence' must be non-empty");
  try {
    rec.label = label_from_string(require<std::string>(j, "label", where));
  } catch (const DataError& e) {
    throw DataError(where + ": " + e.what());
  }
  if (auto it = j.find("tags"); it != j.end()) {
    try {
      rec.tags = it->get<std::vector<std::string>>();
    } catch (const json::exception&) {
      throw DataError(where + ": field 'tags' has the wrong type");
    }
  }
  if (auto it = j.find("counterfactual"); it != j.end()) {
    if (!it->is_boolean()) throw DataError(where + ": field 'counterfactual' has the wrong type");
    rec.counterfactual = it->get<bool>();
  }
  if (auto it = j.find("tips"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw DataError(where + ": field 'tips' has the wrong type");
    rec.tips = it->get<std::string>();
  }
  if (auto it = j.find("split"); it != j.end()) {
    try {
      rec.split = split_from_string(it->get<std::string>());
    } catch (const std::exception& e) {
      throw DataError(where + ": " + std::string(e.what()));
    }
  }
  json extras = json::object();
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!is_known_claim_key(it.key())) extras[it.key()] = it.value();
  }
  if (!extras.empty()) rec.extras = extras.dump();
  return rec;
}

json claim_to_json(const ClaimRecord& rec) {
  json j;
  j["id"] = rec.id;
  j["claim"] = rec.claim;
  j["evidence"] = rec.evidence;
  j["label"] = to_string(rec.label);
  j["tags"] = rec.tags;
  j["counterfactual"] = rec.counterfactual;
  if (rec.tips)
    j["tips"] = *rec.tips;
  else
    j["tips"] = nullptr;
  j["split"] = to_string(rec.split);
  if (!rec.extras.empty()) {
    json extras = json::parse(rec.extras);
    for (auto it = extras.begin(); it != extras.end(); ++it) j[it.key()] = it.value();
  }
  return j;
}

}  // namespace

ClaimRecord claim_from_json_line(const std::string& line) {
  return claim_from_json(parse_line(line, "claim line"), "claim line");
}

std::string claim_to_json_line(const ClaimRecord& rec) { return claim_to_json(rec).dump(); }

std::vector<ClaimRecord> load_claims(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<ClaimRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    out.push_back(claim_from_json(parse_line(line, where), where));
  }
  return out;
}

void save_claims(const std::filesystem::path& path, const std::vector<ClaimRecord>& records) {
  auto out = open_out(path);
  for (const auto& rec : records) out << claim_to_json(rec).dump() << '\n';
}

std::vector<GenerationSample> load_generations(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<GenerationSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    json j = parse_line(line, where);
    GenerationSample s;
    s.record_id = require<std::string>(j, "record_id", where);
    s.setting = setting_from_int(require<int>(j, "setting", where));
    s.sample_index = require<int>(j, "sample_index", where);
    s.text = require<std::string>(j, "text", where);
    if (auto it = j.find("parsed_label"); it == j.end()) {
      throw DataError(where + ": missing field 'parsed_label'");
    } else if (!it->is_null()) {
      if (!it->is_string()) throw DataError(where + ": field 'parsed_label' has the wrong type");
      const std::string v = it->get<std::string>();
      if (v == "yes")
        s.parsed_label = Label::Refutes;
      else if (v == "no")
        s.parsed_label = Label::Supports;
      else
        throw DataError(where + ": parsed_label must be \"yes\", \"no\", or null");
    }
    s.valid = require<bool>(j, "valid", where);
    out.push_back(std::move(s));
  }
  return out;
}

void save_generations(const std::filesystem::path& path,
                      const std::vector<GenerationSample>& samples) {
  auto out = open_out(path);
  for (const auto& s : samples) {
    json j;
    j["record_id"] = s.record_id;
    j["setting"] = static_cast<int>(s.setting);
    j["sample_index"] = s.sample_index;
    j["text"] = s.text;
    if (s.parsed_label)
      j["parsed_label"] = (*s.parsed_label == Label::Refutes) ? "yes" : "no";
    else
      j["parsed_label"] = nullptr;
    j["valid"] = s.valid;
    out << j.dump() << '\n';
  }
}

std::vector<PreferencePair> load_pairs(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<PreferencePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    json j = parse_line(line, where);
    PreferencePair p;
    p.record_id = require<std::string>(j, "record_id", where);
    p.prompt = require<std::string>(j, "prompt", where);
    p.chosen = require<std::string>(j, "chosen", where);
    p.rejected = require<std::string>(j, "rejected", where);
    p.w = require<int>(j, "w", where);
    p.k = require<int>(j, "k", where);
    p.chosen_setting = setting_from_int(require<int>(j, "chosen_setting", where));
    p.rejected_setting = setting_from_int(require<int>(j, "rejected_setting", where));
    out.push_back(std::move(p));
  }
  return out;
}

void save_pairs(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  auto out = open_out(path);
  for (const auto& p : pairs) {
    json j;
    j["record_id"] = p.record_id;
    j["prompt"] = p.prompt;
    j["chosen"] = p.chosen;
    j["rejected"] = p.rejected;
    j["w"] = p.w;
    j["k"] = p.k;
    j["chosen_setting"] = static_cast<int>(p.chosen_setting);
    j["rejected_setting"] = static_cast<int>(p.rejected_setting);
    out << j.dump() << '\n';
  }
}

}  // namespace veritune
