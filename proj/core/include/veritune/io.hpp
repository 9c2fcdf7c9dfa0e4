#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "veritune/types.hpp"

namespace veritune {

// JSON-lines readers and writers. Readers throw DataError naming the file,
// the 1-based line, and the offending field; writers emit one compact JSON
// object per line and are byte-stable for a given input.

std::vector<ClaimRecord> load_claims(const std::filesystem::path& path);
void save_claims(const std::filesystem::path& path, const std::vector<ClaimRecord>& records);

std::vector<GenerationSample> load_generations(const std::filesystem::path& path);
void save_generations(const std::filesystem::path& path,
                      const std::vector<GenerationSample>& samples);

std::vector<PreferencePair> load_pairs(const std::filesystem::path& path);
void save_pairs(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);

// Parse/serialize a single record; exposed for line-level tests.
ClaimRecord claim_from_json_line(const std::string& line);
std::string claim_to_json_line(const ClaimRecord& rec);

}  // namespace veritune
