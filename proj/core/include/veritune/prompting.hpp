#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "veritune/types.hpp"

namespace veritune {

// Renders the verification prompt for a record under one of the four
// construction settings. Layout, header spelling, and newline placement are
// load-bearing: generated completions are concatenated directly after the
// trailing newline, and the synthetic-corpus generator re-parses prompts.
//
//   CLAIM: <claim>
//   EVIDENCE:
//   - <evidence line>          (one per line)
//   TIPS: <tips>               (GivenTips only)
//   QUESTION: Does the Evidence contradict the CLAIM? Answer "Yes" or
//     "No", then explain your reasoning.   (single line in the output)
//   The correct answer is: <Yes|No>.       (GivenYes/GivenNo/GivenTips)
//   ANSWER:
//
// GivenTips requires record.tips; throws DataError otherwise.
std::string build_prompt(const ClaimRecord& record, SettingId setting);

// The bare shape with the TIPS line injected and no answer hint. Used when
// training prompts are configured to carry tips. Records without tips render
// identically to Bare.
std::string build_training_prompt(const ClaimRecord& record, bool include_tips);

// Extracts the leading answer token from a completion. Only the first 16
// bytes are examined: leading whitespace and punctuation are skipped, then
// the first alphabetic run must equal "yes" or "no" case-insensitively and
// be followed by a non-letter (or end of text). Anything else is nullopt.
std::optional<Label> parse_label(std::string_view completion);

}  // namespace veritune
