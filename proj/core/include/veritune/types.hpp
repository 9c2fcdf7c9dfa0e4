#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "veritune/common.hpp"

namespace veritune {

// A claim either agrees with its evidence or contradicts it. The verifier
// question is phrased as "does the evidence contradict the claim", so the
// affirmative answer token corresponds to Refutes.
enum class Label { Supports, Refutes };

std::string to_string(Label l);
Label label_from_string(const std::string& s);

// "Yes" <-> Refutes, "No" <-> Supports.
std::string answer_token(Label l);
Label label_from_answer(const std::string& token);

enum class Split { Train, Validation, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ClaimRecord {
  std::string id;
  std::string claim;
  std::vector<std::string> evidence;  // at least one line
  Label label = Label::Supports;
  std::vector<std::string> tags;
  bool counterfactual = false;
  std::optional<std::string> tips;
  Split split = Split::Train;
  // Unknown input fields, kept verbatim as a serialized JSON object so
  // round-tripping a foreign file is lossless. Empty when none.
  std::string extras;
};

// Prompt construction settings. Bare asks the question cold; GivenYes and
// GivenNo append an answer hint; GivenTips additionally cites the edit that
// made the claim counterfactual (hint is always "Yes" there).
enum class SettingId : int {
  Bare = 1,
  GivenYes = 2,
  GivenNo = 3,
  GivenTips = 4,
};

SettingId setting_from_int(int v);

struct GenerationSample {
  std::string record_id;
  SettingId setting = SettingId::Bare;
  int sample_index = 0;
  std::string text;
  std::optional<Label> parsed_label;
  bool valid = false;
};

struct PreferencePair {
  std::string record_id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  int w = 0;  // gold-consistent bare parses out of k
  int k = 0;
  SettingId chosen_setting = SettingId::Bare;
  SettingId rejected_setting = SettingId::Bare;
};

enum class Variant {
  Improved,   // preference loss plus adaptive dual-penalty term
  AdvZero,    // same, with both constraint margins at zero
  PlainDpo,   // preference loss only
  FixedMu,    // penalty term with multipliers frozen at their init
  Sft,        // maximize chosen-completion likelihood
  LabelOnly,  // maximize likelihood of the answer token alone
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct Hyperparams {
  double beta = 0.1;
  double a1 = 0.1;  // required relative gain on the chosen completion
  double a2 = 0.1;  // required relative drop on the rejected completion
  double lr = 1e-4;
  int warmup_steps = 200;
  double decay = 0.999;
  int batch_size = 20;
  int num_generations = 10;  // k
  int max_new_tokens = 512;
  int n_min = 1;
  int n_base = 10;
  double mu_init = 1.0;
  double lr_mu = 0.01;

  void validate() const;
};

}  // namespace veritune
