#include "veritune/types.hpp"

namespace veritune {

std::string to_string(Label l) { return l == Label::Supports ? "supports" : "refutes"; }

Label label_from_string(const std::string& s) {
  if (s == "supports") return Label::Supports;
  if (s == "refutes") return Label::Refutes;
  throw DataError("unknown label: '" + s + "'");
}

std::string answer_token(Label l) { return l == Label::Refutes ? "Yes" : "No"; }

Label label_from_answer(const std::string& token) {
  if (token == "Yes") return Label::Refutes;
  if (token == "No") return Label::Supports;
  throw DataError("unknown answer token: '" + token + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  throw DataError("invalid split value");
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "validation") return Split::Validation;
  if (s == "test") return Split::Test;
  throw DataError("unknown split: '" + s + "'");
}

SettingId setting_from_int(int v) {
  if (v < 1 || v > 4) throw DataError("setting id out of range: " + std::to_string(v));
  return static_cast<SettingId>(v);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Improved: return "improved";
    case Variant::AdvZero: return "adv-zero";
    case Variant::PlainDpo: return "plain-dpo";
    case Variant::FixedMu: return "fixed-mu";
    case Variant::Sft: return "sft";
    case Variant::LabelOnly: return "label-only";
  }
  throw ConfigError("invalid variant value");
}

Variant variant_from_string(const std::string& s) {
  if (s == "improved") return Variant::Improved;
  if (s == "adv-zero") return Variant::AdvZero;
  if (s == "plain-dpo") return Variant::PlainDpo;
  if (s == "fixed-mu") return Variant::FixedMu;
  if (s == "sft") return Variant::Sft;
  if (s == "label-only") return Variant::LabelOnly;
  throw ConfigError("unknown variant: '" + s + "'");
}

void Hyperparams::validate() const {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  if (!(a1 >= 0.0)) throw ConfigError("a1 must be nonnegative");
  if (!(a2 >= 0.0 && a2 < 1.0)) throw ConfigError("a2 must lie in [0, 1)");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be nonnegative");
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("decay must lie in (0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (num_generations < 1) throw ConfigError("num_generations must be at least 1");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be at least 1");
  if (n_min < 1) throw ConfigError("n_min must be at least 1");
  if (n_base < 1) throw ConfigError("n_base must be at least 1");
  if (!(mu_init >= 0.0)) throw ConfigError("mu_init must be nonnegative");
  if (!(lr_mu >= 0.0)) throw ConfigError("lr_mu must be nonnegative");
}

}  // namespace veritune
