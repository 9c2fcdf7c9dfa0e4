#include "veritune/prompting.hpp"

#include <cctype>

namespace veritune {
namespace {

constexpr std::string_view kQuestionLine =
    "QUESTION: Does the Evidence contradict the CLAIM? "
    "Answer \"Yes\" or \"No\", then explain your reasoning.";

std::string render(const ClaimRecord& record, bool with_tips,
                   const std::optional<Label>& hint) {
  std::string out;
  out.reserve(256);
  out += "CLAIM: ";
  out += record.claim;
  out += "\nEVIDENCE:\n";
  for (const auto& ev : record.evidence) {
    out += "- ";
    out += ev;
    out += '\n';
  }
  if (with_tips) {
    out += "TIPS: ";
    out += *record.tips;
    out += '\n';
  }
  out += kQuestionLine;
  out += '\n';
  if (hint) {
    out += "The correct answer is: ";
    out += answer_token(*hint);
    out += ".\n";
  }
  out += "ANSWER:\n";
  return out;
}

}  // namespace

std::string build_prompt(const ClaimRecord& record, SettingId setting) {
  switch (setting) {
    case SettingId::Bare:
      return render(record, false, std::nullopt);
    case SettingId::GivenYes:
      return render(record, false, Label::Refutes);
    case SettingId::GivenNo:
      return render(record, false, Label::Supports);
    case SettingId::GivenTips:
      if (!record.tips) {
        throw DataError("record '" + record.id + "' has no tips; GivenTips prompt unavailable");
      }
      return render(record, true, Label::Refutes);
  }
  throw DataError("invalid setting");
}

std::string build_training_prompt(const ClaimRecord& record, bool include_tips) {
  return render(record, include_tips && record.tips.has_value(), std::nullopt);
}

std::optional<Label> parse_label(std::string_view completion) {
  constexpr std::size_t kWindow = 16;
  const std::size_t n = completion.size() < kWindow ? completion.size() : kWindow;
  std::size_t i = 0;
  while (i < n && !std::isalpha(static_cast<unsigned char>(completion[i]))) {
    // Digits are neither skippable filler nor part of an answer word.
    if (std::isdigit(static_cast<unsigned char>(completion[i]))) return std::nullopt;
    ++i;
  }
  std::size_t j = i;
  while (j < n && std::isalpha(static_cast<unsigned char>(completion[j]))) ++j;
  // The run must end inside the text, not be cut off by the window.
  if (j == n && j < completion.size() &&
      std::isalpha(static_cast<unsigned char>(completion[j]))) {
    return std::nullopt;
  }
  const std::string_view run = completion.substr(i, j - i);
  auto eq_icase = [](std::string_view a, std::string_view b) {
    if (a.size() != b.size()) return false;
    for (std::size_t t = 0; t < a.size(); ++t) {
      if (std::tolower(static_cast<unsigned char>(a[t])) !=
          std::tolower(static_cast<unsigned char>(b[t])))
        return false;
    }
    return true;
  };
  if (eq_icase(run, "yes")) return Label::Refutes;
  if (eq_icase(run, "no")) return Label::Supports;
  return std::nullopt;
}

}  // namespace veritune
