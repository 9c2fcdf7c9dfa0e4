#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "veritune/common.hpp"

namespace veritune {

// Byte-level tokenizer over a fixed single-byte alphabet. Ids 0 and 1 are
// reserved for BOS and EOS; alphabet characters map to 2..n+1 in the order
// given. Vocabulary (alphabet + specials) is capped at 128.
class CharTokenizer {
 public:
  explicit CharTokenizer(std::string alphabet);

  // Alphabet covering every character the prompt templates, the synthetic
  // corpus, and the mock generator can emit.
  static CharTokenizer standard();

  int vocab_size() const { return static_cast<int>(alphabet_.size()) + 2; }
  int bos_id() const { return 0; }
  int eos_id() const { return 1; }
  const std::string& alphabet() const { return alphabet_; }

  bool in_vocab(char c) const { return to_id_[static_cast<unsigned char>(c)] >= 0; }

  // Throws DataError on any character outside the alphabet.
  std::vector<int> encode(std::string_view text) const;

  // Inverse of encode; BOS/EOS ids are skipped, so decode(encode(s)) == s.
  std::string decode(const std::vector<int>& ids) const;

  // encode with BOS prepended; the form every model prompt uses.
  std::vector<int> encode_prompt(std::string_view text) const;
  // encode with EOS appended; the form every training target uses.
  std::vector<int> encode_completion(std::string_view text) const;

 private:
  std::string alphabet_;
  std::array<int, 256> to_id_{};
};

}  // namespace veritune
