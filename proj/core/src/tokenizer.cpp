#include "veritune/tokenizer.hpp"

namespace veritune {

CharTokenizer::CharTokenizer(std::string alphabet) : alphabet_(std::move(alphabet)) {
  if (alphabet_.empty()) throw ConfigError("tokenizer alphabet must be non-empty");
  if (alphabet_.size() + 2 > 128) throw ConfigError("tokenizer vocabulary exceeds 128");
  to_id_.fill(-1);
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    const auto c = static_cast<unsigned char>(alphabet_[i]);
    if (to_id_[c] != -1) throw ConfigError("tokenizer alphabet has a duplicate character");
    to_id_[c] = static_cast<int>(i) + 2;
  }
}

CharTokenizer CharTokenizer::standard() {
  std::string a;
  for (char c = 'a'; c <= 'z'; ++c) a += c;
  for (char c = 'A'; c <= 'Z'; ++c) a += c;
  for (char c = '0'; c <= '9'; ++c) a += c;
  a += " \n-:,.?!'\"();%/_[]";
  return CharTokenizer(a);
}

std::vector<int> CharTokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) {
    const int id = to_id_[static_cast<unsigned char>(c)];
    if (id < 0) {
      throw DataError("character out of vocabulary: byte " +
                      std::to_string(static_cast<int>(static_cast<unsigned char>(c))));
    }
    out.push_back(id);
  }
  return out;
}

std::string CharTokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == bos_id() || id == eos_id()) continue;
    if (id < 2 || id >= vocab_size()) throw DataError("token id out of range: " + std::to_string(id));
    out += alphabet_[static_cast<std::size_t>(id) - 2];
  }
  return out;
}

std::vector<int> CharTokenizer::encode_prompt(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size() + 1);
  out.push_back(bos_id());
  for (char c : text) {
    const int id = to_id_[static_cast<unsigned char>(c)];
    if (id < 0) {
      throw DataError("character out of vocabulary: byte " +
                      std::to_string(static_cast<int>(static_cast<unsigned char>(c))));
    }
    out.push_back(id);
  }
  return out;
}

std::vector<int> CharTokenizer::encode_completion(std::string_view text) const {
  auto out = encode(text);
  out.push_back(eos_id());
  return out;
}

}  // namespace veritune
