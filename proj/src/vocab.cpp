#include "blockdiff/vocab.hpp"

#include <sstream>
#include <stdexcept>

namespace blockdiff {

Vocabulary::Vocabulary(int max_number) : max_number_(max_number) {
  if (max_number < 1) throw std::invalid_argument("Vocabulary: max_number must be >= 1");
  for (int v = 0; v <= max_number; ++v) names_.push_back(std::to_string(v));
  for (const char* s : {"a", "b", "c", "d", "=", "+", ",", ";"}) names_.emplace_back(s);
  pad_ = size();
  names_.emplace_back("<pad>");
  eos_ = size();
  names_.emplace_back("<eos>");
  bos_ = size();
  names_.emplace_back("<bos>");
  mask_ = size();
  names_.emplace_back("<mask>");
}

Vocabulary Vocabulary::with_size(int vocab_size) {
  const int extra = Vocabulary(1).size() - 2;
  if (vocab_size - extra < 2) throw std::invalid_argument("Vocabulary: size " + std::to_string(vocab_size) + " too small");
  return Vocabulary(vocab_size - extra - 1);
}

Token Vocabulary::number(int value) const {
  if (value < 0 || value > max_number_) {
    throw std::out_of_range("Vocabulary: number " + std::to_string(value) +
                            " not representable (max " + std::to_string(max_number_) + ")");
  }
  return value;
}

Token Vocabulary::symbol(std::string_view name) const {
  auto t = lookup(name);
  if (!t) throw std::invalid_argument("Vocabulary: unknown symbol '" + std::string(name) + "'");
  return *t;
}

std::optional<int> Vocabulary::number_value(Token t) const {
  if (t >= 0 && t <= max_number_) return t;
  return std::nullopt;
}

const std::string& Vocabulary::name(Token t) const {
  if (!valid(t)) throw std::out_of_range("Vocabulary: token id " + std::to_string(t));
  return names_[static_cast<std::size_t>(t)];
}

std::optional<Token> Vocabulary::lookup(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return static_cast<Token>(i);
  }
  return std::nullopt;
}

std::string Vocabulary::detokenize(const TokenSeq& seq) const {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += name(seq[i]);
  }
  return out;
}

TokenSeq Vocabulary::tokenize(std::string_view text) const {
  std::istringstream is{std::string(text)};
  TokenSeq out;
  std::string word;
  while (is >> word) out.push_back(symbol(word));
  return out;
}

}  // namespace blockdiff
