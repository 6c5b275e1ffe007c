#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace blockdiff {

using Token = int;
using TokenSeq = std::vector<Token>;

/// Closed symbol-level vocabulary: the numbers 0..max_number, the symbols
/// `a b c d = + , ;`, then `<pad> <eos> <bos>` and finally `<mask>`, which is
/// always the last id.
class Vocabulary {
 public:
  explicit Vocabulary(int max_number = 20);
  /// The vocabulary whose size() is `vocab_size`.
  static Vocabulary with_size(int vocab_size);

  int size() const { return static_cast<int>(names_.size()); }
  int max_number() const { return max_number_; }

  Token number(int value) const;
  Token symbol(std::string_view name) const;
  std::optional<int> number_value(Token t) const;

  Token pad() const { return pad_; }
  Token eos() const { return eos_; }
  Token bos() const { return bos_; }
  Token mask() const { return mask_; }

  bool valid(Token t) const { return t >= 0 && t < size(); }

  const std::string& name(Token t) const;
  std::optional<Token> lookup(std::string_view name) const;

  /// Space-separated token names.
  std::string detokenize(const TokenSeq& seq) const;
  /// Inverse of detokenize; throws on unknown names.
  TokenSeq tokenize(std::string_view text) const;

 private:
  int max_number_;
  std::vector<std::string> names_;
  Token pad_, eos_, bos_, mask_;
};

}  // namespace blockdiff
