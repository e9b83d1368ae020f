#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "groundgen/tokens.hpp"

namespace groundgen {

// Lowercases and splits on whitespace; every ASCII punctuation character
// becomes a token of its own. "Hello, world" -> hello , world
std::vector<std::string> split_words(const std::string& text);

// Word-level token <-> id bijection. Ids 0..4 are always
// <bos> <eos> <pad> <sep> <unk>.
class Vocab {
 public:
  // Reserved tokens only.
  Vocab();

  // Reserved tokens followed by `tokens` in order. Duplicates or reserved
  // names in `tokens` are a VocabularyError.
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  // Reserved tokens, then tokens by descending count, ties lexicographic.
  // max_size (0 = unlimited) bounds the total size including reserved ids.
  static Vocab from_counts(const std::map<std::string, std::size_t>& counts, std::size_t max_size = 0);

  // One token per line, id = line index.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  // Unknown tokens map to kUnk.
  TokenId id(const std::string& token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void append(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

std::vector<TokenId> tokenize(const Vocab& vocab, const std::string& text);
// Space-joined tokens; reserved ids are dropped.
std::string detokenize(const Vocab& vocab, std::span<const TokenId> ids);

}  // namespace groundgen
