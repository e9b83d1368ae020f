#include "groundgen/vocab.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>

#include "groundgen/errors.hpp"

namespace groundgen {

namespace {

const std::array<std::string, kNumReserved> kReservedNames{"<bos>", "<eos>", "<pad>", "<sep>", "<unk>"};

bool is_reserved_name(const std::string& token) {
  return std::find(kReservedNames.begin(), kReservedNames.end(), token) != kReservedNames.end();
}

}  // namespace

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      flush();
    } else if (std::ispunct(ch)) {
      flush();
      out.emplace_back(1, static_cast<char>(ch));
    } else {
      current.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  return out;
}

Vocab::Vocab() {
  for (const auto& name : kReservedNames) append(name);
}

void Vocab::append(const std::string& token) {
  if (token.empty()) throw VocabularyError("empty token");
  if (!index_.emplace(token, static_cast<TokenId>(tokens_.size())).second) {
    throw VocabularyError("duplicate token '" + token + "'");
  }
  tokens_.push_back(token);
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (const auto& t : tokens) {
    if (is_reserved_name(t)) throw VocabularyError("reserved token '" + t + "' cannot be re-added");
    v.append(t);
  }
  return v;
}

Vocab Vocab::from_counts(const std::map<std::string, std::size_t>& counts, std::size_t max_size) {
  std::vector<std::pair<std::string, std::size_t>> items;
  for (const auto& [token, n] : counts) {
    if (!is_reserved_name(token)) items.emplace_back(token, n);
  }
  // std::map iteration is already lexicographic; stable sort keeps it for ties.
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [token, n] : items) {
    if (max_size != 0 && v.size() >= max_size) break;
    v.append(token);
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < kReservedNames.size() ||
      !std::equal(kReservedNames.begin(), kReservedNames.end(), lines.begin())) {
    throw VocabularyError(path.string() + ": must start with the reserved tokens <bos> <eos> <pad> <sep> <unk>");
  }
  return from_tokens(std::vector<std::string>(lines.begin() + kNumReserved, lines.end()));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw IoError("failed writing vocabulary file " + path.string());
}

TokenId Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> tokenize(const Vocab& vocab, const std::string& text) {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(const Vocab& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    if (id >= 0 && id < kNumReserved) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

}  // namespace groundgen
