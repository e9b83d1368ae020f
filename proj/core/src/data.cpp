#include "groundgen/data.hpp"

#include <fstream>
#include <map>
#include <nlohmann/json.hpp>

#include "groundgen/errors.hpp"

namespace groundgen {

void validate_sample(const GroundedSample& sample) {
  if (sample.context.empty()) throw InputError("sample has no context turns");
  if (sample.target.empty()) throw InputError("sample has an empty target");
}

namespace {

std::vector<std::string> string_array(const nlohmann::json& obj, const char* field, std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end()) throw DataError(line, std::string("missing field '") + field + "'");
  if (!it->is_array()) throw DataError(line, std::string("field '") + field + "' must be an array of strings");
  std::vector<std::string> out;
  for (const auto& v : *it) {
    if (!v.is_string()) throw DataError(line, std::string("field '") + field + "' must be an array of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace

std::vector<GroundedSample> read_jsonl(std::istream& in) {
  std::vector<GroundedSample> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(line, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw DataError(line, "expected a JSON object");
    GroundedSample s;
    s.documents = string_array(obj, "documents", line);
    s.context = string_array(obj, "context", line);
    auto t = obj.find("target");
    if (t == obj.end()) throw DataError(line, "missing field 'target'");
    if (!t->is_string()) throw DataError(line, "field 'target' must be a string");
    s.target = t->get<std::string>();
    if (s.context.empty()) throw DataError(line, "field 'context' must hold at least one turn");
    if (s.target.empty()) throw DataError(line, "field 'target' must be non-empty");
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<GroundedSample> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_jsonl(in);
}

void write_jsonl(std::ostream& out, std::span<const GroundedSample> samples) {
  for (const auto& s : samples) {
    nlohmann::ordered_json obj;
    obj["documents"] = s.documents;
    obj["context"] = s.context;
    obj["target"] = s.target;
    out << obj.dump() << '\n';
  }
}

void save_jsonl(const std::filesystem::path& path, std::span<const GroundedSample> samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_jsonl(out, samples);
  if (!out) throw IoError("failed writing " + path.string());
}

Vocab build_vocab(std::span<const GroundedSample> corpus, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  auto count = [&](const std::string& text) {
    for (auto& w : split_words(text)) ++counts[w];
  };
  for (const auto& s : corpus) {
    for (const auto& d : s.documents) count(d);
    for (const auto& c : s.context) count(c);
    count(s.target);
  }
  return Vocab::from_counts(counts, max_size);
}

const std::vector<LengthPreset>& length_presets() {
  static const std::vector<LengthPreset> presets{
      {"wikipedia_update", 1024, 256, 128},
      {"cmu_dog", 512, 128, 128},
      {"wizard", 900, 256, 40},
  };
  return presets;
}

void apply_length_preset(ModelConfig& config, const std::string& name) {
  for (const auto& p : length_presets()) {
    if (p.name == name) {
      config.max_source_len = p.max_source_len;
      config.max_context_len = p.max_context_len;
      config.max_target_len = p.max_target_len;
      return;
    }
  }
  throw ConfigError("unknown length preset '" + name + "' (expected wikipedia_update, cmu_dog or wizard)");
}

namespace {

std::vector<TokenId> join_with_sep(const std::vector<std::vector<TokenId>>& parts) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out.push_back(kSep);
    out.insert(out.end(), parts[i].begin(), parts[i].end());
  }
  return out;
}

}  // namespace

PreparedSample prepare(const GroundedSample& sample, const Vocab& vocab, const ModelConfig& config) {
  validate_sample(sample);
  PreparedSample p;

  std::vector<std::vector<TokenId>> turns;
  for (const auto& t : sample.context) turns.push_back(tokenize(vocab, t));
  std::size_t first = 0;
  auto joined_size = [&](std::size_t from) {
    std::size_t n = turns.size() - from - 1;
    for (std::size_t i = from; i < turns.size(); ++i) n += turns[i].size();
    return n;
  };
  while (first + 1 < turns.size() && joined_size(first) > config.max_context_len) ++first;
  p.context = join_with_sep({turns.begin() + static_cast<std::ptrdiff_t>(first), turns.end()});
  if (p.context.size() > config.max_context_len) {
    p.context.erase(p.context.begin(), p.context.end() - static_cast<std::ptrdiff_t>(config.max_context_len));
  }

  std::vector<std::vector<TokenId>> passages;
  for (const auto& d : sample.documents) passages.push_back(tokenize(vocab, d));
  p.document = join_with_sep(passages);
  // A non-empty document keeps at least one token when the source cap allows.
  if (!p.document.empty() && p.context.size() >= config.max_source_len && config.max_source_len >= 2) {
    p.context.erase(p.context.begin(), p.context.end() - static_cast<std::ptrdiff_t>(config.max_source_len - 1));
  }
  const std::size_t room = config.max_source_len > p.context.size() ? config.max_source_len - p.context.size() : 0;
  if (p.document.size() > room) p.document.resize(room);

  p.target = tokenize(vocab, sample.target);
  if (p.target.size() > config.max_target_len - 1) p.target.resize(config.max_target_len - 1);

  if (p.context.empty()) throw InputError("context is empty after tokenization and truncation");
  if (p.target.empty()) throw InputError("target is empty after tokenization and truncation");
  return p;
}

std::vector<PreparedSample> prepare_all(std::span<const GroundedSample> corpus, const Vocab& vocab,
                                        const ModelConfig& config) {
  std::vector<PreparedSample> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    try {
      out.push_back(prepare(corpus[i], vocab, config));
    } catch (const InputError& e) {
      throw DataError(i + 1, e.what());
    }
  }
  return out;
}

std::vector<GroundedSample> without_documents(std::span<const GroundedSample> corpus) {
  std::vector<GroundedSample> out(corpus.begin(), corpus.end());
  for (auto& s : out) s.documents.clear();
  return out;
}

}  // namespace groundgen
