#include "groundgen/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "groundgen/errors.hpp"

namespace groundgen {

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

namespace {

template <typename T>
struct Word;
template <>
struct Word<float> {
  using type = std::uint32_t;
};
template <>
struct Word<double> {
  using type = std::uint64_t;
};

template <typename T>
void append_le(std::string& out, std::span<const T> values) {
  using W = typename Word<T>::type;
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(W));
  char* p = out.data() + start;
  for (T v : values) {
    W w;
    std::memcpy(&w, &v, sizeof w);
    for (std::size_t b = 0; b < sizeof w; ++b) *p++ = static_cast<char>((w >> (8 * b)) & 0xff);
  }
}

template <typename T>
void decode_le(const char* p, std::span<T> values) {
  using W = typename Word<T>::type;
  for (T& v : values) {
    W w = 0;
    for (std::size_t b = 0; b < sizeof w; ++b) w |= static_cast<W>(static_cast<unsigned char>(*p++)) << (8 * b);
    std::memcpy(&v, &w, sizeof w);
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape(const std::string& text, const std::string& name) {
  Shape s;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto next = text.find('x', pos);
    const std::string part = text.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    const auto v = parse_int(name, part);
    if (v <= 0) throw ConfigError("checkpoint parameter " + name + " has a non-positive dimension");
    s.push_back(static_cast<std::size_t>(v));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return s;
}

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

template <typename T>
void write_blob(const std::filesystem::path& path, std::span<const Tensor<T>* const> tensors) {
  std::string data;
  for (const Tensor<T>* t : tensors) append_le<T>(data, t->data());
  write_file_atomic(path, data);
}

template <typename T>
void read_blob(const std::filesystem::path& path, std::span<Tensor<T>* const> tensors) {
  const std::string data = read_file(path);
  std::size_t expected = 0;
  for (const Tensor<T>* t : tensors) expected += t->size() * sizeof(T);
  if (data.size() != expected) {
    throw IoError(path.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                  std::to_string(data.size()));
  }
  const char* p = data.data();
  for (Tensor<T>* t : tensors) {
    decode_le<T>(p, t->data());
    p += t->size() * sizeof(T);
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const GroundedModel<T>& model, const Vocab* vocab,
                     const KeyValueConfig& extra) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  KeyValueConfig manifest;
  manifest.set("format_version", std::to_string(kCheckpointFormatVersion));
  manifest.set("dtype", dtype_name<T>());
  const KeyValueConfig model_kv = model.config().to_kv();
  for (const auto& [k, v] : model_kv.values()) manifest.set("model." + k, v);
  for (const auto& [k, v] : extra.values()) manifest.set("extra." + k, v);
  std::string blob;
  std::size_t offset = 0;
  std::vector<std::string> order;
  for (const auto& e : model.parameters().entries()) {
    order.push_back("param." + e.name + " = " + shape_token(e.tensor.shape()) + "@" + std::to_string(offset));
    append_le<T>(blob, e.tensor.data());
    offset += e.tensor.size() * sizeof(T);
  }
  manifest.set("param_count", std::to_string(order.size()));
  if (vocab) manifest.set("vocab", "vocab.txt");

  // Parameter lines keep store order (the map in KeyValueConfig would sort them).
  std::string text = manifest.to_string();
  for (const auto& line : order) text += line + "\n";

  write_file_atomic(dir / "params.bin", blob);
  if (vocab) {
    std::string v;
    for (const auto& t : vocab->tokens()) v += t + "\n";
    write_file_atomic(dir / "vocab.txt", v);
  }
  write_file_atomic(dir / "manifest.txt", text);
}

CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.txt";
  if (!std::filesystem::exists(path)) throw IoError("no checkpoint manifest at " + path.string());
  const std::string text = read_file(path);
  const KeyValueConfig kv = KeyValueConfig::parse(text, path.string());
  const auto version = kv.get_int("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw ConfigError(path.string() + ": unsupported format_version " + std::to_string(version));
  }
  CheckpointManifest m;
  KeyValueConfig model_kv;
  for (const auto& [k, v] : kv.values()) {
    if (k.rfind("model.", 0) == 0) model_kv.set(k.substr(6), v);
    if (k.rfind("extra.", 0) == 0) m.extra.set(k.substr(6), v);
  }
  m.config = ModelConfig::from_kv(model_kv);
  m.config.validate();
  m.has_vocab = kv.contains("vocab");

  // Re-scan for parameter lines to keep their file order.
  std::istringstream lines(text);
  std::string line;
  std::size_t expected_offset = 0;
  const std::size_t width = kv.get_string("dtype", "f32") == "f64" ? 8 : 4;
  while (std::getline(lines, line)) {
    if (line.rfind("param.", 0) != 0) continue;
    const auto eq = line.find(" = ");
    const auto at = line.find('@', eq);
    if (eq == std::string::npos || at == std::string::npos) throw ConfigError(path.string() + ": bad line '" + line + "'");
    const std::string name = line.substr(6, eq - 6);
    Shape shape = parse_shape(line.substr(eq + 3, at - eq - 3), name);
    const auto offset = static_cast<std::size_t>(parse_int(name, line.substr(at + 1)));
    if (offset != expected_offset) throw ConfigError(path.string() + ": parameter " + name + " has offset " +
                                                     std::to_string(offset) + ", expected " +
                                                     std::to_string(expected_offset));
    expected_offset += shape_size(shape) * width;
    m.params.emplace_back(name, std::move(shape));
  }
  if (static_cast<std::int64_t>(m.params.size()) != kv.get_int("param_count", -1)) {
    throw ConfigError(path.string() + ": param_count does not match the parameter lines");
  }
  return m;
}

Vocab load_checkpoint_vocab(const std::filesystem::path& dir) { return Vocab::load(dir / "vocab.txt"); }

namespace {

template <typename S, typename T>
void load_values(const std::string& blob, const CheckpointManifest& m, GroundedModel<T>& model,
                 std::vector<bool>& seen) {
  auto& store = model.parameters();
  std::size_t total = 0;
  for (const auto& [name, shape] : m.params) total += shape_size(shape);
  if (blob.size() != total * sizeof(S)) {
    throw IoError("params.bin holds " + std::to_string(blob.size()) + " bytes, manifest describes " +
                  std::to_string(total * sizeof(S)));
  }
  const char* p = blob.data();
  for (const auto& [name, shape] : m.params) {
    const auto id = store.find(name);
    if (!id) throw ConfigError("checkpoint parameter '" + name + "' does not exist in a " + to_string(model.mode()) +
                               " model");
    Tensor<T>& t = store[*id];
    if (t.shape() != shape) {
      throw ConfigError("checkpoint parameter '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                        shape_string(t.shape()));
    }
    std::vector<S> tmp(t.size());
    decode_le<S>(p, std::span<S>(tmp));
    p += t.size() * sizeof(S);
    auto dst = t.data();
    for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] = static_cast<T>(tmp[i]);
    seen[*id] = true;
  }
}

}  // namespace

template <typename T>
void load_parameters(const std::filesystem::path& dir, GroundedModel<T>& model) {
  const CheckpointManifest m = read_checkpoint_manifest(dir);
  const KeyValueConfig kv = KeyValueConfig::load(dir / "manifest.txt");
  const std::string blob = read_file(dir / "params.bin");
  std::vector<bool> seen(model.parameters().size(), false);
  if (kv.get_string("dtype", "f32") == "f64") {
    load_values<double>(blob, m, model, seen);
  } else {
    load_values<float>(blob, m, model, seen);
  }
  const bool fill_doc = model.mode() == GroundingMode::DoHA && m.config.grounding_mode != GroundingMode::DoHA;
  const auto& store = model.parameters();
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i]) continue;
    const std::string& name = store.name(i);
    const bool doc_param = name.find(".cross_doc.") != std::string::npos ||
                           name.find(".cross_doc_norm.") != std::string::npos;
    if (!(fill_doc && doc_param)) throw ConfigError("checkpoint lacks parameter '" + name + "'");
  }
  if (fill_doc) {
    for (const auto& layer : model.decoder_layers_doha()) init_doha_from_cxt(model.parameters(), layer);
  }
}

template <typename T>
GroundedModel<T> load_checkpoint(const std::filesystem::path& dir) {
  GroundedModel<T> model(read_checkpoint_manifest(dir).config);
  load_parameters(dir, model);
  return model;
}

template <typename T>
GroundedModel<T> load_checkpoint(const std::filesystem::path& dir, GroundingMode mode) {
  ModelConfig config = read_checkpoint_manifest(dir).config;
  config.grounding_mode = mode;
  GroundedModel<T> model(config);
  load_parameters(dir, model);
  return model;
}

#define GROUNDGEN_INSTANTIATE_CHECKPOINT(T)                                                                        \
  template void save_checkpoint<T>(const std::filesystem::path&, const GroundedModel<T>&, const Vocab*,            \
                                   const KeyValueConfig&);                                                         \
  template void load_parameters<T>(const std::filesystem::path&, GroundedModel<T>&);                               \
  template GroundedModel<T> load_checkpoint<T>(const std::filesystem::path&);                                      \
  template GroundedModel<T> load_checkpoint<T>(const std::filesystem::path&, GroundingMode);                       \
  template void write_blob<T>(const std::filesystem::path&, std::span<const Tensor<T>* const>);                    \
  template void read_blob<T>(const std::filesystem::path&, std::span<Tensor<T>* const>);

GROUNDGEN_INSTANTIATE_CHECKPOINT(float)
GROUNDGEN_INSTANTIATE_CHECKPOINT(double)

}  // namespace groundgen
