#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "groundgen/checkpoint.hpp"
#include "groundgen/data.hpp"
#include "groundgen/errors.hpp"
#include "groundgen/synthetic.hpp"
#include "groundgen/version.hpp"

namespace groundgen::cli {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
      dynamic_cast<const DataError*>(&e) || dynamic_cast<const VocabularyError*>(&e) ||
      dynamic_cast<const InputError*>(&e)) {
    return kExitUsage;
  }
  return kExitFailure;
}

int run_guarded(const std::function<void()>& body, std::ostream& err) {
  try {
    body();
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

namespace {

const std::vector<std::string>& decode_keys() {
  static const std::vector<std::string> k{"strategy", "beam_size", "length_penalty", "min_length",
                                          "decode_max_target_len"};
  return k;
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw UsageError(what + " not found: " + path.string());
}

void require_out(const CommonOptions& common) {
  if (common.out.empty()) throw UsageError("--out is required");
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Describes one command invocation; written atomically when the command ends.
class RunManifest {
 public:
  explicit RunManifest(std::string command) : command_(std::move(command)), started_(utc_now()) {}

  void set_config(const KeyValueConfig& kv) { config_ = kv; }
  void set_seed(std::uint64_t seed) { seed_ = seed; }
  void add_artifact(const fs::path& path) { artifacts_.push_back(path.string()); }

  void write(const fs::path& path) const {
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["version"] = kVersion;
    j["seed"] = seed_;
    j["config"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config_.values()) j["config"][k] = v;
    j["started_at"] = started_;
    j["finished_at"] = utc_now();
    j["artifacts"] = nlohmann::ordered_json::array();
    for (const auto& a : artifacts_) {
      if (!fs::exists(a)) throw IoError("manifest artifact missing: " + a);
      j["artifacts"].push_back(a);
    }
    write_file_atomic(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::string started_;
  KeyValueConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<std::string> artifacts_;
};

template <typename Fn>
decltype(auto) with_precision(Precision p, Fn&& fn) {
  if (p == Precision::F64) return fn(double{});
  return fn(float{});
}

KeyValueConfig snapshot(const ResolvedConfig& rc) {
  KeyValueConfig kv;
  const std::pair<const char*, KeyValueConfig> sections[] = {
      {"model.", rc.model.to_kv()}, {"train.", rc.train.to_kv()}, {"decode.", rc.decode.to_kv()}};
  for (const auto& [prefix, section] : sections) {
    for (const auto& [k, v] : section.values()) kv.set(prefix + k, v);
  }
  return kv;
}

struct Corpora {
  std::vector<GroundedSample> train, valid, test;
};

Corpora load_corpora(const fs::path& dir, bool need_test) {
  Corpora c;
  for (const char* name : {"train.jsonl", "valid.jsonl"}) require_file(dir / name, "corpus file");
  c.train = load_jsonl(dir / "train.jsonl");
  c.valid = load_jsonl(dir / "valid.jsonl");
  if (need_test) {
    require_file(dir / "test.jsonl", "corpus file");
    c.test = load_jsonl(dir / "test.jsonl");
  }
  if (c.train.empty() || c.valid.empty()) throw InputError("train and valid corpora must be non-empty");
  return c;
}

template <typename T>
FitResult train_impl(const ModelConfig& mc, const TrainConfig& tc, const Corpora& data, const Vocab& vocab,
                     const fs::path& out, bool resume, std::ostream& log) {
  GroundedModel<T> model(mc);
  const auto train = prepare_all(data.train, vocab, mc);
  const auto valid = prepare_all(data.valid, vocab, mc);
  FitOptions fo;
  fo.checkpoint_dir = out;
  fo.resume = resume;
  fo.progress = &log;
  return fit(model, std::span<const PreparedSample>(train), std::span<const PreparedSample>(valid), vocab, tc, fo);
}

template <typename T>
std::vector<std::string> generate_impl(const fs::path& checkpoint, const std::vector<GroundedSample>& samples,
                                       const DecodeConfig& dc) {
  const GroundedModel<T> model = load_checkpoint<T>(checkpoint);
  const Vocab vocab = load_checkpoint_vocab(checkpoint);
  if (vocab.size() != model.config().vocab_size) throw ConfigError("checkpoint vocabulary size mismatch");
  const auto prepared = prepare_all(samples, vocab, model.config());
  const auto ids = generate(model, std::span<const PreparedSample>(prepared), dc);
  std::vector<std::string> out;
  for (const auto& seq : ids) out.push_back(detokenize(vocab, seq));
  return out;
}

std::vector<std::string> run_generation(const fs::path& checkpoint, const std::vector<GroundedSample>& samples,
                                        const DecodeConfig& dc) {
  const ModelConfig mc = read_checkpoint_manifest(checkpoint).config;
  return with_precision(mc.precision, [&](auto tag) {
    return generate_impl<decltype(tag)>(checkpoint, samples, dc);
  });
}

void write_outputs(const fs::path& path, const std::vector<GroundedSample>& inputs,
                   const std::vector<std::string>& outputs) {
  std::string text;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    nlohmann::ordered_json j;
    j["documents"] = inputs[i].documents;
    j["context"] = inputs[i].context;
    j["target"] = outputs[i];
    text += j.dump() + "\n";
  }
  write_file_atomic(path, text);
}

// Only the "target" field is required; generated targets may be empty.
std::vector<std::string> read_targets(const fs::path& path) {
  require_file(path, "outputs file");
  std::ifstream in(path, std::ios::binary);
  std::vector<std::string> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(n, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("target") || !j["target"].is_string()) {
      throw DataError(n, "missing string field 'target'");
    }
    out.push_back(j["target"].get<std::string>());
  }
  return out;
}

std::vector<std::string> targets_of(const std::vector<GroundedSample>& samples) {
  std::vector<std::string> out;
  for (const auto& s : samples) out.push_back(s.target);
  return out;
}

std::string lr_dir_name(const std::string& lr) {
  std::string s = "lr_" + lr;
  for (char& c : s) {
    if (c == '/' || c == ' ') c = '_';
  }
  return s;
}

}  // namespace

KeyValueConfig load_common_config(const CommonOptions& common, const std::vector<fs::path>& extra) {
  KeyValueConfig kv;
  for (const auto& p : extra) {
    require_file(p, "config file");
    kv.merge(KeyValueConfig::load(p));
  }
  for (const auto& p : common.configs) {
    require_file(p, "config file");
    kv.merge(KeyValueConfig::load(p));
  }
  for (const auto& s : common.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
    std::string key = s.substr(0, eq), value = s.substr(eq + 1);
    auto trim = [](std::string& x) {
      x.erase(0, x.find_first_not_of(" \t"));
      x.erase(x.find_last_not_of(" \t") + 1);
    };
    trim(key);
    trim(value);
    kv.set(key, value);
  }
  return kv;
}

ResolvedConfig resolve_config(const KeyValueConfig& kv) {
  std::vector<std::string> known = ModelConfig::keys();
  for (const auto& k : TrainConfig::keys()) known.push_back(k);
  for (const auto& k : decode_keys()) known.push_back(k);
  known.push_back("length_preset");
  kv.require_known(known, "configuration");

  ResolvedConfig rc;
  rc.raw = kv;
  ModelConfig defaults;
  if (kv.contains("length_preset")) apply_length_preset(defaults, kv.get_string("length_preset", ""));
  rc.model = ModelConfig::from_kv(kv, defaults);
  rc.train = TrainConfig::from_kv(kv);
  KeyValueConfig dkv;
  for (const auto& k : decode_keys()) {
    if (kv.contains(k)) dkv.set(k == "decode_max_target_len" ? "max_target_len" : k, kv.get_string(k, ""));
  }
  DecodeConfig dd;
  dd.max_target_len = rc.model.max_target_len;
  rc.decode = DecodeConfig::from_kv(dkv, dd);
  return rc;
}

std::vector<std::string> read_value_vocabulary(const fs::path& path) {
  require_file(path, "value vocabulary");
  std::ifstream in(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

double synthetic_exact_match(const std::vector<std::string>& outputs, const std::vector<std::string>& references,
                             const std::vector<std::string>& values) {
  if (outputs.size() != references.size() || outputs.empty()) {
    throw InputError("exact match needs equally many outputs and references");
  }
  const std::set<std::string> vocab(values.begin(), values.end());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    hits += value_exact_match(outputs[i], synthetic_answer(references[i]), vocab) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(outputs.size());
}

// ---- synth -------------------------------------------------------------------------

void cmd_synth(const SynthOptions& options, std::ostream& log) {
  require_out(options.common);
  std::vector<fs::path> files;
  if (options.spec) files.push_back(*options.spec);
  const KeyValueConfig kv = load_common_config(options.common, files);
  const SyntheticTaskSpec spec = SyntheticTaskSpec::from_kv(kv);
  const std::uint64_t seed = options.common.seed.value_or(0);
  RunManifest manifest("synth");
  const SyntheticCorpora corpora = generate_synthetic(spec, seed);

  const fs::path& out = options.common.out;
  fs::create_directories(out);
  save_jsonl(out / "train.jsonl", corpora.train);
  save_jsonl(out / "valid.jsonl", corpora.valid);
  save_jsonl(out / "test.jsonl", corpora.test);
  std::string values;
  for (const auto& v : corpora.names.values) values += v + "\n";
  write_file_atomic(out / "values.txt", values);
  write_file_atomic(out / "spec.txt", spec.to_kv().to_string());
  log << "wrote " << corpora.train.size() << "/" << corpora.valid.size() << "/" << corpora.test.size()
      << " train/valid/test samples to " << out.string() << '\n';

  manifest.set_seed(seed);
  manifest.set_config(spec.to_kv());
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "values.txt", "spec.txt"}) {
    manifest.add_artifact(out / f);
  }
  manifest.write(out / "run_manifest.json");
}

// ---- train -------------------------------------------------------------------------

void cmd_train(const TrainOptions& options, std::ostream& log) {
  require_out(options.common);
  std::vector<fs::path> files;
  if (options.model_config) files.push_back(*options.model_config);
  if (options.train_config) files.push_back(*options.train_config);
  KeyValueConfig kv = load_common_config(options.common, files);
  if (options.mode) kv.set("grounding_mode", *options.mode);
  if (options.learning_rate) kv.set("learning_rate", *options.learning_rate);
  if (options.epochs) kv.set("epochs", std::to_string(*options.epochs));
  if (options.max_steps) kv.set("max_steps", std::to_string(*options.max_steps));
  if (options.common.seed) kv.set("seed", std::to_string(*options.common.seed));
  ResolvedConfig rc = resolve_config(kv);

  const fs::path& out = options.common.out;
  if (options.resume) require_file(out / "state" / "state.txt", "training state");
  RunManifest manifest("train");
  const Corpora data = load_corpora(options.data_dir, false);
  const Vocab vocab = build_vocab(data.train);
  rc.model.vocab_size = vocab.size();
  rc.model.validate();

  fs::create_directories(out);
  log << "training " << to_string(rc.model.grounding_mode) << " (lr " << rc.train.learning_rate_text << ", "
      << rc.train.epochs << " epochs, vocab " << vocab.size() << ")\n";
  const FitResult result = with_precision(rc.model.precision, [&](auto tag) {
    return train_impl<decltype(tag)>(rc.model, rc.train, data, vocab, out, options.resume, log);
  });
  log << "best valid BLEU-4 " << 100 * result.best_bleu4 << " at step " << result.best_step << '\n';

  KeyValueConfig resolved = snapshot(rc);
  write_file_atomic(out / "config.txt", resolved.to_string());
  for (const auto& [k, v] : rc.raw.values()) resolved.set(k, v);
  manifest.set_config(resolved);
  manifest.set_seed(rc.train.seed);
  manifest.add_artifact(out / "config.txt");
  manifest.add_artifact(out / "train_log.jsonl");
  manifest.add_artifact(out / "state");
  if (fs::exists(out / "best")) manifest.add_artifact(out / "best");
  if (!result.interrupted) manifest.add_artifact(out / "final");
  manifest.write(out / "run_manifest.json");
}

// ---- generate ----------------------------------------------------------------------

void cmd_generate(const GenerateOptions& options, std::ostream& log) {
  require_out(options.common);
  require_file(options.checkpoint / "manifest.txt", "checkpoint");
  require_file(options.input, "input file");
  KeyValueConfig kv = load_common_config(options.common);
  kv.require_known(decode_keys(), "decode configuration");
  const ModelConfig mc = read_checkpoint_manifest(options.checkpoint).config;
  KeyValueConfig dkv;
  for (const auto& k : decode_keys()) {
    if (kv.contains(k)) dkv.set(k == "decode_max_target_len" ? "max_target_len" : k, kv.get_string(k, ""));
  }
  if (options.strategy) dkv.set("strategy", *options.strategy);
  if (options.beam_size) dkv.set("beam_size", std::to_string(*options.beam_size));
  if (options.max_target_len) dkv.set("max_target_len", std::to_string(*options.max_target_len));
  if (options.min_length) dkv.set("min_length", std::to_string(*options.min_length));
  if (options.length_penalty) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", *options.length_penalty);
    dkv.set("length_penalty", buf);
  }
  DecodeConfig defaults;
  defaults.max_target_len = mc.max_target_len;
  const DecodeConfig dc = DecodeConfig::from_kv(dkv, defaults);

  RunManifest manifest("generate");
  const auto samples = load_jsonl(options.input);
  const auto outputs = run_generation(options.checkpoint, samples, dc);
  const fs::path& out = options.common.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_outputs(out, samples, outputs);
  log << "generated " << outputs.size() << " outputs (" << to_string(dc.strategy) << ")\n";

  KeyValueConfig cfg = dc.to_kv();
  cfg.set("checkpoint", options.checkpoint.string());
  cfg.set("input", options.input.string());
  manifest.set_config(cfg);
  manifest.set_seed(options.common.seed.value_or(mc.seed));
  manifest.add_artifact(out);
  manifest.write(fs::path(out.string() + ".run_manifest.json"));
}

// ---- evaluate ----------------------------------------------------------------------

EvaluateResult cmd_evaluate(const EvaluateOptions& options, std::ostream& out) {
  const auto outputs = read_targets(options.outputs);
  require_file(options.references, "references file");
  const auto refs = targets_of(load_jsonl(options.references));
  if (outputs.size() != refs.size()) {
    throw InputError("line count mismatch: " + std::to_string(outputs.size()) + " outputs vs " +
                     std::to_string(refs.size()) + " references");
  }
  RunManifest manifest("evaluate");
  EvaluateResult r;
  r.metrics = evaluate_corpus(outputs, refs, options.smoothing);
  if (options.values) r.exact_match = synthetic_exact_match(outputs, refs, read_value_vocabulary(*options.values));

  std::string table = metric_table_header(false) + "\n" + metric_table_row(r.metrics) + "\n";
  if (r.exact_match) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "exact-match %.2f\n", 100 * *r.exact_match);
    table += buf;
  }
  out << table;
  if (!options.common.out.empty()) {
    const fs::path& dir = options.common.out;
    fs::create_directories(dir);
    write_file_atomic(dir / "metrics.txt", table);
    auto j = nlohmann::ordered_json::parse(metric_json(r.metrics));
    if (r.exact_match) j["exact_match"] = *r.exact_match;
    write_file_atomic(dir / "metrics.json", j.dump() + "\n");
    KeyValueConfig cfg;
    cfg.set("outputs", options.outputs.string());
    cfg.set("references", options.references.string());
    cfg.set("smoothing", options.smoothing ? "true" : "false");
    manifest.set_config(cfg);
    manifest.set_seed(options.common.seed.value_or(0));
    manifest.add_artifact(dir / "metrics.txt");
    manifest.add_artifact(dir / "metrics.json");
    manifest.write(dir / "run_manifest.json");
  }
  return r;
}

// ---- compare -----------------------------------------------------------------------

std::string format_compare_table(const std::vector<CompareRow>& rows) {
  const bool with_em = std::any_of(rows.begin(), rows.end(), [](const CompareRow& r) { return r.exact_match; });
  char buf[96];
  std::string text;
  std::snprintf(buf, sizeof buf, "%-11s %6s %8s ", "Model", "Seed", "LR");
  text += buf + metric_table_header(false) + (with_em ? "       EM" : "") + "\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-11s %6llu %8s ", r.label.c_str(), static_cast<unsigned long long>(r.seed),
                  r.learning_rate.c_str());
    text += buf + metric_table_row(r.test);
    if (with_em) {
      if (r.exact_match) {
        std::snprintf(buf, sizeof buf, " %8.2f", 100 * *r.exact_match);
        text += buf;
      } else {
        text += "      n/a";
      }
    }
    text += "\n";
  }
  return text;
}

std::vector<CompareRow> cmd_compare(const CompareOptions& options, std::ostream& log) {
  require_out(options.common);
  KeyValueConfig kv = load_common_config(options.common);
  if (options.common.seed) kv.set("seed", std::to_string(*options.common.seed));
  const ResolvedConfig base = resolve_config(kv);
  if (options.modes.empty()) throw UsageError("--modes must name at least one grounding mode");
  for (const auto& m : options.modes) parse_grounding_mode(m);

  RunManifest manifest("compare");
  const Corpora full = load_corpora(options.data_dir, true);
  std::optional<std::vector<std::string>> values;
  if (fs::exists(options.data_dir / "values.txt")) values = read_value_vocabulary(options.data_dir / "values.txt");
  const fs::path& out = options.common.out;
  fs::create_directories(out);

  struct Variant {
    std::string label;
    GroundingMode mode;
    bool context_only;
  };
  std::vector<Variant> variants;
  for (const auto& m : options.modes) variants.push_back({m, parse_grounding_mode(m), false});
  if (options.context_only_ablation) variants.push_back({"concat-ctx", GroundingMode::Concat, true});

  std::vector<CompareRow> rows;
  for (const auto& variant : variants) {
    Corpora data = full;
    if (variant.context_only) {
      data.train = without_documents(full.train);
      data.valid = without_documents(full.valid);
      data.test = without_documents(full.test);
    }
    const Vocab vocab = build_vocab(data.train);
    CompareRow row;
    row.label = variant.label;
    row.seed = base.train.seed;
    fs::path best_run;
    double best = -1;
    for (const auto& lr : base.train.learning_rate_grid) {
      ModelConfig mc = base.model;
      mc.grounding_mode = variant.mode;
      mc.vocab_size = vocab.size();
      mc.validate();
      TrainConfig tc = base.train;
      tc.set_learning_rate(lr);
      const fs::path run = out / variant.label / lr_dir_name(lr);
      log << "[" << variant.label << "] lr " << lr << '\n';
      const FitResult fr = with_precision(mc.precision, [&](auto tag) {
        return train_impl<decltype(tag)>(mc, tc, data, vocab, run, false, log);
      });
      if (fr.best_bleu4 > best) {
        best = fr.best_bleu4;
        best_run = run;
        row.learning_rate = lr;
      }
    }
    row.valid_bleu4 = best;
    const auto outputs = run_generation(best_run / "best", data.test, base.decode);
    write_outputs(out / variant.label / "test_outputs.jsonl", data.test, outputs);
    const auto refs = targets_of(data.test);
    row.test = evaluate_corpus(outputs, refs);
    if (values) row.exact_match = synthetic_exact_match(outputs, refs, *values);
    manifest.add_artifact(out / variant.label / "test_outputs.jsonl");
    rows.push_back(row);
  }

  const std::string table = format_compare_table(rows);
  std::string jsonl;
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["model"] = r.label;
    j["seed"] = r.seed;
    j["learning_rate"] = r.learning_rate;
    j["valid_bleu4"] = r.valid_bleu4;
    const auto m = nlohmann::ordered_json::parse(metric_json(r.test));
    for (const auto& [k, v] : m.items()) j[k] = v;
    j["exact_match"] = r.exact_match ? nlohmann::ordered_json(*r.exact_match) : nlohmann::ordered_json(nullptr);
    jsonl += j.dump() + "\n";
  }
  write_file_atomic(out / "compare_table.txt", table);
  write_file_atomic(out / "compare.jsonl", jsonl);
  log << table;

  KeyValueConfig resolved = snapshot(base);
  for (const auto& [k, v] : base.raw.values()) resolved.set(k, v);
  manifest.set_config(resolved);
  manifest.set_seed(base.train.seed);
  manifest.add_artifact(out / "compare_table.txt");
  manifest.add_artifact(out / "compare.jsonl");
  manifest.write(out / "run_manifest.json");
  return rows;
}

}  // namespace groundgen::cli
