#include "groundgen/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>

#include "groundgen/checkpoint.hpp"
#include "groundgen/decoding.hpp"
#include "groundgen/errors.hpp"
#include "groundgen/metrics.hpp"
#include "groundgen/rng.hpp"

namespace groundgen {

// ---- config ------------------------------------------------------------------------

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k{"learning_rate", "learning_rate_grid", "epochs",     "batch_size",
                                          "clip_norm",     "warmup_steps",       "eval_every", "eval_samples",
                                          "max_steps",     "seed",               "beta1",      "beta2",
                                          "adam_eps"};
  return k;
}

void TrainConfig::set_learning_rate(const std::string& text) {
  learning_rate = parse_double("learning_rate", text);
  learning_rate_text = text;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid train config: " + what); };
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
  for (const auto& lr : learning_rate_grid) {
    if (!(parse_double("learning_rate_grid", lr) > 0)) fail("learning_rate_grid entries must be > 0");
  }
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(clip_norm > 0)) fail("clip_norm must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("beta1 and beta2 must be in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be > 0");
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  auto size = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string("train config key '") + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  };
  if (kv.contains("learning_rate")) c.set_learning_rate(kv.get_string("learning_rate", ""));
  if (kv.contains("learning_rate_grid")) {
    c.learning_rate_grid.clear();
    std::string text = kv.get_string("learning_rate_grid", "");
    std::size_t pos = 0;
    while (pos <= text.size()) {
      auto next = text.find(',', pos);
      std::string item = text.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (item.empty()) throw ConfigError("learning_rate_grid has an empty entry");
      c.learning_rate_grid.push_back(item);
      if (next == std::string::npos) break;
      pos = next + 1;
    }
  }
  c.epochs = size("epochs", c.epochs);
  c.batch_size = size("batch_size", c.batch_size);
  c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
  c.warmup_steps = size("warmup_steps", c.warmup_steps);
  c.eval_every = size("eval_every", c.eval_every);
  c.eval_samples = size("eval_samples", c.eval_samples);
  c.max_steps = size("max_steps", c.max_steps);
  c.seed = kv.get_uint("seed", c.seed);
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) { return from_kv(kv, TrainConfig{}); }

KeyValueConfig TrainConfig::to_kv() const {
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string grid;
  for (const auto& lr : learning_rate_grid) grid += (grid.empty() ? "" : ",") + lr;
  KeyValueConfig kv;
  kv.set("learning_rate", learning_rate_text);
  kv.set("learning_rate_grid", grid);
  kv.set("epochs", std::to_string(epochs));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("clip_norm", num(clip_norm));
  kv.set("warmup_steps", std::to_string(warmup_steps));
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("eval_samples", std::to_string(eval_samples));
  kv.set("max_steps", std::to_string(max_steps));
  kv.set("seed", std::to_string(seed));
  kv.set("beta1", num(beta1));
  kv.set("beta2", num(beta2));
  kv.set("adam_eps", num(adam_eps));
  return kv;
}

// ---- log ---------------------------------------------------------------------------

std::string to_json_line(const LogRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["split"] = r.split;
  j["loss"] = r.loss;
  if (r.bleu4) j["bleu4"] = *r.bleu4;
  return j.dump();
}

LogRecord log_record_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  LogRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.split = j.at("split").get<std::string>();
  r.loss = j.at("loss").get<double>();
  if (j.contains("bleu4")) r.bleu4 = j.at("bleu4").get<double>();
  return r;
}

// ---- optimizer ---------------------------------------------------------------------

template <typename T>
TrainState<T> TrainState<T>::zeros_like(const ParameterStore<T>& store) {
  TrainState<T> s;
  for (const auto& e : store.entries()) {
    s.m.emplace_back(e.tensor.shape());
    s.v.emplace_back(e.tensor.shape());
  }
  return s;
}

double scheduled_learning_rate(const TrainConfig& config, std::size_t step) {
  if (config.warmup_steps == 0) return config.learning_rate;
  return config.learning_rate *
         std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps));
}

template <typename T>
double clip_gradients(ParameterStore<T>& store, double max_norm) {
  double sq = 0;
  for (auto& e : store.entries()) {
    for (T g : e.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& e : store.entries()) {
      for (T& g : e.tensor.grad()) g *= scale;
    }
  }
  return norm;
}

template <typename T>
void adam_update(ParameterStore<T>& store, TrainState<T>& state, double lr, const TrainConfig& config) {
  if (state.m.size() != store.size() || state.v.size() != store.size()) {
    throw ShapeError("optimizer state does not match the parameter store");
  }
  const double t = static_cast<double>(state.step + 1);
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(config.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(config.beta2, t));
  const T eps = static_cast<T>(config.adam_eps);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto p = store[i].data();
    auto g = store[i].grad();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const T mhat = m[k] / c1;
      const T vhat = v[k] / c2;
      p[k] -= rate * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
double train_step(GroundedModel<T>& model, std::span<const PreparedSample> batch, TrainState<T>& state,
                  const TrainConfig& config) {
  if (batch.empty()) throw InputError("train_step: empty batch");
  Rng rng(mix_seed(config.seed, state.step));
  auto& store = model.parameters();
  store.zero_grad();
  double loss_value;
  {
    Graph<T> g;
    auto ctx = model.train_context(rng);
    Var<T> loss = model.loss(g, batch, ctx);
    loss_value = static_cast<double>(loss.value().data()[0]);
    if (!std::isfinite(loss_value)) {
      throw NumericError("non-finite training loss at step " + std::to_string(state.step) + " (batch of " +
                         std::to_string(batch.size()) + " samples)");
    }
    g.backward(loss);
  }
  clip_gradients(store, config.clip_norm);
  adam_update(store, state, scheduled_learning_rate(config, state.step), config);
  store.zero_grad();
  ++state.step;
  return loss_value;
}

template <typename T>
double evaluate_loss(const GroundedModel<T>& model, std::span<const PreparedSample> corpus, std::size_t batch_size) {
  if (corpus.empty()) throw InputError("evaluate_loss: empty corpus");
  double total = 0;
  double tokens = 0;
  for (std::size_t b = 0; b < corpus.size(); b += batch_size) {
    const auto batch = corpus.subspan(b, std::min(batch_size, corpus.size() - b));
    Graph<T> g;
    auto ctx = model.eval_context();
    Var<T> loss = model.loss(g, batch, ctx);
    double n = 0;
    for (const auto& s : batch) n += static_cast<double>(s.target.size() + 1);
    total += static_cast<double>(loss.value().data()[0]) * n;
    tokens += n;
  }
  return total / tokens;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(mix_seed(seed, 0x5eed), epoch));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

// ---- fit ---------------------------------------------------------------------------

namespace {

std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

template <typename T>
double validation_bleu4(const GroundedModel<T>& model, std::span<const PreparedSample> valid, const Vocab& vocab) {
  DecodeConfig dc;
  dc.strategy = DecodeStrategy::Greedy;
  dc.max_target_len = model.config().max_target_len;
  const auto outputs = generate(model, valid, dc);
  std::vector<std::string> hyp, ref;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    hyp.push_back(detokenize(vocab, outputs[i]));
    ref.push_back(detokenize(vocab, valid[i].target));
  }
  std::vector<Words> h, r;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    h.push_back(normalize_for_scoring(hyp[i]));
    r.push_back(normalize_for_scoring(ref[i]));
  }
  return bleu(h, r, 4);
}

template <typename T>
void save_state(const std::filesystem::path& dir, const GroundedModel<T>& model, const TrainState<T>& state,
                const Vocab& vocab, const TrainConfig& config) {
  save_checkpoint(dir, model, &vocab);
  std::vector<const Tensor<T>*> m, v;
  for (const auto& t : state.m) m.push_back(&t);
  for (const auto& t : state.v) v.push_back(&t);
  write_blob<T>(dir / "adam_m.bin", m);
  write_blob<T>(dir / "adam_v.bin", v);
  KeyValueConfig kv;
  kv.set("step", std::to_string(state.step));
  kv.set("best_bleu4", hex_double(state.best_bleu4));
  kv.set("best_step", std::to_string(state.best_step));
  kv.set("seed", std::to_string(config.seed));
  kv.set("batch_size", std::to_string(config.batch_size));
  kv.set("learning_rate", config.learning_rate_text);
  std::string log;
  for (const auto& r : state.log) log += to_json_line(r) + "\n";
  write_file_atomic(dir / "log.jsonl", log);
  write_file_atomic(dir / "state.txt", kv.to_string());
}

template <typename T>
void load_state(const std::filesystem::path& dir, GroundedModel<T>& model, TrainState<T>& state,
                const TrainConfig& config) {
  const KeyValueConfig kv = KeyValueConfig::load(dir / "state.txt");
  if (kv.get_uint("seed", 0) != config.seed || kv.get_uint("batch_size", 0) != config.batch_size ||
      kv.get_string("learning_rate", "") != config.learning_rate_text) {
    throw ConfigError("cannot resume from " + dir.string() + ": seed, batch_size or learning_rate differ");
  }
  load_parameters(dir, model);
  std::vector<Tensor<T>*> m, v;
  for (auto& t : state.m) m.push_back(&t);
  for (auto& t : state.v) v.push_back(&t);
  read_blob<T>(dir / "adam_m.bin", m);
  read_blob<T>(dir / "adam_v.bin", v);
  state.step = kv.get_uint("step", 0);
  state.best_bleu4 = std::strtod(kv.get_string("best_bleu4", "-1").c_str(), nullptr);
  state.best_step = kv.get_uint("best_step", 0);
  state.log.clear();
  std::ifstream in(dir / "log.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) state.log.push_back(log_record_from_json(line));
  }
}

void write_log(const std::filesystem::path& path, const std::vector<LogRecord>& log) {
  std::string text;
  for (const auto& r : log) text += to_json_line(r) + "\n";
  write_file_atomic(path, text);
}

}  // namespace

template <typename T>
FitResult fit(GroundedModel<T>& model, std::span<const PreparedSample> train, std::span<const PreparedSample> valid,
              const Vocab& vocab, const TrainConfig& config, const FitOptions& options) {
  config.validate();
  if (train.empty() || valid.empty()) throw InputError("fit: train and valid splits must be non-empty");
  TrainState<T> state = TrainState<T>::zeros_like(model.parameters());
  const auto& dir = options.checkpoint_dir;
  if (dir) std::filesystem::create_directories(*dir);
  if (options.resume) {
    if (!dir) throw ConfigError("resume needs a checkpoint directory");
    load_state(*dir / "state", model, state, config);
  }
  const auto valid_bleu_set =
      config.eval_samples == 0 ? valid : valid.subspan(0, std::min(config.eval_samples, valid.size()));

  const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  FitResult result;

  auto evaluate = [&] {
    const double loss = evaluate_loss(model, valid, config.batch_size);
    const double b4 = validation_bleu4(model, valid_bleu_set, vocab);
    state.log.push_back({state.step, "valid", loss, b4});
    if (options.progress) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "step %zu  valid loss %.4f  BLEU-4 %.2f\n", state.step, loss, 100 * b4);
      *options.progress << buf << std::flush;
    }
    if (b4 > state.best_bleu4) {
      state.best_bleu4 = b4;
      state.best_step = state.step;
      if (dir) save_checkpoint(*dir / "best", model, &vocab);
    }
    if (dir) {
      save_state(*dir / "state", model, state, vocab, config);
      write_log(*dir / "train_log.jsonl", state.log);
    }
  };

  std::vector<PreparedSample> batch;
  while (state.step < total_steps) {
    if (config.max_steps != 0 && state.step >= config.max_steps) {
      result.interrupted = true;
      break;
    }
    const std::size_t epoch = state.step / steps_per_epoch;
    const std::size_t offset = state.step % steps_per_epoch;
    const auto order = epoch_order(train.size(), config.seed, epoch);
    batch.clear();
    for (std::size_t k = offset * config.batch_size; k < std::min(train.size(), (offset + 1) * config.batch_size); ++k) {
      batch.push_back(train[order[k]]);
    }
    const double loss = train_step(model, std::span<const PreparedSample>(batch), state, config);
    state.log.push_back({state.step, "train", loss, std::nullopt});
    const bool epoch_end = state.step % steps_per_epoch == 0;
    if (epoch_end || (config.eval_every != 0 && state.step % config.eval_every == 0)) evaluate();
  }
  if (dir) {
    save_state(*dir / "state", model, state, vocab, config);
    if (!result.interrupted) save_checkpoint(*dir / "final", model, &vocab);
    write_log(*dir / "train_log.jsonl", state.log);
  }
  result.log = state.log;
  result.best_bleu4 = state.best_bleu4;
  result.best_step = state.best_step;
  result.steps = state.step;
  return result;
}

#define GROUNDGEN_INSTANTIATE_TRAINING(T)                                                                          \
  template struct TrainState<T>;                                                                                   \
  template double clip_gradients<T>(ParameterStore<T>&, double);                                                   \
  template void adam_update<T>(ParameterStore<T>&, TrainState<T>&, double, const TrainConfig&);                    \
  template double train_step<T>(GroundedModel<T>&, std::span<const PreparedSample>, TrainState<T>&,                \
                                const TrainConfig&);                                                               \
  template double evaluate_loss<T>(const GroundedModel<T>&, std::span<const PreparedSample>, std::size_t);         \
  template FitResult fit<T>(GroundedModel<T>&, std::span<const PreparedSample>, std::span<const PreparedSample>,   \
                            const Vocab&, const TrainConfig&, const FitOptions&);

GROUNDGEN_INSTANTIATE_TRAINING(float)
GROUNDGEN_INSTANTIATE_TRAINING(double)

}  // namespace groundgen
