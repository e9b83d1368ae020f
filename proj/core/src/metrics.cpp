#include "groundgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <nlohmann/json.hpp>

#include "groundgen/errors.hpp"
#include "groundgen/vocab.hpp"

namespace groundgen {

Words normalize_for_scoring(const std::string& text) {
  Words out;
  for (auto& w : split_words(text)) {
    const bool punct_only = std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::ispunct(c); });
    if (!punct_only) out.push_back(std::move(w));
  }
  return out;
}

namespace {

void check_corpus(std::size_t candidates, std::size_t references) {
  if (candidates != references) {
    throw InputError("corpus size mismatch: " + std::to_string(candidates) + " outputs vs " +
                     std::to_string(references) + " references");
  }
  if (candidates == 0) throw InputError("empty corpus");
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const Words& w, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++counts[Words(w.begin() + i, w.begin() + i + n)];
  return counts;
}

}  // namespace

double bleu(std::span<const Words> candidates, std::span<const Words> references, int max_n, bool smoothing) {
  check_corpus(candidates.size(), references.size());
  if (max_n < 1 || max_n > 4) throw InputError("BLEU order must be in 1..4");
  std::vector<double> matches(max_n, 0.0), totals(max_n, 0.0);
  double c = 0, r = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    c += static_cast<double>(candidates[i].size());
    r += static_cast<double>(references[i].size());
    for (int n = 1; n <= max_n; ++n) {
      const auto cand = ngram_counts(candidates[i], n);
      const auto ref = ngram_counts(references[i], n);
      for (const auto& [gram, count] : cand) {
        auto it = ref.find(gram);
        if (it != ref.end()) matches[n - 1] += static_cast<double>(std::min(count, it->second));
        totals[n - 1] += static_cast<double>(count);
      }
    }
  }
  double log_sum = 0;
  for (int n = 0; n < max_n; ++n) {
    double p;
    if (smoothing) {
      p = (matches[n] + 1.0) / (totals[n] + 1.0);
    } else {
      if (matches[n] == 0) return 0.0;
      p = matches[n] / totals[n];
    }
    log_sum += std::log(p);
  }
  const double bp = c < r ? (c == 0 ? 0.0 : std::exp(1.0 - r / c)) : 1.0;
  return bp * std::exp(log_sum / max_n);
}

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Words& candidate, const Words& reference) {
  if (reference.empty()) throw InputError("Rouge-L needs a non-empty reference");
  if (candidate.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  const double beta2 = 1.2 * 1.2;
  return (1 + beta2) * p * r / (r + beta2 * p);
}

double rouge_l_corpus(std::span<const Words> candidates, std::span<const Words> references) {
  check_corpus(candidates.size(), references.size());
  double sum = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) sum += rouge_l(candidates[i], references[i]);
  return sum / static_cast<double>(candidates.size());
}

double unigram_f1(const Words& candidate, const Words& reference) {
  if (reference.empty()) throw InputError("unigram F1 needs a non-empty reference");
  std::map<std::string, std::size_t> ref;
  for (const auto& w : reference) ++ref[w];
  std::size_t overlap = 0;
  for (const auto& w : candidate) {
    auto it = ref.find(w);
    if (it != ref.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(candidate.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(reference.size());
  return 2 * p * r / (p + r);
}

double unigram_f1_corpus(std::span<const Words> candidates, std::span<const Words> references) {
  check_corpus(candidates.size(), references.size());
  double sum = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) sum += unigram_f1(candidates[i], references[i]);
  return sum / static_cast<double>(candidates.size());
}

MetricReport evaluate_corpus(std::span<const std::string> outputs, std::span<const std::string> references,
                             bool smoothing) {
  check_corpus(outputs.size(), references.size());
  std::vector<Words> cand, ref;
  for (const auto& o : outputs) cand.push_back(normalize_for_scoring(o));
  for (std::size_t i = 0; i < references.size(); ++i) {
    ref.push_back(normalize_for_scoring(references[i]));
    if (ref.back().empty()) throw InputError("reference " + std::to_string(i + 1) + " is empty after normalization");
  }
  MetricReport m;
  m.bleu1 = bleu(cand, ref, 1, smoothing);
  m.bleu2 = bleu(cand, ref, 2, smoothing);
  m.bleu3 = bleu(cand, ref, 3, smoothing);
  m.bleu4 = bleu(cand, ref, 4, smoothing);
  m.rouge_l = rouge_l_corpus(cand, ref);
  m.unigram_f1 = unigram_f1_corpus(cand, ref);
  m.corpus_size = outputs.size();
  return m;
}

std::string metric_table_header(bool with_label) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s%8s %8s %8s %8s %8s %8s %8s", with_label ? "Model     " : "", "BLEU-1", "BLEU-2",
                "BLEU-3", "BLEU-4", "Rouge-L", "Meteor", "F1");
  return buf;
}

std::string metric_table_row(const MetricReport& m, const std::string& label) {
  char buf[200];
  std::string prefix;
  if (!label.empty()) {
    prefix = label;
    prefix.resize(std::max<std::size_t>(label.size(), 9), ' ');
    prefix += ' ';
  }
  std::snprintf(buf, sizeof buf, "%8.2f %8.2f %8.2f %8.2f %8.2f %8s %8.2f", 100 * m.bleu1, 100 * m.bleu2,
                100 * m.bleu3, 100 * m.bleu4, 100 * m.rouge_l, "n/a", 100 * m.unigram_f1);
  return prefix + buf;
}

std::string metric_json(const MetricReport& m) {
  nlohmann::ordered_json j;
  j["bleu1"] = m.bleu1;
  j["bleu2"] = m.bleu2;
  j["bleu3"] = m.bleu3;
  j["bleu4"] = m.bleu4;
  j["rouge_l"] = m.rouge_l;
  j["meteor"] = nullptr;
  j["f1"] = m.unigram_f1;
  j["corpus_size"] = m.corpus_size;
  return j.dump();
}

}  // namespace groundgen
