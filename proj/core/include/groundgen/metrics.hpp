#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace groundgen {

using Words = std::vector<std::string>;

// Scoring normalization: lowercase, word/punctuation split, punctuation-only
// tokens removed.
Words normalize_for_scoring(const std::string& text);

// Corpus BLEU over orders 1..max_n with one reference per candidate.
// Clipped n-gram counts are summed over the corpus; brevity penalty
// exp(1 - r/c) applies when c < r. Without smoothing any zero precision gives 0;
// with smoothing every order uses (matches + 1) / (total + 1).
double bleu(std::span<const Words> candidates, std::span<const Words> references, int max_n,
            bool smoothing = false);

std::size_t lcs_length(const Words& a, const Words& b);

// LCS F-measure with beta = 1.2; 0 for an empty candidate.
double rouge_l(const Words& candidate, const Words& reference);
double rouge_l_corpus(std::span<const Words> candidates, std::span<const Words> references);

// Multiset unigram overlap F1; 0 when nothing overlaps.
double unigram_f1(const Words& candidate, const Words& reference);
double unigram_f1_corpus(std::span<const Words> candidates, std::span<const Words> references);

// Fractions in [0, 1].
struct MetricReport {
  double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double rouge_l = 0;
  double unigram_f1 = 0;
  std::size_t corpus_size = 0;
};

MetricReport evaluate_corpus(std::span<const std::string> outputs, std::span<const std::string> references,
                             bool smoothing = false);

// Table columns BLEU-1..4, Rouge-L, Meteor, F1 with values x100; Meteor is
// printed as n/a. `label` fills the first column when non-empty.
std::string metric_table_header(bool with_label);
std::string metric_table_row(const MetricReport& report, const std::string& label = "");
// One-line JSON record (fractions, meteor null).
std::string metric_json(const MetricReport& report);

}  // namespace groundgen
