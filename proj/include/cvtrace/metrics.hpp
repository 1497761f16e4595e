#pragma once

#include "cvtrace/model.hpp"
#include "cvtrace/projection.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace cvtrace {

double jaccard_topk(TopTokenSet const& before, TopTokenSet const& after);
double cosine(std::span<double const> before, std::span<double const> after);
double l2(std::span<double const> before, std::span<double const> after);

inline constexpr double kBleuPrecisionFloor = 1e-9;

// Sentence BLEU over whitespace tokens: n-grams up to min(4, |candidate|),
// uniform weights, clipped counts, precision floor, brevity penalty.
double bleu(std::string_view candidate, std::string_view reference);

// LCS F1 over whitespace tokens.
double rouge_l(std::string_view candidate, std::string_view reference);

std::vector<std::string> split_whitespace(std::string_view text);

struct IntrinsicReport {
  VectorSite site;
  double jaccard = 0.0;
  double cosine = 0.0;
  double l2 = 0.0;
  std::size_t k_used = 0;
};

std::vector<IntrinsicReport> intrinsic_report(ModelWeights const& before, ModelWeights const& after,
                                              std::span<VectorSite const> targets, std::size_t k = kDefaultTopK);

struct Answer {
  std::string id;
  std::string text;
};

struct BehavioralItem {
  std::string id;
  double bleu = 0.0;
  double rouge_l = 0.0;
};

struct BehavioralReport {
  double bleu = 0.0;
  double rouge_l = 0.0;
  std::vector<BehavioralItem> per_item;
};

// Scores each after-answer against the before-answer with the same id.
BehavioralReport behavioral_report(std::span<Answer const> before, std::span<Answer const> after);

} // namespace cvtrace
