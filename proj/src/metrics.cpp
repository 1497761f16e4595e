#include "cvtrace/metrics.hpp"

#include "cvtrace/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <unordered_set>

namespace cvtrace {

double jaccard_topk(TopTokenSet const& before, TopTokenSet const& after) {
  if (before.k != after.k)
    throw InputError("top-token sets built with different k (" + std::to_string(before.k) + " vs " +
                     std::to_string(after.k) + ")");
  std::unordered_set<TokenId> a, b;
  for (auto const& e : before.entries)
    a.insert(e.id);
  for (auto const& e : after.entries)
    b.insert(e.id);
  if (a.empty() && b.empty())
    return 1.0;
  std::size_t inter = 0;
  for (TokenId id : a)
    inter += b.count(id);
  std::size_t const uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double cosine(std::span<double const> before, std::span<double const> after) {
  if (before.size() != after.size())
    throw InputError("cosine of vectors with different lengths");
  double const na = norm2(before);
  double const nb = norm2(after);
  if (na == 0.0 || nb == 0.0)
    throw DegenerateVectorError("cosine is undefined for a zero vector");
  return dot(before, after) / (na * nb);
}

double l2(std::span<double const> before, std::span<double const> after) {
  if (before.size() != after.size())
    throw InputError("l2 of vectors with different lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    double const d = before[i] - after[i];
    s += d * d;
  }
  return std::sqrt(s);
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok)
    out.push_back(std::move(tok));
  return out;
}

double bleu(std::string_view candidate, std::string_view reference) {
  auto const ref = split_whitespace(reference);
  if (ref.empty())
    throw InputError("BLEU reference is empty");
  auto const cand = split_whitespace(candidate);
  if (cand.empty())
    return 0.0;
  std::size_t const max_n = std::min<std::size_t>(4, cand.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    std::map<std::vector<std::string>, std::size_t> ref_counts, cand_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i)
      ++ref_counts[{ref.begin() + static_cast<std::ptrdiff_t>(i), ref.begin() + static_cast<std::ptrdiff_t>(i + n)}];
    for (std::size_t i = 0; i + n <= cand.size(); ++i)
      ++cand_counts[{cand.begin() + static_cast<std::ptrdiff_t>(i),
                     cand.begin() + static_cast<std::ptrdiff_t>(i + n)}];
    std::size_t matched = 0;
    for (auto const& [gram, count] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end())
        matched += std::min(count, it->second);
    }
    double const total = static_cast<double>(cand.size() - n + 1);
    double const precision = std::max(static_cast<double>(matched) / total, kBleuPrecisionFloor);
    log_sum += std::log(precision);
  }
  double const geo = std::exp(log_sum / static_cast<double>(max_n));
  double const bp = cand.size() < ref.size()
                        ? std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(cand.size()))
                        : 1.0;
  return bp * geo;
}

double rouge_l(std::string_view candidate, std::string_view reference) {
  auto const ref = split_whitespace(reference);
  if (ref.empty())
    throw InputError("Rouge-L reference is empty");
  auto const cand = split_whitespace(candidate);
  if (cand.empty())
    return 0.0;
  std::vector<std::size_t> prev(ref.size() + 1, 0), cur(ref.size() + 1, 0);
  for (std::size_t i = 1; i <= cand.size(); ++i) {
    for (std::size_t j = 1; j <= ref.size(); ++j)
      cur[j] = cand[i - 1] == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  double const lcs = static_cast<double>(prev[ref.size()]);
  if (lcs == 0.0)
    return 0.0;
  double const p = lcs / static_cast<double>(cand.size());
  double const r = lcs / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

std::vector<IntrinsicReport> intrinsic_report(ModelWeights const& before, ModelWeights const& after,
                                              std::span<VectorSite const> targets, std::size_t k) {
  if (before.num_layers() != after.num_layers() || before.model_dim() != after.model_dim() ||
      before.mlp_dim() != after.mlp_dim() || before.vocab_size() != after.vocab_size())
    throw ShapeError("before and after weights have different shapes");
  std::vector<IntrinsicReport> out;
  for (VectorSite const site : targets) {
    check_site(before, site);
    auto const v0 = before.values[site.layer].row(site.index);
    auto const v1 = after.values[site.layer].row(site.index);
    IntrinsicReport r;
    r.site = site;
    TopTokenSet const a = top_k_of(before, v0, k);
    TopTokenSet const b = top_k_of(after, v1, k);
    r.k_used = a.k;
    r.jaccard = jaccard_topk(a, b);
    r.cosine = cosine(v0, v1);
    r.l2 = l2(v0, v1);
    out.push_back(r);
  }
  return out;
}

BehavioralReport behavioral_report(std::span<Answer const> before, std::span<Answer const> after) {
  if (before.size() != after.size())
    throw InputError("answer lists differ in length (" + std::to_string(before.size()) + " vs " +
                     std::to_string(after.size()) + ")");
  BehavioralReport out;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (before[i].id != after[i].id)
      throw InputError("answer lists are not aligned at position " + std::to_string(i) + " ('" + before[i].id +
                       "' vs '" + after[i].id + "')");
    BehavioralItem item{before[i].id, bleu(after[i].text, before[i].text), rouge_l(after[i].text, before[i].text)};
    out.bleu += item.bleu;
    out.rouge_l += item.rouge_l;
    out.per_item.push_back(std::move(item));
  }
  if (!out.per_item.empty()) {
    out.bleu /= static_cast<double>(out.per_item.size());
    out.rouge_l /= static_cast<double>(out.per_item.size());
  }
  return out;
}

} // namespace cvtrace
