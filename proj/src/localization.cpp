#include "cvtrace/localization.hpp"

#include "cvtrace/error.hpp"
#include "cvtrace/metrics.hpp"
#include "cvtrace/toy.hpp"
#include "cvtrace/unlearn.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace cvtrace {

using nlohmann::json;

std::string normalize_token(std::string_view token) {
  static constexpr std::string_view kMarkers[] = {"\xE2\x96\x81", "\xC4\xA0", " "};
  for (auto marker : kMarkers) {
    if (token.starts_with(marker)) {
      token.remove_prefix(marker.size());
      break;
    }
  }
  std::string out(token);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

namespace {

// Short fragments only count on an exact match; otherwise "a" would match
// nearly every entry.
constexpr std::size_t kMinSubstringLength = 3;

bool matches_entry(std::string const& token, std::string const& entry) {
  if (token.empty())
    return false;
  if (token == entry)
    return true;
  return token.size() >= kMinSubstringLength && entry.find(token) != std::string::npos;
}

} // namespace

ConceptScore lexicon_score(TopTokenSet const& tokens, Lexicon const& lexicon) {
  if (lexicon.entries.empty())
    throw InputError("lexicon '" + lexicon.label + "' is empty");
  std::vector<std::string> entries;
  for (auto const& e : lexicon.entries)
    entries.push_back(normalize_token(e));
  ConceptScore out;
  out.topic = lexicon.label;
  std::vector<std::string> matched;
  for (auto const& t : tokens.entries) {
    std::string const norm = normalize_token(t.token);
    if (std::any_of(entries.begin(), entries.end(), [&](std::string const& e) { return matches_entry(norm, e); }))
      matched.push_back(t.token);
  }
  std::size_t const k = tokens.k ? tokens.k : tokens.entries.size();
  out.score = k ? static_cast<double>(matched.size()) / static_cast<double>(k) : 0.0;
  out.explanation = "matched " + std::to_string(matched.size()) + "/" + std::to_string(k) + " tokens";
  if (!matched.empty()) {
    out.explanation += ":";
    for (auto const& m : matched)
      out.explanation += " " + m;
  }
  return out;
}

ConceptScore best_lexicon_score(TopTokenSet const& tokens, std::span<Lexicon const> lexicons) {
  if (lexicons.empty())
    throw InputError("no lexicons given");
  ConceptScore best = lexicon_score(tokens, lexicons.front());
  for (std::size_t i = 1; i < lexicons.size(); ++i) {
    ConceptScore s = lexicon_score(tokens, lexicons[i]);
    if (s.score > best.score)
      best = std::move(s);
  }
  return best;
}

std::vector<Lexicon> parse_lexicons(std::string const& json_text) {
  std::vector<Lexicon> out;
  try {
    json const doc = json::parse(json_text);
    for (auto const& [label, entries] : doc.items())
      out.push_back({label, entries.get<std::vector<std::string>>()});
  } catch (json::exception const& ex) {
    throw InputError(std::string("malformed lexicon file: ") + ex.what());
  }
  if (out.empty())
    throw InputError("lexicon file defines no lexicons");
  return out;
}

namespace {

std::string read_text(std::filesystem::path const& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

std::vector<Lexicon> load_lexicons(std::filesystem::path const& path) { return parse_lexicons(read_text(path)); }

LexiconScorer::LexiconScorer(std::vector<Lexicon> lexicons, std::size_t score_k)
    : lexicons_(std::move(lexicons)), score_k_(score_k) {
  if (lexicons_.empty())
    throw InputError("no lexicons given");
  if (score_k_ == 0)
    throw InputError("lexicon score k must be at least 1");
}

ConceptScore LexiconScorer::score(TopTokenSet const& tokens) {
  TopTokenSet head = tokens;
  if (head.entries.size() > score_k_) {
    head.entries.resize(score_k_);
    head.k = score_k_;
  }
  return best_lexicon_score(head, lexicons_);
}

ConceptScore external_score(TopTokenSet const& tokens, ExternalScorerClient& scorer) { return scorer.score(tokens); }

std::vector<ConceptScore> score_sites(ModelWeights const& w, std::span<VectorSite const> sites,
                                      ConceptScorer& scorer, std::size_t k, std::size_t max_in_flight) {
  std::vector<ConceptScore> out(sites.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      std::size_t const i = next.fetch_add(1);
      if (i >= sites.size())
        return;
      {
        std::lock_guard lock(error_mutex);
        if (error)
          return;
      }
      try {
        out[i] = scorer.score(top_k_of(w, sites[i], k));
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error)
          error = std::current_exception();
        return;
      }
    }
  };
  std::size_t const workers = std::min(std::max<std::size_t>(max_in_flight, 1), sites.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < workers; ++t)
      threads.emplace_back(worker);
    for (auto& t : threads)
      t.join();
  }
  if (error)
    std::rethrow_exception(error);
  return out;
}

std::vector<SelectedVector> select_vectors(std::span<CandidateList const> candidates,
                                           std::map<VectorSite, ConceptScore> const& scores, double threshold) {
  std::vector<SelectedVector> out;
  for (auto const& list : candidates) {
    for (auto const& c : list.kept) {
      VectorSite const site{list.layer, c.index};
      auto it = scores.find(site);
      if (it == scores.end())
        throw InputError("no concept score for layer " + std::to_string(site.layer) + " vector " +
                         std::to_string(site.index));
      if (it->second.score > threshold)
        out.push_back({site, it->second});
    }
  }
  std::sort(out.begin(), out.end(), [](SelectedVector const& a, SelectedVector const& b) {
    return a.score.score != b.score.score ? a.score.score > b.score.score : a.site < b.site;
  });
  return out;
}

KeywordMatch keyword_localize(ModelWeights const& w, std::span<TokenId const> keywords, std::size_t lo,
                              std::size_t hi, double exclude_fraction) {
  if (keywords.empty())
    throw InputError("keyword set is empty");
  std::set<TokenId> const unique(keywords.begin(), keywords.end());
  for (TokenId t : unique)
    if (t >= w.vocab_size())
      throw IndexError("keyword token id " + std::to_string(t) + " out of range");
  auto const lists = scan_model(w, lo, hi, exclude_fraction);
  KeywordMatch best{{0, 0}, -1.0};
  Vector z(w.vocab_size());
  for (auto const& list : lists) {
    std::vector<std::size_t> indices;
    for (auto const& c : list.kept)
      indices.push_back(c.index);
    std::sort(indices.begin(), indices.end());
    for (std::size_t j : indices) {
      matvec(w.embedding, w.values[list.layer].row(j), z);
      double const mx = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (double v : z)
        sum += std::exp(v - mx);
      double mass = 0.0;
      for (TokenId t : unique)
        mass += std::exp(z[t] - mx);
      mass /= sum;
      if (mass > best.score)
        best = {{list.layer, j}, mass};
    }
  }
  return best;
}

ConceptVectorRecord make_record(ModelWeights const& w, VectorSite site, ConceptTestSet const& tests, std::size_t k) {
  check_site(w, site);
  ConceptVectorRecord r;
  r.concept_name = tests.concept_name;
  r.model_id = w.model_id;
  r.layer = site.layer;
  r.dim = site.index;
  for (auto const& e : top_k_of(w, site, k).entries)
    r.top_tokens.emplace_back(e.token, e.score);
  r.qa = tests.qa;
  r.completions = tests.completions;
  return r;
}

namespace {

struct AnswerDrops {
  double bleu_drop = 0.0;
  double rouge_drop = 0.0;
};

AnswerDrops answer_drops(ModelWeights const& before, ModelWeights const& after,
                         std::vector<std::string> const& questions, std::size_t max_new) {
  if (questions.empty())
    return {};
  double bleu_sum = 0.0;
  double rouge_sum = 0.0;
  for (auto const& q : questions) {
    std::string const a0 = generate_text(before, q, max_new);
    std::string const a1 = generate_text(after, q, max_new);
    bleu_sum += bleu(a1, a0);
    rouge_sum += rouge_l(a1, a0);
  }
  double const n = static_cast<double>(questions.size());
  return {1.0 - bleu_sum / n, 1.0 - rouge_sum / n};
}

} // namespace

ValidationReport validate_concept(ModelWeights const& w, ConceptVectorRecord const& record,
                                  std::span<ConceptVectorRecord const> unrelated, ValidationOptions const& options) {
  if (unrelated.empty())
    throw InputError("validation needs at least one unrelated concept");
  if (options.max_new == 0)
    throw InputError("validation needs max_new >= 1");
  if (!w.model_id.empty() && record.model_id != w.model_id)
    throw InputError("record '" + record.concept_name + "' belongs to model '" + record.model_id +
                     "', weights are '" + w.model_id + "'");
  for (auto const& u : unrelated)
    if (u.model_id != record.model_id)
      throw InputError("unrelated record '" + u.concept_name + "' belongs to model '" + u.model_id + "', expected '" +
                       record.model_id + "'");
  if (record.qa.empty())
    throw InputError("record '" + record.concept_name + "' has no QA pairs");

  ModelWeights const ablated = needle(w, record.layer, record.dim, {options.sigma, options.seed, options.relative});

  std::vector<std::string> target_q, unrelated_q;
  for (auto const& qa : record.qa)
    target_q.push_back(qa.question);
  for (auto const& u : unrelated)
    for (auto const& qa : u.qa)
      unrelated_q.push_back(qa.question);

  AnswerDrops const t = answer_drops(w, ablated, target_q, options.max_new);
  AnswerDrops const u = answer_drops(w, ablated, unrelated_q, options.max_new);

  ValidationReport r;
  r.site = record.site();
  r.target_bleu_drop = t.bleu_drop;
  r.target_rouge_drop = t.rouge_drop;
  r.unrelated_bleu_drop = u.bleu_drop;
  r.unrelated_rouge_drop = u.rouge_drop;
  r.sigma = options.sigma;
  r.unrelated_concepts_used = unrelated.size();
  r.accepted = r.target_bleu_drop - r.unrelated_bleu_drop > options.threshold;
  return r;
}

} // namespace cvtrace
