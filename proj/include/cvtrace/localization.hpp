#pragma once

#include "cvtrace/model.hpp"
#include "cvtrace/projection.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace cvtrace {

inline constexpr double kDefaultSelectThreshold = 0.85;
inline constexpr double kDefaultValidationThreshold = 0.2;
inline constexpr double kDefaultValidationSigma = 0.1;
inline constexpr std::size_t kDefaultUnrelatedConcepts = 5;

struct ConceptScore {
  double score = 0.0;
  std::string topic;
  std::string explanation;
  bool clamped = false; // the raw score fell outside [0, 1]
};

struct Lexicon {
  std::string label;
  std::vector<std::string> entries;
};

// Lowercases and strips a leading subword space marker ("▁", "Ġ" or ' ').
std::string normalize_token(std::string_view token);

// Fraction of the top tokens that match a lexicon entry.
ConceptScore lexicon_score(TopTokenSet const& tokens, Lexicon const& lexicon);

// Best lexicon_score over several lexicons; ties go to the earliest.
ConceptScore best_lexicon_score(TopTokenSet const& tokens, std::span<Lexicon const> lexicons);

// {"label": ["entry", ...], ...}
std::vector<Lexicon> parse_lexicons(std::string const& json_text);
std::vector<Lexicon> load_lexicons(std::filesystem::path const& path);

// Interface so tests and offline runs can substitute scorers.
class ConceptScorer {
public:
  virtual ~ConceptScorer() = default;
  virtual ConceptScore score(TopTokenSet const& tokens) = 0;
};

class LexiconScorer : public ConceptScorer {
public:
  LexiconScorer(std::vector<Lexicon> lexicons, std::size_t score_k);
  ConceptScore score(TopTokenSet const& tokens) override;

private:
  std::vector<Lexicon> lexicons_;
  std::size_t score_k_;
};

struct ScorerSettings {
  std::string url;   // http://host[:port]/path
  std::string token; // sent as a bearer token when non-empty
  double timeout_seconds = 60.0;
  std::size_t max_in_flight = 4;
  std::string prompt_template; // must contain "{Tokens}"

  // Reads SCORER_URL and SCORER_TOKEN; the template comes from the packaged asset.
  static ScorerSettings from_environment();
};

std::string default_scorer_prompt();
std::string build_scorer_prompt(std::string const& prompt_template, TopTokenSet const& tokens);

// Extracts {'Score': s, 'Highly related topic': t, 'Explanation': e} from a
// reply text. Throws ScorerFormatError when any field is missing.
ConceptScore parse_scorer_reply(std::string const& text);

// POSTs {"prompt": ...} and expects {"text": ...} back.
class ExternalScorerClient : public ConceptScorer {
public:
  explicit ExternalScorerClient(ScorerSettings settings);
  ConceptScore score(TopTokenSet const& tokens) override;
  ScorerSettings const& settings() const { return settings_; }

private:
  ScorerSettings settings_;
};

ConceptScore external_score(TopTokenSet const& tokens, ExternalScorerClient& scorer);

// Scores every site, running up to `max_in_flight` scorer calls at once.
// Results come back in input order.
std::vector<ConceptScore> score_sites(ModelWeights const& w, std::span<VectorSite const> sites,
                                      ConceptScorer& scorer, std::size_t k, std::size_t max_in_flight = 1);

struct SelectedVector {
  VectorSite site;
  ConceptScore score;
};

// Candidates with score strictly above `threshold`, score descending, then
// (layer, index) ascending.
std::vector<SelectedVector> select_vectors(std::span<CandidateList const> candidates,
                                           std::map<VectorSite, ConceptScore> const& scores,
                                           double threshold = kDefaultSelectThreshold);

struct KeywordMatch {
  VectorSite site;
  double score = 0.0; // softmax mass on the keyword tokens
};

KeywordMatch keyword_localize(ModelWeights const& w, std::span<TokenId const> keywords, std::size_t lo,
                              std::size_t hi, double exclude_fraction = kDefaultExcludeFraction);

struct QaPair {
  std::string question;
  std::string answer;
  friend bool operator==(QaPair const&, QaPair const&) = default;
};

struct Completion {
  std::string query;
  std::string reference;
  friend bool operator==(Completion const&, Completion const&) = default;
};

struct ConceptVectorRecord {
  std::string concept_name;
  std::string model_id;
  std::size_t layer = 0;
  std::size_t dim = 0;
  std::vector<std::pair<std::string, double>> top_tokens;
  std::vector<QaPair> qa;
  std::vector<Completion> completions;
  friend bool operator==(ConceptVectorRecord const&, ConceptVectorRecord const&) = default;

  VectorSite site() const { return {layer, dim}; }
};

std::string record_to_json(ConceptVectorRecord const& record);
ConceptVectorRecord record_from_json(std::string const& text);

// Throws ValidationError when the record lacks QA pairs or completions.
void check_record(ConceptVectorRecord const& record);
void emit_record(ConceptVectorRecord const& record, std::filesystem::path const& path);
ConceptVectorRecord load_record(std::filesystem::path const& path);

// Concept test material before it is bound to a vector.
struct ConceptTestSet {
  std::string concept_name;
  std::vector<QaPair> qa;
  std::vector<Completion> completions;
};

// [{"concept", "qa": [...], "completions": [...]}, ...]
std::vector<ConceptTestSet> parse_test_sets(std::string const& json_text);
std::vector<ConceptTestSet> load_test_sets(std::filesystem::path const& path);
std::string test_sets_to_json(std::span<ConceptTestSet const> sets);

ConceptVectorRecord make_record(ModelWeights const& w, VectorSite site, ConceptTestSet const& tests,
                                std::size_t k = kDefaultTopK);

struct ValidationOptions {
  double sigma = kDefaultValidationSigma;
  bool relative = false;
  std::uint64_t seed = 0;
  double threshold = kDefaultValidationThreshold;
  std::size_t max_new = 8;
};

struct ValidationReport {
  VectorSite site;
  double target_bleu_drop = 0.0;
  double unrelated_bleu_drop = 0.0;
  double target_rouge_drop = 0.0;
  double unrelated_rouge_drop = 0.0;
  bool accepted = false;
  double sigma = 0.0;
  std::size_t unrelated_concepts_used = 0;
};

ValidationReport validate_concept(ModelWeights const& w, ConceptVectorRecord const& record,
                                  std::span<ConceptVectorRecord const> unrelated, ValidationOptions const& options);

} // namespace cvtrace
