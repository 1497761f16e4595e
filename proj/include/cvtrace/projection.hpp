#pragma once

#include "cvtrace/model.hpp"
#include "cvtrace/tensor_store.hpp"

#include <functional>
#include <string>
#include <vector>

namespace cvtrace {

inline constexpr std::size_t kDefaultTopK = 200;
inline constexpr double kDefaultExcludeFraction = 0.3;

// One logit per vocabulary entry.
struct TokenScores {
  Vector scores;
};

struct TopToken {
  std::string token;
  TokenId id = 0;
  double score = 0.0;
  friend bool operator==(TopToken const&, TopToken const&) = default;
};

struct TopTokenSet {
  std::size_t k = 0;
  std::vector<TopToken> entries; // score descending, id ascending on ties
  friend bool operator==(TopTokenSet const&, TopTokenSet const&) = default;
};

struct Candidate {
  std::size_t index = 0;
  double score = 0.0;
};

struct CandidateList {
  std::size_t layer = 0;
  std::vector<Candidate> kept; // avg-logit descending, index ascending on ties
  double excluded_fraction = 0.0;
};

TokenScores project(ModelWeights const& w, std::span<double const> v);
TokenScores project_vector(ModelWeights const& w, std::size_t layer, std::size_t j);

TopTokenSet top_k(TokenScores const& scores, Vocabulary const& vocab, std::size_t k = kDefaultTopK);
TopTokenSet top_k_of(ModelWeights const& w, std::span<double const> v, std::size_t k = kDefaultTopK);
TopTokenSet top_k_of(ModelWeights const& w, VectorSite site, std::size_t k = kDefaultTopK);

// Column means of the embedding: the average over vocabulary rows.
Vector mean_row(Matrix const& embedding);

double avg_logit(ModelWeights const& w, std::size_t layer, std::size_t j);

// Number of candidates kept out of `mlp_dim` after dropping the lowest
// floor(fraction * mlp_dim).
std::size_t kept_count(std::size_t mlp_dim, double exclude_fraction);

// Scores the rows of one value matrix against a precomputed mean row.
CandidateList scan_values(Matrix const& values, std::span<double const> mean, std::size_t layer,
                          double exclude_fraction = kDefaultExcludeFraction);

CandidateList scan_layer(ModelWeights const& w, std::size_t layer, double exclude_fraction = kDefaultExcludeFraction);

std::vector<CandidateList> scan_model(ModelWeights const& w, std::size_t lo, std::size_t hi,
                                      double exclude_fraction = kDefaultExcludeFraction);

// Produces one layer's value matrix on demand, for models whose value
// matrices do not fit in memory at once.
using ValueMatrixSource = std::function<Matrix(std::size_t layer)>;

std::vector<CandidateList> scan_streamed(std::span<double const> mean, ValueMatrixSource const& source,
                                         std::size_t lo, std::size_t hi,
                                         double exclude_fraction = kDefaultExcludeFraction);

// Streams value matrices from a container file; only the embedding mean and
// one value matrix are held in memory at a time.
std::vector<CandidateList> scan_file(std::filesystem::path const& path, std::size_t lo, std::size_t hi,
                                     double exclude_fraction = kDefaultExcludeFraction,
                                     std::optional<TensorManifest> const& manifest = std::nullopt);

} // namespace cvtrace
