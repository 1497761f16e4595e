#pragma once

#include "cvtrace/matrix.hpp"

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cvtrace {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

// Position of one value vector: row `index` of the value matrix at `layer`.
struct VectorSite {
  std::size_t layer = 0;
  std::size_t index = 0;
  friend auto operator<=>(VectorSite const&, VectorSite const&) = default;
};

enum class Nonlinearity { relu, silu };

char const* nonlinearity_name(Nonlinearity f);
Nonlinearity parse_nonlinearity(std::string_view name);

// Token strings with a reverse index. Entries are unique.
class Vocabulary {
public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  std::string const& token(TokenId id) const { return tokens_.at(id); }
  std::vector<std::string> const& tokens() const { return tokens_; }

  bool contains(std::string_view token) const;
  TokenId id(std::string_view token) const; // throws InputError when absent

  // Whitespace tokenization; unknown tokens raise InputError.
  TokenSequence encode(std::string_view text) const;
  std::string decode(std::span<TokenId const> ids) const;

  friend bool operator==(Vocabulary const& a, Vocabulary const& b) { return a.tokens_ == b.tokens_; }

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Trainable tensors. Key, value and gate matrices are (mlp_dim x model_dim);
// the embedding is (vocab_size x model_dim). Gates are empty for ungated models
// and keys may be empty for projection-only checkpoints.
struct Parameters {
  Matrix embedding;
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
  std::vector<Matrix> gates;

  friend bool operator==(Parameters const&, Parameters const&) = default;

  // Zero tensors with the same shapes.
  Parameters zeros_like() const;
};

struct ModelWeights : Parameters {
  Nonlinearity nonlinearity = Nonlinearity::relu;
  Vocabulary vocab;
  std::string model_id;

  std::size_t num_layers() const { return values.size(); }
  std::size_t model_dim() const { return embedding.cols(); }
  std::size_t mlp_dim() const { return values.empty() ? 0 : values.front().rows(); }
  std::size_t vocab_size() const { return embedding.rows(); }
  bool gated() const { return !gates.empty(); }
  bool has_keys() const { return !keys.empty(); }

  // Throws ShapeError on inconsistent shapes, ValidationError on non-finite
  // entries or a vocab that does not match the embedding.
  void validate() const;

  friend bool operator==(ModelWeights const&, ModelWeights const&) = default;
};

void check_site(ModelWeights const& w, VectorSite site);

// Copy of the value vector at `site` (row of the stored value matrix).
Vector value_column(ModelWeights const& w, std::size_t layer, std::size_t j);

} // namespace cvtrace
