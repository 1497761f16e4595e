#include "cvtrace/error.hpp"
#include "cvtrace/model.hpp"

#include <sstream>

namespace cvtrace {

char const* nonlinearity_name(Nonlinearity f) {
  return f == Nonlinearity::relu ? "relu" : "silu";
}

Nonlinearity parse_nonlinearity(std::string_view name) {
  if (name == "relu")
    return Nonlinearity::relu;
  if (name == "silu")
    return Nonlinearity::silu;
  throw InputError("unknown nonlinearity '" + std::string(name) + "'");
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
      throw ValidationError("duplicate vocab entry '" + tokens_[i] + "'");
  }
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.find(std::string(token)) != index_.end();
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end())
    throw InputError("token '" + std::string(token) + "' is not in the vocabulary");
  return it->second;
}

TokenSequence Vocabulary::encode(std::string_view text) const {
  TokenSequence ids;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok)
    ids.push_back(id(tok));
  return ids;
}

std::string Vocabulary::decode(std::span<TokenId const> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tokens_.size())
      throw IndexError("token id " + std::to_string(ids[i]) + " out of range");
    if (i)
      out += ' ';
    out += tokens_[ids[i]];
  }
  return out;
}

Parameters Parameters::zeros_like() const {
  Parameters z;
  z.embedding = Matrix(embedding.rows(), embedding.cols());
  for (auto const& m : keys)
    z.keys.emplace_back(m.rows(), m.cols());
  for (auto const& m : values)
    z.values.emplace_back(m.rows(), m.cols());
  for (auto const& m : gates)
    z.gates.emplace_back(m.rows(), m.cols());
  return z;
}

void ModelWeights::validate() const {
  std::size_t const L = values.size();
  std::size_t const d = embedding.cols();
  if (L == 0)
    throw ShapeError("model has no layers");
  std::size_t const di = values.front().rows();
  auto check = [&](Matrix const& m, char const* what, std::size_t layer) {
    if (m.rows() != di || m.cols() != d)
      throw ShapeError(std::string(what) + " matrix at layer " + std::to_string(layer) + " is " +
                       std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                       std::to_string(di) + "x" + std::to_string(d));
    if (!m.all_finite())
      throw ValidationError(std::string(what) + " matrix at layer " + std::to_string(layer) +
                            " has non-finite entries");
  };
  if (!keys.empty() && keys.size() != L)
    throw ShapeError("key matrix count differs from layer count");
  if (!gates.empty() && gates.size() != L)
    throw ShapeError("gate matrix count differs from layer count");
  for (std::size_t l = 0; l < L; ++l) {
    check(values[l], "value", l);
    if (!keys.empty())
      check(keys[l], "key", l);
    if (!gates.empty())
      check(gates[l], "gate", l);
  }
  if (!embedding.all_finite())
    throw ValidationError("embedding has non-finite entries");
  if (vocab.size() != embedding.rows())
    throw ValidationError("vocab has " + std::to_string(vocab.size()) + " entries but embedding has " +
                          std::to_string(embedding.rows()) + " rows");
}

void check_site(ModelWeights const& w, VectorSite site) {
  if (site.layer >= w.num_layers())
    throw IndexError("layer " + std::to_string(site.layer) + " out of range (L=" +
                     std::to_string(w.num_layers()) + ")");
  if (site.index >= w.mlp_dim())
    throw IndexError("vector index " + std::to_string(site.index) + " out of range (d_i=" +
                     std::to_string(w.mlp_dim()) + ")");
}

Vector value_column(ModelWeights const& w, std::size_t layer, std::size_t j) {
  check_site(w, {layer, j});
  auto row = w.values[layer].row(j);
  return Vector(row.begin(), row.end());
}

} // namespace cvtrace
