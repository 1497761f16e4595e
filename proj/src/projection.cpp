#include "cvtrace/projection.hpp"

#include "cvtrace/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cvtrace {

TokenScores project(ModelWeights const& w, std::span<double const> v) {
  if (v.size() != w.model_dim())
    throw InputError("vector length " + std::to_string(v.size()) + " does not match model dim " +
                     std::to_string(w.model_dim()));
  TokenScores s;
  s.scores.resize(w.vocab_size());
  matvec(w.embedding, v, s.scores);
  return s;
}

TokenScores project_vector(ModelWeights const& w, std::size_t layer, std::size_t j) {
  check_site(w, {layer, j});
  return project(w, w.values[layer].row(j));
}

TopTokenSet top_k(TokenScores const& scores, Vocabulary const& vocab, std::size_t k) {
  if (k == 0)
    throw InputError("k must be at least 1");
  std::size_t const n = scores.scores.size();
  if (vocab.size() != n)
    throw InputError("vocab size does not match score vector length");
  std::size_t const kk = std::min(k, n);
  std::vector<TokenId> ids(n);
  std::iota(ids.begin(), ids.end(), TokenId{0});
  auto const& s = scores.scores;
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(kk), ids.end(),
                    [&](TokenId a, TokenId b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
  TopTokenSet out;
  out.k = kk;
  out.entries.reserve(kk);
  for (std::size_t i = 0; i < kk; ++i)
    out.entries.push_back({vocab.token(ids[i]), ids[i], s[ids[i]]});
  return out;
}

TopTokenSet top_k_of(ModelWeights const& w, std::span<double const> v, std::size_t k) {
  return top_k(project(w, v), w.vocab, k);
}

TopTokenSet top_k_of(ModelWeights const& w, VectorSite site, std::size_t k) {
  return top_k(project_vector(w, site.layer, site.index), w.vocab, k);
}

Vector mean_row(Matrix const& embedding) {
  Vector mean(embedding.cols(), 0.0);
  for (std::size_t r = 0; r < embedding.rows(); ++r) {
    auto row = embedding.row(r);
    for (std::size_t c = 0; c < mean.size(); ++c)
      mean[c] += row[c];
  }
  double const inv = embedding.rows() ? 1.0 / static_cast<double>(embedding.rows()) : 0.0;
  for (double& x : mean)
    x *= inv;
  return mean;
}

double avg_logit(ModelWeights const& w, std::size_t layer, std::size_t j) {
  check_site(w, {layer, j});
  Vector const mean = mean_row(w.embedding);
  return dot(mean, w.values[layer].row(j));
}

std::size_t kept_count(std::size_t mlp_dim, double exclude_fraction) {
  if (!(exclude_fraction >= 0.0 && exclude_fraction < 1.0))
    throw InputError("exclude_fraction must lie in [0, 1)");
  auto const dropped =
      static_cast<std::size_t>(std::floor(exclude_fraction * static_cast<double>(mlp_dim) + 1e-9));
  return mlp_dim - std::min(dropped, mlp_dim);
}

CandidateList scan_values(Matrix const& values, std::span<double const> mean, std::size_t layer,
                          double exclude_fraction) {
  if (values.cols() != mean.size())
    throw ShapeError("value matrix width does not match the embedding mean");
  std::size_t const keep = kept_count(values.rows(), exclude_fraction);
  CandidateList out;
  out.layer = layer;
  out.excluded_fraction = exclude_fraction;
  out.kept.resize(values.rows());
  for (std::size_t j = 0; j < values.rows(); ++j)
    out.kept[j] = {j, dot(mean, values.row(j))};
  auto by_score = [](Candidate const& a, Candidate const& b) {
    return a.score != b.score ? a.score > b.score : a.index < b.index;
  };
  std::partial_sort(out.kept.begin(), out.kept.begin() + static_cast<std::ptrdiff_t>(keep), out.kept.end(),
                    by_score);
  out.kept.resize(keep);
  return out;
}

CandidateList scan_layer(ModelWeights const& w, std::size_t layer, double exclude_fraction) {
  if (layer >= w.num_layers())
    throw IndexError("layer " + std::to_string(layer) + " out of range");
  Vector const mean = mean_row(w.embedding);
  return scan_values(w.values[layer], mean, layer, exclude_fraction);
}

namespace {

void check_range(std::size_t lo, std::size_t hi, std::size_t num_layers) {
  if (lo > hi || hi >= num_layers)
    throw IndexError("layer range [" + std::to_string(lo) + ", " + std::to_string(hi) + "] invalid for " +
                     std::to_string(num_layers) + " layers");
}

} // namespace

std::vector<CandidateList> scan_model(ModelWeights const& w, std::size_t lo, std::size_t hi,
                                      double exclude_fraction) {
  check_range(lo, hi, w.num_layers());
  Vector const mean = mean_row(w.embedding);
  std::vector<CandidateList> out;
  for (std::size_t l = lo; l <= hi; ++l)
    out.push_back(scan_values(w.values[l], mean, l, exclude_fraction));
  return out;
}

std::vector<CandidateList> scan_streamed(std::span<double const> mean, ValueMatrixSource const& source,
                                         std::size_t lo, std::size_t hi, double exclude_fraction) {
  if (lo > hi)
    throw IndexError("layer range lower bound exceeds upper bound");
  std::vector<CandidateList> out;
  for (std::size_t l = lo; l <= hi; ++l) {
    Matrix const values = source(l);
    out.push_back(scan_values(values, mean, l, exclude_fraction));
  }
  return out;
}

std::vector<CandidateList> scan_file(std::filesystem::path const& path, std::size_t lo, std::size_t hi,
                                     double exclude_fraction, std::optional<TensorManifest> const& manifest) {
  TensorFile file(path);
  TensorManifest const m = manifest ? *manifest : canonical_manifest(file);
  m.validate();
  ManifestEntry const* embed = nullptr;
  std::vector<ManifestEntry const*> values;
  for (auto const& e : m.entries) {
    if (e.role == TensorRole::embed) {
      embed = &e;
    } else if (e.role == TensorRole::value) {
      if (values.size() <= e.layer)
        values.resize(e.layer + 1, nullptr);
      values[e.layer] = &e;
    }
  }
  if (!embed)
    throw MissingTensorError(path.string() + ": no embedding tensor");
  check_range(lo, hi, values.size());
  Vector mean;
  {
    Matrix const e = file.read_matrix(embed->source_name, embed->transpose);
    mean = mean_row(e);
  }
  return scan_streamed(
      mean,
      [&](std::size_t layer) {
        if (!values[layer])
          throw MissingTensorError(path.string() + ": missing value tensor for layer " + std::to_string(layer));
        Matrix v = file.read_matrix(values[layer]->source_name, values[layer]->transpose);
        if (v.cols() != mean.size())
          throw ShapeError("value tensor for layer " + std::to_string(layer) + " does not match the embedding width");
        return v;
      },
      lo, hi, exclude_fraction);
}

} // namespace cvtrace
