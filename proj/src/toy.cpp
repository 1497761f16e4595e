#include "toy_internal.hpp"

#include "cvtrace/error.hpp"
#include "cvtrace/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace cvtrace {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double activate_grad(Nonlinearity f, double x) {
  if (f == Nonlinearity::relu)
    return x > 0.0 ? 1.0 : 0.0;
  double const s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

void require_keys(ModelWeights const& w) {
  if (!w.has_keys())
    throw InputError("model has no key matrices; forward passes are unavailable for projection-only weights");
}

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Matrix m(rows, cols);
  for (double& x : m.data())
    x = rng.gaussian() * scale;
  return m;
}

} // namespace

double activate(Nonlinearity f, double x) { return f == Nonlinearity::relu ? (x > 0.0 ? x : 0.0) : x * sigmoid(x); }

namespace detail {

void check_token(ModelWeights const& w, TokenId token) {
  if (token >= w.vocab_size())
    throw IndexError("token id " + std::to_string(token) + " out of range (|V|=" + std::to_string(w.vocab_size()) +
                     ")");
}

TokenPass run_token(ModelWeights const& w, TokenId token, std::size_t layers) {
  require_keys(w);
  check_token(w, token);
  std::size_t const di = w.mlp_dim();
  TokenPass p;
  auto e = w.embedding.row(token);
  p.x.emplace_back(e.begin(), e.end());
  for (std::size_t l = 0; l < layers; ++l) {
    Vector const& x = p.x.back();
    Vector h(di), m(di);
    matvec(w.keys[l], x, h);
    if (w.gated()) {
      Vector g(di);
      matvec(w.gates[l], x, g);
      for (std::size_t j = 0; j < di; ++j)
        m[j] = activate(w.nonlinearity, h[j]) * g[j];
      p.g.push_back(std::move(g));
    } else {
      for (std::size_t j = 0; j < di; ++j)
        m[j] = activate(w.nonlinearity, h[j]);
    }
    Vector o(x.size(), 0.0);
    matvec_t_add(w.values[l], m, o);
    Vector next = x;
    for (std::size_t c = 0; c < next.size(); ++c)
      next[c] += o[c];
    p.o.push_back(std::move(o));
    p.h.push_back(std::move(h));
    p.m.push_back(std::move(m));
    p.x.push_back(std::move(next));
  }
  return p;
}

TokenPass run_token(ModelWeights const& w, TokenId token) { return run_token(w, token, w.num_layers()); }

Vector logits_of(ModelWeights const& w, std::span<double const> state) {
  Vector z(w.vocab_size());
  matvec(w.embedding, state, z);
  return z;
}

double softmax_inplace(std::span<double> z) {
  double const mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z)
    v /= sum;
  return mx + std::log(sum);
}

void backprop_token(ModelWeights const& w, TokenId token, TokenPass const& pass, std::span<double const> dlogits,
                    Parameters& grads) {
  std::size_t const L = w.num_layers();
  std::size_t const d = w.model_dim();
  std::size_t const di = w.mlp_dim();
  // logits = E x_L
  add_outer(grads.embedding, dlogits, pass.final_state());
  Vector dx(d, 0.0);
  matvec_t_add(w.embedding, dlogits, dx);

  Vector dm(di), dh(di), dg(di);
  for (std::size_t l = L; l-- > 0;) {
    Vector const& x = pass.x[l];
    Vector const& h = pass.h[l];
    // o = W_V^T m
    add_outer(grads.values[l], pass.m[l], dx);
    matvec(w.values[l], dx, dm);
    Vector dx_in = dx;
    if (w.gated()) {
      Vector const& g = pass.g[l];
      for (std::size_t j = 0; j < di; ++j) {
        dg[j] = dm[j] * activate(w.nonlinearity, h[j]);
        dh[j] = dm[j] * g[j] * activate_grad(w.nonlinearity, h[j]);
      }
      add_outer(grads.gates[l], dg, x);
      matvec_t_add(w.gates[l], dg, dx_in);
    } else {
      for (std::size_t j = 0; j < di; ++j)
        dh[j] = dm[j] * activate_grad(w.nonlinearity, h[j]);
    }
    add_outer(grads.keys[l], dh, x);
    matvec_t_add(w.keys[l], dh, dx_in);
    dx = std::move(dx_in);
  }
  auto erow = grads.embedding.row(token);
  for (std::size_t c = 0; c < d; ++c)
    erow[c] += dx[c];
}

} // namespace detail

ModelWeights init_toy(ToyConfig const& config) {
  if (config.num_layers == 0 || config.model_dim == 0 || config.mlp_dim == 0 || config.vocab_size == 0)
    throw InputError("toy config dimensions must all be at least 1");
  Rng rng(config.seed);
  double const scale = 1.0 / std::sqrt(static_cast<double>(config.model_dim));
  ModelWeights w;
  w.nonlinearity = config.nonlinearity;
  w.embedding = gaussian_matrix(rng, config.vocab_size, config.model_dim, scale);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    w.keys.push_back(gaussian_matrix(rng, config.mlp_dim, config.model_dim, scale));
    w.values.push_back(gaussian_matrix(rng, config.mlp_dim, config.model_dim, scale));
    if (config.gated)
      w.gates.push_back(gaussian_matrix(rng, config.mlp_dim, config.model_dim, scale));
  }
  std::vector<std::string> tokens;
  tokens.reserve(config.vocab_size);
  for (std::size_t i = 0; i < config.vocab_size; ++i)
    tokens.push_back("w" + std::to_string(i));
  w.vocab = Vocabulary(std::move(tokens));
  w.model_id = "toy-" + std::to_string(config.seed);
  return w;
}

ForwardResult forward(ModelWeights const& w, std::span<TokenId const> tokens) {
  require_keys(w);
  std::size_t const n = tokens.size();
  std::size_t const L = w.num_layers();
  std::size_t const d = w.model_dim();
  std::size_t const di = w.mlp_dim();
  ForwardResult out;
  out.logits = Matrix(n, w.vocab_size());
  out.trace.layers.resize(L);
  for (auto& lt : out.trace.layers) {
    lt.hidden_in = Matrix(n, d);
    lt.coefficients = Matrix(n, di);
    lt.mlp_output = Matrix(n, d);
  }
  for (std::size_t t = 0; t < n; ++t) {
    detail::TokenPass const p = detail::run_token(w, tokens[t]);
    for (std::size_t l = 0; l < L; ++l) {
      auto& lt = out.trace.layers[l];
      std::copy(p.x[l].begin(), p.x[l].end(), lt.hidden_in.row(t).begin());
      std::copy(p.m[l].begin(), p.m[l].end(), lt.coefficients.row(t).begin());
      std::copy(p.o[l].begin(), p.o[l].end(), lt.mlp_output.row(t).begin());
    }
    matvec(w.embedding, p.final_state(), out.logits.row(t));
  }
  return out;
}

Vector hidden_state(ModelWeights const& w, TokenId token, std::size_t layer) {
  if (layer > w.num_layers())
    throw IndexError("layer " + std::to_string(layer) + " out of range");
  return detail::run_token(w, token, layer).x.back();
}

Vector token_logits(ModelWeights const& w, TokenId token) {
  return detail::logits_of(w, detail::run_token(w, token).final_state());
}

namespace {

void check_batch(std::span<TokenSequence const> batch) {
  if (batch.empty())
    throw InputError("empty batch");
  for (auto const& s : batch)
    if (s.size() < 2)
      throw InputError("training sequences need at least two tokens");
}

std::size_t count_positions(std::span<TokenSequence const> batch) {
  std::size_t n = 0;
  for (auto const& s : batch)
    n += s.size() - 1;
  return n;
}

} // namespace

LossAndGrad loss_and_grad(ModelWeights const& w, std::span<TokenSequence const> batch) {
  check_batch(batch);
  require_keys(w);
  LossAndGrad out;
  out.grads = w.zeros_like();
  double const inv = 1.0 / static_cast<double>(count_positions(batch));
  for (auto const& seq : batch) {
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      detail::check_token(w, seq[t + 1]);
      detail::TokenPass const p = detail::run_token(w, seq[t]);
      Vector z = detail::logits_of(w, p.final_state());
      double const lse = detail::softmax_inplace(z);
      // z now holds probabilities; loss term is lse - logit(target)
      double const target_logit = dot(w.embedding.row(seq[t + 1]), p.final_state());
      out.loss += (lse - target_logit) * inv;
      z[seq[t + 1]] -= 1.0;
      for (double& v : z)
        v *= inv;
      detail::backprop_token(w, seq[t], p, z, out.grads);
    }
  }
  return out;
}

double loss(ModelWeights const& w, std::span<TokenSequence const> batch) {
  check_batch(batch);
  double total = 0.0;
  double const inv = 1.0 / static_cast<double>(count_positions(batch));
  for (auto const& seq : batch) {
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      detail::check_token(w, seq[t + 1]);
      detail::TokenPass const p = detail::run_token(w, seq[t]);
      Vector z = detail::logits_of(w, p.final_state());
      double const target_logit = z[seq[t + 1]];
      total += (detail::softmax_inplace(z) - target_logit) * inv;
    }
  }
  return total;
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_size_(batch_size == 0 || batch_size > n ? n : batch_size), seed_(seed) {}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> batch;
  batch.reserve(batch_size_);
  if (batch_size_ == n_) {
    for (std::size_t i = 0; i < n_; ++i)
      batch.push_back(i);
    return batch;
  }
  while (batch.size() < batch_size_) {
    if (cursor_ == order_.size()) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i)
        order_[i] = i;
      Rng rng(derive_seed(seed_, epoch_++));
      rng.shuffle(order_);
      cursor_ = 0;
    }
    batch.push_back(order_[cursor_++]);
  }
  return batch;
}

namespace {

template <class F> void for_each_group(Parameters& p, Parameters const& g, ParamGroups groups, F&& f) {
  if (groups.embedding)
    f(p.embedding, g.embedding);
  if (groups.keys)
    for (std::size_t l = 0; l < p.keys.size(); ++l)
      f(p.keys[l], g.keys[l]);
  if (groups.values)
    for (std::size_t l = 0; l < p.values.size(); ++l)
      f(p.values[l], g.values[l]);
  if (groups.gates)
    for (std::size_t l = 0; l < p.gates.size(); ++l)
      f(p.gates[l], g.gates[l]);
}

} // namespace

double grad_norm(Parameters const& g, ParamGroups groups) {
  double sq = 0.0;
  auto add = [&](Matrix const& m) {
    for (double x : m.data())
      sq += x * x;
  };
  if (groups.embedding)
    add(g.embedding);
  if (groups.keys)
    for (auto const& m : g.keys)
      add(m);
  if (groups.values)
    for (auto const& m : g.values)
      add(m);
  if (groups.gates)
    for (auto const& m : g.gates)
      add(m);
  return std::sqrt(sq);
}

void apply_update(Parameters& p, Parameters const& g, double step, ParamGroups groups) {
  for_each_group(p, g, groups, [step](Matrix& dst, Matrix const& src) {
    auto& a = dst.data();
    auto const& b = src.data();
    for (std::size_t i = 0; i < a.size(); ++i)
      a[i] -= step * b[i];
  });
}

void accumulate(Parameters& g, Parameters const& h, double scale) {
  for_each_group(g, h, ParamGroups::all(), [scale](Matrix& dst, Matrix const& src) {
    auto& a = dst.data();
    auto const& b = src.data();
    for (std::size_t i = 0; i < a.size(); ++i)
      a[i] += scale * b[i];
  });
}

ModelWeights train(ModelWeights const& w, std::span<TokenSequence const> corpus, TrainOptions const& options) {
  if (!(options.lr > 0.0))
    throw InputError("learning rate must be positive");
  ModelWeights out = w;
  if (options.steps == 0)
    return out;
  check_batch(corpus);
  BatchSampler sampler(corpus.size(), options.batch_size, options.seed);
  std::vector<TokenSequence> batch;
  for (std::size_t step = 0; step < options.steps; ++step) {
    batch.clear();
    for (std::size_t i : sampler.next())
      batch.push_back(corpus[i]);
    LossAndGrad lg = loss_and_grad(out, batch);
    if (!std::isfinite(lg.loss))
      throw TrainingDivergedError("training loss became non-finite at step " + std::to_string(step));
    double scale = 1.0;
    if (options.grad_clip > 0.0) {
      double const norm = grad_norm(lg.grads, options.groups);
      if (norm > options.grad_clip)
        scale = options.grad_clip / norm;
    }
    apply_update(out, lg.grads, options.lr * scale, options.groups);
  }
  if (!std::isfinite(loss(out, corpus)))
    throw TrainingDivergedError("training loss became non-finite after the final step");
  return out;
}

ModelWeights train(ModelWeights const& w, std::span<TokenSequence const> corpus, double lr, std::size_t steps,
                   std::uint64_t seed) {
  TrainOptions options;
  options.lr = lr;
  options.steps = steps;
  options.seed = seed;
  return train(w, corpus, options);
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Ridge least squares min |X k - y|^2 + ridge |k|^2 subject to c.k = target,
// with ridge = 1e-3 * trace(X^T X) / d.
Vector constrained_ridge(RowMatrix const& X, Eigen::VectorXd const& y, Eigen::VectorXd const& c, double target) {
  Eigen::MatrixXd gram = X.transpose() * X;
  double const ridge = 1e-3 * gram.trace() / static_cast<double>(X.cols()) + 1e-12;
  gram.diagonal().array() += ridge;
  Eigen::LLT<Eigen::MatrixXd> const llt(gram);
  Eigen::VectorXd k = llt.solve(X.transpose() * y);
  Eigen::VectorXd const g = llt.solve(c);
  double const cg = c.dot(g);
  if (cg > 0.0)
    k += g * ((target - c.dot(k)) / cg);
  return Vector(k.data(), k.data() + k.size());
}

// Key row: exactly `on` for the trigger's hidden state, fitted to `off` for
// every other token's.
Vector fit_key(RowMatrix const& hidden, TokenId trigger, double on, double off) {
  Eigen::VectorXd y = Eigen::VectorXd::Constant(hidden.rows(), off);
  y(static_cast<Eigen::Index>(trigger)) = on;
  return constrained_ridge(hidden, y, hidden.row(static_cast<Eigen::Index>(trigger)).transpose(), on);
}

// Value row: projection fitted to `strength` on the concept tokens and 0
// elsewhere, with the mean logit pinned to strength * |concept| / |V| so the
// vector ranks high under the avg-logit scan.
Vector fit_value(Matrix const& embedding, std::span<TokenId const> concept_tokens, double strength) {
  Eigen::Map<RowMatrix const> const E(embedding.data().data(), static_cast<Eigen::Index>(embedding.rows()),
                                      static_cast<Eigen::Index>(embedding.cols()));
  Eigen::VectorXd y = Eigen::VectorXd::Zero(E.rows());
  for (TokenId t : concept_tokens)
    y(static_cast<Eigen::Index>(t)) = strength;
  Eigen::VectorXd const mean = E.colwise().mean().transpose();
  return constrained_ridge(E, y, mean, y.mean());
}

} // namespace

ModelWeights plant_concept(ModelWeights const& w, std::size_t layer, std::size_t j, TokenId trigger,
                           std::span<TokenId const> concept_tokens, double strength) {
  check_site(w, {layer, j});
  require_keys(w);
  if (concept_tokens.empty())
    throw InputError("concept token set is empty");
  detail::check_token(w, trigger);
  for (TokenId t : concept_tokens)
    detail::check_token(w, t);

  std::size_t const d = w.model_dim();
  RowMatrix hidden(static_cast<Eigen::Index>(w.vocab_size()), static_cast<Eigen::Index>(d));
  for (TokenId t = 0; t < w.vocab_size(); ++t) {
    Vector const x = hidden_state(w, t, layer);
    for (std::size_t c = 0; c < d; ++c)
      hidden(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) = x[c];
  }

  ModelWeights out = w;
  // Gated layers multiply key and gate, so the key aims for silence at 0.
  Vector const key = fit_key(hidden, trigger, strength, out.gated() ? 0.0 : -strength);
  std::copy(key.begin(), key.end(), out.keys[layer].row(j).begin());
  if (out.gated()) {
    Vector const gate = fit_key(hidden, trigger, 1.0, 0.0);
    std::copy(gate.begin(), gate.end(), out.gates[layer].row(j).begin());
  }
  Vector const value = fit_value(w.embedding, concept_tokens, strength);
  std::copy(value.begin(), value.end(), out.values[layer].row(j).begin());
  return out;
}

GenerationOutput generate(ModelWeights const& w, std::span<TokenId const> prompt, std::size_t max_new,
                          bool capture_trace) {
  GenerationOutput out;
  if (capture_trace)
    out.trace.emplace();
  if (max_new == 0)
    return out;
  if (prompt.empty())
    throw InputError("generation needs a non-empty prompt");
  TokenId current = prompt.back();
  for (std::size_t n = 0; n < max_new; ++n) {
    Vector z;
    if (capture_trace) {
      TokenId const one[1] = {current};
      ForwardResult fr = forward(w, one);
      auto row = fr.logits.row(0);
      z.assign(row.begin(), row.end());
      out.trace->push_back(std::move(fr.trace));
    } else {
      z = token_logits(w, current);
    }
    // max_element returns the first maximum, i.e. the lowest id on ties
    current = static_cast<TokenId>(std::max_element(z.begin(), z.end()) - z.begin());
    out.token_ids.push_back(current);
  }
  out.text = w.vocab.decode(out.token_ids);
  return out;
}

std::string generate_text(ModelWeights const& w, std::string const& prompt, std::size_t max_new) {
  TokenSequence const ids = w.vocab.encode(prompt);
  return generate(w, ids, max_new).text;
}

std::vector<TokenSequence> parse_corpus(Vocabulary const& vocab, std::string const& text) {
  std::vector<TokenSequence> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    TokenSequence seq = vocab.encode(line);
    if (!seq.empty())
      out.push_back(std::move(seq));
  }
  return out;
}

std::vector<TokenSequence> read_corpus(Vocabulary const& vocab, std::string const& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open corpus " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_corpus(vocab, ss.str());
}

} // namespace cvtrace
