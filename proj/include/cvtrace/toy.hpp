#pragma once

#include "cvtrace/model.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cvtrace {

struct ToyConfig {
  std::size_t num_layers = 2;
  std::size_t model_dim = 32;
  std::size_t mlp_dim = 64;
  std::size_t vocab_size = 128;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  bool gated = false;
  std::uint64_t seed = 0;
};

// Gaussian init with scale 1/sqrt(d). Vocab entries are "w0", "w1", ...
ModelWeights init_toy(ToyConfig const& config);

// Per-layer activations for a sequence; each matrix has one row per position.
struct LayerTrace {
  Matrix hidden_in;    // x^l, positions x d
  Matrix coefficients; // m^l, positions x d_i
  Matrix mlp_output;   // o^l, positions x d
};

struct ActivationTrace {
  std::vector<LayerTrace> layers;
};

struct ForwardResult {
  Matrix logits; // positions x |V|
  ActivationTrace trace;
};

ForwardResult forward(ModelWeights const& w, std::span<TokenId const> tokens);

// Final hidden state of one token (the residual stream after all layers),
// and the hidden state entering `layer`.
Vector hidden_state(ModelWeights const& w, TokenId token, std::size_t layer);

Vector token_logits(ModelWeights const& w, TokenId token);

struct LossAndGrad {
  double loss = 0.0;
  Parameters grads;
};

// Mean next-token cross-entropy over all predicted positions of the batch and
// its exact gradient.
LossAndGrad loss_and_grad(ModelWeights const& w, std::span<TokenSequence const> batch);
double loss(ModelWeights const& w, std::span<TokenSequence const> batch);

// Which tensors an optimizer may update.
struct ParamGroups {
  bool embedding = true;
  bool keys = true;
  bool values = true;
  bool gates = true;

  static ParamGroups all() { return {}; }
  static ParamGroups embedding_only() { return {true, false, false, false}; }
  static ParamGroups values_only() { return {false, false, true, false}; }
};

struct TrainOptions {
  double lr = 0.1;
  std::size_t steps = 100;
  std::uint64_t seed = 0;
  std::size_t batch_size = 8; // 0 means the full corpus every step
  double grad_clip = 0.0;     // global L2 clip, 0 disables
  ParamGroups groups;
};

// Draws minibatch indices from seeded per-epoch shuffles of [0, n).
class BatchSampler {
public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

private:
  std::size_t n_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

double grad_norm(Parameters const& g, ParamGroups groups);

// p -= step * g over the enabled groups.
void apply_update(Parameters& p, Parameters const& g, double step, ParamGroups groups);

// g += scale * h
void accumulate(Parameters& g, Parameters const& h, double scale);

ModelWeights train(ModelWeights const& w, std::span<TokenSequence const> corpus, TrainOptions const& options);
ModelWeights train(ModelWeights const& w, std::span<TokenSequence const> corpus, double lr, std::size_t steps,
                   std::uint64_t seed);

// Installs a concept vector. The key row gives exactly `strength` on the
// trigger's hidden state entering `layer` and is ridge-fitted to -strength on
// every other token's (0 for gated layers, whose gate row is fitted to 1 on
// the trigger and 0 elsewhere). The value row is the ridge fit of a projection
// equal to `strength` on the concept tokens and 0 elsewhere, with the mean
// logit held at strength * |concept| / |V|.
ModelWeights plant_concept(ModelWeights const& w, std::size_t layer, std::size_t j, TokenId trigger,
                           std::span<TokenId const> concept_tokens, double strength);

struct GenerationOutput {
  TokenSequence token_ids;
  std::string text;
  std::optional<std::vector<ActivationTrace>> trace; // one per generated position
};

// Greedy decoding from the last prompt token; ties go to the lowest id.
GenerationOutput generate(ModelWeights const& w, std::span<TokenId const> prompt, std::size_t max_new,
                          bool capture_trace = false);

// Continuation text for a whitespace-tokenized prompt.
std::string generate_text(ModelWeights const& w, std::string const& prompt, std::size_t max_new);

// One whitespace-tokenized sequence per non-empty line.
std::vector<TokenSequence> parse_corpus(Vocabulary const& vocab, std::string const& text);
std::vector<TokenSequence> read_corpus(Vocabulary const& vocab, std::string const& path);

double activate(Nonlinearity f, double x);

} // namespace cvtrace
