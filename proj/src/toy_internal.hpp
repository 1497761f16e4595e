#pragma once

#include "cvtrace/toy.hpp"

namespace cvtrace::detail {

// Cached intermediates of one token's pass through the first `layers` layers.
struct TokenPass {
  std::vector<Vector> x; // hidden state entering each layer, plus the final state
  std::vector<Vector> h; // key pre-activations
  std::vector<Vector> g; // gate values (gated models only)
  std::vector<Vector> m; // coefficients
  std::vector<Vector> o; // MLP outputs
  Vector const& final_state() const { return x.back(); }
};

TokenPass run_token(ModelWeights const& w, TokenId token, std::size_t layers);
TokenPass run_token(ModelWeights const& w, TokenId token);

Vector logits_of(ModelWeights const& w, std::span<double const> state);

// In-place softmax; returns log-sum-exp of the input.
double softmax_inplace(std::span<double> z);

// Accumulates into `grads` the gradient of a scalar whose derivative with
// respect to this token's logits is `dlogits`.
void backprop_token(ModelWeights const& w, TokenId token, TokenPass const& pass, std::span<double const> dlogits,
                    Parameters& grads);

void check_token(ModelWeights const& w, TokenId token);

} // namespace cvtrace::detail
