#pragma once

#include "cvtrace/model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace cvtrace {

struct NoiseSpec {
  double sigma = 0.1;
  std::uint64_t seed = 0;
  bool relative = false; // scale sigma by the RMS of the target vector
};

// Copy of `w` with v <- v + eps at `site`, eps ~ N(0, sigma^2) i.i.d.
ModelWeights needle(ModelWeights const& w, std::size_t layer, std::size_t j, NoiseSpec const& spec);

// The noise vector needle would add, without touching any weights.
Vector needle_noise(std::size_t dim, double sigma, std::uint64_t seed);

// Toy-scale defaults. Checkpoint-scale runs typically use lr in
// {1e-5, 2e-5, 5e-5} with batch sizes {8, 16, 32}.
struct UnlearnConfig {
  double lr = 0.05;
  std::size_t steps = 200;
  std::uint64_t seed = 0;
  double kl_weight = 1.0;
  bool value_mats_only = false;
  double grad_clip = 1.0;     // global L2 clip, 0 disables
  std::size_t batch_size = 0; // 0 means the full set every step
};

struct StepLog {
  std::size_t step = 0;
  double forget_loss = 0.0;
  double kl = 0.0; // retain-set KL(original || current), gradient difference only
};

struct UnlearnResult {
  ModelWeights weights;
  std::vector<StepLog> log;
  std::size_t steps_run = 0;
};

// Called before every step with the current weights; returning true stops
// optimization early.
using StopCondition = std::function<bool(ModelWeights const& current, std::size_t step)>;

UnlearnResult gradient_ascent(ModelWeights const& w, std::span<TokenSequence const> forget, UnlearnConfig const& cfg,
                              StopCondition const& stop = {});

UnlearnResult gradient_difference(ModelWeights const& w, std::span<TokenSequence const> forget,
                                  std::span<TokenSequence const> retain, UnlearnConfig const& cfg,
                                  StopCondition const& stop = {});

// Mean over retain positions of KL(p_reference || p_current).
double retain_kl(ModelWeights const& reference, ModelWeights const& current, std::span<TokenSequence const> retain);

} // namespace cvtrace
