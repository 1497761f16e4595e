#pragma once

#include "cvtrace/kvconfig.hpp"
#include "cvtrace/localization.hpp"
#include "cvtrace/metrics.hpp"
#include "cvtrace/model.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cvtrace {

struct PromptActivation {
  std::size_t positions = 0;
  double target_sum = 0.0;
  double others_sum = 0.0; // sum over positions of the mean of the other coefficients
  double target_mean = 0.0;
  double others_mean = 0.0;
  double target_max = 0.0;
};

struct ActivationStats {
  double target_mean = 0.0;
  double others_mean = 0.0;
  double target_max = 0.0;
  std::vector<PromptActivation> per_prompt;
};

// Coefficient of vector `i` at `layer` against the mean of the other
// coefficients in that layer, averaged over every position of every prompt.
ActivationStats activation_stats(ModelWeights const& w, std::span<TokenSequence const> prompts, std::size_t layer,
                                 std::size_t i, std::optional<TokenSequence> const& prefix = std::nullopt);

enum class UnlearnMethod { none, needle, gradient_ascent, gradient_difference };

UnlearnMethod parse_unlearn_method(std::string_view name);

struct PipelineConfig {
  std::filesystem::path model;
  std::filesystem::path tests;    // concept test sets
  std::filesystem::path lexicons; // used by the lexicon scorer
  std::filesystem::path out_dir;
  std::optional<std::size_t> layer_lo;
  std::optional<std::size_t> layer_hi;
  double exclude_fraction = 0.3;
  std::size_t k = 200;
  std::size_t score_k = 200; // tokens shown to the scorer
  std::string scorer = "lexicon";
  double select_threshold = 0.85;
  double sigma = 0.1;
  bool sigma_relative = false;
  double validation_threshold = 0.2;
  std::size_t unrelated = 5;
  std::size_t max_new = 4;
  std::size_t max_in_flight = 4;
  std::uint64_t seed = 0;
  UnlearnMethod unlearn = UnlearnMethod::none;
  double unlearn_lr = 0.05;
  std::size_t unlearn_steps = 200;
  double kl_weight = 1.0;
  bool value_mats_only = false;
  double grad_clip = 1.0;
  std::size_t intrinsic_k = 200;

  // Canonical config text, hashed into the manifest.
  std::string source_text;

  static PipelineConfig from_kv(KeyValueConfig const& kv, std::filesystem::path const& base_dir = {});
};

// Optional confirmation of each selected vector before validation.
using ReviewGate = std::function<bool(SelectedVector const& candidate, TopTokenSet const& tokens)>;

struct PipelineReport {
  std::filesystem::path out_dir;
  std::vector<std::filesystem::path> artifacts; // relative to out_dir
  std::vector<SelectedVector> selected;
  std::vector<ValidationReport> validations;
  std::vector<ConceptVectorRecord> records;
};

// scan -> score -> select -> validate -> emit records, then optionally
// unlearn each accepted concept and report intrinsic and behavioral metrics.
// On failure the partial outputs move to <out_dir>/failed and the error
// names the stage.
PipelineReport run_pipeline(PipelineConfig const& config, ReviewGate const& review = {});

} // namespace cvtrace
