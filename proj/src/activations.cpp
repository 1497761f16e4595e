#include "cvtrace/error.hpp"
#include "cvtrace/harness.hpp"
#include "cvtrace/toy.hpp"

#include <algorithm>
#include <limits>

namespace cvtrace {

ActivationStats activation_stats(ModelWeights const& w, std::span<TokenSequence const> prompts, std::size_t layer,
                                 std::size_t i, std::optional<TokenSequence> const& prefix) {
  check_site(w, {layer, i});
  if (prompts.empty())
    throw InputError("activation statistics need at least one prompt");
  std::size_t const di = w.mlp_dim();
  ActivationStats out;
  out.target_max = -std::numeric_limits<double>::infinity();
  std::size_t total_positions = 0;
  double target_total = 0.0;
  double others_total = 0.0;
  for (auto const& prompt : prompts) {
    TokenSequence tokens;
    if (prefix)
      tokens = *prefix;
    tokens.insert(tokens.end(), prompt.begin(), prompt.end());
    if (tokens.empty())
      throw InputError("empty prompt");
    ForwardResult const fr = forward(w, tokens);
    Matrix const& m = fr.trace.layers[layer].coefficients;
    PromptActivation pa;
    pa.positions = tokens.size();
    pa.target_max = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      auto row = m.row(t);
      double const target = row[i];
      double others = 0.0;
      for (std::size_t j = 0; j < di; ++j)
        if (j != i)
          others += row[j];
      if (di > 1)
        others /= static_cast<double>(di - 1);
      pa.target_sum += target;
      pa.others_sum += others;
      pa.target_max = std::max(pa.target_max, target);
    }
    pa.target_mean = pa.target_sum / static_cast<double>(pa.positions);
    pa.others_mean = pa.others_sum / static_cast<double>(pa.positions);
    total_positions += pa.positions;
    target_total += pa.target_sum;
    others_total += pa.others_sum;
    out.target_max = std::max(out.target_max, pa.target_max);
    out.per_prompt.push_back(pa);
  }
  out.target_mean = target_total / static_cast<double>(total_positions);
  out.others_mean = others_total / static_cast<double>(total_positions);
  return out;
}

} // namespace cvtrace
