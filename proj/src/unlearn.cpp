#include "cvtrace/unlearn.hpp"

#include "cvtrace/error.hpp"
#include "cvtrace/rng.hpp"
#include "toy_internal.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace cvtrace {

Vector needle_noise(std::size_t dim, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0))
    throw InputError("noise sigma must be non-negative");
  Rng rng(seed);
  Vector eps(dim);
  for (double& x : eps)
    x = sigma * rng.gaussian();
  return eps;
}

ModelWeights needle(ModelWeights const& w, std::size_t layer, std::size_t j, NoiseSpec const& spec) {
  check_site(w, {layer, j});
  if (!(spec.sigma >= 0.0))
    throw InputError("noise sigma must be non-negative");
  ModelWeights out = w;
  if (spec.sigma == 0.0)
    return out;
  auto v = out.values[layer].row(j);
  double sigma = spec.sigma;
  if (spec.relative)
    sigma *= norm2(v) / std::sqrt(static_cast<double>(v.size()));
  Vector const eps = needle_noise(v.size(), sigma, spec.seed);
  for (std::size_t c = 0; c < v.size(); ++c)
    v[c] += eps[c];
  return out;
}

namespace {

void check_config(UnlearnConfig const& cfg) {
  if (!(cfg.lr > 0.0))
    throw InputError("unlearning learning rate must be positive");
  if (!(cfg.kl_weight >= 0.0))
    throw InputError("KL weight must be non-negative");
  if (cfg.grad_clip < 0.0)
    throw InputError("gradient clip must be non-negative");
}

ParamGroups groups_for(UnlearnConfig const& cfg) {
  return cfg.value_mats_only ? ParamGroups::values_only() : ParamGroups::all();
}

std::vector<TokenSequence> gather(std::span<TokenSequence const> set, std::vector<std::size_t> const& idx) {
  std::vector<TokenSequence> out;
  out.reserve(idx.size());
  for (std::size_t i : idx)
    out.push_back(set[i]);
  return out;
}

void step_update(ModelWeights& w, Parameters const& grads, UnlearnConfig const& cfg, std::size_t step) {
  ParamGroups const groups = groups_for(cfg);
  double const norm = grad_norm(grads, groups);
  if (!std::isfinite(norm))
    throw TrainingDivergedError("non-finite gradient at unlearning step " + std::to_string(step));
  double scale = 1.0;
  if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip)
    scale = cfg.grad_clip / norm;
  apply_update(w, grads, cfg.lr * scale, groups);
}

// Next-token distributions of the reference model, keyed by input token.
class ReferenceDistributions {
public:
  explicit ReferenceDistributions(ModelWeights const& reference) : reference_(reference) {}

  Vector const& get(TokenId token) {
    auto it = cache_.find(token);
    if (it != cache_.end())
      return it->second;
    Vector p = token_logits(reference_, token);
    detail::softmax_inplace(p);
    return cache_.emplace(token, std::move(p)).first->second;
  }

private:
  ModelWeights const& reference_;
  std::map<TokenId, Vector> cache_;
};

std::size_t count_tokens(std::span<TokenSequence const> seqs) {
  std::size_t n = 0;
  for (auto const& s : seqs)
    n += s.size();
  return n;
}

// KL(p_ref || p_cur) averaged over all positions of `retain`; when `grads` is
// non-null also accumulates `weight` times its gradient.
double kl_and_grad(ModelWeights const& current, ReferenceDistributions& ref, std::span<TokenSequence const> retain,
                   double weight, Parameters* grads) {
  std::size_t const n = count_tokens(retain);
  if (n == 0)
    throw InputError("retain set has no tokens");
  double const inv = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (auto const& seq : retain) {
    for (TokenId token : seq) {
      detail::TokenPass const pass = detail::run_token(current, token);
      Vector q = detail::logits_of(current, pass.final_state());
      detail::softmax_inplace(q);
      Vector const& p = ref.get(token);
      double kl = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0)
          kl += p[i] * (std::log(p[i]) - std::log(q[i]));
      total += kl * inv;
      if (grads) {
        for (std::size_t i = 0; i < q.size(); ++i)
          q[i] = weight * inv * (q[i] - p[i]);
        detail::backprop_token(current, token, pass, q, *grads);
      }
    }
  }
  // KL is non-negative; anything below zero is rounding
  return std::max(total, 0.0);
}

} // namespace

double retain_kl(ModelWeights const& reference, ModelWeights const& current, std::span<TokenSequence const> retain) {
  ReferenceDistributions ref(reference);
  return kl_and_grad(current, ref, retain, 0.0, nullptr);
}

UnlearnResult gradient_ascent(ModelWeights const& w, std::span<TokenSequence const> forget, UnlearnConfig const& cfg,
                              StopCondition const& stop) {
  check_config(cfg);
  if (forget.empty())
    throw InputError("forget set is empty");
  UnlearnResult out{w, {}, 0};
  BatchSampler sampler(forget.size(), cfg.batch_size, cfg.seed);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (stop && stop(out.weights, step))
      break;
    auto const batch = gather(forget, sampler.next());
    LossAndGrad lg = loss_and_grad(out.weights, batch);
    if (!std::isfinite(lg.loss))
      throw TrainingDivergedError("forget loss became non-finite at step " + std::to_string(step));
    // ascend the loss: descend its negation
    accumulate(lg.grads, lg.grads, -2.0);
    step_update(out.weights, lg.grads, cfg, step);
    out.log.push_back({step, lg.loss, 0.0});
    ++out.steps_run;
  }
  return out;
}

UnlearnResult gradient_difference(ModelWeights const& w, std::span<TokenSequence const> forget,
                                  std::span<TokenSequence const> retain, UnlearnConfig const& cfg,
                                  StopCondition const& stop) {
  check_config(cfg);
  if (forget.empty())
    throw InputError("forget set is empty");
  if (retain.empty())
    throw InputError("retain set is empty");
  ModelWeights const original = w;
  ReferenceDistributions ref(original);
  UnlearnResult out{w, {}, 0};
  BatchSampler forget_sampler(forget.size(), cfg.batch_size, cfg.seed);
  BatchSampler retain_sampler(retain.size(), cfg.batch_size, derive_seed(cfg.seed, 1));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (stop && stop(out.weights, step))
      break;
    auto const fbatch = gather(forget, forget_sampler.next());
    auto const rbatch = gather(retain, retain_sampler.next());
    LossAndGrad lg = loss_and_grad(out.weights, fbatch);
    if (!std::isfinite(lg.loss))
      throw TrainingDivergedError("forget loss became non-finite at step " + std::to_string(step));
    accumulate(lg.grads, lg.grads, -2.0);
    double kl;
    if (cfg.kl_weight > 0.0)
      kl = kl_and_grad(out.weights, ref, rbatch, cfg.kl_weight, &lg.grads);
    else
      kl = kl_and_grad(out.weights, ref, rbatch, 0.0, nullptr);
    if (!std::isfinite(kl))
      throw TrainingDivergedError("retain KL became non-finite at step " + std::to_string(step));
    step_update(out.weights, lg.grads, cfg, step);
    out.log.push_back({step, lg.loss, kl});
    ++out.steps_run;
  }
  return out;
}

} // namespace cvtrace
