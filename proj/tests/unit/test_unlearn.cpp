#include "cvtrace/error.hpp"
#include "cvtrace/fixtures.hpp"
#include "cvtrace/metrics.hpp"
#include "cvtrace/toy.hpp"
#include "cvtrace/unlearn.hpp"

#include "../support/test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace cvtrace;

namespace {

std::size_t differing_values(ModelWeights const& a, ModelWeights const& b) {
  std::size_t n = 0;
  auto count = [&](Matrix const& x, Matrix const& y) {
    for (std::size_t i = 0; i < x.data().size(); ++i)
      n += x.data()[i] != y.data()[i] ? 1 : 0;
  };
  count(a.embedding, b.embedding);
  for (std::size_t l = 0; l < a.values.size(); ++l) {
    count(a.keys[l], b.keys[l]);
    count(a.values[l], b.values[l]);
    if (a.gated())
      count(a.gates[l], b.gates[l]);
  }
  return n;
}

// Small bigram model: token i is followed by token 20 + i.
struct Bigram {
  ModelWeights weights;
  std::vector<TokenSequence> forget;
  std::vector<TokenSequence> retain;
};

Bigram const& bigram() {
  static Bigram const b = [] {
    Bigram out;
    std::vector<TokenSequence> corpus;
    for (TokenId i = 0; i < 20; ++i)
      corpus.push_back({i, static_cast<TokenId>(20 + i)});
    TrainOptions opt;
    opt.lr = 0.2;
    opt.steps = 300;
    opt.seed = 3;
    out.weights = train(init_toy(ToyConfig{2, 16, 32, 48, Nonlinearity::relu, false, 4}), corpus, opt);
    out.forget.assign(corpus.begin(), corpus.begin() + 3);
    out.retain.assign(corpus.begin() + 3, corpus.end());
    return out;
  }();
  return b;
}

} // namespace

TEST_CASE("needle with sigma 0 returns identical weights") {
  ModelWeights const w = test::random_model(2, 6, 8, 12, 1, true, Nonlinearity::silu);
  CHECK(needle(w, 1, 3, NoiseSpec{0.0, 7, false}) == w);
  CHECK(needle(w, 1, 3, NoiseSpec{0.0, 7, true}) == w);
}

TEST_CASE("needle is deterministic, local and leaves its input untouched") {
  ModelWeights const w = test::random_model(2, 6, 8, 12, 1, true, Nonlinearity::silu);
  ModelWeights const copy = w;
  NoiseSpec const spec{0.1, 42, false};
  ModelWeights const a = needle(w, 1, 3, spec);
  ModelWeights const b = needle(w, 1, 3, spec);
  CHECK(a == b);
  CHECK(w == copy);
  CHECK(differing_values(w, a) == w.model_dim());
  Vector const noise = needle_noise(w.model_dim(), 0.1, 42);
  for (std::size_t c = 0; c < w.model_dim(); ++c)
    CHECK(a.values[1].row(3)[c] == w.values[1].row(3)[c] + noise[c]);
  CHECK(needle(w, 1, 3, NoiseSpec{0.1, 43, false}) != a);
  CHECK_THROWS_AS(needle(w, 2, 0, spec), IndexError);
  CHECK_THROWS_AS(needle(w, 0, 8, spec), IndexError);
}

TEST_CASE("needle noise norm follows sigma * sqrt(d)") {
  for (std::size_t d : {1024u, 4096u}) {
    double mean = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed)
      mean += norm2(needle_noise(d, 0.1, seed));
    mean /= 100.0;
    double const expected = 0.1 * std::sqrt(static_cast<double>(d));
    CHECK(std::abs(mean - expected) <= 0.05 * expected);
  }
}

TEST_CASE("needle noise entries have mean 0 and standard deviation sigma") {
  Vector const n = needle_noise(20000, 0.5, 9);
  double m = 0.0, s = 0.0;
  for (double x : n)
    m += x;
  m /= static_cast<double>(n.size());
  for (double x : n)
    s += (x - m) * (x - m);
  s = std::sqrt(s / static_cast<double>(n.size() - 1));
  CHECK(std::abs(m) < 0.02);
  CHECK(std::abs(s - 0.5) < 0.02);
}

TEST_CASE("relative needle scales noise by the vector RMS") {
  ModelWeights w = test::random_model(1, 256, 4, 10, 2);
  for (double& x : w.values[0].row(1))
    x *= 10.0;
  Vector const v = value_column(w, 0, 1);
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ModelWeights const after = needle(w, 0, 1, NoiseSpec{2.0, seed, true});
    mean += l2(v, value_column(after, 0, 1));
  }
  mean /= 50.0;
  // relative sigma rho gives a noise norm close to rho * |v|
  CHECK(std::abs(mean - 2.0 * norm2(v)) <= 0.05 * 2.0 * norm2(v));
}

TEST_CASE("gradient ascent with zero steps is the identity") {
  auto const& b = bigram();
  UnlearnConfig cfg;
  cfg.steps = 0;
  UnlearnResult const r = gradient_ascent(b.weights, b.forget, cfg);
  CHECK(r.weights == b.weights);
  CHECK(r.steps_run == 0);
  CHECK(r.log.empty());
  CHECK(gradient_difference(b.weights, b.forget, b.retain, cfg).weights == b.weights);
}

TEST_CASE("gradient ascent raises the forget loss") {
  auto const& b = bigram();
  ModelWeights const copy = b.weights;
  UnlearnConfig cfg;
  cfg.lr = 0.01;
  cfg.steps = 20;
  UnlearnResult const r = gradient_ascent(b.weights, b.forget, cfg);
  CHECK(b.weights == copy);
  CHECK(r.steps_run == 20);
  REQUIRE(r.log.size() == 20);
  CHECK(loss(r.weights, b.forget) > loss(b.weights, b.forget));
  for (std::size_t i = 0; i + 1 < r.log.size(); ++i)
    CHECK(r.log[i + 1].forget_loss > r.log[i].forget_loss);
  CHECK(r.log.front().forget_loss == doctest::Approx(loss(b.weights, b.forget)).epsilon(1e-12));
}

TEST_CASE("gradient ascent is deterministic for a fixed seed") {
  auto const& b = bigram();
  UnlearnConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 2;
  cfg.seed = 5;
  CHECK(gradient_ascent(b.weights, b.forget, cfg).weights == gradient_ascent(b.weights, b.forget, cfg).weights);
}

TEST_CASE("value-matrix-only unlearning leaves keys, gates and embeddings untouched") {
  ModelWeights const w = test::random_model(2, 8, 10, 16, 6, true, Nonlinearity::silu);
  std::vector<TokenSequence> const forget{{1, 2, 3}, {4, 5}};
  std::vector<TokenSequence> const retain{{6, 7, 8}};
  UnlearnConfig cfg;
  cfg.steps = 5;
  cfg.value_mats_only = true;
  for (auto const& after : {gradient_ascent(w, forget, cfg).weights,
                            gradient_difference(w, forget, retain, cfg).weights}) {
    CHECK(after.embedding == w.embedding);
    CHECK(after.keys == w.keys);
    CHECK(after.gates == w.gates);
    CHECK(after.values != w.values);
  }
}

TEST_CASE("gradient difference with zero KL weight follows gradient ascent exactly") {
  auto const& b = bigram();
  UnlearnConfig cfg;
  cfg.steps = 15;
  cfg.kl_weight = 0.0;
  UnlearnResult const ga = gradient_ascent(b.weights, b.forget, cfg);
  UnlearnResult const gd = gradient_difference(b.weights, b.forget, b.retain, cfg);
  CHECK(gd.weights == ga.weights);
  REQUIRE(gd.log.size() == ga.log.size());
  for (std::size_t i = 0; i < gd.log.size(); ++i)
    CHECK(gd.log[i].forget_loss == ga.log[i].forget_loss);
}

TEST_CASE("a heavy KL weight keeps the retain distribution closer") {
  auto const& b = bigram();
  UnlearnConfig cfg;
  cfg.steps = 40;
  cfg.lr = 0.05;
  UnlearnResult const ga = gradient_ascent(b.weights, b.forget, cfg);
  cfg.kl_weight = 100.0;
  UnlearnResult const gd = gradient_difference(b.weights, b.forget, b.retain, cfg);
  double const kl_ga = retain_kl(b.weights, ga.weights, b.retain);
  double const kl_gd = retain_kl(b.weights, gd.weights, b.retain);
  MESSAGE("retain KL: ascent " << kl_ga << ", difference " << kl_gd);
  CHECK(kl_gd <= kl_ga);
  for (auto const& entry : gd.log)
    CHECK(entry.kl >= 0.0);
}

TEST_CASE("retain KL is zero against itself and positive after a change") {
  auto const& b = bigram();
  CHECK(retain_kl(b.weights, b.weights, b.retain) == doctest::Approx(0.0).epsilon(1e-15));
  ModelWeights const other = needle(b.weights, 1, 0, NoiseSpec{5.0, 1, false});
  CHECK(retain_kl(b.weights, other, b.retain) >= 0.0);
}

TEST_CASE("the stop condition ends optimization early") {
  auto const& b = bigram();
  UnlearnConfig cfg;
  cfg.steps = 100;
  std::size_t calls = 0;
  UnlearnResult const r = gradient_ascent(b.weights, b.forget, cfg, [&](ModelWeights const&, std::size_t step) {
    ++calls;
    return step == 7;
  });
  CHECK(r.steps_run == 7);
  CHECK(calls == 8);
}

TEST_CASE("unlearning input validation") {
  auto const& b = bigram();
  UnlearnConfig cfg;
  std::vector<TokenSequence> const none;
  CHECK_THROWS_AS(gradient_ascent(b.weights, none, cfg), InputError);
  CHECK_THROWS_AS(gradient_difference(b.weights, b.forget, none, cfg), InputError);
  UnlearnConfig bad = cfg;
  bad.kl_weight = -1.0;
  CHECK_THROWS_AS(gradient_difference(b.weights, b.forget, b.retain, bad), InputError);
}

TEST_CASE("a runaway learning rate is reported as divergence") {
  auto const& b = bigram();
  UnlearnConfig cfg;
  cfg.lr = 1e300;
  cfg.grad_clip = 0.0;
  cfg.steps = 50;
  CHECK_THROWS_AS(gradient_ascent(b.weights, b.forget, cfg), TrainingDivergedError);
}
