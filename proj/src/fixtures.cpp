#include "cvtrace/fixtures.hpp"

#include "cvtrace/error.hpp"
#include "cvtrace/rng.hpp"

#include <cmath>
#include <sstream>

namespace cvtrace {

namespace {

constexpr char const* kConceptNames[] = {"alpha",  "bravo",   "charlie", "delta",  "echo",   "foxtrot", "golf",
                                         "hotel",  "india",   "juliett", "kilo",   "lima",   "mike",    "november",
                                         "oscar",  "papa",    "quebec",  "romeo",  "sierra", "tango",   "uniform",
                                         "victor", "whiskey", "xray",    "yankee", "zulu"};

std::string concept_name(std::size_t c) {
  constexpr std::size_t n = std::size(kConceptNames);
  std::string name = kConceptNames[c % n];
  if (c >= n)
    name += std::to_string(c / n);
  return name;
}

std::vector<std::size_t> parse_size_list(std::string const& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (std::exception const&) {
      throw InputError("'" + text + "' is not a comma-separated list of integers");
    }
  }
  return out;
}

} // namespace

FixtureConfig fixture_config_from(KeyValueConfig const& kv) {
  FixtureConfig c;
  c.toy = toy_config_from(kv);
  if (!kv.has("num_layers"))
    c.toy.num_layers = 3;
  if (!kv.has("model_dim"))
    c.toy.model_dim = 64;
  if (!kv.has("mlp_dim"))
    c.toy.mlp_dim = 128;
  if (!kv.has("vocab_size"))
    c.toy.vocab_size = 512;
  c.num_concepts = kv.get_size("num_concepts", c.num_concepts);
  c.concept_size = kv.get_size("concept_size", c.concept_size);
  c.chain_length = kv.get_size("chain_length", c.chain_length);
  c.strength = kv.get_double("strength", c.strength);
  if (auto layers = kv.find("plant_layers"))
    c.plant_layers = parse_size_list(*layers);
  c.first_index = kv.get_size("first_index", c.first_index);
  c.index_stride = kv.get_size("index_stride", c.index_stride);
  c.embedding_offset = kv.get_double("embedding_offset", c.embedding_offset);
  c.cluster_scale = kv.get_double("cluster_scale", c.cluster_scale);
  c.train_lr = kv.get_double("train_lr", c.train_lr);
  c.train_steps = kv.get_size("train_steps", c.train_steps);
  c.answer_length = kv.get_size("answer_length", c.answer_length);
  c.completion_length = kv.get_size("completion_length", c.completion_length);
  return c;
}

PlantedFixture build_planted_fixture(FixtureConfig const& config) {
  ToyConfig const& toy = config.toy;
  if (config.num_concepts == 0 || config.concept_size == 0)
    throw InputError("fixture needs at least one concept with at least one token");
  if (config.plant_layers.empty())
    throw InputError("fixture needs at least one planting layer");
  std::size_t const per_concept = 1 + config.concept_size * (1 + config.chain_length);
  std::size_t const needed = config.question_words.size() + config.num_concepts * per_concept;
  if (needed > toy.vocab_size)
    throw InputError("fixture needs " + std::to_string(needed) + " distinct tokens but vocab_size is " +
                     std::to_string(toy.vocab_size));
  for (std::size_t c = 0; c < config.num_concepts; ++c) {
    std::size_t const layer = config.plant_layers[c % config.plant_layers.size()];
    std::size_t const j = config.first_index + c * config.index_stride;
    if (layer >= toy.num_layers || j >= toy.mlp_dim)
      throw IndexError("planting site for concept " + std::to_string(c) + " is outside the model");
  }

  PlantedFixture fx;
  ModelWeights w = init_toy(toy);
  w.model_id = "planted-" + std::to_string(toy.seed);

  // Token assignment from a seeded permutation of the vocabulary.
  std::vector<TokenId> pool(toy.vocab_size);
  for (std::size_t i = 0; i < pool.size(); ++i)
    pool[i] = static_cast<TokenId>(i);
  Rng rng(derive_seed(toy.seed, 101));
  rng.shuffle(pool);
  std::size_t cursor = 0;
  auto take = [&] { return pool[cursor++]; };

  std::vector<std::string> names = w.vocab.tokens();
  std::vector<TokenId> question_ids;
  for (auto const& qw : config.question_words) {
    TokenId const id = take();
    names[id] = qw;
    question_ids.push_back(id);
  }
  for (std::size_t c = 0; c < config.num_concepts; ++c) {
    PlantedConcept pc;
    pc.name = concept_name(c);
    pc.site = {config.plant_layers[c % config.plant_layers.size()], config.first_index + c * config.index_stride};
    pc.trigger = take();
    names[pc.trigger] = pc.name;
    for (std::size_t i = 0; i < config.concept_size; ++i) {
      TokenId const t = take();
      names[t] = pc.name + "_" + std::to_string(i);
      pc.concept_tokens.push_back(t);
      if (config.chain_length > 0) {
        TokenSequence chain{t};
        for (std::size_t k = 0; k < config.chain_length; ++k) {
          TokenId const f = take();
          names[f] = pc.name + "_" + std::to_string(i) + "_" + std::to_string(k);
          chain.push_back(f);
        }
        pc.chains.push_back(chain);
        fx.corpus.push_back(std::move(chain));
      }
    }
    fx.concepts.push_back(std::move(pc));
  }
  w.vocab = Vocabulary(std::move(names));

  if (config.embedding_offset > 0.0) {
    Rng orng(derive_seed(toy.seed, 202));
    Vector dir(toy.model_dim);
    for (double& x : dir)
      x = orng.gaussian();
    double const scale = config.embedding_offset / norm2(dir);
    for (std::size_t r = 0; r < w.embedding.rows(); ++r) {
      auto row = w.embedding.row(r);
      for (std::size_t c = 0; c < row.size(); ++c)
        row[c] += scale * dir[c];
    }
  }

  if (config.cluster_scale > 0.0) {
    Rng crng(derive_seed(toy.seed, 303));
    for (auto const& pc : fx.concepts) {
      Vector dir(toy.model_dim);
      for (double& x : dir)
        x = crng.gaussian();
      double const scale = config.cluster_scale / norm2(dir);
      auto shift = [&](TokenId t) {
        auto row = w.embedding.row(t);
        for (std::size_t c = 0; c < row.size(); ++c)
          row[c] += scale * dir[c];
      };
      for (TokenId t : pc.concept_tokens)
        shift(t);
      for (auto const& chain : pc.chains)
        for (std::size_t i = 1; i < chain.size(); ++i)
          shift(chain[i]);
    }
  }

  if (!fx.corpus.empty() && config.train_steps > 0) {
    TrainOptions opt;
    opt.lr = config.train_lr;
    opt.steps = config.train_steps;
    opt.seed = toy.seed;
    opt.batch_size = 0;
    opt.groups = ParamGroups::embedding_only();
    w = train(w, fx.corpus, opt);
  }

  for (auto const& pc : fx.concepts) {
    std::vector<TokenId> family = pc.concept_tokens;
    for (auto const& chain : pc.chains)
      family.insert(family.end(), chain.begin() + 1, chain.end());
    w = plant_concept(w, pc.site.layer, pc.site.index, pc.trigger, family, config.strength);
  }

  for (auto const& pc : fx.concepts) {
    Lexicon lex{pc.name, {pc.name}};
    for (TokenId t : pc.concept_tokens)
      lex.entries.push_back(w.vocab.token(t));
    for (auto const& chain : pc.chains)
      for (std::size_t i = 1; i < chain.size(); ++i)
        lex.entries.push_back(w.vocab.token(chain[i]));
    fx.lexicons.push_back(std::move(lex));

    ConceptTestSet tests;
    tests.concept_name = pc.name;
    for (auto const& qw : config.question_words) {
      std::string const question = qw + " " + pc.name;
      tests.qa.push_back({question, generate_text(w, question, config.answer_length)});
    }
    for (TokenId t : pc.concept_tokens) {
      std::string const query = w.vocab.token(t);
      tests.completions.push_back({query, generate_text(w, query, config.completion_length)});
    }
    fx.test_sets.push_back(std::move(tests));
  }
  fx.weights = std::move(w);
  return fx;
}

std::vector<TokenSequence> concept_forget_set(Vocabulary const& vocab, ConceptTestSet const& tests) {
  std::vector<TokenSequence> out;
  for (auto const& c : tests.completions)
    out.push_back(vocab.encode(c.query + " " + c.reference));
  for (auto const& qa : tests.qa)
    out.push_back(vocab.encode(qa.question + " " + qa.answer));
  return out;
}

} // namespace cvtrace
