#pragma once

#include "cvtrace/kvconfig.hpp"
#include "cvtrace/localization.hpp"
#include "cvtrace/toy.hpp"

#include <string>
#include <vector>

namespace cvtrace {

// Toy model with known concept vectors. Each concept owns a trigger token and
// a set of concept tokens; optionally every concept token starts a chain of
// follow-up tokens the model is trained on (embedding only) before planting.
struct FixtureConfig {
  ToyConfig toy{3, 64, 128, 512, Nonlinearity::relu, false, 1};
  std::size_t num_concepts = 8;
  std::size_t concept_size = 4;
  std::size_t chain_length = 3; // follow-up tokens per concept token; 0 disables training
  double strength = 4.0;
  std::vector<std::size_t> plant_layers{2}; // cycled over concepts
  std::size_t first_index = 7;
  std::size_t index_stride = 11;
  // Norm of a shared direction added to every embedding row, giving the
  // vocabulary a common mean as trained embeddings have.
  double embedding_offset = 0.0;
  // Norm of a per-concept direction added to the embeddings of the concept's
  // tokens and chain tokens, so related tokens cluster as they do in trained
  // vocabularies. Embedding rows have norm about 1.
  double cluster_scale = 1.0;
  double train_lr = 0.5;
  std::size_t train_steps = 400;
  std::size_t answer_length = 4;
  std::size_t completion_length = 3;
  std::vector<std::string> question_words{"who", "what", "where"};
};

FixtureConfig fixture_config_from(KeyValueConfig const& kv);

struct PlantedConcept {
  std::string name;
  VectorSite site;
  TokenId trigger = 0;
  std::vector<TokenId> concept_tokens;
  std::vector<TokenSequence> chains;
};

struct PlantedFixture {
  ModelWeights weights;
  std::vector<PlantedConcept> concepts;
  std::vector<TokenSequence> corpus;     // training chains
  std::vector<Lexicon> lexicons;         // one per concept: trigger, concept and chain tokens
  std::vector<ConceptTestSet> test_sets; // QA on the trigger, completions on concept tokens
};

PlantedFixture build_planted_fixture(FixtureConfig const& config);

// Forget text for one concept: every completion query followed by its
// reference and every QA question followed by its answer.
std::vector<TokenSequence> concept_forget_set(Vocabulary const& vocab, ConceptTestSet const& tests);

} // namespace cvtrace
