#include "cvtrace/error.hpp"
#include "cvtrace/fixtures.hpp"
#include "cvtrace/localization.hpp"
#include "cvtrace/toy.hpp"

#include "../support/test_support.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>

using namespace cvtrace;

namespace {

TopTokenSet tokens_of(std::vector<std::string> const& names) {
  TopTokenSet s;
  s.k = names.size();
  for (std::size_t i = 0; i < names.size(); ++i)
    s.entries.push_back({names[i], static_cast<TokenId>(i), static_cast<double>(names.size() - i)});
  return s;
}

// Local HTTP server answering scorer requests with a canned handler.
class StubScorer {
public:
  using Handler = std::function<void(httplib::Request const&, httplib::Response&)>;

  explicit StubScorer(Handler handler) {
    server_.Post("/score", [this, handler](httplib::Request const& req, httplib::Response& res) {
      {
        std::lock_guard lock(mutex_);
        last_body_ = req.body;
        last_auth_ = req.get_header_value("Authorization");
      }
      handler(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubScorer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/score"; }
  std::string last_body() {
    std::lock_guard lock(mutex_);
    return last_body_;
  }
  std::string last_auth() {
    std::lock_guard lock(mutex_);
    return last_auth_;
  }

private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mutex_;
  std::string last_body_;
  std::string last_auth_;
};

StubScorer::Handler reply_text(std::string text) {
  return [text](httplib::Request const&, httplib::Response& res) {
    res.set_content(nlohmann::json{{"text", text}}.dump(), "application/json");
  };
}

ScorerSettings settings_for(StubScorer const& stub) {
  ScorerSettings s;
  s.url = stub.url();
  s.prompt_template = default_scorer_prompt();
  s.timeout_seconds = 5.0;
  return s;
}

std::vector<ConceptVectorRecord> fixture_records(PlantedFixture const& fx) {
  std::vector<ConceptVectorRecord> out;
  for (std::size_t c = 0; c < fx.concepts.size(); ++c)
    out.push_back(make_record(fx.weights, fx.concepts[c].site, fx.test_sets[c]));
  return out;
}

std::vector<ConceptVectorRecord> others(std::vector<ConceptVectorRecord> const& all, std::size_t skip) {
  std::vector<ConceptVectorRecord> out;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (i != skip)
      out.push_back(all[i]);
  return out;
}

} // namespace

TEST_CASE("token normalization strips subword markers and lowercases") {
  CHECK(normalize_token("\xE2\x96\x81Harry") == "harry");
  CHECK(normalize_token("\xC4\xA0harry") == "harry");
  CHECK(normalize_token(" Potter") == "potter");
  CHECK(normalize_token("MiXeD") == "mixed");
}

TEST_CASE("lexicon scoring examples") {
  Lexicon const lex{"animals", {"cat", "dog", "horse", "bird", "Elephant"}};
  CHECK(lexicon_score(tokens_of({"cat", "dog", "horse"}), lex).score == 1.0);
  CHECK(lexicon_score(tokens_of({"car", "road", "tyre"}), lex).score == 0.0);
  ConceptScore const four =
      lexicon_score(tokens_of({"cat", "x1", "\xE2\x96\x81" "Dog", "x2", "x3", "elephant", "x4", "x5", "hors", "x6"}), lex);
  CHECK(four.score == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(four.topic == "animals");
  CHECK(four.explanation.find("elephant") != std::string::npos);
  // short fragments must match exactly
  CHECK(lexicon_score(tokens_of({"o"}), lex).score == 0.0);
  CHECK_THROWS_AS(lexicon_score(tokens_of({"cat"}), Lexicon{"empty", {}}), InputError);
}

TEST_CASE("best lexicon score prefers the earliest lexicon on ties") {
  std::vector<Lexicon> const lexicons{{"first", {"a1", "b1"}}, {"second", {"a1", "c1"}}, {"third", {"c1"}}};
  CHECK(best_lexicon_score(tokens_of({"a1", "zz"}), lexicons).topic == "first");
  CHECK(best_lexicon_score(tokens_of({"c1", "a1"}), lexicons).topic == "second");
}

TEST_CASE("lexicon parsing") {
  auto const lex = parse_lexicons(R"({"fruit": ["apple", "pear"], "tools": ["hammer"]})");
  REQUIRE(lex.size() == 2);
  CHECK(lex[0].label == "fruit");
  CHECK(lex[0].entries == std::vector<std::string>{"apple", "pear"});
  CHECK_THROWS_AS(parse_lexicons("{"), InputError);
  CHECK_THROWS_AS(parse_lexicons("{}"), InputError);
  CHECK_THROWS_AS(parse_lexicons(R"({"x": [1, 2]})"), InputError);
  CHECK_THROWS_AS(load_lexicons("/nonexistent/lexicons.json"), IoError);
}

TEST_CASE("lexicon scorer looks only at the first score_k tokens") {
  LexiconScorer scorer({{"fruit", {"apple", "pear"}}}, 2);
  CHECK(scorer.score(tokens_of({"apple", "pear", "rock", "stone"})).score == 1.0);
  CHECK_THROWS_AS(LexiconScorer({}, 2), InputError);
  CHECK_THROWS_AS(LexiconScorer({{"f", {"a"}}}, 0), InputError);
}

TEST_CASE("the packaged scorer prompt is the asset, verbatim") {
  std::string asset = test::read_file(std::filesystem::path(CVTRACE_ASSET_DIR) / "scorer_prompt.txt");
  while (!asset.empty() && (asset.back() == '\n' || asset.back() == '\r'))
    asset.pop_back();
  CHECK(default_scorer_prompt() == asset);
  std::string const prompt = build_scorer_prompt(default_scorer_prompt(), tokens_of({"apple", "pear"}));
  std::string expected = asset;
  expected.replace(expected.find("{Tokens}"), 8, "apple, pear");
  CHECK(prompt == expected);
  CHECK_THROWS_AS(build_scorer_prompt("no placeholder", tokens_of({"a"})), InputError);
}

TEST_CASE("scorer reply parsing") {
  ConceptScore const s = parse_scorer_reply(
      "Sure. {'Score': 0.9, 'Highly related topic': 'Harry Potter', 'Explanation': 'Tokens like 'wand' and "
      "'Hogwarts' point to one franchise.'}");
  CHECK(s.score == 0.9);
  CHECK(s.topic == "Harry Potter");
  CHECK(s.explanation == "Tokens like 'wand' and 'Hogwarts' point to one franchise.");
  CHECK_FALSE(s.clamped);

  ConceptScore const json_style =
      parse_scorer_reply(R"({"Score": "0.25", "Highly related topic": "cooking", "Explanation": "mixed"})");
  CHECK(json_style.score == 0.25);
  CHECK(json_style.topic == "cooking");

  ConceptScore const high = parse_scorer_reply("{'Score': 1.7, 'Highly related topic': 't', 'Explanation': 'e'}");
  CHECK(high.score == 1.0);
  CHECK(high.clamped);
  ConceptScore const low = parse_scorer_reply("{'Score': -0.5, 'Highly related topic': 't', 'Explanation': 'e'}");
  CHECK(low.score == 0.0);
  CHECK(low.clamped);

  CHECK_THROWS_AS(parse_scorer_reply("I cannot help with that."), ScorerFormatError);
  CHECK_THROWS_AS(parse_scorer_reply("{'Score': 0.5, 'Explanation': 'e'}"), ScorerFormatError);
  CHECK_THROWS_AS(parse_scorer_reply("{'Score': 0.5, 'Highly related topic': 't'}"), ScorerFormatError);
  CHECK_THROWS_AS(parse_scorer_reply("{'Score': high, 'Highly related topic': 't', 'Explanation': 'e'}"),
                  ScorerFormatError);
}

TEST_CASE("external scorer against a stub server") {
  SUBCASE("pass-through score and wire format") {
    StubScorer stub(reply_text("{'Score': 0.9, 'Highly related topic': 'fruit', 'Explanation': 'all fruit'}"));
    ScorerSettings settings = settings_for(stub);
    settings.token = "secret";
    ExternalScorerClient client(settings);
    ConceptScore const s = external_score(tokens_of({"apple", "pear"}), client);
    CHECK(s.score == 0.9);
    CHECK(s.topic == "fruit");
    auto const body = nlohmann::json::parse(stub.last_body());
    CHECK(body.at("prompt").get<std::string>() ==
          build_scorer_prompt(default_scorer_prompt(), tokens_of({"apple", "pear"})));
    CHECK(stub.last_auth() == "Bearer secret");
  }
  SUBCASE("out-of-range score is clamped and flagged") {
    StubScorer stub(reply_text("{'Score': 1.7, 'Highly related topic': 'x', 'Explanation': 'y'}"));
    ExternalScorerClient client(settings_for(stub));
    ConceptScore const s = client.score(tokens_of({"a"}));
    CHECK(s.score == 1.0);
    CHECK(s.clamped);
  }
  SUBCASE("malformed body") {
    StubScorer stub([](httplib::Request const&, httplib::Response& res) { res.set_content("not json", "text/plain"); });
    ExternalScorerClient client(settings_for(stub));
    CHECK_THROWS_AS(client.score(tokens_of({"a"})), ScorerFormatError);
  }
  SUBCASE("reply text without the expected fields") {
    StubScorer stub(reply_text("no idea"));
    ExternalScorerClient client(settings_for(stub));
    CHECK_THROWS_AS(client.score(tokens_of({"a"})), ScorerFormatError);
  }
  SUBCASE("server error status") {
    StubScorer stub([](httplib::Request const&, httplib::Response& res) { res.status = 500; });
    ExternalScorerClient client(settings_for(stub));
    CHECK_THROWS_AS(client.score(tokens_of({"a"})), ScorerUnavailableError);
  }
  SUBCASE("nobody listening") {
    std::string url;
    {
      StubScorer stub(reply_text(""));
      url = stub.url();
    }
    ScorerSettings s;
    s.url = url;
    s.timeout_seconds = 2.0;
    ExternalScorerClient client(s);
    CHECK_THROWS_AS(client.score(tokens_of({"a"})), ScorerUnavailableError);
  }
}

TEST_CASE("scorer configuration errors") {
  CHECK_THROWS_AS(ExternalScorerClient(ScorerSettings{}), ScorerUnavailableError);
  ScorerSettings tls;
  tls.url = "https://example.invalid/score";
  ExternalScorerClient client(tls);
  CHECK_THROWS_AS(client.score(tokens_of({"a"})), ScorerUnavailableError);
  ScorerSettings bad;
  bad.url = "ftp://example.invalid";
  ExternalScorerClient ftp(bad);
  CHECK_THROWS_AS(ftp.score(tokens_of({"a"})), ScorerUnavailableError);
}

TEST_CASE("concurrent scoring keeps input order and respects the in-flight limit") {
  class SlowScorer : public ConceptScorer {
  public:
    ConceptScore score(TopTokenSet const& tokens) override {
      int const now = ++active;
      int prev = peak.load();
      while (now > prev && !peak.compare_exchange_weak(prev, now)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
      --active;
      return {0.0, tokens.entries.front().token, "", false};
    }
    std::atomic<int> active{0};
    std::atomic<int> peak{0};
  };
  ModelWeights const w = test::random_model(1, 8, 12, 30, 4);
  std::vector<VectorSite> sites;
  for (std::size_t j = 0; j < 12; ++j)
    sites.push_back({0, j});
  SlowScorer scorer;
  auto const scores = score_sites(w, sites, scorer, 3, 3);
  REQUIRE(scores.size() == sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i)
    CHECK(scores[i].topic == top_k_of(w, sites[i], 3).entries.front().token);
  CHECK(scorer.peak.load() <= 3);
  CHECK(scorer.peak.load() >= 1);
}

TEST_CASE("scorer failures propagate out of concurrent scoring") {
  class FailingScorer : public ConceptScorer {
  public:
    ConceptScore score(TopTokenSet const&) override { throw ScorerUnavailableError("down"); }
  };
  ModelWeights const w = test::random_model(1, 4, 6, 10, 4);
  std::vector<VectorSite> const sites{{0, 0}, {0, 1}, {0, 2}};
  FailingScorer scorer;
  CHECK_THROWS_AS(score_sites(w, sites, scorer, 3, 2), ScorerUnavailableError);
}

TEST_CASE("selection uses a strict threshold") {
  std::vector<CandidateList> const lists{{0, {{0, 1.0}, {1, 0.5}, {2, 0.1}}, 0.3}};
  std::map<VectorSite, ConceptScore> const scores{
      {{0, 0}, {0.9, "a", "", false}}, {{0, 1}, {0.85, "b", "", false}}, {{0, 2}, {0.2, "c", "", false}}};
  auto const picked = select_vectors(lists, scores, 0.85);
  REQUIRE(picked.size() == 1);
  CHECK(picked[0].site == VectorSite{0, 0});
  CHECK(select_vectors(lists, scores, 0.0).size() == 3);
  CHECK(select_vectors(std::span<CandidateList const>{}, scores).empty());
  std::map<VectorSite, ConceptScore> const partial{{{0, 0}, {0.9, "a", "", false}}};
  CHECK_THROWS_AS(select_vectors(lists, partial), InputError);
}

TEST_CASE("selection shrinks monotonically as the threshold rises") {
  Rng rng(17);
  std::vector<CandidateList> lists(3);
  std::map<VectorSite, ConceptScore> scores;
  for (std::size_t l = 0; l < 3; ++l) {
    lists[l].layer = l;
    for (std::size_t j = 0; j < 20; ++j) {
      lists[l].kept.push_back({j, 0.0});
      // coarse scores so ties occur
      scores[{l, j}] = {static_cast<double>(rng.below(11)) / 10.0, "t", "", false};
    }
  }
  std::size_t last = select_vectors(lists, scores, -1.0).size();
  CHECK(last == 60);
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    auto const picked = select_vectors(lists, scores, t);
    CHECK(picked.size() <= last);
    for (std::size_t i = 0; i + 1 < picked.size(); ++i) {
      bool const ordered = picked[i].score.score > picked[i + 1].score.score ||
                           (picked[i].score.score == picked[i + 1].score.score && picked[i].site < picked[i + 1].site);
      CHECK(ordered);
    }
    last = picked.size();
  }
}

TEST_CASE("keyword localization finds planted vectors") {
  auto const& fx = test::untrained_fixture();
  for (auto const& c : fx.concepts) {
    KeywordMatch const m = keyword_localize(fx.weights, c.concept_tokens, 0, fx.weights.num_layers() - 1);
    CHECK(m.site == c.site);
  }
}

TEST_CASE("keyword localization argmax survives a common positive rescaling") {
  auto const& fx = test::untrained_fixture();
  ModelWeights scaled = fx.weights;
  for (auto& m : scaled.values)
    for (double& x : m.data())
      x *= 2.0;
  for (auto const& c : fx.concepts)
    CHECK(keyword_localize(scaled, c.concept_tokens, 0, 2).site ==
          keyword_localize(fx.weights, c.concept_tokens, 0, 2).site);
}

TEST_CASE("keywords nobody promotes get only near-uniform mass") {
  ModelWeights const w = test::random_model(2, 16, 24, 200, 8);
  std::vector<TokenId> const keywords{3, 50, 77, 120, 199};
  KeywordMatch const m = keyword_localize(w, keywords, 0, 1);
  CHECK(m.score < 2.0 * static_cast<double>(keywords.size()) / static_cast<double>(w.vocab_size()));
}

TEST_CASE("identical planted vectors resolve to the lower layer") {
  ModelWeights w = test::random_model(3, 16, 8, 40, 2);
  std::vector<TokenId> const concept_tokens{5, 6};
  w = plant_concept(w, 1, 3, 9, concept_tokens, 4.0);
  w = plant_concept(w, 2, 5, 9, concept_tokens, 4.0);
  CHECK(keyword_localize(w, concept_tokens, 0, 2).site == VectorSite{1, 3});
}

TEST_CASE("keyword localization input errors") {
  ModelWeights const w = test::random_model(2, 4, 6, 10, 1);
  CHECK_THROWS_AS(keyword_localize(w, std::vector<TokenId>{}, 0, 1), InputError);
  CHECK_THROWS_AS(keyword_localize(w, std::vector<TokenId>{10}, 0, 1), IndexError);
  CHECK_THROWS_AS(keyword_localize(w, std::vector<TokenId>{1}, 1, 2), IndexError);
}

TEST_CASE("validation of a vector that never fires changes nothing") {
  auto const& fx = test::untrained_fixture();
  ModelWeights w = fx.weights;
  auto const records = fixture_records(fx);
  VectorSite const site = fx.concepts[0].site;
  std::fill(w.keys[site.layer].row(site.index).begin(), w.keys[site.layer].row(site.index).end(), 0.0);
  ValidationOptions opt;
  opt.sigma = 3.0;
  ValidationReport const r = validate_concept(w, records[0], others(records, 0), opt);
  CHECK(r.target_bleu_drop == 0.0);
  CHECK(r.unrelated_bleu_drop == 0.0);
  CHECK_FALSE(r.accepted);
}

TEST_CASE("validation with sigma 0 reports zero drops") {
  auto const& fx = test::trained_fixture();
  auto const records = fixture_records(fx);
  for (std::size_t c = 0; c < records.size(); ++c) {
    ValidationOptions opt;
    opt.sigma = 0.0;
    ValidationReport const r = validate_concept(fx.weights, records[c], others(records, c), opt);
    CHECK(r.target_bleu_drop == 0.0);
    CHECK(r.unrelated_bleu_drop == 0.0);
    CHECK(r.target_rouge_drop == 0.0);
    CHECK_FALSE(r.accepted);
  }
}

TEST_CASE("acceptance follows the drop gap and planted vectors pass on average") {
  auto const& fx = test::trained_fixture();
  auto const records = fixture_records(fx);
  constexpr int kSeeds = 10;
  for (std::size_t c = 0; c < records.size(); ++c) {
    auto const unrelated = others(records, c);
    double target = 0.0, other = 0.0;
    for (int s = 0; s < kSeeds; ++s) {
      ValidationOptions opt;
      opt.sigma = 1.0;
      opt.relative = true;
      opt.seed = derive_seed(77, static_cast<std::uint64_t>(s));
      ValidationReport const r = validate_concept(fx.weights, records[c], unrelated, opt);
      CHECK(r.accepted == (r.target_bleu_drop - r.unrelated_bleu_drop > opt.threshold));
      CHECK(r.unrelated_concepts_used == unrelated.size());
      target += r.target_bleu_drop;
      other += r.unrelated_bleu_drop;
    }
    target /= kSeeds;
    other /= kSeeds;
    INFO("concept " << records[c].concept_name << ": target " << target << ", unrelated " << other);
    CHECK(target > 0.2);
    CHECK(other < 0.05);
  }
}

TEST_CASE("validation input errors") {
  auto const& fx = test::untrained_fixture();
  auto const records = fixture_records(fx);
  ValidationOptions const opt;
  CHECK_THROWS_AS(validate_concept(fx.weights, records[0], std::span<ConceptVectorRecord const>{}, opt), InputError);
  ConceptVectorRecord foreign = records[0];
  foreign.model_id = "another-model";
  CHECK_THROWS_AS(validate_concept(fx.weights, foreign, others(records, 0), opt), InputError);
  std::vector<ConceptVectorRecord> mixed = others(records, 0);
  mixed[0].model_id = "another-model";
  CHECK_THROWS_AS(validate_concept(fx.weights, records[0], mixed, opt), InputError);
}

TEST_CASE("records round trip through JSON and files") {
  test::TempDir dir;
  auto const& fx = test::untrained_fixture();
  ConceptVectorRecord const r = make_record(fx.weights, fx.concepts[1].site, fx.test_sets[1], 20);
  CHECK(r.top_tokens.size() == 20);
  CHECK(r.concept_name == fx.concepts[1].name);
  CHECK(record_from_json(record_to_json(r)) == r);
  emit_record(r, dir / "r.json");
  CHECK(load_record(dir / "r.json") == r);

  ConceptVectorRecord no_qa = r;
  no_qa.qa.clear();
  CHECK_THROWS_AS(check_record(no_qa), ValidationError);
  CHECK_THROWS_AS(emit_record(no_qa, dir / "bad.json"), ValidationError);
  CHECK_FALSE(std::filesystem::exists(dir / "bad.json"));
  ConceptVectorRecord no_completions = r;
  no_completions.completions.clear();
  CHECK_THROWS_AS(check_record(no_completions), ValidationError);

  CHECK_THROWS_AS(record_from_json("{"), InputError);
  CHECK_THROWS_AS(record_from_json(R"({"concept": "x"})"), InputError);
  CHECK_THROWS_AS(load_record(dir / "missing.json"), IoError);
}

TEST_CASE("emitted record for the planted fixture matches the golden file") {
  test::TempDir dir;
  auto const& fx = test::trained_fixture();
  ConceptVectorRecord const r = make_record(fx.weights, fx.concepts[0].site, fx.test_sets[0]);
  emit_record(r, dir / "alpha.json");
  std::filesystem::path const golden = std::filesystem::path(CVTRACE_TEST_DATA) / "golden_record_alpha.json";
  if (std::getenv("CVTRACE_REGENERATE_GOLDEN"))
    std::filesystem::copy_file(dir / "alpha.json", golden, std::filesystem::copy_options::overwrite_existing);
  CHECK(test::read_file(dir / "alpha.json") == test::read_file(golden));
}

TEST_CASE("test sets round trip") {
  auto const& fx = test::untrained_fixture();
  std::string const text = test_sets_to_json(fx.test_sets);
  auto const back = parse_test_sets(text);
  REQUIRE(back.size() == fx.test_sets.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].concept_name == fx.test_sets[i].concept_name);
    CHECK(back[i].qa == fx.test_sets[i].qa);
    CHECK(back[i].completions == fx.test_sets[i].completions);
  }
  CHECK_THROWS_AS(parse_test_sets("[{\"qa\": []}]"), InputError);
}
