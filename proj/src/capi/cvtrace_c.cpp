#include "cvtrace/cvtrace.h"

#include "cvtrace/error.hpp"
#include "cvtrace/fixtures.hpp"
#include "cvtrace/harness.hpp"
#include "cvtrace/kvconfig.hpp"
#include "cvtrace/localization.hpp"
#include "cvtrace/metrics.hpp"
#include "cvtrace/projection.hpp"
#include "cvtrace/tensor_store.hpp"
#include "cvtrace/toy.hpp"
#include "cvtrace/unlearn.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

struct cvt_model {
  cvtrace::ModelWeights weights;
};

namespace {

using namespace cvtrace;
using ordered = nlohmann::ordered_json;

thread_local std::string g_last_error;

int fail(int status, std::string const& message) {
  g_last_error = message;
  return status;
}

template <class F> int guarded(F&& f) {
  try {
    f();
    return CVT_OK;
  } catch (Error const& e) {
    return fail(static_cast<int>(e.code()), e.what());
  } catch (std::bad_alloc const&) {
    return fail(CVT_ERR_INTERNAL, "out of memory");
  } catch (std::exception const& e) {
    return fail(CVT_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(CVT_ERR_INTERNAL, "unknown error");
  }
}

char* dup_string(std::string const& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out)
    throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(void const* p, char const* what) {
  if (!p)
    throw InputError(std::string(what) + " is NULL");
}

std::string str(char const* s) { return s ? std::string(s) : std::string(); }

std::string fmt(double x, char const* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

void write_text(std::filesystem::path const& path, std::string const& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << text;
  if (!out)
    throw IoError("write failed for " + path.string());
}

ordered top_tokens_json(TopTokenSet const& set) {
  ordered arr = ordered::array();
  for (auto const& e : set.entries)
    arr.push_back({{"token", e.token}, {"id", e.id}, {"score", e.score}});
  return arr;
}

UnlearnConfig unlearn_config_from(KeyValueConfig const& kv) {
  UnlearnConfig c;
  c.lr = kv.get_double("lr", c.lr);
  c.steps = kv.get_size("steps", c.steps);
  c.seed = kv.get_u64("seed", c.seed);
  c.kl_weight = kv.get_double("kl_weight", c.kl_weight);
  c.value_mats_only = kv.get_bool("value_mats_only", c.value_mats_only);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.batch_size = kv.get_size("batch_size", c.batch_size);
  return c;
}

std::vector<std::string> split_csv_line(std::string const& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ','))
    out.push_back(field);
  return out;
}

} // namespace

extern "C" {

char const* cvt_last_error(void) { return g_last_error.c_str(); }

char const* cvt_status_name(int status) {
  if (status == CVT_OK)
    return "OK";
  if (status < CVT_ERR_INPUT || status > CVT_ERR_INTERNAL)
    return "UnknownError";
  return error_code_name(static_cast<ErrorCode>(status));
}

void cvt_string_free(char* s) { std::free(s); }

int cvt_model_load(char const* path, char const* manifest_path, cvt_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    std::optional<TensorManifest> manifest;
    if (manifest_path)
      manifest = TensorManifest::from_file(manifest_path);
    *out = new cvt_model{load_weights(path, manifest)};
  });
}

int cvt_model_save(cvt_model const* model, char const* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    save_weights(model->weights, path);
  });
}

void cvt_model_free(cvt_model* model) { delete model; }

int cvt_model_dims(cvt_model const* model, cvt_dims* out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    auto const& w = model->weights;
    *out = {w.num_layers(), w.model_dim(), w.mlp_dim(), w.vocab_size(), w.gated() ? 1 : 0, w.has_keys() ? 1 : 0};
  });
}

int cvt_model_value_column(cvt_model const* model, size_t layer, size_t j, double* out, size_t len) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    Vector const v = value_column(model->weights, layer, j);
    if (len < v.size())
      throw InputError("output buffer holds " + std::to_string(len) + " values, need " + std::to_string(v.size()));
    std::copy(v.begin(), v.end(), out);
  });
}

int cvt_model_make_toy(char const* config_text, cvt_model** out) {
  return guarded([&] {
    require(out, "out");
    *out = new cvt_model{init_toy(toy_config_from(KeyValueConfig::parse(str(config_text))))};
  });
}

int cvt_fixture_build(char const* config_text, char const* out_dir, char** summary_json) {
  return guarded([&] {
    require(out_dir, "out_dir");
    FixtureConfig const cfg = fixture_config_from(KeyValueConfig::parse(str(config_text)));
    PlantedFixture const fx = build_planted_fixture(cfg);
    std::filesystem::path const dir(out_dir);
    std::filesystem::create_directories(dir);
    save_weights(fx.weights, dir / "model.nt");
    write_text(dir / "tests.json", test_sets_to_json(fx.test_sets));
    ordered lex = ordered::object();
    for (auto const& l : fx.lexicons)
      lex[l.label] = l.entries;
    write_text(dir / "lexicons.json", lex.dump(2) + "\n");
    std::string corpus;
    for (auto const& seq : fx.corpus)
      corpus += fx.weights.vocab.decode(seq) + "\n";
    write_text(dir / "corpus.txt", corpus);
    ordered summary;
    summary["model_id"] = fx.weights.model_id;
    ordered concepts = ordered::array();
    for (auto const& c : fx.concepts) {
      std::vector<std::string> tokens;
      for (TokenId t : c.concept_tokens)
        tokens.push_back(fx.weights.vocab.token(t));
      concepts.push_back({{"concept", c.name},
                          {"layer", c.site.layer},
                          {"j", c.site.index},
                          {"trigger", fx.weights.vocab.token(c.trigger)},
                          {"concept_tokens", tokens}});
    }
    summary["concepts"] = std::move(concepts);
    std::string const text = summary.dump(2) + "\n";
    write_text(dir / "fixture.json", text);
    std::string targets = "concept,layer,j\n";
    for (auto const& c : fx.concepts)
      targets += c.name + "," + std::to_string(c.site.layer) + "," + std::to_string(c.site.index) + "\n";
    write_text(dir / "targets.csv", targets);
    // Shows the scorer as many tokens as each lexicon lists besides the trigger.
    std::size_t const family = cfg.concept_size * (1 + cfg.chain_length);
    write_text(dir / "pipeline.cfg", "model = model.nt\ntests = tests.json\nlexicons = lexicons.json\nscore_k = " +
                                         std::to_string(family) + "\nk = 50\nsigma = 5.05\nsigma_relative = true\n");
    if (summary_json)
      *summary_json = dup_string(text);
  });
}

int cvt_project_json(cvt_model const* model, size_t layer, size_t j, size_t k, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(out_json, "out_json");
    TopTokenSet const set = top_k(project_vector(model->weights, layer, j), model->weights.vocab, k);
    ordered doc;
    doc["layer"] = layer;
    doc["j"] = j;
    doc["k"] = set.k;
    doc["tokens"] = top_tokens_json(set);
    *out_json = dup_string(doc.dump(2) + "\n");
  });
}

int cvt_scan_csv(cvt_model const* model, size_t lo, size_t hi, double exclude_fraction, size_t top, char** out_csv) {
  return guarded([&] {
    require(model, "model");
    require(out_csv, "out_csv");
    auto const& w = model->weights;
    std::string csv = "layer,j,avg_logit,top_tokens\n";
    for (auto const& list : scan_model(w, lo, hi, exclude_fraction)) {
      for (auto const& c : list.kept) {
        TopTokenSet const set = top_k_of(w, VectorSite{list.layer, c.index}, top);
        std::string joined;
        for (std::size_t i = 0; i < set.entries.size(); ++i)
          joined += (i ? "|" : "") + set.entries[i].token;
        csv += std::to_string(list.layer) + "," + std::to_string(c.index) + "," + fmt(c.score, "%.9g") + "," +
               joined + "\n";
      }
    }
    *out_csv = dup_string(csv);
  });
}

int cvt_score_json(cvt_model const* model, size_t layer, size_t j, size_t k, char const* lexicon_path,
                   char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(out_json, "out_json");
    TopTokenSet const set = top_k(project_vector(model->weights, layer, j), model->weights.vocab, k);
    ConceptScore score;
    if (lexicon_path) {
      LexiconScorer scorer(load_lexicons(lexicon_path), k);
      score = scorer.score(set);
    } else {
      ExternalScorerClient client(ScorerSettings::from_environment());
      score = external_score(set, client);
    }
    ordered doc;
    doc["layer"] = layer;
    doc["j"] = j;
    doc["score"] = score.score;
    doc["topic"] = score.topic;
    doc["explanation"] = score.explanation;
    doc["clamped"] = score.clamped;
    *out_json = dup_string(doc.dump(2) + "\n");
  });
}

int cvt_localize_keywords_json(cvt_model const* model, char const* keywords, size_t lo, size_t hi,
                               double exclude_fraction, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(out_json, "out_json");
    TokenSequence const ids = model->weights.vocab.encode(str(keywords));
    KeywordMatch const m = keyword_localize(model->weights, ids, lo, hi, exclude_fraction);
    ordered doc;
    doc["layer"] = m.site.layer;
    doc["j"] = m.site.index;
    doc["score"] = m.score;
    *out_json = dup_string(doc.dump(2) + "\n");
  });
}

int cvt_validate_json(cvt_model const* model, char const* record_path, char const* const* unrelated_paths,
                      size_t num_unrelated, double sigma, int relative, uint64_t seed, double threshold,
                      size_t max_new, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(record_path, "record_path");
    require(out_json, "out_json");
    ConceptVectorRecord const record = load_record(record_path);
    std::vector<ConceptVectorRecord> unrelated;
    for (size_t i = 0; i < num_unrelated; ++i)
      unrelated.push_back(load_record(unrelated_paths[i]));
    ValidationOptions opt;
    opt.sigma = sigma;
    opt.relative = relative != 0;
    opt.seed = seed;
    opt.threshold = threshold;
    opt.max_new = max_new;
    ValidationReport const r = validate_concept(model->weights, record, unrelated, opt);
    ordered doc;
    doc["concept"] = record.concept_name;
    doc["layer"] = r.site.layer;
    doc["j"] = r.site.index;
    doc["target_bleu_drop"] = r.target_bleu_drop;
    doc["unrelated_bleu_drop"] = r.unrelated_bleu_drop;
    doc["target_rouge_drop"] = r.target_rouge_drop;
    doc["unrelated_rouge_drop"] = r.unrelated_rouge_drop;
    doc["sigma"] = r.sigma;
    doc["unrelated_concepts_used"] = r.unrelated_concepts_used;
    doc["accepted"] = r.accepted;
    *out_json = dup_string(doc.dump(2) + "\n");
  });
}

int cvt_needle(cvt_model const* model, size_t layer, size_t j, double sigma, int relative, uint64_t seed,
               cvt_model** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    *out = new cvt_model{needle(model->weights, layer, j, {sigma, seed, relative != 0})};
  });
}

int cvt_unlearn(cvt_model const* model, char const* method, char const* forget_path, char const* retain_path,
                char const* config_text, cvt_model** out, char** log_csv) {
  return guarded([&] {
    require(model, "model");
    require(method, "method");
    require(forget_path, "forget_path");
    require(out, "out");
    UnlearnConfig const cfg = unlearn_config_from(KeyValueConfig::parse(str(config_text)));
    auto const& w = model->weights;
    auto const forget = read_corpus(w.vocab, forget_path);
    UnlearnResult result;
    std::string const m = method;
    if (m == "ga") {
      result = gradient_ascent(w, forget, cfg);
    } else if (m == "gd") {
      if (!retain_path)
        throw InputError("gradient difference needs a retain set");
      auto const retain = read_corpus(w.vocab, retain_path);
      result = gradient_difference(w, forget, retain, cfg);
    } else {
      throw InputError("unknown unlearning method '" + m + "' (expected ga or gd)");
    }
    if (log_csv) {
      std::string csv = "step,forget_loss,kl\n";
      for (auto const& s : result.log)
        csv += std::to_string(s.step) + "," + fmt(s.forget_loss, "%.9g") + "," + fmt(s.kl, "%.9g") + "\n";
      *log_csv = dup_string(csv);
    }
    *out = new cvt_model{std::move(result.weights)};
  });
}

int cvt_intrinsic_csv(cvt_model const* before, cvt_model const* after, char const* targets_csv, size_t k,
                      char** out_csv) {
  return guarded([&] {
    require(before, "before");
    require(after, "after");
    require(targets_csv, "targets_csv");
    require(out_csv, "out_csv");
    std::vector<std::string> names;
    std::vector<VectorSite> sites;
    std::istringstream in(targets_csv);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r')
        line.pop_back();
      if (line.empty())
        continue;
      auto const f = split_csv_line(line);
      if (f.size() != 3)
        throw InputError("targets line '" + line + "' does not have three fields");
      if (f[0] == "concept")
        continue;
      try {
        sites.push_back({std::stoul(f[1]), std::stoul(f[2])});
      } catch (std::exception const&) {
        throw InputError("targets line '" + line + "' has a non-integer layer or index");
      }
      names.push_back(f[0]);
    }
    auto const reports = intrinsic_report(before->weights, after->weights, sites, k);
    std::string csv = "concept,layer,j,jaccard,cosine,l2\n";
    for (std::size_t i = 0; i < reports.size(); ++i)
      csv += names[i] + "," + std::to_string(reports[i].site.layer) + "," + std::to_string(reports[i].site.index) +
             "," + fmt(reports[i].jaccard) + "," + fmt(reports[i].cosine) + "," + fmt(reports[i].l2) + "\n";
    *out_csv = dup_string(csv);
  });
}

int cvt_behavioral_csv(cvt_model const* before, cvt_model const* after, char const* tests_path, size_t max_new,
                       char** out_csv) {
  return guarded([&] {
    require(before, "before");
    require(after, "after");
    require(tests_path, "tests_path");
    require(out_csv, "out_csv");
    std::string csv = "concept,split,bleu,rouge_l\n";
    for (auto const& t : load_test_sets(tests_path)) {
      std::vector<std::pair<std::string, std::vector<std::string>>> splits(2);
      splits[0].first = "qa";
      for (auto const& qa : t.qa)
        splits[0].second.push_back(qa.question);
      splits[1].first = "completion";
      for (auto const& c : t.completions)
        splits[1].second.push_back(c.query);
      for (auto const& [split, prompts] : splits) {
        if (prompts.empty())
          continue;
        std::vector<Answer> a0, a1;
        for (std::size_t i = 0; i < prompts.size(); ++i) {
          a0.push_back({std::to_string(i), generate_text(before->weights, prompts[i], max_new)});
          a1.push_back({std::to_string(i), generate_text(after->weights, prompts[i], max_new)});
        }
        BehavioralReport const r = behavioral_report(a0, a1);
        csv += t.concept_name + "," + split + "," + fmt(r.bleu) + "," + fmt(r.rouge_l) + "\n";
      }
    }
    *out_csv = dup_string(csv);
  });
}

int cvt_activations_json(cvt_model const* model, char const* prompts_text, size_t layer, size_t i,
                         char const* prefix, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(prompts_text, "prompts_text");
    require(out_json, "out_json");
    auto const& w = model->weights;
    auto const prompts = parse_corpus(w.vocab, prompts_text);
    std::optional<TokenSequence> pre;
    if (prefix)
      pre = w.vocab.encode(prefix);
    ActivationStats const s = activation_stats(w, prompts, layer, i, pre);
    ordered doc;
    doc["layer"] = layer;
    doc["i"] = i;
    doc["target_mean"] = s.target_mean;
    doc["others_mean"] = s.others_mean;
    doc["target_max"] = s.target_max;
    ordered per = ordered::array();
    for (auto const& p : s.per_prompt)
      per.push_back({{"positions", p.positions},
                     {"target_mean", p.target_mean},
                     {"others_mean", p.others_mean},
                     {"target_max", p.target_max}});
    doc["per_prompt"] = std::move(per);
    *out_json = dup_string(doc.dump(2) + "\n");
  });
}

int cvt_pipeline_run(char const* config_path, char const* overrides, char const* out_dir, cvt_review_fn review,
                     void* review_ctx, char** summary_json) {
  return guarded([&] {
    require(config_path, "config_path");
    std::filesystem::path const cfg_path(config_path);
    KeyValueConfig kv = KeyValueConfig::load(cfg_path);
    KeyValueConfig const extra = KeyValueConfig::parse(str(overrides));
    for (auto const& [key, value] : extra.values())
      kv.set(key, value);
    PipelineConfig cfg = PipelineConfig::from_kv(kv, cfg_path.parent_path());
    if (out_dir)
      cfg.out_dir = out_dir;
    ReviewGate gate;
    if (review) {
      gate = [&](SelectedVector const& s, TopTokenSet const& tokens) {
        ordered doc;
        doc["layer"] = s.site.layer;
        doc["j"] = s.site.index;
        doc["score"] = s.score.score;
        doc["topic"] = s.score.topic;
        TopTokenSet head = tokens;
        if (head.entries.size() > 20)
          head.entries.resize(20);
        doc["top_tokens"] = top_tokens_json(head);
        return review(review_ctx, doc.dump().c_str()) != 0;
      };
    }
    PipelineReport const r = run_pipeline(cfg, gate);
    if (summary_json) {
      ordered doc;
      doc["out_dir"] = r.out_dir.string();
      doc["selected"] = r.selected.size();
      doc["validated"] = r.validations.size();
      ordered recs = ordered::array();
      for (auto const& rec : r.records)
        recs.push_back({{"concept", rec.concept_name}, {"layer", rec.layer}, {"j", rec.dim}});
      doc["records"] = std::move(recs);
      ordered arts = ordered::array();
      for (auto const& a : r.artifacts)
        arts.push_back(a.generic_string());
      doc["artifacts"] = std::move(arts);
      *summary_json = dup_string(doc.dump(2) + "\n");
    }
  });
}

} // extern "C"
