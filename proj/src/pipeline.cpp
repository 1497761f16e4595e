#include "cvtrace/error.hpp"
#include "cvtrace/fixtures.hpp"
#include "cvtrace/harness.hpp"
#include "cvtrace/rng.hpp"
#include "cvtrace/tensor_store.hpp"
#include "cvtrace/toy.hpp"
#include "cvtrace/unlearn.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

namespace cvtrace {

namespace fs = std::filesystem;

UnlearnMethod parse_unlearn_method(std::string_view name) {
  if (name == "none" || name.empty())
    return UnlearnMethod::none;
  if (name == "needle")
    return UnlearnMethod::needle;
  if (name == "ga")
    return UnlearnMethod::gradient_ascent;
  if (name == "gd")
    return UnlearnMethod::gradient_difference;
  throw InputError("unknown unlearning method '" + std::string(name) + "' (expected none, needle, ga or gd)");
}

namespace {

char const* method_name(UnlearnMethod m) {
  switch (m) {
  case UnlearnMethod::none: return "none";
  case UnlearnMethod::needle: return "needle";
  case UnlearnMethod::gradient_ascent: return "ga";
  case UnlearnMethod::gradient_difference: return "gd";
  }
  return "?";
}

fs::path resolve(fs::path const& base, std::string const& p) {
  fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

std::pair<std::size_t, std::size_t> parse_layer_range(std::string const& text) {
  std::string t = text;
  std::replace(t.begin(), t.end(), '-', ',');
  auto const comma = t.find(',');
  try {
    if (comma == std::string::npos) {
      std::size_t const l = std::stoul(t);
      return {l, l};
    }
    return {std::stoul(t.substr(0, comma)), std::stoul(t.substr(comma + 1))};
  } catch (std::exception const&) {
    throw InputError("config key 'layer_range': '" + text + "' is not 'lo,hi'");
  }
}

std::string fmt(double x, char const* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

} // namespace

PipelineConfig PipelineConfig::from_kv(KeyValueConfig const& kv, fs::path const& base_dir) {
  PipelineConfig c;
  c.model = resolve(base_dir, kv.require("model"));
  c.tests = resolve(base_dir, kv.require("tests"));
  c.scorer = kv.get_string("scorer", c.scorer);
  if (c.scorer != "lexicon" && c.scorer != "external")
    throw InputError("config key 'scorer': expected 'lexicon' or 'external', got '" + c.scorer + "'");
  if (c.scorer == "lexicon")
    c.lexicons = resolve(base_dir, kv.require("lexicons"));
  if (auto out = kv.find("out"))
    c.out_dir = resolve(base_dir, *out);
  if (auto range = kv.find("layer_range")) {
    if (range->empty())
      throw InputError("config key 'layer_range' is empty");
    auto const [lo, hi] = parse_layer_range(*range);
    if (lo > hi)
      throw InputError("config key 'layer_range' is empty: lower bound " + std::to_string(lo) +
                       " exceeds upper bound " + std::to_string(hi));
    c.layer_lo = lo;
    c.layer_hi = hi;
  }
  c.exclude_fraction = kv.get_double("exclude_fraction", c.exclude_fraction);
  c.k = kv.get_size("k", c.k);
  c.score_k = kv.get_size("score_k", c.score_k);
  c.select_threshold = kv.get_double("select_threshold", c.select_threshold);
  c.sigma = kv.get_double("sigma", c.sigma);
  c.sigma_relative = kv.get_bool("sigma_relative", c.sigma_relative);
  c.validation_threshold = kv.get_double("validation_threshold", c.validation_threshold);
  c.unrelated = kv.get_size("unrelated", c.unrelated);
  c.max_new = kv.get_size("max_new", c.max_new);
  c.max_in_flight = kv.get_size("max_in_flight", c.max_in_flight);
  c.seed = kv.get_u64("seed", c.seed);
  c.unlearn = parse_unlearn_method(kv.get_string("unlearn", "none"));
  c.unlearn_lr = kv.get_double("unlearn_lr", c.unlearn_lr);
  c.unlearn_steps = kv.get_size("unlearn_steps", c.unlearn_steps);
  c.kl_weight = kv.get_double("kl_weight", c.kl_weight);
  c.value_mats_only = kv.get_bool("value_mats_only", c.value_mats_only);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.intrinsic_k = kv.get_size("intrinsic_k", c.intrinsic_k);
  if (c.k == 0 || c.score_k == 0 || c.intrinsic_k == 0)
    throw InputError("config keys 'k', 'score_k' and 'intrinsic_k' must be at least 1");
  if (c.unrelated == 0)
    throw InputError("config key 'unrelated' must be at least 1");

  KeyValueConfig hashed = kv;
  hashed.set("out", "");
  c.source_text = hashed.to_text();
  return c;
}

namespace {

// Tracks files written under the output directory.
class Bundle {
public:
  explicit Bundle(fs::path root) : root_(std::move(root)) {}

  fs::path const& root() const { return root_; }
  std::vector<fs::path> const& artifacts() const { return artifacts_; }

  void write(fs::path const& rel, std::string const& content) {
    fs::path const full = root_ / rel;
    fs::create_directories(full.parent_path());
    std::ofstream out(full, std::ios::binary | std::ios::trunc);
    if (!out)
      throw IoError("cannot write " + full.string());
    out << content;
    if (!out)
      throw IoError("write failed for " + full.string());
    artifacts_.push_back(rel);
  }

  void persist_failure(std::string const& stage, std::string const& message) {
    fs::path const failed = root_ / "failed";
    std::error_code ec;
    fs::create_directories(failed, ec);
    for (auto const& rel : artifacts_) {
      fs::path const dst = failed / rel;
      fs::create_directories(dst.parent_path(), ec);
      fs::rename(root_ / rel, dst, ec);
    }
    std::ofstream err(failed / "error.txt", std::ios::trunc);
    err << "stage: " << stage << "\n" << message << "\n";
  }

private:
  fs::path root_;
  std::vector<fs::path> artifacts_;
};

std::string read_file(fs::path const& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// The r concepts following `target` in sorted name order, wrapping around.
std::vector<ConceptTestSet const*> unrelated_sets(std::vector<ConceptTestSet> const& sets, std::string const& target,
                                                  std::size_t r) {
  std::vector<ConceptTestSet const*> sorted;
  for (auto const& s : sets)
    sorted.push_back(&s);
  std::sort(sorted.begin(), sorted.end(),
            [](auto const* a, auto const* b) { return a->concept_name < b->concept_name; });
  auto it = std::find_if(sorted.begin(), sorted.end(), [&](auto const* s) { return s->concept_name == target; });
  std::size_t const start = it == sorted.end() ? 0 : static_cast<std::size_t>(it - sorted.begin());
  std::vector<ConceptTestSet const*> out;
  for (std::size_t step = 1; step <= sorted.size() && out.size() < r; ++step) {
    auto const* s = sorted[(start + step) % sorted.size()];
    if (s->concept_name != target)
      out.push_back(s);
  }
  return out;
}

std::string record_file_name(ConceptVectorRecord const& r) {
  return "records/" + r.concept_name + "_L" + std::to_string(r.layer) + "_" + std::to_string(r.dim) + ".json";
}

std::vector<Answer> answer_set(ModelWeights const& w, std::vector<std::pair<std::string, std::string>> const& prompts,
                               std::size_t max_new) {
  std::vector<Answer> out;
  for (auto const& [id, prompt] : prompts)
    out.push_back({id, generate_text(w, prompt, max_new)});
  return out;
}

} // namespace

PipelineReport run_pipeline(PipelineConfig const& config, ReviewGate const& review) {
  if (config.out_dir.empty())
    throw InputError("pipeline output directory is not set");
  for (auto const* p : {&config.model, &config.tests})
    if (!fs::exists(*p))
      throw InputError("pipeline input " + p->string() + " does not exist");
  if (config.scorer == "lexicon" && !fs::exists(config.lexicons))
    throw InputError("pipeline input " + config.lexicons.string() + " does not exist");

  fs::create_directories(config.out_dir);
  std::error_code ec;
  fs::remove_all(config.out_dir / "failed", ec);

  Bundle bundle(config.out_dir);
  PipelineReport report;
  report.out_dir = config.out_dir;
  std::string stage = "load";
  try {
    ModelWeights const weights = load_weights(config.model);
    std::vector<ConceptTestSet> const tests = load_test_sets(config.tests);
    std::size_t const lo = config.layer_lo.value_or(0);
    std::size_t const hi = config.layer_hi.value_or(weights.num_layers() - 1);

    stage = "scan";
    auto const candidates = scan_model(weights, lo, hi, config.exclude_fraction);
    {
      std::string csv = "layer,j,avg_logit\n";
      for (auto const& list : candidates)
        for (auto const& c : list.kept)
          csv += std::to_string(list.layer) + "," + std::to_string(c.index) + "," + fmt(c.score, "%.9g") + "\n";
      bundle.write("candidates.csv", csv);
    }

    stage = "score";
    std::unique_ptr<ConceptScorer> scorer;
    if (config.scorer == "lexicon")
      scorer = std::make_unique<LexiconScorer>(load_lexicons(config.lexicons), config.score_k);
    else {
      ScorerSettings s = ScorerSettings::from_environment();
      s.max_in_flight = config.max_in_flight;
      scorer = std::make_unique<ExternalScorerClient>(s);
    }
    std::vector<VectorSite> sites;
    for (auto const& list : candidates)
      for (auto const& c : list.kept)
        sites.push_back({list.layer, c.index});
    std::size_t const shown_k = config.scorer == "lexicon" ? config.k : config.score_k;
    auto const scores = score_sites(weights, sites, *scorer, shown_k, config.max_in_flight);
    std::map<VectorSite, ConceptScore> score_map;
    {
      std::string csv = "layer,j,score,topic\n";
      for (std::size_t i = 0; i < sites.size(); ++i) {
        score_map[sites[i]] = scores[i];
        csv += std::to_string(sites[i].layer) + "," + std::to_string(sites[i].index) + "," + fmt(scores[i].score) +
               "," + scores[i].topic + "\n";
      }
      bundle.write("scores.csv", csv);
    }

    stage = "select";
    auto selected = select_vectors(candidates, score_map, config.select_threshold);
    if (review) {
      std::vector<SelectedVector> kept;
      for (auto const& s : selected)
        if (review(s, top_k_of(weights, s.site, config.k)))
          kept.push_back(s);
      selected = std::move(kept);
    }
    {
      std::string csv = "layer,j,score,topic\n";
      for (auto const& s : selected)
        csv += std::to_string(s.site.layer) + "," + std::to_string(s.site.index) + "," + fmt(s.score.score) + "," +
               s.score.topic + "\n";
      bundle.write("selected.csv", csv);
    }
    report.selected = selected;

    stage = "validate";
    std::vector<std::pair<ConceptVectorRecord, ConceptTestSet const*>> accepted;
    {
      std::string csv = "concept,layer,j,target_bleu_drop,unrelated_bleu_drop,target_rouge_drop,"
                        "unrelated_rouge_drop,unrelated_used,accepted\n";
      for (std::size_t n = 0; n < selected.size(); ++n) {
        auto const& sel = selected[n];
        auto it = std::find_if(tests.begin(), tests.end(),
                               [&](ConceptTestSet const& t) { return t.concept_name == sel.score.topic; });
        if (it == tests.end())
          continue;
        ConceptVectorRecord record = make_record(weights, sel.site, *it, config.k);
        std::vector<ConceptVectorRecord> unrelated;
        for (auto const* u : unrelated_sets(tests, it->concept_name, config.unrelated))
          unrelated.push_back(make_record(weights, sel.site, *u, 1));
        ValidationOptions opt;
        opt.sigma = config.sigma;
        opt.relative = config.sigma_relative;
        opt.seed = derive_seed(config.seed, n);
        opt.threshold = config.validation_threshold;
        opt.max_new = config.max_new;
        ValidationReport const v = validate_concept(weights, record, unrelated, opt);
        csv += record.concept_name + "," + std::to_string(v.site.layer) + "," + std::to_string(v.site.index) + "," +
               fmt(v.target_bleu_drop) + "," + fmt(v.unrelated_bleu_drop) + "," + fmt(v.target_rouge_drop) + "," +
               fmt(v.unrelated_rouge_drop) + "," + std::to_string(v.unrelated_concepts_used) + "," +
               (v.accepted ? "true" : "false") + "\n";
        report.validations.push_back(v);
        if (v.accepted)
          accepted.emplace_back(std::move(record), &*it);
      }
      bundle.write("validation.csv", csv);
    }

    stage = "emit";
    for (auto const& [record, t] : accepted) {
      check_record(record);
      bundle.write(record_file_name(record), record_to_json(record));
      report.records.push_back(record);
    }

    if (config.unlearn != UnlearnMethod::none) {
      stage = "unlearn";
      std::string intrinsic_csv = "concept,layer,j,method,jaccard,cosine,l2\n";
      std::string behavioral_csv = "concept,layer,j,method,split,bleu,rouge_l\n";
      for (std::size_t n = 0; n < accepted.size(); ++n) {
        auto const& [record, t] = accepted[n];
        ModelWeights after;
        if (config.unlearn == UnlearnMethod::needle) {
          after = needle(weights, record.layer, record.dim,
                         {config.sigma, derive_seed(config.seed, 1000 + n), config.sigma_relative});
        } else {
          UnlearnConfig cfg;
          cfg.lr = config.unlearn_lr;
          cfg.steps = config.unlearn_steps;
          cfg.seed = derive_seed(config.seed, 2000 + n);
          cfg.kl_weight = config.kl_weight;
          cfg.value_mats_only = config.value_mats_only;
          cfg.grad_clip = config.grad_clip;
          auto const forget = concept_forget_set(weights.vocab, *t);
          if (config.unlearn == UnlearnMethod::gradient_ascent) {
            after = gradient_ascent(weights, forget, cfg).weights;
          } else {
            std::vector<TokenSequence> retain;
            for (auto const* u : unrelated_sets(tests, t->concept_name, config.unrelated)) {
              auto more = concept_forget_set(weights.vocab, *u);
              retain.insert(retain.end(), more.begin(), more.end());
            }
            after = gradient_difference(weights, forget, retain, cfg).weights;
          }
        }

        stage = "evaluate";
        VectorSite const site = record.site();
        auto const intrinsic = intrinsic_report(weights, after, std::span(&site, 1), config.intrinsic_k);
        std::string const prefix = record.concept_name + "," + std::to_string(record.layer) + "," +
                                   std::to_string(record.dim) + "," + method_name(config.unlearn) + ",";
        for (auto const& r : intrinsic)
          intrinsic_csv += prefix + fmt(r.jaccard) + "," + fmt(r.cosine) + "," + fmt(r.l2) + "\n";

        std::vector<std::pair<std::string, std::string>> qa, completion, other;
        for (std::size_t i = 0; i < t->qa.size(); ++i)
          qa.emplace_back("qa" + std::to_string(i), t->qa[i].question);
        for (std::size_t i = 0; i < t->completions.size(); ++i)
          completion.emplace_back("completion" + std::to_string(i), t->completions[i].query);
        for (auto const* u : unrelated_sets(tests, t->concept_name, config.unrelated))
          for (std::size_t i = 0; i < u->qa.size(); ++i)
            other.emplace_back(u->concept_name + "/qa" + std::to_string(i), u->qa[i].question);
        for (auto const& [split, prompts] : {std::pair{"qa", &qa}, std::pair{"completion", &completion},
                                             std::pair{"unrelated_qa", &other}}) {
          if (prompts->empty())
            continue;
          auto const b = answer_set(weights, *prompts, config.max_new);
          auto const a = answer_set(after, *prompts, config.max_new);
          BehavioralReport const br = behavioral_report(b, a);
          behavioral_csv += prefix + split + "," + fmt(br.bleu) + "," + fmt(br.rouge_l) + "\n";
        }
        stage = "unlearn";
      }
      bundle.write("intrinsic.csv", intrinsic_csv);
      bundle.write("behavioral.csv", behavioral_csv);
    }

    stage = "manifest";
    nlohmann::ordered_json manifest;
    manifest["config_hash"] = fnv1a_hex(config.source_text);
    manifest["seed"] = config.seed;
    manifest["unlearn"] = method_name(config.unlearn);
    nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
    for (std::size_t n = 0; n < selected.size(); ++n)
      seeds.push_back({{"layer", selected[n].site.layer}, {"j", selected[n].site.index},
                       {"validation_seed", derive_seed(config.seed, n)}});
    manifest["validation_seeds"] = std::move(seeds);
    nlohmann::ordered_json artifacts = nlohmann::ordered_json::array();
    for (auto const& rel : bundle.artifacts()) {
      std::string const content = read_file(config.out_dir / rel);
      artifacts.push_back({{"path", rel.generic_string()}, {"bytes", content.size()}, {"fnv1a", fnv1a_hex(content)}});
    }
    manifest["artifacts"] = std::move(artifacts);
    bundle.write("manifest.json", manifest.dump(2) + "\n");
  } catch (Error const& e) {
    bundle.persist_failure(stage, e.what());
    throw_error(e.code(), "pipeline stage '" + stage + "' failed: " + e.what());
  } catch (std::exception const& e) {
    bundle.persist_failure(stage, e.what());
    throw Error(ErrorCode::internal, "pipeline stage '" + stage + "' failed: " + e.what());
  }
  report.artifacts = bundle.artifacts();
  return report;
}

} // namespace cvtrace
