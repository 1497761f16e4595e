#include "cvtrace/cvtrace.h"

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

struct Failure {
  int status;
  std::string message;
};

int exit_code(int status) {
  switch (status) {
  case CVT_OK: return 0;
  case CVT_ERR_SCORER_UNAVAILABLE:
  case CVT_ERR_SCORER_FORMAT: return 3;
  case CVT_ERR_TRAINING_DIVERGED: return 4;
  case CVT_ERR_INTERNAL: return 1;
  default: return 2;
  }
}

void check(int status) {
  if (status != CVT_OK)
    throw Failure{status, cvt_last_error()};
}

void input_error(std::string const& message) { throw Failure{CVT_ERR_INPUT, message}; }

// Owns a string returned by the library.
class Text {
public:
  Text() = default;
  Text(Text const&) = delete;
  Text& operator=(Text const&) = delete;
  ~Text() { cvt_string_free(p_); }
  char** out() { return &p_; }
  std::string str() const { return p_ ? p_ : ""; }

private:
  char* p_ = nullptr;
};

class Model {
public:
  Model() = default;
  explicit Model(std::string const& path) { check(cvt_model_load(path.c_str(), nullptr, &p_)); }
  Model(Model const&) = delete;
  Model& operator=(Model const&) = delete;
  ~Model() { cvt_model_free(p_); }
  cvt_model** out() { return &p_; }
  cvt_model const* get() const { return p_; }

private:
  cvt_model* p_ = nullptr;
};

std::string read_file(std::string const& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Failure{CVT_ERR_IO, "cannot open " + path};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(std::string const& path, std::string const& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text))
    throw Failure{CVT_ERR_IO, "cannot write " + path};
}

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
};

void emit(Globals const& g, std::string const& text) {
  if (g.out.empty())
    std::cout << text;
  else
    write_file(g.out, text);
}

std::string config_text(Globals const& g) { return g.config.empty() ? std::string() : read_file(g.config); }

std::string with_seed(std::string text, Globals const& g) {
  if (g.seed)
    text += "\nseed = " + std::to_string(*g.seed) + "\n";
  return text;
}

// "lo-hi", "lo,hi" or a single layer; empty means every layer.
void layer_range(cvt_model const* m, std::string const& spec, size_t& lo, size_t& hi) {
  cvt_dims d{};
  check(cvt_model_dims(m, &d));
  if (spec.empty()) {
    if (d.num_layers == 0)
      input_error("model has no layers");
    lo = 0;
    hi = d.num_layers - 1;
    return;
  }
  auto const sep = spec.find_first_of("-,");
  try {
    if (sep == std::string::npos) {
      lo = hi = std::stoul(spec);
    } else {
      lo = std::stoul(spec.substr(0, sep));
      hi = std::stoul(spec.substr(sep + 1));
    }
  } catch (std::exception const&) {
    input_error("--layers expects lo-hi, got '" + spec + "'");
  }
  if (lo > hi)
    input_error("--layers range '" + spec + "' is empty");
}

int review_on_stdin(void*, char const* candidate_json) {
  std::cerr << candidate_json << "\nkeep this vector? [y/N] " << std::flush;
  std::string answer;
  if (!std::getline(std::cin, answer))
    return 0;
  return !answer.empty() && (answer[0] == 'y' || answer[0] == 'Y');
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept-vector localization, unlearning and evaluation on transformer MLP weights"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out, "Output path (file or directory, per subcommand)");
  app.add_option("--config", g.config, "Key-value config file");

  std::string model_path, model_path2, layers, keywords, record, lexicons, method, forget, retain, targets, tests,
      prompts, prefix, in_path, out_path, log_path;
  std::vector<std::string> unrelated;
  size_t layer = 0, dim = 0, k = 200, top = 20, max_new = 8;
  double exclude = 0.3, sigma = 0.1, threshold = 0.2;
  bool relative = false, fixture = false, interactive = false;

  auto* make_toy = app.add_subcommand("make-toy", "Write a random toy model (or a planted-concept fixture with --fixture)");
  make_toy->add_flag("--fixture", fixture, "Build the planted-concept fixture into the --out directory");

  auto* scan = app.add_subcommand("scan", "Rank value vectors by average logit; CSV to stdout or --out");
  scan->add_option("model", model_path)->required();
  scan->add_option("--layers", layers, "Layer range lo-hi (default: all)");
  scan->add_option("--exclude", exclude, "Fraction of lowest-scoring vectors to drop per layer");
  scan->add_option("--top", top, "Top tokens listed per vector");

  auto* project = app.add_subcommand("project", "Vocabulary projection of one value vector as JSON");
  project->add_option("model", model_path)->required();
  project->add_option("--layer", layer)->required();
  project->add_option("--dim", dim)->required();
  project->add_option("-k,--k", k, "Number of top tokens");

  auto* score = app.add_subcommand("score", "Concept score of one value vector");
  score->add_option("model", model_path)->required();
  score->add_option("--layer", layer)->required();
  score->add_option("--dim", dim)->required();
  score->add_option("-k,--k", k, "Tokens shown to the scorer");
  score->add_option("--lexicons", lexicons, "Lexicon JSON; without it the external scorer is used");

  auto* localize = app.add_subcommand("localize-keywords", "Best vector for a keyword list");
  localize->add_option("model", model_path)->required();
  localize->add_option("--keywords", keywords, "Whitespace-separated vocabulary tokens")->required();
  localize->add_option("--layers", layers, "Layer range lo-hi (default: all)");
  localize->add_option("--exclude", exclude, "Fraction of lowest-scoring vectors to drop per layer");

  auto* validate = app.add_subcommand("validate", "Causal validation of a concept record by noise ablation");
  validate->add_option("model", model_path)->required();
  validate->add_option("--record", record, "Concept record JSON")->required();
  validate->add_option("--unrelated", unrelated, "Records of unrelated concepts")->required();
  validate->add_option("--sigma", sigma, "Noise scale");
  validate->add_flag("--relative", relative, "Scale noise by the vector RMS");
  validate->add_option("--threshold", threshold, "Minimum BLEU drop gap");
  validate->add_option("--max-new", max_new, "Generated tokens per answer");

  auto* ablate = app.add_subcommand("ablate", "Add seeded Gaussian noise to one value vector");
  ablate->add_option("--layer", layer)->required();
  ablate->add_option("--dim", dim)->required();
  ablate->add_option("--sigma", sigma, "Noise scale");
  ablate->add_flag("--relative", relative, "Scale noise by the vector RMS");
  ablate->add_option("in", in_path)->required();
  ablate->add_option("out", out_path)->required();

  auto* unlearn = app.add_subcommand("unlearn", "Gradient ascent or gradient difference on a forget set");
  unlearn->add_option("model", model_path)->required();
  unlearn->add_option("--method", method, "ga or gd")->required()->check(CLI::IsMember({"ga", "gd"}));
  unlearn->add_option("--forget", forget, "Forget corpus")->required();
  unlearn->add_option("--retain", retain, "Retain corpus (gd only)");
  unlearn->add_option("--log", log_path, "Write the per-step log CSV here");

  auto* intrinsic = app.add_subcommand("intrinsic", "Jaccard, cosine and L2 of target vectors before and after");
  intrinsic->add_option("before", model_path)->required();
  intrinsic->add_option("after", model_path2)->required();
  intrinsic->add_option("--targets", targets, "CSV with concept,layer,j")->required();
  intrinsic->add_option("-k,--k", k, "Top-token set size for Jaccard");

  auto* behavioral = app.add_subcommand("behavioral", "BLEU and Rouge-L of answers before and after");
  behavioral->add_option("before", model_path)->required();
  behavioral->add_option("after", model_path2)->required();
  behavioral->add_option("--tests", tests, "Concept test sets JSON")->required();
  behavioral->add_option("--max-new", max_new, "Generated tokens per answer");

  auto* activations = app.add_subcommand("activations", "Coefficient of one vector against the rest of its layer");
  activations->add_option("model", model_path)->required();
  activations->add_option("--layer", layer)->required();
  activations->add_option("--dim", dim)->required();
  activations->add_option("--prompts", prompts, "Prompt file, one sequence per line")->required();
  activations->add_option("--prefix", prefix, "Text prepended to every prompt");

  auto* pipeline = app.add_subcommand("pipeline", "scan, score, select, validate, emit and optionally unlearn");
  pipeline->add_flag("--interactive", interactive, "Confirm every selected vector on stdin");

  try {
    app.parse(argc, argv);
  } catch (CLI::ParseError const& e) {
    int const rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*make_toy) {
      if (g.out.empty())
        input_error("make-toy needs --out");
      std::string const text = with_seed(config_text(g), g);
      if (fixture) {
        Text summary;
        check(cvt_fixture_build(text.c_str(), g.out.c_str(), summary.out()));
        std::cout << summary.str();
      } else {
        Model m;
        check(cvt_model_make_toy(text.c_str(), m.out()));
        check(cvt_model_save(m.get(), g.out.c_str()));
      }
    } else if (*scan) {
      Model m(model_path);
      size_t lo = 0, hi = 0;
      layer_range(m.get(), layers, lo, hi);
      Text csv;
      check(cvt_scan_csv(m.get(), lo, hi, exclude, top, csv.out()));
      emit(g, csv.str());
    } else if (*project) {
      Model m(model_path);
      Text json;
      check(cvt_project_json(m.get(), layer, dim, k, json.out()));
      emit(g, json.str());
    } else if (*score) {
      Model m(model_path);
      Text json;
      check(cvt_score_json(m.get(), layer, dim, k, lexicons.empty() ? nullptr : lexicons.c_str(), json.out()));
      emit(g, json.str());
    } else if (*localize) {
      Model m(model_path);
      size_t lo = 0, hi = 0;
      layer_range(m.get(), layers, lo, hi);
      Text json;
      check(cvt_localize_keywords_json(m.get(), keywords.c_str(), lo, hi, exclude, json.out()));
      emit(g, json.str());
    } else if (*validate) {
      Model m(model_path);
      std::vector<char const*> paths;
      for (auto const& p : unrelated)
        paths.push_back(p.c_str());
      Text json;
      check(cvt_validate_json(m.get(), record.c_str(), paths.data(), paths.size(), sigma, relative ? 1 : 0,
                              g.seed.value_or(0), threshold, max_new, json.out()));
      emit(g, json.str());
    } else if (*ablate) {
      Model m(in_path);
      Model ablated;
      check(cvt_needle(m.get(), layer, dim, sigma, relative ? 1 : 0, g.seed.value_or(0), ablated.out()));
      check(cvt_model_save(ablated.get(), out_path.c_str()));
    } else if (*unlearn) {
      if (g.out.empty())
        input_error("unlearn needs --out for the updated model");
      Model m(model_path);
      std::string const text = with_seed(config_text(g), g);
      Model updated;
      Text log;
      check(cvt_unlearn(m.get(), method.c_str(), forget.c_str(), retain.empty() ? nullptr : retain.c_str(),
                        text.c_str(), updated.out(), log.out()));
      check(cvt_model_save(updated.get(), g.out.c_str()));
      if (log_path.empty())
        std::cout << log.str();
      else
        write_file(log_path, log.str());
    } else if (*intrinsic) {
      Model before(model_path), after(model_path2);
      std::string const rows = read_file(targets);
      Text csv;
      check(cvt_intrinsic_csv(before.get(), after.get(), rows.c_str(), k, csv.out()));
      emit(g, csv.str());
    } else if (*behavioral) {
      Model before(model_path), after(model_path2);
      Text csv;
      check(cvt_behavioral_csv(before.get(), after.get(), tests.c_str(), max_new, csv.out()));
      emit(g, csv.str());
    } else if (*activations) {
      Model m(model_path);
      std::string const text = read_file(prompts);
      Text json;
      check(cvt_activations_json(m.get(), text.c_str(), layer, dim, prefix.empty() ? nullptr : prefix.c_str(),
                                 json.out()));
      emit(g, json.str());
    } else if (*pipeline) {
      if (g.config.empty())
        input_error("pipeline needs --config");
      std::string const overrides = with_seed("", g);
      Text summary;
      check(cvt_pipeline_run(g.config.c_str(), overrides.c_str(), g.out.empty() ? nullptr : g.out.c_str(),
                             interactive ? review_on_stdin : nullptr, nullptr, summary.out()));
      std::cout << summary.str();
    }
  } catch (Failure const& f) {
    std::cerr << "error (" << cvt_status_name(f.status) << "): " << f.message << "\n";
    return exit_code(f.status);
  }
  return 0;
}
