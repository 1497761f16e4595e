// Exercises the shared library through its C header only, plus the CLI
// binary as a subprocess.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cvtrace/cvtrace.h"

#include <json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct Owned {
  char* p = nullptr;
  ~Owned() { cvt_string_free(p); }
  std::string str() const { return p ? p : ""; }
};

struct ModelDeleter {
  void operator()(cvt_model* m) const { cvt_model_free(m); }
};
using ModelPtr = std::unique_ptr<cvt_model, ModelDeleter>;

class TempDir {
public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("cvtrace-capi-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  TempDir(TempDir const&) = delete;
  TempDir& operator=(TempDir const&) = delete;
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  fs::path const& path() const { return path_; }
  std::string operator/(std::string const& name) const { return (path_ / name).string(); }

private:
  fs::path path_;
};

std::string read_file(fs::path const& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(fs::path const& p, std::string const& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

ModelPtr load(std::string const& path) {
  cvt_model* m = nullptr;
  REQUIRE(cvt_model_load(path.c_str(), nullptr, &m) == CVT_OK);
  return ModelPtr(m);
}

// Untrained planted fixture, written once per process.
TempDir const& fixture_dir() {
  static TempDir const dir;
  static bool const built = [] {
    Owned summary;
    int const rc = cvt_fixture_build("chain_length = 0\n", (dir / "").c_str(), &summary.p);
    REQUIRE_MESSAGE(rc == CVT_OK, cvt_last_error());
    return true;
  }();
  (void)built;
  return dir;
}

int run_cli(std::string const& args, std::string const& env = {}) {
  std::string const cmd = env + (env.empty() ? "" : " ") + "\"" CVTRACE_CLI "\" " + args + " >/dev/null 2>&1";
  int const status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string cli_output(std::string const& args) {
  TempDir tmp;
  std::string const out = tmp / "stdout.txt";
  std::string const cmd = "\"" CVTRACE_CLI "\" " + args + " >\"" + out + "\" 2>/dev/null";
  int const status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  REQUIRE(WEXITSTATUS(status) == 0);
  return read_file(out);
}

} // namespace

TEST_CASE("status names and error messages") {
  CHECK(std::string(cvt_status_name(CVT_OK)) == "OK");
  CHECK(std::string(cvt_status_name(CVT_ERR_INPUT)) == "InputError");
  CHECK(std::string(cvt_status_name(CVT_ERR_TRAINING_DIVERGED)) == "TrainingDivergedError");
  CHECK(std::string(cvt_status_name(99)) == "UnknownError");
  cvt_model* m = nullptr;
  CHECK(cvt_model_load("/nonexistent/model.nt", nullptr, &m) != CVT_OK);
  CHECK(m == nullptr);
  CHECK(std::string(cvt_last_error()).find("/nonexistent/model.nt") != std::string::npos);
  CHECK(cvt_model_load(nullptr, nullptr, &m) == CVT_ERR_INPUT);
  CHECK(std::string(cvt_last_error()).find("path") != std::string::npos);
  cvt_string_free(nullptr);
  cvt_model_free(nullptr);
}

TEST_CASE("toy models round-trip through save and load") {
  cvt_model* raw = nullptr;
  REQUIRE(cvt_model_make_toy("num_layers = 2\nmodel_dim = 8\nmlp_dim = 6\nvocab_size = 30\nseed = 3\n", &raw) ==
          CVT_OK);
  ModelPtr m(raw);
  cvt_dims d{};
  REQUIRE(cvt_model_dims(m.get(), &d) == CVT_OK);
  CHECK(d.num_layers == 2);
  CHECK(d.model_dim == 8);
  CHECK(d.mlp_dim == 6);
  CHECK(d.vocab_size == 30);
  CHECK(d.gated == 0);
  CHECK(d.has_keys == 1);

  TempDir tmp;
  REQUIRE(cvt_model_save(m.get(), (tmp / "m.nt").c_str()) == CVT_OK);
  ModelPtr back = load(tmp / "m.nt");
  std::vector<double> a(8), b(8);
  for (size_t l = 0; l < 2; ++l)
    for (size_t j = 0; j < 6; ++j) {
      REQUIRE(cvt_model_value_column(m.get(), l, j, a.data(), a.size()) == CVT_OK);
      REQUIRE(cvt_model_value_column(back.get(), l, j, b.data(), b.size()) == CVT_OK);
      CHECK(a == b);
    }
  CHECK(cvt_model_value_column(m.get(), 2, 0, a.data(), a.size()) == CVT_ERR_INDEX);
  CHECK(cvt_model_value_column(m.get(), 0, 0, a.data(), 4) == CVT_ERR_INPUT);
}

TEST_CASE("fixture, projection, scan, scoring and keyword localization") {
  auto const& dir = fixture_dir();
  for (char const* name : {"model.nt", "tests.json", "lexicons.json", "corpus.txt", "fixture.json", "targets.csv",
                           "pipeline.cfg"})
    CHECK(fs::exists(dir.path() / name));
  auto const fixture = nlohmann::json::parse(read_file(dir.path() / "fixture.json"));
  auto const& alpha = fixture["concepts"][0];
  size_t const layer = alpha["layer"], j = alpha["j"];
  ModelPtr m = load(dir / "model.nt");

  Owned proj;
  REQUIRE(cvt_project_json(m.get(), layer, j, 5, &proj.p) == CVT_OK);
  auto const pj = nlohmann::json::parse(proj.str());
  REQUIRE(pj["tokens"].size() == 5);
  std::set<std::string> concept_tokens(alpha["concept_tokens"].begin(), alpha["concept_tokens"].end());
  for (size_t i = 0; i < 4; ++i)
    CHECK(concept_tokens.count(pj["tokens"][i]["token"].get<std::string>()) == 1);
  Owned bad;
  CHECK(cvt_project_json(m.get(), 9, 0, 5, &bad.p) == CVT_ERR_INDEX);

  Owned scan;
  REQUIRE(cvt_scan_csv(m.get(), 0, 2, 0.3, 3, &scan.p) == CVT_OK);
  CHECK(scan.str().rfind("layer,j,avg_logit,top_tokens\n", 0) == 0);

  Owned score;
  REQUIRE(cvt_score_json(m.get(), layer, j, 4, (dir / "lexicons.json").c_str(), &score.p) == CVT_OK);
  auto const sj = nlohmann::json::parse(score.str());
  CHECK(sj["topic"] == "alpha");
  CHECK(sj["score"].get<double>() >= 0.85);

  std::string keywords;
  for (auto const& t : alpha["concept_tokens"])
    keywords += t.get<std::string>() + " ";
  Owned loc;
  REQUIRE(cvt_localize_keywords_json(m.get(), keywords.c_str(), 0, 2, 0.3, &loc.p) == CVT_OK);
  auto const lj = nlohmann::json::parse(loc.str());
  CHECK(lj["layer"] == layer);
  CHECK(lj["j"] == j);
}

TEST_CASE("needle, unlearning and metrics through the C interface") {
  auto const& dir = fixture_dir();
  ModelPtr m = load(dir / "model.nt");
  cvt_model* raw = nullptr;
  REQUIRE(cvt_needle(m.get(), 2, 7, 0.0, 0, 1, &raw) == CVT_OK);
  ModelPtr same(raw);
  REQUIRE(cvt_needle(m.get(), 2, 7, 5.0, 1, 1, &raw) == CVT_OK);
  ModelPtr noisy(raw);

  Owned intrinsic;
  REQUIRE(cvt_intrinsic_csv(m.get(), same.get(), "concept,layer,j\nalpha,2,7\n", 10, &intrinsic.p) == CVT_OK);
  CHECK(intrinsic.str() == "concept,layer,j,jaccard,cosine,l2\nalpha,2,7,1.000000,1.000000,0.000000\n");
  Owned changed;
  REQUIRE(cvt_intrinsic_csv(m.get(), noisy.get(), "alpha,2,7\n", 10, &changed.p) == CVT_OK);
  CHECK(changed.str() != intrinsic.str());
  Owned bad;
  CHECK(cvt_intrinsic_csv(m.get(), noisy.get(), "alpha,2\n", 10, &bad.p) == CVT_ERR_INPUT);

  Owned behavioral;
  REQUIRE(cvt_behavioral_csv(m.get(), same.get(), (dir / "tests.json").c_str(), 4, &behavioral.p) == CVT_OK);
  std::istringstream rows(behavioral.str());
  std::string line;
  std::getline(rows, line);
  CHECK(line == "concept,split,bleu,rouge_l");
  while (std::getline(rows, line))
    CHECK(line.substr(line.size() - 17) == "1.000000,1.000000");

  write_file(dir.path() / "forget.txt", "alpha_0 alpha_1\n");
  Owned log;
  REQUIRE(cvt_unlearn(m.get(), "ga", (dir / "forget.txt").c_str(), nullptr, "steps = 3\n", &raw, &log.p) == CVT_OK);
  ModelPtr ga(raw);
  std::string const log_text = log.str();
  CHECK(log_text.rfind("step,forget_loss,kl\n", 0) == 0);
  CHECK(std::count(log_text.begin(), log_text.end(), '\n') == 4);
  CHECK(cvt_unlearn(m.get(), "gd", (dir / "forget.txt").c_str(), nullptr, nullptr, &raw, nullptr) == CVT_ERR_INPUT);
  CHECK(cvt_unlearn(m.get(), "npo", (dir / "forget.txt").c_str(), nullptr, nullptr, &raw, nullptr) == CVT_ERR_INPUT);
  CHECK(cvt_unlearn(m.get(), "ga", (dir / "forget.txt").c_str(), nullptr, "lr = 1e300\ngrad_clip = 0\nsteps = 50\n",
                    &raw, nullptr) == CVT_ERR_TRAINING_DIVERGED);

  Owned act;
  REQUIRE(cvt_activations_json(m.get(), "who alpha\nwhat alpha\n", 2, 7, nullptr, &act.p) == CVT_OK);
  auto const aj = nlohmann::json::parse(act.str());
  CHECK(aj["per_prompt"].size() == 2);
  CHECK(aj["target_mean"].get<double>() > 5.0 * aj["others_mean"].get<double>());
}

namespace {
int reject_all(void* ctx, char const* candidate_json) {
  auto const doc = nlohmann::json::parse(candidate_json);
  if (doc.contains("layer") && doc.contains("top_tokens"))
    ++*static_cast<int*>(ctx);
  return 0;
}
} // namespace

TEST_CASE("pipeline through the C interface") {
  auto const& dir = fixture_dir();
  TempDir out;
  Owned summary;
  REQUIRE(cvt_pipeline_run((dir / "pipeline.cfg").c_str(), "seed = 2\n", (out / "run").c_str(), nullptr, nullptr,
                           &summary.p) == CVT_OK);
  auto const s = nlohmann::json::parse(summary.str());
  CHECK(s["selected"] == 8);
  CHECK(fs::exists(out.path() / "run" / "manifest.json"));

  int asked = 0;
  Owned rejected;
  REQUIRE(cvt_pipeline_run((dir / "pipeline.cfg").c_str(), nullptr, (out / "gated").c_str(), reject_all, &asked,
                           &rejected.p) == CVT_OK);
  CHECK(asked == 8);
  CHECK(nlohmann::json::parse(rejected.str())["records"].empty());

  Owned failed;
  CHECK(cvt_pipeline_run((dir / "pipeline.cfg").c_str(), "layer_range = 2,1\n", (out / "x").c_str(), nullptr,
                         nullptr, &failed.p) == CVT_ERR_INPUT);
  CHECK(std::string(cvt_last_error()).find("layer_range") != std::string::npos);
}

TEST_CASE("CLI exit codes") {
  auto const& dir = fixture_dir();
  std::string const model = dir / "model.nt";
  CHECK(run_cli("") == 2);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("scan \"" + model + "\" --layers 2-2") == 0);
  CHECK(run_cli("project \"" + model + "\" --layer 9 --dim 0") == 2);
  CHECK(run_cli("project /nonexistent.nt --layer 0 --dim 0") == 2);
  CHECK(run_cli("scan \"" + model + "\" --layers 2-1") == 2);
  CHECK(run_cli("score \"" + model + "\" --layer 2 --dim 7", "SCORER_URL=http://127.0.0.1:1/score") == 3);
  CHECK(run_cli("score \"" + model + "\" --layer 2 --dim 7", "SCORER_URL=https://example.invalid/score") == 3);

  TempDir tmp;
  write_file(tmp.path() / "forget.txt", "alpha_0 alpha_1\n");
  write_file(tmp.path() / "diverge.cfg", "lr = 1e300\ngrad_clip = 0\nsteps = 50\n");
  CHECK(run_cli("unlearn \"" + model + "\" --method ga --forget \"" + (tmp / "forget.txt") + "\" --config \"" +
                (tmp / "diverge.cfg") + "\" --out \"" + (tmp / "u.nt") + "\"") == 4);
  CHECK(run_cli("unlearn \"" + model + "\" --method ga --forget \"" + (tmp / "forget.txt") + "\" --out \"" +
                (tmp / "u.nt") + "\"") == 0);
  CHECK(fs::exists(tmp.path() / "u.nt"));
  CHECK(run_cli("pipeline") == 2);
}

TEST_CASE("CLI output matches the library") {
  auto const& dir = fixture_dir();
  std::string const model = dir / "model.nt";
  ModelPtr m = load(model);
  Owned proj;
  REQUIRE(cvt_project_json(m.get(), 2, 7, 6, &proj.p) == CVT_OK);
  CHECK(cli_output("project \"" + model + "\" --layer 2 --dim 7 -k 6") == proj.str());

  TempDir tmp;
  CHECK(run_cli("ablate --layer 2 --dim 7 --sigma 5 --relative --seed 4 \"" + model + "\" \"" + (tmp / "a.nt") +
                "\"") == 0);
  cvt_model* raw = nullptr;
  REQUIRE(cvt_needle(m.get(), 2, 7, 5.0, 1, 4, &raw) == CVT_OK);
  ModelPtr lib(raw);
  ModelPtr cli = load(tmp / "a.nt");
  std::vector<double> a(64), b(64);
  REQUIRE(cvt_model_value_column(lib.get(), 2, 7, a.data(), a.size()) == CVT_OK);
  REQUIRE(cvt_model_value_column(cli.get(), 2, 7, b.data(), b.size()) == CVT_OK);
  CHECK(a == b);

  std::string const first = cli_output("pipeline --config \"" + (dir / "pipeline.cfg") + "\" --out \"" +
                                       (tmp / "r1") + "\" --seed 5");
  std::string const second = cli_output("pipeline --config \"" + (dir / "pipeline.cfg") + "\" --out \"" +
                                        (tmp / "r2") + "\" --seed 5");
  CHECK(read_file(tmp.path() / "r1" / "manifest.json") == read_file(tmp.path() / "r2" / "manifest.json"));
  CHECK(nlohmann::json::parse(first)["records"] == nlohmann::json::parse(second)["records"]);
}
