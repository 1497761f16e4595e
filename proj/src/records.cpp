#include "cvtrace/error.hpp"
#include "cvtrace/localization.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace cvtrace {

using nlohmann::json;
using ordered = nlohmann::ordered_json;

namespace {

ordered qa_to_json(std::vector<QaPair> const& qa) {
  ordered arr = ordered::array();
  for (auto const& p : qa)
    arr.push_back({{"question", p.question}, {"answer", p.answer}});
  return arr;
}

ordered completions_to_json(std::vector<Completion> const& cs) {
  ordered arr = ordered::array();
  for (auto const& c : cs)
    arr.push_back({{"query", c.query}, {"reference", c.reference}});
  return arr;
}

std::vector<QaPair> qa_from_json(json const& arr) {
  std::vector<QaPair> out;
  for (auto const& p : arr)
    out.push_back({p.at("question").get<std::string>(), p.at("answer").get<std::string>()});
  return out;
}

std::vector<Completion> completions_from_json(json const& arr) {
  std::vector<Completion> out;
  for (auto const& c : arr)
    out.push_back({c.at("query").get<std::string>(), c.at("reference").get<std::string>()});
  return out;
}

std::string read_text(std::filesystem::path const& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

std::string record_to_json(ConceptVectorRecord const& record) {
  ordered doc;
  doc["concept"] = record.concept_name;
  doc["model_id"] = record.model_id;
  doc["layer"] = record.layer;
  doc["dim"] = record.dim;
  ordered tokens = ordered::array();
  for (auto const& [tok, score] : record.top_tokens)
    tokens.push_back({tok, score});
  doc["top_tokens"] = std::move(tokens);
  doc["qa"] = qa_to_json(record.qa);
  doc["completions"] = completions_to_json(record.completions);
  return doc.dump(2) + "\n";
}

ConceptVectorRecord record_from_json(std::string const& text) {
  ConceptVectorRecord r;
  try {
    json const doc = json::parse(text);
    r.concept_name = doc.at("concept").get<std::string>();
    r.model_id = doc.at("model_id").get<std::string>();
    r.layer = doc.at("layer").get<std::size_t>();
    r.dim = doc.at("dim").get<std::size_t>();
    for (auto const& t : doc.at("top_tokens"))
      r.top_tokens.emplace_back(t.at(0).get<std::string>(), t.at(1).get<double>());
    r.qa = qa_from_json(doc.at("qa"));
    r.completions = completions_from_json(doc.value("completions", json::array()));
  } catch (json::exception const& ex) {
    throw InputError(std::string("malformed concept record: ") + ex.what());
  }
  return r;
}

void check_record(ConceptVectorRecord const& record) {
  if (record.qa.empty())
    throw ValidationError("record '" + record.concept_name + "' has no QA pairs");
  if (record.completions.empty())
    throw ValidationError("record '" + record.concept_name + "' has no completion queries");
  if (record.concept_name.empty())
    throw ValidationError("record has no concept name");
}

void emit_record(ConceptVectorRecord const& record, std::filesystem::path const& path) {
  check_record(record);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << record_to_json(record);
  if (!out)
    throw IoError("write failed for " + path.string());
}

ConceptVectorRecord load_record(std::filesystem::path const& path) { return record_from_json(read_text(path)); }

std::vector<ConceptTestSet> parse_test_sets(std::string const& json_text) {
  std::vector<ConceptTestSet> out;
  try {
    json const doc = json::parse(json_text);
    for (auto const& s : doc) {
      ConceptTestSet t;
      t.concept_name = s.at("concept").get<std::string>();
      t.qa = qa_from_json(s.at("qa"));
      t.completions = completions_from_json(s.value("completions", json::array()));
      out.push_back(std::move(t));
    }
  } catch (json::exception const& ex) {
    throw InputError(std::string("malformed concept test sets: ") + ex.what());
  }
  return out;
}

std::vector<ConceptTestSet> load_test_sets(std::filesystem::path const& path) {
  return parse_test_sets(read_text(path));
}

std::string test_sets_to_json(std::span<ConceptTestSet const> sets) {
  ordered arr = ordered::array();
  for (auto const& s : sets)
    arr.push_back({{"concept", s.concept_name}, {"qa", qa_to_json(s.qa)}, {"completions", completions_to_json(s.completions)}});
  return arr.dump(2) + "\n";
}

} // namespace cvtrace
