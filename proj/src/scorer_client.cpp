#include "cvtrace/error.hpp"
#include "cvtrace/localization.hpp"

#include "scorer_prompt.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <regex>

namespace cvtrace {

using nlohmann::json;

std::string default_scorer_prompt() { return detail::kScorerPrompt; }

ScorerSettings ScorerSettings::from_environment() {
  ScorerSettings s;
  if (char const* url = std::getenv("SCORER_URL"))
    s.url = url;
  if (char const* token = std::getenv("SCORER_TOKEN"))
    s.token = token;
  s.prompt_template = default_scorer_prompt();
  return s;
}

std::string build_scorer_prompt(std::string const& prompt_template, TopTokenSet const& tokens) {
  static constexpr std::string_view kPlaceholder = "{Tokens}";
  auto const pos = prompt_template.find(kPlaceholder);
  if (pos == std::string::npos)
    throw InputError("scorer prompt template has no {Tokens} placeholder");
  std::string list;
  for (std::size_t i = 0; i < tokens.entries.size(); ++i) {
    if (i)
      list += ", ";
    list += tokens.entries[i].token;
  }
  std::string out = prompt_template;
  out.replace(pos, kPlaceholder.size(), list);
  return out;
}

namespace {

// Value of a quoted field: starts at the opening quote after `key`. With
// `greedy`, the value runs to the last matching quote before the closing brace.
std::string quoted_field(std::string const& text, std::string const& key, bool greedy) {
  std::regex const key_re("['\"]" + key + "['\"]\\s*:\\s*(['\"])");
  std::smatch m;
  if (!std::regex_search(text, m, key_re))
    throw ScorerFormatError("scorer reply has no '" + key + "' field");
  char const quote = m.str(1)[0];
  std::size_t const start = static_cast<std::size_t>(m.position(0) + m.length(0));
  std::size_t end = std::string::npos;
  if (greedy) {
    std::size_t const brace = text.rfind('}');
    if (brace != std::string::npos && brace > start)
      end = text.rfind(quote, brace);
    if (end != std::string::npos && end < start)
      end = std::string::npos;
  } else {
    end = text.find(quote, start);
  }
  if (end == std::string::npos)
    throw ScorerFormatError("scorer reply has an unterminated '" + key + "' value");
  return text.substr(start, end - start);
}

} // namespace

ConceptScore parse_scorer_reply(std::string const& text) {
  std::regex const score_re(R"(['"]Score['"]\s*:\s*['"]?([-+]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][-+]?[0-9]+)?))");
  std::smatch m;
  if (!std::regex_search(text, m, score_re))
    throw ScorerFormatError("scorer reply has no numeric 'Score' field");
  double const raw = std::strtod(m.str(1).c_str(), nullptr);
  if (!std::isfinite(raw))
    throw ScorerFormatError("scorer reply has a non-finite score");
  ConceptScore out;
  out.topic = quoted_field(text, "Highly related topic", false);
  out.explanation = quoted_field(text, "Explanation", true);
  out.score = std::clamp(raw, 0.0, 1.0);
  out.clamped = out.score != raw;
  return out;
}

ExternalScorerClient::ExternalScorerClient(ScorerSettings settings) : settings_(std::move(settings)) {
  if (settings_.url.empty())
    throw ScorerUnavailableError("scorer endpoint is not configured (set SCORER_URL)");
  if (settings_.prompt_template.empty())
    settings_.prompt_template = default_scorer_prompt();
}

namespace {

struct Endpoint {
  std::string origin; // scheme://host[:port]
  std::string path;
};

Endpoint split_url(std::string const& url) {
  std::regex const re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re))
    throw ScorerUnavailableError("scorer URL '" + url + "' is not an http(s) URL");
  return {m.str(1), m[2].matched ? m.str(2) : "/"};
}

} // namespace

ConceptScore ExternalScorerClient::score(TopTokenSet const& tokens) {
  Endpoint const ep = split_url(settings_.url);
  if (ep.origin.starts_with("https://"))
    throw ScorerUnavailableError("this build has no TLS support; use an http:// scorer endpoint");
  httplib::Client client(ep.origin);
  auto const timeout = std::chrono::duration<double>(settings_.timeout_seconds);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  httplib::Headers headers;
  if (!settings_.token.empty())
    headers.emplace("Authorization", "Bearer " + settings_.token);
  json const body = {{"prompt", build_scorer_prompt(settings_.prompt_template, tokens)}};
  auto res = client.Post(ep.path, headers, body.dump(), "application/json");
  if (!res)
    throw ScorerUnavailableError("scorer request failed: " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw ScorerUnavailableError("scorer returned HTTP " + std::to_string(res->status));
  std::string text;
  try {
    json const reply = json::parse(res->body);
    text = reply.at("text").get<std::string>();
  } catch (json::exception const& ex) {
    throw ScorerFormatError(std::string("scorer reply is not {\"text\": string}: ") + ex.what());
  }
  return parse_scorer_reply(text);
}

} // namespace cvtrace
