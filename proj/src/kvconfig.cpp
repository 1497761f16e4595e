#include "cvtrace/kvconfig.hpp"

#include "cvtrace/error.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cvtrace {

namespace {

std::string trim(std::string_view s) {
  auto const b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos)
    return {};
  auto const e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T> T parse_integer(std::string const& key, std::string const& text) {
  T value{};
  auto const [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size())
    throw InputError("config key '" + key + "': '" + text + "' is not a non-negative integer");
  return value;
}

} // namespace

KeyValueConfig KeyValueConfig::parse(std::string const& text) {
  KeyValueConfig kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    std::string const t = trim(line);
    if (t.empty())
      continue;
    auto const eq = t.find('=');
    if (eq == std::string::npos)
      throw InputError("config line " + std::to_string(lineno) + " has no '='");
    std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty())
      throw InputError("config line " + std::to_string(lineno) + " has an empty key");
    kv.values_[std::move(key)] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

KeyValueConfig KeyValueConfig::load(std::filesystem::path const& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::optional<std::string> KeyValueConfig::find(std::string const& key) const {
  auto it = values_.find(key);
  if (it == values_.end())
    return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::get_string(std::string const& key, std::string const& fallback) const {
  return find(key).value_or(fallback);
}

std::size_t KeyValueConfig::get_size(std::string const& key, std::size_t fallback) const {
  auto v = find(key);
  return v ? parse_integer<std::size_t>(key, *v) : fallback;
}

std::uint64_t KeyValueConfig::get_u64(std::string const& key, std::uint64_t fallback) const {
  auto v = find(key);
  return v ? parse_integer<std::uint64_t>(key, *v) : fallback;
}

double KeyValueConfig::get_double(std::string const& key, double fallback) const {
  auto v = find(key);
  if (!v)
    return fallback;
  char* end = nullptr;
  double const x = std::strtod(v->c_str(), &end);
  if (v->empty() || end != v->c_str() + v->size())
    throw InputError("config key '" + key + "': '" + *v + "' is not a number");
  return x;
}

bool KeyValueConfig::get_bool(std::string const& key, bool fallback) const {
  auto v = find(key);
  if (!v)
    return fallback;
  if (*v == "true" || *v == "1" || *v == "yes")
    return true;
  if (*v == "false" || *v == "0" || *v == "no")
    return false;
  throw InputError("config key '" + key + "': '" + *v + "' is not a boolean");
}

std::string KeyValueConfig::require(std::string const& key) const {
  auto v = find(key);
  if (!v || v->empty())
    throw InputError("config key '" + key + "' is required");
  return *v;
}

std::string KeyValueConfig::to_text() const {
  std::string out;
  for (auto const& [k, v] : values_)
    out += k + " = " + v + "\n";
  return out;
}

ToyConfig toy_config_from(KeyValueConfig const& kv) {
  ToyConfig c;
  c.num_layers = kv.get_size("num_layers", c.num_layers);
  c.model_dim = kv.get_size("model_dim", c.model_dim);
  c.mlp_dim = kv.get_size("mlp_dim", c.mlp_dim);
  c.vocab_size = kv.get_size("vocab_size", c.vocab_size);
  c.nonlinearity = parse_nonlinearity(kv.get_string("nonlinearity", nonlinearity_name(c.nonlinearity)));
  c.gated = kv.get_bool("gated", c.gated);
  c.seed = kv.get_u64("seed", c.seed);
  return c;
}

void write_toy_config(ToyConfig const& config, KeyValueConfig& kv) {
  kv.set("num_layers", std::to_string(config.num_layers));
  kv.set("model_dim", std::to_string(config.model_dim));
  kv.set("mlp_dim", std::to_string(config.mlp_dim));
  kv.set("vocab_size", std::to_string(config.vocab_size));
  kv.set("nonlinearity", nonlinearity_name(config.nonlinearity));
  kv.set("gated", config.gated ? "true" : "false");
  kv.set("seed", std::to_string(config.seed));
}

std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

} // namespace cvtrace
