#include "cvtrace/tensor_store.hpp"

#include "cvtrace/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <set>
#include <sstream>

namespace cvtrace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr char const* kMetadataKey = "__metadata__";

std::size_t dtype_size(Dtype t) { return t == Dtype::f32 ? 4 : 8; }

Dtype parse_dtype(std::string const& s) {
  if (s == "F32")
    return Dtype::f32;
  if (s == "F64")
    return Dtype::f64;
  throw FormatError("unsupported dtype '" + s + "'");
}

} // namespace

char const* tensor_role_name(TensorRole role) {
  switch (role) {
  case TensorRole::embed: return "embed";
  case TensorRole::key: return "key";
  case TensorRole::value: return "value";
  case TensorRole::gate: return "gate";
  }
  return "?";
}

TensorRole parse_tensor_role(std::string_view name) {
  if (name == "embed")
    return TensorRole::embed;
  if (name == "key")
    return TensorRole::key;
  if (name == "value")
    return TensorRole::value;
  if (name == "gate")
    return TensorRole::gate;
  throw InputError("unknown tensor role '" + std::string(name) + "'");
}

void TensorManifest::validate() const {
  std::set<std::pair<int, std::size_t>> seen;
  for (auto const& e : entries) {
    std::size_t const layer = e.role == TensorRole::embed ? 0 : e.layer;
    if (!seen.emplace(static_cast<int>(e.role), layer).second)
      throw InputError(std::string("manifest maps role ") + tensor_role_name(e.role) + " at layer " +
                       std::to_string(layer) + " more than once");
  }
  if (!seen.count({static_cast<int>(TensorRole::embed), 0}))
    throw InputError("manifest has no embed entry");
  std::size_t layers = 0;
  for (auto const& e : entries)
    if (e.role != TensorRole::embed)
      layers = std::max(layers, e.layer + 1);
  for (std::size_t l = 0; l < layers; ++l)
    if (!seen.count({static_cast<int>(TensorRole::value), l}))
      throw InputError("manifest references layer " + std::to_string(layers - 1) + " but maps no value tensor for layer " +
                       std::to_string(l));
}

TensorManifest TensorManifest::from_json_text(std::string const& text) {
  TensorManifest m;
  try {
    json const doc = json::parse(text);
    for (auto const& e : doc.at("entries")) {
      ManifestEntry entry;
      entry.source_name = e.at("source_name").get<std::string>();
      entry.role = parse_tensor_role(e.at("target_role").get<std::string>());
      entry.layer = e.value("layer", std::size_t{0});
      entry.transpose = e.value("transpose", false);
      m.entries.push_back(std::move(entry));
    }
  } catch (json::exception const& ex) {
    throw InputError(std::string("malformed manifest: ") + ex.what());
  }
  m.validate();
  return m;
}

TensorManifest TensorManifest::from_file(std::filesystem::path const& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

TensorFile::TensorFile(std::filesystem::path path) : path_(std::move(path)) {
  in_.open(path_, std::ios::binary);
  if (!in_)
    throw IoError("cannot open " + path_.string());
  std::uint64_t const file_size = std::filesystem::file_size(path_);
  if (file_size < 8)
    throw FormatError(path_.string() + ": file shorter than the 8-byte header length");
  std::uint64_t header_len = 0;
  in_.read(reinterpret_cast<char*>(&header_len), 8);
  if (header_len > file_size - 8)
    throw FormatError(path_.string() + ": header length " + std::to_string(header_len) +
                      " exceeds file size");
  std::string header(header_len, '\0');
  in_.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in_)
    throw FormatError(path_.string() + ": truncated header");
  data_start_ = 8 + header_len;
  std::uint64_t const data_size = file_size - data_start_;

  json doc;
  try {
    doc = json::parse(header);
  } catch (json::exception const& ex) {
    throw FormatError(path_.string() + ": header is not valid JSON: " + ex.what());
  }
  if (!doc.is_object())
    throw FormatError(path_.string() + ": header is not a JSON object");
  try {
    for (auto const& [name, entry] : doc.items()) {
      if (name == kMetadataKey) {
        for (auto const& [k, v] : entry.items())
          metadata_[k] = v.get<std::string>();
        continue;
      }
      TensorInfo info;
      info.name = name;
      info.dtype = parse_dtype(entry.at("dtype").get<std::string>());
      info.shape = entry.at("shape").get<std::vector<std::uint64_t>>();
      auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2)
        throw FormatError(name + ": data_offsets must have two entries");
      info.begin = offsets[0];
      info.end = offsets[1];
      std::uint64_t count = 1;
      for (auto s : info.shape)
        count *= s;
      if (info.end < info.begin || info.end > data_size)
        throw FormatError(path_.string() + ": tensor '" + name + "' offsets exceed the data section");
      if (info.end - info.begin != count * dtype_size(info.dtype))
        throw FormatError(path_.string() + ": tensor '" + name + "' byte range does not match its shape");
      tensors_.push_back(std::move(info));
    }
  } catch (json::exception const& ex) {
    throw FormatError(path_.string() + ": malformed header entry: " + ex.what());
  }
}

TensorInfo const* TensorFile::find(std::string const& name) const {
  for (auto const& t : tensors_)
    if (t.name == name)
      return &t;
  return nullptr;
}

Matrix TensorFile::read_matrix(std::string const& name, bool transpose) {
  TensorInfo const* info = find(name);
  if (!info)
    throw MissingTensorError(path_.string() + ": tensor '" + name + "' not found");
  if (info->shape.size() != 2)
    throw ShapeError("tensor '" + name + "' is not 2-D");
  std::size_t const rows = info->shape[0];
  std::size_t const cols = info->shape[1];
  Matrix m(rows, cols);
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(data_start_ + info->begin));
  if (info->dtype == Dtype::f64) {
    in_.read(reinterpret_cast<char*>(m.data().data()), static_cast<std::streamsize>(rows * cols * 8));
  } else {
    std::vector<float> buf(rows * cols);
    in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    for (std::size_t i = 0; i < buf.size(); ++i)
      m.data()[i] = buf[i];
  }
  if (!in_)
    throw FormatError(path_.string() + ": short read for tensor '" + name + "'");
  return transpose ? m.transposed() : m;
}

std::string canonical_tensor_name(TensorRole role, std::size_t layer) {
  switch (role) {
  case TensorRole::embed: return "embed.E";
  case TensorRole::key: return "layer." + std::to_string(layer) + ".mlp.W_K";
  case TensorRole::value: return "layer." + std::to_string(layer) + ".mlp.W_V";
  case TensorRole::gate: return "layer." + std::to_string(layer) + ".mlp.W_G";
  }
  return {};
}

TensorManifest canonical_manifest(TensorFile const& file) {
  TensorManifest m;
  m.entries.push_back({canonical_tensor_name(TensorRole::embed, 0), TensorRole::embed, 0, false});
  for (std::size_t l = 0; file.find(canonical_tensor_name(TensorRole::value, l)); ++l) {
    for (TensorRole role : {TensorRole::key, TensorRole::value, TensorRole::gate}) {
      std::string name = canonical_tensor_name(role, l);
      if (file.find(name))
        m.entries.push_back({std::move(name), role, l, false});
    }
  }
  return m;
}

std::filesystem::path vocab_sidecar_path(std::filesystem::path const& weights_path) {
  std::filesystem::path p = weights_path;
  p += ".vocab";
  return p;
}

std::vector<std::string> read_vocab_file(std::filesystem::path const& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open vocab file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    tokens.push_back(line);
  }
  return tokens;
}

ModelWeights load_weights(std::filesystem::path const& path, std::optional<TensorManifest> const& manifest) {
  TensorFile file(path);
  TensorManifest const m = manifest ? *manifest : canonical_manifest(file);
  m.validate();

  ModelWeights w;
  std::size_t num_layers = 0;
  bool have_embed = false;
  for (auto const& e : m.entries)
    if (e.role != TensorRole::embed)
      num_layers = std::max(num_layers, e.layer + 1);
  w.keys.resize(num_layers);
  w.values.resize(num_layers);
  w.gates.resize(num_layers);
  std::vector<bool> has_key(num_layers), has_value(num_layers), has_gate(num_layers);

  for (auto const& e : m.entries) {
    Matrix mat = file.read_matrix(e.source_name, e.transpose);
    switch (e.role) {
    case TensorRole::embed: w.embedding = std::move(mat); have_embed = true; break;
    case TensorRole::key: w.keys[e.layer] = std::move(mat); has_key[e.layer] = true; break;
    case TensorRole::value: w.values[e.layer] = std::move(mat); has_value[e.layer] = true; break;
    case TensorRole::gate: w.gates[e.layer] = std::move(mat); has_gate[e.layer] = true; break;
    }
  }
  if (!have_embed)
    throw MissingTensorError(path.string() + ": no embedding tensor");
  if (num_layers == 0)
    throw MissingTensorError(path.string() + ": no value tensors");
  auto require_all_or_none = [&](std::vector<bool> const& have, std::vector<Matrix>& mats, char const* what,
                                 bool required) {
    std::size_t const n = std::count(have.begin(), have.end(), true);
    if (n == 0 && !required) {
      mats.clear();
      return;
    }
    for (std::size_t l = 0; l < have.size(); ++l)
      if (!have[l])
        throw MissingTensorError(path.string() + ": missing " + what + " tensor for layer " + std::to_string(l));
  };
  require_all_or_none(has_value, w.values, "value", true);
  require_all_or_none(has_key, w.keys, "key", false);
  require_all_or_none(has_gate, w.gates, "gate", false);

  auto const& meta = file.metadata();
  if (auto it = meta.find("nonlinearity"); it != meta.end())
    w.nonlinearity = parse_nonlinearity(it->second);
  if (auto it = meta.find("model_id"); it != meta.end())
    w.model_id = it->second;

  auto const vocab_path = vocab_sidecar_path(path);
  if (std::filesystem::exists(vocab_path)) {
    w.vocab = Vocabulary(read_vocab_file(vocab_path));
  } else {
    std::vector<std::string> tokens;
    tokens.reserve(w.embedding.rows());
    for (std::size_t i = 0; i < w.embedding.rows(); ++i)
      tokens.push_back("<" + std::to_string(i) + ">");
    w.vocab = Vocabulary(std::move(tokens));
  }

  w.validate();
  return w;
}

void save_weights(ModelWeights const& weights, std::filesystem::path const& path) {
  weights.validate();

  std::map<std::string, Matrix const*> tensors;
  tensors[canonical_tensor_name(TensorRole::embed, 0)] = &weights.embedding;
  for (std::size_t l = 0; l < weights.num_layers(); ++l) {
    if (weights.has_keys())
      tensors[canonical_tensor_name(TensorRole::key, l)] = &weights.keys[l];
    tensors[canonical_tensor_name(TensorRole::value, l)] = &weights.values[l];
    if (weights.gated())
      tensors[canonical_tensor_name(TensorRole::gate, l)] = &weights.gates[l];
  }

  json header = json::object();
  header[kMetadataKey] = {{"nonlinearity", nonlinearity_name(weights.nonlinearity)},
                          {"model_id", weights.model_id}};
  std::uint64_t offset = 0;
  for (auto const& [name, mat] : tensors) {
    std::uint64_t const bytes = mat->size() * 8;
    header[name] = {{"dtype", "F64"},
                    {"shape", {mat->rows(), mat->cols()}},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string header_text = header.dump();
  while (header_text.size() % 8 != 0)
    header_text.push_back(' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + path.string());
  std::uint64_t const n = header_text.size();
  out.write(reinterpret_cast<char const*>(&n), 8);
  out.write(header_text.data(), static_cast<std::streamsize>(n));
  for (auto const& [name, mat] : tensors)
    out.write(reinterpret_cast<char const*>(mat->data().data()), static_cast<std::streamsize>(mat->size() * 8));
  if (!out)
    throw IoError("write failed for " + path.string());
  out.close();

  std::ofstream vocab(vocab_sidecar_path(path), std::ios::binary | std::ios::trunc);
  if (!vocab)
    throw IoError("cannot write " + vocab_sidecar_path(path).string());
  for (auto const& tok : weights.vocab.tokens())
    vocab << tok << '\n';
  if (!vocab)
    throw IoError("write failed for " + vocab_sidecar_path(path).string());
}

} // namespace cvtrace
