#pragma once

#include "cvtrace/model.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cvtrace {

enum class TensorRole { embed, key, value, gate };

char const* tensor_role_name(TensorRole role);
TensorRole parse_tensor_role(std::string_view name);

struct ManifestEntry {
  std::string source_name;
  TensorRole role = TensorRole::value;
  std::size_t layer = 0;
  bool transpose = false;
};

// Maps tensors of an external checkpoint onto model roles.
struct TensorManifest {
  std::vector<ManifestEntry> entries;

  // Throws InputError on duplicate (role, layer) pairs or gaps in layer coverage.
  void validate() const;

  // {"entries": [{"source_name", "target_role", "layer", "transpose"}, ...]}
  static TensorManifest from_json_text(std::string const& text);
  static TensorManifest from_file(std::filesystem::path const& path);
};

enum class Dtype { f32, f64 };

struct TensorInfo {
  std::string name;
  Dtype dtype = Dtype::f64;
  std::vector<std::uint64_t> shape;
  std::uint64_t begin = 0; // offsets relative to the start of the data section
  std::uint64_t end = 0;
};

// Read access to a named-tensor container. Tensors are read on demand, so
// large checkpoints can be processed one tensor at a time.
class TensorFile {
public:
  explicit TensorFile(std::filesystem::path path);

  std::vector<TensorInfo> const& tensors() const { return tensors_; }
  std::map<std::string, std::string> const& metadata() const { return metadata_; }
  TensorInfo const* find(std::string const& name) const;

  // Reads a 2-D tensor widened to 64-bit floats.
  Matrix read_matrix(std::string const& name, bool transpose = false);

private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t data_start_ = 0;
  std::vector<TensorInfo> tensors_;
  std::map<std::string, std::string> metadata_;
};

std::string canonical_tensor_name(TensorRole role, std::size_t layer);

// Canonical manifest for files written by save_weights: infers the layer
// count from the value tensors present.
TensorManifest canonical_manifest(TensorFile const& file);

std::filesystem::path vocab_sidecar_path(std::filesystem::path const& weights_path);

ModelWeights load_weights(std::filesystem::path const& path,
                          std::optional<TensorManifest> const& manifest = std::nullopt);

// Writes F64 tensors in sorted name order plus the vocab sidecar.
void save_weights(ModelWeights const& weights, std::filesystem::path const& path);

std::vector<std::string> read_vocab_file(std::filesystem::path const& path);

} // namespace cvtrace
