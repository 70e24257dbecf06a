#pragma once

// Checkpoint persistence: one directory per training snapshot holding a
// `manifest.json` and a single `weights.bin` blob of little-endian f32
// tensors, each starting on a 64-byte boundary.

#include <fnmatch.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "quantaudit/detail/files.hpp"
#include "quantaudit/error.hpp"

namespace quantaudit {

static_assert(std::endian::native == std::endian::little,
              "weights.bin is stored little-endian; big-endian hosts need a byte-swapping path");

inline constexpr std::size_t kTensorAlignment = 64;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kWeightsFile = "weights.bin";

// A dense row-major f32 tensor of rank 1 or 2. For rank 2 the first
// dimension is the output channel (d_out) and the second the input
// dimension (d_in).
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::int64_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(std::vector<std::int64_t> s) {
    const auto n = std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
    return Tensor(std::move(s), std::vector<float>(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)), 0.0f));
  }

  std::size_t ndim() const { return shape.size(); }
  std::int64_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
  }
  std::int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::int64_t cols() const { return shape.empty() ? 0 : shape.back(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Tensors keyed by name; std::map keeps iteration name-sorted.
using TensorMap = std::map<std::string, Tensor>;

struct TensorRecord {
  std::string name;
  std::vector<std::int64_t> shape;
  std::string dtype = "f32";
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;

  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

struct CheckpointManifest {
  std::int64_t step = 0;
  std::vector<TensorRecord> tensors;
  std::map<std::string, std::string> meta;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  friend bool operator==(const CheckpointManifest&, const CheckpointManifest&) = default;
};

struct Checkpoint {
  CheckpointManifest manifest;
  TensorMap tensors;
};

inline void validate_tensor(const std::string& name, const Tensor& t) {
  if (name.empty()) throw ShapeError("tensor name must be non-empty");
  if (t.shape.empty() || t.shape.size() > 2)
    throw ShapeError("tensor '" + name + "' must have rank 1 or 2, got rank " + std::to_string(t.shape.size()));
  for (auto d : t.shape)
    if (d <= 0) throw ShapeError("tensor '" + name + "' has a non-positive dimension");
  if (static_cast<std::int64_t>(t.data.size()) != t.numel())
    throw ShapeError("tensor '" + name + "' declares " + std::to_string(t.numel()) + " elements but holds " +
                     std::to_string(t.data.size()));
}

namespace detail {

inline std::uint64_t align_up(std::uint64_t x, std::uint64_t a) { return (x + a - 1) / a * a; }

inline nlohmann::ordered_json manifest_to_json(const CheckpointManifest& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  auto tensors = nlohmann::ordered_json::array();
  for (const auto& t : m.tensors) {
    nlohmann::ordered_json jt;
    jt["name"] = t.name;
    jt["shape"] = t.shape;
    jt["dtype"] = t.dtype;
    jt["offset"] = t.offset;
    jt["nbytes"] = t.nbytes;
    tensors.push_back(std::move(jt));
  }
  j["tensors"] = std::move(tensors);
  auto meta = nlohmann::ordered_json::object();
  for (const auto& [k, v] : m.meta) meta[k] = v;
  j["meta"] = std::move(meta);
  return j;
}

inline CheckpointManifest manifest_from_json(const nlohmann::json& j) {
  CheckpointManifest m;
  try {
    m.step = j.at("step").get<std::int64_t>();
    for (const auto& jt : j.at("tensors")) {
      TensorRecord r;
      r.name = jt.at("name").get<std::string>();
      r.shape = jt.at("shape").get<std::vector<std::int64_t>>();
      r.dtype = jt.at("dtype").get<std::string>();
      r.offset = jt.at("offset").get<std::uint64_t>();
      r.nbytes = jt.at("nbytes").get<std::uint64_t>();
      m.tensors.push_back(std::move(r));
    }
    if (j.contains("meta")) {
      for (const auto& [k, v] : j.at("meta").items()) m.meta[k] = v.get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid manifest: ") + e.what());
  }
  return m;
}

// Structural checks shared by reader and writer. `blob_size` is checked
// when known.
inline void validate_manifest(const CheckpointManifest& m, std::optional<std::uint64_t> blob_size) {
  if (m.step < 0) throw FormatError("manifest step must be non-negative");
  std::set<std::string> names;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  std::uint64_t end = 0;
  for (const auto& t : m.tensors) {
    if (t.name.empty()) throw FormatError("manifest contains a tensor with an empty name");
    if (!names.insert(t.name).second) throw FormatError("manifest contains duplicate tensor name '" + t.name + "'");
    if (t.dtype != "f32") throw FormatError("tensor '" + t.name + "' has unsupported dtype '" + t.dtype + "'");
    if (t.shape.empty() || t.shape.size() > 2) throw FormatError("tensor '" + t.name + "' must have rank 1 or 2");
    std::uint64_t n = 1;
    for (auto d : t.shape) {
      if (d <= 0) throw FormatError("tensor '" + t.name + "' has a non-positive dimension");
      n *= static_cast<std::uint64_t>(d);
    }
    if (t.nbytes != n * sizeof(float))
      throw FormatError("tensor '" + t.name + "' nbytes " + std::to_string(t.nbytes) + " does not match shape");
    spans.emplace_back(t.offset, t.offset + t.nbytes);
    end = std::max(end, t.offset + t.nbytes);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw FormatError("manifest tensor byte ranges overlap");
  }
  if (blob_size && *blob_size != end) {
    throw FormatError("weights.bin length mismatch: expected " + std::to_string(end) + " bytes, found " +
                      std::to_string(*blob_size) + " (corrupted or truncated)");
  }
}

}  // namespace detail

// Writes `dir/manifest.json` and `dir/weights.bin`. Tensors are laid out in
// name order; offsets and byte lengths in `manifest.tensors` are recomputed.
// If the manifest lists descriptors they must name exactly the provided
// tensors with matching shapes; an empty descriptor list means "describe
// whatever is provided".
inline std::filesystem::path write_checkpoint(const CheckpointManifest& manifest, const TensorMap& tensors,
                                              const std::filesystem::path& dir) {
  for (const auto& [name, t] : tensors) validate_tensor(name, t);
  if (!manifest.tensors.empty()) {
    std::set<std::string> declared;
    for (const auto& rec : manifest.tensors) {
      if (!declared.insert(rec.name).second) throw FormatError("manifest contains duplicate tensor name '" + rec.name + "'");
      auto it = tensors.find(rec.name);
      if (it == tensors.end()) throw ShapeError("manifest describes tensor '" + rec.name + "' which was not provided");
      if (it->second.shape != rec.shape) throw ShapeError("manifest shape for '" + rec.name + "' disagrees with tensor");
      if (rec.dtype != "f32") throw FormatError("tensor '" + rec.name + "' has unsupported dtype '" + rec.dtype + "'");
    }
    if (declared.size() != tensors.size()) throw ShapeError("tensor provided without a manifest descriptor");
  }

  CheckpointManifest out;
  out.step = manifest.step;
  out.meta = manifest.meta;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    offset = detail::align_up(offset, kTensorAlignment);
    TensorRecord rec{name, t.shape, "f32", offset, static_cast<std::uint64_t>(t.data.size()) * sizeof(float)};
    offset += rec.nbytes;
    out.tensors.push_back(std::move(rec));
  }
  detail::validate_manifest(out, std::nullopt);

  std::string blob(offset, '\0');
  for (const auto& rec : out.tensors) {
    const auto& t = tensors.at(rec.name);
    std::memcpy(blob.data() + rec.offset, t.data.data(), rec.nbytes);
  }

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  // Blob first: a manifest only appears once its blob is complete.
  detail::write_file_atomic(dir / kWeightsFile, blob);
  detail::write_file_atomic(dir / kManifestFile, detail::manifest_to_json(out).dump(2) + "\n");
  return dir;
}

inline CheckpointManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestFile;
  if (!std::filesystem::exists(path)) throw IoError("missing " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("cannot parse " + path.string() + ": " + e.what());
  }
  auto m = detail::manifest_from_json(j);
  detail::validate_manifest(m, std::nullopt);
  return m;
}

inline Checkpoint read_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  ck.manifest = read_manifest(dir);
  const auto blob_path = dir / kWeightsFile;
  if (!std::filesystem::exists(blob_path)) throw IoError("missing " + blob_path.string());
  const auto blob = detail::read_binary_file(blob_path);
  detail::validate_manifest(ck.manifest, blob.size());
  for (const auto& rec : ck.manifest.tensors) {
    Tensor t;
    t.shape = rec.shape;
    t.data.resize(rec.nbytes / sizeof(float));
    std::memcpy(t.data.data(), blob.data() + rec.offset, rec.nbytes);
    ck.tensors.emplace(rec.name, std::move(t));
  }
  return ck;
}

struct CheckpointEntry {
  std::int64_t step = 0;
  std::filesystem::path path;
};

struct CheckpointListing {
  std::vector<CheckpointEntry> entries;  // strictly increasing in step
  std::vector<std::string> warnings;     // one per skipped malformed candidate
};

// Enumerates checkpoint directories directly under `root`. A directory is a
// candidate if it holds a manifest.json; candidates whose manifest does not
// parse (or that repeat a step) are skipped with a warning. Other entries are
// ignored silently.
inline CheckpointListing list_checkpoints(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IoError("not a readable directory: " + root.string());
  fs::directory_iterator it(root, ec);
  if (ec) throw IoError("cannot read directory " + root.string() + ": " + ec.message());

  CheckpointListing out;
  std::vector<fs::path> dirs;
  for (const auto& entry : it) {
    if (entry.is_directory() && fs::exists(entry.path() / kManifestFile)) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::map<std::int64_t, fs::path> by_step;
  for (const auto& d : dirs) {
    try {
      const auto m = read_manifest(d);
      auto [pos, inserted] = by_step.emplace(m.step, d);
      if (!inserted) out.warnings.push_back("skipping " + d.string() + ": duplicate step " + std::to_string(m.step));
    } catch (const Error& e) {
      out.warnings.push_back("skipping " + d.string() + ": " + e.what());
    }
  }
  for (auto& [step, path] : by_step) out.entries.push_back({step, path});
  return out;
}

// Chooses which tensors the quantization probes act on. Patterns are shell
// globs matched against the full tensor name.
struct QuantSelector {
  std::vector<std::string> include_patterns{"*"};
  std::vector<std::string> exclude_patterns{"*embed*", "*norm*", "*bias*"};
  std::size_t min_dims = 2;

  static QuantSelector linear_weights() { return {}; }

  bool matches(const std::string& name, std::size_t ndim) const {
    auto glob = [&](const std::string& pat) { return ::fnmatch(pat.c_str(), name.c_str(), 0) == 0; };
    if (ndim < min_dims) return false;
    if (std::none_of(include_patterns.begin(), include_patterns.end(), glob)) return false;
    return std::none_of(exclude_patterns.begin(), exclude_patterns.end(), glob);
  }
};

inline std::vector<std::string> select_quantizable(const CheckpointManifest& manifest, const QuantSelector& sel) {
  std::vector<std::string> out;
  for (const auto& t : manifest.tensors)
    if (sel.matches(t.name, t.shape.size())) out.push_back(t.name);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::string> select_quantizable(const TensorMap& tensors, const QuantSelector& sel) {
  std::vector<std::string> out;
  for (const auto& [name, t] : tensors)
    if (sel.matches(name, t.ndim())) out.push_back(name);
  return out;  // map order is name order
}

}  // namespace quantaudit
