#pragma once

// Dataset directories, the synthetic blob/texture generator and the binary
// container used for weights and preprocessed tensors.
//
// Container layout (all integers little-endian):
//   "HRES"  u32 version
//   u32 length + config text
//   u32 tensor count
//   per tensor: u32 name length + name, u32 rank, u64 dims[rank], f32 payload
//   u32 CRC-32 of every preceding byte

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hres/config.hpp"
#include "hres/imageproc.hpp"
#include "hres/model.hpp"
#include "hres/png.hpp"

namespace hres {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Dataset directories

struct ManifestEntry {
  fs::path path;
  std::size_t label = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::array<std::size_t, 2> counts{0, 0};
  std::vector<std::string> warnings;

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    for (const auto& e : entries) out.push_back(e.label);
    return out;
  }
};

/// Enumerates <root>/0/*<ext> and <root>/1/*<ext> in byte order of file name.
inline DatasetManifest scan_dataset_dir(const fs::path& root, const std::string& ext = ".png") {
  DatasetManifest m;
  for (std::size_t label = 0; label < 2; ++label) {
    const fs::path dir = root / std::to_string(label);
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IoError("dataset: missing class directory " + dir.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ext) names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    for (const auto& n : names) m.entries.push_back({dir / n, label});
    m.counts[label] = names.size();
    if (names.empty()) m.warnings.push_back("class directory " + dir.string() + " contains no " + ext + " files");
  }
  return m;
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<RgbPatch> patches;
};

/// Scans and decodes every patch; the first undecodable file aborts with its path.
inline Dataset load_dataset_dir(const fs::path& root) {
  Dataset d{scan_dataset_dir(root), {}};
  d.patches.reserve(d.manifest.entries.size());
  for (const auto& e : d.manifest.entries) d.patches.push_back(read_png(e.path));
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
  std::size_t per_class = 250;
  std::uint64_t seed = 7;
  std::size_t size = 50;
};

namespace detail {

// SplitMix64: portable, so generated bytes do not depend on the standard library.
struct SplitMix {
  std::uint64_t state;
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
};

// Pink stroma-like background; the per-image tint is shared by both classes.
inline std::array<double, 3> base_tint(SplitMix& r) {
  return {r.uniform(205, 235), r.uniform(150, 185), r.uniform(185, 215)};
}

}  // namespace detail

/// Class 0: smooth low-frequency blobs. Class 1: per-pixel speckle plus small
/// dark nuclei-like dots. Pure function of (spec, label, index).
inline RgbPatch synthesize_patch(const SyntheticSpec& spec, std::size_t label, std::size_t index) {
  detail::SplitMix r{spec.seed * 0x100000001B3ull + label * 0x9E3779B1ull + index};
  const std::size_t n = spec.size;
  const auto tint = detail::base_tint(r);
  std::vector<double> img(n * n * 3);
  for (std::size_t i = 0; i < n * n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img[i * 3 + c] = tint[c];
  }
  if (label == 0) {
    const int blobs = 2 + static_cast<int>(r.next() % 3);
    for (int b = 0; b < blobs; ++b) {
      const double cx = r.uniform(0, n), cy = r.uniform(0, n), rad = r.uniform(8, 16);
      const double depth = r.uniform(25, 50);
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          const double g = depth * std::exp(-d2 / (2.0 * rad * rad));
          img[(y * n + x) * 3 + 0] -= 0.8 * g;
          img[(y * n + x) * 3 + 1] -= 1.0 * g;
          img[(y * n + x) * 3 + 2] -= 0.3 * g;
        }
      }
    }
  } else {
    for (std::size_t i = 0; i < n * n; ++i) {
      const double s = r.uniform(-45, 45);
      img[i * 3 + 0] += s;
      img[i * 3 + 1] += s;
      img[i * 3 + 2] += 0.7 * s;
    }
    const int dots = 10 + static_cast<int>(r.next() % 10);
    for (int d = 0; d < dots; ++d) {
      const double cx = r.uniform(0, n), cy = r.uniform(0, n), rad = r.uniform(1.5, 3.0);
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) > rad * rad) continue;
          img[(y * n + x) * 3 + 0] = 70;
          img[(y * n + x) * 3 + 1] = 30;
          img[(y * n + x) * 3 + 2] = 100;
        }
      }
    }
  }
  RgbPatch p(n, n, std::vector<std::uint8_t>(n * n * 3));
  for (std::size_t i = 0; i < img.size(); ++i) p.pixels[i] = to_u8(img[i]);
  return p;
}

/// Writes <out>/0/syn_NNNNN.png and <out>/1/syn_NNNNN.png and returns the manifest.
inline DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out) {
  for (std::size_t label = 0; label < 2; ++label) {
    const fs::path dir = out / std::to_string(label);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "syn_%05zu.png", i);
      write_png(dir / name, synthesize_patch(spec, label, i));
    }
  }
  return scan_dataset_dir(out);
}

// ---------------------------------------------------------------------------
// Binary container

enum class FormatErrorKind { io, magic, version, checksum, malformed, shape_mismatch };

inline const char* to_string(FormatErrorKind k) {
  switch (k) {
    case FormatErrorKind::io: return "io";
    case FormatErrorKind::magic: return "magic";
    case FormatErrorKind::version: return "version";
    case FormatErrorKind::checksum: return "checksum";
    case FormatErrorKind::malformed: return "malformed";
    case FormatErrorKind::shape_mismatch: return "shape mismatch";
  }
  return "?";
}

struct FormatError : std::runtime_error {
  FormatErrorKind kind;
  FormatError(FormatErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'H', 'R', 'E', 'S'};

struct Container {
  std::string config;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n, std::string origin) : p_(p), n_(n), origin_(std::move(origin)) {}
  void need(std::size_t k) const {
    if (n_ - pos_ < k) throw FormatError(FormatErrorKind::malformed, origin_ + ": unexpected end of data");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string origin_;
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  detail::ByteWriter w;
  w.raw(kContainerMagic, 4);
  w.u32(kContainerVersion);
  w.str(c.config);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (float f : t.values()) w.f32(f);
  }
  const std::uint32_t crc = detail::crc32_of(w.bytes().data(), w.bytes().size());
  w.u32(crc);
  return std::move(w.bytes());
}

/// Validates magic, checksum and version before parsing any payload.
inline Container decode_container(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw FormatError(FormatErrorKind::magic, origin + ": not an HRES file (bad magic)");
  }
  if (bytes.size() < 12) throw FormatError(FormatErrorKind::checksum, origin + ": checksum failure (file truncated)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (detail::crc32_of(bytes.data(), body) != stored) {
    throw FormatError(FormatErrorKind::checksum, origin + ": checksum failure (file corrupted or truncated)");
  }
  detail::ByteReader r(bytes.data() + 4, body - 4, origin);
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) {
    throw FormatError(FormatErrorKind::version, origin + ": unsupported version " + std::to_string(version) +
                                                    " (expected " + std::to_string(kContainerVersion) + ")");
  }
  Container c;
  c.config = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError(FormatErrorKind::malformed, origin + ": bad rank for " + name);
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.u64();
      if (dim == 0 || dim > r.remaining() / 4 + 1) {
        throw FormatError(FormatErrorKind::malformed, origin + ": bad dimension for " + name);
      }
      n *= dim;
      if (n > r.remaining() / 4) throw FormatError(FormatErrorKind::malformed, origin + ": payload too short for " + name);
      shape.push_back(static_cast<std::size_t>(dim));
    }
    r.need(n * 4);
    std::vector<float> data(n);
    for (float& f : data) f = r.f32();
    c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError(FormatErrorKind::malformed, origin + ": trailing bytes after tensors");
  return c;
}

inline void write_container(const fs::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  try {
    detail::write_file_atomic(path, bytes.data(), bytes.size());
  } catch (const IoError& e) {
    throw FormatError(FormatErrorKind::io, e.what());
  }
}

inline Container read_container(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = detail::read_file(path);
  } catch (const IoError& e) {
    throw FormatError(FormatErrorKind::io, e.what());
  }
  return decode_container(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Weights

inline void save_weights(const Network& net, const fs::path& path) {
  Container c{net.config().to_text(), net.snapshot()};
  write_container(path, c);
}

/// Copies tensors into `net`, which must have the same names and shapes.
inline void assign_weights(Network& net, const Container& c, const std::string& origin) {
  auto params = net.parameters();
  if (c.tensors.size() != params.size()) {
    throw FormatError(FormatErrorKind::shape_mismatch, origin + ": file holds " + std::to_string(c.tensors.size()) +
                                                           " tensors, network expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = c.tensors[i];
    if (name != params[i].name) {
      throw FormatError(FormatErrorKind::shape_mismatch,
                        origin + ": tensor " + std::to_string(i) + " is '" + name + "', expected '" + params[i].name + "'");
    }
    if (t.shape() != params[i].tensor->shape()) {
      throw FormatError(FormatErrorKind::shape_mismatch, origin + ": shape mismatch for tensor '" + name + "': file " +
                                                             shape_string(t.shape()) + ", network " +
                                                             shape_string(params[i].tensor->shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].tensor = c.tensors[i].second;
}

/// Builds the network described by the embedded config and fills its weights.
inline Network load_weights(const fs::path& path) {
  const Container c = read_container(path);
  ModelConfig cfg;
  try {
    cfg = model_config_from_text(c.config);
  } catch (const std::invalid_argument& e) {
    throw FormatError(FormatErrorKind::malformed, path.string() + ": " + e.what());
  }
  Network net(cfg);
  assign_weights(net, c, path.string());
  return net;
}

/// Loads into an existing architecture; names and shapes must agree.
inline void load_weights_into(Network& net, const fs::path& path) {
  assign_weights(net, read_container(path), path.string());
}

// ---------------------------------------------------------------------------
// Preprocessed tensors

inline void save_preprocessed(const fs::path& path, const MultiChannelImage& img, std::size_t label,
                              const std::string& source) {
  Container c{"kind=preprocessed\nlabel=" + std::to_string(label) + "\nsource=" + source + "\n", {{"image", img.planes}}};
  write_container(path, c);
}

struct PreprocessedRecord {
  MultiChannelImage image;
  std::size_t label = 0;
  std::string source;
};

inline PreprocessedRecord load_preprocessed(const fs::path& path) {
  const Container c = read_container(path);
  PreprocessedRecord rec;
  bool kind_ok = false;
  for (const auto& [k, v] : parse_kv_text(c.config, path.string())) {
    if (k == "kind") kind_ok = v == "preprocessed";
    else if (k == "label") rec.label = detail::parse_uint(k, v);
    else if (k == "source") rec.source = v;
  }
  if (!kind_ok || c.tensors.size() != 1 || c.tensors[0].second.shape() != Shape{kNumPlanes, kPatchSize, kPatchSize}) {
    throw FormatError(FormatErrorKind::malformed, path.string() + ": not a preprocessed 7x100x100 tensor file");
  }
  rec.image = MultiChannelImage(kPatchSize, kPatchSize);
  rec.image.planes = c.tensors[0].second;
  return rec;
}

}  // namespace hres
