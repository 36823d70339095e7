#pragma once

// Embedding dataset: in-memory index, binary file format, synthetic generator.
//
// File layout (all integers little-endian, floats IEEE-754 binary32 LE):
//
//   "CORRATN1" | u32 version=1 | u32 n_records | u32 n_classes
//   | u32 D_g | u32 D_p | u32 G=7
//   then per record:
//     u16 id_len, id bytes | u32 label_id | D_g f32 | 49*D_p f32
//     | u16 ref_len, ref bytes
//
// Class names live next to the file in "<file>.classes.json" as a JSON array.
// A header D_g of 0 means the producer omitted global vectors; the loader
// substitutes the mean-pooled patch descriptor.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "corr_attn/error.hpp"
#include "corr_attn/rng.hpp"
#include "corr_attn/vector_math.hpp"

namespace corr_attn {

inline constexpr std::array<char, 8> kMagic = {'C', 'O', 'R', 'R', 'A', 'T', 'N', '1'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderSize = 8 + 6 * 4;

struct EmbeddingRecord {
  std::string id;
  std::uint32_t label_id = 0;
  std::vector<float> global_vec;
  std::vector<float> patch_grid;  // 49 vectors, row-major cells
  std::string image_ref;

  std::size_t patch_dim() const { return patch_grid.size() / kCells; }
  std::span<const float> patch(int cell) const {
    const std::size_t dim = patch_dim();
    return std::span<const float>(patch_grid).subspan(static_cast<std::size_t>(cell) * dim, dim);
  }

  bool operator==(const EmbeddingRecord&) const = default;
};

/// Bytes one record occupies on disk.
inline std::size_t record_size(const EmbeddingRecord& r, std::size_t global_dim, std::size_t patch_dim) {
  return 2 + r.id.size() + 4 + 4 * global_dim + 4 * kCells * patch_dim + 2 + r.image_ref.size();
}

namespace detail {

inline std::string describe(std::size_t position, const std::string& id) {
  std::string s = "record #" + std::to_string(position);
  if (!id.empty()) s += " (id '" + id + "')";
  return s;
}

// Validates shape and normalizes every vector of one record.
inline void ingest_record(EmbeddingRecord& r, std::size_t position, std::size_t global_dim, std::size_t patch_dim,
                          std::size_t n_classes) {
  if (r.patch_grid.size() != kCells * patch_dim) {
    throw Error(ErrorCode::DimensionMismatch, describe(position, r.id) + " patch grid does not hold 49 x " +
                                                  std::to_string(patch_dim) + " floats");
  }
  if (r.global_vec.empty() && global_dim == patch_dim) {
    for (int c = 0; c < kCells; ++c) {
      if (l2_norm(r.patch(c)) == 0.0) {
        throw Error(ErrorCode::ZeroVector, describe(position, r.id) + " patch " + std::to_string(c) + " is zero");
      }
    }
    try {
      r.global_vec = mean_pool_patches(r.patch_grid, patch_dim);
    } catch (const Error&) {
      throw Error(ErrorCode::ZeroVector, describe(position, r.id) + " mean-pooled descriptor is zero");
    }
  }
  if (r.global_vec.size() != global_dim) {
    throw Error(ErrorCode::DimensionMismatch,
                describe(position, r.id) + " global vector has dimension " + std::to_string(r.global_vec.size()));
  }
  if (r.label_id >= n_classes) {
    throw Error(ErrorCode::InvalidLabel, describe(position, r.id) + " label " + std::to_string(r.label_id) +
                                             " outside vocabulary of " + std::to_string(n_classes));
  }
  for (auto& x : r.global_vec) {
    if (!std::isfinite(x)) throw Error(ErrorCode::ZeroVector, describe(position, r.id) + " has non-finite values");
  }
  if (l2_norm(r.global_vec) == 0.0) throw Error(ErrorCode::ZeroVector, describe(position, r.id) + " global vector is zero");
  normalize_in_place(r.global_vec);
  for (int c = 0; c < kCells; ++c) {
    std::span<float> p = std::span<float>(r.patch_grid).subspan(c * patch_dim, patch_dim);
    for (float x : p) {
      if (!std::isfinite(x)) throw Error(ErrorCode::ZeroVector, describe(position, r.id) + " has non-finite values");
    }
    if (l2_norm(p) == 0.0) {
      throw Error(ErrorCode::ZeroVector, describe(position, r.id) + " patch " + std::to_string(c) + " is zero");
    }
    normalize_in_place(p);
  }
}

}  // namespace detail

/// Immutable, validated collection of embedding records. Record order is the
/// canonical tie-break order used everywhere downstream.
class DatasetIndex {
 public:
  DatasetIndex() = default;

  /// Validates and normalizes. An empty global_vec on a record is filled by
  /// mean pooling when global_dim == patch_dim.
  DatasetIndex(std::vector<std::string> classes, std::vector<EmbeddingRecord> records, std::size_t global_dim,
               std::size_t patch_dim)
      : classes_(std::move(classes)), records_(std::move(records)), global_dim_(global_dim), patch_dim_(patch_dim) {
    if (patch_dim_ == 0 || global_dim_ == 0) throw Error(ErrorCode::DimensionMismatch, "dimensions must be positive");
    by_id_.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
      auto& r = records_[i];
      if (!by_id_.emplace(r.id, i).second) {
        throw Error(ErrorCode::DuplicateId, detail::describe(i, r.id) + " repeats an earlier id");
      }
      detail::ingest_record(r, i, global_dim_, patch_dim_, classes_.size());
    }
  }

  const std::vector<EmbeddingRecord>& records() const { return records_; }
  const std::vector<std::string>& classes() const { return classes_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t global_dim() const { return global_dim_; }
  std::size_t patch_dim() const { return patch_dim_; }
  const EmbeddingRecord& operator[](std::size_t i) const { return records_[i]; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
  }

  bool operator==(const DatasetIndex& o) const {
    return classes_ == o.classes_ && records_ == o.records_ && global_dim_ == o.global_dim_ &&
           patch_dim_ == o.patch_dim_;
  }

 private:
  std::vector<std::string> classes_;
  std::vector<EmbeddingRecord> records_;
  std::size_t global_dim_ = 0;
  std::size_t patch_dim_ = 0;
  std::unordered_map<std::string, std::size_t> by_id_;
};

inline std::filesystem::path manifest_path(const std::filesystem::path& dataset) {
  return dataset.string() + ".classes.json";
}

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void u16(std::uint16_t v) {
    buf_.push_back(static_cast<std::uint8_t>(v));
    buf_.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) buf_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str16(const std::string& s, const char* what) {
    if (s.size() > UINT16_MAX) throw Error(ErrorCode::InvalidParam, std::string(what) + " longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  void need(std::size_t n, const std::string& what) const {
    if (data_.size() - pos_ < n) {
      throw Error(ErrorCode::TruncatedFile, "file ends at offset " + std::to_string(data_.size()) + " while reading " +
                                                what + " at offset " + std::to_string(pos_));
    }
  }
  std::uint16_t u16(const std::string& what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(std::vector<float>& out, std::size_t n, const std::string& what) {
    need(4 * n, what);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t v = 0;
      for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(data_[pos_ + b]) << (8 * b);
      out[i] = std::bit_cast<float>(v);
      pos_ += 4;
    }
  }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::IoFailure, "read failed on " + path.string());
  return data;
}

// Writes through a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoFailure, "write failed on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot rename into " + path.string() + ": " + ec.message());
}

}  // namespace detail

/// Serializes the index to the binary format (no manifest).
inline std::vector<std::uint8_t> encode_dataset(const DatasetIndex& index) {
  detail::ByteWriter w;
  w.bytes(kMagic.data(), kMagic.size());
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(index.size()));
  w.u32(static_cast<std::uint32_t>(index.classes().size()));
  w.u32(static_cast<std::uint32_t>(index.global_dim()));
  w.u32(static_cast<std::uint32_t>(index.patch_dim()));
  w.u32(kGrid);
  for (const auto& r : index.records()) {
    w.str16(r.id, "record id");
    w.u32(r.label_id);
    for (float x : r.global_vec) w.f32(x);
    for (float x : r.patch_grid) w.f32(x);
    w.str16(r.image_ref, "image_ref");
  }
  return w.buffer();
}

/// Parses the binary format against a class vocabulary. Throws on any defect;
/// nothing partially built escapes.
inline DatasetIndex decode_dataset(std::span<const std::uint8_t> bytes, std::vector<std::string> classes) {
  detail::ByteReader rd(bytes);
  rd.need(kMagic.size(), "magic");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw Error(ErrorCode::MagicMismatch, "file does not start with CORRATN1");
  }
  rd.str(kMagic.size(), "magic");
  const std::uint32_t version = rd.u32("version");
  if (version != kFormatVersion) {
    throw Error(ErrorCode::VersionUnsupported, "format version " + std::to_string(version));
  }
  const std::uint32_t n_records = rd.u32("n_records");
  const std::uint32_t n_classes = rd.u32("n_classes");
  const std::uint32_t global_dim = rd.u32("D_g");
  const std::uint32_t patch_dim = rd.u32("D_p");
  const std::uint32_t grid = rd.u32("G");
  if (grid != kGrid) throw Error(ErrorCode::DimensionMismatch, "grid size " + std::to_string(grid) + ", expected 7");
  if (patch_dim == 0) throw Error(ErrorCode::DimensionMismatch, "D_p is zero");
  if (n_classes != classes.size()) {
    throw Error(ErrorCode::DimensionMismatch, "header declares " + std::to_string(n_classes) +
                                                  " classes, manifest lists " + std::to_string(classes.size()));
  }

  std::vector<EmbeddingRecord> records;
  records.reserve(std::min<std::size_t>(n_records, rd.remaining() / 8 + 1));
  for (std::uint32_t i = 0; i < n_records; ++i) {
    const std::string where = "record #" + std::to_string(i);
    EmbeddingRecord r;
    const std::uint16_t id_len = rd.u16(where + " id_len");
    r.id = rd.str(id_len, where + " id");
    r.label_id = rd.u32(where + " label_id");
    rd.floats(r.global_vec, global_dim, where + " global vector");
    rd.floats(r.patch_grid, static_cast<std::size_t>(kCells) * patch_dim, where + " patch grid");
    const std::uint16_t ref_len = rd.u16(where + " ref_len");
    r.image_ref = rd.str(ref_len, where + " image_ref");
    records.push_back(std::move(r));
  }
  if (rd.remaining() != 0) {
    throw Error(ErrorCode::TruncatedFile, std::to_string(rd.remaining()) + " trailing bytes after last record at offset " +
                                              std::to_string(rd.offset()));
  }
  const std::size_t effective_global = global_dim == 0 ? patch_dim : global_dim;
  return DatasetIndex(std::move(classes), std::move(records), effective_global, patch_dim);
}

inline std::vector<std::string> load_manifest(const std::filesystem::path& dataset) {
  const auto path = manifest_path(dataset);
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "missing class manifest " + path.string());
  try {
    auto j = nlohmann::json::parse(in);
    return j.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoFailure, "malformed class manifest " + path.string() + ": " + e.what());
  }
}

inline DatasetIndex load_dataset(const std::filesystem::path& path) {
  auto bytes = detail::read_file(path);
  // Check the magic before demanding a manifest so foreign files fail fast.
  if (bytes.size() < kMagic.size() || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw Error(ErrorCode::MagicMismatch, path.string() + " does not start with CORRATN1");
  }
  return decode_dataset(bytes, load_manifest(path));
}

inline void write_dataset(const DatasetIndex& index, const std::filesystem::path& path) {
  const auto bytes = encode_dataset(index);
  const std::string manifest = nlohmann::json(index.classes()).dump() + "\n";
  detail::write_file_atomic(manifest_path(path), std::span(reinterpret_cast<const std::uint8_t*>(manifest.data()),
                                                           manifest.size()));
  detail::write_file_atomic(path, bytes);
}

// ---------------------------------------------------------------------------
// Synthetic data with planted class structure.

struct SynthParams {
  std::size_t n_records = 200;
  std::size_t n_classes = 10;
  std::size_t dim = 16;
  double spread = 0.1;
  std::uint64_t seed = 7;
  // Seed for the per-record noise; defaults to `seed`. Drawing a second set
  // with the same `seed` and another noise seed gives held-out queries from
  // the same class prototypes.
  std::optional<std::uint64_t> noise_seed;
  std::string id_prefix = "r";
};

inline std::vector<std::vector<float>> synth_prototypes(std::size_t n_classes, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<float>> protos(n_classes, std::vector<float>(dim));
  for (auto& p : protos) {
    do {
      for (auto& x : p) x = static_cast<float>(rng.gaussian());
    } while (l2_norm(p) == 0.0);
    p = normalize(p);
  }
  return protos;
}

/// Record i belongs to class i mod n_classes. Each patch is the class
/// prototype plus isotropic Gaussian noise whose expected norm is `spread`,
/// then normalized; the global vector is the mean-pooled patch descriptor.
inline DatasetIndex synth_dataset(const SynthParams& p) {
  if (p.n_classes < 1 || p.n_records < p.n_classes || p.dim < 2 || !(p.spread >= 0.0) || !std::isfinite(p.spread)) {
    throw Error(ErrorCode::InvalidParam, "synth requires n_records >= n_classes >= 1, dim >= 2, spread >= 0");
  }
  const auto protos = synth_prototypes(p.n_classes, p.dim, p.seed);
  Rng rng(p.noise_seed.value_or(p.seed) ^ 0x9e3779b97f4a7c15ULL);
  const double sigma = p.spread / std::sqrt(static_cast<double>(p.dim));

  std::vector<std::string> classes;
  for (std::size_t c = 0; c < p.n_classes; ++c) classes.push_back("class_" + std::to_string(c));

  const int width = static_cast<int>(std::to_string(p.n_records).size());
  std::vector<EmbeddingRecord> records(p.n_records);
  std::vector<float> patch(p.dim);
  for (std::size_t i = 0; i < p.n_records; ++i) {
    auto& r = records[i];
    std::string num = std::to_string(i);
    r.id = p.id_prefix + std::string(width - num.size(), '0') + num;
    r.label_id = static_cast<std::uint32_t>(i % p.n_classes);
    const auto& proto = protos[r.label_id];
    r.patch_grid.reserve(kCells * p.dim);
    for (int c = 0; c < kCells; ++c) {
      do {
        for (std::size_t d = 0; d < p.dim; ++d) patch[d] = static_cast<float>(proto[d] + sigma * rng.gaussian());
      } while (l2_norm(patch) == 0.0);
      auto unit = normalize(patch);
      r.patch_grid.insert(r.patch_grid.end(), unit.begin(), unit.end());
    }
    r.global_vec = mean_pool_patches(r.patch_grid, p.dim);
  }
  return DatasetIndex(std::move(classes), std::move(records), p.dim, p.dim);
}

}  // namespace corr_attn
