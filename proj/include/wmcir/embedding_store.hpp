// Copyright 2026 The wmcir Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// On-disk embedding interchange and the immutable in-memory indices built
// from it.
//
// A gallery directory holds:
//   manifest.json          dims, counts and metadata
//   ids.txt                one item ID per line, line i <-> row i
//   image_vectors.f32le    N x dim little-endian float32, row-major, no header
//   caption_vectors.f32le  (N*R) x dim, the R caption rows of item n are
//                          contiguous starting at row n*R
//
// A query directory holds queries.jsonl (one record per line) and a sibling
// modifier_vectors.f32le aligned with it by record order.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wmcir/error.hpp"

namespace wmcir {

namespace fs = std::filesystem;

/// Post-ingestion bound on | ||row|| - 1 |.
inline constexpr double kUnitNormTolerance = 1e-5;
/// Rows closer than this to unit norm are stored without rescaling, which
/// makes ingestion idempotent on already-normalized blobs.
inline constexpr double kVerbatimNormTolerance = 1e-6;

inline constexpr int kFormatVersion = 1;

/// Row-aligned set of unit-norm float vectors for one modality.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  std::size_t dim() const noexcept { return dim_; }
  std::size_t count() const noexcept { return dim_ == 0 ? 0 : data_.size() / dim_; }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * dim_, dim_};
  }
  std::span<const float> rows(std::size_t first, std::size_t n) const {
    return {data_.data() + first * dim_, n * dim_};
  }
  std::span<const float> data() const noexcept { return data_; }

  /// 1 / ||row i||, computed in double from the stored floats.
  double inv_norm(std::size_t i) const { return inv_norms_[i]; }
  std::span<const double> inv_norms() const noexcept { return inv_norms_; }

  friend EmbeddingMatrix normalize_rows(std::span<const float> raw, std::size_t dim);

 private:
  std::size_t dim_ = 0;
  std::vector<float> data_;
  std::vector<double> inv_norms_;
};

/// Divides every row by its L2 norm. Throws on non-finite values and zero
/// rows, naming the offending row.
inline EmbeddingMatrix normalize_rows(std::span<const float> raw, std::size_t dim) {
  if (dim == 0) throw Error(ErrorCode::kInvalidArgument, "embedding dim must be positive");
  if (raw.size() % dim != 0) {
    throw Error(ErrorCode::kValidation, "vector data length " + std::to_string(raw.size()) +
                                            " is not a multiple of dim " + std::to_string(dim));
  }
  EmbeddingMatrix out;
  out.dim_ = dim;
  out.data_.assign(raw.begin(), raw.end());
  const std::size_t count = raw.size() / dim;
  out.inv_norms_.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    float* row = out.data_.data() + r * dim;
    double sq = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      if (!std::isfinite(row[c])) {
        throw Error(ErrorCode::kValidation, "row " + std::to_string(r) +
                                                " contains a non-finite value at column " +
                                                std::to_string(c));
      }
      sq += static_cast<double>(row[c]) * static_cast<double>(row[c]);
    }
    if (sq == 0.0) {
      throw Error(ErrorCode::kValidation, "row " + std::to_string(r) + " has zero norm");
    }
    double norm = std::sqrt(sq);
    if (std::abs(norm - 1.0) > kVerbatimNormTolerance) {
      for (std::size_t c = 0; c < dim; ++c) {
        row[c] = static_cast<float>(static_cast<double>(row[c]) / norm);
      }
      sq = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        sq += static_cast<double>(row[c]) * static_cast<double>(row[c]);
      }
      norm = std::sqrt(sq);
      if (!(norm > 0.0) || std::abs(norm - 1.0) > kUnitNormTolerance) {
        throw Error(ErrorCode::kValidation,
                    "row " + std::to_string(r) + " cannot be normalized to unit length");
      }
    }
    out.inv_norms_[r] = 1.0 / norm;
  }
  return out;
}

namespace detail {

inline std::uint32_t byteswap32(std::uint32_t x) {
  return ((x & 0xFFu) << 24) | ((x & 0xFF00u) << 8) | ((x >> 8) & 0xFF00u) | (x >> 24);
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_text(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

inline nlohmann::json parse_json(std::string_view text, const std::string& context) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormat, context + ": " + e.what());
  }
}

template <class T>
T required(const nlohmann::json& obj, const char* key, const std::string& context) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw Error(ErrorCode::kFormat, context + ": missing field '" + key + "'");
  }
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kFormat, context + ": field '" + key + "' has the wrong type");
  }
}

inline void check_id(const std::string& id, const std::string& context) {
  if (id.empty()) throw Error(ErrorCode::kValidation, context + ": empty ID");
  if (id.find_first_of("\r\n") != std::string::npos) {
    throw Error(ErrorCode::kValidation, context + ": ID contains a line break");
  }
}

}  // namespace detail

/// Reads a raw little-endian float32 blob holding exactly count x dim values.
inline std::vector<float> read_f32le(const fs::path& path, std::size_t count, std::size_t dim) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(ErrorCode::kIo, "missing file " + path.string());
  const std::uintmax_t bytes = fs::file_size(path, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot stat " + path.string());
  const std::uintmax_t expected = static_cast<std::uintmax_t>(count) * dim * sizeof(float);
  if (bytes < expected) {
    throw Error(ErrorCode::kValidation, path.filename().string() + ": vector blob truncated (" +
                                            std::to_string(bytes) + " bytes, expected " +
                                            std::to_string(expected) + ")");
  }
  if (bytes > expected) {
    throw Error(ErrorCode::kValidation, path.filename().string() +
                                            ": vector blob has trailing bytes (" +
                                            std::to_string(bytes) + " bytes, expected " +
                                            std::to_string(expected) + ")");
  }
  std::vector<float> out(count * dim);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(expected));
  if (!in && expected > 0) throw Error(ErrorCode::kIo, "read failed for " + path.string());
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : out) {
      f = std::bit_cast<float>(detail::byteswap32(std::bit_cast<std::uint32_t>(f)));
    }
  }
  return out;
}

inline void write_f32le(const fs::path& path, std::span<const float> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float f : values) {
      const std::uint32_t le = detail::byteswap32(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&le), sizeof le);
    }
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

struct GalleryMetadata {
  int format_version = kFormatVersion;
  std::string dataset;
  std::string split;
  std::string embedder_id;
  /// Optional, one per item when present.
  std::vector<std::string> item_image_urls;
  /// Optional, R per item when present.
  std::vector<std::vector<std::string>> caption_texts;

  bool operator==(const GalleryMetadata&) const = default;
};

/// The searchable database: N image vectors plus N x R caption vectors with
/// stable item IDs. Immutable after build().
class GalleryIndex {
 public:
  static GalleryIndex build(std::vector<std::string> ids, EmbeddingMatrix image_vectors,
                            EmbeddingMatrix caption_vectors, std::size_t captions_per_item,
                            GalleryMetadata metadata) {
    if (captions_per_item == 0) {
      throw Error(ErrorCode::kValidation, "captions_per_item must be positive");
    }
    const std::size_t n = ids.size();
    if (image_vectors.count() != n) {
      throw Error(ErrorCode::kValidation, "image vector count " +
                                              std::to_string(image_vectors.count()) +
                                              " does not match " + std::to_string(n) + " IDs");
    }
    if (caption_vectors.count() != n * captions_per_item) {
      throw Error(ErrorCode::kValidation,
                  "caption vector count " + std::to_string(caption_vectors.count()) +
                      " does not match N x R = " + std::to_string(n * captions_per_item));
    }
    if (n > 0 && image_vectors.dim() != caption_vectors.dim()) {
      throw Error(ErrorCode::kValidation, "image and caption vectors differ in dim");
    }
    if (!metadata.item_image_urls.empty() && metadata.item_image_urls.size() != n) {
      throw Error(ErrorCode::kValidation, "item_image_urls length does not match num_items");
    }
    if (!metadata.caption_texts.empty()) {
      if (metadata.caption_texts.size() != n) {
        throw Error(ErrorCode::kValidation, "caption_texts length does not match num_items");
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (metadata.caption_texts[i].size() != captions_per_item) {
          throw Error(ErrorCode::kValidation,
                      "caption_texts for item " + ids[i] + " does not hold R entries");
        }
      }
    }

    GalleryIndex g;
    g.lookup_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      detail::check_id(ids[i], "gallery item " + std::to_string(i));
      if (!g.lookup_.emplace(ids[i], static_cast<std::uint32_t>(i)).second) {
        throw Error(ErrorCode::kValidation, "duplicate item ID '" + ids[i] + "'");
      }
    }
    std::vector<std::uint32_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
    std::sort(order.begin(), order.end(),
              [&](std::uint32_t a, std::uint32_t b) { return ids[a] < ids[b]; });
    g.id_rank_.resize(n);
    for (std::size_t r = 0; r < n; ++r) g.id_rank_[order[r]] = static_cast<std::uint32_t>(r);

    g.ids_ = std::move(ids);
    g.images_ = std::move(image_vectors);
    g.captions_ = std::move(caption_vectors);
    g.captions_per_item_ = captions_per_item;
    g.metadata_ = std::move(metadata);
    return g;
  }

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_override_ ? dim_override_ : images_.dim(); }
  std::size_t captions_per_item() const noexcept { return captions_per_item_; }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::string& id(std::size_t i) const { return ids_[i]; }

  std::optional<std::size_t> find(std::string_view id) const {
    auto it = lookup_.find(std::string(id));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t index_of(std::string_view id) const {
    if (auto i = find(id)) return *i;
    throw Error(ErrorCode::kNotFound, "item '" + std::string(id) + "' not in gallery");
  }

  /// Position of item i in ascending item-ID order; used as the tie-break key.
  std::uint32_t id_rank(std::size_t i) const { return id_rank_[i]; }

  const EmbeddingMatrix& image_vectors() const noexcept { return images_; }
  const EmbeddingMatrix& caption_vectors() const noexcept { return captions_; }
  std::span<const float> image(std::size_t i) const { return images_.row(i); }
  std::span<const float> caption(std::size_t i, std::size_t r) const {
    return captions_.row(i * captions_per_item_ + r);
  }

  const GalleryMetadata& metadata() const noexcept { return metadata_; }

 private:
  friend GalleryIndex load_gallery(const fs::path& manifest_path);
  friend GalleryIndex make_empty_gallery(std::size_t dim, std::size_t captions_per_item,
                                         GalleryMetadata metadata);

  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::uint32_t> lookup_;
  std::vector<std::uint32_t> id_rank_;
  EmbeddingMatrix images_;
  EmbeddingMatrix captions_;
  std::size_t captions_per_item_ = 0;
  std::size_t dim_override_ = 0;  // carries dim when N = 0
  GalleryMetadata metadata_;
};

inline GalleryIndex make_empty_gallery(std::size_t dim, std::size_t captions_per_item,
                                       GalleryMetadata metadata) {
  GalleryIndex g = GalleryIndex::build({}, {}, {}, captions_per_item, std::move(metadata));
  g.dim_override_ = dim;
  return g;
}

inline std::vector<std::string> read_id_lines(const fs::path& path) {
  const std::string text = detail::read_text(path);
  std::vector<std::string> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ids.push_back(std::move(line));
    pos = end + 1;
  }
  return ids;
}

/// Loads and validates a gallery manifest plus the blobs it references.
inline GalleryIndex load_gallery(const fs::path& manifest_path) {
  const std::string ctx = manifest_path.string();
  const nlohmann::json m = detail::parse_json(detail::read_text(manifest_path), ctx);
  if (!m.is_object()) throw Error(ErrorCode::kFormat, ctx + ": manifest must be a JSON object");

  GalleryMetadata meta;
  meta.format_version = detail::required<int>(m, "format_version", ctx);
  if (meta.format_version != kFormatVersion) {
    throw Error(ErrorCode::kFormat,
                ctx + ": unsupported format_version " + std::to_string(meta.format_version));
  }
  meta.dataset = detail::required<std::string>(m, "dataset", ctx);
  meta.split = detail::required<std::string>(m, "split", ctx);
  meta.embedder_id = detail::required<std::string>(m, "embedder_id", ctx);
  const auto dim = detail::required<std::int64_t>(m, "dim", ctx);
  const auto num_items = detail::required<std::int64_t>(m, "num_items", ctx);
  const auto r = detail::required<std::int64_t>(m, "captions_per_item", ctx);
  if (dim <= 0) throw Error(ErrorCode::kValidation, ctx + ": dim must be positive");
  if (num_items < 0) throw Error(ErrorCode::kValidation, ctx + ": num_items must be >= 0");
  if (r <= 0) throw Error(ErrorCode::kValidation, ctx + ": captions_per_item must be positive");

  const auto files = detail::required<nlohmann::json>(m, "files", ctx);
  const fs::path base = manifest_path.parent_path();
  const fs::path ids_path = base / detail::required<std::string>(files, "ids", ctx);
  const fs::path img_path = base / detail::required<std::string>(files, "image_vectors", ctx);
  const fs::path cap_path = base / detail::required<std::string>(files, "caption_vectors", ctx);

  if (auto it = m.find("item_image_urls"); it != m.end() && !it->is_null()) {
    meta.item_image_urls = it->get<std::vector<std::string>>();
  }
  if (auto it = m.find("caption_texts"); it != m.end() && !it->is_null()) {
    meta.caption_texts = it->get<std::vector<std::vector<std::string>>>();
  }

  std::error_code ec;
  if (!fs::is_regular_file(ids_path, ec)) throw Error(ErrorCode::kIo, "missing file " + ids_path.string());
  std::vector<std::string> ids = read_id_lines(ids_path);
  const auto n = static_cast<std::size_t>(num_items);
  if (ids.size() != n) {
    throw Error(ErrorCode::kValidation, ids_path.string() + ": " + std::to_string(ids.size()) +
                                            " IDs but num_items is " + std::to_string(n));
  }
  const auto d = static_cast<std::size_t>(dim);
  const auto rr = static_cast<std::size_t>(r);
  const std::vector<float> img_raw = read_f32le(img_path, n, d);
  const std::vector<float> cap_raw = read_f32le(cap_path, n * rr, d);

  auto with_file = [](const fs::path& p, auto&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      throw Error(e.code(), p.filename().string() + ": " + e.what());
    }
  };
  if (n == 0) return make_empty_gallery(d, rr, std::move(meta));
  EmbeddingMatrix images = with_file(img_path, [&] { return normalize_rows(img_raw, d); });
  EmbeddingMatrix captions = with_file(cap_path, [&] { return normalize_rows(cap_raw, d); });
  try {
    return GalleryIndex::build(std::move(ids), std::move(images), std::move(captions), rr,
                               std::move(meta));
  } catch (const Error& e) {
    throw Error(e.code(), ctx + ": " + e.what());
  }
}

/// Writes the gallery in interchange format to `dir` and returns the
/// manifest path. Vector blobs are the stored floats, byte for byte.
inline fs::path write_gallery(const GalleryIndex& index, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());

  const GalleryMetadata& meta = index.metadata();
  nlohmann::json m;
  m["format_version"] = meta.format_version;
  m["dataset"] = meta.dataset;
  m["split"] = meta.split;
  m["embedder_id"] = meta.embedder_id;
  m["dim"] = index.dim();
  m["num_items"] = index.size();
  m["captions_per_item"] = index.captions_per_item();
  m["files"] = {{"ids", "ids.txt"},
                {"image_vectors", "image_vectors.f32le"},
                {"caption_vectors", "caption_vectors.f32le"}};
  if (!meta.item_image_urls.empty()) m["item_image_urls"] = meta.item_image_urls;
  if (!meta.caption_texts.empty()) m["caption_texts"] = meta.caption_texts;

  std::string ids;
  for (const auto& id : index.ids()) {
    ids += id;
    ids += '\n';
  }
  detail::write_text(dir / "ids.txt", ids);
  write_f32le(dir / "image_vectors.f32le", index.image_vectors().data());
  write_f32le(dir / "caption_vectors.f32le", index.caption_vectors().data());
  const fs::path manifest = dir / "manifest.json";
  detail::write_text(manifest, m.dump(2) + "\n");
  return manifest;
}

struct QueryRecord {
  std::string query_id;
  std::string reference_id;
  std::string target_id;
  std::string modifier_text;
  std::optional<std::string> category;
  std::optional<std::vector<std::string>> subset_ids;

  bool operator==(const QueryRecord&) const = default;
};

/// FashionIQ ships two annotations per triplet; they are embedded as one
/// modifier string.
inline std::string merge_annotations(std::span<const std::string> annotations) {
  std::string out;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    if (i > 0) out += " and ";
    out += annotations[i];
  }
  return out;
}

inline nlohmann::json to_json(const QueryRecord& q) {
  nlohmann::json j;
  j["query_id"] = q.query_id;
  j["reference_id"] = q.reference_id;
  j["target_id"] = q.target_id;
  j["modifier_text"] = q.modifier_text;
  if (q.category) j["category"] = *q.category;
  if (q.subset_ids) j["subset_ids"] = *q.subset_ids;
  return j;
}

inline QueryRecord query_record_from_json(const nlohmann::json& j, const std::string& ctx) {
  if (!j.is_object()) throw Error(ErrorCode::kFormat, ctx + ": record must be a JSON object");
  QueryRecord q;
  q.query_id = detail::required<std::string>(j, "query_id", ctx);
  q.reference_id = detail::required<std::string>(j, "reference_id", ctx);
  q.target_id = detail::required<std::string>(j, "target_id", ctx);
  if (auto it = j.find("modifier_text"); it != j.end()) {
    q.modifier_text = detail::required<std::string>(j, "modifier_text", ctx);
  } else if (auto texts = j.find("modifier_texts"); texts != j.end()) {
    q.modifier_text =
        merge_annotations(detail::required<std::vector<std::string>>(j, "modifier_texts", ctx));
  }
  if (auto it = j.find("category"); it != j.end() && !it->is_null()) {
    q.category = detail::required<std::string>(j, "category", ctx);
  }
  if (auto it = j.find("subset_ids"); it != j.end() && !it->is_null()) {
    q.subset_ids = detail::required<std::vector<std::string>>(j, "subset_ids", ctx);
  }
  return q;
}

/// Query triplets aligned with their modifier embeddings, every ID resolved
/// against one gallery.
class QuerySet {
 public:
  static QuerySet build(std::vector<QueryRecord> records, EmbeddingMatrix modifier_vectors,
                        const GalleryIndex& gallery) {
    if (records.size() != modifier_vectors.count()) {
      throw Error(ErrorCode::kValidation, std::to_string(records.size()) +
                                              " query records but " +
                                              std::to_string(modifier_vectors.count()) +
                                              " modifier vectors");
    }
    if (!records.empty() && modifier_vectors.dim() != gallery.dim()) {
      throw Error(ErrorCode::kValidation, "modifier vector dim " +
                                              std::to_string(modifier_vectors.dim()) +
                                              " does not match gallery dim " +
                                              std::to_string(gallery.dim()));
    }
    QuerySet qs;
    qs.lookup_.reserve(records.size());
    qs.reference_.resize(records.size());
    qs.target_.resize(records.size());
    qs.subset_.resize(records.size());
    std::vector<std::string> unresolved;
    std::optional<std::size_t> subset_len;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const QueryRecord& q = records[i];
      detail::check_id(q.query_id, "query record " + std::to_string(i));
      if (!qs.lookup_.emplace(q.query_id, i).second) {
        throw Error(ErrorCode::kValidation, "duplicate query ID '" + q.query_id + "'");
      }
      if (q.target_id == q.reference_id) {
        throw Error(ErrorCode::kValidation, "query " + q.query_id + ": target equals reference");
      }
      auto ref = gallery.find(q.reference_id);
      auto tgt = gallery.find(q.target_id);
      bool ok = ref && tgt;
      if (q.subset_ids) {
        if (!subset_len) subset_len = q.subset_ids->size();
        if (q.subset_ids->size() != *subset_len) {
          throw Error(ErrorCode::kValidation, "query " + q.query_id + ": subset has " +
                                                  std::to_string(q.subset_ids->size()) +
                                                  " IDs, expected " + std::to_string(*subset_len));
        }
        std::unordered_set<std::string_view> seen;
        bool has_target = false;
        for (const auto& sid : *q.subset_ids) {
          if (!seen.insert(sid).second) {
            throw Error(ErrorCode::kValidation,
                        "query " + q.query_id + ": duplicate subset ID '" + sid + "'");
          }
          has_target = has_target || sid == q.target_id;
          auto si = gallery.find(sid);
          if (!si) {
            ok = false;
          } else {
            qs.subset_[i].push_back(static_cast<std::uint32_t>(*si));
          }
        }
        if (!has_target) {
          throw Error(ErrorCode::kValidation,
                      "query " + q.query_id + ": subset_ids does not contain the target");
        }
      }
      if (!ok) {
        unresolved.push_back(q.query_id);
        continue;
      }
      qs.reference_[i] = static_cast<std::uint32_t>(*ref);
      qs.target_[i] = static_cast<std::uint32_t>(*tgt);
    }
    if (!unresolved.empty()) {
      std::string msg = "unresolved gallery IDs in queries:";
      for (std::size_t i = 0; i < unresolved.size() && i < 10; ++i) msg += " " + unresolved[i];
      if (unresolved.size() > 10) msg += " (+" + std::to_string(unresolved.size() - 10) + " more)";
      throw Error(ErrorCode::kNotFound, msg);
    }
    qs.records_ = std::move(records);
    qs.modifiers_ = std::move(modifier_vectors);
    return qs;
  }

  std::size_t size() const noexcept { return records_.size(); }
  const std::vector<QueryRecord>& records() const noexcept { return records_; }
  const QueryRecord& record(std::size_t i) const { return records_[i]; }
  const EmbeddingMatrix& modifier_vectors() const noexcept { return modifiers_; }
  std::span<const float> modifier(std::size_t i) const { return modifiers_.row(i); }

  std::optional<std::size_t> find(std::string_view query_id) const {
    auto it = lookup_.find(std::string(query_id));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t reference_index(std::size_t i) const { return reference_[i]; }
  std::size_t target_index(std::size_t i) const { return target_[i]; }
  /// Gallery indices of the query's candidate subset; empty when absent.
  std::span<const std::uint32_t> subset_indices(std::size_t i) const { return subset_[i]; }

  bool all_have_subsets() const {
    if (records_.empty()) return false;
    for (const auto& q : records_) {
      if (!q.subset_ids) return false;
    }
    return true;
  }
  bool all_have_categories() const {
    if (records_.empty()) return false;
    for (const auto& q : records_) {
      if (!q.category) return false;
    }
    return true;
  }

 private:
  std::vector<QueryRecord> records_;
  EmbeddingMatrix modifiers_;
  std::unordered_map<std::string, std::size_t> lookup_;
  std::vector<std::uint32_t> reference_;
  std::vector<std::uint32_t> target_;
  std::vector<std::vector<std::uint32_t>> subset_;
};

inline constexpr const char* kModifierVectorsFile = "modifier_vectors.f32le";

/// Loads queries.jsonl and its sibling modifier_vectors.f32le.
inline QuerySet load_queries(const fs::path& queries_path, const GalleryIndex& gallery) {
  const std::string text = detail::read_text(queries_path);
  std::vector<QueryRecord> records;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string ctx = queries_path.string() + ":" + std::to_string(line_no);
    records.push_back(query_record_from_json(detail::parse_json(line, ctx), ctx));
  }

  const fs::path vec_path = queries_path.parent_path() / kModifierVectorsFile;
  std::error_code ec;
  if (!fs::is_regular_file(vec_path, ec)) throw Error(ErrorCode::kIo, "missing file " + vec_path.string());
  const std::size_t d = gallery.dim();
  const std::uintmax_t bytes = fs::file_size(vec_path, ec);
  const std::uintmax_t row_bytes = d * sizeof(float);
  if (bytes % row_bytes != 0) {
    throw Error(ErrorCode::kValidation,
                vec_path.filename().string() + ": vector blob truncated (" + std::to_string(bytes) +
                    " bytes is not a multiple of " + std::to_string(row_bytes) + ")");
  }
  const auto count = static_cast<std::size_t>(bytes / row_bytes);
  if (count != records.size()) {
    throw Error(ErrorCode::kValidation, queries_path.string() + ": " +
                                            std::to_string(records.size()) + " records but " +
                                            std::to_string(count) + " modifier vectors");
  }
  std::vector<float> raw = read_f32le(vec_path, count, d);
  EmbeddingMatrix vectors;
  if (count > 0) {
    try {
      vectors = normalize_rows(raw, d);
    } catch (const Error& e) {
      throw Error(e.code(), vec_path.filename().string() + ": " + e.what());
    }
  }
  try {
    return QuerySet::build(std::move(records), std::move(vectors), gallery);
  } catch (const Error& e) {
    throw Error(e.code(), queries_path.string() + ": " + e.what());
  }
}

/// Writes queries.jsonl plus modifier_vectors.f32le into `dir`.
inline fs::path write_queries(const QuerySet& queries, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  std::string lines;
  for (const auto& q : queries.records()) {
    lines += to_json(q).dump();
    lines += '\n';
  }
  const fs::path path = dir / "queries.jsonl";
  detail::write_text(path, lines);
  write_f32le(dir / kModifierVectorsFile, queries.modifier_vectors().data());
  return path;
}

}  // namespace wmcir
