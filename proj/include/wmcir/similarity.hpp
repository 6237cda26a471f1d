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

// Query-to-image and query-to-caption scoring, the blended final score and
// exact top-K ranking over a GalleryIndex.
//
// Every score for a (query, row) pair is produced by the same sequence of
// double operations regardless of batching, sharding or worker count, so
// rank lists are reproducible bit for bit.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wmcir/embedding_store.hpp"
#include "wmcir/error.hpp"
#include "wmcir/fusion.hpp"
#include "wmcir/parallel.hpp"

namespace wmcir {

inline constexpr double kDefaultAlpha = 0.80;
inline constexpr double kDefaultBeta = 0.10;

struct RetrievalParams {
  double alpha = kDefaultAlpha;
  double beta = kDefaultBeta;
  std::size_t k = 50;
  /// 1-based caption indices; empty selects all R captions.
  std::vector<std::size_t> caption_subset;
  std::vector<std::string> exclude_ids;
  bool exclude_reference = false;
};

/// Sorted, de-duplicated 1-based caption subset; empty input expands to
/// {1..R}.
inline std::vector<std::size_t> resolve_caption_subset(std::span<const std::size_t> subset,
                                                       std::size_t captions_per_item) {
  std::vector<std::size_t> out;
  if (subset.empty()) {
    for (std::size_t r = 1; r <= captions_per_item; ++r) out.push_back(r);
    return out;
  }
  out.assign(subset.begin(), subset.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  for (std::size_t r : out) {
    if (r < 1 || r > captions_per_item) {
      throw Error(ErrorCode::kInvalidArgument, "caption index " + std::to_string(r) +
                                                   " outside 1.." +
                                                   std::to_string(captions_per_item));
    }
  }
  return out;
}

inline void validate(const RetrievalParams& p, std::size_t captions_per_item) {
  check_unit_interval(p.alpha, "alpha");
  check_unit_interval(p.beta, "beta");
  if (p.k < 1) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  resolve_caption_subset(p.caption_subset, captions_per_item);
}

struct RankedEntry {
  std::string item_id;
  double score = 0.0;
  double q2i = 0.0;
  double q2c = 0.0;

  bool operator==(const RankedEntry&) const = default;
};

struct RankedList {
  std::string query_id;
  std::vector<RankedEntry> entries;

  /// 1-based position of `item_id`, if present.
  std::optional<std::size_t> rank_of(std::string_view item_id) const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].item_id == item_id) return i + 1;
    }
    return std::nullopt;
  }

  bool operator==(const RankedList&) const = default;
};

/// Raw per-row cosines for one fused query: q2i has N entries, captions has
/// N x R entries grouped per item. Everything downstream (caption means,
/// blending, ranking) is derived from these without touching vectors again.
struct QueryScores {
  std::vector<double> q2i;
  std::vector<double> captions;
  std::size_t captions_per_item = 0;
  /// Non-empty when the query could not be scored (zero fused vector).
  std::string error;

  bool ok() const noexcept { return error.empty(); }
};

namespace detail {

inline double finish_cosine(double dot, double row_inv, double query_inv) {
  return std::clamp((dot * row_inv) * query_inv, -1.0, 1.0);
}

/// Scores `nrows` contiguous rows against up to a handful of queries. Rows
/// are visited kTileRows at a time so each loaded row block is reused by
/// every query in the group and the independent accumulators keep the FP
/// pipeline busy; each dot product is still a single ascending-order double
/// accumulation.
inline constexpr std::size_t kTileRows = 8;

inline void score_tile(std::span<const double* const> queries, std::span<const double> query_inv,
                       const float* rows, const double* row_inv, std::size_t nrows,
                       std::size_t dim, std::span<double* const> out) {
  const std::size_t nq = queries.size();
  std::size_t r = 0;
  for (; r + kTileRows <= nrows; r += kTileRows) {
    const float* x = rows + r * dim;
    for (std::size_t j = 0; j < nq; ++j) {
      const double* q = queries[j];
      double acc[kTileRows] = {};
      for (std::size_t i = 0; i < dim; ++i) {
        const double qi = q[i];
#pragma GCC unroll 8
        for (std::size_t t = 0; t < kTileRows; ++t) acc[t] += qi * static_cast<double>(x[t * dim + i]);
      }
      double* o = out[j] + r;
      for (std::size_t t = 0; t < kTileRows; ++t) o[t] = finish_cosine(acc[t], row_inv[r + t], query_inv[j]);
    }
  }
  for (; r < nrows; ++r) {
    const float* x = rows + r * dim;
    for (std::size_t j = 0; j < nq; ++j) {
      const double* q = queries[j];
      double a = 0.0;
      for (std::size_t i = 0; i < dim; ++i) a += q[i] * static_cast<double>(x[i]);
      out[j][r] = finish_cosine(a, row_inv[r], query_inv[j]);
    }
  }
}

inline constexpr std::size_t kQueryGroup = 8;
inline constexpr std::size_t kRowShard = 4096;

}  // namespace detail

/// Cosines against every image row and every caption row for a batch of
/// fused queries. Work is split into (query group, row shard) units run on
/// up to `threads` workers; results do not depend on the split.
inline std::vector<QueryScores> score_queries(std::span<const FusedQuery> queries,
                                              const GalleryIndex& gallery,
                                              std::size_t threads = 1) {
  const std::size_t n = gallery.size();
  const std::size_t r = gallery.captions_per_item();
  const std::size_t dim = gallery.dim();
  std::vector<QueryScores> out(queries.size());

  std::vector<std::size_t> live;
  std::vector<double> inv(queries.size(), 0.0);
  for (std::size_t j = 0; j < queries.size(); ++j) {
    QueryScores& s = out[j];
    s.captions_per_item = r;
    if (queries[j].dim() != dim) {
      throw Error(ErrorCode::kInvalidArgument, "query dim " + std::to_string(queries[j].dim()) +
                                                   " does not match gallery dim " +
                                                   std::to_string(dim));
    }
    const double norm = queries[j].norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      s.error = "fused query " + queries[j].source_query_id + " is the zero vector";
      continue;
    }
    inv[j] = 1.0 / norm;
    s.q2i.resize(n);
    s.captions.resize(n * r);
    live.push_back(j);
  }
  if (live.empty() || n == 0) return out;

  const std::size_t groups = (live.size() + detail::kQueryGroup - 1) / detail::kQueryGroup;
  const std::size_t img_shards = (n + detail::kRowShard - 1) / detail::kRowShard;
  const std::size_t cap_shards = (n * r + detail::kRowShard - 1) / detail::kRowShard;
  const std::size_t per_group = img_shards + cap_shards;

  parallel_for(groups * per_group, threads, [&](std::size_t unit) {
    const std::size_t g = unit / per_group;
    std::size_t shard = unit % per_group;
    const std::size_t first_q = g * detail::kQueryGroup;
    const std::size_t nq = std::min(detail::kQueryGroup, live.size() - first_q);
    const double* qv[detail::kQueryGroup];
    double qinv[detail::kQueryGroup];
    double* dst[detail::kQueryGroup];

    const EmbeddingMatrix* m = &gallery.image_vectors();
    bool captions = false;
    if (shard >= img_shards) {
      shard -= img_shards;
      m = &gallery.caption_vectors();
      captions = true;
    }
    const std::size_t begin = shard * detail::kRowShard;
    const std::size_t count = std::min(detail::kRowShard, m->count() - begin);
    for (std::size_t j = 0; j < nq; ++j) {
      const std::size_t qi = live[first_q + j];
      qv[j] = queries[qi].vector.data();
      qinv[j] = inv[qi];
      dst[j] = (captions ? out[qi].captions.data() : out[qi].q2i.data()) + begin;
    }
    detail::score_tile(std::span<const double* const>(qv, nq), std::span<const double>(qinv, nq),
                       m->data().data() + begin * dim, m->inv_norms().data() + begin, count, dim,
                       std::span<double* const>(dst, nq));
  });
  return out;
}

/// Single-query scoring; throws on a zero fused vector.
inline QueryScores score_query(const FusedQuery& q, const GalleryIndex& gallery,
                               std::size_t threads = 1) {
  std::vector<QueryScores> s = score_queries(std::span<const FusedQuery>(&q, 1), gallery, threads);
  if (!s[0].ok()) throw Error(ErrorCode::kDegenerateQuery, s[0].error);
  return std::move(s[0]);
}

/// Mean caption cosine over a 1-based caption subset, per item.
inline std::vector<double> caption_means(const QueryScores& scores,
                                         std::span<const std::size_t> caption_subset) {
  if (caption_subset.empty()) throw Error(ErrorCode::kInvalidArgument, "empty caption subset");
  const std::size_t r = scores.captions_per_item;
  const std::size_t n = r == 0 ? 0 : scores.captions.size() / r;
  const double scale = 1.0 / static_cast<double>(caption_subset.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = scores.captions.data() + i * r;
    double acc = 0.0;
    for (std::size_t c : caption_subset) acc += row[c - 1];
    out[i] = acc * scale;
  }
  return out;
}

inline std::vector<double> q2i_scores(const FusedQuery& q, const GalleryIndex& gallery) {
  return score_query(q, gallery).q2i;
}

inline std::vector<double> q2c_scores(const FusedQuery& q, const GalleryIndex& gallery,
                                      std::span<const std::size_t> caption_subset) {
  if (caption_subset.empty()) throw Error(ErrorCode::kInvalidArgument, "empty caption subset");
  const auto subset = resolve_caption_subset(caption_subset, gallery.captions_per_item());
  return caption_means(score_query(q, gallery), subset);
}

/// s = (1 - beta) q2i + beta q2c.
inline std::vector<double> fuse_scores(std::span<const double> q2i, std::span<const double> q2c,
                                       double beta) {
  if (q2i.size() != q2c.size()) {
    throw Error(ErrorCode::kInvalidArgument, "fuse_scores: length mismatch");
  }
  check_unit_interval(beta, "beta");
  const double keep = 1.0 - beta;
  std::vector<double> out(q2i.size());
  for (std::size_t i = 0; i < q2i.size(); ++i) out[i] = keep * q2i[i] + beta * q2c[i];
  return out;
}

/// Sorted gallery indices for a set of item IDs; IDs not in the gallery are
/// ignored.
inline std::vector<std::uint32_t> exclusion_indices(std::span<const std::string> ids,
                                                    const GalleryIndex& gallery) {
  std::vector<std::uint32_t> out;
  for (const auto& id : ids) {
    if (auto i = gallery.find(id)) out.push_back(static_cast<std::uint32_t>(*i));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Gallery indices of the k best non-excluded items under the total order
/// (score desc, item ID asc). `excluded` must be sorted.
inline std::vector<std::uint32_t> top_k_indices(std::span<const double> scores,
                                                const GalleryIndex& gallery, std::size_t k,
                                                std::span<const std::uint32_t> excluded) {
  std::vector<std::uint32_t> cand;
  cand.reserve(scores.size());
  std::size_t e = 0;
  for (std::uint32_t i = 0; i < scores.size(); ++i) {
    while (e < excluded.size() && excluded[e] < i) ++e;
    if (e < excluded.size() && excluded[e] == i) continue;
    cand.push_back(i);
  }
  const std::size_t m = std::min(k, cand.size());
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return gallery.id_rank(a) < gallery.id_rank(b);
  };
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(m), cand.end(),
                    better);
  cand.resize(m);
  return cand;
}

/// Ranked list of the k best items. q2i/q2c fields are filled when the
/// component score vectors are supplied, otherwise left at zero.
inline RankedList top_k(std::span<const double> scores, const GalleryIndex& gallery, std::size_t k,
                        std::span<const std::uint32_t> excluded, std::span<const double> q2i = {},
                        std::span<const double> q2c = {}, std::string query_id = {}) {
  if (scores.size() != gallery.size()) {
    throw Error(ErrorCode::kInvalidArgument, "top_k: score count does not match gallery size");
  }
  RankedList list;
  list.query_id = std::move(query_id);
  for (std::uint32_t i : top_k_indices(scores, gallery, k, excluded)) {
    RankedEntry e;
    e.item_id = gallery.id(i);
    e.score = scores[i];
    if (!q2i.empty()) e.q2i = q2i[i];
    if (!q2c.empty()) e.q2c = q2c[i];
    list.entries.push_back(std::move(e));
  }
  return list;
}

inline RankedList top_k(std::span<const double> scores, const GalleryIndex& gallery, std::size_t k,
                        std::span<const std::string> exclude_ids) {
  const auto excluded = exclusion_indices(exclude_ids, gallery);
  return top_k(scores, gallery, k, excluded);
}

/// Final blended scores plus their two components for one query.
struct BlendedScores {
  std::vector<double> final;
  std::vector<double> q2i;
  std::vector<double> q2c;
};

inline BlendedScores blend(const QueryScores& scores, std::span<const std::size_t> caption_subset,
                           double beta) {
  BlendedScores b;
  b.q2c = caption_means(scores, caption_subset);
  b.final = fuse_scores(scores.q2i, b.q2c, beta);
  b.q2i = scores.q2i;
  return b;
}

/// Exclusion list for one query: params.exclude_ids plus, when requested,
/// the reference item.
inline std::vector<std::uint32_t> query_exclusions(const RetrievalParams& params,
                                                   const GalleryIndex& gallery,
                                                   std::optional<std::size_t> reference) {
  std::vector<std::uint32_t> out = exclusion_indices(params.exclude_ids, gallery);
  if (params.exclude_reference && reference) {
    auto ref = static_cast<std::uint32_t>(*reference);
    auto it = std::lower_bound(out.begin(), out.end(), ref);
    if (it == out.end() || *it != ref) out.insert(it, ref);
  }
  return out;
}

/// Fused query for query `qi` of a query set: the gallery's stored vector
/// of the reference item combined with the query's modifier vector.
inline FusedQuery fuse_query(const QuerySet& queries, std::size_t qi, const GalleryIndex& gallery,
                             double alpha) {
  return compose_query(gallery.image(queries.reference_index(qi)), queries.modifier(qi), alpha,
                       queries.record(qi).query_id);
}

/// Retrieval from an explicit reference item and modifier vector.
inline RankedList retrieve_vector(std::size_t reference_index, std::span<const float> modifier,
                                  const GalleryIndex& gallery, const RetrievalParams& params,
                                  std::string query_id = {}, std::size_t threads = 1) {
  validate(params, gallery.captions_per_item());
  if (reference_index >= gallery.size()) {
    throw Error(ErrorCode::kNotFound, "reference index out of range");
  }
  const FusedQuery q = compose_query(gallery.image(reference_index), modifier, params.alpha, query_id);
  const QueryScores s = score_query(q, gallery, threads);
  const auto subset = resolve_caption_subset(params.caption_subset, gallery.captions_per_item());
  const BlendedScores b = blend(s, subset, params.beta);
  const auto excluded = query_exclusions(params, gallery, reference_index);
  return top_k(b.final, gallery, params.k, excluded, b.q2i, b.q2c, std::move(query_id));
}

/// End-to-end retrieval for one query of `queryset`.
inline RankedList retrieve(const QueryRecord& query, const QuerySet& queryset,
                           const GalleryIndex& gallery, const RetrievalParams& params,
                           std::size_t threads = 1) {
  auto qi = queryset.find(query.query_id);
  if (!qi) throw Error(ErrorCode::kNotFound, "query '" + query.query_id + "' not in query set");
  auto ref = gallery.find(query.reference_id);
  if (!ref) {
    throw Error(ErrorCode::kNotFound, "query " + query.query_id + ": reference '" +
                                          query.reference_id + "' not in gallery");
  }
  return retrieve_vector(*ref, queryset.modifier(*qi), gallery, params, query.query_id, threads);
}

}  // namespace wmcir
