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

// Recall@K evaluation: plain full-set recall, FashionIQ-style per-category
// recall with an unweighted category average, and CIRR-style full-set plus
// candidate-subset recall.
//
// Metric names: "R@10", "Shirt/R@50", "Average/R@10", "Rsubset@2".

#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "wmcir/embedding_store.hpp"
#include "wmcir/error.hpp"
#include "wmcir/similarity.hpp"

namespace wmcir {

inline constexpr const char* kAverageCategory = "Average";

inline std::string recall_metric(std::size_t k) { return "R@" + std::to_string(k); }
inline std::string subset_metric(std::size_t k) { return "Rsubset@" + std::to_string(k); }

struct EvalReport {
  std::string dataset;
  RetrievalParams params;
  std::map<std::string, double> per_metric;
  std::size_t num_queries = 0;
  /// Queries that could not be scored; they count as misses.
  std::size_t num_failed = 0;

  double at(const std::string& metric) const {
    auto it = per_metric.find(metric);
    if (it == per_metric.end()) throw Error(ErrorCode::kNotFound, "unknown metric '" + metric + "'");
    return it->second;
  }
};

/// Fraction of entries with a rank in [1, k].
inline double recall_from_ranks(std::span<const std::optional<std::size_t>> ranks, std::size_t k) {
  if (ranks.empty()) throw Error(ErrorCode::kInvalidArgument, "recall over zero queries");
  std::size_t hits = 0;
  for (const auto& r : ranks) {
    if (r && *r <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

using TargetMap = std::unordered_map<std::string, std::string>;

inline std::vector<std::optional<std::size_t>> target_ranks(std::span<const RankedList> lists,
                                                            const TargetMap& targets) {
  std::vector<std::optional<std::size_t>> ranks;
  ranks.reserve(lists.size());
  for (const auto& l : lists) {
    auto it = targets.find(l.query_id);
    if (it == targets.end()) {
      throw Error(ErrorCode::kNotFound, "no target for query '" + l.query_id + "'");
    }
    ranks.push_back(l.rank_of(it->second));
  }
  return ranks;
}

/// Fraction of queries whose target is among the first k entries.
inline double recall_at_k(std::span<const RankedList> lists, const TargetMap& targets,
                          std::size_t k) {
  return recall_from_ranks(target_ranks(lists, targets), k);
}

/// Per-category R@K for each k and the unweighted mean across categories.
/// `ranks` holds each category's target ranks.
inline std::map<std::string, double> category_metrics(
    const std::map<std::string, std::vector<std::optional<std::size_t>>>& ranks,
    std::span<const std::size_t> ks) {
  if (ranks.empty()) throw Error(ErrorCode::kInvalidArgument, "no categories to report");
  std::map<std::string, double> out;
  for (std::size_t k : ks) {
    double sum = 0.0;
    for (const auto& [cat, r] : ranks) {
      if (r.empty()) throw Error(ErrorCode::kInvalidArgument, "category '" + cat + "' is empty");
      const double v = recall_from_ranks(r, k);
      out[cat + "/" + recall_metric(k)] = v;
      sum += v;
    }
    out[std::string(kAverageCategory) + "/" + recall_metric(k)] =
        sum / static_cast<double>(ranks.size());
  }
  return out;
}

inline EvalReport fashioniq_report(const std::map<std::string, std::vector<RankedList>>& per_category,
                                   const TargetMap& targets,
                                   std::span<const std::size_t> ks = std::vector<std::size_t>{10, 50}) {
  std::map<std::string, std::vector<std::optional<std::size_t>>> ranks;
  std::size_t total = 0;
  for (const auto& [cat, lists] : per_category) {
    if (lists.empty()) throw Error(ErrorCode::kInvalidArgument, "category '" + cat + "' is empty");
    ranks[cat] = target_ranks(lists, targets);
    total += lists.size();
  }
  EvalReport report;
  report.per_metric = category_metrics(ranks, ks);
  report.num_queries = total;
  return report;
}

/// 1-based rank of the target among the subset candidates (reference
/// removed), ordered by (score desc, item ID asc).
inline std::size_t subset_rank(std::span<const double> full_scores, const GalleryIndex& gallery,
                               std::span<const std::uint32_t> subset, std::size_t reference,
                               std::size_t target) {
  const double ts = full_scores[target];
  const std::uint32_t tr = gallery.id_rank(target);
  std::size_t rank = 1;
  for (std::uint32_t i : subset) {
    if (i == reference || i == target) continue;
    const double s = full_scores[i];
    if (s > ts || (s == ts && gallery.id_rank(i) < tr)) ++rank;
  }
  return rank;
}

/// 1 if the target ranks within the top k of its candidate subset.
inline int subset_recall(const QueryRecord& query, std::span<const double> full_scores,
                         const GalleryIndex& gallery, std::size_t k) {
  if (!query.subset_ids) {
    throw Error(ErrorCode::kInvalidArgument, "query " + query.query_id + " has no subset");
  }
  std::vector<std::uint32_t> subset;
  for (const auto& id : *query.subset_ids) {
    subset.push_back(static_cast<std::uint32_t>(gallery.index_of(id)));
  }
  const std::size_t rank = subset_rank(full_scores, gallery, subset,
                                       gallery.index_of(query.reference_id),
                                       gallery.index_of(query.target_id));
  return rank <= k ? 1 : 0;
}

inline std::map<std::string, double> cirr_metrics(std::span<const std::optional<std::size_t>> full,
                                                  std::span<const std::optional<std::size_t>> subset,
                                                  std::span<const std::size_t> ks_full,
                                                  std::span<const std::size_t> ks_subset) {
  std::map<std::string, double> out;
  for (std::size_t k : ks_full) out[recall_metric(k)] = recall_from_ranks(full, k);
  for (std::size_t k : ks_subset) out[subset_metric(k)] = recall_from_ranks(subset, k);
  return out;
}

/// Full-set R@K plus subset R@K. `subset_ranks` maps query_id to the value
/// returned by subset_rank for that query's final scores.
inline EvalReport cirr_report(std::span<const RankedList> lists,
                              const std::unordered_map<std::string, std::size_t>& subset_ranks,
                              const QuerySet& queryset,
                              std::span<const std::size_t> ks_full = std::vector<std::size_t>{1, 5, 10, 50},
                              std::span<const std::size_t> ks_subset = std::vector<std::size_t>{1, 2, 3}) {
  TargetMap targets;
  for (const auto& q : queryset.records()) {
    if (!q.subset_ids) {
      throw Error(ErrorCode::kInvalidArgument, "query " + q.query_id + " has no subset");
    }
    targets[q.query_id] = q.target_id;
  }
  const auto full = target_ranks(lists, targets);
  std::vector<std::optional<std::size_t>> sub;
  for (const auto& l : lists) {
    auto it = subset_ranks.find(l.query_id);
    if (it == subset_ranks.end()) {
      throw Error(ErrorCode::kNotFound, "no subset rank for query '" + l.query_id + "'");
    }
    sub.push_back(it->second);
  }
  EvalReport report;
  report.per_metric = cirr_metrics(full, sub, ks_full, ks_subset);
  report.num_queries = lists.size();
  return report;
}

inline EvalReport plain_report(std::span<const RankedList> lists, const TargetMap& targets,
                               std::span<const std::size_t> ks) {
  const auto ranks = target_ranks(lists, targets);
  EvalReport report;
  for (std::size_t k : ks) report.per_metric[recall_metric(k)] = recall_from_ranks(ranks, k);
  report.num_queries = lists.size();
  return report;
}

inline nlohmann::json to_json(const RetrievalParams& p) {
  return {{"alpha", p.alpha},
          {"beta", p.beta},
          {"k", p.k},
          {"caption_subset", p.caption_subset},
          {"exclude_ids", p.exclude_ids},
          {"exclude_reference", p.exclude_reference}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& [name, v] : r.per_metric) metrics[name] = v;
  return {{"dataset", r.dataset},
          {"params", to_json(r.params)},
          {"metrics", metrics},
          {"num_queries", r.num_queries},
          {"num_failed", r.num_failed}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.dataset = j.at("dataset").get<std::string>();
  const auto& p = j.at("params");
  r.params.alpha = p.at("alpha").get<double>();
  r.params.beta = p.at("beta").get<double>();
  r.params.k = p.at("k").get<std::size_t>();
  r.params.caption_subset = p.at("caption_subset").get<std::vector<std::size_t>>();
  r.params.exclude_ids = p.at("exclude_ids").get<std::vector<std::string>>();
  r.params.exclude_reference = p.at("exclude_reference").get<bool>();
  for (const auto& [k, v] : j.at("metrics").items()) r.per_metric[k] = v.get<double>();
  r.num_queries = j.at("num_queries").get<std::size_t>();
  r.num_failed = j.value("num_failed", std::size_t{0});
  return r;
}

inline std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

/// Aligned text table: one row per metric group ("Shirt", "Average", or
/// "all" for ungrouped metrics), one column per metric, values as
/// percentages with two decimals.
inline std::string render_table(const EvalReport& r) {
  std::map<std::string, std::map<std::string, double>> rows;
  std::vector<std::string> cols;
  std::set<std::string> seen;
  auto order_key = [](const std::string& m) {
    const bool subset = m.rfind("Rsubset@", 0) == 0;
    const std::size_t at = m.find('@');
    return std::make_pair(subset, std::stoul(m.substr(at + 1)));
  };
  for (const auto& [name, v] : r.per_metric) {
    const std::size_t slash = name.find('/');
    const std::string group = slash == std::string::npos ? "all" : name.substr(0, slash);
    const std::string metric = slash == std::string::npos ? name : name.substr(slash + 1);
    rows[group][metric] = v;
    if (seen.insert(metric).second) cols.push_back(metric);
  }
  std::sort(cols.begin(), cols.end(),
            [&](const std::string& a, const std::string& b) { return order_key(a) < order_key(b); });
  std::vector<std::string> row_order;
  for (const auto& [g, _] : rows) {
    if (g != kAverageCategory) row_order.push_back(g);
  }
  if (rows.count(kAverageCategory)) row_order.push_back(kAverageCategory);

  std::size_t w0 = 8;
  for (const auto& g : row_order) w0 = std::max(w0, g.size() + 2);
  std::ostringstream out;
  out << r.dataset << "  (" << r.num_queries << " queries, alpha=" << r.params.alpha
      << ", beta=" << r.params.beta << ")\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(w0), "");
  out << buf;
  for (const auto& c : cols) {
    std::snprintf(buf, sizeof buf, "%12s", c.c_str());
    out << buf;
  }
  out << '\n';
  for (const auto& g : row_order) {
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(w0), g.c_str());
    out << buf;
    for (const auto& c : cols) {
      auto it = rows[g].find(c);
      std::snprintf(buf, sizeof buf, "%12s",
                    it == rows[g].end() ? "-" : format_percent(it->second).c_str());
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace wmcir
