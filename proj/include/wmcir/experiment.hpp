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

// Batch experiments over one or more loaded (gallery, queries) pairs:
// benchmark runs, alpha/beta grid searches and caption-subset ablations.
//
// All three share one sweep: for a fixed alpha the fused queries and their
// raw cosines are computed once, then every (caption subset, beta) variant
// is derived from them. A grid cell is therefore the same computation as a
// standalone benchmark at those parameters.

#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wmcir/embedding_store.hpp"
#include "wmcir/eval.hpp"
#include "wmcir/parallel.hpp"
#include "wmcir/similarity.hpp"

namespace wmcir {

struct Dataset {
  std::string name;
  std::shared_ptr<const GalleryIndex> gallery;
  std::shared_ptr<const QuerySet> queries;
};

inline std::string dataset_name(const GalleryMetadata& m) {
  return m.split.empty() ? m.dataset : m.dataset + "/" + m.split;
}

inline Dataset load_dataset(const fs::path& gallery_manifest, const fs::path& queries_path) {
  Dataset d;
  d.gallery = std::make_shared<const GalleryIndex>(load_gallery(gallery_manifest));
  d.queries = std::make_shared<const QuerySet>(load_queries(queries_path, *d.gallery));
  d.name = dataset_name(d.gallery->metadata());
  return d;
}

enum class Protocol { kAuto, kPlain, kFashionIQ, kCirr };
enum class ExcludePolicy { kAuto, kOn, kOff };

struct EvalSettings {
  Protocol protocol = Protocol::kAuto;
  /// Full-set recall cutoffs; empty selects the protocol default.
  std::vector<std::size_t> ks;
  std::vector<std::size_t> subset_ks = {1, 2, 3};
  ExcludePolicy exclude = ExcludePolicy::kAuto;
  std::size_t threads = 1;
};

struct QueryOutcome {
  std::string dataset;
  std::string query_id;
  std::string target_id;
  std::string category;
  RankedList list;
  std::optional<std::size_t> target_rank;
  std::optional<std::size_t> subset_rank;
  std::string error;
};

struct BenchmarkResult {
  EvalReport report;
  std::vector<QueryOutcome> outcomes;
};

/// Cells indexed [beta row][alpha column].
struct HeatmapTable {
  std::string metric;
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<std::vector<double>> cells;

  bool operator==(const HeatmapTable&) const = default;
};

struct GridResult {
  std::vector<HeatmapTable> heatmaps;  // one per metric, in metric-name order
  /// reports[b][a] for betas[b], alphas[a].
  std::vector<std::vector<EvalReport>> reports;
};

struct AblationRow {
  std::vector<std::size_t> caption_subset;
  EvalReport report;
};

/// Every non-empty subset of {1..R}, by size then lexicographically.
inline std::vector<std::vector<std::size_t>> all_caption_subsets(std::size_t captions_per_item) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t size = 1; size <= captions_per_item; ++size) {
    std::vector<std::size_t> pick(size);
    for (std::size_t i = 0; i < size; ++i) pick[i] = i + 1;
    for (;;) {
      out.push_back(pick);
      std::size_t i = size;
      while (i > 0 && pick[i - 1] == captions_per_item - size + i) --i;
      if (i == 0) break;
      ++pick[i - 1];
      for (std::size_t j = i; j < size; ++j) pick[j] = pick[j - 1] + 1;
    }
  }
  return out;
}

inline double snap_grid_value(double x) { return std::round(x * 1e9) / 1e9; }

/// Parses "start:stop:step" (inclusive of stop) or a comma-separated list.
inline std::vector<double> parse_grid(std::string_view spec) {
  auto parse_num = [&](std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw Error(ErrorCode::kInvalidArgument, "bad number '" + std::string(s) + "' in grid");
    }
    return v;
  };
  std::vector<double> out;
  if (spec.find(':') != std::string_view::npos) {
    const std::size_t a = spec.find(':');
    const std::size_t b = spec.find(':', a + 1);
    if (b == std::string_view::npos) {
      throw Error(ErrorCode::kInvalidArgument, "grid range must be start:stop:step");
    }
    const double start = parse_num(spec.substr(0, a));
    const double stop = parse_num(spec.substr(a + 1, b - a - 1));
    const double step = parse_num(spec.substr(b + 1));
    if (!(step > 0.0) || stop < start) {
      throw Error(ErrorCode::kInvalidArgument, "grid range needs step > 0 and stop >= start");
    }
    const auto n = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
    for (std::size_t i = 0; i < n; ++i) out.push_back(snap_grid_value(start + step * i));
  } else {
    std::size_t pos = 0;
    while (pos <= spec.size()) {
      std::size_t end = spec.find(',', pos);
      if (end == std::string_view::npos) end = spec.size();
      out.push_back(parse_num(spec.substr(pos, end - pos)));
      pos = end + 1;
    }
  }
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "empty grid");
  for (double v : out) check_unit_interval(v, "grid value");
  return out;
}

inline std::string format_shortest(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

/// Comma-separated heatmap: first row holds alpha values, first column beta
/// values.
inline std::string to_csv(const HeatmapTable& h) {
  std::string out = "beta\\alpha";
  for (double a : h.alphas) out += "," + format_shortest(a);
  out += '\n';
  for (std::size_t b = 0; b < h.betas.size(); ++b) {
    out += format_shortest(h.betas[b]);
    for (double v : h.cells[b]) out += "," + format_shortest(v);
    out += '\n';
  }
  return out;
}

inline nlohmann::json to_json(const HeatmapTable& h) {
  return {{"metric", h.metric}, {"alphas", h.alphas}, {"betas", h.betas}, {"cells", h.cells}};
}

/// Text rendering with one shade glyph per cell (darker is higher) followed
/// by the percentage.
inline std::string render_heatmap(const HeatmapTable& h) {
  static constexpr std::string_view kShades = " .:-=+*#%@";
  double lo = 1.0, hi = 0.0;
  for (const auto& row : h.cells) {
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  std::string out = h.metric + "  rows: beta, columns: alpha\n      ";
  char buf[32];
  for (double a : h.alphas) {
    std::snprintf(buf, sizeof buf, "%8.2f", a);
    out += buf;
  }
  out += '\n';
  for (std::size_t b = 0; b < h.betas.size(); ++b) {
    std::snprintf(buf, sizeof buf, "%6.2f", h.betas[b]);
    out += buf;
    for (double v : h.cells[b]) {
      const double t = hi > lo ? (v - lo) / (hi - lo) : 1.0;
      const auto idx = static_cast<std::size_t>(std::lround(t * (kShades.size() - 1)));
      std::snprintf(buf, sizeof buf, " %c%6.2f", kShades[idx], v * 100.0);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

class Experiment {
 public:
  Experiment(std::vector<Dataset> datasets, EvalSettings settings)
      : datasets_(std::move(datasets)), settings_(std::move(settings)) {
    if (datasets_.empty()) throw Error(ErrorCode::kInvalidArgument, "no datasets configured");
    captions_per_item_ = datasets_.front().gallery->captions_per_item();
    for (const auto& d : datasets_) {
      if (!d.gallery || !d.queries) throw Error(ErrorCode::kInvalidArgument, "dataset not loaded");
      if (d.queries->size() == 0) {
        throw Error(ErrorCode::kValidation, "dataset " + d.name + " has no queries");
      }
      captions_per_item_ = std::min(captions_per_item_, d.gallery->captions_per_item());
    }
    protocol_ = resolve_protocol();
    exclude_reference_ = settings_.exclude == ExcludePolicy::kOn ||
                         (settings_.exclude == ExcludePolicy::kAuto && protocol_ == Protocol::kCirr);
    ks_ = settings_.ks;
    if (ks_.empty()) {
      ks_ = protocol_ == Protocol::kFashionIQ ? std::vector<std::size_t>{10, 50}
                                              : std::vector<std::size_t>{1, 5, 10, 50};
    }
    for (std::size_t k : ks_) {
      if (k == 0) throw Error(ErrorCode::kInvalidArgument, "recall cutoffs must be >= 1");
    }
    for (std::size_t k : settings_.subset_ks) {
      if (k == 0) throw Error(ErrorCode::kInvalidArgument, "subset cutoffs must be >= 1");
    }
    depth_ = *std::max_element(ks_.begin(), ks_.end());
  }

  const std::vector<Dataset>& datasets() const noexcept { return datasets_; }
  Protocol protocol() const noexcept { return protocol_; }
  bool exclude_reference() const noexcept { return exclude_reference_; }
  const std::vector<std::size_t>& ks() const noexcept { return ks_; }
  /// Smallest R across datasets; caption subsets must fit within it.
  std::size_t captions_per_item() const noexcept { return captions_per_item_; }

  /// Parameters as they are actually applied: k raised to the deepest
  /// recall cutoff, caption subset resolved, exclusion policy resolved.
  RetrievalParams effective(RetrievalParams p) const {
    p.k = std::max(p.k, depth_);
    p.caption_subset = resolve_caption_subset(p.caption_subset, captions_per_item_);
    p.exclude_reference = exclude_reference_;
    validate(p, captions_per_item_);
    return p;
  }

  /// Metric names every report of this experiment carries.
  std::vector<std::string> metric_names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : empty_metrics()) out.push_back(name);
    return out;
  }

  BenchmarkResult run(const RetrievalParams& params, bool keep_lists = true) const {
    const RetrievalParams p = effective(params);
    auto sweeps = sweep(p.alpha, {{p.caption_subset, p.beta}}, p, keep_lists);
    BenchmarkResult result;
    result.outcomes = std::move(sweeps.front());
    result.report = make_report(result.outcomes, p);
    return result;
  }

  GridResult grid(std::span<const double> alphas, std::span<const double> betas,
                  const RetrievalParams& base) const {
    if (alphas.empty() || betas.empty()) throw Error(ErrorCode::kInvalidArgument, "empty grid");
    for (double a : alphas) check_unit_interval(a, "alpha");
    for (double b : betas) check_unit_interval(b, "beta");
    const RetrievalParams p0 = effective(base);
    std::vector<Variant> variants;
    for (double b : betas) variants.push_back({p0.caption_subset, b});

    GridResult g;
    g.reports.assign(betas.size(), std::vector<EvalReport>(alphas.size()));
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      RetrievalParams p = p0;
      p.alpha = alphas[a];
      auto sweeps = sweep(p.alpha, variants, p, false);
      for (std::size_t b = 0; b < betas.size(); ++b) {
        p.beta = betas[b];
        g.reports[b][a] = make_report(sweeps[b], p);
      }
    }
    for (const auto& [metric, _] : g.reports[0][0].per_metric) {
      HeatmapTable h;
      h.metric = metric;
      h.alphas.assign(alphas.begin(), alphas.end());
      h.betas.assign(betas.begin(), betas.end());
      h.cells.assign(betas.size(), std::vector<double>(alphas.size()));
      for (std::size_t b = 0; b < betas.size(); ++b) {
        for (std::size_t a = 0; a < alphas.size(); ++a) h.cells[b][a] = g.reports[b][a].at(metric);
      }
      g.heatmaps.push_back(std::move(h));
    }
    return g;
  }

  std::vector<AblationRow> ablate_captions(std::span<const std::vector<std::size_t>> subsets,
                                           const RetrievalParams& base) const {
    const RetrievalParams p0 = effective(base);
    std::vector<std::vector<std::size_t>> chosen(subsets.begin(), subsets.end());
    if (chosen.empty()) chosen = all_caption_subsets(captions_per_item_);
    std::vector<Variant> variants;
    for (const auto& s : chosen) {
      if (s.empty()) throw Error(ErrorCode::kInvalidArgument, "empty caption subset in ablation");
      variants.push_back({resolve_caption_subset(s, captions_per_item_), p0.beta});
    }
    auto sweeps = sweep(p0.alpha, variants, p0, false);
    std::vector<AblationRow> rows;
    for (std::size_t v = 0; v < variants.size(); ++v) {
      RetrievalParams p = p0;
      p.caption_subset = variants[v].subset;
      rows.push_back({variants[v].subset, make_report(sweeps[v], p)});
    }
    return rows;
  }

 private:
  struct Variant {
    std::vector<std::size_t> subset;
    double beta;
  };

  static constexpr std::size_t kChunk = 64;

  Protocol resolve_protocol() const {
    if (settings_.protocol != Protocol::kAuto) {
      for (const auto& d : datasets_) {
        if (settings_.protocol == Protocol::kCirr && !d.queries->all_have_subsets()) {
          throw Error(ErrorCode::kValidation, "CIRR protocol needs subset_ids on every query");
        }
        if (settings_.protocol == Protocol::kFashionIQ && !d.queries->all_have_categories()) {
          throw Error(ErrorCode::kValidation, "FashionIQ protocol needs a category on every query");
        }
      }
      return settings_.protocol;
    }
    bool subsets = true, categories = true;
    for (const auto& d : datasets_) {
      subsets = subsets && d.queries->all_have_subsets();
      categories = categories && d.queries->all_have_categories();
    }
    if (subsets) return Protocol::kCirr;
    if (categories) return Protocol::kFashionIQ;
    return Protocol::kPlain;
  }

  std::map<std::string, double> empty_metrics() const {
    std::vector<std::optional<std::size_t>> none(1);
    switch (protocol_) {
      case Protocol::kCirr:
        return cirr_metrics(none, none, ks_, settings_.subset_ks);
      case Protocol::kFashionIQ: {
        std::map<std::string, std::vector<std::optional<std::size_t>>> cats;
        for (const auto& d : datasets_) {
          for (const auto& q : d.queries->records()) cats[*q.category] = none;
        }
        return category_metrics(cats, ks_);
      }
      default: {
        std::map<std::string, double> m;
        for (std::size_t k : ks_) m[recall_metric(k)] = 0.0;
        return m;
      }
    }
  }

  /// outcomes[variant][query] for all datasets concatenated in config order.
  std::vector<std::vector<QueryOutcome>> sweep(double alpha, const std::vector<Variant>& variants,
                                               const RetrievalParams& p, bool keep_lists) const {
    std::vector<std::vector<QueryOutcome>> out(variants.size());
    for (const auto& d : datasets_) {
      const GalleryIndex& g = *d.gallery;
      const QuerySet& qs = *d.queries;
      for (std::size_t first = 0; first < qs.size(); first += kChunk) {
        const std::size_t n = std::min(kChunk, qs.size() - first);
        std::vector<FusedQuery> fused;
        fused.reserve(n);
        for (std::size_t i = 0; i < n; ++i) fused.push_back(fuse_query(qs, first + i, g, alpha));
        const std::vector<QueryScores> scores = score_queries(fused, g, settings_.threads);

        std::vector<std::vector<QueryOutcome>> chunk(variants.size(), std::vector<QueryOutcome>(n));
        parallel_for(n, settings_.threads, [&](std::size_t i) {
          const std::size_t qi = first + i;
          const QueryRecord& rec = qs.record(qi);
          const auto excluded = query_exclusions(p, g, qs.reference_index(qi));
          for (std::size_t v = 0; v < variants.size(); ++v) {
            QueryOutcome& o = chunk[v][i];
            o.dataset = d.name;
            o.query_id = rec.query_id;
            o.target_id = rec.target_id;
            o.category = rec.category.value_or("");
            o.list.query_id = rec.query_id;
            if (!scores[i].ok()) {
              o.error = scores[i].error;
              continue;
            }
            const BlendedScores b = blend(scores[i], variants[v].subset, variants[v].beta);
            const auto top = top_k_indices(b.final, g, p.k, excluded);
            for (std::size_t r = 0; r < top.size(); ++r) {
              if (top[r] == qs.target_index(qi)) o.target_rank = r + 1;
            }
            if (keep_lists) o.list = top_k(b.final, g, p.k, excluded, b.q2i, b.q2c, rec.query_id);
            if (rec.subset_ids) {
              o.subset_rank = subset_rank(b.final, g, qs.subset_indices(qi), qs.reference_index(qi),
                                          qs.target_index(qi));
            }
          }
        });
        for (std::size_t v = 0; v < variants.size(); ++v) {
          for (auto& o : chunk[v]) out[v].push_back(std::move(o));
        }
      }
    }
    return out;
  }

  EvalReport make_report(const std::vector<QueryOutcome>& outcomes, const RetrievalParams& p) const {
    EvalReport r;
    for (std::size_t i = 0; i < datasets_.size(); ++i) {
      if (i > 0) r.dataset += "+";
      r.dataset += datasets_[i].name;
    }
    r.params = p;
    r.num_queries = outcomes.size();
    std::vector<std::optional<std::size_t>> full, sub;
    std::map<std::string, std::vector<std::optional<std::size_t>>> cats;
    for (const auto& o : outcomes) {
      if (!o.error.empty()) ++r.num_failed;
      full.push_back(o.target_rank);
      sub.push_back(o.subset_rank);
      if (protocol_ == Protocol::kFashionIQ) cats[o.category].push_back(o.target_rank);
    }
    switch (protocol_) {
      case Protocol::kCirr:
        r.per_metric = cirr_metrics(full, sub, ks_, settings_.subset_ks);
        break;
      case Protocol::kFashionIQ:
        r.per_metric = category_metrics(cats, ks_);
        break;
      default:
        for (std::size_t k : ks_) r.per_metric[recall_metric(k)] = recall_from_ranks(full, k);
    }
    return r;
  }

  std::vector<Dataset> datasets_;
  EvalSettings settings_;
  Protocol protocol_ = Protocol::kPlain;
  bool exclude_reference_ = false;
  std::vector<std::size_t> ks_;
  std::size_t depth_ = 1;
  std::size_t captions_per_item_ = 0;
};

inline nlohmann::json to_json(const QueryOutcome& o) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : o.list.entries) {
    entries.push_back({{"item_id", e.item_id}, {"score", e.score}, {"q2i", e.q2i}, {"q2c", e.q2c}});
  }
  nlohmann::json j = {{"dataset", o.dataset},
                      {"query_id", o.query_id},
                      {"target_id", o.target_id},
                      {"target_rank", o.target_rank ? nlohmann::json(*o.target_rank) : nlohmann::json()},
                      {"entries", entries}};
  if (o.subset_rank) j["subset_rank"] = *o.subset_rank;
  if (!o.error.empty()) j["error"] = o.error;
  return j;
}

inline std::string ranklists_jsonl(std::span<const QueryOutcome> outcomes) {
  std::string out;
  for (const auto& o : outcomes) {
    out += to_json(o).dump();
    out += '\n';
  }
  return out;
}

inline nlohmann::json to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"caption_subset", r.caption_subset}, {"report", to_json(r.report)}});
  return j;
}

/// File name for a metric's heatmap; '/' in category metrics becomes '_'.
inline std::string heatmap_file_name(std::string metric) {
  for (char& c : metric) {
    if (c == '/') c = '_';
  }
  return "heatmap_" + metric + ".csv";
}

inline void write_benchmark(const BenchmarkResult& r, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string());
  detail::write_text(dir / "report.json", to_json(r.report).dump(2) + "\n");
  detail::write_text(dir / "ranklists.jsonl", ranklists_jsonl(r.outcomes));
}

inline void write_grid(const GridResult& g, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string());
  nlohmann::json all = nlohmann::json::array();
  for (const auto& h : g.heatmaps) {
    detail::write_text(dir / heatmap_file_name(h.metric), to_csv(h));
    all.push_back(to_json(h));
  }
  detail::write_text(dir / "heatmaps.json", all.dump(2) + "\n");
}

inline void write_ablation(const std::vector<AblationRow>& rows, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string());
  detail::write_text(dir / "ablation.json", to_json(rows).dump(2) + "\n");
}

}  // namespace wmcir
