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

// Read-only HTTP/JSON service over loaded datasets.
//
//   GET  /healthz
//   GET  /v1/datasets
//   GET  /v1/queries?dataset=&offset=&limit=
//   POST /v1/retrieve
//   GET  /v1/heatmap?dataset=&metric=&alphas=&betas=&caption_subset=&exclude_reference=
//   GET  /v1/ablation?dataset=&alpha=&beta=&subsets=&exclude_reference=
//
// Errors are {"error": {"code": "...", "message": "..."}} with a 4xx/5xx
// status. Handlers are plain member functions returning a Response so they
// can be exercised without a socket; mount() wires them to an
// httplib::Server.

#pragma once

#include <chrono>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "wmcir/embedding_store.hpp"
#include "wmcir/error.hpp"
#include "wmcir/eval.hpp"
#include "wmcir/experiment.hpp"
#include "wmcir/similarity.hpp"

namespace wmcir {

struct ServiceConfig {
  /// Workers used inside a single request's scoring.
  std::size_t threads = 1;
  /// Largest alpha x beta grid a heatmap request may ask for.
  std::size_t heatmap_cell_budget = 441;
  std::string ui_dir;
  EvalSettings eval;
};

struct Response {
  int status = 200;
  std::string body;
  bool cache_hit = false;
};

using QueryParams = std::map<std::string, std::string>;

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kValidation:
    case ErrorCode::kFormat: return 400;
    case ErrorCode::kDegenerateQuery: return 422;
    case ErrorCode::kIo: return 500;
  }
  return 500;
}

inline Response error_response(ErrorCode code, const std::string& message) {
  nlohmann::json j = {{"error", {{"code", std::string(to_string(code))}, {"message", message}}}};
  return {http_status(code), j.dump()};
}

/// Parses "1,2,3" into caption indices.
inline std::vector<std::size_t> parse_index_list(std::string_view s) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t end = s.find(',', pos);
    if (end == std::string_view::npos) end = s.size();
    const std::string_view tok = s.substr(pos, end - pos);
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size()) {
      throw Error(ErrorCode::kInvalidArgument, "bad index list '" + std::string(s) + "'");
    }
    out.push_back(v);
    pos = end + 1;
  }
  return out;
}

inline std::optional<bool> parse_on_off(std::string_view s) {
  if (s.empty() || s == "auto") return std::nullopt;
  if (s == "on" || s == "true" || s == "1") return true;
  if (s == "off" || s == "false" || s == "0") return false;
  throw Error(ErrorCode::kInvalidArgument, "expected on/off, got '" + std::string(s) + "'");
}

class Service {
 public:
  Service(std::vector<Dataset> datasets, ServiceConfig config) : config_(std::move(config)) {
    if (datasets.empty()) throw Error(ErrorCode::kInvalidArgument, "service needs a dataset");
    for (auto& d : datasets) {
      auto entry = std::make_unique<Entry>();
      entry->experiment = std::make_unique<Experiment>(std::vector<Dataset>{d}, config_.eval);
      entry->dataset = std::move(d);
      for (const auto& e : entries_) {
        if (e->dataset.name == entry->dataset.name) {
          throw Error(ErrorCode::kValidation, "dataset '" + entry->dataset.name + "' loaded twice");
        }
      }
      entries_.push_back(std::move(entry));
    }
  }

  Response healthz() const { return {200, R"({"status":"ok"})"}; }

  Response datasets() const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : entries_) {
      const GalleryIndex& g = *e->dataset.gallery;
      list.push_back({{"id", e->dataset.name},
                      {"dataset", g.metadata().dataset},
                      {"split", g.metadata().split},
                      {"N", g.size()},
                      {"R", g.captions_per_item()},
                      {"dim", g.dim()},
                      {"embedder_id", g.metadata().embedder_id},
                      {"num_queries", e->dataset.queries->size()},
                      {"metrics", e->experiment->metric_names()},
                      {"exclude_reference_default", e->experiment->exclude_reference()}});
    }
    return {200, nlohmann::json{{"datasets", list}}.dump()};
  }

  Response queries(const QueryParams& params) const {
    return guarded([&] {
      const Entry& e = find(param(params, "dataset"));
      const QuerySet& qs = *e.dataset.queries;
      const std::size_t offset = param_size(params, "offset", 0);
      const std::size_t limit = std::min<std::size_t>(param_size(params, "limit", 50), 1000);
      nlohmann::json list = nlohmann::json::array();
      for (std::size_t i = offset; i < qs.size() && i < offset + limit; ++i) {
        nlohmann::json q = to_json(qs.record(i));
        if (auto url = image_url(*e.dataset.gallery, qs.reference_index(i))) {
          q["reference_image_url"] = *url;
        }
        list.push_back(std::move(q));
      }
      return Response{200, nlohmann::json{{"dataset", e.dataset.name},
                                          {"total", qs.size()},
                                          {"offset", offset},
                                          {"limit", limit},
                                          {"queries", list}}
                               .dump()};
    });
  }

  Response retrieve(const std::string& body) const {
    return guarded([&] {
      const auto start = std::chrono::steady_clock::now();
      const nlohmann::json req = detail::parse_json(body, "request body");
      if (!req.is_object()) throw Error(ErrorCode::kFormat, "request body must be a JSON object");
      const Entry& e = find(req.value("dataset", std::string()));
      const GalleryIndex& g = *e.dataset.gallery;
      const QuerySet& qs = *e.dataset.queries;

      RetrievalParams p;
      p.alpha = req.value("alpha", kDefaultAlpha);
      p.beta = req.value("beta", kDefaultBeta);
      p.k = req.value("k", std::size_t{10});
      p.caption_subset = req.value("caption_subset", std::vector<std::size_t>{});
      p.exclude_ids = req.value("exclude_ids", std::vector<std::string>{});
      p.exclude_reference = e.experiment->exclude_reference();
      if (auto it = req.find("exclude_reference"); it != req.end() && !it->is_null()) {
        p.exclude_reference = it->get<bool>();
      }
      p.caption_subset = resolve_caption_subset(p.caption_subset, g.captions_per_item());
      validate(p, g.captions_per_item());

      const bool by_query = req.contains("query_id");
      const bool by_vector = req.contains("reference_id") || req.contains("modifier_vector");
      if (by_query == by_vector) {
        throw Error(ErrorCode::kInvalidArgument,
                    "give exactly one of query_id or reference_id + modifier_vector");
      }
      nlohmann::json out;
      out["dataset"] = e.dataset.name;
      RankedList list;
      std::optional<std::string> target;
      if (by_query) {
        const std::string qid = req.at("query_id").get<std::string>();
        auto qi = qs.find(qid);
        if (!qi) throw Error(ErrorCode::kNotFound, "query '" + qid + "' not in " + e.dataset.name);
        list = wmcir::retrieve(qs.record(*qi), qs, g, p, config_.threads);
        target = qs.record(*qi).target_id;
        out["query_id"] = qid;
        out["target_id"] = *target;
      } else {
        if (!req.contains("reference_id") || !req.contains("modifier_vector")) {
          throw Error(ErrorCode::kInvalidArgument,
                      "vector form needs both reference_id and modifier_vector");
        }
        const std::string ref = req.at("reference_id").get<std::string>();
        const auto raw = req.at("modifier_vector").get<std::vector<float>>();
        if (raw.size() != g.dim()) {
          throw Error(ErrorCode::kInvalidArgument, "modifier_vector has " + std::to_string(raw.size()) +
                                                       " values, gallery dim is " +
                                                       std::to_string(g.dim()));
        }
        const EmbeddingMatrix m = normalize_rows(raw, g.dim());
        list = retrieve_vector(g.index_of(ref), m.row(0), g, p, {}, config_.threads);
        out["reference_id"] = ref;
      }

      nlohmann::json entries = nlohmann::json::array();
      std::optional<std::size_t> target_rank;
      for (std::size_t r = 0; r < list.entries.size(); ++r) {
        const RankedEntry& en = list.entries[r];
        nlohmann::json j = {{"rank", r + 1},
                            {"item_id", en.item_id},
                            {"score", en.score},
                            {"q2i", en.q2i},
                            {"q2c", en.q2c}};
        const std::size_t idx = g.index_of(en.item_id);
        if (auto url = image_url(g, idx)) j["image_url"] = *url;
        if (!g.metadata().caption_texts.empty()) j["captions"] = g.metadata().caption_texts[idx];
        if (target) {
          j["is_target"] = en.item_id == *target;
          if (en.item_id == *target) target_rank = r + 1;
        }
        entries.push_back(std::move(j));
      }
      out["params"] = to_json(p);
      out["entries"] = std::move(entries);
      if (target) out["target_rank"] = target_rank ? nlohmann::json(*target_rank) : nlohmann::json();
      out["timing_ms"] =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      return Response{200, out.dump()};
    });
  }

  Response heatmap(const QueryParams& params) const {
    return guarded([&] {
      const Entry& e = find(param(params, "dataset"));
      const std::string metric = param(params, "metric");
      if (metric.empty()) throw Error(ErrorCode::kInvalidArgument, "metric is required");
      const auto names = e.experiment->metric_names();
      if (std::find(names.begin(), names.end(), metric) == names.end()) {
        throw Error(ErrorCode::kInvalidArgument, "unknown metric '" + metric + "'");
      }
      const auto alphas = parse_grid(param_or(params, "alphas", "0:1:0.05"));
      const auto betas = parse_grid(param_or(params, "betas", "0:1:0.05"));
      if (alphas.size() * betas.size() > config_.heatmap_cell_budget) {
        throw Error(ErrorCode::kInvalidArgument,
                    "grid of " + std::to_string(alphas.size() * betas.size()) +
                        " cells exceeds the budget of " +
                        std::to_string(config_.heatmap_cell_budget));
      }
      RetrievalParams base;
      base.caption_subset = resolve_caption_subset(
          parse_index_list(param(params, "caption_subset")), e.dataset.gallery->captions_per_item());
      const auto exclusion = parse_on_off(param(params, "exclude_reference"));

      std::string key = e.dataset.name + "|";
      for (double a : alphas) key += format_shortest(a) + ",";
      key += "|";
      for (double b : betas) key += format_shortest(b) + ",";
      key += "|";
      for (std::size_t c : base.caption_subset) key += std::to_string(c) + ",";
      key += "|" + std::string(exclusion ? (*exclusion ? "on" : "off") : "auto");

      std::shared_future<std::shared_ptr<const GridResult>> fut;
      bool hit = true;
      std::promise<std::shared_ptr<const GridResult>> promise;
      {
        std::lock_guard lock(cache_mu_);
        auto it = heatmap_cache_.find(key);
        if (it == heatmap_cache_.end()) {
          hit = false;
          fut = promise.get_future().share();
          heatmap_cache_.emplace(key, fut);
        } else {
          fut = it->second;
        }
      }
      if (!hit) {
        try {
          EvalSettings s = config_.eval;
          if (exclusion) s.exclude = *exclusion ? ExcludePolicy::kOn : ExcludePolicy::kOff;
          s.threads = config_.threads;
          Experiment exp({e.dataset}, s);
          promise.set_value(std::make_shared<const GridResult>(exp.grid(alphas, betas, base)));
        } catch (...) {
          {
            std::lock_guard lock(cache_mu_);
            heatmap_cache_.erase(key);
          }
          promise.set_exception(std::current_exception());
        }
      }
      const auto grid = fut.get();
      for (const auto& h : grid->heatmaps) {
        if (h.metric == metric) {
          nlohmann::json j = to_json(h);
          j["dataset"] = e.dataset.name;
          j["caption_subset"] = base.caption_subset;
          return Response{200, j.dump(), hit};
        }
      }
      throw Error(ErrorCode::kInvalidArgument, "unknown metric '" + metric + "'");
    });
  }

  Response ablation(const QueryParams& params) const {
    return guarded([&] {
      const Entry& e = find(param(params, "dataset"));
      RetrievalParams base;
      if (auto a = param(params, "alpha"); !a.empty()) base.alpha = parse_grid(a).at(0);
      if (auto b = param(params, "beta"); !b.empty()) base.beta = parse_grid(b).at(0);
      std::vector<std::vector<std::size_t>> subsets;
      const std::string spec = param(params, "subsets");
      std::size_t pos = 0;
      while (pos < spec.size()) {
        std::size_t end = spec.find('|', pos);
        if (end == std::string::npos) end = spec.size();
        subsets.push_back(parse_index_list(std::string_view(spec).substr(pos, end - pos)));
        pos = end + 1;
      }
      EvalSettings s = config_.eval;
      if (auto ex = parse_on_off(param(params, "exclude_reference"))) {
        s.exclude = *ex ? ExcludePolicy::kOn : ExcludePolicy::kOff;
      }
      s.threads = config_.threads;
      Experiment exp({e.dataset}, s);
      const auto rows = exp.ablate_captions(subsets, base);
      return Response{200, nlohmann::json{{"dataset", e.dataset.name}, {"rows", to_json(rows)}}.dump()};
    });
  }

  /// Registers every endpoint (and the UI bundle, if configured) on `server`.
  void mount(httplib::Server& server) const {
    // SO_REUSEADDR only: a second server on a taken port must fail to bind.
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    auto send = [](httplib::Response& res, const Response& r) {
      res.status = r.status;
      if (r.cache_hit) res.set_header("X-Cache", "hit");
      res.set_content(r.body, "application/json");
    };
    auto flat = [](const httplib::Request& req) {
      QueryParams p;
      for (const auto& [k, v] : req.params) p[k] = v;
      return p;
    };
    server.Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) {
      send(res, healthz());
    });
    server.Get("/v1/datasets", [this, send](const httplib::Request&, httplib::Response& res) {
      send(res, datasets());
    });
    server.Get("/v1/queries", [this, send, flat](const httplib::Request& req, httplib::Response& res) {
      send(res, queries(flat(req)));
    });
    server.Post("/v1/retrieve", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, retrieve(req.body));
    });
    server.Get("/v1/heatmap", [this, send, flat](const httplib::Request& req, httplib::Response& res) {
      send(res, heatmap(flat(req)));
    });
    server.Get("/v1/ablation", [this, send, flat](const httplib::Request& req, httplib::Response& res) {
      send(res, ablation(flat(req)));
    });
    if (!config_.ui_dir.empty()) server.set_mount_point("/", config_.ui_dir);
  }

 private:
  struct Entry {
    Dataset dataset;
    std::unique_ptr<Experiment> experiment;
  };

  template <class Fn>
  static Response guarded(Fn&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      return error_response(e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      return error_response(ErrorCode::kFormat, e.what());
    } catch (const std::exception& e) {
      return error_response(ErrorCode::kInvalidArgument, e.what());
    }
  }

  static std::string param(const QueryParams& p, const char* key) {
    auto it = p.find(key);
    return it == p.end() ? std::string() : it->second;
  }
  static std::string param_or(const QueryParams& p, const char* key, const char* fallback) {
    std::string v = param(p, key);
    return v.empty() ? fallback : v;
  }
  static std::size_t param_size(const QueryParams& p, const char* key, std::size_t fallback) {
    const std::string v = param(p, key);
    if (v.empty()) return fallback;
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
      throw Error(ErrorCode::kInvalidArgument, std::string(key) + " must be a non-negative integer");
    }
    return out;
  }

  static std::optional<std::string> image_url(const GalleryIndex& g, std::size_t i) {
    if (g.metadata().item_image_urls.empty()) return std::nullopt;
    return g.metadata().item_image_urls[i];
  }

  /// Exact id match, or the bare dataset name when it is unambiguous. An
  /// empty name selects the only loaded dataset.
  const Entry& find(const std::string& name) const {
    if (name.empty()) {
      if (entries_.size() == 1) return *entries_.front();
      throw Error(ErrorCode::kInvalidArgument, "dataset parameter is required");
    }
    const Entry* match = nullptr;
    for (const auto& e : entries_) {
      if (e->dataset.name == name) return *e;
      if (e->dataset.gallery->metadata().dataset == name) {
        if (match) throw Error(ErrorCode::kInvalidArgument, "dataset '" + name + "' is ambiguous");
        match = e.get();
      }
    }
    if (!match) throw Error(ErrorCode::kNotFound, "unknown dataset '" + name + "'");
    return *match;
  }

  ServiceConfig config_;
  std::vector<std::unique_ptr<Entry>> entries_;
  mutable std::mutex cache_mu_;
  mutable std::map<std::string, std::shared_future<std::shared_ptr<const GridResult>>> heatmap_cache_;
};

}  // namespace wmcir
