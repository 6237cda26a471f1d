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

// wmcir: ingest | bench | grid | ablate-captions | serve

#include <csignal>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wmcir/service.hpp"
#include "wmcir/wmcir.hpp"

namespace {

struct CommonOptions {
  std::vector<std::string> galleries;
  std::vector<std::string> queries;
  std::string ks;
  std::string subset_ks = "1,2,3";
  std::string exclude = "auto";
  std::string protocol = "auto";
  std::size_t threads = 1;
};

void add_dataset_options(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--gallery", o.galleries, "Gallery manifest.json (repeatable)")->required();
  cmd->add_option("--queries", o.queries, "queries.jsonl paired with each --gallery")->required();
}

void add_eval_options(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--k", o.ks, "Recall cutoffs, e.g. 10,50 (default per protocol)");
  cmd->add_option("--subset-k", o.subset_ks, "Subset recall cutoffs")->capture_default_str();
  cmd->add_option("--exclude-reference", o.exclude, "Drop the reference item from candidates")
      ->check(CLI::IsMember({"auto", "on", "off"}))
      ->capture_default_str();
  cmd->add_option("--protocol", o.protocol, "Report layout")
      ->check(CLI::IsMember({"auto", "plain", "fashioniq", "cirr"}))
      ->capture_default_str();
  cmd->add_option("--threads", o.threads, "Worker threads (0 = all cores)")->capture_default_str();
}

std::vector<wmcir::Dataset> load_datasets(const CommonOptions& o) {
  if (o.galleries.size() != o.queries.size()) {
    throw wmcir::Error(wmcir::ErrorCode::kInvalidArgument,
                       "each --gallery needs exactly one matching --queries");
  }
  std::vector<wmcir::Dataset> out;
  for (std::size_t i = 0; i < o.galleries.size(); ++i) {
    out.push_back(wmcir::load_dataset(o.galleries[i], o.queries[i]));
  }
  return out;
}

wmcir::EvalSettings settings_from(const CommonOptions& o) {
  wmcir::EvalSettings s;
  if (!o.ks.empty()) s.ks = wmcir::parse_index_list(o.ks);
  s.subset_ks = wmcir::parse_index_list(o.subset_ks);
  s.exclude = o.exclude == "on"    ? wmcir::ExcludePolicy::kOn
              : o.exclude == "off" ? wmcir::ExcludePolicy::kOff
                                   : wmcir::ExcludePolicy::kAuto;
  s.protocol = o.protocol == "plain"       ? wmcir::Protocol::kPlain
               : o.protocol == "fashioniq" ? wmcir::Protocol::kFashionIQ
               : o.protocol == "cirr"      ? wmcir::Protocol::kCirr
                                           : wmcir::Protocol::kAuto;
  s.threads = o.threads;
  return s;
}

int cmd_ingest(const std::string& gallery_path, const std::vector<std::string>& query_paths,
               const std::string& out) {
  const wmcir::GalleryIndex g = wmcir::load_gallery(gallery_path);
  nlohmann::json summary = {{"dataset", g.metadata().dataset},
                            {"split", g.metadata().split},
                            {"embedder_id", g.metadata().embedder_id},
                            {"num_items", g.size()},
                            {"dim", g.dim()},
                            {"captions_per_item", g.captions_per_item()}};
  nlohmann::json qsum = nlohmann::json::array();
  std::size_t idx = 0;
  for (const auto& qp : query_paths) {
    const wmcir::QuerySet qs = wmcir::load_queries(qp, g);
    qsum.push_back({{"path", qp},
                    {"num_queries", qs.size()},
                    {"has_subsets", qs.all_have_subsets()},
                    {"has_categories", qs.all_have_categories()}});
    if (!out.empty()) {
      wmcir::write_queries(qs, wmcir::fs::path(out) / ("queries_" + std::to_string(idx)));
    }
    ++idx;
  }
  summary["queries"] = qsum;
  if (!out.empty()) summary["written"] = wmcir::write_gallery(g, wmcir::fs::path(out) / "gallery").string();
  std::cout << summary.dump(2) << "\n";
  return 0;
}

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free composed image retrieval engine"};
  app.require_subcommand(1);

  // ingest
  std::string ingest_gallery, ingest_out;
  std::vector<std::string> ingest_queries;
  auto* ingest = app.add_subcommand("ingest", "Validate a gallery (and query sets); optionally rewrite normalized copies");
  ingest->add_option("--gallery", ingest_gallery, "Gallery manifest.json")->required();
  ingest->add_option("--queries", ingest_queries, "queries.jsonl to validate against the gallery");
  ingest->add_option("--out", ingest_out, "Write normalized gallery/queries here");

  // bench
  CommonOptions bench_opts;
  double bench_alpha = wmcir::kDefaultAlpha, bench_beta = wmcir::kDefaultBeta;
  std::string bench_subset, bench_out;
  auto* bench = app.add_subcommand("bench", "Run one benchmark and write report.json + ranklists.jsonl");
  add_dataset_options(bench, bench_opts);
  add_eval_options(bench, bench_opts);
  bench->add_option("--alpha", bench_alpha, "Fusion weight of the text modifier")->capture_default_str();
  bench->add_option("--beta", bench_beta, "Weight of query-to-caption similarity")->capture_default_str();
  bench->add_option("--caption-subset", bench_subset, "1-based caption indices, e.g. 1,3 (default all)");
  bench->add_option("--out", bench_out, "Output directory")->required();

  // grid
  CommonOptions grid_opts;
  std::string grid_alpha = "0:1:0.05", grid_beta = "0:1:0.05", grid_subset, grid_out;
  auto* grid = app.add_subcommand("grid", "Alpha/beta grid search; writes heatmap_<metric>.csv");
  add_dataset_options(grid, grid_opts);
  add_eval_options(grid, grid_opts);
  grid->add_option("--alpha", grid_alpha, "Alpha grid: start:stop:step or a,b,c")->capture_default_str();
  grid->add_option("--beta", grid_beta, "Beta grid: start:stop:step or a,b,c")->capture_default_str();
  grid->add_option("--caption-subset", grid_subset, "1-based caption indices (default all)");
  grid->add_option("--out", grid_out, "Output directory")->required();

  // ablate-captions
  CommonOptions abl_opts;
  double abl_alpha = wmcir::kDefaultAlpha, abl_beta = wmcir::kDefaultBeta;
  std::vector<std::string> abl_subsets;
  std::string abl_out;
  auto* ablate = app.add_subcommand("ablate-captions", "One report per caption subset; writes ablation.json");
  add_dataset_options(ablate, abl_opts);
  add_eval_options(ablate, abl_opts);
  ablate->add_option("--alpha", abl_alpha)->capture_default_str();
  ablate->add_option("--beta", abl_beta)->capture_default_str();
  ablate->add_option("--caption-subset", abl_subsets,
                     "Subset to evaluate, repeatable (default every non-empty subset)");
  ablate->add_option("--out", abl_out, "Output directory")->required();

  // serve
  CommonOptions serve_opts;
  std::string listen = "127.0.0.1:8080", ui_dir;
  std::size_t cell_budget = 441;
  auto* serve = app.add_subcommand("serve", "Serve the HTTP/JSON API (and UI bundle)");
  add_dataset_options(serve, serve_opts);
  add_eval_options(serve, serve_opts);
  serve->add_option("--listen", listen, "host:port")->capture_default_str();
  serve->add_option("--ui-dir", ui_dir, "Static UI bundle served under /");
  serve->add_option("--heatmap-cell-budget", cell_budget)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) return cmd_ingest(ingest_gallery, ingest_queries, ingest_out);

    if (*bench) {
      wmcir::Experiment exp(load_datasets(bench_opts), settings_from(bench_opts));
      wmcir::RetrievalParams p;
      p.alpha = bench_alpha;
      p.beta = bench_beta;
      p.caption_subset = wmcir::parse_index_list(bench_subset);
      const auto result = exp.run(p);
      wmcir::write_benchmark(result, bench_out);
      std::cout << wmcir::render_table(result.report);
      return 0;
    }

    if (*grid) {
      wmcir::Experiment exp(load_datasets(grid_opts), settings_from(grid_opts));
      wmcir::RetrievalParams p;
      p.caption_subset = wmcir::parse_index_list(grid_subset);
      const auto alphas = wmcir::parse_grid(grid_alpha);
      const auto betas = wmcir::parse_grid(grid_beta);
      const auto result = exp.grid(alphas, betas, p);
      wmcir::write_grid(result, grid_out);
      for (const auto& h : result.heatmaps) std::cout << wmcir::render_heatmap(h) << "\n";
      return 0;
    }

    if (*ablate) {
      wmcir::Experiment exp(load_datasets(abl_opts), settings_from(abl_opts));
      wmcir::RetrievalParams p;
      p.alpha = abl_alpha;
      p.beta = abl_beta;
      std::vector<std::vector<std::size_t>> subsets;
      for (const auto& s : abl_subsets) subsets.push_back(wmcir::parse_index_list(s));
      const auto rows = exp.ablate_captions(subsets, p);
      wmcir::write_ablation(rows, abl_out);
      for (const auto& r : rows) {
        std::cout << "captions {";
        for (std::size_t i = 0; i < r.caption_subset.size(); ++i) {
          std::cout << (i ? "," : "") << r.caption_subset[i];
        }
        std::cout << "}\n" << wmcir::render_table(r.report) << "\n";
      }
      return 0;
    }

    if (*serve) {
      wmcir::ServiceConfig cfg;
      cfg.threads = serve_opts.threads;
      cfg.heatmap_cell_budget = cell_budget;
      cfg.ui_dir = ui_dir;
      cfg.eval = settings_from(serve_opts);
      cfg.eval.threads = serve_opts.threads;
      wmcir::Service service(load_datasets(serve_opts), cfg);
      const auto colon = listen.rfind(':');
      if (colon == std::string::npos) {
        throw wmcir::Error(wmcir::ErrorCode::kInvalidArgument, "--listen must be host:port");
      }
      const std::string host = listen.substr(0, colon);
      const int port = std::stoi(listen.substr(colon + 1));
      httplib::Server server;
      service.mount(server);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      if (!server.bind_to_port(host, port)) {
        std::cerr << "error: cannot bind " << listen << "\n";
        return 3;
      }
      std::cerr << "listening on " << listen << "\n";
      server.listen_after_bind();
      return 0;
    }
  } catch (const wmcir::Error& e) {
    std::cerr << "error [" << wmcir::to_string(e.code()) << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
