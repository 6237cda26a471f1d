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

#include <gtest/gtest.h>

#include <cstdlib>
#include <future>
#include <thread>

#include "test_support.hpp"
#include "wmcir/service.hpp"

namespace wmcir {
namespace {

using nlohmann::json;

Dataset golden_cirr() {
  return load_dataset(testing::golden() / "gallery" / "manifest.json",
                      testing::golden() / "queries_cirr" / "queries.jsonl");
}

json without_timing(json j) {
  j.erase("timing_ms");
  return j;
}

std::vector<std::string> entry_ids(const json& j) {
  std::vector<std::string> out;
  for (const auto& e : j["entries"]) out.push_back(e["item_id"]);
  return out;
}

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { service_ = new Service({golden_cirr()}, ServiceConfig{}); }
  static void TearDownTestSuite() {
    delete service_;
    service_ = nullptr;
  }
  static Service* service_;
};
Service* ServiceTest::service_ = nullptr;

TEST_F(ServiceTest, HealthAndDatasets) {
  EXPECT_EQ(service_->healthz().status, 200);
  const Response r = service_->datasets();
  ASSERT_EQ(r.status, 200);
  const json d = json::parse(r.body)["datasets"].at(0);
  EXPECT_EQ(d["id"], "golden/val");
  EXPECT_EQ(d["dataset"], "golden");
  EXPECT_EQ(d["split"], "val");
  EXPECT_EQ(d["N"], 200);
  EXPECT_EQ(d["R"], 3);
  EXPECT_EQ(d["dim"], 16);
  EXPECT_EQ(d["embedder_id"], "synthetic-gaussian-d16");
  EXPECT_EQ(d["exclude_reference_default"], true);
}

TEST_F(ServiceTest, QueriesPaging) {
  const json j = json::parse(service_->queries({{"dataset", "golden"}, {"offset", "5"}, {"limit", "4"}}).body);
  EXPECT_EQ(j["total"], 20);
  ASSERT_EQ(j["queries"].size(), 4u);
  EXPECT_EQ(j["queries"][0]["query_id"], "q05");
  EXPECT_TRUE(j["queries"][0].contains("subset_ids"));
  EXPECT_EQ(service_->queries({{"offset", "x"}}).status, 400);
}

TEST_F(ServiceTest, RetrieveByQueryId) {
  const Response r = service_->retrieve(R"({"query_id":"q03","alpha":0.8,"beta":0.1,"k":10})");
  ASSERT_EQ(r.status, 200) << r.body;
  const json j = json::parse(r.body);
  ASSERT_EQ(j["entries"].size(), 10u);
  for (std::size_t i = 1; i < 10; ++i) {
    EXPECT_GE(j["entries"][i - 1]["score"].get<double>(), j["entries"][i]["score"].get<double>());
    EXPECT_EQ(j["entries"][i]["rank"], i + 1);
  }
  EXPECT_TRUE(j["entries"][0].contains("captions"));
  EXPECT_TRUE(j["entries"][0].contains("is_target"));
  EXPECT_TRUE(j.contains("timing_ms"));
  EXPECT_EQ(j["params"]["alpha"], 0.8);
  EXPECT_EQ(j["params"]["exclude_reference"], true);
  // Reproducible apart from timing.
  const json again = json::parse(service_->retrieve(R"({"query_id":"q03","alpha":0.8,"beta":0.1,"k":10})").body);
  EXPECT_EQ(without_timing(j), without_timing(again));
}

TEST_F(ServiceTest, BetaBoundariesMatchComponentRankings) {
  const Dataset d = golden_cirr();
  const GalleryIndex& g = *d.gallery;
  const std::size_t qi = *d.queries->find("q07");
  const auto scores = score_query(fuse_query(*d.queries, qi, g, 0.8), g);
  const std::vector<std::size_t> all{1, 2, 3};
  const auto ex = std::vector<std::uint32_t>{static_cast<std::uint32_t>(d.queries->reference_index(qi))};
  const auto q2i = testing::ids_of(top_k(scores.q2i, g, 25, ex));
  const auto q2c = testing::ids_of(top_k(caption_means(scores, all), g, 25, ex));
  const json b0 = json::parse(service_->retrieve(R"({"query_id":"q07","beta":0,"k":25})").body);
  const json b1 = json::parse(service_->retrieve(R"({"query_id":"q07","beta":1,"k":25})").body);
  EXPECT_EQ(entry_ids(b0), q2i);
  EXPECT_EQ(entry_ids(b1), q2c);
  for (const auto& e : b0["entries"]) EXPECT_EQ(e["score"], e["q2i"]);
  for (const auto& e : b1["entries"]) EXPECT_EQ(e["score"], e["q2c"]);
}

TEST_F(ServiceTest, RetrieveByVector) {
  const Dataset d = golden_cirr();
  const std::size_t qi = 2;
  const auto mod = d.queries->modifier(qi);
  json req = {{"reference_id", d.queries->record(qi).reference_id},
              {"modifier_vector", std::vector<float>(mod.begin(), mod.end())},
              {"k", 15}};
  const json by_vec = json::parse(service_->retrieve(req.dump()).body);
  const json by_id = json::parse(
      service_->retrieve(json{{"query_id", d.queries->record(qi).query_id}, {"k", 15}}.dump()).body);
  EXPECT_EQ(entry_ids(by_vec), entry_ids(by_id));
  EXPECT_FALSE(by_vec["entries"][0].contains("is_target"));
}

TEST_F(ServiceTest, RetrieveErrors) {
  auto code_of = [](const Response& r) { return json::parse(r.body)["error"]["code"].get<std::string>(); };
  EXPECT_EQ(service_->retrieve("{not json").status, 400);
  EXPECT_EQ(service_->retrieve(R"({"query_id":"nope"})").status, 404);
  EXPECT_EQ(service_->retrieve(R"({"query_id":"q01","alpha":2})").status, 400);
  EXPECT_EQ(service_->retrieve(R"({"query_id":"q01","caption_subset":[4]})").status, 400);
  EXPECT_EQ(service_->retrieve(R"({"query_id":"q01","reference_id":"img001"})").status, 400);
  EXPECT_EQ(service_->retrieve(R"({"reference_id":"img001","modifier_vector":[1,2]})").status, 400);
  const Response unknown = service_->retrieve(R"({"dataset":"fashioniq","query_id":"q01"})");
  EXPECT_EQ(unknown.status, 404);
  EXPECT_EQ(code_of(unknown), "not_found");
  EXPECT_NE(json::parse(unknown.body)["error"]["message"].get<std::string>().find("fashioniq"),
            std::string::npos);
}

TEST_F(ServiceTest, DegenerateVectorIs422) {
  const Dataset d = golden_cirr();
  const auto ref = d.gallery->image(0);
  std::vector<float> neg;
  for (float x : ref) neg.push_back(-x);
  const json req = {{"reference_id", d.gallery->id(0)}, {"modifier_vector", neg}, {"alpha", 0.5}};
  const Response r = service_->retrieve(req.dump());
  EXPECT_EQ(r.status, 422) << r.body;
}

TEST_F(ServiceTest, HeatmapCachedAndErrors) {
  const QueryParams p{{"dataset", "golden/val"}, {"metric", "R@10"}, {"alphas", "0.5,1"}, {"betas", "0,0.5"}};
  const Response first = service_->heatmap(p);
  ASSERT_EQ(first.status, 200) << first.body;
  EXPECT_FALSE(first.cache_hit);
  const Response second = service_->heatmap(p);
  EXPECT_TRUE(second.cache_hit);
  EXPECT_EQ(first.body, second.body);
  // Another metric of the same grid is served from the same cache entry.
  QueryParams other = p;
  other["metric"] = "Rsubset@1";
  EXPECT_TRUE(service_->heatmap(other).cache_hit);

  EXPECT_EQ(service_->heatmap({{"dataset", "nope"}, {"metric", "R@10"}}).status, 404);
  EXPECT_EQ(service_->heatmap({{"metric", "R@7"}}).status, 400);
  EXPECT_EQ(service_->heatmap({{"metric", "R@10"}, {"alphas", "0:1:0.01"}}).status, 400);
}

TEST_F(ServiceTest, HeatmapEqualsCliGrid) {
  testing::TempDir tmp;
  const std::string cmd = std::string(WMCIR_CLI) + " grid --gallery " +
                          (testing::golden() / "gallery" / "manifest.json").string() + " --queries " +
                          (testing::golden() / "queries_cirr" / "queries.jsonl").string() +
                          " --alpha 0:1:0.25 --beta 0,0.1,0.3 --out " + (tmp / "g").string() + " > /dev/null";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  const json cli = json::parse(testing::read_file(tmp / "g" / "heatmaps.json"));
  for (const auto& h : cli) {
    const Response r = service_->heatmap(
        {{"metric", h["metric"]}, {"alphas", "0:1:0.25"}, {"betas", "0,0.1,0.3"}});
    ASSERT_EQ(r.status, 200) << r.body;
    const json s = json::parse(r.body);
    EXPECT_EQ(s["cells"], h["cells"]) << h["metric"];
    EXPECT_EQ(s["alphas"], h["alphas"]);
    EXPECT_EQ(s["betas"], h["betas"]);
  }
}

TEST_F(ServiceTest, Ablation) {
  const Response r = service_->ablation({{"subsets", "1|2,3|1,2,3"}});
  ASSERT_EQ(r.status, 200) << r.body;
  const json rows = json::parse(r.body)["rows"];
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1]["caption_subset"], json::array({2, 3}));
  const json all = json::parse(service_->ablation({}).body)["rows"];
  EXPECT_EQ(all.size(), 7u);
  EXPECT_EQ(service_->ablation({{"subsets", "9"}}).status, 400);
}

TEST_F(ServiceTest, LiveServerConcurrentEqualsSerial) {
  httplib::Server server;
  service_->mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  auto health = client.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  auto ds = client.Get("/v1/datasets");
  ASSERT_TRUE(ds);
  EXPECT_EQ(json::parse(ds->body)["datasets"][0]["N"], 200);

  std::vector<std::string> bodies;
  for (int i = 0; i < 20; ++i) {
    char buf[128];
    std::snprintf(buf, sizeof buf, R"({"query_id":"q%02d","alpha":%.2f,"beta":%.2f,"k":20})", i,
                  0.05 * i, 1.0 - 0.05 * i);
    bodies.push_back(buf);
  }
  std::vector<json> serial;
  for (const auto& b : bodies) {
    auto r = client.Post("/v1/retrieve", b, "application/json");
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200);
    serial.push_back(without_timing(json::parse(r->body)));
  }
  std::vector<std::future<json>> futs;
  for (int rep = 0; rep < 3; ++rep) {
    for (const auto& b : bodies) {
      futs.push_back(std::async(std::launch::async, [&, b] {
        httplib::Client c("127.0.0.1", port);
        auto r = c.Post("/v1/retrieve", b, "application/json");
        if (!r) return json{{"client_error", httplib::to_string(r.error())}};
        return without_timing(json::parse(r->body));
      }));
    }
  }
  for (std::size_t i = 0; i < futs.size(); ++i) EXPECT_EQ(futs[i].get(), serial[i % bodies.size()]);

  // Concurrent identical heatmap requests share one computation.
  std::vector<std::future<std::string>> hm;
  for (int i = 0; i < 6; ++i) {
    hm.push_back(std::async(std::launch::async, [&] {
      httplib::Client c("127.0.0.1", port);
      auto r = c.Get("/v1/heatmap?metric=R@5&alphas=0.2,0.4,0.6&betas=0.2,0.4");
      return r && r->status == 200 ? r->body : std::string();
    }));
  }
  std::string first = hm[0].get();
  EXPECT_FALSE(first.empty());
  for (std::size_t i = 1; i < hm.size(); ++i) EXPECT_EQ(hm[i].get(), first);
  auto cached = client.Get("/v1/heatmap?metric=R@5&alphas=0.2,0.4,0.6&betas=0.2,0.4");
  ASSERT_TRUE(cached);
  EXPECT_EQ(cached->get_header_value("X-Cache"), "hit");

  auto missing = client.Get("/v1/heatmap?dataset=none&metric=R@5");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);

  server.stop();
  th.join();
}

TEST(ServiceConstruction, Errors) {
  EXPECT_THROW(Service({}, ServiceConfig{}), Error);
  EXPECT_THROW(Service({golden_cirr(), golden_cirr()}, ServiceConfig{}), Error);
  EXPECT_EQ(http_status(ErrorCode::kNotFound), 404);
  EXPECT_EQ(http_status(ErrorCode::kDegenerateQuery), 422);
  EXPECT_EQ(parse_index_list("1,2,3"), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_TRUE(parse_index_list("").empty());
  EXPECT_THROW(parse_index_list("1,x"), Error);
  EXPECT_EQ(parse_on_off("on"), true);
  EXPECT_EQ(parse_on_off("auto"), std::nullopt);
}

}  // namespace
}  // namespace wmcir
