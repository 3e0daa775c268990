#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

#include "devstyle/embeddings.hpp"
#include "devstyle/io.hpp"
#include "devstyle/tsne.hpp"
#include "doctest.h"
#include "httplib.h"
#include "json.hpp"

using namespace devstyle;
namespace fs = std::filesystem;

namespace {

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

const std::vector<DeviceProfile>& bank6() {
  static const auto b = make_parametric_device_bank(1, 6);
  return b;
}

// Scripted stand-in for the embedding service.
struct MockService {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> requests{0};
  nlohmann::json last_request;
  std::function<void(int, httplib::Response&)> script;

  MockService() {
    server.Post("/v1/embed", [this](const httplib::Request& req, httplib::Response& res) {
      const int n = ++requests;
      last_request = nlohmann::json::parse(req.body);
      script(n, res);
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~MockService() {
    server.stop();
    thread.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1"; }
};

void reply_embedding(httplib::Response& res, std::size_t n, float value) {
  nlohmann::json j;
  j["embedding"] = std::vector<float>(n, value);
  j["model"] = "mock";
  res.set_content(j.dump(), "application/json");
}

VlmOptions fast_retries() {
  VlmOptions o;
  o.initial_backoff = std::chrono::milliseconds(1);
  o.timeout = std::chrono::seconds(5);
  return o;
}

}  // namespace

TEST_CASE("frc encoder") {
  const auto& d = bank6()[0];
  const auto target = harman_target();
  const auto a = extract_embedding_frc_encoder(d.frc, target, d.name, 3, 17);
  const auto b = extract_embedding_frc_encoder(d.frc, target, d.name, 3, 17);
  CHECK(a.vector == b.vector);
  CHECK(a.vector.size() == 4096);
  double n2 = 0;
  for (float v : a.vector) n2 += double(v) * v;
  CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-6));
  a.validate();

  const auto c = extract_embedding_frc_encoder(d.frc, target, d.name, 4, 17);
  CHECK(a.vector != c.vector);
  CHECK(cosine(a.vector, c.vector) > 0.9);

  auto coarse = resample_frc(d.frc, standard_grid(240));
  CHECK_THROWS_WITH_AS(extract_embedding_frc_encoder(coarse, target, d.name, 0, 1), doctest::Contains("480"),
                       std::invalid_argument);
  CHECK(frc_features(d.frc, target).size() == 991);

  SUBCASE("within-device similarity exceeds cross-device similarity") {
    std::vector<std::vector<DeviceEmbedding>> by_dev;
    for (const auto& dev : bank6()) {
      by_dev.emplace_back();
      for (int i = 0; i < 30; ++i) by_dev.back().push_back(extract_embedding_frc_encoder(dev.frc, target, dev.name, i, 5));
    }
    double within = 0, cross = 0;
    long nw = 0, nc = 0;
    for (std::size_t p = 0; p < by_dev.size(); ++p)
      for (std::size_t q = p; q < by_dev.size(); ++q)
        for (std::size_t i = 0; i < 30; ++i)
          for (std::size_t j = 0; j < 30; ++j) {
            if (p == q && j <= i) continue;
            const double s = cosine(by_dev[p][i].vector, by_dev[q][j].vector);
            (p == q ? within : cross) += s;
            ++(p == q ? nw : nc);
          }
    within /= double(nw);
    cross /= double(nc);
    MESSAGE("mean cosine within " << within << " cross " << cross);
    CHECK(within > cross);
  }
}

TEST_CASE("prompt template") {
  const auto t = PromptTemplate::default_template();
  t.validate();
  const auto s = t.render("dev3");
  CHECK(s.find("<image>") == 0);
  CHECK(s.find("device dev3.") != std::string::npos);
  CHECK(s.find("Harman") != std::string::npos);
  CHECK(PromptTemplate{"{name} on {axes} <image>"}.render("x", "ax") == "x on ax <image>");
  CHECK_THROWS(PromptTemplate{""}.validate());
  CHECK_THROWS(PromptTemplate{"no image here"}.validate());
}

TEST_CASE("vlm client") {
  MockService svc;
  const auto graph = render_line_graph({bank6()[0].frc}, harman_target());
  const auto prompt = PromptTemplate::default_template();

  SUBCASE("well-formed response is echoed") {
    svc.script = [](int, httplib::Response& res) { reply_embedding(res, 4096, 1.0f); };
    const auto e = extract_embedding_vlm(graph, prompt, svc.url(), "dev0", 7, fast_retries());
    CHECK(e.vector == std::vector<float>(4096, 1.0f));
    CHECK(e.source == EmbeddingSource::vlm_service);
    CHECK(e.pool_index == 7);
    CHECK(svc.requests == 1);
    CHECK(svc.last_request["prompt"] == prompt.render("dev0"));
    const auto b64 = svc.last_request["image_b64"].get<std::string>();
    CHECK(b64 == base64_encode(graph.image_bytes));
    CHECK(b64.rfind("iVBORw0KGgo", 0) == 0);
  }
  SUBCASE("wrong dimension is a contract violation naming 4096") {
    svc.script = [](int, httplib::Response& res) { reply_embedding(res, 4095, 1.0f); };
    CHECK_THROWS_WITH_AS(extract_embedding_vlm(graph, prompt, svc.url(), "dev0", 0, fast_retries()),
                         doctest::Contains("expected 4096"), ContractError);
    CHECK(svc.requests == 1);
  }
  SUBCASE("transient failures are retried") {
    svc.script = [](int n, httplib::Response& res) {
      if (n <= 2) {
        res.status = 503;
        return;
      }
      reply_embedding(res, 4096, 0.5f);
    };
    const auto e = extract_embedding_vlm(graph, prompt, svc.url(), "dev0", 0, fast_retries());
    CHECK(e.vector[0] == 0.5f);
    CHECK(svc.requests == 3);
  }
  SUBCASE("client errors and malformed bodies are not retried") {
    svc.script = [](int, httplib::Response& res) {
      res.status = 400;
      res.set_content("bad", "text/plain");
    };
    CHECK_THROWS_AS(extract_embedding_vlm(graph, prompt, svc.url(), "dev0", 0, fast_retries()), ContractError);
    CHECK(svc.requests == 1);
    svc.script = [](int, httplib::Response& res) { res.set_content("{not json", "application/json"); };
    CHECK_THROWS_AS(extract_embedding_vlm(graph, prompt, svc.url(), "dev0", 0, fast_retries()), ContractError);
    svc.script = [](int, httplib::Response& res) { reply_embedding(res, 4096, 0.0f); };
    CHECK_THROWS_WITH_AS(extract_embedding_vlm(graph, prompt, svc.url(), "dev0", 0, fast_retries()),
                         doctest::Contains("all zero"), ContractError);
  }
  SUBCASE("persistent server failure exhausts retries") {
    svc.script = [](int, httplib::Response& res) { res.status = 500; };
    CHECK_THROWS_AS(extract_embedding_vlm(graph, prompt, svc.url(), "dev0", 0, fast_retries()), TransportError);
    CHECK(svc.requests == 4);
  }
  SUBCASE("pool over the service") {
    svc.script = [](int n, httplib::Response& res) { reply_embedding(res, 4096, float(n)); };
    const std::vector<DeviceProfile> two(bank6().begin(), bank6().begin() + 2);
    const auto pool = build_pool(two, 2, vlm_provider(svc.url(), prompt, harman_target(), fast_retries()), 1,
                                 std::nullopt, 1);
    CHECK(pool.source == EmbeddingSource::vlm_service);
    CHECK(svc.requests == 2 * (2 + 20));
  }
}

TEST_CASE("vlm client against an unreachable endpoint") {
  const auto graph = render_line_graph({bank6()[0].frc}, std::nullopt);
  CHECK_THROWS_AS(extract_embedding_vlm(graph, PromptTemplate::default_template(),
                                        "http://127.0.0.1:1", "dev0", 0, fast_retries()),
                  TransportError);
}

TEST_CASE("embedding pool") {
  const auto provider = frc_encoder_provider(harman_target());
  const std::vector<DeviceProfile> two(bank6().begin(), bank6().begin() + 2);

  SUBCASE("sizes and disjointness") {
    const auto p30 = build_pool(bank6(), 30, provider, 9);
    for (const auto& d : bank6()) {
      CHECK(p30.train.at(d.name).size() == 30);
      CHECK(p30.test.at(d.name).size() == 20);
      CHECK(p30.test_embedding(d.name).pool_index == 10000);
    }
    const auto p1 = build_pool(bank6(), 1, provider, 9);
    CHECK(p1.train.at("dev0").size() == 1);
    for (int ep : {1, 10, 20, 30, 40, 50}) {
      const auto p = build_pool(two, ep, provider, 9);
      for (const auto& d : two) {
        std::set<int> tr, te;
        for (const auto& e : p.train.at(d.name)) tr.insert(e.pool_index);
        for (const auto& e : p.test.at(d.name)) te.insert(e.pool_index);
        CHECK(tr.size() == std::size_t(ep));
        CHECK(te.size() == 20);
        std::vector<int> both;
        std::set_intersection(tr.begin(), tr.end(), te.begin(), te.end(), std::back_inserter(both));
        CHECK(both.empty());
      }
    }
    CHECK_THROWS_AS(build_pool(two, 0, provider, 9), std::invalid_argument);
  }
  SUBCASE("concurrent build equals sequential build") {
    const auto a = build_pool(two, 5, provider, 3, std::nullopt, 1);
    const auto b = build_pool(two, 5, provider, 3, std::nullopt, 4);
    for (const auto& d : two) {
      for (int i = 0; i < 5; ++i) CHECK(a.train.at(d.name)[i].vector == b.train.at(d.name)[i].vector);
      for (int i = 0; i < 20; ++i) CHECK(a.test.at(d.name)[i].vector == b.test.at(d.name)[i].vector);
    }
  }
  SUBCASE("persistence round trip and verification on load") {
    const auto dir = fs::temp_directory_path() / "devstyle_test_pool";
    fs::remove_all(dir);
    const auto p = build_pool(two, 3, provider, 4, dir);
    const auto q = EmbeddingPool::load(dir);
    CHECK(q.devices == p.devices);
    for (const auto& d : two) {
      for (int i = 0; i < 3; ++i) {
        CHECK(q.train.at(d.name)[i].vector == p.train.at(d.name)[i].vector);
        CHECK(q.train.at(d.name)[i].pool_index == i);
      }
      CHECK(q.test.at(d.name)[19].pool_index == 10019);
    }
    CHECK(fs::file_size(dir / "dev0.f32") == 23 * 4096 * 4);

    auto j = nlohmann::json::parse(read_file(dir / "pool_manifest.json"));
    j["devices"][0]["test_indices"][0] = 0;
    write_file_atomic(dir / "pool_manifest.json", j.dump());
    CHECK_THROWS_WITH(EmbeddingPool::load(dir), doctest::Contains("both train and test"));

    p.save(dir);
    auto bytes = read_file(dir / "dev1.f32");
    bytes[100] ^= 1;
    write_file_atomic(dir / "dev1.f32", bytes);
    CHECK_THROWS_WITH(EmbeddingPool::load(dir), doctest::Contains("checksum"));
  }
  SUBCASE("provider failure aborts without leaving files") {
    const auto dir = fs::temp_directory_path() / "devstyle_test_pool_fail";
    fs::remove_all(dir);
    std::atomic<int> calls{0};
    const EmbeddingProvider flaky = [&](const DeviceProfile& d, int idx, std::uint64_t seed) {
      if (++calls == 30) throw std::runtime_error("provider down");
      return provider(d, idx, seed);
    };
    CHECK_THROWS_WITH(build_pool(two, 5, flaky, 1, dir, 2), "provider down");
    CHECK((!fs::exists(dir) || fs::is_empty(dir)));
  }
}

TEST_CASE("sample_train_embedding") {
  const auto provider = frc_encoder_provider(harman_target());
  const std::vector<DeviceProfile> one(bank6().begin(), bank6().begin() + 1);
  const auto p1 = build_pool(one, 1, provider, 2);
  Rng rng(1);
  for (int i = 0; i < 10; ++i) CHECK(sample_train_embedding(p1, "dev0", rng).pool_index == 0);
  CHECK_THROWS_AS(sample_train_embedding(p1, "nope", rng), std::invalid_argument);

  const auto p30 = build_pool(one, 30, provider, 2);
  std::vector<int> counts(30, 0);
  Rng r2(123);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[sample_train_embedding(p30, "dev0", r2).pool_index];
  const double expect = draws / 30.0;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // Upper 1% point of chi-square with 29 degrees of freedom.
  CHECK(chi2 < 49.588);
  const double sd = std::sqrt(draws * (1.0 / 30) * (29.0 / 30));
  for (int c : counts) CHECK(std::abs(c - expect) < 3 * sd);

  Rng a(77), b(77);
  for (int i = 0; i < 100; ++i)
    CHECK(sample_train_embedding(p30, "dev0", a).pool_index == sample_train_embedding(p30, "dev0", b).pool_index);
}

TEST_CASE("perplexity calibration") {
  Rng rng(3);
  Eigen::MatrixXd x(60, 5);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index k = 0; k < x.cols(); ++k) x(i, k) = rng.normal();
  const auto p = conditional_affinities(squared_distances(x), 15.0);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    CHECK(p.row(i).sum() == doctest::Approx(1.0));
    CHECK(p(i, i) == 0.0);
    double h = 0;
    for (Eigen::Index j = 0; j < p.cols(); ++j)
      if (p(i, j) > 0) h -= p(i, j) * std::log(p(i, j));
    CHECK(std::exp(h) == doctest::Approx(15.0).epsilon(1e-6));
  }
}

TEST_CASE("silhouette on a hand-computed layout") {
  Eigen::MatrixXd y(4, 2);
  y << 0, 0, 1, 0, 4, 0, 5, 0;
  // s = 1 - a/b per point: 1 - 1/4.5 and 1 - 1/3.5, twice each by symmetry.
  const double expect = 0.5 * ((1 - 1 / 4.5) + (1 - 1 / 3.5));
  CHECK(silhouette_score(y, {0, 0, 1, 1}) == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS(silhouette_score(y, {0, 0, 0, 0}));
}

TEST_CASE("t-SNE over the device bank") {
  const auto target = harman_target();
  std::vector<DeviceEmbedding> embs;
  for (const auto& d : bank6())
    for (int i = 0; i < 50; ++i) embs.push_back(extract_embedding_frc_encoder(d.frc, target, d.name, i, 11));

  TsneResult detail;
  const auto pts = project_embeddings_2d(embs, 15.0, &detail);
  const double sil = silhouette_score(pts);
  MESSAGE("silhouette " << sil);
  CHECK(sil > 0.2);

  REQUIRE(!detail.kl_trace.empty());
  for (std::size_t k = 1; k < detail.kl_trace.size(); ++k) {
    if (detail.kl_trace[k - 1].first <= 250) continue;
    CHECK(detail.kl_trace[k].second <= detail.kl_trace[k - 1].second + 1e-12);
  }

  SUBCASE("invariant under an orthogonal transform of the inputs") {
    // Product of Householder reflections.
    Rng rng(5);
    auto rotated = embs;
    for (int h = 0; h < 3; ++h) {
      std::vector<double> v(kEmbeddingDim);
      double n2 = 0;
      for (auto& x : v) {
        x = rng.normal();
        n2 += x * x;
      }
      for (auto& e : rotated) {
        double dot = 0;
        for (std::size_t k = 0; k < kEmbeddingDim; ++k) dot += v[k] * e.vector[k];
        for (std::size_t k = 0; k < kEmbeddingDim; ++k) e.vector[k] = float(e.vector[k] - 2 * dot / n2 * v[k]);
      }
    }
    const double sil_rot = silhouette_score(project_embeddings_2d(rotated, 15.0));
    CHECK(std::abs(sil_rot - sil) <= 0.05);
  }
}

TEST_CASE("t-SNE keeps duplicated points together") {
  Rng rng(8);
  std::vector<DeviceEmbedding> embs;
  for (int i = 0; i < 60; ++i) {
    DeviceEmbedding e;
    e.device_name = "g" + std::to_string(i % 3);
    e.vector.resize(16);
    for (auto& v : e.vector) v = float(rng.normal() + 3.0 * (i % 3));
    embs.push_back(e);
  }
  for (int i = 0; i < 5; ++i) embs.push_back(embs[std::size_t(7 * i)]);
  const auto pts = project_embeddings_2d(embs, 10.0);
  std::vector<double> all;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) all.push_back(std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y));
  std::sort(all.begin(), all.end());
  const double cut = all[all.size() / 100];
  for (int i = 0; i < 5; ++i) {
    const auto& a = pts[std::size_t(7 * i)];
    const auto& b = pts[60 + std::size_t(i)];
    CHECK(std::hypot(a.x - b.x, a.y - b.y) <= cut);
  }
  CHECK_THROWS_AS(project_embeddings_2d(std::vector<DeviceEmbedding>(embs.begin(), embs.begin() + 20), 10.0),
                  std::invalid_argument);
}

TEST_CASE("t-SNE KL trace is non-increasing after exaggeration across banks") {
  const auto target = harman_target();
  for (std::uint64_t bank_seed : {1, 2, 3, 5, 7, 11, 42, 99}) {
    CAPTURE(bank_seed);
    std::vector<DeviceEmbedding> embs;
    for (const auto& d : make_parametric_device_bank(bank_seed, 6))
      for (int i = 0; i < 50; ++i) embs.push_back(extract_embedding_frc_encoder(d.frc, target, d.name, i, bank_seed));
    TsneResult detail;
    const auto pts = project_embeddings_2d(embs, 15.0, &detail);
    CHECK(silhouette_score(pts) > 0.2);
    double rise = 0;
    for (std::size_t k = 1; k < detail.kl_trace.size(); ++k)
      if (detail.kl_trace[k - 1].first > 250)
        rise = std::max(rise, detail.kl_trace[k].second - detail.kl_trace[k - 1].second);
    CHECK(rise <= 1e-12);
  }
}
