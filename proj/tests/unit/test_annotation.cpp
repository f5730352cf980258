#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "nero/annotation.hpp"
#include "nero/matcher.hpp"
#include "synthetic.hpp"

using namespace nero;
using nlohmann::json;

namespace {

struct Fixture {
  std::vector<Instance> corpus;
  std::vector<CandidateRule> candidates;
  RelationSchema schema;
};

Fixture fixture(std::uint64_t seed = 1) {
  auto fx = testing::make_matcher_fixture(300, 0, seed);
  MiningOptions opts;
  opts.min_freq = 2;
  auto cands = extract_candidates(fx.corpus, opts);
  for (std::size_t i = 0; i < cands.size(); ++i) cands[i].id = "c" + std::to_string(i);
  return {fx.corpus, cands, fx.schema};
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("nero_test_annotation_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::size_t oracle_matched(const AnnotationStore& store) {
  const auto rules = store.rules();
  return partition(store.corpus(), rules).matched.size();
}

HttpRequest get(const std::string& path, std::map<std::string, std::string> query = {}) {
  return {"GET", path, std::move(query), {}, ""};
}

HttpRequest post(const std::string& path, const std::string& body) { return {"POST", path, {}, {}, body}; }

}  // namespace

TEST_CASE("coverage tracks the hard-match partition of the active rules") {
  auto f = fixture();
  REQUIRE(f.candidates.size() >= 6);
  AnnotationStore store(f.corpus, f.candidates, f.schema);
  CHECK(store.stats().total == f.candidates.size());
  CHECK(store.stats().remaining == f.candidates.size());
  CHECK(store.stats().matched == 0);

  std::mt19937_64 rng(4);
  const std::vector<std::string> choices{"rel_a", "rel_b", "NONE", "discard"};
  for (int k = 0; k < 60; ++k) {
    const auto& c = f.candidates[rng() % f.candidates.size()];
    const auto s = store.apply({0, c.id, choices[rng() % choices.size()], "ann", "", ""});
    CHECK(s.matched == oracle_matched(store));
    CHECK(s.matched + s.unmatched == f.corpus.size());
    CHECK(s.labeled + s.discarded + s.remaining == s.total);
  }
  const auto ev = store.events();
  REQUIRE(ev.size() == 60);
  for (std::size_t i = 0; i < ev.size(); ++i) CHECK(ev[i].seq == i + 1);
  CHECK_FALSE(ev[0].timestamp.empty());

  CHECK_THROWS_AS(store.apply({0, "nope", "rel_a", "", "", ""}), UnknownCandidate);
  CHECK_THROWS_AS(store.apply({0, f.candidates[0].id, "rel_zzz", "", "", ""}), ValidationError);
  CHECK(store.events().size() == 60);

  store.apply({0, f.candidates[0].id, "NONE", "", "", ""});
  CHECK(*store.decision(f.candidates[0].id) == "no_relation");
}

TEST_CASE("rules follow candidate order and skip discards") {
  auto f = fixture();
  AnnotationStore store(f.corpus, f.candidates, f.schema);
  store.apply({0, f.candidates[2].id, "rel_a", "", "", ""});
  store.apply({0, f.candidates[0].id, "rel_b", "", "", ""});
  store.apply({0, f.candidates[1].id, "discard", "", "", ""});
  const auto rules = store.rules();
  REQUIRE(rules.size() == 2);
  CHECK(rules[0].id == f.candidates[0].id);
  CHECK(rules[0].head == f.schema.index_of("rel_b"));
  CHECK(rules[1].context == f.candidates[2].stemmed_context);
}

TEST_CASE("replaying the log reproduces the state, with or without a snapshot") {
  auto f = fixture(2);
  const auto dir = scratch("replay");
  std::map<std::string, std::string> want;
  CoverageStats want_stats;
  {
    AnnotationStore store(f.corpus, f.candidates, f.schema);
    store.attach(dir / "events.jsonl", dir / "snapshot.json", 7);
    std::mt19937_64 rng(9);
    const std::vector<std::string> choices{"rel_a", "rel_c", "no_relation", "discard"};
    for (int k = 0; k < 45; ++k)
      store.apply({0, f.candidates[rng() % f.candidates.size()].id, choices[rng() % 4], "a", "", ""});
    want = store.decisions();
    want_stats = store.stats();
  }
  REQUIRE(std::filesystem::exists(dir / "snapshot.json"));
  const auto snap = json::parse(std::ifstream(dir / "snapshot.json"));
  CHECK(snap["seq"] == 42);

  {
    AnnotationStore store(f.corpus, f.candidates, f.schema);
    store.attach(dir / "events.jsonl", dir / "snapshot.json", 7);
    CHECK(store.decisions() == want);
    CHECK(store.stats().matched == want_stats.matched);
    CHECK(store.stats().labeled == want_stats.labeled);
    CHECK(store.events().size() == 45);
    // Numbering continues after a restart.
    store.apply({0, f.candidates[0].id, "rel_b", "", "", ""});
    CHECK(store.events().back().seq == 46);
    want = store.decisions();
  }
  {
    // Log alone.
    AnnotationStore store(f.corpus, f.candidates, f.schema);
    store.attach(dir / "events.jsonl", {}, 0);
    CHECK(store.decisions() == want);
  }
  {
    // Snapshot alone covers events up to its seq.
    std::filesystem::remove(dir / "events.jsonl");
    AnnotationStore store(f.corpus, f.candidates, f.schema);
    store.attach(dir / "events.jsonl", dir / "snapshot.json", 7);
    CHECK(store.decisions().size() <= want.size());
    store.apply({0, f.candidates[1].id, "rel_a", "", "", ""});
    CHECK(store.events().back().seq == 43);
  }
  std::ofstream(dir / "broken.jsonl") << "{\"seq\":1,\"candidate_id\":\"c0\",\"decision\":\"rel_a\"}\n{oops\n";
  AnnotationStore store(f.corpus, f.candidates, f.schema);
  CHECK_THROWS_AS(store.attach(dir / "broken.jsonl", {}, 0), ParseError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("concurrent writers get distinct, gapless sequence numbers") {
  auto f = fixture(3);
  const auto dir = scratch("concurrent");
  AnnotationStore store(f.corpus, f.candidates, f.schema);
  store.attach(dir / "events.jsonl", dir / "snap.json", 10);
  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t)
    pool.emplace_back([&, t] {
      for (int k = 0; k < 25; ++k) {
        const auto& c = f.candidates[static_cast<std::size_t>(t * 25 + k) % f.candidates.size()];
        store.apply({0, c.id, (k % 3) ? "rel_a" : "discard", "t" + std::to_string(t), "", ""});
        (void)store.stats();
      }
    });
  for (auto& th : pool) th.join();
  std::set<std::uint64_t> seqs;
  for (const auto& e : store.events()) seqs.insert(e.seq);
  CHECK(seqs.size() == 100);
  CHECK(*seqs.rbegin() == 100);
  CHECK(store.stats().matched == oracle_matched(store));

  AnnotationStore again(f.corpus, f.candidates, f.schema);
  again.attach(dir / "events.jsonl", {}, 0);
  CHECK(again.decisions() == store.decisions());
  std::filesystem::remove_all(dir);
}

TEST_CASE("paging visits every candidate once in queue order") {
  auto f = fixture(4);
  AnnotationStore store(f.corpus, f.candidates, f.schema);
  store.apply({0, f.candidates[1].id, "rel_a", "", "", ""});
  for (const std::string sort : {"frequency", "id"}) {
    std::vector<std::string> seen;
    std::string token;
    do {
      const auto page = store.list(CandidateStatus::Any, sort, 4, token);
      CHECK(page.items.size() <= 4);
      for (const auto& it : page.items) seen.push_back(it.candidate->id);
      token = page.next_token;
    } while (!token.empty());
    CHECK(seen.size() == f.candidates.size());
    CHECK(std::set<std::string>(seen.begin(), seen.end()).size() == seen.size());
    if (sort == "id") CHECK(std::is_sorted(seen.begin(), seen.end()));
    else CHECK(seen.front() == f.candidates.front().id);
  }
  const auto unl = store.list(CandidateStatus::Unlabeled, "frequency", 1000, "");
  CHECK(unl.items.size() == f.candidates.size() - 1);
  const auto lab = store.list(CandidateStatus::Labeled, "frequency", 1000, "");
  REQUIRE(lab.items.size() == 1);
  CHECK(*lab.items[0].decision == "rel_a");
  CHECK(lab.items[0].matches == f.candidates[1].frequency);

  CHECK_THROWS_AS(store.list(CandidateStatus::Any, "frequency", 4, "garbage"), std::invalid_argument);
  CHECK_THROWS_AS(store.list(CandidateStatus::Any, "alphabet", 4, ""), std::invalid_argument);
  CHECK_THROWS_AS(parse_status("maybe"), std::invalid_argument);
}

TEST_CASE("JSON API routes") {
  auto f = fixture(5);
  AnnotationStore store(f.corpus, f.candidates, f.schema);
  AnnotationApi api(store, {"http://ui.local", ""});

  auto res = api.handle(get("/candidates", {{"page_size", "3"}}));
  CHECK(res.status == 200);
  CHECK(res.headers.at("Access-Control-Allow-Origin") == "http://ui.local");
  auto body = json::parse(res.body);
  REQUIRE(body["items"].size() == 3);
  CHECK(body["items"][0]["id"] == f.candidates[0].id);
  CHECK(body["items"][0]["examples"].size() >= 1);
  CHECK(body["items"][0]["examples"][0].contains("subj"));
  CHECK(body["relations"][0] == "no_relation");
  CHECK(body["next_page_token"].is_string());
  const auto next = api.handle(get("/candidates", {{"page_size", "3"}, {"page_token", body["next_page_token"]}}));
  CHECK(json::parse(next.body)["items"][0]["id"] == f.candidates[3].id);

  CHECK(api.handle(get("/candidates", {{"page_size", "0"}})).status == 400);
  CHECK(api.handle(get("/candidates", {{"page_size", "abc"}})).status == 400);
  CHECK(api.handle(get("/candidates", {{"status", "odd"}})).status == 400);
  CHECK(api.handle(get("/candidates", {{"page_token", "zz"}})).status == 400);

  const std::string id = f.candidates[0].id;
  res = api.handle(post("/candidates/" + id + "/label", R"({"decision":"rel_b","annotator":"kim"})"));
  CHECK(res.status == 200);
  body = json::parse(res.body);
  CHECK(body["decision"] == "rel_b");
  CHECK(body["matched_delta"] == f.candidates[0].frequency);
  CHECK(body["stats"]["labeled"] == 1);

  CHECK(api.handle(post("/candidates/nope/label", R"({"decision":"rel_b"})")).status == 404);
  CHECK(api.handle(post("/candidates/" + id + "/label", R"({"decision":"rel_q"})")).status == 400);
  CHECK(api.handle(post("/candidates/" + id + "/label", "not json")).status == 400);
  CHECK(api.handle(post("/candidates/" + id + "/label", "{}")).status == 400);
  CHECK(api.handle(get("/candidates/" + id + "/label")).status == 405);
  CHECK(api.handle(get("/nowhere")).status == 404);

  res = api.handle(get("/export/rules"));
  CHECK(res.content_type == "application/x-ndjson");
  std::istringstream in(res.body);
  const auto rules = parse_rules(in, f.schema);
  REQUIRE(rules.size() == 1);
  CHECK(rules[0].context == f.candidates[0].stemmed_context);

  CHECK(json::parse(api.handle(get("/stats")).body)["labeled"] == 1);
  CHECK(api.handle({"OPTIONS", "/candidates", {}, {}, ""}).status == 204);
}

TEST_CASE("token-protected API") {
  auto f = fixture(6);
  AnnotationStore store(f.corpus, f.candidates, f.schema);
  AnnotationApi api(store, {"*", "s3cret"});
  CHECK(api.handle(get("/stats")).status == 401);
  auto req = get("/stats");
  req.headers["x-nero-token"] = "wrong";
  CHECK(api.handle(req).status == 401);
  req.headers["x-nero-token"] = "s3cret";
  CHECK(api.handle(req).status == 200);
  CHECK(api.handle({"OPTIONS", "/stats", {}, {}, ""}).status == 204);
}

TEST_CASE("HTTP server end to end") {
  auto f = fixture(7);
  AnnotationStore store(f.corpus, f.candidates, f.schema);
  AnnotationServer server(store, {"*", "tok"});
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread th([&] { server.run(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto r = cli.Get("/stats");
  REQUIRE(r);
  CHECK(r->status == 401);
  const httplib::Headers h{{"X-Nero-Token", "tok"}};
  r = cli.Get("/stats", h);
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(r->get_header_value("Access-Control-Allow-Origin") == "*");
  r = cli.Post("/candidates/" + f.candidates[0].id + "/label", h, R"({"decision":"rel_a"})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 200);
  r = cli.Get("/candidates?status=labeled", h);
  REQUIRE(r);
  CHECK(json::parse(r->body)["items"].size() == 1);

  server.stop();
  th.join();
}
