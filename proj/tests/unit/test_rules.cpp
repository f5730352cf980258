#include <filesystem>
#include <map>
#include <random>
#include <sstream>

#include "doctest.h"
#include "nero/rules.hpp"
#include "oracles.hpp"

using namespace nero;

namespace {

Instance inst(std::string id, std::vector<std::string> tokens, Span s, Span o, std::string st = "PERSON",
              std::string ot = "ORGANIZATION") {
  Instance i;
  i.id = std::move(id);
  i.tokens = std::move(tokens);
  i.subj = s;
  i.obj = o;
  i.subj_type = std::move(st);
  i.obj_type = std::move(ot);
  return i;
}

const RelationSchema kSchema({"org:founded_by", "per:employee_of"});

}  // namespace

TEST_CASE("stemmed context of the founding example") {
  const auto i = inst("a", {"Bill", "Gates", "founded", "Microsoft", "."}, {0, 1}, {3, 3});
  CHECK(stemmed_context(i) == std::vector<std::string>{"SUBJ-PERSON", "found", "OBJ-ORGANIZATION"});
}

TEST_CASE("stemmed context agrees with the independent oracle") {
  std::mt19937_64 rng(5);
  const std::vector<std::string> words = {"Founded", "of", "THE", "running", "wife", "CEO", "caresses", "x"};
  for (int t = 0; t < 300; ++t) {
    std::vector<std::string> toks;
    const int n = 3 + static_cast<int>(rng() % 8);
    for (int k = 0; k < n; ++k) toks.push_back(words[rng() % words.size()]);
    int a = static_cast<int>(rng() % n), b = static_cast<int>(rng() % n);
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    const Span s{a, a}, o{b, b};
    const auto i = (rng() % 2) ? inst("x", toks, s, o) : inst("x", toks, o, s);
    CHECK(stemmed_context(i) == testing::oracle_context(i));
  }
}

TEST_CASE("mining counts patterns and respects the threshold") {
  std::vector<Instance> corpus;
  for (int k = 0; k < 3; ++k)
    corpus.push_back(inst("f" + std::to_string(k), {"A", (k == 0 ? "founded" : "founding"), "B"}, {0, 0}, {2, 2}));
  for (int k = 0; k < 2; ++k) corpus.push_back(inst("w" + std::to_string(k), {"A", "wife", "of", "B"}, {0, 0}, {3, 3}));
  corpus.push_back(inst("t", {"A", "founded", "B"}, {0, 0}, {2, 2}, "PERSON", "PERSON"));

  const auto c = extract_candidates(corpus, {});
  REQUIRE(c.size() == 1);
  CHECK(c[0].frequency == 3);
  CHECK(c[0].stemmed_context == std::vector<std::string>{"SUBJ-PERSON", "found", "OBJ-ORGANIZATION"});
  CHECK(c[0].surface_context == std::vector<std::string>{"SUBJ-PERSON", "founding", "OBJ-ORGANIZATION"});
  CHECK(c[0].example_ids.size() == 3);

  MiningOptions two;
  two.min_freq = 2;
  const auto c2 = extract_candidates(corpus, two);
  REQUIRE(c2.size() == 2);
  CHECK(c2[0].frequency == 3);
  CHECK(c2[1].frequency == 2);

  MiningOptions short_only;
  short_only.min_freq = 2;
  short_only.max_len = 1;
  CHECK(extract_candidates(corpus, short_only).size() == 1);
}

TEST_CASE("mining output is order-independent and sorted") {
  std::vector<Instance> corpus;
  std::mt19937_64 rng(1);
  const std::vector<std::string> words = {"of", "in", "at", "founded"};
  for (int k = 0; k < 400; ++k) {
    std::vector<std::string> toks{"A"};
    const int n = static_cast<int>(rng() % 3);
    for (int j = 0; j < n; ++j) toks.push_back(words[rng() % words.size()]);
    toks.push_back("B");
    corpus.push_back(inst("i" + std::to_string(k), toks, {0, 0}, {n + 1, n + 1}));
  }
  const auto a = extract_candidates(corpus, {});
  std::shuffle(corpus.begin(), corpus.end(), rng);
  auto b = extract_candidates(corpus, {});
  REQUIRE(a.size() == b.size());
  std::size_t total = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].stemmed_context == b[k].stemmed_context);
    CHECK(a[k].frequency == b[k].frequency);
    CHECK(a[k].frequency >= 3);
    if (k) CHECK_FALSE(candidate_precedes(a[k], a[k - 1]));
    total += a[k].frequency;
  }
  CHECK(total <= corpus.size());
}

TEST_CASE("rule files round-trip and reject conflicts") {
  const auto dir = std::filesystem::temp_directory_path() / "nero_test_rules";
  std::filesystem::create_directories(dir);
  std::vector<LabelingRule> rules{
      {"r1", "PERSON", "ORGANIZATION", {"SUBJ-PERSON", "found", "OBJ-ORGANIZATION"}, kSchema.index_of("org:founded_by")},
      {"r2", "PERSON", "ORGANIZATION", {"SUBJ-PERSON", "ceo", "of", "OBJ-ORGANIZATION"}, kSchema.none_index()}};
  save_rules(dir / "rules.jsonl", rules, kSchema);
  CHECK(load_rules(dir / "rules.jsonl", kSchema) == rules);

  auto conflicting = rules;
  conflicting.push_back({"r3", "PERSON", "ORGANIZATION", {"SUBJ-PERSON", "found", "OBJ-ORGANIZATION"},
                         kSchema.index_of("per:employee_of")});
  CHECK_THROWS_AS(check_rule_conflicts(conflicting, kSchema), ValidationError);
  CHECK_THROWS_AS(save_rules(dir / "bad.jsonl", conflicting, kSchema), ValidationError);

  // Same body and head twice is a duplicate, not a conflict.
  auto dup = rules;
  dup.push_back({"r4", "PERSON", "ORGANIZATION", {"SUBJ-PERSON", "found", "OBJ-ORGANIZATION"},
                 kSchema.index_of("org:founded_by")});
  CHECK_NOTHROW(check_rule_conflicts(dup, kSchema));

  std::istringstream bad_head(R"({"id":"r9","subj_type":"PERSON","obj_type":"ORGANIZATION","context":["SUBJ-PERSON","OBJ-ORGANIZATION"],"head":"nope"})");
  CHECK_THROWS_AS(parse_rules(bad_head, kSchema), ValidationError);
  std::istringstream broken("{");
  CHECK_THROWS_AS(parse_rules(broken, kSchema), ParseError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("rule body must be framed by the matching masks") {
  LabelingRule r{"r", "PERSON", "ORGANIZATION", {"found"}, 1};
  CHECK_THROWS_AS(r.validate(kSchema), ValidationError);
  r.context = {"SUBJ-PERSON", "found", "OBJ-LOCATION"};
  CHECK_THROWS_AS(r.validate(kSchema), ValidationError);
  r.context = {"OBJ-ORGANIZATION", "found", "SUBJ-PERSON"};
  CHECK_NOTHROW(r.validate(kSchema));
}

TEST_CASE("candidates round-trip") {
  const auto path = std::filesystem::temp_directory_path() / "nero_test_candidates.jsonl";
  std::vector<CandidateRule> c{{"c1", "PERSON", "ORGANIZATION", {"SUBJ-PERSON", "found", "OBJ-ORGANIZATION"},
                                {"SUBJ-PERSON", "founded", "OBJ-ORGANIZATION"}, 4, {"a", "b"}}};
  save_candidates(path, c);
  CHECK(load_candidates(path) == c);
  std::filesystem::remove(path);
}
