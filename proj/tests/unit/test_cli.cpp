#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "nero/cli.hpp"
#include "nero/inference.hpp"
#include "nero/matcher.hpp"
#include "synthetic.hpp"

using namespace nero;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nero");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Corpus, dev set, schema, rules and vectors of a small synthetic world on disk.
struct Workspace {
  fs::path dir;
  testing::World world;
  testing::RuleBook book;

  explicit Workspace(const std::string& name) {
    dir = fs::temp_directory_path() / ("nero_test_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    testing::WorldSpec ws;
    ws.relations = 3;
    ws.keywords_per_relation = 3;
    ws.canonical_keywords = 1;
    ws.fillers = 6;
    ws.semantic_dim = 4;
    ws.nuisance_dim = 4;
    world = testing::make_world(ws);
    testing::RuleSpec rs;
    rs.max_fillers = 0;
    book = testing::make_rules(world, rs);
    testing::CorpusSpec cs;
    cs.sentences = 150;
    cs.exact_rate = 0.5;
    save_dataset(dir / "train.jsonl", testing::make_corpus(world, book, cs), world.schema);
    cs.sentences = 40;
    cs.seed = 99;
    cs.id_prefix = "d";
    save_dataset(dir / "dev.jsonl", testing::make_corpus(world, book, cs), world.schema);
    world.schema.save(dir / "schema.json");
    save_rules(dir / "rules.jsonl", book.rules, world.schema);
    std::ofstream emb(dir / "vectors.txt");
    emb.precision(17);
    for (std::size_t i = 0; i < world.embeddings.tokens.size(); ++i) {
      emb << world.embeddings.tokens[i];
      for (double v : world.embeddings.row(i)) emb << ' ' << v;
      emb << '\n';
    }
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }

  std::vector<std::string> train_args(const std::string& out) const {
    return {"train",     "--corpus",   p("train.jsonl"), "--schema",   p("schema.json"), "--matched",
            p("m.jsonl"), "--unmatched", p("u.jsonl"),   "--rules",    p("rules.jsonl"), "--dev",
            p("dev.jsonl"), "--emb",     p("vectors.txt"), "--emb-dim", "8",           "--hidden-dim",
            "4",         "--attn-dim", "6",             "--max-epochs", "3",          "--batch-matched",
            "16",        "--batch-unmatched", "16",     "--out",      p(out)};
  }
};

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(cli({"--help"}).code == 0);
  const auto r = cli({"train", "--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("--alpha") != std::string::npos);
  CHECK(cli({}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  CHECK(cli({"mine"}).code == 1);
  CHECK(cli({"mine", "--corpus", "/nonexistent/x.jsonl", "--out", "/tmp/x"}).code == 1);
  CHECK_FALSE(git_describe().empty());
}

TEST_CASE("end-to-end pipeline through the command line") {
  Workspace ws("pipeline");

  auto r = cli({"mine", "--corpus", ws.p("train.jsonl"), "--out", ws.p("cands.jsonl"), "--min-freq", "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto cands = load_candidates(ws.dir / "cands.jsonl");
  CHECK_FALSE(cands.empty());
  CHECK(fs::exists(ws.dir / "cands.jsonl.manifest.json"));
  const auto m = read_manifest(ws.dir / "cands.jsonl.manifest.json");
  CHECK(m.subcommand == "mine");
  CHECK(m.argv.size() == 8);

  r = cli({"match", "--corpus", ws.p("train.jsonl"), "--schema", ws.p("schema.json"), "--rules", ws.p("rules.jsonl"),
           "--out-matched", ws.p("m.jsonl"), "--out-unmatched", ws.p("u.jsonl"), "--threads", "3"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto part = load_partition(ws.dir / "m.jsonl", ws.dir / "u.jsonl", ws.world.schema);
  CHECK(part.matched.size() + part.unmatched.size() == 150);
  CHECK_FALSE(part.matched.empty());

  r = cli(ws.train_args("model"));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(ws.dir / "model" / "params.json"));
  CHECK(fs::exists(ws.dir / "model" / "run_manifest.json"));
  const auto log = slurp(ws.dir / "model" / "train_log.jsonl");
  CHECK(std::count(log.begin(), log.end(), '\n') >= 1);
  const auto training = json::parse(slurp(ws.dir / "model" / "training.json"));
  CHECK(training.contains("delta"));
  CHECK(read_manifest(ws.dir / "model" / "run_manifest.json").seed == 42);

  // Same seed, same parameters.
  REQUIRE(cli(ws.train_args("model2")).code == 0);
  CHECK(slurp(ws.dir / "model" / "params.json") == slurp(ws.dir / "model2" / "params.json"));
  auto seeded = ws.train_args("model3");
  seeded.insert(seeded.end(), {"--seed", "7", "--alpha", "0.5", "--clus-exclude-none"});
  REQUIRE(cli(seeded).code == 0);
  CHECK(slurp(ws.dir / "model" / "params.json") != slurp(ws.dir / "model3" / "params.json"));
  const auto m3 = read_manifest(ws.dir / "model3" / "run_manifest.json");
  CHECK(m3.seed == 7);
  CHECK(json::parse(m3.config)["alpha"] == 0.5);
  CHECK(json::parse(m3.config)["clus_include_none"] == false);

  r = cli({"predict", "--model", ws.p("model"), "--corpus", ws.p("dev.jsonl"), "--out", ws.p("pred_rc.jsonl")});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto preds = load_predictions(ws.dir / "pred_rc.jsonl", ws.world.schema);
  CHECK(preds.size() == 40);

  r = cli({"predict", "--model", ws.p("model"), "--corpus", ws.p("dev.jsonl"), "--mode", "srm", "--rules",
           ws.p("rules.jsonl"), "--delta", "0.2", "--out", ws.p("pred_srm.jsonl")});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto srm = load_predictions(ws.dir / "pred_srm.jsonl", ws.world.schema);
  REQUIRE(srm.size() == 40);
  CHECK(srm[0].mode == PredictMode::Srm);
  CHECK(cli({"predict", "--model", ws.p("model"), "--corpus", ws.p("dev.jsonl"), "--mode", "srm", "--out",
             ws.p("x.jsonl")})
            .code == 1);
  CHECK(cli({"predict", "--model", ws.p("model"), "--corpus", ws.p("dev.jsonl"), "--mode", "fuzzy", "--out",
             ws.p("x.jsonl")})
            .code == 1);

  r = cli({"eval", "--predictions", ws.p("pred_rc.jsonl"), "--gold", ws.p("dev.jsonl"), "--schema",
           ws.p("schema.json")});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto report = json::parse(r.out);
  const auto dev = load_dataset(ws.dir / "dev.jsonl", ws.world.schema);
  CHECK(report["f1"].get<double>() == doctest::Approx(score(preds, dev, ws.world.schema).f1));
  // Predictions for another corpus do not line up.
  CHECK(cli({"eval", "--predictions", ws.p("pred_rc.jsonl"), "--gold", ws.p("train.jsonl"), "--schema",
             ws.p("schema.json")})
            .code == 1);

  r = cli({"explain", "--model", ws.p("model"), "--corpus", ws.p("dev.jsonl"), "--rules", ws.p("rules.jsonl"),
           "--instance", dev[0].id, "--rule", ws.book.rules[0].id, "--svg", ws.p("e.svg")});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(json::parse(r.out).contains("similarity"));
  CHECK(slurp(ws.dir / "e.svg").find("<svg") != std::string::npos);
  CHECK(cli({"explain", "--model", ws.p("model"), "--corpus", ws.p("dev.jsonl"), "--rules", ws.p("rules.jsonl"),
             "--instance", "missing", "--rule", ws.book.rules[0].id})
            .code == 1);
}

TEST_CASE("malformed inputs exit with code 1") {
  Workspace ws("errors");
  std::ofstream(ws.dir / "bad.jsonl") << "{\"token\": [\n";
  const auto r = cli({"mine", "--corpus", ws.p("bad.jsonl"), "--out", ws.p("c.jsonl")});
  CHECK(r.code == 1);
  CHECK(r.err.find("line 1") != std::string::npos);

  std::ofstream(ws.dir / "cfg.json") << R"({"alhpa": 1})";
  REQUIRE(cli({"match", "--corpus", ws.p("train.jsonl"), "--schema", ws.p("schema.json"), "--rules",
               ws.p("rules.jsonl"), "--out-matched", ws.p("m.jsonl"), "--out-unmatched", ws.p("u.jsonl")})
              .code == 0);
  auto args = ws.train_args("model");
  args.insert(args.end(), {"--config", ws.p("cfg.json")});
  CHECK(cli(args).code == 1);
  args = ws.train_args("model");
  args.insert(args.end(), {"--tau", "-1"});
  CHECK(cli(args).code == 1);
}
