#include "nero/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "nero/annotation.hpp"
#include "nero/data.hpp"
#include "nero/inference.hpp"
#include "nero/matcher.hpp"
#include "nero/models.hpp"
#include "nero/rules.hpp"
#include "nero/training.hpp"

#ifndef NERO_GIT_DESCRIBE
#define NERO_GIT_DESCRIBE "unknown"
#endif

namespace nero {

using nlohmann::json;
namespace fs = std::filesystem;

std::string git_describe() { return NERO_GIT_DESCRIBE; }

void write_manifest(const fs::path& path, const RunManifest& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  json j = {{"format", "nero-run-manifest"},
            {"version", 1},
            {"subcommand", m.subcommand},
            {"argv", m.argv},
            {"config", m.config.empty() ? json(nullptr) : json::parse(m.config)},
            {"inputs", m.inputs},
            {"outputs", m.outputs},
            {"seed", m.seed},
            {"started_at", m.started_at},
            {"git_describe", m.git_describe}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

RunManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
    RunManifest m;
    m.subcommand = j.at("subcommand").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    if (!j.at("config").is_null()) m.config = j.at("config").dump(2);
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.started_at = j.at("started_at").get<std::string>();
    m.git_describe = j.at("git_describe").get<std::string>();
    return m;
  } catch (const json::exception& e) {
    throw ParseError("manifest " + path.string() + ": " + e.what());
  }
}

namespace {

constexpr std::uint64_t kDefaultSeed = 42;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw ValidationError(what + " not found: " + path);
}

std::uint64_t env_seed() {
  const char* s = std::getenv("NERO_SEED");
  if (!s || !*s) return kDefaultSeed;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ValidationError(std::string("NERO_SEED is not an unsigned integer: ") + s);
  }
}

/// Relation inventory read off the corpus itself, for commands that never look at labels.
RelationSchema schema_from_corpus(const fs::path& path) {
  std::ifstream in(path);
  std::set<std::string> names;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      if (j.contains("relation") && j["relation"].is_string()) names.insert(j["relation"].get<std::string>());
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), lineno);
    }
  }
  names.erase("NONE");
  return RelationSchema(std::vector<std::string>(names.begin(), names.end()));
}

std::vector<std::string> entity_types(std::span<const Instance> a, std::span<const LabelingRule> rules) {
  std::set<std::string> t;
  for (const auto& inst : a) {
    t.insert(inst.subj_type);
    t.insert(inst.obj_type);
  }
  for (const auto& r : rules) {
    t.insert(r.subj_type);
    t.insert(r.obj_type);
  }
  return {t.begin(), t.end()};
}

std::atomic<AnnotationServer*> g_server{nullptr};

extern "C" void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

struct Common {
  std::vector<std::string> argv;
  unsigned threads = 1;
  std::string manifest;
};

RunManifest begin(const Common& c, const std::string& sub, std::uint64_t seed) {
  RunManifest m;
  m.subcommand = sub;
  m.argv = c.argv;
  m.seed = seed;
  m.started_at = utc_now();
  m.git_describe = git_describe();
  return m;
}

// --- subcommands --------------------------------------------------------------

struct MineArgs {
  std::string corpus, schema, out;
  std::size_t min_freq = 3, max_len = 10, examples = 3;
};

int cmd_mine(const MineArgs& a, const Common& c, std::ostream& out) {
  require_file(a.corpus, "corpus");
  if (!a.schema.empty()) require_file(a.schema, "schema");
  auto m = begin(c, "mine", 0);
  m.config = json{{"min_freq", a.min_freq}, {"max_len", a.max_len}, {"examples", a.examples}}.dump();
  m.inputs = {{"corpus", a.corpus}};
  if (!a.schema.empty()) m.inputs["schema"] = a.schema;
  m.outputs = {{"candidates", a.out}};
  write_manifest(c.manifest.empty() ? a.out + ".manifest.json" : c.manifest, m);

  const auto schema = a.schema.empty() ? schema_from_corpus(a.corpus) : RelationSchema::load(a.schema);
  const auto corpus = load_dataset(a.corpus, schema);
  const auto cands = extract_candidates(corpus, {a.min_freq, a.max_len, a.examples});
  save_candidates(a.out, cands);
  out << "mined " << cands.size() << " candidate rules from " << corpus.size() << " sentences\n";
  return 0;
}

struct MatchArgs {
  std::string corpus, schema, rules, out_matched, out_unmatched;
};

int cmd_match(const MatchArgs& a, const Common& c, std::ostream& out, std::ostream& err) {
  require_file(a.corpus, "corpus");
  require_file(a.schema, "schema");
  require_file(a.rules, "rules");
  auto m = begin(c, "match", 0);
  m.inputs = {{"corpus", a.corpus}, {"schema", a.schema}, {"rules", a.rules}};
  m.outputs = {{"matched", a.out_matched}, {"unmatched", a.out_unmatched}};
  write_manifest(c.manifest.empty() ? a.out_matched + ".manifest.json" : c.manifest, m);

  const auto schema = RelationSchema::load(a.schema);
  const auto corpus = load_dataset(a.corpus, schema);
  const auto rules = load_rules(a.rules, schema);
  const auto part = partition(corpus, rules, c.threads);
  save_partition(a.out_matched, a.out_unmatched, part, schema);
  for (std::size_t i = 0; i < std::min<std::size_t>(part.conflicts.size(), 10); ++i) {
    const auto& cf = part.conflicts[i];
    err << "warning: " << cf.instance_id << " matched by rules with different heads:";
    for (const auto& id : cf.rule_ids) err << ' ' << id;
    err << '\n';
  }
  if (part.conflicts.size() > 10) err << "warning: " << part.conflicts.size() - 10 << " more conflicted instances\n";
  out << "matched " << part.matched.size() << ", unmatched " << part.unmatched.size() << ", conflicts "
      << part.conflicts.size() << "\n";
  return 0;
}

struct TrainArgs {
  std::string corpus, schema, matched, unmatched, rules, dev, emb, config, out, log;
  std::map<std::string, CLI::Option*> overrides;
  double alpha = 0, beta = 0, gamma = 0, tau = 0, sigma = 0, lr = 0, lr_decay = 0, dropout = 0;
  int batch_matched = 0, batch_unmatched = 0, emb_dim = 0, hidden_dim = 0, attn_dim = 0, max_epochs = 0,
      patience = 0;
  std::uint64_t seed = 0;
  bool exclude_none = false;
};

TrainingConfig resolve_config(const TrainArgs& a) {
  TrainingConfig cfg;
  cfg.seed = env_seed();
  if (!a.config.empty()) {
    require_file(a.config, "config");
    cfg = load_config(a.config, cfg);
  }
  auto set = [&](const char* name) { return a.overrides.at(name)->count() > 0; };
  if (set("alpha")) cfg.alpha = a.alpha;
  if (set("beta")) cfg.beta = a.beta;
  if (set("gamma")) cfg.gamma = a.gamma;
  if (set("tau")) cfg.tau = a.tau;
  if (set("sigma")) cfg.sigma = a.sigma;
  if (set("lr")) cfg.lr0 = a.lr;
  if (set("lr-decay")) cfg.lr_decay = a.lr_decay;
  if (set("dropout")) cfg.dims.dropout = a.dropout;
  if (set("batch-matched")) cfg.batch_matched = a.batch_matched;
  if (set("batch-unmatched")) cfg.batch_unmatched = a.batch_unmatched;
  if (set("emb-dim")) cfg.dims.emb_dim = a.emb_dim;
  if (set("hidden-dim")) cfg.dims.hidden_dim = a.hidden_dim;
  if (set("attn-dim")) cfg.dims.attn_dim = a.attn_dim;
  if (set("max-epochs")) cfg.max_epochs = a.max_epochs;
  if (set("patience")) cfg.patience = a.patience;
  if (set("seed")) cfg.seed = a.seed;
  if (a.exclude_none) cfg.clus_include_none = false;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a, const Common& c, std::ostream& out, std::ostream& err) {
  for (const auto& [p, what] : {std::pair{a.corpus, "corpus"}, {a.schema, "schema"}, {a.matched, "matched file"},
                                {a.unmatched, "unmatched file"}, {a.rules, "rules"}})
    require_file(p, what);
  if (!a.dev.empty()) require_file(a.dev, "dev set");
  if (!a.emb.empty()) require_file(a.emb, "embeddings");
  const TrainingConfig cfg = resolve_config(a);

  auto m = begin(c, "train", cfg.seed);
  m.config = config_json(cfg);
  m.inputs = {{"corpus", a.corpus}, {"schema", a.schema}, {"matched", a.matched},
              {"unmatched", a.unmatched}, {"rules", a.rules}};
  if (!a.dev.empty()) m.inputs["dev"] = a.dev;
  if (!a.emb.empty()) m.inputs["emb"] = a.emb;
  if (!a.config.empty()) m.inputs["config"] = a.config;
  m.outputs = {{"model", a.out}};
  fs::create_directories(a.out);
  write_manifest(c.manifest.empty() ? (fs::path(a.out) / "run_manifest.json").string() : c.manifest, m);

  const auto schema = RelationSchema::load(a.schema);
  const auto corpus = load_dataset(a.corpus, schema);
  const auto part = load_partition(a.matched, a.unmatched, schema);
  const auto rules = load_rules(a.rules, schema);
  std::vector<Instance> dev;
  if (!a.dev.empty()) dev = load_dataset(a.dev, schema);
  else err << "warning: no --dev given; stopping on training loss and using delta = 0\n";
  std::optional<EmbeddingTable> emb;
  if (!a.emb.empty()) emb = load_embeddings(a.emb, cfg.dims.emb_dim);
  else err << "warning: no --emb given; embeddings start from seeded random draws\n";

  std::vector<Instance> all(corpus);
  all.insert(all.end(), dev.begin(), dev.end());
  std::vector<std::vector<std::string>> contexts;
  for (const auto& r : rules) contexts.push_back(r.context);
  const auto types = entity_types(all, rules);
  Vocabulary vocab = Vocabulary::build(all, contexts, types, emb ? &*emb : nullptr, cfg.dims.emb_dim, cfg.seed);
  NeroModel model(std::move(vocab), static_cast<int>(schema.size()), cfg.dims, cfg.seed);
  const auto data = make_training_data(model, corpus, part, rules);

  const fs::path log_path = a.log.empty() ? fs::path(a.out) / "train_log.jsonl" : fs::path(a.log);
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  const auto result = train(model, data, cfg, schema, dev, &log);
  model.save(a.out, schema);
  const json summary = {{"best_epoch", result.best_epoch},
                        {"best_dev_f1", a.dev.empty() ? json(nullptr) : json(result.best_dev_f1)},
                        {"delta", result.delta},
                        {"epochs_run", result.epochs.size()},
                        {"early_stopped", result.early_stopped}};
  std::ofstream(fs::path(a.out) / "training.json") << summary.dump(2) << '\n';
  out << "trained " << result.epochs.size() << " epochs; best epoch " << result.best_epoch;
  if (!a.dev.empty()) out << ", dev F1 " << result.best_dev_f1 << ", delta " << result.delta;
  out << "\n";
  return 0;
}

struct EvalArgs {
  std::string predictions, gold, schema, out;
};

int cmd_eval(const EvalArgs& a, const Common& c, std::ostream& out) {
  require_file(a.predictions, "predictions");
  require_file(a.gold, "gold set");
  require_file(a.schema, "schema");
  if (!a.out.empty() || !c.manifest.empty()) {
    auto m = begin(c, "eval", 0);
    m.inputs = {{"predictions", a.predictions}, {"gold", a.gold}, {"schema", a.schema}};
    if (!a.out.empty()) m.outputs = {{"report", a.out}};
    write_manifest(c.manifest.empty() ? a.out + ".manifest.json" : c.manifest, m);
  }
  const auto schema = RelationSchema::load(a.schema);
  const auto preds = load_predictions(a.predictions, schema);
  const auto gold = load_dataset(a.gold, schema);
  const std::string report = report_json(score(preds, gold, schema));
  if (a.out.empty()) {
    out << report << '\n';
  } else {
    std::ofstream f(a.out);
    if (!f) throw std::runtime_error("cannot write " + a.out);
    f << report << '\n';
  }
  return 0;
}

double trained_delta(const fs::path& model_dir) {
  std::ifstream in(model_dir / "training.json");
  if (!in) return 0.0;
  try {
    return json::parse(in).value("delta", 0.0);
  } catch (const json::exception&) {
    return 0.0;
  }
}

struct PredictArgs {
  std::string model, corpus, rules, out, mode = "rc";
  double delta = 0.0;
  CLI::Option* delta_opt = nullptr;
  bool interior = false;
};

int cmd_predict(const PredictArgs& a, const Common& c, std::ostream& out) {
  const PredictMode mode = parse_mode(a.mode);
  require_file(a.model, "model directory");
  require_file(a.corpus, "corpus");
  if (mode == PredictMode::Srm) {
    if (a.rules.empty()) throw ValidationError("srm mode needs --rules");
    require_file(a.rules, "rules");
  }
  double delta = a.delta;
  if (!a.delta_opt->count()) delta = mode == PredictMode::Rc ? trained_delta(a.model) : 0.5;

  auto m = begin(c, "predict", 0);
  m.config = json{{"mode", a.mode}, {"delta", delta}, {"interior_only", a.interior}}.dump();
  m.inputs = {{"model", a.model}, {"corpus", a.corpus}};
  if (!a.rules.empty()) m.inputs["rules"] = a.rules;
  m.outputs = {{"predictions", a.out}};
  write_manifest(c.manifest.empty() ? a.out + ".manifest.json" : c.manifest, m);

  RelationSchema schema;
  const NeroModel model = NeroModel::load(a.model, &schema);
  const auto corpus = load_dataset(a.corpus, schema);
  std::vector<Prediction> preds;
  if (mode == PredictMode::Rc) {
    preds = predict_rc(corpus, model, delta, schema, c.threads);
  } else {
    const auto rules = load_rules(a.rules, schema);
    const SrmRuleBank bank(model, rules, a.interior);
    preds = predict_srm(corpus, model, bank, delta, schema, c.threads);
  }
  save_predictions(a.out, preds, schema);
  out << "wrote " << preds.size() << " predictions (" << a.mode << ", delta " << delta << ")\n";
  return 0;
}

struct ExplainArgs {
  std::string model, corpus, rules, instance, rule, out, svg;
};

int cmd_explain(const ExplainArgs& a, const Common& c, std::ostream& out) {
  require_file(a.model, "model directory");
  require_file(a.corpus, "corpus");
  require_file(a.rules, "rules");
  if (!a.out.empty() || !c.manifest.empty()) {
    auto m = begin(c, "explain", 0);
    m.inputs = {{"model", a.model}, {"corpus", a.corpus}, {"rules", a.rules}};
    m.config = json{{"instance", a.instance}, {"rule", a.rule}}.dump();
    if (!a.out.empty()) m.outputs["explanation"] = a.out;
    if (!a.svg.empty()) m.outputs["svg"] = a.svg;
    write_manifest(c.manifest.empty() ? a.out + ".manifest.json" : c.manifest, m);
  }
  RelationSchema schema;
  const NeroModel model = NeroModel::load(a.model, &schema);
  const auto corpus = load_dataset(a.corpus, schema);
  const auto rules = load_rules(a.rules, schema);
  const Instance* inst = nullptr;
  for (const auto& i : corpus)
    if (i.id == a.instance) inst = &i;
  if (!inst) throw ValidationError("instance not found: " + a.instance);
  const LabelingRule* rule = nullptr;
  for (const auto& r : rules)
    if (r.id == a.rule) rule = &r;
  if (!rule) throw ValidationError("rule not found: " + a.rule);
  const auto e = explain(*inst, *rule, model);
  const std::string text = explanation_json(e, inst->id, rule->id);
  if (a.out.empty()) {
    out << text << '\n';
  } else {
    std::ofstream(a.out) << text << '\n';
  }
  if (!a.svg.empty()) std::ofstream(a.svg) << explanation_svg(e);
  return 0;
}

struct ServeArgs {
  std::string corpus, schema, candidates, log = "annotations.jsonl", snapshot, host = "127.0.0.1", token,
                                          origin = "*";
  int port = 8080;
  std::size_t snapshot_every = 50;
};

int cmd_serve(const ServeArgs& a, const Common& c, std::ostream& out) {
  require_file(a.corpus, "corpus");
  require_file(a.schema, "schema");
  require_file(a.candidates, "candidates");
  const std::string snapshot = a.snapshot.empty() ? a.log + ".snapshot.json" : a.snapshot;
  auto m = begin(c, "serve", 0);
  m.config = json{{"host", a.host}, {"port", a.port}, {"snapshot_every", a.snapshot_every}}.dump();
  m.inputs = {{"corpus", a.corpus}, {"schema", a.schema}, {"candidates", a.candidates}};
  m.outputs = {{"event_log", a.log}, {"snapshot", snapshot}};
  write_manifest(c.manifest.empty() ? a.log + ".manifest.json" : c.manifest, m);

  const auto schema = RelationSchema::load(a.schema);
  AnnotationStore store(load_dataset(a.corpus, schema), load_candidates(a.candidates), schema);
  store.attach(a.log, snapshot, a.snapshot_every);
  AnnotationServer server(store, {a.origin, a.token});
  const int port = server.bind(a.host, a.port);
  if (port < 0) throw std::runtime_error("cannot bind " + a.host + ":" + std::to_string(a.port));
  out << "serving on http://" << a.host << ":" << port << "\n" << std::flush;
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.run();
  g_server = nullptr;
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"nero: rule mining, matching, joint training and inference for relation extraction"};
  app.footer(
      "Training settings resolve as: command-line flag, then --config file key, then built-in default.\n"
      "The seed falls back to the NERO_SEED environment variable before the default (42).\n"
      "Exit codes: 0 success, 1 validation error or missing input, 2 runtime error.");
  app.require_subcommand(1);
  Common common;
  for (int i = 0; i < argc; ++i) common.argv.emplace_back(argv[i]);
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--threads", common.threads, "Worker threads for sharded stages")->check(CLI::PositiveNumber);
    sub->add_option("--manifest", common.manifest, "Run manifest path (default: next to the main output)");
  };

  MineArgs mine;
  auto* s_mine = app.add_subcommand("mine", "Extract candidate rules from a corpus");
  s_mine->add_option("--corpus", mine.corpus, "TACRED-style JSONL corpus")->required();
  s_mine->add_option("--schema", mine.schema, "Relation schema (JSON array); default: read from the corpus");
  s_mine->add_option("--min-freq", mine.min_freq, "Minimum pattern frequency")->capture_default_str();
  s_mine->add_option("--max-len", mine.max_len, "Maximum tokens between the entities")->capture_default_str();
  s_mine->add_option("--examples", mine.examples, "Example sentence ids kept per candidate")->capture_default_str();
  s_mine->add_option("--out", mine.out, "Candidate JSONL output")->required();
  add_common(s_mine);

  MatchArgs match;
  auto* s_match = app.add_subcommand("match", "Partition a corpus with labeling rules");
  s_match->add_option("--corpus", match.corpus)->required();
  s_match->add_option("--schema", match.schema)->required();
  s_match->add_option("--rules", match.rules)->required();
  s_match->add_option("--out-matched", match.out_matched)->required();
  s_match->add_option("--out-unmatched", match.out_unmatched)->required();
  add_common(s_match);

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Jointly train the classifier and soft rule matcher");
  s_train->add_option("--corpus", tr.corpus, "Corpus the partition ids refer to")->required();
  s_train->add_option("--schema", tr.schema)->required();
  s_train->add_option("--matched", tr.matched)->required();
  s_train->add_option("--unmatched", tr.unmatched)->required();
  s_train->add_option("--rules", tr.rules)->required();
  s_train->add_option("--dev", tr.dev, "Labeled dev set; without it training stops on loss and delta = 0");
  s_train->add_option("--emb", tr.emb, "Pretrained word vectors (GloVe text format)");
  s_train->add_option("--config", tr.config, "JSON training config");
  s_train->add_option("--out", tr.out, "Model directory")->required();
  s_train->add_option("--log", tr.log, "Per-epoch JSONL log (default <out>/train_log.jsonl)");
  tr.overrides["alpha"] = s_train->add_option("--alpha", tr.alpha, "L_rules weight (1.0)");
  tr.overrides["beta"] = s_train->add_option("--beta", tr.beta, "L_clus weight (0.05)");
  tr.overrides["gamma"] = s_train->add_option("--gamma", tr.gamma, "L_unmatched weight (0.5)");
  tr.overrides["tau"] = s_train->add_option("--tau", tr.tau, "Contrastive margin (1.0)");
  tr.overrides["sigma"] = s_train->add_option("--sigma", tr.sigma, "Instance-weight temperature (10)");
  tr.overrides["lr"] = s_train->add_option("--lr", tr.lr, "Initial AdaGrad learning rate (0.5)");
  tr.overrides["lr-decay"] = s_train->add_option("--lr-decay", tr.lr_decay, "Per-epoch decay (0.95)");
  tr.overrides["dropout"] = s_train->add_option("--dropout", tr.dropout, "Dropout after the BiLSTM (0.5)");
  tr.overrides["batch-matched"] = s_train->add_option("--batch-matched", tr.batch_matched, "(50)");
  tr.overrides["batch-unmatched"] = s_train->add_option("--batch-unmatched", tr.batch_unmatched, "(100)");
  tr.overrides["emb-dim"] = s_train->add_option("--emb-dim", tr.emb_dim, "Word vector width (100)");
  tr.overrides["hidden-dim"] = s_train->add_option("--hidden-dim", tr.hidden_dim, "LSTM units per direction (100)");
  tr.overrides["attn-dim"] = s_train->add_option("--attn-dim", tr.attn_dim, "Attention width (200)");
  tr.overrides["max-epochs"] = s_train->add_option("--max-epochs", tr.max_epochs, "(50)");
  tr.overrides["patience"] = s_train->add_option("--patience", tr.patience, "Epochs without improvement (10)");
  tr.overrides["seed"] = s_train->add_option("--seed", tr.seed, "RNG seed (NERO_SEED, else 42)");
  s_train->add_flag("--clus-exclude-none", tr.exclude_none, "Leave NONE-headed rules out of L_clus");
  add_common(s_train);

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Score predictions against gold labels");
  s_eval->add_option("--predictions", ev.predictions)->required();
  s_eval->add_option("--gold", ev.gold)->required();
  s_eval->add_option("--schema", ev.schema)->required();
  s_eval->add_option("--out", ev.out, "Report JSON (default: stdout)");
  add_common(s_eval);

  PredictArgs pr;
  auto* s_pred = app.add_subcommand("predict", "Label sentences with a trained model");
  s_pred->add_option("--model", pr.model)->required();
  s_pred->add_option("--corpus", pr.corpus)->required();
  s_pred->add_option("--mode", pr.mode, "rc or srm")->capture_default_str();
  s_pred->add_option("--rules", pr.rules, "Rules for srm mode");
  pr.delta_opt = s_pred->add_option("--delta", pr.delta,
                                    "Threshold (rc default: tuned value from training; srm default 0.5)");
  s_pred->add_flag("--interior-only", pr.interior, "srm mode: compare only the words between the entities");
  s_pred->add_option("--out", pr.out)->required();
  add_common(s_pred);

  ExplainArgs ex;
  auto* s_expl = app.add_subcommand("explain", "Word-level view of one sentence against one rule");
  s_expl->add_option("--model", ex.model)->required();
  s_expl->add_option("--corpus", ex.corpus)->required();
  s_expl->add_option("--rules", ex.rules)->required();
  s_expl->add_option("--instance", ex.instance)->required();
  s_expl->add_option("--rule", ex.rule)->required();
  s_expl->add_option("--out", ex.out, "Explanation JSON (default: stdout)");
  s_expl->add_option("--svg", ex.svg, "Heatmap output");
  add_common(s_expl);

  ServeArgs sv;
  auto* s_serve = app.add_subcommand("serve", "Run the rule annotation API");
  s_serve->add_option("--corpus", sv.corpus)->required();
  s_serve->add_option("--schema", sv.schema)->required();
  s_serve->add_option("--candidates", sv.candidates)->required();
  s_serve->add_option("--log", sv.log, "Append-only event log")->capture_default_str();
  s_serve->add_option("--snapshot", sv.snapshot, "Snapshot file (default <log>.snapshot.json)");
  s_serve->add_option("--snapshot-every", sv.snapshot_every)->capture_default_str();
  s_serve->add_option("--host", sv.host)->capture_default_str();
  s_serve->add_option("--port", sv.port)->capture_default_str();
  s_serve->add_option("--token", sv.token, "Require this X-Nero-Token header");
  s_serve->add_option("--cors-origin", sv.origin)->capture_default_str();
  add_common(s_serve);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*s_mine) return cmd_mine(mine, common, out);
    if (*s_match) return cmd_match(match, common, out, err);
    if (*s_train) return cmd_train(tr, common, out, err);
    if (*s_eval) return cmd_eval(ev, common, out);
    if (*s_pred) return cmd_predict(pr, common, out);
    if (*s_expl) return cmd_explain(ex, common, out);
    if (*s_serve) return cmd_serve(sv, common, out);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace nero
