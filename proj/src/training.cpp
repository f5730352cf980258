#include "nero/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "nero/inference.hpp"

namespace nero {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ValidationError("config: " + field + " " + what);
}

}  // namespace

void TrainingConfig::validate() const {
  require(alpha >= 0.0, "alpha", "must be >= 0");
  require(beta >= 0.0, "beta", "must be >= 0");
  require(gamma >= 0.0, "gamma", "must be >= 0");
  require(tau > 0.0, "tau", "must be > 0");
  require(sigma >= 0.0, "sigma", "must be >= 0");
  require(batch_matched > 0, "batch_matched", "must be > 0");
  require(batch_unmatched > 0, "batch_unmatched", "must be > 0");
  require(lr0 > 0.0, "lr", "must be > 0");
  require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay", "must be in (0, 1]");
  require(dims.dropout >= 0.0 && dims.dropout < 1.0, "dropout", "must be in [0, 1)");
  require(dims.emb_dim > 0, "emb_dim", "must be > 0");
  require(dims.hidden_dim > 0, "hidden_dim", "must be > 0");
  require(dims.attn_dim > 0, "attn_dim", "must be > 0");
  require(dims.lstm_layers > 0, "lstm_layers", "must be > 0");
  require(max_epochs > 0, "max_epochs", "must be > 0");
  require(patience > 0, "patience", "must be > 0");
}

TrainingConfig parse_config(std::string_view json_text, TrainingConfig cfg) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("config: expected a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "alpha") cfg.alpha = v.get<double>();
      else if (key == "beta") cfg.beta = v.get<double>();
      else if (key == "gamma") cfg.gamma = v.get<double>();
      else if (key == "tau") cfg.tau = v.get<double>();
      else if (key == "sigma") cfg.sigma = v.get<double>();
      else if (key == "batch_matched") cfg.batch_matched = v.get<int>();
      else if (key == "batch_unmatched") cfg.batch_unmatched = v.get<int>();
      else if (key == "lr") cfg.lr0 = v.get<double>();
      else if (key == "lr_decay") cfg.lr_decay = v.get<double>();
      else if (key == "dropout") cfg.dims.dropout = v.get<double>();
      else if (key == "emb_dim") cfg.dims.emb_dim = v.get<int>();
      else if (key == "hidden_dim") cfg.dims.hidden_dim = v.get<int>();
      else if (key == "attn_dim") cfg.dims.attn_dim = v.get<int>();
      else if (key == "lstm_layers") cfg.dims.lstm_layers = v.get<int>();
      else if (key == "max_epochs") cfg.max_epochs = v.get<int>();
      else if (key == "patience") cfg.patience = v.get<int>();
      else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (key == "clus_include_none") cfg.clus_include_none = v.get<bool>();
      else throw ValidationError("config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

TrainingConfig load_config(const std::filesystem::path& path, TrainingConfig base) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

std::string config_json(const TrainingConfig& c) {
  json j = {{"alpha", c.alpha},
            {"beta", c.beta},
            {"gamma", c.gamma},
            {"tau", c.tau},
            {"sigma", c.sigma},
            {"batch_matched", c.batch_matched},
            {"batch_unmatched", c.batch_unmatched},
            {"lr", c.lr0},
            {"lr_decay", c.lr_decay},
            {"dropout", c.dims.dropout},
            {"emb_dim", c.dims.emb_dim},
            {"hidden_dim", c.dims.hidden_dim},
            {"attn_dim", c.dims.attn_dim},
            {"lstm_layers", c.dims.lstm_layers},
            {"max_epochs", c.max_epochs},
            {"patience", c.patience},
            {"seed", c.seed},
            {"clus_include_none", c.clus_include_none}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------

RuleSet encode_rules(const NeroModel& model, std::span<const LabelingRule> rules) {
  RuleSet out;
  for (const auto& r : rules) {
    out.tokens.push_back(model.encode_rule(r));
    out.heads.push_back(r.head);
    out.ids.push_back(r.id);
  }
  return out;
}

TrainingData make_training_data(const NeroModel& model, std::span<const Instance> corpus,
                                const MatchPartition& partition, std::span<const LabelingRule> rules) {
  std::unordered_map<std::string, const Instance*> by_id;
  for (const auto& inst : corpus) by_id.emplace(inst.id, &inst);
  auto lookup = [&](const std::string& id) -> const Instance& {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("partition names unknown instance '" + id + "'");
    return *it->second;
  };
  TrainingData d;
  for (const auto& m : partition.matched) {
    d.matched.push_back(model.encode_sentence(lookup(m.instance_id)));
    d.matched_labels.push_back(m.label);
  }
  for (const auto& id : partition.unmatched) {
    const Instance& inst = lookup(id);
    d.unmatched_ids.push_back(id);
    d.unmatched.push_back(model.encode_sentence(inst));
    d.unmatched_context.push_back(model.encode_context(inst));
  }
  d.rules = encode_rules(model, rules);
  return d;
}

// ---------------------------------------------------------------------------

ad::Var loss_matched(const NeroModel& model, std::span<const TokenIds> batch, std::span<const int> labels, bool train,
                     std::mt19937_64& rng) {
  if (batch.empty()) throw std::invalid_argument("loss_matched: empty batch");
  if (batch.size() != labels.size()) throw std::invalid_argument("loss_matched: label count differs from batch");
  const auto out = model.rc_forward(batch, train, rng);
  return ad::cross_entropy_from_probs(out.probs, labels);
}

ad::Var loss_rules(const NeroModel& model, const RuleSet& rules, bool train, std::mt19937_64& rng) {
  return loss_matched(model, rules.tokens, rules.heads, train, rng);
}

ad::Var loss_clus(const NeroModel& model, const RuleSet& rules, double tau, std::optional<int> excluded_head) {
  std::vector<TokenIds> tokens;
  std::vector<int> heads;
  for (std::size_t i = 0; i < rules.size(); ++i) {
    if (excluded_head && rules.heads[i] == *excluded_head) continue;
    tokens.push_back(rules.tokens[i]);
    heads.push_back(rules.heads[i]);
  }
  if (tokens.empty()) return ad::scalar(0.0);
  const std::size_t n = tokens.size();
  const auto pooled = model.srm_embed(tokens).pooled;
  const auto S = model.srm_score_matrix(pooled, pooled);  // [n, n]

  std::vector<std::uint8_t> same(n * n, 0), diff(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      (heads[i] == heads[j] ? same : diff)[i * n + j] = 1;
    }
  // dist+ = max(tau - S, 0)^2, dist- = 1 - max(S, 0)^2.
  const auto dist_pos = ad::square(ad::relu(ad::add_scalar(ad::scale(S, -1.0), tau)));
  const auto dist_neg = ad::add_scalar(ad::scale(ad::square(ad::relu(S)), -1.0), 1.0);
  const auto hardest_pos = ad::row_max_masked(dist_pos, same);
  const auto hardest_neg = ad::row_min_masked(dist_neg, diff);
  return ad::scale(ad::sum(ad::sub(hardest_pos, hardest_neg)), 1.0 / static_cast<double>(n));
}

std::vector<PseudoLabel> pseudo_label_batch(const NeroModel& model, std::span<const TokenIds> contexts,
                                            const RuleSet& rules, double sigma, std::span<const std::string> ids) {
  if (contexts.empty()) throw std::invalid_argument("pseudo_label_batch: empty batch");
  if (rules.empty()) throw std::invalid_argument("pseudo_label_batch: no rules");
  const auto zs = model.srm_pooled(contexts);
  const auto zp = model.srm_pooled(rules.tokens);
  const auto scores = model.srm_scores(zs, zp);

  std::vector<PseudoLabel> out(contexts.size());
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < rules.size(); ++r) {
      if (scores[i][r] > scores[i][best] || (scores[i][r] == scores[i][best] && rules.ids[r] < rules.ids[best]))
        best = r;
    }
    auto& pl = out[i];
    if (!ids.empty()) pl.instance_id = ids[i];
    pl.rule = static_cast<int>(best);
    pl.rule_id = rules.ids[best];
    pl.relation = rules.heads[best];
    pl.score = scores[i][best];
  }
  double top = -std::numeric_limits<double>::infinity();
  for (const auto& pl : out) top = std::max(top, sigma * pl.score);
  double z = 0.0;
  for (auto& pl : out) z += (pl.weight = std::exp(sigma * pl.score - top));
  for (auto& pl : out) pl.weight /= z;
  return out;
}

ad::Var loss_unmatched(const NeroModel& model, std::span<const TokenIds> sentences,
                       std::span<const PseudoLabel> labels, bool train, std::mt19937_64& rng) {
  if (sentences.empty()) throw std::invalid_argument("loss_unmatched: empty batch");
  if (sentences.size() != labels.size()) throw std::invalid_argument("loss_unmatched: label count differs");
  std::vector<int> target;
  std::vector<double> weight;
  for (const auto& pl : labels) {
    target.push_back(pl.relation);
    weight.push_back(pl.weight);
  }
  const auto out = model.rc_forward(sentences, train, rng);
  return ad::cross_entropy_from_probs(out.probs, target, weight, static_cast<double>(sentences.size()));
}

ad::Var joint_loss(const NeroModel& model, const TrainingData& data, const TrainingConfig& cfg,
                   std::span<const std::size_t> matched_batch, std::span<const std::size_t> unmatched_batch,
                   bool train, std::mt19937_64& rng, const RelationSchema& schema, LossParts* parts) {
  LossParts lp;
  std::vector<TokenIds> xs;
  std::vector<int> ys;
  for (std::size_t i : matched_batch) {
    xs.push_back(data.matched[i]);
    ys.push_back(data.matched_labels[i]);
  }
  ad::Var total = loss_matched(model, xs, ys, train, rng);
  lp.matched = total->item();

  if (cfg.alpha > 0.0 && !data.rules.empty()) {
    const auto l = loss_rules(model, data.rules, train, rng);
    lp.rules = l->item();
    total = ad::add(total, ad::scale(l, cfg.alpha));
  }
  if (cfg.beta > 0.0 && !data.rules.empty()) {
    const auto excluded = cfg.clus_include_none ? std::optional<int>{} : std::optional<int>{schema.none_index()};
    const auto l = loss_clus(model, data.rules, cfg.tau, excluded);
    lp.clus = l->item();
    total = ad::add(total, ad::scale(l, cfg.beta));
  }
  if (cfg.gamma > 0.0 && !data.rules.empty() && !unmatched_batch.empty()) {
    std::vector<TokenIds> sent, ctx;
    for (std::size_t i : unmatched_batch) {
      sent.push_back(data.unmatched[i]);
      ctx.push_back(data.unmatched_context[i]);
    }
    std::vector<PseudoLabel> labels;
    {
      ad::NoGradGuard guard;
      labels = pseudo_label_batch(model, ctx, data.rules, cfg.sigma);
    }
    const auto l = loss_unmatched(model, sent, labels, train, rng);
    lp.unmatched = l->item();
    total = ad::add(total, ad::scale(l, cfg.gamma));
  }
  lp.total = total->item();
  if (parts) *parts = lp;
  return total;
}

// ---------------------------------------------------------------------------

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

/// Endless reshuffled stream of indices, drawn without replacement per pass.
class Sampler {
 public:
  Sampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {}

  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    k = std::min(k, n_);
    while (out.size() < k) {
      if (pos_ >= order_.size()) {
        order_ = permutation(n_, rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string epoch_json(const EpochRecord& r) {
  json j = {{"epoch", r.epoch},
            {"lr", r.lr},
            {"steps", r.steps},
            {"loss", r.mean.total},
            {"loss_matched", r.mean.matched},
            {"loss_rules", r.mean.rules},
            {"loss_clus", r.mean.clus},
            {"loss_unmatched", r.mean.unmatched},
            {"dev_precision", optional_json(r.dev_precision)},
            {"dev_recall", optional_json(r.dev_recall)},
            {"dev_f1", optional_json(r.dev_f1)},
            {"delta", optional_json(r.delta)}};
  return j.dump();
}

TrainResult train(NeroModel& model, const TrainingData& data, const TrainingConfig& cfg,
                  const RelationSchema& schema, std::span<const Instance> dev, std::ostream* log) {
  cfg.validate();
  if (data.matched.empty()) throw ValidationError("training needs at least one hard-matched sentence");

  // Independent streams so that enabling one loss term never shifts another's draws.
  std::mt19937_64 matched_rng(cfg.seed ^ 0x6d61746368656400ULL);
  Sampler unmatched_sampler(data.unmatched.size(), cfg.seed ^ 0x756e6d6174636800ULL);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x64726f706f757400ULL);

  ad::AdaGrad opt(cfg.lr0, cfg.lr_decay);
  auto& params = model.params();
  TrainResult result;
  std::vector<std::vector<double>> best_params = params.snapshot();
  double best_loss = std::numeric_limits<double>::infinity();
  double best_f1 = -1.0;
  int since_best = 0;
  const std::size_t bm = static_cast<std::size_t>(cfg.batch_matched);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    opt.set_epoch(epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.learning_rate();
    const auto order = permutation(data.matched.size(), matched_rng);
    for (std::size_t lo = 0; lo < order.size(); lo += bm) {
      const std::span<const std::size_t> mb(order.data() + lo, std::min(bm, order.size() - lo));
      std::vector<std::size_t> ub;
      if (cfg.gamma > 0.0 && !data.unmatched.empty())
        ub = unmatched_sampler.next(static_cast<std::size_t>(cfg.batch_unmatched));
      LossParts lp;
      const auto loss = joint_loss(model, data, cfg, mb, ub, true, dropout_rng, schema, &lp);
      params.zero_grad();
      ad::backward(loss);
      opt.step(params);
      result.step_losses.push_back(lp.total);
      rec.mean.total += lp.total;
      rec.mean.matched += lp.matched;
      rec.mean.rules += lp.rules;
      rec.mean.clus += lp.clus;
      rec.mean.unmatched += lp.unmatched;
      ++rec.steps;
    }
    const double k = 1.0 / rec.steps;
    rec.mean.total *= k;
    rec.mean.matched *= k;
    rec.mean.rules *= k;
    rec.mean.clus *= k;
    rec.mean.unmatched *= k;

    bool improved;
    if (!dev.empty()) {
      const auto choice = tune_threshold(dev, model, PredictMode::Rc, schema);
      const auto preds = predict_rc(dev, model, choice.delta, schema);
      const auto report = score(preds, dev, schema);
      rec.dev_precision = report.precision;
      rec.dev_recall = report.recall;
      rec.dev_f1 = report.f1;
      rec.delta = choice.delta;
      improved = report.f1 > best_f1;
      if (improved) {
        best_f1 = report.f1;
        result.delta = choice.delta;
      }
    } else {
      improved = rec.mean.total < best_loss;
      if (improved) best_loss = rec.mean.total;
    }
    if (improved) {
      best_params = params.snapshot();
      result.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (log) *log << epoch_json(rec) << '\n' << std::flush;
    result.epochs.push_back(rec);
    if (since_best >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  params.restore(best_params);
  params.zero_grad();
  result.best_dev_f1 = std::max(best_f1, 0.0);
  return result;
}

}  // namespace nero
