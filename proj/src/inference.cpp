#include "nero/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "nero/parallel.hpp"

namespace nero {

using nlohmann::json;

std::string to_string(PredictMode m) { return m == PredictMode::Rc ? "rc" : "srm"; }

PredictMode parse_mode(std::string_view s) {
  if (s == "rc") return PredictMode::Rc;
  if (s == "srm") return PredictMode::Srm;
  throw ValidationError("unknown prediction mode '" + std::string(s) + "' (expected rc or srm)");
}

double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

EvalReport score_labels(std::span<const RelationId> predicted, std::span<const RelationId> gold,
                        const RelationSchema& schema) {
  if (predicted.size() != gold.size()) throw ValidationError("score: prediction and gold counts differ");
  EvalReport r;
  for (const auto& name : schema.names()) r.per_relation[name];
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const RelationId p = predicted[i], g = gold[i];
    ++r.confusion[schema.name(g)][schema.name(p)];
    if (!schema.is_none(p)) {
      ++r.predicted;
      ++r.per_relation[schema.name(p)].predicted;
    }
    if (!schema.is_none(g)) {
      ++r.gold;
      ++r.per_relation[schema.name(g)].gold;
    }
    if (p == g && !schema.is_none(p)) {
      ++r.correct;
      ++r.per_relation[schema.name(p)].correct;
    }
  }
  r.precision = r.predicted ? static_cast<double>(r.correct) / static_cast<double>(r.predicted) : 0.0;
  r.recall = r.gold ? static_cast<double>(r.correct) / static_cast<double>(r.gold) : 0.0;
  r.f1 = f1_score(r.precision, r.recall);
  return r;
}

EvalReport score(std::span<const Prediction> predictions, std::span<const Instance> gold, const RelationSchema& schema) {
  if (predictions.size() != gold.size())
    throw ValidationError("score: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(gold.size()) + " gold instances");
  std::vector<RelationId> p, g;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predictions[i].instance_id != gold[i].id)
      throw ValidationError("score: id mismatch at position " + std::to_string(i) + " ('" +
                            predictions[i].instance_id + "' vs '" + gold[i].id + "')");
    if (!gold[i].gold) throw ValidationError("score: instance " + gold[i].id + " has no gold label");
    p.push_back(predictions[i].relation);
    g.push_back(*gold[i].gold);
  }
  return score_labels(p, g, schema);
}

// ---------------------------------------------------------------------------

double normalized_entropy(std::span<const double> probs) {
  if (probs.size() < 2) return 0.0;
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return std::clamp(h / std::log(static_cast<double>(probs.size())), 0.0, 1.0);
}

Prediction decide_rc(std::span<const double> probs, double delta, RelationId none_index) {
  Prediction out;
  out.mode = PredictMode::Rc;
  const auto it = std::max_element(probs.begin(), probs.end());
  out.relation = static_cast<RelationId>(it - probs.begin());
  out.confidence = *it;
  if (delta > 0.0 && normalized_entropy(probs) > 1.0 - delta) out.relation = none_index;
  return out;
}

Prediction predict_rc(const Instance& inst, const NeroModel& model, double delta, const RelationSchema& schema) {
  const TokenIds ids = model.encode_sentence(inst);
  auto probs = model.rc_predict(std::span<const TokenIds>(&ids, 1));
  Prediction p = decide_rc(probs[0], delta, schema.none_index());
  p.instance_id = inst.id;
  return p;
}

namespace {

std::vector<std::vector<double>> rc_probs(std::span<const Instance> corpus, const NeroModel& model, unsigned threads) {
  std::vector<TokenIds> ids;
  ids.reserve(corpus.size());
  for (const auto& inst : corpus) ids.push_back(model.encode_sentence(inst));
  constexpr std::size_t kShard = 64;
  const std::size_t shards = (ids.size() + kShard - 1) / kShard;
  std::vector<std::vector<std::vector<double>>> parts(shards);
  parallel_for(shards, threads, [&](std::size_t s) {
    const std::size_t lo = s * kShard;
    parts[s] = model.rc_predict(std::span<const TokenIds>(ids).subspan(lo, std::min(kShard, ids.size() - lo)));
  });
  std::vector<std::vector<double>> out;
  out.reserve(ids.size());
  for (auto& p : parts)
    for (auto& row : p) out.push_back(std::move(row));
  return out;
}

std::vector<RelationId> gold_labels(std::span<const Instance> dev) {
  std::vector<RelationId> g;
  for (const auto& inst : dev) {
    if (!inst.gold) throw ValidationError("instance " + inst.id + " has no gold label");
    g.push_back(*inst.gold);
  }
  return g;
}

template <typename Decide>
ThresholdChoice grid_search(std::size_t n, std::span<const RelationId> gold, const RelationSchema& schema, Decide decide) {
  ThresholdChoice best{0.0, -1.0};
  std::vector<RelationId> pred(n);
  for (int k = 0; k <= 100; ++k) {
    const double delta = k / 100.0;
    for (std::size_t i = 0; i < n; ++i) pred[i] = decide(i, delta);
    const double f1 = score_labels(pred, gold, schema).f1;
    if (f1 > best.f1) best = {delta, f1};
  }
  return best;
}

}  // namespace

std::vector<Prediction> predict_rc(std::span<const Instance> corpus, const NeroModel& model, double delta,
                                   const RelationSchema& schema, unsigned threads) {
  const auto probs = rc_probs(corpus, model, threads);
  std::vector<Prediction> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    out.push_back(decide_rc(probs[i], delta, schema.none_index()));
    out.back().instance_id = corpus[i].id;
  }
  return out;
}

// ---------------------------------------------------------------------------

SrmRuleBank::SrmRuleBank(const NeroModel& model, std::span<const LabelingRule> rules, bool interior_only)
    : rules_(rules.begin(), rules.end()), interior_only_(interior_only) {
  std::vector<TokenIds> ids;
  for (const auto& r : rules_) {
    if (interior_only_ && r.context.size() > 2)
      ids.push_back(model.vocab().encode(std::span<const std::string>(r.context).subspan(1, r.context.size() - 2)));
    else
      ids.push_back(model.encode_rule(r));
  }
  if (!ids.empty()) pooled_ = model.srm_pooled(ids);
}

std::vector<SrmMatch> srm_best_matches(std::span<const Instance> corpus, const NeroModel& model,
                                       const SrmRuleBank& bank, unsigned threads) {
  std::vector<SrmMatch> out(corpus.size());
  if (bank.rules().empty() || corpus.empty()) return out;
  std::vector<TokenIds> ids;
  ids.reserve(corpus.size());
  for (const auto& inst : corpus)
    ids.push_back(bank.interior_only() ? model.encode_interior(inst) : model.encode_context(inst));
  const auto pooled = model.srm_pooled(ids);
  const auto rules = bank.rules();
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    std::vector<std::vector<double>> compatible;
    std::vector<int> index;
    for (std::size_t r = 0; r < rules.size(); ++r)
      if (rules[r].subj_type == corpus[i].subj_type && rules[r].obj_type == corpus[i].obj_type) {
        compatible.push_back(bank.pooled()[r]);
        index.push_back(static_cast<int>(r));
      }
    if (compatible.empty()) return;
    const auto scores = model.srm_scores(std::span<const std::vector<double>>(&pooled[i], 1), compatible)[0];
    SrmMatch best;
    for (std::size_t k = 0; k < scores.size(); ++k) {
      const auto& cand = rules[static_cast<std::size_t>(index[k])];
      if (best.rule < 0 || scores[k] > best.score ||
          (scores[k] == best.score && cand.id < rules[static_cast<std::size_t>(best.rule)].id)) {
        best = {index[k], scores[k]};
      }
    }
    out[i] = best;
  });
  return out;
}

Prediction decide_srm(const std::string& instance_id, const SrmMatch& match, const SrmRuleBank& bank, double delta,
                      RelationId none_index) {
  Prediction p;
  p.instance_id = instance_id;
  p.mode = PredictMode::Srm;
  p.relation = none_index;
  if (match.rule < 0) return p;
  const auto& rule = bank.rules()[static_cast<std::size_t>(match.rule)];
  p.best_rule = rule.id;
  p.raw_score = match.score;
  p.confidence = (match.score + 1.0) / 2.0;
  if (match.score >= delta) p.relation = rule.head;
  return p;
}

Prediction predict_srm(const Instance& inst, const NeroModel& model, const SrmRuleBank& bank, double delta,
                       const RelationSchema& schema) {
  const auto m = srm_best_matches(std::span<const Instance>(&inst, 1), model, bank);
  return decide_srm(inst.id, m[0], bank, delta, schema.none_index());
}

std::vector<Prediction> predict_srm(std::span<const Instance> corpus, const NeroModel& model, const SrmRuleBank& bank,
                                    double delta, const RelationSchema& schema, unsigned threads) {
  const auto matches = srm_best_matches(corpus, model, bank, threads);
  std::vector<Prediction> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    out.push_back(decide_srm(corpus[i].id, matches[i], bank, delta, schema.none_index()));
  return out;
}

ThresholdChoice tune_threshold_rc(std::span<const std::vector<double>> probs, std::span<const RelationId> gold,
                                  const RelationSchema& schema) {
  if (probs.empty()) throw std::invalid_argument("tune_threshold: empty dev set");
  std::vector<RelationId> argmax(probs.size());
  std::vector<double> entropy(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    argmax[i] = static_cast<RelationId>(std::max_element(probs[i].begin(), probs[i].end()) - probs[i].begin());
    entropy[i] = normalized_entropy(probs[i]);
  }
  return grid_search(probs.size(), gold, schema, [&](std::size_t i, double delta) {
    return delta > 0.0 && entropy[i] > 1.0 - delta ? schema.none_index() : argmax[i];
  });
}

ThresholdChoice tune_threshold_srm(std::span<const SrmMatch> matches, const SrmRuleBank& bank,
                                   std::span<const RelationId> gold, const RelationSchema& schema) {
  if (matches.empty()) throw std::invalid_argument("tune_threshold: empty dev set");
  return grid_search(matches.size(), gold, schema, [&](std::size_t i, double delta) {
    return decide_srm("", matches[i], bank, delta, schema.none_index()).relation;
  });
}

ThresholdChoice tune_threshold(std::span<const Instance> dev, const NeroModel& model, PredictMode mode,
                               const RelationSchema& schema, const SrmRuleBank* bank) {
  if (dev.empty()) throw std::invalid_argument("tune_threshold: empty dev set");
  const auto gold = gold_labels(dev);
  if (mode == PredictMode::Rc) return tune_threshold_rc(rc_probs(dev, model, 1), gold, schema);
  if (!bank) throw std::invalid_argument("tune_threshold: srm mode needs a rule bank");
  return tune_threshold_srm(srm_best_matches(dev, model, *bank), *bank, gold, schema);
}

// ---------------------------------------------------------------------------

Explanation explain(const Instance& inst, const LabelingRule& rule, const NeroModel& model) {
  Explanation e;
  e.sentence_tokens = stemmed_context(inst);
  e.rule_tokens = rule.context;
  const TokenIds s_ids = model.vocab().encode(e.sentence_tokens);
  const TokenIds p_ids = model.vocab().encode(e.rule_tokens);
  {
    ad::NoGradGuard guard;
    auto s = model.srm_embed(std::span<const TokenIds>(&s_ids, 1));
    auto p = model.srm_embed(std::span<const TokenIds>(&p_ids, 1));
    e.sentence_attention = s.attention->value;
    e.rule_attention = p.attention->value;
  }
  // srm_scores applies D itself, so raw embedding rows go in.
  const auto& emb = model.params().get("embedding");
  const int dw = model.dims().emb_dim;
  auto row = [&](int id) {
    std::vector<double> y(static_cast<std::size_t>(dw));
    for (int k = 0; k < dw; ++k) y[static_cast<std::size_t>(k)] = emb->at(id, k);
    return y;
  };
  std::vector<std::vector<double>> ys, yp;
  for (int id : s_ids) ys.push_back(row(id));
  for (int id : p_ids) yp.push_back(row(id));
  e.similarity = model.srm_scores(ys, yp);
  e.score = model.srm_score(s_ids, p_ids);
  return e;
}

// ---------------------------------------------------------------------------

void save_predictions(const std::filesystem::path& path, std::span<const Prediction> preds,
                      const RelationSchema& schema) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& p : preds) {
    json j = {{"id", p.instance_id},
              {"relation", schema.name(p.relation)},
              {"confidence", p.confidence},
              {"mode", to_string(p.mode)}};
    if (p.mode == PredictMode::Srm) {
      j["best_rule"] = p.best_rule.empty() ? json(nullptr) : json(p.best_rule);
      j["score"] = p.raw_score;
    }
    out << j.dump() << '\n';
  }
}

std::vector<Prediction> load_predictions(const std::filesystem::path& path, const RelationSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open predictions " + path.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      Prediction p;
      p.instance_id = j.at("id").get<std::string>();
      p.relation = schema.index_of(j.at("relation").get<std::string>());
      p.confidence = j.value("confidence", 0.0);
      p.mode = parse_mode(j.value("mode", std::string("rc")));
      if (j.contains("best_rule") && j["best_rule"].is_string()) p.best_rule = j["best_rule"].get<std::string>();
      p.raw_score = j.value("score", 0.0);
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed prediction: ") + e.what(), lineno);
    }
  }
  return out;
}

std::string report_json(const EvalReport& r) {
  json j;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["correct"] = r.correct;
  j["predicted"] = r.predicted;
  j["gold"] = r.gold;
  for (const auto& [name, c] : r.per_relation)
    j["per_relation"][name] = {{"correct", c.correct}, {"predicted", c.predicted}, {"gold", c.gold}};
  j["confusion"] = r.confusion;
  return j.dump(2);
}

std::string explanation_json(const Explanation& e, const std::string& instance_id, const std::string& rule_id) {
  json j = {{"instance_id", instance_id},
            {"rule_id", rule_id},
            {"sentence_tokens", e.sentence_tokens},
            {"rule_tokens", e.rule_tokens},
            {"sentence_attention", e.sentence_attention},
            {"rule_attention", e.rule_attention},
            {"similarity", e.similarity},
            {"score", e.score}};
  return j.dump(2);
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string explanation_svg(const Explanation& e) {
  constexpr int cell = 36, left = 140, top = 120;
  const int rows = static_cast<int>(e.sentence_tokens.size());
  const int cols = static_cast<int>(e.rule_tokens.size());
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + cols * cell + 20 << "\" height=\""
    << top + rows * cell + 40 << "\" font-family=\"monospace\" font-size=\"11\">\n";
  s << "<text x=\"4\" y=\"16\">score " << e.score << "</text>\n";
  for (int j = 0; j < cols; ++j) {
    const int x = left + j * cell + cell / 2;
    s << "<text transform=\"translate(" << x << "," << top - 6 << ") rotate(-60)\">"
      << xml_escape(e.rule_tokens[static_cast<std::size_t>(j)]) << " (" << e.rule_attention[static_cast<std::size_t>(j)]
      << ")</text>\n";
  }
  for (int i = 0; i < rows; ++i) {
    const int y = top + i * cell;
    s << "<text x=\"4\" y=\"" << y + cell / 2 + 4 << "\">" << xml_escape(e.sentence_tokens[static_cast<std::size_t>(i)])
      << " (" << e.sentence_attention[static_cast<std::size_t>(i)] << ")</text>\n";
    for (int j = 0; j < cols; ++j) {
      const double v = e.similarity[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      // Blue for negative, red for positive similarity.
      const int r = v > 0 ? 255 : static_cast<int>(255 * (1 + v));
      const int b = v < 0 ? 255 : static_cast<int>(255 * (1 - v));
      const int g = static_cast<int>(255 * (1 - std::abs(v)));
      s << "<rect x=\"" << left + j * cell << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
        << "\" fill=\"rgb(" << r << "," << g << "," << b << ")\"/>"
        << "<text x=\"" << left + j * cell + 4 << "\" y=\"" << y + cell / 2 + 4 << "\">" << v << "</text>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace nero
