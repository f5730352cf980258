#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nero/data.hpp"
#include "nero/models.hpp"
#include "nero/rules.hpp"

namespace nero {

enum class PredictMode { Rc, Srm };
std::string to_string(PredictMode m);
PredictMode parse_mode(std::string_view s);

struct Prediction {
  std::string instance_id;
  RelationId relation = 0;
  double confidence = 0.0;  // rc: max probability; srm: (score + 1) / 2
  PredictMode mode = PredictMode::Rc;
  std::string best_rule;    // srm mode only; empty when no compatible rule
  double raw_score = 0.0;   // srm mode: best cosine score
};

struct RelationCounts {
  std::size_t correct = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
};

/// Micro P/R/F1 with NONE excluded from credit.
struct EvalReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t correct = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
  std::map<std::string, RelationCounts> per_relation;
  std::map<std::string, std::map<std::string, std::size_t>> confusion;  // gold -> predicted -> count
};

double f1_score(double precision, double recall);

/// Labels are aligned by position; NONE never earns credit.
EvalReport score_labels(std::span<const RelationId> predicted, std::span<const RelationId> gold,
                        const RelationSchema& schema);
/// Throws ValidationError when ids are misaligned or a gold label is missing.
EvalReport score(std::span<const Prediction> predictions, std::span<const Instance> gold, const RelationSchema& schema);

/// Entropy of `probs` divided by ln(|probs|), in [0, 1].
double normalized_entropy(std::span<const double> probs);

/// Argmax class, replaced by NONE when normalized entropy exceeds 1 - delta.
/// delta = 0 never abstains.
Prediction decide_rc(std::span<const double> probs, double delta, RelationId none_index);

Prediction predict_rc(const Instance& inst, const NeroModel& model, double delta, const RelationSchema& schema);
std::vector<Prediction> predict_rc(std::span<const Instance> corpus, const NeroModel& model, double delta,
                                   const RelationSchema& schema, unsigned threads = 1);

/// Rules pre-encoded for SRM-mode prediction.
class SrmRuleBank {
 public:
  /// `interior_only` strips the entity masks from rule contexts, matching
  /// the unseen-relation protocol.
  SrmRuleBank(const NeroModel& model, std::span<const LabelingRule> rules, bool interior_only = false);

  bool interior_only() const { return interior_only_; }
  std::span<const LabelingRule> rules() const { return rules_; }
  const std::vector<std::vector<double>>& pooled() const { return pooled_; }

 private:
  std::vector<LabelingRule> rules_;
  std::vector<std::vector<double>> pooled_;
  bool interior_only_;
};

/// Best type-compatible rule and its score, before thresholding.
struct SrmMatch {
  int rule = -1;  // index into the bank, -1 when no rule shares the entity types
  double score = -1.0;
};

std::vector<SrmMatch> srm_best_matches(std::span<const Instance> corpus, const NeroModel& model,
                                       const SrmRuleBank& bank, unsigned threads = 1);
Prediction decide_srm(const std::string& instance_id, const SrmMatch& match, const SrmRuleBank& bank, double delta,
                      RelationId none_index);

Prediction predict_srm(const Instance& inst, const NeroModel& model, const SrmRuleBank& bank, double delta,
                       const RelationSchema& schema);
std::vector<Prediction> predict_srm(std::span<const Instance> corpus, const NeroModel& model, const SrmRuleBank& bank,
                                    double delta, const RelationSchema& schema, unsigned threads = 1);

/// Grid of 101 thresholds k/100; returns the one with the best F1 (ties to the smaller).
struct ThresholdChoice {
  double delta = 0.0;
  double f1 = 0.0;
};
ThresholdChoice tune_threshold_rc(std::span<const std::vector<double>> probs, std::span<const RelationId> gold,
                                  const RelationSchema& schema);
ThresholdChoice tune_threshold_srm(std::span<const SrmMatch> matches, const SrmRuleBank& bank,
                                   std::span<const RelationId> gold, const RelationSchema& schema);

/// Dev-set tuning. Throws std::invalid_argument on an empty dev set.
ThresholdChoice tune_threshold(std::span<const Instance> dev, const NeroModel& model, PredictMode mode,
                               const RelationSchema& schema, const SrmRuleBank* bank = nullptr);

/// Word-level view of one sentence/rule comparison.
struct Explanation {
  std::vector<std::string> sentence_tokens;  // normalized context span
  std::vector<std::string> rule_tokens;
  std::vector<double> sentence_attention;
  std::vector<double> rule_attention;
  std::vector<std::vector<double>> similarity;  // cos(D x_i, D x_j)
  double score = 0.0;
};

Explanation explain(const Instance& inst, const LabelingRule& rule, const NeroModel& model);

// --- file formats -------------------------------------------------------------
void save_predictions(const std::filesystem::path& path, std::span<const Prediction> preds,
                      const RelationSchema& schema);
std::vector<Prediction> load_predictions(const std::filesystem::path& path, const RelationSchema& schema);
std::string report_json(const EvalReport& report);
std::string explanation_json(const Explanation& e, const std::string& instance_id, const std::string& rule_id);
/// Heatmap of the similarity matrix with token labels.
std::string explanation_svg(const Explanation& e);

}  // namespace nero
