#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nero/autodiff.hpp"
#include "nero/data.hpp"
#include "nero/matcher.hpp"
#include "nero/models.hpp"
#include "nero/rules.hpp"

namespace nero {

struct TrainingConfig {
  double alpha = 1.0;   // L_rules weight
  double beta = 0.05;   // L_clus weight
  double gamma = 0.5;   // L_unmatched weight
  double tau = 1.0;     // contrastive margin
  double sigma = 10.0;  // instance-weight temperature
  int batch_matched = 50;
  int batch_unmatched = 100;
  double lr0 = 0.5;
  double lr_decay = 0.95;
  ModelDims dims;
  int max_epochs = 50;
  int patience = 10;
  std::uint64_t seed = 42;
  bool clus_include_none = true;

  /// Throws ValidationError naming the offending field.
  void validate() const;
};

/// Overlays the keys present in `json_text` on `base`; unknown keys are rejected.
TrainingConfig parse_config(std::string_view json_text, TrainingConfig base = {});
TrainingConfig load_config(const std::filesystem::path& path, TrainingConfig base = {});
std::string config_json(const TrainingConfig& cfg);

/// Encoded rules in a fixed order.
struct RuleSet {
  std::vector<TokenIds> tokens;
  std::vector<int> heads;
  std::vector<std::string> ids;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
};
RuleSet encode_rules(const NeroModel& model, std::span<const LabelingRule> rules);

/// Everything the loop consumes, already mapped to token ids.
struct TrainingData {
  std::vector<TokenIds> matched;  // masked sentences
  std::vector<int> matched_labels;
  std::vector<std::string> unmatched_ids;
  std::vector<TokenIds> unmatched;          // masked sentences, RC input
  std::vector<TokenIds> unmatched_context;  // context spans, SRM input
  RuleSet rules;
};
/// Throws ValidationError when the partition names an id missing from the corpus.
TrainingData make_training_data(const NeroModel& model, std::span<const Instance> corpus,
                                const MatchPartition& partition, std::span<const LabelingRule> rules);

struct PseudoLabel {
  std::string instance_id;
  std::string rule_id;
  int rule = -1;
  RelationId relation = 0;
  double score = 0.0;
  double weight = 0.0;
};

/// Mean cross-entropy of RC on labeled sequences. Throws on an empty batch.
ad::Var loss_matched(const NeroModel& model, std::span<const TokenIds> batch, std::span<const int> labels, bool train,
                     std::mt19937_64& rng);
/// Rules fed to RC as labeled sequences.
ad::Var loss_rules(const NeroModel& model, const RuleSet& rules, bool train, std::mt19937_64& rng);
/// Contrastive clustering of rule representations. `excluded_head` drops
/// rules with that head before grouping.
ad::Var loss_clus(const NeroModel& model, const RuleSet& rules, double tau, std::optional<int> excluded_head = {});

/// Best rule per context (ties to the lowest rule id) and batch-softmax weights of sigma * score.
/// `ids` may be empty.
std::vector<PseudoLabel> pseudo_label_batch(const NeroModel& model, std::span<const TokenIds> contexts,
                                            const RuleSet& rules, double sigma,
                                            std::span<const std::string> ids = {});
/// (1/|B|) * sum_s -w_s log P(r_s | s). Gradients reach RC parameters only.
ad::Var loss_unmatched(const NeroModel& model, std::span<const TokenIds> sentences,
                       std::span<const PseudoLabel> labels, bool train, std::mt19937_64& rng);

struct LossParts {
  double total = 0.0;
  double matched = 0.0;
  double rules = 0.0;
  double clus = 0.0;
  double unmatched = 0.0;
};

/// Weighted joint objective on one step's batches. Terms with zero weight are
/// not built. Dropout draws come from `rng` in the order matched, rules, unmatched.
ad::Var joint_loss(const NeroModel& model, const TrainingData& data, const TrainingConfig& cfg,
                   std::span<const std::size_t> matched_batch, std::span<const std::size_t> unmatched_batch,
                   bool train, std::mt19937_64& rng, const RelationSchema& schema, LossParts* parts = nullptr);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  LossParts mean;  // averaged over the epoch's steps
  int steps = 0;
  std::optional<double> dev_precision, dev_recall, dev_f1, delta;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  int best_epoch = -1;
  double best_dev_f1 = 0.0;
  double delta = 0.0;  // RC entropy threshold tuned on dev; 0 without dev
  bool early_stopped = false;
};

/// Joint optimization. Stops on dev-F1 patience, or on training-loss patience
/// when `dev` is empty. Restores the best epoch's parameters before returning.
/// Throws ValidationError when there are no matched sentences.
TrainResult train(NeroModel& model, const TrainingData& data, const TrainingConfig& cfg,
                  const RelationSchema& schema, std::span<const Instance> dev = {}, std::ostream* log = nullptr);

std::string epoch_json(const EpochRecord& rec);

}  // namespace nero
