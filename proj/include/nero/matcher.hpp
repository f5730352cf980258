#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nero/data.hpp"
#include "nero/rules.hpp"

namespace nero {

struct MatchedInstance {
  std::string instance_id;
  std::string rule_id;
  RelationId label = 0;

  bool operator==(const MatchedInstance&) const = default;
};

/// Several rules with different heads matched the same instance.
struct MatchConflict {
  std::string instance_id;
  std::vector<std::string> rule_ids;
};

struct MatchPartition {
  std::vector<MatchedInstance> matched;     // corpus order
  std::vector<std::string> unmatched;       // corpus order
  std::vector<MatchConflict> conflicts;

  bool operator==(const MatchPartition& o) const { return matched == o.matched && unmatched == o.unmatched; }
};

/// Exact match of stemmed context and entity types.
bool hard_match(const Instance& inst, const LabelingRule& rule);

/// Index keyed by (subj_type, obj_type, context length); buckets hold rules
/// with equal bodies grouped together.
class RuleIndex {
 public:
  explicit RuleIndex(std::span<const LabelingRule> rules);

  /// Positions (into the rule span) of every rule hard-matching a stemmed context.
  std::vector<std::size_t> lookup(const std::string& subj_type, const std::string& obj_type,
                                  const std::vector<std::string>& stemmed) const;

 private:
  struct Entry {
    std::vector<std::string> context;
    std::vector<std::size_t> rules;
  };
  std::span<const LabelingRule> rules_;
  std::vector<std::pair<std::string, std::vector<Entry>>> buckets_;  // sorted by key
  static std::string key(const std::string& s, const std::string& o, std::size_t len);
};

/// Matched iff at least one rule hard-matches. Label comes from the matching
/// rule with the highest corpus frequency, ties to the lowest rule id.
/// `threads` > 1 shards instances; the result is independent of it.
MatchPartition partition(std::span<const Instance> corpus, std::span<const LabelingRule> rules,
                         unsigned threads = 1);

/// Number of corpus instances each rule hard-matches, aligned with `rules`.
std::vector<std::size_t> rule_match_counts(std::span<const Instance> corpus, std::span<const LabelingRule> rules);

void save_partition(const std::filesystem::path& matched_path, const std::filesystem::path& unmatched_path,
                    const MatchPartition& part, const RelationSchema& schema);
MatchPartition load_partition(const std::filesystem::path& matched_path, const std::filesystem::path& unmatched_path,
                              const RelationSchema& schema);

}  // namespace nero
