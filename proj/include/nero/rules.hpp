#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nero/data.hpp"

namespace nero {

/// A frequent (subj_type, stemmed context, obj_type) pattern awaiting annotation.
struct CandidateRule {
  std::string id;
  std::string subj_type;
  std::string obj_type;
  std::vector<std::string> stemmed_context;  // starts and ends with entity masks
  std::vector<std::string> surface_context;  // most frequent raw form
  std::size_t frequency = 0;
  std::vector<std::string> example_ids;

  bool operator==(const CandidateRule&) const = default;
};

/// An annotated rule: [SUBJ-TYPE; context; OBJ-TYPE] -> head.
struct LabelingRule {
  std::string id;
  std::string subj_type;
  std::string obj_type;
  std::vector<std::string> context;  // stemmed, including the entity masks
  RelationId head = 0;

  bool operator==(const LabelingRule&) const = default;
  void validate(const RelationSchema& schema) const;
};

struct MiningOptions {
  std::size_t min_freq = 3;
  /// Maximum number of tokens strictly between the two entity masks.
  std::size_t max_len = 10;
  std::size_t examples = 3;
};

/// Stemmed, masked context of an instance: the canonical key for mining and matching.
std::vector<std::string> stemmed_context(const Instance& inst);

/// Queue order: frequency descending, then context, then entity types.
bool candidate_precedes(const CandidateRule& a, const CandidateRule& b);

/// One candidate per distinct (subj_type, stemmed context, obj_type) with
/// frequency >= min_freq, ordered by frequency descending then context.
std::vector<CandidateRule> extract_candidates(std::span<const Instance> corpus, const MiningOptions& opts);

void save_candidates(const std::filesystem::path& path, std::span<const CandidateRule> candidates);
std::vector<CandidateRule> load_candidates(const std::filesystem::path& path);

/// Throws ValidationError on an unknown head or when two rules share a body
/// but disagree on the head.
void save_rules(const std::filesystem::path& path, std::span<const LabelingRule> rules,
                const RelationSchema& schema);
std::vector<LabelingRule> load_rules(const std::filesystem::path& path, const RelationSchema& schema);
std::vector<LabelingRule> parse_rules(std::istream& in, const RelationSchema& schema);
std::string format_rules(std::span<const LabelingRule> rules, const RelationSchema& schema);

/// Rejects bodies annotated with two different heads.
void check_rule_conflicts(std::span<const LabelingRule> rules, const RelationSchema& schema);

}  // namespace nero
