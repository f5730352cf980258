#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace nero {

/// Raised for malformed input files. Carries the 1-based line when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Raised when a record parses but violates a domain invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using RelationId = int;

/// Relation inventory R plus the NONE class. NONE always occupies exactly one slot.
class RelationSchema {
 public:
  static constexpr std::string_view kNoneName = "no_relation";

  RelationSchema() : RelationSchema(std::vector<std::string>{}) {}
  /// `names` may or may not contain "no_relation" (or "NONE"); if absent, NONE is prepended.
  explicit RelationSchema(std::vector<std::string> names);

  static RelationSchema load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return names_.size(); }
  RelationId none_index() const { return none_index_; }
  bool is_none(RelationId r) const { return r == none_index_; }
  const std::string& name(RelationId r) const { return names_.at(static_cast<std::size_t>(r)); }
  const std::vector<std::string>& names() const { return names_; }

  /// Accepts "no_relation" and "NONE" for the abstain class.
  std::optional<RelationId> find(std::string_view name) const;
  RelationId index_of(std::string_view name) const;

  std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, RelationId> index_;
  RelationId none_index_ = 0;
};

struct Span {
  int begin = 0;  // inclusive
  int end = 0;    // inclusive
  int length() const { return end - begin + 1; }
};

struct Instance {
  std::string id;
  std::vector<std::string> tokens;
  Span subj;
  Span obj;
  std::string subj_type;
  std::string obj_type;
  /// nullopt when the record carries no label at all.
  std::optional<RelationId> gold;

  /// Throws ValidationError when spans or types are malformed.
  void validate() const;
};

/// Reads TACRED-style JSONL (token, subj_start, subj_end, obj_start, obj_end,
/// subj_type, obj_type, relation). Records without "relation" are unlabeled.
std::vector<Instance> load_dataset(const std::filesystem::path& path, const RelationSchema& schema);
std::vector<Instance> parse_dataset(std::istream& in, const RelationSchema& schema);
void save_dataset(const std::filesystem::path& path, std::span<const Instance> corpus,
                  const RelationSchema& schema);

std::string subj_mask(std::string_view type);
std::string obj_mask(std::string_view type);
bool is_entity_mask(std::string_view token);

/// Replaces the subject and object spans with SUBJ-<type> / OBJ-<type>.
std::vector<std::string> mask_entities(const Instance& inst);

/// Masked tokens between and including the two entity masks, in sentence order.
std::vector<std::string> context_span(const Instance& inst);

/// Same as context_span but without the two mask tokens.
std::vector<std::string> interior_context(const Instance& inst);

/// Canonical token used by the models and the matcher: entity masks pass
/// through, everything else is ASCII-lowercased and Porter-stemmed.
std::string normalize_token(std::string_view token);
std::vector<std::string> normalize_tokens(std::span<const std::string> tokens);

/// Pre-trained vectors as read from a whitespace-separated text file.
struct EmbeddingTable {
  int dim = 0;
  std::vector<std::string> tokens;
  std::vector<double> values;  // row-major, tokens.size() x dim
  std::unordered_map<std::string, std::size_t> index;

  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
};

EmbeddingTable load_embeddings(const std::filesystem::path& path, int dim);
EmbeddingTable parse_embeddings(std::istream& in, int dim);

/// Token inventory plus the initial embedding matrix. Index 0 is PAD, 1 is UNK.
class Vocabulary {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr int kPadIndex = 0;
  static constexpr int kUnkIndex = 1;

  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, int dim, std::vector<double> table);

  /// Builds the vocabulary over normalized tokens of the corpus and rule
  /// contexts. Each row is initialized from `pretrained` (keyed by the
  /// token, else by its most frequent raw surface form), else by a draw
  /// in [-0.5/dim, 0.5/dim] seeded from (seed, token).
  static Vocabulary build(std::span<const Instance> corpus,
                          std::span<const std::vector<std::string>> extra_contexts,
                          std::span<const std::string> entity_types, const EmbeddingTable* pretrained,
                          int dim, std::uint64_t seed);

  int dim() const { return dim_; }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<double>& table() const { return table_; }
  std::span<const double> row(int id) const {
    return {table_.data() + static_cast<std::size_t>(id) * dim_, static_cast<std::size_t>(dim_)};
  }

  bool contains(std::string_view normalized) const;
  /// Lookup of an already-normalized token; UNK when absent.
  int id(std::string_view normalized) const;
  std::vector<int> encode(std::span<const std::string> normalized) const;

  std::uint64_t fingerprint() const;

 private:
  int dim_ = 0;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<double> table_;
};

/// Reproducible per-token initialization draw.
std::vector<double> seeded_row(std::string_view token, int dim, std::uint64_t seed);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL);

}  // namespace nero
