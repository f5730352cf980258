#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "nero/data.hpp"
#include "nero/rules.hpp"

namespace nero {

/// One annotator decision. `decision` is a relation name, "NONE", or "discard".
struct LabelEvent {
  std::uint64_t seq = 0;
  std::string candidate_id;
  std::string decision;
  std::string annotator;
  std::string timestamp;  // ISO-8601 UTC
  std::string note;
};

struct CoverageStats {
  std::size_t total = 0;
  std::size_t labeled = 0;
  std::size_t discarded = 0;
  std::size_t remaining = 0;
  std::size_t matched = 0;
  std::size_t unmatched = 0;
};

class UnknownCandidate : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

enum class CandidateStatus { Unlabeled, Labeled, Discarded, Any };
CandidateStatus parse_status(std::string_view s);

/// Candidate queue, decision history and live coverage.
///
/// Persistence is an append-only JSONL event log (one LabelEvent per line)
/// plus a snapshot {"format":"nero-annotation-snapshot","version":1,"seq":N,
/// "decisions":{id: decision}} rewritten every `snapshot_every` events.
/// Readers share a lock; writers are serialized.
class AnnotationStore {
 public:
  AnnotationStore(std::vector<Instance> corpus, std::vector<CandidateRule> candidates, RelationSchema schema);

  /// Loads the snapshot (if any), replays newer log events, and appends all
  /// future events to `log`.
  void attach(const std::filesystem::path& log, const std::filesystem::path& snapshot, std::size_t snapshot_every = 50);

  /// Validates, applies and persists an event; assigns seq and a missing timestamp.
  /// Throws UnknownCandidate or ValidationError.
  CoverageStats apply(LabelEvent ev);

  CoverageStats stats() const;
  /// Rules from every candidate labeled with a relation (NONE included), in candidate order.
  std::vector<LabelingRule> rules() const;
  std::optional<std::string> decision(const std::string& candidate_id) const;
  std::vector<LabelEvent> events() const;
  /// Decisions keyed by candidate id; the state a replay must reproduce.
  std::map<std::string, std::string> decisions() const;

  struct Item {
    const CandidateRule* candidate;
    std::optional<std::string> decision;
    std::size_t matches;  // corpus sentences this candidate hard-matches
  };
  struct Page {
    std::vector<Item> items;
    std::string next_token;  // empty on the last page
  };
  /// Sort is "frequency" (mining order) or "id". Throws std::invalid_argument on a bad token or sort key.
  Page list(CandidateStatus status, const std::string& sort, std::size_t page_size, const std::string& token) const;

  const RelationSchema& schema() const { return schema_; }
  const std::vector<Instance>& corpus() const { return corpus_; }
  const Instance* instance(const std::string& id) const;
  std::size_t size() const { return candidates_.size(); }

 private:
  void apply_locked(const LabelEvent& ev);
  CoverageStats stats_locked() const;
  void write_snapshot_locked() const;
  std::string canonical_decision(const std::string& raw) const;
  const std::vector<std::size_t>& order(const std::string& sort) const;

  std::vector<Instance> corpus_;
  std::vector<CandidateRule> candidates_;
  RelationSchema schema_;
  std::map<std::string, std::size_t> by_id_;
  std::map<std::string, std::size_t> instance_by_id_;
  std::vector<std::vector<std::size_t>> match_sets_;  // candidate -> matching instances
  std::vector<std::size_t> by_frequency_, by_candidate_id_;

  mutable std::shared_mutex mu_;
  std::vector<std::optional<std::string>> decision_;
  std::vector<std::uint32_t> cover_;  // active rules matching each instance
  std::size_t matched_ = 0;
  std::vector<LabelEvent> events_;
  std::uint64_t last_seq_ = 0;

  std::optional<std::filesystem::path> log_path_, snapshot_path_;
  std::size_t snapshot_every_ = 50;
};

struct HttpRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::map<std::string, std::string> headers;  // lower-case names
  std::string body;
};

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::map<std::string, std::string> headers;
};

struct ServiceOptions {
  std::string cors_origin = "*";
  std::string token;  // when set, requests must carry X-Nero-Token
};

/// Routes the JSON API onto a store. Independent of the HTTP transport.
class AnnotationApi {
 public:
  AnnotationApi(AnnotationStore& store, ServiceOptions opts = {});
  HttpResponse handle(const HttpRequest& req) const;

 private:
  HttpResponse candidates(const HttpRequest& req) const;
  HttpResponse label(const std::string& id, const HttpRequest& req) const;
  HttpResponse export_rules() const;
  HttpResponse stats() const;

  AnnotationStore& store_;
  ServiceOptions opts_;
};

std::string stats_json(const CoverageStats& s);

/// Blocking HTTP server around AnnotationApi.
class AnnotationServer {
 public:
  AnnotationServer(AnnotationStore& store, ServiceOptions opts = {});
  ~AnnotationServer();
  /// Binds; port 0 picks a free port. Returns the bound port, or -1.
  int bind(const std::string& host, int port);
  /// Serves until stop(). Call after bind().
  bool run();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace nero
