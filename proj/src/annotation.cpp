#include "nero/annotation.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "httplib.h"
#include "json.hpp"

namespace nero {

using nlohmann::json;

namespace {

constexpr std::string_view kDiscard = "discard";

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json event_json(const LabelEvent& e) {
  return {{"seq", e.seq},          {"candidate_id", e.candidate_id}, {"decision", e.decision},
          {"annotator", e.annotator}, {"timestamp", e.timestamp},      {"note", e.note}};
}

LabelEvent event_from_json(const json& j) {
  LabelEvent e;
  e.seq = j.at("seq").get<std::uint64_t>();
  e.candidate_id = j.at("candidate_id").get<std::string>();
  e.decision = j.at("decision").get<std::string>();
  e.annotator = j.value("annotator", std::string());
  e.timestamp = j.value("timestamp", std::string());
  e.note = j.value("note", std::string());
  return e;
}

std::string match_key(const std::string& s, const std::string& o, const std::vector<std::string>& ctx) {
  std::string k = s + '\x1f' + o;
  for (const auto& t : ctx) k += '\x1f' + t;
  return k;
}

std::string status_name(CandidateStatus s) {
  switch (s) {
    case CandidateStatus::Unlabeled: return "unlabeled";
    case CandidateStatus::Labeled: return "labeled";
    case CandidateStatus::Discarded: return "discarded";
    case CandidateStatus::Any: return "all";
  }
  return "all";
}

std::uint32_t token_check(const std::string& sort, CandidateStatus status, std::size_t pos) {
  return static_cast<std::uint32_t>(fnv1a(sort + '|' + status_name(status) + '|' + std::to_string(pos)));
}

std::string make_token(const std::string& sort, CandidateStatus status, std::size_t pos) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%zx.%08x", pos, token_check(sort, status, pos));
  return buf;
}

std::size_t read_token(const std::string& token, const std::string& sort, CandidateStatus status, std::size_t limit) {
  const auto dot = token.find('.');
  if (dot == std::string::npos || dot == 0 || token.size() - dot - 1 != 8)
    throw std::invalid_argument("malformed page token");
  std::size_t pos = 0;
  std::uint32_t check = 0;
  try {
    std::size_t used = 0;
    pos = std::stoull(token.substr(0, dot), &used, 16);
    if (used != dot) throw std::invalid_argument("");
    check = static_cast<std::uint32_t>(std::stoul(token.substr(dot + 1), &used, 16));
    if (used != 8) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw std::invalid_argument("malformed page token");
  }
  if (check != token_check(sort, status, pos) || pos > limit)
    throw std::invalid_argument("page token does not belong to this query");
  return pos;
}

}  // namespace

CandidateStatus parse_status(std::string_view s) {
  if (s == "unlabeled") return CandidateStatus::Unlabeled;
  if (s == "labeled") return CandidateStatus::Labeled;
  if (s == "discarded") return CandidateStatus::Discarded;
  if (s == "all" || s.empty()) return CandidateStatus::Any;
  throw std::invalid_argument("unknown status '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

AnnotationStore::AnnotationStore(std::vector<Instance> corpus, std::vector<CandidateRule> candidates,
                                 RelationSchema schema)
    : corpus_(std::move(corpus)), candidates_(std::move(candidates)), schema_(std::move(schema)) {
  std::map<std::string, std::vector<std::size_t>> by_key;
  for (std::size_t i = 0; i < corpus_.size(); ++i) {
    const auto& inst = corpus_[i];
    instance_by_id_.emplace(inst.id, i);
    by_key[match_key(inst.subj_type, inst.obj_type, stemmed_context(inst))].push_back(i);
  }
  match_sets_.resize(candidates_.size());
  for (std::size_t c = 0; c < candidates_.size(); ++c) {
    const auto& cand = candidates_[c];
    if (!by_id_.emplace(cand.id, c).second) throw ValidationError("duplicate candidate id " + cand.id);
    const auto it = by_key.find(match_key(cand.subj_type, cand.obj_type, cand.stemmed_context));
    if (it != by_key.end()) match_sets_[c] = it->second;
  }
  by_frequency_.resize(candidates_.size());
  std::iota(by_frequency_.begin(), by_frequency_.end(), std::size_t{0});
  by_candidate_id_ = by_frequency_;
  std::stable_sort(by_frequency_.begin(), by_frequency_.end(),
                   [&](std::size_t a, std::size_t b) { return candidate_precedes(candidates_[a], candidates_[b]); });
  std::sort(by_candidate_id_.begin(), by_candidate_id_.end(),
            [&](std::size_t a, std::size_t b) { return candidates_[a].id < candidates_[b].id; });
  decision_.resize(candidates_.size());
  cover_.assign(corpus_.size(), 0);
}

std::string AnnotationStore::canonical_decision(const std::string& raw) const {
  if (raw == kDiscard) return std::string(kDiscard);
  const auto r = schema_.find(raw);
  if (!r) throw ValidationError("unknown relation '" + raw + "'");
  return schema_.name(*r);
}

void AnnotationStore::apply_locked(const LabelEvent& ev) {
  const auto it = by_id_.find(ev.candidate_id);
  if (it == by_id_.end()) throw UnknownCandidate("unknown candidate '" + ev.candidate_id + "'");
  const std::size_t c = it->second;
  const auto was_rule = decision_[c] && *decision_[c] != kDiscard;
  const auto is_rule = ev.decision != kDiscard;
  // Only this candidate's matches move.
  if (was_rule && !is_rule) {
    for (std::size_t i : match_sets_[c])
      if (--cover_[i] == 0) --matched_;
  } else if (!was_rule && is_rule) {
    for (std::size_t i : match_sets_[c])
      if (cover_[i]++ == 0) ++matched_;
  }
  decision_[c] = ev.decision;
  last_seq_ = std::max(last_seq_, ev.seq);
  events_.push_back(ev);
}

CoverageStats AnnotationStore::stats_locked() const {
  CoverageStats s;
  s.total = candidates_.size();
  for (const auto& d : decision_) {
    if (!d) ++s.remaining;
    else if (*d == kDiscard) ++s.discarded;
    else ++s.labeled;
  }
  s.matched = matched_;
  s.unmatched = corpus_.size() - matched_;
  return s;
}

CoverageStats AnnotationStore::apply(LabelEvent ev) {
  ev.decision = canonical_decision(ev.decision);
  std::unique_lock lock(mu_);
  if (!by_id_.count(ev.candidate_id)) throw UnknownCandidate("unknown candidate '" + ev.candidate_id + "'");
  ev.seq = last_seq_ + 1;
  if (ev.timestamp.empty()) ev.timestamp = utc_now();
  if (log_path_) {
    std::ofstream out(*log_path_, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to " + log_path_->string());
    out << event_json(ev).dump() << '\n';
    out.flush();
    if (!out) throw std::runtime_error("write failed on " + log_path_->string());
  }
  apply_locked(ev);
  if (snapshot_path_ && snapshot_every_ > 0 && ev.seq % snapshot_every_ == 0) write_snapshot_locked();
  return stats_locked();
}

void AnnotationStore::write_snapshot_locked() const {
  json d = json::object();
  for (std::size_t c = 0; c < candidates_.size(); ++c)
    if (decision_[c]) d[candidates_[c].id] = *decision_[c];
  const json snap = {{"format", "nero-annotation-snapshot"},
                     {"version", 1},
                     {"seq", last_seq_},
                     {"decisions", d}};
  const auto tmp = std::filesystem::path(snapshot_path_->string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << snap.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, *snapshot_path_);
}

void AnnotationStore::attach(const std::filesystem::path& log, const std::filesystem::path& snapshot,
                             std::size_t snapshot_every) {
  std::unique_lock lock(mu_);
  std::uint64_t snap_seq = 0;
  if (!snapshot.empty() && std::filesystem::exists(snapshot)) {
    std::ifstream in(snapshot);
    json snap;
    try {
      snap = json::parse(in);
      if (snap.at("format") != "nero-annotation-snapshot") throw ParseError("not an annotation snapshot");
      snap_seq = snap.at("seq").get<std::uint64_t>();
      for (const auto& [id, d] : snap.at("decisions").items()) {
        LabelEvent ev;
        ev.candidate_id = id;
        ev.decision = canonical_decision(d.get<std::string>());
        apply_locked(ev);
      }
    } catch (const json::exception& e) {
      throw ParseError("snapshot " + snapshot.string() + ": " + e.what());
    }
    // Snapshot restores state, not history.
    events_.clear();
    last_seq_ = snap_seq;
  }
  if (std::filesystem::exists(log)) {
    std::ifstream in(log);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      LabelEvent ev;
      try {
        ev = event_from_json(json::parse(line));
      } catch (const json::exception& e) {
        throw ParseError("event log " + log.string() + ": " + e.what(), lineno);
      }
      try {
        ev.decision = canonical_decision(ev.decision);
        if (ev.seq > snap_seq) {
          apply_locked(ev);
        } else {
          events_.push_back(ev);
          last_seq_ = std::max(last_seq_, ev.seq);
        }
      } catch (const std::out_of_range& e) {
        throw ParseError("event log " + log.string() + ": " + e.what(), lineno);
      }
    }
  }
  log_path_ = log;
  if (!snapshot.empty()) snapshot_path_ = snapshot;
  snapshot_every_ = snapshot_every;
}

CoverageStats AnnotationStore::stats() const {
  std::shared_lock lock(mu_);
  return stats_locked();
}

std::vector<LabelingRule> AnnotationStore::rules() const {
  std::shared_lock lock(mu_);
  std::vector<LabelingRule> out;
  for (std::size_t c : by_frequency_) {
    if (!decision_[c] || *decision_[c] == kDiscard) continue;
    const auto& cand = candidates_[c];
    out.push_back({cand.id, cand.subj_type, cand.obj_type, cand.stemmed_context, schema_.index_of(*decision_[c])});
  }
  return out;
}

std::optional<std::string> AnnotationStore::decision(const std::string& candidate_id) const {
  std::shared_lock lock(mu_);
  const auto it = by_id_.find(candidate_id);
  if (it == by_id_.end()) throw UnknownCandidate("unknown candidate '" + candidate_id + "'");
  return decision_[it->second];
}

std::vector<LabelEvent> AnnotationStore::events() const {
  std::shared_lock lock(mu_);
  return events_;
}

std::map<std::string, std::string> AnnotationStore::decisions() const {
  std::shared_lock lock(mu_);
  std::map<std::string, std::string> out;
  for (std::size_t c = 0; c < candidates_.size(); ++c)
    if (decision_[c]) out[candidates_[c].id] = *decision_[c];
  return out;
}

const Instance* AnnotationStore::instance(const std::string& id) const {
  const auto it = instance_by_id_.find(id);
  return it == instance_by_id_.end() ? nullptr : &corpus_[it->second];
}

const std::vector<std::size_t>& AnnotationStore::order(const std::string& sort) const {
  if (sort == "frequency" || sort.empty()) return by_frequency_;
  if (sort == "id") return by_candidate_id_;
  throw std::invalid_argument("unknown sort key '" + sort + "'");
}

AnnotationStore::Page AnnotationStore::list(CandidateStatus status, const std::string& sort, std::size_t page_size,
                                            const std::string& token) const {
  const auto& ord = order(sort);
  const std::string sort_key = sort.empty() ? "frequency" : sort;
  std::size_t pos = token.empty() ? 0 : read_token(token, sort_key, status, ord.size());
  if (page_size == 0) throw std::invalid_argument("page_size must be positive");
  std::shared_lock lock(mu_);
  Page page;
  // The cursor is a position in the full ordering, so labels made between
  // page requests never shift later pages.
  for (; pos < ord.size() && page.items.size() < page_size; ++pos) {
    const std::size_t c = ord[pos];
    const auto& d = decision_[c];
    const bool keep = status == CandidateStatus::Any || (status == CandidateStatus::Unlabeled && !d) ||
                      (status == CandidateStatus::Discarded && d && *d == kDiscard) ||
                      (status == CandidateStatus::Labeled && d && *d != kDiscard);
    if (keep) page.items.push_back({&candidates_[c], d, match_sets_[c].size()});
  }
  if (pos < ord.size()) page.next_token = make_token(sort_key, status, pos);
  return page;
}

// ---------------------------------------------------------------------------

std::string stats_json(const CoverageStats& s) {
  return json{{"total", s.total},         {"labeled", s.labeled}, {"discarded", s.discarded},
              {"remaining", s.remaining}, {"matched", s.matched}, {"unmatched", s.unmatched}}
      .dump();
}

namespace {

HttpResponse error_response(int status, const std::string& message) {
  HttpResponse r;
  r.status = status;
  r.body = json{{"error", message}}.dump();
  return r;
}

json stats_object(const CoverageStats& s) { return json::parse(stats_json(s)); }

}  // namespace

AnnotationApi::AnnotationApi(AnnotationStore& store, ServiceOptions opts) : store_(store), opts_(std::move(opts)) {}

HttpResponse AnnotationApi::handle(const HttpRequest& req) const {
  HttpResponse res;
  if (req.method == "OPTIONS") {
    res.status = 204;
  } else if (!opts_.token.empty() &&
             (!req.headers.count("x-nero-token") || req.headers.at("x-nero-token") != opts_.token)) {
    res = error_response(401, "missing or invalid X-Nero-Token");
  } else if (req.method == "GET" && req.path == "/candidates") {
    res = candidates(req);
  } else if (req.method == "GET" && req.path == "/export/rules") {
    res = export_rules();
  } else if (req.method == "GET" && req.path == "/stats") {
    res = stats();
  } else if (req.path.starts_with("/candidates/") && req.path.ends_with("/label")) {
    const std::string id = req.path.substr(12, req.path.size() - 12 - 6);
    res = req.method == "POST" ? label(id, req) : error_response(405, "use POST");
  } else {
    res = error_response(404, "no route for " + req.method + " " + req.path);
  }
  res.headers["Access-Control-Allow-Origin"] = opts_.cors_origin;
  res.headers["Access-Control-Allow-Methods"] = "GET, POST, OPTIONS";
  res.headers["Access-Control-Allow-Headers"] = "Content-Type, X-Nero-Token";
  return res;
}

HttpResponse AnnotationApi::candidates(const HttpRequest& req) const {
  auto q = [&](const std::string& k, const std::string& dflt) {
    const auto it = req.query.find(k);
    return it == req.query.end() ? dflt : it->second;
  };
  AnnotationStore::Page page;
  try {
    std::size_t size = 20;
    const std::string raw = q("page_size", "20");
    std::size_t used = 0;
    size = std::stoul(raw, &used);
    if (used != raw.size() || size == 0 || size > 1000) throw std::invalid_argument("page_size out of range");
    page = store_.list(parse_status(q("status", "unlabeled")), q("sort", "frequency"), size, q("page_token", ""));
  } catch (const std::exception& e) {
    return error_response(400, e.what());
  }
  json items = json::array();
  for (const auto& item : page.items) {
    const auto& c = *item.candidate;
    json examples = json::array();
    for (const auto& id : c.example_ids) {
      const Instance* inst = store_.instance(id);
      if (!inst) continue;
      examples.push_back({{"id", inst->id},
                          {"tokens", inst->tokens},
                          {"subj", {inst->subj.begin, inst->subj.end}},
                          {"obj", {inst->obj.begin, inst->obj.end}}});
    }
    items.push_back({{"id", c.id},
                     {"surface", c.surface_context},
                     {"pattern", c.stemmed_context},
                     {"subj_type", c.subj_type},
                     {"obj_type", c.obj_type},
                     {"frequency", c.frequency},
                     {"matches", item.matches},
                     {"decision", item.decision ? json(*item.decision) : json(nullptr)},
                     {"examples", examples}});
  }
  HttpResponse res;
  res.body = json{{"items", items},
                  {"next_page_token", page.next_token.empty() ? json(nullptr) : json(page.next_token)},
                  {"relations", store_.schema().names()}}
                 .dump();
  return res;
}

HttpResponse AnnotationApi::label(const std::string& id, const HttpRequest& req) const {
  LabelEvent ev;
  ev.candidate_id = id;
  try {
    const json body = json::parse(req.body);
    ev.decision = body.at("decision").get<std::string>();
    ev.annotator = body.value("annotator", std::string());
    ev.note = body.value("note", std::string());
  } catch (const json::exception& e) {
    return error_response(400, std::string("bad request body: ") + e.what());
  }
  CoverageStats before, after;
  try {
    before = store_.stats();
    after = store_.apply(ev);
  } catch (const UnknownCandidate& e) {
    return error_response(404, e.what());
  } catch (const ValidationError& e) {
    return error_response(400, e.what());
  }
  HttpResponse res;
  res.body = json{{"candidate_id", id},
                  {"decision", *store_.decision(id)},
                  {"stats", stats_object(after)},
                  {"matched_delta", static_cast<long long>(after.matched) - static_cast<long long>(before.matched)}}
                 .dump();
  return res;
}

HttpResponse AnnotationApi::export_rules() const {
  HttpResponse res;
  res.content_type = "application/x-ndjson";
  res.body = format_rules(store_.rules(), store_.schema());
  return res;
}

HttpResponse AnnotationApi::stats() const {
  HttpResponse res;
  res.body = stats_json(store_.stats());
  return res;
}

// ---------------------------------------------------------------------------

struct AnnotationServer::Impl {
  AnnotationApi api;
  httplib::Server server;

  Impl(AnnotationStore& store, ServiceOptions opts) : api(store, std::move(opts)) {
    auto forward = [this](const httplib::Request& in, httplib::Response& out) {
      HttpRequest req;
      req.method = in.method;
      req.path = in.path;
      for (const auto& [k, v] : in.params) req.query[k] = v;
      for (const auto& [k, v] : in.headers) {
        std::string key = k;
        std::transform(key.begin(), key.end(), key.begin(), [](unsigned char ch) { return std::tolower(ch); });
        req.headers[key] = v;
      }
      req.body = in.body;
      const HttpResponse res = api.handle(req);
      out.status = res.status;
      for (const auto& [k, v] : res.headers) out.set_header(k, v);
      out.set_content(res.body, res.content_type);
    };
    server.Get(".*", forward);
    server.Post(".*", forward);
    server.Options(".*", forward);
  }
};

AnnotationServer::AnnotationServer(AnnotationStore& store, ServiceOptions opts)
    : impl_(std::make_unique<Impl>(store, std::move(opts))) {}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

bool AnnotationServer::run() { return impl_->server.listen_after_bind(); }

void AnnotationServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

void AnnotationServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace nero
