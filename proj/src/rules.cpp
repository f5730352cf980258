#include "nero/rules.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace nero {

using nlohmann::json;

void LabelingRule::validate(const RelationSchema& schema) const {
  if (head < 0 || static_cast<std::size_t>(head) >= schema.size())
    throw ValidationError("rule " + id + ": head outside the relation schema");
  if (context.size() < 2) throw ValidationError("rule " + id + ": context must contain both entity masks");
  if (subj_type.empty() || obj_type.empty()) throw ValidationError("rule " + id + ": empty entity type");
  const std::string s = subj_mask(subj_type), o = obj_mask(obj_type);
  const bool framed = (context.front() == s && context.back() == o) || (context.front() == o && context.back() == s);
  if (!framed) throw ValidationError("rule " + id + ": context must start and end with " + s + " and " + o);
}

std::vector<std::string> stemmed_context(const Instance& inst) {
  auto ctx = context_span(inst);
  return normalize_tokens(ctx);
}

bool candidate_precedes(const CandidateRule& a, const CandidateRule& b) {
  if (a.frequency != b.frequency) return a.frequency > b.frequency;
  if (a.stemmed_context != b.stemmed_context) return a.stemmed_context < b.stemmed_context;
  return std::tie(a.subj_type, a.obj_type) < std::tie(b.subj_type, b.obj_type);
}

std::vector<CandidateRule> extract_candidates(std::span<const Instance> corpus, const MiningOptions& opts) {
  using Key = std::tuple<std::string, std::vector<std::string>, std::string>;
  struct Group {
    std::size_t count = 0;
    std::map<std::vector<std::string>, std::size_t> surfaces;
    std::vector<std::string> example_ids;
  };
  std::map<Key, Group> groups;
  for (const auto& inst : corpus) {
    auto surface = context_span(inst);
    if (surface.size() - 2 > opts.max_len) continue;
    auto stemmed = normalize_tokens(surface);
    auto& g = groups[Key{inst.subj_type, std::move(stemmed), inst.obj_type}];
    ++g.count;
    ++g.surfaces[surface];
    if (g.example_ids.size() < opts.examples) g.example_ids.push_back(inst.id);
  }

  std::vector<CandidateRule> out;
  for (auto& [key, g] : groups) {
    if (g.count < opts.min_freq) continue;
    CandidateRule c;
    c.subj_type = std::get<0>(key);
    c.stemmed_context = std::get<1>(key);
    c.obj_type = std::get<2>(key);
    c.frequency = g.count;
    // std::map iteration is ordered, so ties resolve to the smallest form.
    std::size_t best = 0;
    for (const auto& [form, n] : g.surfaces)
      if (n > best) {
        best = n;
        c.surface_context = form;
      }
    c.example_ids = std::move(g.example_ids);
    out.push_back(std::move(c));
  }
  std::stable_sort(out.begin(), out.end(), candidate_precedes);
  const int width = std::max<int>(4, static_cast<int>(std::to_string(out.size()).size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::string n = std::to_string(i + 1);
    out[i].id = "c" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(n.size()))), '0') + n;
  }
  return out;
}

void save_candidates(const std::filesystem::path& path, std::span<const CandidateRule> candidates) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& c : candidates) {
    json rec = {{"id", c.id},
                {"subj_type", c.subj_type},
                {"obj_type", c.obj_type},
                {"stemmed_context", c.stemmed_context},
                {"surface_context", c.surface_context},
                {"frequency", c.frequency},
                {"example_ids", c.example_ids}};
    out << rec.dump() << '\n';
  }
}

std::vector<CandidateRule> load_candidates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open candidates " + path.string());
  std::vector<CandidateRule> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json rec = json::parse(line);
      CandidateRule c;
      c.id = rec.at("id").get<std::string>();
      c.subj_type = rec.at("subj_type").get<std::string>();
      c.obj_type = rec.at("obj_type").get<std::string>();
      c.stemmed_context = rec.at("stemmed_context").get<std::vector<std::string>>();
      c.surface_context = rec.value("surface_context", c.stemmed_context);
      c.frequency = rec.at("frequency").get<std::size_t>();
      c.example_ids = rec.value("example_ids", std::vector<std::string>{});
      out.push_back(std::move(c));
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed candidate: ") + e.what(), lineno);
    }
  }
  return out;
}

void check_rule_conflicts(std::span<const LabelingRule> rules, const RelationSchema& schema) {
  std::map<std::tuple<std::string, std::vector<std::string>, std::string>, const LabelingRule*> seen;
  for (const auto& r : rules) {
    auto [it, fresh] = seen.emplace(std::make_tuple(r.subj_type, r.context, r.obj_type), &r);
    if (!fresh && it->second->head != r.head)
      throw ValidationError("rules " + it->second->id + " and " + r.id + " share a body but have heads " +
                            schema.name(it->second->head) + " and " + schema.name(r.head));
  }
}

std::string format_rules(std::span<const LabelingRule> rules, const RelationSchema& schema) {
  std::ostringstream out;
  for (const auto& r : rules) {
    r.validate(schema);
    json rec = {{"id", r.id},
                {"subj_type", r.subj_type},
                {"obj_type", r.obj_type},
                {"context", r.context},
                {"head", schema.name(r.head)}};
    out << rec.dump() << '\n';
  }
  return out.str();
}

void save_rules(const std::filesystem::path& path, std::span<const LabelingRule> rules,
                const RelationSchema& schema) {
  check_rule_conflicts(rules, schema);
  const std::string text = format_rules(rules, schema);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<LabelingRule> parse_rules(std::istream& in, const RelationSchema& schema) {
  std::vector<LabelingRule> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    LabelingRule r;
    std::string head;
    try {
      const json rec = json::parse(line);
      r.id = rec.at("id").get<std::string>();
      r.subj_type = rec.at("subj_type").get<std::string>();
      r.obj_type = rec.at("obj_type").get<std::string>();
      r.context = rec.at("context").get<std::vector<std::string>>();
      head = rec.at("head").get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed rule: ") + e.what(), lineno);
    }
    auto h = schema.find(head);
    if (!h) throw ValidationError("rule " + r.id + ": unknown relation '" + head + "' (line " + std::to_string(lineno) + ")");
    r.head = *h;
    r.validate(schema);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<LabelingRule> load_rules(const std::filesystem::path& path, const RelationSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open rules " + path.string());
  return parse_rules(in, schema);
}

}  // namespace nero
