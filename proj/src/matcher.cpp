#include "nero/matcher.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>

#include "json.hpp"
#include "nero/parallel.hpp"

namespace nero {

using nlohmann::json;

bool hard_match(const Instance& inst, const LabelingRule& rule) {
  return inst.subj_type == rule.subj_type && inst.obj_type == rule.obj_type &&
         stemmed_context(inst) == rule.context;
}

std::string RuleIndex::key(const std::string& s, const std::string& o, std::size_t len) {
  return s + '\x1f' + o + '\x1f' + std::to_string(len);
}

RuleIndex::RuleIndex(std::span<const LabelingRule> rules) : rules_(rules) {
  std::map<std::string, std::vector<Entry>> tmp;
  for (std::size_t i = 0; i < rules.size(); ++i) {
    const auto& r = rules[i];
    auto& bucket = tmp[key(r.subj_type, r.obj_type, r.context.size())];
    auto it = std::find_if(bucket.begin(), bucket.end(), [&](const Entry& e) { return e.context == r.context; });
    if (it == bucket.end())
      bucket.push_back({r.context, {i}});
    else
      it->rules.push_back(i);
  }
  buckets_.assign(std::make_move_iterator(tmp.begin()), std::make_move_iterator(tmp.end()));
}

std::vector<std::size_t> RuleIndex::lookup(const std::string& subj_type, const std::string& obj_type,
                                           const std::vector<std::string>& stemmed) const {
  const std::string k = key(subj_type, obj_type, stemmed.size());
  auto it = std::lower_bound(buckets_.begin(), buckets_.end(), k,
                             [](const auto& b, const std::string& key) { return b.first < key; });
  if (it == buckets_.end() || it->first != k) return {};
  for (const auto& e : it->second)
    if (e.context == stemmed) return e.rules;
  return {};
}

std::vector<std::size_t> rule_match_counts(std::span<const Instance> corpus, std::span<const LabelingRule> rules) {
  RuleIndex index(rules);
  std::vector<std::size_t> counts(rules.size(), 0);
  for (const auto& inst : corpus)
    for (std::size_t r : index.lookup(inst.subj_type, inst.obj_type, stemmed_context(inst))) ++counts[r];
  return counts;
}

MatchPartition partition(std::span<const Instance> corpus, std::span<const LabelingRule> rules, unsigned threads) {
  RuleIndex index(rules);
  std::vector<std::vector<std::size_t>> hits(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    const auto& inst = corpus[i];
    hits[i] = index.lookup(inst.subj_type, inst.obj_type, stemmed_context(inst));
  });

  std::vector<std::size_t> freq(rules.size(), 0);
  for (const auto& h : hits)
    for (std::size_t r : h) ++freq[r];

  MatchPartition part;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& h = hits[i];
    if (h.empty()) {
      part.unmatched.push_back(corpus[i].id);
      continue;
    }
    std::size_t best = h.front();
    for (std::size_t r : h) {
      if (freq[r] > freq[best] || (freq[r] == freq[best] && rules[r].id < rules[best].id)) best = r;
    }
    part.matched.push_back({corpus[i].id, rules[best].id, rules[best].head});
    bool conflicted = std::any_of(h.begin(), h.end(), [&](std::size_t r) { return rules[r].head != rules[best].head; });
    if (conflicted) {
      MatchConflict c{corpus[i].id, {}};
      for (std::size_t r : h) c.rule_ids.push_back(rules[r].id);
      part.conflicts.push_back(std::move(c));
    }
  }
  return part;
}

void save_partition(const std::filesystem::path& matched_path, const std::filesystem::path& unmatched_path,
                    const MatchPartition& part, const RelationSchema& schema) {
  std::ofstream m(matched_path);
  if (!m) throw std::runtime_error("cannot write " + matched_path.string());
  for (const auto& x : part.matched)
    m << json{{"id", x.instance_id}, {"rule_id", x.rule_id}, {"label", schema.name(x.label)}}.dump() << '\n';
  std::ofstream u(unmatched_path);
  if (!u) throw std::runtime_error("cannot write " + unmatched_path.string());
  for (const auto& id : part.unmatched) u << json{{"id", id}}.dump() << '\n';
}

MatchPartition load_partition(const std::filesystem::path& matched_path, const std::filesystem::path& unmatched_path,
                              const RelationSchema& schema) {
  MatchPartition part;
  auto each_line = [](const std::filesystem::path& p, auto&& fn) {
    std::ifstream in(p);
    if (!in) throw ParseError("cannot open " + p.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        fn(json::parse(line));
      } catch (const json::exception& e) {
        throw ParseError(p.string() + ": " + e.what(), lineno);
      }
    }
  };
  each_line(matched_path, [&](const json& j) {
    part.matched.push_back({j.at("id").get<std::string>(), j.at("rule_id").get<std::string>(),
                            schema.index_of(j.at("label").get<std::string>())});
  });
  each_line(unmatched_path, [&](const json& j) { part.unmatched.push_back(j.at("id").get<std::string>()); });
  return part;
}

}  // namespace nero
