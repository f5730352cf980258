#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <stdexcept>

namespace nero::testing {

namespace {

constexpr const char* kSyllables[] = {"ka", "lo", "mi", "ru", "to", "zu", "pa", "no", "vi", "du", "go", "ba", "si", "fo"};

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

bool coin(std::mt19937_64& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

std::vector<double> gaussian(std::mt19937_64& rng, int n, double norm) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(n));
  double s = 0.0;
  for (auto& x : v) {
    x = nd(rng);
    s += x * x;
  }
  s = std::sqrt(s);
  for (auto& x : v) x *= norm / s;
  return v;
}

std::string body_key(const std::string& s, const std::string& o, const std::vector<std::string>& ctx) {
  std::string k = s + "|" + o;
  for (const auto& t : ctx) k += "|" + t;
  return k;
}

std::vector<std::string> stemmed_body(const std::string& s, const std::string& o,
                                      const std::vector<std::string>& interior) {
  std::vector<std::string> ctx{subj_mask(s)};
  for (const auto& w : interior) ctx.push_back(normalize_token(w));
  ctx.push_back(obj_mask(o));
  return ctx;
}

}  // namespace

std::string pseudo_word(std::mt19937_64& rng, int syllables) {
  std::string w;
  for (int i = 0; i < syllables; ++i) w += kSyllables[pick(rng, std::size(kSyllables))];
  return w;
}

RelationId World::relation_of_keyword(const std::string& surface) const {
  for (std::size_t r = 0; r < keywords.size(); ++r)
    if (std::find(keywords[r].begin(), keywords[r].end(), surface) != keywords[r].end())
      return static_cast<RelationId>(r);
  return -1;
}

World make_world(const WorldSpec& spec) {
  World w;
  w.spec = spec;
  std::vector<std::string> rel;
  for (int r = 1; r <= spec.relations; ++r) rel.push_back("rel_" + std::to_string(r));
  w.schema = RelationSchema(rel);
  std::mt19937_64 rng(spec.seed);

  std::set<std::string> stems;
  auto fresh = [&](int syllables) {
    for (;;) {
      std::string word = pseudo_word(rng, syllables);
      if (stems.insert(normalize_token(word)).second) return word;
    }
  };
  w.keywords.resize(w.schema.size());
  for (auto& kws : w.keywords)
    for (int k = 0; k < spec.keywords_per_relation; ++k) kws.push_back(fresh(3));
  for (int f = 0; f < spec.fillers; ++f) w.fillers.push_back(fresh(2));
  for (int n = 0; n < 12; ++n) w.names.push_back(fresh(4));
  w.type_pairs = {{"PERSON", "ORGANIZATION"}, {"ORGANIZATION", "LOCATION"}};

  const int dim = w.dim();
  auto& emb = w.embeddings;
  emb.dim = dim;
  auto put = [&](const std::string& word, const std::vector<double>& sem, const std::vector<double>& nui) {
    emb.index.emplace(word, emb.tokens.size());
    emb.tokens.push_back(word);
    for (double x : sem) emb.values.push_back(spec.scale * x);
    for (double x : nui) emb.values.push_back(spec.scale * x);
  };
  for (const auto& kws : w.keywords) {
    const auto center = gaussian(rng, spec.semantic_dim, 1.0);
    for (const auto& kw : kws) {
      auto sem = center;
      const auto jitter = gaussian(rng, spec.semantic_dim, spec.keyword_noise);
      for (std::size_t i = 0; i < sem.size(); ++i) sem[i] += jitter[i];
      put(kw, sem, gaussian(rng, spec.nuisance_dim, spec.nuisance_scale));
    }
  }
  for (const auto& f : w.fillers)
    put(f, gaussian(rng, spec.semantic_dim, spec.filler_semantic), gaussian(rng, spec.nuisance_dim, spec.nuisance_scale));
  for (const auto& n : w.names)
    put(n, gaussian(rng, spec.semantic_dim, 0.1), gaussian(rng, spec.nuisance_dim, 0.1));
  return w;
}

RuleBook make_rules(const World& world, const RuleSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::vector<int> slots = spec.keyword_slots;
  if (slots.empty())
    for (int k = 0; k < world.spec.canonical_keywords; ++k) slots.push_back(k);
  std::vector<RelationId> rels = spec.relations;
  if (rels.empty())
    for (std::size_t r = 0; r < world.schema.size(); ++r) rels.push_back(static_cast<RelationId>(r));

  RuleBook book;
  std::set<std::string> seen;
  int counter = 0;
  for (RelationId r : rels) {
    if (world.schema.is_none(r) && !spec.include_none) continue;
    for (int slot : slots) {
      const std::string& kw = world.keywords[static_cast<std::size_t>(r)].at(static_cast<std::size_t>(slot));
      for (const auto& [s, o] : world.type_pairs) {
        for (int f = 0; f < spec.forms_per_keyword; ++f) {
          std::vector<std::string> interior;
          for (int attempt = 0; attempt < 50; ++attempt) {
            interior = {kw};
            if (spec.max_fillers > 0 && (f > 0 || attempt > 0)) {
              const auto& filler = world.fillers[pick(rng, world.fillers.size())];
              if (coin(rng, 0.5)) interior.insert(interior.begin(), filler);
              else interior.push_back(filler);
            }
            if (!seen.count(body_key(s, o, stemmed_body(s, o, interior)))) break;
          }
          const auto ctx = stemmed_body(s, o, interior);
          if (!seen.insert(body_key(s, o, ctx)).second) continue;
          char id[32];
          std::snprintf(id, sizeof id, "%s%03d", spec.id_prefix.c_str(), ++counter);
          book.rules.push_back({id, s, o, ctx, r});
          book.surface[id] = interior;
        }
      }
    }
  }
  return book;
}

std::vector<Instance> make_corpus(const World& world, const RuleBook& book, const CorpusSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::set<std::string> bodies;
  std::map<std::string, std::vector<const LabelingRule*>> by_rel_types;
  for (const auto& r : book.rules) {
    bodies.insert(body_key(r.subj_type, r.obj_type, r.context));
    by_rel_types[std::to_string(r.head) + "|" + r.subj_type + "|" + r.obj_type].push_back(&r);
  }
  std::vector<RelationId> positives = spec.relations;
  if (positives.empty())
    for (std::size_t r = 0; r < world.schema.size(); ++r)
      if (!world.schema.is_none(static_cast<RelationId>(r))) positives.push_back(static_cast<RelationId>(r));

  auto fillers = [&](int max) {
    std::vector<std::string> out;
    const int n = static_cast<int>(pick(rng, static_cast<std::size_t>(max) + 1));
    for (int i = 0; i < n; ++i) out.push_back(world.fillers[pick(rng, world.fillers.size())]);
    return out;
  };

  std::vector<Instance> corpus;
  const int width = static_cast<int>(std::to_string(spec.sentences).size());
  for (std::size_t i = 0; i < spec.sentences; ++i) {
    const RelationId r = coin(rng, spec.none_rate) ? world.schema.none_index() : positives[pick(rng, positives.size())];
    const auto& [st, ot] = world.type_pairs[pick(rng, world.type_pairs.size())];
    std::vector<std::string> interior;
    const auto it = by_rel_types.find(std::to_string(r) + "|" + st + "|" + ot);
    if (it != by_rel_types.end() && coin(rng, spec.exact_rate)) {
      interior = book.surface.at(it->second[pick(rng, it->second.size())]->id);
    } else {
      const auto& kws = world.keywords[static_cast<std::size_t>(r)];
      do {
        interior = fillers(1);
        interior.push_back(kws[pick(rng, kws.size())]);
        for (auto& f : fillers(2)) interior.push_back(f);
      } while (bodies.count(body_key(st, ot, stemmed_body(st, ot, interior))));
    }
    Instance inst;
    char id[48];
    std::snprintf(id, sizeof id, "%s%0*zu", spec.id_prefix.c_str(), width, i);
    inst.id = id;
    inst.tokens = fillers(2);
    const int subj_len = 1 + static_cast<int>(pick(rng, 2));
    const int obj_len = 1 + static_cast<int>(pick(rng, 2));
    inst.subj.begin = static_cast<int>(inst.tokens.size());
    for (int k = 0; k < subj_len; ++k) inst.tokens.push_back(world.names[pick(rng, world.names.size())]);
    inst.subj.end = static_cast<int>(inst.tokens.size()) - 1;
    inst.tokens.insert(inst.tokens.end(), interior.begin(), interior.end());
    inst.obj.begin = static_cast<int>(inst.tokens.size());
    for (int k = 0; k < obj_len; ++k) inst.tokens.push_back(world.names[pick(rng, world.names.size())]);
    inst.obj.end = static_cast<int>(inst.tokens.size()) - 1;
    for (auto& f : fillers(2)) inst.tokens.push_back(f);
    inst.subj_type = st;
    inst.obj_type = ot;
    inst.gold = r;
    corpus.push_back(std::move(inst));
  }
  return corpus;
}

MatcherFixture make_matcher_fixture(std::size_t sentences, std::size_t n_rules, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MatcherFixture fx;
  fx.schema = RelationSchema({"rel_a", "rel_b", "rel_c"});
  // Mixed case and inflected forms exercise normalization; several pairs share a stem.
  const std::vector<std::string> words = {"of", "the", "Founded", "founding", "founder", "in", "wife", "CEO", "at"};
  const std::vector<std::string> types = {"PER", "ORG"};
  auto interior = [&] {
    std::vector<std::string> out;
    const std::size_t n = pick(rng, 3);
    for (std::size_t i = 0; i < n; ++i) out.push_back(words[pick(rng, words.size())]);
    return out;
  };
  for (std::size_t i = 0; i < sentences; ++i) {
    Instance inst;
    inst.id = "m" + std::to_string(i);
    inst.subj_type = types[pick(rng, types.size())];
    inst.obj_type = types[pick(rng, types.size())];
    const bool obj_first = coin(rng, 0.3);
    inst.tokens = {"x"};
    const auto mid = interior();
    const int first = 1;
    const int second = first + 1 + static_cast<int>(mid.size());
    inst.tokens.push_back("Ann");
    inst.tokens.insert(inst.tokens.end(), mid.begin(), mid.end());
    inst.tokens.push_back("Bob");
    inst.tokens.push_back("y");
    (obj_first ? inst.obj : inst.subj) = {first, first};
    (obj_first ? inst.subj : inst.obj) = {second, second};
    inst.gold = static_cast<RelationId>(pick(rng, fx.schema.size()));
    fx.corpus.push_back(std::move(inst));
  }
  std::vector<std::size_t> ids(n_rules);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::shuffle(ids.begin(), ids.end(), rng);
  for (std::size_t k = 0; k < n_rules; ++k) {
    LabelingRule r;
    r.id = "p" + std::to_string(100 + ids[k]);
    // Half the rules copy a sentence's body so that matches are frequent.
    if (coin(rng, 0.5) && !fx.corpus.empty()) {
      const auto& inst = fx.corpus[pick(rng, fx.corpus.size())];
      r.subj_type = inst.subj_type;
      r.obj_type = inst.obj_type;
      r.context = stemmed_context(inst);
    } else {
      r.subj_type = types[pick(rng, types.size())];
      r.obj_type = types[pick(rng, types.size())];
      const bool obj_first = coin(rng, 0.3);
      r.context.push_back(obj_first ? obj_mask(r.obj_type) : subj_mask(r.subj_type));
      for (const auto& w : interior()) r.context.push_back(normalize_token(w));
      r.context.push_back(obj_first ? subj_mask(r.subj_type) : obj_mask(r.obj_type));
    }
    r.head = static_cast<RelationId>(pick(rng, fx.schema.size()));
    fx.rules.push_back(std::move(r));
  }
  return fx;
}

}  // namespace nero::testing
