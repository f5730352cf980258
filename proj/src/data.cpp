#include "nero/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "nero/stemmer.hpp"

namespace nero {

using nlohmann::json;

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// RelationSchema

RelationSchema::RelationSchema(std::vector<std::string> names) {
  bool have_none = false;
  for (auto& n : names) {
    if (n == "NONE") n = std::string(kNoneName);
    if (n == kNoneName) have_none = true;
  }
  if (!have_none) names.insert(names.begin(), std::string(kNoneName));
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].empty()) throw ValidationError("relation schema: empty relation id");
    if (!index_.emplace(names[i], static_cast<RelationId>(i)).second)
      throw ValidationError("relation schema: duplicate relation id '" + names[i] + "'");
    if (names[i] == kNoneName) none_index_ = static_cast<RelationId>(i);
  }
  names_ = std::move(names);
}

RelationSchema RelationSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open schema file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("schema " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw ParseError("schema " + path.string() + ": expected a JSON array of strings");
  std::vector<std::string> names;
  for (const auto& v : j) {
    if (!v.is_string()) throw ParseError("schema " + path.string() + ": non-string relation id");
    names.push_back(v.get<std::string>());
  }
  return RelationSchema(std::move(names));
}

void RelationSchema::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << json(names_).dump() << '\n';
}

std::optional<RelationId> RelationSchema::find(std::string_view name) const {
  if (name == "NONE") return none_index_;
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

RelationId RelationSchema::index_of(std::string_view name) const {
  auto r = find(name);
  if (!r) throw ValidationError("unknown relation '" + std::string(name) + "'");
  return *r;
}

std::uint64_t RelationSchema::fingerprint() const {
  std::uint64_t h = fnv1a("schema");
  for (const auto& n : names_) {
    h = fnv1a(n, h);
    h = fnv1a("\x1f", h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Instance

namespace {

bool valid_type(std::string_view t) {
  if (t.empty()) return false;
  return std::all_of(t.begin(), t.end(), [](char c) {
    return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
  });
}

}  // namespace

void Instance::validate() const {
  const int n = static_cast<int>(tokens.size());
  auto check_span = [&](const Span& s, const char* which) {
    if (s.begin < 0 || s.end < s.begin || s.end >= n)
      throw ValidationError("instance " + id + ": " + which + " span [" + std::to_string(s.begin) + "," +
                            std::to_string(s.end) + "] out of range for " + std::to_string(n) + " tokens");
  };
  check_span(subj, "subject");
  check_span(obj, "object");
  if (!(subj.end < obj.begin || obj.end < subj.begin))
    throw ValidationError("instance " + id + ": subject and object spans overlap");
  if (!valid_type(subj_type)) throw ValidationError("instance " + id + ": bad subject type '" + subj_type + "'");
  if (!valid_type(obj_type)) throw ValidationError("instance " + id + ": bad object type '" + obj_type + "'");
}

std::vector<Instance> parse_dataset(std::istream& in, const RelationSchema& schema) {
  std::vector<Instance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    Instance inst;
    try {
      const json rec = json::parse(line);
      inst.id = rec.contains("id") ? (rec["id"].is_string() ? rec["id"].get<std::string>()
                                                             : rec["id"].dump())
                                   : "line" + std::to_string(lineno);
      inst.tokens = rec.at("token").get<std::vector<std::string>>();
      inst.subj = {rec.at("subj_start").get<int>(), rec.at("subj_end").get<int>()};
      inst.obj = {rec.at("obj_start").get<int>(), rec.at("obj_end").get<int>()};
      inst.subj_type = rec.at("subj_type").get<std::string>();
      inst.obj_type = rec.at("obj_type").get<std::string>();
      if (rec.contains("relation") && !rec["relation"].is_null()) {
        const auto rel = rec["relation"].get<std::string>();
        auto r = schema.find(rel);
        if (!r) throw ValidationError("unknown relation '" + rel + "'");
        inst.gold = *r;
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), lineno);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
    try {
      inst.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<Instance> load_dataset(const std::filesystem::path& path, const RelationSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset " + path.string());
  return parse_dataset(in, schema);
}

void save_dataset(const std::filesystem::path& path, std::span<const Instance> corpus,
                  const RelationSchema& schema) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& inst : corpus) {
    json rec = {{"id", inst.id},
                {"token", inst.tokens},
                {"subj_start", inst.subj.begin},
                {"subj_end", inst.subj.end},
                {"obj_start", inst.obj.begin},
                {"obj_end", inst.obj.end},
                {"subj_type", inst.subj_type},
                {"obj_type", inst.obj_type}};
    if (inst.gold) rec["relation"] = schema.name(*inst.gold);
    out << rec.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Masking

std::string subj_mask(std::string_view type) { return "SUBJ-" + std::string(type); }
std::string obj_mask(std::string_view type) { return "OBJ-" + std::string(type); }

bool is_entity_mask(std::string_view token) {
  return (token.starts_with("SUBJ-") && token.size() > 5) || (token.starts_with("OBJ-") && token.size() > 4);
}

std::vector<std::string> mask_entities(const Instance& inst) {
  std::vector<std::string> out;
  out.reserve(inst.tokens.size());
  for (int i = 0; i < static_cast<int>(inst.tokens.size()); ++i) {
    if (i == inst.subj.begin) {
      out.push_back(subj_mask(inst.subj_type));
    } else if (i == inst.obj.begin) {
      out.push_back(obj_mask(inst.obj_type));
    } else if ((i > inst.subj.begin && i <= inst.subj.end) || (i > inst.obj.begin && i <= inst.obj.end)) {
      continue;
    } else {
      out.push_back(inst.tokens[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

std::vector<std::string> context_span(const Instance& inst) {
  const Span& first = inst.subj.begin < inst.obj.begin ? inst.subj : inst.obj;
  const Span& second = inst.subj.begin < inst.obj.begin ? inst.obj : inst.subj;
  const bool subj_first = inst.subj.begin < inst.obj.begin;
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(second.begin - first.end + 1));
  out.push_back(subj_first ? subj_mask(inst.subj_type) : obj_mask(inst.obj_type));
  for (int i = first.end + 1; i < second.begin; ++i) out.push_back(inst.tokens[static_cast<std::size_t>(i)]);
  out.push_back(subj_first ? obj_mask(inst.obj_type) : subj_mask(inst.subj_type));
  return out;
}

std::vector<std::string> interior_context(const Instance& inst) {
  auto ctx = context_span(inst);
  return {ctx.begin() + 1, ctx.end() - 1};
}

std::string normalize_token(std::string_view token) {
  if (is_entity_mask(token)) return std::string(token);
  std::string lower(token);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return porter_stem(lower);
}

std::vector<std::string> normalize_tokens(std::span<const std::string> tokens) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(normalize_token(t));
  return out;
}

// ---------------------------------------------------------------------------
// Embeddings

EmbeddingTable parse_embeddings(std::istream& in, int dim) {
  if (dim <= 0) throw ParseError("embedding dimension must be positive");
  EmbeddingTable t;
  t.dim = dim;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> fields;
  while (std::getline(in, line)) {
    ++lineno;
    fields.clear();
    std::istringstream ss(line);
    for (std::string f; ss >> f;) fields.push_back(std::move(f));
    if (fields.empty()) continue;
    if (static_cast<int>(fields.size()) != dim + 1)
      throw ParseError("embedding line has " + std::to_string(fields.size() - 1) + " values, expected " +
                           std::to_string(dim),
                       lineno);
    const std::size_t row = t.tokens.size();
    if (!t.index.emplace(fields[0], row).second) continue;  // first occurrence wins
    t.tokens.push_back(fields[0]);
    for (int d = 0; d < dim; ++d) {
      const std::string& f = fields[static_cast<std::size_t>(d + 1)];
      char* end = nullptr;
      const double v = std::strtod(f.c_str(), &end);
      if (end != f.c_str() + f.size() || !std::isfinite(v))
        throw ParseError("embedding value '" + f + "' is not a finite number", lineno);
      t.values.push_back(v);
    }
  }
  return t;
}

EmbeddingTable load_embeddings(const std::filesystem::path& path, int dim) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open embeddings " + path.string());
  return parse_embeddings(in, dim);
}

std::vector<double> seeded_row(std::string_view token, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(fnv1a(token) ^ (seed * 0x9E3779B97F4A7C15ULL));
  const double bound = 0.5 / dim;
  std::vector<double> row(static_cast<std::size_t>(dim));
  for (auto& v : row) {
    // 53-bit mantissa draw; avoids std::uniform_real_distribution's
    // implementation-defined algorithm so tables match across toolchains.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = (2.0 * u - 1.0) * bound;
  }
  return row;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens, int dim, std::vector<double> table)
    : dim_(dim), tokens_(std::move(tokens)), table_(std::move(table)) {
  if (table_.size() != tokens_.size() * static_cast<std::size_t>(dim_))
    throw ValidationError("vocabulary table size does not match token count");
  if (tokens_.size() < 2 || tokens_[0] != kPad || tokens_[1] != kUnk)
    throw ValidationError("vocabulary must start with <pad>, <unk>");
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw ValidationError("duplicate vocabulary token '" + tokens_[i] + "'");
  for (double v : table_)
    if (!std::isfinite(v)) throw ValidationError("non-finite embedding value");
}

Vocabulary Vocabulary::build(std::span<const Instance> corpus,
                             std::span<const std::vector<std::string>> extra_contexts,
                             std::span<const std::string> entity_types, const EmbeddingTable* pretrained,
                             int dim, std::uint64_t seed) {
  if (pretrained && pretrained->dim != dim)
    throw ValidationError("embedding table dimension " + std::to_string(pretrained->dim) +
                          " does not match model dimension " + std::to_string(dim));
  // normalized token -> (surface form -> count)
  std::map<std::string, std::map<std::string, std::size_t>> surfaces;
  auto add = [&](const std::string& raw) {
    std::string lower = raw;
    if (!is_entity_mask(raw))
      for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    ++surfaces[normalize_token(raw)][lower];
  };
  std::set<std::string> types(entity_types.begin(), entity_types.end());
  for (const auto& inst : corpus) {
    for (const auto& t : mask_entities(inst)) add(t);
    types.insert(inst.subj_type);
    types.insert(inst.obj_type);
  }
  // Rule contexts are already normalized; stemming them again could move them.
  for (const auto& ctx : extra_contexts)
    for (const auto& t : ctx) ++surfaces[t][t];
  for (const auto& ty : types) {
    add(subj_mask(ty));
    add(obj_mask(ty));
  }

  std::vector<std::string> tokens{std::string(kPad), std::string(kUnk)};
  std::vector<double> table(2 * static_cast<std::size_t>(dim), 0.0);
  {
    auto unk = seeded_row(kUnk, dim, seed);
    std::copy(unk.begin(), unk.end(), table.begin() + dim);
  }
  for (const auto& [tok, forms] : surfaces) {
    if (tok == kPad || tok == kUnk) continue;
    tokens.push_back(tok);
    std::vector<double> row;
    if (pretrained) {
      auto it = pretrained->index.find(tok);
      if (it == pretrained->index.end()) {
        // Most frequent surface form first, ties broken alphabetically.
        std::vector<std::pair<std::size_t, std::string>> ranked;
        for (const auto& [form, count] : forms) ranked.emplace_back(count, form);
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (const auto& [count, form] : ranked) {
          it = pretrained->index.find(form);
          if (it != pretrained->index.end()) break;
        }
      }
      if (it != pretrained->index.end()) {
        auto r = pretrained->row(it->second);
        row.assign(r.begin(), r.end());
      }
    }
    if (row.empty()) row = seeded_row(tok, dim, seed);
    table.insert(table.end(), row.begin(), row.end());
  }
  return Vocabulary(std::move(tokens), dim, std::move(table));
}

bool Vocabulary::contains(std::string_view normalized) const {
  return index_.count(std::string(normalized)) > 0;
}

int Vocabulary::id(std::string_view normalized) const {
  auto it = index_.find(std::string(normalized));
  return it == index_.end() ? kUnkIndex : it->second;
}

std::vector<int> Vocabulary::encode(std::span<const std::string> normalized) const {
  std::vector<int> ids;
  ids.reserve(normalized.size());
  for (const auto& t : normalized) ids.push_back(id(t));
  return ids;
}

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = fnv1a("vocab");
  h = fnv1a(std::to_string(dim_), h);
  for (const auto& t : tokens_) {
    h = fnv1a(t, h);
    h = fnv1a("\x1f", h);
  }
  return h;
}

}  // namespace nero
