#include "nero/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace nero {

namespace {

constexpr double kMaskPenalty = -1e30;
constexpr double kNormEps = 1e-12;

std::vector<double> uniform_values(std::size_t n, double bound, std::mt19937_64& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = ad::uniform(rng, bound);
  return v;
}

/// [B, T] additive mask: 0 on real tokens, a large negative on padding.
ad::Var padding_bias(int B, int T, const std::vector<int>& lengths) {
  std::vector<double> bias(static_cast<std::size_t>(B) * T, 0.0);
  for (int b = 0; b < B; ++b)
    for (int t = lengths[static_cast<std::size_t>(b)]; t < T; ++t) bias[static_cast<std::size_t>(b) * T + t] = kMaskPenalty;
  return ad::constant(B, T, std::move(bias));
}

/// Attention over time-major rows: scores [T*B, 1] -> weights [B, T].
ad::Var attention_weights(const ad::Var& scores, int T, int B, const std::vector<int>& lengths) {
  ad::Var logits = ad::transpose(ad::reshape(scores, T, B));
  if (std::any_of(lengths.begin(), lengths.end(), [T](int l) { return l < T; }))
    logits = ad::add(logits, padding_bias(B, T, lengths));
  return ad::softmax(logits, 1);
}

/// sum_t weights[:, t] * rows_t, with rows time-major [T*B, d].
ad::Var weighted_sum(const ad::Var& rows, const ad::Var& weights, int T, int B) {
  ad::Var acc;
  for (int t = 0; t < T; ++t) {
    ad::Var term = ad::mul(ad::slice(rows, 0, t * B, (t + 1) * B), ad::slice(weights, 1, t, t + 1));
    acc = acc ? ad::add(acc, term) : term;
  }
  return acc;
}

void check_batch(std::span<const TokenIds> batch, const char* what) {
  if (batch.empty()) throw std::invalid_argument(std::string(what) + ": empty batch");
  for (const auto& s : batch)
    if (s.empty()) throw std::invalid_argument(std::string(what) + ": empty token sequence");
}

}  // namespace

std::vector<int> time_major_ids(std::span<const TokenIds> batch, int& T, std::vector<int>& lengths) {
  const int B = static_cast<int>(batch.size());
  T = 0;
  lengths.clear();
  for (const auto& s : batch) {
    lengths.push_back(static_cast<int>(s.size()));
    T = std::max(T, static_cast<int>(s.size()));
  }
  std::vector<int> ids(static_cast<std::size_t>(T) * B, Vocabulary::kPadIndex);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < lengths[static_cast<std::size_t>(b)]; ++t)
      ids[static_cast<std::size_t>(t) * B + b] = batch[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
  return ids;
}

NeroModel::NeroModel(Vocabulary vocab, int num_classes, ModelDims dims, std::uint64_t seed)
    : vocab_(std::move(vocab)), num_classes_(num_classes), dims_(dims) {
  if (dims_.emb_dim != vocab_.dim())
    throw std::invalid_argument("model emb_dim " + std::to_string(dims_.emb_dim) + " differs from vocabulary dim " +
                                std::to_string(vocab_.dim()));
  if (num_classes_ < 2) throw std::invalid_argument("need at least two classes");
  if (dims_.hidden_dim <= 0 || dims_.attn_dim <= 0 || dims_.lstm_layers <= 0)
    throw std::invalid_argument("model dimensions must be positive");
  std::mt19937_64 rng(seed);
  const int V = static_cast<int>(vocab_.size()), dw = dims_.emb_dim, h = dims_.hidden_dim, da = dims_.attn_dim;

  params_.add("embedding", V, dw, vocab_.table());
  const double lstm_bound = 1.0 / std::sqrt(static_cast<double>(h));
  for (int l = 0; l < dims_.lstm_layers; ++l) {
    const int in = l == 0 ? dw : 2 * h;
    for (const char* dir : {"fwd", "bwd"}) {
      const std::string p = "lstm.l" + std::to_string(l) + "." + dir + ".";
      params_.add(p + "W", 4 * h, in, uniform_values(static_cast<std::size_t>(4 * h) * in, lstm_bound, rng));
      params_.add(p + "U", 4 * h, h, uniform_values(static_cast<std::size_t>(4 * h) * h, lstm_bound, rng));
      std::vector<double> bias(static_cast<std::size_t>(4 * h), 0.0);
      std::fill(bias.begin() + h, bias.begin() + 2 * h, 1.0);  // forget gate
      params_.add(p + "b", 1, 4 * h, std::move(bias));
    }
  }
  params_.add("rc.A", da, 2 * h, uniform_values(static_cast<std::size_t>(da) * 2 * h, 0.1, rng));
  params_.add("rc.v", da, 1, uniform_values(static_cast<std::size_t>(da), 0.1, rng));
  params_.add("rc.W", num_classes_, 2 * h, uniform_values(static_cast<std::size_t>(num_classes_) * 2 * h, 0.1, rng));
  params_.add("srm.B", da, dw, uniform_values(static_cast<std::size_t>(da) * dw, 0.1, rng));
  params_.add("srm.u", da, 1, uniform_values(static_cast<std::size_t>(da), 0.1, rng));
  params_.add("srm.D", 1, dw, std::vector<double>(static_cast<std::size_t>(dw), 1.0));
}

TokenIds NeroModel::encode_tokens(std::span<const std::string> raw) const {
  return vocab_.encode(normalize_tokens(raw));
}
TokenIds NeroModel::encode_sentence(const Instance& inst) const { return encode_tokens(mask_entities(inst)); }
TokenIds NeroModel::encode_context(const Instance& inst) const { return encode_tokens(context_span(inst)); }
TokenIds NeroModel::encode_interior(const Instance& inst) const {
  auto ids = encode_tokens(interior_context(inst));
  // Adjacent entities leave nothing between them; fall back to the masks.
  return ids.empty() ? encode_context(inst) : ids;
}
TokenIds NeroModel::encode_rule(const LabelingRule& rule) const { return vocab_.encode(rule.context); }

ad::Var NeroModel::bilstm(const ad::Var& inputs, int T, int B, const std::vector<int>& lengths, bool masked) const {
  const int h = dims_.hidden_dim;
  std::vector<ad::Var> masks;
  if (masked) {
    for (int t = 0; t < T; ++t) {
      std::vector<double> m(static_cast<std::size_t>(B));
      for (int b = 0; b < B; ++b) m[static_cast<std::size_t>(b)] = t < lengths[static_cast<std::size_t>(b)] ? 1.0 : 0.0;
      masks.push_back(ad::constant(B, 1, std::move(m)));
    }
  }
  ad::Var layer_in = inputs;  // [T*B, in]
  for (int l = 0; l < dims_.lstm_layers; ++l) {
    std::vector<ad::Var> outs[2];
    for (int d = 0; d < 2; ++d) {
      const std::string p = "lstm.l" + std::to_string(l) + (d == 0 ? ".fwd." : ".bwd.");
      const ad::Var& W = params_.get(p + "W");
      const ad::Var& U = params_.get(p + "U");
      const ad::Var& bias = params_.get(p + "b");
      ad::Var proj = ad::add(ad::matmul_nt(layer_in, W), bias);  // [T*B, 4h]
      outs[d].resize(static_cast<std::size_t>(T));
      ad::Var hs, cs;
      for (int s = 0; s < T; ++s) {
        const int t = d == 0 ? s : T - 1 - s;
        ad::Var gates = ad::slice(proj, 0, t * B, (t + 1) * B);
        if (hs) gates = ad::add(gates, ad::matmul_nt(hs, U));
        ad::Var i = ad::sigmoid(ad::slice(gates, 1, 0, h));
        ad::Var f = ad::sigmoid(ad::slice(gates, 1, h, 2 * h));
        ad::Var g = ad::tanh(ad::slice(gates, 1, 2 * h, 3 * h));
        ad::Var o = ad::sigmoid(ad::slice(gates, 1, 3 * h, 4 * h));
        ad::Var c = cs ? ad::add(ad::mul(f, cs), ad::mul(i, g)) : ad::mul(i, g);
        ad::Var hn = ad::mul(o, ad::tanh(c));
        // Right padding: the backward pass meets padding first and must
        // enter each sequence with a zero state.
        if (masked && d == 1) {
          c = ad::mul(c, masks[static_cast<std::size_t>(t)]);
          hn = ad::mul(hn, masks[static_cast<std::size_t>(t)]);
        }
        cs = c;
        hs = hn;
        outs[d][static_cast<std::size_t>(t)] = hn;
      }
    }
    std::vector<ad::Var> steps;
    steps.reserve(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t)
      steps.push_back(ad::concat({outs[0][static_cast<std::size_t>(t)], outs[1][static_cast<std::size_t>(t)]}, 1));
    layer_in = ad::concat(steps, 0);  // [T*B, 2h]
  }
  return layer_in;
}

NeroModel::RcOutput NeroModel::rc_forward(std::span<const TokenIds> batch, bool train, std::mt19937_64& rng) const {
  check_batch(batch, "rc_forward");
  const int B = static_cast<int>(batch.size());
  int T = 0;
  RcOutput out;
  const auto ids = time_major_ids(batch, T, out.lengths);
  const bool masked = std::any_of(out.lengths.begin(), out.lengths.end(), [T](int l) { return l < T; });

  ad::Var x = ad::gather_rows(params_.get("embedding"), ids);
  ad::Var hidden = bilstm(x, T, B, out.lengths, masked);
  hidden = ad::dropout(hidden, dims_.dropout, rng, train);

  ad::Var scores = ad::matmul(ad::tanh(ad::matmul_nt(hidden, params_.get("rc.A"))), params_.get("rc.v"));
  out.attention = attention_weights(scores, T, B, out.lengths);
  out.sentence = weighted_sum(hidden, out.attention, T, B);
  out.probs = ad::softmax(ad::matmul_nt(out.sentence, params_.get("rc.W")), 1);
  return out;
}

std::vector<std::vector<double>> NeroModel::rc_predict(std::span<const TokenIds> batch) const {
  ad::NoGradGuard guard;
  std::mt19937_64 unused(0);
  std::vector<std::vector<double>> out;
  out.reserve(batch.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t lo = 0; lo < batch.size(); lo += kChunk) {
    auto chunk = batch.subspan(lo, std::min(kChunk, batch.size() - lo));
    auto res = rc_forward(chunk, false, unused);
    for (int b = 0; b < res.probs->rows; ++b)
      out.emplace_back(res.probs->value.begin() + static_cast<std::ptrdiff_t>(b) * num_classes_,
                       res.probs->value.begin() + static_cast<std::ptrdiff_t>(b + 1) * num_classes_);
  }
  return out;
}

NeroModel::SrmOutput NeroModel::srm_embed(std::span<const TokenIds> batch) const {
  check_batch(batch, "srm_embed");
  const int B = static_cast<int>(batch.size());
  int T = 0;
  SrmOutput out;
  const auto ids = time_major_ids(batch, T, out.lengths);
  ad::Var x = ad::gather_rows(params_.get("embedding"), ids);  // [T*B, d_w]
  ad::Var scores = ad::matmul(ad::tanh(ad::matmul_nt(x, params_.get("srm.B"))), params_.get("srm.u"));
  out.attention = attention_weights(scores, T, B, out.lengths);
  out.pooled = weighted_sum(x, out.attention, T, B);
  return out;
}

ad::Var NeroModel::srm_transform(const ad::Var& pooled) const { return ad::mul(pooled, params_.get("srm.D")); }

ad::Var NeroModel::srm_score_matrix(const ad::Var& pooled_a, const ad::Var& pooled_b) const {
  ad::Var a = ad::l2_normalize_rows(srm_transform(pooled_a), kNormEps);
  if (pooled_a == pooled_b) return ad::matmul_nt(a, a);
  ad::Var b = ad::l2_normalize_rows(srm_transform(pooled_b), kNormEps);
  return ad::matmul_nt(a, b);
}

std::vector<std::vector<double>> NeroModel::srm_pooled(std::span<const TokenIds> batch) const {
  ad::NoGradGuard guard;
  std::vector<std::vector<double>> out;
  out.reserve(batch.size());
  constexpr std::size_t kChunk = 256;
  const int dw = dims_.emb_dim;
  for (std::size_t lo = 0; lo < batch.size(); lo += kChunk) {
    auto chunk = batch.subspan(lo, std::min(kChunk, batch.size() - lo));
    auto res = srm_embed(chunk);
    for (int b = 0; b < res.pooled->rows; ++b)
      out.emplace_back(res.pooled->value.begin() + static_cast<std::ptrdiff_t>(b) * dw,
                       res.pooled->value.begin() + static_cast<std::ptrdiff_t>(b + 1) * dw);
  }
  return out;
}

namespace {

std::vector<double> transformed_unit(const std::vector<double>& z, const std::vector<double>& D, bool strict) {
  std::vector<double> y(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    y[i] = z[i] * D[i];
    s += y[i] * y[i];
  }
  const double nr = std::sqrt(s);
  if (nr < kNormEps) {
    if (strict) throw std::domain_error("srm_score: transformed representation has zero norm");
    return std::vector<double>(z.size(), 0.0);
  }
  for (auto& v : y) v /= nr;
  return y;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

double NeroModel::srm_score(const TokenIds& a, const TokenIds& b) const {
  // Each side is pooled on its own so the result cannot depend on argument order.
  const auto pa = srm_pooled(std::span<const TokenIds>(&a, 1));
  const auto pb = srm_pooled(std::span<const TokenIds>(&b, 1));
  const auto& D = params_.get("srm.D")->value;
  const auto ua = transformed_unit(pa[0], D, true);
  const auto ub = transformed_unit(pb[0], D, true);
  return std::clamp(dot(ua, ub), -1.0, 1.0);
}

std::vector<std::vector<double>> NeroModel::srm_scores(std::span<const std::vector<double>> a,
                                                       std::span<const std::vector<double>> b) const {
  const auto& D = params_.get("srm.D")->value;
  std::vector<std::vector<double>> ua, ub;
  for (const auto& z : a) ua.push_back(transformed_unit(z, D, false));
  for (const auto& z : b) ub.push_back(transformed_unit(z, D, false));
  std::vector<std::vector<double>> out(a.size(), std::vector<double>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i][j] = std::clamp(dot(ua[i], ub[j]), -1.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------

void NeroModel::save(const std::filesystem::path& dir, const RelationSchema& schema) const {
  std::filesystem::create_directories(dir);
  ad::save_parameters(dir / "params.json", params_);
  nlohmann::json m;
  m["format"] = "nero-model";
  m["version"] = 1;
  m["dims"] = {{"emb_dim", dims_.emb_dim},
               {"hidden_dim", dims_.hidden_dim},
               {"attn_dim", dims_.attn_dim},
               {"lstm_layers", dims_.lstm_layers},
               {"dropout", dims_.dropout}};
  m["relations"] = schema.names();
  m["schema_hash"] = schema.fingerprint();
  m["vocab"] = vocab_.tokens();
  m["vocab_hash"] = vocab_.fingerprint();
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << m.dump(1) << '\n';
}

NeroModel NeroModel::load(const std::filesystem::path& dir, RelationSchema* schema_out) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ParseError("cannot open model manifest " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("model manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != "nero-model" || m.value("version", 0) != 1)
    throw ParseError("not a version-1 model manifest: " + dir.string());
  RelationSchema schema(m.at("relations").get<std::vector<std::string>>());
  if (schema.fingerprint() != m.at("schema_hash").get<std::uint64_t>())
    throw ValidationError("model manifest: schema hash mismatch");
  ModelDims dims;
  const auto& d = m.at("dims");
  dims.emb_dim = d.at("emb_dim");
  dims.hidden_dim = d.at("hidden_dim");
  dims.attn_dim = d.at("attn_dim");
  dims.lstm_layers = d.at("lstm_layers");
  dims.dropout = d.at("dropout");
  auto tokens = m.at("vocab").get<std::vector<std::string>>();
  // Embedding rows are overwritten from params.json below.
  Vocabulary vocab(tokens, dims.emb_dim, std::vector<double>(tokens.size() * static_cast<std::size_t>(dims.emb_dim), 0.0));
  if (vocab.fingerprint() != m.at("vocab_hash").get<std::uint64_t>())
    throw ValidationError("model manifest: vocabulary hash mismatch");
  NeroModel model(std::move(vocab), static_cast<int>(schema.size()), dims, 0);
  ad::load_parameters(dir / "params.json", model.params_);
  const auto& emb = model.params_.get("embedding")->value;
  model.vocab_ = Vocabulary(model.vocab_.tokens(), dims.emb_dim, emb);
  if (schema_out) *schema_out = schema;
  return model;
}

}  // namespace nero
