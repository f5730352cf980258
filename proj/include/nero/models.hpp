#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nero/autodiff.hpp"
#include "nero/data.hpp"
#include "nero/rules.hpp"

namespace nero {

struct ModelDims {
  int emb_dim = 100;
  int hidden_dim = 100;  // per LSTM direction
  int attn_dim = 200;
  int lstm_layers = 2;
  double dropout = 0.5;
};

using TokenIds = std::vector<int>;

/// Relation classifier (embedding -> BiLSTM -> attention -> softmax) and soft
/// rule matcher (word attention -> diagonal metric -> cosine) over one shared
/// embedding table.
///
/// Parameter names: "embedding", "lstm.l<k>.<fwd|bwd>.{W,U,b}", "rc.A",
/// "rc.v", "rc.W", "srm.B", "srm.u", "srm.D".
class NeroModel {
 public:
  NeroModel(Vocabulary vocab, int num_classes, ModelDims dims, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }
  int num_classes() const { return num_classes_; }
  const Vocabulary& vocab() const { return vocab_; }
  ad::ParameterSet& params() { return params_; }
  const ad::ParameterSet& params() const { return params_; }
  /// Width of the BiLSTM output (both directions concatenated).
  int sentence_dim() const { return 2 * dims_.hidden_dim; }

  /// Parameters only the matcher uses.
  static bool is_srm_param(const std::string& name) { return name.starts_with("srm."); }

  // Encoders: tokens are normalized (stemmed, masks intact) then looked up.
  TokenIds encode_sentence(const Instance& inst) const;  // full masked sentence
  TokenIds encode_context(const Instance& inst) const;   // context_span
  TokenIds encode_interior(const Instance& inst) const;  // between the masks only
  TokenIds encode_rule(const LabelingRule& rule) const;
  TokenIds encode_tokens(std::span<const std::string> raw) const;

  struct RcOutput {
    ad::Var probs;      // [B, C]
    ad::Var attention;  // [B, T], zero on padding
    ad::Var sentence;   // [B, 2h]
    std::vector<int> lengths;
  };
  /// Throws std::invalid_argument on an empty batch or empty sequence.
  RcOutput rc_forward(std::span<const TokenIds> batch, bool train, std::mt19937_64& rng) const;
  /// Eval-mode class probabilities, one row per sequence.
  std::vector<std::vector<double>> rc_predict(std::span<const TokenIds> batch) const;

  struct SrmOutput {
    ad::Var pooled;     // [B, d_w]
    ad::Var attention;  // [B, T]
    std::vector<int> lengths;
  };
  SrmOutput srm_embed(std::span<const TokenIds> batch) const;
  /// D-scaled rows: z ⊙ diag(D).
  ad::Var srm_transform(const ad::Var& pooled) const;
  /// Cosine of D-transformed pooled vectors for every (row of a, row of b) -> [|a|, |b|].
  ad::Var srm_score_matrix(const ad::Var& pooled_a, const ad::Var& pooled_b) const;

  /// Single-pair score. Throws std::domain_error when either transformed vector is ~0.
  double srm_score(const TokenIds& a, const TokenIds& b) const;
  /// Graph-free pooled vectors (forward only), row per sequence.
  std::vector<std::vector<double>> srm_pooled(std::span<const TokenIds> batch) const;
  /// Scores of each row of `a` against each row of `b` from graph-free pooled vectors.
  std::vector<std::vector<double>> srm_scores(std::span<const std::vector<double>> a,
                                              std::span<const std::vector<double>> b) const;

  void save(const std::filesystem::path& dir, const RelationSchema& schema) const;
  static NeroModel load(const std::filesystem::path& dir, RelationSchema* schema_out = nullptr);

 private:
  ad::Var bilstm(const ad::Var& inputs, int T, int B, const std::vector<int>& lengths, bool masked) const;

  Vocabulary vocab_;
  int num_classes_;
  ModelDims dims_;
  ad::ParameterSet params_;
};

/// Pads `batch` time-major: ids[t * B + b], PAD beyond each length.
std::vector<int> time_major_ids(std::span<const TokenIds> batch, int& T, std::vector<int>& lengths);

}  // namespace nero
