#pragma once

// Reverse-mode differentiation over small dense row-major matrices.
//
// Every value is a 2-D array; vectors are [1, n] rows or [n, 1] columns.
// Ops build a graph of shared nodes; backward() walks it in reverse
// topological order and accumulates exact analytic gradients into every
// node that requires them. Parameters are leaves that persist across graphs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nero::ad {

/// Thrown when operand shapes violate an op's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward()
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t size() const { return value.size(); }
  double& at(int r, int c) { return value[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return value[static_cast<std::size_t>(r) * cols + c]; }
  /// Gradient buffer, allocated (zeroed) on first use.
  std::vector<double>& g();
  double item() const;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

Var constant(int rows, int cols, std::vector<double> values);
Var constant(int rows, int cols, double fill = 0.0);
Var scalar(double v);
Var leaf(int rows, int cols, std::vector<double> values, bool requires_grad);

// --- linear algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);     // [m,k] x [k,n]
Var matmul_nt(const Var& a, const Var& b);  // [m,k] x [n,k]^T
Var transpose(const Var& a);
Var reshape(const Var& a, int rows, int cols);

// --- elementwise ------------------------------------------------------------
/// Same shape, or `b` broadcast as a [1,n] row or a [m,1] column.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Hadamard product with the same broadcasting rules as add().
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var square(const Var& a);
Var log(const Var& a);

// --- shape ------------------------------------------------------------------
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& a, int axis, int begin, int end);
Var gather_rows(const Var& table, std::span<const int> ids);

// --- reductions -------------------------------------------------------------
Var sum(const Var& a);
Var sum(const Var& a, int axis);
Var mean(const Var& a);
/// Row-wise max over entries where mask != 0. Rows without any entry yield 0.
Var row_max_masked(const Var& a, std::span<const std::uint8_t> mask);
Var row_min_masked(const Var& a, std::span<const std::uint8_t> mask);

// --- nn ---------------------------------------------------------------------
Var softmax(const Var& a, int axis);
/// Inverted dropout. Identity when !train or rate == 0.
Var dropout(const Var& a, double rate, std::mt19937_64& rng, bool train);
/// Divides each row by max(||row||, eps).
Var l2_normalize_rows(const Var& a, double eps = 1e-12);
/// Row-wise cosine similarity of two [m,n] arrays -> [m,1].
Var cosine_similarity(const Var& a, const Var& b, double eps = 1e-12);
/// sum_i w_i * -log(probs[i, labels[i]]) / divisor. Empty weights mean 1.
Var cross_entropy_from_probs(const Var& probs, std::span<const int> labels, std::span<const double> weights = {},
                             double divisor = 0.0);

/// Accumulates d(root)/d(node) into every reachable node that requires grad.
/// Leaves accumulate across calls; intermediate nodes are reset each call.
void backward(const Var& root);

// --- parameters -------------------------------------------------------------

/// Named trainable leaves in insertion order.
class ParameterSet {
 public:
  Var add(const std::string& name, int rows, int cols, std::vector<double> values);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t size() const { return order_.size(); }
  const std::vector<std::pair<std::string, Var>>& items() const { return order_; }

  void zero_grad();
  /// Deep copy of every parameter's values.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);
  std::size_t total_size() const;

 private:
  std::vector<std::pair<std::string, Var>> order_;
  std::map<std::string, std::size_t> index_;
};

/// JSON file: {"format":"nero-parameters","version":1,"parameters":[{name,shape,values}]}.
void save_parameters(const std::filesystem::path& path, const ParameterSet& params);
/// Overwrites values of existing parameters; names and shapes must agree.
void load_parameters(const std::filesystem::path& path, ParameterSet& params);

/// AdaGrad with per-epoch multiplicative learning-rate decay.
class AdaGrad {
 public:
  AdaGrad(double lr0, double decay, double eps = 1e-8) : lr0_(lr0), decay_(decay), eps_(eps) {}

  double learning_rate() const;
  void set_epoch(int epoch) { epoch_ = epoch; }
  int epoch() const { return epoch_; }
  /// acc += g^2; p -= lr * g / (sqrt(acc) + eps) for every parameter with a gradient.
  void step(ParameterSet& params);
  const std::vector<double>& accumulator(const std::string& name) const { return acc_.at(name); }

 private:
  double lr0_;
  double decay_;
  double eps_;
  int epoch_ = 0;
  std::map<std::string, std::vector<double>> acc_;
};

/// Uniform draw in [-bound, bound] from 53 random bits.
double uniform(std::mt19937_64& rng, double bound);

}  // namespace nero::ad
