#include "nero/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_set>

#include "json.hpp"

namespace nero::ad {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

Map view(std::vector<double>& v, int r, int c) { return Map(v.data(), r, c); }

std::string shape_str(const Var& a) { return "[" + std::to_string(a->rows) + "," + std::to_string(a->cols) + "]"; }

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

Var make(int rows, int cols, const char* op, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  n->op = op;
  n->is_leaf = false;
  const bool need =
      g_grad_enabled && std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
  n->requires_grad = need;
  if (need) n->parents = std::move(parents);
  return n;
}


enum class Bcast { Same, Row, Col };

Bcast broadcast_kind(const char* op, const Var& a, const Var& b) {
  if (a->rows == b->rows && a->cols == b->cols) return Bcast::Same;
  if (b->rows == 1 && b->cols == a->cols) return Bcast::Row;
  if (b->cols == 1 && b->rows == a->rows) return Bcast::Col;
  shape_fail(op, "cannot combine " + shape_str(a) + " with " + shape_str(b));
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, const char* op, Fwd fwd, Deriv deriv) {
  Var out = make(a->rows, a->cols, op, {a});
  for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = fwd(a->value[i]);
  if (out->requires_grad) {
    // deriv(x, y) with x the input and y the output.
    out->backward_fn = [deriv](Node& self) {
      Node& p = *self.parents[0];
      auto& pg = p.g();
      for (std::size_t i = 0; i < self.size(); ++i) pg[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
    };
  }
  return out;
}

}  // namespace

std::vector<double>& Node::g() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

double Node::item() const {
  if (value.size() != 1) throw ShapeError("item: array is not a scalar");
  return value[0];
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Var leaf(int rows, int cols, std::vector<double> values, bool requires_grad) {
  if (rows < 0 || cols < 0 || values.size() != static_cast<std::size_t>(rows) * cols)
    throw ShapeError("leaf: value count does not match shape");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return n;
}

Var constant(int rows, int cols, std::vector<double> values) { return leaf(rows, cols, std::move(values), false); }
Var constant(int rows, int cols, double fill) {
  return leaf(rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, fill), false);
}
Var scalar(double v) { return constant(1, 1, std::vector<double>{v}); }

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a->cols != b->rows) shape_fail("matmul", shape_str(a) + " x " + shape_str(b));
  const int m = a->rows, k = a->cols, n = b->cols;
  Var out = make(m, n, "matmul", {a, b});
  view(out->value, m, n).noalias() = view(a->value, m, k) * view(b->value, k, n);
  if (out->requires_grad) {
    out->backward_fn = [m, k, n](Node& self) {
      Node& A = *self.parents[0];
      Node& B = *self.parents[1];
      auto G = view(self.grad, m, n);
      if (A.requires_grad) view(A.g(), m, k).noalias() += G * view(B.value, k, n).transpose();
      if (B.requires_grad) view(B.g(), k, n).noalias() += view(A.value, m, k).transpose() * G;
    };
  }
  return out;
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a->cols != b->cols) shape_fail("matmul_nt", shape_str(a) + " x " + shape_str(b) + "^T");
  const int m = a->rows, k = a->cols, n = b->rows;
  Var out = make(m, n, "matmul_nt", {a, b});
  view(out->value, m, n).noalias() = view(a->value, m, k) * view(b->value, n, k).transpose();
  if (out->requires_grad) {
    out->backward_fn = [m, k, n](Node& self) {
      Node& A = *self.parents[0];
      Node& B = *self.parents[1];
      auto G = view(self.grad, m, n);
      if (A.requires_grad) view(A.g(), m, k).noalias() += G * view(B.value, n, k);
      if (B.requires_grad) view(B.g(), n, k).noalias() += G.transpose() * view(A.value, m, k);
    };
  }
  return out;
}

Var transpose(const Var& a) {
  const int m = a->rows, n = a->cols;
  Var out = make(n, m, "transpose", {a});
  view(out->value, n, m) = view(a->value, m, n).transpose();
  if (out->requires_grad) {
    out->backward_fn = [m, n](Node& self) {
      Node& A = *self.parents[0];
      view(A.g(), m, n) += view(self.grad, n, m).transpose();
    };
  }
  return out;
}

Var reshape(const Var& a, int rows, int cols) {
  if (static_cast<std::size_t>(rows) * cols != a->size())
    shape_fail("reshape", shape_str(a) + " -> [" + std::to_string(rows) + "," + std::to_string(cols) + "]");
  Var out = make(rows, cols, "reshape", {a});
  out->value = a->value;
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      auto& pg = self.parents[0]->g();
      for (std::size_t i = 0; i < self.size(); ++i) pg[i] += self.grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  const Bcast kind = broadcast_kind("add", a, b);
  const int m = a->rows, n = a->cols;
  Var out = make(m, n, "add", {a, b});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const double bv = kind == Bcast::Same ? b->at(i, j) : kind == Bcast::Row ? b->at(0, j) : b->at(i, 0);
      out->at(i, j) = a->at(i, j) + bv;
    }
  if (out->requires_grad) {
    out->backward_fn = [kind, m, n](Node& self) {
      Node& A = *self.parents[0];
      Node& B = *self.parents[1];
      if (A.requires_grad) {
        auto& ag = A.g();
        for (std::size_t i = 0; i < self.size(); ++i) ag[i] += self.grad[i];
      }
      if (B.requires_grad) {
        auto& bg = B.g();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const double gij = self.grad[static_cast<std::size_t>(i) * n + j];
            if (kind == Bcast::Same)
              bg[static_cast<std::size_t>(i) * n + j] += gij;
            else if (kind == Bcast::Row)
              bg[static_cast<std::size_t>(j)] += gij;
            else
              bg[static_cast<std::size_t>(i)] += gij;
          }
      }
    };
  }
  return out;
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
  const Bcast kind = broadcast_kind("mul", a, b);
  const int m = a->rows, n = a->cols;
  Var out = make(m, n, "mul", {a, b});
  auto bval = [kind](const Node& B, int i, int j) {
    return kind == Bcast::Same ? B.at(i, j) : kind == Bcast::Row ? B.at(0, j) : B.at(i, 0);
  };
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->at(i, j) = a->at(i, j) * bval(*b, i, j);
  if (out->requires_grad) {
    out->backward_fn = [kind, m, n, bval](Node& self) {
      Node& A = *self.parents[0];
      Node& B = *self.parents[1];
      if (A.requires_grad) {
        auto& ag = A.g();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * n + j;
            ag[k] += self.grad[k] * bval(B, i, j);
          }
      }
      if (B.requires_grad) {
        auto& bg = B.g();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * n + j;
            const double d = self.grad[k] * A.value[k];
            if (kind == Bcast::Same)
              bg[k] += d;
            else if (kind == Bcast::Row)
              bg[static_cast<std::size_t>(j)] += d;
            else
              bg[static_cast<std::size_t>(i)] += d;
          }
      }
    };
  }
  return out;
}

Var scale(const Var& a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var tanh(const Var& a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, "sigmoid",
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var relu(const Var& a) {
  return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var square(const Var& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var log(const Var& a) {
  for (double v : a->value)
    if (!(v > 0.0)) throw std::domain_error("log: non-positive input");
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  if (axis != 0 && axis != 1) shape_fail("concat", "axis must be 0 or 1");
  int rows = 0, cols = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (p->cols != parts[0]->cols) shape_fail("concat", "column mismatch " + shape_str(p));
      rows += p->rows;
      cols = p->cols;
    } else {
      if (p->rows != parts[0]->rows) shape_fail("concat", "row mismatch " + shape_str(p));
      cols += p->cols;
      rows = p->rows;
    }
  }
  Var out = make(rows, cols, "concat", parts);
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p->rows; ++i)
      for (int j = 0; j < p->cols; ++j) {
        if (axis == 0)
          out->at(off + i, j) = p->at(i, j);
        else
          out->at(i, off + j) = p->at(i, j);
      }
    off += axis == 0 ? p->rows : p->cols;
  }
  if (out->requires_grad) {
    out->backward_fn = [axis](Node& self) {
      int off = 0;
      for (auto& pp : self.parents) {
        Node& p = *pp;
        if (p.requires_grad) {
          auto& pg = p.g();
          for (int i = 0; i < p.rows; ++i)
            for (int j = 0; j < p.cols; ++j) {
              const int r = axis == 0 ? off + i : i;
              const int c = axis == 0 ? j : off + j;
              pg[static_cast<std::size_t>(i) * p.cols + j] += self.grad[static_cast<std::size_t>(r) * self.cols + c];
            }
        }
        off += axis == 0 ? p.rows : p.cols;
      }
    };
  }
  return out;
}

Var slice(const Var& a, int axis, int begin, int end) {
  const int extent = axis == 0 ? a->rows : a->cols;
  if ((axis != 0 && axis != 1) || begin < 0 || end > extent || begin >= end)
    shape_fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                            std::to_string(axis) + " of " + shape_str(a));
  const int rows = axis == 0 ? end - begin : a->rows;
  const int cols = axis == 1 ? end - begin : a->cols;
  Var out = make(rows, cols, "slice", {a});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out->at(i, j) = axis == 0 ? a->at(begin + i, j) : a->at(i, begin + j);
  if (out->requires_grad) {
    out->backward_fn = [axis, begin](Node& self) {
      Node& A = *self.parents[0];
      auto& ag = A.g();
      for (int i = 0; i < self.rows; ++i)
        for (int j = 0; j < self.cols; ++j) {
          const int r = axis == 0 ? begin + i : i;
          const int c = axis == 0 ? j : begin + j;
          ag[static_cast<std::size_t>(r) * A.cols + c] += self.grad[static_cast<std::size_t>(i) * self.cols + j];
        }
    };
  }
  return out;
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  const int n = table->cols;
  for (int id : ids)
    if (id < 0 || id >= table->rows) shape_fail("gather_rows", "index " + std::to_string(id) + " out of range");
  Var out = make(static_cast<int>(ids.size()), n, "gather_rows", {table});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table->value.begin() + static_cast<std::ptrdiff_t>(ids[i]) * n, n,
                out->value.begin() + static_cast<std::ptrdiff_t>(i) * n);
  if (out->requires_grad) {
    std::vector<int> idv(ids.begin(), ids.end());
    out->backward_fn = [idv = std::move(idv), n](Node& self) {
      auto& tg = self.parents[0]->g();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (int j = 0; j < n; ++j)
          tg[static_cast<std::size_t>(idv[i]) * n + j] += self.grad[i * static_cast<std::size_t>(n) + j];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------

Var sum(const Var& a) {
  Var out = make(1, 1, "sum", {a});
  double s = 0.0;
  for (double v : a->value) s += v;
  out->value[0] = s;
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      auto& pg = self.parents[0]->g();
      for (auto& v : pg) v += self.grad[0];
    };
  }
  return out;
}

Var sum(const Var& a, int axis) {
  if (axis != 0 && axis != 1) shape_fail("sum", "axis must be 0 or 1");
  const int m = a->rows, n = a->cols;
  Var out = axis == 0 ? make(1, n, "sum_axis", {a}) : make(m, 1, "sum_axis", {a});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->value[static_cast<std::size_t>(axis == 0 ? j : i)] += a->at(i, j);
  if (out->requires_grad) {
    out->backward_fn = [axis, m, n](Node& self) {
      auto& pg = self.parents[0]->g();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          pg[static_cast<std::size_t>(i) * n + j] += self.grad[static_cast<std::size_t>(axis == 0 ? j : i)];
    };
  }
  return out;
}

Var mean(const Var& a) {
  if (a->size() == 0) shape_fail("mean", "empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a->size()));
}

namespace {

Var row_extreme_masked(const Var& a, std::span<const std::uint8_t> mask, bool want_max, const char* op) {
  if (mask.size() != a->size()) shape_fail(op, "mask size does not match " + shape_str(a));
  const int m = a->rows, n = a->cols;
  Var out = make(m, 1, op, {a});
  std::vector<int> arg(static_cast<std::size_t>(m), -1);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * n + j;
      if (!mask[k]) continue;
      const int cur = arg[static_cast<std::size_t>(i)];
      if (cur < 0 || (want_max ? a->value[k] > a->at(i, cur) : a->value[k] < a->at(i, cur)))
        arg[static_cast<std::size_t>(i)] = j;
    }
    const int best = arg[static_cast<std::size_t>(i)];
    out->value[static_cast<std::size_t>(i)] = best < 0 ? 0.0 : a->at(i, best);
  }
  if (out->requires_grad) {
    out->backward_fn = [arg = std::move(arg), n](Node& self) {
      auto& pg = self.parents[0]->g();
      for (std::size_t i = 0; i < arg.size(); ++i)
        if (arg[i] >= 0) pg[i * static_cast<std::size_t>(n) + static_cast<std::size_t>(arg[i])] += self.grad[i];
    };
  }
  return out;
}

}  // namespace

Var row_max_masked(const Var& a, std::span<const std::uint8_t> mask) {
  return row_extreme_masked(a, mask, true, "row_max_masked");
}
Var row_min_masked(const Var& a, std::span<const std::uint8_t> mask) {
  return row_extreme_masked(a, mask, false, "row_min_masked");
}

// ---------------------------------------------------------------------------

Var softmax(const Var& a, int axis) {
  if (axis != 0 && axis != 1) shape_fail("softmax", "axis must be 0 or 1");
  const int m = a->rows, n = a->cols;
  if (m == 0 || n == 0) shape_fail("softmax", "empty input");
  Var out = make(m, n, "softmax", {a});
  const int outer = axis == 1 ? m : n;
  const int inner = axis == 1 ? n : m;
  auto idx = [axis, n](int o, int t) {
    return axis == 1 ? static_cast<std::size_t>(o) * n + t : static_cast<std::size_t>(t) * n + o;
  };
  for (int o = 0; o < outer; ++o) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < inner; ++t) mx = std::max(mx, a->value[idx(o, t)]);
    double z = 0.0;
    for (int t = 0; t < inner; ++t) z += (out->value[idx(o, t)] = std::exp(a->value[idx(o, t)] - mx));
    for (int t = 0; t < inner; ++t) out->value[idx(o, t)] /= z;
  }
  if (out->requires_grad) {
    out->backward_fn = [outer, inner, idx](Node& self) {
      auto& pg = self.parents[0]->g();
      for (int o = 0; o < outer; ++o) {
        double dot = 0.0;
        for (int t = 0; t < inner; ++t) dot += self.grad[idx(o, t)] * self.value[idx(o, t)];
        for (int t = 0; t < inner; ++t) pg[idx(o, t)] += self.value[idx(o, t)] * (self.grad[idx(o, t)] - dot);
      }
    };
  }
  return out;
}

double uniform(std::mt19937_64& rng, double bound) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return (2.0 * u - 1.0) * bound;
}

Var dropout(const Var& a, double rate, std::mt19937_64& rng, bool train) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) return a;
  std::vector<double> keep(a->size());
  const double inv = 1.0 / (1.0 - rate);
  for (auto& k : keep) k = static_cast<double>(rng() >> 11) * 0x1.0p-53 < rate ? 0.0 : inv;
  return mul(a, constant(a->rows, a->cols, std::move(keep)));
}

Var l2_normalize_rows(const Var& a, double eps) {
  const int m = a->rows, n = a->cols;
  Var out = make(m, n, "l2_normalize_rows", {a});
  std::vector<double> norms(static_cast<std::size_t>(m));
  std::vector<std::uint8_t> clamped(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += a->at(i, j) * a->at(i, j);
    const double nr = std::sqrt(s);
    clamped[static_cast<std::size_t>(i)] = nr < eps;
    norms[static_cast<std::size_t>(i)] = std::max(nr, eps);
    for (int j = 0; j < n; ++j) out->at(i, j) = a->at(i, j) / norms[static_cast<std::size_t>(i)];
  }
  if (out->requires_grad) {
    out->backward_fn = [norms = std::move(norms), clamped = std::move(clamped), m, n](Node& self) {
      auto& pg = self.parents[0]->g();
      for (int i = 0; i < m; ++i) {
        const double nr = norms[static_cast<std::size_t>(i)];
        const std::size_t base = static_cast<std::size_t>(i) * n;
        if (clamped[static_cast<std::size_t>(i)]) {
          for (int j = 0; j < n; ++j) pg[base + j] += self.grad[base + j] / nr;
          continue;
        }
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += self.grad[base + j] * self.value[base + j];
        for (int j = 0; j < n; ++j) pg[base + j] += (self.grad[base + j] - dot * self.value[base + j]) / nr;
      }
    };
  }
  return out;
}

Var cosine_similarity(const Var& a, const Var& b, double eps) {
  if (a->rows != b->rows || a->cols != b->cols)
    shape_fail("cosine_similarity", shape_str(a) + " vs " + shape_str(b));
  return sum(mul(l2_normalize_rows(a, eps), l2_normalize_rows(b, eps)), 1);
}

Var cross_entropy_from_probs(const Var& probs, std::span<const int> labels, std::span<const double> weights,
                             double divisor) {
  const int m = probs->rows, c = probs->cols;
  if (static_cast<int>(labels.size()) != m)
    shape_fail("cross_entropy_from_probs", "label count does not match " + shape_str(probs));
  if (!weights.empty() && static_cast<int>(weights.size()) != m)
    shape_fail("cross_entropy_from_probs", "weight count does not match " + shape_str(probs));
  for (int l : labels)
    if (l < 0 || l >= c) shape_fail("cross_entropy_from_probs", "label " + std::to_string(l) + " out of range");
  if (divisor <= 0.0) divisor = static_cast<double>(m);
  static constexpr double kFloor = 1e-300;
  Var out = make(1, 1, "cross_entropy_from_probs", {probs});
  std::vector<double> w(static_cast<std::size_t>(m), 1.0);
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  double total = 0.0;
  for (int i = 0; i < m; ++i)
    total += -w[static_cast<std::size_t>(i)] * std::log(std::max(probs->at(i, labels[static_cast<std::size_t>(i)]), kFloor));
  out->value[0] = total / divisor;
  if (out->requires_grad) {
    std::vector<int> lab(labels.begin(), labels.end());
    out->backward_fn = [lab = std::move(lab), w = std::move(w), divisor, c](Node& self) {
      Node& P = *self.parents[0];
      auto& pg = P.g();
      for (std::size_t i = 0; i < lab.size(); ++i) {
        const std::size_t k = i * static_cast<std::size_t>(c) + static_cast<std::size_t>(lab[i]);
        pg[k] += -self.grad[0] * w[i] / (std::max(P.value[k], kFloor) * divisor);
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------

void backward(const Var& root) {
  if (root->size() != 1) throw ShapeError("backward: root must be a scalar, got " + shape_str(root));
  if (!root->requires_grad) return;
  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order)
    if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
  root->g()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---------------------------------------------------------------------------

Var ParameterSet::add(const std::string& name, int rows, int cols, std::vector<double> values) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  Var v = leaf(rows, cols, std::move(values), true);
  index_[name] = order_.size();
  order_.emplace_back(name, v);
  return v;
}

const Var& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return order_[it->second].second;
}

void ParameterSet::zero_grad() {
  for (auto& [name, v] : order_) v->grad.assign(v->value.size(), 0.0);
}

std::vector<std::vector<double>> ParameterSet::snapshot() const {
  std::vector<std::vector<double>> out;
  out.reserve(order_.size());
  for (const auto& [name, v] : order_) out.push_back(v->value);
  return out;
}

void ParameterSet::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != order_.size()) throw std::invalid_argument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].size() != order_[i].second->value.size())
      throw std::invalid_argument("restore: size mismatch for " + order_[i].first);
    order_[i].second->value = values[i];
  }
}

std::size_t ParameterSet::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, v] : order_) n += v->size();
  return n;
}

void save_parameters(const std::filesystem::path& path, const ParameterSet& params) {
  nlohmann::json j;
  j["format"] = "nero-parameters";
  j["version"] = 1;
  auto& arr = j["parameters"] = nlohmann::json::array();
  for (const auto& [name, v] : params.items())
    arr.push_back({{"name", name}, {"shape", {v->rows, v->cols}}, {"values", v->value}});
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

void load_parameters(const std::filesystem::path& path, ParameterSet& params) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "nero-parameters" || j.value("version", 0) != 1)
    throw std::runtime_error(path.string() + ": not a version-1 parameter file");
  std::size_t seen = 0;
  for (const auto& p : j.at("parameters")) {
    const auto name = p.at("name").get<std::string>();
    const Var& v = params.get(name);
    const auto shape = p.at("shape").get<std::vector<int>>();
    if (shape.size() != 2 || shape[0] != v->rows || shape[1] != v->cols)
      throw ShapeError("parameter " + name + " has a different shape in " + path.string());
    v->value = p.at("values").get<std::vector<double>>();
    if (v->value.size() != v->size()) throw ShapeError("parameter " + name + ": value count mismatch");
    ++seen;
  }
  if (seen != params.size()) throw std::runtime_error(path.string() + ": missing parameters");
}

double AdaGrad::learning_rate() const { return lr0_ * std::pow(decay_, epoch_); }

void AdaGrad::step(ParameterSet& params) {
  const double lr = learning_rate();
  for (const auto& [name, v] : params.items()) {
    if (v->grad.size() != v->value.size()) continue;
    auto& acc = acc_[name];
    if (acc.size() != v->value.size()) acc.assign(v->value.size(), 0.0);
    for (std::size_t i = 0; i < v->value.size(); ++i) {
      const double g = v->grad[i];
      acc[i] += g * g;
      v->value[i] -= lr * g / (std::sqrt(acc[i]) + eps_);
    }
  }
}

}  // namespace nero::ad
