#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "gradcases.hpp"
#include "nero/autodiff.hpp"
#include "oracles.hpp"

using namespace nero;
using namespace nero::ad;

TEST_CASE("every op passes a central-difference check") {
  for (auto& c : testing::op_grad_cases(11)) {
    const auto r = testing::check_gradients(c.f, c.inputs, 1e-5);
    CAPTURE(c.name);
    CAPTURE(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("model losses pass a central-difference check") {
  auto setup = testing::make_tiny_setup(3);
  for (auto& c : testing::model_grad_cases(setup, 2, 4)) {
    const auto r = testing::check_gradients(c.f, c.inputs, 1e-5);
    CAPTURE(c.name);
    CAPTURE(r.worst);
    CHECK(r.max_rel_error < 1e-4);
    CHECK(c.reference_gap < 1e-12);
  }
}

TEST_CASE("forward values") {
  const auto a = constant(2, 2, {1, 2, 3, 4});
  const auto b = constant(2, 2, {5, 6, 7, 8});
  CHECK(matmul(a, b)->value == std::vector<double>{19, 22, 43, 50});
  CHECK(matmul_nt(a, b)->value == std::vector<double>{17, 23, 39, 53});
  CHECK(transpose(a)->value == std::vector<double>{1, 3, 2, 4});
  CHECK(add(a, constant(1, 2, {10, 20}))->value == std::vector<double>{11, 22, 13, 24});
  CHECK(mul(a, constant(2, 1, {2, 3}))->value == std::vector<double>{2, 4, 9, 12});
  CHECK(sum(a, 0)->value == std::vector<double>{4, 6});
  CHECK(sum(a, 1)->value == std::vector<double>{3, 7});
  CHECK(mean(a)->item() == 2.5);

  const auto s = softmax(constant(2, 3, {1, 2, 3, 1000, 1000, 1000}), 1);
  CHECK(s->at(0, 0) + s->at(0, 1) + s->at(0, 2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s->at(1, 0) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  const std::vector<std::uint8_t> mask{1, 0, 0, 0};
  const auto m = row_max_masked(a, mask);
  CHECK(m->value == std::vector<double>{1, 0});
  CHECK(row_min_masked(a, std::vector<std::uint8_t>{1, 1, 0, 1})->value == std::vector<double>{1, 4});

  const auto cs = cosine_similarity(constant(2, 2, {1, 0, 1, 1}), constant(2, 2, {2, 0, -1, -1}));
  CHECK(cs->value[0] == doctest::Approx(1.0));
  CHECK(cs->value[1] == doctest::Approx(-1.0));

  const auto probs = constant(2, 2, {0.25, 0.75, 0.5, 0.5});
  const std::vector<int> labels{1, 0};
  CHECK(cross_entropy_from_probs(probs, labels)->item() ==
        doctest::Approx((-std::log(0.75) - std::log(0.5)) / 2).epsilon(1e-12));
  const std::vector<double> w{2.0, 0.0};
  CHECK(cross_entropy_from_probs(probs, labels, w, 4.0)->item() == doctest::Approx(-2.0 * std::log(0.75) / 4.0));
}

TEST_CASE("shape contracts") {
  const auto a = constant(2, 3);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(add(a, constant(3, 2)), ShapeError);
  CHECK_THROWS_AS(add(a, constant(1, 2)), ShapeError);
  CHECK_THROWS_AS(reshape(a, 4, 2), ShapeError);
  CHECK_THROWS_AS(concat({a, constant(2, 2)}, 0), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 5), ShapeError);
  const std::vector<int> bad{3};
  CHECK_THROWS_AS(gather_rows(a, bad), ShapeError);
  CHECK_THROWS_AS(row_max_masked(a, std::vector<std::uint8_t>{1}), ShapeError);
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(1);
  const auto a = constant(1, 1000, 1.0);
  CHECK(dropout(a, 0.5, rng, false)->value == a->value);
  CHECK(dropout(a, 0.0, rng, true)->value == a->value);
  const auto d = dropout(a, 0.5, rng, true);
  double total = 0.0;
  for (double v : d->value) {
    CHECK((v == 0.0 || v == 2.0));
    total += v;
  }
  CHECK(total / 1000 == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("no-grad guard and gradient accumulation") {
  const auto x = leaf(1, 2, {1.0, 2.0}, true);
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(square(x)->requires_grad);
  }
  CHECK(grad_enabled());
  backward(sum(square(x)));
  CHECK(x->grad == std::vector<double>{2.0, 4.0});
  backward(sum(square(x)));
  CHECK(x->grad == std::vector<double>{4.0, 8.0});

  const auto c = constant(1, 2, {1.0, 1.0});
  backward(sum(mul(c, x)));
  CHECK(c->grad.empty());
}

TEST_CASE("AdaGrad step and decay") {
  ParameterSet ps;
  const auto p = ps.add("w", 1, 2, {1.0, -1.0});
  AdaGrad opt(0.5, 0.95);
  CHECK(opt.learning_rate() == 0.5);
  p->g() = {2.0, 0.0};
  opt.step(ps);
  CHECK(p->value[0] == doctest::Approx(1.0 - 0.5 * 2.0 / (2.0 + 1e-8)).epsilon(1e-15));
  CHECK(p->value[1] == -1.0);
  CHECK(opt.accumulator("w")[0] == 4.0);

  opt.set_epoch(2);
  CHECK(opt.learning_rate() == doctest::Approx(0.5 * 0.95 * 0.95).epsilon(1e-15));
  const double before = p->value[0];
  p->g() = {1.0, 0.0};
  opt.step(ps);
  CHECK(p->value[0] == doctest::Approx(before - 0.5 * 0.95 * 0.95 * 1.0 / (std::sqrt(5.0) + 1e-8)).epsilon(1e-15));
}

TEST_CASE("parameter persistence") {
  ParameterSet ps;
  ps.add("a", 2, 2, {1, 2, 3, 4});
  ps.add("b", 1, 3, {0.1, 0.2, 0.3});
  CHECK(ps.total_size() == 7);
  CHECK_THROWS(ps.add("a", 1, 1, {0}));

  const auto snap = ps.snapshot();
  ps.get("a")->value[0] = 100;
  ps.restore(snap);
  CHECK(ps.get("a")->value[0] == 1);

  const auto path = std::filesystem::temp_directory_path() / "nero_test_params.json";
  save_parameters(path, ps);
  ParameterSet other;
  other.add("a", 2, 2, {0, 0, 0, 0});
  other.add("b", 1, 3, {0, 0, 0});
  load_parameters(path, other);
  CHECK(other.get("b")->value == ps.get("b")->value);

  ParameterSet wrong;
  wrong.add("a", 4, 1, {0, 0, 0, 0});
  wrong.add("b", 1, 3, {0, 0, 0});
  CHECK_THROWS(load_parameters(path, wrong));
  std::filesystem::remove(path);
}
