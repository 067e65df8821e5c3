#include <cmath>
#include <functional>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "mifomo/error.hpp"
#include "mifomo/tensor.hpp"

using namespace mifomo;
using testing::random_tensor;

namespace {

/// Tape gradient of sum(w ⊙ f(x)) against central differences.
double op_grad_error(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor probe = f(x0);
  const Tensor w = random_tensor(probe.shape(), rng);
  Tape tape;
  const Tensor x = tape.watch(x0.with_requires_grad(true));
  const Tensor loss = sum(mul(f(x), w));
  const Gradients g = tape.backward(loss);
  const Tensor fd = finite_diff_grad([&](const Tensor& xx) { return sum(mul(f(xx), w)).item(); }, x0, 1e-5);
  return relative_error(g.of(x).data(), fd.data());
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul identity and dot product") {
    const Tensor r = matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{3, 4}, {5, 6}}));
    CHECK(r.bit_equal(Tensor::matrix({{3, 4}, {5, 6}})));
    CHECK(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})).item() == 11.0);
  }

  TEST_CASE("matmul matches a naive triple loop") {
    Rng rng(1);
    const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
        CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-14));
      }
    }
  }

  TEST_CASE("matmul associativity on 4x4 chains") {
    Rng rng(2);
    for (int t = 0; t < 10; ++t) {
      const Tensor a = random_tensor({4, 4}, rng), b = random_tensor({4, 4}, rng), c = random_tensor({4, 4}, rng);
      CHECK(testing::max_abs_diff(matmul(matmul(a, b), c).data(), matmul(a, matmul(b, c)).data()) < 1e-9);
    }
  }

  TEST_CASE("matmul shape mismatch names both shapes") {
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  }

  TEST_CASE("softmax rows") {
    const Tensor a = softmax_rows(Tensor::matrix({{0, 0}}));
    CHECK(a[0] == 0.5);
    CHECK(a[1] == 0.5);
    const Tensor b = softmax_rows(Tensor::matrix({{1000, 1000, 1000}}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(b[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const Tensor c = softmax_rows(Tensor::matrix({{1, 2, 3}}));
    long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
    for (int i = 0; i < 3; ++i) {
      const long double ref = std::exp(static_cast<long double>(i + 1)) / z;
      CHECK(std::abs(c[static_cast<std::size_t>(i)] - static_cast<double>(ref)) < 1e-15);
    }
  }

  TEST_CASE("softmax rows sum to one for large inputs") {
    Rng rng(3);
    const Tensor a = random_tensor({20, 7}, rng, -1e6, 1e6);
    const Tensor p = softmax_rows(a);
    for (std::size_t r = 0; r < 20; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) s += p.at(r, c);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }

  TEST_CASE("layer norm") {
    const Tensor g = Tensor::vector({1, 1}), b = Tensor::vector({0, 0});
    const Tensor c = layer_norm(Tensor::matrix({{5, 5}}), g, b, 1e-6);
    CHECK(c[0] == 0.0);
    CHECK(c[1] == 0.0);
    const Tensor t = layer_norm(Tensor::matrix({{1, 3}}), g, b, 1e-15);
    CHECK(t[0] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(t[1] == doctest::Approx(1.0).epsilon(1e-12));

    Rng rng(4);
    const std::size_t d = 9;
    const Tensor x = random_tensor({1, d}, rng, -3, 3);
    const Tensor y = layer_norm(x, Tensor::full({d}, 1.0), Tensor::zeros({d}), 1e-12);
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m += y[i];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) v += (y[i] - m) * (y[i] - m);
    v /= static_cast<double>(d);
    CHECK(std::abs(m) < 1e-12);
    CHECK(std::abs(v - 1.0) < 1e-9);
  }

  TEST_CASE("cross entropy values") {
    CHECK(cross_entropy(Tensor::matrix({{1, 0}}), Tensor::matrix({{1, 0}})).item() == doctest::Approx(0.0));
    const Tensor uniform = Tensor::full({2, 4}, 0.25);
    CHECK(cross_entropy(uniform, Tensor::matrix({{0.1, 0.2, 0.3, 0.4}, {0, 0, 1, 0}})).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-14));

    Rng rng(5);
    const Tensor logits = random_tensor({1, 3}, rng, -2, 2);
    const Tensor yi = Tensor::matrix({{1, 0, 0}}), yj = Tensor::matrix({{0, 0, 1}});
    const Tensor ymix = Tensor::matrix({{0.3, 0, 0.7}});
    const double lhs = cross_entropy_logits(logits, ymix).item();
    const double rhs = 0.3 * cross_entropy_logits(logits, yi).item() + 0.7 * cross_entropy_logits(logits, yj).item();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-14));
  }

  TEST_CASE("cross entropy rejects non-distribution targets") {
    CHECK_THROWS_AS(cross_entropy_logits(Tensor::zeros({1, 2}), Tensor::matrix({{0.5, 0.6}})), ValidationError);
  }

  TEST_CASE("backward basics") {
    Tape tape;
    const Tensor x = tape.watch(Tensor({2, 3}, std::vector<double>(6, 0.7), true));
    const Gradients g = tape.backward(sum(x));
    const Tensor gx = g.of(x);
    for (double v : gx.data()) CHECK(v == 1.0);

    Tape t2;
    const Tensor s = t2.watch(Tensor::scalar(3.0).with_requires_grad(true));
    CHECK(t2.backward(mul(s, s)).of(s).item() == doctest::Approx(6.0));
  }

  TEST_CASE("finite differences") {
    Rng rng(6);
    const Tensor x = random_tensor({3, 2}, rng);
    const Tensor g = finite_diff_grad([](const Tensor& t) { return sum(t).item(); }, x, 1e-5);
    for (double v : g.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    const double d = finite_diff_grad([](const Tensor& t) { return t.item() * t.item(); }, Tensor::scalar(2.0), 1e-5).item();
    CHECK(std::abs(d - 4.0) < 1e-8);
  }

  TEST_CASE("constants are never differentiation targets") {
    Tape tape;
    const Tensor c = Tensor::matrix({{1, 2}});
    const Tensor x = tape.watch(Tensor::matrix({{3, 4}}).with_requires_grad(true));
    const Gradients g = tape.backward(sum(mul(x, c)));
    CHECK(g.size() == 1);
    CHECK_FALSE(c.on_tape());
  }

  TEST_CASE("every differentiable op matches finite differences") {
    Rng rng(7);
    const Tensor a34 = random_tensor({3, 4}, rng), b42 = random_tensor({4, 2}, rng), c34 = random_tensor({3, 4}, rng);
    const Tensor bias = random_tensor({4}, rng), gain = random_tensor({4}, rng, 0.5, 1.5);
    const Tensor b3 = random_tensor({2, 3, 4}, rng), b4 = random_tensor({2, 4, 3}, rng), b5 = random_tensor({2, 3, 4}, rng);
    const Tensor tile = random_tensor({3, 4}, rng);
    const Tensor soft = softmax_rows(random_tensor({3, 4}, rng));
    const std::size_t rows[] = {2, 0, 2};

    struct Case {
      const char* name;
      std::function<Tensor(const Tensor&)> f;
      Tensor x;
    };
    const std::vector<Case> cases = {
        {"matmul.left", [&](const Tensor& x) { return matmul(x, b42); }, a34},
        {"matmul.right", [&](const Tensor& x) { return matmul(a34, x); }, b42},
        {"transpose", [](const Tensor& x) { return transpose(x); }, a34},
        {"bmm", [&](const Tensor& x) { return bmm(x, b4); }, b3},
        {"bmm_nt", [&](const Tensor& x) { return bmm_nt(x, b5); }, b3},
        {"add", [&](const Tensor& x) { return add(x, c34); }, a34},
        {"sub", [&](const Tensor& x) { return sub(c34, x); }, a34},
        {"mul", [&](const Tensor& x) { return mul(x, x); }, a34},
        {"scale", [](const Tensor& x) { return scale(x, -2.5); }, a34},
        {"add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, a34},
        {"square", [](const Tensor& x) { return square(x); }, a34},
        {"add_bias", [&](const Tensor& x) { return add_bias(a34, x); }, bias},
        {"add_tiled", [&](const Tensor& x) { return add_tiled(concat_rows(std::vector<Tensor>{a34, c34}), x); }, tile},
        {"repeat_rows", [](const Tensor& x) { return repeat_rows(x, 2); }, a34},
        {"mean_groups", [](const Tensor& x) { return mean_groups(concat_rows(std::vector<Tensor>{x, x}), 3); }, a34},
        {"mean_last_axis", [](const Tensor& x) { return mean_last_axis(x); }, a34},
        {"gather_rows", [&](const Tensor& x) { return gather_rows(x, rows); }, a34},
        {"concat_cols", [&](const Tensor& x) { return concat_cols(std::vector<Tensor>{x, c34}); }, a34},
        {"reshape", [](const Tensor& x) { return reshape(x, {4, 3}); }, a34},
        {"softmax_rows", [](const Tensor& x) { return softmax_rows(x); }, a34},
        {"log_softmax_rows", [](const Tensor& x) { return log_softmax_rows(x); }, a34},
        {"layer_norm.x", [&](const Tensor& x) { return layer_norm(x, gain, bias, 1e-6); }, a34},
        {"layer_norm.gain", [&](const Tensor& x) { return layer_norm(a34, x, bias, 1e-6); }, gain},
        {"gelu", [](const Tensor& x) { return gelu(x); }, a34},
        {"mean", [](const Tensor& x) { return mean(x); }, a34},
        {"pairwise_sqdist", [&](const Tensor& x) { return pairwise_sqdist(x, c34); }, a34},
        {"cross_entropy", [&](const Tensor& x) { return cross_entropy(softmax_rows(x), soft); }, a34},
        {"cross_entropy_logits", [&](const Tensor& x) { return cross_entropy_logits(x, soft); }, a34},
    };
    std::uint64_t seed = 100;
    for (const auto& c : cases) {
      CAPTURE(c.name);
      CHECK(op_grad_error(c.f, c.x, seed++) <= 1e-4);
    }
  }

  TEST_CASE("softmax cross entropy composite agrees with finite differences") {
    Rng rng(8);
    const Tensor x0 = random_tensor({4, 5}, rng);
    const Tensor y = softmax_rows(random_tensor({4, 5}, rng));
    Tape tape;
    const Tensor x = tape.watch(x0.with_requires_grad(true));
    const Tensor g = tape.backward(cross_entropy(softmax_rows(x), y)).of(x);
    const Tensor fd =
        finite_diff_grad([&](const Tensor& t) { return cross_entropy(softmax_rows(t), y).item(); }, x0, 1e-5);
    CHECK(relative_error(g.data(), fd.data()) <= 1e-4);
  }

  TEST_CASE("tape replay is bit-identical") {
    Rng rng(9);
    const Tensor x0 = random_tensor({5, 4}, rng);
    Tape tape;
    const Tensor x = tape.watch(x0.with_requires_grad(true));
    const Tensor loss = sum(gelu(matmul(x, transpose(x))));
    const Tensor g1 = tape.backward(loss).of(x);
    const Tensor g2 = tape.backward(loss).of(x);
    CHECK(g1.bit_equal(g2));
  }

  TEST_CASE("tape records in topological order") {
    Tape tape;
    const Tensor x = tape.watch(Tensor::matrix({{1, 2}}).with_requires_grad(true));
    const Tensor y = square(x);
    const Tensor z = sum(y);
    CHECK(*x.tape_id() < *y.tape_id());
    CHECK(*y.tape_id() < *z.tape_id());
    CHECK(tape.node_count() == 3);
  }
}
