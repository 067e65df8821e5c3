#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "mifomo/error.hpp"
#include "mifomo/mixup.hpp"
#include "reference.hpp"

using namespace mifomo;
using testing::random_tensor;

TEST_SUITE("mixup") {
  TEST_CASE("mixing endpoints return the inputs") {
    Rng rng(41);
    const Tensor zi = random_tensor({3, 4}, rng), zj = random_tensor({3, 4}, rng);
    const Tensor yi = Tensor::matrix({{1, 0}, {0, 1}, {1, 0}}), yj = Tensor::matrix({{0, 1}, {0, 1}, {1, 0}});
    CHECK(mix_embeddings(zi, zj, yi, yj, 1.0).z.bit_equal(zi));
    CHECK(mix_embeddings(zi, zj, yi, yj, 0.0).z.bit_equal(zj));
    CHECK(mix_embeddings(zi, zj, yi, yj, 0.0).y.bit_equal(yj));
  }

  TEST_CASE("mixed values stay between the inputs") {
    Rng rng(42);
    const Tensor a = random_tensor({4, 5}, rng), b = random_tensor({4, 5}, rng);
    const Tensor y = Tensor::full({4, 2}, 0.5);
    for (double lam : {0.1, 0.37, 0.9}) {
      const Tensor m = mix_embeddings(a, b, y, y, lam).z;
      for (std::size_t i = 0; i < m.numel(); ++i) {
        CHECK(m[i] >= std::min(a[i], b[i]) - 1e-15);
        CHECK(m[i] <= std::max(a[i], b[i]) + 1e-15);
      }
    }
  }

  TEST_CASE("mixing is linear in the mean") {
    Rng rng(43);
    const Tensor a = random_tensor({6, 3}, rng), b = random_tensor({6, 3}, rng);
    const Tensor y = Tensor::full({6, 2}, 0.5);
    const double lam = 0.3;
    const double lhs = mean(mix_embeddings(a, b, y, y, lam).z).item();
    CHECK(lhs == doctest::Approx(lam * mean(a).item() + (1 - lam) * mean(b).item()).epsilon(1e-13));
  }

  TEST_CASE("mixed labels stay distributions and input shapes must agree") {
    const Tensor y1 = Tensor::matrix({{1, 0, 0}}), y2 = Tensor::matrix({{0.2, 0.3, 0.5}});
    const Tensor y = mix_inputs(Tensor::zeros({1, 2}), Tensor::zeros({1, 2}), y1, y2, 0.25).y;
    CHECK(y[0] + y[1] + y[2] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(mix_inputs(Tensor::zeros({1, 2}), Tensor::zeros({1, 3}), y1, y2, 0.5), DimensionError);
  }

  TEST_CASE("Beta(1,1) ratios are uniform") {
    Rng rng(44);
    std::vector<double> v(100000);
    for (auto& x : v) x = sample_lambda_beta(1.0, rng);
    std::sort(v.begin(), v.end());
    double d = 0.0;
    const double n = static_cast<double>(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      d = std::max({d, std::abs((i + 1) / n - v[i]), std::abs(v[i] - i / n)});
    }
    CHECK(d < 0.01);
  }

  TEST_CASE("Beta ratios have mean one half") {
    for (double alpha : {0.2, 2.0, 5.0}) {
      Rng rng(45);
      double s = 0.0;
      const int n = 50000;
      for (int i = 0; i < n; ++i) {
        const double x = sample_lambda_beta(alpha, rng);
        CHECK_FALSE(x < 0.0);
        CHECK_FALSE(x > 1.0);
        s += x;
      }
      const double sd = std::sqrt(1.0 / (4.0 * (2 * alpha + 1)) / n);
      CHECK(std::abs(s / n - 0.5) <= 4 * sd);
    }
  }

  TEST_CASE("W1 of two singletons") {
    Rng rng(46);
    CHECK(domain_distance(Tensor::matrix({{0}}), Tensor::matrix({{3}}), 8, rng) == doctest::Approx(3.0));
    CHECK(wasserstein_1d({0, 1, 2}, {1, 2, 3}) == doctest::Approx(1.0));
    CHECK(wasserstein_1d({0, 0}, {0, 2, 4, 6}) == doctest::Approx(3.0));
  }

  TEST_CASE("sliced W1 recovers exact W1 in one dimension") {
    Rng rng(47);
    for (int t = 0; t < 20; ++t) {
      const std::size_t n = 2 + rng.below(4);
      std::vector<std::vector<double>> a(n, std::vector<double>(1)), b = a;
      std::vector<double> fa, fb;
      for (auto& p : a) fa.push_back(p[0] = rng.normal());
      for (auto& p : b) fb.push_back(p[0] = rng.normal(1.0, 2.0));
      const double sw = domain_distance(Tensor({n, 1}, fa), Tensor({n, 1}, fb), 4, rng);
      CHECK(sw == doctest::Approx(testing::exact_assignment_w1(a, b)).epsilon(1e-12));
    }
  }

  TEST_CASE("sliced W1 recovers a translation on average") {
    Rng rng(48);
    const Tensor a = random_tensor({4, 2}, rng);
    std::vector<double> shifted = a.values();
    for (std::size_t i = 0; i < 4; ++i) shifted[2 * i] += 2.0;
    double s = 0.0;
    for (int t = 0; t < 50; ++t) s += domain_distance(a, Tensor({4, 2}, shifted), 64, rng);
    CHECK(std::abs(s / 50 - 2.0) / 2.0 < 0.02);
  }

  TEST_CASE("sliced W1 is a pseudometric") {
    Rng rng(49);
    const Tensor a = random_tensor({5, 3}, rng), b = random_tensor({7, 3}, rng), c = random_tensor({4, 3}, rng);
    const auto dirs = random_projections(3, 32, rng);
    CHECK(sliced_wasserstein(a, a, dirs) == 0.0);
    CHECK(sliced_wasserstein(a, b, dirs) == doctest::Approx(sliced_wasserstein(b, a, dirs)).epsilon(1e-14));
    CHECK(sliced_wasserstein(a, c, dirs) <= sliced_wasserstein(a, b, dirs) + sliced_wasserstein(b, c, dirs) + 1e-12);
    CHECK(sliced_wasserstein(a, b, dirs) >= 0.0);
  }

  TEST_CASE("projection directions are unit vectors") {
    Rng rng(50);
    for (const auto& v : random_projections(6, 10, rng)) {
      double n = 0.0;
      for (double x : v) n += x * x;
      CHECK(n == doctest::Approx(1.0).epsilon(1e-14));
    }
  }

  TEST_CASE("similarity weight and schedule step") {
    MixupSchedule s;
    s.total = 5;
    const MixupSchedule n1 = update_schedule(s, 1.0, 1.0, 0.05);
    CHECK(std::abs(n1.q - std::exp(-10.0)) <= 1e-12);
    CHECK(n1.n == 1);
    CHECK(n1.lambda2 == doctest::Approx((1 - n1.q) / 5).epsilon(1e-14));

    const MixupSchedule same = update_schedule(s, 0.0, 0.0, 0.05);
    CHECK(same.lambda2 == s.lambda2);
    CHECK(same.n == s.n);

    const MixupSchedule at_source = update_schedule(s, 0.0, 2.0, 0.05);
    CHECK(at_source.q == 1.0);
    CHECK(at_source.lambda2 == 0.0);
  }

  TEST_CASE("schedule is monotone and bounded") {
    Rng rng(51);
    for (int t = 0; t < 50; ++t) {
      MixupSchedule s;
      s.total = 1 + rng.below(10);
      for (std::size_t step = 0; step < s.total; ++step) {
        const MixupSchedule next = update_schedule(s, rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0.01, 2));
        CHECK(next.lambda2 >= s.lambda2);
        CHECK(next.lambda2 <= static_cast<double>(next.n) / next.total + 1e-15);
        s = next;
      }
    }
  }

  TEST_CASE("perturbed ratios") {
    Rng rng(52);
    const int n = 50000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = perturb_lambda(0.5, 0.2, rng);
      CHECK(x >= 0.3);
      CHECK(x <= 0.7);
      s += x;
      s2 += x * x;
    }
    const double m = s / n, var = s2 / n - m * m;
    CHECK(std::abs(m - 0.5) < 0.002);
    CHECK(std::abs(var - 0.04 / 3.0) < 0.0005);
    for (int i = 0; i < 100; ++i) {
      const double x = perturb_lambda(0.05, 0.2, rng);
      CHECK(x >= 0.0);
    }
    CHECK(perturb_lambda(0.4, 0.0, rng) == 0.4);
  }

  TEST_CASE("cross plans pair without replacement") {
    Rng rng(53);
    const MixPlan p = draw_cross_plan(7, 4, 0.3, 0.1, rng);
    CHECK(p.first.size() == 4);
    CHECK(std::set<std::size_t>(p.first.begin(), p.first.end()).size() == 4);
    CHECK(std::set<std::size_t>(p.second.begin(), p.second.end()).size() == 4);
    const MixPlan q = draw_mix_plan(7, 1.0, rng);
    CHECK(q.first.size() == 3);
    std::set<std::size_t> used(q.first.begin(), q.first.end());
    used.insert(q.second.begin(), q.second.end());
    CHECK(used.size() == 6);
  }

  TEST_CASE("source loss without pairs is the few-shot loss") {
    const Tensor s = Tensor::matrix({{0, 0}, {1, 0}});
    const Tensor q = Tensor::matrix({{0, 0}, {1, 0}});
    const std::vector<int> sl = {0, 1}, ql = {0, 1};
    const SourceLoss l = source_phase_loss(s, sl, q, ql, 2, MixPlan{});
    CHECK(l.mix.item() == 0.0);
    CHECK(l.total.item() == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
  }

  TEST_CASE("source loss with one hand-built pair") {
    const Tensor s = Tensor::matrix({{0, 0}, {1, 0}});
    const Tensor q = Tensor::matrix({{0, 0}, {1, 0}});
    const std::vector<int> sl = {0, 1}, ql = {0, 1};
    const MixPlan plan{{0}, {1}, {0.5}};
    const SourceLoss l = source_phase_loss(s, sl, q, ql, 2, plan);
    // The mixed point sits halfway, so both classes are equally likely.
    CHECK(l.mix.item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  }

  TEST_CASE("intermediate loss with hand values") {
    const std::vector<int> labels = {0, 1};
    const Prototypes protos = compute_prototypes(Tensor::matrix({{0, 0}, {1, 0}}), labels, 2);
    const Tensor z_src = Tensor::matrix({{0, 0}}), z_tgt = Tensor::matrix({{1, 0}});
    const Tensor y_src = Tensor::matrix({{1, 0}}), y_tgt = Tensor::matrix({{0, 1}});
    const std::vector<double> lam = {0.5};
    const IntermediateLoss l =
        intermediate_phase_loss(protos, Tensor::matrix({{0.5, 0}}), z_src, z_tgt, y_src, y_tgt, lam);
    CHECK(l.input_mix.item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(l.embed_mix.item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(l.total.item() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-14));
  }

  TEST_CASE("schedule trace columns") {
    std::ostringstream os;
    const ScheduleTraceRow row{1, 0.5, 0.1, 0.12, 2.0, 3.0};
    write_schedule_trace(os, std::span<const ScheduleTraceRow>(&row, 1));
    CHECK(os.str().find("step") == 0);
    CHECK(os.str().find("\n1,") != std::string::npos);
  }
}
