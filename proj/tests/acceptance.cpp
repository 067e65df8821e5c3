// Acceptance run: one PASS/FAIL line per criterion, exit status 3 when any
// criterion fails. `--quick` skips the end-to-end ablation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mifomo/encoder.hpp"
#include "mifomo/episodic.hpp"
#include "mifomo/mixup.hpp"
#include "mifomo/pipeline.hpp"
#include "mifomo/pseudolabel.hpp"
#include "reference.hpp"

using namespace mifomo;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Outcome gradient_fidelity() {
  const GradcheckReport adapted = gradcheck();
  GradcheckOptions all;
  all.all_groups = true;
  const GradcheckReport every = gradcheck(all);
  const double worst = std::max(adapted.worst, every.worst);
  const EncoderConfig c = gradcheck_encoder_config();
  std::size_t groups = 0;
  for (const auto* r : {&adapted, &every}) {
    for (const auto& g : r->groups) groups += !g.skipped;
  }
  const bool shape_ok = c.depth == 2 && c.embed_dim == 16 && c.heads == 2;
  return {shape_ok && worst <= 1e-4, fmt("worst relative error %.2e over %.0f groups", worst, double(groups))};
}

Outcome cp_identity() {
  EncoderConfig c;
  Rng rng(101);
  const EncoderParams p = init_encoder(c, rng);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const Tensor patches = random_tensor({10, c.window(), c.window(), c.bands}, rng);
    const Tensor a = encode_batch(patches, p, {.use_cp = true}).z;
    const Tensor b = encode_batch(patches, p, {.use_cp = false}).z;
    for (std::size_t k = 0; k < a.numel(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
  }
  return {worst <= 1e-10, fmt("max |diff| %.2e on 100 patches", worst)};
}

Outcome frozen_backbone() {
  EncoderConfig c;
  Rng rng(102);
  EncoderParams p = init_encoder(c, rng);
  p.set_phase(TrainPhase::Adaptation);
  std::map<std::string, std::vector<double>> before;
  p.for_each([&](const std::string& n, const Tensor& t, ParamRole) { before[n] = t.values(); });

  const Tensor patches = random_tensor({8, c.window(), c.window(), c.bands}, rng);
  const std::vector<int> labels = {0, 1, 2, 3};
  const std::size_t sr[] = {0, 1, 2, 3}, qr[] = {4, 5, 6, 7};
  SgdMomentum opt(0.01, 0.9, 5.0);
  for (int step = 0; step < 50; ++step) {
    Tape tape;
    ParamBinding binding(p, tape);
    const Tensor z = encode_batch(patches, binding.bound()).z;
    opt.step(p, binding, tape.backward(fsl_loss(gather_rows(z, sr), labels, gather_rows(z, qr), labels, 4)));
  }

  bool frozen_same = true, trainable_moved = false;
  std::size_t cp_count = 0;
  p.for_each([&](const std::string& n, const Tensor& t, ParamRole role) {
    const auto& old = before.at(n);
    const bool same = std::memcmp(old.data(), t.data().data(), old.size() * sizeof(double)) == 0;
    if (role == ParamRole::Backbone) frozen_same = frozen_same && same;
    if (role != ParamRole::Backbone && !same) trainable_moved = true;
    if (role == ParamRole::Projection) cp_count += t.numel();
  });
  const std::size_t per_branch = c.depth * c.heads * c.head_dim() * c.head_dim();
  const bool counts_ok = cp_count == 2 * per_branch && p.trainable_count() == analytic_trainable_count(c);
  return {frozen_same && trainable_moved && counts_ok,
          fmt("backbone identical=%.0f, CP entries %.0f = 2 branches x %.0f", frozen_same, double(cp_count),
              double(per_branch))};
}

Outcome propagation_oracle() {
  Rng rng(103);
  double worst = 0.0;
  bool all_converged = true;
  for (int g = 0; g < 100; ++g) {
    const std::size_t n = 2 + rng.below(31), classes = 2 + rng.below(4), d = 1 + rng.below(8);
    const Tensor z = random_tensor({n, d}, rng, -2, 2);
    std::vector<int> init(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.uniform() < 0.4) init[i] = static_cast<int>(rng.below(classes));
    }
    PropagationConfig cfg;
    cfg.alpha = rng.uniform(0.0, 0.95);
    cfg.median_scale = rng.uniform(0.1, 1.0);
    cfg.conv_tol = 1e-14;
    cfg.max_iters = 20000;
    const LabelGraph graph = build_graph(z, init, classes, cfg);
    const PropagationResult it = propagate_iterative(graph, cfg);
    const Tensor cf = propagate_closed_form(graph, cfg);
    all_converged = all_converged && it.converged;
    for (std::size_t k = 0; k < cf.numel(); ++k) worst = std::max(worst, std::abs(cf[k] - it.f[k]));
  }

  LabelGraph two;
  two.a = Tensor::matrix({{0, 1}, {1, 0}});
  two.a_hat = two.a;
  two.y_hat = Tensor::identity(2);
  PropagationConfig half;
  half.alpha = 0.5;
  const Tensor f = propagate_closed_form(two, half);
  const double expect[] = {2.0 / 3, 1.0 / 3, 1.0 / 3, 2.0 / 3};
  double hand = 0.0;
  for (int k = 0; k < 4; ++k) hand = std::max(hand, std::abs(f[static_cast<std::size_t>(k)] - expect[k]));
  return {all_converged && worst <= 1e-6 && hand <= 1e-15,
          fmt("max |closed - iterative| %.2e on 100 graphs, 2-node error %.1e", worst, hand)};
}

Outcome schedule_properties() {
  Rng rng(104);
  bool bounded = true, monotone = true;
  for (int run = 0; run < 10; ++run) {
    MixupSchedule s;
    s.total = 1 + rng.below(200);
    for (int step = 0; step < 100; ++step) {
      s = update_schedule(s, rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0.01, 1.0));
      bounded = bounded && s.lambda2 >= 0.0 && s.lambda2 <= 1.0;
    }
  }
  for (int run = 0; run < 10; ++run) {
    MixupSchedule s;
    s.total = 1 + rng.below(200);
    const double ds = rng.uniform(0, 5), dt = rng.uniform(0, 5), tau = rng.uniform(0.01, 1.0);
    for (int step = 0; step < 100; ++step) {
      const MixupSchedule next = update_schedule(s, ds, dt, tau);
      monotone = monotone && next.lambda2 >= s.lambda2;
      bounded = bounded && next.lambda2 >= 0.0 && next.lambda2 <= 1.0;
      s = next;
    }
  }
  const double q = update_schedule(MixupSchedule{}, 0.7, 0.7, 0.05).q;
  const double qerr = std::abs(q - std::exp(-10.0));
  return {bounded && monotone && qerr <= 1e-12,
          fmt("2000 steps bounded=%.0f monotone=%.0f, |q - e^-10| %.1e", bounded, monotone, qerr)};
}

Outcome sliced_wasserstein_oracle() {
  Rng rng(105);
  double rel = 0.0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.below(5);
    std::vector<std::vector<double>> a(n, std::vector<double>(2)), b = a;
    std::vector<double> fa, fb;
    for (auto& p : a) {
      for (auto& x : p) fa.push_back(x = rng.normal());
    }
    for (auto& p : b) {
      for (auto& x : p) fb.push_back(x = rng.normal(1.0, 1.0));
    }
    const double exact = testing::exact_assignment_w1(a, b);
    const double sliced = domain_distance(Tensor({n, 2}, fa), Tensor({n, 2}, fb), 64, rng);
    rel += std::abs(sliced - exact) / exact;
  }
  rel /= 50;
  return {rel <= 0.10, fmt("mean relative error %.3f over 50 trials", rel)};
}

Outcome metrics_oracle() {
  Rng rng(106);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(15);
    std::vector<std::vector<std::uint64_t>> rows(n, std::vector<std::uint64_t>(n));
    ConfusionMatrix cm(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        rows[i][j] = rng.below(i == j ? 200 : 40);
        cm.add(i, j, rows[i][j]);
      }
    }
    if (cm.total() == 0) continue;
    const Metrics m = metrics(cm);
    const auto ref = testing::reference_metrics(rows);
    worst = std::max({worst, std::abs(m.oa - double(ref.oa)), std::abs(m.aa - double(ref.aa)),
                      std::abs(m.kc - double(ref.kc))});
  }
  ConfusionMatrix hand(2);
  hand.add(0, 0, 40);
  hand.add(0, 1, 10);
  hand.add(1, 0, 20);
  hand.add(1, 1, 30);
  const double kc = metrics(hand).kc;
  return {worst <= 1e-12 && std::abs(kc - 0.40) <= 1e-12, fmt("max deviation %.1e, hand KC %.4f", worst, kc)};
}

Outcome ablation() {
  RunConfig cfg;
  cfg.trials = 5;
  // The inner loop is shortened so the four variants fit the time budget.
  cfg.e_inner = 40;
  cfg.validate();
  const Datasets data = make_datasets(cfg);
  const SourcePhaseResult src = run_source_phase(cfg, data.source);
  std::map<Variant, double> oa;
  for (Variant v : {Variant::SourceOnly, Variant::NoIntermediate, Variant::NoSmoothing, Variant::Full}) {
    const RunReport r = run_trials(cfg, v, data, src.params);
    oa[v] = 100.0 * r.mean.oa;
    std::printf("  %-16s OA %.2f +- %.2f\n", variant_name(v), oa[v], 100.0 * r.stddev.oa);
    std::fflush(stdout);
  }
  const double a = oa[Variant::Full] - oa[Variant::SourceOnly];
  const double b = oa[Variant::Full] - oa[Variant::NoSmoothing];
  const double c = oa[Variant::Full] - oa[Variant::NoIntermediate];
  std::printf("  (a) full - source-only     %+.2f (need >= 10) %s\n", a, a >= 10 ? "ok" : "short");
  std::printf("  (b) full - no-smoothing    %+.2f (need >= 3) %s\n", b, b >= 3 ? "ok" : "short");
  std::printf("  (c) full - no-intermediate %+.2f (need >= 2) %s\n", c, c >= 2 ? "ok" : "short");
  return {a >= 10 && b >= 3 && c >= 2, fmt("gaps (a) %+.2f (b) %+.2f (c) %+.2f points", a, b, c)};
}

Outcome determinism() {
  // Reduced run: fewer episodes and trials than the ablation, same scene.
  RunConfig cfg;
  cfg.trials = 2;
  cfg.source_episodes = 60;
  cfg.warmup_episodes = 40;
  cfg.e_outer = 2;
  cfg.mixup.total_steps = 2;
  cfg.e_inner = 5;
  cfg.validate();
  auto once = [&cfg] {
    const Datasets data = make_datasets(cfg);
    const SourcePhaseResult src = run_source_phase(cfg, data.source);
    const RunReport r = run_trials(cfg, Variant::Full, data, src.params);
    return std::make_pair(serialize_checkpoint(src.params), report_kv(r) + report_text(r));
  };
  const auto t0 = Clock::now();
  const auto first = once();
  const double single = seconds_since(t0);
  const auto second = once();
  const double both = seconds_since(t0);
  const bool same = first == second;
  return {same && both < 2.0 * single * 1.25 + 1.0,
          fmt("reports identical=%.0f, two runs %.1f s vs one %.1f s", same, both, single)};
}

Outcome complexity() {
  Rng rng(107);
  const std::size_t d = 32, n = 64, batch = 8;
  EncoderConfig c;
  c.embed_dim = d;
  c.heads = 4;
  c.mlp_dim = 64;
  const EncoderParams p = init_encoder(c, rng);
  const TransformerBlock& block = p.spatial.blocks.front();
  auto time_forward = [&](std::size_t tokens) {
    const Tensor u = random_tensor({batch * tokens, d}, rng);
    std::vector<double> runs;
    for (int r = 0; r < 7; ++r) {
      const auto t0 = Clock::now();
      for (int k = 0; k < 3; ++k) (void)transformer_block(u, tokens, block, c.ln_eps);
      runs.push_back(seconds_since(t0));
    }
    std::sort(runs.begin(), runs.end());
    return runs[runs.size() / 2];
  };
  time_forward(n);
  const double t1 = time_forward(n), t2 = time_forward(2 * n);
  const double ratio = t2 / t1;
  return {ratio <= 4.8, fmt("t(%.0f)/t(%.0f) = %.2f", double(2 * n), double(n), ratio)};
}

struct Criterion {
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const bool quick = argc > 1 && std::strcmp(argv[1], "--quick") == 0;
  const std::vector<Criterion> criteria = {
      {"gradient-fidelity", 60, gradient_fidelity},
      {"cp-identity", 5, cp_identity},
      {"frozen-backbone", 30, frozen_backbone},
      {"propagation-oracle", 10, propagation_oracle},
      {"schedule-properties", 1, schedule_properties},
      {"sliced-wasserstein-oracle", 10, sliced_wasserstein_oracle},
      {"metrics-oracle", 1, metrics_oracle},
      {"ablation", 20 * 60, ablation},
      {"determinism", 20 * 60, determinism},
      {"complexity-scaling", 60, complexity},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (quick && std::strcmp(c.name, "ablation") == 0) {
      std::printf("SKIP %s (--quick)\n", c.name);
      continue;
    }
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const bool in_time = secs < c.budget_s;
    const bool ok = o.ok && in_time;
    failed += !ok;
    std::printf("%s %s: %s; %.2f s (limit %.0f s)%s\n", ok ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs,
                c.budget_s, in_time ? "" : " over time");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size() - (quick ? 1 : 0));
  return failed == 0 ? 0 : 3;
}
