#include "mifomo/mixup.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>

#include "mifomo/error.hpp"

namespace mifomo {

void MixupConfig::validate() const {
  if (!(beta_alpha > 0.0)) throw ConfigError("mixup.beta_alpha", "must be > 0");
  if (!(tau > 0.0)) throw ConfigError("mixup.tau", "must be > 0");
  if (!(sigma_perturb >= 0.0 && sigma_perturb <= 1.0)) throw ConfigError("mixup.sigma_perturb", "must lie in [0, 1]");
  if (total_steps == 0) throw ConfigError("mixup.total_steps", "must be >= 1");
  if (projections == 0) throw ConfigError("mixup.projections", "must be >= 1");
}

namespace {

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("mixup: lambda " + std::to_string(lambda) + " outside [0, 1]");
}

Tensor mix_pair(const Tensor& a, const Tensor& b, double lambda) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mixup: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  return add(scale(a, lambda), scale(b, 1.0 - lambda));
}

}  // namespace

Mixed mix_embeddings(const Tensor& z_i, const Tensor& z_j, const Tensor& y_i, const Tensor& y_j, double lambda) {
  check_lambda(lambda);
  return {mix_pair(z_i, z_j, lambda), mix_pair(y_i, y_j, lambda)};
}

Mixed mix_inputs(const Tensor& x_s, const Tensor& x_t, const Tensor& y_s, const Tensor& y_t, double lambda) {
  check_lambda(lambda);
  return {mix_pair(x_s, x_t, lambda), mix_pair(y_s, y_t, lambda)};
}

Tensor mix_rows(const Tensor& a, const Tensor& b, std::span<const double> lambdas) {
  if (a.shape() != b.shape() || a.rank() == 0 || a.dim(0) != lambdas.size()) {
    throw DimensionError("mix_rows: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " with " +
                         std::to_string(lambdas.size()) + " ratios");
  }
  const std::size_t rows = lambdas.size();
  const std::size_t width = rows == 0 ? 0 : a.numel() / rows;
  std::vector<double> la(a.numel()), lb(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    check_lambda(lambdas[r]);
    std::fill_n(la.begin() + static_cast<std::ptrdiff_t>(r * width), width, lambdas[r]);
    std::fill_n(lb.begin() + static_cast<std::ptrdiff_t>(r * width), width, 1.0 - lambdas[r]);
  }
  return add(mul(a, Tensor(a.shape(), std::move(la))), mul(b, Tensor(b.shape(), std::move(lb))));
}

double sample_lambda_beta(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw ContractError("sample_lambda_beta: alpha must be > 0");
  return std::clamp(rng.beta(alpha, alpha), 0.0, 1.0);
}

std::vector<std::vector<double>> random_projections(std::size_t dim, std::size_t count, Rng& rng) {
  if (dim == 0) throw ContractError("random_projections: zero dimension");
  std::vector<std::vector<double>> out;
  out.reserve(count);
  while (out.size() < count) {
    std::vector<double> v(dim);
    double norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) continue;
    for (auto& x : v) x /= norm;
    out.push_back(std::move(v));
  }
  return out;
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ContractError("wasserstein_1d: empty set");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  if (a.size() == b.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / na;
  }
  // ∫|F_a − F_b| over the merged breakpoints.
  std::size_t i = 0, j = 0;
  double x = std::min(a[0], b[0]);
  double total = 0.0;
  while (i < a.size() || j < b.size()) {
    double next;
    if (j >= b.size() || (i < a.size() && a[i] <= b[j])) {
      next = a[i];
    } else {
      next = b[j];
    }
    const double fa = static_cast<double>(i) / na, fb = static_cast<double>(j) / nb;
    total += std::abs(fa - fb) * (next - x);
    x = next;
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
  }
  return total;
}

double sliced_scale(std::size_t dim) {
  if (dim == 0) throw ContractError("sliced_scale: zero dimension");
  const double d = static_cast<double>(dim);
  return std::sqrt(std::numbers::pi) * std::exp(std::lgamma((d + 1.0) / 2.0) - std::lgamma(d / 2.0));
}

double sliced_wasserstein(const Tensor& a, const Tensor& b, std::span<const std::vector<double>> directions) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("domain_distance: sets " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (a.dim(0) == 0 || b.dim(0) == 0) throw ContractError("domain_distance: empty set");
  if (directions.empty()) throw ContractError("domain_distance: no projections");
  const std::size_t d = a.dim(1);
  auto project = [d](const Tensor& x, const std::vector<double>& dir) {
    std::vector<double> out(x.dim(0));
    for (std::size_t r = 0; r < out.size(); ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += x[r * d + k] * dir[k];
      out[r] = s;
    }
    return out;
  };
  double total = 0.0;
  for (const auto& dir : directions) {
    if (dir.size() != d) throw DimensionError("domain_distance: projection length mismatch");
    total += wasserstein_1d(project(a, dir), project(b, dir));
  }
  return sliced_scale(d) * total / static_cast<double>(directions.size());
}

double domain_distance(const Tensor& a, const Tensor& b, std::size_t projections, Rng& rng) {
  if (a.rank() != 2 || a.dim(1) == 0) throw DimensionError("domain_distance: set " + shape_str(a.shape()));
  const auto dirs = random_projections(a.dim(1), projections, rng);
  return sliced_wasserstein(a, b, dirs);
}

MixupSchedule update_schedule(const MixupSchedule& s, double d_source, double d_target, double tau) {
  if (!(d_source >= 0.0) || !(d_target >= 0.0)) throw ContractError("update_schedule: distances must be >= 0");
  if (!(tau > 0.0)) throw ContractError("update_schedule: tau must be > 0");
  if (d_source + d_target == 0.0) return s;
  MixupSchedule next = s;
  next.q = std::exp(-d_source / ((d_source + d_target) * tau));
  next.n = s.n + 1;
  const double total = static_cast<double>(std::max<std::size_t>(s.total, 1));
  next.lambda2 = static_cast<double>(next.n) * (1.0 - next.q) / total + next.q * s.lambda2;
  // Past n = N the ramp term alone can exceed one.
  next.lambda2 = std::clamp(next.lambda2, 0.0, 1.0);
  return next;
}

double perturb_lambda(double lambda2, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw ContractError("perturb_lambda: sigma must be >= 0");
  const double u = rng.uniform();
  return std::clamp(lambda2 - sigma + 2.0 * sigma * u, 0.0, 1.0);
}

MixPlan draw_mix_plan(std::size_t m, double beta_alpha, Rng& rng) {
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = i;
  rng.shuffle(order);
  MixPlan plan;
  for (std::size_t p = 0; p + 1 < m; p += 2) {
    plan.first.push_back(order[p]);
    plan.second.push_back(order[p + 1]);
    plan.lambdas.push_back(sample_lambda_beta(beta_alpha, rng));
  }
  return plan;
}

MixPlan draw_cross_plan(std::size_t n_source, std::size_t n_target, double lambda2, double sigma, Rng& rng) {
  std::vector<std::size_t> src(n_source), tgt(n_target);
  for (std::size_t i = 0; i < n_source; ++i) src[i] = i;
  for (std::size_t i = 0; i < n_target; ++i) tgt[i] = i;
  rng.shuffle(src);
  rng.shuffle(tgt);
  MixPlan plan;
  const std::size_t pairs = std::min(n_source, n_target);
  for (std::size_t p = 0; p < pairs; ++p) {
    plan.first.push_back(src[p]);
    plan.second.push_back(tgt[p]);
    plan.lambdas.push_back(perturb_lambda(lambda2, sigma, rng));
  }
  return plan;
}

SourceLoss source_phase_loss(const Tensor& support_z, std::span<const int> support_labels, const Tensor& query_z,
                             std::span<const int> query_labels, std::size_t n_classes, const MixPlan& plan) {
  const Prototypes protos = compute_prototypes(support_z, support_labels, n_classes);
  const Tensor y = one_hot(query_labels, n_classes);
  SourceLoss out;
  out.fsl = cross_entropy_logits(class_logits(query_z, protos), y);
  if (plan.first.empty()) {
    out.mix = Tensor::scalar(0.0);
    out.total = out.fsl;
    return out;
  }
  const Tensor z_mix = mix_rows(gather_rows(query_z, plan.first), gather_rows(query_z, plan.second), plan.lambdas);
  const Tensor y_mix = mix_rows(gather_rows(y, plan.first), gather_rows(y, plan.second), plan.lambdas);
  out.mix = cross_entropy_logits(class_logits(z_mix, protos), y_mix);
  out.total = add(out.fsl, out.mix);
  return out;
}

IntermediateLoss intermediate_phase_loss(const Prototypes& protos, const Tensor& mixed_input_z, const Tensor& z_src,
                                         const Tensor& z_tgt, const Tensor& y_src, const Tensor& y_tgt,
                                         std::span<const double> lambdas) {
  if (y_tgt.rank() != 2) throw DimensionError("intermediate_phase_loss: target labels " + shape_str(y_tgt.shape()));
  const std::size_t c = y_tgt.dim(1);
  for (std::size_t r = 0; r < y_tgt.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += y_tgt[r * c + k];
    if (std::abs(s - 1.0) > 1e-6) {
      throw ContractError("intermediate_phase_loss: target row " + std::to_string(r) + " has no pseudo-label");
    }
  }
  const Tensor y_mix = mix_rows(y_src, y_tgt, lambdas);
  IntermediateLoss out;
  out.input_mix = cross_entropy_logits(class_logits(mixed_input_z, protos), y_mix);
  out.embed_mix = cross_entropy_logits(class_logits(mix_rows(z_src, z_tgt, lambdas), protos), y_mix);
  out.total = add(out.input_mix, out.embed_mix);
  return out;
}

void write_schedule_trace(std::ostream& out, std::span<const ScheduleTraceRow> rows) {
  out << "step,q,lambda2,lambda2_perturbed,d_source,d_target\n";
  const auto flags = out.flags();
  const auto prec = out.precision();
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.step << ',' << r.q << ',' << r.lambda2 << ',' << r.lambda2_perturbed << ',' << r.d_source << ','
        << r.d_target << '\n';
  }
  out.flags(flags);
  out.precision(prec);
}

}  // namespace mifomo
