#include "mifomo/pseudolabel.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "mifomo/episodic.hpp"
#include "mifomo/error.hpp"

namespace mifomo {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void PropagationConfig::validate() const {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("propagation.alpha", "must lie in [0, 1)");
  if (sigma_mode == SigmaMode::Fixed && !(sigma > 0.0)) throw ConfigError("propagation.sigma", "must be > 0");
  if (!(median_scale > 0.0)) throw ConfigError("propagation.median_scale", "must be > 0");
  if (!(ridge_eps > 0.0)) throw ConfigError("propagation.ridge_eps", "must be > 0");
  if (max_iters == 0) throw ConfigError("propagation.max_iters", "must be >= 1");
  if (!(conv_tol > 0.0)) throw ConfigError("propagation.conv_tol", "must be > 0");
}

SupportSplit split_support(std::span<const int> support_labels, std::size_t k_s, std::size_t k_q, Rng& rng) {
  if (k_s == 0 || k_q == 0) throw ConfigError("split.k_s", "k_s and k_q must both be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < support_labels.size(); ++i) by_class[support_labels[i]].push_back(i);
  SupportSplit out;
  for (auto& [cls, pos] : by_class) {
    if (pos.size() != k_s + k_q) {
      throw ConfigError("split.k_s", "k_s + k_q = " + std::to_string(k_s + k_q) + " but class " + std::to_string(cls) +
                                         " has " + std::to_string(pos.size()) + " support samples");
    }
    rng.shuffle(pos);
    out.sub_support.insert(out.sub_support.end(), pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k_s));
    out.sub_query.insert(out.sub_query.end(), pos.begin() + static_cast<std::ptrdiff_t>(k_s), pos.end());
  }
  return out;
}

namespace {

std::vector<double> sqdist_matrix(const Tensor& z) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double t = z[i * d + k] - z[j * d + k];
        s += t * t;
      }
      out[i * n + j] = out[j * n + i] = s;
    }
  }
  return out;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

void check_embeddings(const Tensor& z) {
  if (z.rank() != 2) throw DimensionError("build_graph: embeddings " + shape_str(z.shape()));
  if (z.dim(0) < 2) throw ContractError("build_graph: need at least 2 nodes");
}

}  // namespace

double median_pairwise_distance(const Tensor& embeddings) {
  check_embeddings(embeddings);
  const std::size_t n = embeddings.dim(0);
  const auto d2 = sqdist_matrix(embeddings);
  std::vector<double> d;
  d.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d.push_back(std::sqrt(d2[i * n + j]));
  return median_of(std::move(d));
}

LabelGraph build_graph(const Tensor& embeddings, std::span<const int> initial, std::size_t n_classes,
                       const PropagationConfig& cfg) {
  check_embeddings(embeddings);
  const std::size_t n = embeddings.dim(0);
  if (initial.size() != n) {
    throw DimensionError("build_graph: " + std::to_string(initial.size()) + " initial labels for " +
                         std::to_string(n) + " nodes");
  }
  LabelGraph g;
  g.sigma = cfg.sigma_mode == SigmaMode::Fixed ? cfg.sigma : cfg.median_scale * median_pairwise_distance(embeddings);
  const auto d2 = sqdist_matrix(embeddings);
  std::vector<double> a(n * n, 0.0);
  const double denom = 2.0 * g.sigma * g.sigma;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double x = d2[i * n + j];
      const double w = x == 0.0 ? 1.0 : (denom > 0.0 ? std::exp(-x / denom) : 0.0);
      a[i * n + j] = a[j * n + i] = w;
    }
  }
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a[i * n + j];
    if (deg <= 0.0) deg += cfg.ridge_eps;
    inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
  }
  std::vector<double> ah(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) ah[i * n + j] = inv_sqrt_deg[i] * a[i * n + j] * inv_sqrt_deg[j];
  std::vector<double> y(n * n_classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = initial[i];
    if (c < 0) continue;
    if (static_cast<std::size_t>(c) >= n_classes) throw ContractError("build_graph: label out of range");
    y[i * n_classes + static_cast<std::size_t>(c)] = 1.0;
  }
  g.a = Tensor({n, n}, std::move(a));
  g.a_hat = Tensor({n, n}, std::move(ah));
  g.y_hat = Tensor({n, n_classes}, std::move(y));
  return g;
}

PropagationResult propagate_iterative(const LabelGraph& g, const PropagationConfig& cfg) {
  if (!(cfg.alpha >= 0.0 && cfg.alpha < 1.0)) throw ContractError("propagate: alpha must lie in [0, 1)");
  const std::size_t n = g.a_hat.dim(0), c = g.y_hat.dim(1);
  Eigen::Map<const RowMatrix> ah(g.a_hat.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  Eigen::Map<const RowMatrix> y(g.y_hat.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
  RowMatrix f = y;
  const RowMatrix base = (1.0 - cfg.alpha) * y;
  PropagationResult res;
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    RowMatrix next = cfg.alpha * (ah * f) + base;
    res.residual = (next - f).cwiseAbs().maxCoeff();
    f = std::move(next);
    res.iterations = it;
    if (res.residual < cfg.conv_tol) {
      res.converged = true;
      break;
    }
  }
  res.f = Tensor({n, c}, std::vector<double>(f.data(), f.data() + f.size()));
  return res;
}

Tensor propagate_closed_form(const LabelGraph& g, const PropagationConfig& cfg) {
  if (!(cfg.alpha >= 0.0 && cfg.alpha < 1.0)) throw ContractError("propagate: alpha must lie in [0, 1)");
  const auto n = static_cast<Eigen::Index>(g.a_hat.dim(0));
  const auto c = static_cast<Eigen::Index>(g.y_hat.dim(1));
  Eigen::Map<const RowMatrix> ah(g.a_hat.data().data(), n, n);
  Eigen::Map<const RowMatrix> y(g.y_hat.data().data(), n, c);
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n, n) - cfg.alpha * Eigen::MatrixXd(ah);
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    m.diagonal().array() += cfg.ridge_eps;
    llt.compute(m);
    if (llt.info() != Eigen::Success) throw NumericError("propagate_closed_form: system is singular beyond the ridge");
  }
  RowMatrix f = (1.0 - cfg.alpha) * llt.solve(Eigen::MatrixXd(y));
  if (!f.allFinite()) throw NumericError("propagate_closed_form: non-finite solution");
  return Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(c)},
                std::vector<double>(f.data(), f.data() + f.size()));
}

RowLabels label_rows(const Tensor& f) {
  if (f.rank() != 2) throw DimensionError("label_rows: expected rank 2, got " + shape_str(f.shape()));
  const std::size_t n = f.dim(0), c = f.dim(1);
  RowLabels out;
  out.labels.assign(n, -1);
  out.confidence.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = f.data().data() + i * c;
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::max(row[k], 0.0);
    if (!(s > 0.0)) continue;
    const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    out.labels[i] = static_cast<int>(best);
    out.confidence[i] = row[best] / s;
  }
  return out;
}

std::vector<Selected> select_topk(const RowLabels& rows, std::size_t k_per_class) {
  if (k_per_class == 0) throw ContractError("select_topk: k_per_class must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < rows.labels.size(); ++i) {
    if (rows.labels[i] >= 0) by_class[rows.labels[i]].push_back(i);
  }
  std::vector<Selected> out;
  for (auto& [cls, idx] : by_class) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t x, std::size_t y) { return rows.confidence[x] > rows.confidence[y]; });
    const std::size_t take = std::min(k_per_class, idx.size());
    for (std::size_t t = 0; t < take; ++t) out.push_back({idx[t], cls, rows.confidence[idx[t]]});
  }
  return out;
}

std::vector<Selected> select_topk(const Tensor& f_star, std::size_t k_per_class) {
  return select_topk(label_rows(f_star), k_per_class);
}

std::vector<int> nearest_prototype_labels(const Tensor& support_z, std::span<const int> support_labels,
                                          const Tensor& query_z, std::size_t n_classes) {
  const Prototypes protos = compute_prototypes(support_z.detach(), support_labels, n_classes);
  return argmax_rows(class_logits(query_z.detach(), protos));
}

Smoothed smooth_labels(const Tensor& support_z, std::span<const int> support_labels, const Tensor& query_z,
                       std::size_t n_classes, const PropagationConfig& cfg) {
  const std::size_t ns = support_z.dim(0), nq = query_z.dim(0);
  std::vector<int> initial(support_labels.begin(), support_labels.end());
  const auto nearest = nearest_prototype_labels(support_z, support_labels, query_z, n_classes);
  initial.insert(initial.end(), nearest.begin(), nearest.end());
  const Tensor parts[] = {support_z.detach(), query_z.detach()};
  const LabelGraph g = build_graph(concat_rows(parts), initial, n_classes, cfg);
  Tensor f;
  try {
    f = propagate_closed_form(g, cfg);
  } catch (const NumericError&) {
    f = propagate_iterative(g, cfg).f;
  }
  std::vector<std::size_t> rows(nq);
  for (std::size_t i = 0; i < nq; ++i) rows[i] = ns + i;
  Smoothed out;
  out.f = gather_rows(f, rows);
  out.rows = label_rows(out.f);
  return out;
}

}  // namespace mifomo
