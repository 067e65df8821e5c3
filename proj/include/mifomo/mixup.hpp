#pragma once

// Embedding- and input-level mixup, the sliced Wasserstein domain distance and
// the schedule that moves the intermediate domain from target toward source.

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mifomo/episodic.hpp"
#include "mifomo/rng.hpp"
#include "mifomo/tensor.hpp"

namespace mifomo {

struct MixupConfig {
  double beta_alpha = 1.0;
  /// Temperature of the similarity weight q.
  double tau = 0.05;
  double sigma_perturb = 0.2;
  /// N in the schedule update, the number of intermediate epochs.
  std::size_t total_steps = 5;
  std::size_t projections = 32;

  void validate() const;
};

struct MixupSchedule {
  double lambda2 = 0.0;
  double q = 0.0;
  std::size_t n = 0;
  std::size_t total = 1;
};

struct Mixed {
  Tensor z;
  Tensor y;
};

/// λ·z_i + (1−λ)·z_j and the same mix of the soft labels. Gradients reach both
/// inputs.
Mixed mix_embeddings(const Tensor& z_i, const Tensor& z_j, const Tensor& y_i, const Tensor& y_j, double lambda);
/// Same mix on patches; shapes must agree.
Mixed mix_inputs(const Tensor& x_s, const Tensor& x_t, const Tensor& y_s, const Tensor& y_t, double lambda);
/// Row r of the result is λ_r·a_r + (1−λ_r)·b_r, where a row is everything
/// after the leading axis.
Tensor mix_rows(const Tensor& a, const Tensor& b, std::span<const double> lambdas);

double sample_lambda_beta(double alpha, Rng& rng);

/// Unit vectors drawn uniformly on the sphere in R^dim.
std::vector<std::vector<double>> random_projections(std::size_t dim, std::size_t count, Rng& rng);

/// Exact 1-D W₁ between two empirical distributions (area between the CDFs).
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

/// Sliced W₁ between row sets [Na × D] and [Nb × D] along the given directions.
/// The mean 1-D distance is multiplied by 1/E|θ₁| so that the estimate is on
/// the scale of W₁ itself (a pure translation is recovered exactly in
/// expectation).
double sliced_wasserstein(const Tensor& a, const Tensor& b, std::span<const std::vector<double>> directions);
double domain_distance(const Tensor& a, const Tensor& b, std::size_t projections, Rng& rng);
/// 1/E|θ₁| for θ uniform on the unit sphere in R^dim.
double sliced_scale(std::size_t dim);

/// q = exp(−d_S / ((d_S + d_T)·τ)); λ₂ ← n(1−q)/N + q·λ₂ with n the new step.
/// When both distances vanish the schedule is returned unchanged.
MixupSchedule update_schedule(const MixupSchedule& s, double d_source, double d_target, double tau);
double perturb_lambda(double lambda2, double sigma, Rng& rng);

/// Disjoint pairs inside one set of m items plus a Beta(α,α) ratio per pair.
struct MixPlan {
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
  std::vector<double> lambdas;
};
MixPlan draw_mix_plan(std::size_t m, double beta_alpha, Rng& rng);

/// Source/target pairs without replacement on either side, each pair with its
/// own perturbed λ₂.
MixPlan draw_cross_plan(std::size_t n_source, std::size_t n_target, double lambda2, double sigma, Rng& rng);

struct SourceLoss {
  Tensor total;
  Tensor fsl;
  Tensor mix;
};

/// Few-shot loss on the query rows plus soft cross-entropy of embedding-mixed
/// query pairs, both against prototypes of the support rows.
SourceLoss source_phase_loss(const Tensor& support_z, std::span<const int> support_labels, const Tensor& query_z,
                             std::span<const int> query_labels, std::size_t n_classes, const MixPlan& plan);

struct IntermediateLoss {
  Tensor total;
  Tensor input_mix;
  Tensor embed_mix;
};

/// CE of the encoded input mixes plus CE of the embedding mixes, both against
/// `protos` and the mixed soft labels. z_src / z_tgt / y_src / y_tgt hold one
/// row per pair. Target label rows must be distributions.
IntermediateLoss intermediate_phase_loss(const Prototypes& protos, const Tensor& mixed_input_z, const Tensor& z_src,
                                         const Tensor& z_tgt, const Tensor& y_src, const Tensor& y_tgt,
                                         std::span<const double> lambdas);

struct ScheduleTraceRow {
  std::size_t step = 0;
  double q = 0.0;
  double lambda2 = 0.0;
  double lambda2_perturbed = 0.0;
  double d_source = 0.0;
  double d_target = 0.0;
};

void write_schedule_trace(std::ostream& out, std::span<const ScheduleTraceRow> rows);

}  // namespace mifomo
