#pragma once

// Target pseudo-labels: the support split for support-only training, an RBF
// similarity graph, label propagation and top-k confidence selection.

#include <cstddef>
#include <span>
#include <vector>

#include "mifomo/rng.hpp"
#include "mifomo/tensor.hpp"

namespace mifomo {

enum class SigmaMode { MedianHeuristic, Fixed };

struct PropagationConfig {
  double alpha = 0.99;
  SigmaMode sigma_mode = SigmaMode::MedianHeuristic;
  double sigma = 1.0;  // used when sigma_mode == Fixed
  /// Multiplier on the median distance in MedianHeuristic mode.
  double median_scale = 1.0;
  double ridge_eps = 1e-6;
  std::size_t max_iters = 1000;
  double conv_tol = 1e-9;

  void validate() const;
};

struct LabelGraph {
  Tensor a;      // N × N, symmetric, zero diagonal
  Tensor a_hat;  // D^{-1/2} A D^{-1/2}
  Tensor y_hat;  // N × C, one-hot or all-zero rows
  double sigma = 0.0;
};

struct SupportSplit {
  /// Positions into the support list.
  std::vector<std::size_t> sub_support;
  std::vector<std::size_t> sub_query;
};

/// Per class, k_s positions go to the sub-support and k_q to the sub-query.
/// Every class must have exactly k_s + k_q support samples.
SupportSplit split_support(std::span<const int> support_labels, std::size_t k_s, std::size_t k_q, Rng& rng);

/// RBF affinities exp(−‖z_i − z_j‖² / 2σ²). `initial` holds one class index per
/// node, or −1 for an unassigned node.
LabelGraph build_graph(const Tensor& embeddings, std::span<const int> initial, std::size_t n_classes,
                       const PropagationConfig& cfg);

/// Median of the pairwise Euclidean distances over i < j.
double median_pairwise_distance(const Tensor& embeddings);

struct PropagationResult {
  Tensor f;  // N × C
  std::size_t iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

/// F ← αÂF + (1−α)Ŷ from F = Ŷ.
PropagationResult propagate_iterative(const LabelGraph& g, const PropagationConfig& cfg);
/// The fixed point of the iteration, (1−α)(I − αÂ)⁻¹Ŷ, by a Cholesky solve.
/// ridge_eps is added to the diagonal only when the plain factorization fails.
Tensor propagate_closed_form(const LabelGraph& g, const PropagationConfig& cfg);

/// Row argmax of F and the row-normalized maximum as confidence. Rows with no
/// positive mass get label −1 and confidence 0.
struct RowLabels {
  std::vector<int> labels;
  std::vector<double> confidence;
};
RowLabels label_rows(const Tensor& f);

struct Selected {
  std::size_t index = 0;
  int label = 0;
  double confidence = 0.0;
};

/// Per predicted class the k most confident rows (ties to the lower index),
/// grouped by ascending class.
std::vector<Selected> select_topk(const Tensor& f_star, std::size_t k_per_class);
std::vector<Selected> select_topk(const RowLabels& rows, std::size_t k_per_class);

/// Nearest-prototype labels for `query` with prototypes from the support rows.
std::vector<int> nearest_prototype_labels(const Tensor& support_z, std::span<const int> support_labels,
                                          const Tensor& query_z, std::size_t n_classes);

/// Propagates over the graph of [support; query]: support rows seed their
/// true class, query rows their nearest-prototype class. Returns the query
/// part of F* with its labels. Query truth never enters.
struct Smoothed {
  Tensor f;
  RowLabels rows;
};
Smoothed smooth_labels(const Tensor& support_z, std::span<const int> support_labels, const Tensor& query_z,
                       std::size_t n_classes, const PropagationConfig& cfg);

}  // namespace mifomo
