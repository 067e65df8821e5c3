#pragma once

// N-way K-shot episodes, prototypes, distance-softmax classification and the
// OA / AA / kappa metrics.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "mifomo/rng.hpp"
#include "mifomo/tensor.hpp"

namespace mifomo {

/// Sample ids grouped by dataset class id.
struct LabeledPool {
  std::map<int, std::vector<std::size_t>> members;

  void add(int class_id, std::size_t sample) { members[class_id].push_back(sample); }
  std::size_t class_count() const noexcept { return members.size(); }
  std::size_t size() const noexcept;
};

struct EpisodeSample {
  std::size_t id = 0;
  /// Episode-local class index; empty for unlabeled queries.
  std::optional<int> label;
};

struct Episode {
  /// Episode-local class index → dataset class id.
  std::vector<int> class_map;
  std::vector<EpisodeSample> support;
  std::vector<EpisodeSample> query;

  std::size_t ways() const noexcept { return class_map.size(); }
  std::vector<int> support_labels() const;
  /// Throws ContractError if any query is unlabeled.
  std::vector<int> query_labels() const;
  std::vector<std::size_t> support_ids() const;
  std::vector<std::size_t> query_ids() const;
};

/// Uniform class choice without replacement, then per class k support and q
/// query samples without replacement. Support and query are class-major.
Episode sample_episode(const LabeledPool& pool, std::size_t n_way, std::size_t k_shot, std::size_t q_query,
                       Rng& rng);

struct Prototypes {
  Tensor mu;  // [N × D]
  std::vector<std::size_t> counts;
};

/// Per-class mean of the rows of `embeddings` (differentiable).
Prototypes compute_prototypes(const Tensor& embeddings, std::span<const int> labels, std::size_t n_classes);

/// −‖z − μ_c‖² for every query row and prototype: [M × N].
Tensor class_logits(const Tensor& query_embeddings, const Prototypes& protos);
/// P(y = c | z) = softmax_c(−‖z − μ_c‖²).
Tensor classify(const Tensor& query_embeddings, const Prototypes& protos);
std::vector<int> argmax_rows(const Tensor& scores);

/// [labels.size() × n_classes] one-hot rows.
Tensor one_hot(std::span<const int> labels, std::size_t n_classes);

/// Mean negative log-probability of the true class over the query rows, with
/// prototypes from the support rows.
Tensor fsl_loss(const Tensor& support_embeddings, std::span<const int> support_labels,
                const Tensor& query_embeddings, std::span<const int> query_labels, std::size_t n_classes);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0);

  void add(std::size_t truth, std::size_t predicted, std::uint64_t count = 1);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const;
  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t total() const noexcept;
  std::uint64_t truth_count(std::size_t truth) const;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

struct Metrics {
  double oa = 0.0;
  double aa = 0.0;
  double kc = 0.0;
};

/// OA = trace/total; AA = mean recall over classes with truth samples;
/// KC = (p_o − p_e)/(1 − p_e). Throws ContractError on an empty matrix.
Metrics metrics(const ConfusionMatrix& cm);
/// Recall per class; classes without truth samples come back empty.
std::vector<std::optional<double>> per_class_recall(const ConfusionMatrix& cm);

}  // namespace mifomo
