#include "mifomo/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mifomo/error.hpp"

namespace mifomo {

std::size_t LabeledPool::size() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, ids] : members) n += ids.size();
  return n;
}

std::vector<int> Episode::support_labels() const {
  std::vector<int> out;
  out.reserve(support.size());
  for (const auto& s : support) out.push_back(s.label.value_or(-1));
  return out;
}

std::vector<int> Episode::query_labels() const {
  std::vector<int> out;
  out.reserve(query.size());
  for (const auto& s : query) {
    if (!s.label) throw ContractError("query sample " + std::to_string(s.id) + " is unlabeled; pseudo-label first");
    out.push_back(*s.label);
  }
  return out;
}

std::vector<std::size_t> Episode::support_ids() const {
  std::vector<std::size_t> out;
  for (const auto& s : support) out.push_back(s.id);
  return out;
}

std::vector<std::size_t> Episode::query_ids() const {
  std::vector<std::size_t> out;
  for (const auto& s : query) out.push_back(s.id);
  return out;
}

Episode sample_episode(const LabeledPool& pool, std::size_t n_way, std::size_t k_shot, std::size_t q_query,
                       Rng& rng) {
  if (n_way == 0 || k_shot == 0) throw ContractError("sample_episode: n_way and k_shot must be positive");
  for (const auto& [cls, ids] : pool.members) {
    if (ids.size() < k_shot + q_query) {
      throw SamplingError("class " + std::to_string(cls) + " has " + std::to_string(ids.size()) +
                          " samples, an episode needs " + std::to_string(k_shot + q_query));
    }
  }
  if (pool.class_count() < n_way) {
    throw SamplingError("pool has " + std::to_string(pool.class_count()) + " classes, need " +
                        std::to_string(n_way));
  }
  std::vector<int> classes;
  for (const auto& [cls, _] : pool.members) classes.push_back(cls);
  rng.shuffle(classes);
  classes.resize(n_way);

  Episode ep;
  ep.class_map = classes;
  for (std::size_t c = 0; c < n_way; ++c) {
    std::vector<std::size_t> ids = pool.members.at(classes[c]);
    // Partial Fisher–Yates: only the first k + q positions are needed.
    for (std::size_t i = 0; i < k_shot + q_query; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
    for (std::size_t i = 0; i < k_shot; ++i) ep.support.push_back({ids[i], static_cast<int>(c)});
    for (std::size_t i = 0; i < q_query; ++i) ep.query.push_back({ids[k_shot + i], static_cast<int>(c)});
  }
  return ep;
}

Prototypes compute_prototypes(const Tensor& embeddings, std::span<const int> labels, std::size_t n_classes) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw DimensionError("compute_prototypes: " + std::to_string(labels.size()) + " labels for embeddings " +
                         shape_str(embeddings.shape()));
  }
  Prototypes p;
  p.counts.assign(n_classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw ContractError("compute_prototypes: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(n_classes) + ")");
    }
    ++p.counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (p.counts[c] == 0) throw ContractError("compute_prototypes: class " + std::to_string(c) + " has no samples");
  }
  const std::size_t m = labels.size();
  std::vector<double> avg(n_classes * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    avg[c * m + i] = 1.0 / static_cast<double>(p.counts[c]);
  }
  p.mu = matmul(Tensor({n_classes, m}, std::move(avg)), embeddings);
  return p;
}

Tensor class_logits(const Tensor& query_embeddings, const Prototypes& protos) {
  return scale(pairwise_sqdist(query_embeddings, protos.mu), -1.0);
}

Tensor classify(const Tensor& query_embeddings, const Prototypes& protos) {
  return softmax_rows(class_logits(query_embeddings, protos));
}

std::vector<int> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2) throw DimensionError("argmax_rows: expected rank 2, got " + shape_str(scores.shape()));
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = scores.data().data() + r * cols;
    out[r] = static_cast<int>(std::max_element(row, row + cols) - row);
  }
  return out;
}

Tensor one_hot(std::span<const int> labels, std::size_t n_classes) {
  std::vector<double> d(labels.size() * n_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) {
      throw ContractError("one_hot: label " + std::to_string(labels[i]) + " out of range");
    }
    d[i * n_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor({labels.size(), n_classes}, std::move(d));
}

Tensor fsl_loss(const Tensor& support_embeddings, std::span<const int> support_labels,
                const Tensor& query_embeddings, std::span<const int> query_labels, std::size_t n_classes) {
  if (query_embeddings.rank() != 2 || query_embeddings.dim(0) != query_labels.size()) {
    throw DimensionError("fsl_loss: " + std::to_string(query_labels.size()) + " query labels for embeddings " +
                         shape_str(query_embeddings.shape()));
  }
  for (int y : query_labels) {
    if (y < 0) throw ContractError("fsl_loss: unlabeled query; pseudo-label first");
  }
  const Prototypes protos = compute_prototypes(support_embeddings, support_labels, n_classes);
  return cross_entropy_logits(class_logits(query_embeddings, protos), one_hot(query_labels, n_classes));
}

// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t count) {
  if (truth >= classes_ || predicted >= classes_) {
    throw ContractError("confusion matrix: class index out of range");
  }
  counts_[truth * classes_ + predicted] += count;
}

std::uint64_t ConfusionMatrix::at(std::size_t truth, std::size_t predicted) const {
  return counts_.at(truth * classes_ + predicted);
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  std::uint64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

std::uint64_t ConfusionMatrix::truth_count(std::size_t truth) const {
  std::uint64_t n = 0;
  for (std::size_t p = 0; p < classes_; ++p) n += at(truth, p);
  return n;
}

std::vector<std::optional<double>> per_class_recall(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.classes());
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const auto n = cm.truth_count(c);
    if (n > 0) out[c] = static_cast<double>(cm.at(c, c)) / static_cast<double>(n);
  }
  return out;
}

Metrics metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw ContractError("metrics: confusion matrix is empty");
  const double n = static_cast<double>(total);
  const std::size_t k = cm.classes();
  double trace = 0.0, pe = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    trace += static_cast<double>(cm.at(c, c));
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      row += static_cast<double>(cm.at(c, j));
      col += static_cast<double>(cm.at(j, c));
    }
    pe += (row / n) * (col / n);
  }
  Metrics m;
  m.oa = trace / n;
  double recall_sum = 0.0;
  std::size_t present = 0;
  for (const auto& r : per_class_recall(cm)) {
    if (!r) continue;
    recall_sum += *r;
    ++present;
  }
  m.aa = recall_sum / static_cast<double>(present);
  // p_e = 1 only when truth and prediction both sit on one class; agreement is
  // then perfect and kappa is taken as 1.
  m.kc = pe >= 1.0 ? 1.0 : (m.oa - pe) / (1.0 - pe);
  return m;
}

}  // namespace mifomo
