#pragma once

// Dense row-major tensors of doubles with a reverse-mode tape.
//
// Tensors are immutable values that share their storage. A tensor either is a
// plain value or carries a handle into the Tape that produced it. Ops record a
// node only when at least one input lives on a tape; everything else is
// evaluated eagerly with no bookkeeping.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mifomo {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

class Tape;

class Tensor {
 public:
  /// Scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor identity(std::size_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_->size(); }

  std::span<const double> data() const noexcept { return *data_; }
  /// Copy of the values, handy for building a modified tensor.
  std::vector<double> values() const { return *data_; }

  double operator[](std::size_t i) const { return (*data_)[i]; }
  /// Element (r, c) of a rank-2 tensor.
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  /// Detached value with the given flag; storage is shared.
  Tensor with_requires_grad(bool flag) const;
  Tensor detach() const { return with_requires_grad(requires_grad_); }

  Tape* tape() const noexcept { return tape_; }
  std::optional<std::size_t> tape_id() const noexcept;
  bool on_tape() const noexcept { return tape_ != nullptr; }

  /// True when shape and every value bit pattern agree.
  bool bit_equal(const Tensor& other) const noexcept;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  bool requires_grad_ = false;
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a loss with respect to every leaf watched on a tape.
class Gradients {
 public:
  const Tensor& of(const Tensor& leaf) const;
  const Tensor& of_id(std::size_t id) const;
  bool contains(std::size_t id) const { return grads_.count(id) != 0; }
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Tensor> grads_;
};

/// Records ops in execution order (which is a topological order) and replays
/// them backwards. One tape per training step, confined to one thread.
/// Tensors hold raw pointers into the tape, so it must outlive them.
class Tape {
 public:
  /// Accumulates the output gradient into the input gradient buffers. A null
  /// buffer means the corresponding input is a constant.
  using BackwardFn =
      std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a differentiation target. The tensor must have requires_grad.
  Tensor watch(const Tensor& leaf);

  Gradients backward(const Tensor& loss) const;

  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::string_view node_kind(std::size_t id) const { return nodes_.at(id).kind; }

  Tensor record(std::string_view kind, Shape shape, std::vector<double> value,
                std::span<const Tensor* const> inputs, BackwardFn backward);

 private:
  struct Node {
    std::string kind;
    Shape shape;
    std::vector<std::optional<std::size_t>> inputs;
    BackwardFn backward;
    bool leaf = false;
  };
  std::vector<Node> nodes_;
};

/// Free-function form of Tape::backward on the loss's own tape.
Gradients backward(const Tensor& loss);

// Ops. Shapes are checked eagerly; mismatches raise DimensionError naming both
// shapes.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Batched a[b]·c[b] for rank-3 operands.
Tensor bmm(const Tensor& a, const Tensor& b);
/// Batched a[b]·c[b]ᵀ for rank-3 operands.
Tensor bmm_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);

/// a + bias along the last axis.
Tensor add_bias(const Tensor& a, const Tensor& bias);
/// Rows of a [B·N × D] get rows of p [N × D] added cyclically.
Tensor add_tiled(const Tensor& a, const Tensor& p);
/// [B × D] → [B·n × D], each row repeated n times.
Tensor repeat_rows(const Tensor& a, std::size_t n);
/// [B·n × D] → [B × D], mean over consecutive groups of n rows.
Tensor mean_groups(const Tensor& a, std::size_t n);
/// Mean over the last axis; the axis is dropped.
Tensor mean_last_axis(const Tensor& a);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Squared Euclidean distances between rows: [M × D], [N × D] → [M × N].
Tensor pairwise_sqdist(const Tensor& a, const Tensor& b);

/// Mean over the batch of −Σ_c y_c log p_c, with p given as probabilities.
/// Target rows must be distributions within 1e-6.
Tensor cross_entropy(const Tensor& probs, const Tensor& targets);
/// Same loss with p = softmax(logits), evaluated stably.
Tensor cross_entropy_logits(const Tensor& logits, const Tensor& targets);

/// Central differences (f(x + h·e) − f(x − h·e)) / 2h per coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

/// ‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, 1e-8).
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace mifomo
