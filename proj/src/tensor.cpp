#include "mifomo/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "mifomo/error.hpp"

namespace mifomo {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap cmap(const double* p, std::size_t r, std::size_t c) {
  return CMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MMap mmap(double* p, std::size_t r, std::size_t c) {
  return MMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->on_tape()) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw ContractError("op inputs belong to different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

Tensor emit(std::string_view kind, Shape shape, std::vector<double> value,
            std::initializer_list<const Tensor*> inputs, Tape::BackwardFn fn) {
  Tape* tape = common_tape(inputs);
  if (tape == nullptr) return Tensor(std::move(shape), std::move(value));
  std::vector<const Tensor*> ins(inputs);
  return tape->record(kind, std::move(shape), std::move(value), ins, std::move(fn));
}

[[noreturn]] void dim_error(std::string_view op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) dim_error(op, a.shape(), b.shape());
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

void require_finite(std::string_view op, const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
  if (shape_numel(shape_) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_numel(shape_)) + " values, got " +
                         std::to_string(data.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(d));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> d;
  d.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("matrix: ragged rows");
    d.insert(d.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(d));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2 || r >= shape_[0] || c >= shape_[1]) {
    throw DimensionError("at(" + std::to_string(r) + "," + std::to_string(c) + ") on " +
                         shape_str(shape_));
  }
  return (*data_)[r * shape_[1] + c];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::with_requires_grad(bool flag) const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  t.requires_grad_ = flag;
  return t;
}

std::optional<std::size_t> Tensor::tape_id() const noexcept {
  if (tape_ == nullptr) return std::nullopt;
  return id_;
}

bool Tensor::bit_equal(const Tensor& other) const noexcept {
  if (shape_ != other.shape_) return false;
  if (data_ == other.data_) return true;
  return std::memcmp(data_->data(), other.data_->data(), data_->size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Gradients::of(const Tensor& leaf) const {
  if (!leaf.tape_id()) throw ContractError("gradient requested for a tensor that is not on a tape");
  return of_id(*leaf.tape_id());
}

const Tensor& Gradients::of_id(std::size_t id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw ContractError("no gradient: tensor is not a watched leaf");
  return it->second;
}

Tensor Tape::watch(const Tensor& leaf) {
  if (!leaf.requires_grad()) {
    throw ContractError("watch: tensor with requires_grad=false cannot be a differentiation target");
  }
  Node node;
  node.kind = "leaf";
  node.shape = leaf.shape();
  node.leaf = true;
  nodes_.push_back(std::move(node));
  Tensor t = leaf.with_requires_grad(true);
  t.tape_ = this;
  t.id_ = nodes_.size() - 1;
  return t;
}

Tensor Tape::record(std::string_view kind, Shape shape, std::vector<double> value,
                    std::span<const Tensor* const> inputs, BackwardFn backward) {
  Node node;
  node.kind = std::string(kind);
  node.shape = shape;
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    if (in->tape() == this) {
      node.inputs.emplace_back(*in->tape_id());
    } else {
      node.inputs.emplace_back(std::nullopt);
    }
  }
  nodes_.push_back(std::move(node));
  Tensor t(std::move(shape), std::move(value), true);
  t.tape_ = this;
  t.id_ = nodes_.size() - 1;
  return t;
}

Gradients Tape::backward(const Tensor& loss) const {
  if (loss.tape() != this) throw ContractError("backward: loss is not on this tape");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  const std::size_t root = *loss.tape_id();
  std::vector<std::vector<double>> grads(nodes_.size());
  grads[root].assign(1, 1.0);
  std::vector<std::vector<double>*> slots;
  for (std::size_t i = root + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || node.leaf) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      if (!node.inputs[j]) continue;
      const std::size_t k = *node.inputs[j];
      if (grads[k].empty()) grads[k].assign(shape_numel(nodes_[k].shape), 0.0);
      slots[j] = &grads[k];
    }
    node.backward(grads[i], slots);
    grads[i].clear();
    grads[i].shrink_to_fit();
  }
  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].leaf) continue;
    std::vector<double> g = grads[i].empty() ? std::vector<double>(shape_numel(nodes_[i].shape), 0.0)
                                             : std::move(grads[i]);
    out.grads_.emplace(i, Tensor(nodes_[i].shape, std::move(g)));
  }
  return out;
}

Gradients backward(const Tensor& loss) {
  if (!loss.on_tape()) throw ContractError("backward: loss is not on a tape");
  return loss.tape()->backward(loss);
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) dim_error("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n);
  mmap(out.data(), m, n).noalias() = cmap(a.data().data(), m, k) * cmap(b.data().data(), k, n);
  return emit("matmul", {m, n}, std::move(out), {&a, &b},
              [a, b, m, k, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                auto G = cmap(g.data(), m, n);
                if (gi[0]) mmap(gi[0]->data(), m, k).noalias() += G * cmap(b.data().data(), k, n).transpose();
                if (gi[1]) mmap(gi[1]->data(), k, n).noalias() += cmap(a.data().data(), m, k).transpose() * G;
              });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  mmap(out.data(), c, r) = cmap(a.data().data(), r, c).transpose();
  return emit("transpose", {c, r}, std::move(out), {&a},
              [r, c](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) mmap(gi[0]->data(), r, c) += cmap(g.data(), c, r).transpose();
              });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bs || b.dim(1) != k) dim_error("bmm", a.shape(), b.shape());
  std::vector<double> out(bs * m * n);
  for (std::size_t i = 0; i < bs; ++i) {
    mmap(out.data() + i * m * n, m, n).noalias() =
        cmap(a.data().data() + i * m * k, m, k) * cmap(b.data().data() + i * k * n, k, n);
  }
  return emit("bmm", {bs, m, n}, std::move(out), {&a, &b},
              [a, b, bs, m, k, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                for (std::size_t i = 0; i < bs; ++i) {
                  auto G = cmap(g.data() + i * m * n, m, n);
                  if (gi[0]) {
                    mmap(gi[0]->data() + i * m * k, m, k).noalias() +=
                        G * cmap(b.data().data() + i * k * n, k, n).transpose();
                  }
                  if (gi[1]) {
                    mmap(gi[1]->data() + i * k * n, k, n).noalias() +=
                        cmap(a.data().data() + i * m * k, m, k).transpose() * G;
                  }
                }
              });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  require_rank("bmm_nt", a, 3);
  require_rank("bmm_nt", b, 3);
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(0) != bs || b.dim(2) != k) dim_error("bmm_nt", a.shape(), b.shape());
  std::vector<double> out(bs * m * n);
  for (std::size_t i = 0; i < bs; ++i) {
    mmap(out.data() + i * m * n, m, n).noalias() =
        cmap(a.data().data() + i * m * k, m, k) * cmap(b.data().data() + i * n * k, n, k).transpose();
  }
  return emit("bmm_nt", {bs, m, n}, std::move(out), {&a, &b},
              [a, b, bs, m, k, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                for (std::size_t i = 0; i < bs; ++i) {
                  auto G = cmap(g.data() + i * m * n, m, n);
                  if (gi[0]) {
                    mmap(gi[0]->data() + i * m * k, m, k).noalias() +=
                        G * cmap(b.data().data() + i * n * k, n, k);
                  }
                  if (gi[1]) {
                    mmap(gi[1]->data() + i * n * k, n, k).noalias() +=
                        G.transpose() * cmap(a.data().data() + i * m * k, m, k);
                  }
                }
              });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return emit("add", a.shape(), std::move(out), {&a, &b},
              [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                for (auto* buf : gi) {
                  if (!buf) continue;
                  for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
                }
              });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return emit("sub", a.shape(), std::move(out), {&a, &b},
              [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
              });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return emit("mul", a.shape(), std::move(out), {&a, &b},
              [a, b](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * b[i];
                if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * a[i];
              });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return emit("scale", a.shape(), std::move(out), {&a},
              [factor](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor;
              });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + value;
  return emit("add_scalar", a.shape(), std::move(out), {&a},
              [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
              });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
  return emit("square", a.shape(), std::move(out), {&a},
              [a](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += 2.0 * a[i] * g[i];
              });
}

// ---------------------------------------------------------------------------
// Row structure

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_rank("add_bias", bias, 1);
  const std::size_t d = last_dim(a);
  if (a.rank() == 0 || bias.dim(0) != d) dim_error("add_bias", a.shape(), bias.shape());
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = a[r * d + c] + bias[c];
  return emit("add_bias", a.shape(), std::move(out), {&a, &bias},
              [rows, d](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                if (gi[1])
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < d; ++c) (*gi[1])[c] += g[r * d + c];
              });
}

Tensor add_tiled(const Tensor& a, const Tensor& p) {
  require_rank("add_tiled", a, 2);
  require_rank("add_tiled", p, 2);
  const std::size_t rows = a.dim(0), d = a.dim(1), n = p.dim(0);
  if (p.dim(1) != d || n == 0 || rows % n != 0) dim_error("add_tiled", a.shape(), p.shape());
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = a[r * d + c] + p[(r % n) * d + c];
  return emit("add_tiled", a.shape(), std::move(out), {&a, &p},
              [rows, d, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                if (gi[1])
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < d; ++c) (*gi[1])[(r % n) * d + c] += g[r * d + c];
              });
}

Tensor repeat_rows(const Tensor& a, std::size_t n) {
  require_rank("repeat_rows", a, 2);
  if (n == 0) throw ContractError("repeat_rows: n must be positive");
  const std::size_t rows = a.dim(0), d = a.dim(1);
  std::vector<double> out(rows * n * d);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(a.data().data() + r * d, d, out.data() + (r * n + j) * d);
  return emit("repeat_rows", {rows * n, d}, std::move(out), {&a},
              [rows, n, d](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (!gi[0]) return;
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t c = 0; c < d; ++c) (*gi[0])[r * d + c] += g[(r * n + j) * d + c];
              });
}

Tensor mean_groups(const Tensor& a, std::size_t n) {
  require_rank("mean_groups", a, 2);
  const std::size_t rows = a.dim(0), d = a.dim(1);
  if (n == 0 || rows % n != 0) {
    throw DimensionError("mean_groups: " + std::to_string(rows) + " rows not divisible into groups of " +
                         std::to_string(n));
  }
  const std::size_t groups = rows / n;
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> out(groups * d, 0.0);
  for (std::size_t gr = 0; gr < groups; ++gr)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < d; ++c) out[gr * d + c] += a[(gr * n + j) * d + c];
  for (double& v : out) v *= inv;
  return emit("mean_groups", {groups, d}, std::move(out), {&a},
              [groups, n, d, inv](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (!gi[0]) return;
                for (std::size_t gr = 0; gr < groups; ++gr)
                  for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t c = 0; c < d; ++c) (*gi[0])[(gr * n + j) * d + c] += g[gr * d + c] * inv;
              });
}

Tensor mean_last_axis(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("mean_last_axis: scalar input");
  const std::size_t d = last_dim(a);
  const std::size_t rows = a.numel() / d;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  const double inv = 1.0 / static_cast<double>(d);
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += a[r * d + c];
    out[r] = s * inv;
  }
  return emit("mean_last_axis", std::move(shape), std::move(out), {&a},
              [rows, d, inv](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (!gi[0]) return;
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t c = 0; c < d; ++c) (*gi[0])[r * d + c] += g[r] * inv;
              });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank("gather_rows", a, 2);
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " out of range for " +
                           shape_str(a.shape()));
    }
    std::copy_n(a.data().data() + idx[i] * d, d, out.data() + i * d);
  }
  const std::size_t m = idx.size();
  return emit("gather_rows", {m, d}, std::move(out), {&a},
              [idx = std::move(idx), d](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (!gi[0]) return;
                for (std::size_t i = 0; i < idx.size(); ++i)
                  for (std::size_t c = 0; c < d; ++c) (*gi[0])[idx[i] * d + c] += g[i * d + c];
              });
}

namespace {

// Concatenation records one node per call; inputs may sit on the tape or not.
Tensor concat_impl(std::span<const Tensor> parts, bool along_rows) {
  const char* op = along_rows ? "concat_rows" : "concat_cols";
  if (parts.empty()) throw ContractError(std::string(op) + ": no inputs");
  for (const Tensor& p : parts) require_rank(op, p, 2);
  std::size_t rows = 0, cols = 0;
  if (along_rows) {
    cols = parts[0].dim(1);
    for (const Tensor& p : parts) {
      if (p.dim(1) != cols) dim_error(op, parts[0].shape(), p.shape());
      rows += p.dim(0);
    }
  } else {
    rows = parts[0].dim(0);
    for (const Tensor& p : parts) {
      if (p.dim(0) != rows) dim_error(op, parts[0].shape(), p.shape());
      cols += p.dim(1);
    }
  }
  std::vector<double> out(rows * cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t pr = p.dim(0), pc = p.dim(1);
    for (std::size_t r = 0; r < pr; ++r) {
      const std::size_t dst = along_rows ? (off + r) * cols : r * cols + off;
      std::copy_n(p.data().data() + r * pc, pc, out.data() + dst);
    }
    off += along_rows ? pr : pc;
  }

  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    if (!p.on_tape()) continue;
    if (tape != nullptr && tape != p.tape()) throw ContractError(std::string(op) + ": inputs on different tapes");
    tape = p.tape();
  }
  if (tape == nullptr) return Tensor({rows, cols}, std::move(out));

  std::vector<Shape> shapes;
  std::vector<const Tensor*> ins;
  for (const Tensor& p : parts) {
    shapes.push_back(p.shape());
    ins.push_back(&p);
  }
  auto fn = [shapes, offsets, cols, along_rows](std::span<const double> g,
                                               std::span<std::vector<double>*> gi) {
    for (std::size_t k = 0; k < gi.size(); ++k) {
      if (!gi[k]) continue;
      const std::size_t pr = shapes[k][0], pc = shapes[k][1];
      for (std::size_t r = 0; r < pr; ++r) {
        const std::size_t src = along_rows ? (offsets[k] + r) * cols : r * cols + offsets[k];
        for (std::size_t c = 0; c < pc; ++c) (*gi[k])[r * pc + c] += g[src + c];
      }
    }
  };
  return tape->record(op, {rows, cols}, std::move(out), ins, std::move(fn));
}

}  // namespace

Tensor concat_rows(std::span<const Tensor> parts) { return concat_impl(parts, true); }
Tensor concat_cols(std::span<const Tensor> parts) { return concat_impl(parts, false); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) dim_error("reshape", a.shape(), shape);
  if (!a.on_tape()) {
    return Tensor(std::move(shape), a.values(), a.requires_grad());
  }
  return emit("reshape", std::move(shape), a.values(), {&a},
              [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
              });
}

// ---------------------------------------------------------------------------
// Nonlinearities

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("softmax_rows: scalar input");
  require_finite("softmax_rows", a);
  const std::size_t d = last_dim(a);
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * d;
    double* y = out.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      y[c] = std::exp(x[c] - mx);
      s += y[c];
    }
    for (std::size_t c = 0; c < d; ++c) y[c] /= s;
  }
  Tensor value_holder({a.numel()}, out);
  return emit("softmax_rows", a.shape(), std::move(out), {&a},
              [y = value_holder, rows, d](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (!gi[0]) return;
                for (std::size_t r = 0; r < rows; ++r) {
                  double dot = 0.0;
                  for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
                  for (std::size_t c = 0; c < d; ++c)
                    (*gi[0])[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
                }
              });
}

Tensor log_softmax_rows(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("log_softmax_rows: scalar input");
  require_finite("log_softmax_rows", a);
  const std::size_t d = last_dim(a);
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += std::exp(x[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x[c] - lse;
  }
  Tensor value_holder({a.numel()}, out);
  return emit("log_softmax_rows", a.shape(), std::move(out), {&a},
              [y = value_holder, rows, d](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (!gi[0]) return;
                for (std::size_t r = 0; r < rows; ++r) {
                  double gs = 0.0;
                  for (std::size_t c = 0; c < d; ++c) gs += g[r * d + c];
                  for (std::size_t c = 0; c < d; ++c)
                    (*gi[0])[r * d + c] += g[r * d + c] - std::exp(y[r * d + c]) * gs;
                }
              });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  if (a.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = last_dim(a);
  if (gain.rank() != 1 || gain.dim(0) != d) dim_error("layer_norm gain", a.shape(), gain.shape());
  if (bias.rank() != 1 || bias.dim(0) != d) dim_error("layer_norm bias", a.shape(), bias.shape());
  const std::size_t rows = a.numel() / d;
  std::vector<double> xhat(a.numel());
  std::vector<double> inv_std(rows);
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += x[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (x[c] - mu) * (x[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (x[c] - mu) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = gain[c] * h + bias[c];
    }
  }
  return emit("layer_norm", a.shape(), std::move(out), {&a, &gain, &bias},
              [xhat = std::move(xhat), inv_std = std::move(inv_std), gain, rows, d](
                  std::span<const double> g, std::span<std::vector<double>*> gi) {
                const double invd = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                  const double* gr = g.data() + r * d;
                  const double* hr = xhat.data() + r * d;
                  if (gi[0]) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                      const double dh = gr[c] * gain[c];
                      m1 += dh;
                      m2 += dh * hr[c];
                    }
                    m1 *= invd;
                    m2 *= invd;
                    for (std::size_t c = 0; c < d; ++c) {
                      const double dh = gr[c] * gain[c];
                      (*gi[0])[r * d + c] += inv_std[r] * (dh - m1 - hr[c] * m2);
                    }
                  }
                  if (gi[1]) for (std::size_t c = 0; c < d; ++c) (*gi[1])[c] += gr[c] * hr[c];
                  if (gi[2]) for (std::size_t c = 0; c < d; ++c) (*gi[2])[c] += gr[c];
                }
              });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * a[i] * (1.0 + std::erf(a[i] * inv_sqrt2));
  return emit("gelu", a.shape(), std::move(out), {&a},
              [a, inv_sqrt_2pi](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (!gi[0]) return;
                for (std::size_t i = 0; i < g.size(); ++i) {
                  const double x = a[i];
                  const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                  const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                  (*gi[0])[i] += g[i] * (cdf + x * pdf);
                }
              });
}

// ---------------------------------------------------------------------------
// Reductions and losses

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return emit("sum", {}, {s}, {&a}, [](std::span<const double> g, std::span<std::vector<double>*> gi) {
    if (gi[0]) for (double& v : *gi[0]) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  return emit("mean", {}, {s * inv}, {&a},
              [inv](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (gi[0]) for (double& v : *gi[0]) v += g[0] * inv;
              });
}

Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  require_rank("pairwise_sqdist", a, 2);
  require_rank("pairwise_sqdist", b, 2);
  const std::size_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) dim_error("pairwise_sqdist", a.shape(), b.shape());
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = a[i * d + c] - b[j * d + c];
        s += diff * diff;
      }
      out[i * n + j] = s;
    }
  return emit("pairwise_sqdist", {m, n}, std::move(out), {&a, &b},
              [a, b, m, n, d](std::span<const double> g, std::span<std::vector<double>*> gi) {
                for (std::size_t i = 0; i < m; ++i)
                  for (std::size_t j = 0; j < n; ++j) {
                    const double w = 2.0 * g[i * n + j];
                    if (w == 0.0) continue;
                    for (std::size_t c = 0; c < d; ++c) {
                      const double diff = a[i * d + c] - b[j * d + c];
                      if (gi[0]) (*gi[0])[i * d + c] += w * diff;
                      if (gi[1]) (*gi[1])[j * d + c] -= w * diff;
                    }
                  }
              });
}

namespace {

void validate_targets(std::string_view op, const Tensor& pred, const Tensor& targets) {
  require_rank(op, pred, 2);
  require_same_shape(op, pred, targets);
  const std::size_t rows = targets.dim(0), c = targets.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double y = targets[r * c + k];
      if (!(y >= -1e-12)) {
        throw ValidationError(std::string(op) + ": target row " + std::to_string(r) + " has a negative entry");
      }
      s += y;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw ValidationError(std::string(op) + ": target row " + std::to_string(r) + " sums to " +
                            std::to_string(s) + ", not a distribution");
    }
  }
}

constexpr double kProbFloor = 1e-300;

}  // namespace

Tensor cross_entropy(const Tensor& probs, const Tensor& targets) {
  validate_targets("cross_entropy", probs, targets);
  const std::size_t rows = probs.dim(0), c = probs.dim(1);
  double loss = 0.0;
  for (std::size_t i = 0; i < rows * c; ++i) {
    if (targets[i] != 0.0) loss -= targets[i] * std::log(std::max(probs[i], kProbFloor));
  }
  loss /= static_cast<double>(rows);
  return emit("cross_entropy", {}, {loss}, {&probs},
              [probs, targets, rows](std::span<const double> g, std::span<std::vector<double>*> gi) {
                if (!gi[0]) return;
                const double s = g[0] / static_cast<double>(rows);
                for (std::size_t i = 0; i < probs.numel(); ++i) {
                  if (targets[i] != 0.0) (*gi[0])[i] -= s * targets[i] / std::max(probs[i], kProbFloor);
                }
              });
}

Tensor cross_entropy_logits(const Tensor& logits, const Tensor& targets) {
  validate_targets("cross_entropy_logits", logits, targets);
  require_finite("cross_entropy_logits", logits);
  const std::size_t rows = logits.dim(0), c = logits.dim(1);
  std::vector<double> probs(rows * c);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.data().data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(x[k] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < c; ++k) {
      probs[r * c + k] = std::exp(x[k] - lse);
      const double y = targets[r * c + k];
      if (y != 0.0) loss -= y * (x[k] - lse);
    }
  }
  loss /= static_cast<double>(rows);
  return emit("cross_entropy_logits", {}, {loss}, {&logits},
              [probs = std::move(probs), targets, rows, c](std::span<const double> g,
                                                          std::span<std::vector<double>*> gi) {
                if (!gi[0]) return;
                const double s = g[0] / static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r) {
                  double ysum = 0.0;
                  for (std::size_t k = 0; k < c; ++k) ysum += targets[r * c + k];
                  for (std::size_t k = 0; k < c; ++k)
                    (*gi[0])[r * c + k] += s * (probs[r * c + k] * ysum - targets[r * c + k]);
                }
              });
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  std::vector<double> base = x.values();
  std::vector<double> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor(x.shape(), std::move(plus), x.requires_grad()));
    const double fm = f(Tensor(x.shape(), std::move(minus), x.requires_grad()));
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(grad));
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    na = std::max(na, std::abs(a[i]));
    nb = std::max(nb, std::abs(b[i]));
  }
  return diff / std::max({na, nb, 1e-8});
}

}  // namespace mifomo
