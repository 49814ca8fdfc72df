#pragma once

// Dense 64-bit tensors and the define-by-run tape that records operations
// for reverse-mode differentiation.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lgpt/errors.hpp"

namespace lgpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tape;

/// Storage behind a Tensor handle.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::optional<std::size_t> tape_id;
  const Tape* tape = nullptr;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

/// Shared handle to a dense row-major tensor. Copies alias the same storage;
/// use clone() for a deep copy. Rank 0 is a scalar, rank 1 is treated as a
/// single row wherever a matrix is expected.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : node_(std::make_shared<TensorNode>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values)
      : node_(std::make_shared<TensorNode>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor(Shape{rows, cols});
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }
  static Tensor row(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(Shape{1, n}, std::move(values));
  }
  static Tensor vector(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::size_t rows() const {
    const auto& s = node_->shape;
    return s.size() == 2 ? s[0] : 1;
  }
  std::size_t cols() const {
    const auto& s = node_->shape;
    if (s.empty()) return 1;
    return s.back();
  }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->data[r * cols() + c];
  }
  double item() const {
    if (numel() != 1) {
      throw DimensionError("item: tensor " + shape_str(shape()) + " is not a scalar");
    }
    return node_->data[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; all zeros when nothing has been accumulated.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
  }
  std::span<const double> grad_view() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(numel(), 0.0); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  std::optional<std::size_t> tape_id() const { return node_->tape_id; }

  /// Deep copy of the values, detached from any tape.
  Tensor clone() const { return Tensor(shape(), node_->data); }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

enum class OpKind {
  matmul,
  matmul_nt,
  add,
  add_row,
  mul,
  scale,
  sum,
  mean_rows,
  gelu,
  softmax_rows,
  layer_norm,
  concat_rows,
  slice_rows,
  gather_rows,
  transpose,
  cross_entropy_masked,
  graph_attention,
  causal_attention,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::matmul: return "matmul";
    case OpKind::matmul_nt: return "matmul_nt";
    case OpKind::add: return "add";
    case OpKind::add_row: return "add_row";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::mean_rows: return "mean_rows";
    case OpKind::gelu: return "gelu";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::transpose: return "transpose";
    case OpKind::cross_entropy_masked: return "cross_entropy_masked";
    case OpKind::graph_attention: return "graph_attention";
    case OpKind::causal_attention: return "causal_attention";
  }
  return "?";
}

/// One recorded operation. Intermediates needed by the backward rule are
/// captured inside `backward`.
struct TapeRecord {
  OpKind kind;
  std::vector<std::optional<std::size_t>> input_ids;  // nullopt for leaves
  std::size_t output_id;
  std::shared_ptr<TensorNode> output;
  std::function<void()> backward;
};

/// Append-only operation log. Backward walks it once in reverse order, so
/// gradient accumulation order is fixed by the forward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const std::vector<TapeRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  void record(OpKind kind, std::initializer_list<const Tensor*> inputs,
              Tensor& output, std::function<void()> backward) {
    record(kind, std::vector<const Tensor*>(inputs), output, std::move(backward));
  }

  void record(OpKind kind, const std::vector<const Tensor*>& inputs,
              Tensor& output, std::function<void()> backward) {
    TapeRecord rec;
    rec.kind = kind;
    rec.input_ids.reserve(inputs.size());
    for (const Tensor* t : inputs) {
      rec.input_ids.push_back(t->node()->tape == this ? t->tape_id() : std::nullopt);
    }
    rec.output_id = records_.size();
    rec.output = output.node();
    rec.backward = std::move(backward);
    output.node()->requires_grad = true;
    output.node()->tape_id = rec.output_id;
    output.node()->tape = this;
    records_.push_back(std::move(rec));
  }

  void backward(const Tensor& loss) const {
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be a scalar, got " +
                          shape_str(loss.shape()));
    }
    const auto id = loss.tape_id();
    if (!id || loss.node()->tape != this || *id >= records_.size() ||
        records_[*id].output != loss.node()) {
      throw ContractError("backward: loss was not produced on this tape");
    }
    loss.node()->grad_buffer()[0] += 1.0;
    for (std::size_t i = *id + 1; i-- > 0;) {
      const auto& rec = records_[i];
      if (rec.output->grad.empty()) continue;
      rec.backward();
    }
  }

  void clear() { records_.clear(); }

 private:
  std::vector<TapeRecord> records_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Tape to record on, or nullptr when nothing needs a gradient.
inline Tape* recording_tape(std::initializer_list<const Tensor*> ts) {
  if (active_tape == nullptr) return nullptr;
  return any_requires_grad(ts) ? active_tape : nullptr;
}

/// Gradient sink for an input, or nullptr if it does not require one.
inline double* grad_sink(const std::shared_ptr<TensorNode>& n) {
  return n->requires_grad ? n->grad_buffer() : nullptr;
}

inline void check_finite(const Tensor& t, const char* where) {
#ifndef NDEBUG
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(where) + ": non-finite value in output");
    }
  }
#else
  (void)t;
  (void)where;
#endif
}
}  // namespace detail

/// Makes `tape` the recording tape for the current thread while in scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape) {
    detail::active_tape = &tape;
  }
  ~TapeScope() { detail::active_tape = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording for the current thread while in scope.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradScope() { detail::active_tape = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

inline Tape* active_tape() { return detail::active_tape; }

/// Reverse pass from a scalar loss recorded on the active tape.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        shape_str(loss.shape()));
  }
  const Tape* tape = loss.node()->tape;
  if (tape == nullptr) {
    throw ContractError("backward: loss was not produced on a tape");
  }
  tape->backward(loss);
}

using Rng = std::mt19937_64;

inline void fill_uniform(Tensor& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.mutable_data()) v = dist(rng);
}

inline void fill_normal(Tensor& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.mutable_data()) v = dist(rng);
}

}  // namespace lgpt
