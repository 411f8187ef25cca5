#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vaqat {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Shape {
  Index rows = 0;
  Index cols = 0;
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;

  void accumulate(const Matrix& g);
};

}  // namespace detail

/// Dense row-major 2-D array of doubles with an optional gradient slot.
///
/// Tensors are cheap handles: copies share storage, which is what lets the
/// tape write gradients back into parameters owned elsewhere. Scalars are
/// 1x1, vectors are 1xN. Every batch in this project is laid out as stacked
/// rows, so two dimensions cover all the shapes the transformer needs.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  Shape shape() const { return {rows(), cols()}; }

  const Matrix& value() const { return node_->value; }
  // Direct write access for optimizers and checkpoint loading. Must not be
  // used on a tensor that is referenced by a live tape entry.
  Matrix& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() != 0; }
  // Zero-filled when nothing has been accumulated yet.
  Matrix grad() const;
  Matrix& mutable_grad();
  void zero_grad() { node_->grad.resize(0, 0); }

  double item() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// One recorded operation: which nodes went in, which came out, and how to
/// push the output gradient back to the inputs.
struct TapeEntry {
  std::vector<std::shared_ptr<detail::Node>> inputs;
  std::shared_ptr<detail::Node> output;
  std::function<void(const Matrix& upstream)> backward;
};

/// Ordered record of differentiable operations.
///
/// Operations record themselves into the tape that is active on the calling
/// thread (see TapeScope). With no active tape, operations only compute
/// values, which is how evaluation and teacher inference run.
class Tape {
 public:
  void record(TapeEntry entry);
  /// Seeds d(loss)/d(loss) = 1 and replays entries in reverse order.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<TapeEntry> entries_;
};

Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Runs backward on the active tape. Throws if none is active or the loss is
/// not a scalar.
void backward(const Tensor& loss);

void check_finite(const Matrix& m, const char* what);

using ForwardFn = std::function<Matrix(std::span<const Matrix> inputs)>;
// Receives the forward inputs, the forward output and d(loss)/d(output);
// returns one gradient per input, each shaped like that input.
using BackwardFn = std::function<std::vector<Matrix>(
    std::span<const Matrix> inputs, const Matrix& output, const Matrix& upstream)>;

/// A differentiable operation whose backward rule is supplied verbatim.
/// The forward function is never differentiated through, so it may contain
/// rounding, clipping or anything else with a useless true derivative.
class CustomOp {
 public:
  CustomOp(ForwardFn forward, BackwardFn backward);
  Tensor operator()(std::span<const Tensor> inputs) const;
  Tensor operator()(std::initializer_list<Tensor> inputs) const;

 private:
  ForwardFn forward_;
  BackwardFn backward_;
};

CustomOp register_custom_gradient(ForwardFn forward, BackwardFn backward);

}  // namespace vaqat
