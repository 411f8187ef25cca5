#include "vaqat/tensor.hpp"

#include "vaqat/errors.hpp"
#include "vaqat/tensor_record.hpp"

#include <sstream>
#include <utility>

namespace vaqat {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[' << shape.rows << 'x' << shape.cols << ']';
  return os.str();
}

void detail::Node::accumulate(const Matrix& g) {
  if (g.rows() != value.rows() || g.cols() != value.cols()) {
    throw DimensionError("gradient shape " + to_string({g.rows(), g.cols()}) +
                         " does not match value shape " +
                         to_string({value.rows(), value.cols()}));
  }
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m), requires_grad);
}

Matrix Tensor::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

Matrix& Tensor::mutable_grad() {
  if (node_->grad.size() == 0) node_->grad = Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on non-scalar tensor " + to_string(shape()));
  }
  return node_->value(0, 0);
}

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NonFiniteError(std::string("non-finite values in ") + what);
}

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::record(TapeEntry entry) { entries_.push_back(std::move(entry)); }

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + to_string(loss.shape()));
  }
  check_finite(loss.value(), "loss");
  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const auto& out = it->output;
    if (out->grad.size() == 0) continue;
    check_finite(out->grad, "gradient");
    it->backward(out->grad);
  }
}

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) throw Error("backward() called with no active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------

bool detail::should_record(std::span<const Tensor> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

Tensor detail::record(Matrix value, std::span<const Tensor> inputs,
                      std::function<void(const Matrix&)> backward_rule, const char* what) {
  check_finite(value, what);
  const bool rec = should_record(inputs);
  Tensor out(std::move(value), rec);
  if (rec) {
    TapeEntry entry;
    entry.inputs.reserve(inputs.size());
    for (const auto& t : inputs) entry.inputs.push_back(t.node());
    entry.output = out.node();
    entry.backward = std::move(backward_rule);
    g_active_tape->record(std::move(entry));
  }
  return out;
}

void detail::push_grad(const Tensor& t, const Matrix& g) {
  if (t.requires_grad()) t.node()->accumulate(g);
}

// ---------------------------------------------------------------------------

CustomOp::CustomOp(ForwardFn forward, BackwardFn backward)
    : forward_(std::move(forward)), backward_(std::move(backward)) {}

Tensor CustomOp::operator()(std::initializer_list<Tensor> inputs) const {
  return (*this)(std::span<const Tensor>(inputs.begin(), inputs.size()));
}

Tensor CustomOp::operator()(std::span<const Tensor> inputs) const {
  std::vector<Matrix> values;
  values.reserve(inputs.size());
  for (const auto& t : inputs) values.push_back(t.value());
  Matrix out = forward_(values);
  std::vector<Tensor> held(inputs.begin(), inputs.end());
  auto out_value = std::make_shared<Matrix>(out);
  auto rule = [held, values = std::move(values), out_value,
               bw = backward_](const Matrix& upstream) {
    std::vector<Matrix> grads = bw(values, *out_value, upstream);
    if (grads.size() != held.size()) {
      throw DimensionError("custom backward returned " + std::to_string(grads.size()) +
                           " gradients for " + std::to_string(held.size()) + " inputs");
    }
    for (std::size_t i = 0; i < held.size(); ++i) {
      if (grads[i].rows() != held[i].rows() || grads[i].cols() != held[i].cols()) {
        throw DimensionError("custom backward gradient " + std::to_string(i) + " has shape " +
                             to_string({grads[i].rows(), grads[i].cols()}) + ", input is " +
                             to_string(held[i].shape()));
      }
      detail::push_grad(held[i], grads[i]);
    }
  };
  return detail::record(std::move(out), inputs, std::move(rule), "custom op output");
}

CustomOp register_custom_gradient(ForwardFn forward, BackwardFn backward) {
  return CustomOp(std::move(forward), std::move(backward));
}

}  // namespace vaqat
