#pragma once

// Helpers for implementing differentiable operations. Not part of the user
// facing surface; op implementations include this next to tensor.hpp.

#include "vaqat/tensor.hpp"

#include <functional>
#include <span>

namespace vaqat::detail {

bool should_record(std::span<const Tensor> inputs);

// Wraps `value` in a tensor and, when any input needs a gradient and a tape
// is active, records `backward_rule` against it.
Tensor record(Matrix value, std::span<const Tensor> inputs,
              std::function<void(const Matrix&)> backward_rule, const char* what);

inline Tensor record(Matrix value, std::initializer_list<Tensor> inputs,
                     std::function<void(const Matrix&)> backward_rule, const char* what) {
  return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                std::move(backward_rule), what);
}

// Accumulates g into t's gradient if t participates in differentiation.
void push_grad(const Tensor& t, const Matrix& g);

}  // namespace vaqat::detail
