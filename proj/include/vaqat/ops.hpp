#pragma once

#include "vaqat/tensor.hpp"

#include <span>

namespace vaqat {

// Elementary differentiable operations. Shapes are checked explicitly; the
// only broadcasting is the row/bias and positional cases named below.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a[r, :] + row for every r; row is 1xC.
Tensor add_row(const Tensor& a, const Tensor& row);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& x);

/// Normalizes each row to zero mean and unit population variance, then
/// applies gamma/beta (both 1xD). A zero-variance row normalizes to zero.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& x);

/// -(1/N) sum_i sum_c p_teacher[i,c] * log softmax(student)[i,c].
/// Throws ValidationError when a teacher row is not a distribution.
Tensor soft_cross_entropy(const Tensor& student_logits, const Tensor& teacher_probs);

/// Cross-entropy against integer class labels, averaged over rows.
Tensor hard_cross_entropy(const Tensor& logits, std::span<const int> labels);

// --- sequence-batched helpers ----------------------------------------------
// A batch of B sequences of length n is stored as a (B*n) x D matrix, one
// block of n consecutive rows per sequence.

/// Per block: A_b * B_b^T. (B*n)xK, (B*n)xK -> (B*n)xn.
Tensor block_matmul_nt(const Tensor& a, const Tensor& b, Index block_rows);
/// Per block: P_b * V_b. (B*n)xn, (B*n)xK -> (B*n)xK.
Tensor block_matmul(const Tensor& p, const Tensor& v, Index block_rows);
/// Mean over the rows of each block. (B*n)xD -> BxD.
Tensor mean_pool_blocks(const Tensor& x, Index block_rows);
/// x + p tiled over blocks; p is n x D.
Tensor add_blocks(const Tensor& x, const Tensor& p);
/// Gathers rows of `table` (VxD) by id.
Tensor embedding(const Tensor& table, std::span<const int> ids);

}  // namespace vaqat
