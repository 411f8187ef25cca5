#include "vaqat/ops.hpp"

#include "vaqat/errors.hpp"
#include "vaqat/tensor_record.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace vaqat {
namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                         " vs " + to_string(b.shape()));
  }
}

void require_blocks(const Tensor& x, Index block_rows, const char* op) {
  if (block_rows <= 0 || x.rows() % block_rows != 0) {
    throw DimensionError(std::string(op) + ": " + std::to_string(x.rows()) +
                         " rows do not split into blocks of " + std::to_string(block_rows));
  }
}

Matrix log_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    const double lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Matrix out = a.value() * b.value();
  return detail::record(
      std::move(out), {a, b},
      [a, b](const Matrix& g) {
        if (a.requires_grad()) detail::push_grad(a, g * b.value().transpose());
        if (b.requires_grad()) detail::push_grad(b, a.value().transpose() * g);
      },
      "matmul");
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return detail::record(
      std::move(out), {a}, [a](const Matrix& g) { detail::push_grad(a, g.transpose()); },
      "transpose");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return detail::record(
      a.value() + b.value(), {a, b},
      [a, b](const Matrix& g) {
        detail::push_grad(a, g);
        detail::push_grad(b, g);
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return detail::record(
      a.value() - b.value(), {a, b},
      [a, b](const Matrix& g) {
        detail::push_grad(a, g);
        detail::push_grad(b, -g);
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return detail::record(
      std::move(out), {a, b},
      [a, b](const Matrix& g) {
        if (a.requires_grad()) detail::push_grad(a, g.cwiseProduct(b.value()));
        if (b.requires_grad()) detail::push_grad(b, g.cwiseProduct(a.value()));
      },
      "mul");
}

Tensor scale(const Tensor& a, double factor) {
  return detail::record(
      a.value() * factor, {a}, [a, factor](const Matrix& g) { detail::push_grad(a, g * factor); },
      "scale");
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: row " + to_string(row.shape()) + " does not fit " +
                         to_string(a.shape()));
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return detail::record(
      std::move(out), {a, row},
      [a, row](const Matrix& g) {
        detail::push_grad(a, g);
        if (row.requires_grad()) detail::push_grad(row, g.colwise().sum());
      },
      "add_row");
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::record(
      std::move(out), {a},
      [a](const Matrix& g) { detail::push_grad(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0))); },
      "sum");
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor softmax_rows(const Tensor& x) {
  Matrix y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    auto e = (x.value().row(r).array() - x.value().row(r).maxCoeff()).exp();
    y.row(r) = e / e.sum();
  }
  auto y_held = std::make_shared<Matrix>(y);
  return detail::record(
      std::move(y), {x},
      [x, y_held](const Matrix& g) {
        const Matrix& yv = *y_held;
        Eigen::VectorXd dot = g.cwiseProduct(yv).rowwise().sum();
        Matrix dx = yv.cwiseProduct(g - dot.replicate(1, g.cols()));
        detail::push_grad(x, dx);
      },
      "softmax_rows");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Index d = x.cols();
  if (d < 1) throw DimensionError("layer_norm: empty feature dimension");
  if (gamma.shape() != Shape{1, d} || beta.shape() != Shape{1, d}) {
    throw DimensionError("layer_norm: affine parameters must be 1x" + std::to_string(d));
  }
  const Index n = x.rows();
  auto xhat = std::make_shared<Matrix>(n, d);
  auto inv_std = std::make_shared<Eigen::VectorXd>(n);
  for (Index r = 0; r < n; ++r) {
    const double mu = x.value().row(r).mean();
    const double var = (x.value().row(r).array() - mu).square().mean();
    const double sd = std::sqrt(var + eps);
    const double is = sd > 0.0 ? 1.0 / sd : 0.0;
    (*inv_std)(r) = is;
    xhat->row(r) = (x.value().row(r).array() - mu) * is;
  }
  Matrix out = (xhat->array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return detail::record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, d](const Matrix& g) {
        if (gamma.requires_grad()) {
          detail::push_grad(gamma, g.cwiseProduct(*xhat).colwise().sum());
        }
        if (beta.requires_grad()) detail::push_grad(beta, g.colwise().sum());
        if (x.requires_grad()) {
          Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
          Matrix dx(g.rows(), d);
          for (Index r = 0; r < g.rows(); ++r) {
            const double m1 = dxhat.row(r).mean();
            const double m2 = dxhat.row(r).dot(xhat->row(r)) / static_cast<double>(d);
            dx.row(r) = (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2) * (*inv_std)(r);
          }
          detail::push_grad(x, dx);
        }
      },
      "layer_norm");
}

Tensor gelu(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix cdf = v.unaryExpr([](double t) { return 0.5 * std::erfc(-t / std::numbers::sqrt2); });
  Matrix out = v.cwiseProduct(cdf);
  auto cdf_held = std::make_shared<Matrix>(std::move(cdf));
  return detail::record(
      std::move(out), {x},
      [x, cdf_held](const Matrix& g) {
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        Matrix pdf = x.value().unaryExpr(
            [inv_sqrt_2pi](double t) { return inv_sqrt_2pi * std::exp(-0.5 * t * t); });
        Matrix local = *cdf_held + x.value().cwiseProduct(pdf);
        detail::push_grad(x, g.cwiseProduct(local));
      },
      "gelu");
}

Tensor soft_cross_entropy(const Tensor& student_logits, const Tensor& teacher_probs) {
  require_same_shape(student_logits, teacher_probs, "soft_cross_entropy");
  const Matrix& pt = teacher_probs.value();
  for (Index r = 0; r < pt.rows(); ++r) {
    if ((pt.row(r).array() < 0.0).any() || std::abs(pt.row(r).sum() - 1.0) > 1e-6) {
      throw ValidationError("soft_cross_entropy: teacher row " + std::to_string(r) +
                            " is not a probability distribution");
    }
  }
  const Index n = student_logits.rows();
  if (n == 0) throw DimensionError("soft_cross_entropy: empty batch");
  Matrix logp = log_softmax(student_logits.value());
  Matrix out(1, 1);
  out(0, 0) = -(pt.cwiseProduct(logp)).sum() / static_cast<double>(n);
  auto logp_held = std::make_shared<Matrix>(std::move(logp));
  return detail::record(
      std::move(out), {student_logits, teacher_probs},
      [student_logits, teacher_probs, logp_held, n](const Matrix& g) {
        const Matrix& ptv = teacher_probs.value();
        if (student_logits.requires_grad()) {
          Matrix ps = logp_held->array().exp();
          Eigen::VectorXd mass = ptv.rowwise().sum();
          Matrix d = ps.cwiseProduct(mass.replicate(1, ps.cols())) - ptv;
          detail::push_grad(student_logits, d * (g(0, 0) / static_cast<double>(n)));
        }
        if (teacher_probs.requires_grad()) {
          detail::push_grad(teacher_probs, *logp_held * (-g(0, 0) / static_cast<double>(n)));
        }
      },
      "soft_cross_entropy");
}

Tensor hard_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) {
    throw DimensionError("hard_cross_entropy: label count does not match batch rows");
  }
  Matrix onehot = Matrix::Zero(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols()) throw ValidationError("hard_cross_entropy: label out of range");
    onehot(r, y) = 1.0;
  }
  return soft_cross_entropy(logits, Tensor(std::move(onehot)));
}

// ---------------------------------------------------------------------------

Tensor block_matmul_nt(const Tensor& a, const Tensor& b, Index block_rows) {
  require_same_shape(a, b, "block_matmul_nt");
  require_blocks(a, block_rows, "block_matmul_nt");
  const Index blocks = a.rows() / block_rows;
  Matrix out(a.rows(), block_rows);
  for (Index k = 0; k < blocks; ++k) {
    out.middleRows(k * block_rows, block_rows).noalias() =
        a.value().middleRows(k * block_rows, block_rows) *
        b.value().middleRows(k * block_rows, block_rows).transpose();
  }
  return detail::record(
      std::move(out), {a, b},
      [a, b, block_rows, blocks](const Matrix& g) {
        Matrix da(a.rows(), a.cols());
        Matrix db(b.rows(), b.cols());
        for (Index k = 0; k < blocks; ++k) {
          auto gk = g.middleRows(k * block_rows, block_rows);
          da.middleRows(k * block_rows, block_rows).noalias() =
              gk * b.value().middleRows(k * block_rows, block_rows);
          db.middleRows(k * block_rows, block_rows).noalias() =
              gk.transpose() * a.value().middleRows(k * block_rows, block_rows);
        }
        detail::push_grad(a, da);
        detail::push_grad(b, db);
      },
      "block_matmul_nt");
}

Tensor block_matmul(const Tensor& p, const Tensor& v, Index block_rows) {
  require_blocks(p, block_rows, "block_matmul");
  if (p.cols() != block_rows || v.rows() != p.rows()) {
    throw DimensionError("block_matmul: " + to_string(p.shape()) + " and " +
                         to_string(v.shape()) + " do not form blocks of " +
                         std::to_string(block_rows));
  }
  const Index blocks = p.rows() / block_rows;
  Matrix out(v.rows(), v.cols());
  for (Index k = 0; k < blocks; ++k) {
    out.middleRows(k * block_rows, block_rows).noalias() =
        p.value().middleRows(k * block_rows, block_rows) *
        v.value().middleRows(k * block_rows, block_rows);
  }
  return detail::record(
      std::move(out), {p, v},
      [p, v, block_rows, blocks](const Matrix& g) {
        Matrix dp(p.rows(), p.cols());
        Matrix dv(v.rows(), v.cols());
        for (Index k = 0; k < blocks; ++k) {
          auto gk = g.middleRows(k * block_rows, block_rows);
          dp.middleRows(k * block_rows, block_rows).noalias() =
              gk * v.value().middleRows(k * block_rows, block_rows).transpose();
          dv.middleRows(k * block_rows, block_rows).noalias() =
              p.value().middleRows(k * block_rows, block_rows).transpose() * gk;
        }
        detail::push_grad(p, dp);
        detail::push_grad(v, dv);
      },
      "block_matmul");
}

Tensor mean_pool_blocks(const Tensor& x, Index block_rows) {
  require_blocks(x, block_rows, "mean_pool_blocks");
  const Index blocks = x.rows() / block_rows;
  Matrix out(blocks, x.cols());
  for (Index k = 0; k < blocks; ++k) {
    out.row(k) = x.value().middleRows(k * block_rows, block_rows).colwise().mean();
  }
  return detail::record(
      std::move(out), {x},
      [x, block_rows, blocks](const Matrix& g) {
        Matrix dx(x.rows(), x.cols());
        const double inv = 1.0 / static_cast<double>(block_rows);
        for (Index k = 0; k < blocks; ++k) {
          dx.middleRows(k * block_rows, block_rows).rowwise() = g.row(k) * inv;
        }
        detail::push_grad(x, dx);
      },
      "mean_pool_blocks");
}

Tensor add_blocks(const Tensor& x, const Tensor& p) {
  require_blocks(x, p.rows(), "add_blocks");
  if (p.cols() != x.cols()) throw DimensionError("add_blocks: column mismatch");
  const Index n = p.rows();
  const Index blocks = x.rows() / n;
  Matrix out = x.value();
  for (Index k = 0; k < blocks; ++k) out.middleRows(k * n, n) += p.value();
  return detail::record(
      std::move(out), {x, p},
      [x, p, n, blocks](const Matrix& g) {
        detail::push_grad(x, g);
        if (p.requires_grad()) {
          Matrix dp = Matrix::Zero(n, p.cols());
          for (Index k = 0; k < blocks; ++k) dp += g.middleRows(k * n, n);
          detail::push_grad(p, dp);
        }
      },
      "add_blocks");
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  const Index rows = static_cast<Index>(ids.size());
  Matrix out(rows, table.cols());
  for (Index r = 0; r < rows; ++r) {
    const int id = ids[static_cast<std::size_t>(r)];
    if (id < 0 || id >= table.rows()) {
      throw ValidationError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(table.rows()));
    }
    out.row(r) = table.value().row(id);
  }
  std::vector<int> held(ids.begin(), ids.end());
  return detail::record(
      std::move(out), {table},
      [table, held = std::move(held)](const Matrix& g) {
        Matrix dt = Matrix::Zero(table.rows(), table.cols());
        for (std::size_t r = 0; r < held.size(); ++r) dt.row(held[r]) += g.row(static_cast<Index>(r));
        detail::push_grad(table, dt);
      },
      "embedding");
}

}  // namespace vaqat
