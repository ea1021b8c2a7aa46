#pragma once

// Differentiable free functions over Tensor<Scalar>.

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "melt/random.hpp"
#include "melt/tensor.hpp"

namespace melt {

namespace detail {

inline void require_same_shape(const char* op, Index ar, Index ac, Index br, Index bc) {
  if (ar != br || ac != bc) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(ar, ac) +
                         " vs " + shape_string(br, bc));
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + a.shape_str() + " x " +
                         b.shape_str());
  }
  auto* an = a.node();
  auto* bn = b.node();
  return Tensor<Scalar>::from_op(
      a.value() * b.value(), {a, b}, [an, bn](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (an->requires_grad) detail::accumulate(*an, g * bn->value.transpose());
        if (bn->requires_grad) detail::accumulate(*bn, an->value.transpose() * g);
      });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  auto* an = a.node();
  return Tensor<Scalar>::from_op(a.value().transpose(), {a},
                                 [an](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                                   detail::accumulate(*an, g.transpose());
                                 });
}

/// Elementwise sum. `b` may also be a 1 x n row broadcast over the rows of `a`.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  auto* an = a.node();
  auto* bn = b.node();
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    return Tensor<Scalar>::from_op(a.value() + b.value(), {a, b},
                                   [an, bn](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                                     detail::accumulate(*an, g);
                                     detail::accumulate(*bn, g);
                                   });
  }
  if (b.rows() == 1 && a.cols() == b.cols()) {
    Matrix<Scalar> out = a.value().rowwise() + b.value().row(0);
    return Tensor<Scalar>::from_op(std::move(out), {a, b},
                                   [an, bn](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                                     detail::accumulate(*an, g);
                                     if (bn->requires_grad) {
                                       detail::accumulate(*bn, g.colwise().sum());
                                     }
                                   });
  }
  throw DimensionError("add: cannot combine " + a.shape_str() + " and " + b.shape_str());
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("sub", a.rows(), a.cols(), b.rows(), b.cols());
  auto* an = a.node();
  auto* bn = b.node();
  return Tensor<Scalar>::from_op(a.value() - b.value(), {a, b},
                                 [an, bn](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                                   detail::accumulate(*an, g);
                                   if (bn->requires_grad) detail::accumulate(*bn, -g);
                                 });
}

/// Elementwise product.
template <typename Scalar>
Tensor<Scalar> hadamard(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("hadamard", a.rows(), a.cols(), b.rows(), b.cols());
  auto* an = a.node();
  auto* bn = b.node();
  return Tensor<Scalar>::from_op(
      a.value().cwiseProduct(b.value()), {a, b},
      [an, bn](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (an->requires_grad) detail::accumulate(*an, g.cwiseProduct(bn->value));
        if (bn->requires_grad) detail::accumulate(*bn, g.cwiseProduct(an->value));
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  auto* an = a.node();
  return Tensor<Scalar>::from_op(a.value() * factor, {a},
                                 [an, factor](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                                   detail::accumulate(*an, g * factor);
                                 });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}

template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}

template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar factor) {
  return scale(a, factor);
}

/// Exact (erf-based) GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  const Scalar inv_sqrt2 = static_cast<Scalar>(1.0 / std::numbers::sqrt2);
  Matrix<Scalar> out = x.value().unaryExpr([inv_sqrt2](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  });
  auto* xn = x.node();
  return Tensor<Scalar>::from_op(
      std::move(out), {x}, [xn, inv_sqrt2](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        const Scalar inv_sqrt_2pi = static_cast<Scalar>(0.5 * std::numbers::inv_sqrtpi *
                                                        std::numbers::sqrt2);
        Matrix<Scalar> local = xn->value.unaryExpr([&](Scalar v) {
          const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
          const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
          return cdf + v * pdf;
        });
        detail::accumulate(*xn, g.cwiseProduct(local));
      });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) {
    if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
  auto* xn = x.node();
  return Tensor<Scalar>::from_op(std::move(out), {x},
                                 [xn](const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
                                   Matrix<Scalar> local =
                                       y.cwiseProduct((Scalar(1) - y.array()).matrix());
                                   detail::accumulate(*xn, g.cwiseProduct(local));
                                 });
}

namespace detail {

// Row-wise softmax; disallowed columns (allowed[c] == false) get probability 0.
template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x, const std::vector<bool>* allowed) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    Scalar peak = -std::numeric_limits<Scalar>::infinity();
    bool any = false, finite = true;
    for (Index c = 0; c < x.cols(); ++c) {
      if (allowed && !(*allowed)[static_cast<std::size_t>(c)]) continue;
      any = true;
      finite = finite && std::isfinite(x(r, c));
      peak = std::max(peak, x(r, c));
    }
    if (!any) throw DimensionError("softmax: row has no allowed entries");
    if (!finite) throw NumericError("softmax: non-finite score");
    Scalar total = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      const bool ok = !allowed || (*allowed)[static_cast<std::size_t>(c)];
      out(r, c) = ok ? std::exp(x(r, c) - peak) : Scalar(0);
      total += out(r, c);
    }
    out.row(r) /= total;
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> softmax_rows_backward(const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
  Matrix<Scalar> dot = g.cwiseProduct(y).rowwise().sum();
  Matrix<Scalar> out = g;
  out.colwise() -= dot.col(0);
  return y.cwiseProduct(out);
}

}  // namespace detail

/// Softmax along `axis` (1: within each row, 0: within each column),
/// stabilised by subtracting the maximum.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  auto* xn = x.node();
  if (axis == 1) {
    return Tensor<Scalar>::from_op(
        detail::softmax_rows<Scalar>(x.value(), nullptr), {x},
        [xn](const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
          detail::accumulate(*xn, detail::softmax_rows_backward<Scalar>(g, y));
        });
  }
  Matrix<Scalar> xt = x.value().transpose();
  Matrix<Scalar> y = detail::softmax_rows<Scalar>(xt, nullptr).transpose();
  return Tensor<Scalar>::from_op(
      std::move(y), {x}, [xn](const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
        Matrix<Scalar> gt = g.transpose();
        Matrix<Scalar> yt = y.transpose();
        detail::accumulate(*xn, detail::softmax_rows_backward<Scalar>(gt, yt).transpose());
      });
}

/// Row-wise softmax where column c takes part only if key_allowed[c].
/// Excluded columns behave as a -infinity score.
template <typename Scalar>
Tensor<Scalar> masked_softmax(const Tensor<Scalar>& x, const std::vector<bool>& key_allowed) {
  if (static_cast<Index>(key_allowed.size()) != x.cols()) {
    throw DimensionError("masked_softmax: mask length " + std::to_string(key_allowed.size()) +
                         " for scores " + x.shape_str());
  }
  auto* xn = x.node();
  return Tensor<Scalar>::from_op(detail::softmax_rows<Scalar>(x.value(), &key_allowed), {x},
                                 [xn](const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
                                   detail::accumulate(*xn,
                                                      detail::softmax_rows_backward<Scalar>(g, y));
                                 });
}

/// Per-row normalisation to zero mean / unit (biased) variance, then gamma * x + beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
      beta.cols() != x.cols()) {
    throw DimensionError("layer_norm: gamma " + gamma.shape_str() + " / beta " +
                         beta.shape_str() + " for input " + x.shape_str());
  }
  const Index n = x.cols();
  Matrix<Scalar> xhat(x.rows(), n);
  RowVector<Scalar> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.value().row(r).mean();
    const auto centered = (x.value().row(r).array() - mean).matrix();
    const Scalar var = centered.squaredNorm() / static_cast<Scalar>(n);
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix<Scalar> out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  auto* xn = x.node();
  auto* gn = gamma.node();
  auto* bn = beta.node();
  return Tensor<Scalar>::from_op(
      std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n](
          const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (gn->requires_grad) detail::accumulate(*gn, g.cwiseProduct(xhat).colwise().sum());
        if (bn->requires_grad) detail::accumulate(*bn, g.colwise().sum());
        if (xn->requires_grad) {
          Matrix<Scalar> dxhat = g;
          dxhat.array().rowwise() *= gn->value.row(0).array();
          Matrix<Scalar> dx(g.rows(), n);
          for (Index r = 0; r < g.rows(); ++r) {
            const Scalar mean_d = dxhat.row(r).mean();
            const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) / static_cast<Scalar>(n);
            dx.row(r) = ((dxhat.row(r).array() - mean_d) - xhat.row(r).array() * mean_dx) *
                        inv_std(r);
          }
          detail::accumulate(*xn, dx);
        }
      });
}

/// Inverted dropout: zero with probability p and scale survivors by 1/(1-p).
/// Identity when !train or p == 0.
template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double p, Rng& rng, bool train) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) throw DimensionError("dropout: probability must be below 1");
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - p));
  Matrix<Scalar> mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < p ? Scalar(0) : keep_scale;
  }
  Matrix<Scalar> out = x.value().cwiseProduct(mask);
  auto* xn = x.node();
  return Tensor<Scalar>::from_op(std::move(out), {x},
                                 [xn, mask = std::move(mask)](const Matrix<Scalar>& g,
                                                              const Matrix<Scalar>&) {
                                   detail::accumulate(*xn, g.cwiseProduct(mask));
                                 });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  auto* xn = x.node();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return Tensor<Scalar>::from_op(std::move(out), {x},
                                 [xn](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                                   detail::accumulate(
                                       *xn, Matrix<Scalar>::Constant(xn->value.rows(),
                                                                     xn->value.cols(), g(0, 0)));
                                 });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

/// Mean of squared elementwise differences over all elements.
template <typename Scalar>
Tensor<Scalar> mse_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  detail::require_same_shape("mse_loss", pred.rows(), pred.cols(), target.rows(), target.cols());
  Matrix<Scalar> diff = pred.value() - target.value();
  const Scalar count = static_cast<Scalar>(diff.size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = diff.squaredNorm() / count;
  auto* pn = pred.node();
  auto* tn = target.node();
  return Tensor<Scalar>::from_op(
      std::move(out), {pred, target},
      [pn, tn, diff = std::move(diff), count](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        const Scalar factor = Scalar(2) * g(0, 0) / count;
        if (pn->requires_grad) detail::accumulate(*pn, diff * factor);
        if (tn->requires_grad) detail::accumulate(*tn, diff * (-factor));
      });
}

/// -log softmax(logits)[label] for a 1 x C row of logits, via log-sum-exp.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, Index label) {
  if (logits.rows() != 1) {
    throw DimensionError("cross_entropy: expected 1 x C logits, got " + logits.shape_str());
  }
  if (label < 0 || label >= logits.cols()) {
    throw DimensionError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                         std::to_string(logits.cols()) + ")");
  }
  Matrix<Scalar> probs = detail::softmax_rows<Scalar>(logits.value(), nullptr);
  const Scalar peak = logits.value().maxCoeff();
  const Scalar lse =
      peak + std::log((logits.value().array() - peak).exp().sum());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = lse - logits.value()(0, label);
  auto* ln = logits.node();
  return Tensor<Scalar>::from_op(std::move(out), {logits},
                                 [ln, label, probs = std::move(probs)](const Matrix<Scalar>& g,
                                                                       const Matrix<Scalar>&) {
                                   Matrix<Scalar> d = probs;
                                   d(0, label) -= Scalar(1);
                                   detail::accumulate(*ln, d * g(0, 0));
                                 });
}

/// Columns [start, start + count).
template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + x.shape_str());
  }
  auto* xn = x.node();
  return Tensor<Scalar>::from_op(
      x.value().middleCols(start, count), {x},
      [xn, start, count](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (xn->grad.size() == 0) xn->grad.setZero(xn->value.rows(), xn->value.cols());
        xn->grad.middleCols(start, count) += g;
      });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + parts.front().shape_str() + " vs " +
                           p.shape_str());
    }
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<detail::Node<Scalar>*> nodes;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
    nodes.push_back(p.node());
  }
  return Tensor<Scalar>::from_op(std::move(out), parts,
                                 [nodes](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                                   Index off = 0;
                                   for (auto* n : nodes) {
                                     const Index c = n->value.cols();
                                     if (n->requires_grad) {
                                       detail::accumulate(*n, g.middleCols(off, c));
                                     }
                                     off += c;
                                   }
                                 });
}

/// Stacks tensors with equal column counts on top of each other.
template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + parts.front().shape_str() +
                           " vs " + p.shape_str());
    }
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<detail::Node<Scalar>*> nodes;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
    nodes.push_back(p.node());
  }
  return Tensor<Scalar>::from_op(std::move(out), parts,
                                 [nodes](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                                   Index off = 0;
                                   for (auto* n : nodes) {
                                     const Index r = n->value.rows();
                                     if (n->requires_grad) {
                                       detail::accumulate(*n, g.middleRows(off, r));
                                     }
                                     off += r;
                                   }
                                 });
}

/// Selects rows by index (repeats allowed); the backward pass scatter-adds.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> indices) {
  Matrix<Scalar> out(static_cast<Index>(indices.size()), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index r = indices[i];
    if (r < 0 || r >= x.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " out of " +
                           x.shape_str());
    }
    out.row(static_cast<Index>(i)) = x.value().row(r);
  }
  auto* xn = x.node();
  return Tensor<Scalar>::from_op(
      std::move(out), {x},
      [xn, idx = std::vector<Index>(indices.begin(), indices.end())](const Matrix<Scalar>& g,
                                                                     const Matrix<Scalar>&) {
        if (xn->grad.size() == 0) xn->grad.setZero(xn->value.rows(), xn->value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          xn->grad.row(idx[i]) += g.row(static_cast<Index>(i));
        }
      });
}

/// Column-wise mean of all rows, giving a 1 x n row.
template <typename Scalar>
Tensor<Scalar> mean_rows(const Tensor<Scalar>& x) {
  if (x.rows() == 0) throw DimensionError("mean_rows: empty input");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.rows());
  auto* xn = x.node();
  return Tensor<Scalar>::from_op(x.value().colwise().mean(), {x},
                                 [xn, inv](const Matrix<Scalar>& g, const Matrix<Scalar>&) {
                                   Matrix<Scalar> d = g.replicate(xn->value.rows(), 1) * inv;
                                   detail::accumulate(*xn, d);
                                 });
}

}  // namespace melt
