#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "deltavit/common.hpp"
#include "deltavit/tape.hpp"
#include "deltavit/tensor.hpp"

// Differentiable tensor operations. Every op computes its result eagerly and,
// when a tape is supplied and any input requires a gradient, appends a
// backward rule to the tape. Gradients accumulate by summation, so a
// parameter used at several sites receives the sum of its per-site gradients.

namespace deltavit {

namespace detail {

template <typename S>
bool want_record(const Tape<S>* tape,
                 std::initializer_list<const Tensor<S>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename S>
void require_2d(const Tensor<S>& t, const char* op) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " +
                     shape_str(t.shape()));
  }
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b,
                        const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Rows/cols view of a 1-d (single row) or 2-d tensor.
template <typename S>
std::size_t row_count(const Tensor<S>& t) {
  return t.ndim() == 1 ? 1 : t.dim(0);
}

template <typename S>
std::size_t col_count(const Tensor<S>& t) {
  return t.ndim() == 1 ? t.dim(0) : t.dim(1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b,
                 Tape<S>* tape = nullptr) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree: " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const S aik = pa[i * k + kk];
      const S* brow = pb + kk * n;
      S* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  if (detail::want_record(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a = a, b = b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      if (a.requires_grad()) {
        S* ga = a.ensure_grad().data();
        const S* pb = b.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            S acc = S(0);
            const S* grow = g + i * n;
            const S* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + kk] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        S* gb = b.ensure_grad().data();
        const S* pa = a.data();
        for (std::size_t i = 0; i < m; ++i) {
          const S* grow = g + i * n;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const S aik = pa[i * k + kk];
            S* gbrow = gb + kk * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  detail::require_2d(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x.at(i, j);
  if (detail::want_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, m, n]() mutable {
      if (!out.has_grad()) return;
      S* gx = x.ensure_grad().data();
      const S* g = out.grad().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
  detail::require_same_shape(a, b, "add");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  if (detail::want_record(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a = a, b = b, out, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      if (a.requires_grad()) {
        S* ga = a.ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        S* gb = b.ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

/// Adds a length-n vector to every row of an [m x n] matrix.
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v,
                     Tape<S>* tape = nullptr) {
  detail::require_2d(x, "add_rowvec");
  if (v.ndim() != 1 || v.dim(0) != x.dim(1)) {
    throw ShapeError("add_rowvec: shape mismatch " + shape_str(x.shape()) +
                     " vs " + shape_str(v.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + v[j];
  if (detail::want_record(tape, {&x, &v})) {
    out.set_requires_grad(true);
    tape->record([x = x, v = v, out, m, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      if (x.requires_grad()) {
        S* gx = x.ensure_grad().data();
        for (std::size_t i = 0; i < m * n; ++i) gx[i] += g[i];
      }
      if (v.requires_grad()) {
        S* gv = v.ensure_grad().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
  detail::require_same_shape(a, b, "mul");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  if (detail::want_record(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a = a, b = b, out, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      if (a.requires_grad()) {
        S* ga = a.ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        S* gb = b.ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c, Tape<S>* tape = nullptr) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * c;
  if (detail::want_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, c, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      S* gx = x.ensure_grad().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += c * g[i];
    });
  }
  return out;
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename S>
Tensor<S> gelu(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  const S k = S(std::sqrt(2.0 / 3.14159265358979323846));
  const S c3 = S(0.044715);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const S v = x[i];
    out[i] = S(0.5) * v * (S(1) + std::tanh(k * (v + c3 * v * v * v)));
  }
  if (detail::want_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, k, c3, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      S* gx = x.ensure_grad().data();
      for (std::size_t i = 0; i < n; ++i) {
        const S v = x[i];
        const S t = std::tanh(k * (v + c3 * v * v * v));
        const S du = k * (S(1) + S(3) * c3 * v * v);
        const S d = S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * du;
        gx[i] += g[i] * d;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape, Tape<S>* tape = nullptr) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor<S> out = Tensor<S>::from_values(std::move(shape), x.values());
  if (detail::want_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      S* gx = x.ensure_grad().data();
      const std::size_t n = x.numel();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, std::size_t start, std::size_t width,
                     Tape<S>* tape = nullptr) {
  detail::require_2d(x, "slice_cols");
  if (start + width > x.dim(1)) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + width) + ") exceed " +
                     shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, width});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < width; ++j) out.at(i, j) = x.at(i, start + j);
  if (detail::want_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, start, width, m, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      S* gx = x.ensure_grad().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < width; ++j)
          gx[i * n + start + j] += g[i * width + j];
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts,
                      Tape<S>* tape = nullptr) {
  if (parts.empty()) throw DomainError("concat_cols: no parts");
  const std::size_t m = parts.front().dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.dim(0) != m) {
      throw ShapeError("concat_cols: row mismatch " +
                       shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  Tensor<S> out = Tensor<S>::zeros({m, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(i, off + j) = p.at(i, j);
    off += w;
  }
  bool any_grad = false;
  for (const auto& p : parts) any_grad |= p.requires_grad();
  if (tape != nullptr && any_grad) {
    out.set_requires_grad(true);
    tape->record([parts = parts, out, m, total]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t w = p.dim(1);
        if (p.requires_grad()) {
          S* gp = p.ensure_grad().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              gp[i * w + j] += g[i * total + off + j];
        }
        off += w;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b,
                      Tape<S>* tape = nullptr) {
  detail::require_2d(a, "concat_rows");
  detail::require_2d(b, "concat_rows");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("concat_rows: column mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const std::size_t ma = a.dim(0), mb = b.dim(0), n = a.dim(1);
  Tensor<S> out = Tensor<S>::zeros({ma + mb, n});
  std::copy(a.data(), a.data() + ma * n, out.data());
  std::copy(b.data(), b.data() + mb * n, out.data() + ma * n);
  if (detail::want_record(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a = a, b = b, out, ma, mb, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      if (a.requires_grad()) {
        S* ga = a.ensure_grad().data();
        for (std::size_t i = 0; i < ma * n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        S* gb = b.ensure_grad().data();
        for (std::size_t i = 0; i < mb * n; ++i) gb[i] += g[ma * n + i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> take_row(const Tensor<S>& x, std::size_t row,
                   Tape<S>* tape = nullptr) {
  detail::require_2d(x, "take_row");
  if (row >= x.dim(0)) {
    throw IndexError("take_row: row " + std::to_string(row) + " out of " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({n});
  for (std::size_t j = 0; j < n; ++j) out[j] = x.at(row, j);
  if (detail::want_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, row, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      S* gx = x.ensure_grad().data();
      for (std::size_t j = 0; j < n; ++j) gx[row * n + j] += g[j];
    });
  }
  return out;
}

/// Stacks B length-n vectors into a [B x n] matrix.
template <typename S>
Tensor<S> stack_rows(const std::vector<Tensor<S>>& rows,
                     Tape<S>* tape = nullptr) {
  if (rows.empty()) throw DomainError("stack_rows: no rows");
  const std::size_t n = rows.front().numel();
  for (const auto& r : rows) {
    if (r.ndim() != 1 || r.numel() != n) {
      throw ShapeError("stack_rows: row shape mismatch " +
                       shape_str(rows.front().shape()) + " vs " +
                       shape_str(r.shape()));
    }
  }
  const std::size_t b = rows.size();
  Tensor<S> out = Tensor<S>::zeros({b, n});
  for (std::size_t i = 0; i < b; ++i)
    std::copy(rows[i].data(), rows[i].data() + n, out.data() + i * n);
  bool any_grad = false;
  for (const auto& r : rows) any_grad |= r.requires_grad();
  if (tape != nullptr && any_grad) {
    out.set_requires_grad(true);
    tape->record([rows = rows, out, b, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      for (std::size_t i = 0; i < b; ++i) {
        if (!rows[i].requires_grad()) continue;
        S* gr = rows[i].ensure_grad().data();
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  S acc = S(0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (detail::want_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out]() mutable {
      if (!out.has_grad()) return;
      const S g = out.grad()[0];
      S* gx = x.ensure_grad().data();
      const std::size_t n = x.numel();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

/// Softmax over the last dimension (a 1-d tensor is a single row). Uses
/// max-subtraction; rows sum to 1.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  if (x.numel() == 0) throw DomainError("softmax: empty input");
  if (x.ndim() > 2) {
    throw ShapeError("softmax: expected 1-d or 2-d, got " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = detail::row_count(x), cols = detail::col_count(x);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const S* xi = x.data() + i * cols;
    S* yi = out.data() + i * cols;
    S mx = xi[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    S denom = S(0);
    for (std::size_t j = 0; j < cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      denom += yi[j];
    }
    for (std::size_t j = 0; j < cols; ++j) yi[j] /= denom;
  }
  if (detail::want_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      const S* y = out.data();
      S* gx = x.ensure_grad().data();
      for (std::size_t i = 0; i < rows; ++i) {
        const S* gi = g + i * cols;
        const S* yi = y + i * cols;
        S dot = S(0);
        for (std::size_t j = 0; j < cols; ++j) dot += gi[j] * yi[j];
        S* gxi = gx + i * cols;
        for (std::size_t j = 0; j < cols; ++j) gxi[j] += yi[j] * (gi[j] - dot);
      }
    });
  }
  return out;
}

/// Per-row layer normalization over the last dimension with affine gain and
/// shift. Variance uses the population divisor.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& shift, S eps, Tape<S>* tape = nullptr) {
  if (!(eps > S(0))) throw ContractError("layer_norm: eps must be positive");
  if (x.ndim() > 2) {
    throw ShapeError("layer_norm: expected 1-d or 2-d, got " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = detail::row_count(x), cols = detail::col_count(x);
  if (gain.ndim() != 1 || gain.dim(0) != cols || shift.ndim() != 1 ||
      shift.dim(0) != cols) {
    throw ShapeError("layer_norm: gain/shift must be " +
                     shape_str({cols}) + ", got " + shape_str(gain.shape()) +
                     " and " + shape_str(shift.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  // Per-row inverse stddev and mean, kept for the backward rule.
  std::vector<S> inv_std(rows), means(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const S* xi = x.data() + i * cols;
    S mean = S(0);
    for (std::size_t j = 0; j < cols; ++j) mean += xi[j];
    mean /= S(cols);
    S var = S(0);
    for (std::size_t j = 0; j < cols; ++j) {
      const S d = xi[j] - mean;
      var += d * d;
    }
    var /= S(cols);
    const S istd = S(1) / std::sqrt(var + eps);
    means[i] = mean;
    inv_std[i] = istd;
    S* yi = out.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j)
      yi[j] = (xi[j] - mean) * istd * gain[j] + shift[j];
  }
  if (detail::want_record(tape, {&x, &gain, &shift})) {
    out.set_requires_grad(true);
    tape->record([x = x, gain = gain, shift = shift, out, inv_std, means, rows,
                  cols]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      for (std::size_t i = 0; i < rows; ++i) {
        const S* gi = g + i * cols;
        const S* xi = x.data() + i * cols;
        const S istd = inv_std[i];
        const S mean = means[i];
        if (gain.requires_grad() || shift.requires_grad()) {
          for (std::size_t j = 0; j < cols; ++j) {
            const S xhat = (xi[j] - mean) * istd;
            if (gain.requires_grad()) gain.ensure_grad()[j] += gi[j] * xhat;
            if (shift.requires_grad()) shift.ensure_grad()[j] += gi[j];
          }
        }
        if (x.requires_grad()) {
          S m1 = S(0), m2 = S(0);
          for (std::size_t j = 0; j < cols; ++j) {
            const S gg = gain[j] * gi[j];
            const S xhat = (xi[j] - mean) * istd;
            m1 += gg;
            m2 += gg * xhat;
          }
          m1 /= S(cols);
          m2 /= S(cols);
          S* gx = x.ensure_grad().data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j) {
            const S gg = gain[j] * gi[j];
            const S xhat = (xi[j] - mean) * istd;
            gx[j] += (gg - m1 - xhat * m2) * istd;
          }
        }
      }
    });
  }
  return out;
}

/// Per-row L2 normalization: y_r = x_r / max(||x_r||, eps).
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& x, S eps = S(1e-12),
                       Tape<S>* tape = nullptr) {
  if (x.numel() == 0) throw DomainError("l2_normalize: empty input");
  if (x.ndim() > 2) {
    throw ShapeError("l2_normalize: expected 1-d or 2-d, got " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = detail::row_count(x), cols = detail::col_count(x);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const S* xi = x.data() + i * cols;
    S sq = S(0);
    for (std::size_t j = 0; j < cols; ++j) sq += xi[j] * xi[j];
    const S norm = std::sqrt(sq);
    norms[i] = norm;
    const S denom = std::max(norm, eps);
    S* yi = out.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) yi[j] = xi[j] / denom;
  }
  if (detail::want_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, norms, eps, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      const S* y = out.data();
      S* gx = x.ensure_grad().data();
      for (std::size_t i = 0; i < rows; ++i) {
        const S* gi = g + i * cols;
        S* gxi = gx + i * cols;
        if (norms[i] > eps) {
          const S* yi = y + i * cols;
          S dot = S(0);
          for (std::size_t j = 0; j < cols; ++j) dot += gi[j] * yi[j];
          for (std::size_t j = 0; j < cols; ++j)
            gxi[j] += (gi[j] - yi[j] * dot) / norms[i];
        } else {
          // Below the guard the denominator is the constant eps.
          for (std::size_t j = 0; j < cols; ++j) gxi[j] += gi[j] / eps;
        }
      }
    });
  }
  return out;
}

/// Mean softmax cross-entropy over a batch of logit rows.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits,
                        const std::vector<std::size_t>& labels,
                        Tape<S>* tape = nullptr) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw ShapeError("cross_entropy: batch " + std::to_string(b) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(c) + " classes");
    }
  }
  // Stable log-softmax; class probabilities retained for the backward rule.
  std::vector<S> probs(b * c);
  S loss = S(0);
  for (std::size_t i = 0; i < b; ++i) {
    const S* li = logits.data() + i * c;
    S mx = li[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, li[j]);
    S denom = S(0);
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(li[j] - mx);
      denom += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= denom;
    loss += mx + std::log(denom) - li[labels[i]];
  }
  loss /= S(b);
  Tensor<S> out = Tensor<S>::scalar(loss);
  if (detail::want_record(tape, {&logits})) {
    out.set_requires_grad(true);
    tape->record([logits = logits, out, probs, labels, b, c]() mutable {
      if (!out.has_grad()) return;
      const S g = out.grad()[0];
      S* gl = logits.ensure_grad().data();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          S p = probs[i * c + j];
          if (j == labels[i]) p -= S(1);
          gl[i * c + j] += g * p / S(b);
        }
      }
    });
  }
  return out;
}

}  // namespace deltavit
