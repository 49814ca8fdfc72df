#pragma once

// Differentiable operations. Each op computes its forward value eagerly and,
// when a tape is active and some input requires a gradient, appends a record
// whose closure accumulates input gradients from the output gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lgpt/tensor.hpp"

namespace lgpt {

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor");
  if (t.rank() > 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.numel() != b.numel() || a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// c[m×p] += a[m×k] · b[k×p]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    const double* ai = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      if (av == 0.0) continue;
      const double* bt = b + t * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += av * bt[j];
    }
  }
}

// c[m×p] += a[m×k] · b[p×k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * p;
    for (std::size_t j = 0; j < p; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += ai[t] * bj[t];
      ci[j] += s;
    }
  }
}

// c[k×p] += a[m×k]ᵀ · b[m×p]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * p;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      if (av == 0.0) continue;
      double* ct = c + t * p;
      for (std::size_t j = 0; j < p; ++j) ct[j] += av * bi[j];
    }
  }
}

}  // namespace detail

/// a[m×k] · b[k×p].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(m, p);
  detail::gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, p);
  detail::check_finite(out, "matmul");
  if (Tape* tape = detail::recording_tape({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record(OpKind::matmul, {&a, &b}, out, [an, bn, on, m, k, p] {
      const double* g = on->grad.data();
      if (double* ga = detail::grad_sink(an)) detail::gemm_nt(g, bn->data.data(), ga, m, p, k);
      if (double* gb = detail::grad_sink(bn)) detail::gemm_tn(an->data.data(), g, gb, m, k, p);
    });
  }
  return out;
}

/// a[m×k] · b[p×k]ᵀ.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()) + "ᵀ");
  }
  Tensor out = Tensor::zeros(m, p);
  detail::gemm_nt(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, p);
  detail::check_finite(out, "matmul_nt");
  if (Tape* tape = detail::recording_tape({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record(OpKind::matmul_nt, {&a, &b}, out, [an, bn, on, m, k, p] {
      const double* g = on->grad.data();
      if (double* ga = detail::grad_sink(an)) detail::gemm_nn(g, bn->data.data(), ga, m, p, k);
      if (double* gb = detail::grad_sink(bn)) detail::gemm_tn(g, an->data.data(), gb, m, p, k);
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  if (Tape* tape = detail::recording_tape({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record(OpKind::add, {&a, &b}, out, [an, bn, on] {
      const auto& g = on->grad;
      if (double* ga = detail::grad_sink(an)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (double* gb = detail::grad_sink(bn)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
  }
  return out;
}

/// a[m×d] + row[d], broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  detail::require_matrix(a, "add_row");
  const std::size_t m = a.rows(), d = a.cols();
  if (row.numel() != d) {
    throw DimensionError("add_row: row " + shape_str(row.shape()) +
                         " does not match width of " + shape_str(a.shape()));
  }
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = a[i * d + j] + row[j];
  if (Tape* tape = detail::recording_tape({&a, &row})) {
    auto an = a.node(), rn = row.node(), on = out.node();
    tape->record(OpKind::add_row, {&a, &row}, out, [an, rn, on, m, d] {
      const auto& g = on->grad;
      if (double* ga = detail::grad_sink(an)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (double* gr = detail::grad_sink(rn))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
    });
  }
  return out;
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  if (Tape* tape = detail::recording_tape({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record(OpKind::mul, {&a, &b}, out, [an, bn, on] {
      const auto& g = on->grad;
      if (double* ga = detail::grad_sink(an)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
      if (double* gb = detail::grad_sink(bn)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * c;
  if (Tape* tape = detail::recording_tape({&a})) {
    auto an = a.node(), on = out.node();
    tape->record(OpKind::scale, {&a}, out, [an, on, c] {
      const auto& g = on->grad;
      if (double* ga = detail::grad_sink(an)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

/// Sum of all entries, as a scalar.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (Tape* tape = detail::recording_tape({&a})) {
    auto an = a.node(), on = out.node();
    tape->record(OpKind::sum, {&a}, out, [an, on] {
      const double g = on->grad[0];
      if (double* ga = detail::grad_sink(an)) for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

/// Column-wise mean over rows, accumulated in ascending row order: [m×d] -> [1×d].
inline Tensor mean_rows(const Tensor& a) {
  detail::require_matrix(a, "mean_rows");
  const std::size_t m = a.rows(), d = a.cols();
  if (m == 0) throw DimensionError("mean_rows: no rows");
  Tensor out = Tensor::zeros(1, d);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) o[j] += a[i * d + j];
  for (auto& v : o) v /= static_cast<double>(m);
  if (Tape* tape = detail::recording_tape({&a})) {
    auto an = a.node(), on = out.node();
    tape->record(OpKind::mean_rows, {&a}, out, [an, on, m, d] {
      const auto& g = on->grad;
      const double inv = 1.0 / static_cast<double>(m);
      if (double* ga = detail::grad_sink(an))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[j] * inv;
    });
  }
  return out;
}

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double x = a[i];
    o[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  }
  if (Tape* tape = detail::recording_tape({&a})) {
    auto an = a.node(), on = out.node();
    tape->record(OpKind::gelu, {&a}, out, [an, on] {
      const auto& g = on->grad;
      double* ga = detail::grad_sink(an);
      if (!ga) return;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = an->data[i];
        const double u = c * (x + k * x * x * x);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * k * x * x);
        ga[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
      }
    });
  }
  return out;
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
  detail::require_matrix(a, "softmax_rows");
  const std::size_t m = a.rows(), d = a.cols();
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * d;
    double* y = o.data() + i * d;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  if (Tape* tape = detail::recording_tape({&a})) {
    auto an = a.node(), on = out.node();
    tape->record(OpKind::softmax_rows, {&a}, out, [an, on, m, d] {
      double* ga = detail::grad_sink(an);
      if (!ga) return;
      const double* g = on->grad.data();
      const double* y = on->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
        for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += y[i * d + j] * (g[i * d + j] - dot);
      }
    });
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row normalization to zero mean and unit variance, then gain/bias.
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
  detail::require_matrix(a, "layer_norm");
  const std::size_t m = a.rows(), d = a.cols();
  if (d == 0) throw DimensionError("layer_norm: zero-width input");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs input " + shape_str(a.shape()));
  }
  Tensor out(a.shape());
  std::vector<double> xhat(m * d), inv_std(m);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (x[j] - mean) * is;
      o[i * d + j] = xhat[i * d + j] * gain[j] + bias[j];
    }
  }
  if (Tape* tape = detail::recording_tape({&a, &gain, &bias})) {
    auto an = a.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    tape->record(OpKind::layer_norm, {&a, &gain, &bias}, out,
                 [an, gn, bn, on, m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const double* g = on->grad.data();
      double* ga = detail::grad_sink(an);
      double* gg = detail::grad_sink(gn);
      double* gb = detail::grad_sink(bn);
      std::vector<double> dx(d);
      for (std::size_t i = 0; i < m; ++i) {
        const double* gi = g + i * d;
        const double* xi = xhat.data() + i * d;
        if (gg) for (std::size_t j = 0; j < d; ++j) gg[j] += gi[j] * xi[j];
        if (gb) for (std::size_t j = 0; j < d; ++j) gb[j] += gi[j];
        if (!ga) continue;
        double mean_dx = 0.0, mean_dx_x = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dx[j] = gi[j] * gn->data[j];
          mean_dx += dx[j];
          mean_dx_x += dx[j] * xi[j];
        }
        mean_dx /= static_cast<double>(d);
        mean_dx_x /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j)
          ga[i * d + j] += inv_std[i] * (dx[j] - mean_dx - xi[j] * mean_dx_x);
      }
    });
  }
  return out;
}

/// Vertical concatenation; all parts share the column count.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != d) {
      throw DimensionError("concat_rows: width mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    total += p.numel() / std::max<std::size_t>(d, 1);
  }
  Tensor out = Tensor::zeros(total, d);
  auto o = out.mutable_data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.numel();
  }
  std::vector<const Tensor*> inputs;
  bool need = false;
  for (const auto& p : parts) {
    inputs.push_back(&p);
    need = need || p.requires_grad();
  }
  if (Tape* tape = detail::active_tape; tape && need) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    tape->record(OpKind::concat_rows, inputs, out, [nodes, on] {
      std::size_t off = 0;
      for (const auto& n : nodes) {
        if (double* gn = detail::grad_sink(n))
          for (std::size_t i = 0; i < n->data.size(); ++i) gn[i] += on->grad[off + i];
        off += n->data.size();
      }
    });
  }
  return out;
}

/// Rows [begin, begin+count).
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  detail::require_matrix(a, "slice_rows");
  const std::size_t d = a.cols();
  if (begin + count > a.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + shape_str(a.shape()));
  }
  Tensor out = Tensor::zeros(count, d);
  std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(begin * d), count * d,
              out.mutable_data().begin());
  if (Tape* tape = detail::recording_tape({&a})) {
    auto an = a.node(), on = out.node();
    tape->record(OpKind::slice_rows, {&a}, out, [an, on, begin, count, d] {
      if (double* ga = detail::grad_sink(an))
        for (std::size_t i = 0; i < count * d; ++i) ga[begin * d + i] += on->grad[i];
    });
  }
  return out;
}

/// out[r] = table[ids[r]]; gradients scatter-add back into the table.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t d = table.cols(), n = table.rows();
  Tensor out = Tensor::zeros(ids.size(), d);
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= n) {
      throw DimensionError("gather_rows: index " + std::to_string(ids[r]) +
                           " out of range for " + shape_str(table.shape()));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                o.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  if (Tape* tape = detail::recording_tape({&table})) {
    auto tn = table.node(), on = out.node();
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    tape->record(OpKind::gather_rows, {&table}, out, [tn, on, idx = std::move(idx), d] {
      if (double* gt = detail::grad_sink(tn))
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < d; ++j) gt[idx[r] * d + j] += on->grad[r * d + j];
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), d = a.cols();
  Tensor out = Tensor::zeros(d, m);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) o[j * m + i] = a[i * d + j];
  if (Tape* tape = detail::recording_tape({&a})) {
    auto an = a.node(), on = out.node();
    tape->record(OpKind::transpose, {&a}, out, [an, on, m, d] {
      if (double* ga = detail::grad_sink(an))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += on->grad[j * m + i];
    });
  }
  return out;
}

/// Mean negative log-likelihood over rows where mask is nonzero.
inline Tensor cross_entropy_masked(const Tensor& logits,
                                   std::span<const std::size_t> targets,
                                   std::span<const std::uint8_t> mask) {
  detail::require_matrix(logits, "cross_entropy_masked");
  const std::size_t T = logits.rows(), V = logits.cols();
  if (targets.size() != T || mask.size() != T) {
    throw DimensionError("cross_entropy_masked: logits " + shape_str(logits.shape()) +
                         " vs targets " + std::to_string(targets.size()) + " / mask " +
                         std::to_string(mask.size()));
  }
  std::size_t count = 0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    ++count;
    if (targets[t] >= V) {
      throw DimensionError("cross_entropy_masked: target id " + std::to_string(targets[t]) +
                           " >= vocabulary size " + std::to_string(V));
    }
  }
  if (count == 0) throw DegenerateLossError("cross_entropy_masked: mask selects no positions");

  std::vector<double> probs(T * V, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    const double* x = logits.data().data() + t * V;
    double mx = -INFINITY;
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, x[v]);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += (probs[t * V + v] = std::exp(x[v] - mx));
    for (std::size_t v = 0; v < V; ++v) probs[t * V + v] /= z;
    total += -(x[targets[t]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(count);
  Tensor out = Tensor::scalar(total * inv);
  if (Tape* tape = detail::recording_tape({&logits})) {
    auto ln = logits.node(), on = out.node();
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    tape->record(OpKind::cross_entropy_masked, {&logits}, out,
                 [ln, on, T, V, inv, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk)] {
      double* gl = detail::grad_sink(ln);
      if (!gl) return;
      const double g = on->grad[0] * inv;
      for (std::size_t t = 0; t < T; ++t) {
        if (!mk[t]) continue;
        for (std::size_t v = 0; v < V; ++v) gl[t * V + v] += g * probs[t * V + v];
        gl[t * V + tg[t]] -= g;
      }
    });
  }
  return out;
}

/// One incoming attention slot: a source row and the edge it arrives on.
struct Neighbor {
  std::size_t src;
  std::ptrdiff_t edge;  // -1 for the self-loop (zero edge vector)
};

/// Attention weights produced by graph_attention, indexed
/// [destination * heads + head][slot] in the order of `incoming`.
using AttentionWeights = std::vector<std::vector<double>>;

/// Edge-aware multi-head attention over an explicit neighborhood.
///
/// For destination i and head h, with e the projected edge row of slot j:
///   score_j = <q_i, k_j + e_j> / sqrt(d_h),  alpha = softmax_j(score)
///   out_i   = sum_j alpha_j (v_j + e_j)
/// queries is [D×d], keys/values are [S×d], edge_proj is [M×d] and may have
/// zero rows when only self-loops are used.
inline Tensor graph_attention(const Tensor& queries, const Tensor& keys,
                              const Tensor& values, const Tensor& edge_proj,
                              const std::vector<std::vector<Neighbor>>& incoming,
                              std::size_t heads, AttentionWeights* weights_out = nullptr) {
  const std::size_t D = queries.rows(), d = queries.cols(), S = keys.rows();
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("graph_attention: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  if (keys.cols() != d || values.cols() != d || values.rows() != S ||
      (edge_proj.numel() > 0 && edge_proj.cols() != d) || incoming.size() != D) {
    throw DimensionError("graph_attention: inconsistent shapes q" + shape_str(queries.shape()) +
                         " k" + shape_str(keys.shape()) + " v" + shape_str(values.shape()) +
                         " e" + shape_str(edge_proj.shape()));
  }
  const std::size_t M = edge_proj.numel() == 0 ? 0 : edge_proj.rows();
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* Q = queries.data().data();
  const double* K = keys.data().data();
  const double* Vv = values.data().data();
  const double* E = M ? edge_proj.data().data() : nullptr;

  for (std::size_t i = 0; i < D; ++i) {
    if (incoming[i].empty()) throw DimensionError("graph_attention: destination without neighbors");
    for (const auto& nb : incoming[i]) {
      if (nb.src >= S || nb.edge >= static_cast<std::ptrdiff_t>(M)) {
        throw DimensionError("graph_attention: neighbor index out of range");
      }
    }
  }

  Tensor out = Tensor::zeros(D, d);
  double* O = out.mutable_data().data();
  AttentionWeights alpha(D * heads);
  for (std::size_t i = 0; i < D; ++i) {
    const auto& nbs = incoming[i];
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      auto& a = alpha[i * heads + h];
      a.resize(nbs.size());
      double mx = -INFINITY;
      for (std::size_t s = 0; s < nbs.size(); ++s) {
        const double* k = K + nbs[s].src * d + off;
        const double* e = nbs[s].edge >= 0 ? E + static_cast<std::size_t>(nbs[s].edge) * d + off : nullptr;
        const double* q = Q + i * d + off;
        double sc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) sc += q[c] * (k[c] + (e ? e[c] : 0.0));
        a[s] = sc * inv_sqrt;
        mx = std::max(mx, a[s]);
      }
      double z = 0.0;
      for (double& v : a) z += (v = std::exp(v - mx));
      for (double& v : a) v /= z;
      double* o = O + i * d + off;
      for (std::size_t s = 0; s < nbs.size(); ++s) {
        const double* v = Vv + nbs[s].src * d + off;
        const double* e = nbs[s].edge >= 0 ? E + static_cast<std::size_t>(nbs[s].edge) * d + off : nullptr;
        for (std::size_t c = 0; c < dh; ++c) o[c] += a[s] * (v[c] + (e ? e[c] : 0.0));
      }
    }
  }
  detail::check_finite(out, "graph_attention");
  if (weights_out) *weights_out = alpha;

  if (Tape* tape = detail::recording_tape({&queries, &keys, &values, &edge_proj})) {
    auto qn = queries.node(), kn = keys.node(), vn = values.node(), en = edge_proj.node(), on = out.node();
    tape->record(OpKind::graph_attention, {&queries, &keys, &values, &edge_proj}, out,
                 [qn, kn, vn, en, on, incoming, alpha = std::move(alpha), D, d, dh, heads, M, inv_sqrt] {
      double* gq = detail::grad_sink(qn);
      double* gk = detail::grad_sink(kn);
      double* gv = detail::grad_sink(vn);
      double* ge = M ? detail::grad_sink(en) : nullptr;
      const double* G = on->grad.data();
      const double* Q = qn->data.data();
      const double* K = kn->data.data();
      const double* Vv = vn->data.data();
      const double* E = M ? en->data.data() : nullptr;
      std::vector<double> dscore;
      for (std::size_t i = 0; i < D; ++i) {
        const auto& nbs = incoming[i];
        dscore.resize(nbs.size());
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          const auto& a = alpha[i * heads + h];
          const double* g = G + i * d + off;
          // d alpha_s = <g, v_s + e_s>
          double mean = 0.0;
          for (std::size_t s = 0; s < nbs.size(); ++s) {
            const double* v = Vv + nbs[s].src * d + off;
            const double* e = nbs[s].edge >= 0 ? E + static_cast<std::size_t>(nbs[s].edge) * d + off : nullptr;
            double da = 0.0;
            for (std::size_t c = 0; c < dh; ++c) da += g[c] * (v[c] + (e ? e[c] : 0.0));
            dscore[s] = da;
            mean += a[s] * da;
          }
          for (std::size_t s = 0; s < nbs.size(); ++s) dscore[s] = a[s] * (dscore[s] - mean) * inv_sqrt;
          const double* q = Q + i * d + off;
          for (std::size_t s = 0; s < nbs.size(); ++s) {
            const std::size_t src = nbs[s].src;
            const bool has_e = nbs[s].edge >= 0;
            const std::size_t eoff = has_e ? static_cast<std::size_t>(nbs[s].edge) * d + off : 0;
            const double* k = K + src * d + off;
            if (gq) {
              double* gqi = gq + i * d + off;
              for (std::size_t c = 0; c < dh; ++c) gqi[c] += dscore[s] * (k[c] + (has_e ? E[eoff + c] : 0.0));
            }
            if (gk) {
              double* gks = gk + src * d + off;
              for (std::size_t c = 0; c < dh; ++c) gks[c] += dscore[s] * q[c];
            }
            if (gv) {
              double* gvs = gv + src * d + off;
              for (std::size_t c = 0; c < dh; ++c) gvs[c] += a[s] * g[c];
            }
            if (ge && has_e) {
              double* ges = ge + eoff;
              for (std::size_t c = 0; c < dh; ++c) ges[c] += dscore[s] * q[c] + a[s] * g[c];
            }
          }
        }
      }
    });
  }
  return out;
}

/// Multi-head causal self-attention: position t attends to positions <= t.
inline Tensor causal_attention(const Tensor& queries, const Tensor& keys,
                               const Tensor& values, std::size_t heads) {
  const std::size_t T = queries.rows(), d = queries.cols();
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("causal_attention: width not divisible by head count");
  }
  if (keys.rows() != T || values.rows() != T || keys.cols() != d || values.cols() != d) {
    throw DimensionError("causal_attention: q/k/v shapes differ");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* Q = queries.data().data();
  const double* K = keys.data().data();
  const double* Vv = values.data().data();
  Tensor out = Tensor::zeros(T, d);
  double* O = out.mutable_data().data();
  // alpha[h][t * T + s] for s <= t
  std::vector<double> alpha(heads * T * T, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t t = 0; t < T; ++t) {
      double* a = alpha.data() + (h * T + t) * T;
      const double* q = Q + t * d + off;
      double mx = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        const double* k = K + s * d + off;
        double sc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) sc += q[c] * k[c];
        a[s] = sc * inv_sqrt;
        mx = std::max(mx, a[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) z += (a[s] = std::exp(a[s] - mx));
      for (std::size_t s = 0; s <= t; ++s) a[s] /= z;
      double* o = O + t * d + off;
      for (std::size_t s = 0; s <= t; ++s) {
        const double* v = Vv + s * d + off;
        const double w = a[s];
        for (std::size_t c = 0; c < dh; ++c) o[c] += w * v[c];
      }
    }
  }
  detail::check_finite(out, "causal_attention");
  if (Tape* tape = detail::recording_tape({&queries, &keys, &values})) {
    auto qn = queries.node(), kn = keys.node(), vn = values.node(), on = out.node();
    tape->record(OpKind::causal_attention, {&queries, &keys, &values}, out,
                 [qn, kn, vn, on, alpha = std::move(alpha), T, d, dh, heads, inv_sqrt] {
      double* gq = detail::grad_sink(qn);
      double* gk = detail::grad_sink(kn);
      double* gv = detail::grad_sink(vn);
      const double* G = on->grad.data();
      const double* Q = qn->data.data();
      const double* K = kn->data.data();
      const double* Vv = vn->data.data();
      std::vector<double> ds(T);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t t = 0; t < T; ++t) {
          const double* a = alpha.data() + (h * T + t) * T;
          const double* g = G + t * d + off;
          double mean = 0.0;
          for (std::size_t s = 0; s <= t; ++s) {
            const double* v = Vv + s * d + off;
            double da = 0.0;
            for (std::size_t c = 0; c < dh; ++c) da += g[c] * v[c];
            ds[s] = da;
            mean += a[s] * da;
          }
          const double* q = Q + t * d + off;
          for (std::size_t s = 0; s <= t; ++s) {
            const double dsc = a[s] * (ds[s] - mean) * inv_sqrt;
            const double* k = K + s * d + off;
            if (gq) {
              double* gqt = gq + t * d + off;
              for (std::size_t c = 0; c < dh; ++c) gqt[c] += dsc * k[c];
            }
            if (gk) {
              double* gks = gk + s * d + off;
              for (std::size_t c = 0; c < dh; ++c) gks[c] += dsc * q[c];
            }
            if (gv) {
              double* gvs = gv + s * d + off;
              for (std::size_t c = 0; c < dh; ++c) gvs[c] += a[s] * g[c];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace lgpt
