#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mvr/tensor.hpp"

// Differentiable primitives. Shape rules are stated per op. All loops run
// left-to-right in row-major order so forward values are bit-deterministic.
// Every forward output is scanned for NaN/Inf and raises NumericError naming
// the op.

namespace mvr {

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": non-finite value in forward output");
    }
  }
}

inline bool want_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

inline Tensor make_result(const char* op, std::vector<std::size_t> shape,
                          std::vector<double> values, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward_fn) {
  check_finite(op, values);
  bool rg = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::make_shared<std::vector<double>>(std::move(values));
  n->requires_grad = rg;
  n->op = op;
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor::adopt(std::move(n));
}

inline void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    detail::Node* na = o.parents[0].node();
    detail::Node* nb = o.parents[1].node();
    const std::size_t n = o.numel();
    if (na->requires_grad) {
      na->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) na->grad[i] += o.grad[i];
    }
    if (nb->requires_grad) {
      nb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) nb->grad[i] += o.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    detail::Node* na = o.parents[0].node();
    detail::Node* nb = o.parents[1].node();
    const double* va = na->data->data();
    const double* vb = nb->data->data();
    const std::size_t n = o.numel();
    if (na->requires_grad) {
      na->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) na->grad[i] += o.grad[i] * vb[i];
    }
    if (nb->requires_grad) {
      nb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) nb->grad[i] += o.grad[i] * va[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
  return detail::make_result("scale", a.shape(), std::move(out), {a}, [c](detail::Node& o) {
    detail::Node* na = o.parents[0].node();
    if (!na->requires_grad) return;
    na->ensure_grad();
    for (std::size_t i = 0; i < o.numel(); ++i) na->grad[i] += o.grad[i] * c;
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  return detail::make_result("relu", a.shape(), std::move(out), {a}, [](detail::Node& o) {
    detail::Node* na = o.parents[0].node();
    if (!na->requires_grad) return;
    na->ensure_grad();
    const double* va = na->data->data();
    for (std::size_t i = 0; i < o.numel(); ++i) {
      if (va[i] > 0.0) na->grad[i] += o.grad[i];
    }
  });
}

/// log(1 + x); defined for x > -1. Saturates large positive activations.
inline Tensor log1p(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log1p(pa[i]);
  return detail::make_result("log1p", a.shape(), std::move(out), {a}, [](detail::Node& o) {
    detail::Node* na = o.parents[0].node();
    if (!na->requires_grad) return;
    na->ensure_grad();
    const double* va = na->data->data();
    for (std::size_t i = 0; i < o.numel(); ++i) na->grad[i] += o.grad[i] / (1.0 + va[i]);
  });
}

inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  std::vector<double> out(a.numel());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * inv_sqrt2));
  }
  return detail::make_result("gelu", a.shape(), std::move(out), {a}, [](detail::Node& o) {
    detail::Node* na = o.parents[0].node();
    if (!na->requires_grad) return;
    na->ensure_grad();
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    const double* va = na->data->data();
    for (std::size_t i = 0; i < o.numel(); ++i) {
      const double x = va[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      na->grad[i] += o.grad[i] * (cdf + x * pdf);
    }
  });
}

/// Identical values, no tape edge: gradient never flows through the result.
inline Tensor detach(const Tensor& a) {
  auto n = std::make_shared<detail::Node>();
  n->shape = a.shape();
  n->data = std::make_shared<std::vector<double>>(a.values());
  n->requires_grad = false;
  n->op = "detach";
  return Tensor::adopt(std::move(n));
}

// ---------------------------------------------------------------------------
// matrix ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  {
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = out.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* bp = pb + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  }
  return detail::make_result(
      "matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& o) {
        detail::Node* na = o.parents[0].node();
        detail::Node* nb = o.parents[1].node();
        const double* g = o.grad.data();
        if (na->requires_grad) {
          na->ensure_grad();
          const double* pb = nb->data->data();
          double* da = na->grad.data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* gi = g + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double* bp = pb + p * n;
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
              da[i * k + p] += s;
            }
          }
        }
        if (nb->requires_grad) {
          nb->ensure_grad();
          const double* pa = na->data->data();
          double* db = nb->grad.data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* gi = g + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double av = pa[i * k + p];
              double* dbp = db + p * n;
              for (std::size_t j = 0; j < n; ++j) dbp[j] += av * gi[j];
            }
          }
        }
      });
}

/// a . b^T without materializing the transpose: [m, k] x [n, k] -> [m, n].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank2("matmul_nt", a);
  detail::require_rank2("matmul_nt", b);
  if (a.shape()[1] != b.shape()[1]) {
    throw ShapeError("matmul_nt: trailing extents disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  std::vector<double> out(m * n);
  {
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = pa + i * k;
      double* ci = out.data() + i * n;
      for (std::size_t r = 0; r < n; ++r) {
        const double* br = pb + r * k;
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += ai[j] * br[j];
        ci[r] = s;
      }
    }
  }
  return detail::make_result(
      "matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& o) {
        detail::Node* na = o.parents[0].node();
        detail::Node* nb = o.parents[1].node();
        const double* g = o.grad.data();
        if (na->requires_grad) {
          na->ensure_grad();
          const double* pb = nb->data->data();
          double* da = na->grad.data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* gi = g + i * n;
            double* dai = da + i * k;
            for (std::size_t r = 0; r < n; ++r) {
              const double gv = gi[r];
              const double* br = pb + r * k;
              for (std::size_t j = 0; j < k; ++j) dai[j] += gv * br[j];
            }
          }
        }
        if (nb->requires_grad) {
          nb->ensure_grad();
          const double* pa = na->data->data();
          double* db = nb->grad.data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* gi = g + i * n;
            const double* ai = pa + i * k;
            for (std::size_t r = 0; r < n; ++r) {
              const double gv = gi[r];
              double* dbr = db + r * k;
              for (std::size_t j = 0; j < k; ++j) dbr[j] += gv * ai[j];
            }
          }
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2("transpose", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const double* pa = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
  }
  return detail::make_result("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& o) {
    detail::Node* na = o.parents[0].node();
    if (!na->requires_grad) return;
    na->ensure_grad();
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < m; ++i) na->grad[i * n + j] += o.grad[j * m + i];
    }
  });
}

/// Rows of `table` selected by token id; gradient scatter-adds into the rows.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  detail::require_rank2("embedding_lookup", table);
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  std::vector<double> out(ids.size() * d);
  const double* pt = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const int id = ids[r];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DataError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                      std::to_string(v) + " rows");
    }
    const double* src = pt + static_cast<std::size_t>(id) * d;
    std::copy(src, src + d, out.data() + r * d);
  }
  return detail::make_result("embedding_lookup", {ids.size(), d}, std::move(out), {table},
                             [ids, d](detail::Node& o) {
                               detail::Node* nt = o.parents[0].node();
                               if (!nt->requires_grad) return;
                               nt->ensure_grad();
                               for (std::size_t r = 0; r < ids.size(); ++r) {
                                 double* dst =
                                     nt->grad.data() + static_cast<std::size_t>(ids[r]) * d;
                                 const double* g = o.grad.data() + r * d;
                                 for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                               }
                             });
}

/// Rows selected by index; indices may repeat.
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  detail::require_rank2("gather_rows", a);
  const std::size_t m = a.shape()[0], d = a.shape()[1];
  std::vector<double> out(idx.size() * d);
  const double* pa = a.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= m) {
      throw ShapeError("gather_rows: row " + std::to_string(idx[r]) + " outside " +
                       shape_str(a.shape()));
    }
    std::copy(pa + idx[r] * d, pa + (idx[r] + 1) * d, out.data() + r * d);
  }
  return detail::make_result("gather_rows", {idx.size(), d}, std::move(out), {a},
                             [idx, d](detail::Node& o) {
                               detail::Node* na = o.parents[0].node();
                               if (!na->requires_grad) return;
                               na->ensure_grad();
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                 double* dst = na->grad.data() + idx[r] * d;
                                 const double* g = o.grad.data() + r * d;
                                 for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                               }
                             });
}

inline Tensor slice_cols(const Tensor& a, std::size_t offset, std::size_t len) {
  detail::require_rank2("slice_cols", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (offset + len > n) {
    throw ShapeError("slice_cols: [" + std::to_string(offset) + ", " +
                     std::to_string(offset + len) + ") outside " + shape_str(a.shape()));
  }
  std::vector<double> out(m * len);
  const double* pa = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(pa + i * n + offset, pa + i * n + offset + len, out.data() + i * len);
  }
  return detail::make_result("slice_cols", {m, len}, std::move(out), {a},
                             [m, n, offset, len](detail::Node& o) {
                               detail::Node* na = o.parents[0].node();
                               if (!na->requires_grad) return;
                               na->ensure_grad();
                               for (std::size_t i = 0; i < m; ++i) {
                                 const double* g = o.grad.data() + i * len;
                                 double* dst = na->grad.data() + i * n + offset;
                                 for (std::size_t j = 0; j < len; ++j) dst[j] += g[j];
                               }
                             });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require_rank2("concat_rows", p);
    if (p.cols() != d) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
    }
    total += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(total * d);
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_result("concat_rows", {total, d}, std::move(out), parts,
                             [d](detail::Node& o) {
                               std::size_t row = 0;
                               for (Tensor& pt : o.parents) {
                                 detail::Node* np = pt.node();
                                 const std::size_t r = np->shape[0];
                                 if (np->requires_grad) {
                                   np->ensure_grad();
                                   const double* g = o.grad.data() + row * d;
                                   for (std::size_t i = 0; i < r * d; ++i) np->grad[i] += g[i];
                                 }
                                 row += r;
                               }
                             });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].shape()[0];
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require_rank2("concat_cols", p);
    if (p.shape()[0] != m) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
    }
    total += p.shape()[1];
  }
  std::vector<double> out(m * total);
  std::size_t col = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.shape()[1];
    const double* src = p.data();
    for (std::size_t i = 0; i < m; ++i) {
      std::copy(src + i * w, src + (i + 1) * w, out.data() + i * total + col);
    }
    col += w;
  }
  return detail::make_result("concat_cols", {m, total}, std::move(out), parts,
                             [m, total](detail::Node& o) {
                               std::size_t col2 = 0;
                               for (Tensor& pt : o.parents) {
                                 detail::Node* np = pt.node();
                                 const std::size_t w = np->shape[1];
                                 if (np->requires_grad) {
                                   np->ensure_grad();
                                   for (std::size_t i = 0; i < m; ++i) {
                                     const double* g = o.grad.data() + i * total + col2;
                                     double* dst = np->grad.data() + i * w;
                                     for (std::size_t j = 0; j < w; ++j) dst[j] += g[j];
                                   }
                                 }
                                 col2 += w;
                               }
                             });
}

/// mat[i][j] + row[0][j] for every row i.
inline Tensor add_row_broadcast(const Tensor& mat, const Tensor& row) {
  detail::require_rank2("add_row_broadcast", mat);
  detail::require_rank2("add_row_broadcast", row);
  const std::size_t m = mat.shape()[0], n = mat.shape()[1];
  if (row.shape()[0] != 1 || row.shape()[1] != n) {
    throw ShapeError("add_row_broadcast: row " + shape_str(row.shape()) + " against " +
                     shape_str(mat.shape()));
  }
  std::vector<double> out(m * n);
  const double* pm = mat.data();
  const double* pr = row.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = pm[i * n + j] + pr[j];
  }
  return detail::make_result("add_row_broadcast", {m, n}, std::move(out), {mat, row},
                             [m, n](detail::Node& o) {
                               detail::Node* nm = o.parents[0].node();
                               detail::Node* nr = o.parents[1].node();
                               if (nm->requires_grad) {
                                 nm->ensure_grad();
                                 for (std::size_t i = 0; i < m * n; ++i) {
                                   nm->grad[i] += o.grad[i];
                                 }
                               }
                               if (nr->requires_grad) {
                                 nr->ensure_grad();
                                 for (std::size_t i = 0; i < m; ++i) {
                                   const double* g = o.grad.data() + i * n;
                                   for (std::size_t j = 0; j < n; ++j) nr->grad[j] += g[j];
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// normalization and activations over rows

/// Row-wise layer normalization with learned gain/bias (each shaped [1, d]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  detail::require_rank2("layer_norm", x);
  const std::size_t m = x.shape()[0], d = x.shape()[1];
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " against " + shape_str(x.shape()));
  }
  std::vector<double> out(m * d);
  std::vector<double> inv_std(m);
  std::vector<double> mean(m);
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = px + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    mean[i] = mu;
    inv_std[i] = is;
    double* oi = out.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) oi[j] = (xi[j] - mu) * is * pg[j] + pb[j];
  }
  return detail::make_result(
      "layer_norm", {m, d}, std::move(out), {x, gamma, beta},
      [m, d, mean = std::move(mean), inv_std = std::move(inv_std)](detail::Node& o) {
        detail::Node* nx = o.parents[0].node();
        detail::Node* ng = o.parents[1].node();
        detail::Node* nb = o.parents[2].node();
        const double* px2 = nx->data->data();
        const double* pg2 = ng->data->data();
        if (ng->requires_grad) ng->ensure_grad();
        if (nb->requires_grad) nb->ensure_grad();
        if (nx->requires_grad) nx->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = o.grad.data() + i * d;
          const double* xi = px2 + i * d;
          const double mu = mean[i];
          const double is = inv_std[i];
          if (ng->requires_grad || nb->requires_grad) {
            for (std::size_t j = 0; j < d; ++j) {
              const double xhat = (xi[j] - mu) * is;
              if (ng->requires_grad) ng->grad[j] += g[j] * xhat;
              if (nb->requires_grad) nb->grad[j] += g[j];
            }
          }
          if (nx->requires_grad) {
            double sum_q = 0.0, sum_qx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double q = g[j] * pg2[j];
              sum_q += q;
              sum_qx += q * (xi[j] - mu) * is;
            }
            const double inv_d = 1.0 / static_cast<double>(d);
            double* dx = nx->grad.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) {
              const double q = g[j] * pg2[j];
              const double xhat = (xi[j] - mu) * is;
              dx[j] += is * (q - inv_d * sum_q - xhat * inv_d * sum_qx);
            }
          }
        }
      });
}

/// Row-wise softmax over the last axis (stable, max-shifted).
inline Tensor softmax(const Tensor& x) {
  detail::require_rank2("softmax", x);
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(m * n);
  const double* px = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = px + i * n;
    double mx = xi[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    double* oi = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      sum += oi[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) oi[j] *= inv;
  }
  return detail::make_result("softmax", {m, n}, std::move(out), {x}, [m, n](detail::Node& o) {
    detail::Node* nx = o.parents[0].node();
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    const double* y = o.data->data();
    for (std::size_t i = 0; i < m; ++i) {
      const double* gi = o.grad.data() + i * n;
      const double* yi = y + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gi[j] * yi[j];
      double* dx = nx->grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += yi[j] * (gi[j] - dot);
    }
  });
}

/// Row-wise log-softmax (stable).
inline Tensor log_softmax(const Tensor& x) {
  detail::require_rank2("log_softmax", x);
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(m * n);
  const double* px = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = px + i * n;
    double mx = xi[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(xi[j] - mx);
    const double lse = mx + std::log(sum);
    double* oi = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) oi[j] = xi[j] - lse;
  }
  return detail::make_result("log_softmax", {m, n}, std::move(out), {x}, [m, n](detail::Node& o) {
    detail::Node* nx = o.parents[0].node();
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    const double* y = o.data->data();
    for (std::size_t i = 0; i < m; ++i) {
      const double* gi = o.grad.data() + i * n;
      const double* yi = y + i * n;
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += gi[j];
      double* dx = nx->grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += gi[j] - std::exp(yi[j]) * gsum;
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  const double* pa = a.data();
  for (std::size_t i = 0; i < a.numel(); ++i) s += pa[i];
  return detail::make_result("sum", {1}, {s}, {a}, [](detail::Node& o) {
    detail::Node* na = o.parents[0].node();
    if (!na->requires_grad) return;
    na->ensure_grad();
    const double g = o.grad[0];
    for (std::size_t i = 0; i < na->numel(); ++i) na->grad[i] += g;
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Column sums (axis 0 -> [1, n]) or row sums (axis 1 -> [m, 1]).
inline Tensor sum_over_axis(const Tensor& a, int axis) {
  detail::require_rank2("sum_over_axis", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const double* pa = a.data();
  if (axis == 0) {
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[j] += pa[i * n + j];
    }
    return detail::make_result("sum_over_axis", {1, n}, std::move(out), {a},
                               [m, n](detail::Node& o) {
                                 detail::Node* na = o.parents[0].node();
                                 if (!na->requires_grad) return;
                                 na->ensure_grad();
                                 for (std::size_t i = 0; i < m; ++i) {
                                   for (std::size_t j = 0; j < n; ++j) {
                                     na->grad[i * n + j] += o.grad[j];
                                   }
                                 }
                               });
  }
  if (axis != 1) throw ShapeError("sum_over_axis: axis must be 0 or 1");
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i] += pa[i * n + j];
  }
  return detail::make_result("sum_over_axis", {m, 1}, std::move(out), {a},
                             [m, n](detail::Node& o) {
                               detail::Node* na = o.parents[0].node();
                               if (!na->requires_grad) return;
                               na->ensure_grad();
                               for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                   na->grad[i * n + j] += o.grad[i];
                                 }
                               }
                             });
}

/// Max over an axis. The gradient routes 1.0 to exactly one position per
/// reduced slice: the first (lowest-index) argmax.
inline Tensor max_over_axis(const Tensor& a, int axis) {
  detail::require_rank2("max_over_axis", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const double* pa = a.data();
  if (axis == 0) {
    std::vector<double> out(n);
    std::vector<std::size_t> arg(n, 0);
    for (std::size_t j = 0; j < n; ++j) out[j] = pa[j];
    for (std::size_t i = 1; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (pa[i * n + j] > out[j]) {
          out[j] = pa[i * n + j];
          arg[j] = i;
        }
      }
    }
    return detail::make_result("max_over_axis", {1, n}, std::move(out), {a},
                               [n, arg = std::move(arg)](detail::Node& o) {
                                 detail::Node* na = o.parents[0].node();
                                 if (!na->requires_grad) return;
                                 na->ensure_grad();
                                 for (std::size_t j = 0; j < n; ++j) {
                                   na->grad[arg[j] * n + j] += o.grad[j];
                                 }
                               });
  }
  if (axis != 1) throw ShapeError("max_over_axis: axis must be 0 or 1");
  std::vector<double> out(m);
  std::vector<std::size_t> arg(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = pa + i * n;
    double best = xi[0];
    std::size_t bj = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (xi[j] > best) {
        best = xi[j];
        bj = j;
      }
    }
    out[i] = best;
    arg[i] = bj;
  }
  return detail::make_result("max_over_axis", {m, 1}, std::move(out), {a},
                             [n, arg = std::move(arg)](detail::Node& o) {
                               detail::Node* na = o.parents[0].node();
                               if (!na->requires_grad) return;
                               na->ensure_grad();
                               for (std::size_t i = 0; i < arg.size(); ++i) {
                                 na->grad[i * n + arg[i]] += o.grad[i];
                               }
                             });
}

/// Mean over rows of (logsumexp(row) - row[label]).
inline Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& labels) {
  detail::require_rank2("cross_entropy_with_logits", logits);
  const std::size_t m = logits.shape()[0], n = logits.shape()[1];
  if (labels.size() != m) {
    throw ShapeError("cross_entropy_with_logits: " + std::to_string(labels.size()) +
                     " labels against " + shape_str(logits.shape()));
  }
  const double* px = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= n) {
      throw DataError("cross_entropy_with_logits: label " + std::to_string(label) +
                      " outside [0, " + std::to_string(n) + ")");
    }
    const double* xi = px + i * n;
    double mx = xi[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(xi[j] - mx);
    loss += mx + std::log(sum) - xi[static_cast<std::size_t>(label)];
  }
  loss /= static_cast<double>(m);
  return detail::make_result(
      "cross_entropy_with_logits", {1}, {loss}, {logits}, [m, n, labels](detail::Node& o) {
        detail::Node* nx = o.parents[0].node();
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        const double g = o.grad[0] / static_cast<double>(m);
        const double* px2 = nx->data->data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* xi = px2 + i * n;
          double mx = xi[0];
          for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
          double sum = 0.0;
          for (std::size_t j = 0; j < n; ++j) sum += std::exp(xi[j] - mx);
          const double inv = 1.0 / sum;
          double* dx = nx->grad.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) dx[j] += g * std::exp(xi[j] - mx) * inv;
          dx[static_cast<std::size_t>(labels[i])] -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// sparse-view helpers

/// Indices of the k largest strictly positive entries, ties broken toward the
/// lower index; returned ascending. Shared by the differentiable filter and
/// the stored-vector pruning so both paths select identically.
inline std::vector<std::uint32_t> topk_positive_indices(const double* v, std::size_t n,
                                                        std::size_t k) {
  std::vector<std::uint32_t> pos;
  for (std::size_t i = 0; i < n; ++i) {
    if (v[i] > 0.0) pos.push_back(static_cast<std::uint32_t>(i));
  }
  if (pos.size() > k) {
    std::partial_sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k), pos.end(),
                      [v](std::uint32_t a, std::uint32_t b) {
                        if (v[a] != v[b]) return v[a] > v[b];
                        return a < b;
                      });
    pos.resize(k);
    std::sort(pos.begin(), pos.end());
  }
  return pos;
}

/// Keeps the k largest positive entries of a [1, V] activation row, zeroing
/// the rest; gradient flows only through the kept entries.
inline Tensor topk_filter(const Tensor& a, std::size_t k) {
  detail::require_rank2("topk_filter", a);
  if (a.shape()[0] != 1) {
    throw ShapeError("topk_filter: expected a [1, V] row, got " + shape_str(a.shape()));
  }
  const std::size_t n = a.shape()[1];
  if (k == 0) throw ShapeError("topk_filter: k must be >= 1");
  std::vector<std::uint32_t> keep = topk_positive_indices(a.data(), n, k);
  std::vector<double> out(n, 0.0);
  const double* pa = a.data();
  for (std::uint32_t i : keep) out[i] = pa[i];
  return detail::make_result("topk_filter", {1, n}, std::move(out), {a},
                             [keep = std::move(keep)](detail::Node& o) {
                               detail::Node* na = o.parents[0].node();
                               if (!na->requires_grad) return;
                               na->ensure_grad();
                               for (std::uint32_t i : keep) na->grad[i] += o.grad[i];
                             });
}

}  // namespace mvr
