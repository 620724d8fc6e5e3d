#pragma once

// Dense tensor core with tape-based reverse-mode differentiation.
//
// Tensors are rank 1..3 row-major buffers with an optional gradient slot.
// Every operation goes through a Tape, which records one adjoint closure per
// executed op; Tape::backward replays the closures in exact reverse execution
// order, accumulating gradients additively. The graph lives only as long as
// the tape: a fresh tape is built per training step.
//
// The scalar type is a template parameter. Training runs in float; gradient
// checks run the same code in double, where central differences are tight
// enough to certify adjoints.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace cytr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Violated call contract (non-scalar loss, label out of range, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A forward op or gradient produced NaN/Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Unknown key or bad value in a run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_to_string(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

inline Shape parse_shape(const std::string& text) {
  Shape s;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t next = text.find('x', pos);
    if (next == std::string::npos) next = text.size();
    s.push_back(static_cast<std::size_t>(std::stoull(text.substr(pos, next - pos))));
    pos = next + 1;
  }
  return s;
}

/// Dense tensor: row-major value buffer plus a lazily allocated gradient slot.
/// Extents are strictly positive and rank is capped at 3.
template <typename S>
struct Tensor {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until backward reaches this tensor
  bool requires_grad = false;

  Tensor() = default;

  Tensor(Shape sh, std::vector<S> vals, bool rg = false)
      : shape(std::move(sh)), values(std::move(vals)), requires_grad(rg) {
    if (shape.empty() || shape.size() > 3)
      throw DimensionError("tensor rank must be 1..3, got " + std::to_string(shape.size()));
    for (std::size_t e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive");
    if (shape_numel(shape) != values.size())
      throw DimensionError("value buffer length " + std::to_string(values.size()) +
                           " does not match shape " + shape_to_string(shape));
  }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const {
    if (rank() != 2) throw DimensionError("rows(): tensor is not rank-2");
    return shape[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw DimensionError("cols(): tensor is not rank-2");
    return shape[1];
  }

  S& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  const S& at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  S grad_at(std::size_t i) const { return grad.empty() ? S(0) : grad[i]; }
  void zero_grad() { grad.clear(); }
};

template <typename S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

template <typename S>
TensorPtr<S> make_tensor(Shape shape, std::vector<S> values, bool requires_grad = false) {
  return std::make_shared<Tensor<S>>(std::move(shape), std::move(values), requires_grad);
}

template <typename S>
TensorPtr<S> make_full(Shape shape, S fill, bool requires_grad = false) {
  std::vector<S> vals(shape_numel(shape), fill);
  return std::make_shared<Tensor<S>>(std::move(shape), std::move(vals), requires_grad);
}

template <typename S>
TensorPtr<S> make_zeros(Shape shape, bool requires_grad = false) {
  return make_full<S>(std::move(shape), S(0), requires_grad);
}

/// Scalar convenience: 1x1 tensor.
template <typename S>
TensorPtr<S> make_scalar(S v) {
  return make_tensor<S>(Shape{1, 1}, std::vector<S>{v});
}

template <typename S>
void ensure_grad(Tensor<S>& t) {
  if (t.grad.size() != t.values.size()) t.grad.assign(t.values.size(), S(0));
}

/// Executed-op record. Replaying the closures in reverse order accumulates
/// adjoints into every requires_grad tensor reachable from the loss.
template <typename S>
class Tape {
 public:
  using T = TensorPtr<S>;

  std::size_t num_ops() const { return steps_.size(); }

  /// Seeds d(loss)/d(loss)=1 and replays all recorded ops in reverse.
  /// Gradients accumulate additively; tensors not reachable from the loss
  /// keep their grad slot untouched.
  void backward(const T& loss) {
    if (loss->size() != 1) throw ContractError("backward: loss must be scalar");
    ensure_grad(*loss);
    loss->grad[0] = S(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  // ---- binary matrix ops ---------------------------------------------------

  /// C = A * B with A:(m x p), B:(p x q).
  T matmul(const T& a, const T& b) {
    require_rank2(a, "matmul lhs");
    require_rank2(b, "matmul rhs");
    const std::size_t m = a->rows(), p = a->cols(), q = b->cols();
    if (b->rows() != p)
      throw DimensionError("matmul: inner extents differ, " + shape_to_string(a->shape) +
                           " vs " + shape_to_string(b->shape));
    T out = make_zeros<S>({m, q});
    const S* av = a->values.data();
    const S* bv = b->values.data();
    S* cv = out->values.data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < p; ++k) {
        const S aik = av[i * p + k];
        if (aik == S(0)) continue;
        const S* brow = bv + k * q;
        S* crow = cv + i * q;
        for (std::size_t j = 0; j < q; ++j) crow[j] += aik * brow[j];
      }
    }
    return finish("matmul", out, {a, b}, [a, b, out, m, p, q] {
      const S* g = out->grad.data();
      if (a->requires_grad) {
        ensure_grad(*a);
        S* ga = a->grad.data();
        const S* bv = b->values.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < p; ++k) {
            S acc = 0;
            const S* grow = g + i * q;
            const S* brow = bv + k * q;
            for (std::size_t j = 0; j < q; ++j) acc += grow[j] * brow[j];
            ga[i * p + k] += acc;
          }
      }
      if (b->requires_grad) {
        ensure_grad(*b);
        S* gb = b->grad.data();
        const S* av = a->values.data();
        for (std::size_t k = 0; k < p; ++k)
          for (std::size_t i = 0; i < m; ++i) {
            const S aik = av[i * p + k];
            if (aik == S(0)) continue;
            const S* grow = g + i * q;
            S* gbrow = gb + k * q;
            for (std::size_t j = 0; j < q; ++j) gbrow[j] += aik * grow[j];
          }
      }
    });
  }

  T transpose(const T& a) {
    require_rank2(a, "transpose");
    const std::size_t m = a->rows(), n = a->cols();
    T out = make_zeros<S>({n, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out->values[j * m + i] = a->values[i * n + j];
    return finish("transpose", out, {a}, [a, out, m, n] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += out->grad[j * m + i];
    });
  }

  // ---- elementwise binary --------------------------------------------------

  T add(const T& a, const T& b) { return ew_binary("add", a, b, /*mul=*/false, /*sub=*/false); }
  T sub(const T& a, const T& b) { return ew_binary("sub", a, b, /*mul=*/false, /*sub=*/true); }
  T mul(const T& a, const T& b) { return ew_binary("mul", a, b, /*mul=*/true, /*sub=*/false); }

  /// out = a + row broadcast over every row of a; r is 1 x n.
  T add_rowvec(const T& a, const T& r) { return rowvec_op("add_rowvec", a, r, +1, false); }
  T sub_rowvec(const T& a, const T& r) { return rowvec_op("sub_rowvec", a, r, -1, false); }
  T mul_rowvec(const T& a, const T& r) { return rowvec_op("mul_rowvec", a, r, +1, true); }

  /// out[i][j] = a[i][j] + c[i][0]; c is m x 1.
  T add_colvec(const T& a, const T& c) {
    require_rank2(a, "add_colvec input");
    require_rank2(c, "add_colvec column");
    const std::size_t m = a->rows(), n = a->cols();
    if (c->rows() != m || c->cols() != 1)
      throw DimensionError("add_colvec: column must be " + std::to_string(m) + "x1");
    T out = make_zeros<S>({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out->values[i * n + j] = a->values[i * n + j] + c->values[i];
    return finish("add_colvec", out, {a, c}, [a, c, out, m, n] {
      if (a->requires_grad) {
        ensure_grad(*a);
        for (std::size_t i = 0; i < m * n; ++i) a->grad[i] += out->grad[i];
      }
      if (c->requires_grad) {
        ensure_grad(*c);
        for (std::size_t i = 0; i < m; ++i) {
          S acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += out->grad[i * n + j];
          c->grad[i] += acc;
        }
      }
    });
  }

  /// Row-wise scaling: out[i][:] = a[i][:] * s[0][i]; s is 1 x m.
  T scale_rows(const T& a, const T& s) {
    require_rank2(a, "scale_rows input");
    require_rank2(s, "scale_rows weights");
    const std::size_t m = a->rows(), n = a->cols();
    if (s->rows() != 1 || s->cols() != m)
      throw DimensionError("scale_rows: weights must be 1x" + std::to_string(m));
    T out = make_zeros<S>({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out->values[i * n + j] = a->values[i * n + j] * s->values[i];
    return finish("scale_rows", out, {a, s}, [a, s, out, m, n] {
      if (a->requires_grad) {
        ensure_grad(*a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += out->grad[i * n + j] * s->values[i];
      }
      if (s->requires_grad) {
        ensure_grad(*s);
        for (std::size_t i = 0; i < m; ++i) {
          S acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += out->grad[i * n + j] * a->values[i * n + j];
          s->grad[i] += acc;
        }
      }
    });
  }

  /// out = a * s where s is a 1x1 node (gradient flows into both).
  T mul_scalar_node(const T& a, const T& s) {
    if (s->size() != 1) throw DimensionError("mul_scalar_node: scale must be 1x1");
    T out = make_zeros<S>(a->shape);
    const S sv = s->values[0];
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] * sv;
    return finish("mul_scalar_node", out, {a, s}, [a, s, out, sv] {
      if (a->requires_grad) {
        ensure_grad(*a);
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * sv;
      }
      if (s->requires_grad) {
        ensure_grad(*s);
        S acc = 0;
        for (std::size_t i = 0; i < a->size(); ++i) acc += out->grad[i] * a->values[i];
        s->grad[0] += acc;
      }
    });
  }

  // ---- elementwise unary ---------------------------------------------------

  T scale(const T& a, S k) {
    return unary("scale", a, [k](S x) { return x * k; }, [k](S, S) { return k; });
  }

  T add_scalar(const T& a, S k) {
    return unary("add_scalar", a, [k](S x) { return x + k; }, [](S, S) { return S(1); });
  }

  T exp(const T& a) {
    return unary("exp", a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
  }

  T log(const T& a) {
    return unary("log", a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
  }

  T tanh(const T& a) {
    return unary("tanh", a, [](S x) { return std::tanh(x); },
                 [](S, S y) { return S(1) - y * y; });
  }

  T abs(const T& a) {
    return unary("abs", a, [](S x) { return std::abs(x); },
                 [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
  }

  /// sqrt(x + eps); the shift keeps the derivative finite at x = 0.
  T sqrt_shift(const T& a, S eps) {
    return unary("sqrt_shift", a, [eps](S x) { return std::sqrt(x + eps); },
                 [](S, S y) { return S(0.5) / y; });
  }

  /// max(x, floor); gradient passes only where x > floor.
  T clamp_min(const T& a, S floor) {
    return unary("clamp_min", a, [floor](S x) { return x > floor ? x : floor; },
                 [floor](S x, S) { return x > floor ? S(1) : S(0); });
  }

  T reciprocal(const T& a) {
    return unary("reciprocal", a, [](S x) { return S(1) / x; },
                 [](S, S y) { return -y * y; });
  }

  /// out = a elementwise-multiplied by a constant mask (no gradient into mask).
  T mul_mask(const T& a, std::vector<S> mask) {
    if (mask.size() != a->size()) throw DimensionError("mul_mask: mask length mismatch");
    T out = make_zeros<S>(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] * mask[i];
    auto mk = std::make_shared<std::vector<S>>(std::move(mask));
    return finish("mul_mask", out, {a}, [a, out, mk] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * (*mk)[i];
    });
  }

  // ---- row-structured ops --------------------------------------------------

  /// Numerically stable row softmax (per-row max subtraction).
  T softmax_rows(const T& a) {
    require_rank2(a, "softmax_rows");
    const std::size_t m = a->rows(), n = a->cols();
    T out = make_zeros<S>({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      const S* x = a->values.data() + i * n;
      S* y = out->values.data() + i * n;
      S mx = x[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
      S total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        total += y[j];
      }
      for (std::size_t j = 0; j < n; ++j) y[j] /= total;
    }
    return finish("softmax_rows", out, {a}, [a, out, m, n] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t i = 0; i < m; ++i) {
        const S* y = out->values.data() + i * n;
        const S* g = out->grad.data() + i * n;
        S dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
        for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += y[j] * (g[j] - dot);
      }
    });
  }

  /// Fused stable log-softmax per row.
  T log_softmax_rows(const T& a) {
    require_rank2(a, "log_softmax_rows");
    const std::size_t m = a->rows(), n = a->cols();
    T out = make_zeros<S>({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      const S* x = a->values.data() + i * n;
      S* y = out->values.data() + i * n;
      S mx = x[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
      S total = 0;
      for (std::size_t j = 0; j < n; ++j) total += std::exp(x[j] - mx);
      const S lse = mx + std::log(total);
      for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
    }
    return finish("log_softmax_rows", out, {a}, [a, out, m, n] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t i = 0; i < m; ++i) {
        const S* y = out->values.data() + i * n;
        const S* g = out->grad.data() + i * n;
        S gsum = 0;
        for (std::size_t j = 0; j < n; ++j) gsum += g[j];
        for (std::size_t j = 0; j < n; ++j)
          a->grad[i * n + j] += g[j] - std::exp(y[j]) * gsum;
      }
    });
  }

  /// Rows divided by max(L2 norm, eps); zero rows map to zero rows.
  T l2_normalize_rows(const T& a, S eps = S(1e-12)) {
    require_rank2(a, "l2_normalize_rows");
    const std::size_t m = a->rows(), n = a->cols();
    T out = make_zeros<S>({m, n});
    auto norms = std::make_shared<std::vector<S>>(m);
    for (std::size_t i = 0; i < m; ++i) {
      const S* x = a->values.data() + i * n;
      S ssq = 0;
      for (std::size_t j = 0; j < n; ++j) ssq += x[j] * x[j];
      const S nrm = std::sqrt(ssq);
      (*norms)[i] = nrm;
      const S denom = std::max(nrm, eps);
      for (std::size_t j = 0; j < n; ++j) out->values[i * n + j] = x[j] / denom;
    }
    return finish("l2_normalize_rows", out, {a}, [a, out, norms, m, n, eps] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t i = 0; i < m; ++i) {
        const S* y = out->values.data() + i * n;
        const S* g = out->grad.data() + i * n;
        const S nrm = (*norms)[i];
        if (nrm > eps) {
          S dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
          for (std::size_t j = 0; j < n; ++j)
            a->grad[i * n + j] += (g[j] - y[j] * dot) / nrm;
        } else {
          for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += g[j] / eps;
        }
      }
    });
  }

  // ---- reductions ----------------------------------------------------------

  /// Column means over rows: (m x n) -> (1 x n).
  T mean_rows(const T& a) {
    require_rank2(a, "mean_rows");
    const std::size_t m = a->rows(), n = a->cols();
    T out = make_zeros<S>({1, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out->values[j] += a->values[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out->values[j] /= S(m);
    return finish("mean_rows", out, {a}, [a, out, m, n] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += out->grad[j] / S(m);
    });
  }

  T sum_all(const T& a) {
    T out = make_zeros<S>({1, 1});
    S acc = 0;
    for (S v : a->values) acc += v;
    out->values[0] = acc;
    return finish("sum_all", out, {a}, [a, out] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      const S g = out->grad[0];
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += g;
    });
  }

  T mean_all(const T& a) {
    T out = make_zeros<S>({1, 1});
    S acc = 0;
    for (S v : a->values) acc += v;
    out->values[0] = acc / S(a->size());
    return finish("mean_all", out, {a}, [a, out] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      const S g = out->grad[0] / S(a->size());
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += g;
    });
  }

  // ---- gather / layout -----------------------------------------------------

  /// Gathers rows by index; repeated indices accumulate gradient additively.
  T select_rows(const T& a, std::vector<std::size_t> idx) {
    require_rank2(a, "select_rows");
    const std::size_t n = a->cols();
    for (std::size_t r : idx)
      if (r >= a->rows()) throw ContractError("select_rows: row index out of range");
    T out = make_zeros<S>({idx.size(), n});
    for (std::size_t t = 0; t < idx.size(); ++t)
      std::copy_n(a->values.data() + idx[t] * n, n, out->values.data() + t * n);
    auto ix = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    return finish("select_rows", out, {a}, [a, out, ix, n] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t t = 0; t < ix->size(); ++t)
        for (std::size_t j = 0; j < n; ++j) a->grad[(*ix)[t] * n + j] += out->grad[t * n + j];
    });
  }

  /// out[i][0] = a[i][cols[i]]; cols[i] must be < n (label out of range otherwise).
  T pick_per_row(const T& a, std::vector<std::size_t> cols) {
    require_rank2(a, "pick_per_row");
    const std::size_t m = a->rows(), n = a->cols();
    if (cols.size() != m) throw DimensionError("pick_per_row: one column index per row required");
    for (std::size_t c : cols)
      if (c >= n) throw ContractError("pick_per_row: label out of range");
    T out = make_zeros<S>({m, 1});
    for (std::size_t i = 0; i < m; ++i) out->values[i] = a->values[i * n + cols[i]];
    auto cx = std::make_shared<std::vector<std::size_t>>(std::move(cols));
    return finish("pick_per_row", out, {a}, [a, out, cx, n] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t i = 0; i < cx->size(); ++i) a->grad[i * n + (*cx)[i]] += out->grad[i];
    });
  }

  /// Stacks rank-2 parts with matching column counts.
  T concat_rows(const std::vector<T>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty part list");
    const std::size_t n = parts[0]->cols();
    std::size_t total = 0;
    for (const T& p : parts) {
      require_rank2(p, "concat_rows part");
      if (p->cols() != n) throw DimensionError("concat_rows: column counts differ");
      total += p->rows();
    }
    T out = make_zeros<S>({total, n});
    std::size_t row = 0;
    for (const T& p : parts) {
      std::copy(p->values.begin(), p->values.end(), out->values.begin() + row * n);
      row += p->rows();
    }
    bool needs = false;
    for (const T& p : parts) needs |= p->requires_grad;
    auto ps = std::make_shared<std::vector<T>>(parts);
    return finish("concat_rows", out, needs, [ps, out, n] {
      std::size_t row = 0;
      for (const T& p : *ps) {
        if (p->requires_grad) {
          ensure_grad(*p);
          for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += out->grad[row * n + i];
        }
        row += p->rows();
      }
    });
  }

  /// Copies into a new shape with identical element count (row-major order).
  T reshape(const T& a, Shape shape) {
    if (shape_numel(shape) != a->size())
      throw DimensionError("reshape: element count mismatch for " + shape_to_string(shape));
    T out = make_tensor<S>(std::move(shape), a->values);
    return finish("reshape", out, {a}, [a, out] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
    });
  }

  T flatten(const T& a) { return reshape(a, Shape{1, a->size()}); }

  // ---- composite kernels ---------------------------------------------------

  /// out[i][j] = squared L2 distance between row i of x and row j of y.
  T pairwise_sqdist(const T& x, const T& y) {
    require_rank2(x, "pairwise_sqdist lhs");
    require_rank2(y, "pairwise_sqdist rhs");
    const std::size_t m = x->rows(), p = y->rows(), d = x->cols();
    if (y->cols() != d) throw DimensionError("pairwise_sqdist: feature dims differ");
    T out = make_zeros<S>({m, p});
    for (std::size_t i = 0; i < m; ++i) {
      const S* xi = x->values.data() + i * d;
      for (std::size_t j = 0; j < p; ++j) {
        const S* yj = y->values.data() + j * d;
        S acc = 0;
        for (std::size_t c = 0; c < d; ++c) {
          const S diff = xi[c] - yj[c];
          acc += diff * diff;
        }
        out->values[i * p + j] = acc;
      }
    }
    return finish("pairwise_sqdist", out, {x, y}, [x, y, out, m, p, d] {
      for (std::size_t i = 0; i < m; ++i) {
        const S* xi = x->values.data() + i * d;
        for (std::size_t j = 0; j < p; ++j) {
          const S g2 = S(2) * out->grad[i * p + j];
          if (g2 == S(0)) continue;
          const S* yj = y->values.data() + j * d;
          if (x->requires_grad) {
            ensure_grad(*x);
            for (std::size_t c = 0; c < d; ++c) x->grad[i * d + c] += g2 * (xi[c] - yj[c]);
          }
          if (y->requires_grad) {
            ensure_grad(*y);
            for (std::size_t c = 0; c < d; ++c) y->grad[j * d + c] -= g2 * (xi[c] - yj[c]);
          }
        }
      }
    });
  }

  /// Median of the strict upper-triangle entries of a square matrix, as a 1x1
  /// node. Even counts average the two middle entries; gradient is routed to
  /// the selected entries only.
  T median_offdiag(const T& a) {
    require_rank2(a, "median_offdiag");
    const std::size_t m = a->rows();
    if (a->cols() != m) throw DimensionError("median_offdiag: matrix must be square");
    if (m < 2) throw ContractError("median_offdiag: need at least a 2x2 matrix");
    std::vector<std::pair<S, std::size_t>> entries;
    entries.reserve(m * (m - 1) / 2);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) entries.push_back({a->values[i * m + j], i * m + j});
    std::sort(entries.begin(), entries.end());
    const std::size_t c = entries.size();
    T out = make_zeros<S>({1, 1});
    std::vector<std::pair<std::size_t, S>> routes;  // flat index -> weight
    if (c % 2 == 1) {
      out->values[0] = entries[c / 2].first;
      routes.push_back({entries[c / 2].second, S(1)});
    } else {
      out->values[0] = (entries[c / 2 - 1].first + entries[c / 2].first) / S(2);
      routes.push_back({entries[c / 2 - 1].second, S(0.5)});
      routes.push_back({entries[c / 2].second, S(0.5)});
    }
    auto rt = std::make_shared<std::vector<std::pair<std::size_t, S>>>(std::move(routes));
    return finish("median_offdiag", out, {a}, [a, out, rt] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (const auto& [idx, w] : *rt) a->grad[idx] += w * out->grad[0];
    });
  }

  /// Batch normalization over a batch of row vectors (training statistics).
  /// gamma/beta are 1 x D. Batch mean and biased variance are written to
  /// out_mean/out_var so the caller can maintain running averages.
  T batchnorm_train(const T& x, const T& gamma, const T& beta, S eps,
                    std::vector<S>* out_mean = nullptr, std::vector<S>* out_var = nullptr) {
    require_rank2(x, "batchnorm input");
    const std::size_t b = x->rows(), d = x->cols();
    if (gamma->size() != d || beta->size() != d)
      throw DimensionError("batchnorm: gamma/beta must have one entry per feature");
    auto mean = std::make_shared<std::vector<S>>(d, S(0));
    auto invstd = std::make_shared<std::vector<S>>(d, S(0));
    std::vector<S> var(d, S(0));
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) (*mean)[j] += x->values[i * d + j];
    for (std::size_t j = 0; j < d; ++j) (*mean)[j] /= S(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const S diff = x->values[i * d + j] - (*mean)[j];
        var[j] += diff * diff;
      }
    for (std::size_t j = 0; j < d; ++j) {
      var[j] /= S(b);
      (*invstd)[j] = S(1) / std::sqrt(var[j] + eps);
    }
    if (out_mean) *out_mean = *mean;
    if (out_var) *out_var = var;
    auto xhat = std::make_shared<std::vector<S>>(b * d);
    T out = make_zeros<S>({b, d});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const S xh = (x->values[i * d + j] - (*mean)[j]) * (*invstd)[j];
        (*xhat)[i * d + j] = xh;
        out->values[i * d + j] = gamma->values[j] * xh + beta->values[j];
      }
    return finish("batchnorm_train", out, {x, gamma, beta}, [x, gamma, beta, out, xhat, invstd, b, d] {
      const S* g = out->grad.data();
      if (gamma->requires_grad) {
        ensure_grad(*gamma);
        for (std::size_t j = 0; j < d; ++j) {
          S acc = 0;
          for (std::size_t i = 0; i < b; ++i) acc += g[i * d + j] * (*xhat)[i * d + j];
          gamma->grad[j] += acc;
        }
      }
      if (beta->requires_grad) {
        ensure_grad(*beta);
        for (std::size_t j = 0; j < d; ++j) {
          S acc = 0;
          for (std::size_t i = 0; i < b; ++i) acc += g[i * d + j];
          beta->grad[j] += acc;
        }
      }
      if (x->requires_grad) {
        ensure_grad(*x);
        for (std::size_t j = 0; j < d; ++j) {
          S sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (std::size_t i = 0; i < b; ++i) {
            const S dxh = g[i * d + j] * gamma->values[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * (*xhat)[i * d + j];
          }
          for (std::size_t i = 0; i < b; ++i) {
            const S dxh = g[i * d + j] * gamma->values[j];
            x->grad[i * d + j] += (*invstd)[j] *
                (dxh - sum_dxhat / S(b) - (*xhat)[i * d + j] * sum_dxhat_xhat / S(b));
          }
        }
      }
    });
  }

 private:
  std::vector<std::function<void()>> steps_;

  static void require_rank2(const T& t, const char* what) {
    if (t->rank() != 2) throw DimensionError(std::string(what) + ": rank-2 tensor required, got " +
                                             shape_to_string(t->shape));
  }

  static void check_finite(const char* op, const T& t) {
    for (S v : t->values)
      if (!std::isfinite(static_cast<double>(v)))
        throw NumericError(std::string("non-finite value produced by ") + op);
  }

  T finish(const char* op, T out, std::initializer_list<T> inputs, std::function<void()> bw) {
    bool needs = false;
    for (const T& in : inputs) needs |= in->requires_grad;
    return finish(op, std::move(out), needs, std::move(bw));
  }

  T finish(const char* op, T out, bool needs_grad, std::function<void()> bw) {
    check_finite(op, out);
    out->requires_grad = needs_grad;
    if (needs_grad) {
      steps_.push_back([out, fn = std::move(bw)] {
        if (out->grad.empty()) return;  // output unreachable from the loss
        fn();
      });
    }
    return out;
  }

  template <typename FwdFn, typename DerivFn>
  T unary(const char* op, const T& a, FwdFn fwd, DerivFn deriv) {
    T out = make_zeros<S>(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = fwd(a->values[i]);
    return finish(op, out, {a}, [a, out, deriv] {
      if (!a->requires_grad) return;
      ensure_grad(*a);
      for (std::size_t i = 0; i < a->size(); ++i)
        a->grad[i] += out->grad[i] * deriv(a->values[i], out->values[i]);
    });
  }

  T ew_binary(const char* op, const T& a, const T& b, bool is_mul, bool is_sub) {
    if (a->shape != b->shape)
      throw DimensionError(std::string(op) + ": shapes differ, " + shape_to_string(a->shape) +
                           " vs " + shape_to_string(b->shape));
    T out = make_zeros<S>(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i)
      out->values[i] = is_mul ? a->values[i] * b->values[i]
                              : (is_sub ? a->values[i] - b->values[i] : a->values[i] + b->values[i]);
    return finish(op, out, {a, b}, [a, b, out, is_mul, is_sub] {
      if (a->requires_grad) {
        ensure_grad(*a);
        for (std::size_t i = 0; i < a->size(); ++i)
          a->grad[i] += is_mul ? out->grad[i] * b->values[i] : out->grad[i];
      }
      if (b->requires_grad) {
        ensure_grad(*b);
        for (std::size_t i = 0; i < b->size(); ++i) {
          if (is_mul)
            b->grad[i] += out->grad[i] * a->values[i];
          else
            b->grad[i] += is_sub ? -out->grad[i] : out->grad[i];
        }
      }
    });
  }

  T rowvec_op(const char* op, const T& a, const T& r, int sign, bool is_mul) {
    require_rank2(a, op);
    require_rank2(r, op);
    const std::size_t m = a->rows(), n = a->cols();
    if (r->rows() != 1 || r->cols() != n)
      throw DimensionError(std::string(op) + ": row vector must be 1x" + std::to_string(n));
    T out = make_zeros<S>({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const S av = a->values[i * n + j], rv = r->values[j];
        out->values[i * n + j] = is_mul ? av * rv : av + S(sign) * rv;
      }
    return finish(op, out, {a, r}, [a, r, out, m, n, sign, is_mul] {
      if (a->requires_grad) {
        ensure_grad(*a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            a->grad[i * n + j] += is_mul ? out->grad[i * n + j] * r->values[j] : out->grad[i * n + j];
      }
      if (r->requires_grad) {
        ensure_grad(*r);
        for (std::size_t j = 0; j < n; ++j) {
          S acc = 0;
          for (std::size_t i = 0; i < m; ++i)
            acc += is_mul ? out->grad[i * n + j] * a->values[i * n + j]
                          : S(sign) * out->grad[i * n + j];
          r->grad[j] += acc;
        }
      }
    });
  }
};

using f32 = float;
using f64 = double;

}  // namespace cytr
