#pragma once

// Dense 64-bit-float tensors with reverse-mode automatic differentiation.
// The scope is exactly what a small transformer needs: rank-1/2 arrays,
// matmul, softmax / layer-norm / relu, embedding lookup, label-smoothed
// cross-entropy and inverted dropout. Gradients are checked against central
// finite differences in the test suite, so everything here is plain double
// math with a fixed accumulation order.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "ilmf/error.hpp"
#include "ilmf/rng.hpp"

namespace ilmf {

class Tensor;

namespace detail {

struct TensorData;

// One recorded operation: the parent handles (for the topological walk) and
// a closure that routes the output gradient into the parents.
struct Node {
  std::vector<Tensor> parents;
  std::function<void(const std::vector<double>& out_grad)> backward;
};

struct TensorData {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves and no-grad results
};

inline size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive");
    n *= static_cast<size_t>(e);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// ---- shared numeric kernels ------------------------------------------------
// The incremental decoding path reuses these exact routines so that stepwise
// scores match full-sequence scores bit for bit.

// y[j] = sum_k x[k] * w[k*cols + j]  (+ bias when given)
inline void mat_vec(const double* x, const double* w, const double* bias,
                    int rows, int cols, double* y) {
  if (bias) {
    std::memcpy(y, bias, sizeof(double) * static_cast<size_t>(cols));
  } else {
    std::fill(y, y + cols, 0.0);
  }
  for (int k = 0; k < rows; ++k) {
    const double xk = x[k];
    const double* wrow = w + static_cast<size_t>(k) * cols;
    for (int j = 0; j < cols; ++j) y[j] += xk * wrow[j];
  }
}

inline double dot(const double* a, const double* b, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// In-place softmax over one contiguous line, max-subtracted.
inline void softmax_line(double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  for (int i = 0; i < n; ++i) x[i] /= sum;
}

// out[i] = x[i] - max - log(sum exp(x - max))
inline void log_softmax_line(const double* x, int n, double* out) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  const double lse = mx + std::log(sum);
  for (int i = 0; i < n; ++i) out[i] = x[i] - lse;
}

// Per-row layer norm with affine transform; n is the normalized extent.
inline void layer_norm_line(const double* x, int n, const double* gain,
                            const double* bias, double eps, double* out) {
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = x[i] - mean;
    var += d * d;
  }
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (int i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
}

}  // namespace detail

// Thread-local switch: while disabled, ops never record nodes and results do
// not require grad. Scoring and decoding run under NoGradGuard.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool v) { flag() = v; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData>();
    size_t n = detail::shape_numel(shape);
    t.d_->shape = std::move(shape);
    t.d_->data.assign(n, 0.0);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.d_->data.begin(), t.d_->data.end(), value);
    return t;
  }

  static Tensor of(std::vector<double> values, std::vector<int> shape) {
    if (values.size() != detail::shape_numel(shape))
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + detail::shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->data = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return of({v}, {1}); }

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  size_t size() const { return d_->data.size(); }

  std::vector<double>& data() { return d_->data; }
  const std::vector<double>& data() const { return d_->data; }
  double* ptr() { return d_->data.data(); }
  const double* ptr() const { return d_->data.data(); }

  double value() const {
    if (size() != 1) throw ContractError("value() requires a scalar tensor");
    return d_->data[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return !d_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (d_->grad.empty())
      throw ContractError("tensor has no gradient (not reached by backward?)");
    return d_->grad;
  }
  std::vector<double>& grad_buffer() {
    if (d_->grad.empty()) d_->grad.assign(size(), 0.0);
    return d_->grad;
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  std::shared_ptr<detail::Node> node() const { return d_->node; }
  void set_node(std::shared_ptr<detail::Node> n) { d_->node = std::move(n); }
  detail::TensorData* raw() const { return d_.get(); }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

namespace detail {

inline bool should_record(std::initializer_list<Tensor> parents) {
  if (!GradMode::enabled()) return false;
  for (const Tensor& p : parents)
    if (p.requires_grad()) return true;
  return false;
}

inline void attach(Tensor& out, std::initializer_list<Tensor> parents,
                   std::function<void(const std::vector<double>&)> backward) {
  out.set_requires_grad(true);
  auto node = std::make_shared<Node>();
  node->parents.assign(parents.begin(), parents.end());
  node->backward = std::move(backward);
  out.set_node(std::move(node));
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

// b may have the same shape as a, be a rank-1 vector matching a's last extent
// (broadcast across rows), or be a scalar.
namespace detail {
enum class BcKind { Same, Row, Scalar };
inline BcKind broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return BcKind::Same;
  if (b.size() == 1) return BcKind::Scalar;
  if (b.rank() == 1 && a.rank() >= 1 && a.dim(a.rank() - 1) == b.dim(0))
    return BcKind::Row;
  throw DimensionError(std::string(op) + ": incompatible shapes " +
                       shape_str(a.shape()) + " and " + shape_str(b.shape()));
}
}  // namespace detail

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  const auto kind = detail::broadcast_kind(a, b, name);
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.size();
  const size_t bn = b.size();
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for (size_t i = 0; i < n; ++i)
    po[i] = fwd(pa[i], pb[kind == detail::BcKind::Same ? i
                         : kind == detail::BcKind::Scalar ? 0 : i % bn]);
  if (detail::should_record({a, b})) {
    detail::attach(out, {a, b}, [a, b, kind, bwd_a, bwd_b](const std::vector<double>& g) {
      const size_t n = a.size(), bn = b.size();
      const double* pa = a.ptr();
      const double* pb = b.ptr();
      if (a.requires_grad()) {
        auto& ga = const_cast<Tensor&>(a).grad_buffer();
        for (size_t i = 0; i < n; ++i) {
          size_t bi = kind == detail::BcKind::Same ? i
                    : kind == detail::BcKind::Scalar ? 0 : i % bn;
          ga[i] += g[i] * bwd_a(pa[i], pb[bi]);
        }
      }
      if (b.requires_grad()) {
        auto& gb = const_cast<Tensor&>(b).grad_buffer();
        for (size_t i = 0; i < n; ++i) {
          size_t bi = kind == detail::BcKind::Same ? i
                    : kind == detail::BcKind::Scalar ? 0 : i % bn;
          gb[bi] += g[i] * bwd_b(pa[i], pb[bi]);
        }
      }
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, "add",
                            [](double x, double y) { return x + y; },
                            [](double, double) { return 1.0; },
                            [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, "sub",
                            [](double x, double y) { return x - y; },
                            [](double, double) { return 1.0; },
                            [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, "mul",
                            [](double x, double y) { return x * y; },
                            [](double, double y) { return y; },
                            [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * c;
  if (detail::should_record({a})) {
    detail::attach(out, {a}, [a, c](const std::vector<double>& g) {
      auto& ga = const_cast<Tensor&>(a).grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] > 0.0 ? a.ptr()[i] : 0.0;
  if (detail::should_record({a})) {
    detail::attach(out, {a}, [a](const std::vector<double>& g) {
      auto& ga = const_cast<Tensor&>(a).grad_buffer();
      const double* pa = a.ptr();
      for (size_t i = 0; i < g.size(); ++i)
        if (pa[i] > 0.0) ga[i] += g[i];
    });
  }
  return out;
}

// ---- matrix products -------------------------------------------------------

inline void check_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " +
                         detail::shape_str(t.shape()));
}

// C[m×n] = A[m×k] · B[k×n]. Inner accumulation runs over k in ascending
// order for every output element (ikj loop), which the incremental decoder
// kernels replicate exactly.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw DimensionError("matmul: inner extents disagree: " +
                         detail::shape_str(a.shape()) + " x " +
                         detail::shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for (int i = 0; i < m; ++i) {
    double* orow = po + static_cast<size_t>(i) * n;
    const double* arow = pa + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = pb + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (detail::should_record({a, b})) {
    detail::attach(out, {a, b}, [a, b, m, k, n](const std::vector<double>& g) {
      if (a.requires_grad()) {  // dA = G · B^T
        auto& ga = const_cast<Tensor&>(a).grad_buffer();
        const double* pb = b.ptr();
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* grow = g.data() + static_cast<size_t>(i) * n;
            const double* brow = pb + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[static_cast<size_t>(i) * k + kk] += acc;
          }
      }
      if (b.requires_grad()) {  // dB = A^T · G
        auto& gb = const_cast<Tensor&>(b).grad_buffer();
        const double* pa = a.ptr();
        for (int i = 0; i < m; ++i) {
          const double* arow = pa + static_cast<size_t>(i) * k;
          const double* grow = g.data() + static_cast<size_t>(i) * n;
          for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            double* gbrow = gb.data() + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

// C[m×n] = A[m×k] · B[n×k]^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul_nt");
  check_rank2(b, "matmul_nt");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (k != b.dim(1))
    throw DimensionError("matmul_nt: inner extents disagree: " +
                         detail::shape_str(a.shape()) + " x " +
                         detail::shape_str(b.shape()) + "^T");
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = a.ptr() + static_cast<size_t>(i) * k;
    double* orow = out.ptr() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      orow[j] = detail::dot(arow, b.ptr() + static_cast<size_t>(j) * k, k);
  }
  if (detail::should_record({a, b})) {
    detail::attach(out, {a, b}, [a, b, m, k, n](const std::vector<double>& g) {
      if (a.requires_grad()) {  // dA = G · B
        auto& ga = const_cast<Tensor&>(a).grad_buffer();
        for (int i = 0; i < m; ++i) {
          const double* grow = g.data() + static_cast<size_t>(i) * n;
          double* garow = ga.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < n; ++j) {
            const double gv = grow[j];
            const double* brow = b.ptr() + static_cast<size_t>(j) * k;
            for (int kk = 0; kk < k; ++kk) garow[kk] += gv * brow[kk];
          }
        }
      }
      if (b.requires_grad()) {  // dB = G^T · A
        auto& gb = const_cast<Tensor&>(b).grad_buffer();
        for (int i = 0; i < m; ++i) {
          const double* grow = g.data() + static_cast<size_t>(i) * n;
          const double* arow = a.ptr() + static_cast<size_t>(i) * k;
          for (int j = 0; j < n; ++j) {
            const double gv = grow[j];
            double* gbrow = gb.data() + static_cast<size_t>(j) * k;
            for (int kk = 0; kk < k; ++kk) gbrow[kk] += gv * arow[kk];
          }
        }
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  check_rank2(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.ptr()[static_cast<size_t>(j) * m + i] = a.ptr()[static_cast<size_t>(i) * n + j];
  if (detail::should_record({a})) {
    detail::attach(out, {a}, [a, m, n](const std::vector<double>& g) {
      if (!a.requires_grad()) return;
      auto& ga = const_cast<Tensor&>(a).grad_buffer();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

// ---- shape plumbing ---------------------------------------------------------

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
  check_rank2(a, "slice_cols");
  const int m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || c1 > n || c0 >= c1)
    throw IndexError("slice_cols: range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") out of bounds for " +
                     detail::shape_str(a.shape()));
  const int w = c1 - c0;
  Tensor out = Tensor::zeros({m, w});
  for (int i = 0; i < m; ++i)
    std::memcpy(out.ptr() + static_cast<size_t>(i) * w,
                a.ptr() + static_cast<size_t>(i) * n + c0, sizeof(double) * w);
  if (detail::should_record({a})) {
    detail::attach(out, {a}, [a, m, n, c0, w](const std::vector<double>& g) {
      if (!a.requires_grad()) return;
      auto& ga = const_cast<Tensor&>(a).grad_buffer();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          ga[static_cast<size_t>(i) * n + c0 + j] += g[static_cast<size_t>(i) * w + j];
    });
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const Tensor& p : parts) {
    check_rank2(p, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row counts disagree");
    n += p.dim(1);
  }
  Tensor out = Tensor::zeros({m, n});
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < m; ++i)
      std::memcpy(out.ptr() + static_cast<size_t>(i) * n + off,
                  p.ptr() + static_cast<size_t>(i) * w, sizeof(double) * w);
    off += w;
  }
  bool rec = GradMode::enabled();
  if (rec) {
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    rec = any;
  }
  if (rec) {
    auto node = std::make_shared<detail::Node>();
    node->parents = parts;
    auto captured = parts;
    node->backward = [captured, m, n](const std::vector<double>& g) {
      int off = 0;
      for (const Tensor& p : captured) {
        const int w = p.dim(1);
        if (p.requires_grad()) {
          auto& gp = const_cast<Tensor&>(p).grad_buffer();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              gp[static_cast<size_t>(i) * w + j] += g[static_cast<size_t>(i) * n + off + j];
        }
        off += w;
      }
    };
    Tensor& o = out;
    o.set_requires_grad(true);
    o.set_node(std::move(node));
  }
  return out;
}

// Row gather: out[i] = table[ids[i]]. Backward scatters into the table.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  check_rank2(table, "embedding");
  const int v = table.dim(0), d = table.dim(1);
  const int t = static_cast<int>(ids.size());
  for (int id : ids)
    if (id < 0 || id >= v)
      throw IndexError("embedding: id " + std::to_string(id) +
                       " out of range for table with " + std::to_string(v) + " rows");
  Tensor out = Tensor::zeros({t, d});
  for (int i = 0; i < t; ++i)
    std::memcpy(out.ptr() + static_cast<size_t>(i) * d,
                table.ptr() + static_cast<size_t>(ids[i]) * d, sizeof(double) * d);
  if (detail::should_record({table})) {
    detail::attach(out, {table}, [table, ids, d](const std::vector<double>& g) {
      if (!table.requires_grad()) return;
      auto& gt = const_cast<Tensor&>(table).grad_buffer();
      for (size_t i = 0; i < ids.size(); ++i) {
        double* row = gt.data() + static_cast<size_t>(ids[i]) * d;
        const double* grow = g.data() + i * d;
        for (int j = 0; j < d; ++j) row[j] += grow[j];
      }
    });
  }
  return out;
}

// ---- normalizations ---------------------------------------------------------

namespace detail {
struct AxisLines {
  size_t outer, inner;
  int n;
};
inline AxisLines axis_lines(const Tensor& t, int axis) {
  if (axis < 0 || axis >= t.rank())
    throw DimensionError("axis " + std::to_string(axis) + " invalid for " +
                         shape_str(t.shape()));
  AxisLines al;
  al.n = t.dim(axis);
  al.outer = 1;
  for (int i = 0; i < axis; ++i) al.outer *= static_cast<size_t>(t.dim(i));
  al.inner = 1;
  for (int i = axis + 1; i < t.rank(); ++i) al.inner *= static_cast<size_t>(t.dim(i));
  return al;
}
}  // namespace detail

// Softmax along `axis`, max-subtracted. Non-finite input is a numeric error.
inline Tensor softmax(const Tensor& a, int axis) {
  const auto al = detail::axis_lines(a, axis);
  for (double v : a.data())
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  Tensor out = Tensor::zeros(a.shape());
  std::vector<double> line(static_cast<size_t>(al.n));
  for (size_t o = 0; o < al.outer; ++o)
    for (size_t in = 0; in < al.inner; ++in) {
      const size_t base = o * al.n * al.inner + in;
      for (int i = 0; i < al.n; ++i) line[static_cast<size_t>(i)] = a.ptr()[base + i * al.inner];
      detail::softmax_line(line.data(), al.n);
      for (int i = 0; i < al.n; ++i) out.ptr()[base + i * al.inner] = line[static_cast<size_t>(i)];
    }
  if (detail::should_record({a})) {
    // Capture a copy of the output values rather than the handle itself, so
    // the node does not own its own tensor.
    detail::attach(out, {a}, [a, y = out.data(), al](const std::vector<double>& g) {
      if (!a.requires_grad()) return;
      auto& ga = const_cast<Tensor&>(a).grad_buffer();
      for (size_t o = 0; o < al.outer; ++o)
        for (size_t in = 0; in < al.inner; ++in) {
          const size_t base = o * al.n * al.inner + in;
          double dotv = 0.0;
          for (int i = 0; i < al.n; ++i) dotv += g[base + i * al.inner] * y[base + i * al.inner];
          for (int i = 0; i < al.n; ++i)
            ga[base + i * al.inner] += y[base + i * al.inner] * (g[base + i * al.inner] - dotv);
        }
    });
  }
  return out;
}

inline Tensor log_softmax(const Tensor& a, int axis) {
  const auto al = detail::axis_lines(a, axis);
  Tensor out = Tensor::zeros(a.shape());
  std::vector<double> line(static_cast<size_t>(al.n)), res(static_cast<size_t>(al.n));
  for (size_t o = 0; o < al.outer; ++o)
    for (size_t in = 0; in < al.inner; ++in) {
      const size_t base = o * al.n * al.inner + in;
      for (int i = 0; i < al.n; ++i) line[static_cast<size_t>(i)] = a.ptr()[base + i * al.inner];
      detail::log_softmax_line(line.data(), al.n, res.data());
      for (int i = 0; i < al.n; ++i) out.ptr()[base + i * al.inner] = res[static_cast<size_t>(i)];
    }
  if (detail::should_record({a})) {
    detail::attach(out, {a}, [a, y = out.data(), al](const std::vector<double>& g) {
      if (!a.requires_grad()) return;
      auto& ga = const_cast<Tensor&>(a).grad_buffer();
      for (size_t o = 0; o < al.outer; ++o)
        for (size_t in = 0; in < al.inner; ++in) {
          const size_t base = o * al.n * al.inner + in;
          double gsum = 0.0;
          for (int i = 0; i < al.n; ++i) gsum += g[base + i * al.inner];
          for (int i = 0; i < al.n; ++i)
            ga[base + i * al.inner] += g[base + i * al.inner] - std::exp(y[base + i * al.inner]) * gsum;
        }
    });
  }
  return out;
}

// Layer norm over the last axis. gain and bias are rank-1 of that extent.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-6) {
  const int n = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n)
    throw DimensionError("layer_norm: gain/bias must be rank-1 of extent " +
                         std::to_string(n));
  const size_t rows = x.size() / static_cast<size_t>(n);
  Tensor out = Tensor::zeros(x.shape());
  for (size_t r = 0; r < rows; ++r)
    detail::layer_norm_line(x.ptr() + r * n, n, gain.ptr(), bias.ptr(), eps,
                            out.ptr() + r * n);
  if (detail::should_record({x, gain, bias})) {
    detail::attach(out, {x, gain, bias}, [x, gain, bias, eps, n, rows](const std::vector<double>& g) {
      const double* px = x.ptr();
      for (size_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        const double* gr = g.data() + r * n;
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += xr[i];
        mean /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        if (gain.requires_grad()) {
          auto& gg = const_cast<Tensor&>(gain).grad_buffer();
          for (int i = 0; i < n; ++i) gg[static_cast<size_t>(i)] += gr[i] * (xr[i] - mean) * inv;
        }
        if (bias.requires_grad()) {
          auto& gb = const_cast<Tensor&>(bias).grad_buffer();
          for (int i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += gr[i];
        }
        if (x.requires_grad()) {
          auto& gx = const_cast<Tensor&>(x).grad_buffer();
          // dxhat = g * gain;  dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
          double m1 = 0.0, m2 = 0.0;
          for (int i = 0; i < n; ++i) {
            const double dxh = gr[i] * gain.ptr()[i];
            const double xh = (xr[i] - mean) * inv;
            m1 += dxh;
            m2 += dxh * xh;
          }
          m1 /= n;
          m2 /= n;
          for (int i = 0; i < n; ++i) {
            const double dxh = gr[i] * gain.ptr()[i];
            const double xh = (xr[i] - mean) * inv;
            gx[r * n + i] += inv * (dxh - m1 - xh * m2);
          }
        }
      }
    });
  }
  return out;
}

// ---- reductions & losses ----------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (detail::should_record({a})) {
    detail::attach(out, {a}, [a](const std::vector<double>& g) {
      if (!a.requires_grad()) return;
      auto& ga = const_cast<Tensor&>(a).grad_buffer();
      for (double& v : ga) v += g[0];
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc / n);
  if (detail::should_record({a})) {
    detail::attach(out, {a}, [a, n](const std::vector<double>& g) {
      if (!a.requires_grad()) return;
      auto& ga = const_cast<Tensor&>(a).grad_buffer();
      for (double& v : ga) v += g[0] / n;
    });
  }
  return out;
}

// Label-smoothed cross-entropy of one logit row:
//   loss = (1-eps) * NLL(target) + eps * mean_v NLL(v).
inline Tensor label_smoothed_cross_entropy(const Tensor& logits, int target,
                                           double eps_ls) {
  if (logits.rank() != 1)
    throw DimensionError("label_smoothed_cross_entropy: expected a rank-1 logit vector");
  const int v = logits.dim(0);
  if (target < 0 || target >= v)
    throw IndexError("label_smoothed_cross_entropy: target " + std::to_string(target) +
                     " out of range for vocabulary of " + std::to_string(v));
  if (eps_ls < 0.0 || eps_ls >= 1.0)
    throw ContractError("label_smoothed_cross_entropy: eps_ls must lie in [0,1)");
  std::vector<double> lsm(static_cast<size_t>(v));
  detail::log_softmax_line(logits.ptr(), v, lsm.data());
  double mean_nll = 0.0;
  for (double l : lsm) mean_nll -= l;
  mean_nll /= v;
  const double loss = (1.0 - eps_ls) * (-lsm[static_cast<size_t>(target)]) + eps_ls * mean_nll;
  Tensor out = Tensor::scalar(loss);
  if (detail::should_record({logits})) {
    detail::attach(out, {logits}, [logits, target, eps_ls, v, lsm](const std::vector<double>& g) {
      if (!logits.requires_grad()) return;
      auto& gl = const_cast<Tensor&>(logits).grad_buffer();
      // grad = softmax(logits) - q, with q the smoothed target distribution
      for (int i = 0; i < v; ++i) {
        const double p = std::exp(lsm[static_cast<size_t>(i)]);
        const double q = (i == target ? 1.0 - eps_ls : 0.0) + eps_ls / v;
        gl[static_cast<size_t>(i)] += g[0] * (p - q);
      }
    });
  }
  return out;
}

// Sum of per-row label-smoothed cross-entropies over a (T,V) logit matrix.
inline Tensor label_smoothed_ce_rows(const Tensor& logits,
                                     const std::vector<int>& targets, double eps_ls) {
  check_rank2(logits, "label_smoothed_ce_rows");
  const int t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != t)
    throw DimensionError("label_smoothed_ce_rows: row/target count mismatch");
  if (eps_ls < 0.0 || eps_ls >= 1.0)
    throw ContractError("label_smoothed_ce_rows: eps_ls must lie in [0,1)");
  std::vector<double> lsm(static_cast<size_t>(t) * v);
  double loss = 0.0;
  for (int i = 0; i < t; ++i) {
    if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= v)
      throw IndexError("label_smoothed_ce_rows: target out of range at row " + std::to_string(i));
    detail::log_softmax_line(logits.ptr() + static_cast<size_t>(i) * v, v,
                             lsm.data() + static_cast<size_t>(i) * v);
    double mean_nll = 0.0;
    const double* row = lsm.data() + static_cast<size_t>(i) * v;
    for (int j = 0; j < v; ++j) mean_nll -= row[j];
    mean_nll /= v;
    loss += (1.0 - eps_ls) * (-row[targets[static_cast<size_t>(i)]]) + eps_ls * mean_nll;
  }
  Tensor out = Tensor::scalar(loss);
  if (detail::should_record({logits})) {
    detail::attach(out, {logits}, [logits, targets, eps_ls, t, v,
                                   lsm = std::move(lsm)](const std::vector<double>& g) {
      if (!logits.requires_grad()) return;
      auto& gl = const_cast<Tensor&>(logits).grad_buffer();
      for (int i = 0; i < t; ++i) {
        const double* row = lsm.data() + static_cast<size_t>(i) * v;
        double* grow = gl.data() + static_cast<size_t>(i) * v;
        const int tgt = targets[static_cast<size_t>(i)];
        for (int j = 0; j < v; ++j) {
          const double p = std::exp(row[j]);
          const double q = (j == tgt ? 1.0 - eps_ls : 0.0) + eps_ls / v;
          grow[j] += g[0] * (p - q);
        }
      }
    });
  }
  return out;
}

// Inverted dropout; identity when not training or p == 0. Disabled in all
// scoring and decoding paths (those run under NoGradGuard in eval mode).
inline Tensor dropout(const Tensor& a, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw ContractError("dropout: rate must lie in [0,1)");
  const double keep = 1.0 - p;
  std::vector<double> mask(a.size());
  for (double& m : mask) m = rng.uniform() < p ? 0.0 : 1.0 / keep;
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] * mask[i];
  if (detail::should_record({a})) {
    detail::attach(out, {a}, [a, mask = std::move(mask)](const std::vector<double>& g) {
      if (!a.requires_grad()) return;
      auto& ga = const_cast<Tensor&>(a).grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
    });
  }
  return out;
}

// ---- backward ---------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients of leaves accumulate
// across calls; interior results get a fresh pass-local gradient each call.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        detail::shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative topological sort over recorded nodes.
  std::vector<Tensor> order;
  std::vector<std::pair<Tensor, size_t>> stack;
  std::unordered_set<const detail::TensorData*> visited;
  if (loss.node()) {
    stack.push_back({loss, 0});
    visited.insert(loss.raw());
  }
  while (!stack.empty()) {
    auto& [t, idx] = stack.back();
    const auto& parents = t.node()->parents;
    bool descended = false;
    while (idx < parents.size()) {
      const Tensor& p = parents[idx++];
      if (p.node() && visited.insert(p.raw()).second) {
        stack.push_back({p, 0});
        descended = true;
        break;
      }
    }
    if (!descended && idx >= parents.size()) {
      order.push_back(t);
      stack.pop_back();
    }
  }

  // Interior gradients are pass-local.
  for (Tensor& t : order) {
    auto& g = t.grad_buffer();
    std::fill(g.begin(), g.end(), 0.0);
  }
  const_cast<Tensor&>(loss).grad_buffer()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it)
    it->node()->backward(it->grad());
}

}  // namespace ilmf
