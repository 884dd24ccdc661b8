#include "stmix/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace stmix {

long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

thread_local MacCounter* g_active_counter = nullptr;
thread_local MacCategory g_category = MacCategory::Other;
std::atomic<bool> g_shift_wrap_fault{false};

void check_shape_positive(const char* op, const Shape& s) {
  for (int d : s) {
    if (d <= 0) throw ShapeError(std::string(op) + ": non-positive extent in " + shape_str(s));
  }
}

// C[m×n] += A[m×k] · B[k×n], accumulation over k in ascending order for
// every output element regardless of blocking.
void gemm_accum(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<long long>(i) * k;
    double* crow = c + static_cast<long long>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) {
        // Still a defined contribution of exactly zero; skip the row walk.
        continue;
      }
      const double* brow = b + static_cast<long long>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A^T[k×m]^T... effectively C[m×n] += A[k×m]^T · B[k×n].
void gemm_at_b(const double* a, const double* b, double* c, int k, int m, int n) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<long long>(p) * m;
    const double* brow = b + static_cast<long long>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<long long>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×k] += A[m×n] · B[k×n]^T.
void gemm_a_bt(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<long long>(i) * n;
    double* crow = c + static_cast<long long>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double* brow = b + static_cast<long long>(j) * n;
      double acc = 0.0;
      for (int p = 0; p < n; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

}  // namespace

namespace detail {

void count_macs(long long n) {
  if (g_active_counter != nullptr) {
    g_active_counter->by_category[static_cast<int>(g_category)] += n;
  }
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericsError(std::string("non-finite value produced by ") + op);
  }
}

Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               std::vector<Tensor> parents, std::function<void(Node&)> backward_fn) {
  check_finite(name, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = name;
  bool needs = false;
  for (const Tensor& p : parents) {
    n->parents.push_back(p.node());
    needs = needs || p.node()->requires_grad;
  }
  n->requires_grad = needs;
  if (needs) n->backward_fn = std::move(backward_fn);
  return Tensor(std::move(n));
}

}  // namespace detail

MacScope::MacScope(MacCounter* counter) : prev_(g_active_counter) { g_active_counter = counter; }
MacScope::~MacScope() { g_active_counter = prev_; }
MacCategoryScope::MacCategoryScope(MacCategory c) : prev_(g_category) { g_category = c; }
MacCategoryScope::~MacCategoryScope() { g_category = prev_; }

void set_shift_boundary_wrap_fault(bool on) { g_shift_wrap_fault.store(on); }
bool shift_boundary_wrap_fault() { return g_shift_wrap_fault.load(); }

// ---- construction ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape_positive("zeros", shape);
  auto n = std::make_shared<detail::Node>();
  n->value.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node()->value.begin(), t.node()->value.end(), v);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape_positive("from_data", shape);
  if (shape_numel(shape) != static_cast<long long>(data.size())) {
    throw ShapeError("from_data: " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
  }
  detail::check_finite("from_data", data);
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : t.node()->value) x = stddev * rng.gaussian();
  return t;
}

double Rng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller on (0,1] uniforms.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

double Tensor::scalar() const {
  if (size() != 1) throw ShapeError("scalar(): tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

std::vector<double>& Tensor::leaf_data() {
  if (!is_leaf()) throw std::logic_error("leaf_data(): tensor was produced by an op");
  return node_->value;
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->value.size(), 0.0);
}

void Tensor::backward() {
  if (size() != 1) throw ShapeError("backward(): root must be scalar");
  // Topological order by iterative DFS over requires_grad subgraph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  struct Frame {
    detail::Node* n;
    std::size_t next_child;
  };
  std::vector<Frame> stack;
  if (node_->requires_grad) stack.push_back({node_.get(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child == 0 && seen.count(f.n)) {
      stack.pop_back();
      continue;
    }
    if (f.next_child < f.n->parents.size()) {
      detail::Node* c = f.n->parents[f.next_child++].get();
      if (c->requires_grad && !seen.count(c)) stack.push_back({c, 0});
    } else {
      seen.insert(f.n);
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order) n->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) {
      for (auto& p : n->parents) p->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  detail::count_macs(static_cast<long long>(m) * k * n);
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  gemm_accum(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_op(
      "matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node& node) {
        if (an->requires_grad) gemm_a_bt(node.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        if (bn->requires_grad) gemm_at_b(an->value.data(), node.grad.data(), bn->grad.data(), m, k, n);
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = a.data()[static_cast<std::size_t>(i) * n + j];
  auto an = a.node();
  return detail::make_op("transpose", {n, m}, std::move(out), {a}, [an, m, n](detail::Node& node) {
    if (!an->requires_grad) return;
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        an->grad[static_cast<std::size_t>(i) * n + j] += node.grad[static_cast<std::size_t>(j) * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op("add", a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& node) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] += node.grad[i];
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (double& x : out) x *= c;
  auto an = a.node();
  return detail::make_op("scale", a.shape(), std::move(out), {a}, [an, c](detail::Node& node) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += c * node.grad[i];
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  const int n = a.dim(a.rank() - 1);
  if (b.size() != n) {
    throw ShapeError("add_rowvec: last dim " + std::to_string(n) + " vs vector " +
                     std::to_string(b.size()));
  }
  const long long rows = a.size() / n;
  std::vector<double> out(a.data());
  for (long long r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(r) * n + j] += b.data()[static_cast<std::size_t>(j)];
  auto an = a.node(), bn = b.node();
  return detail::make_op("add_rowvec", a.shape(), std::move(out), {a, b}, [an, bn, rows, n](detail::Node& node) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
    if (bn->requires_grad)
      for (long long r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) bn->grad[static_cast<std::size_t>(j)] += node.grad[static_cast<std::size_t>(r) * n + j];
  });
}

Tensor gelu(const Tensor& a) {
  // Exact form x·Φ(x) with Φ the standard normal CDF.
  static const double inv_sqrt2 = 0.70710678118654752440;
  static const double inv_sqrt2pi = 0.39894228040143267794;
  std::vector<double> out(a.data());
  for (double& x : out) x = x * 0.5 * (1.0 + std::erf(x * inv_sqrt2));
  auto an = a.node();
  return detail::make_op("gelu", a.shape(), std::move(out), {a}, [an](detail::Node& node) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      const double x = an->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      an->grad[i] += node.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor softmax_lastdim(const Tensor& a) {
  const int n = a.dim(a.rank() - 1);
  if (n < 1) throw ShapeError("softmax_lastdim: empty last dimension");
  const long long rows = a.size() / n;
  std::vector<double> out(a.data());
  for (long long r = 0; r < rows; ++r) {
    double* row = out.data() + static_cast<std::size_t>(r) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= sum;
  }
  auto an = a.node();
  return detail::make_op("softmax", a.shape(), std::move(out), {a}, [an, rows, n](detail::Node& node) {
    if (!an->requires_grad) return;
    for (long long r = 0; r < rows; ++r) {
      const double* s = node.value.data() + static_cast<std::size_t>(r) * n;
      const double* dy = node.grad.data() + static_cast<std::size_t>(r) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += dy[j] * s[j];
      double* dx = an->grad.data() + static_cast<std::size_t>(r) * n;
      for (int j = 0; j < n; ++j) dx[j] += s[j] * (dy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int d = x.dim(x.rank() - 1);
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: gamma/beta length must equal last dim " + std::to_string(d));
  }
  const long long rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (long long r = 0; r < rows; ++r) {
    const double* xi = x.data().data() + static_cast<std::size_t>(r) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xi[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= d;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = istd;
    for (int j = 0; j < d; ++j) {
      const double xh = (xi[j] - mean) * istd;
      xhat[static_cast<std::size_t>(r) * d + j] = xh;
      out[static_cast<std::size_t>(r) * d + j] = gamma.data()[static_cast<std::size_t>(j)] * xh + beta.data()[static_cast<std::size_t>(j)];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
  auto istd_v = std::make_shared<std::vector<double>>(std::move(inv_std));
  return detail::make_op(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xh, istd_v, rows, d](detail::Node& node) {
        for (long long r = 0; r < rows; ++r) {
          const double* dy = node.grad.data() + static_cast<std::size_t>(r) * d;
          const double* xhr = xh->data() + static_cast<std::size_t>(r) * d;
          if (gn->requires_grad || bn->requires_grad) {
            for (int j = 0; j < d; ++j) {
              if (gn->requires_grad) gn->grad[static_cast<std::size_t>(j)] += dy[j] * xhr[j];
              if (bn->requires_grad) bn->grad[static_cast<std::size_t>(j)] += dy[j];
            }
          }
          if (xn->requires_grad) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (int j = 0; j < d; ++j) {
              const double dxh = dy[j] * gn->value[static_cast<std::size_t>(j)];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhr[j];
            }
            mean_dxhat /= d;
            mean_dxhat_xhat /= d;
            const double istd = (*istd_v)[static_cast<std::size_t>(r)];
            double* dx = xn->grad.data() + static_cast<std::size_t>(r) * d;
            for (int j = 0; j < d; ++j) {
              const double dxh = dy[j] * gn->value[static_cast<std::size_t>(j)];
              dx[j] += istd * (dxh - mean_dxhat - xhr[j] * mean_dxhat_xhat);
            }
          }
        }
      });
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return detail::make_op("sum", {1}, {s}, {a}, [an](detail::Node& node) {
    if (!an->requires_grad) return;
    const double g = node.grad[0];
    for (double& x : an->grad) x += g;
  });
}

Tensor mean_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("mean_rows: expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  // Summands are sorted per column before accumulation so the result is
  // exactly invariant to row permutations of the input.
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  std::vector<double> col(static_cast<std::size_t>(m));
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < m; ++i) col[static_cast<std::size_t>(i)] = a.data()[static_cast<std::size_t>(i) * n + j];
    std::sort(col.begin(), col.end());
    double s = 0.0;
    for (double v : col) s += v;
    out[static_cast<std::size_t>(j)] = s / m;
  }
  auto an = a.node();
  return detail::make_op("mean_rows", {1, n}, std::move(out), {a}, [an, m, n](detail::Node& node) {
    if (!an->requires_grad) return;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        an->grad[static_cast<std::size_t>(i) * n + j] += node.grad[static_cast<std::size_t>(j)] / m;
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape_positive("reshape", shape);
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data());
  auto an = a.node();
  return detail::make_op("reshape", std::move(shape), std::move(out), {a}, [an](detail::Node& node) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
  });
}

Tensor slice_rows(const Tensor& a, int row0, int nrows) {
  if (a.rank() != 2) throw ShapeError("slice_rows: expects 2-D");
  const int m = a.dim(0), n = a.dim(1);
  if (row0 < 0 || nrows < 1 || row0 + nrows > m) {
    throw ShapeError("slice_rows: range [" + std::to_string(row0) + ", " +
                     std::to_string(row0 + nrows) + ") out of " + std::to_string(m) + " rows");
  }
  std::vector<double> out(a.data().begin() + static_cast<std::size_t>(row0) * n,
                          a.data().begin() + static_cast<std::size_t>(row0 + nrows) * n);
  auto an = a.node();
  return detail::make_op("slice_rows", {nrows, n}, std::move(out), {a}, [an, row0, n](detail::Node& node) {
    if (!an->requires_grad) return;
    double* dst = an->grad.data() + static_cast<std::size_t>(row0) * n;
    for (std::size_t i = 0; i < node.grad.size(); ++i) dst[i] += node.grad[i];
  });
}

Tensor gather_rows(const Tensor& a, std::vector<int> idx) {
  if (a.rank() != 2) throw ShapeError("gather_rows: expects 2-D");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(idx.size() * static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= m) throw ShapeError("gather_rows: index out of range");
    std::memcpy(out.data() + i * n, a.data().data() + static_cast<std::size_t>(idx[i]) * n,
                sizeof(double) * static_cast<std::size_t>(n));
  }
  auto an = a.node();
  auto ids = std::make_shared<std::vector<int>>(std::move(idx));
  return detail::make_op("gather_rows", {static_cast<int>(ids->size()), n}, std::move(out), {a},
                         [an, ids, n](detail::Node& node) {
                           if (!an->requires_grad) return;
                           for (std::size_t i = 0; i < ids->size(); ++i) {
                             double* dst = an->grad.data() + static_cast<std::size_t>((*ids)[i]) * n;
                             const double* src = node.grad.data() + i * n;
                             for (int j = 0; j < n; ++j) dst[j] += src[j];
                           }
                         });
}

Tensor scatter_rows(int nrows_out, const std::vector<int>& idx, const Tensor& src) {
  if (src.rank() != 2) throw ShapeError("scatter_rows: expects 2-D source");
  const int n = src.dim(1);
  if (static_cast<int>(idx.size()) != src.dim(0)) throw ShapeError("scatter_rows: index count mismatch");
  std::vector<double> out(static_cast<std::size_t>(nrows_out) * n, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= nrows_out) throw ShapeError("scatter_rows: index out of range");
    std::memcpy(out.data() + static_cast<std::size_t>(idx[i]) * n, src.data().data() + i * n,
                sizeof(double) * static_cast<std::size_t>(n));
  }
  auto sn = src.node();
  auto ids = std::make_shared<std::vector<int>>(idx);
  return detail::make_op("scatter_rows", {nrows_out, n}, std::move(out), {src},
                         [sn, ids, n](detail::Node& node) {
                           if (!sn->requires_grad) return;
                           for (std::size_t i = 0; i < ids->size(); ++i) {
                             const double* src_g = node.grad.data() + static_cast<std::size_t>((*ids)[i]) * n;
                             double* dst = sn->grad.data() + i * n;
                             for (int j = 0; j < n; ++j) dst[j] += src_g[j];
                           }
                         });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const int n = parts[0].dim(1);
  int rows = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(1) != n) throw ShapeError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows) * n);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<int> sizes;
  for (const Tensor& p : parts) sizes.push_back(p.dim(0));
  std::vector<std::shared_ptr<detail::Node>> pn;
  for (const Tensor& p : parts) pn.push_back(p.node());
  return detail::make_op("concat_rows", {rows, n}, std::move(out), parts,
                         [pn, sizes, n](detail::Node& node) {
                           std::size_t off = 0;
                           for (std::size_t pi = 0; pi < pn.size(); ++pi) {
                             const std::size_t len = static_cast<std::size_t>(sizes[pi]) * n;
                             if (pn[pi]->requires_grad) {
                               for (std::size_t i = 0; i < len; ++i) pn[pi]->grad[i] += node.grad[off + i];
                             }
                             off += len;
                           }
                         });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const int m = parts[0].dim(0);
  int cols = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) throw ShapeError("concat_cols: row mismatch");
    cols += p.dim(1);
  }
  std::vector<double> out(static_cast<std::size_t>(m) * cols);
  int c0 = 0;
  for (const Tensor& p : parts) {
    const int pc = p.dim(1);
    for (int i = 0; i < m; ++i)
      std::memcpy(out.data() + static_cast<std::size_t>(i) * cols + c0,
                  p.data().data() + static_cast<std::size_t>(i) * pc, sizeof(double) * static_cast<std::size_t>(pc));
    c0 += pc;
  }
  std::vector<int> widths;
  for (const Tensor& p : parts) widths.push_back(p.dim(1));
  std::vector<std::shared_ptr<detail::Node>> pn;
  for (const Tensor& p : parts) pn.push_back(p.node());
  return detail::make_op("concat_cols", {m, cols}, std::move(out), parts,
                         [pn, widths, m, cols](detail::Node& node) {
                           int c0 = 0;
                           for (std::size_t pi = 0; pi < pn.size(); ++pi) {
                             const int pc = widths[pi];
                             if (pn[pi]->requires_grad) {
                               for (int i = 0; i < m; ++i)
                                 for (int j = 0; j < pc; ++j)
                                   pn[pi]->grad[static_cast<std::size_t>(i) * pc + j] +=
                                       node.grad[static_cast<std::size_t>(i) * cols + c0 + j];
                             }
                             c0 += pc;
                           }
                         });
}

Tensor cross_entropy_logits(const Tensor& logits, int label) {
  const int c = static_cast<int>(logits.size());
  if (label < 0 || label >= c) throw ShapeError("cross_entropy_logits: label out of range");
  const double* z = logits.data().data();
  double mx = z[0];
  for (int j = 1; j < c; ++j) mx = std::max(mx, z[j]);
  double sum = 0.0;
  for (int j = 0; j < c; ++j) sum += std::exp(z[j] - mx);
  const double loss = std::log(sum) + mx - z[label];
  auto ln = logits.node();
  return detail::make_op("cross_entropy", {1}, {loss}, {logits}, [ln, label, c, mx, sum](detail::Node& node) {
    if (!ln->requires_grad) return;
    const double g = node.grad[0];
    for (int j = 0; j < c; ++j) {
      double p = std::exp(ln->value[static_cast<std::size_t>(j)] - mx) / sum;
      if (j == label) p -= 1.0;
      ln->grad[static_cast<std::size_t>(j)] += g * p;
    }
  });
}

Tensor temporal_channel_shift_raw(const Tensor& x, int frames, int tokens_per_frame,
                                  const std::vector<int>& channel_offset,
                                  bool skip_first_token) {
  const int C = static_cast<int>(channel_offset.size());
  if (x.rank() != 2 || x.dim(0) != frames * tokens_per_frame || x.dim(1) != C) {
    throw ShapeError("temporal_channel_shift: expected [" + std::to_string(frames * tokens_per_frame) +
                     "x" + std::to_string(C) + "], got " + shape_str(x.shape()));
  }
  bool identity = true;
  for (int off : channel_offset) identity = identity && off == 0;
  if (identity) return x;  // no data movement needed

  const bool wrap = shift_boundary_wrap_fault();
  const int P = tokens_per_frame;
  std::vector<double> out(x.size(), 0.0);
  for (int t = 0; t < frames; ++t) {
    for (int s = 0; s < P; ++s) {
      const std::size_t row = static_cast<std::size_t>(t) * P + s;
      double* dst = out.data() + row * C;
      const double* own = x.data().data() + row * C;
      if (skip_first_token && s == 0) {
        std::memcpy(dst, own, sizeof(double) * static_cast<std::size_t>(C));
        continue;
      }
      for (int c = 0; c < C; ++c) {
        int src_t = t + channel_offset[static_cast<std::size_t>(c)];
        if (wrap) src_t = ((src_t % frames) + frames) % frames;
        if (src_t < 0 || src_t >= frames) continue;  // zero fill
        dst[c] = x.data()[(static_cast<std::size_t>(src_t) * P + s) * C + c];
      }
    }
  }
  auto xn = x.node();
  auto offs = std::make_shared<std::vector<int>>(channel_offset);
  return detail::make_op(
      "temporal_shift", x.shape(), std::move(out), {x},
      [xn, offs, frames, P, C, skip_first_token, wrap](detail::Node& node) {
        if (!xn->requires_grad) return;
        // Exact adjoint: scatter each output gradient back to the frame it read.
        for (int t = 0; t < frames; ++t) {
          for (int s = 0; s < P; ++s) {
            const std::size_t row = static_cast<std::size_t>(t) * P + s;
            const double* g = node.grad.data() + row * C;
            if (skip_first_token && s == 0) {
              double* dst = xn->grad.data() + row * C;
              for (int c = 0; c < C; ++c) dst[c] += g[c];
              continue;
            }
            for (int c = 0; c < C; ++c) {
              int src_t = t + (*offs)[static_cast<std::size_t>(c)];
              if (wrap) src_t = ((src_t % frames) + frames) % frames;
              if (src_t < 0 || src_t >= frames) continue;
              xn->grad[(static_cast<std::size_t>(src_t) * P + s) * C + c] += g[c];
            }
          }
        }
      });
}

}  // namespace stmix
