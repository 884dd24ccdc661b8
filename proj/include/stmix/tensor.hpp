#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "stmix/rng.hpp"

namespace stmix {

using Shape = std::vector<int>;

long long shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericsError : std::runtime_error {
  explicit NumericsError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad, accumulates into parents' grad buffers.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Dense double-precision tensor participating in a reverse-mode tape.
/// Values are immutable once produced by an op; only leaves (parameters,
/// inputs) may be mutated in place between passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  /// Gaussian(0, stddev) entries drawn from rng.
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  long long size() const { return static_cast<long long>(node_->value.size()); }

  const std::vector<double>& data() const { return node_->value; }
  double at(long long i) const { return node_->value[static_cast<std::size_t>(i)]; }
  double scalar() const;

  /// In-place access; valid only for leaf tensors (no parents).
  std::vector<double>& leaf_data();

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Reverse pass from a scalar tensor; accumulates into leaf grads.
  void backward();

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- primitive ops (forward + analytic backward on the tape) ----

Tensor matmul(const Tensor& a, const Tensor& b);   // [m×k]·[k×n]
Tensor transpose(const Tensor& a);                 // 2-D
Tensor add(const Tensor& a, const Tensor& b);      // same shape
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& a, const Tensor& b);  // a[..×n] + b[n] per row
Tensor gelu(const Tensor& a);                      // exact erf form
Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor sum_all(const Tensor& a);                   // -> shape {1}
Tensor mean_rows(const Tensor& a);                 // [m×n] -> [1×n]; canonical summation order
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, int row0, int nrows);      // 2-D
Tensor gather_rows(const Tensor& a, std::vector<int> idx);    // 2-D
Tensor scatter_rows(int nrows_out, const std::vector<int>& idx, const Tensor& src);  // zeros elsewhere
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Softmax cross-entropy against an integer label; logits shape {C} or {1,C}.
Tensor cross_entropy_logits(const Tensor& logits, int label);

/// Channel-indexed frame shift on a [T*tokens_per_frame × C] matrix (row
/// order frame-major). channel_offset[c] = t' means output(t,s,c) reads
/// x(t+t', s, c); frames outside [0,T-1] read as zero. With
/// skip_first_token, row s=0 of every frame (the class token) is copied
/// unshifted. Performs no multiply-accumulates.
Tensor temporal_channel_shift_raw(const Tensor& x, int frames, int tokens_per_frame,
                                  const std::vector<int>& channel_offset,
                                  bool skip_first_token);

/// Fault injection for the harness: when enabled, the shift wraps frame
/// indices instead of zero-filling, which breaks temporal locality.
void set_shift_boundary_wrap_fault(bool on);
bool shift_boundary_wrap_fault();

// ---- multiply-accumulate instrumentation ----

enum class MacCategory : int {
  PatchEmbed = 0,
  QkvProj,
  AttentionScores,
  AttentionApply,
  HeadProj,
  Mlp,
  Summary,
  Aggregation,
  Classifier,
  Other,
  kCount
};

struct MacCounter {
  long long by_category[static_cast<int>(MacCategory::kCount)] = {};
  long long total() const {
    long long t = 0;
    for (long long v : by_category) t += v;
    return t;
  }
  long long get(MacCategory c) const { return by_category[static_cast<int>(c)]; }
};

/// Installs a counter for the current thread; restores the previous one on
/// destruction. While active, every matmul adds m*k*n MACs under the
/// current category.
class MacScope {
 public:
  explicit MacScope(MacCounter* counter);
  ~MacScope();
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

 private:
  MacCounter* prev_;
};

class MacCategoryScope {
 public:
  explicit MacCategoryScope(MacCategory c);
  ~MacCategoryScope();
  MacCategoryScope(const MacCategoryScope&) = delete;
  MacCategoryScope& operator=(const MacCategoryScope&) = delete;

 private:
  MacCategory prev_;
};

namespace detail {
void count_macs(long long n);
Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               std::vector<Tensor> parents, std::function<void(Node&)> backward_fn);
void check_finite(const char* op, const std::vector<double>& v);
}  // namespace detail

}  // namespace stmix
