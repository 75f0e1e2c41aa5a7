#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "aircoop/rng.hpp"

namespace aircoop {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // same length as value once gradients flow
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Pulls grad from this node into parents' grad buffers.
  std::function<void(Node&)> backprop;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Thread-local switch: while disabled, ops compute values only (no graph).
bool grad_enabled();
void set_grad_enabled(bool on);

}  // namespace detail

// RAII guard disabling graph recording (inference / target construction).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::set_grad_enabled(false); }
  ~NoGradGuard() { detail::set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense 64-bit tensor with reverse-mode autodiff. Copying a Tensor copies the
// handle (shared node); use clone() for a value copy. The tape is dynamic:
// every op links result -> operands, backward() walks the graph once in
// reverse topological order. Single-threaded per graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;
  bool requires_grad() const;
  void set_requires_grad(bool on);

  std::span<const double> data() const;
  std::span<double> raw_data();  // in-place value edit (optimizer updates)
  std::span<const double> grad() const;  // empty if never allocated
  void zero_grad();

  double item() const;                       // scalar tensors only
  double at(std::size_t flat_index) const;   // bounds-checked

  Tensor clone() const;   // deep copy, detached from the graph
  Tensor detach() const;  // same storage view as a fresh constant leaf

  // Reverse pass from a scalar loss. Repeated calls accumulate into grads.
  void backward() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// A named learned tensor. Frozen parameters are excluded from gradient flow
// (requires_grad false) and from optimizer update sets.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool frozen = false;

  void set_frozen(bool f) {
    frozen = f;
    tensor.set_requires_grad(!f);
  }
};

// ---- elementwise / broadcasting ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);      // subgradient 0 at 0
Tensor softplus(const Tensor& a); // log(1+e^x), overflow-safe
Tensor square(const Tensor& a);

// Elementwise smooth-L1 of (a - b); beta is the quadratic/linear switch point.
Tensor smooth_l1(const Tensor& a, const Tensor& b, double beta);

// Elementwise clip. lo/hi broadcast against x. Gradient is identity strictly
// inside (lo, hi), zero outside and exactly at the boundary.
Tensor clamp(const Tensor& x, const Tensor& lo, const Tensor& hi);
Tensor clamp(const Tensor& x, double lo, double hi);

// Elementwise maximum; at ties the gradient goes to `a`.
Tensor maximum(const Tensor& a, const Tensor& b);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// [L, D] -> [D], mean over the sequence axis.
Tensor global_avg_pool(const Tensor& x);

// ---- shape ----
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat_axis0(const Tensor& a, const Tensor& b);
Tensor slice_axis0(const Tensor& a, std::size_t start, std::size_t count);

// ---- linear algebra ----
// [.., M, K] x [.., K, N] -> [.., M, N]; batch dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- neural-net ops ----
// input [C_in, H, W], kernel [C_out, C_in/groups, kh, kw], odd kh/kw,
// zero padding, unit stride: H' = H + 2*padding - kh + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t groups, std::size_t padding);

// Normalizes over the last axis (length D), then affine with gamma/beta [D].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& x);

// [C, H, W] -> [C, out_h, out_w], bilinear, cell-center (align-corners-false)
// convention, border-replicated sampling.
Tensor bilinear_resample(const Tensor& input, std::size_t out_h, std::size_t out_w);

// Samples input [C, H, W] at source grid coords (sx, sy) = A*(x, y) + t per
// output cell; samples falling outside the grid contribute zero. Differentiable
// w.r.t. input only.
struct AffineMap2 {
  double a11 = 1, a12 = 0, tx = 0;
  double a21 = 0, a22 = 1, ty = 0;
};
Tensor affine_warp(const Tensor& input, const AffineMap2& out_to_src);

}  // namespace aircoop
