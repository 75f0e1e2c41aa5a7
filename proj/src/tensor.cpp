#include "aircoop/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace aircoop {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

void check_shape_positive(const Shape& s) {
  for (std::size_t e : s)
    if (e == 0) throw std::invalid_argument("tensor shape has zero extent: " + shape_str(s));
}

[[noreturn]] void dim_error(const std::string& msg) { throw std::invalid_argument(msg); }

Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<NodePtr> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  if (detail::grad_enabled()) {
    for (const auto& p : parents) rg = rg || (p && p->requires_grad);
  }
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
    n->ensure_grad();
  }
  return Tensor(std::move(n));
}

// Broadcast helper: strides of `src` aligned into the output's index space,
// zero on broadcast axes. Throws if the shapes are not broadcast-compatible.
std::vector<std::size_t> broadcast_strides(const Shape& src, const Shape& out,
                                           const char* opname) {
  if (src.size() > out.size())
    dim_error(std::string(opname) + ": cannot broadcast " + shape_str(src) +
              " into " + shape_str(out));
  auto st = row_major_strides(src);
  std::vector<std::size_t> aligned(out.size(), 0);
  std::size_t off = out.size() - src.size();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] == out[off + i]) {
      aligned[off + i] = st[i];
    } else if (src[i] == 1) {
      aligned[off + i] = 0;
    } else {
      dim_error(std::string(opname) + ": shape mismatch " + shape_str(src) +
                " vs " + shape_str(out));
    }
  }
  return aligned;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* opname) {
  Shape out(std::max(a.size(), b.size()), 1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    std::size_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da == db || db == 1) out[i] = da;
    else if (da == 1) out[i] = db;
    else dim_error(std::string(opname) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b));
  }
  return out;
}

// Walks every output index, giving the flat offsets into out/a/b.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  std::size_t n = shape_numel(out);
  std::size_t nd = out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      idx[d]++;
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_broadcast(const Tensor& ta, const Tensor& tb, BinKind kind,
                        const char* opname) {
  auto a = ta.node();
  auto b = tb.node();
  if (!a || !b) dim_error(std::string(opname) + ": undefined operand");
  Shape out = broadcast_shape(a->shape, b->shape, opname);
  auto sa = broadcast_strides(a->shape, out, opname);
  auto sb = broadcast_strides(b->shape, out, opname);
  std::vector<double> v(shape_numel(out));
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  if (a->shape == b->shape) {  // fast path
    const std::size_t n = v.size();
    switch (kind) {
      case BinKind::Add: for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] + pb[i]; break;
      case BinKind::Sub: for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] - pb[i]; break;
      case BinKind::Mul: for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] * pb[i]; break;
    }
  } else {
    for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case BinKind::Add: v[o] = pa[ia] + pb[ib]; break;
        case BinKind::Sub: v[o] = pa[ia] - pb[ib]; break;
        case BinKind::Mul: v[o] = pa[ia] * pb[ib]; break;
      }
    });
  }
  Shape out_copy = out;
  return make_op(std::move(out_copy), std::move(v), {a, b},
                 [out, sa, sb, kind](Node& self) {
                   Node& na = *self.parents[0];
                   Node& nb = *self.parents[1];
                   const double* g = self.grad.data();
                   if (na.requires_grad) na.ensure_grad();
                   if (nb.requires_grad) nb.ensure_grad();
                   for_each_broadcast(out, sa, sb,
                                      [&](std::size_t o, std::size_t ia, std::size_t ib) {
                     switch (kind) {
                       case BinKind::Add:
                         if (na.requires_grad) na.grad[ia] += g[o];
                         if (nb.requires_grad) nb.grad[ib] += g[o];
                         break;
                       case BinKind::Sub:
                         if (na.requires_grad) na.grad[ia] += g[o];
                         if (nb.requires_grad) nb.grad[ib] -= g[o];
                         break;
                       case BinKind::Mul:
                         if (na.requires_grad) na.grad[ia] += g[o] * nb.value[ib];
                         if (nb.requires_grad) nb.grad[ib] += g[o] * na.value[ia];
                         break;
                     }
                   });
                 });
}

// Elementwise unary op with value-and-derivative function.
template <typename FwdFn, typename DerFn>
Tensor unary_op(const Tensor& ta, FwdFn fwd, DerFn der) {
  auto a = ta.node();
  std::vector<double> v(a->numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(a->value[i]);
  std::vector<double> saved = v;  // many derivatives reuse the output
  return make_op(Shape(a->shape), std::move(v), {a},
                 [der, saved = std::move(saved)](Node& self) {
                   Node& na = *self.parents[0];
                   na.ensure_grad();
                   for (std::size_t i = 0; i < self.numel(); ++i)
                     na.grad[i] += self.grad[i] * der(na.value[i], saved[i]);
                 });
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  double z = std::exp(x);
  return z / (1.0 + z);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

namespace detail {
bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }
}  // namespace detail

// ---- Tensor basics ----

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_numel(shape), v), requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  check_shape_positive(shape);
  if (shape_numel(shape) != data.size())
    dim_error("from_data: " + shape_str(shape) + " needs " +
              std::to_string(shape_numel(shape)) + " values, got " +
              std::to_string(data.size()));
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> d(shape_numel(shape));
  for (auto& x : d) x = rng.normal(0.0, stddev);
  return from_data(shape, std::move(d), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("shape() on undefined tensor");
  return node_->shape;
}

std::size_t Tensor::numel() const { return node_ ? node_->numel() : 0; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_) throw std::logic_error("set_requires_grad() on undefined tensor");
  node_->requires_grad = on;
  if (on) node_->ensure_grad();
}

std::span<const double> Tensor::data() const {
  return {node_->value.data(), node_->value.size()};
}

std::span<double> Tensor::raw_data() {
  return {node_->value.data(), node_->value.size()};
}

std::span<const double> Tensor::grad() const {
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) dim_error("item(): tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

double Tensor::at(std::size_t flat_index) const {
  if (!node_ || flat_index >= node_->value.size())
    throw std::out_of_range("tensor index out of range");
  return node_->value[flat_index];
}

Tensor Tensor::clone() const {
  return from_data(shape(), std::vector<double>(node_->value), false);
}

Tensor Tensor::detach() const { return clone(); }

void Tensor::backward() const {
  if (!node_) throw std::logic_error("backward() on undefined tensor");
  if (node_->numel() != 1)
    throw std::invalid_argument("backward() requires a scalar loss, got shape " +
                                shape_str(node_->shape));
  // Reverse post-order over the recorded graph = topological order with every
  // node handled before its inputs.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Interior nodes carry per-pass gradients; only leaves accumulate across
  // repeated backward() calls.
  for (Node* n : order) {
    if (n->backprop) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) { return binary_broadcast(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_broadcast(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_broadcast(a, b, BinKind::Mul, "mul"); }

Tensor neg(const Tensor& a) {
  return unary_op(a, [](double x) { return -x; },
                  [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x * s; },
                  [s](double, double) { return s; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(a,
                  [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
                  [](double x, double) {
                    double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                    return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
                  });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, [](double x) { return stable_sigmoid(x); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary_op(a, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor softplus(const Tensor& a) {
  return unary_op(a,
                  [](double x) { return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
                  [](double x, double) { return stable_sigmoid(x); });
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; });
}

Tensor smooth_l1(const Tensor& a, const Tensor& b, double beta) {
  if (beta <= 0) dim_error("smooth_l1: beta must be positive");
  auto na = a.node();
  auto nb = b.node();
  if (na->shape != nb->shape)
    dim_error("smooth_l1: shape mismatch " + shape_str(na->shape) + " vs " + shape_str(nb->shape));
  std::vector<double> v(na->numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double e = na->value[i] - nb->value[i];
    double ae = std::fabs(e);
    v[i] = ae < beta ? 0.5 * e * e / beta : ae - 0.5 * beta;
  }
  return make_op(Shape(na->shape), std::move(v), {na, nb}, [beta](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) na.ensure_grad();
    if (nb.requires_grad) nb.ensure_grad();
    for (std::size_t i = 0; i < self.numel(); ++i) {
      double e = na.value[i] - nb.value[i];
      double d = std::fabs(e) < beta ? e / beta : (e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0));
      if (na.requires_grad) na.grad[i] += self.grad[i] * d;
      if (nb.requires_grad) nb.grad[i] -= self.grad[i] * d;
    }
  });
}

Tensor clamp(const Tensor& x, const Tensor& lo, const Tensor& hi) {
  auto nx = x.node();
  auto nl = lo.node();
  auto nh = hi.node();
  auto sl = broadcast_strides(nl->shape, nx->shape, "clamp");
  auto sh = broadcast_strides(nh->shape, nx->shape, "clamp");
  std::vector<double> v(nx->numel());
  std::vector<double> losv(nx->numel()), hisv(nx->numel());
  const Shape& out = nx->shape;
  for_each_broadcast(out, sl, sh, [&](std::size_t o, std::size_t il, std::size_t ih) {
    double l = nl->value[il];
    double h = nh->value[ih];
    if (l > h) dim_error("clamp: lo > hi (" + std::to_string(l) + " > " + std::to_string(h) + ")");
    losv[o] = l;
    hisv[o] = h;
    v[o] = std::min(std::max(nx->value[o], l), h);
  });
  return make_op(Shape(out), std::move(v), {nx},
                 [losv = std::move(losv), hisv = std::move(hisv)](Node& self) {
                   Node& nx = *self.parents[0];
                   nx.ensure_grad();
                   // pass-through strictly inside the bounds; 0 at and beyond them
                   for (std::size_t i = 0; i < self.numel(); ++i)
                     if (nx.value[i] > losv[i] && nx.value[i] < hisv[i])
                       nx.grad[i] += self.grad[i];
                 });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return clamp(x, Tensor::scalar(lo), Tensor::scalar(hi));
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  auto na = a.node();
  auto nb = b.node();
  if (na->shape != nb->shape)
    dim_error("maximum: shape mismatch " + shape_str(na->shape) + " vs " + shape_str(nb->shape));
  std::vector<double> v(na->numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::fmax(na->value[i], nb->value[i]);
  return make_op(Shape(na->shape), std::move(v), {na, nb}, [](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) na.ensure_grad();
    if (nb.requires_grad) nb.ensure_grad();
    for (std::size_t i = 0; i < self.numel(); ++i) {
      if (na.value[i] >= nb.value[i]) {
        if (na.requires_grad) na.grad[i] += self.grad[i];
      } else if (nb.requires_grad) {
        nb.grad[i] += self.grad[i];
      }
    }
  });
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  auto na = a.node();
  double s = 0;
  for (double x : na->value) s += x;
  return make_op({1}, {s}, {na}, [](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (auto& g : na.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  auto na = a.node();
  double s = 0;
  for (double x : na->value) s += x;
  double inv = 1.0 / static_cast<double>(na->numel());
  return make_op({1}, {s * inv}, {na}, [inv](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (auto& g : na.grad) g += self.grad[0] * inv;
  });
}

Tensor global_avg_pool(const Tensor& x) {
  auto nx = x.node();
  if (nx->shape.size() != 2)
    dim_error("global_avg_pool: expected [L, D], got " + shape_str(nx->shape));
  std::size_t L = nx->shape[0], D = nx->shape[1];
  std::vector<double> v(D, 0.0);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t d = 0; d < D; ++d) v[d] += nx->value[l * D + d];
  double inv = 1.0 / static_cast<double>(L);
  for (auto& e : v) e *= inv;
  return make_op({D}, std::move(v), {nx}, [L, D, inv](Node& self) {
    Node& nx = *self.parents[0];
    nx.ensure_grad();
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t d = 0; d < D; ++d) nx.grad[l * D + d] += self.grad[d] * inv;
  });
}

// ---- shape ops ----

Tensor reshape(const Tensor& a, const Shape& shape) {
  auto na = a.node();
  check_shape_positive(shape);
  if (shape_numel(shape) != na->numel())
    dim_error("reshape: cannot view " + shape_str(na->shape) + " as " + shape_str(shape));
  return make_op(Shape(shape), std::vector<double>(na->value), {na}, [](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < self.numel(); ++i) na.grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  auto na = a.node();
  std::size_t nd = na->shape.size();
  if (axes.size() != nd) dim_error("permute: axes rank mismatch");
  std::vector<bool> seen(nd, false);
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    if (axes[i] >= nd || seen[axes[i]]) dim_error("permute: invalid axes");
    seen[axes[i]] = true;
    out[i] = na->shape[axes[i]];
  }
  auto in_st = row_major_strides(na->shape);
  auto out_st = row_major_strides(out);
  std::size_t n = na->numel();
  // flat index map out -> in
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < nd; ++d) src += idx[d] * in_st[axes[d]];
    map[o] = src;
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  (void)out_st;
  std::vector<double> v(n);
  for (std::size_t o = 0; o < n; ++o) v[o] = na->value[map[o]];
  return make_op(std::move(out), std::move(v), {na}, [map = std::move(map)](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t o = 0; o < self.numel(); ++o) na.grad[map[o]] += self.grad[o];
  });
}

Tensor concat_axis0(const Tensor& a, const Tensor& b) {
  auto na = a.node();
  auto nb = b.node();
  if (na->shape.size() != nb->shape.size() || na->shape.size() == 0)
    dim_error("concat_axis0: rank mismatch");
  for (std::size_t d = 1; d < na->shape.size(); ++d)
    if (na->shape[d] != nb->shape[d])
      dim_error("concat_axis0: trailing dims differ: " + shape_str(na->shape) + " vs " +
                shape_str(nb->shape));
  Shape out = na->shape;
  out[0] += nb->shape[0];
  std::vector<double> v;
  v.reserve(na->numel() + nb->numel());
  v.insert(v.end(), na->value.begin(), na->value.end());
  v.insert(v.end(), nb->value.begin(), nb->value.end());
  std::size_t n_a = na->numel();
  return make_op(std::move(out), std::move(v), {na, nb}, [n_a](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) {
      na.ensure_grad();
      for (std::size_t i = 0; i < n_a; ++i) na.grad[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      for (std::size_t i = n_a; i < self.numel(); ++i) nb.grad[i - n_a] += self.grad[i];
    }
  });
}

Tensor slice_axis0(const Tensor& a, std::size_t start, std::size_t count) {
  auto na = a.node();
  if (na->shape.empty() || start + count > na->shape[0] || count == 0)
    dim_error("slice_axis0: invalid range [" + std::to_string(start) + "," +
              std::to_string(start + count) + ") of " + shape_str(na->shape));
  Shape out = na->shape;
  out[0] = count;
  std::size_t inner = na->numel() / na->shape[0];
  std::vector<double> v(count * inner);
  std::copy_n(na->value.begin() + static_cast<std::ptrdiff_t>(start * inner), count * inner,
              v.begin());
  return make_op(std::move(out), std::move(v), {na}, [start, inner](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < self.numel(); ++i) na.grad[start * inner + i] += self.grad[i];
  });
}

// ---- matmul ----

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  auto a = ta.node();
  auto b = tb.node();
  if (a->shape.size() < 2 || b->shape.size() < 2)
    dim_error("matmul: operands must have rank >= 2, got " + shape_str(a->shape) + " x " +
              shape_str(b->shape));
  std::size_t M = a->shape[a->shape.size() - 2];
  std::size_t K = a->shape[a->shape.size() - 1];
  std::size_t Kb = b->shape[b->shape.size() - 2];
  std::size_t N = b->shape[b->shape.size() - 1];
  if (K != Kb)
    dim_error("matmul: inner dimensions disagree: " + shape_str(a->shape) + " x " +
              shape_str(b->shape));
  Shape batch_a(a->shape.begin(), a->shape.end() - 2);
  Shape batch_b(b->shape.begin(), b->shape.end() - 2);
  Shape batch = broadcast_shape(batch_a, batch_b, "matmul");
  auto sa = broadcast_strides(batch_a, batch, "matmul");
  auto sb = broadcast_strides(batch_b, batch, "matmul");
  // strides above are in units of matrices once scaled
  std::size_t n_batch = shape_numel(batch);
  Shape out = batch;
  out.push_back(M);
  out.push_back(N);
  std::vector<double> v(n_batch * M * N);

  // Flat matrix offsets per batch element.
  std::vector<std::size_t> offs_a(n_batch), offs_b(n_batch);
  {
    std::vector<std::size_t> idx(batch.size(), 0);
    for (std::size_t o = 0; o < n_batch; ++o) {
      std::size_t ia = 0, ib = 0;
      for (std::size_t d = 0; d < batch.size(); ++d) {
        ia += idx[d] * sa[d];
        ib += idx[d] * sb[d];
      }
      offs_a[o] = ia * 1;  // strides already count inner elements of the batch shape
      offs_b[o] = ib;
      for (std::size_t d = batch.size(); d-- > 0;) {
        if (++idx[d] < batch[d]) break;
        idx[d] = 0;
      }
    }
    // Scale: broadcast_strides computed strides in units of batch elements of
    // the *batch* shapes; convert to value offsets (each batch element is a
    // full MxK / KxN matrix).
    for (auto& x : offs_a) x *= M * K;
    for (auto& x : offs_b) x *= K * N;
  }

  for (std::size_t bi = 0; bi < n_batch; ++bi) {
    CMapMat A(a->value.data() + offs_a[bi], static_cast<Eigen::Index>(M),
              static_cast<Eigen::Index>(K));
    CMapMat B(b->value.data() + offs_b[bi], static_cast<Eigen::Index>(K),
              static_cast<Eigen::Index>(N));
    MapMat C(v.data() + bi * M * N, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N));
    C.noalias() = A * B;
  }
  return make_op(std::move(out), std::move(v), {a, b},
                 [M, K, N, n_batch, offs_a = std::move(offs_a), offs_b = std::move(offs_b)](
                     Node& self) {
                   Node& na = *self.parents[0];
                   Node& nb = *self.parents[1];
                   if (na.requires_grad) na.ensure_grad();
                   if (nb.requires_grad) nb.ensure_grad();
                   for (std::size_t bi = 0; bi < n_batch; ++bi) {
                     CMapMat G(self.grad.data() + bi * M * N, static_cast<Eigen::Index>(M),
                               static_cast<Eigen::Index>(N));
                     if (na.requires_grad) {
                       CMapMat B(nb.value.data() + offs_b[bi], static_cast<Eigen::Index>(K),
                                 static_cast<Eigen::Index>(N));
                       MapMat dA(na.grad.data() + offs_a[bi], static_cast<Eigen::Index>(M),
                                 static_cast<Eigen::Index>(K));
                       dA.noalias() += G * B.transpose();
                     }
                     if (nb.requires_grad) {
                       CMapMat A(na.value.data() + offs_a[bi], static_cast<Eigen::Index>(M),
                                 static_cast<Eigen::Index>(K));
                       MapMat dB(nb.grad.data() + offs_b[bi], static_cast<Eigen::Index>(K),
                                 static_cast<Eigen::Index>(N));
                       dB.noalias() += A.transpose() * G;
                     }
                   }
                 });
}

// ---- conv2d ----

namespace {

struct ConvDims {
  std::size_t c_in, h, w, c_out, cg, kh, kw, oh, ow, groups, pad;
};

ConvDims conv_check(const Node& in, const Node& k, const Node* bias, std::size_t groups,
                    std::size_t padding) {
  if (in.shape.size() != 3)
    dim_error("conv2d: input must be [C,H,W], got " + shape_str(in.shape));
  if (k.shape.size() != 4)
    dim_error("conv2d: kernel must be [C_out,C_in/groups,kh,kw], got " + shape_str(k.shape));
  ConvDims d{};
  d.c_in = in.shape[0];
  d.h = in.shape[1];
  d.w = in.shape[2];
  d.c_out = k.shape[0];
  d.cg = k.shape[1];
  d.kh = k.shape[2];
  d.kw = k.shape[3];
  d.groups = groups;
  d.pad = padding;
  if (groups == 0 || d.c_in % groups != 0 || d.c_out % groups != 0)
    dim_error("conv2d: groups=" + std::to_string(groups) + " does not divide channels " +
              std::to_string(d.c_in) + "/" + std::to_string(d.c_out));
  if (d.cg != d.c_in / groups)
    dim_error("conv2d: kernel expects C_in/groups=" + std::to_string(d.cg) + ", input gives " +
              std::to_string(d.c_in / groups));
  if (d.kh % 2 == 0 || d.kw % 2 == 0)
    dim_error("conv2d: kernel must be spatially odd-sized, got " + shape_str(k.shape));
  if (d.h + 2 * padding < d.kh || d.w + 2 * padding < d.kw)
    dim_error("conv2d: kernel larger than padded input");
  d.oh = d.h + 2 * padding - d.kh + 1;
  d.ow = d.w + 2 * padding - d.kw + 1;
  if (bias && !(bias->shape.size() == 1 && bias->shape[0] == d.c_out))
    dim_error("conv2d: bias must be [C_out], got " + shape_str(bias->shape));
  return d;
}

void conv_forward(const ConvDims& d, const double* in, const double* k, const double* bias,
                  double* out) {
  std::size_t og = d.c_out / d.groups;
  for (std::size_t oc = 0; oc < d.c_out; ++oc) {
    double b = bias ? bias[oc] : 0.0;
    double* orow = out + oc * d.oh * d.ow;
    std::fill(orow, orow + d.oh * d.ow, b);
  }
  for (std::size_t g = 0; g < d.groups; ++g) {
    for (std::size_t ocl = 0; ocl < og; ++ocl) {
      std::size_t oc = g * og + ocl;
      double* outc = out + oc * d.oh * d.ow;
      for (std::size_t cil = 0; cil < d.cg; ++cil) {
        std::size_t ci = g * d.cg + cil;
        const double* inc = in + ci * d.h * d.w;
        const double* kc = k + ((oc * d.cg + cil) * d.kh) * d.kw;
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            double wv = kc[ky * d.kw + kx];
            if (wv == 0.0) continue;
            // output y range with in-bounds iy = y + ky - pad
            std::size_t y_lo = d.pad > ky ? d.pad - ky : 0;
            std::size_t y_hi = std::min(d.oh, d.h + d.pad - ky);
            std::size_t x_lo = d.pad > kx ? d.pad - kx : 0;
            std::size_t x_hi = std::min(d.ow, d.w + d.pad - kx);
            for (std::size_t y = y_lo; y < y_hi; ++y) {
              const double* irow = inc + (y + ky - d.pad) * d.w + (x_lo + kx - d.pad);
              double* orow = outc + y * d.ow + x_lo;
              for (std::size_t x = 0; x < x_hi - x_lo; ++x) orow[x] += wv * irow[x];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t groups, std::size_t padding) {
  auto in = input.node();
  auto k = kernel.node();
  auto b = bias.defined() ? bias.node() : nullptr;
  ConvDims d = conv_check(*in, *k, b.get(), groups, padding);
  std::vector<double> v(d.c_out * d.oh * d.ow);

  if (d.kh == 1 && d.kw == 1 && groups == 1) {
    // pointwise fast path: [C_out, C_in] x [C_in, H*W]
    CMapMat W(k->value.data(), static_cast<Eigen::Index>(d.c_out),
              static_cast<Eigen::Index>(d.c_in));
    CMapMat X(in->value.data(), static_cast<Eigen::Index>(d.c_in),
              static_cast<Eigen::Index>(d.h * d.w));
    MapMat Y(v.data(), static_cast<Eigen::Index>(d.c_out), static_cast<Eigen::Index>(d.h * d.w));
    Y.noalias() = W * X;
    if (b)
      for (std::size_t oc = 0; oc < d.c_out; ++oc)
        Y.row(static_cast<Eigen::Index>(oc)).array() += b->value[oc];
  } else {
    conv_forward(d, in->value.data(), k->value.data(), b ? b->value.data() : nullptr, v.data());
  }

  std::vector<NodePtr> parents{in, k};
  if (b) parents.push_back(b);
  return make_op({d.c_out, d.oh, d.ow}, std::move(v), std::move(parents), [d](Node& self) {
    Node& in = *self.parents[0];
    Node& k = *self.parents[1];
    Node* b = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    const double* g = self.grad.data();
    if (b && b->requires_grad) {
      b->ensure_grad();
      for (std::size_t oc = 0; oc < d.c_out; ++oc) {
        double s = 0;
        const double* gc = g + oc * d.oh * d.ow;
        for (std::size_t i = 0; i < d.oh * d.ow; ++i) s += gc[i];
        b->grad[oc] += s;
      }
    }
    bool want_in = in.requires_grad;
    bool want_k = k.requires_grad;
    if (want_in) in.ensure_grad();
    if (want_k) k.ensure_grad();
    if (!want_in && !want_k) return;
    if (d.kh == 1 && d.kw == 1 && d.groups == 1) {
      CMapMat G(g, static_cast<Eigen::Index>(d.c_out), static_cast<Eigen::Index>(d.oh * d.ow));
      if (want_in) {
        CMapMat W(k.value.data(), static_cast<Eigen::Index>(d.c_out),
                  static_cast<Eigen::Index>(d.c_in));
        MapMat dX(in.grad.data(), static_cast<Eigen::Index>(d.c_in),
                  static_cast<Eigen::Index>(d.h * d.w));
        dX.noalias() += W.transpose() * G;
      }
      if (want_k) {
        CMapMat X(in.value.data(), static_cast<Eigen::Index>(d.c_in),
                  static_cast<Eigen::Index>(d.h * d.w));
        MapMat dW(k.grad.data(), static_cast<Eigen::Index>(d.c_out),
                  static_cast<Eigen::Index>(d.c_in));
        dW.noalias() += G * X.transpose();
      }
      return;
    }
    std::size_t og = d.c_out / d.groups;
    for (std::size_t gidx = 0; gidx < d.groups; ++gidx) {
      for (std::size_t ocl = 0; ocl < og; ++ocl) {
        std::size_t oc = gidx * og + ocl;
        const double* gc = g + oc * d.oh * d.ow;
        for (std::size_t cil = 0; cil < d.cg; ++cil) {
          std::size_t ci = gidx * d.cg + cil;
          const double* inc = in.value.data() + ci * d.h * d.w;
          double* dinc = want_in ? in.grad.data() + ci * d.h * d.w : nullptr;
          for (std::size_t ky = 0; ky < d.kh; ++ky) {
            for (std::size_t kx = 0; kx < d.kw; ++kx) {
              std::size_t kidx = ((oc * d.cg + cil) * d.kh + ky) * d.kw + kx;
              double wv = k.value[kidx];
              std::size_t y_lo = d.pad > ky ? d.pad - ky : 0;
              std::size_t y_hi = std::min(d.oh, d.h + d.pad - ky);
              std::size_t x_lo = d.pad > kx ? d.pad - kx : 0;
              std::size_t x_hi = std::min(d.ow, d.w + d.pad - kx);
              double wsum = 0;
              for (std::size_t y = y_lo; y < y_hi; ++y) {
                const double* grow = gc + y * d.ow + x_lo;
                std::size_t irow_off = (y + ky - d.pad) * d.w + (x_lo + kx - d.pad);
                const double* irow = inc + irow_off;
                if (want_k)
                  for (std::size_t x = 0; x < x_hi - x_lo; ++x) wsum += grow[x] * irow[x];
                if (want_in) {
                  double* dirow = dinc + irow_off;
                  for (std::size_t x = 0; x < x_hi - x_lo; ++x) dirow[x] += grow[x] * wv;
                }
              }
              if (want_k) k.grad[kidx] += wsum;
            }
          }
        }
      }
    }
  });
}

// ---- layer_norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  auto nx = x.node();
  auto ng = gamma.node();
  auto nb = beta.node();
  if (nx->shape.empty()) dim_error("layer_norm: scalar input");
  std::size_t D = nx->shape.back();
  if (!(ng->shape.size() == 1 && ng->shape[0] == D) ||
      !(nb->shape.size() == 1 && nb->shape[0] == D))
    dim_error("layer_norm: gamma/beta must be [" + std::to_string(D) + "], got " +
              shape_str(ng->shape) + " and " + shape_str(nb->shape));
  std::size_t rows = nx->numel() / D;
  std::vector<double> v(nx->numel());
  std::vector<double> mu(rows), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = nx->value.data() + r * D;
    double m = 0;
    for (std::size_t i = 0; i < D; ++i) m += row[i];
    m /= static_cast<double>(D);
    double var = 0;
    for (std::size_t i = 0; i < D; ++i) var += (row[i] - m) * (row[i] - m);
    var /= static_cast<double>(D);
    double inv = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    inv_std[r] = inv;
    double* out = v.data() + r * D;
    for (std::size_t i = 0; i < D; ++i)
      out[i] = ng->value[i] * (row[i] - m) * inv + nb->value[i];
  }
  return make_op(Shape(nx->shape), std::move(v), {nx, ng, nb},
                 [D, rows, mu = std::move(mu), inv_std = std::move(inv_std)](Node& self) {
    Node& nx = *self.parents[0];
    Node& ng = *self.parents[1];
    Node& nb = *self.parents[2];
    if (nx.requires_grad) nx.ensure_grad();
    if (ng.requires_grad) ng.ensure_grad();
    if (nb.requires_grad) nb.ensure_grad();
    double invD = 1.0 / static_cast<double>(D);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = nx.value.data() + r * D;
      const double* g = self.grad.data() + r * D;
      double inv = inv_std[r];
      double m = mu[r];
      // dxhat_i = g_i * gamma_i;  dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
      double mean_dxhat = 0, mean_dxhat_xhat = 0;
      for (std::size_t i = 0; i < D; ++i) {
        double xhat = (row[i] - m) * inv;
        double dxhat = g[i] * ng.value[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
      }
      mean_dxhat *= invD;
      mean_dxhat_xhat *= invD;
      for (std::size_t i = 0; i < D; ++i) {
        double xhat = (row[i] - m) * inv;
        if (nx.requires_grad) {
          double dxhat = g[i] * ng.value[i];
          nx.grad[r * D + i] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
        if (ng.requires_grad) ng.grad[i] += g[i] * xhat;
        if (nb.requires_grad) nb.grad[i] += g[i];
      }
    }
  });
}

// ---- softmax ----

Tensor softmax(const Tensor& x) {
  auto nx = x.node();
  if (nx->shape.empty()) dim_error("softmax: scalar input");
  std::size_t D = nx->shape.back();
  std::size_t rows = nx->numel() / D;
  std::vector<double> v(nx->numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = nx->value.data() + r * D;
    double mx = row[0];
    for (std::size_t i = 1; i < D; ++i) mx = std::fmax(mx, row[i]);
    double s = 0;
    double* out = v.data() + r * D;
    for (std::size_t i = 0; i < D; ++i) {
      out[i] = std::exp(row[i] - mx);
      s += out[i];
    }
    double inv = 1.0 / s;
    for (std::size_t i = 0; i < D; ++i) out[i] *= inv;
  }
  return make_op(Shape(nx->shape), std::move(v), {nx}, [D, rows](Node& self) {
    Node& nx = *self.parents[0];
    nx.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * D;
      const double* g = self.grad.data() + r * D;
      double dot = 0;
      for (std::size_t i = 0; i < D; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < D; ++i) nx.grad[r * D + i] += y[i] * (g[i] - dot);
    }
  });
}

// ---- bilinear resample ----

Tensor bilinear_resample(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  auto in = input.node();
  if (in->shape.size() != 3)
    dim_error("bilinear_resample: input must be [C,H,W], got " + shape_str(in->shape));
  if (out_h == 0 || out_w == 0)
    dim_error("bilinear_resample: zero target size " + std::to_string(out_h) + "x" +
              std::to_string(out_w));
  std::size_t C = in->shape[0], H = in->shape[1], W = in->shape[2];
  double sy = static_cast<double>(H) / static_cast<double>(out_h);
  double sx = static_cast<double>(W) / static_cast<double>(out_w);
  // Per output row/col: the two source indices and the interpolation weight.
  struct Lerp { std::size_t i0, i1; double t; };
  auto make_axis = [](std::size_t n_out, std::size_t n_in, double scale) {
    std::vector<Lerp> axis(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
      double s = (static_cast<double>(i) + 0.5) * scale - 0.5;
      double f = std::floor(s);
      double t = s - f;
      long i0 = static_cast<long>(f);
      long i1 = i0 + 1;
      i0 = std::clamp<long>(i0, 0, static_cast<long>(n_in) - 1);
      i1 = std::clamp<long>(i1, 0, static_cast<long>(n_in) - 1);
      axis[i] = {static_cast<std::size_t>(i0), static_cast<std::size_t>(i1), t};
    }
    return axis;
  };
  auto ay = make_axis(out_h, H, sy);
  auto ax = make_axis(out_w, W, sx);
  std::vector<double> v(C * out_h * out_w);
  for (std::size_t c = 0; c < C; ++c) {
    const double* ic = in->value.data() + c * H * W;
    double* oc = v.data() + c * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const double* r0 = ic + ay[y].i0 * W;
      const double* r1 = ic + ay[y].i1 * W;
      double ty = ay[y].t;
      for (std::size_t x = 0; x < out_w; ++x) {
        double tx = ax[x].t;
        double top = r0[ax[x].i0] * (1 - tx) + r0[ax[x].i1] * tx;
        double bot = r1[ax[x].i0] * (1 - tx) + r1[ax[x].i1] * tx;
        oc[y * out_w + x] = top * (1 - ty) + bot * ty;
      }
    }
  }
  return make_op({C, out_h, out_w}, std::move(v), {in},
                 [C, H, W, out_h, out_w, ay = std::move(ay), ax = std::move(ax)](Node& self) {
    Node& in = *self.parents[0];
    in.ensure_grad();
    for (std::size_t c = 0; c < C; ++c) {
      double* dic = in.grad.data() + c * H * W;
      const double* g = self.grad.data() + c * out_h * out_w;
      for (std::size_t y = 0; y < out_h; ++y) {
        double ty = ay[y].t;
        for (std::size_t x = 0; x < out_w; ++x) {
          double tx = ax[x].t;
          double gv = g[y * out_w + x];
          dic[ay[y].i0 * W + ax[x].i0] += gv * (1 - ty) * (1 - tx);
          dic[ay[y].i0 * W + ax[x].i1] += gv * (1 - ty) * tx;
          dic[ay[y].i1 * W + ax[x].i0] += gv * ty * (1 - tx);
          dic[ay[y].i1 * W + ax[x].i1] += gv * ty * tx;
        }
      }
    }
  });
}

// ---- affine warp ----

Tensor affine_warp(const Tensor& input, const AffineMap2& m) {
  auto in = input.node();
  if (in->shape.size() != 3)
    dim_error("affine_warp: input must be [C,H,W], got " + shape_str(in->shape));
  std::size_t C = in->shape[0], H = in->shape[1], W = in->shape[2];
  // Precompute the 4-tap sample list per output cell (same for all channels).
  struct Tap { long y, x; double w; };
  std::vector<std::array<Tap, 4>> taps(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double gx = static_cast<double>(x);
      double gy = static_cast<double>(y);
      double sx = m.a11 * gx + m.a12 * gy + m.tx;
      double sy = m.a21 * gx + m.a22 * gy + m.ty;
      long x0 = static_cast<long>(std::floor(sx));
      long y0 = static_cast<long>(std::floor(sy));
      double fx = sx - static_cast<double>(x0);
      double fy = sy - static_cast<double>(y0);
      auto& t = taps[y * W + x];
      t[0] = {y0, x0, (1 - fy) * (1 - fx)};
      t[1] = {y0, x0 + 1, (1 - fy) * fx};
      t[2] = {y0 + 1, x0, fy * (1 - fx)};
      t[3] = {y0 + 1, x0 + 1, fy * fx};
      for (auto& tap : t)
        if (tap.y < 0 || tap.y >= static_cast<long>(H) || tap.x < 0 ||
            tap.x >= static_cast<long>(W))
          tap.w = 0;  // out-of-range contributes zero
    }
  }
  std::vector<double> v(C * H * W, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double* ic = in->value.data() + c * H * W;
    double* oc = v.data() + c * H * W;
    for (std::size_t i = 0; i < H * W; ++i) {
      double acc = 0;
      for (const auto& tap : taps[i])
        if (tap.w != 0) acc += tap.w * ic[tap.y * static_cast<long>(W) + tap.x];
      oc[i] = acc;
    }
  }
  return make_op({C, H, W}, std::move(v), {in}, [C, H, W, taps = std::move(taps)](Node& self) {
    Node& in = *self.parents[0];
    in.ensure_grad();
    for (std::size_t c = 0; c < C; ++c) {
      double* dic = in.grad.data() + c * H * W;
      const double* g = self.grad.data() + c * H * W;
      for (std::size_t i = 0; i < H * W; ++i) {
        if (g[i] == 0) continue;
        for (const auto& tap : taps[i])
          if (tap.w != 0) dic[tap.y * static_cast<long>(W) + tap.x] += g[i] * tap.w;
      }
    }
  });
}

}  // namespace aircoop
