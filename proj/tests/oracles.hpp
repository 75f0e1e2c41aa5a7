// Test-only oracles, independent of the implementation paths they check.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "aircoop/geometry.hpp"
#include "aircoop/rng.hpp"
#include "aircoop/tensor.hpp"

namespace aircoop::oracle {

// ---- central finite differences ----

struct GradCheck {
  double max_rel_err = 0.0;
  std::size_t n_checked = 0;
};

// Compares analytic gradients of `leaves` against central finite differences
// of the scalar produced by `forward`. `forward` must rebuild the graph from
// the leaves' current values on every call. rel denominator is floored so
// near-zero gradients compare on an absolute scale.
template <typename F>
GradCheck finite_diff_check(F&& forward, std::vector<Tensor> leaves, double h = 1e-5,
                            double denom_floor = 1e-6) {
  for (auto& l : leaves) l.zero_grad();
  Tensor loss = forward();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());

  GradCheck res;
  NoGradGuard ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].raw_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double saved = vals[i];
      vals[i] = saved + h;
      double f1 = forward().item();
      vals[i] = saved - h;
      double f2 = forward().item();
      vals[i] = saved;
      double fd = (f1 - f2) / (2 * h);
      double a = analytic[li][i];
      double rel = std::fabs(a - fd) / std::fmax(std::fmax(std::fabs(a), std::fabs(fd)),
                                                 denom_floor);
      res.max_rel_err = std::fmax(res.max_rel_err, rel);
      ++res.n_checked;
    }
  }
  return res;
}

// ---- scalar bilinear interpolation (cell-center convention) ----

inline double bilinear_sample_scalar(const std::vector<double>& img, std::size_t h,
                                     std::size_t w, double sy, double sx) {
  auto fetch = [&](long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return img[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  long y0 = static_cast<long>(std::floor(sy));
  long x0 = static_cast<long>(std::floor(sx));
  double ty = sy - static_cast<double>(y0);
  double tx = sx - static_cast<double>(x0);
  double top = fetch(y0, x0) * (1 - tx) + fetch(y0, x0 + 1) * tx;
  double bot = fetch(y0 + 1, x0) * (1 - tx) + fetch(y0 + 1, x0 + 1) * tx;
  return top * (1 - ty) + bot * ty;
}

inline std::vector<double> bilinear_resize_scalar(const std::vector<double>& img, std::size_t h,
                                                  std::size_t w, std::size_t oh, std::size_t ow) {
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double sy = (y + 0.5) * static_cast<double>(h) / oh - 0.5;
      double sx = (x + 0.5) * static_cast<double>(w) / ow - 0.5;
      out[y * ow + x] = bilinear_sample_scalar(img, h, w, sy, sx);
    }
  return out;
}

// ---- Monte-Carlo volumetric IoU ----

inline bool point_in_box3(const OrientedBox3& b, double x, double y, double z) {
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  double dx = x - b.x, dy = y - b.y;
  double lx = c * dx + s * dy;
  double ly = -s * dx + c * dy;
  return std::fabs(lx) <= 0.5 * b.l && std::fabs(ly) <= 0.5 * b.w &&
         std::fabs(z - b.z) <= 0.5 * b.h;
}

struct McIou {
  double iou = 0.0;
  double se = 0.0;  // delta-method standard error of the iou estimate
};

// Samples uniformly inside box a; V_inter = V_a * P(sample in b).
inline McIou mc_iou3d(const OrientedBox3& a, const OrientedBox3& b, std::size_t n, Rng& rng) {
  std::size_t hits = 0;
  double ca = std::cos(a.yaw), sa = std::sin(a.yaw);
  for (std::size_t i = 0; i < n; ++i) {
    double lx = rng.uniform(-0.5 * a.l, 0.5 * a.l);
    double ly = rng.uniform(-0.5 * a.w, 0.5 * a.w);
    double lz = rng.uniform(-0.5 * a.h, 0.5 * a.h);
    double x = a.x + ca * lx - sa * ly;
    double y = a.y + sa * lx + ca * ly;
    double z = a.z + lz;
    if (point_in_box3(b, x, y, z)) ++hits;
  }
  double va = a.volume(), vb = b.volume();
  double q = static_cast<double>(hits) / static_cast<double>(n);
  double vi = va * q;
  // se(q) floored with a pseudo-count so q==0/1 still yields a usable bound
  double qt = (static_cast<double>(hits) + 1.0) / (static_cast<double>(n) + 2.0);
  double se_vi = va * std::sqrt(qt * (1 - qt) / static_cast<double>(n));
  double denom = va + vb - vi;
  McIou out;
  out.iou = denom > 0 ? vi / denom : 0.0;
  out.se = se_vi * (va + vb) / (denom * denom);
  return out;
}

// ---- brute-force all-point average precision ----

struct ApInstance {
  // per prediction: frame id, score; per gt: frame id. IoUs provided by fn.
  std::vector<std::size_t> pred_frame;
  std::vector<double> pred_score;
  std::vector<std::size_t> gt_frame;
  // iou(pred i, gt j); tests fill this from whatever geometry they like
  std::function<double(std::size_t, std::size_t)> iou;
};

// Recomputes the PR curve from scratch at every prefix length, then
// integrates with all-point interpolation. O(n^2) on purpose.
inline double brute_force_ap(const ApInstance& in, double thr) {
  std::size_t np = in.pred_score.size();
  std::size_t ng = in.gt_frame.size();
  if (ng == 0) return np == 0 ? 1.0 : 0.0;
  if (np == 0) return 0.0;
  // rank by descending score, ties by ascending index
  std::vector<std::size_t> order(np);
  for (std::size_t i = 0; i < np; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (in.pred_score[x] != in.pred_score[y]) return in.pred_score[x] > in.pred_score[y];
    return x < y;
  });
  auto tp_count_at = [&](std::size_t k) {  // greedy matching over the top-k prefix
    std::vector<bool> used(ng, false);
    std::size_t tp = 0;
    for (std::size_t r = 0; r < k; ++r) {
      std::size_t p = order[r];
      double best = thr;
      std::size_t best_j = ng;
      for (std::size_t j = 0; j < ng; ++j) {
        if (used[j] || in.gt_frame[j] != in.pred_frame[p]) continue;
        double v = in.iou(p, j);
        if (v >= best && (best_j == ng || v > best)) {
          best = v;
          best_j = j;
        }
      }
      if (best_j != ng) {
        used[best_j] = true;
        ++tp;
      }
    }
    return tp;
  };
  std::vector<double> precision(np), recall(np);
  for (std::size_t k = 1; k <= np; ++k) {
    std::size_t tp = tp_count_at(k);
    precision[k - 1] = static_cast<double>(tp) / static_cast<double>(k);
    recall[k - 1] = static_cast<double>(tp) / static_cast<double>(ng);
  }
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t k = 0; k < np; ++k) {
    if (recall[k] <= prev_r) continue;
    double p_interp = 0.0;
    for (std::size_t j = k; j < np; ++j) p_interp = std::fmax(p_interp, precision[j]);
    ap += (recall[k] - prev_r) * p_interp;
    prev_r = recall[k];
  }
  return ap;
}

}  // namespace aircoop::oracle
