#include "aircoop/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <tuple>

namespace aircoop {

double normalize_angle(double a) {
  a = std::fmod(a, 2.0 * M_PI);
  if (a <= -M_PI) a += 2.0 * M_PI;
  if (a > M_PI) a -= 2.0 * M_PI;
  return a;
}

Vec3 world_to_ego(const Pose3& pose_ego, const Vec3& p) {
  double dx = p.x - pose_ego.x;
  double dy = p.y - pose_ego.y;
  double c = std::cos(pose_ego.yaw), s = std::sin(pose_ego.yaw);
  return {c * dx + s * dy, -s * dx + c * dy, p.z - pose_ego.z};
}

Vec3 ego_to_world(const Pose3& pose_ego, const Vec3& p) {
  double c = std::cos(pose_ego.yaw), s = std::sin(pose_ego.yaw);
  return {pose_ego.x + c * p.x - s * p.y, pose_ego.y + s * p.x + c * p.y, pose_ego.z + p.z};
}

Vec3 transform_to_ego(const Pose3& pose_agent, const Pose3& pose_ego, const Vec3& p_agent) {
  return world_to_ego(pose_ego, ego_to_world(pose_agent, p_agent));
}

std::array<Vec2, 4> OrientedBox3::footprint() const {
  double c = std::cos(yaw), s = std::sin(yaw);
  double hl = 0.5 * l, hw = 0.5 * w;
  // counterclockwise starting from (+l/2, +w/2) in the box frame
  std::array<Vec2, 4> out;
  const double lx[4] = {hl, -hl, -hl, hl};
  const double wy[4] = {hw, hw, -hw, -hw};
  for (int i = 0; i < 4; ++i)
    out[i] = {x + c * lx[i] - s * wy[i], y + s * lx[i] + c * wy[i]};
  return out;
}

OrientedBox3 box_to_ego(const Pose3& pose_ego, const OrientedBox3& b) {
  Vec3 ctr = world_to_ego(pose_ego, {b.x, b.y, b.z});
  OrientedBox3 out = b;
  out.x = ctr.x;
  out.y = ctr.y;
  out.z = ctr.z;
  out.yaw = normalize_angle(b.yaw - pose_ego.yaw);
  return out;
}

OrientedBox3 box_to_world(const Pose3& pose_ego, const OrientedBox3& b) {
  Vec3 ctr = ego_to_world(pose_ego, {b.x, b.y, b.z});
  OrientedBox3 out = b;
  out.x = ctr.x;
  out.y = ctr.y;
  out.z = ctr.z;
  out.yaw = normalize_angle(b.yaw + pose_ego.yaw);
  return out;
}

std::size_t BevExtent::grid_h() const {
  return static_cast<std::size_t>(std::llround((y_max - y_min) / cell));
}

std::size_t BevExtent::grid_w() const {
  return static_cast<std::size_t>(std::llround((x_max - x_min) / cell));
}

void BevExtent::validate() const {
  if (cell <= 0) throw std::invalid_argument("BevExtent: cell must be positive");
  if (x_max <= x_min || y_max <= y_min || z_max <= z_min)
    throw std::invalid_argument("BevExtent: empty window");
  auto integral = [&](double span) {
    double n = span / cell;
    return std::fabs(n - std::llround(n)) < 1e-9;
  };
  if (!integral(x_max - x_min) || !integral(y_max - y_min))
    throw std::invalid_argument("BevExtent: window is not an integer number of cells");
}

double polygon_area(const std::vector<Vec2>& poly) {
  if (poly.size() < 3) return 0.0;
  double a = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * a;
}

namespace {

// Clip `subject` against the half-plane left of edge (a -> b).
std::vector<Vec2> clip_half_plane(const std::vector<Vec2>& subject, const Vec2& a, const Vec2& b) {
  std::vector<Vec2> out;
  out.reserve(subject.size() + 1);
  auto side = [&](const Vec2& p) {
    return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
  };
  std::size_t n = subject.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& cur = subject[i];
    const Vec2& nxt = subject[(i + 1) % n];
    double sc = side(cur);
    double sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc > 0 && sn < 0) || (sc < 0 && sn > 0)) {
      double t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

// Field-lexicographic ordering so symmetric calls run identical float ops.
bool box_key_less(const OrientedBox3& a, const OrientedBox3& b) {
  return std::tie(a.x, a.y, a.z, a.l, a.w, a.h, a.yaw) <
         std::tie(b.x, b.y, b.z, b.l, b.w, b.h, b.yaw);
}

double footprint_intersection_area(const OrientedBox3& a, const OrientedBox3& b) {
  const OrientedBox3& p = box_key_less(a, b) ? a : b;
  const OrientedBox3& q = box_key_less(a, b) ? b : a;
  auto fp = p.footprint();
  auto fq = q.footprint();
  std::vector<Vec2> poly(fp.begin(), fp.end());
  for (int i = 0; i < 4 && !poly.empty(); ++i)
    poly = clip_half_plane(poly, fq[i], fq[(i + 1) % 4]);
  double area = polygon_area(poly);
  return area > 0 ? area : 0.0;
}

}  // namespace

double convex_polygon_intersection_area(const std::vector<Vec2>& p, const std::vector<Vec2>& q) {
  if (polygon_area(p) <= 0 || polygon_area(q) <= 0) return 0.0;
  std::vector<Vec2> poly = p;
  std::size_t nq = q.size();
  for (std::size_t i = 0; i < nq && !poly.empty(); ++i)
    poly = clip_half_plane(poly, q[i], q[(i + 1) % nq]);
  double area = polygon_area(poly);
  return area > 0 ? area : 0.0;
}

double iou_bev(const OrientedBox3& a, const OrientedBox3& b) {
  double inter = footprint_intersection_area(a, b);
  double ua = a.l * a.w, ub = b.l * b.w;
  double denom = ua + ub - inter;
  if (denom <= 0) return 0.0;
  double iou = inter / denom;
  return std::clamp(iou, 0.0, 1.0);
}

double iou_3d(const OrientedBox3& a, const OrientedBox3& b) {
  double h_ovl = std::fmax(0.0, std::fmin(a.z_max(), b.z_max()) - std::fmax(a.z_min(), b.z_min()));
  if (h_ovl <= 0) return 0.0;
  double inter_area = footprint_intersection_area(a, b);
  double v_inter = inter_area * h_ovl;
  double denom = a.volume() + b.volume() - v_inter;
  if (denom <= 0) return 0.0;
  double iou = v_inter / denom;
  return std::clamp(iou, 0.0, 1.0);
}

bool segment_intersects_footprint(const Vec2& a, const Vec2& b, const OrientedBox3& box) {
  // Segment vs convex quad: either an endpoint is inside, or some edge crosses.
  auto fp = box.footprint();
  auto cross = [](const Vec2& o, const Vec2& p, const Vec2& q) {
    return (p.x - o.x) * (q.y - o.y) - (p.y - o.y) * (q.x - o.x);
  };
  auto inside = [&](const Vec2& p) {
    for (int i = 0; i < 4; ++i)
      if (cross(fp[i], fp[(i + 1) % 4], p) < 0) return false;
    return true;
  };
  if (inside(a) || inside(b)) return true;
  auto seg_cross = [&](const Vec2& p1, const Vec2& p2, const Vec2& q1, const Vec2& q2) {
    double d1 = cross(q1, q2, p1);
    double d2 = cross(q1, q2, p2);
    double d3 = cross(p1, p2, q1);
    double d4 = cross(p1, p2, q2);
    return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0));
  };
  for (int i = 0; i < 4; ++i)
    if (seg_cross(a, b, fp[i], fp[(i + 1) % 4])) return true;
  return false;
}

}  // namespace aircoop
