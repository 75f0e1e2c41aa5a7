#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

namespace aircoop {

struct Vec2 {
  double x = 0, y = 0;
};

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

// Wraps an angle into (-pi, pi].
double normalize_angle(double a);

// Agent pose in the shared world frame: position plus yaw about +Z
// (counterclockwise). Rotations are yaw-only; UAVs carry no roll/pitch here
// because the BEV formulation works with planar footprints.
struct Pose3 {
  double x = 0, y = 0, z = 0;
  double yaw = 0;  // radians, normalized to (-pi, pi]

  static Pose3 make(double x, double y, double z, double yaw) {
    return Pose3{x, y, z, normalize_angle(yaw)};
  }
};

// World point -> the ego frame defined by pose_ego (rigid, yaw-only).
Vec3 world_to_ego(const Pose3& pose_ego, const Vec3& p_world);
// Inverse transform: point in the ego frame -> world.
Vec3 ego_to_world(const Pose3& pose_ego, const Vec3& p_ego);
// Point expressed in an agent's frame, re-expressed in the ego frame.
Vec3 transform_to_ego(const Pose3& pose_agent, const Pose3& pose_ego, const Vec3& p_agent);

// 7-DoF oriented box: the unit of ground truth, detection, and IoU.
struct OrientedBox3 {
  double x = 0, y = 0, z = 0;   // center, meters
  double l = 1, w = 1, h = 1;   // dims, strictly positive
  double yaw = 0;               // radians
  double score = -1;            // optional confidence in [0,1]; <0 means unset

  bool valid_dims() const { return l > 0 && w > 0 && h > 0; }
  double volume() const { return l * w * h; }
  double z_min() const { return z - 0.5 * h; }
  double z_max() const { return z + 0.5 * h; }
  // BEV footprint corners, counterclockwise.
  std::array<Vec2, 4> footprint() const;
};

// Box in world frame -> the same box expressed in the ego frame.
OrientedBox3 box_to_ego(const Pose3& pose_ego, const OrientedBox3& b);
OrientedBox3 box_to_world(const Pose3& pose_ego, const OrientedBox3& b);

// Metric BEV window plus its grid resolution.
struct BevExtent {
  double x_min = -51.2, x_max = 51.2;
  double y_min = -51.2, y_max = 51.2;
  double z_min = -3.0, z_max = 1.0;
  double cell = 0.8;  // meters per grid cell

  std::size_t grid_h() const;  // rows, along y
  std::size_t grid_w() const;  // cols, along x
  // Throws unless (x_max-x_min)/cell and (y_max-y_min)/cell are integral.
  void validate() const;
  bool contains_xy(double x, double y) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }
  bool contains_z(double z) const { return z >= z_min && z <= z_max; }
};

// Area of a simple polygon (counterclockwise positive).
double polygon_area(const std::vector<Vec2>& poly);

// Area of the intersection of two convex polygons (counterclockwise
// vertices), via half-plane clipping. Degenerate input -> 0.
double convex_polygon_intersection_area(const std::vector<Vec2>& p, const std::vector<Vec2>& q);

// Rotated-rectangle IoU of the BEV footprints.
double iou_bev(const OrientedBox3& a, const OrientedBox3& b);

// Rotation-aware volumetric 3D IoU:
//   IoU = Area(Pa ∩ Pb) * h_ovl / (Va + Vb - V_inter),
//   h_ovl = max(0, min(z_max_a, z_max_b) - max(z_min_a, z_min_b)),
//   V_inter = Area(Pa ∩ Pb) * h_ovl.
double iou_3d(const OrientedBox3& a, const OrientedBox3& b);

// True if the open segment (a, b) crosses the BEV footprint of `box`.
bool segment_intersects_footprint(const Vec2& a, const Vec2& b, const OrientedBox3& box);

}  // namespace aircoop
