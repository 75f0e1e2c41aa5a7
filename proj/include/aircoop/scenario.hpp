#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "aircoop/geometry.hpp"

namespace aircoop {

enum class AgentKind { Vehicle, Uav };

// World frame convention: z = 0 is the vehicle sensor plane. Ground sits at
// ground_z (default -1.9 m) so object boxes fall inside the stage-1 z window
// [-3, 1] and car centers sit near the anchor prior z = -1.0 m. Vehicles have
// |pose.z| <= 0.5; UAVs hover at uav_altitude (50 m).
struct AgentSpec {
  AgentKind kind = AgentKind::Vehicle;
  Pose3 pose;
  // Vehicles: max sensing radius in meters. UAVs: downward cone half-angle in
  // degrees; the ground-projected coverage disc has radius
  // (pose.z - ground_z) * tan(fov).
  double fov = 28.0;
};

// Per-agent BEV observation, agent-centered. Channels:
//   0  occupancy coverage fraction in [0,1]
//   1  field-of-view mask
//   2  object height encoding (kind-specific, see render_observation)
struct Raster {
  std::size_t channels = 0, h = 0, w = 0;
  std::vector<float> data;  // row-major [C][H][W]

  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * h + y) * w + x];
  }
};

struct Frame {
  std::size_t frame_id = 0;
  std::size_t ego_index = 0;               // always a vehicle
  std::vector<AgentSpec> agents;
  std::vector<OrientedBox3> objects;       // ground truth, world frame
  std::vector<Raster> observations;        // one per agent

  const AgentSpec& ego() const { return agents[ego_index]; }
};

struct NoiseSpec {
  double sigma_p = 0.0;   // std of x/y perturbation, meters
  double sigma_r = 0.0;   // std of yaw perturbation, degrees
  std::uint64_t seed = 0;
};

struct ScenarioConfig {
  std::size_t n_vehicles = 3;
  std::size_t n_uavs = 2;
  std::size_t n_objects = 20;
  std::size_t n_frames = 8;
  std::uint64_t seed = 0;

  double world_half = 45.0;            // placement bound for agents/objects
  double ground_z = -1.9;
  double uav_altitude = 50.0;
  double vehicle_fov_radius = 28.0;
  double uav_cone_half_angle_deg = 35.0;

  double extent_half = 51.2;           // raster window half-size (meters)
  double cell_vehicle = 0.8;           // vehicle raster resolution
  double cell_uav = 1.6;               // UAV native resolution (coarser)

  double row_fraction = 0.7;           // share of objects laid out in street rows
};

// Raster window for an agent kind (agent-centered, z per stage-1 defaults).
BevExtent raster_extent(const ScenarioConfig& cfg, AgentKind kind);

// Deterministic in (config, seed). Objects never overlap in BEV; throws
// std::runtime_error if placement fails after bounded retries or if counts
// exceed the 7 vehicle / 7 UAV maxima.
std::vector<Frame> generate_scenario(const ScenarioConfig& cfg);

// Ground-truth indices visible to one agent. Vehicles: within the sensing
// radius and not blocked along the 2D ray by another object's footprint.
// UAVs: everything inside the ground-projected cone, no occlusion.
std::vector<std::size_t> visible_object_indices(const std::vector<OrientedBox3>& objects,
                                                const AgentSpec& agent, double ground_z);

// Idealized sensor raster for one agent (agent-centered grid).
Raster render_observation(const Frame& frame, std::size_t agent_index, const BevExtent& extent,
                          const ScenarioConfig& cfg);

// Non-ego poses perturbed by N(0, sigma_p^2) on x/y and N(0, sigma_r^2)
// degrees on yaw; ego pose, ground truth, and observations untouched.
Frame apply_pose_noise(const Frame& frame, const NoiseSpec& noise);

// Keeps objects visible to >= 1 of `agents` and inside `extent` around the
// ego pose. Defines the ground-truth set used by evaluation.
std::vector<OrientedBox3> visibility_filter(const std::vector<OrientedBox3>& objects,
                                            const std::vector<AgentSpec>& agents,
                                            const Pose3& ego_pose, const BevExtent& extent,
                                            double ground_z);

// ---- on-disk dataset ----
// <dir>/scenario.meta            JSON: format version, config, frame count
// <dir>/frames/NNNNNN.rec        JSON: frame_id, ego_index, agents, objects
// <dir>/frames/NNNNNN.raster     binary: "ACRS0001", u32 n_agents, then per
//                                agent u32 C,H,W followed by C*H*W f32 LE
void save_dataset(const std::string& dir, const ScenarioConfig& cfg,
                  const std::vector<Frame>& frames);
std::pair<ScenarioConfig, std::vector<Frame>> load_dataset(const std::string& dir);

}  // namespace aircoop
