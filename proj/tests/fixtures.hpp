// Shared desk-size fixtures for model/train/eval tests.
#pragma once

#include "aircoop/config.hpp"
#include "aircoop/model.hpp"
#include "aircoop/scenario.hpp"

namespace aircoop::fixtures {

// 32x32 vehicle rasters (cell 1.6), 16x16 UAV rasters (cell 3.2);
// feature grid 16x16 at 3.2 m after the encoder.
inline ScenarioConfig tiny_scenario() {
  ScenarioConfig s;
  s.n_vehicles = 2;
  s.n_uavs = 1;
  s.n_objects = 6;
  s.n_frames = 3;
  s.world_half = 20.0;
  s.extent_half = 25.6;
  s.cell_vehicle = 1.6;
  s.cell_uav = 3.2;
  s.vehicle_fov_radius = 24.0;
  s.seed = 5;
  return s;
}

inline ModelConfig tiny_model() {
  ModelConfig m;
  m.channels = 8;
  m.enc_hidden = 8;
  m.cdsc_hidden = 8;
  m.cdsc_blocks = 1;
  m.embed_dim = 8;
  m.sopt_layers = 1;
  m.sopt_heads = 2;
  m.sopt_mlp_hidden = 8;
  m.score_threshold = 0.10;
  return m;
}

inline ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.scenario = tiny_scenario();
  c.model = tiny_model();
  c.train.epochs = 2;
  c.train.batch_size = 2;
  c.train.seed = 11;
  c.eval.adapter_epochs = 2;
  c.validate();
  return c;
}

// Anchor-cell center in the tiny feature grid (16x16, cell 3.2, ego frame).
inline double tiny_cell_center(std::size_t idx) { return -25.6 + (idx + 0.5) * 3.2; }

// Hand-built frame: ego at the origin facing +x, one extra vehicle, one UAV,
// objects parked exactly on anchor centers so every gt has an IoU-1 anchor.
inline Frame handmade_frame(const ScenarioConfig& scen, std::size_t n_objects = 3) {
  Frame f;
  f.frame_id = 0;
  f.ego_index = 0;
  AgentSpec ego;
  ego.kind = AgentKind::Vehicle;
  ego.pose = Pose3::make(0, 0, 0, 0);
  ego.fov = scen.vehicle_fov_radius;
  AgentSpec veh2 = ego;
  veh2.pose = Pose3::make(-6.4, 3.2, 0, 0);
  AgentSpec uav;
  uav.kind = AgentKind::Uav;
  uav.pose = Pose3::make(3.2, -1.6, scen.uav_altitude, 0);
  uav.fov = scen.uav_cone_half_angle_deg;
  f.agents = {ego, veh2, uav};

  const std::size_t cells[][2] = {{10, 8}, {5, 11}, {12, 4}, {3, 5}, {8, 12}, {13, 10}};
  for (std::size_t i = 0; i < n_objects && i < 6; ++i) {
    OrientedBox3 b;
    b.x = tiny_cell_center(cells[i][0]);
    b.y = tiny_cell_center(cells[i][1]);
    b.l = 4.5;
    b.w = 2.0;
    b.h = 1.5;
    b.z = scen.ground_z + 0.5 * b.h;
    b.yaw = 0.0;
    f.objects.push_back(b);
  }
  for (std::size_t ai = 0; ai < f.agents.size(); ++ai)
    f.observations.push_back(
        render_observation(f, ai, raster_extent(scen, f.agents[ai].kind), scen));
  return f;
}

}  // namespace aircoop::fixtures
