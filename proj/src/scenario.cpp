#include "aircoop/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "aircoop/rng.hpp"

namespace fs = std::filesystem;

namespace aircoop {

namespace {

constexpr std::size_t kMaxVehicles = 7;  // dataset maxima
constexpr std::size_t kMaxUavs = 7;

double uav_disc_radius(const AgentSpec& a, double ground_z) {
  return (a.pose.z - ground_z) * std::tan(a.fov * M_PI / 180.0);
}

bool point_in_footprint(const Vec2& p, const OrientedBox3& box) {
  double c = std::cos(box.yaw), s = std::sin(box.yaw);
  double dx = p.x - box.x, dy = p.y - box.y;
  double lx = c * dx + s * dy;
  double ly = -s * dx + c * dy;
  return std::fabs(lx) <= 0.5 * box.l && std::fabs(ly) <= 0.5 * box.w;
}

OrientedBox3 inflate(const OrientedBox3& b, double margin) {
  OrientedBox3 out = b;
  out.l += margin;
  out.w += margin;
  return out;
}

bool overlaps_any(const OrientedBox3& candidate, const std::vector<OrientedBox3>& placed,
                  double margin) {
  OrientedBox3 c = inflate(candidate, margin);
  for (const auto& p : placed)
    if (iou_bev(c, inflate(p, margin)) > 0.0) return true;
  return false;
}

OrientedBox3 sample_object_dims(Rng& rng) {
  OrientedBox3 b;
  b.l = rng.uniform(4.2, 5.0);
  b.w = rng.uniform(2.0, 2.5);
  b.h = rng.uniform(1.3, 2.2);
  return b;
}

double sample_yaw(Rng& rng) {
  // street-like near-axis headings; footprint rasters cannot carry heading
  // direction (mod-pi symmetric), so headings stay unimodal
  return normalize_angle(rng.normal(0.0, 10.0 * M_PI / 180.0));
}

}  // namespace

BevExtent raster_extent(const ScenarioConfig& cfg, AgentKind kind) {
  BevExtent e;
  e.x_min = -cfg.extent_half;
  e.x_max = cfg.extent_half;
  e.y_min = -cfg.extent_half;
  e.y_max = cfg.extent_half;
  e.z_min = -3.0;
  e.z_max = 1.0;
  e.cell = kind == AgentKind::Vehicle ? cfg.cell_vehicle : cfg.cell_uav;
  e.validate();
  return e;
}

std::vector<std::size_t> visible_object_indices(const std::vector<OrientedBox3>& objects,
                                                const AgentSpec& agent, double ground_z) {
  std::vector<std::size_t> out;
  Vec2 apos{agent.pose.x, agent.pose.y};
  if (agent.kind == AgentKind::Uav) {
    double r = uav_disc_radius(agent, ground_z);
    for (std::size_t i = 0; i < objects.size(); ++i) {
      double dx = objects[i].x - apos.x, dy = objects[i].y - apos.y;
      if (dx * dx + dy * dy <= r * r) out.push_back(i);
    }
    return out;
  }
  double r = agent.fov;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    double dx = objects[i].x - apos.x, dy = objects[i].y - apos.y;
    if (dx * dx + dy * dy > r * r) continue;
    Vec2 target{objects[i].x, objects[i].y};
    bool blocked = false;
    for (std::size_t j = 0; j < objects.size() && !blocked; ++j) {
      if (j == i) continue;
      // only a nearer object can block the ray to the target center
      double djx = objects[j].x - apos.x, djy = objects[j].y - apos.y;
      if (djx * djx + djy * djy >= dx * dx + dy * dy) continue;
      blocked = segment_intersects_footprint(apos, target, objects[j]);
    }
    if (!blocked) out.push_back(i);
  }
  return out;
}

Raster render_observation(const Frame& frame, std::size_t agent_index, const BevExtent& extent,
                          const ScenarioConfig& cfg) {
  extent.validate();
  const AgentSpec& agent = frame.agents.at(agent_index);
  std::size_t H = extent.grid_h(), W = extent.grid_w();
  Raster r;
  r.channels = 3;
  r.h = H;
  r.w = W;
  r.data.assign(3 * H * W, 0.0f);

  auto vis = visible_object_indices(frame.objects, agent, cfg.ground_z);
  std::vector<OrientedBox3> local;  // visible boxes in the agent frame
  local.reserve(vis.size());
  for (std::size_t i : vis) local.push_back(box_to_ego(agent.pose, frame.objects[i]));

  double fov_radius = agent.kind == AgentKind::Uav ? uav_disc_radius(agent, cfg.ground_z)
                                                   : agent.fov;

  // Height encoding differs by platform. Vehicles read object top height over
  // the ground-level z window; UAVs read depth-below-sensor normalized by
  // altitude, which compresses height differences into a narrow band.
  auto height_code = [&](const OrientedBox3& world_box) {
    double z_top = world_box.z + 0.5 * world_box.h;
    if (agent.kind == AgentKind::Vehicle)
      return (z_top - extent.z_min) / (extent.z_max - extent.z_min);
    return (agent.pose.z - z_top) / (agent.pose.z - cfg.ground_z);
  };

  constexpr int kSub = 3;  // supersampling per axis for coverage fractions
  for (std::size_t li = 0; li < local.size(); ++li) {
    const OrientedBox3& b = local[li];
    double enc = height_code(frame.objects[vis[li]]);
    double rad = 0.5 * std::hypot(b.l, b.w);
    long x_lo = static_cast<long>(std::floor((b.x - rad - extent.x_min) / extent.cell));
    long x_hi = static_cast<long>(std::ceil((b.x + rad - extent.x_min) / extent.cell));
    long y_lo = static_cast<long>(std::floor((b.y - rad - extent.y_min) / extent.cell));
    long y_hi = static_cast<long>(std::ceil((b.y + rad - extent.y_min) / extent.cell));
    x_lo = std::max(x_lo, 0L);
    y_lo = std::max(y_lo, 0L);
    x_hi = std::min(x_hi, static_cast<long>(W) - 1);
    y_hi = std::min(y_hi, static_cast<long>(H) - 1);
    for (long gy = y_lo; gy <= y_hi; ++gy) {
      for (long gx = x_lo; gx <= x_hi; ++gx) {
        int hit = 0;
        for (int sy = 0; sy < kSub; ++sy) {
          for (int sx = 0; sx < kSub; ++sx) {
            Vec2 p{extent.x_min + (gx + (sx + 0.5) / kSub) * extent.cell,
                   extent.y_min + (gy + (sy + 0.5) / kSub) * extent.cell};
            if (point_in_footprint(p, b)) ++hit;
          }
        }
        if (hit == 0) continue;
        float cov = static_cast<float>(hit) / (kSub * kSub);
        std::size_t idx = gy * W + gx;
        float& occ = r.data[idx];
        occ = std::min(1.0f, occ + cov);
        float& hgt = r.data[2 * H * W + idx];
        hgt = std::max(hgt, static_cast<float>(enc) * cov);
      }
    }
  }

  // FOV mask: the agent sits at the grid center in its own frame.
  for (std::size_t gy = 0; gy < H; ++gy) {
    double py = extent.y_min + (gy + 0.5) * extent.cell;
    for (std::size_t gx = 0; gx < W; ++gx) {
      double px = extent.x_min + (gx + 0.5) * extent.cell;
      if (px * px + py * py <= fov_radius * fov_radius) r.data[H * W + gy * W + gx] = 1.0f;
    }
  }
  return r;
}

std::vector<Frame> generate_scenario(const ScenarioConfig& cfg) {
  if (cfg.n_vehicles < 1) throw std::runtime_error("generate_scenario: need at least 1 vehicle");
  if (cfg.n_vehicles > kMaxVehicles || cfg.n_uavs > kMaxUavs)
    throw std::runtime_error("generate_scenario: agent counts exceed the 7/7 maxima");

  std::vector<Frame> frames;
  frames.reserve(cfg.n_frames);
  for (std::size_t fi = 0; fi < cfg.n_frames; ++fi) {
    Rng rng = Rng::derive(cfg.seed, "scenario-frame-" + std::to_string(fi));
    Frame frame;
    frame.frame_id = fi;
    frame.ego_index = 0;

    // Objects first: street-like rows plus scattered singles, no BEV overlap.
    std::size_t n_rows_target =
        static_cast<std::size_t>(std::llround(cfg.row_fraction * cfg.n_objects));
    const double margin = 0.9;
    std::size_t attempts = 0;
    const std::size_t max_attempts = 400 * (cfg.n_objects + 1);
    while (frame.objects.size() < n_rows_target && attempts < max_attempts) {
      // one row of 3..5 cars along x
      double row_y = rng.uniform(-cfg.world_half + 3.0, cfg.world_half - 3.0);
      double x0 = rng.uniform(-cfg.world_half + 3.0, cfg.world_half * 0.2);
      std::size_t row_len = 3 + rng.uniform_index(3);
      double x = x0;
      for (std::size_t k = 0; k < row_len && frame.objects.size() < n_rows_target; ++k) {
        ++attempts;
        OrientedBox3 b = sample_object_dims(rng);
        b.x = x + 0.5 * b.l;
        b.y = row_y + rng.uniform(-0.5, 0.5);
        b.z = cfg.ground_z + 0.5 * b.h;
        b.yaw = sample_yaw(rng);
        x += b.l + rng.uniform(1.0, 3.0);
        if (std::fabs(b.x) > cfg.world_half || std::fabs(b.y) > cfg.world_half) continue;
        if (overlaps_any(b, frame.objects, margin)) continue;
        frame.objects.push_back(b);
      }
    }
    while (frame.objects.size() < cfg.n_objects && attempts < max_attempts) {
      ++attempts;
      OrientedBox3 b = sample_object_dims(rng);
      b.x = rng.uniform(-cfg.world_half, cfg.world_half);
      b.y = rng.uniform(-cfg.world_half, cfg.world_half);
      b.z = cfg.ground_z + 0.5 * b.h;
      b.yaw = sample_yaw(rng);
      if (overlaps_any(b, frame.objects, margin)) continue;
      frame.objects.push_back(b);
    }
    if (frame.objects.size() < cfg.n_objects)
      throw std::runtime_error("generate_scenario: object placement failed after " +
                               std::to_string(max_attempts) + " retries");

    // Agents: ego near the center, extra vehicles and UAVs anywhere in bounds.
    auto clear_of_objects = [&](double x, double y) {
      for (const auto& o : frame.objects)
        if (point_in_footprint({x, y}, inflate(o, 2.0))) return false;
      return true;
    };
    std::size_t agent_attempts = 0;
    auto place_vehicle = [&](double bound, bool is_ego) {
      while (true) {
        if (++agent_attempts > 4000)
          throw std::runtime_error("generate_scenario: agent placement failed");
        double x = rng.uniform(-bound, bound);
        double y = rng.uniform(-bound, bound);
        if (!clear_of_objects(x, y)) continue;
        AgentSpec a;
        a.kind = AgentKind::Vehicle;
        // the ego follows the street axis; detection happens in its frame,
        // and footprints carry orientation only mod pi
        double yaw = is_ego ? rng.normal(0.0, 5.0 * M_PI / 180.0) : rng.uniform(-M_PI, M_PI);
        a.pose = Pose3::make(x, y, rng.uniform(-0.2, 0.2), yaw);
        a.fov = cfg.vehicle_fov_radius;
        return a;
      }
    };
    frame.agents.push_back(place_vehicle(std::min(15.0, cfg.world_half), true));  // ego
    for (std::size_t i = 1; i < cfg.n_vehicles; ++i)
      frame.agents.push_back(place_vehicle(cfg.world_half, false));
    for (std::size_t i = 0; i < cfg.n_uavs; ++i) {
      AgentSpec a;
      a.kind = AgentKind::Uav;
      a.pose = Pose3::make(rng.uniform(-cfg.world_half * 0.6, cfg.world_half * 0.6),
                           rng.uniform(-cfg.world_half * 0.6, cfg.world_half * 0.6),
                           cfg.uav_altitude, rng.uniform(-M_PI, M_PI));
      a.fov = cfg.uav_cone_half_angle_deg;
      frame.agents.push_back(a);
    }

    // Idealized observations are rendered at true poses; pose noise applied
    // later perturbs only the pose estimates, not the sensor contents.
    for (std::size_t ai = 0; ai < frame.agents.size(); ++ai)
      frame.observations.push_back(
          render_observation(frame, ai, raster_extent(cfg, frame.agents[ai].kind), cfg));

    frames.push_back(std::move(frame));
  }
  return frames;
}

Frame apply_pose_noise(const Frame& frame, const NoiseSpec& noise) {
  if (noise.sigma_p < 0 || noise.sigma_r < 0)
    throw std::invalid_argument("apply_pose_noise: negative sigma");
  Frame out = frame;
  Rng rng = Rng::derive(noise.seed, "noise-frame-" + std::to_string(frame.frame_id));
  for (std::size_t i = 0; i < out.agents.size(); ++i) {
    double dx = rng.normal(0.0, noise.sigma_p);
    double dy = rng.normal(0.0, noise.sigma_p);
    double dyaw = rng.normal(0.0, noise.sigma_r * M_PI / 180.0);
    if (i == out.ego_index) continue;  // draws consumed either way, ego untouched
    auto& p = out.agents[i].pose;
    p.x += dx;
    p.y += dy;
    p.yaw = normalize_angle(p.yaw + dyaw);
  }
  return out;
}

std::vector<OrientedBox3> visibility_filter(const std::vector<OrientedBox3>& objects,
                                            const std::vector<AgentSpec>& agents,
                                            const Pose3& ego_pose, const BevExtent& extent,
                                            double ground_z) {
  std::vector<bool> keep(objects.size(), false);
  for (const auto& a : agents)
    for (std::size_t i : visible_object_indices(objects, a, ground_z)) keep[i] = true;
  std::vector<OrientedBox3> out;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (!keep[i]) continue;
    Vec3 c = world_to_ego(ego_pose, {objects[i].x, objects[i].y, objects[i].z});
    if (extent.contains_xy(c.x, c.y) && extent.contains_z(c.z)) out.push_back(objects[i]);
  }
  return out;
}

// ---- dataset IO ----

namespace {

nlohmann::json config_to_json(const ScenarioConfig& c) {
  return {{"n_vehicles", c.n_vehicles},
          {"n_uavs", c.n_uavs},
          {"n_objects", c.n_objects},
          {"n_frames", c.n_frames},
          {"seed", c.seed},
          {"world_half", c.world_half},
          {"ground_z", c.ground_z},
          {"uav_altitude", c.uav_altitude},
          {"vehicle_fov_radius", c.vehicle_fov_radius},
          {"uav_cone_half_angle_deg", c.uav_cone_half_angle_deg},
          {"extent_half", c.extent_half},
          {"cell_vehicle", c.cell_vehicle},
          {"cell_uav", c.cell_uav},
          {"row_fraction", c.row_fraction}};
}

ScenarioConfig config_from_json(const nlohmann::json& j) {
  ScenarioConfig c;
  c.n_vehicles = j.at("n_vehicles").get<std::size_t>();
  c.n_uavs = j.at("n_uavs").get<std::size_t>();
  c.n_objects = j.at("n_objects").get<std::size_t>();
  c.n_frames = j.at("n_frames").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.world_half = j.at("world_half").get<double>();
  c.ground_z = j.at("ground_z").get<double>();
  c.uav_altitude = j.at("uav_altitude").get<double>();
  c.vehicle_fov_radius = j.at("vehicle_fov_radius").get<double>();
  c.uav_cone_half_angle_deg = j.at("uav_cone_half_angle_deg").get<double>();
  c.extent_half = j.at("extent_half").get<double>();
  c.cell_vehicle = j.at("cell_vehicle").get<double>();
  c.cell_uav = j.at("cell_uav").get<double>();
  c.row_fraction = j.at("row_fraction").get<double>();
  return c;
}

std::string frame_stem(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

void put_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_dataset(const std::string& dir, const ScenarioConfig& cfg,
                  const std::vector<Frame>& frames) {
  fs::create_directories(fs::path(dir) / "frames");
  {
    nlohmann::json meta{{"format", "aircoop-dataset-v1"},
                        {"config", config_to_json(cfg)},
                        {"n_frames", frames.size()}};
    std::ofstream os(fs::path(dir) / "scenario.meta");
    os << meta.dump(2) << "\n";
  }
  for (const auto& f : frames) {
    nlohmann::json rec;
    rec["frame_id"] = f.frame_id;
    rec["ego_index"] = f.ego_index;
    rec["agents"] = nlohmann::json::array();
    for (const auto& a : f.agents)
      rec["agents"].push_back({{"kind", a.kind == AgentKind::Vehicle ? "vehicle" : "uav"},
                               {"pose", {a.pose.x, a.pose.y, a.pose.z, a.pose.yaw}},
                               {"fov", a.fov}});
    rec["objects"] = nlohmann::json::array();
    for (const auto& b : f.objects)
      rec["objects"].push_back({b.x, b.y, b.z, b.l, b.w, b.h, b.yaw});
    std::ofstream os(fs::path(dir) / "frames" / (frame_stem(f.frame_id) + ".rec"));
    os << rec.dump(2) << "\n";

    std::ofstream rs(fs::path(dir) / "frames" / (frame_stem(f.frame_id) + ".raster"),
                     std::ios::binary);
    rs.write("ACRS0001", 8);
    put_u32le(rs, static_cast<std::uint32_t>(f.observations.size()));
    for (const auto& r : f.observations) {
      put_u32le(rs, static_cast<std::uint32_t>(r.channels));
      put_u32le(rs, static_cast<std::uint32_t>(r.h));
      put_u32le(rs, static_cast<std::uint32_t>(r.w));
      for (float v : r.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32le(rs, bits);
      }
    }
  }
}

std::pair<ScenarioConfig, std::vector<Frame>> load_dataset(const std::string& dir) {
  std::ifstream ms(fs::path(dir) / "scenario.meta");
  if (!ms) throw std::runtime_error("not a dataset directory (missing scenario.meta): " + dir);
  nlohmann::json meta = nlohmann::json::parse(ms);
  if (meta.at("format").get<std::string>() != "aircoop-dataset-v1")
    throw std::runtime_error("unsupported dataset format in " + dir);
  ScenarioConfig cfg = config_from_json(meta.at("config"));
  std::size_t n = meta.at("n_frames").get<std::size_t>();
  std::vector<Frame> frames;
  frames.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Frame f;
    std::ifstream rsrec(fs::path(dir) / "frames" / (frame_stem(i) + ".rec"));
    if (!rsrec) throw std::runtime_error("missing frame record " + frame_stem(i));
    nlohmann::json rec = nlohmann::json::parse(rsrec);
    f.frame_id = rec.at("frame_id").get<std::size_t>();
    f.ego_index = rec.at("ego_index").get<std::size_t>();
    for (const auto& ja : rec.at("agents")) {
      AgentSpec a;
      a.kind = ja.at("kind").get<std::string>() == "uav" ? AgentKind::Uav : AgentKind::Vehicle;
      auto p = ja.at("pose");
      a.pose = Pose3{p[0].get<double>(), p[1].get<double>(), p[2].get<double>(),
                     p[3].get<double>()};
      a.fov = ja.at("fov").get<double>();
      f.agents.push_back(a);
    }
    for (const auto& jb : rec.at("objects")) {
      OrientedBox3 b;
      b.x = jb[0].get<double>();
      b.y = jb[1].get<double>();
      b.z = jb[2].get<double>();
      b.l = jb[3].get<double>();
      b.w = jb[4].get<double>();
      b.h = jb[5].get<double>();
      b.yaw = jb[6].get<double>();
      f.objects.push_back(b);
    }
    std::ifstream rs(fs::path(dir) / "frames" / (frame_stem(i) + ".raster"), std::ios::binary);
    if (!rs) throw std::runtime_error("missing frame raster " + frame_stem(i));
    char magic[8];
    rs.read(magic, 8);
    if (!rs || std::memcmp(magic, "ACRS0001", 8) != 0)
      throw std::runtime_error("bad raster header in frame " + frame_stem(i));
    std::uint32_t n_agents = get_u32le(rs);
    for (std::uint32_t ai = 0; ai < n_agents; ++ai) {
      Raster r;
      r.channels = get_u32le(rs);
      r.h = get_u32le(rs);
      r.w = get_u32le(rs);
      r.data.resize(r.channels * r.h * r.w);
      for (auto& v : r.data) {
        std::uint32_t bits = get_u32le(rs);
        std::memcpy(&v, &bits, 4);
      }
      if (!rs) throw std::runtime_error("truncated raster in frame " + frame_stem(i));
      f.observations.push_back(std::move(r));
    }
    frames.push_back(std::move(f));
  }
  return {cfg, frames};
}

}  // namespace aircoop
