#include "aircoop/config.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace aircoop {

using nlohmann::json;

namespace {

[[noreturn]] void cfg_error(const std::string& origin, const std::string& msg) {
  throw std::invalid_argument(origin + ": " + msg);
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& origin,
                    const std::string& section) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      cfg_error(origin, "unknown key '" + section + it.key() + "'");
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void require_positive(double v, const char* field, const std::string& origin) {
  if (!(v > 0)) cfg_error(origin, std::string("field '") + field + "' must be positive, got " +
                                      std::to_string(v));
}

std::size_t line_of_offset(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

}  // namespace

void ModelConfig::validate() const {
  const std::string o = "model config";
  require_positive(static_cast<double>(channels), "channels", o);
  require_positive(static_cast<double>(embed_dim), "embed_dim", o);
  if (sopt_heads == 0 || embed_dim % sopt_heads != 0)
    cfg_error(o, "embed_dim (" + std::to_string(embed_dim) + ") must be divisible by sopt_heads (" +
                     std::to_string(sopt_heads) + ")");
  if (cdsc_blocks < 1) cfg_error(o, "cdsc_blocks must be >= 1");
  if (sopt_pool < 1) cfg_error(o, "sopt_pool must be >= 1");
  for (double t : tau_c) require_positive(t, "tau_c", o);
  require_positive(anchor_l, "anchor_l", o);
  require_positive(anchor_w, "anchor_w", o);
  require_positive(anchor_h, "anchor_h", o);
  require_positive(nms_iou, "nms_iou", o);
  if (score_threshold < 0 || score_threshold >= 1)
    cfg_error(o, "score_threshold must be in [0,1)");
}

std::vector<std::size_t> TrainConfig::resolved_milestones() const {
  if (!milestones.empty()) return milestones;
  // proportional default: 40% / 80% of the schedule
  std::vector<std::size_t> out;
  out.push_back(static_cast<std::size_t>(std::llround(0.4 * static_cast<double>(epochs))));
  out.push_back(static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(epochs))));
  while (!out.empty() && out.back() >= epochs) out.pop_back();
  return out;
}

double TrainConfig::lr_at_epoch(std::size_t epoch) const {
  double out = lr;
  for (std::size_t m : resolved_milestones())
    if (epoch >= m) out *= 0.1;
  return out;
}

void TrainConfig::validate() const {
  const std::string o = "train config";
  require_positive(lr, "lr", o);
  if (stage != 1 && stage != 2) cfg_error(o, "stage must be 1 or 2");
  if (batch_size == 0) cfg_error(o, "batch_size must be >= 1");
  auto ms = milestones;
  for (std::size_t i = 1; i < ms.size(); ++i)
    if (ms[i] <= ms[i - 1]) cfg_error(o, "milestones must be strictly increasing");
  for (std::size_t m : ms)
    if (m >= epochs) cfg_error(o, "milestone " + std::to_string(m) + " outside epoch range");
  if (!(pos_iou > neg_iou)) cfg_error(o, "pos_iou must exceed neg_iou");
  require_positive(smooth_l1_beta, "smooth_l1_beta", o);
  if (w_det < 0 || w_off < 0 || w_z < 0) cfg_error(o, "loss weights must be non-negative");
}

void EvalConfig::validate() const {
  const std::string o = "eval config";
  for (double t : iou_thresholds)
    if (t <= 0 || t >= 1) cfg_error(o, "iou_thresholds must lie in (0,1)");
  for (std::size_t i = 1; i < noise_sigmas.size(); ++i)
    if (noise_sigmas[i] <= noise_sigmas[i - 1])
      cfg_error(o, "noise_sigmas must be strictly increasing");
  for (std::size_t i = 1; i < compression_rates.size(); ++i)
    if (compression_rates[i] <= compression_rates[i - 1])
      cfg_error(o, "compression_rates must be strictly increasing");
  if (compression_rates.empty() || compression_rates.front() != 1)
    cfg_error(o, "compression_rates must start at 1");
}

void ExperimentConfig::validate() const {
  if (version != 1)
    cfg_error("config", "unsupported schema version " + std::to_string(version));
  if (scenario.n_vehicles < 1 || scenario.n_vehicles > 7 || scenario.n_uavs > 7)
    cfg_error("scenario config", "agent counts must satisfy 1..7 vehicles, 0..7 UAVs");
  require_positive(scenario.cell_vehicle, "cell_vehicle", "scenario config");
  require_positive(scenario.cell_uav, "cell_uav", "scenario config");
  require_positive(scenario.extent_half, "extent_half", "scenario config");
  raster_extent(scenario, AgentKind::Vehicle);  // throws if not grid-aligned
  raster_extent(scenario, AgentKind::Uav);
  model.validate();
  train.validate();
  eval.validate();
}

namespace {

json scenario_to_json(const ScenarioConfig& c) {
  return {{"n_vehicles", c.n_vehicles},       {"n_uavs", c.n_uavs},
          {"n_objects", c.n_objects},         {"n_frames", c.n_frames},
          {"seed", c.seed},                   {"world_half", c.world_half},
          {"ground_z", c.ground_z},           {"uav_altitude", c.uav_altitude},
          {"vehicle_fov_radius", c.vehicle_fov_radius},
          {"uav_cone_half_angle_deg", c.uav_cone_half_angle_deg},
          {"extent_half", c.extent_half},     {"cell_vehicle", c.cell_vehicle},
          {"cell_uav", c.cell_uav},           {"row_fraction", c.row_fraction}};
}

void scenario_from_json(const json& j, ScenarioConfig& c, const std::string& origin) {
  reject_unknown(j,
                 {"n_vehicles", "n_uavs", "n_objects", "n_frames", "seed", "world_half",
                  "ground_z", "uav_altitude", "vehicle_fov_radius", "uav_cone_half_angle_deg",
                  "extent_half", "cell_vehicle", "cell_uav", "row_fraction"},
                 origin, "scenario.");
  read_field(j, "n_vehicles", c.n_vehicles);
  read_field(j, "n_uavs", c.n_uavs);
  read_field(j, "n_objects", c.n_objects);
  read_field(j, "n_frames", c.n_frames);
  read_field(j, "seed", c.seed);
  read_field(j, "world_half", c.world_half);
  read_field(j, "ground_z", c.ground_z);
  read_field(j, "uav_altitude", c.uav_altitude);
  read_field(j, "vehicle_fov_radius", c.vehicle_fov_radius);
  read_field(j, "uav_cone_half_angle_deg", c.uav_cone_half_angle_deg);
  read_field(j, "extent_half", c.extent_half);
  read_field(j, "cell_vehicle", c.cell_vehicle);
  read_field(j, "cell_uav", c.cell_uav);
  read_field(j, "row_fraction", c.row_fraction);
}

json model_to_json(const ModelConfig& c) {
  return {{"raster_channels", c.raster_channels},
          {"channels", c.channels},
          {"enc_hidden", c.enc_hidden},
          {"cdsc_hidden", c.cdsc_hidden},
          {"cdsc_blocks", c.cdsc_blocks},
          {"embed_dim", c.embed_dim},
          {"sopt_layers", c.sopt_layers},
          {"sopt_heads", c.sopt_heads},
          {"sopt_mlp_hidden", c.sopt_mlp_hidden},
          {"sopt_pool", c.sopt_pool},
          {"tau_c", c.tau_c},
          {"anchor_l", c.anchor_l},
          {"anchor_w", c.anchor_w},
          {"anchor_h", c.anchor_h},
          {"anchor_z", c.anchor_z},
          {"anchor_yaw", c.anchor_yaw},
          {"score_threshold", c.score_threshold},
          {"nms_iou", c.nms_iou}};
}

void model_from_json(const json& j, ModelConfig& c, const std::string& origin) {
  reject_unknown(j,
                 {"raster_channels", "channels", "enc_hidden", "cdsc_hidden", "cdsc_blocks",
                  "embed_dim", "sopt_layers", "sopt_heads", "sopt_mlp_hidden", "sopt_pool",
                  "tau_c", "anchor_l", "anchor_w", "anchor_h", "anchor_z", "anchor_yaw",
                  "score_threshold", "nms_iou"},
                 origin, "model.");
  read_field(j, "raster_channels", c.raster_channels);
  read_field(j, "channels", c.channels);
  read_field(j, "enc_hidden", c.enc_hidden);
  read_field(j, "cdsc_hidden", c.cdsc_hidden);
  read_field(j, "cdsc_blocks", c.cdsc_blocks);
  read_field(j, "embed_dim", c.embed_dim);
  read_field(j, "sopt_layers", c.sopt_layers);
  read_field(j, "sopt_heads", c.sopt_heads);
  read_field(j, "sopt_mlp_hidden", c.sopt_mlp_hidden);
  read_field(j, "sopt_pool", c.sopt_pool);
  read_field(j, "tau_c", c.tau_c);
  read_field(j, "anchor_l", c.anchor_l);
  read_field(j, "anchor_w", c.anchor_w);
  read_field(j, "anchor_h", c.anchor_h);
  read_field(j, "anchor_z", c.anchor_z);
  read_field(j, "anchor_yaw", c.anchor_yaw);
  read_field(j, "score_threshold", c.score_threshold);
  read_field(j, "nms_iou", c.nms_iou);
}

json train_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"epochs", c.epochs},
          {"milestones", c.milestones},
          {"batch_size", c.batch_size},
          {"stage", c.stage},
          {"seed", c.seed},
          {"w_det", c.w_det},
          {"w_off", c.w_off},
          {"w_z", c.w_z},
          {"pos_iou", c.pos_iou},
          {"neg_iou", c.neg_iou},
          {"smooth_l1_beta", c.smooth_l1_beta},
          {"focal_alpha", c.focal_alpha},
          {"focal_gamma", c.focal_gamma},
          {"stop_grad_delta_z", c.stop_grad_delta_z},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps}};
}

void train_from_json(const json& j, TrainConfig& c, const std::string& origin) {
  reject_unknown(j,
                 {"lr", "epochs", "milestones", "batch_size", "stage", "seed", "w_det", "w_off",
                  "w_z", "pos_iou", "neg_iou", "smooth_l1_beta", "focal_alpha", "focal_gamma",
                  "stop_grad_delta_z", "adam_beta1", "adam_beta2", "adam_eps"},
                 origin, "train.");
  read_field(j, "lr", c.lr);
  read_field(j, "epochs", c.epochs);
  read_field(j, "milestones", c.milestones);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "stage", c.stage);
  read_field(j, "seed", c.seed);
  read_field(j, "w_det", c.w_det);
  read_field(j, "w_off", c.w_off);
  read_field(j, "w_z", c.w_z);
  read_field(j, "pos_iou", c.pos_iou);
  read_field(j, "neg_iou", c.neg_iou);
  read_field(j, "smooth_l1_beta", c.smooth_l1_beta);
  read_field(j, "focal_alpha", c.focal_alpha);
  read_field(j, "focal_gamma", c.focal_gamma);
  read_field(j, "stop_grad_delta_z", c.stop_grad_delta_z);
  read_field(j, "adam_beta1", c.adam_beta1);
  read_field(j, "adam_beta2", c.adam_beta2);
  read_field(j, "adam_eps", c.adam_eps);
}

json eval_to_json(const EvalConfig& c) {
  return {{"iou_thresholds", c.iou_thresholds},
          {"noise_sigmas", c.noise_sigmas},
          {"compression_rates", c.compression_rates},
          {"grid_max_vehicles", c.grid_max_vehicles},
          {"grid_max_uavs", c.grid_max_uavs},
          {"adapter_epochs", c.adapter_epochs},
          {"noise_seed", c.noise_seed}};
}

void eval_from_json(const json& j, EvalConfig& c, const std::string& origin) {
  reject_unknown(j,
                 {"iou_thresholds", "noise_sigmas", "compression_rates", "grid_max_vehicles",
                  "grid_max_uavs", "adapter_epochs", "noise_seed"},
                 origin, "eval.");
  read_field(j, "iou_thresholds", c.iou_thresholds);
  read_field(j, "noise_sigmas", c.noise_sigmas);
  read_field(j, "compression_rates", c.compression_rates);
  read_field(j, "grid_max_vehicles", c.grid_max_vehicles);
  read_field(j, "grid_max_uavs", c.grid_max_uavs);
  read_field(j, "adapter_epochs", c.adapter_epochs);
  read_field(j, "noise_seed", c.noise_seed);
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  std::string trimmed = text;
  trimmed.erase(0, trimmed.find_first_not_of(" \t\r\n"));
  if (trimmed.empty()) {  // empty file -> documented defaults
    cfg.validate();
    return cfg;
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    cfg_error(origin, "parse error at line " + std::to_string(line_of_offset(text, e.byte)) +
                          ": " + e.what());
  }
  if (!j.is_object()) cfg_error(origin, "config root must be an object");
  reject_unknown(j, {"version", "scenario", "model", "train", "eval"}, origin, "");
  read_field(j, "version", cfg.version);
  if (j.contains("scenario")) scenario_from_json(j.at("scenario"), cfg.scenario, origin);
  if (j.contains("model")) model_from_json(j.at("model"), cfg.model, origin);
  if (j.contains("train")) train_from_json(j.at("train"), cfg.train, origin);
  if (j.contains("eval")) eval_from_json(j.at("eval"), cfg.eval, origin);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    cfg_error(origin, e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config file not found: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), path);
}

std::string config_to_text(const ExperimentConfig& cfg) {
  json j{{"version", cfg.version},
         {"scenario", scenario_to_json(cfg.scenario)},
         {"model", model_to_json(cfg.model)},
         {"train", train_to_json(cfg.train)},
         {"eval", eval_to_json(cfg.eval)}};
  return j.dump(2) + "\n";
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write config: " + path);
  os << config_to_text(cfg);
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("AIRCOOP_THREADS")) {
    long v = std::atol(env);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

void write_report(const std::string& path, const std::string& body) {
  auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write report: " + path);
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char stamp[64];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  os << "# aircoop-report generated=" << stamp << "\n";
  os << body;
}

std::string read_report_body(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read report: " + path);
  std::string first;
  std::getline(is, first);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace aircoop
