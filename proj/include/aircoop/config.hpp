#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "aircoop/scenario.hpp"

namespace aircoop {

struct ModelConfig {
  std::size_t raster_channels = 3;   // fixed by the scenario renderer
  std::size_t channels = 64;         // C, the shared BEV feature width
  std::size_t enc_hidden = 16;       // encoder stem width
  std::size_t cdsc_hidden = 32;
  std::size_t cdsc_blocks = 2;
  std::size_t embed_dim = 64;        // D
  std::size_t sopt_layers = 2;       // L
  std::size_t sopt_heads = 4;
  std::size_t sopt_mlp_hidden = 32;
  std::size_t sopt_pool = 1;         // >1: SOPT reads a 1/pool resampled copy
  std::array<double, 3> tau_c = {51.2, 51.2, 60.0};  // per-axis offset clip (m)

  // single anchor per feature cell (car prior)
  double anchor_l = 4.5, anchor_w = 2.0, anchor_h = 1.5;
  double anchor_z = -1.0;
  double anchor_yaw = 0.0;

  double score_threshold = 0.10;  // decode keep threshold (on sigmoid score)
  double nms_iou = 0.20;          // BEV IoU suppression threshold

  void validate() const;
};

struct TrainConfig {
  double lr = 0.001;
  std::size_t epochs = 50;
  // Empty means the proportional default: 40% and 80% of the epoch count
  // (20/40 at the 50-epoch default).
  std::vector<std::size_t> milestones;
  std::size_t batch_size = 2;
  int stage = 1;
  std::uint64_t seed = 0;

  double w_det = 1.0, w_off = 0.1, w_z = 0.5;
  double pos_iou = 0.6, neg_iou = 0.45;
  double smooth_l1_beta = 1.0;
  double focal_alpha = 0.25, focal_gamma = 2.0;
  bool stop_grad_delta_z = false;  // Eq-9 path: let z-align gradients reach delta_z

  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

  std::vector<std::size_t> resolved_milestones() const;
  double lr_at_epoch(std::size_t epoch) const;  // exact x0.1 per milestone
  void validate() const;
};

struct EvalConfig {
  std::vector<double> iou_thresholds = {0.5, 0.7};
  std::vector<double> noise_sigmas = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  std::vector<std::size_t> compression_rates = {1, 4, 8, 16, 64};
  std::size_t grid_max_vehicles = 3;
  std::size_t grid_max_uavs = 2;
  std::size_t adapter_epochs = 4;   // compression adapter fine-tune length
  std::uint64_t noise_seed = 1234;  // fixed per sweep point for reproducibility

  void validate() const;
};

// Whole-experiment configuration. Strict schema: unknown keys are rejected,
// ranges validated, and files carry their own schema version.
struct ExperimentConfig {
  int version = 1;
  ScenarioConfig scenario;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  void validate() const;
};

// Parses and validates a config file. Missing keys take documented defaults;
// an empty file yields the full default config. Errors carry line context.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin);

// Canonical serialization; load(save(cfg)) == cfg field-for-field.
std::string config_to_text(const ExperimentConfig& cfg);
void save_config(const ExperimentConfig& cfg, const std::string& path);

// Worker cap for frame-level parallelism: AIRCOOP_THREADS when set and
// positive, otherwise the hardware concurrency.
std::size_t worker_threads();

// Report files: one timestamp header line, deterministic body.
void write_report(const std::string& path, const std::string& body);
// Strips the header line; used by determinism checks and tests.
std::string read_report_body(const std::string& path);

}  // namespace aircoop
