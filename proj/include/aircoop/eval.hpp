#pragma once

#include <string>
#include <vector>

#include "aircoop/config.hpp"
#include "aircoop/model.hpp"
#include "aircoop/train.hpp"

namespace aircoop {

enum class IouMode { Bev2d, Vol3d };

struct ApResult {
  double ap = 0.0;
  double iou_threshold = 0.0;
  IouMode mode = IouMode::Bev2d;
  std::size_t n_gt = 0;
  std::size_t n_pred = 0;
};

// One box attributed to an evaluation frame; `box.score` carries confidence
// for predictions and is ignored for ground truth.
struct EvalBox {
  OrientedBox3 box;
  std::size_t frame = 0;
};

// Score-descending greedy one-to-one matching at IoU >= threshold, all-point
// interpolated area under the precision-recall curve. Ties in score break by
// ascending prediction index; ties in IoU by ascending ground-truth index.
// Edge cases: no gts and no preds -> 1 (vacuous); no preds -> 0; gts empty
// but preds present -> 0.
ApResult average_precision(const std::vector<EvalBox>& preds, const std::vector<EvalBox>& gts,
                           IouMode mode, double threshold);

struct FleetEval {
  std::size_t n_vehicles = 0, n_uavs = 0;
  ApResult bev_50, bev_70, vol_50, vol_70;
  std::size_t n_gt = 0, n_pred = 0;
};

struct EvalSettings {
  std::size_t n_vehicles = 1;
  std::size_t n_uavs = 0;
  const CompressionAdapter* adapter = nullptr;
  const NoiseSpec* noise = nullptr;
};

// Full inference path (encode -> CDSC -> warp -> fuse -> detect -> NMS) per
// frame; ground truth is the visibility-filtered set over the frame's full
// agent roster inside the stage-2 evaluation extent.
FleetEval evaluate_config(const PerceptionModel& model, const std::vector<Frame>& frames,
                          const ExperimentConfig& cfg, const EvalSettings& settings);

struct SweepPoint {
  double setting = 0;
  FleetEval eval;
};

struct SweepResult {
  std::string axis;
  std::vector<SweepPoint> points;
};

// Pose-noise robustness: sigma paired as meters (x/y) and degrees (yaw).
// The sigma = 0 point is numerically identical to evaluate_config.
SweepResult sweep_noise(const PerceptionModel& model, const std::vector<Frame>& frames,
                        const ExperimentConfig& cfg, std::size_t n_vehicles, std::size_t n_uavs);

// Channel-bottleneck compression sweep; adapters for rate > 1 are fine-tuned
// on `adapter_frames` (stage-2 style, adapters only).
SweepResult sweep_compression(PerceptionModel& model, const std::vector<Frame>& adapter_frames,
                              const std::vector<Frame>& eval_frames,
                              const ExperimentConfig& cfg, std::size_t n_vehicles,
                              std::size_t n_uavs);

struct GridResult {
  // rows: vehicle count 1..max_veh; cols: UAV count 0..max_uav
  std::vector<std::vector<FleetEval>> cells;
};

GridResult combination_grid(const PerceptionModel& model, const std::vector<Frame>& frames,
                            const ExperimentConfig& cfg);

struct AblationRow {
  bool cdsc = false, sopt = false;
  FleetEval eval;
};

// Four stage-2 trainings from the same stage-1 state with the module
// switches toggled, each evaluated at the full fleet.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg,
                                      const std::vector<CheckpointEntry>& stage1_state,
                                      const std::vector<Frame>& train_frames,
                                      const std::vector<Frame>& eval_frames);

// report serialization (deterministic bodies for write_report)
std::string fleet_eval_json(const FleetEval& e);
std::string sweep_json(const SweepResult& s);
std::string sweep_csv(const SweepResult& s);
std::string grid_json(const GridResult& g, const ExperimentConfig& cfg);
std::string ablation_json(const std::vector<AblationRow>& rows);

}  // namespace aircoop
