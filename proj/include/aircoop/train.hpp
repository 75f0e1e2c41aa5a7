#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "aircoop/config.hpp"
#include "aircoop/model.hpp"

namespace aircoop {

// ---- anchor assignment ----

struct AnchorAssignment {
  // per cell, row-major: >= 0 matched gt index, -1 negative, -2 ignored
  std::vector<int> match;
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t n_pos = 0;
};

// positive iff anchor-gt BEV IoU >= pos_iou; negative iff < neg_iou; the band
// in between is ignored.
AnchorAssignment assign_targets(const AnchorGrid& anchors,
                                const std::vector<OrientedBox3>& gts_ego, double pos_iou,
                                double neg_iou);

// ---- losses ----

struct LossReport {
  double l_det = 0, l_offset = 0, l_z_align = 0, total = 0;
  double w_det = 0, w_off = 0, w_z = 0;
  bool no_positives = false;  // flagged when |P| = 0 for the z-align term
};

// Binary focal classification over non-ignored anchors plus smooth-L1 over
// the 7 regression residuals of positive anchors, each normalized by the
// positive count.
Tensor detection_loss(const DetectionOutput& out, const AnchorGrid& anchors,
                      const AnchorAssignment& assign, const std::vector<OrientedBox3>& gts_ego,
                      const TrainConfig& cfg);

// Smooth-L1 of the 3D offset against its pose-derived target, summed over
// the three components.
Tensor offset_loss(const Tensor& dp_pred, const std::array<double, 3>& dp_gt, double beta);

// t_z_final = t_z_raw - delta_z / h_anchor, broadcast over the map;
// differentiable in both tensor inputs.
Tensor calibrate_z(const Tensor& t_z_raw, const Tensor& delta_z, double h_anchor);

struct ZAlignLoss {
  Tensor loss;
  bool no_positives = false;
};

// Mean |z_pred - z_gt| over positive cells, where z_pred decodes the
// calibrated residual: z = anchor_z + (t_z_raw - delta_z/h) * h.
// Pass an undefined delta_z to skip calibration (delta = 0).
ZAlignLoss z_align_loss(const Tensor& t_z_raw_map, const Tensor& delta_z,
                        const AnchorGrid& anchors, const AnchorAssignment& assign,
                        const std::vector<OrientedBox3>& gts_ego);

struct FrameLoss {
  Tensor total;
  LossReport report;
};

// Assembles total = w_det*L_det + w_off*L_offset + w_z*L_z_align for one
// forward result. Offset/z terms appear only when UAV offsets are present
// and their weights are nonzero.
FrameLoss frame_loss(const ForwardResult& fwd, const std::vector<OrientedBox3>& gts_ego,
                     const AnchorGrid& anchors, const TrainConfig& cfg);

// ---- optimizer ----

class AdamOptimizer {
 public:
  // Frozen parameters never enter the update set.
  AdamOptimizer(const std::vector<Parameter*>& params, const TrainConfig& cfg);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void zero_grad();
  void step();
  std::vector<std::string> update_set() const;

 private:
  struct Slot {
    Parameter* p;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---- two-stage training ----

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double l_det = 0, l_offset = 0, l_z_align = 0, total = 0;
};

struct TrainOutcome {
  PerceptionModel model;
  std::vector<EpochMetrics> history;
  bool frozen_grads_always_zero = true;  // asserted every step in stage 2
};

struct Stage2Options {
  bool use_cdsc = true;  // false: rescale + 1x1 projection ("-CDSC")
  bool use_sopt = true;  // false: no SOPT module, w_off = w_z = 0 ("-SOPT")
};

// Stage 1: vehicle-only collaboration; trains vehicle encoder, fusion and
// detection head with Adam + milestone decay. z window [-3, 1].
TrainOutcome train_stage1(const ExperimentConfig& cfg, const std::vector<Frame>& frames,
                          const std::string& metrics_log = "");

// Stage 2: loads the stage-1 weights, freezes vehicle encoder + fusion +
// head (bit-identical at exit), transfers the vehicle encoder into the UAV
// encoder, and trains UAV encoder + CDSC + SOPT against the joint objective.
// z window extended to [-60, 10].
TrainOutcome train_stage2(const ExperimentConfig& cfg, const std::vector<Frame>& frames,
                          const std::vector<CheckpointEntry>& stage1_state,
                          const Stage2Options& opts = {}, const std::string& metrics_log = "");

// Fine-tunes a channel-bottleneck adapter (everything else untouched) on
// cached post-encoder features; used by the compression sweep.
CompressionAdapter train_compression_adapter(PerceptionModel& model,
                                             const std::vector<Frame>& frames,
                                             const ExperimentConfig& cfg, std::size_t rate,
                                             std::size_t epochs);

// stage-z window helpers
BevExtent stage_extent(const PerceptionModel& model, int stage);

// Mean offset loss over frames (held-out monitoring; no gradients).
double mean_offset_loss(const PerceptionModel& model, const std::vector<Frame>& frames,
                        const ExperimentConfig& cfg);

// Checkpoint contents per stage: stage 1 persists the V2V modules
// (veh_encoder, fusion, head); stage 2 persists the full inference graph —
// everything except the discardable "sopt.*" parameters.
std::vector<CheckpointEntry> stage1_checkpoint_state(PerceptionModel& model);
std::vector<CheckpointEntry> inference_checkpoint_state(PerceptionModel& model);

}  // namespace aircoop
