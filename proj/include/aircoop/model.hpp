#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "aircoop/checkpoint.hpp"
#include "aircoop/config.hpp"
#include "aircoop/geometry.hpp"
#include "aircoop/scenario.hpp"
#include "aircoop/tensor.hpp"

namespace aircoop {

// A feature grid tied to a metric BEV window. The grid must satisfy
// H == extent.grid_h(), W == extent.grid_w().
struct BevFeature {
  Tensor tensor;  // [C, H, W]
  BevExtent extent;
  AgentKind source_kind = AgentKind::Vehicle;

  void check() const;
};

// ---- layers ----

struct Conv2dLayer {
  Parameter weight;  // [out, in/groups, k, k]
  Parameter bias;    // [out]
  std::size_t groups = 1;
  std::size_t padding = 0;

  static Conv2dLayer make(const std::string& name, std::size_t in, std::size_t out,
                          std::size_t ksize, std::size_t groups, Rng& rng,
                          bool zero_init = false);
  Tensor forward(const Tensor& x) const;
  void collect(std::vector<Parameter*>& out);
};

struct LinearLayer {
  Parameter weight;  // [in, out]
  Parameter bias;    // [out]

  static LinearLayer make(const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                          bool zero_init = false);
  Tensor forward(const Tensor& x) const;  // [.., in] -> [.., out]
  void collect(std::vector<Parameter*>& out);
};

struct LayerNormLayer {
  Parameter gamma, beta;

  static LayerNormLayer make(const std::string& name, std::size_t dim);
  Tensor forward(const Tensor& x) const;  // normalizes the last axis
  void collect(std::vector<Parameter*>& out);
};

// LayerNorm across the channel axis of a [C,H,W] map (per spatial position).
Tensor channel_layer_norm(const Tensor& x, const LayerNormLayer& ln);

// ---- per-agent encoder ----

// conv3x3 -> GELU -> 2x downsample (bilinear half, i.e. 2x2 average pooling)
// -> conv3x3 -> GELU. Vehicle and UAV instances are separate parameter sets.
struct EncoderModule {
  Conv2dLayer conv1, conv2;

  static EncoderModule make(const std::string& name, const ModelConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& raster) const;  // [C0,H,W] -> [C,H/2,W/2]
  void collect(std::vector<Parameter*>& out);
};

// Raster (float32) -> input tensor, shape checked against the config.
Tensor raster_to_tensor(const Raster& r, const ModelConfig& cfg);

// ---- CDSC ----

struct ConvNeXtBlock {
  Conv2dLayer dw;    // 7x7 depthwise
  LayerNormLayer norm;
  Conv2dLayer pw1;   // 1x1 expand 4x
  Conv2dLayer pw2;   // 1x1 project back

  static ConvNeXtBlock make(const std::string& name, std::size_t dim, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(std::vector<Parameter*>& out);
};

struct CdscModule {
  Conv2dLayer phi_in;   // 1x1 to the hidden width
  std::vector<ConvNeXtBlock> blocks;
  Conv2dLayer phi_out;  // 1x1 to the target channel count

  static CdscModule make(const std::string& name, const ModelConfig& cfg, Rng& rng);
  // F_out = phi_out(Psi(phi_in(f))); spatial size preserved.
  Tensor map(const Tensor& f) const;
  void collect(std::vector<Parameter*>& out);
};

// Bilinear rescale to round(H*lambda) x round(W*lambda); the extent's
// meters-per-cell shrinks by the same factor.
BevFeature cdsc_rescale(const BevFeature& f, double lambda);

// ---- SOPT ----

struct SoptEncoderLayer {
  LayerNormLayer ln1;
  LinearLayer wq, wk, wv, wo;
  LayerNormLayer ln2;
  LinearLayer ffn1, ffn2;
  std::size_t heads = 1;

  static SoptEncoderLayer make(const std::string& name, std::size_t dim, std::size_t heads,
                               Rng& rng);
  Tensor forward(const Tensor& x) const;  // [S, D] -> [S, D], pre-norm
  void collect(std::vector<Parameter*>& out);
};

struct SoptModule {
  Conv2dLayer proj;       // 1x1 C -> D (the token projection)
  Parameter e_pos;        // [D, Hs, Ws] learnable positional grid
  std::vector<SoptEncoderLayer> layers;
  LayerNormLayer ln_head;
  LinearLayer mlp1, mlp2;  // D -> hidden -> 3; final layer zero-initialized
  std::array<double, 3> tau_c{};
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t pool = 1;

  static SoptModule make(const std::string& name, const ModelConfig& cfg, std::size_t feat_h,
                         std::size_t feat_w, Rng& rng);
  // X0 = Flatten(Proj(F) + E_pos), row-major flattening of the (y, x) grid.
  Tensor tokenize(const Tensor& feat) const;
  Tensor encode_tokens(Tensor x) const;                 // L pre-norm layers
  Tensor regress_offset(const Tensor& tokens) const;    // clamp(MLP(LN(GAP(X_L))))
  Tensor forward(const Tensor& cdsc_out) const;         // full delta-p path
  void collect(std::vector<Parameter*>& out);
};

// ---- fusion + head ----

// Two-scale pyramid: per-scale elementwise max across agents, coarse scale
// upsampled back, learned 1x1 merge to C channels.
struct FusionModule {
  Conv2dLayer merge;  // 1x1, 2C -> C

  static FusionModule make(const std::string& name, const ModelConfig& cfg, Rng& rng);
  Tensor forward(const std::vector<Tensor>& agent_feats) const;
  void collect(std::vector<Parameter*>& out);
};

struct DetectionOutput {
  Tensor cls_logits;     // [A, H, W], A = 1
  Tensor reg_residuals;  // [7A, H, W]: dx, dy, dz, dl, dw, dh, dyaw
};

struct DetectionHead {
  Conv2dLayer cls, reg;

  static DetectionHead make(const std::string& name, const ModelConfig& cfg, Rng& rng);
  DetectionOutput forward(const Tensor& fused) const;
  void collect(std::vector<Parameter*>& out);
};

// ---- anchors, decode, NMS ----

struct AnchorGrid {
  BevExtent extent;  // feature-grid extent (cell = feature cell)
  double l = 4.5, w = 2.0, h = 1.5, z = -1.0, yaw = 0.0;

  static AnchorGrid make(const BevExtent& feat_extent, const ModelConfig& cfg);
  std::size_t grid_h() const { return extent.grid_h(); }
  std::size_t grid_w() const { return extent.grid_w(); }
  OrientedBox3 box_at(std::size_t gy, std::size_t gx) const;
  double diagonal() const;  // anchor BEV diagonal, the x/y normalizer
};

// Anchor-normalized encode/decode (exact inverses up to yaw wrapping).
std::array<double, 7> encode_box(const OrientedBox3& gt, const OrientedBox3& anchor,
                                 double diagonal);
OrientedBox3 decode_box(const std::array<double, 7>& res, const OrientedBox3& anchor,
                        double diagonal);

// Greedy score-descending NMS by BEV IoU; score ties break by input order.
std::vector<OrientedBox3> nms_bev(std::vector<OrientedBox3> boxes, double iou_threshold);

// Raw per-cell decode (score >= threshold), before NMS.
std::vector<OrientedBox3> decode_detections(const DetectionOutput& out, const AnchorGrid& anchors,
                                            double score_threshold);

// ---- warp ----

// Feature grid in pose_src's frame resampled onto the identical extent in
// pose_ego's frame; cells that fall outside the source grid become zero.
BevFeature warp_to_ego(const BevFeature& f, const Pose3& pose_src, const Pose3& pose_ego);

// ---- compression adapter (channel bottleneck, Table-IV mechanism) ----

struct CompressionAdapter {
  Conv2dLayer enc;  // 1x1 C -> C/rate
  Conv2dLayer dec;  // 1x1 C/rate -> C
  std::size_t rate = 1;

  static CompressionAdapter make(const std::string& name, const ModelConfig& cfg,
                                 std::size_t rate, Rng& rng);
  Tensor forward(const Tensor& feat) const;
  void collect(std::vector<Parameter*>& out);
};

// ---- the assembled model ----

enum class CdscVariant { Full, ProjectionOnly };  // ProjectionOnly = "-CDSC"

struct PerceptionModel {
  ModelConfig cfg;
  EncoderModule veh_encoder, uav_encoder;
  CdscModule cdsc;
  Conv2dLayer cdsc_proj_only;  // 1x1 C->C stand-in used by the -CDSC variant
  std::optional<SoptModule> sopt;
  FusionModule fusion;
  DetectionHead head;
  CdscVariant cdsc_variant = CdscVariant::Full;

  // feature-grid geometry shared by all agents after alignment
  BevExtent feature_extent;

  static PerceptionModel make(const ModelConfig& cfg, const ScenarioConfig& scen,
                              std::uint64_t init_seed, bool with_sopt,
                              CdscVariant variant = CdscVariant::Full);

  std::vector<Parameter*> parameters();             // stable registration order
  std::vector<Parameter*> parameters_with_prefix(const std::string& prefix);
  void freeze_prefix(const std::string& prefix, bool frozen);

  // encode one agent's raster into a BEV feature at the shared target
  // resolution (UAV path: encoder -> cdsc_rescale -> cdsc_map/projection)
  BevFeature encode_agent(const Frame& frame, std::size_t agent_index,
                          const ScenarioConfig& scen) const;

  // SOPT offset for an (un-warped) UAV CDSC output
  Tensor sopt_offset(const BevFeature& uav_feature) const;
};

// fleet selection: ego first, then the first n_vehicles-1 other vehicles and
// the first n_uavs UAVs in frame order
std::vector<std::size_t> select_fleet(const Frame& frame, std::size_t n_vehicles,
                                      std::size_t n_uavs);

struct ForwardOptions {
  const CompressionAdapter* adapter = nullptr;  // applied to non-ego features
  bool collect_offsets = true;                  // run SOPT on UAV features
};

struct ForwardResult {
  DetectionOutput det;
  Tensor fused;                                   // [C, H, W] ego-frame features
  std::vector<Tensor> uav_offsets;                // per UAV in fleet order
  std::vector<std::array<double, 3>> uav_offset_gt;  // matching ground truth
};

// Runs encode -> (CDSC) -> compression -> warp -> fuse -> detect for the
// given fleet. Poses come from `frame` (apply pose noise beforehand).
ForwardResult forward_frame(const PerceptionModel& model, const Frame& frame,
                            const std::vector<std::size_t>& fleet, const ScenarioConfig& scen,
                            const ForwardOptions& opts = {});

// dp_gt: the UAV pose expressed in the ego frame (x, y, z), Eq.-8 target.
std::array<double, 3> offset_ground_truth(const Pose3& uav, const Pose3& ego);

// checkpoint glue
std::vector<CheckpointEntry> model_state(PerceptionModel& model);
// Copies matching entries into the model; returns the matched names. Throws
// on shape mismatch. `require_all_model_params` additionally demands that
// every non-SOPT model parameter be present (inference checkpoints).
std::vector<std::string> load_state(PerceptionModel& model,
                                    const std::vector<CheckpointEntry>& entries,
                                    bool require_all_model_params = false);

}  // namespace aircoop
