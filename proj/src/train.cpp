#include "aircoop/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace aircoop {

namespace {

[[noreturn]] void config_error(const std::string& msg) { throw std::invalid_argument(msg); }

std::size_t count_kind(const Frame& f, AgentKind k) {
  std::size_t n = 0;
  for (const auto& a : f.agents)
    if (a.kind == k) ++n;
  return n;
}

// Per-frame immutable training context, computed once.
struct FrameTargets {
  std::vector<std::size_t> fleet;
  std::vector<OrientedBox3> gts_ego;
  AnchorAssignment assign;
};

FrameTargets make_targets(const Frame& frame, const PerceptionModel& model,
                          const ScenarioConfig& scen, const BevExtent& extent,
                          std::size_t n_veh, std::size_t n_uav, const TrainConfig& tc) {
  FrameTargets t;
  t.fleet = select_fleet(frame, n_veh, n_uav);
  std::vector<AgentSpec> fleet_agents;
  for (std::size_t i : t.fleet) fleet_agents.push_back(frame.agents[i]);
  const Pose3& ego = frame.agents[frame.ego_index].pose;
  auto world_gts = visibility_filter(frame.objects, fleet_agents, ego, extent, scen.ground_z);
  for (const auto& g : world_gts) t.gts_ego.push_back(box_to_ego(ego, g));
  AnchorGrid anchors = AnchorGrid::make(model.feature_extent, model.cfg);
  t.assign = assign_targets(anchors, t.gts_ego, tc.pos_iou, tc.neg_iou);
  return t;
}

void append_metrics(const std::string& path, const EpochMetrics& m) {
  if (path.empty()) return;
  std::ofstream os(path, std::ios::app);
  nlohmann::json j{{"epoch", m.epoch},   {"lr", m.lr},
                   {"l_det", m.l_det},   {"l_offset", m.l_offset},
                   {"l_z_align", m.l_z_align}, {"total", m.total}};
  os << j.dump() << "\n";
}

void check_frozen_grads_zero(PerceptionModel& model) {
  for (Parameter* p : model.parameters())
    if (p->frozen)
      for (double g : p->tensor.grad())
        if (g != 0.0)
          throw std::logic_error("frozen parameter '" + p->name + "' received a gradient");
}

}  // namespace

// ---- anchor assignment ----

AnchorAssignment assign_targets(const AnchorGrid& anchors,
                                const std::vector<OrientedBox3>& gts_ego, double pos_iou,
                                double neg_iou) {
  std::size_t H = anchors.grid_h(), W = anchors.grid_w();
  AnchorAssignment out;
  out.grid_h = H;
  out.grid_w = W;
  out.match.assign(H * W, -1);
  if (gts_ego.empty()) return out;

  std::vector<double> best_iou(H * W, 0.0);
  std::vector<int> best_gt(H * W, -1);
  const BevExtent& e = anchors.extent;
  double reach = 0.5 * (anchors.diagonal() + 1.0);
  for (std::size_t gi = 0; gi < gts_ego.size(); ++gi) {
    const OrientedBox3& g = gts_ego[gi];
    double rad = 0.5 * std::hypot(g.l, g.w) + reach;
    long x_lo = std::max(0L, static_cast<long>(std::floor((g.x - rad - e.x_min) / e.cell)));
    long x_hi = std::min(static_cast<long>(W) - 1,
                         static_cast<long>(std::ceil((g.x + rad - e.x_min) / e.cell)));
    long y_lo = std::max(0L, static_cast<long>(std::floor((g.y - rad - e.y_min) / e.cell)));
    long y_hi = std::min(static_cast<long>(H) - 1,
                         static_cast<long>(std::ceil((g.y + rad - e.y_min) / e.cell)));
    for (long y = y_lo; y <= y_hi; ++y)
      for (long x = x_lo; x <= x_hi; ++x) {
        double v = iou_bev(anchors.box_at(y, x), g);
        std::size_t idx = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
        if (v > best_iou[idx]) {
          best_iou[idx] = v;
          best_gt[idx] = static_cast<int>(gi);
        }
      }
  }
  for (std::size_t i = 0; i < H * W; ++i) {
    if (best_iou[i] >= pos_iou) {
      out.match[i] = best_gt[i];
      ++out.n_pos;
    } else if (best_iou[i] >= neg_iou) {
      out.match[i] = -2;  // ignored band
    }
  }
  return out;
}

// ---- losses ----

Tensor detection_loss(const DetectionOutput& out, const AnchorGrid& anchors,
                      const AnchorAssignment& assign, const std::vector<OrientedBox3>& gts_ego,
                      const TrainConfig& cfg) {
  std::size_t H = assign.grid_h, W = assign.grid_w;
  const Shape& cs = out.cls_logits.shape();
  if (cs.size() != 3 || cs[0] != 1 || cs[1] != H || cs[2] != W)
    config_error("detection_loss: cls logits " + shape_str(cs) + " vs grid " +
                 std::to_string(H) + "x" + std::to_string(W));

  std::vector<double> pos_mask(H * W, 0.0), neg_mask(H * W, 0.0);
  std::vector<double> reg_target(7 * H * W, 0.0);
  double diag = anchors.diagonal();
  for (std::size_t i = 0; i < H * W; ++i) {
    int m = assign.match[i];
    if (m >= 0) {
      pos_mask[i] = 1.0;
      auto enc = encode_box(gts_ego[static_cast<std::size_t>(m)],
                            anchors.box_at(i / W, i % W), diag);
      for (std::size_t k = 0; k < 7; ++k) reg_target[k * H * W + i] = enc[k];
    } else if (m == -1) {
      neg_mask[i] = 1.0;
    }
  }
  double inv_pos = 1.0 / static_cast<double>(std::max<std::size_t>(1, assign.n_pos));

  Tensor logits = reshape(out.cls_logits, {H, W});
  Tensor pos_m = Tensor::from_data({H, W}, std::move(pos_mask));
  Tensor neg_m = Tensor::from_data({H, W}, std::move(neg_mask));

  // binary focal terms, written with softplus for stability:
  //   positives:  alpha    * (1-p)^gamma * -log(p)
  //   negatives: (1-alpha) *   p^gamma   * -log(1-p)
  double a = cfg.focal_alpha, g = cfg.focal_gamma;
  Tensor sp_pos = softplus(neg(logits));  // -log(sigmoid(x))
  Tensor sp_neg = softplus(logits);       // -log(1 - sigmoid(x))
  Tensor pow_one_minus_p = exp(mul_scalar(sp_neg, -g));  // (1-p)^gamma
  Tensor pow_p = exp(mul_scalar(sp_pos, -g));            // p^gamma
  Tensor cls_pos = mul_scalar(mul(mul(pow_one_minus_p, sp_pos), pos_m), a);
  Tensor cls_neg = mul_scalar(mul(mul(pow_p, sp_neg), neg_m), 1.0 - a);
  Tensor cls_loss = mul_scalar(add(sum(cls_pos), sum(cls_neg)), inv_pos);

  Tensor targets = Tensor::from_data({7, H, W}, std::move(reg_target));
  Tensor reg_elems = smooth_l1(out.reg_residuals, targets, cfg.smooth_l1_beta);
  // pos_m broadcasts over the 7 residual channels
  Tensor reg_loss = mul_scalar(sum(mul(reg_elems, pos_m)), inv_pos);

  return add(cls_loss, reg_loss);
}

Tensor offset_loss(const Tensor& dp_pred, const std::array<double, 3>& dp_gt, double beta) {
  if (dp_pred.shape() != Shape{3})
    config_error("offset_loss: expected a 3-vector, got " + shape_str(dp_pred.shape()));
  Tensor gt = Tensor::from_data({3}, {dp_gt[0], dp_gt[1], dp_gt[2]});
  return sum(smooth_l1(dp_pred, gt, beta));
}

Tensor calibrate_z(const Tensor& t_z_raw, const Tensor& delta_z, double h_anchor) {
  if (!(h_anchor > 0)) config_error("calibrate_z: h_anchor must be positive");
  return sub(t_z_raw, mul_scalar(delta_z, 1.0 / h_anchor));
}

ZAlignLoss z_align_loss(const Tensor& t_z_raw_map, const Tensor& delta_z,
                        const AnchorGrid& anchors, const AnchorAssignment& assign,
                        const std::vector<OrientedBox3>& gts_ego) {
  ZAlignLoss out;
  if (assign.n_pos == 0) {
    out.loss = Tensor::scalar(0.0);
    out.no_positives = true;
    return out;
  }
  std::size_t H = assign.grid_h, W = assign.grid_w;
  std::vector<double> pos_mask(H * W, 0.0), z_gt(H * W, 0.0);
  for (std::size_t i = 0; i < H * W; ++i)
    if (assign.match[i] >= 0) {
      pos_mask[i] = 1.0;
      z_gt[i] = gts_ego[static_cast<std::size_t>(assign.match[i])].z;
    }
  Tensor t_z = reshape(t_z_raw_map, {H, W});
  Tensor t_cal = delta_z.defined() ? calibrate_z(t_z, delta_z, anchors.h) : t_z;
  Tensor z_pred = add_scalar(mul_scalar(t_cal, anchors.h), anchors.z);
  Tensor mask = Tensor::from_data({H, W}, std::move(pos_mask));
  Tensor zg = Tensor::from_data({H, W}, std::move(z_gt));
  out.loss = mul_scalar(sum(mul(abs(sub(z_pred, zg)), mask)),
                        1.0 / static_cast<double>(assign.n_pos));
  return out;
}

namespace {

// Shared loss assembly; callers may pass a precomputed anchor assignment.
FrameLoss frame_loss_impl(const ForwardResult& fwd, const std::vector<OrientedBox3>& gts_ego,
                          const AnchorGrid& anchors, const AnchorAssignment& assign,
                          const TrainConfig& cfg) {
  FrameLoss out;
  Tensor l_det = detection_loss(fwd.det, anchors, assign, gts_ego, cfg);
  Tensor l_off = Tensor::scalar(0.0);
  Tensor l_z = Tensor::scalar(0.0);
  // The offset and z-align paths exist only while a SOPT branch supplies
  // UAV offsets (second training stage).
  if (!fwd.uav_offsets.empty() && (cfg.w_off > 0 || cfg.w_z > 0)) {
    Tensor acc, dz_acc;
    for (std::size_t i = 0; i < fwd.uav_offsets.size(); ++i) {
      Tensor term = offset_loss(fwd.uav_offsets[i], fwd.uav_offset_gt[i], cfg.smooth_l1_beta);
      acc = acc.defined() ? add(acc, term) : term;
      Tensor dz = slice_axis0(fwd.uav_offsets[i], 2, 1);
      dz_acc = dz_acc.defined() ? add(dz_acc, dz) : dz;
    }
    double inv_n = 1.0 / static_cast<double>(fwd.uav_offsets.size());
    l_off = mul_scalar(acc, inv_n);
    Tensor delta_z = mul_scalar(dz_acc, inv_n);  // multi-UAV: mean height offset
    if (cfg.stop_grad_delta_z) delta_z = delta_z.detach();
    Tensor t_z = slice_axis0(fwd.det.reg_residuals, 2, 1);
    ZAlignLoss z = z_align_loss(t_z, delta_z, anchors, assign, gts_ego);
    l_z = z.loss;
    out.report.no_positives = z.no_positives;
  }
  out.total = add(add(mul_scalar(l_det, cfg.w_det), mul_scalar(l_off, cfg.w_off)),
                  mul_scalar(l_z, cfg.w_z));
  out.report.l_det = l_det.item();
  out.report.l_offset = l_off.item();
  out.report.l_z_align = l_z.item();
  out.report.total = out.total.item();
  out.report.w_det = cfg.w_det;
  out.report.w_off = cfg.w_off;
  out.report.w_z = cfg.w_z;
  return out;
}

}  // namespace

FrameLoss frame_loss(const ForwardResult& fwd, const std::vector<OrientedBox3>& gts_ego,
                     const AnchorGrid& anchors, const TrainConfig& cfg) {
  return frame_loss_impl(fwd, gts_ego, anchors,
                         assign_targets(anchors, gts_ego, cfg.pos_iou, cfg.neg_iou), cfg);
}

// ---- Adam ----

AdamOptimizer::AdamOptimizer(const std::vector<Parameter*>& params, const TrainConfig& cfg)
    : lr_(cfg.lr), beta1_(cfg.adam_beta1), beta2_(cfg.adam_beta2), eps_(cfg.adam_eps) {
  for (Parameter* p : params) {
    if (p->frozen) continue;
    Slot s;
    s.p = p;
    s.m.assign(p->tensor.numel(), 0.0);
    s.v.assign(p->tensor.numel(), 0.0);
    slots_.push_back(std::move(s));
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& s : slots_) s.p->tensor.zero_grad();
}

void AdamOptimizer::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& s : slots_) {
    auto vals = s.p->tensor.raw_data();
    auto grads = s.p->tensor.grad();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double g = grads[i];
      s.m[i] = beta1_ * s.m[i] + (1 - beta1_) * g;
      s.v[i] = beta2_ * s.v[i] + (1 - beta2_) * g * g;
      double mh = s.m[i] / bc1;
      double vh = s.v[i] / bc2;
      vals[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

std::vector<std::string> AdamOptimizer::update_set() const {
  std::vector<std::string> out;
  for (const auto& s : slots_) out.push_back(s.p->name);
  return out;
}

// ---- trainers ----

BevExtent stage_extent(const PerceptionModel& model, int stage) {
  BevExtent e = model.feature_extent;
  if (stage == 1) {
    e.z_min = -3.0;
    e.z_max = 1.0;
  } else {
    e.z_min = -60.0;
    e.z_max = 10.0;
  }
  return e;
}

namespace {

struct TrainLoop {
  PerceptionModel& model;
  const ExperimentConfig& cfg;
  const std::vector<Frame>& frames;
  std::vector<FrameTargets>& targets;
  const std::string& log_path;
  bool stage2 = false;

  std::vector<EpochMetrics> run(bool& frozen_ok) {
    TrainConfig tc = cfg.train;
    AdamOptimizer opt(model.parameters(), tc);
    AnchorGrid anchors = AnchorGrid::make(model.feature_extent, model.cfg);
    std::vector<EpochMetrics> history;
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
      opt.set_lr(tc.lr_at_epoch(epoch));
      EpochMetrics em;
      em.epoch = epoch;
      em.lr = opt.lr();
      std::size_t n_frames = 0;
      for (std::size_t start = 0; start < frames.size(); start += tc.batch_size) {
        std::size_t end = std::min(frames.size(), start + tc.batch_size);
        Tensor batch_total;
        for (std::size_t fi = start; fi < end; ++fi) {
          ForwardOptions fo;
          fo.collect_offsets = stage2 && model.sopt.has_value();
          ForwardResult fwd =
              forward_frame(model, frames[fi], targets[fi].fleet, cfg.scenario, fo);
          FrameLoss fl =
              frame_loss_impl(fwd, targets[fi].gts_ego, anchors, targets[fi].assign, tc);
          em.l_det += fl.report.l_det;
          em.l_offset += fl.report.l_offset;
          em.l_z_align += fl.report.l_z_align;
          em.total += fl.report.total;
          ++n_frames;
          batch_total = batch_total.defined() ? add(batch_total, fl.total) : fl.total;
        }
        batch_total = mul_scalar(batch_total, 1.0 / static_cast<double>(end - start));
        batch_total.backward();
        try {
          check_frozen_grads_zero(model);
        } catch (...) {
          frozen_ok = false;
          throw;
        }
        opt.step();
        opt.zero_grad();
      }
      if (n_frames > 0) {
        em.l_det /= n_frames;
        em.l_offset /= n_frames;
        em.l_z_align /= n_frames;
        em.total /= n_frames;
      }
      append_metrics(log_path, em);
      history.push_back(em);
    }
    return history;
  }
};

}  // namespace

TrainOutcome train_stage1(const ExperimentConfig& cfg, const std::vector<Frame>& frames,
                          const std::string& metrics_log) {
  if (frames.empty()) config_error("train_stage1: empty dataset");
  for (const auto& f : frames)
    if (count_kind(f, AgentKind::Vehicle) < 1)
      config_error("train_stage1: frame without vehicles");

  TrainOutcome out{PerceptionModel::make(cfg.model, cfg.scenario, cfg.train.seed,
                                         /*with_sopt=*/false),
                   {},
                   true};
  PerceptionModel& model = out.model;
  // stage 1 trains the V2V side only
  model.freeze_prefix("uav_encoder.", true);
  model.freeze_prefix("cdsc.", true);
  model.freeze_prefix("cdsc_proj.", true);

  BevExtent extent = stage_extent(model, 1);
  std::vector<FrameTargets> targets;
  for (const auto& f : frames)
    targets.push_back(make_targets(f, model, cfg.scenario, extent,
                                   count_kind(f, AgentKind::Vehicle), 0, cfg.train));

  TrainLoop loop{model, cfg, frames, targets, metrics_log, /*stage2=*/false};
  out.history = loop.run(out.frozen_grads_always_zero);
  return out;
}

TrainOutcome train_stage2(const ExperimentConfig& cfg, const std::vector<Frame>& frames,
                          const std::vector<CheckpointEntry>& stage1_state,
                          const Stage2Options& opts, const std::string& metrics_log) {
  if (frames.empty()) config_error("train_stage2: empty dataset");
  for (const auto& f : frames)
    if (count_kind(f, AgentKind::Uav) < 1)
      config_error("train_stage2: dataset has frames without UAV agents");

  ExperimentConfig c2 = cfg;
  if (!opts.use_sopt) {
    c2.train.w_off = 0.0;
    c2.train.w_z = 0.0;
  }

  TrainOutcome out{PerceptionModel::make(c2.model, c2.scenario, c2.train.seed, opts.use_sopt,
                                         opts.use_cdsc ? CdscVariant::Full
                                                       : CdscVariant::ProjectionOnly),
                   {},
                   true};
  PerceptionModel& model = out.model;
  load_state(model, stage1_state);

  // transfer learning: the UAV encoder starts from the trained V2V encoder
  for (Parameter* src : model.parameters_with_prefix("veh_encoder.")) {
    std::string dst_name = "uav_encoder." + src->name.substr(std::string("veh_encoder.").size());
    for (Parameter* dst : model.parameters_with_prefix("uav_encoder."))
      if (dst->name == dst_name)
        std::copy(src->tensor.data().begin(), src->tensor.data().end(),
                  dst->tensor.raw_data().begin());
  }

  model.freeze_prefix("veh_encoder.", true);
  model.freeze_prefix("fusion.", true);
  model.freeze_prefix("head.", true);
  if (opts.use_cdsc) model.freeze_prefix("cdsc_proj.", true);
  else model.freeze_prefix("cdsc.", true);

  BevExtent extent = stage_extent(model, 2);
  std::vector<FrameTargets> targets;
  for (const auto& f : frames)
    targets.push_back(make_targets(f, model, c2.scenario, extent,
                                   count_kind(f, AgentKind::Vehicle),
                                   count_kind(f, AgentKind::Uav), c2.train));

  TrainLoop loop{model, c2, frames, targets, metrics_log, /*stage2=*/true};
  out.history = loop.run(out.frozen_grads_always_zero);
  return out;
}

CompressionAdapter train_compression_adapter(PerceptionModel& model,
                                             const std::vector<Frame>& frames,
                                             const ExperimentConfig& cfg, std::size_t rate,
                                             std::size_t epochs) {
  Rng rng = Rng::derive(cfg.train.seed, "adapter-r" + std::to_string(rate));
  CompressionAdapter adapter = CompressionAdapter::make("adapter", model.cfg, rate, rng);

  // cache detached post-encoder/CDSC features once per agent per frame
  struct Cached {
    std::vector<std::size_t> fleet;
    std::vector<Tensor> feats;  // constants
    std::vector<Pose3> poses;
    FrameTargets targets;
  };
  BevExtent extent = stage_extent(model, 2);
  std::vector<Cached> cache;
  {
    NoGradGuard ng;
    for (const auto& f : frames) {
      Cached c;
      c.targets = make_targets(f, model, cfg.scenario,
                               extent, count_kind(f, AgentKind::Vehicle),
                               count_kind(f, AgentKind::Uav), cfg.train);
      c.fleet = c.targets.fleet;
      for (std::size_t idx : c.fleet) {
        c.feats.push_back(model.encode_agent(f, idx, cfg.scenario).tensor.detach());
        c.poses.push_back(f.agents[idx].pose);
      }
      cache.push_back(std::move(c));
    }
  }

  std::vector<Parameter*> params;
  adapter.collect(params);
  TrainConfig tc = cfg.train;
  AdamOptimizer opt(params, tc);
  AnchorGrid anchors = AnchorGrid::make(model.feature_extent, model.cfg);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    for (const auto& c : cache) {
      std::vector<Tensor> warped;
      const Pose3& ego = c.poses[0];
      for (std::size_t i = 0; i < c.feats.size(); ++i) {
        Tensor feat = c.feats[i];
        if (i != 0) feat = adapter.forward(feat);  // ego stays uncompressed
        BevFeature bf{feat, model.feature_extent, AgentKind::Vehicle};
        warped.push_back(warp_to_ego(bf, c.poses[i], ego).tensor);
      }
      Tensor fused = model.fusion.forward(warped);
      DetectionOutput det = model.head.forward(fused);
      Tensor loss = detection_loss(det, anchors, c.targets.assign, c.targets.gts_ego, tc);
      loss.backward();
      opt.step();
      opt.zero_grad();
    }
  }
  return adapter;
}

double mean_offset_loss(const PerceptionModel& model, const std::vector<Frame>& frames,
                        const ExperimentConfig& cfg) {
  if (!model.sopt) config_error("mean_offset_loss: model has no SOPT module");
  NoGradGuard ng;
  double acc = 0;
  std::size_t n = 0;
  for (const auto& f : frames) {
    const Pose3& ego = f.agents[f.ego_index].pose;
    for (std::size_t i = 0; i < f.agents.size(); ++i) {
      if (f.agents[i].kind != AgentKind::Uav) continue;
      BevFeature feat = model.encode_agent(f, i, cfg.scenario);
      Tensor dp = model.sopt_offset(feat);
      acc += offset_loss(dp, offset_ground_truth(f.agents[i].pose, ego),
                         cfg.train.smooth_l1_beta)
                 .item();
      ++n;
    }
  }
  return n > 0 ? acc / static_cast<double>(n) : 0.0;
}

std::vector<CheckpointEntry> stage1_checkpoint_state(PerceptionModel& model) {
  std::vector<CheckpointEntry> out;
  for (const auto& e : model_state(model)) {
    bool keep = e.name.rfind("veh_encoder.", 0) == 0 || e.name.rfind("fusion.", 0) == 0 ||
                e.name.rfind("head.", 0) == 0;
    if (!keep) continue;
    CheckpointEntry copy = e;
    copy.frozen = false;  // stage-1 weights ship unfrozen
    out.push_back(std::move(copy));
  }
  return out;
}

std::vector<CheckpointEntry> inference_checkpoint_state(PerceptionModel& model) {
  std::vector<CheckpointEntry> out;
  for (auto& e : model_state(model))
    if (e.name.rfind("sopt.", 0) != 0) out.push_back(std::move(e));
  return out;
}

}  // namespace aircoop
