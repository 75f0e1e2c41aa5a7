#include "aircoop/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace aircoop {

namespace {

double pair_iou(const OrientedBox3& a, const OrientedBox3& b, IouMode mode) {
  return mode == IouMode::Bev2d ? iou_bev(a, b) : iou_3d(a, b);
}

}  // namespace

ApResult average_precision(const std::vector<EvalBox>& preds, const std::vector<EvalBox>& gts,
                           IouMode mode, double threshold) {
  ApResult res;
  res.iou_threshold = threshold;
  res.mode = mode;
  res.n_gt = gts.size();
  res.n_pred = preds.size();
  if (gts.empty()) {
    res.ap = preds.empty() ? 1.0 : 0.0;  // vacuous when nothing exists at all
    return res;
  }
  if (preds.empty()) {
    res.ap = 0.0;
    return res;
  }

  std::vector<std::size_t> order(preds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return preds[a].box.score > preds[b].box.score;
  });

  std::vector<bool> gt_used(gts.size(), false);
  std::vector<int> tp(order.size(), 0);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const EvalBox& p = preds[order[r]];
    double best = threshold;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (gt_used[j] || gts[j].frame != p.frame) continue;
      double v = pair_iou(p.box, gts[j].box, mode);
      if (v >= best && (best_j == gts.size() || v > best)) {
        best = v;
        best_j = j;
      }
    }
    if (best_j != gts.size()) {
      gt_used[best_j] = true;
      tp[r] = 1;
    }
  }

  // all-point interpolation: sum (r_k - r_{k-1}) * max_{j>=k} precision_j
  std::size_t n = order.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp_cum = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp_cum += static_cast<std::size_t>(tp[k]);
    precision[k] = static_cast<double>(tp_cum) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp_cum) / static_cast<double>(gts.size());
  }
  std::vector<double> pmax(n);
  double running = 0;
  for (std::size_t k = n; k-- > 0;) {
    running = std::fmax(running, precision[k]);
    pmax[k] = running;
  }
  double ap = 0, prev_r = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (recall[k] > prev_r) {
      ap += (recall[k] - prev_r) * pmax[k];
      prev_r = recall[k];
    }
  }
  res.ap = ap;
  return res;
}

FleetEval evaluate_config(const PerceptionModel& model, const std::vector<Frame>& frames,
                          const ExperimentConfig& cfg, const EvalSettings& settings) {
  NoGradGuard ng;
  FleetEval out;
  out.n_vehicles = settings.n_vehicles;
  out.n_uavs = settings.n_uavs;

  BevExtent eval_extent = stage_extent(model, 2);
  AnchorGrid anchors = AnchorGrid::make(model.feature_extent, model.cfg);

  // frame-level parallelism into per-frame slots keeps aggregation
  // deterministic regardless of the worker count
  struct Slot {
    std::vector<OrientedBox3> preds;
    std::vector<OrientedBox3> gts;
  };
  std::vector<Slot> slots(frames.size());
  auto run_frame = [&](std::size_t fi) {
    NoGradGuard ng_worker;
    Frame frame = settings.noise ? apply_pose_noise(frames[fi], *settings.noise) : frames[fi];
    auto fleet = select_fleet(frame, settings.n_vehicles, settings.n_uavs);

    ForwardOptions fo;
    fo.collect_offsets = false;  // SOPT is not part of the inference graph
    fo.adapter = settings.adapter;
    ForwardResult fwd = forward_frame(model, frame, fleet, cfg.scenario, fo);
    auto raw = decode_detections(fwd.det, anchors, model.cfg.score_threshold);
    slots[fi].preds = nms_bev(std::move(raw), model.cfg.nms_iou);

    // ground truth: the full roster's visible set inside the eval extent,
    // expressed in the ego frame (poses unaffected by noise for the ego)
    const Pose3& ego = frame.agents[frame.ego_index].pose;
    auto world_gts = visibility_filter(frames[fi].objects, frames[fi].agents, ego, eval_extent,
                                       cfg.scenario.ground_z);
    for (const auto& g : world_gts) slots[fi].gts.push_back(box_to_ego(ego, g));
  };
  std::size_t n_workers = std::min(worker_threads(), frames.size());
  if (n_workers <= 1) {
    for (std::size_t fi = 0; fi < frames.size(); ++fi) run_frame(fi);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t fi = w; fi < frames.size(); fi += n_workers) run_frame(fi);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::vector<EvalBox> preds, gts;
  for (std::size_t fi = 0; fi < frames.size(); ++fi) {
    for (const auto& b : slots[fi].preds) preds.push_back({b, fi});
    for (const auto& g : slots[fi].gts) gts.push_back({g, fi});
  }
  out.n_gt = gts.size();
  out.n_pred = preds.size();
  out.bev_50 = average_precision(preds, gts, IouMode::Bev2d, 0.5);
  out.bev_70 = average_precision(preds, gts, IouMode::Bev2d, 0.7);
  out.vol_50 = average_precision(preds, gts, IouMode::Vol3d, 0.5);
  out.vol_70 = average_precision(preds, gts, IouMode::Vol3d, 0.7);
  return out;
}

SweepResult sweep_noise(const PerceptionModel& model, const std::vector<Frame>& frames,
                        const ExperimentConfig& cfg, std::size_t n_vehicles,
                        std::size_t n_uavs) {
  SweepResult out;
  out.axis = "noise_sigma";
  for (std::size_t i = 0; i < cfg.eval.noise_sigmas.size(); ++i) {
    double sigma = cfg.eval.noise_sigmas[i];
    EvalSettings s;
    s.n_vehicles = n_vehicles;
    s.n_uavs = n_uavs;
    NoiseSpec noise{sigma, sigma, cfg.eval.noise_seed + i};
    if (sigma > 0) s.noise = &noise;  // sigma 0 must equal evaluate_config exactly
    out.points.push_back({sigma, evaluate_config(model, frames, cfg, s)});
  }
  return out;
}

SweepResult sweep_compression(PerceptionModel& model, const std::vector<Frame>& adapter_frames,
                              const std::vector<Frame>& eval_frames,
                              const ExperimentConfig& cfg, std::size_t n_vehicles,
                              std::size_t n_uavs) {
  SweepResult out;
  out.axis = "compression_rate";
  for (std::size_t rate : cfg.eval.compression_rates) {
    EvalSettings s;
    s.n_vehicles = n_vehicles;
    s.n_uavs = n_uavs;
    if (rate == 1) {
      out.points.push_back({static_cast<double>(rate),
                            evaluate_config(model, eval_frames, cfg, s)});
      continue;
    }
    if (model.cfg.channels % rate != 0)
      throw std::invalid_argument("compression rate " + std::to_string(rate) +
                                  " does not divide channel count " +
                                  std::to_string(model.cfg.channels));
    CompressionAdapter adapter =
        train_compression_adapter(model, adapter_frames, cfg, rate, cfg.eval.adapter_epochs);
    s.adapter = &adapter;
    out.points.push_back({static_cast<double>(rate),
                          evaluate_config(model, eval_frames, cfg, s)});
  }
  return out;
}

GridResult combination_grid(const PerceptionModel& model, const std::vector<Frame>& frames,
                            const ExperimentConfig& cfg) {
  GridResult out;
  for (std::size_t v = 1; v <= cfg.eval.grid_max_vehicles; ++v) {
    std::vector<FleetEval> row;
    for (std::size_t u = 0; u <= cfg.eval.grid_max_uavs; ++u) {
      EvalSettings s;
      s.n_vehicles = v;
      s.n_uavs = u;
      row.push_back(evaluate_config(model, frames, cfg, s));
    }
    out.cells.push_back(std::move(row));
  }
  return out;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg,
                                      const std::vector<CheckpointEntry>& stage1_state,
                                      const std::vector<Frame>& train_frames,
                                      const std::vector<Frame>& eval_frames) {
  std::vector<AblationRow> rows;
  const bool flags[4][2] = {{false, false}, {false, true}, {true, false}, {true, true}};
  for (const auto& f : flags) {
    Stage2Options opts;
    opts.use_cdsc = f[0];
    opts.use_sopt = f[1];
    TrainOutcome t = train_stage2(cfg, train_frames, stage1_state, opts);
    EvalSettings s;
    s.n_vehicles = cfg.eval.grid_max_vehicles;
    s.n_uavs = cfg.eval.grid_max_uavs;
    AblationRow row;
    row.cdsc = f[0];
    row.sopt = f[1];
    row.eval = evaluate_config(t.model, eval_frames, cfg, s);
    rows.push_back(row);
  }
  return rows;
}

// ---- reports ----

namespace {

nlohmann::json ap_json(const ApResult& a) {
  return {{"ap", a.ap},
          {"iou_threshold", a.iou_threshold},
          {"mode", a.mode == IouMode::Bev2d ? "bev2d" : "vol3d"},
          {"n_gt", a.n_gt},
          {"n_pred", a.n_pred}};
}

nlohmann::json fleet_json(const FleetEval& e) {
  return {{"n_vehicles", e.n_vehicles}, {"n_uavs", e.n_uavs},
          {"ap_bev_50", ap_json(e.bev_50)}, {"ap_bev_70", ap_json(e.bev_70)},
          {"ap_3d_50", ap_json(e.vol_50)},  {"ap_3d_70", ap_json(e.vol_70)},
          {"n_gt", e.n_gt},                 {"n_pred", e.n_pred}};
}

}  // namespace

std::string fleet_eval_json(const FleetEval& e) { return fleet_json(e).dump(2) + "\n"; }

std::string sweep_json(const SweepResult& s) {
  nlohmann::json j;
  j["axis"] = s.axis;
  j["points"] = nlohmann::json::array();
  for (const auto& p : s.points)
    j["points"].push_back({{"setting", p.setting}, {"eval", fleet_json(p.eval)}});
  if (s.axis == "noise_sigma" && s.points.size() >= 2 && s.points.front().eval.bev_70.ap > 0) {
    // retention of the sigma=0 performance at the highest noise level
    j["retention_bev_70"] = s.points.back().eval.bev_70.ap / s.points.front().eval.bev_70.ap;
  }
  return j.dump(2) + "\n";
}

std::string sweep_csv(const SweepResult& s) {
  std::ostringstream os;
  os << "setting,ap_bev_50,ap_bev_70,ap_3d_50,ap_3d_70,n_gt,n_pred\n";
  for (const auto& p : s.points)
    os << p.setting << "," << p.eval.bev_50.ap << "," << p.eval.bev_70.ap << ","
       << p.eval.vol_50.ap << "," << p.eval.vol_70.ap << "," << p.eval.n_gt << ","
       << p.eval.n_pred << "\n";
  return os.str();
}

std::string grid_json(const GridResult& g, const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["rows_vehicles"] = nlohmann::json::array();
  for (std::size_t v = 0; v < g.cells.size(); ++v) j["rows_vehicles"].push_back(v + 1);
  j["cols_uavs"] = nlohmann::json::array();
  for (std::size_t u = 0; u <= cfg.eval.grid_max_uavs; ++u) j["cols_uavs"].push_back(u);
  j["ap_bev_70"] = nlohmann::json::array();
  j["cells"] = nlohmann::json::array();
  for (const auto& row : g.cells) {
    nlohmann::json jr = nlohmann::json::array();
    nlohmann::json jc = nlohmann::json::array();
    for (const auto& cell : row) {
      jr.push_back(cell.bev_70.ap);
      jc.push_back(fleet_json(cell));
    }
    j["ap_bev_70"].push_back(jr);
    j["cells"].push_back(jc);
  }
  return j.dump(2) + "\n";
}

std::string ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows)
    j.push_back({{"cdsc", r.cdsc}, {"sopt", r.sopt}, {"eval", fleet_json(r.eval)}});
  return j.dump(2) + "\n";
}

}  // namespace aircoop
