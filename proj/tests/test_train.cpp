#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "aircoop/train.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace aircoop;
using namespace aircoop::fixtures;

namespace {

AnchorGrid tiny_anchors() {
  BevExtent fe{-25.6, 25.6, -25.6, 25.6, -3, 1, 3.2};
  return AnchorGrid::make(fe, tiny_model());
}

std::vector<OrientedBox3> ego_gts(const Frame& f) {
  std::vector<OrientedBox3> out;
  const Pose3& ego = f.agents[f.ego_index].pose;
  for (const auto& o : f.objects) out.push_back(box_to_ego(ego, o));
  return out;
}

}  // namespace

TEST_CASE("assign_targets follows the iff rule") {
  AnchorGrid anchors = tiny_anchors();
  TrainConfig tc;  // 0.6 / 0.45 defaults
  // gt exactly on the anchor at cell (8, 10): IoU 1 -> positive
  OrientedBox3 on = anchors.box_at(8, 10);
  // far-away empty region stays negative; a slightly offset copy lands in
  // the ignore band (IoU between 0.45 and 0.6)
  OrientedBox3 band = anchors.box_at(3, 3);
  band.x += 1.4;  // axis shift d gives IoU (9-2d)/(9+2d) = 0.525, inside the band
  auto a = assign_targets(anchors, {on, band}, tc.pos_iou, tc.neg_iou);
  CHECK(a.match[8 * 16 + 10] == 0);
  CHECK(a.n_pos >= 1);
  CHECK(a.match[0] == -1);
  double band_iou = iou_bev(anchors.box_at(3, 3), band);
  REQUIRE(band_iou > 0.45);
  REQUIRE(band_iou < 0.6);
  CHECK(a.match[3 * 16 + 3] == -2);

  auto none = assign_targets(anchors, {}, tc.pos_iou, tc.neg_iou);
  CHECK(none.n_pos == 0);
  for (int m : none.match) CHECK(m == -1);
}

TEST_CASE("detection_loss: empty scene with confident negatives tends to zero") {
  AnchorGrid anchors = tiny_anchors();
  TrainConfig tc;
  auto assign = assign_targets(anchors, {}, tc.pos_iou, tc.neg_iou);
  DetectionOutput out;
  out.cls_logits = Tensor::full({1, 16, 16}, -30.0);
  out.reg_residuals = Tensor::zeros({7, 16, 16});
  double loss = detection_loss(out, anchors, assign, {}, tc).item();
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-9);
}

TEST_CASE("detection_loss: perfect residuals zero the regression term") {
  AnchorGrid anchors = tiny_anchors();
  TrainConfig tc;
  OrientedBox3 gt = anchors.box_at(8, 10);
  gt.z = -1.15;
  gt.l = 4.6;  // nonzero residual targets
  auto assign = assign_targets(anchors, {gt}, tc.pos_iou, tc.neg_iou);
  REQUIRE(assign.n_pos >= 1);

  std::vector<double> reg(7 * 16 * 16, 0.0);
  auto enc = encode_box(gt, anchors.box_at(8, 10), anchors.diagonal());
  for (std::size_t i = 0; i < 256; ++i)
    if (assign.match[i] == 0)
      for (std::size_t k = 0; k < 7; ++k) reg[k * 256 + i] = enc[k];
  std::vector<double> cls(256, -30.0);
  for (std::size_t i = 0; i < 256; ++i)
    if (assign.match[i] == 0) cls[i] = 30.0;
  DetectionOutput out;
  out.cls_logits = Tensor::from_data({1, 16, 16}, std::move(cls));
  out.reg_residuals = Tensor::from_data({7, 16, 16}, std::move(reg));
  double loss = detection_loss(out, anchors, assign, {gt}, tc).item();
  CHECK(loss < 1e-9);

  // degrading one residual raises the loss by its smooth-L1 share
  auto reg2 = out.reg_residuals.clone();
  std::size_t cell = 8 * 16 + 10;
  reg2.raw_data()[2 * 256 + cell] += 2.0;
  DetectionOutput out2{out.cls_logits, reg2};
  double loss2 = detection_loss(out2, anchors, assign, {gt}, tc).item();
  CHECK(loss2 > loss + 1.0 / static_cast<double>(assign.n_pos));
}

TEST_CASE("offset_loss values and kink gradient") {
  auto p0 = Tensor::from_data({3}, {1.0, -2.0, 50.0});
  CHECK(offset_loss(p0, {1.0, -2.0, 50.0}, 1.0).item() == 0.0);

  auto p1 = Tensor::from_data({3}, {0.5, 0.0, 2.0});
  // components: 0.125 (quadratic), 0, 1.5 (linear)
  CHECK(offset_loss(p1, {0.0, 0.0, 0.0}, 1.0).item() == doctest::Approx(1.625));

  auto p2 = Tensor::from_data({3}, {0.9, 1.1, -0.3}, true);
  auto res = oracle::finite_diff_check(
      [&] { return offset_loss(p2, {0.0, 0.0, 0.0}, 1.0); }, {p2});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("calibrate_z: identity, formula, decode composition") {
  Tensor t = Tensor::from_data({2, 2}, {0.1, -0.4, 1.2, 0.0});
  Tensor zero = Tensor::scalar(0.0);
  Tensor same = calibrate_z(t, zero, 1.5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(same.data()[i] == t.data()[i]);

  Tensor t0 = Tensor::scalar(0.0);
  CHECK(calibrate_z(t0, Tensor::scalar(3.0), 1.5).item() == doctest::Approx(-2.0));

  CHECK_THROWS_AS(calibrate_z(t, zero, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(calibrate_z(t, zero, -1.0), std::invalid_argument);

  // decoded z after calibration shifts by exactly -delta_z
  Rng rng(61);
  OrientedBox3 anchor{0, 0, -1.0, 4.5, 2.0, 1.5, 0};
  for (int i = 0; i < 50; ++i) {
    double tz = rng.uniform(-2, 2), dz = rng.uniform(-60, 60);
    double z_cal = anchor.z + calibrate_z(Tensor::scalar(tz), Tensor::scalar(dz), anchor.h).item() * anchor.h;
    double z_raw = anchor.z + tz * anchor.h;
    CHECK(std::fabs(z_cal - (z_raw - dz)) < 1e-12);
  }
}

TEST_CASE("z_align_loss: values, empty-positive flag, gradient") {
  AnchorGrid anchors = tiny_anchors();
  TrainConfig tc;
  OrientedBox3 g1 = anchors.box_at(8, 10);
  g1.z = -1.15;
  OrientedBox3 g2 = anchors.box_at(5, 11);
  g2.z = -0.9;
  std::vector<OrientedBox3> gts{g1, g2};
  auto assign = assign_targets(anchors, gts, tc.pos_iou, tc.neg_iou);
  REQUIRE(assign.n_pos == 2);

  // craft t_z so decoded z is perfect at both positives
  std::vector<double> tz(256, 0.0);
  for (std::size_t i = 0; i < 256; ++i)
    if (assign.match[i] >= 0)
      tz[i] = (gts[static_cast<std::size_t>(assign.match[i])].z - anchors.z) / anchors.h;
  Tensor tzm = Tensor::from_data({1, 16, 16}, std::move(tz));
  auto perfect = z_align_loss(tzm, Tensor(), anchors, assign, gts);
  CHECK(perfect.loss.item() == doctest::Approx(0.0));
  CHECK_FALSE(perfect.no_positives);

  // errors of 1.0 and 3.0 meters -> mean 2.0
  std::vector<double> tz2(256, 0.0);
  for (std::size_t i = 0; i < 256; ++i)
    if (assign.match[i] >= 0) {
      const auto& g = gts[static_cast<std::size_t>(assign.match[i])];
      double err = assign.match[i] == 0 ? 1.0 : 3.0;
      tz2[i] = (g.z + err - anchors.z) / anchors.h;
    }
  auto two = z_align_loss(Tensor::from_data({1, 16, 16}, std::move(tz2)), Tensor(), anchors,
                          assign, gts);
  CHECK(two.loss.item() == doctest::Approx(2.0));

  // no positives: zero loss plus the flag
  auto empty_assign = assign_targets(anchors, {}, tc.pos_iou, tc.neg_iou);
  auto flagged = z_align_loss(tzm, Tensor(), anchors, empty_assign, {});
  CHECK(flagged.loss.item() == 0.0);
  CHECK(flagged.no_positives);

  // gradient w.r.t. t_z is sign * h_anchor / |P| at positives, 0 elsewhere
  Rng grng(67);
  Tensor tz3 = Tensor::randn({1, 16, 16}, grng, 0.3, true);
  tz3.zero_grad();
  auto zl = z_align_loss(tz3, Tensor::scalar(0.7), anchors, assign, gts);
  zl.loss.backward();
  for (std::size_t i = 0; i < 256; ++i) {
    double g = tz3.grad()[i];
    if (assign.match[i] >= 0) CHECK(std::fabs(std::fabs(g) - anchors.h / 2.0) < 1e-12);
    else CHECK(g == 0.0);
  }
  auto res = oracle::finite_diff_check(
      [&] { return z_align_loss(tz3, Tensor::scalar(0.7), anchors, assign, gts).loss; }, {tz3});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("loss report decomposes exactly and components are non-negative") {
  ScenarioConfig scen = tiny_scenario();
  ExperimentConfig cfg = tiny_config();
  PerceptionModel m = PerceptionModel::make(cfg.model, scen, 71, true);
  Frame f = handmade_frame(scen);
  auto fleet = select_fleet(f, 2, 1);
  ForwardResult fwd = forward_frame(m, f, fleet, scen);
  AnchorGrid anchors = AnchorGrid::make(m.feature_extent, m.cfg);
  TrainConfig tc = cfg.train;
  tc.pos_iou = 0.6;
  FrameLoss fl = frame_loss(fwd, ego_gts(f), anchors, tc);
  CHECK(fl.report.l_det >= 0.0);
  CHECK(fl.report.l_offset >= 0.0);
  CHECK(fl.report.l_z_align >= 0.0);
  double recomposed = (tc.w_det * fl.report.l_det + tc.w_off * fl.report.l_offset) +
                      tc.w_z * fl.report.l_z_align;
  CHECK(fl.report.total == recomposed);
  CHECK(fl.total.item() == fl.report.total);
}

TEST_CASE("gradient routing: offset and z-align paths both reach the CDSC") {
  ScenarioConfig scen = tiny_scenario();
  ExperimentConfig cfg = tiny_config();
  Frame f = handmade_frame(scen);
  AnchorGrid anchors = AnchorGrid::make(
      PerceptionModel::make(cfg.model, scen, 73, true).feature_extent, cfg.model);

  auto cdsc_grad_norm = [&](double w_det, double w_off, double w_z) {
    PerceptionModel m = PerceptionModel::make(cfg.model, scen, 73, true);
    // nonzero SOPT output so the clamp passes gradients
    Rng r(74);
    for (auto& v : m.sopt->mlp2.weight.tensor.raw_data()) v = r.normal(0, 0.05);
    auto fleet = select_fleet(f, 2, 1);
    ForwardResult fwd = forward_frame(m, f, fleet, scen);
    TrainConfig tc = cfg.train;
    tc.w_det = w_det;
    tc.w_off = w_off;
    tc.w_z = w_z;
    FrameLoss fl = frame_loss(fwd, ego_gts(f), anchors, tc);
    for (Parameter* p : m.parameters()) p->tensor.zero_grad();
    fl.total.backward();
    double norm = 0;
    for (Parameter* p : m.parameters_with_prefix("cdsc."))
      for (double g : p->tensor.grad()) norm += g * g;
    return std::sqrt(norm);
  };

  CHECK(cdsc_grad_norm(0.0, 1.0, 0.0) > 1e-12);  // L_offset alone
  CHECK(cdsc_grad_norm(0.0, 0.0, 1.0) > 1e-12);  // L_z_align alone
  CHECK(cdsc_grad_norm(1.0, 0.0, 0.0) > 1e-12);  // detection path too
}

TEST_CASE("Adam excludes frozen parameters and leaves them bit-identical") {
  ScenarioConfig scen = tiny_scenario();
  ExperimentConfig cfg = tiny_config();
  PerceptionModel m = PerceptionModel::make(cfg.model, scen, 79, true);
  m.freeze_prefix("fusion.", true);
  m.freeze_prefix("head.", true);

  std::vector<double> frozen_before;
  for (Parameter* p : m.parameters())
    if (p->frozen)
      frozen_before.insert(frozen_before.end(), p->tensor.data().begin(),
                           p->tensor.data().end());

  AdamOptimizer opt(m.parameters(), cfg.train);
  auto names = opt.update_set();
  std::set<std::string> updated(names.begin(), names.end());
  for (Parameter* p : m.parameters()) {
    if (p->frozen) CHECK_FALSE(updated.count(p->name));
    else CHECK(updated.count(p->name));
  }

  Frame f = handmade_frame(scen);
  auto fleet = select_fleet(f, 2, 1);
  for (int step = 0; step < 3; ++step) {
    ForwardResult fwd = forward_frame(m, f, fleet, scen);
    AnchorGrid anchors = AnchorGrid::make(m.feature_extent, m.cfg);
    FrameLoss fl = frame_loss(fwd, ego_gts(f), anchors, cfg.train);
    fl.total.backward();
    opt.step();
    opt.zero_grad();
  }
  std::vector<double> frozen_after;
  for (Parameter* p : m.parameters())
    if (p->frozen)
      frozen_after.insert(frozen_after.end(), p->tensor.data().begin(), p->tensor.data().end());
  REQUIRE(frozen_before.size() == frozen_after.size());
  CHECK(std::memcmp(frozen_before.data(), frozen_after.data(),
                    frozen_before.size() * sizeof(double)) == 0);
}

TEST_CASE("overfit sanity: loss falls steadily on one fixed frame") {
  ScenarioConfig scen = tiny_scenario();
  ExperimentConfig cfg = tiny_config();
  cfg.train.pos_iou = 0.5;
  cfg.train.neg_iou = 0.3;
  PerceptionModel m = PerceptionModel::make(cfg.model, scen, 83, false);
  Frame f = handmade_frame(scen);
  auto fleet = select_fleet(f, 2, 0);
  AnchorGrid anchors = AnchorGrid::make(m.feature_extent, m.cfg);
  TrainConfig tc = cfg.train;
  tc.lr = 0.0015;
  AdamOptimizer opt(m.parameters(), tc);
  std::vector<double> losses;
  auto assign = assign_targets(anchors, ego_gts(f), tc.pos_iou, tc.neg_iou);
  for (int step = 0; step < 50; ++step) {
    ForwardResult fwd = forward_frame(m, f, fleet, scen);
    Tensor l = detection_loss(fwd.det, anchors, assign, ego_gts(f), tc);
    losses.push_back(l.item());
    l.backward();
    opt.step();
    opt.zero_grad();
  }
  // steady descent: Adam may wobble a step, never by more than a few percent
  for (std::size_t i = 1; i < losses.size(); ++i)
    CHECK(losses[i] < losses[i - 1] * 1.05 + 1e-9);
  CHECK(losses.back() < 0.5 * losses.front());
}

TEST_CASE("stage 1: zero epochs equals initialization, loss decreases with training") {
  ExperimentConfig cfg = tiny_config();
  cfg.scenario.n_frames = 3;
  auto frames = generate_scenario(cfg.scenario);

  ExperimentConfig zero = cfg;
  zero.train.epochs = 0;
  TrainOutcome t0 = train_stage1(zero, frames);
  PerceptionModel fresh = PerceptionModel::make(cfg.model, cfg.scenario, cfg.train.seed, false);
  auto a = stage1_checkpoint_state(t0.model);
  auto b = stage1_checkpoint_state(fresh);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].data == b[i].data);
  }

  ExperimentConfig five = cfg;
  five.train.epochs = 5;
  five.train.lr = 0.003;
  five.train.pos_iou = 0.5;
  five.train.neg_iou = 0.3;
  TrainOutcome t5 = train_stage1(five, frames);
  REQUIRE(t5.history.size() == 5);
  CHECK(t5.history.back().total < t5.history.front().total);

  CHECK_THROWS_AS(train_stage1(cfg, {}), std::invalid_argument);
}

TEST_CASE("stage 2: freezing is bit-exact, offset loss improves, SOPT is discardable") {
  ExperimentConfig cfg = tiny_config();
  cfg.scenario.n_frames = 3;
  cfg.train.epochs = 2;
  cfg.train.lr = 0.002;
  cfg.train.pos_iou = 0.5;
  cfg.train.neg_iou = 0.3;
  auto frames = generate_scenario(cfg.scenario);
  ScenarioConfig held_cfg = cfg.scenario;
  held_cfg.seed = 999;
  auto held_out = generate_scenario(held_cfg);

  TrainOutcome s1 = train_stage1(cfg, frames);
  auto stage1_state = stage1_checkpoint_state(s1.model);

  // initial held-out offset loss: fresh stage-2 model before training
  ExperimentConfig zero = cfg;
  zero.train.epochs = 0;
  TrainOutcome before = train_stage2(zero, frames, stage1_state);
  double off_before = mean_offset_loss(before.model, held_out, cfg);

  TrainOutcome s2 = train_stage2(cfg, frames, stage1_state);
  CHECK(s2.frozen_grads_always_zero);
  double off_after = mean_offset_loss(s2.model, held_out, cfg);
  CHECK(off_after < off_before);

  // frozen fusion/head bit-identical to the stage-1 checkpoint
  auto after = model_state(s2.model);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : after) by_name[e.name] = &e;
  for (const auto& e : stage1_state) {
    if (e.name.rfind("fusion.", 0) != 0 && e.name.rfind("head.", 0) != 0) continue;
    REQUIRE(by_name.count(e.name));
    const auto& now = *by_name.at(e.name);
    REQUIRE(now.data.size() == e.data.size());
    CHECK(std::memcmp(now.data.data(), e.data.data(), e.data.size() * sizeof(double)) == 0);
  }

  // the inference checkpoint carries no SOPT parameters
  auto inf = inference_checkpoint_state(s2.model);
  for (const auto& e : inf) CHECK(e.name.rfind("sopt.", 0) != 0);
  bool model_has_sopt = false;
  for (Parameter* p : s2.model.parameters())
    if (p->name.rfind("sopt.", 0) == 0) model_has_sopt = true;
  CHECK(model_has_sopt);  // present during training, stripped at export

  // UAV encoder started from the trained vehicle encoder
  TrainOutcome init_only = train_stage2(zero, frames, stage1_state);
  for (Parameter* p : init_only.model.parameters_with_prefix("uav_encoder.")) {
    std::string src = "veh_encoder." + p->name.substr(std::string("uav_encoder.").size());
    for (const auto& e : stage1_state)
      if (e.name == src)
        CHECK(std::memcmp(p->tensor.data().data(), e.data.data(),
                          e.data.size() * sizeof(double)) == 0);
  }

  // stage-2 demands UAVs in the data
  ScenarioConfig no_uav = cfg.scenario;
  no_uav.n_uavs = 0;
  auto veh_only = generate_scenario(no_uav);
  CHECK_THROWS_AS(train_stage2(cfg, veh_only, stage1_state), std::invalid_argument);
}

TEST_CASE("metrics log is line-delimited json without timestamps") {
  ExperimentConfig cfg = tiny_config();
  cfg.scenario.n_frames = 2;
  cfg.train.epochs = 2;
  auto frames = generate_scenario(cfg.scenario);
  std::string log = "train_metrics_test.jsonl";
  std::remove(log.c_str());
  train_stage1(cfg, frames, log);
  std::ifstream is(log);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    CHECK(line.find("\"epoch\"") != std::string::npos);
    CHECK(line.find("\"total\"") != std::string::npos);
    ++n;
  }
  CHECK(n == 2);
  std::remove(log.c_str());
}
