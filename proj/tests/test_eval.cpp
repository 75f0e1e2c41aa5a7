#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "aircoop/eval.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace aircoop;
using namespace aircoop::fixtures;

namespace {

OrientedBox3 rand_flat_box(Rng& rng, double spread) {
  OrientedBox3 b;
  b.x = rng.uniform(-spread, spread);
  b.y = rng.uniform(-spread, spread);
  b.z = rng.uniform(-2, 2);
  b.l = rng.uniform(2.5, 5.0);
  b.w = rng.uniform(1.2, 2.5);
  b.h = rng.uniform(1.0, 2.0);
  b.yaw = rng.uniform(-M_PI, M_PI);
  return b;
}

// random small instance shared by impl and oracle
struct Instance {
  std::vector<EvalBox> preds, gts;
};

Instance random_instance(Rng& rng, std::size_t max_boxes = 20) {
  Instance in;
  std::size_t n_gt = rng.uniform_index(max_boxes + 1);
  std::size_t n_frames = 1 + rng.uniform_index(3);
  for (std::size_t i = 0; i < n_gt; ++i)
    in.gts.push_back({rand_flat_box(rng, 12), rng.uniform_index(n_frames)});
  // predictions: perturbed copies of gts plus noise boxes
  std::size_t n_pred = rng.uniform_index(max_boxes + 1);
  for (std::size_t i = 0; i < n_pred; ++i) {
    EvalBox p;
    if (!in.gts.empty() && rng.uniform() < 0.6) {
      p = in.gts[rng.uniform_index(in.gts.size())];
      p.box.x += rng.normal(0, 0.6);
      p.box.y += rng.normal(0, 0.6);
      p.box.yaw += rng.normal(0, 0.1);
    } else {
      p.box = rand_flat_box(rng, 12);
      p.frame = rng.uniform_index(n_frames);
    }
    p.box.score = rng.uniform(0.05, 1.0);
    in.preds.push_back(p);
  }
  return in;
}

double oracle_ap(const Instance& in, IouMode mode, double thr) {
  oracle::ApInstance o;
  for (const auto& p : in.preds) {
    o.pred_frame.push_back(p.frame);
    o.pred_score.push_back(p.box.score);
  }
  for (const auto& g : in.gts) o.gt_frame.push_back(g.frame);
  o.iou = [&](std::size_t i, std::size_t j) {
    return mode == IouMode::Bev2d ? iou_bev(in.preds[i].box, in.gts[j].box)
                                  : iou_3d(in.preds[i].box, in.gts[j].box);
  };
  return oracle::brute_force_ap(o, thr);
}

}  // namespace

TEST_CASE("average_precision: trivial cases") {
  Rng rng(3);
  std::vector<EvalBox> gts;
  for (int i = 0; i < 5; ++i) gts.push_back({rand_flat_box(rng, 10), 0});
  std::vector<EvalBox> perfect = gts;
  for (std::size_t i = 0; i < perfect.size(); ++i)
    perfect[i].box.score = rng.uniform(0.1, 1.0);
  CHECK(average_precision(perfect, gts, IouMode::Bev2d, 0.7).ap == doctest::Approx(1.0));
  CHECK(average_precision(perfect, gts, IouMode::Vol3d, 0.7).ap == doctest::Approx(1.0));

  ApResult none = average_precision({}, gts, IouMode::Bev2d, 0.5);
  CHECK(none.ap == 0.0);
  CHECK(none.n_gt == 5);
  CHECK(none.n_pred == 0);

  CHECK(average_precision({}, {}, IouMode::Bev2d, 0.5).ap == 1.0);  // vacuous
  CHECK(average_precision(perfect, {}, IouMode::Bev2d, 0.5).ap == 0.0);
}

TEST_CASE("average_precision: one false positive ranked second, against the oracle") {
  // 3 gts; 4 preds; the FP carries the second-highest score
  Instance in;
  OrientedBox3 g1{0, 0, 0, 4, 2, 1.5, 0};
  OrientedBox3 g2{10, 0, 0, 4, 2, 1.5, 0};
  OrientedBox3 g3{-10, 5, 0, 4, 2, 1.5, 0.2};
  in.gts = {{g1, 0}, {g2, 0}, {g3, 0}};
  auto with_score = [](OrientedBox3 b, double s) {
    b.score = s;
    return b;
  };
  in.preds = {{with_score(g1, 0.95), 0},
              {with_score(OrientedBox3{30, 30, 0, 4, 2, 1.5, 0}, 0.9), 0},  // FP
              {with_score(g2, 0.8), 0},
              {with_score(g3, 0.7), 0}};
  double got = average_precision(in.preds, in.gts, IouMode::Bev2d, 0.7).ap;
  double expect = oracle_ap(in, IouMode::Bev2d, 0.7);
  CHECK(got == expect);
  // hand computation: precisions at the 3 recall steps are 1, 2/3, 3/4
  CHECK(got == doctest::Approx((1.0 / 3) * 1.0 + (1.0 / 3) * 0.75 + (1.0 / 3) * 0.75));
}

TEST_CASE("average_precision equals the brute-force oracle on random instances") {
  Rng rng(7);
  for (int t = 0; t < 150; ++t) {
    Instance in = random_instance(rng);
    for (double thr : {0.5, 0.7}) {
      CHECK(average_precision(in.preds, in.gts, IouMode::Bev2d, thr).ap ==
            oracle_ap(in, IouMode::Bev2d, thr));
      CHECK(average_precision(in.preds, in.gts, IouMode::Vol3d, thr).ap ==
            oracle_ap(in, IouMode::Vol3d, thr));
    }
  }
}

TEST_CASE("AP monotonicity under adding a top TP or a bottom FP") {
  Rng rng(11);
  for (int t = 0; t < 40; ++t) {
    Instance in = random_instance(rng, 10);
    // ensure at least one unmatched gt exists to add
    OrientedBox3 extra = rand_flat_box(rng, 12);
    in.gts.push_back({extra, 0});
    double base = average_precision(in.preds, in.gts, IouMode::Bev2d, 0.7).ap;

    Instance more = in;
    EvalBox tp{extra, 0};
    tp.box.score = 1.0;  // top rank, exact match
    more.preds.push_back(tp);
    double with_tp = average_precision(more.preds, more.gts, IouMode::Bev2d, 0.7).ap;
    CHECK(with_tp >= base - 1e-12);

    Instance worse = in;
    EvalBox fp{rand_flat_box(rng, 12), 0};
    fp.box.x += 200;  // unmatched for sure
    fp.box.score = 1e-4;
    worse.preds.push_back(fp);
    double with_fp = average_precision(worse.preds, worse.gts, IouMode::Bev2d, 0.7).ap;
    CHECK(with_fp <= base + 1e-12);
  }
}

TEST_CASE("3d AP cannot exceed 2d AP through the per-pair bound (equal heights)") {
  Rng rng(13);
  for (int t = 0; t < 100; ++t) {
    OrientedBox3 a = rand_flat_box(rng, 4);
    OrientedBox3 b = rand_flat_box(rng, 4);
    b.h = a.h;
    CHECK(iou_3d(a, b) <= iou_bev(a, b) + 1e-12);
  }
}

TEST_CASE("fleet (1,0) on a frame the ego cannot see: AP 0 with n_gt > 0") {
  ScenarioConfig scen = tiny_scenario();
  ExperimentConfig cfg = tiny_config();
  PerceptionModel m = PerceptionModel::make(cfg.model, scen, 91, false);

  // ego parked far from the objects; the UAV hovers right above them
  Frame f;
  f.frame_id = 0;
  f.ego_index = 0;
  AgentSpec ego;
  ego.kind = AgentKind::Vehicle;
  ego.pose = Pose3::make(-18, -18, 0, 0);
  ego.fov = 6.0;  // tiny sensing radius
  AgentSpec veh2 = ego;
  veh2.pose = Pose3::make(-16, -18, 0, 0);
  AgentSpec uav;
  uav.kind = AgentKind::Uav;
  uav.pose = Pose3::make(2, 3, scen.uav_altitude, 0);
  uav.fov = scen.uav_cone_half_angle_deg;
  f.agents = {ego, veh2, uav};
  // inside the ego-centered eval extent but far outside the ego's tiny FOV
  OrientedBox3 obj{2, 3, scen.ground_z + 0.75, 4.5, 2.0, 1.5, 0};
  f.objects = {obj};
  for (std::size_t ai = 0; ai < f.agents.size(); ++ai)
    f.observations.push_back(
        render_observation(f, ai, raster_extent(scen, f.agents[ai].kind), scen));

  EvalSettings s;
  s.n_vehicles = 1;
  s.n_uavs = 0;
  FleetEval e = evaluate_config(m, {f}, cfg, s);
  CHECK(e.n_gt == 1);  // the roster (with the UAV) sees the object
  CHECK(e.bev_70.ap == 0.0);
  CHECK(e.vol_70.ap == 0.0);
}

TEST_CASE("evaluation is deterministic and the sigma-0 sweep point matches exactly") {
  ExperimentConfig cfg = tiny_config();
  cfg.scenario.n_frames = 2;
  auto frames = generate_scenario(cfg.scenario);
  PerceptionModel m = PerceptionModel::make(cfg.model, cfg.scenario, 97, false);

  EvalSettings s;
  s.n_vehicles = 2;
  s.n_uavs = 1;
  FleetEval a = evaluate_config(m, frames, cfg, s);
  FleetEval b = evaluate_config(m, frames, cfg, s);
  CHECK(a.bev_50.ap == b.bev_50.ap);
  CHECK(a.bev_70.ap == b.bev_70.ap);
  CHECK(a.vol_50.ap == b.vol_50.ap);
  CHECK(a.vol_70.ap == b.vol_70.ap);
  CHECK(a.n_pred == b.n_pred);

  ExperimentConfig sweep_cfg = cfg;
  sweep_cfg.eval.noise_sigmas = {0.0, 0.3};
  SweepResult sw = sweep_noise(m, frames, sweep_cfg, 2, 1);
  REQUIRE(sw.points.size() == 2);
  CHECK(sw.points[0].eval.bev_70.ap == a.bev_70.ap);
  CHECK(sw.points[0].eval.n_pred == a.n_pred);
  // the noisy point re-runs reproducibly
  SweepResult sw2 = sweep_noise(m, frames, sweep_cfg, 2, 1);
  CHECK(sw.points[1].eval.bev_70.ap == sw2.points[1].eval.bev_70.ap);
}

TEST_CASE("compression: rate 1 is the identity path, bad rates rejected") {
  ExperimentConfig cfg = tiny_config();
  cfg.scenario.n_frames = 2;
  cfg.eval.compression_rates = {1, 4};
  cfg.eval.adapter_epochs = 1;
  auto frames = generate_scenario(cfg.scenario);
  PerceptionModel m = PerceptionModel::make(cfg.model, cfg.scenario, 101, false);

  EvalSettings s;
  s.n_vehicles = 2;
  s.n_uavs = 1;
  FleetEval base = evaluate_config(m, frames, cfg, s);
  SweepResult sw = sweep_compression(m, frames, frames, cfg, 2, 1);
  REQUIRE(sw.points.size() == 2);
  CHECK(sw.points[0].eval.bev_70.ap == base.bev_70.ap);
  CHECK(sw.points[0].eval.n_pred == base.n_pred);

  // bottleneck arithmetic: C=8, rate 4 -> 2 channels
  Rng rng(5);
  CompressionAdapter a4 = CompressionAdapter::make("a", cfg.model, 4, rng);
  CHECK(a4.enc.weight.tensor.shape()[0] == 2);
  CHECK(a4.dec.weight.tensor.shape()[0] == 8);

  ExperimentConfig bad = cfg;
  bad.eval.compression_rates = {1, 3};
  CHECK_THROWS_AS(sweep_compression(m, frames, frames, bad, 2, 1), std::invalid_argument);
}

TEST_CASE("report serialization stays deterministic") {
  ExperimentConfig cfg = tiny_config();
  cfg.scenario.n_frames = 1;
  auto frames = generate_scenario(cfg.scenario);
  PerceptionModel m = PerceptionModel::make(cfg.model, cfg.scenario, 103, false);
  EvalSettings s;
  s.n_vehicles = 2;
  s.n_uavs = 1;
  FleetEval e = evaluate_config(m, frames, cfg, s);
  CHECK(fleet_eval_json(e) == fleet_eval_json(e));
  SweepResult sw;
  sw.axis = "noise_sigma";
  sw.points.push_back({0.0, e});
  sw.points.push_back({0.6, e});
  sw.points[0].eval.bev_70.ap = 0.8;
  sw.points[1].eval.bev_70.ap = 0.6;
  std::string csv = sweep_csv(sw);
  CHECK(csv.find("setting,ap_bev_50") == 0);
  CHECK(sweep_json(sw).find("retention_bev_70") != std::string::npos);
}
