#include "aircoop/selfcheck.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "aircoop/eval.hpp"
#include "aircoop/model.hpp"
#include "aircoop/train.hpp"

namespace aircoop {

namespace {

// ---- finite differences ----

double fd_max_rel_err(const std::function<Tensor()>& forward, std::vector<Tensor> leaves,
                      double h = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  forward().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
  double worst = 0.0;
  NoGradGuard ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].raw_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double saved = vals[i];
      vals[i] = saved + h;
      double f1 = forward().item();
      vals[i] = saved - h;
      double f2 = forward().item();
      vals[i] = saved;
      double fd = (f1 - f2) / (2 * h);
      double a = analytic[li][i];
      double rel =
          std::fabs(a - fd) / std::fmax(std::fmax(std::fabs(a), std::fabs(fd)), 1e-6);
      worst = std::fmax(worst, rel);
    }
  }
  return worst;
}

CheckResult grad_result(const std::string& name, double err, double tol = 1e-3) {
  return {name, err < tol, err, tol};
}

// small scenario whose feature grid is 8x8 (raster 16x16 at 1.6 m over +/-12.8)
ScenarioConfig gradcheck_scenario() {
  ScenarioConfig s;
  s.n_vehicles = 2;
  s.n_uavs = 1;
  s.n_objects = 0;
  s.n_frames = 1;
  s.world_half = 10.0;
  s.extent_half = 12.8;
  s.cell_vehicle = 1.6;
  s.cell_uav = 3.2;
  s.vehicle_fov_radius = 14.0;
  return s;
}

ModelConfig gradcheck_model() {
  ModelConfig m;
  m.channels = 6;
  m.enc_hidden = 6;
  m.cdsc_hidden = 6;
  m.cdsc_blocks = 1;
  m.embed_dim = 8;
  m.sopt_layers = 1;
  m.sopt_heads = 2;
  m.sopt_mlp_hidden = 8;
  return m;
}

Frame gradcheck_frame(const ScenarioConfig& scen) {
  Frame f;
  f.frame_id = 0;
  f.ego_index = 0;
  AgentSpec ego;
  ego.kind = AgentKind::Vehicle;
  ego.pose = Pose3::make(0, 0, 0, 0);
  ego.fov = scen.vehicle_fov_radius;
  AgentSpec veh = ego;
  veh.pose = Pose3::make(-3.2, 3.2, 0, 0.2);
  AgentSpec uav;
  uav.kind = AgentKind::Uav;
  uav.pose = Pose3::make(1.6, -1.6, scen.uav_altitude, -0.1);
  uav.fov = scen.uav_cone_half_angle_deg;
  f.agents = {ego, veh, uav};
  // two objects parked on feature-cell centers: -12.8 + (i + .5) * 3.2
  OrientedBox3 a{-12.8 + 5.5 * 3.2, -12.8 + 3.5 * 3.2, scen.ground_z + 0.75, 4.5, 2.0, 1.5, 0};
  OrientedBox3 b{-12.8 + 1.5 * 3.2, -12.8 + 6.5 * 3.2, scen.ground_z + 0.9, 4.5, 2.0, 1.8, 0};
  f.objects = {a, b};
  for (std::size_t ai = 0; ai < f.agents.size(); ++ai)
    f.observations.push_back(
        render_observation(f, ai, raster_extent(scen, f.agents[ai].kind), scen));
  return f;
}

}  // namespace

std::vector<CheckResult> run_gradcheck(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng = Rng::derive(seed, "gradcheck");
  auto randn = [&](const Shape& s, double sd = 1.0) {
    return Tensor::randn(s, rng, sd, true);
  };

  {
    Tensor a = randn({3, 4}), b = randn({4, 2});
    out.push_back(grad_result(
        "matmul", fd_max_rel_err([&] { return mean(square(matmul(a, b))); }, {a, b}), 1e-4));
  }
  {
    Tensor a = randn({2, 3, 4}), b = randn({4, 3});
    out.push_back(grad_result(
        "matmul_batched",
        fd_max_rel_err([&] { return mean(square(matmul(a, b))); }, {a, b})));
  }
  {
    Tensor x = randn({3, 8, 8}), k = randn({3, 1, 7, 7}), b = randn({3});
    out.push_back(grad_result(
        "conv2d_depthwise7x7",
        fd_max_rel_err([&] { return mean(square(conv2d(x, k, b, 3, 3))); }, {x, k, b})));
  }
  {
    Tensor x = randn({4, 6, 6}), k = randn({6, 2, 3, 3}), b = randn({6});
    out.push_back(grad_result(
        "conv2d_grouped",
        fd_max_rel_err([&] { return mean(square(conv2d(x, k, b, 2, 1))); }, {x, k, b})));
  }
  {
    Tensor x = randn({5, 16}), g = randn({16}), b = randn({16});
    out.push_back(grad_result(
        "layer_norm",
        fd_max_rel_err([&] { return mean(square(layer_norm(x, g, b))); }, {x, g, b})));
  }
  {
    Tensor x = randn({4, 7});
    Tensor w = Tensor::randn({4, 7}, rng);
    out.push_back(grad_result(
        "softmax", fd_max_rel_err([&] { return sum(mul(softmax(x), w)); }, {x})));
  }
  {
    Tensor x = randn({2, 5, 4});
    out.push_back(grad_result(
        "bilinear_resample",
        fd_max_rel_err([&] { return mean(square(bilinear_resample(x, 7, 9))); }, {x})));
  }
  {
    // one element inside the window, one deep inside each flat region
    Tensor x = Tensor::from_data({3}, {0.4, 8.0, -6.0}, true);
    out.push_back(grad_result(
        "clamp_flat_regions",
        fd_max_rel_err([&] { return sum(square(clamp(x, -1.0, 1.0))); }, {x})));
  }
  {
    Tensor x = randn({6, 8});
    out.push_back(grad_result(
        "global_avg_pool",
        fd_max_rel_err([&] { return mean(square(global_avg_pool(x))); }, {x})));
  }
  {
    Tensor p = Tensor::from_data({4}, {0.9, 1.1, -0.9, -1.1}, true);
    Tensor t = Tensor::zeros({4});
    out.push_back(grad_result(
        "smooth_l1_kink_neighborhood",
        fd_max_rel_err([&] { return sum(smooth_l1(p, t, 1.0)); }, {p})));
  }
  {
    Tensor x = randn({3, 4}), y = randn({3, 4});
    out.push_back(grad_result(
        "elementwise_chain",
        fd_max_rel_err(
            [&] {
              return mean(square(add(mul(sigmoid(x), gelu(y)), softplus(sub(x, y)))));
            },
            {x, y})));
  }
  {
    Tensor x = randn({2, 5, 5});
    AffineMap2 m{0.9, 0.2, 0.7, -0.2, 0.9, -0.4};
    out.push_back(grad_result(
        "affine_warp", fd_max_rel_err([&] { return mean(square(affine_warp(x, m))); }, {x})));
  }
  {
    Rng lr = Rng::derive(seed, "gradcheck.attn");
    SoptEncoderLayer layer = SoptEncoderLayer::make("l", 8, 2, lr);
    Tensor x = Tensor::randn({5, 8}, lr, 1.0, true);
    std::vector<Parameter*> ps;
    layer.collect(ps);
    std::vector<Tensor> leaves{x};
    for (Parameter* p : ps) leaves.push_back(p->tensor);
    out.push_back(grad_result(
        "attention_layer",
        fd_max_rel_err([&] { return mean(square(layer.forward(x))); }, leaves)));
  }

  // the full stage-2 composite loss on an 8x8 grid, every parameter checked
  {
    ScenarioConfig scen = gradcheck_scenario();
    ModelConfig mc = gradcheck_model();
    PerceptionModel model = PerceptionModel::make(mc, scen, seed ^ 0x5eed, true);
    // nonzero SOPT head so clamp and the z path carry gradients
    Rng pr = Rng::derive(seed, "gradcheck.sopt_head");
    for (auto& v : model.sopt->mlp2.weight.tensor.raw_data()) v = pr.normal(0, 0.05);
    Frame frame = gradcheck_frame(scen);
    auto fleet = select_fleet(frame, 2, 1);
    AnchorGrid anchors = AnchorGrid::make(model.feature_extent, model.cfg);
    TrainConfig tc;
    tc.pos_iou = 0.5;
    tc.neg_iou = 0.3;
    const Pose3& ego = frame.agents[frame.ego_index].pose;
    std::vector<OrientedBox3> gts;
    for (const auto& o : frame.objects) gts.push_back(box_to_ego(ego, o));

    std::vector<Tensor> leaves;
    for (Parameter* p : model.parameters()) leaves.push_back(p->tensor);
    auto composite = [&] {
      ForwardResult fwd = forward_frame(model, frame, fleet, scen);
      return frame_loss(fwd, gts, anchors, tc).total;
    };
    out.push_back(grad_result("stage2_composite_loss", fd_max_rel_err(composite, leaves)));
  }
  return out;
}

std::vector<CheckResult> run_selftest(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng = Rng::derive(seed, "selftest");

  {  // 3D IoU against a Monte-Carlo estimate
    double worst = 0.0;
    bool ok = true;
    Rng mc = Rng::derive(seed, "selftest.mc");
    for (int i = 0; i < 25; ++i) {
      OrientedBox3 a{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5),
                     rng.uniform(1, 4), rng.uniform(1, 2.5), rng.uniform(1, 2.5),
                     rng.uniform(-M_PI, M_PI)};
      OrientedBox3 b{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5),
                     rng.uniform(1, 4), rng.uniform(1, 2.5), rng.uniform(1, 2.5),
                     rng.uniform(-M_PI, M_PI)};
      double exact = iou_3d(a, b);
      // 3 * standard error of a 1e5-sample hit-ratio estimate inside box a
      std::size_t n = 100000, hits = 0;
      double ca = std::cos(a.yaw), sa = std::sin(a.yaw);
      for (std::size_t s = 0; s < n; ++s) {
        double lx = mc.uniform(-0.5 * a.l, 0.5 * a.l);
        double ly = mc.uniform(-0.5 * a.w, 0.5 * a.w);
        double lz = mc.uniform(-0.5 * a.h, 0.5 * a.h);
        double x = a.x + ca * lx - sa * ly;
        double y = a.y + sa * lx + ca * ly;
        double z = a.z + lz;
        double cb = std::cos(b.yaw), sb = std::sin(b.yaw);
        double dx = x - b.x, dy = y - b.y;
        double bx = cb * dx + sb * dy, by = -sb * dx + cb * dy;
        if (std::fabs(bx) <= 0.5 * b.l && std::fabs(by) <= 0.5 * b.w &&
            std::fabs(z - b.z) <= 0.5 * b.h)
          ++hits;
      }
      double va = a.volume(), vb = b.volume();
      double q = static_cast<double>(hits) / n;
      double qt = (hits + 1.0) / (n + 2.0);
      double vi = va * q;
      double se = va * std::sqrt(qt * (1 - qt) / n) * (va + vb) /
                  ((va + vb - vi) * (va + vb - vi));
      double mc_iou = (va + vb - vi) > 0 ? vi / (va + vb - vi) : 0.0;
      double dev = std::fabs(exact - mc_iou);
      worst = std::fmax(worst, se > 0 ? dev / (3 * se) : dev);
      if (dev > 3 * se + 1e-12) ok = false;
      if (iou_3d(a, b) != iou_3d(b, a)) ok = false;
    }
    out.push_back({"iou3d_monte_carlo", ok, worst, 1.0});
  }

  {  // AP against exhaustive recomputation on small random instances
    bool ok = true;
    double worst = 0.0;
    for (int t = 0; t < 40; ++t) {
      std::vector<EvalBox> gts, preds;
      std::size_t n_gt = rng.uniform_index(8);
      for (std::size_t i = 0; i < n_gt; ++i) {
        OrientedBox3 g{rng.uniform(-8, 8), rng.uniform(-8, 8), 0, 4, 2, 1.5,
                       rng.uniform(-M_PI, M_PI)};
        gts.push_back({g, 0});
      }
      std::size_t n_pred = rng.uniform_index(8);
      for (std::size_t i = 0; i < n_pred; ++i) {
        EvalBox p;
        if (!gts.empty() && rng.uniform() < 0.5) {
          p = gts[rng.uniform_index(gts.size())];
          p.box.x += rng.normal(0, 0.5);
        } else {
          p.box = OrientedBox3{rng.uniform(-8, 8), rng.uniform(-8, 8), 0, 4, 2, 1.5, 0};
        }
        p.box.score = rng.uniform(0.1, 1.0);
        preds.push_back(p);
      }
      double fast = average_precision(preds, gts, IouMode::Bev2d, 0.5).ap;
      // exhaustive rank-by-rank recomputation
      std::vector<std::size_t> order(preds.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return preds[x].box.score > preds[y].box.score;
      });
      double slow;
      if (gts.empty()) {
        slow = preds.empty() ? 1.0 : 0.0;
      } else if (preds.empty()) {
        slow = 0.0;
      } else {
        std::vector<double> prec, rec;
        for (std::size_t k = 1; k <= order.size(); ++k) {
          std::vector<bool> used(gts.size(), false);
          std::size_t tp = 0;
          for (std::size_t r = 0; r < k; ++r) {
            double best = 0.5;
            std::size_t bj = gts.size();
            for (std::size_t j = 0; j < gts.size(); ++j) {
              if (used[j]) continue;
              double v = iou_bev(preds[order[r]].box, gts[j].box);
              if (v >= best && (bj == gts.size() || v > best)) {
                best = v;
                bj = j;
              }
            }
            if (bj != gts.size()) {
              used[bj] = true;
              ++tp;
            }
          }
          prec.push_back(static_cast<double>(tp) / k);
          rec.push_back(static_cast<double>(tp) / gts.size());
        }
        slow = 0;
        double prev = 0;
        for (std::size_t k = 0; k < prec.size(); ++k) {
          if (rec[k] <= prev) continue;
          double pm = 0;
          for (std::size_t j = k; j < prec.size(); ++j) pm = std::fmax(pm, prec[j]);
          slow += (rec[k] - prev) * pm;
          prev = rec[k];
        }
      }
      worst = std::fmax(worst, std::fabs(fast - slow));
      if (fast != slow) ok = false;
    }
    out.push_back({"average_precision_bruteforce", ok, worst, 0.0});
  }

  {  // calibration identity through the decoder
    bool ok = true;
    double worst = 0;
    OrientedBox3 anchor{0, 0, -1.0, 4.5, 2.0, 1.5, 0};
    for (int i = 0; i < 200; ++i) {
      double t = rng.uniform(-3, 3), d = rng.uniform(-60, 60);
      double z_cal =
          anchor.z + calibrate_z(Tensor::scalar(t), Tensor::scalar(d), anchor.h).item() * anchor.h;
      double z_raw = anchor.z + t * anchor.h;
      double dev = std::fabs(z_cal - (z_raw - d));
      worst = std::fmax(worst, dev);
      if (dev > 1e-12) ok = false;
      if (d == 0.0 && z_cal != z_raw) ok = false;
    }
    out.push_back({"calibration_identity", ok, worst, 1e-12});
  }

  {  // encode/decode inverse
    bool ok = true;
    double worst = 0;
    OrientedBox3 anchor{0, 0, -1.0, 4.5, 2.0, 1.5, 0};
    double diag = std::hypot(4.5, 2.0);
    for (int i = 0; i < 200; ++i) {
      OrientedBox3 g{rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-3, 1),
                     rng.uniform(3, 6),    rng.uniform(1.4, 2.6), rng.uniform(1, 2.4),
                     rng.uniform(-M_PI, M_PI)};
      OrientedBox3 back = decode_box(encode_box(g, anchor, diag), anchor, diag);
      double dev = std::fabs(back.x - g.x) + std::fabs(back.y - g.y) + std::fabs(back.z - g.z) +
                   std::fabs(back.l - g.l) + std::fabs(back.w - g.w) + std::fabs(back.h - g.h) +
                   std::fabs(normalize_angle(back.yaw - g.yaw));
      worst = std::fmax(worst, dev);
      if (dev > 1e-9) ok = false;
    }
    out.push_back({"box_encode_decode_roundtrip", ok, worst, 1e-9});
  }

  {  // scenario determinism under a fixed seed
    ScenarioConfig s = gradcheck_scenario();
    s.n_objects = 5;
    s.n_frames = 2;
    s.seed = seed;
    auto f1 = generate_scenario(s);
    auto f2 = generate_scenario(s);
    bool ok = f1.size() == f2.size();
    for (std::size_t i = 0; ok && i < f1.size(); ++i) {
      ok = f1[i].objects.size() == f2[i].objects.size();
      for (std::size_t j = 0; ok && j < f1[i].objects.size(); ++j)
        ok = f1[i].objects[j].x == f2[i].objects[j].x &&
             f1[i].objects[j].yaw == f2[i].objects[j].yaw;
      for (std::size_t j = 0; ok && j < f1[i].observations.size(); ++j)
        ok = f1[i].observations[j].data == f2[i].observations[j].data;
    }
    out.push_back({"scenario_determinism", ok, ok ? 0.0 : 1.0, 0.0});
  }

  {  // fusion permutation invariance, exact
    Rng fr = Rng::derive(seed, "selftest.fusion");
    ModelConfig mc = gradcheck_model();
    FusionModule fusion = FusionModule::make("fusion", mc, fr);
    Tensor a = Tensor::randn({6, 8, 8}, fr);
    Tensor b = Tensor::randn({6, 8, 8}, fr);
    Tensor c = Tensor::randn({6, 8, 8}, fr);
    Tensor ref = fusion.forward({a, b, c});
    bool ok = true;
    for (const auto& perm :
         std::vector<std::vector<Tensor>>{{a, c, b}, {b, a, c}, {c, b, a}}) {
      Tensor got = fusion.forward(perm);
      for (std::size_t i = 0; i < ref.numel(); ++i)
        if (got.data()[i] != ref.data()[i]) ok = false;
    }
    Tensor one = fusion.forward({a});
    Tensor dup = fusion.forward({a, a});
    for (std::size_t i = 0; i < one.numel(); ++i)
      if (one.data()[i] != dup.data()[i]) ok = false;
    out.push_back({"fusion_permutation_invariance", ok, ok ? 0.0 : 1.0, 0.0});
  }

  return out;
}

std::string checks_report(const std::vector<CheckResult>& results) {
  std::ostringstream os;
  os.setf(std::ios::scientific);
  os.precision(3);
  for (const auto& r : results)
    os << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  metric=" << r.metric
       << "  tol=" << r.tolerance << "\n";
  return os.str();
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

}  // namespace aircoop
