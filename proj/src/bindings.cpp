// python bindings for the main operations: geometry, scenario generation,
// average precision, config parsing, and the self-check suites.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "aircoop/config.hpp"
#include "aircoop/eval.hpp"
#include "aircoop/geometry.hpp"
#include "aircoop/scenario.hpp"
#include "aircoop/selfcheck.hpp"
#include "aircoop/tensor.hpp"

namespace py = pybind11;
using namespace aircoop;

namespace {

OrientedBox3 box_from_seq(const std::vector<double>& v) {
  if (v.size() != 7 && v.size() != 8)
    throw std::invalid_argument("box must be [x, y, z, l, w, h, yaw] or [..., score]");
  OrientedBox3 b{v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
  if (v.size() == 8) b.score = v[7];
  return b;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "ground-air collaborative perception core";

  py::class_<Pose3>(m, "Pose3")
      .def(py::init([](double x, double y, double z, double yaw) {
             return Pose3::make(x, y, z, yaw);
           }),
           py::arg("x"), py::arg("y"), py::arg("z"), py::arg("yaw"))
      .def_readonly("x", &Pose3::x)
      .def_readonly("y", &Pose3::y)
      .def_readonly("z", &Pose3::z)
      .def_readonly("yaw", &Pose3::yaw);

  m.def("iou_3d",
        [](const std::vector<double>& a, const std::vector<double>& b) {
          return iou_3d(box_from_seq(a), box_from_seq(b));
        },
        py::arg("box_a"), py::arg("box_b"),
        "rotation-aware volumetric IoU of two [x,y,z,l,w,h,yaw] boxes");
  m.def("iou_bev",
        [](const std::vector<double>& a, const std::vector<double>& b) {
          return iou_bev(box_from_seq(a), box_from_seq(b));
        },
        py::arg("box_a"), py::arg("box_b"), "rotated-rectangle IoU of the BEV footprints");
  m.def("convex_polygon_intersection_area",
        [](const std::vector<std::pair<double, double>>& p,
           const std::vector<std::pair<double, double>>& q) {
          std::vector<Vec2> vp, vq;
          for (auto& v : p) vp.push_back({v.first, v.second});
          for (auto& v : q) vq.push_back({v.first, v.second});
          return convex_polygon_intersection_area(vp, vq);
        },
        py::arg("poly_a"), py::arg("poly_b"));
  m.def("transform_to_ego",
        [](const Pose3& agent, const Pose3& ego, const std::vector<double>& p) {
          if (p.size() != 3) throw std::invalid_argument("point must be [x, y, z]");
          Vec3 out = transform_to_ego(agent, ego, {p[0], p[1], p[2]});
          return std::vector<double>{out.x, out.y, out.z};
        },
        py::arg("pose_agent"), py::arg("pose_ego"), py::arg("point"));

  m.def("average_precision",
        [](const std::vector<std::pair<std::vector<double>, std::size_t>>& preds,
           const std::vector<std::pair<std::vector<double>, std::size_t>>& gts,
           const std::string& mode, double threshold) {
          std::vector<EvalBox> vp, vg;
          for (auto& [b, f] : preds) vp.push_back({box_from_seq(b), f});
          for (auto& [b, f] : gts) vg.push_back({box_from_seq(b), f});
          IouMode m2 = mode == "vol3d" ? IouMode::Vol3d : IouMode::Bev2d;
          ApResult r = average_precision(vp, vg, m2, threshold);
          return py::dict(py::arg("ap") = r.ap, py::arg("iou_threshold") = r.iou_threshold,
                          py::arg("mode") = mode, py::arg("n_gt") = r.n_gt,
                          py::arg("n_pred") = r.n_pred);
        },
        py::arg("predictions"), py::arg("ground_truth"), py::arg("mode") = "bev2d",
        py::arg("threshold") = 0.7,
        "predictions: list of ([x,y,z,l,w,h,yaw,score], frame_id); mode bev2d|vol3d");

  m.def("generate_scenario_summary",
        [](std::size_t vehicles, std::size_t uavs, std::size_t objects, std::size_t frames,
           std::uint64_t seed) {
          ScenarioConfig cfg;
          cfg.n_vehicles = vehicles;
          cfg.n_uavs = uavs;
          cfg.n_objects = objects;
          cfg.n_frames = frames;
          cfg.seed = seed;
          auto out = generate_scenario(cfg);
          py::list result;
          for (const auto& f : out) {
            py::dict d;
            d["frame_id"] = f.frame_id;
            d["n_agents"] = f.agents.size();
            d["n_objects"] = f.objects.size();
            py::list boxes;
            for (const auto& b : f.objects)
              boxes.append(py::make_tuple(b.x, b.y, b.z, b.l, b.w, b.h, b.yaw));
            d["objects"] = boxes;
            result.append(d);
          }
          return result;
        },
        py::arg("vehicles") = 3, py::arg("uavs") = 2, py::arg("objects") = 20,
        py::arg("frames") = 1, py::arg("seed") = 0,
        "deterministic synthetic frames (metadata only, rasters elided)");

  m.def("generate_dataset",
        [](const std::string& out_dir, std::size_t vehicles, std::size_t uavs,
           std::size_t objects, std::size_t frames, std::uint64_t seed) {
          ScenarioConfig cfg;
          cfg.n_vehicles = vehicles;
          cfg.n_uavs = uavs;
          cfg.n_objects = objects;
          cfg.n_frames = frames;
          cfg.seed = seed;
          auto out = generate_scenario(cfg);
          save_dataset(out_dir, cfg, out);
          return out.size();
        },
        py::arg("out_dir"), py::arg("vehicles") = 3, py::arg("uavs") = 2,
        py::arg("objects") = 20, py::arg("frames") = 4, py::arg("seed") = 0);

  m.def("parse_config",
        [](const std::string& text) {
          ExperimentConfig cfg = parse_config_text(text, "<python>");
          return config_to_text(cfg);
        },
        py::arg("text"), "validate a config; returns the resolved canonical form");

  m.def("run_selftest",
        [](std::uint64_t seed) {
          auto results = run_selftest(seed);
          py::list out;
          for (const auto& r : results)
            out.append(py::dict(py::arg("name") = r.name, py::arg("pass") = r.pass,
                                py::arg("metric") = r.metric));
          return out;
        },
        py::arg("seed") = 0);

  m.def("run_gradcheck",
        [](std::uint64_t seed) {
          auto results = run_gradcheck(seed);
          py::list out;
          for (const auto& r : results)
            out.append(py::dict(py::arg("name") = r.name, py::arg("pass") = r.pass,
                                py::arg("metric") = r.metric));
          return out;
        },
        py::arg("seed") = 0);

  m.attr("__version__") = "0.1.0";
}
