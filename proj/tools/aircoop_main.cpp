// aircoop: scenario generation, two-stage training, evaluation sweeps.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "aircoop/checkpoint.hpp"
#include "aircoop/config.hpp"
#include "aircoop/eval.hpp"
#include "aircoop/model.hpp"
#include "aircoop/scenario.hpp"
#include "aircoop/selfcheck.hpp"
#include "aircoop/train.hpp"

namespace fs = std::filesystem;
using namespace aircoop;

namespace {

ExperimentConfig load_or_default(const std::string& path) {
  if (path.empty()) return parse_config_text("", "<defaults>");
  return load_config(path);
}

void echo_config(const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  save_config(cfg, (out_dir / "config.resolved.json").string());
}

PerceptionModel load_model_for_eval(const ExperimentConfig& cfg, const std::string& ckpt,
                                    std::size_t n_uavs) {
  PerceptionModel model =
      PerceptionModel::make(cfg.model, cfg.scenario, cfg.train.seed, /*with_sopt=*/false);
  auto entries = load_checkpoint(ckpt);
  auto matched = load_state(model, entries, /*require_all=*/false);
  auto has_prefix = [&](const std::string& p) {
    for (const auto& n : matched)
      if (n.rfind(p, 0) == 0) return true;
    return false;
  };
  for (const char* p : {"veh_encoder.", "fusion.", "head."})
    if (!has_prefix(p))
      throw std::runtime_error(std::string("checkpoint lacks required parameters '") + p +
                               "*': " + ckpt);
  if (n_uavs > 0)
    for (const char* p : {"uav_encoder.", "cdsc"})
      if (!has_prefix(p))
        throw std::runtime_error(std::string("UAV evaluation needs '") + p +
                                 "*' parameters in the checkpoint: " + ckpt);
  return model;
}

int wrapped(const std::function<int()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ground-air collaborative perception workbench"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // ---- generate ----
  auto* gen = app.add_subcommand("generate", "generate a synthetic scenario dataset");
  std::string g_config, g_out;
  std::size_t g_vehicles = 3, g_uavs = 2, g_frames = 8, g_objects = 0;
  std::uint64_t g_seed = 0;
  bool g_seed_set = false, g_obj_set = false;
  gen->add_option("--config", g_config, "experiment config file");
  gen->add_option("--vehicles", g_vehicles, "vehicle count (<= 7)");
  gen->add_option("--uavs", g_uavs, "UAV count (<= 7)");
  gen->add_option("--frames", g_frames, "frame count");
  gen->add_option("--objects", g_objects, "object count")->each([&](const std::string&) {
    g_obj_set = true;
  });
  gen->add_option("--seed", g_seed, "scenario seed")->each([&](const std::string&) {
    g_seed_set = true;
  });
  gen->add_option("--out", g_out, "output dataset directory")->required();

  // ---- train ----
  auto* train = app.add_subcommand("train", "run a training stage");
  std::string t_config, t_data, t_out, t_init;
  int t_stage = 0;
  train->add_option("--stage", t_stage, "1 or 2")->required();
  train->add_option("--config", t_config, "experiment config file");
  train->add_option("--data", t_data, "dataset directory")->required();
  train->add_option("--out", t_out, "checkpoint output path")->required();
  train->add_option("--init", t_init, "stage-1 checkpoint (required for stage 2)");

  // ---- eval and sweeps ----
  struct EvalArgs {
    std::string config, ckpt, data, out, train_data;
    std::size_t vehicles = 0, uavs = 0;
    bool fleet_set = false;
  };
  auto add_eval_args = [](CLI::App* cmd, EvalArgs& a, bool wants_train_data) {
    cmd->add_option("--config", a.config, "experiment config file");
    cmd->add_option("--ckpt", a.ckpt, "inference checkpoint")->required();
    cmd->add_option("--data", a.data, "evaluation dataset directory")->required();
    cmd->add_option("--out", a.out, "report path (json)")->required();
    cmd->add_option("--vehicles", a.vehicles, "fleet vehicle count")
        ->each([&a](const std::string&) { a.fleet_set = true; });
    cmd->add_option("--uavs", a.uavs, "fleet UAV count")
        ->each([&a](const std::string&) { a.fleet_set = true; });
    if (wants_train_data)
      cmd->add_option("--train-data", a.train_data,
                      "dataset for adapter fine-tuning (defaults to --data)");
  };
  EvalArgs e_eval, e_noise, e_comp, e_grid;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (AP at 0.5/0.7, 2D and 3D)");
  add_eval_args(ev, e_eval, false);
  auto* sn = app.add_subcommand("sweep-noise", "pose-noise robustness sweep");
  add_eval_args(sn, e_noise, false);
  auto* sc = app.add_subcommand("sweep-compression", "feature-compression sweep");
  add_eval_args(sc, e_comp, true);
  auto* gr = app.add_subcommand("grid", "vehicle x UAV combination grid (2D AP at 0.7)");
  add_eval_args(gr, e_grid, false);

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "CDSC/SOPT ablation (four stage-2 trainings)");
  std::string a_config, a_stage1, a_data, a_eval_data, a_out;
  ab->add_option("--config", a_config, "experiment config file");
  ab->add_option("--stage1", a_stage1, "stage-1 checkpoint")->required();
  ab->add_option("--data", a_data, "training dataset directory")->required();
  ab->add_option("--eval-data", a_eval_data, "evaluation dataset directory")->required();
  ab->add_option("--out", a_out, "report path (json)")->required();

  // ---- gradcheck / selftest ----
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::uint64_t gc_seed = 0;
  std::string gc_out;
  gc->add_option("--seed", gc_seed, "suite seed");
  gc->add_option("--out", gc_out, "also write the report here");
  auto* st = app.add_subcommand("selftest", "oracle-backed invariant suite");
  std::uint64_t st_seed = 0;
  st->add_option("--seed", st_seed, "suite seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // unknown subcommand or bad usage
  }

  if (gen->parsed())
    return wrapped([&] {
      ExperimentConfig cfg = load_or_default(g_config);
      cfg.scenario.n_vehicles = g_vehicles;
      cfg.scenario.n_uavs = g_uavs;
      cfg.scenario.n_frames = g_frames;
      if (g_obj_set) cfg.scenario.n_objects = g_objects;
      if (g_seed_set) cfg.scenario.seed = g_seed;
      cfg.validate();
      auto frames = generate_scenario(cfg.scenario);
      save_dataset(g_out, cfg.scenario, frames);
      echo_config(cfg, g_out);
      std::cout << "wrote " << frames.size() << " frames to " << g_out << "\n";
      return 0;
    });

  if (train->parsed())
    return wrapped([&] {
      ExperimentConfig cfg = load_or_default(t_config);
      cfg.train.stage = t_stage;
      cfg.validate();
      auto [scen_cfg, frames] = load_dataset(t_data);
      cfg.scenario = scen_cfg;  // geometry must match the data on disk
      fs::path out_path(t_out);
      fs::path out_dir = out_path.parent_path().empty() ? "." : out_path.parent_path();
      fs::create_directories(out_dir);
      echo_config(cfg, out_dir);
      std::string log = (out_dir / (out_path.stem().string() + ".metrics.jsonl")).string();
      std::remove(log.c_str());
      if (t_stage == 1) {
        TrainOutcome t = train_stage1(cfg, frames, log);
        save_checkpoint(t_out, stage1_checkpoint_state(t.model));
      } else if (t_stage == 2) {
        if (t_init.empty())
          throw std::invalid_argument("train --stage 2 requires --init STAGE1_CKPT");
        TrainOutcome t = train_stage2(cfg, frames, load_checkpoint(t_init), {}, log);
        save_checkpoint(t_out, inference_checkpoint_state(t.model));
      } else {
        throw std::invalid_argument("--stage must be 1 or 2");
      }
      std::cout << "wrote " << t_out << "\n";
      return 0;
    });

  auto fleet_of = [](const EvalArgs& a, const ExperimentConfig& cfg) {
    std::pair<std::size_t, std::size_t> fleet{cfg.scenario.n_vehicles, cfg.scenario.n_uavs};
    if (a.fleet_set) fleet = {a.vehicles, a.uavs};
    return fleet;
  };

  if (ev->parsed())
    return wrapped([&] {
      ExperimentConfig cfg = load_or_default(e_eval.config);
      auto [scen_cfg, frames] = load_dataset(e_eval.data);
      cfg.scenario = scen_cfg;
      auto [nv, nu] = fleet_of(e_eval, cfg);
      PerceptionModel model = load_model_for_eval(cfg, e_eval.ckpt, nu);
      EvalSettings s;
      s.n_vehicles = nv;
      s.n_uavs = nu;
      FleetEval r = evaluate_config(model, frames, cfg, s);
      fs::path out(e_eval.out);
      write_report(out.string(), fleet_eval_json(r));
      echo_config(cfg, out.parent_path().empty() ? "." : out.parent_path());
      std::cout << "ap_bev_70=" << r.bev_70.ap << " ap_3d_70=" << r.vol_70.ap << "\n";
      return 0;
    });

  if (sn->parsed())
    return wrapped([&] {
      ExperimentConfig cfg = load_or_default(e_noise.config);
      auto [scen_cfg, frames] = load_dataset(e_noise.data);
      cfg.scenario = scen_cfg;
      auto [nv, nu] = fleet_of(e_noise, cfg);
      PerceptionModel model = load_model_for_eval(cfg, e_noise.ckpt, nu);
      SweepResult r = sweep_noise(model, frames, cfg, nv, nu);
      fs::path out(e_noise.out);
      write_report(out.string(), sweep_json(r));
      write_report((out.parent_path() / (out.stem().string() + ".csv")).string(), sweep_csv(r));
      echo_config(cfg, out.parent_path().empty() ? "." : out.parent_path());
      return 0;
    });

  if (sc->parsed())
    return wrapped([&] {
      ExperimentConfig cfg = load_or_default(e_comp.config);
      auto [scen_cfg, frames] = load_dataset(e_comp.data);
      cfg.scenario = scen_cfg;
      auto train_frames = frames;
      if (!e_comp.train_data.empty()) train_frames = load_dataset(e_comp.train_data).second;
      auto [nv, nu] = fleet_of(e_comp, cfg);
      PerceptionModel model = load_model_for_eval(cfg, e_comp.ckpt, nu);
      SweepResult r = sweep_compression(model, train_frames, frames, cfg, nv, nu);
      fs::path out(e_comp.out);
      write_report(out.string(), sweep_json(r));
      write_report((out.parent_path() / (out.stem().string() + ".csv")).string(), sweep_csv(r));
      echo_config(cfg, out.parent_path().empty() ? "." : out.parent_path());
      return 0;
    });

  if (gr->parsed())
    return wrapped([&] {
      ExperimentConfig cfg = load_or_default(e_grid.config);
      auto [scen_cfg, frames] = load_dataset(e_grid.data);
      cfg.scenario = scen_cfg;
      PerceptionModel model = load_model_for_eval(cfg, e_grid.ckpt, cfg.eval.grid_max_uavs);
      GridResult r = combination_grid(model, frames, cfg);
      fs::path out(e_grid.out);
      write_report(out.string(), grid_json(r, cfg));
      echo_config(cfg, out.parent_path().empty() ? "." : out.parent_path());
      return 0;
    });

  if (ab->parsed())
    return wrapped([&] {
      ExperimentConfig cfg = load_or_default(a_config);
      auto [scen_cfg, train_frames] = load_dataset(a_data);
      cfg.scenario = scen_cfg;
      auto eval_frames = load_dataset(a_eval_data).second;
      auto rows = run_ablation(cfg, load_checkpoint(a_stage1), train_frames, eval_frames);
      fs::path out(a_out);
      write_report(out.string(), ablation_json(rows));
      echo_config(cfg, out.parent_path().empty() ? "." : out.parent_path());
      return 0;
    });

  if (gc->parsed())
    return wrapped([&] {
      auto results = run_gradcheck(gc_seed);
      std::string report = checks_report(results);
      std::cout << report;
      if (!gc_out.empty()) write_report(gc_out, report);
      return all_passed(results) ? 0 : 1;
    });

  if (st->parsed())
    return wrapped([&] {
      auto results = run_selftest(st_seed);
      std::cout << checks_report(results);
      return all_passed(results) ? 0 : 1;
    });

  return 0;
}
