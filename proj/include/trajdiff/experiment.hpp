#pragma once

// Experiment configuration: a JSON file with per-section overrides, merged
// with command-line flags (flags win). Unknown keys are rejected up front.

#include <filesystem>
#include <set>
#include <string>

#include "trajdiff/dataset.hpp"
#include "trajdiff/denoiser.hpp"
#include "trajdiff/io.hpp"
#include "trajdiff/problems.hpp"
#include "trajdiff/solver.hpp"
#include "trajdiff/training.hpp"

namespace trajdiff {

inline constexpr const char* kToolVersion = "trajdiff 1.0";

struct EvalBudgets {
  int n_samples_per_problem = 8;
  int curve_n_data = 128;
  int curve_n_samples = 20;
  double omega = 1.0;
  double test_fraction = 0.1;
};

struct ExperimentConfig {
  TaskKind task = TaskKind::Tabletop;
  int timesteps = 20;
  TaskGeometry geometry;
  SolveOptions solver;
  int dataset_problems = 100;
  int dataset_guesses = 25;
  int schedule_K = 64;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  std::array<int, 3> hidden_widths{64, 64, 128};
  std::array<int, 2> cond_widths{32, 64};
  int time_embed_dim = 32;
  bool desk_scale = true;
  TrainConfig train;
  EvalBudgets eval;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = leave the TRAJDIFF_THREADS / hardware default
  std::string out;

  Task make_task() const { return Task{task, timesteps, geometry}; }

  DenoiserConfig make_denoiser_config() const {
    DenoiserConfig c = DenoiserConfig::for_task(make_task(), desk_scale);
    c.hidden_widths = hidden_widths;
    c.cond_widths = cond_widths;
    c.time_embed_dim = time_embed_dim;
    return c;
  }

  json to_json() const {
    json j;
    j["task"] = task_name(task);
    j["timesteps"] = timesteps;
    j["geometry"] = geometry_to_json(geometry);
    j["solver"] = {{"max_outer_iters", solver.max_outer_iters},
                   {"max_inner_iters", solver.max_inner_iters},
                   {"kkt_tol", solver.kkt_tol},
                   {"feas_tol", solver.feas_tol},
                   {"penalty_init", solver.penalty_init},
                   {"penalty_growth", solver.penalty_growth},
                   {"time_limit", solver.time_limit}};
    j["dataset"] = {{"problems", dataset_problems}, {"guesses", dataset_guesses}};
    j["schedule"] = {{"K", schedule_K},
                     {"beta_start", beta_start},
                     {"beta_end", beta_end}};
    j["denoiser"] = {{"hidden_widths", hidden_widths},
                     {"cond_widths", cond_widths},
                     {"time_embed_dim", time_embed_dim},
                     {"desk_scale", desk_scale}};
    j["train"] = {{"epochs", train.epochs},
                  {"batch_size", train.batch_size},
                  {"learning_rate", train.learning_rate},
                  {"p_uncond", train.p_uncond},
                  {"lambda", train.lambda},
                  {"n_gt", train.n_gt},
                  {"n_vio_z", train.n_vio_z},
                  {"mu_floor", train.mu_floor},
                  {"constraint_aware", train.constraint_aware},
                  {"gt_marginal_literal", train.gt_marginal_literal},
                  {"checkpoint_every", train.checkpoint_every}};
    j["eval"] = {{"n_samples_per_problem", eval.n_samples_per_problem},
                 {"curve_n_data", eval.curve_n_data},
                 {"curve_n_samples", eval.curve_n_samples},
                 {"omega", eval.omega},
                 {"test_fraction", eval.test_fraction}};
    j["seed"] = seed;
    j["threads"] = threads;
    j["out"] = out;
    return j;
  }

  std::uint64_t digest() const { return fnv1a(to_json().dump()); }
};

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& known,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) > 0, Errc::invalid_argument,
            "unknown key '" + it.key() + "' in " + where);
}

}  // namespace detail

inline ExperimentConfig experiment_from_json(const json& j) {
  detail::reject_unknown(
      j,
      {"task", "timesteps", "geometry", "solver", "dataset", "schedule",
       "denoiser", "train", "eval", "seed", "threads", "out"},
      "config");
  ExperimentConfig c;
  if (j.contains("task")) c.task = task_from_name(j.at("task"));
  if (j.contains("timesteps")) c.timesteps = j.at("timesteps");
  if (j.contains("geometry")) {
    json g = geometry_to_json(c.geometry);
    std::set<std::string> keys;
    for (auto it = g.begin(); it != g.end(); ++it) keys.insert(it.key());
    detail::reject_unknown(j.at("geometry"), keys, "geometry");
    g.update(j.at("geometry"));
    c.geometry = geometry_from_json(g);
  }
  if (j.contains("solver")) {
    const json& s = j.at("solver");
    detail::reject_unknown(s,
                           {"max_outer_iters", "max_inner_iters", "kkt_tol",
                            "feas_tol", "penalty_init", "penalty_growth",
                            "time_limit"},
                           "solver");
    c.solver.max_outer_iters = s.value("max_outer_iters", c.solver.max_outer_iters);
    c.solver.max_inner_iters = s.value("max_inner_iters", c.solver.max_inner_iters);
    c.solver.kkt_tol = s.value("kkt_tol", c.solver.kkt_tol);
    c.solver.feas_tol = s.value("feas_tol", c.solver.feas_tol);
    c.solver.penalty_init = s.value("penalty_init", c.solver.penalty_init);
    c.solver.penalty_growth = s.value("penalty_growth", c.solver.penalty_growth);
    c.solver.time_limit = s.value("time_limit", c.solver.time_limit);
  }
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    detail::reject_unknown(d, {"problems", "guesses"}, "dataset");
    c.dataset_problems = d.value("problems", c.dataset_problems);
    c.dataset_guesses = d.value("guesses", c.dataset_guesses);
  }
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    detail::reject_unknown(s, {"K", "beta_start", "beta_end"}, "schedule");
    c.schedule_K = s.value("K", c.schedule_K);
    c.beta_start = s.value("beta_start", c.beta_start);
    c.beta_end = s.value("beta_end", c.beta_end);
  }
  if (j.contains("denoiser")) {
    const json& d = j.at("denoiser");
    detail::reject_unknown(
        d, {"hidden_widths", "cond_widths", "time_embed_dim", "desk_scale"},
        "denoiser");
    if (d.contains("hidden_widths"))
      for (int i = 0; i < 3; ++i) c.hidden_widths[i] = d.at("hidden_widths")[i];
    if (d.contains("cond_widths"))
      for (int i = 0; i < 2; ++i) c.cond_widths[i] = d.at("cond_widths")[i];
    c.time_embed_dim = d.value("time_embed_dim", c.time_embed_dim);
    c.desk_scale = d.value("desk_scale", c.desk_scale);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    detail::reject_unknown(t,
                           {"epochs", "batch_size", "learning_rate", "p_uncond",
                            "lambda", "n_gt", "n_vio_z", "mu_floor",
                            "constraint_aware", "gt_marginal_literal",
                            "checkpoint_every"},
                           "train");
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
    c.train.p_uncond = t.value("p_uncond", c.train.p_uncond);
    c.train.lambda = t.value("lambda", c.train.lambda);
    c.train.n_gt = t.value("n_gt", c.train.n_gt);
    c.train.n_vio_z = t.value("n_vio_z", c.train.n_vio_z);
    c.train.mu_floor = t.value("mu_floor", c.train.mu_floor);
    c.train.constraint_aware = t.value("constraint_aware", c.train.constraint_aware);
    c.train.gt_marginal_literal =
        t.value("gt_marginal_literal", c.train.gt_marginal_literal);
    c.train.checkpoint_every = t.value("checkpoint_every", c.train.checkpoint_every);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    detail::reject_unknown(e,
                           {"n_samples_per_problem", "curve_n_data",
                            "curve_n_samples", "omega", "test_fraction"},
                           "eval");
    c.eval.n_samples_per_problem =
        e.value("n_samples_per_problem", c.eval.n_samples_per_problem);
    c.eval.curve_n_data = e.value("curve_n_data", c.eval.curve_n_data);
    c.eval.curve_n_samples = e.value("curve_n_samples", c.eval.curve_n_samples);
    c.eval.omega = e.value("omega", c.eval.omega);
    c.eval.test_fraction = e.value("test_fraction", c.eval.test_fraction);
  }
  if (j.contains("seed")) c.seed = j.at("seed");
  if (j.contains("threads")) c.threads = j.at("threads");
  if (j.contains("out")) c.out = j.at("out");
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& p) {
  return experiment_from_json(io::read_json(p));
}

// Every command drops one of these next to its outputs.
inline void write_provenance(const std::filesystem::path& dir,
                             const std::string& command,
                             const ExperimentConfig& cfg) {
  std::filesystem::create_directories(dir);
  json j;
  j["command"] = command;
  j["tool"] = kToolVersion;
  j["seed"] = cfg.seed;
  j["config"] = cfg.to_json();
  j["config_digest"] = std::to_string(cfg.digest());
  j["format_versions"] = {{"dataset", kDatasetFormatVersion},
                          {"checkpoint", kCheckpointFormatVersion}};
  io::write_atomic(dir / "provenance.json", [&](const std::filesystem::path& p) {
    io::write_json(p, j);
  });
}

}  // namespace trajdiff
