// Copyright 2026 The CORAL Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "coral/cord_io.hpp"
#include "coral/errors.hpp"
#include "coral/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace coral;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

int default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

bool parse_switch(const std::string& v) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw ConfigError("expected on|off, got '" + v + "'");
}

// Flags shared by commands that generate synthetic tasks.
struct TaskFlags {
  std::optional<int> grid;
  std::optional<double> noise;
  std::optional<std::string> warp;
  std::optional<double> density;

  void add(CLI::App* app) {
    app->add_option("--grid", grid, "Panel height and width");
    app->add_option("--noise", noise, "Descriptor noise sigma");
    app->add_option("--warp", warp, "identity|permutation|block-shuffle|smooth-warp");
    app->add_option("--density", density, "Garment region fraction of the panel");
  }
  void apply(TaskSpec& spec) const {
    if (grid) spec.height = spec.width = *grid;
    if (noise) spec.sigma = *noise;
    if (warp) spec.warp = parse_warp(*warp);
    if (density) spec.density = *density;
  }
};

struct TrainFlags {
  std::optional<std::string> config;
  std::optional<uint64_t> seed;
  std::optional<long> steps;
  std::optional<double> lambda_corr, lambda_ent, lambda_repa, gamma, alpha, lr;
  std::optional<std::string> pose_mode, renormalize, objective, units;
  std::optional<int> tasks, eval_tasks, batch, eval_every, layers, heads, model_dim;
  std::string out;
  std::optional<std::string> resume;
  TaskFlags task;
};

RunConfig build_run_config(const TrainFlags& f) {
  RunConfig c;
  if (f.config) {
    c = RunConfig::from_json(read_json(*f.config));
  } else if (f.resume && fs::exists(fs::path(f.out) / "run_config.json")) {
    // resuming in place continues the recorded configuration
    c = RunConfig::from_json(read_json(fs::path(f.out) / "run_config.json"));
  }
  c.subcommand = "train";
  if (f.seed) c.seed = *f.seed;
  if (f.steps) c.steps = *f.steps;
  f.task.apply(c.task);
  c.model.height = c.task.height;
  c.model.width = c.task.width;
  c.model.channels = c.task.channels;
  if (f.layers) c.model.layers = *f.layers;
  if (f.heads) c.model.heads = *f.heads;
  if (f.model_dim) c.model.model_dim = *f.model_dim;
  if (f.pose_mode) c.model.pose_mode = parse_pose_mode(*f.pose_mode);
  c.model.seed = c.seed;
  if (f.objective) {
    if (*f.objective == "coral") {
      c.trainer.coral_enabled = true;
      c.trainer.repa_enabled = false;
    } else if (*f.objective == "velocity") {
      c.trainer.coral_enabled = false;
      c.trainer.repa_enabled = false;
    } else if (*f.objective == "repa") {
      c.trainer.coral_enabled = false;
      c.trainer.repa_enabled = true;
    } else {
      throw ConfigError("unknown objective '" + *f.objective + "'");
    }
  }
  if (f.lambda_corr) c.trainer.weights.lambda_corr = *f.lambda_corr;
  if (f.lambda_ent) c.trainer.weights.lambda_ent = *f.lambda_ent;
  if (f.lambda_repa) c.trainer.weights.lambda_repa = *f.lambda_repa;
  if (f.renormalize) c.trainer.coral.renormalize = parse_switch(*f.renormalize);
  if (f.units) c.trainer.coral.units = parse_corr_units(*f.units);
  if (f.lr) c.trainer.learning_rate = *f.lr;
  if (f.gamma) c.gamma = *f.gamma;
  if (f.alpha) c.alpha = *f.alpha;
  if (f.tasks) c.train_tasks = *f.tasks;
  if (f.eval_tasks) c.eval_tasks = *f.eval_tasks;
  if (f.batch) c.batch_size = *f.batch;
  if (f.eval_every) c.eval_every = *f.eval_every;
  c.validate();
  return c;
}

int cmd_train(const TrainFlags& f) {
  RunConfig c = build_run_config(f);
  c.trainer.threads = default_threads();
  std::optional<fs::path> resume;
  if (f.resume) resume = fs::path(*f.resume);
  const RunSummary s = run_train(c, f.out, resume);
  std::printf("trained to step %ld\n", s.steps);
  if (s.final_eval) {
    std::printf("pck_a1=%s pck_a2=%s pck_a4=%s mean_entropy=%s\n",
                format_number(s.final_eval->pck[0]).c_str(), format_number(s.final_eval->pck[1]).c_str(),
                format_number(s.final_eval->pck[2]).c_str(),
                format_number(s.final_eval->mean_entropy).c_str());
  }
  return kOk;
}

struct EvalFlags {
  std::string checkpoint;
  uint64_t seed = 0;
  int tasks = 16;
  double gamma = kDefaultCycleGamma;
  double alpha = kDefaultPckAlpha;
  std::vector<double> timesteps{0.25, 0.5, 0.75};
  std::string out;
  TaskFlags task;
};

int cmd_eval(const EvalFlags& f) {
  const Trainer trainer = Trainer::load_checkpoint(f.checkpoint);
  const ModelConfig& mc = trainer.model().config();
  TaskSpec spec;
  f.task.apply(spec);
  spec.height = mc.height;
  spec.width = mc.width;
  spec.channels = mc.channels;
  spec.seed = f.seed;
  if (f.task.grid && *f.task.grid != mc.height) {
    throw ConfigError("--grid differs from the checkpoint's latent shape");
  }
  const TaskBundle tasks = make_tasks(spec, f.tasks, f.gamma);
  std::vector<double> alphas{1.0, 2.0, 4.0};
  if (std::find(alphas.begin(), alphas.end(), f.alpha) == alphas.end()) alphas.push_back(f.alpha);
  const EvalReport r = evaluate_correspondence(trainer.model(), tasks, f.timesteps, alphas,
                                               splitmix64(f.seed ^ 0x65766e6fULL), true,
                                               default_threads());
  write_eval_report(r, f.out);
  std::printf("pck(alpha=%s)=%s mean_entropy=%s velocity_loss=%s\n", format_number(f.alpha).c_str(),
              format_number(r.pck_at(f.alpha)).c_str(), format_number(r.mean_entropy).c_str(),
              format_number(r.velocity_loss).c_str());
  return kOk;
}

int cmd_analyze(const std::string& report_path, double alpha, int permutations, uint64_t seed,
                const std::string& out) {
  const EvalReport r = EvalReport::from_json(read_json(report_path));
  const CorrelationResult c = analyze_correlation(r, alpha, permutations, seed, out);
  std::printf("n=%d r=%s p=%s\n", c.n, format_number(c.r).c_str(), format_number(c.p_value).c_str());
  return kOk;
}

int cmd_gen_tasks(const TaskFlags& flags, uint64_t seed, int count, const std::string& out) {
  TaskSpec spec;
  flags.apply(spec);
  spec.seed = seed;
  const auto tasks = generate_task_set(spec, count);
  for (size_t i = 0; i < tasks.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "task_%03zu", i);
    export_task(tasks[i], fs::path(out) / name);
  }
  std::printf("wrote %zu tasks to %s\n", tasks.size(), out.c_str());
  return kOk;
}

int cmd_pseudo_gt(const std::string& task_dir, double gamma, const std::string& out) {
  const SyntheticTask task = import_task(task_dir);
  const PseudoGroundTruth p = build_pseudo_gt(task.person_descriptors, task.garment_descriptors,
                                              task.person_mask, task.garment_mask, gamma);
  fs::create_directories(out);
  write_mask(fs::path(out) / "reliability.cord", p.reliability);
  json entries = json::array();
  for (const auto& e : p.matches.entries) {
    entries.push_back({{"query", {e.query.y, e.query.x}},
                       {"match", {e.match.y, e.match.x}},
                       {"reliable", e.reliable}});
  }
  const double accuracy = task.truth.reliable_count() > 0 ? pck(p.matches, task.truth, 1.0) : 0.0;
  const json j = {{"gamma", gamma}, {"reliable", p.matches.reliable_count()}, {"correspondences", entries}};
  std::ofstream(fs::path(out) / "pseudo_gt.json") << j.dump(2) << "\n";
  std::printf("reliable=%d/%zu pck_vs_truth(alpha=1)=%s\n", p.matches.reliable_count(),
              p.matches.entries.size(), format_number(accuracy).c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention correspondence distillation toolkit"};
  app.require_subcommand(1);

  TrainFlags train;
  auto* t = app.add_subcommand("train", "Train a toy diptych model");
  t->add_option("--config", train.config, "RunConfig JSON; flags override its fields");
  t->add_option("--seed", train.seed, "Run seed");
  t->add_option("--steps", train.steps, "Total optimizer steps");
  t->add_option("--lambda-corr", train.lambda_corr, "Correspondence loss weight");
  t->add_option("--lambda-ent", train.lambda_ent, "Entropy loss weight");
  t->add_option("--lambda-repa", train.lambda_repa, "Feature alignment weight");
  t->add_option("--objective", train.objective, "coral|velocity|repa");
  t->add_option("--gamma", train.gamma, "Cycle-consistency threshold");
  t->add_option("--alpha", train.alpha, "PCK threshold recorded in the config");
  t->add_option("--pose-mode", train.pose_mode, "token|channel|none");
  t->add_option("--renormalize-subattention", train.renormalize, "on|off");
  t->add_option("--units", train.units, "2d|linear soft-argmax coordinates");
  t->add_option("--lr", train.lr, "Learning rate");
  t->add_option("--tasks", train.tasks, "Training task pool size");
  t->add_option("--eval-tasks", train.eval_tasks, "Held-out task count");
  t->add_option("--batch", train.batch, "Samples per step");
  t->add_option("--eval-every", train.eval_every, "Steps between held-out evaluations");
  t->add_option("--layers", train.layers, "Attention blocks");
  t->add_option("--heads", train.heads, "Attention heads");
  t->add_option("--model-dim", train.model_dim, "Hidden width");
  t->add_option("--out", train.out, "Run directory")->required();
  t->add_option("--resume", train.resume, "Checkpoint to continue from");
  train.task.add(t);

  EvalFlags eval;
  auto* e = app.add_subcommand("eval", "Score attention correspondences of a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  e->add_option("--seed", eval.seed, "Task set seed");
  e->add_option("--tasks", eval.tasks, "Number of tasks");
  e->add_option("--gamma", eval.gamma, "Cycle-consistency threshold");
  e->add_option("--alpha", eval.alpha, "PCK threshold");
  e->add_option("--timesteps", eval.timesteps, "Evaluation timesteps");
  e->add_option("--out", eval.out, "Report directory")->required();
  eval.task.add(e);

  std::string report_path, analyze_out;
  double analyze_alpha = 2.0;
  int permutations = 2000;
  uint64_t analyze_seed = 0;
  auto* a = app.add_subcommand("analyze", "Correlate per-sample PCK with velocity loss");
  a->add_option("--report", report_path, "Evaluation report.json")->required();
  a->add_option("--alpha", analyze_alpha, "PCK threshold present in the report");
  a->add_option("--permutations", permutations, "Permutation test size");
  a->add_option("--seed", analyze_seed, "Permutation seed");
  a->add_option("--out", analyze_out, "Output directory")->required();

  std::vector<std::string> runs;
  std::string plots_out;
  auto* p = app.add_subcommand("export-plots", "Write plot-ready series for run directories");
  p->add_option("runs", runs, "Run directories")->required();
  p->add_option("--out", plots_out, "Output directory")->required();

  TaskFlags gen_flags;
  uint64_t gen_seed = 0;
  int gen_count = 1;
  std::string gen_out;
  auto* g = app.add_subcommand("gen-tasks", "Export synthetic tasks");
  g->add_option("--seed", gen_seed, "Task set seed");
  g->add_option("--tasks", gen_count, "Number of tasks");
  g->add_option("--out", gen_out, "Output directory")->required();
  gen_flags.add(g);

  std::string pgt_task, pgt_out;
  double pgt_gamma = kDefaultCycleGamma;
  auto* q = app.add_subcommand("pseudo-gt", "Build cycle-consistent matches for an exported task");
  q->add_option("--task", pgt_task, "Task directory")->required();
  q->add_option("--gamma", pgt_gamma, "Cycle-consistency threshold");
  q->add_option("--out", pgt_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*a) return cmd_analyze(report_path, analyze_alpha, permutations, analyze_seed, analyze_out);
    if (*p) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      export_plots(dirs, plots_out);
      std::printf("wrote plot bundle to %s\n", plots_out.c_str());
      return kOk;
    }
    if (*g) return cmd_gen_tasks(gen_flags, gen_seed, gen_count, gen_out);
    if (*q) return cmd_pseudo_gt(pgt_task, pgt_gamma, pgt_out);
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  } catch (const NumericalError& err) {
    std::fprintf(stderr, "numerical failure: %s\n", err.what());
    return kNumerical;
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kData;
  } catch (const std::filesystem::filesystem_error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kData;
  }
  return kUsage;
}
