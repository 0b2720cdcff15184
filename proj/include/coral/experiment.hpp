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

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "coral/attention.hpp"
#include "coral/matching.hpp"
#include "coral/model.hpp"
#include "coral/synthetic.hpp"
#include "coral/trainer.hpp"

namespace coral {

inline constexpr int kRunConfigVersion = 1;

// Everything needed to reproduce a run; serialized as run_config.json.
struct RunConfig {
  std::string subcommand = "train";
  uint64_t seed = 0;
  TaskSpec task;  // seed field unused, task seeds derive from `seed`
  int train_tasks = 32;
  int eval_tasks = 16;
  ModelConfig model;
  TrainerOptions trainer;
  double gamma = kDefaultCycleGamma;
  double alpha = kDefaultPckAlpha;
  long steps = 0;
  int batch_size = 4;
  int eval_every = 100;
  std::vector<double> eval_timesteps{0.25, 0.5, 0.75};

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

struct TaskBundle {
  std::vector<SyntheticTask> tasks;
  std::vector<CorrespondenceSet> pseudo_gt;
};

// Task sets with pseudo ground truth at threshold `gamma`.
TaskBundle make_train_tasks(const RunConfig& config);
TaskBundle make_eval_tasks(const RunConfig& config);
TaskBundle make_tasks(const TaskSpec& spec, int count, double gamma);

// Batch of one training step, drawn from the per-step stream of `seed`.
std::vector<TrainingExample> sample_batch(const TaskBundle& pool, uint64_t seed, long step,
                                          int batch_size);

struct QueryRecord {
  int sample = 0;
  double t = 0.0;
  int layer = 0;
  Coord query;
  Point2 predicted;
  Point2 target;
  bool reliable = false;
  double entropy = 0.0;
};

// Hard-match PCK at each alpha and mean person-row entropy of one attention map.
struct AttentionScore {
  std::vector<double> pck;
  double entropy = 0.0;
  std::vector<QueryRecord> queries;
};

AttentionScore score_attention(const AttentionMap& map, const PanelLayout& layout,
                               const BinaryMask& person_mask, const BinaryMask& garment_mask,
                               const CorrespondenceSet& gt, const std::vector<double>& alphas);

struct SampleScore {
  int task = 0;
  std::vector<double> pck;  // per alpha, averaged over timesteps and layers
  double entropy = 0.0;
  double velocity_loss = 0.0;
  double edit_loss = 0.0;  // velocity error on person tokens under the edit mask
  int reliable = 0;
};

struct EvalReport {
  std::vector<double> alphas;
  std::vector<double> timesteps;
  std::vector<double> pck;  // per alpha
  double mean_entropy = 0.0;
  double velocity_loss = 0.0;
  std::vector<SampleScore> samples;
  std::vector<QueryRecord> queries;

  double pck_at(double alpha) const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

// Scores every task at every timestep; noise comes from `noise_seed` so that
// repeated evaluations see identical inputs.
EvalReport evaluate_correspondence(const DiptychModel& model, const TaskBundle& tasks,
                                   const std::vector<double>& timesteps,
                                   const std::vector<double>& alphas, uint64_t noise_seed,
                                   bool keep_queries = false, int threads = 1);

void write_eval_report(const EvalReport& report, const std::filesystem::path& directory);

struct RunSummary {
  long steps = 0;
  std::optional<EvalReport> final_eval;
  std::vector<LossReport> losses;
};

inline const char* kMetricsHeader =
    "step,velocity,corr,ent,total,pck_a1,pck_a2,pck_a4,mean_entropy";

// Trains to config.steps total steps, writing run_config.json, losses.jsonl,
// metrics.csv and checkpoint.bin under `out`.
RunSummary run_train(const RunConfig& config, const std::filesystem::path& out,
                     const std::optional<std::filesystem::path>& resume = std::nullopt);

struct CorrelationResult {
  double r = 0.0;
  double p_value = 1.0;
  int n = 0;
  int permutations = 0;
};

// Pearson r with a two-sided permutation p-value (add-one corrected).
CorrelationResult correlation_test(std::span<const double> x, std::span<const double> y,
                                   int permutations, uint64_t seed);

// Per-sample PCK at `alpha` vs per-sample velocity loss; writes scatter.csv
// and correlation.json when `out` is non-empty.
CorrelationResult analyze_correlation(const EvalReport& report, double alpha, int permutations,
                                      uint64_t seed, const std::filesystem::path& out);

inline constexpr int kPlotBundleVersion = 1;

// Plot-ready CSV series for one or more run directories.
nlohmann::json export_plots(const std::vector<std::filesystem::path>& runs,
                            const std::filesystem::path& out);
void validate_plot_bundle(const nlohmann::json& bundle);

std::string format_number(double value);

}  // namespace coral
