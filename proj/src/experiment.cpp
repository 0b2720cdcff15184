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

#include "coral/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "coral/errors.hpp"
#include "coral/rng.hpp"

namespace coral {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

namespace {

constexpr uint64_t kTrainSalt = 0x747261696e706f6fULL;
constexpr uint64_t kEvalSalt = 0x6576616c7461736bULL;
constexpr uint64_t kEvalNoiseSalt = 0x6576616c6e6f6973ULL;

json task_spec_json(const TaskSpec& s) {
  return {{"height", s.height},     {"width", s.width}, {"channels", s.channels},
          {"warp", warp_name(s.warp)}, {"sigma", s.sigma}, {"density", s.density},
          {"block_size", s.block_size}};
}

TaskSpec task_spec_from_json(const json& j) {
  TaskSpec s;
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.channels = j.at("channels").get<int>();
  s.warp = parse_warp(j.at("warp").get<std::string>());
  s.sigma = j.at("sigma").get<double>();
  s.density = j.at("density").get<double>();
  s.block_size = j.at("block_size").get<int>();
  return s;
}

json number_or_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }
double number_or_nan(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

LatentGrid normal_grid(Rng& rng, int h, int w, int c) {
  LatentGrid g(h, w, c);
  auto& d = g.data();
  for (int i = 0; i < h * w * c; ++i) d[i] = rng.normal();
  return g;
}

double nan_mean(const std::vector<double>& v) {
  double s = 0.0;
  int n = 0;
  for (double x : v) {
    if (!std::isnan(x)) {
      s += x;
      ++n;
    }
  }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

void RunConfig::validate() const {
  if (train_tasks < 1 || eval_tasks < 1) throw ConfigError("task counts must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (eval_every < 1) throw ConfigError("eval interval must be >= 1");
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (eval_timesteps.empty()) throw ConfigError("at least one evaluation timestep is required");
  for (double t : eval_timesteps) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("evaluation timesteps must lie in [0,1]");
  }
  task.validate();
  model.validate();
  trainer.weights.validate();
  if (task.height != model.height || task.width != model.width ||
      task.channels != model.channels) {
    throw ConfigError("task grid and model latent shape differ");
  }
}

json RunConfig::to_json() const {
  json timesteps = json::array();
  for (double t : eval_timesteps) timesteps.push_back(t);
  const json trainer_json = trainer.to_json();
  return {{"version", kRunConfigVersion},
          {"subcommand", subcommand},
          {"seed", seed},
          {"task", task_spec_json(task)},
          {"train_tasks", train_tasks},
          {"eval_tasks", eval_tasks},
          {"model", model.to_json()},
          {"trainer", trainer_json},
          {"gamma", gamma},
          {"alpha", alpha},
          {"steps", steps},
          {"batch_size", batch_size},
          {"eval_every", eval_every},
          {"eval_timesteps", timesteps}};
}

RunConfig RunConfig::from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != kRunConfigVersion) {
      throw ConfigError("unsupported run config version");
    }
    RunConfig c;
    c.subcommand = j.at("subcommand").get<std::string>();
    c.seed = j.at("seed").get<uint64_t>();
    c.task = task_spec_from_json(j.at("task"));
    c.train_tasks = j.at("train_tasks").get<int>();
    c.eval_tasks = j.at("eval_tasks").get<int>();
    c.model = ModelConfig::from_json(j.at("model"));
    c.trainer = TrainerOptions::from_json(j.at("trainer"));
    c.gamma = j.at("gamma").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.steps = j.at("steps").get<long>();
    c.batch_size = j.at("batch_size").get<int>();
    c.eval_every = j.at("eval_every").get<int>();
    c.eval_timesteps = j.at("eval_timesteps").get<std::vector<double>>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

TaskBundle make_tasks(const TaskSpec& spec, int count, double gamma) {
  TaskBundle b;
  b.tasks = generate_task_set(spec, count);
  for (const auto& t : b.tasks) {
    b.pseudo_gt.push_back(build_pseudo_gt(t.person_descriptors, t.garment_descriptors,
                                          t.person_mask, t.garment_mask, gamma)
                              .matches);
  }
  return b;
}

TaskBundle make_train_tasks(const RunConfig& config) {
  TaskSpec spec = config.task;
  spec.seed = splitmix64(config.seed ^ kTrainSalt);
  return make_tasks(spec, config.train_tasks, config.gamma);
}

TaskBundle make_eval_tasks(const RunConfig& config) {
  TaskSpec spec = config.task;
  spec.seed = splitmix64(config.seed ^ kEvalSalt);
  return make_tasks(spec, config.eval_tasks, config.gamma);
}

std::vector<TrainingExample> sample_batch(const TaskBundle& pool, uint64_t seed, long step,
                                          int batch_size) {
  if (pool.tasks.empty()) throw EmptyDomainError("empty task pool");
  Rng rng = Rng::stream(seed, static_cast<uint64_t>(step));
  std::vector<TrainingExample> batch;
  for (int i = 0; i < batch_size; ++i) {
    const int k = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(pool.tasks.size()) - 1));
    const SyntheticTask& task = pool.tasks[k];
    const double t = rng.uniform();
    const GridShape p = task.panel();
    batch.push_back({&task, &pool.pseudo_gt[k], t,
                     normal_grid(rng, p.height, 2 * p.width, task.garment.channels())});
  }
  return batch;
}

AttentionScore score_attention(const AttentionMap& map, const PanelLayout& layout,
                               const BinaryMask& person_mask, const BinaryMask& garment_mask,
                               const CorrespondenceSet& gt, const std::vector<double>& alphas) {
  const Eigen::MatrixXd mean = map.mean();
  const SubAttention sub = extract_sub_attention(mean, layout, person_mask, garment_mask);
  const CorrespondenceSet pred = hard_correspondence(sub);
  AttentionScore score;
  const bool any_reliable = gt.reliable_count() > 0;
  for (double a : alphas) {
    score.pck.push_back(any_reliable ? pck(pred, gt, a) : std::numeric_limits<double>::quiet_NaN());
  }
  const auto queries = person_mask.locations();
  if (queries.size() != gt.entries.size() || pred.entries.size() != queries.size()) {
    throw DimensionError("score_attention: ground truth does not cover the person mask");
  }
  double total = 0.0;
  for (size_t i = 0; i < queries.size(); ++i) {
    const Eigen::RowVectorXd row = mean.row(layout.person_token(queries[i]));
    const double h = row_entropy(std::span<const double>(row.data(), row.size()));
    total += h;
    score.queries.push_back({0, 0.0, 0, queries[i], pred.entries[i].match, gt.entries[i].match,
                             gt.entries[i].reliable, h});
  }
  score.entropy = total / queries.size();
  return score;
}

double EvalReport::pck_at(double alpha) const {
  for (size_t i = 0; i < alphas.size(); ++i) {
    if (alphas[i] == alpha) return pck[i];
  }
  throw RangeError("report has no PCK at alpha " + format_number(alpha));
}

json EvalReport::to_json() const {
  json samples_json = json::array();
  for (const auto& s : samples) {
    json p = json::array();
    for (double v : s.pck) p.push_back(number_or_null(v));
    samples_json.push_back({{"task", s.task},
                            {"pck", p},
                            {"entropy", s.entropy},
                            {"velocity_loss", s.velocity_loss},
                            {"edit_loss", s.edit_loss},
                            {"reliable", s.reliable}});
  }
  json p = json::array();
  for (double v : pck) p.push_back(number_or_null(v));
  return {{"schema", "coral.eval"},
          {"version", 1},
          {"alphas", alphas},
          {"timesteps", timesteps},
          {"pck", p},
          {"mean_entropy", mean_entropy},
          {"velocity_loss", velocity_loss},
          {"samples", samples_json}};
}

EvalReport EvalReport::from_json(const json& j) {
  try {
    if (j.at("schema").get<std::string>() != "coral.eval" || j.at("version").get<int>() != 1) {
      throw FormatError("not a version 1 evaluation report");
    }
    EvalReport r;
    r.alphas = j.at("alphas").get<std::vector<double>>();
    r.timesteps = j.at("timesteps").get<std::vector<double>>();
    for (const auto& v : j.at("pck")) r.pck.push_back(number_or_nan(v));
    r.mean_entropy = j.at("mean_entropy").get<double>();
    r.velocity_loss = j.at("velocity_loss").get<double>();
    for (const auto& s : j.at("samples")) {
      SampleScore ss;
      ss.task = s.at("task").get<int>();
      for (const auto& v : s.at("pck")) ss.pck.push_back(number_or_nan(v));
      ss.entropy = s.at("entropy").get<double>();
      ss.velocity_loss = s.at("velocity_loss").get<double>();
      ss.edit_loss = s.at("edit_loss").get<double>();
      ss.reliable = s.at("reliable").get<int>();
      if (ss.pck.size() != r.alphas.size()) throw FormatError("sample PCK count mismatch");
      r.samples.push_back(ss);
    }
    if (r.pck.size() != r.alphas.size()) throw FormatError("PCK count mismatch");
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed evaluation report: ") + e.what());
  }
}

EvalReport evaluate_correspondence(const DiptychModel& model, const TaskBundle& tasks,
                                   const std::vector<double>& timesteps,
                                   const std::vector<double>& alphas, uint64_t noise_seed,
                                   bool keep_queries, int threads) {
  if (tasks.tasks.empty()) throw EmptyDomainError("evaluation needs at least one task");
  if (timesteps.empty() || alphas.empty()) throw ConfigError("evaluation grid is empty");
  const int n = static_cast<int>(tasks.tasks.size());
  std::vector<SampleScore> samples(n);
  std::vector<std::vector<QueryRecord>> records(n);
  parallel_for(n, threads, [&](int i) {
    const SyntheticTask& task = tasks.tasks[i];
    const CorrespondenceSet& gt = tasks.pseudo_gt[i];
    const GridShape p = task.panel();
    SampleScore s;
    s.task = i;
    s.reliable = gt.reliable_count();
    std::vector<std::vector<double>> pcks(alphas.size());
    double entropy = 0.0;
    double velocity = 0.0;
    double edit = 0.0;
    const int edited = task.edit_mask.count();
    int maps = 0;
    for (size_t ti = 0; ti < timesteps.size(); ++ti) {
      const double t = timesteps[ti];
      Rng rng = Rng::stream(noise_seed, static_cast<uint64_t>(i) * 1024 + ti);
      const LatentGrid noise = normal_grid(rng, p.height, 2 * p.width, task.garment.channels());
      const DiptychInputs inputs = build_diptych(task.garment, task.person, task.edit_mask, t, noise);
      const ForwardResult fwd = model.forward(inputs, task.pose, t);
      const Eigen::MatrixXd target =
          canvas_rows(noise) - canvas_rows(join_panels(task.garment, task.person));
      const Eigen::MatrixXd err = fwd.velocity - target;
      velocity += err.squaredNorm() / static_cast<double>(err.size());
      double e = 0.0;
      for (int k = 0; k < p.size(); ++k) {
        if (task.edit_mask(p.coord(k))) e += err.row(p.size() + k).squaredNorm();
      }
      if (edited > 0) edit += e / (static_cast<double>(edited) * err.cols());
      for (size_t l = 0; l < fwd.blocks.size(); ++l) {
        AttentionScore sc = score_attention(fwd.blocks[l].attn.map, fwd.layout, task.person_mask,
                                            task.garment_mask, gt, alphas);
        for (size_t a = 0; a < alphas.size(); ++a) pcks[a].push_back(sc.pck[a]);
        entropy += sc.entropy;
        ++maps;
        if (keep_queries) {
          for (auto& q : sc.queries) {
            q.sample = i;
            q.t = t;
            q.layer = static_cast<int>(l);
            records[i].push_back(q);
          }
        }
      }
    }
    for (size_t a = 0; a < alphas.size(); ++a) s.pck.push_back(nan_mean(pcks[a]));
    s.entropy = entropy / maps;
    s.velocity_loss = velocity / timesteps.size();
    s.edit_loss = edit / timesteps.size();
    samples[i] = s;
  });

  EvalReport r;
  r.alphas = alphas;
  r.timesteps = timesteps;
  for (size_t a = 0; a < alphas.size(); ++a) {
    std::vector<double> v;
    for (const auto& s : samples) v.push_back(s.pck[a]);
    r.pck.push_back(nan_mean(v));
  }
  for (const auto& s : samples) {
    r.mean_entropy += s.entropy / n;
    r.velocity_loss += s.velocity_loss / n;
  }
  r.samples = std::move(samples);
  for (auto& rec : records) r.queries.insert(r.queries.end(), rec.begin(), rec.end());
  return r;
}

void write_eval_report(const EvalReport& report, const fs::path& directory) {
  fs::create_directories(directory);
  write_text(directory / "report.json", report.to_json().dump(2) + "\n");
  std::string csv = "sample,t,layer,query_y,query_x,pred_y,pred_x,gt_y,gt_x,reliable,error,entropy\n";
  for (const auto& q : report.queries) {
    csv += std::to_string(q.sample) + "," + format_number(q.t) + "," + std::to_string(q.layer) +
           "," + std::to_string(q.query.y) + "," + std::to_string(q.query.x) + "," +
           format_number(q.predicted.y) + "," + format_number(q.predicted.x) + "," +
           format_number(q.target.y) + "," + format_number(q.target.x) + "," +
           (q.reliable ? "1" : "0") + "," + format_number(distance(q.predicted, q.target)) + "," +
           format_number(q.entropy) + "\n";
  }
  write_text(directory / "queries.csv", csv);
}

RunSummary run_train(const RunConfig& config, const fs::path& out,
                     const std::optional<fs::path>& resume) {
  config.validate();
  fs::create_directories(out);
  std::optional<Trainer> trainer;
  if (resume) {
    trainer.emplace(Trainer::load_checkpoint(*resume, &config.trainer));
    if (trainer->model().config().to_json() != config.model.to_json()) {
      throw ConfigError("checkpoint model configuration differs from the run configuration");
    }
    if (trainer->step() > config.steps) {
      throw ConfigError("checkpoint is already past the requested step count");
    }
  } else {
    trainer.emplace(config.model, config.trainer);
  }
  write_text(out / "run_config.json", config.to_json().dump(2) + "\n");

  const bool append = resume.has_value();
  const fs::path metrics_path = out / "metrics.csv";
  const bool need_header = !append || !fs::exists(metrics_path);
  std::ofstream metrics(metrics_path, append ? std::ios::app : std::ios::trunc);
  std::ofstream losses(out / "losses.jsonl", append ? std::ios::app : std::ios::trunc);
  if (!metrics || !losses) throw FormatError("cannot write run logs under " + out.string());
  if (need_header) metrics << kMetricsHeader << "\n";
  metrics.flush();

  const TaskBundle train = make_train_tasks(config);
  const TaskBundle eval = make_eval_tasks(config);
  const uint64_t eval_noise = splitmix64(config.seed ^ kEvalNoiseSalt);
  const std::vector<double> alphas{1.0, 2.0, 4.0};

  RunSummary summary;
  while (trainer->step() < config.steps) {
    const auto batch = sample_batch(train, config.seed, trainer->step(), config.batch_size);
    const LossReport report = trainer->train_step(batch);
    losses << report.to_json().dump() << "\n";
    summary.losses.push_back(report);
    if (report.step % config.eval_every == 0 || report.step == config.steps) {
      EvalReport ev = evaluate_correspondence(trainer->model(), eval, config.eval_timesteps, alphas,
                                              eval_noise, false, config.trainer.threads);
      metrics << report.step << "," << format_number(report.velocity) << ","
              << format_number(report.corr) << "," << format_number(report.ent) << ","
              << format_number(report.total) << "," << format_number(ev.pck[0]) << ","
              << format_number(ev.pck[1]) << "," << format_number(ev.pck[2]) << ","
              << format_number(ev.mean_entropy) << "\n";
      metrics.flush();
      losses.flush();
      summary.final_eval = std::move(ev);
    }
  }
  trainer->save_checkpoint(out / "checkpoint.bin");
  summary.steps = trainer->step();
  return summary;
}

CorrelationResult correlation_test(std::span<const double> x, std::span<const double> y,
                                   int permutations, uint64_t seed) {
  if (permutations < 1) throw ConfigError("permutation count must be >= 1");
  CorrelationResult res;
  res.n = static_cast<int>(x.size());
  res.permutations = permutations;
  res.r = pearson_r(x, y);
  std::vector<double> shuffled(y.begin(), y.end());
  Rng rng(seed);
  int extreme = 0;
  for (int k = 0; k < permutations; ++k) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng.engine());
    double rp = 0.0;
    try {
      rp = pearson_r(x, shuffled);
    } catch (const DegenerateError&) {
      rp = 0.0;
    }
    if (std::abs(rp) >= std::abs(res.r) - 1e-12) ++extreme;
  }
  res.p_value = (extreme + 1.0) / (permutations + 1.0);
  return res;
}

CorrelationResult analyze_correlation(const EvalReport& report, double alpha, int permutations,
                                      uint64_t seed, const fs::path& out) {
  size_t a = report.alphas.size();
  for (size_t i = 0; i < report.alphas.size(); ++i) {
    if (report.alphas[i] == alpha) a = i;
  }
  if (a == report.alphas.size()) {
    throw RangeError("report has no PCK at alpha " + format_number(alpha));
  }
  std::vector<double> x, y;
  std::vector<int> ids;
  for (const auto& s : report.samples) {
    if (std::isnan(s.pck[a])) continue;
    x.push_back(s.pck[a]);
    y.push_back(s.velocity_loss);
    ids.push_back(s.task);
  }
  const CorrelationResult res = correlation_test(x, y, permutations, seed);
  if (!out.empty()) {
    fs::create_directories(out);
    std::string csv = "sample,pck,quality\n";
    for (size_t i = 0; i < x.size(); ++i) {
      csv += std::to_string(ids[i]) + "," + format_number(x[i]) + "," + format_number(y[i]) + "\n";
    }
    write_text(out / "scatter.csv", csv);
    const json j = {{"alpha", alpha},
                    {"quality_proxy", "held-out velocity loss"},
                    {"n", res.n},
                    {"r", res.r},
                    {"p_value", res.p_value},
                    {"permutations", res.permutations}};
    write_text(out / "correlation.json", j.dump(2) + "\n");
  }
  return res;
}

namespace {

struct MetricsTable {
  std::vector<std::vector<std::string>> rows;
};

MetricsTable read_metrics(const fs::path& run) {
  const fs::path path = run / "metrics.csv";
  std::ifstream in(path);
  if (!in) throw FormatError("no metrics.csv in " + run.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw FormatError("unexpected metrics header in " + path.string());
  }
  MetricsTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != 9) throw FormatError("malformed metrics row in " + path.string());
    t.rows.push_back(std::move(cells));
  }
  if (t.rows.empty()) throw FormatError("run " + run.string() + " has no evaluated steps");
  return t;
}

double parse_cell(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw FormatError("bad numeric cell '" + s + "'");
  }
}

}  // namespace

json export_plots(const std::vector<fs::path>& runs, const fs::path& out) {
  if (runs.empty()) throw ConfigError("export needs at least one run directory");
  std::string pck_csv = "run,step,pck_a1,pck_a2,pck_a4\n";
  std::string ent_csv = "run,step,mean_entropy\n";
  std::string bars_csv = "run,lambda_corr,lambda_ent,coral,repa,step,pck_a1,pck_a2,pck_a4,mean_entropy\n";
  json runs_json = json::array();
  for (const auto& run : runs) {
    if (!fs::is_directory(run)) throw FormatError("not a run directory: " + run.string());
    const MetricsTable t = read_metrics(run);
    const std::string name = fs::path(run).lexically_normal().filename().string().empty()
                                 ? fs::path(run).lexically_normal().parent_path().filename().string()
                                 : fs::path(run).lexically_normal().filename().string();
    json weights = {{"lambda_corr", nullptr}, {"lambda_ent", nullptr}, {"coral", nullptr}, {"repa", nullptr}};
    if (fs::exists(run / "run_config.json")) {
      std::ifstream in(run / "run_config.json");
      json rc;
      try {
        rc = json::parse(in);
      } catch (const json::exception& e) {
        throw FormatError("malformed run_config.json in " + run.string());
      }
      const RunConfig config = RunConfig::from_json(rc);
      weights = {{"lambda_corr", config.trainer.weights.lambda_corr},
                 {"lambda_ent", config.trainer.weights.lambda_ent},
                 {"coral", config.trainer.coral_enabled},
                 {"repa", config.trainer.repa_enabled}};
    }
    for (const auto& r : t.rows) {
      pck_csv += name + "," + r[0] + "," + r[5] + "," + r[6] + "," + r[7] + "\n";
      ent_csv += name + "," + r[0] + "," + r[8] + "\n";
    }
    const auto& last = t.rows.back();
    auto cell = [](const json& v) { return v.is_null() ? std::string() : v.is_boolean() ? std::string(v.get<bool>() ? "1" : "0") : format_number(v.get<double>()); };
    bars_csv += name + "," + cell(weights["lambda_corr"]) + "," + cell(weights["lambda_ent"]) + "," +
                cell(weights["coral"]) + "," + cell(weights["repa"]) + "," + last[0] + "," + last[5] +
                "," + last[6] + "," + last[7] + "," + last[8] + "\n";
    runs_json.push_back({{"name", name},
                         {"weights", weights},
                         {"points", t.rows.size()},
                         {"final",
                          {{"step", std::stol(last[0])},
                           {"pck_a1", number_or_null(parse_cell(last[5]))},
                           {"pck_a2", number_or_null(parse_cell(last[6]))},
                           {"pck_a4", number_or_null(parse_cell(last[7]))},
                           {"mean_entropy", number_or_null(parse_cell(last[8]))}}}});
  }
  fs::create_directories(out);
  write_text(out / "pck_vs_step.csv", pck_csv);
  write_text(out / "entropy_vs_step.csv", ent_csv);
  write_text(out / "ablation_bars.csv", bars_csv);
  const json bundle = {{"schema", "coral.plots"},
                       {"version", kPlotBundleVersion},
                       {"files",
                        {{"pck_vs_step", "pck_vs_step.csv"},
                         {"entropy_vs_step", "entropy_vs_step.csv"},
                         {"ablation_bars", "ablation_bars.csv"}}},
                       {"runs", runs_json}};
  validate_plot_bundle(bundle);
  write_text(out / "bundle.json", bundle.dump(2) + "\n");
  return bundle;
}

void validate_plot_bundle(const json& b) {
  auto fail = [](const std::string& why) { throw FormatError("invalid plot bundle: " + why); };
  if (!b.is_object()) fail("not an object");
  if (b.value("schema", "") != "coral.plots") fail("schema");
  if (!b.contains("version") || b["version"] != kPlotBundleVersion) fail("version");
  if (!b.contains("files") || !b["files"].is_object()) fail("files");
  for (const char* k : {"pck_vs_step", "entropy_vs_step", "ablation_bars"}) {
    if (!b["files"].contains(k) || !b["files"][k].is_string()) fail(std::string("files.") + k);
  }
  if (!b.contains("runs") || !b["runs"].is_array() || b["runs"].empty()) fail("runs");
  for (const auto& r : b["runs"]) {
    if (!r.contains("name") || !r["name"].is_string()) fail("run name");
    if (!r.contains("final") || !r["final"].is_object()) fail("run final");
    for (const char* k : {"step", "pck_a1", "pck_a2", "pck_a4", "mean_entropy"}) {
      if (!r["final"].contains(k)) fail(std::string("final.") + k);
    }
  }
}

}  // namespace coral
