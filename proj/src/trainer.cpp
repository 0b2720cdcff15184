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

#include "coral/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <iterator>
#include <mutex>
#include <sstream>
#include <thread>

#include "coral/errors.hpp"

namespace coral {

const char* corr_units_name(CorrUnits units) {
  return units == CorrUnits::kCoords2d ? "2d" : "linear";
}

CorrUnits parse_corr_units(const std::string& name) {
  if (name == "2d") return CorrUnits::kCoords2d;
  if (name == "linear") return CorrUnits::kLinearIndex;
  throw ConfigError("unknown correspondence units '" + name + "'");
}

int thread_cap(int requested) {
  int cap = std::max(1, requested);
  if (const char* env = std::getenv("CORAL_THREADS")) {
    const int limit = std::atoi(env);
    if (limit > 0) cap = std::min(cap, limit);
  }
  return cap;
}

void parallel_for(int count, int requested, const std::function<void(int)>& body) {
  const int threads = std::min(thread_cap(requested), count);
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int k = 0; k < threads; ++k) {
    pool.emplace_back([&, k] {
      for (int i = k; i < count; i += threads) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

Point2 location_in_units(const Coord& c, GridShape panel, CorrUnits units) {
  if (units == CorrUnits::kLinearIndex) return {0.0, double(panel.linear(c))};
  return to_point(c);
}

Point2 match_in_units(const Point2& m, GridShape panel, CorrUnits units) {
  if (units == CorrUnits::kLinearIndex) return {0.0, m.y * panel.width + m.x};
  return m;
}

std::string describe_row(const ForwardResult& fwd, const BinaryMask& person_mask) {
  std::ostringstream os;
  os.precision(6);
  int worst_layer = -1;
  Coord worst_query{};
  int worst_head = 0;
  for (size_t l = 0; l < fwd.blocks.size() && worst_layer < 0; ++l) {
    const auto& heads = fwd.blocks[l].attn.map.heads;
    for (size_t h = 0; h < heads.size() && worst_layer < 0; ++h) {
      for (const auto& q : person_mask.locations()) {
        if (!heads[h].row(fwd.layout.person_token(q)).allFinite()) {
          worst_layer = static_cast<int>(l);
          worst_head = static_cast<int>(h);
          worst_query = q;
          break;
        }
      }
    }
  }
  if (worst_layer < 0) {
    os << "all person attention rows finite";
    return os.str();
  }
  const auto row = fwd.blocks[worst_layer].attn.map.heads[worst_head].row(
      fwd.layout.person_token(worst_query));
  os << "layer " << worst_layer << " head " << worst_head << " query (" << worst_query.y << ","
     << worst_query.x << ") row [";
  for (Eigen::Index j = 0; j < row.size(); ++j) os << (j ? " " : "") << row(j);
  os << "]";
  return os.str();
}

}  // namespace

CoralTerms coral_terms(const ForwardResult& fwd, const BinaryMask& person_mask,
                       const BinaryMask& garment_mask, const CorrespondenceSet& gt,
                       const CoralOptions& options, double corr_scale, double ent_scale,
                       bool want_grad) {
  const PanelLayout& layout = fwd.layout;
  if (person_mask.shape() != layout.panel || garment_mask.shape() != layout.panel) {
    throw DimensionError("coral_terms: masks must match the panel grid");
  }
  const auto queries = person_mask.locations();
  const auto keys = garment_mask.locations();
  if (queries.empty() || keys.empty()) throw EmptyDomainError("coral_terms: empty index set");
  if (gt.entries.size() != queries.size()) {
    throw DimensionError("coral_terms: pseudo ground truth does not cover the person mask");
  }
  for (size_t i = 0; i < queries.size(); ++i) {
    if (!(gt.entries[i].query == queries[i])) {
      throw DimensionError("coral_terms: pseudo ground truth is not in person-mask order");
    }
  }

  std::vector<Point2> key_locs;
  for (const auto& k : keys) key_locs.push_back(location_in_units(k, layout.panel, options.units));
  CorrespondenceSet gt_units = gt;
  for (auto& e : gt_units.entries) e.match = match_in_units(e.match, layout.panel, options.units);

  const int layers = static_cast<int>(fwd.blocks.size());
  const int n_tokens = layout.total_tokens;
  const double inv_layers = 1.0 / layers;
  const bool grad_corr = want_grad && corr_scale != 0.0;
  const bool grad_ent = want_grad && ent_scale != 0.0;

  CoralTerms out;
  out.reliable = gt.reliable_count();
  out.corr_skipped = out.reliable == 0;
  out.d_maps.resize(layers);

  std::vector<double> row(n_tokens);
  std::vector<double> sub(keys.size());
  std::vector<double> d_row(n_tokens);
  std::vector<double> d_sub(keys.size());
  for (int l = 0; l < layers; ++l) {
    const auto& heads = fwd.blocks[l].attn.map.heads;
    const double inv_heads = 1.0 / heads.size();
    if (grad_corr || grad_ent) {
      out.d_maps[l].assign(heads.size(), Eigen::MatrixXd::Zero(n_tokens, n_tokens));
    }

    std::vector<Point2> soft(queries.size());
    std::vector<std::vector<double>> sub_rows(queries.size());
    double ent_sum = 0.0;
    for (size_t i = 0; i < queries.size(); ++i) {
      const int q = layout.person_token(queries[i]);
      for (int j = 0; j < n_tokens; ++j) {
        double s = 0.0;
        for (const auto& a : heads) s += a(q, j);
        row[j] = s * inv_heads;
      }
      ent_sum += row_entropy(row);
      if (grad_ent) {
        std::fill(d_row.begin(), d_row.end(), 0.0);
        row_entropy_backward(row, ent_scale * inv_layers / queries.size(), d_row);
        for (size_t h = 0; h < heads.size(); ++h) {
          for (int j = 0; j < n_tokens; ++j) out.d_maps[l][h](q, j) += d_row[j] * inv_heads;
        }
      }
      for (size_t j = 0; j < keys.size(); ++j) sub[j] = row[layout.garment_token(keys[j])];
      soft[i] = soft_argmax_row(sub, key_locs, options.renormalize);
      sub_rows[i] = sub;
    }
    const CorrLoss corr = corr_loss(soft, gt_units);
    if (grad_corr && !corr.skipped) {
      for (size_t i = 0; i < queries.size(); ++i) {
        if (!gt.entries[i].reliable) continue;
        std::fill(d_sub.begin(), d_sub.end(), 0.0);
        const Point2 d_coord{corr.grad[i].y * corr_scale * inv_layers,
                             corr.grad[i].x * corr_scale * inv_layers};
        soft_argmax_row_backward(sub_rows[i], key_locs, options.renormalize, d_coord, d_sub);
        const int q = layout.person_token(queries[i]);
        for (size_t h = 0; h < heads.size(); ++h) {
          for (size_t j = 0; j < keys.size(); ++j) {
            out.d_maps[l][h](q, layout.garment_token(keys[j])) += d_sub[j] * inv_heads;
          }
        }
      }
    }
    LayerLoss ll{corr.value, ent_sum / queries.size(), std::nullopt};
    out.corr += ll.corr * inv_layers;
    out.ent += ll.ent * inv_layers;
    out.layers.push_back(ll);
  }
  if (!grad_corr && !grad_ent) out.d_maps.clear();
  return out;
}

nlohmann::json TrainerOptions::to_json() const {
  return {{"lambda_corr", weights.lambda_corr},
          {"lambda_ent", weights.lambda_ent},
          {"lambda_repa", weights.lambda_repa},
          {"coral_enabled", coral_enabled},
          {"repa_enabled", repa_enabled},
          {"renormalize", coral.renormalize},
          {"units", corr_units_name(coral.units)},
          {"optimizer", optimizer == OptimizerKind::kAdam ? "adam" : "sgd"},
          {"learning_rate", learning_rate},
          {"beta1", beta1},
          {"beta2", beta2},
          {"epsilon", epsilon},
          {"repa_width", repa_width}};
}

TrainerOptions TrainerOptions::from_json(const nlohmann::json& j) {
  try {
    TrainerOptions o;
    o.weights = {j.at("lambda_corr").get<double>(), j.at("lambda_ent").get<double>(),
                 j.at("lambda_repa").get<double>()};
    o.coral_enabled = j.at("coral_enabled").get<bool>();
    o.repa_enabled = j.at("repa_enabled").get<bool>();
    o.coral.renormalize = j.at("renormalize").get<bool>();
    o.coral.units = parse_corr_units(j.at("units").get<std::string>());
    const auto opt = j.at("optimizer").get<std::string>();
    if (opt != "adam" && opt != "sgd") throw ConfigError("unknown optimizer '" + opt + "'");
    o.optimizer = opt == "adam" ? OptimizerKind::kAdam : OptimizerKind::kSgd;
    o.learning_rate = j.at("learning_rate").get<double>();
    o.beta1 = j.at("beta1").get<double>();
    o.beta2 = j.at("beta2").get<double>();
    o.epsilon = j.at("epsilon").get<double>();
    o.repa_width = j.at("repa_width").get<int>();
    o.threads = j.value("threads", 1);
    o.weights.validate();
    return o;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed trainer options: ") + e.what());
  }
}

struct Trainer::SampleOutput {
  double velocity = 0.0;
  CoralTerms coral;
  bool has_coral = false;
  std::optional<double> repa;
  std::vector<double> repa_layers;
  double total = 0.0;
  ModelParams grads;
  std::vector<RepaHead> repa_grads;
};

Trainer::Trainer(ModelConfig config, TrainerOptions options)
    : model_(config), options_(options) {
  options_.weights.validate();
  if (!(options_.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (options_.repa_enabled) {
    Rng rng(splitmix64(config.seed ^ 0x5245504148454144ULL));
    for (int l = 0; l < config.layers; ++l) {
      repa_heads_.push_back(
          RepaHead::random(config.model_dim, options_.repa_width, config.channels, rng));
    }
  }
  const size_t n = flat_parameters().size();
  moment1_.assign(n, 0.0);
  moment2_.assign(n, 0.0);
}

Trainer::SampleOutput Trainer::run_sample(const TrainingExample& ex, bool want_grad) const {
  const SyntheticTask& task = *ex.task;
  const auto& w = options_.weights;
  SampleOutput out;

  const DiptychInputs inputs =
      build_diptych(task.garment, task.person, task.edit_mask, ex.t, ex.noise);
  const ForwardResult fwd = model_.forward(inputs, task.pose, ex.t);

  const Eigen::MatrixXd target =
      canvas_rows(ex.noise) - canvas_rows(join_panels(task.garment, task.person));
  const Eigen::MatrixXd diff = fwd.velocity - target;
  out.velocity = diff.squaredNorm() / static_cast<double>(diff.size());

  ForwardGrads up;
  if (want_grad) up.d_velocity = diff * (2.0 / static_cast<double>(diff.size()));

  if (options_.coral_enabled && ex.pseudo_gt) {
    try {
      out.coral = coral_terms(fwd, task.person_mask, task.garment_mask, *ex.pseudo_gt,
                              options_.coral, w.lambda_corr, w.lambda_ent, want_grad);
    } catch (const InvalidDistributionError& e) {
      throw NumericalError(std::string("attention row is not a distribution (") + e.what() +
                           "): " + describe_row(fwd, task.person_mask));
    } catch (const DegenerateError& e) {
      throw NumericalError(std::string(e.what()) + ": " + describe_row(fwd, task.person_mask));
    }
    out.has_coral = true;
    if (want_grad) up.d_maps = std::move(out.coral.d_maps);
  }

  if (options_.repa_enabled) {
    const Eigen::MatrixXd desc =
        concat_descriptor_patches(task.garment_descriptors, task.person_descriptors);
    const int layers = static_cast<int>(fwd.blocks.size());
    if (want_grad) {
      out.repa_grads.reserve(repa_heads_.size());
      for (const auto& h : repa_heads_) out.repa_grads.push_back(RepaHead::zeros_like(h));
      up.d_hidden.resize(layers);
    }
    double sum = 0.0;
    for (int l = 0; l < layers; ++l) {
      const auto cache = repa_heads_[l].forward(fwd.canvas_hidden(l));
      const RepaAlignment al = repa_alignment(cache.output, desc);
      out.repa_layers.push_back(al.value);
      sum += al.value;
      if (want_grad) {
        up.d_hidden[l] = repa_heads_[l].backward(
            cache, al.d_projected * (w.lambda_repa / layers), out.repa_grads[l]);
      }
    }
    out.repa = sum / layers;
  }

  out.total = total_loss(out.velocity, out.has_coral ? coral_loss(out.coral.corr, out.coral.ent, w) : 0.0);
  if (out.repa) out.total += w.lambda_repa * *out.repa;
  if (!std::isfinite(out.total)) {
    throw NumericalError("non-finite loss (velocity " + std::to_string(out.velocity) + "): " +
                         describe_row(fwd, task.person_mask));
  }

  if (want_grad) {
    out.grads = ModelParams::zeros_like(model_.params());
    model_.backward(fwd, up, out.grads);
  }
  return out;
}

LossReport Trainer::evaluate(std::span<const TrainingExample> batch,
                             std::vector<double>* gradient) const {
  if (batch.empty()) throw EmptyDomainError("empty training batch");
  const bool want_grad = gradient != nullptr;
  std::vector<SampleOutput> samples(batch.size());
  parallel_for(static_cast<int>(batch.size()), options_.threads,
               [&](int i) { samples[i] = run_sample(batch[i], want_grad); });

  const double inv = 1.0 / batch.size();
  const int layers = model_.config().layers;
  LossReport r;
  r.step = step_ + 1;
  r.layers.assign(layers, LayerLoss{});
  bool any_coral = false;
  bool all_skipped = true;
  double repa_sum = 0.0;
  for (const auto& s : samples) {
    r.velocity += s.velocity * inv;
    r.total += s.total * inv;
    if (s.has_coral) {
      any_coral = true;
      r.corr += s.coral.corr * inv;
      r.ent += s.coral.ent * inv;
      r.reliable_queries += s.coral.reliable;
      all_skipped = all_skipped && s.coral.corr_skipped;
      for (int l = 0; l < layers; ++l) {
        r.layers[l].corr += s.coral.layers[l].corr * inv;
        r.layers[l].ent += s.coral.layers[l].ent * inv;
      }
    }
    if (s.repa) {
      repa_sum += *s.repa * inv;
      for (int l = 0; l < layers; ++l) {
        r.layers[l].repa = r.layers[l].repa.value_or(0.0) + s.repa_layers[l] * inv;
      }
    }
  }
  r.corr_skipped = any_coral && all_skipped;
  if (options_.repa_enabled) r.repa = repa_sum;
  // exact decomposition for the logged report
  r.total = r.recomputed_total(any_coral ? options_.weights
                                         : LossWeights{0.0, 0.0, options_.weights.lambda_repa});

  if (want_grad) {
    gradient->assign(flat_parameters().size(), 0.0);
    for (const auto& s : samples) {
      size_t pos = 0;
      ModelParams::visit(s.grads, [&](const std::string&, const auto& m) {
        for (Eigen::Index k = 0; k < m.size(); ++k) (*gradient)[pos + k] += m.data()[k] * inv;
        pos += m.size();
      });
      for (const auto& h : s.repa_grads) {
        for (const Eigen::MatrixXd* m : {&h.w1, &h.w2, &h.w3}) {
          for (Eigen::Index k = 0; k < m->size(); ++k) (*gradient)[pos + k] += m->data()[k] * inv;
          pos += m->size();
        }
        for (const Eigen::VectorXd* v : {&h.b1, &h.b2, &h.b3}) {
          for (Eigen::Index k = 0; k < v->size(); ++k) (*gradient)[pos + k] += (*v)[k] * inv;
          pos += v->size();
        }
      }
    }
  }
  return r;
}

LossReport Trainer::train_step(std::span<const TrainingExample> batch) {
  std::vector<double> grad;
  LossReport report = evaluate(batch, &grad);
  for (size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericalError("non-finite gradient at parameter index " + std::to_string(i));
    }
  }
  std::vector<double> theta = flat_parameters();
  ++step_;
  if (options_.optimizer == OptimizerKind::kSgd) {
    for (size_t i = 0; i < theta.size(); ++i) theta[i] -= options_.learning_rate * grad[i];
  } else {
    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (size_t i = 0; i < theta.size(); ++i) {
      moment1_[i] = b1 * moment1_[i] + (1.0 - b1) * grad[i];
      moment2_[i] = b2 * moment2_[i] + (1.0 - b2) * grad[i] * grad[i];
      theta[i] -= options_.learning_rate * (moment1_[i] / c1) /
                  (std::sqrt(moment2_[i] / c2) + options_.epsilon);
    }
  }
  set_flat_parameters(theta);
  report.step = step_;
  return report;
}

std::vector<double> Trainer::flat_parameters() const {
  std::vector<double> out = model_.params().flatten();
  for (const auto& h : repa_heads_) {
    for (const Eigen::MatrixXd* m : {&h.w1, &h.w2, &h.w3}) out.insert(out.end(), m->data(), m->data() + m->size());
    for (const Eigen::VectorXd* v : {&h.b1, &h.b2, &h.b3}) out.insert(out.end(), v->data(), v->data() + v->size());
  }
  return out;
}

void Trainer::set_flat_parameters(std::span<const double> values) {
  const long n_model = model_.params().parameter_count();
  if (values.size() != flat_parameters().size()) {
    throw DimensionError("set_flat_parameters: size mismatch");
  }
  model_.params().unflatten(values.subspan(0, n_model));
  size_t pos = n_model;
  for (auto& h : repa_heads_) {
    for (Eigen::MatrixXd* m : {&h.w1, &h.w2, &h.w3}) {
      std::copy(values.begin() + pos, values.begin() + pos + m->size(), m->data());
      pos += m->size();
    }
    for (Eigen::VectorXd* v : {&h.b1, &h.b2, &h.b3}) {
      std::copy(values.begin() + pos, values.begin() + pos + v->size(), v->data());
      pos += v->size();
    }
  }
}

std::vector<ParameterBlock> Trainer::parameter_blocks() const {
  std::vector<ParameterBlock> blocks;
  long pos = 0;
  ModelParams::visit(model_.params(), [&](const std::string& name, const auto& m) {
    blocks.push_back({name, pos, static_cast<long>(m.size())});
    pos += m.size();
  });
  for (size_t l = 0; l < repa_heads_.size(); ++l) {
    const auto& h = repa_heads_[l];
    const std::string pre = "repa" + std::to_string(l) + ".";
    const std::pair<const char*, long> parts[] = {{"w1", h.w1.size()}, {"w2", h.w2.size()},
                                                  {"w3", h.w3.size()}, {"b1", h.b1.size()},
                                                  {"b2", h.b2.size()}, {"b3", h.b3.size()}};
    for (const auto& [name, size] : parts) {
      blocks.push_back({pre + name, pos, size});
      pos += size;
    }
  }
  return blocks;
}

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'R', 'C', 'K'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

void put_floats(std::vector<uint8_t>& out, const std::vector<double>& values) {
  for (double v : values) put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
}

std::vector<double> get_floats(const std::vector<uint8_t>& bytes, size_t& pos, size_t count) {
  if (pos + 4 * count > bytes.size()) throw FormatError("checkpoint truncated");
  std::vector<double> out(count);
  for (size_t i = 0; i < count; ++i) {
    out[i] = std::bit_cast<float>(get_u32(bytes.data() + pos));
    pos += 4;
  }
  return out;
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  const std::vector<double> theta = flat_parameters();
  const nlohmann::json header = {{"model", model_.config().to_json()},
                                 {"options", options_.to_json()},
                                 {"step", step_},
                                 {"parameter_count", theta.size()},
                                 {"optimizer_state", true}};
  const std::string text = header.dump();
  std::vector<uint8_t> bytes(kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(bytes, kCheckpointVersion);
  put_u32(bytes, static_cast<uint32_t>(text.size()));
  bytes.insert(bytes.end(), text.begin(), text.end());
  put_floats(bytes, theta);
  put_floats(bytes, moment1_);
  put_floats(bytes, moment2_);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Trainer Trainer::load_checkpoint(const std::filesystem::path& path,
                                 const TrainerOptions* override_options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("not a checkpoint: " + path.string());
  }
  if (get_u32(bytes.data() + 4) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const uint32_t len = get_u32(bytes.data() + 8);
  if (12 + size_t(len) > bytes.size()) throw FormatError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  const ModelConfig config = ModelConfig::from_json(header.at("model"));
  const TrainerOptions options =
      override_options ? *override_options : TrainerOptions::from_json(header.at("options"));
  Trainer trainer(config, options);
  const size_t count = header.at("parameter_count").get<size_t>();
  if (count != trainer.flat_parameters().size()) {
    throw FormatError("checkpoint parameter count does not match its configuration");
  }
  size_t pos = 12 + len;
  trainer.set_flat_parameters(get_floats(bytes, pos, count));
  if (header.value("optimizer_state", false)) {
    trainer.moment1_ = get_floats(bytes, pos, count);
    trainer.moment2_ = get_floats(bytes, pos, count);
  }
  if (pos != bytes.size()) throw FormatError("checkpoint has trailing bytes");
  trainer.step_ = header.at("step").get<long>();
  return trainer;
}

}  // namespace coral
