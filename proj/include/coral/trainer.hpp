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
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "coral/losses.hpp"
#include "coral/model.hpp"
#include "coral/synthetic.hpp"

namespace coral {

// Coordinates used by the soft argmax and L_corr: 2D garment coordinates, or
// the garment token's linear index along a single axis.
enum class CorrUnits { kCoords2d, kLinearIndex };
enum class OptimizerKind { kAdam, kSgd };

const char* corr_units_name(CorrUnits units);
CorrUnits parse_corr_units(const std::string& name);

struct CoralOptions {
  bool renormalize = true;
  CorrUnits units = CorrUnits::kCoords2d;
};

// Correspondence and entropy terms of one forward pass, averaged over
// layers, plus their gradient w.r.t. each head's attention weights.
struct CoralTerms {
  double corr = 0.0;
  double ent = 0.0;
  int reliable = 0;
  bool corr_skipped = false;
  std::vector<LayerLoss> layers;
  std::vector<std::vector<Eigen::MatrixXd>> d_maps;  // [layer][head]
};

// corr_scale / ent_scale multiply the respective gradients (typically the
// loss weights). `gt` must list the person-mask queries in row-major order.
CoralTerms coral_terms(const ForwardResult& fwd, const BinaryMask& person_mask,
                       const BinaryMask& garment_mask, const CorrespondenceSet& gt,
                       const CoralOptions& options, double corr_scale = 0.0,
                       double ent_scale = 0.0, bool want_grad = false);

struct TrainingExample {
  const SyntheticTask* task = nullptr;
  const CorrespondenceSet* pseudo_gt = nullptr;
  double t = 0.5;
  LatentGrid noise;  // canvas shaped, h x 2w x c
};

struct TrainerOptions {
  LossWeights weights;
  bool coral_enabled = true;   // false: velocity-only objective, no attention terms
  bool repa_enabled = false;   // feature-alignment baseline
  CoralOptions coral;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int repa_width = 64;
  int threads = 1;

  nlohmann::json to_json() const;
  static TrainerOptions from_json(const nlohmann::json& j);
};

class Trainer {
 public:
  Trainer(ModelConfig config, TrainerOptions options);

  const DiptychModel& model() const { return model_; }
  const TrainerOptions& options() const { return options_; }
  long step() const { return step_; }

  // Loss and gradient of the mean objective over `batch`, without updating.
  LossReport evaluate(std::span<const TrainingExample> batch, std::vector<double>* gradient = nullptr) const;
  // One optimizer step; the report carries the pre-update losses.
  LossReport train_step(std::span<const TrainingExample> batch);

  // Model parameters followed by projection-head parameters.
  std::vector<double> flat_parameters() const;
  void set_flat_parameters(std::span<const double> values);
  std::vector<ParameterBlock> parameter_blocks() const;

  // Binary checkpoint, see README for the layout.
  void save_checkpoint(const std::filesystem::path& path) const;
  static Trainer load_checkpoint(const std::filesystem::path& path, const TrainerOptions* override_options = nullptr);

 private:
  struct SampleOutput;
  SampleOutput run_sample(const TrainingExample& example, bool want_grad) const;

  DiptychModel model_;
  TrainerOptions options_;
  std::vector<RepaHead> repa_heads_;
  std::vector<double> moment1_;
  std::vector<double> moment2_;
  long step_ = 0;
};

inline constexpr uint32_t kCheckpointVersion = 1;

// Parallel loop capped by CORAL_THREADS (and `requested`); results must be
// written to per-index slots so the outcome does not depend on scheduling.
void parallel_for(int count, int requested, const std::function<void(int)>& body);
int thread_cap(int requested);

}  // namespace coral
