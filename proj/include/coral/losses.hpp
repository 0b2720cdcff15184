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

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "coral/grid.hpp"
#include "coral/matching.hpp"
#include "coral/rng.hpp"

namespace coral {

struct LossWeights {
  double lambda_corr = 0.01;
  double lambda_ent = 0.1;
  double lambda_repa = 0.1;

  void validate() const;
};

struct LayerLoss {
  double corr = 0.0;
  double ent = 0.0;
  std::optional<double> repa;
};

// One training step's objectives. total = velocity + lambda_corr * corr +
// lambda_ent * ent (+ lambda_repa * repa when present).
struct LossReport {
  long step = 0;
  double velocity = 0.0;
  double corr = 0.0;
  double ent = 0.0;
  std::optional<double> repa;
  double total = 0.0;
  int reliable_queries = 0;
  bool corr_skipped = false;
  std::vector<LayerLoss> layers;

  double recomputed_total(const LossWeights& w) const;
  nlohmann::json to_json() const;
  static LossReport from_json(const nlohmann::json& j);
};

LatentGrid interpolate_latent(const LatentGrid& z0, const LatentGrid& noise, double t);

// Mean squared error against the rectified-flow target (noise - z0).
double velocity_loss(const LatentGrid& predicted, const LatentGrid& z0, const LatentGrid& noise);

struct CorrLoss {
  double value = 0.0;
  int count = 0;
  bool skipped = false;
  // d value / d soft_matches[i]; zero for unreliable entries.
  std::vector<Point2> grad;
};

// Mean squared L2 distance between soft matches and reliable pseudo ground
// truth. soft_matches[i] pairs with gt.entries[i]. With no reliable entries
// the term is skipped and contributes zero.
CorrLoss corr_loss(std::span<const Point2> soft_matches, const CorrespondenceSet& gt);

// Mean row entropy over person-query attention rows.
double entropy_loss(const std::vector<std::vector<double>>& rows);
double entropy_loss(const Eigen::MatrixXd& rows);

double coral_loss(double corr, double ent, const LossWeights& weights);
double total_loss(double velocity, double coral);

// Three-stage projection head (affine, SiLU, affine, SiLU, affine) mapping
// hidden states to descriptor space.
struct RepaHead {
  Eigen::MatrixXd w1, w2, w3;
  Eigen::VectorXd b1, b2, b3;

  static RepaHead random(int hidden_dim, int width, int descriptor_dim, Rng& rng);
  static RepaHead zeros_like(const RepaHead& other);

  struct Cache {
    Eigen::MatrixXd input, u1, g1, u2, g2, output;
  };
  Cache forward(const Eigen::MatrixXd& hidden) const;
  // Accumulates parameter gradients into `grads`, returns dL/d(hidden).
  Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& d_output,
                           RepaHead& grads) const;
};

struct RepaAlignment {
  double value = 0.0;
  Eigen::MatrixXd d_projected;
};

// Negative mean cosine similarity between matching rows.
RepaAlignment repa_alignment(const Eigen::MatrixXd& projected, const Eigen::MatrixXd& targets);

// Feature-alignment loss averaged over layers; hidden[l] rows are patches
// ordered like `descriptors` (garment panel then person panel).
double repa_loss(const std::vector<Eigen::MatrixXd>& hidden, const Eigen::MatrixXd& descriptors,
                 const std::vector<RepaHead>& heads);

// Descriptor patches [garment | person] in canvas token order.
Eigen::MatrixXd concat_descriptor_patches(const DescriptorGrid& garment, const DescriptorGrid& person);

struct GradientCheckReport {
  std::vector<double> relative_errors;
  std::vector<std::pair<std::string, double>> block_max;
  double max_relative_error = 0.0;
  long worst_index = -1;
  bool finite = true;
  bool passed = false;
};

struct ParameterBlock {
  std::string name;
  long offset = 0;
  long size = 0;
};

// Central-difference check of `analytic` against `loss`. Relative error is
// |a - n| / max(|a|, |n|, abs_floor). `indices`, when non-empty, restricts
// the check to those coordinates.
GradientCheckReport gradient_check(const std::function<double(std::span<const double>)>& loss,
                                   std::span<const double> parameters,
                                   std::span<const double> analytic, double step = 1e-5,
                                   double tolerance = 1e-4, double abs_floor = 1e-6,
                                   std::span<const long> indices = {},
                                   std::span<const ParameterBlock> blocks = {});

}  // namespace coral
