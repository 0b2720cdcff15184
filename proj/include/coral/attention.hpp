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
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "coral/grid.hpp"
#include "coral/matching.hpp"
#include "coral/rng.hpp"

namespace coral {

enum class SegmentKind { kContext, kGarment, kPerson, kPose };

const char* segment_name(SegmentKind kind);

struct Segment {
  SegmentKind kind;
  int offset = 0;
  int count = 0;
  std::optional<GridShape> grid;
};

// Where the garment and person panels live inside a token sequence.
struct PanelLayout {
  GridShape panel;
  int garment_offset = 0;
  int person_offset = 0;
  int total_tokens = 0;

  int garment_token(const Coord& c) const { return garment_offset + panel.linear(c); }
  int person_token(const Coord& c) const { return person_offset + panel.linear(c); }
};

// Ordered [context | garment | person | pose] token layout. Rows of
// `embeddings` are tokens; `positions` holds each token's 2D rotary index.
struct TokenSequence {
  std::vector<Segment> segments;
  Eigen::MatrixXd embeddings;
  std::vector<Point2> positions;

  int total_tokens() const { return static_cast<int>(embeddings.rows()); }
  const Segment* find(SegmentKind kind) const;
  PanelLayout panel_layout() const;
  // Throws ConfigError if the segment order is wrong, counts do not add up,
  // or the pose segment does not reuse the person positions token for token.
  void validate() const;
};

// One rotation plane: a pair of adjacent channels rotated by
// position[axis] * frequency. Axis 0 is y, axis 1 is x.
struct RotaryPlane {
  int axis = 0;
  double frequency = 1.0;
};

// head_dim / 4 planes per axis with frequencies base^(-k / n).
std::vector<RotaryPlane> default_rotary_planes(int head_dim, double base = 100.0);

Eigen::MatrixXd apply_rope(const Eigen::MatrixXd& x, std::span<const Point2> positions,
                           std::span<const RotaryPlane> planes);
// Adjoint of apply_rope (rotation by the negated angle); used for gradients.
Eigen::MatrixXd apply_rope_transpose(const Eigen::MatrixXd& x, std::span<const Point2> positions,
                                     std::span<const RotaryPlane> planes);

struct AttentionLayer {
  int heads = 1;
  int head_dim = 4;
  Eigen::MatrixXd wq, wk, wv;  // model_dim x heads*head_dim
  Eigen::MatrixXd wo;          // heads*head_dim x model_dim
  Eigen::VectorXd bo;
  std::vector<RotaryPlane> rope;

  int model_dim() const { return static_cast<int>(wq.rows()); }
  static AttentionLayer random(int model_dim, int heads, int head_dim, double rope_base, Rng& rng);
};

// Post-softmax attention weights, one query x key matrix per head.
struct AttentionMap {
  std::vector<Eigen::MatrixXd> heads;

  int tokens() const { return heads.empty() ? 0 : static_cast<int>(heads.front().rows()); }
  Eigen::MatrixXd mean() const;
};

struct AttentionOutput {
  Eigen::MatrixXd outputs;
  AttentionMap map;
  // Saved activations for the backward pass.
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> q_rot, k_rot, v;
  Eigen::MatrixXd concat;
  std::vector<Point2> positions;
};

struct AttentionGrads {
  Eigen::MatrixXd wq, wk, wv, wo;
  Eigen::VectorXd bo;

  static AttentionGrads zeros_like(const AttentionLayer& layer);
};

AttentionOutput full_attention(const AttentionLayer& layer, const Eigen::MatrixXd& x,
                               std::span<const Point2> positions);
AttentionOutput full_attention(const AttentionLayer& layer, const TokenSequence& sequence);

// Accumulates parameter gradients into `grads` and returns dL/dx. `d_maps`,
// when given, adds a direct loss gradient on each head's attention weights.
Eigen::MatrixXd attention_backward(const AttentionLayer& layer, const AttentionOutput& fwd,
                                   const Eigen::MatrixXd& d_outputs,
                                   const std::vector<Eigen::MatrixXd>* d_maps,
                                   AttentionGrads& grads);

// Person-query x garment-key block of an attention map, read as a matching
// cost. residual[i] is row i's attention mass outside the garment key set.
struct SubAttention {
  CostMap cost;
  std::vector<double> residual;
};

enum class HeadReduce { kMean, kPerHead };

std::vector<SubAttention> extract_sub_attention(const AttentionMap& map, const PanelLayout& layout,
                                                const BinaryMask& person_mask,
                                                const BinaryMask& garment_mask,
                                                HeadReduce reduce = HeadReduce::kMean);
SubAttention extract_sub_attention(const Eigen::MatrixXd& weights, const PanelLayout& layout,
                                   const BinaryMask& person_mask, const BinaryMask& garment_mask);

CorrespondenceSet hard_correspondence(const SubAttention& sub);

// Attention-weighted mean garment coordinate per person query. With
// `renormalize` the row is first rescaled to unit mass over the garment keys.
std::vector<Point2> soft_correspondence(const SubAttention& sub, bool renormalize = true);

Point2 soft_argmax_row(std::span<const double> row, std::span<const Point2> locations,
                       bool renormalize = true);
// Accumulates d(coord)/d(row) . d_coord into d_row.
void soft_argmax_row_backward(std::span<const double> row, std::span<const Point2> locations,
                              bool renormalize, const Point2& d_coord, std::span<double> d_row);

// Shannon entropy (natural log, 0 log 0 = 0) of a probability row.
double row_entropy(std::span<const double> p);
// Accumulates d_h * dH/dp into d_p.
void row_entropy_backward(std::span<const double> p, double d_h, std::span<double> d_p);

void softmax_row(std::span<const double> logits, std::span<double> out);
void softmax_row_backward(std::span<const double> p, std::span<const double> d_p,
                          std::span<double> d_logits);

// Writes one CORD grid (tokens x tokens x 1) per head: <stem>_h<k>.cord.
void export_attention_map(const AttentionMap& map, const std::filesystem::path& directory,
                          const std::string& stem);

}  // namespace coral
