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
#include <optional>
#include <vector>

#include "coral/grid.hpp"

namespace coral {

// Pairwise score between a query index set and a key index set. Rows follow
// query_locations, columns follow key_locations; both lists are row-major.
struct CostMap {
  GridShape query_shape;
  GridShape key_shape;
  std::vector<Coord> query_locations;
  std::vector<Coord> key_locations;
  Eigen::MatrixXd values;

  int rows() const { return static_cast<int>(query_locations.size()); }
  int cols() const { return static_cast<int>(key_locations.size()); }
};

// Per-location 2D target coordinates in a target grid. Locations with
// valid == false carry no target.
struct FlowField {
  GridShape source_shape;
  GridShape target_shape;
  std::vector<Point2> targets;  // source_shape.size() entries, row-major
  BinaryMask valid;

  const Point2& target(const Coord& c) const { return targets[source_shape.linear(c)]; }
};

struct Correspondence {
  Coord query;
  Point2 match;
  bool reliable = true;
};

struct CorrespondenceSet {
  std::vector<Correspondence> entries;

  int reliable_count() const;
  std::optional<Correspondence> find(const Coord& query) const;
};

enum class FlowDirection { kPersonToGarment, kGarmentToPerson };

struct MaskedDescriptors {
  DescriptorGrid grid;
  std::vector<Coord> survivors;
};

MaskedDescriptors mask_descriptors(const DescriptorGrid& grid, const BinaryMask& mask);

CostMap cosine_cost(const DescriptorGrid& person, const DescriptorGrid& garment,
                    const BinaryMask& person_mask, const BinaryMask& garment_mask);

// Index of the largest entry; ties resolve to the lowest index.
int argmax_lowest(const double* values, int n, int stride = 1);

FlowField argmax_flow(const CostMap& cost, FlowDirection direction);

inline constexpr double kDefaultCycleGamma = 3.0;
inline constexpr double kDefaultPckAlpha = 16.0;

BinaryMask cycle_consistency_mask(const FlowField& forward, const FlowField& backward,
                                  double gamma = kDefaultCycleGamma);

CorrespondenceSet pseudo_gt(const CostMap& cost, const BinaryMask& reliability);

double pck(const CorrespondenceSet& pred, const CorrespondenceSet& gt,
           double alpha = kDefaultPckAlpha);

double pearson_r(std::span<const double> x, std::span<const double> y);

// Nearest-neighbour gather; invalid locations are zero, out-of-range targets
// clamp to the source edge.
DescriptorGrid warp_by_flow(const DescriptorGrid& source, const FlowField& flow);

// Flow built from a correspondence set (reliable entries only).
FlowField flow_from_correspondences(const CorrespondenceSet& set, GridShape source_shape,
                                    GridShape target_shape);

// Full pseudo ground-truth pipeline: mask, cosine cost, bidirectional argmax
// flow, cycle filter, argmax matches.
struct PseudoGroundTruth {
  CostMap cost;
  FlowField forward;
  FlowField backward;
  BinaryMask reliability;
  CorrespondenceSet matches;
};

PseudoGroundTruth build_pseudo_gt(const DescriptorGrid& person, const DescriptorGrid& garment,
                                  const BinaryMask& person_mask, const BinaryMask& garment_mask,
                                  double gamma = kDefaultCycleGamma);

}  // namespace coral
