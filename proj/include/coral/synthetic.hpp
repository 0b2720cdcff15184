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
#include <string>
#include <vector>

#include <json.hpp>

#include "coral/grid.hpp"
#include "coral/matching.hpp"

namespace coral {

enum class WarpKind { kIdentity, kPermutation, kBlockShuffle, kSmoothWarp };

const char* warp_name(WarpKind kind);
WarpKind parse_warp(const std::string& name);

struct TaskSpec {
  uint64_t seed = 0;
  int height = 16;
  int width = 16;
  int channels = 4;
  WarpKind warp = WarpKind::kPermutation;
  double sigma = 0.0;    // descriptor noise level
  double density = 0.5;  // fraction of the panel covered by the garment region
  int block_size = 2;    // block-shuffle tile edge

  void validate() const;
};

// Diptych task with known person->garment correspondence. The garment
// region is a rectangle in each panel; the person region holds a spatial
// rearrangement of the garment region's latents.
struct SyntheticTask {
  TaskSpec spec;
  LatentGrid garment;
  LatentGrid person;
  LatentGrid pose;
  DescriptorGrid garment_descriptors;
  DescriptorGrid person_descriptors;
  BinaryMask garment_mask;  // m_g
  BinaryMask person_mask;   // m_p
  BinaryMask edit_mask;     // m_e, contains m_p
  CorrespondenceSet truth;           // person -> garment, row-major person order
  std::vector<Point2> subcell_truth;  // continuous targets before rounding

  GridShape panel() const { return garment.shape(); }
};

SyntheticTask generate_task(const TaskSpec& spec);

// `count` tasks whose seeds derive from `spec.seed`.
std::vector<SyntheticTask> generate_task_set(const TaskSpec& spec, int count);

// Per-task analytic chance rate of PCK(alpha) for a uniformly random garment
// prediction inside m_g, averaged over reliable queries of `gt`.
double chance_pck(const BinaryMask& garment_mask, const CorrespondenceSet& gt, double alpha);

inline constexpr int kTaskSchemaVersion = 1;

nlohmann::json task_manifest(const SyntheticTask& task);
void validate_manifest(const nlohmann::json& manifest);
void export_task(const SyntheticTask& task, const std::filesystem::path& directory);
SyntheticTask import_task(const std::filesystem::path& directory);

}  // namespace coral
