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

#include "coral/grid.hpp"

namespace coral {

// CORD v1 container:
//   bytes 0-3   "CORD"
//   byte  4     version (1)
//   bytes 5-8   height, u32 little-endian
//   bytes 9-12  width
//   bytes 13-16 channels
//   then h*w*c float32 little-endian values, row-major (h, w, c).
// Masks are c = 1 grids holding 0.0 / 1.0.
inline constexpr uint8_t kCordVersion = 1;

std::vector<uint8_t> encode_cord(const DescriptorGrid& grid);
DescriptorGrid decode_cord(const std::vector<uint8_t>& bytes);

void write_cord(const std::filesystem::path& path, const DescriptorGrid& grid);
DescriptorGrid read_cord(const std::filesystem::path& path);

void write_mask(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_mask(const std::filesystem::path& path);

DescriptorGrid mask_to_grid(const BinaryMask& mask);
BinaryMask grid_to_mask(const DescriptorGrid& grid);

}  // namespace coral
