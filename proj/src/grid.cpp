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

#include "coral/grid.hpp"

#include <cmath>
#include <string>

#include "coral/errors.hpp"

namespace coral {

double squared_distance(const Point2& a, const Point2& b) {
  const double dy = a.y - b.y;
  const double dx = a.x - b.x;
  return dy * dy + dx * dx;
}

double distance(const Point2& a, const Point2& b) { return std::sqrt(squared_distance(a, b)); }

Coord round_to_coord(const Point2& p) {
  return {static_cast<int>(std::lround(p.y)), static_cast<int>(std::lround(p.x))};
}

DescriptorGrid::DescriptorGrid(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  if (height <= 0 || width <= 0 || channels <= 0) {
    throw DimensionError("descriptor grid needs positive extents, got " + std::to_string(height) +
                         "x" + std::to_string(width) + "x" + std::to_string(channels));
  }
  data_.assign(static_cast<size_t>(height) * width * channels, fill);
}

DescriptorGrid::DescriptorGrid(int height, int width, int channels, std::vector<double> data)
    : DescriptorGrid(height, width, channels) {
  if (data.size() != data_.size()) {
    throw DimensionError("descriptor grid payload has " + std::to_string(data.size()) +
                         " values, expected " + std::to_string(data_.size()));
  }
  data_ = std::move(data);
}

bool DescriptorGrid::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

BinaryMask::BinaryMask(int height, int width, bool fill) : height_(height), width_(width) {
  if (height <= 0 || width <= 0) {
    throw DimensionError("mask needs positive extents");
  }
  bits_.assign(static_cast<size_t>(height) * width, fill ? 1 : 0);
}

BinaryMask::BinaryMask(int height, int width, std::vector<uint8_t> bits)
    : BinaryMask(height, width) {
  if (bits.size() != bits_.size()) throw DimensionError("mask payload size mismatch");
  for (auto& b : bits) b = b ? 1 : 0;
  bits_ = std::move(bits);
}

BinaryMask BinaryMask::from_rows(const std::vector<std::vector<int>>& rows) {
  if (rows.empty() || rows.front().empty()) throw DimensionError("empty mask literal");
  BinaryMask mask(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
  for (int y = 0; y < mask.height(); ++y) {
    if (static_cast<int>(rows[y].size()) != mask.width()) {
      throw DimensionError("ragged mask literal");
    }
    for (int x = 0; x < mask.width(); ++x) mask.set(y, x, rows[y][x] != 0);
  }
  return mask;
}

int BinaryMask::count() const {
  int n = 0;
  for (auto b : bits_) n += b;
  return n;
}

std::vector<Coord> BinaryMask::locations() const {
  std::vector<Coord> out;
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      if ((*this)(y, x)) out.push_back({y, x});
    }
  }
  return out;
}

bool BinaryMask::subset_of(const BinaryMask& other) const {
  if (shape() != other.shape()) return false;
  for (size_t i = 0; i < bits_.size(); ++i) {
    if (bits_[i] && !other.bits_[i]) return false;
  }
  return true;
}

}  // namespace coral
