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

#include <compare>
#include <cstdint>
#include <span>
#include <vector>

namespace coral {

// Integer grid location, row-major (y, x).
struct Coord {
  int y = 0;
  int x = 0;
  friend auto operator<=>(const Coord&, const Coord&) = default;
};

// Real-valued 2D location in grid units, (y, x).
struct Point2 {
  double y = 0.0;
  double x = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

double distance(const Point2& a, const Point2& b);
double squared_distance(const Point2& a, const Point2& b);
inline Point2 to_point(const Coord& c) { return {double(c.y), double(c.x)}; }
Coord round_to_coord(const Point2& p);

struct GridShape {
  int height = 0;
  int width = 0;
  int size() const { return height * width; }
  bool contains(const Coord& c) const {
    return c.y >= 0 && c.y < height && c.x >= 0 && c.x < width;
  }
  int linear(const Coord& c) const { return c.y * width + c.x; }
  Coord coord(int linear_index) const { return {linear_index / width, linear_index % width}; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

// h x w grid of c-dimensional real vectors, stored row-major (h, w, c).
class DescriptorGrid {
 public:
  DescriptorGrid() = default;
  DescriptorGrid(int height, int width, int channels, double fill = 0.0);
  DescriptorGrid(int height, int width, int channels, std::vector<double> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  GridShape shape() const { return {height_, width_}; }

  std::span<double> at(int y, int x) {
    return {data_.data() + offset(y, x), static_cast<size_t>(channels_)};
  }
  std::span<const double> at(int y, int x) const {
    return {data_.data() + offset(y, x), static_cast<size_t>(channels_)};
  }
  std::span<double> at(const Coord& c) { return at(c.y, c.x); }
  std::span<const double> at(const Coord& c) const { return at(c.y, c.x); }
  double& operator()(int y, int x, int ch) { return data_[offset(y, x) + ch]; }
  double operator()(int y, int x, int ch) const { return data_[offset(y, x) + ch]; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool all_finite() const;
  friend bool operator==(const DescriptorGrid&, const DescriptorGrid&) = default;

 private:
  size_t offset(int y, int x) const {
    return (static_cast<size_t>(y) * width_ + x) * channels_;
  }
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

// Latents share the descriptor container.
using LatentGrid = DescriptorGrid;

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width, bool fill = false);
  BinaryMask(int height, int width, std::vector<uint8_t> bits);
  static BinaryMask from_rows(const std::vector<std::vector<int>>& rows);

  int height() const { return height_; }
  int width() const { return width_; }
  GridShape shape() const { return {height_, width_}; }

  bool operator()(int y, int x) const { return bits_[y * width_ + x] != 0; }
  bool operator()(const Coord& c) const { return (*this)(c.y, c.x); }
  void set(int y, int x, bool v) { bits_[y * width_ + x] = v ? 1 : 0; }
  void set(const Coord& c, bool v) { set(c.y, c.x, v); }

  int count() const;
  // Locations with bit set, row-major.
  std::vector<Coord> locations() const;
  bool subset_of(const BinaryMask& other) const;

  const std::vector<uint8_t>& bits() const { return bits_; }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<uint8_t> bits_;
};

}  // namespace coral
