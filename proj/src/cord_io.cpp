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

#include "coral/cord_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "coral/errors.hpp"

namespace coral {

namespace {

constexpr size_t kHeaderSize = 17;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

}  // namespace

std::vector<uint8_t> encode_cord(const DescriptorGrid& grid) {
  std::vector<uint8_t> out;
  out.reserve(kHeaderSize + grid.data().size() * 4);
  out.insert(out.end(), {'C', 'O', 'R', 'D', kCordVersion});
  put_u32(out, static_cast<uint32_t>(grid.height()));
  put_u32(out, static_cast<uint32_t>(grid.width()));
  put_u32(out, static_cast<uint32_t>(grid.channels()));
  for (double v : grid.data()) put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
  return out;
}

DescriptorGrid decode_cord(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < kHeaderSize || std::memcmp(bytes.data(), "CORD", 4) != 0) {
    throw FormatError("not a CORD container");
  }
  if (bytes[4] != kCordVersion) {
    throw FormatError("unsupported CORD version " + std::to_string(bytes[4]));
  }
  const uint32_t h = get_u32(bytes.data() + 5);
  const uint32_t w = get_u32(bytes.data() + 9);
  const uint32_t c = get_u32(bytes.data() + 13);
  if (h == 0 || w == 0 || c == 0) throw FormatError("CORD grid with zero extent");
  const uint64_t count = uint64_t(h) * w * c;
  if (bytes.size() != kHeaderSize + count * 4) {
    throw FormatError("CORD payload size mismatch: " + std::to_string(bytes.size()) +
                      " bytes for " + std::to_string(h) + "x" + std::to_string(w) + "x" +
                      std::to_string(c));
  }
  std::vector<double> data(count);
  for (uint64_t i = 0; i < count; ++i) {
    const float f = std::bit_cast<float>(get_u32(bytes.data() + kHeaderSize + 4 * i));
    if (!std::isfinite(f)) throw FormatError("CORD payload holds a non-finite value");
    data[i] = f;
  }
  return DescriptorGrid(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c),
                        std::move(data));
}

void write_cord(const std::filesystem::path& path, const DescriptorGrid& grid) {
  const auto bytes = encode_cord(grid);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

DescriptorGrid read_cord(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_cord(bytes);
}

DescriptorGrid mask_to_grid(const BinaryMask& mask) {
  DescriptorGrid g(mask.height(), mask.width(), 1);
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) g(y, x, 0) = mask(y, x) ? 1.0 : 0.0;
  }
  return g;
}

BinaryMask grid_to_mask(const DescriptorGrid& grid) {
  if (grid.channels() != 1) throw FormatError("mask container must have one channel");
  BinaryMask mask(grid.height(), grid.width());
  for (int y = 0; y < grid.height(); ++y) {
    for (int x = 0; x < grid.width(); ++x) {
      const double v = grid(y, x, 0);
      if (v != 0.0 && v != 1.0) throw FormatError("mask values must be 0.0 or 1.0");
      mask.set(y, x, v == 1.0);
    }
  }
  return mask;
}

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  write_cord(path, mask_to_grid(mask));
}

BinaryMask read_mask(const std::filesystem::path& path) { return grid_to_mask(read_cord(path)); }

}  // namespace coral
