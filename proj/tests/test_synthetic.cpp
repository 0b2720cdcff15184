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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "coral/cord_io.hpp"
#include "coral/errors.hpp"
#include "coral/synthetic.hpp"

namespace coral {
namespace {

namespace fs = std::filesystem;

TaskSpec spec_of(WarpKind warp, uint64_t seed, double sigma = 0.0, int n = 16) {
  TaskSpec s;
  s.seed = seed;
  s.height = s.width = n;
  s.warp = warp;
  s.sigma = sigma;
  return s;
}

const WarpKind kAllWarps[] = {WarpKind::kIdentity, WarpKind::kPermutation, WarpKind::kBlockShuffle,
                              WarpKind::kSmoothWarp};

PseudoGroundTruth pipeline(const SyntheticTask& t, double gamma = 3.0) {
  return build_pseudo_gt(t.person_descriptors, t.garment_descriptors, t.person_mask,
                         t.garment_mask, gamma);
}

TEST(GenerateTask, DeterministicUnderSeed) {
  for (auto w : kAllWarps) {
    const auto a = generate_task(spec_of(w, 42, 0.3));
    const auto b = generate_task(spec_of(w, 42, 0.3));
    EXPECT_EQ(a.garment, b.garment);
    EXPECT_EQ(a.person, b.person);
    EXPECT_EQ(a.person_descriptors, b.person_descriptors);
    EXPECT_EQ(a.person_mask, b.person_mask);
    const auto c = generate_task(spec_of(w, 43, 0.3));
    EXPECT_NE(a.garment, c.garment);
  }
}

TEST(GenerateTask, TruthIsBijectionOnMaskedCells) {
  for (auto w : kAllWarps) {
    for (uint64_t seed = 0; seed < 8; ++seed) {
      const auto t = generate_task(spec_of(w, seed));
      EXPECT_EQ(static_cast<int>(t.truth.entries.size()), t.person_mask.count());
      EXPECT_EQ(t.person_mask.count(), t.garment_mask.count());
      std::set<Coord> queries, matches;
      for (const auto& e : t.truth.entries) {
        EXPECT_TRUE(t.person_mask(e.query));
        const Coord m = round_to_coord(e.match);
        EXPECT_TRUE(t.garment_mask(m));
        queries.insert(e.query);
        matches.insert(m);
        // Person latent is the garment latent at the true match.
        for (int k = 0; k < t.garment.channels(); ++k) {
          EXPECT_EQ(t.person(e.query.y, e.query.x, k), t.garment(m.y, m.x, k));
        }
      }
      EXPECT_EQ(queries.size(), t.truth.entries.size());
      EXPECT_EQ(matches.size(), t.truth.entries.size());
      EXPECT_EQ(t.subcell_truth.size(), t.truth.entries.size());
    }
  }
}

TEST(GenerateTask, IdentityWarpIsIdentity) {
  const auto t = generate_task(spec_of(WarpKind::kIdentity, 5));
  for (const auto& e : t.truth.entries) EXPECT_EQ(e.match, to_point(e.query));
}

TEST(GenerateTask, MasksAndPose) {
  const auto t = generate_task(spec_of(WarpKind::kPermutation, 6));
  EXPECT_TRUE(t.person_mask.subset_of(t.edit_mask));
  EXPECT_GT(t.edit_mask.count(), t.person_mask.count());
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      EXPECT_EQ(t.pose(y, x, 0), t.person_mask(y, x) ? 1.0 : 0.0);
      EXPECT_EQ(t.pose(y, x, 1), t.edit_mask(y, x) ? 1.0 : 0.0);
    }
  }
}

TEST(GenerateTask, SmoothWarpKeepsSubcellTruth) {
  const auto t = generate_task(spec_of(WarpKind::kSmoothWarp, 7));
  double max_gap = 0.0;
  bool fractional = false;
  for (size_t i = 0; i < t.truth.entries.size(); ++i) {
    max_gap = std::max(max_gap, distance(t.truth.entries[i].match, t.subcell_truth[i]));
    fractional |= t.subcell_truth[i].x != std::round(t.subcell_truth[i].x);
  }
  EXPECT_TRUE(fractional);
  EXPECT_LT(max_gap, 3.0);  // optimal rounding stays local
}

TEST(GenerateTask, BlockShuffleMovesWholeTiles) {
  const auto t = generate_task(spec_of(WarpKind::kBlockShuffle, 8));
  // Cells sharing a 2x2 tile in the person rectangle keep their relative offset.
  const auto& e = t.truth.entries;
  const Coord p0 = e.front().query;
  for (size_t i = 0; i < e.size(); ++i) {
    const int ry = e[i].query.y - p0.y;
    const int rx = e[i].query.x - p0.x;
    if (ry % 2 == 1 || rx % 2 == 1) continue;
    const auto right = t.truth.find({e[i].query.y, e[i].query.x + 1});
    const auto down = t.truth.find({e[i].query.y + 1, e[i].query.x});
    if (right && down) {
      EXPECT_EQ(right->match.x - e[i].match.x, 1.0);
      EXPECT_EQ(down->match.y - e[i].match.y, 1.0);
    }
  }
}

TEST(GenerateTask, Errors) {
  auto s = spec_of(WarpKind::kPermutation, 1);
  s.sigma = -1;
  EXPECT_THROW(generate_task(s), RangeError);
  s = spec_of(WarpKind::kPermutation, 1);
  s.density = 0.0;
  EXPECT_THROW(generate_task(s), RangeError);
  s = spec_of(WarpKind::kPermutation, 1, 0.0, 0);
  EXPECT_THROW(generate_task(s), DimensionError);
  EXPECT_THROW(parse_warp("swirl"), ConfigError);
}

TEST(GenerateTask, PermutationRecoveredExactlyAtZeroNoise) {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    const auto t = generate_task(spec_of(WarpKind::kPermutation, seed));
    const auto p = pipeline(t);
    EXPECT_EQ(pck(p.matches, t.truth, 1.0), 1.0);
    EXPECT_EQ(p.matches.reliable_count(), t.person_mask.count());
  }
}

TEST(SyntheticProperty, ZeroNoisePipelineExactOnAllWarps) {
  for (auto w : kAllWarps) {
    for (const auto& t : generate_task_set(spec_of(w, 99), 8)) {
      const auto p = pipeline(t);
      EXPECT_EQ(p.reliability, t.person_mask);
      EXPECT_EQ(pck(p.matches, t.truth, 1.0), 1.0);
    }
  }
}

TEST(SyntheticProperty, ZeroNoiseDescriptorsAreNearestNeighbours) {
  const auto t = generate_task(spec_of(WarpKind::kSmoothWarp, 3));
  const auto cost = cosine_cost(t.person_descriptors, t.garment_descriptors, t.person_mask, t.garment_mask);
  for (int r = 0; r < cost.rows(); ++r) {
    const auto truth = t.truth.find(cost.query_locations[r]);
    ASSERT_TRUE(truth.has_value());
    int best = 0;
    for (int c = 1; c < cost.cols(); ++c) {
      if (cost.values(r, c) > cost.values(r, best)) best = c;
    }
    EXPECT_EQ(to_point(cost.key_locations[best]), truth->match);
  }
}

double paired_t(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double mean = 0.0;
  for (size_t i = 0; i < a.size(); ++i) mean += (a[i] - b[i]) / n;
  double var = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i] - mean;
    var += d * d / (n - 1);
  }
  if (var == 0.0) return mean == 0.0 ? 0.0 : std::copysign(INFINITY, mean);
  return mean / std::sqrt(var / n);
}

// Density must never rise significantly with sigma (one-sided paired t-test,
// 32 seeds, 95%), and must fall significantly over the whole range.
TEST(SyntheticProperty, ReliabilityDensityNonincreasingInNoise) {
  const double sigmas[] = {0.0, 0.5, 1.0, 2.0};
  const int seeds = 32;
  const double t_crit = 1.6955;  // t(0.95, 31)
  for (auto warp : {WarpKind::kPermutation, WarpKind::kSmoothWarp}) {
    std::vector<std::vector<double>> density(4, std::vector<double>(seeds));
    for (int s = 0; s < 4; ++s) {
      for (int i = 0; i < seeds; ++i) {
        const auto t = generate_task(spec_of(warp, 1000 + i, sigmas[s]));
        density[s][i] = static_cast<double>(pipeline(t).reliability.count()) / t.person_mask.count();
      }
    }
    for (int s = 0; s + 1 < 4; ++s) {
      EXPECT_LT(paired_t(density[s + 1], density[s]), t_crit)
          << warp_name(warp) << " sigma " << sigmas[s] << " -> " << sigmas[s + 1];
    }
    EXPECT_GT(paired_t(density[0], density[3]), t_crit);
    EXPECT_GT(paired_t(density[0], density[1]), t_crit);
  }
}

TEST(ChancePck, MatchesDiscAreaOverMask) {
  // Single reliable query in the middle of a full 9x9 garment mask.
  BinaryMask m(9, 9, true);
  CorrespondenceSet gt;
  gt.entries.push_back({{0, 0}, {4, 4}, true});
  EXPECT_DOUBLE_EQ(chance_pck(m, gt, 1.0), 1.0 / 81);
  EXPECT_DOUBLE_EQ(chance_pck(m, gt, 1.5), 9.0 / 81);
  EXPECT_DOUBLE_EQ(chance_pck(m, gt, 100.0), 1.0);
}

TEST(CordIo, LayoutByHand) {
  DescriptorGrid g(1, 2, 1, std::vector<double>{1.0, -2.5});
  const auto b = encode_cord(g);
  ASSERT_EQ(b.size(), 17u + 8u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "CORD");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 1);   // h
  EXPECT_EQ(b[9], 2);   // w
  EXPECT_EQ(b[13], 1);  // c
  // 1.0f = 0x3f800000 little-endian
  EXPECT_EQ(b[17], 0x00);
  EXPECT_EQ(b[20], 0x3f);
  EXPECT_EQ(decode_cord(b), g);
}

TEST(CordIo, RejectsMalformedInput) {
  auto b = encode_cord(DescriptorGrid(2, 2, 3, 0.5));
  auto bad_magic = b;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_cord(bad_magic), FormatError);
  auto bad_version = b;
  bad_version[4] = 2;
  EXPECT_THROW(decode_cord(bad_version), FormatError);
  auto truncated = b;
  truncated.pop_back();
  EXPECT_THROW(decode_cord(truncated), FormatError);
  auto trailing = b;
  trailing.push_back(0);
  EXPECT_THROW(decode_cord(trailing), FormatError);
  EXPECT_THROW(decode_cord(std::vector<uint8_t>{'C', 'O'}), FormatError);
}

TEST(CordIo, MaskValuesAreZeroOne) {
  const auto m = BinaryMask::from_rows({{1, 0, 1}});
  const auto g = mask_to_grid(m);
  EXPECT_EQ(g.channels(), 1);
  EXPECT_EQ(g.data(), (std::vector<double>{1, 0, 1}));
  EXPECT_EQ(grid_to_mask(g), m);
  EXPECT_THROW(grid_to_mask(DescriptorGrid(1, 1, 1, 0.5)), FormatError);
  EXPECT_THROW(grid_to_mask(DescriptorGrid(1, 1, 2, 1.0)), FormatError);
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(ExportTask, RoundTripIsLossless) {
  for (auto w : kAllWarps) {
    const auto t = generate_task(spec_of(w, 11, 0.7, 8));
    const auto dir = fresh_dir("coral_task_rt");
    export_task(t, dir);
    const auto back = import_task(dir);
    EXPECT_EQ(back.garment, t.garment);
    EXPECT_EQ(back.person, t.person);
    EXPECT_EQ(back.pose, t.pose);
    EXPECT_EQ(back.garment_descriptors, t.garment_descriptors);
    EXPECT_EQ(back.person_descriptors, t.person_descriptors);
    EXPECT_EQ(back.garment_mask, t.garment_mask);
    EXPECT_EQ(back.person_mask, t.person_mask);
    EXPECT_EQ(back.edit_mask, t.edit_mask);
    ASSERT_EQ(back.truth.entries.size(), t.truth.entries.size());
    for (size_t i = 0; i < t.truth.entries.size(); ++i) {
      EXPECT_EQ(back.truth.entries[i].query, t.truth.entries[i].query);
      EXPECT_EQ(back.truth.entries[i].match, t.truth.entries[i].match);
      EXPECT_EQ(back.subcell_truth[i], t.subcell_truth[i]);
    }
    EXPECT_EQ(back.spec.seed, t.spec.seed);
    fs::remove_all(dir);
  }
}

TEST(ExportTask, ManifestSchemaValidates) {
  const auto t = generate_task(spec_of(WarpKind::kSmoothWarp, 12, 0.0, 8));
  auto m = task_manifest(t);
  EXPECT_NO_THROW(validate_manifest(m));
  auto bad = m;
  bad["schema_version"] = 2;
  EXPECT_THROW(validate_manifest(bad), FormatError);
  bad = m;
  bad.erase("files");
  EXPECT_THROW(validate_manifest(bad), FormatError);
  bad = m;
  bad["correspondences"][0]["query"] = {99, 0};
  EXPECT_THROW(validate_manifest(bad), FormatError);
  bad = m;
  bad["warp"] = "swirl";
  EXPECT_THROW(validate_manifest(bad), FormatError);
}

TEST(ExportTask, ReexportIsByteIdentical) {
  const auto a = fresh_dir("coral_task_a");
  const auto b = fresh_dir("coral_task_b");
  export_task(generate_task(spec_of(WarpKind::kBlockShuffle, 13, 0.4, 8)), a);
  export_task(generate_task(spec_of(WarpKind::kBlockShuffle, 13, 0.4, 8)), b);
  int files = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename())) << entry.path();
    ++files;
  }
  EXPECT_EQ(files, 9);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(ExportTask, MissingManifestIsFormatError) {
  const auto d = fresh_dir("coral_task_missing");
  fs::create_directories(d);
  EXPECT_THROW(import_task(d), FormatError);
  fs::remove_all(d);
}

}  // namespace
}  // namespace coral
