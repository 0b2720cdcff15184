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
#include <numeric>

#include "coral/errors.hpp"
#include "coral/matching.hpp"
#include "test_util.hpp"

namespace coral {
namespace {

using testing::dense_cost;
using testing::random_grid;
using testing::random_mask;

TEST(MaskDescriptors, AllOnesKeepsGrid) {
  Rng rng(1);
  const auto g = random_grid(rng, 3, 4, 2);
  const auto m = mask_descriptors(g, BinaryMask(3, 4, true));
  EXPECT_EQ(m.grid, g);
  EXPECT_EQ(m.survivors.size(), 12u);
}

TEST(MaskDescriptors, AllZerosAnnihilates) {
  Rng rng(2);
  const auto m = mask_descriptors(random_grid(rng, 3, 4, 2), BinaryMask(3, 4, false));
  for (double v : m.grid.data()) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(m.survivors.empty());
}

TEST(MaskDescriptors, DiagonalMaskOnTwoByTwo) {
  DescriptorGrid g(2, 2, 1, std::vector<double>{1, 2, 3, 4});
  const auto m = mask_descriptors(g, BinaryMask::from_rows({{1, 0}, {0, 1}}));
  ASSERT_EQ(m.survivors.size(), 2u);
  EXPECT_EQ(m.survivors[0], (Coord{0, 0}));
  EXPECT_EQ(m.survivors[1], (Coord{1, 1}));
  EXPECT_EQ(m.grid.data(), (std::vector<double>{1, 0, 0, 4}));
}

TEST(MaskDescriptors, ShapeMismatchThrows) {
  EXPECT_THROW(mask_descriptors(DescriptorGrid(2, 2, 1), BinaryMask(2, 3)), DimensionError);
}

TEST(CosineCost, SelfSimilarityIsOne) {
  DescriptorGrid a(1, 1, 3, std::vector<double>{0.6, 0.0, 0.8});
  const auto c = cosine_cost(a, a, BinaryMask(1, 1, true), BinaryMask(1, 1, true));
  EXPECT_NEAR(c.values(0, 0), 1.0, 1e-15);
}

TEST(CosineCost, OrthogonalIsZero) {
  DescriptorGrid a(1, 1, 2, std::vector<double>{1, 0});
  DescriptorGrid b(1, 1, 2, std::vector<double>{0, 3});
  const auto c = cosine_cost(a, b, BinaryMask(1, 1, true), BinaryMask(1, 1, true));
  EXPECT_EQ(c.values(0, 0), 0.0);
}

TEST(CosineCost, HandDotProduct) {
  DescriptorGrid a(1, 1, 2, std::vector<double>{1, 0});
  DescriptorGrid b(1, 1, 2, std::vector<double>{1 / std::sqrt(2.0), 1 / std::sqrt(2.0)});
  const auto c = cosine_cost(a, b, BinaryMask(1, 1, true), BinaryMask(1, 1, true));
  EXPECT_NEAR(c.values(0, 0), 0.70711, 1e-5);
  EXPECT_NEAR(c.values(0, 0), 1 / std::sqrt(2.0), 1e-15);
}

TEST(CosineCost, ZeroNormRaises) {
  DescriptorGrid a(1, 2, 2, std::vector<double>{1, 0, 0, 0});
  EXPECT_THROW(cosine_cost(a, a, BinaryMask(1, 2, true), BinaryMask(1, 2, true)), DegenerateError);
  // Zero vectors outside the mask are fine.
  EXPECT_NO_THROW(cosine_cost(a, a, BinaryMask::from_rows({{1, 0}}), BinaryMask::from_rows({{1, 0}})));
}

TEST(CosineCost, EmptyMaskRaises) {
  DescriptorGrid a(2, 2, 1, 1.0);
  EXPECT_THROW(cosine_cost(a, a, BinaryMask(2, 2), BinaryMask(2, 2, true)), EmptyDomainError);
}

TEST(CosineCost, ChannelMismatchRaises) {
  EXPECT_THROW(cosine_cost(DescriptorGrid(1, 1, 2, 1.0), DescriptorGrid(1, 1, 3, 1.0),
                           BinaryMask(1, 1, true), BinaryMask(1, 1, true)),
               DimensionError);
}

TEST(CosineCostProperty, SymmetricUnderSwap) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_grid(rng, 4, 5, 3);
    const auto b = random_grid(rng, 4, 5, 3);
    const auto ma = random_mask(rng, 4, 5, 0.6);
    const auto mb = random_mask(rng, 4, 5, 0.6);
    const auto ab = cosine_cost(a, b, ma, mb);
    const auto ba = cosine_cost(b, a, mb, ma);
    EXPECT_TRUE(ab.values.isApprox(ba.values.transpose(), 1e-14));
    EXPECT_LE(ab.values.maxCoeff(), 1.0);
    EXPECT_GE(ab.values.minCoeff(), -1.0);
  }
}

TEST(CosineCostProperty, InvariantToPositiveScaling) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_grid(rng, 3, 3, 4);
    auto scaled = a;
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 3; ++x) {
        const double s = 0.1 + 10 * rng.uniform();
        for (double& v : scaled.at(y, x)) v *= s;
      }
    }
    const auto b = random_grid(rng, 3, 3, 4);
    const BinaryMask m(3, 3, true);
    EXPECT_TRUE(cosine_cost(a, b, m, m).values.isApprox(cosine_cost(scaled, b, m, m).values, 1e-13));
  }
}

TEST(ArgmaxFlow, IdentityCost) {
  const auto cost = dense_cost(3, 3, Eigen::MatrixXd::Identity(9, 9));
  const auto f = argmax_flow(cost, FlowDirection::kPersonToGarment);
  for (int i = 0; i < 9; ++i) EXPECT_EQ(f.targets[i], to_point(f.source_shape.coord(i)));
}

TEST(ArgmaxFlow, TieGoesToLowestIndex) {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(9, 9);
  v(0, 3) = 0.9;
  v(0, 7) = 0.9;
  const auto f = argmax_flow(dense_cost(3, 3, v), FlowDirection::kPersonToGarment);
  EXPECT_EQ(f.targets[0], (Point2{1, 0}));  // linear index 3 on a 3x3 grid
}

TEST(ArgmaxFlow, PlantedPermutation) {
  Rng rng(5);
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  Eigen::MatrixXd v(9, 9);
  for (int i = 0; i < 81; ++i) v.data()[i] = rng.uniform() * 0.5;
  for (int r = 0; r < 9; ++r) v(r, perm[r]) = 0.9;
  const auto cost = dense_cost(3, 3, v);
  const auto f = argmax_flow(cost, FlowDirection::kPersonToGarment);
  for (int r = 0; r < 9; ++r) EXPECT_EQ(f.targets[r], to_point(GridShape{3, 3}.coord(perm[r])));
  const auto b = argmax_flow(cost, FlowDirection::kGarmentToPerson);
  for (int r = 0; r < 9; ++r) EXPECT_EQ(b.targets[perm[r]], to_point(GridShape{3, 3}.coord(r)));
}

// Independent brute-force row scan.
Point2 scan_row(const CostMap& c, int r) {
  double best = -std::numeric_limits<double>::infinity();
  Point2 out;
  for (int j = 0; j < c.cols(); ++j) {
    if (c.values(r, j) > best) {
      best = c.values(r, j);
      out = to_point(c.key_locations[j]);
    }
  }
  return out;
}

TEST(ArgmaxFlowProperty, EqualsBruteForceUpTo16x16) {
  Rng rng(6);
  for (int n : {1, 2, 5, 9, 16}) {
    for (int trial = 0; trial < 3; ++trial) {
      Eigen::MatrixXd v(n * n, n * n);
      // Quantized values force frequent ties.
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = std::floor(rng.uniform() * 8) / 8;
      const auto cost = dense_cost(n, n, v);
      const auto f = argmax_flow(cost, FlowDirection::kPersonToGarment);
      for (int r = 0; r < cost.rows(); ++r) {
        EXPECT_EQ(f.target(cost.query_locations[r]), scan_row(cost, r));
      }
    }
  }
}

FlowField shifted_flow(int h, int w, int dx) {
  FlowField f;
  f.source_shape = f.target_shape = {h, w};
  f.valid = BinaryMask(h, w, true);
  for (int i = 0; i < h * w; ++i) {
    const Coord c = f.source_shape.coord(i);
    f.targets.push_back({double(c.y), double(c.x + dx)});
  }
  return f;
}

TEST(CycleConsistency, PerfectCycleAllOnes) {
  const auto id = shifted_flow(4, 4, 0);
  EXPECT_EQ(cycle_consistency_mask(id, id, 3.0).count(), 16);
}

TEST(CycleConsistency, ShiftBeyondGammaAllZeros) {
  // Garment grid wide enough to hold the +5 shift.
  FlowField fwd = shifted_flow(2, 2, 5);
  fwd.target_shape = {2, 8};
  FlowField bwd;
  bwd.source_shape = {2, 8};
  bwd.target_shape = {2, 2};
  bwd.valid = BinaryMask(2, 8, true);
  for (int i = 0; i < 16; ++i) {
    const Coord c = bwd.source_shape.coord(i);
    bwd.targets.push_back(to_point(c));  // identity read-back
  }
  EXPECT_EQ(cycle_consistency_mask(fwd, bwd, 3.0).count(), 0);
  EXPECT_EQ(cycle_consistency_mask(fwd, bwd, 5.0).count(), 0);  // strict
  EXPECT_EQ(cycle_consistency_mask(fwd, bwd, 5.0001).count(), 4);
}

TEST(CycleConsistency, GammaZeroIsEmpty) {
  const auto id = shifted_flow(3, 3, 0);
  EXPECT_EQ(cycle_consistency_mask(id, id, 0.0).count(), 0);
}

TEST(CycleConsistency, Errors) {
  const auto a = shifted_flow(3, 3, 0);
  const auto b = shifted_flow(2, 3, 0);
  EXPECT_THROW(cycle_consistency_mask(a, b, 3.0), DimensionError);
  EXPECT_THROW(cycle_consistency_mask(a, a, -1.0), RangeError);
}

TEST(CycleConsistencyProperty, MonotoneInGamma) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_grid(rng, 6, 6, 3);
    const auto g = random_grid(rng, 6, 6, 3);
    const BinaryMask m(6, 6, true);
    const auto cost = cosine_cost(p, g, m, m);
    const auto f = argmax_flow(cost, FlowDirection::kPersonToGarment);
    const auto b = argmax_flow(cost, FlowDirection::kGarmentToPerson);
    BinaryMask prev = cycle_consistency_mask(f, b, 0.0);
    for (double gamma : {0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 9.0}) {
      const auto cur = cycle_consistency_mask(f, b, gamma);
      EXPECT_TRUE(prev.subset_of(cur));
      prev = cur;
    }
    EXPECT_EQ(prev.count(), 36);  // gamma beyond the grid diagonal
  }
}

TEST(PseudoGt, IdentityCostAllReliable) {
  const auto cost = dense_cost(2, 3, Eigen::MatrixXd::Identity(6, 6));
  const auto set = pseudo_gt(cost, BinaryMask(2, 3, true));
  ASSERT_EQ(set.entries.size(), 6u);
  for (const auto& e : set.entries) {
    EXPECT_TRUE(e.reliable);
    EXPECT_EQ(e.match, to_point(e.query));
  }
}

TEST(PseudoGt, AllUnreliable) {
  const auto cost = dense_cost(2, 2, Eigen::MatrixXd::Identity(4, 4));
  EXPECT_EQ(pseudo_gt(cost, BinaryMask(2, 2, false)).reliable_count(), 0);
}

TEST(PseudoGt, CheckerboardOverPlantedPermutation) {
  const int perm[9] = {4, 0, 8, 2, 6, 1, 3, 7, 5};
  Eigen::MatrixXd v = Eigen::MatrixXd::Constant(9, 9, 0.1);
  for (int r = 0; r < 9; ++r) v(r, perm[r]) = 0.8;
  const auto rel = BinaryMask::from_rows({{1, 0, 1}, {0, 1, 0}, {1, 0, 1}});
  const auto set = pseudo_gt(dense_cost(3, 3, v), rel);
  EXPECT_EQ(set.reliable_count(), 5);
  for (int r = 0; r < 9; ++r) {
    const auto& e = set.entries[r];
    EXPECT_EQ(e.reliable, rel(e.query));
    if (e.reliable) EXPECT_EQ(e.match, to_point(GridShape{3, 3}.coord(perm[r])));
  }
}

TEST(PseudoGtProperty, AllOnesEqualsArgmaxFlow) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_grid(rng, 5, 4, 3);
    const auto g = random_grid(rng, 5, 4, 3);
    const auto mp = random_mask(rng, 5, 4, 0.5);
    const auto mg = random_mask(rng, 5, 4, 0.5);
    const auto cost = cosine_cost(p, g, mp, mg);
    const auto flow = argmax_flow(cost, FlowDirection::kPersonToGarment);
    const auto set = pseudo_gt(cost, BinaryMask(5, 4, true));
    for (const auto& e : set.entries) EXPECT_EQ(e.match, flow.target(e.query));
  }
}

CorrespondenceSet offsets(const std::vector<double>& dx) {
  CorrespondenceSet s;
  for (size_t i = 0; i < dx.size(); ++i) {
    s.entries.push_back({{0, int(i)}, {0.0, double(i) + dx[i]}, true});
  }
  return s;
}

TEST(Pck, EqualSetsScoreOne) {
  const auto gt = testing::identity_set(3, 3);
  EXPECT_EQ(pck(gt, gt, 0.5), 1.0);
}

TEST(Pck, OffsetBeyondAlphaScoresZero) {
  const double alpha = 4.0;
  const auto gt = offsets({0, 0, 0});
  EXPECT_EQ(pck(offsets({alpha + 1, alpha + 1, alpha + 1}), gt, alpha), 0.0);
}

TEST(Pck, HandCountedErrors) {
  EXPECT_DOUBLE_EQ(pck(offsets({0, 1, 5, 20}), offsets({0, 0, 0, 0}), 16.0), 0.75);
  EXPECT_EQ(kDefaultPckAlpha, 16.0);
}

TEST(Pck, StrictThresholdAndReliabilityDenominator) {
  auto gt = offsets({0, 0, 0, 0});
  gt.entries[3].reliable = false;
  // Error exactly alpha is not correct; unreliable query ignored.
  EXPECT_DOUBLE_EQ(pck(offsets({0, 2, 3, 100}), gt, 2.0), 1.0 / 3.0);
}

TEST(Pck, EmptyDomainRaises) {
  auto gt = offsets({0});
  gt.entries[0].reliable = false;
  EXPECT_THROW(pck(gt, gt, 1.0), EmptyDomainError);
}

TEST(PckProperty, MonotoneInAlpha) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> e(30);
    for (double& v : e) v = rng.uniform() * 10;
    const auto pred = offsets(e);
    const auto gt = offsets(std::vector<double>(30, 0.0));
    EXPECT_EQ(pck(pred, gt, 0.0), 0.0);
    EXPECT_EQ(pck(gt, gt, 1e-9), 1.0);
    double prev = 0.0;
    for (double a = 0.0; a <= 12.0; a += 0.25) {
      const double cur = pck(pred, gt, a);
      EXPECT_GE(cur, prev);
      prev = cur;
    }
  }
}

TEST(PearsonR, PerfectLinear) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> y, z;
  for (double v : x) {
    y.push_back(2 * v + 1);
    z.push_back(-v);
  }
  EXPECT_NEAR(pearson_r(x, y), 1.0, 1e-15);
  EXPECT_NEAR(pearson_r(x, z), -1.0, 1e-15);
}

TEST(PearsonR, HandSample) {
  const std::vector<double> x{1, 2, 3, 4};
  const std::vector<double> y{2, 1, 4, 3};
  EXPECT_NEAR(pearson_r(x, y), 0.6, 1e-15);
}

TEST(PearsonR, DegenerateInputs) {
  const std::vector<double> x{1, 1, 1};
  const std::vector<double> y{1, 2, 3};
  EXPECT_THROW(pearson_r(x, y), DegenerateError);
  EXPECT_THROW(pearson_r(std::vector<double>{1}, std::vector<double>{1}), DimensionError);
}

TEST(WarpByFlow, IdentityFlow) {
  Rng rng(10);
  const auto g = random_grid(rng, 3, 4, 2);
  EXPECT_EQ(warp_by_flow(g, shifted_flow(3, 4, 0)), g);
}

TEST(WarpByFlow, ConstantFlowBroadcasts) {
  Rng rng(11);
  const auto g = random_grid(rng, 3, 3, 2);
  auto f = shifted_flow(3, 3, 0);
  for (auto& t : f.targets) t = {0, 0};
  const auto w = warp_by_flow(g, f);
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 3; ++x) {
      EXPECT_EQ(w(y, x, 0), g(0, 0, 0));
      EXPECT_EQ(w(y, x, 1), g(0, 0, 1));
    }
  }
}

TEST(WarpByFlow, OutOfBoundsClampsAndInvalidZeroFills) {
  DescriptorGrid g(1, 3, 1, std::vector<double>{1, 2, 3});
  auto f = shifted_flow(1, 3, 5);
  f.valid.set(0, 0, false);
  const auto w = warp_by_flow(g, f);
  EXPECT_EQ(w.data(), (std::vector<double>{0, 3, 3}));
}

TEST(WarpByFlowProperty, PermutationInverts) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Eigen::MatrixXd fwd = Eigen::MatrixXd::Zero(9, 9);
    Eigen::MatrixXd inv = Eigen::MatrixXd::Zero(9, 9);
    for (int r = 0; r < 9; ++r) {
      fwd(r, perm[r]) = 1.0;
      inv(perm[r], r) = 1.0;
    }
    const auto f = argmax_flow(dense_cost(3, 3, fwd), FlowDirection::kPersonToGarment);
    const auto b = argmax_flow(dense_cost(3, 3, inv), FlowDirection::kPersonToGarment);
    const auto g = random_grid(rng, 3, 3, 2);
    const auto warped = warp_by_flow(g, f);
    for (int r = 0; r < 9; ++r) {
      const Coord c = GridShape{3, 3}.coord(r);
      const Coord s = GridShape{3, 3}.coord(perm[r]);
      EXPECT_EQ(warped(c.y, c.x, 0), g(s.y, s.x, 0));
    }
    EXPECT_EQ(warp_by_flow(warped, b), g);
  }
}

TEST(BuildPseudoGt, RecoversExactCopy) {
  Rng rng(13);
  const auto g = random_grid(rng, 5, 5, 4);
  const BinaryMask m(5, 5, true);
  const auto p = build_pseudo_gt(g, g, m, m, 3.0);
  EXPECT_EQ(p.reliability.count(), 25);
  EXPECT_EQ(pck(p.matches, testing::identity_set(5, 5), 1.0), 1.0);
}

}  // namespace
}  // namespace coral
