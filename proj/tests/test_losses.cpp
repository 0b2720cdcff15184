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

#include "coral/attention.hpp"
#include "coral/errors.hpp"
#include "coral/losses.hpp"
#include "test_util.hpp"

namespace coral {
namespace {

using testing::softmax;

LatentGrid scalar(double v) { return LatentGrid(1, 1, 1, v); }

TEST(InterpolateLatent, Endpoints) {
  Rng rng(1);
  const auto z0 = testing::random_grid(rng, 2, 3, 2);
  const auto n = testing::random_grid(rng, 2, 3, 2);
  EXPECT_EQ(interpolate_latent(z0, n, 0.0), z0);
  EXPECT_EQ(interpolate_latent(z0, n, 1.0), n);
}

TEST(InterpolateLatent, ScalarArithmetic) {
  EXPECT_DOUBLE_EQ(interpolate_latent(scalar(2), scalar(-2), 0.25).data()[0], 1.0);
}

TEST(InterpolateLatent, RangeChecked) {
  EXPECT_THROW(interpolate_latent(scalar(0), scalar(0), 1.5), RangeError);
  EXPECT_THROW(interpolate_latent(scalar(0), scalar(0), -0.1), RangeError);
  EXPECT_THROW(interpolate_latent(scalar(0), LatentGrid(1, 2, 1), 0.5), DimensionError);
}

TEST(VelocityLoss, Examples) {
  Rng rng(2);
  const auto z0 = testing::random_grid(rng, 2, 2, 3);
  const auto n = testing::random_grid(rng, 2, 2, 3);
  auto target = n;
  for (size_t i = 0; i < target.data().size(); ++i) target.data()[i] -= z0.data()[i];
  EXPECT_EQ(velocity_loss(target, z0, n), 0.0);
  EXPECT_DOUBLE_EQ(velocity_loss(LatentGrid(2, 2, 1, 0.0), LatentGrid(2, 2, 1, 0.0), LatentGrid(2, 2, 1, 1.0)), 1.0);
  EXPECT_DOUBLE_EQ(velocity_loss(scalar(3), scalar(0), scalar(1)), 4.0);
}

CorrespondenceSet gt_at(const std::vector<Point2>& pts) {
  CorrespondenceSet s;
  for (size_t i = 0; i < pts.size(); ++i) s.entries.push_back({{0, int(i)}, pts[i], true});
  return s;
}

TEST(CorrLoss, Examples) {
  const std::vector<Point2> pts{{1, 1}, {2, 5}};
  EXPECT_EQ(corr_loss(pts, gt_at(pts)).value, 0.0);
  const std::vector<Point2> one{{3, 4}};
  EXPECT_DOUBLE_EQ(corr_loss(one, gt_at({{0, 0}})).value, 25.0);
  const std::vector<Point2> two{{3, 4}, {7, 7}};
  EXPECT_DOUBLE_EQ(corr_loss(two, gt_at({{0, 0}, {7, 7}})).value, 12.5);
}

TEST(CorrLoss, UnreliableExcludedAndEmptySkipped) {
  auto gt = gt_at({{0, 0}, {0, 0}});
  gt.entries[1].reliable = false;
  const std::vector<Point2> pred{{0, 2}, {100, 100}};
  const auto l = corr_loss(pred, gt);
  EXPECT_DOUBLE_EQ(l.value, 4.0);
  EXPECT_EQ(l.count, 1);
  EXPECT_EQ(l.grad[1], (Point2{0, 0}));
  gt.entries[0].reliable = false;
  const auto skipped = corr_loss(pred, gt);
  EXPECT_TRUE(skipped.skipped);
  EXPECT_EQ(skipped.value, 0.0);
}

TEST(CorrLossProperty, NonNegativeZeroIffEqual) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Point2> a, b;
    for (int i = 0; i < 5; ++i) {
      a.push_back({rng.normal(), rng.normal()});
      b.push_back(a.back());
    }
    EXPECT_EQ(corr_loss(a, gt_at(b)).value, 0.0);
    b[trial % 5].x += 1e-3;
    EXPECT_GT(corr_loss(a, gt_at(b)).value, 0.0);
  }
}

TEST(EntropyLoss, Examples) {
  EXPECT_EQ(entropy_loss(std::vector<std::vector<double>>{{1, 0}, {0, 1}}), 0.0);
  const std::vector<std::vector<double>> uniform(3, std::vector<double>(64, 1.0 / 64));
  EXPECT_NEAR(entropy_loss(uniform), 4.15888, 1e-5);
  EXPECT_NEAR(entropy_loss(std::vector<std::vector<double>>{{1, 0, 0}, {0.5, 0.5, 0}}), 0.34657, 1e-5);
  EXPECT_THROW(entropy_loss(std::vector<std::vector<double>>{{-0.5, 1.5}}), InvalidDistributionError);
}

TEST(EntropyLossProperty, MovingMassToMaxDecreases) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> z(6);
    for (double& v : z) v = rng.normal();
    auto p = softmax(z);
    const int top = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    const int low = (top + 1 + trial % 5) % 6;
    const double before = entropy_loss(std::vector<std::vector<double>>{p});
    const double moved = 0.5 * p[low];
    p[low] -= moved;
    p[top] += moved;
    EXPECT_LT(entropy_loss(std::vector<std::vector<double>>{p}), before);
  }
}

TEST(EntropyLossProperty, SharperTemperatureDecreases) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> z(8);
    for (double& v : z) v = rng.normal();
    const double beta = 1.0 + 2.0 * rng.uniform() + 1e-3;
    std::vector<double> zb(z);
    for (double& v : zb) v *= beta;
    EXPECT_LT(row_entropy(softmax(zb)), row_entropy(softmax(z)));
  }
}

TEST(CoralLoss, Examples) {
  EXPECT_EQ(coral_loss(5.0, 7.0, {0.0, 0.0, 0.1}), 0.0);
  EXPECT_NEAR(coral_loss(2.0, 3.0, LossWeights{}), 0.32, 1e-15);
  // Entropy-only weights ignore the correspondence term entirely.
  EXPECT_DOUBLE_EQ(coral_loss(123.0, 3.0, {0.0, 0.1, 0.1}), 0.3);
}

TEST(TotalLoss, Examples) {
  EXPECT_EQ(total_loss(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(total_loss(1.0, 0.32), 1.32);
  EXPECT_EQ(total_loss(0.7, coral_loss(2, 3, {0, 0, 0})), 0.7);
}

TEST(LossWeights, Defaults) {
  const LossWeights w;
  EXPECT_EQ(w.lambda_corr, 0.01);
  EXPECT_EQ(w.lambda_ent, 0.1);
  EXPECT_EQ(w.lambda_repa, 0.1);
  EXPECT_THROW((LossWeights{-1, 0, 0}).validate(), ConfigError);
  EXPECT_THROW((LossWeights{0, NAN, 0}).validate(), ConfigError);
}

TEST(LossReport, JsonRoundTripAndDecomposition) {
  LossReport r;
  r.step = 17;
  r.velocity = 0.9;
  r.corr = 4.2;
  r.ent = 3.1;
  r.repa = -0.4;
  r.layers = {{4.0, 3.0, -0.3}, {4.4, 3.2, -0.5}};
  const LossWeights w;
  r.total = r.recomputed_total(w);
  EXPECT_NEAR(r.total, 0.9 + 0.042 + 0.31 - 0.04, 1e-12);
  const auto back = LossReport::from_json(r.to_json());
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(back.total, r.total);
  EXPECT_EQ(back.repa, r.repa);
  ASSERT_EQ(back.layers.size(), 2u);
  EXPECT_EQ(back.layers[1].ent, 3.2);
  EXPECT_THROW(LossReport::from_json(nlohmann::json{{"step", 1}}), FormatError);
}

Eigen::MatrixXd rows_of(std::initializer_list<std::vector<double>> rows) {
  Eigen::MatrixXd m(rows.size(), rows.begin()->size());
  int r = 0;
  for (const auto& row : rows) {
    for (size_t c = 0; c < row.size(); ++c) m(r, c) = row[c];
    ++r;
  }
  return m;
}

TEST(RepaAlignment, Examples) {
  const auto d = rows_of({{1, 0}, {0, 2}});
  EXPECT_NEAR(repa_alignment(d * 3.0, d).value, -1.0, 1e-15);
  EXPECT_NEAR(repa_alignment(rows_of({{0, 1}, {-2, 0}}), d).value, 0.0, 1e-15);
  EXPECT_NEAR(repa_alignment(rows_of({{1, 0}, {1, 0}}), d).value, -0.5, 1e-15);
  EXPECT_THROW(repa_alignment(rows_of({{1, 0}}), d), DimensionError);
}

TEST(RepaLoss, AveragesLayersAndChecksPatchCount) {
  Rng rng(6);
  const auto h1 = RepaHead::random(4, 8, 2, rng);
  const auto h2 = RepaHead::random(4, 8, 2, rng);
  Eigen::MatrixXd hidden(6, 4);
  for (Eigen::Index i = 0; i < hidden.size(); ++i) hidden.data()[i] = rng.normal();
  Eigen::MatrixXd desc(6, 2);
  for (Eigen::Index i = 0; i < desc.size(); ++i) desc.data()[i] = rng.normal();
  const double l1 = repa_alignment(h1.forward(hidden).output, desc).value;
  const double l2 = repa_alignment(h2.forward(hidden).output, desc).value;
  EXPECT_NEAR(repa_loss({hidden, hidden}, desc, {h1, h2}), 0.5 * (l1 + l2), 1e-15);
  EXPECT_THROW(repa_loss({hidden}, desc.topRows(5), {h1}), DimensionError);
}

TEST(ConcatDescriptorPatches, GarmentThenPerson) {
  DescriptorGrid g(1, 2, 1, std::vector<double>{1, 2});
  DescriptorGrid p(1, 2, 1, std::vector<double>{3, 4});
  const auto m = concat_descriptor_patches(g, p);
  EXPECT_EQ(m, rows_of({{1}, {2}, {3}, {4}}));
}

TEST(GradientCheck, QuadraticIsExact) {
  Rng rng(7);
  std::vector<double> theta(20), grad(20);
  for (size_t i = 0; i < theta.size(); ++i) {
    theta[i] = rng.normal();
    grad[i] = 2 * theta[i];
  }
  auto loss = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
  };
  const auto r = gradient_check(loss, theta, grad);
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_relative_error, 1e-9);
}

TEST(GradientCheck, FlagsWrongAndNonFiniteGradients) {
  std::vector<double> theta{1.0, 2.0};
  auto loss = [](std::span<const double> v) { return v[0] * v[0] + v[1]; };
  EXPECT_FALSE(gradient_check(loss, theta, std::vector<double>{2.0, 2.0}).passed);
  const auto r = gradient_check(loss, theta, std::vector<double>{2.0, NAN});
  EXPECT_FALSE(r.passed);
  EXPECT_FALSE(r.finite);
}

// corr_loss through a renormalized soft argmax over softmax logits on a 4x4 garment grid.
TEST(GradientCheck, CorrLossThroughSoftArgmax) {
  Rng rng(8);
  std::vector<Point2> locs;
  for (int i = 0; i < 16; ++i) locs.push_back(to_point(GridShape{4, 4}.coord(i)));
  const int queries = 3, tokens = 20;
  std::vector<double> logits(queries * tokens);
  for (double& v : logits) v = rng.normal();
  CorrespondenceSet gt;
  for (int q = 0; q < queries; ++q) {
    gt.entries.push_back({{0, q}, {double(rng.uniform_int(0, 3)), double(rng.uniform_int(0, 3))}, q != 1});
  }
  auto soft = [&](std::span<const double> z, std::vector<std::vector<double>>* probs) {
    std::vector<Point2> out;
    for (int q = 0; q < queries; ++q) {
      std::vector<double> p(tokens);
      softmax_row(z.subspan(q * tokens, tokens), p);
      out.push_back(soft_argmax_row(std::span<const double>(p).first(16), locs, true));
      if (probs) probs->push_back(p);
    }
    return out;
  };
  auto loss = [&](std::span<const double> z) { return corr_loss(soft(z, nullptr), gt).value; };
  std::vector<std::vector<double>> probs;
  const auto l = corr_loss(soft(logits, &probs), gt);
  std::vector<double> analytic(logits.size(), 0.0);
  for (int q = 0; q < queries; ++q) {
    std::vector<double> d_p(tokens, 0.0);
    soft_argmax_row_backward(std::span<const double>(probs[q]).first(16), locs, true, l.grad[q],
                             std::span<double>(d_p).first(16));
    softmax_row_backward(probs[q], d_p, std::span<double>(analytic).subspan(q * tokens, tokens));
  }
  const auto r = gradient_check(loss, logits, analytic, 1e-5, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(GradientCheck, RepaHeadAndAlignment) {
  Rng rng(9);
  auto head = RepaHead::random(5, 6, 3, rng);
  Eigen::MatrixXd hidden(4, 5), desc(4, 3);
  for (Eigen::Index i = 0; i < hidden.size(); ++i) hidden.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < desc.size(); ++i) desc.data()[i] = rng.normal();
  const auto cache = head.forward(hidden);
  const auto al = repa_alignment(cache.output, desc);
  auto grads = RepaHead::zeros_like(head);
  const Eigen::MatrixXd d_hidden = head.backward(cache, al.d_projected, grads);

  std::vector<double> theta(hidden.data(), hidden.data() + hidden.size());
  std::vector<double> analytic(d_hidden.data(), d_hidden.data() + d_hidden.size());
  for (auto [p, g] : {std::pair{&head.w1, &grads.w1}, {&head.w2, &grads.w2}, {&head.w3, &grads.w3}}) {
    theta.insert(theta.end(), p->data(), p->data() + p->size());
    analytic.insert(analytic.end(), g->data(), g->data() + g->size());
  }
  for (auto [p, g] : {std::pair{&head.b1, &grads.b1}, {&head.b2, &grads.b2}, {&head.b3, &grads.b3}}) {
    theta.insert(theta.end(), p->data(), p->data() + p->size());
    analytic.insert(analytic.end(), g->data(), g->data() + g->size());
  }
  auto loss = [&](std::span<const double> v) {
    RepaHead h = head;
    Eigen::MatrixXd x(4, 5);
    size_t pos = 0;
    std::copy_n(v.begin(), x.size(), x.data());
    pos += x.size();
    for (Eigen::MatrixXd* m : {&h.w1, &h.w2, &h.w3}) {
      std::copy_n(v.begin() + pos, m->size(), m->data());
      pos += m->size();
    }
    for (Eigen::VectorXd* b : {&h.b1, &h.b2, &h.b3}) {
      std::copy_n(v.begin() + pos, b->size(), b->data());
      pos += b->size();
    }
    return repa_alignment(h.forward(x).output, desc).value;
  };
  const auto r = gradient_check(loss, theta, analytic, 1e-5, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

}  // namespace
}  // namespace coral
