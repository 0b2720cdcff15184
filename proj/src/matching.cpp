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

#include "coral/matching.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "coral/errors.hpp"

namespace coral {

namespace {

void require_same_shape(GridShape a, GridShape b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": shape " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width));
  }
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

int CorrespondenceSet::reliable_count() const {
  int n = 0;
  for (const auto& e : entries) n += e.reliable ? 1 : 0;
  return n;
}

std::optional<Correspondence> CorrespondenceSet::find(const Coord& query) const {
  for (const auto& e : entries) {
    if (e.query == query) return e;
  }
  return std::nullopt;
}

MaskedDescriptors mask_descriptors(const DescriptorGrid& grid, const BinaryMask& mask) {
  require_same_shape(grid.shape(), mask.shape(), "mask_descriptors");
  MaskedDescriptors out{grid, {}};
  for (int y = 0; y < grid.height(); ++y) {
    for (int x = 0; x < grid.width(); ++x) {
      if (mask(y, x)) {
        out.survivors.push_back({y, x});
      } else {
        for (double& v : out.grid.at(y, x)) v = 0.0;
      }
    }
  }
  return out;
}

CostMap cosine_cost(const DescriptorGrid& person, const DescriptorGrid& garment,
                    const BinaryMask& person_mask, const BinaryMask& garment_mask) {
  if (person.channels() != garment.channels()) {
    throw DimensionError("cosine_cost: channel counts differ (" +
                         std::to_string(person.channels()) + " vs " +
                         std::to_string(garment.channels()) + ")");
  }
  const auto psi_p = mask_descriptors(person, person_mask);
  const auto psi_g = mask_descriptors(garment, garment_mask);
  if (psi_p.survivors.empty() || psi_g.survivors.empty()) {
    throw EmptyDomainError("cosine_cost: a mask selects no locations");
  }

  const int c = person.channels();
  auto normalized = [c](const MaskedDescriptors& m) {
    Eigen::MatrixXd out(m.survivors.size(), c);
    for (size_t i = 0; i < m.survivors.size(); ++i) {
      const auto v = m.grid.at(m.survivors[i]);
      const double n = norm(v);
      if (!(n > 0.0) || !std::isfinite(n)) {
        throw DegenerateError("cosine_cost: zero-norm descriptor at (" +
                              std::to_string(m.survivors[i].y) + "," +
                              std::to_string(m.survivors[i].x) + ")");
      }
      for (int k = 0; k < c; ++k) out(i, k) = v[k] / n;
    }
    return out;
  };

  CostMap cost;
  cost.query_shape = person.shape();
  cost.key_shape = garment.shape();
  cost.query_locations = psi_p.survivors;
  cost.key_locations = psi_g.survivors;
  cost.values = normalized(psi_p) * normalized(psi_g).transpose();
  cost.values = cost.values.cwiseMax(-1.0).cwiseMin(1.0);
  return cost;
}

int argmax_lowest(const double* values, int n, int stride) {
  int best = 0;
  for (int i = 1; i < n; ++i) {
    if (values[i * stride] > values[best * stride]) best = i;
  }
  return best;
}

FlowField argmax_flow(const CostMap& cost, FlowDirection direction) {
  if (cost.rows() == 0 || cost.cols() == 0) {
    throw EmptyDomainError("argmax_flow: empty cost map");
  }
  FlowField flow;
  const bool forward = direction == FlowDirection::kPersonToGarment;
  flow.source_shape = forward ? cost.query_shape : cost.key_shape;
  flow.target_shape = forward ? cost.key_shape : cost.query_shape;
  flow.targets.assign(flow.source_shape.size(), Point2{});
  flow.valid = BinaryMask(flow.source_shape.height, flow.source_shape.width);

  const Eigen::Index ld = cost.values.rows();
  if (forward) {
    for (int r = 0; r < cost.rows(); ++r) {
      const int best = argmax_lowest(cost.values.data() + r, cost.cols(), static_cast<int>(ld));
      flow.targets[flow.source_shape.linear(cost.query_locations[r])] =
          to_point(cost.key_locations[best]);
      flow.valid.set(cost.query_locations[r], true);
    }
  } else {
    for (int col = 0; col < cost.cols(); ++col) {
      const int best = argmax_lowest(cost.values.data() + col * ld, cost.rows(), 1);
      flow.targets[flow.source_shape.linear(cost.key_locations[col])] =
          to_point(cost.query_locations[best]);
      flow.valid.set(cost.key_locations[col], true);
    }
  }
  return flow;
}

BinaryMask cycle_consistency_mask(const FlowField& forward, const FlowField& backward,
                                  double gamma) {
  if (!(gamma >= 0.0)) throw RangeError("cycle_consistency_mask: gamma must be >= 0");
  require_same_shape(forward.target_shape, backward.source_shape, "cycle_consistency_mask");
  require_same_shape(backward.target_shape, forward.source_shape, "cycle_consistency_mask");

  BinaryMask reliable(forward.source_shape.height, forward.source_shape.width);
  for (int y = 0; y < forward.source_shape.height; ++y) {
    for (int x = 0; x < forward.source_shape.width; ++x) {
      const Coord i{y, x};
      if (!forward.valid(i)) continue;
      const Coord j = round_to_coord(forward.target(i));
      if (!backward.source_shape.contains(j) || !backward.valid(j)) continue;
      if (distance(backward.target(j), to_point(i)) < gamma) reliable.set(i, true);
    }
  }
  return reliable;
}

CorrespondenceSet pseudo_gt(const CostMap& cost, const BinaryMask& reliability) {
  require_same_shape(cost.query_shape, reliability.shape(), "pseudo_gt");
  CorrespondenceSet set;
  set.entries.reserve(cost.query_locations.size());
  const Eigen::Index ld = cost.values.rows();
  for (int r = 0; r < cost.rows(); ++r) {
    const Coord q = cost.query_locations[r];
    Correspondence e{q, {}, reliability(q)};
    if (e.reliable && cost.cols() > 0) {
      const int best = argmax_lowest(cost.values.data() + r, cost.cols(), static_cast<int>(ld));
      e.match = to_point(cost.key_locations[best]);
    }
    set.entries.push_back(e);
  }
  return set;
}

double pck(const CorrespondenceSet& pred, const CorrespondenceSet& gt, double alpha) {
  if (!(alpha >= 0.0)) throw RangeError("pck: alpha must be >= 0");
  std::map<Coord, Point2> predicted;
  for (const auto& e : pred.entries) predicted.emplace(e.query, e.match);

  int evaluated = 0;
  int correct = 0;
  for (const auto& e : gt.entries) {
    if (!e.reliable) continue;
    const auto it = predicted.find(e.query);
    if (it == predicted.end()) {
      throw DimensionError("pck: prediction missing for query (" + std::to_string(e.query.y) +
                           "," + std::to_string(e.query.x) + ")");
    }
    ++evaluated;
    if (distance(it->second, e.match) < alpha) ++correct;
  }
  if (evaluated == 0) throw EmptyDomainError("pck: no reliable queries to evaluate");
  return static_cast<double>(correct) / evaluated;
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DimensionError("pearson_r: need two equal-length samples of size >= 2");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw DegenerateError("pearson_r: zero variance input");
  const double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

DescriptorGrid warp_by_flow(const DescriptorGrid& source, const FlowField& flow) {
  DescriptorGrid out(flow.source_shape.height, flow.source_shape.width, source.channels());
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      if (!flow.valid(y, x)) continue;
      Coord t = round_to_coord(flow.target({y, x}));
      t.y = std::clamp(t.y, 0, source.height() - 1);
      t.x = std::clamp(t.x, 0, source.width() - 1);
      const auto src = source.at(t);
      std::copy(src.begin(), src.end(), out.at(y, x).begin());
    }
  }
  return out;
}

FlowField flow_from_correspondences(const CorrespondenceSet& set, GridShape source_shape,
                                    GridShape target_shape) {
  FlowField flow;
  flow.source_shape = source_shape;
  flow.target_shape = target_shape;
  flow.targets.assign(source_shape.size(), Point2{});
  flow.valid = BinaryMask(source_shape.height, source_shape.width);
  for (const auto& e : set.entries) {
    if (!e.reliable) continue;
    if (!source_shape.contains(e.query)) throw DimensionError("correspondence outside grid");
    flow.targets[source_shape.linear(e.query)] = e.match;
    flow.valid.set(e.query, true);
  }
  return flow;
}

PseudoGroundTruth build_pseudo_gt(const DescriptorGrid& person, const DescriptorGrid& garment,
                                  const BinaryMask& person_mask, const BinaryMask& garment_mask,
                                  double gamma) {
  PseudoGroundTruth out;
  out.cost = cosine_cost(person, garment, person_mask, garment_mask);
  out.forward = argmax_flow(out.cost, FlowDirection::kPersonToGarment);
  out.backward = argmax_flow(out.cost, FlowDirection::kGarmentToPerson);
  out.reliability = cycle_consistency_mask(out.forward, out.backward, gamma);
  out.matches = pseudo_gt(out.cost, out.reliability);
  return out;
}

}  // namespace coral
