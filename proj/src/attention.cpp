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

#include "coral/attention.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "coral/cord_io.hpp"
#include "coral/errors.hpp"

namespace coral {

const char* segment_name(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::kContext: return "context";
    case SegmentKind::kGarment: return "garment";
    case SegmentKind::kPerson: return "person";
    case SegmentKind::kPose: return "pose";
  }
  return "?";
}

const Segment* TokenSequence::find(SegmentKind kind) const {
  for (const auto& s : segments) {
    if (s.kind == kind) return &s;
  }
  return nullptr;
}

PanelLayout TokenSequence::panel_layout() const {
  const Segment* g = find(SegmentKind::kGarment);
  const Segment* p = find(SegmentKind::kPerson);
  if (!g || !p || !g->grid || !p->grid) {
    throw ConfigError("token sequence lacks garment/person panel segments");
  }
  return {*p->grid, g->offset, p->offset, total_tokens()};
}

void TokenSequence::validate() const {
  int expected_offset = 0;
  int last_kind = -1;
  for (const auto& s : segments) {
    if (static_cast<int>(s.kind) <= last_kind) {
      throw ConfigError("segments must follow [context | garment | person | pose] order");
    }
    last_kind = static_cast<int>(s.kind);
    if (s.offset != expected_offset) throw ConfigError("segment offsets are not contiguous");
    if (s.grid && s.grid->size() != s.count) {
      throw ConfigError(std::string(segment_name(s.kind)) + " segment count does not match grid");
    }
    expected_offset += s.count;
  }
  if (expected_offset != total_tokens() ||
      static_cast<int>(positions.size()) != total_tokens()) {
    throw ConfigError("segment counts do not cover the token sequence");
  }
  const Segment* person = find(SegmentKind::kPerson);
  const Segment* pose = find(SegmentKind::kPose);
  if (pose) {
    if (!person || person->grid != pose->grid || person->count != pose->count) {
      throw ConfigError("pose segment must mirror the person grid");
    }
    for (int i = 0; i < pose->count; ++i) {
      if (!(positions[pose->offset + i] == positions[person->offset + i])) {
        throw ConfigError("pose token " + std::to_string(i) +
                          " does not share its person positional index");
      }
    }
  }
}

std::vector<RotaryPlane> default_rotary_planes(int head_dim, double base) {
  if (head_dim <= 0 || head_dim % 4 != 0) {
    throw ConfigError("2D rotary embedding needs a head dimension divisible by 4, got " +
                      std::to_string(head_dim));
  }
  const int per_axis = head_dim / 4;
  std::vector<RotaryPlane> planes;
  for (int axis = 0; axis < 2; ++axis) {
    for (int k = 0; k < per_axis; ++k) {
      planes.push_back({axis, std::pow(base, -static_cast<double>(k) / per_axis)});
    }
  }
  return planes;
}

namespace {

Eigen::MatrixXd rotate(const Eigen::MatrixXd& x, std::span<const Point2> positions,
                       std::span<const RotaryPlane> planes, double sign) {
  if (x.cols() % 2 != 0) throw ConfigError("rotary embedding needs an even channel count");
  if (static_cast<Eigen::Index>(planes.size()) * 2 != x.cols()) {
    throw ConfigError("rotary plane count does not match channel count");
  }
  if (static_cast<Eigen::Index>(positions.size()) != x.rows()) {
    throw DimensionError("rotary embedding: one position per token required");
  }
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double pos[2] = {positions[t].y, positions[t].x};
    for (size_t p = 0; p < planes.size(); ++p) {
      const double angle = sign * pos[planes[p].axis] * planes[p].frequency;
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      const double a = x(t, 2 * p);
      const double b = x(t, 2 * p + 1);
      out(t, 2 * p) = a * c - b * s;
      out(t, 2 * p + 1) = a * s + b * c;
    }
  }
  return out;
}

}  // namespace

Eigen::MatrixXd apply_rope(const Eigen::MatrixXd& x, std::span<const Point2> positions,
                           std::span<const RotaryPlane> planes) {
  return rotate(x, positions, planes, 1.0);
}

Eigen::MatrixXd apply_rope_transpose(const Eigen::MatrixXd& x, std::span<const Point2> positions,
                                     std::span<const RotaryPlane> planes) {
  return rotate(x, positions, planes, -1.0);
}

AttentionLayer AttentionLayer::random(int model_dim, int heads, int head_dim, double rope_base,
                                      Rng& rng) {
  if (model_dim <= 0 || heads <= 0 || head_dim <= 0) {
    throw ConfigError("attention layer needs positive dimensions");
  }
  AttentionLayer layer;
  layer.heads = heads;
  layer.head_dim = head_dim;
  const int inner = heads * head_dim;
  auto init = [&rng](int rows, int cols, double scale) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * rng.normal();
    }
    return m;
  };
  const double s_in = 1.0 / std::sqrt(static_cast<double>(model_dim));
  layer.wq = init(model_dim, inner, s_in);
  layer.wk = init(model_dim, inner, s_in);
  layer.wv = init(model_dim, inner, s_in);
  layer.wo = init(inner, model_dim, 1.0 / std::sqrt(static_cast<double>(inner)));
  layer.bo = Eigen::VectorXd::Zero(model_dim);
  layer.rope = default_rotary_planes(head_dim, rope_base);
  return layer;
}

Eigen::MatrixXd AttentionMap::mean() const {
  Eigen::MatrixXd m = heads.front();
  for (size_t h = 1; h < heads.size(); ++h) m += heads[h];
  return m / static_cast<double>(heads.size());
}

AttentionGrads AttentionGrads::zeros_like(const AttentionLayer& layer) {
  return {Eigen::MatrixXd::Zero(layer.wq.rows(), layer.wq.cols()),
          Eigen::MatrixXd::Zero(layer.wk.rows(), layer.wk.cols()),
          Eigen::MatrixXd::Zero(layer.wv.rows(), layer.wv.cols()),
          Eigen::MatrixXd::Zero(layer.wo.rows(), layer.wo.cols()),
          Eigen::VectorXd::Zero(layer.bo.size())};
}

AttentionOutput full_attention(const AttentionLayer& layer, const Eigen::MatrixXd& x,
                               std::span<const Point2> positions) {
  if (x.rows() == 0) throw DimensionError("full_attention: empty sequence");
  if (x.cols() != layer.model_dim()) {
    throw DimensionError("full_attention: embedding width " + std::to_string(x.cols()) +
                         " vs layer width " + std::to_string(layer.model_dim()));
  }
  const int d = layer.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionOutput out;
  out.input = x;
  out.positions.assign(positions.begin(), positions.end());
  out.concat.resize(x.rows(), layer.heads * d);
  for (int h = 0; h < layer.heads; ++h) {
    const Eigen::MatrixXd q = x * layer.wq.middleCols(h * d, d);
    const Eigen::MatrixXd k = x * layer.wk.middleCols(h * d, d);
    out.v.push_back(x * layer.wv.middleCols(h * d, d));
    out.q_rot.push_back(apply_rope(q, positions, layer.rope));
    out.k_rot.push_back(apply_rope(k, positions, layer.rope));

    Eigen::MatrixXd a = (out.q_rot.back() * out.k_rot.back().transpose()) * scale;
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      const double mx = a.row(r).maxCoeff();
      a.row(r) = (a.row(r).array() - mx).exp();
      a.row(r) /= a.row(r).sum();
    }
    out.concat.middleCols(h * d, d) = a * out.v.back();
    out.map.heads.push_back(std::move(a));
  }
  out.outputs = out.concat * layer.wo;
  out.outputs.rowwise() += layer.bo.transpose();
  return out;
}

AttentionOutput full_attention(const AttentionLayer& layer, const TokenSequence& sequence) {
  sequence.validate();
  return full_attention(layer, sequence.embeddings, sequence.positions);
}

Eigen::MatrixXd attention_backward(const AttentionLayer& layer, const AttentionOutput& fwd,
                                   const Eigen::MatrixXd& d_outputs,
                                   const std::vector<Eigen::MatrixXd>* d_maps,
                                   AttentionGrads& grads) {
  const int d = layer.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  grads.wo.noalias() += fwd.concat.transpose() * d_outputs;
  grads.bo += d_outputs.colwise().sum().transpose();
  const Eigen::MatrixXd d_concat = d_outputs * layer.wo.transpose();

  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(fwd.input.rows(), fwd.input.cols());
  for (int h = 0; h < layer.heads; ++h) {
    const Eigen::MatrixXd& a = fwd.map.heads[h];
    const Eigen::MatrixXd d_head = d_concat.middleCols(h * d, d);
    Eigen::MatrixXd d_a = d_head * fwd.v[h].transpose();
    if (d_maps && (*d_maps)[h].size() != 0) d_a += (*d_maps)[h];
    const Eigen::MatrixXd d_v = a.transpose() * d_head;

    // softmax backward, row-wise
    const Eigen::VectorXd dots = (d_a.array() * a.array()).rowwise().sum();
    Eigen::MatrixXd d_s = a.array() * (d_a.colwise() - dots).array();
    d_s *= scale;

    const Eigen::MatrixXd d_q =
        apply_rope_transpose(d_s * fwd.k_rot[h], fwd.positions, layer.rope);
    const Eigen::MatrixXd d_k =
        apply_rope_transpose(d_s.transpose() * fwd.q_rot[h], fwd.positions, layer.rope);

    grads.wq.middleCols(h * d, d).noalias() += fwd.input.transpose() * d_q;
    grads.wk.middleCols(h * d, d).noalias() += fwd.input.transpose() * d_k;
    grads.wv.middleCols(h * d, d).noalias() += fwd.input.transpose() * d_v;
    dx.noalias() += d_q * layer.wq.middleCols(h * d, d).transpose();
    dx.noalias() += d_k * layer.wk.middleCols(h * d, d).transpose();
    dx.noalias() += d_v * layer.wv.middleCols(h * d, d).transpose();
  }
  return dx;
}

SubAttention extract_sub_attention(const Eigen::MatrixXd& weights, const PanelLayout& layout,
                                   const BinaryMask& person_mask, const BinaryMask& garment_mask) {
  if (person_mask.shape() != layout.panel || garment_mask.shape() != layout.panel) {
    throw DimensionError("extract_sub_attention: masks must match the panel grid");
  }
  if (weights.rows() != layout.total_tokens || weights.cols() != layout.total_tokens) {
    throw DimensionError("extract_sub_attention: attention map does not match the layout");
  }
  SubAttention sub;
  sub.cost.query_shape = layout.panel;
  sub.cost.key_shape = layout.panel;
  sub.cost.query_locations = person_mask.locations();
  sub.cost.key_locations = garment_mask.locations();
  if (sub.cost.query_locations.empty() || sub.cost.key_locations.empty()) {
    throw EmptyDomainError("extract_sub_attention: empty person or garment index set");
  }
  const int rows = sub.cost.rows();
  const int cols = sub.cost.cols();
  sub.cost.values.resize(rows, cols);
  sub.residual.resize(rows);
  for (int i = 0; i < rows; ++i) {
    const int qi = layout.person_token(sub.cost.query_locations[i]);
    double block = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double v = weights(qi, layout.garment_token(sub.cost.key_locations[j]));
      sub.cost.values(i, j) = v;
      block += v;
    }
    sub.residual[i] = weights.row(qi).sum() - block;
  }
  return sub;
}

std::vector<SubAttention> extract_sub_attention(const AttentionMap& map, const PanelLayout& layout,
                                                const BinaryMask& person_mask,
                                                const BinaryMask& garment_mask,
                                                HeadReduce reduce) {
  std::vector<SubAttention> out;
  if (reduce == HeadReduce::kMean) {
    out.push_back(extract_sub_attention(map.mean(), layout, person_mask, garment_mask));
  } else {
    for (const auto& head : map.heads) {
      out.push_back(extract_sub_attention(head, layout, person_mask, garment_mask));
    }
  }
  return out;
}

CorrespondenceSet hard_correspondence(const SubAttention& sub) {
  if (sub.cost.rows() == 0 || sub.cost.cols() == 0) {
    throw EmptyDomainError("hard_correspondence: empty sub-attention");
  }
  CorrespondenceSet set;
  const Eigen::Index ld = sub.cost.values.rows();
  for (int r = 0; r < sub.cost.rows(); ++r) {
    const int best =
        argmax_lowest(sub.cost.values.data() + r, sub.cost.cols(), static_cast<int>(ld));
    set.entries.push_back({sub.cost.query_locations[r], to_point(sub.cost.key_locations[best]), true});
  }
  return set;
}

Point2 soft_argmax_row(std::span<const double> row, std::span<const Point2> locations,
                       bool renormalize) {
  if (row.size() != locations.size() || row.empty()) {
    throw DimensionError("soft_argmax_row: one location per weight required");
  }
  double mass = 0.0;
  Point2 acc;
  for (size_t j = 0; j < row.size(); ++j) {
    mass += row[j];
    acc.y += row[j] * locations[j].y;
    acc.x += row[j] * locations[j].x;
  }
  if (!(mass > 0.0)) throw DegenerateError("soft_argmax_row: row has no garment mass");
  if (renormalize) {
    acc.y /= mass;
    acc.x /= mass;
  }
  return acc;
}

void soft_argmax_row_backward(std::span<const double> row, std::span<const Point2> locations,
                              bool renormalize, const Point2& d_coord, std::span<double> d_row) {
  if (!renormalize) {
    for (size_t j = 0; j < row.size(); ++j) {
      d_row[j] += d_coord.y * locations[j].y + d_coord.x * locations[j].x;
    }
    return;
  }
  const Point2 c = soft_argmax_row(row, locations, true);
  const double mass = std::accumulate(row.begin(), row.end(), 0.0);
  for (size_t j = 0; j < row.size(); ++j) {
    d_row[j] += (d_coord.y * (locations[j].y - c.y) + d_coord.x * (locations[j].x - c.x)) / mass;
  }
}

std::vector<Point2> soft_correspondence(const SubAttention& sub, bool renormalize) {
  std::vector<Point2> locs;
  locs.reserve(sub.cost.key_locations.size());
  for (const auto& k : sub.cost.key_locations) locs.push_back(to_point(k));
  std::vector<Point2> out;
  std::vector<double> row(sub.cost.cols());
  for (int r = 0; r < sub.cost.rows(); ++r) {
    for (int j = 0; j < sub.cost.cols(); ++j) row[j] = sub.cost.values(r, j);
    out.push_back(soft_argmax_row(row, locs, renormalize));
  }
  return out;
}

double row_entropy(std::span<const double> p) {
  double sum = 0.0;
  double h = 0.0;
  for (double v : p) {
    if (v < 0.0 || !std::isfinite(v)) {
      throw InvalidDistributionError("row_entropy: negative or non-finite probability");
    }
    sum += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw InvalidDistributionError("row_entropy: probabilities sum to " + std::to_string(sum));
  }
  return h;
}

void row_entropy_backward(std::span<const double> p, double d_h, std::span<double> d_p) {
  constexpr double kFloor = std::numeric_limits<double>::min();
  for (size_t j = 0; j < p.size(); ++j) {
    d_p[j] -= d_h * (std::log(std::max(p[j], kFloor)) + 1.0);
  }
}

void softmax_row(std::span<const double> logits, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (size_t j = 0; j < logits.size(); ++j) {
    out[j] = std::exp(logits[j] - mx);
    sum += out[j];
  }
  for (double& v : out) v /= sum;
}

void softmax_row_backward(std::span<const double> p, std::span<const double> d_p,
                          std::span<double> d_logits) {
  double dot = 0.0;
  for (size_t j = 0; j < p.size(); ++j) dot += p[j] * d_p[j];
  for (size_t j = 0; j < p.size(); ++j) d_logits[j] += p[j] * (d_p[j] - dot);
}

void export_attention_map(const AttentionMap& map, const std::filesystem::path& directory,
                          const std::string& stem) {
  std::filesystem::create_directories(directory);
  for (size_t h = 0; h < map.heads.size(); ++h) {
    const auto& a = map.heads[h];
    DescriptorGrid grid(static_cast<int>(a.rows()), static_cast<int>(a.cols()), 1);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < a.cols(); ++j) grid(i, j, 0) = a(i, j);
    }
    write_cord(directory / (stem + "_h" + std::to_string(h) + ".cord"), grid);
  }
}

}  // namespace coral
