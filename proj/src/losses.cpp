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

#include "coral/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "coral/attention.hpp"
#include "coral/errors.hpp"

namespace coral {

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw RangeError(std::string(what) + " must be finite");
}

void require_same_grid(const LatentGrid& a, const LatentGrid& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels()) {
    throw DimensionError(std::string(what) + ": latent shapes differ");
  }
}

Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& u) { return 1.0 / (1.0 + (-u).exp()); }

Eigen::MatrixXd silu(const Eigen::MatrixXd& u) {
  return (u.array() * sigmoid(u.array())).matrix();
}

Eigen::MatrixXd silu_grad(const Eigen::MatrixXd& u) {
  const Eigen::ArrayXXd s = sigmoid(u.array());
  return (s * (1.0 + u.array() * (1.0 - s))).matrix();
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {lambda_corr, lambda_ent, lambda_repa}) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and >= 0");
  }
}

double LossReport::recomputed_total(const LossWeights& w) const {
  double t = velocity + w.lambda_corr * corr + w.lambda_ent * ent;
  if (repa) t += w.lambda_repa * *repa;
  return t;
}

nlohmann::json LossReport::to_json() const {
  nlohmann::json j = {{"step", step},
                      {"velocity", velocity},
                      {"corr", corr},
                      {"ent", ent},
                      {"total", total},
                      {"reliable_queries", reliable_queries},
                      {"corr_skipped", corr_skipped}};
  j["repa"] = repa ? nlohmann::json(*repa) : nlohmann::json(nullptr);
  auto layers_json = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json e = {{"corr", l.corr}, {"ent", l.ent}};
    e["repa"] = l.repa ? nlohmann::json(*l.repa) : nlohmann::json(nullptr);
    layers_json.push_back(e);
  }
  j["layers"] = layers_json;
  return j;
}

LossReport LossReport::from_json(const nlohmann::json& j) {
  try {
    LossReport r;
    r.step = j.at("step").get<long>();
    r.velocity = j.at("velocity").get<double>();
    r.corr = j.at("corr").get<double>();
    r.ent = j.at("ent").get<double>();
    r.total = j.at("total").get<double>();
    r.reliable_queries = j.value("reliable_queries", 0);
    r.corr_skipped = j.value("corr_skipped", false);
    if (j.contains("repa") && !j["repa"].is_null()) r.repa = j["repa"].get<double>();
    for (const auto& e : j.value("layers", nlohmann::json::array())) {
      LayerLoss l{e.at("corr").get<double>(), e.at("ent").get<double>(), std::nullopt};
      if (e.contains("repa") && !e["repa"].is_null()) l.repa = e["repa"].get<double>();
      r.layers.push_back(l);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed loss report: ") + e.what());
  }
}

LatentGrid interpolate_latent(const LatentGrid& z0, const LatentGrid& noise, double t) {
  require_same_grid(z0, noise, "interpolate_latent");
  if (!(t >= 0.0 && t <= 1.0)) throw RangeError("interpolate_latent: t must lie in [0, 1]");
  LatentGrid out = z0;
  auto& d = out.data();
  const auto& n = noise.data();
  for (size_t i = 0; i < d.size(); ++i) d[i] = (1.0 - t) * d[i] + t * n[i];
  return out;
}

double velocity_loss(const LatentGrid& predicted, const LatentGrid& z0, const LatentGrid& noise) {
  require_same_grid(predicted, z0, "velocity_loss");
  require_same_grid(z0, noise, "velocity_loss");
  const auto& p = predicted.data();
  double sum = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double e = p[i] - (noise.data()[i] - z0.data()[i]);
    sum += e * e;
  }
  return sum / static_cast<double>(p.size());
}

CorrLoss corr_loss(std::span<const Point2> soft_matches, const CorrespondenceSet& gt) {
  if (soft_matches.size() != gt.entries.size()) {
    throw DimensionError("corr_loss: one soft match per correspondence entry required");
  }
  CorrLoss out;
  out.grad.assign(soft_matches.size(), Point2{});
  out.count = gt.reliable_count();
  if (out.count == 0) {
    out.skipped = true;
    return out;
  }
  const double n = out.count;
  for (size_t i = 0; i < soft_matches.size(); ++i) {
    if (!gt.entries[i].reliable) continue;
    const double dy = soft_matches[i].y - gt.entries[i].match.y;
    const double dx = soft_matches[i].x - gt.entries[i].match.x;
    out.value += (dy * dy + dx * dx) / n;
    out.grad[i] = {2.0 * dy / n, 2.0 * dx / n};
  }
  return out;
}

double entropy_loss(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw EmptyDomainError("entropy_loss: no rows");
  double sum = 0.0;
  for (const auto& r : rows) sum += row_entropy(r);
  return sum / static_cast<double>(rows.size());
}

double entropy_loss(const Eigen::MatrixXd& rows) {
  if (rows.rows() == 0) throw EmptyDomainError("entropy_loss: no rows");
  double sum = 0.0;
  std::vector<double> row(rows.cols());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j) row[j] = rows(i, j);
    sum += row_entropy(row);
  }
  return sum / static_cast<double>(rows.rows());
}

double coral_loss(double corr, double ent, const LossWeights& weights) {
  require_finite(corr, "corr");
  require_finite(ent, "ent");
  return weights.lambda_corr * corr + weights.lambda_ent * ent;
}

double total_loss(double velocity, double coral) { return velocity + coral; }

RepaHead RepaHead::random(int hidden_dim, int width, int descriptor_dim, Rng& rng) {
  auto init = [&rng](int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    const double s = 1.0 / std::sqrt(static_cast<double>(rows));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = s * rng.normal();
    }
    return m;
  };
  RepaHead h;
  h.w1 = init(hidden_dim, width);
  h.w2 = init(width, width);
  h.w3 = init(width, descriptor_dim);
  h.b1 = Eigen::VectorXd::Zero(width);
  h.b2 = Eigen::VectorXd::Zero(width);
  h.b3 = Eigen::VectorXd::Zero(descriptor_dim);
  return h;
}

RepaHead RepaHead::zeros_like(const RepaHead& o) {
  return {Eigen::MatrixXd::Zero(o.w1.rows(), o.w1.cols()),
          Eigen::MatrixXd::Zero(o.w2.rows(), o.w2.cols()),
          Eigen::MatrixXd::Zero(o.w3.rows(), o.w3.cols()),
          Eigen::VectorXd::Zero(o.b1.size()),
          Eigen::VectorXd::Zero(o.b2.size()),
          Eigen::VectorXd::Zero(o.b3.size())};
}

RepaHead::Cache RepaHead::forward(const Eigen::MatrixXd& hidden) const {
  Cache c;
  c.input = hidden;
  c.u1 = hidden * w1;
  c.u1.rowwise() += b1.transpose();
  c.g1 = silu(c.u1);
  c.u2 = c.g1 * w2;
  c.u2.rowwise() += b2.transpose();
  c.g2 = silu(c.u2);
  c.output = c.g2 * w3;
  c.output.rowwise() += b3.transpose();
  return c;
}

Eigen::MatrixXd RepaHead::backward(const Cache& c, const Eigen::MatrixXd& d_out,
                                   RepaHead& grads) const {
  grads.w3.noalias() += c.g2.transpose() * d_out;
  grads.b3 += d_out.colwise().sum().transpose();
  const Eigen::MatrixXd d_u2 = ((d_out * w3.transpose()).array() * silu_grad(c.u2).array()).matrix();
  grads.w2.noalias() += c.g1.transpose() * d_u2;
  grads.b2 += d_u2.colwise().sum().transpose();
  const Eigen::MatrixXd d_u1 = ((d_u2 * w2.transpose()).array() * silu_grad(c.u1).array()).matrix();
  grads.w1.noalias() += c.input.transpose() * d_u1;
  grads.b1 += d_u1.colwise().sum().transpose();
  return d_u1 * w1.transpose();
}

RepaAlignment repa_alignment(const Eigen::MatrixXd& projected, const Eigen::MatrixXd& targets) {
  if (projected.rows() != targets.rows() || projected.cols() != targets.cols()) {
    throw DimensionError("repa_alignment: patch count or width mismatch (" +
                         std::to_string(projected.rows()) + " vs " +
                         std::to_string(targets.rows()) + ")");
  }
  if (projected.rows() == 0) throw EmptyDomainError("repa_alignment: no patches");
  constexpr double kEps = 1e-12;
  const double k = static_cast<double>(projected.rows());
  RepaAlignment out;
  out.d_projected = Eigen::MatrixXd::Zero(projected.rows(), projected.cols());
  for (Eigen::Index i = 0; i < projected.rows(); ++i) {
    const Eigen::VectorXd a = projected.row(i).transpose();
    const Eigen::VectorXd b = targets.row(i).transpose();
    const double na = std::max(a.norm(), kEps);
    const double nb = b.norm();
    if (!(nb > 0.0)) throw DegenerateError("repa_alignment: zero-norm descriptor patch");
    const double cos = a.dot(b) / (na * nb);
    out.value -= cos / k;
    // d cos / d a = b / (|a||b|) - cos * a / |a|^2
    out.d_projected.row(i) = (-(b / (na * nb) - cos * a / (na * na)) / k).transpose();
  }
  return out;
}

double repa_loss(const std::vector<Eigen::MatrixXd>& hidden, const Eigen::MatrixXd& descriptors,
                 const std::vector<RepaHead>& heads) {
  if (hidden.size() != heads.size() || hidden.empty()) {
    throw DimensionError("repa_loss: one projection head per layer required");
  }
  double sum = 0.0;
  for (size_t l = 0; l < hidden.size(); ++l) {
    if (hidden[l].rows() != descriptors.rows()) {
      throw DimensionError("repa_loss: patch count mismatch");
    }
    sum += repa_alignment(heads[l].forward(hidden[l]).output, descriptors).value;
  }
  return sum / static_cast<double>(hidden.size());
}

Eigen::MatrixXd concat_descriptor_patches(const DescriptorGrid& garment,
                                          const DescriptorGrid& person) {
  if (garment.shape() != person.shape() || garment.channels() != person.channels()) {
    throw DimensionError("concat_descriptor_patches: descriptor grids differ in shape");
  }
  const int n = garment.shape().size();
  const int c = garment.channels();
  Eigen::MatrixXd out(2 * n, c);
  for (int i = 0; i < n; ++i) {
    const Coord p = garment.shape().coord(i);
    for (int k = 0; k < c; ++k) {
      out(i, k) = garment(p.y, p.x, k);
      out(n + i, k) = person(p.y, p.x, k);
    }
  }
  return out;
}

GradientCheckReport gradient_check(const std::function<double(std::span<const double>)>& loss,
                                   std::span<const double> parameters,
                                   std::span<const double> analytic, double step,
                                   double tolerance, double abs_floor,
                                   std::span<const long> indices,
                                   std::span<const ParameterBlock> blocks) {
  if (parameters.size() != analytic.size()) {
    throw DimensionError("gradient_check: gradient and parameter sizes differ");
  }
  GradientCheckReport report;
  report.relative_errors.assign(parameters.size(), 0.0);
  std::vector<long> todo(indices.begin(), indices.end());
  if (todo.empty()) {
    todo.resize(parameters.size());
    for (size_t i = 0; i < todo.size(); ++i) todo[i] = static_cast<long>(i);
  }
  std::vector<double> theta(parameters.begin(), parameters.end());
  for (long i : todo) {
    const double saved = theta[i];
    theta[i] = saved + step;
    const double up = loss(theta);
    theta[i] = saved - step;
    const double down = loss(theta);
    theta[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[i];
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      report.finite = false;
      report.relative_errors[i] = std::numeric_limits<double>::infinity();
    } else {
      const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      report.relative_errors[i] = std::abs(a - numeric) / denom;
    }
    if (report.worst_index < 0 || report.relative_errors[i] > report.max_relative_error) {
      report.max_relative_error = report.relative_errors[i];
      report.worst_index = i;
    }
  }
  for (const auto& b : blocks) {
    double m = 0.0;
    for (long i = b.offset; i < b.offset + b.size; ++i) m = std::max(m, report.relative_errors[i]);
    report.block_max.emplace_back(b.name, m);
  }
  report.passed = report.finite && report.max_relative_error < tolerance;
  return report;
}

}  // namespace coral
