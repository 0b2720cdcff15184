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

#include "coral/model.hpp"

#include <cmath>

#include "coral/errors.hpp"
#include "coral/losses.hpp"
#include "coral/rng.hpp"

namespace coral {

namespace {

Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& u) { return 1.0 / (1.0 + (-u).exp()); }

Eigen::MatrixXd random_matrix(int rows, int cols, double scale, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * rng.normal();
  }
  return m;
}

int base_features(int channels) { return 2 * channels + 1; }

}  // namespace

const char* pose_mode_name(PoseMode mode) {
  switch (mode) {
    case PoseMode::kToken: return "token";
    case PoseMode::kChannel: return "channel";
    case PoseMode::kNone: return "none";
  }
  return "?";
}

PoseMode parse_pose_mode(const std::string& name) {
  for (auto m : {PoseMode::kToken, PoseMode::kChannel, PoseMode::kNone}) {
    if (name == pose_mode_name(m)) return m;
  }
  throw ConfigError("unknown pose mode '" + name + "'");
}

int ModelConfig::input_features() const {
  return base_features(channels) + (pose_mode == PoseMode::kChannel ? channels : 0);
}

void ModelConfig::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0) throw ConfigError("latent shape must be positive");
  if (model_dim <= 0 || heads <= 0 || layers <= 0 || ffn_dim <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
  if (head_dim() % 4 != 0) throw ConfigError("head dimension must be divisible by 4 for 2D RoPE");
  if (context_tokens < 0) throw ConfigError("context_tokens must be >= 0");
  if (time_features <= 0 || time_features % 2 != 0) {
    throw ConfigError("time_features must be a positive even number");
  }
  if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"height", height},       {"width", width},
          {"channels", channels},   {"model_dim", model_dim},
          {"heads", heads},         {"layers", layers},
          {"ffn_dim", ffn_dim},     {"pose_mode", pose_mode_name(pose_mode)},
          {"context_tokens", context_tokens}, {"seed", seed},
          {"rope_base", rope_base}, {"time_features", time_features}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.channels = j.at("channels").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.layers = j.at("layers").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.pose_mode = parse_pose_mode(j.at("pose_mode").get<std::string>());
    c.context_tokens = j.at("context_tokens").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.rope_base = j.at("rope_base").get<double>();
    c.time_features = j.at("time_features").get<int>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model config: ") + e.what());
  }
}

LatentGrid join_panels(const LatentGrid& garment, const LatentGrid& person) {
  if (garment.height() != person.height() || garment.channels() != person.channels() ||
      garment.width() != person.width()) {
    throw DimensionError("join_panels: panels must share h, w and c");
  }
  const int w = garment.width();
  LatentGrid canvas(garment.height(), 2 * w, garment.channels());
  for (int y = 0; y < garment.height(); ++y) {
    for (int x = 0; x < w; ++x) {
      std::copy(garment.at(y, x).begin(), garment.at(y, x).end(), canvas.at(y, x).begin());
      std::copy(person.at(y, x).begin(), person.at(y, x).end(), canvas.at(y, x + w).begin());
    }
  }
  return canvas;
}

std::pair<LatentGrid, LatentGrid> split_canvas(const LatentGrid& canvas) {
  if (canvas.width() % 2 != 0) throw DimensionError("split_canvas: odd canvas width");
  const int w = canvas.width() / 2;
  LatentGrid g(canvas.height(), w, canvas.channels());
  LatentGrid p(canvas.height(), w, canvas.channels());
  for (int y = 0; y < canvas.height(); ++y) {
    for (int x = 0; x < w; ++x) {
      std::copy(canvas.at(y, x).begin(), canvas.at(y, x).end(), g.at(y, x).begin());
      std::copy(canvas.at(y, x + w).begin(), canvas.at(y, x + w).end(), p.at(y, x).begin());
    }
  }
  return {std::move(g), std::move(p)};
}

DiptychInputs build_diptych(const LatentGrid& z_g, const LatentGrid& z_p, const BinaryMask& m_e,
                            double t, const LatentGrid& noise) {
  if (m_e.shape() != z_p.shape()) throw DimensionError("build_diptych: m_e shape mismatch");
  const LatentGrid clean = join_panels(z_g, z_p);
  if (noise.height() != clean.height() || noise.width() != clean.width() ||
      noise.channels() != clean.channels()) {
    throw DimensionError("build_diptych: noise must be canvas shaped");
  }
  DiptychInputs out;
  out.noisy = interpolate_latent(clean, noise, t);

  LatentGrid masked_person = z_p;
  for (int y = 0; y < z_p.height(); ++y) {
    for (int x = 0; x < z_p.width(); ++x) {
      if (m_e(y, x)) {
        for (double& v : masked_person.at(y, x)) v = 0.0;
      }
    }
  }
  out.conditioning.z_diptych = join_panels(z_g, masked_person);
  out.conditioning.m_diptych = DescriptorGrid(z_p.height(), 2 * z_p.width(), 1);
  for (int y = 0; y < z_p.height(); ++y) {
    for (int x = 0; x < z_p.width(); ++x) {
      out.conditioning.m_diptych(y, x + z_p.width(), 0) = m_e(y, x) ? 1.0 : 0.0;
    }
  }
  return out;
}

LatentGrid masked_noising(const LatentGrid& z_p, const BinaryMask& m_p, double t,
                          const LatentGrid& noise) {
  if (m_p.shape() != z_p.shape()) throw DimensionError("masked_noising: mask shape mismatch");
  const LatentGrid noisy = interpolate_latent(z_p, noise, t);
  LatentGrid out = z_p;
  for (int y = 0; y < z_p.height(); ++y) {
    for (int x = 0; x < z_p.width(); ++x) {
      if (m_p(y, x)) {
        std::copy(noisy.at(y, x).begin(), noisy.at(y, x).end(), out.at(y, x).begin());
      }
    }
  }
  return out;
}

TokenSequence diptych_tokens(const DiptychInputs& inputs, int context_tokens) {
  const int h = inputs.noisy.height();
  const int w = inputs.noisy.width() / 2;
  const int c = inputs.noisy.channels();
  const int hw = h * w;
  TokenSequence seq;
  seq.segments = {{SegmentKind::kContext, 0, context_tokens, std::nullopt},
                  {SegmentKind::kGarment, context_tokens, hw, GridShape{h, w}},
                  {SegmentKind::kPerson, context_tokens + hw, hw, GridShape{h, w}}};
  const int n = context_tokens + 2 * hw;
  seq.embeddings = Eigen::MatrixXd::Zero(n, base_features(c));
  seq.positions.assign(n, Point2{});
  for (int panel = 0; panel < 2; ++panel) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int cx = x + panel * w;
        const int row = context_tokens + panel * hw + y * w + x;
        for (int k = 0; k < c; ++k) {
          seq.embeddings(row, k) = inputs.noisy(y, cx, k);
          seq.embeddings(row, c + k) = inputs.conditioning.z_diptych(y, cx, k);
        }
        seq.embeddings(row, 2 * c) = inputs.conditioning.m_diptych(y, cx, 0);
        seq.positions[row] = {double(y), double(cx)};
      }
    }
  }
  return seq;
}

TokenSequence inject_pose(const TokenSequence& sequence, const LatentGrid& z_pose, PoseMode mode) {
  if (mode == PoseMode::kNone) return sequence;
  const Segment* person = sequence.find(SegmentKind::kPerson);
  const Segment* garment = sequence.find(SegmentKind::kGarment);
  if (!person || !person->grid || !garment) throw ConfigError("inject_pose: no person segment");
  if (sequence.find(SegmentKind::kPose)) throw ConfigError("inject_pose: pose already present");
  if (z_pose.shape() != *person->grid) throw DimensionError("inject_pose: pose grid mismatch");
  const int hw = person->count;
  const int c = z_pose.channels();
  const int w = person->grid->width;

  TokenSequence out = sequence;
  if (mode == PoseMode::kToken) {
    if (c > sequence.embeddings.cols()) throw DimensionError("inject_pose: pose wider than tokens");
    const int n = sequence.total_tokens();
    out.embeddings.conservativeResize(n + hw, Eigen::NoChange);
    out.embeddings.bottomRows(hw).setZero();
    out.positions.resize(n + hw);
    for (int i = 0; i < hw; ++i) {
      const Coord p{i / w, i % w};
      for (int k = 0; k < c; ++k) out.embeddings(n + i, k) = z_pose(p.y, p.x, k);
      out.positions[n + i] = sequence.positions[person->offset + i];
    }
    out.segments.push_back({SegmentKind::kPose, n, hw, person->grid});
  } else {
    const Eigen::Index f = sequence.embeddings.cols();
    out.embeddings.conservativeResize(Eigen::NoChange, f + c);
    out.embeddings.rightCols(c).setZero();
    for (int i = 0; i < hw; ++i) {
      const Coord p{i / w, i % w};
      for (int k = 0; k < c; ++k) out.embeddings(person->offset + i, f + k) = z_pose(p.y, p.x, k);
    }
  }
  return out;
}

ModelParams ModelParams::init(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int d = config.model_dim;
  const int base = base_features(config.channels);
  ModelParams p;
  p.w_in = Eigen::MatrixXd::Zero(config.input_features(), d);
  p.w_in.topRows(base) = random_matrix(base, d, 1.0 / std::sqrt(double(base)), rng);
  // pose-diptych rows of a channel-concat model start at zero
  p.b_in = Eigen::VectorXd::Zero(d);
  p.w_time = random_matrix(config.time_features, d, 1.0 / std::sqrt(double(config.time_features)), rng);
  p.type_embed = random_matrix(4, d, 0.5, rng);
  p.context = random_matrix(config.context_tokens, d, 0.5, rng);
  for (int l = 0; l < config.layers; ++l) {
    BlockParams b;
    b.attn = AttentionLayer::random(d, config.heads, config.head_dim(), config.rope_base, rng);
    b.w1 = random_matrix(d, config.ffn_dim, 1.0 / std::sqrt(double(d)), rng);
    b.b1 = Eigen::VectorXd::Zero(config.ffn_dim);
    b.w2 = random_matrix(config.ffn_dim, d, 1.0 / std::sqrt(double(config.ffn_dim)), rng);
    b.b2 = Eigen::VectorXd::Zero(d);
    p.blocks.push_back(std::move(b));
  }
  p.w_out = random_matrix(d, config.channels, 1.0 / std::sqrt(double(d)), rng);
  p.b_out = Eigen::VectorXd::Zero(config.channels);
  return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
  ModelParams z = other;
  visit(z, [](const std::string&, auto& m) { m.setZero(); });
  return z;
}

long ModelParams::parameter_count() const {
  long n = 0;
  visit(*this, [&n](const std::string&, const auto& m) { n += static_cast<long>(m.size()); });
  return n;
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  visit(*this, [&out](const std::string&, const auto& m) {
    out.insert(out.end(), m.data(), m.data() + m.size());
  });
  return out;
}

void ModelParams::unflatten(std::span<const double> values) {
  if (static_cast<long>(values.size()) != parameter_count()) {
    throw DimensionError("unflatten: parameter count mismatch");
  }
  size_t pos = 0;
  visit(*this, [&](const std::string&, auto& m) {
    std::copy(values.begin() + pos, values.begin() + pos + m.size(), m.data());
    pos += m.size();
  });
}

Eigen::MatrixXd ForwardResult::canvas_hidden(int layer) const {
  return blocks[layer].x_out.middleRows(layout.garment_offset, 2 * layout.panel.size());
}

LatentGrid ForwardResult::velocity_canvas() const {
  return rows_to_canvas(velocity, layout.panel.height, layout.panel.width);
}

Eigen::RowVectorXd timestep_features(double t, int count) {
  Eigen::RowVectorXd f(count);
  for (int k = 0; k < count / 2; ++k) {
    f(2 * k) = std::sin(M_PI * (k + 1) * t);
    f(2 * k + 1) = std::cos(M_PI * (k + 1) * t);
  }
  return f;
}

Eigen::MatrixXd canvas_rows(const LatentGrid& canvas) {
  const int h = canvas.height();
  const int w = canvas.width() / 2;
  const int c = canvas.channels();
  Eigen::MatrixXd rows(2 * h * w, c);
  for (int panel = 0; panel < 2; ++panel) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int k = 0; k < c; ++k) rows(panel * h * w + y * w + x, k) = canvas(y, x + panel * w, k);
      }
    }
  }
  return rows;
}

LatentGrid rows_to_canvas(const Eigen::MatrixXd& rows, int height, int width) {
  const int c = static_cast<int>(rows.cols());
  LatentGrid canvas(height, 2 * width, c);
  for (int panel = 0; panel < 2; ++panel) {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        for (int k = 0; k < c; ++k) {
          canvas(y, x + panel * width, k) = rows(panel * height * width + y * width + x, k);
        }
      }
    }
  }
  return canvas;
}

DiptychModel::DiptychModel(ModelConfig config)
    : config_(config), params_(ModelParams::init(config)) {}

DiptychModel::DiptychModel(ModelConfig config, ModelParams params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  if (params_.w_in.rows() != config_.input_features() || params_.blocks.size() != size_t(config_.layers)) {
    throw ConfigError("parameters do not match model config");
  }
}

TokenSequence DiptychModel::assemble(const DiptychInputs& inputs, const LatentGrid& z_pose) const {
  if (inputs.noisy.height() != config_.height || inputs.noisy.width() != 2 * config_.width ||
      inputs.noisy.channels() != config_.channels) {
    throw DimensionError("model inputs do not match the configured latent shape");
  }
  return inject_pose(diptych_tokens(inputs, config_.context_tokens), z_pose, config_.pose_mode);
}

ForwardResult DiptychModel::forward(const DiptychInputs& inputs, const LatentGrid& z_pose,
                                    double t) const {
  return forward(assemble(inputs, z_pose), t);
}

ForwardResult DiptychModel::forward(const TokenSequence& tokens, double t) const {
  tokens.validate();
  if (tokens.embeddings.cols() != config_.input_features()) {
    throw DimensionError("token features do not match the input projection");
  }
  const auto& p = params_;
  ForwardResult r;
  r.tokens = tokens;
  r.layout = tokens.panel_layout();
  r.time_features = timestep_features(t, config_.time_features);

  const int base = base_features(config_.channels);
  const int extra = config_.input_features() - base;
  r.x0 = tokens.embeddings.leftCols(base) * p.w_in.topRows(base);
  if (extra > 0) r.x0 += tokens.embeddings.rightCols(extra) * p.w_in.bottomRows(extra);
  const Eigen::RowVectorXd shared = p.b_in.transpose() + r.time_features * p.w_time;
  r.x0.rowwise() += shared;
  for (const auto& s : tokens.segments) {
    if (s.count == 0) continue;
    r.x0.middleRows(s.offset, s.count).rowwise() += p.type_embed.row(static_cast<int>(s.kind));
    if (s.kind == SegmentKind::kContext) r.x0.middleRows(s.offset, s.count) += p.context;
  }

  const Eigen::MatrixXd* x = &r.x0;
  for (const auto& b : p.blocks) {
    BlockCache c;
    c.attn = full_attention(b.attn, *x, tokens.positions);
    c.x_mid = *x + c.attn.outputs;
    c.u = c.x_mid * b.w1;
    c.u.rowwise() += b.b1.transpose();
    c.g = (c.u.array() * sigmoid(c.u.array())).matrix();
    c.x_out = c.x_mid + c.g * b.w2;
    c.x_out.rowwise() += b.b2.transpose();
    r.blocks.push_back(std::move(c));
    x = &r.blocks.back().x_out;
  }
  r.velocity = x->middleRows(r.layout.garment_offset, 2 * r.layout.panel.size()) * p.w_out;
  r.velocity.rowwise() += p.b_out.transpose();
  return r;
}

void DiptychModel::backward(const ForwardResult& fwd, const ForwardGrads& up,
                            ModelParams& grads) const {
  const auto& p = params_;
  const int canvas = 2 * fwd.layout.panel.size();
  const int off = fwd.layout.garment_offset;
  const Eigen::MatrixXd& x_last = fwd.blocks.empty() ? fwd.x0 : fwd.blocks.back().x_out;

  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(x_last.rows(), x_last.cols());
  if (up.d_velocity.size() != 0) {
    grads.w_out.noalias() += x_last.middleRows(off, canvas).transpose() * up.d_velocity;
    grads.b_out += up.d_velocity.colwise().sum().transpose();
    dx.middleRows(off, canvas) = up.d_velocity * p.w_out.transpose();
  }

  for (int l = static_cast<int>(p.blocks.size()) - 1; l >= 0; --l) {
    const auto& b = p.blocks[l];
    const auto& c = fwd.blocks[l];
    auto& gb = grads.blocks[l];
    if (l < static_cast<int>(up.d_hidden.size()) && up.d_hidden[l].size() != 0) {
      dx.middleRows(off, canvas) += up.d_hidden[l];
    }
    // feed-forward
    gb.w2.noalias() += c.g.transpose() * dx;
    gb.b2 += dx.colwise().sum().transpose();
    const Eigen::ArrayXXd s = sigmoid(c.u.array());
    const Eigen::MatrixXd d_u =
        ((dx * b.w2.transpose()).array() * (s * (1.0 + c.u.array() * (1.0 - s)))).matrix();
    gb.w1.noalias() += c.x_mid.transpose() * d_u;
    gb.b1 += d_u.colwise().sum().transpose();
    const Eigen::MatrixXd d_mid = dx + d_u * b.w1.transpose();
    // attention
    const std::vector<Eigen::MatrixXd>* d_maps =
        l < static_cast<int>(up.d_maps.size()) && !up.d_maps[l].empty() ? &up.d_maps[l] : nullptr;
    AttentionGrads ag;
    auto swap_grads = [&] {
      ag.wq.swap(gb.attn.wq);
      ag.wk.swap(gb.attn.wk);
      ag.wv.swap(gb.attn.wv);
      ag.wo.swap(gb.attn.wo);
      ag.bo.swap(gb.attn.bo);
    };
    swap_grads();
    dx = d_mid + attention_backward(b.attn, c.attn, d_mid, d_maps, ag);
    swap_grads();
  }

  const int base = base_features(config_.channels);
  const int extra = config_.input_features() - base;
  grads.w_in.topRows(base).noalias() += fwd.tokens.embeddings.leftCols(base).transpose() * dx;
  if (extra > 0) {
    grads.w_in.bottomRows(extra).noalias() += fwd.tokens.embeddings.rightCols(extra).transpose() * dx;
  }
  const Eigen::RowVectorXd col = dx.colwise().sum();
  grads.b_in += col.transpose();
  grads.w_time.noalias() += fwd.time_features.transpose() * col;
  for (const auto& s : fwd.tokens.segments) {
    if (s.count == 0) continue;
    const Eigen::MatrixXd block = dx.middleRows(s.offset, s.count);
    grads.type_embed.row(static_cast<int>(s.kind)) += block.colwise().sum();
    if (s.kind == SegmentKind::kContext) grads.context += block;
  }
}

}  // namespace coral
