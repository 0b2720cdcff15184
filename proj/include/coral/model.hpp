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

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "coral/attention.hpp"
#include "coral/grid.hpp"

namespace coral {

enum class PoseMode { kToken, kChannel, kNone };

const char* pose_mode_name(PoseMode mode);
PoseMode parse_pose_mode(const std::string& name);

struct ModelConfig {
  int height = 16;
  int width = 16;
  int channels = 4;
  int model_dim = 64;
  int heads = 2;
  int layers = 2;
  int ffn_dim = 128;
  PoseMode pose_mode = PoseMode::kToken;
  int context_tokens = 0;
  uint64_t seed = 0;
  double rope_base = 100.0;
  int time_features = 8;

  int head_dim() const { return model_dim / heads; }
  // z_t, z_diptych, m_diptych (+ pose diptych in channel mode).
  int input_features() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Conditioning canvases: z_diptych = [z_g | z_p * (1 - m_e)] and
// m_diptych = [0 | m_e].
struct ConditioningCanvas {
  LatentGrid z_diptych;
  DescriptorGrid m_diptych;  // one channel, 0 / 1
};

struct DiptychInputs {
  LatentGrid noisy;  // [interp(z_g) | interp(z_p)], h x 2w x c
  ConditioningCanvas conditioning;
};

LatentGrid join_panels(const LatentGrid& garment, const LatentGrid& person);
std::pair<LatentGrid, LatentGrid> split_canvas(const LatentGrid& canvas);

// `noise` is canvas shaped (h x 2w x c).
DiptychInputs build_diptych(const LatentGrid& z_g, const LatentGrid& z_p, const BinaryMask& m_e,
                            double t, const LatentGrid& noise);

// Noise only the region under m_p: ((1-t) z_p + t noise) * m_p + z_p * (1 - m_p).
LatentGrid masked_noising(const LatentGrid& z_p, const BinaryMask& m_p, double t,
                          const LatentGrid& noise);

// Raw input features for [context | garment | person], before the input
// projection. Person tokens sit at x + w so the canvas keeps its layout.
TokenSequence diptych_tokens(const DiptychInputs& inputs, int context_tokens);

// Token mode appends a pose segment sharing the person positions; channel
// mode widens every token with the pose diptych [0 | z_pose]; kNone is a no-op.
TokenSequence inject_pose(const TokenSequence& sequence, const LatentGrid& z_pose, PoseMode mode);

struct BlockParams {
  AttentionLayer attn;
  Eigen::MatrixXd w1;
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;
  Eigen::VectorXd b2;
};

struct ModelParams {
  Eigen::MatrixXd w_in;        // input_features x model_dim
  Eigen::VectorXd b_in;
  Eigen::MatrixXd w_time;      // time_features x model_dim
  Eigen::MatrixXd type_embed;  // 4 x model_dim, one row per segment kind
  Eigen::MatrixXd context;     // context_tokens x model_dim
  std::vector<BlockParams> blocks;
  Eigen::MatrixXd w_out;  // model_dim x channels
  Eigen::VectorXd b_out;

  static ModelParams init(const ModelConfig& config);
  static ModelParams zeros_like(const ModelParams& other);

  // Calls f(name, tensor) for every tensor in a fixed order.
  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("w_in", p.w_in);
    f("b_in", p.b_in);
    f("w_time", p.w_time);
    f("type_embed", p.type_embed);
    f("context", p.context);
    for (size_t l = 0; l < p.blocks.size(); ++l) {
      const std::string pre = "block" + std::to_string(l) + ".";
      auto& b = p.blocks[l];
      f(pre + "wq", b.attn.wq);
      f(pre + "wk", b.attn.wk);
      f(pre + "wv", b.attn.wv);
      f(pre + "wo", b.attn.wo);
      f(pre + "bo", b.attn.bo);
      f(pre + "w1", b.w1);
      f(pre + "b1", b.b1);
      f(pre + "w2", b.w2);
      f(pre + "b2", b.b2);
    }
    f("w_out", p.w_out);
    f("b_out", p.b_out);
  }

  long parameter_count() const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> values);
};

struct BlockCache {
  AttentionOutput attn;
  Eigen::MatrixXd x_mid;
  Eigen::MatrixXd u;
  Eigen::MatrixXd g;
  Eigen::MatrixXd x_out;
};

struct ForwardResult {
  TokenSequence tokens;  // raw features and positions
  PanelLayout layout;
  Eigen::RowVectorXd time_features;
  Eigen::MatrixXd x0;
  std::vector<BlockCache> blocks;
  Eigen::MatrixXd velocity;  // 2hw x c, garment tokens then person tokens

  // Output of block l restricted to canvas tokens (2hw x model_dim).
  Eigen::MatrixXd canvas_hidden(int layer) const;
  LatentGrid velocity_canvas() const;
};

struct ForwardGrads {
  Eigen::MatrixXd d_velocity;                          // 2hw x c
  std::vector<std::vector<Eigen::MatrixXd>> d_maps;    // [layer][head], may be empty
  std::vector<Eigen::MatrixXd> d_hidden;               // [layer], canvas rows, may be empty
};

Eigen::RowVectorXd timestep_features(double t, int count);

// Canvas-order matrix (garment tokens then person tokens) of a h x 2w grid.
Eigen::MatrixXd canvas_rows(const LatentGrid& canvas);
LatentGrid rows_to_canvas(const Eigen::MatrixXd& rows, int height, int width);

class DiptychModel {
 public:
  explicit DiptychModel(ModelConfig config);
  DiptychModel(ModelConfig config, ModelParams params);

  const ModelConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }

  TokenSequence assemble(const DiptychInputs& inputs, const LatentGrid& z_pose) const;
  ForwardResult forward(const TokenSequence& tokens, double t) const;
  ForwardResult forward(const DiptychInputs& inputs, const LatentGrid& z_pose, double t) const;
  // Accumulates into `grads`.
  void backward(const ForwardResult& fwd, const ForwardGrads& upstream, ModelParams& grads) const;

 private:
  ModelConfig config_;
  ModelParams params_;
};

}  // namespace coral
