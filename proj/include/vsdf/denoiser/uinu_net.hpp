#pragma once
// UinU-Net noise predictor over latent grids.
//
// Outer path: stem conv, `depth` levels of 3x3x3 residual blocks with time
// FiLM, cross-attention over caption tokens at the two lowest resolutions,
// skip connections on the way up. Inner path: taps the stem features, runs
// per-cell (1x1x1) residual blocks and one transformer block over all cells,
// and is concatenated onto the last outer features before the output conv.

#include <cstdint>
#include <string>
#include <vector>

#include "vsdf/nn/params.hpp"

namespace vsdf::denoiser {

using nn::Tensor;
using nn::Var;

struct UinUNetConfig {
  int latent_side = 8;
  int in_channels = 4;
  int base_width = 32;
  int depth = 3;
  bool inner = true;
  int inner_blocks = 4;
  bool inner_attention = true;
  bool inout_concat = true;
  int time_embed_dim = 64;
  int cond_embed_dim = 32;
  int num_heads = 4;

  // Channel width at outer level i.
  int level_width(int i) const { return base_width * (i == 0 ? 1 : 2); }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// (B, dim): first half sin(t w_k), second half cos(t w_k), w_k from 1 down to 1e-4.
Tensor<double> timestep_embedding(const std::vector<int>& t, int dim);

template <typename T>
nn::ParamStore<T> init_denoiser_params(const UinUNetConfig& cfg, std::uint64_t seed);

// z_t (B, c, n, n, n), one timestep per item, cond (B, L, cond_embed_dim).
// Returns the noise prediction with the shape of z_t.
template <typename T>
Var<T> denoise(const UinUNetConfig& cfg, const nn::ParamStore<T>& ps, const Var<T>& z_t, const std::vector<int>& t,
               const Var<T>& cond);

// Pieces exposed for locality tests.
template <typename T>
Var<T> time_features(const UinUNetConfig& cfg, const nn::ParamStore<T>& ps, const std::vector<int>& t);
// Inner 1x1x1 residual stack on stem features (B, base_width, n, n, n).
template <typename T>
Var<T> inner_resnet(const UinUNetConfig& cfg, const nn::ParamStore<T>& ps, const Var<T>& stem, const Var<T>& temb);
// Full inner path: resnet, then the transformer block when enabled.
template <typename T>
Var<T> inner_path(const UinUNetConfig& cfg, const nn::ParamStore<T>& ps, const Var<T>& stem, const Var<T>& temb);

std::size_t count_params(const UinUNetConfig& cfg);

// Base width for a plain U-Net (inner disabled) whose parameter count is
// closest to `cfg`'s; only widths compatible with num_heads are considered.
int matched_unet_width(const UinUNetConfig& cfg);

}  // namespace vsdf::denoiser
