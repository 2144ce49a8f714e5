#pragma once
// Differentiable tensor ops. All are instantiated for float and double.

#include <span>
#include <vector>

#include "vsdf/nn/autograd.hpp"

namespace vsdf::nn {

// Elementwise.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& x, T s);
template <typename T> Var<T> silu(const Var<T>& x);
// y = amplitude * tanh(x)
template <typename T> Var<T> scaled_tanh(const Var<T>& x, T amplitude);
template <typename T> Var<T> exp(const Var<T>& x);
// Gradient passes only where lo < x < hi.
template <typename T> Var<T> clamp(const Var<T>& x, T lo, T hi);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

// Volumes (B, C, Z, Y, X).
// weight (Co, Ci, k, k, k); bias (Co) or undefined.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad);
template <typename T> Var<T> avg_pool2(const Var<T>& x);
template <typename T> Var<T> upsample_nearest2(const Var<T>& x);
// (B, C, Z, Y, X) -> (B, C*r^3, Z/r, Y/r, X/r); channel = ((c*r + dz)*r + dy)*r + dx.
template <typename T> Var<T> space_to_depth(const Var<T>& x, int r);
template <typename T> Var<T> depth_to_space(const Var<T>& x, int r);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> slice_channels(const Var<T>& x, int begin, int end);
template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta);
// x * (1 + film[:, :C]) + film[:, C:], film is (B, 2C).
template <typename T> Var<T> film_channels(const Var<T>& x, const Var<T>& film);
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
// (B, C, Z, Y, X) <-> (B, Z*Y*X, C).
template <typename T> Var<T> to_tokens(const Var<T>& x);
template <typename T> Var<T> from_tokens(const Var<T>& x, const Shape& spatial);

// Rows: the last dim is the feature dim.
// weight (Dout, Din); bias (Dout) or undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);
// Tokens (B, N, D) with film (B, 2D).
template <typename T> Var<T> film_tokens(const Var<T>& x, const Var<T>& film);
// x (B, N, D) + pos (N, D).
template <typename T> Var<T> add_positional(const Var<T>& x, const Var<T>& pos);
// Multi-head scaled dot-product attention on already projected q/k/v:
// q (B, Nq, D), k and v (B, Nk, D).
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads);
// table (V, D), ids (B*L) -> (B, L, D).
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids, int batch, int length);

// Reductions and losses (scalar results have shape {1}).
template <typename T> Var<T> mean_all(const Var<T>& x);
template <typename T> Var<T> sum_squares(const Var<T>& x);
template <typename T> Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target);
template <typename T> Var<T> l1_loss(const Var<T>& pred, const Tensor<T>& target);
// mean over elements of 0.5 * (mu^2 + exp(logvar) - 1 - logvar)
template <typename T> Var<T> kl_standard_normal(const Var<T>& mu, const Var<T>& logvar);
// logits (B, K); mean negative log-likelihood.
template <typename T> Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels);

}  // namespace vsdf::nn
