#pragma once

// Differentiable operations over Graph nodes. Every op validates shapes and
// throws ShapeError with the offending shapes on mismatch.

#include <span>

#include "fabric/nn/graph.hpp"

namespace fabric::nn {

inline constexpr float kGroupNormEps = 1e-5f;

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, float s);
Var reshape(Graph& g, Var a, Shape shape);

/// y[..., out] = x[..., in] * w[out, in]^T + b[out]. `b` may be an invalid Var.
Var linear(Graph& g, Var x, Var w, Var b);
/// Stride-1 "same" convolution, x[B, Cin, H, W], w[Cout, Cin, k, k] with odd k.
Var conv2d(Graph& g, Var x, Var w, Var b);
/// Normalises over (C/groups, spatial...) per sample, then per-channel affine.
Var group_norm(Graph& g, Var x, Var gamma, Var beta, int groups, float eps = kGroupNormEps);
/// Normalises the last dimension.
Var layer_norm(Graph& g, Var x, Var gamma, Var beta, float eps = kGroupNormEps);
Var silu(Graph& g, Var x);
/// Softmax over the last dimension.
Var softmax(Graph& g, Var x);

/// Multi-head scaled dot-product attention with optional per-key weights.
/// q[B, Lq, D], k/v[B, Lk, D], D divisible by heads. `key_weights` is [B, Lk]
/// (non-differentiable); a key with weight w contributes log(w) to its logit,
/// so zero-weight keys are excluded and all-ones is plain attention.
Var attention(Graph& g, Var q, Var k, Var v, int heads, const Tensor* key_weights = nullptr);

/// Rows of table[V, D] gathered by ids -> [ids.size(), D].
Var embedding(Graph& g, Var table, std::span<const int> ids);
Var avg_pool2(Graph& g, Var x);
Var upsample2(Graph& g, Var x);
Var concat(Graph& g, Var a, Var b, int axis);
/// [B, A, C] -> [B, C, A]
Var transpose12(Graph& g, Var x);
/// x[B, C, ...] + e[B, C] broadcast over trailing dims.
Var add_channel_vector(Graph& g, Var x, Var e);
/// [B, C, ...] -> [B, C]
Var mean_spatial(Graph& g, Var x);
/// Row-wise L2 normalisation of x[B, D].
Var l2_normalize(Graph& g, Var x, float eps = 1e-12f);

Var mse_loss(Graph& g, Var pred, Var target);
/// Mean negative log-likelihood of `labels` under softmax(logits[B, K]).
Var cross_entropy(Graph& g, Var logits, std::span<const int> labels);
/// sum_i r_i * x_i
Var weighted_sum(Graph& g, Var x, const Tensor& r);
Var sum(Graph& g, Var x);

}  // namespace fabric::nn
