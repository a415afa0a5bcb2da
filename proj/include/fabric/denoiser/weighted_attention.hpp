#pragma once

#include <span>

#include "fabric/tensor.hpp"

namespace fabric::denoiser {

// Single-head attention on plain matrices q[Lq, d], k[Lk, d], v[Lk, dv].

/// softmax(q k^T / sqrt(d)) v
Tensor standard_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Row-renormalised key weighting p'_j = w_j p_j / sum_k w_k p_k, returned as [Lq, Lk].
/// Rejects negative or non-finite weights and an all-zero weight vector.
Tensor weighted_attention_probs(const Tensor& q, const Tensor& k, std::span<const float> w);

/// p' v with p' from weighted_attention_probs.
Tensor weighted_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const float> w);

/// softmax(q k^T / sqrt(d) + log w) v, evaluated by the network's attention op.
Tensor log_weight_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const float> w);

}  // namespace fabric::denoiser
