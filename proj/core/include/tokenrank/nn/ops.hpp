#pragma once

#include <cstddef>
#include <vector>

#include "tokenrank/nn/autograd.hpp"

namespace tokenrank::nn {

// Differentiable operations. Each records a backward closure only when grad
// mode is on and at least one input requires a gradient.

Var matmul(const Var& a, const Var& b);
/// x[m,k] * w[k,n] (+ bias[n] when defined).
Var linear(const Var& x, const Var& w, const Var& bias = Var());

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
/// x[m,n] + r[n] broadcast over rows.
Var add_row(const Var& x, const Var& r);
/// s[1] * x.
Var mul_scalar(const Var& x, const Var& s);
Var exp(const Var& x);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5F);
Var gelu(const Var& x);
/// Softmax / log-softmax over the last axis.
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
/// Numerically stable log(sigmoid(x)) = min(x,0) - log1p(exp(-|x|)).
Var log_sigmoid(const Var& x);

Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);
/// Rows `ids` of a rank-2 tensor, or elements of a rank-1 tensor.
Var gather_rows(const Var& x, const std::vector<std::size_t>& ids);
Var submatrix(const Var& x, const std::vector<std::size_t>& row_ids,
              const std::vector<std::size_t>& col_ids);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, std::size_t start, std::size_t count);

/// Mean over the last axis: [m,n] -> [m].
Var mean_cols(const Var& x);
Var sum(const Var& x);
Var l2_normalize_rows(const Var& x);
/// out[i] = x[i, cols[i]].
Var pick(const Var& x, const std::vector<std::size_t>& cols);

/// Multi-head scaled dot-product attention over `batch` independent sequences
/// of length `len`. `qkv` is [batch*len, 3d] with Q, K, V column blocks; the
/// result is [batch*len, d]. With `causal`, position i attends to j <= i.
/// When `cls_probs` is non-null it receives [batch, len]: head-averaged
/// attention of query row 0 of each sequence.
Var attention(const Var& qkv, std::size_t batch, std::size_t len, std::size_t heads, bool causal,
              Tensor* cls_probs = nullptr);

}  // namespace tokenrank::nn
