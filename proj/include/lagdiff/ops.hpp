#pragma once

#include <vector>

#include "lagdiff/tensor.hpp"

namespace lagdiff::ops {

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// Standard matrix product a[m,k] * b[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m,k] * b[n,k]^T; used for attention scores (rows dotted with rows).
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Per-pixel linear map x[c_in,h,w] with kernel w[c_out,c_in,1].
Tensor conv1x1(const Tensor& x, const Tensor& w);

Tensor add_row_bias(const Tensor& x, const Tensor& v);      // x[r,c] + v[c] per row
Tensor add_channel_bias(const Tensor& x, const Tensor& v);  // x[c,h,w] + v[c] per channel

// Row softmax with per-row max subtraction. The masked variant restricts each
// row to its first n_valid columns; the rest get exactly zero probability.
Tensor softmax_rows(const Tensor& x);
Tensor softmax_rows_masked(const Tensor& x, int n_valid);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor silu(const Tensor& x);

Tensor transpose2d(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor concat_cols(const Tensor& a, const Tensor& b);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// mean((a-b)^2) over all elements
Tensor mse(const Tensor& a, const Tensor& b);

// Embedding lookup; gradients scatter-add into the table rows.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
// Copy of x with row `positions[i]` replaced by v; gradients for replaced rows
// flow into v only.
Tensor replace_rows(const Tensor& x, const std::vector<int>& positions, const Tensor& v);

Tensor avg_pool2(const Tensor& x);          // [c,h,w] -> [c,h/2,w/2]
Tensor upsample_nearest2(const Tensor& x);  // [c,h,w] -> [c,2h,2w]

// out = (1-M) (x) f + M (x) f_prime with binary M[h,w] broadcast over channels,
// realized as an exact per-position select.
Tensor blend_masked(const Tensor& f, const Tensor& f_prime, const Tensor& mask);

// In-place clamp; inference-path utility, never recorded on a graph.
void clamp_values(Tensor& t, double lo, double hi);

}  // namespace lagdiff::ops
