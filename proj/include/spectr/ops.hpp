#pragma once

#include "spectr/tensor.hpp"

namespace spectr {

// Tape-recorded primitives. Feature maps are laid out [bands, height, width,
// channels] (channels contiguous); token batches are [locations, seq, dim].
// Every kernel parallelizes over independent output elements with a fixed
// per-element reduction order, so results are bit-identical for any thread
// count. Whole-tensor reductions honor the deterministic-mode flag.

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float c);
Tensor mul_scalar(const Tensor& a, float c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, float lo, float hi);

// x: [..., L, D], rows: [L, D], broadcast-added over leading dims
Tensor add_rows(const Tensor& x, const Tensor& rows);

// reductions
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// [B, ...] -> [...]: mean over the leading axis
Tensor mean_axis0(const Tensor& x);

// linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]
// x: [..., din], w: [din, dout], b: [dout] (optional, pass undefined Tensor to skip)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// convolutions over [L, H, W, C] maps, zero padding K/2, odd square kernels
// k: [Cout, Cin, Kh, Kw] (filters shared across bands) or
//    [L, Cout, Cin, Kh, Kw] (one filter set per band)
Tensor band_conv2d(const Tensor& f, const Tensor& k, const Tensor& bias);
// k: [Cout, Cin, Kl, Kh, Kw]
Tensor conv3d(const Tensor& f, const Tensor& k, const Tensor& bias);

// pooling / resampling over the three leading axes of [L, H, W, C]
Tensor maxpool3(const Tensor& f);   // ceil-mode halving, edge replication
Tensor upsample3(const Tensor& f);  // nearest-neighbor doubling
Tensor crop3(const Tensor& f, int L, int H, int W);

// concatenation along the channel (last) axis
Tensor concat_channels(const Tensor& a, const Tensor& b);

// normalization
// x: [..., D]; gamma/beta: [D]
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);
// x viewed as [bands, spatial, C] with statistics per (band, channel group);
// gamma/beta: [bands, C]. bands=1 gives a plain group norm over everything.
Tensor spectral_group_norm(const Tensor& x, int bands, const Tensor& gamma,
                           const Tensor& beta, int groups, float eps = 1e-5f);

// sequence gather/scatter between [L, H, W, C] maps and [H*W, L, C] batches
Tensor gather_sequences(const Tensor& f);
Tensor scatter_sequences(const Tensor& seq, int H, int W);

// alpha = 1 + logistic(raw), elementwise; keeps alpha strictly inside (1, 2)
Tensor alpha_from_raw(const Tensor& raw);

// Multi-head self-attention core: q/k/v [N, L, D], heads | D. Rows of
// QK^T/sqrt(d) are normalized per head by alpha-entmax when `alphas` is a
// defined [heads] tensor, by softmax otherwise. Returns the concatenated head
// outputs [N, L, D]; `weights_out`, when non-null, receives the attention
// distributions [N, heads, L, L] (not part of the differentiable graph).
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           int heads, const Tensor& alphas,
                           Tensor* weights_out = nullptr);

}  // namespace spectr
