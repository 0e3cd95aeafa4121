#pragma once
// Differentiable tensor operations. All functions build tape nodes when grad
// mode is enabled and any input requires gradients; otherwise they produce
// detached results. GEMM-shaped inner loops go through Eigen.

#include "vqe/tensor.hpp"

namespace vqe {

// ----- elementwise -----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sqrt_elem(const Tensor& a);
// Pass-through gradient inside [lo, hi] (inclusive), zero outside.
Tensor clamp(const Tensor& a, double lo, double hi);

// ----- reductions -----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ----- shape -----
Tensor reshape(const Tensor& a, const Shape& s);
Tensor permute(const Tensor& a, const std::vector<int>& order);
Tensor narrow(const Tensor& a, int dim, int start, int len);
Tensor concat(const std::vector<Tensor>& parts, int dim);
// Zero padding / cropping of the two trailing spatial dims of [N,C,H,W].
Tensor pad2d(const Tensor& a, int top, int bottom, int left, int right);
Tensor crop2d(const Tensor& a, int top, int left, int h, int w);

// ----- linear algebra -----
Tensor matmul(const Tensor& a, const Tensor& b);           // [M,K]x[K,N]
Tensor bmm(const Tensor& a, const Tensor& b);              // [B,M,K]x[B,K,N]
Tensor transpose(const Tensor& a);                         // [M,N] -> [N,M]
Tensor add_row_bias(const Tensor& a, const Tensor& bias);  // [..,F] + [F]

// ----- nn building blocks -----
// x [N,Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad, int dilation = 1);

// Deformable sampling over a stack of F single-channel frames.
// x [N,F,H,W]; offsets [N,F*K*2,H,W] ordered (f,k,{dy,dx}); w [Cout,F,K] with
// K = kh*kw base taps on a 3x3 grid; bias [Cout]. Zero outside the frame.
// With all offsets zero this equals conv2d(x, w as [Cout,F,3,3], pad=1).
Tensor deform_align(const Tensor& x, const Tensor& offsets, const Tensor& w,
                    const Tensor& bias);

// Half-pixel-center bilinear resize of [N,C,H,W] to (oh, ow).
Tensor bilinear_upsample(const Tensor& x, int oh, int ow);

Tensor avg_pool2d(const Tensor& x, int k);        // stride k, H%k==W%k==0
Tensor global_avg_pool(const Tensor& x);          // [N,C,H,W] -> [N,C]

// Normalization over the last dim with affine gain/bias [C].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);

// y[n,c,h,w] = x[n,c,h,w] * g[n,c]
Tensor scale_channels(const Tensor& x, const Tensor& g);

// scores [B,H,T,S] += bias [H,T,S] (broadcast over B).
Tensor add_bias_bht(const Tensor& scores, const Tensor& bias);
// scores [B,H,T,S] += mask [B,T,S] (broadcast over H; mask carries no grad).
Tensor add_mask_bts(const Tensor& scores, const Tensor& mask);

// y[r] = x[r, idx[r]] for x [R,C].
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);

// Rows scaled to unit L2 norm; throws ValidationError on a zero-norm row.
Tensor row_l2_normalize(const Tensor& x);

// y[.., m] = x[.., idx[m]] over the last dim; x [R,D] -> [R,M].
Tensor index_select_lastdim(const Tensor& x, const std::vector<int>& idx);

}  // namespace vqe
