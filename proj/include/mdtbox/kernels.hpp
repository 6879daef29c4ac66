#pragma once

#include <cstddef>

// Dense math kernels shared by every network in the project. Each kernel has
// two implementations with identical semantics: the OpenMP-parallel version
// in mdtbox::kern (what the models call) and a plain serial version in
// mdtbox::kern::ref kept as the reference for tests and for the kernel
// benchmark. Parallel loops split work so that each output element is written
// by exactly one thread with a fixed inner summation order, so results do not
// depend on the thread count.
//
// Conventions: row-major storage. Activations are [rows, C] with rows usually
// flattening batch and sequence. Weights are [out, in] so a forward matmul is
// a dot product of contiguous rows. Backward kernels accumulate (+=) into
// their gradient outputs.

namespace mdtbox::kern {

// y[M,N] = x[M,K] . w[N,K]^T (+ bias[N] when bias != nullptr)
void matmul_fwd(double* y, const double* x, const double* w, const double* bias,
                int M, int K, int N);
// dx[M,K] += dy[M,N] . w[N,K]
void matmul_bwd_input(double* dx, const double* dy, const double* w,
                      int M, int K, int N);
// dw[N,K] += dy[M,N]^T . x[M,K];  dbias[N] += column sums of dy (when != nullptr)
void matmul_bwd_params(double* dw, double* dbias, const double* dy, const double* x,
                       int M, int K, int N);

// Row-wise layernorm without affine terms (scale/shift come from AdaLN
// modulation instead). mean/rstd are [R], saved for backward.
void layernorm_fwd(double* y, double* mean, double* rstd, const double* x,
                   int R, int C, double eps = 1e-6);
void layernorm_bwd(double* dx, const double* dy, const double* x,
                   const double* mean, const double* rstd, int R, int C);

// y = x * (1 + scale) + shift with per-sample vectors [B,C] broadcast over L
// token rows per sample.
void modulate_fwd(double* y, const double* x, const double* shift, const double* scale,
                  int B, int L, int C);
void modulate_bwd(double* dx, double* dshift, double* dscale, const double* dy,
                  const double* x, const double* scale, int B, int L, int C);

// y = x + gate (.) h with a per-sample gate [B,C]  (AdaLN-Zero residual)
void gate_add_fwd(double* y, const double* x, const double* gate, const double* h,
                  int B, int L, int C);
void gate_add_bwd(double* dx, double* dgate, double* dh, const double* dy,
                  const double* gate, const double* h, int B, int L, int C);

// tanh-approximation GELU
void gelu_fwd(double* y, const double* x, size_t n);
void gelu_bwd(double* dx, const double* dy, const double* x, size_t n);
void silu_fwd(double* y, const double* x, size_t n);
void silu_bwd(double* dx, const double* dy, const double* x, size_t n);

// Bidirectional multi-head attention over packed qkv [B,L,3D], D = H * head.
// out is [B,L,D]; att (post-softmax) is [B,H,L,L], saved for backward.
void attention_fwd(double* out, double* att, const double* qkv,
                   int B, int L, int D, int H);
// scratch must hold B*H*L*L doubles.
void attention_bwd(double* dqkv, const double* dout, const double* att,
                   const double* qkv, double* scratch, int B, int L, int D, int H);

// Token gather/scatter for the masked training path. idx rows must be unique
// for scatter_add_rows to stay deterministic under parallel execution.
void gather_rows(double* y, const double* x, const int* idx, int R, int C);
void scatter_add_rows(double* y, const double* x, const int* idx, int R, int C);

void add_inplace(double* y, const double* x, size_t n);
void scale_inplace(double* y, double a, size_t n);

// Conv kernels for the learned codec, CHW layout.
// 3x3 stride-2 pad-1 convolution: [Cin,H,W] -> [Cout,H/2,W/2], w [Cout,Cin,3,3].
void conv3x3s2_fwd(double* y, const double* x, const double* w, const double* bias,
                   int Cin, int H, int W, int Cout);
void conv3x3s2_bwd(double* dx, double* dw, double* dbias, const double* dy,
                   const double* x, const double* w, int Cin, int H, int W, int Cout);
// 2x2 stride-2 transposed convolution: [Cin,h,w] -> [Cout,2h,2w], weights
// [Cin,Cout,2,2]; output blocks do not overlap.
void deconv2x2s2_fwd(double* y, const double* x, const double* w, const double* bias,
                     int Cin, int h, int w_, int Cout);
void deconv2x2s2_bwd(double* dx, double* dw, double* dbias, const double* dy,
                     const double* x, const double* w, int Cin, int h, int w_, int Cout);

namespace ref {

void matmul_fwd(double* y, const double* x, const double* w, const double* bias,
                int M, int K, int N);
void matmul_bwd_input(double* dx, const double* dy, const double* w,
                      int M, int K, int N);
void matmul_bwd_params(double* dw, double* dbias, const double* dy, const double* x,
                       int M, int K, int N);
void layernorm_fwd(double* y, double* mean, double* rstd, const double* x,
                   int R, int C, double eps = 1e-6);
void layernorm_bwd(double* dx, const double* dy, const double* x,
                   const double* mean, const double* rstd, int R, int C);
void modulate_fwd(double* y, const double* x, const double* shift, const double* scale,
                  int B, int L, int C);
void modulate_bwd(double* dx, double* dshift, double* dscale, const double* dy,
                  const double* x, const double* scale, int B, int L, int C);
void gate_add_fwd(double* y, const double* x, const double* gate, const double* h,
                  int B, int L, int C);
void gate_add_bwd(double* dx, double* dgate, double* dh, const double* dy,
                  const double* gate, const double* h, int B, int L, int C);
void gelu_fwd(double* y, const double* x, size_t n);
void gelu_bwd(double* dx, const double* dy, const double* x, size_t n);
void silu_fwd(double* y, const double* x, size_t n);
void silu_bwd(double* dx, const double* dy, const double* x, size_t n);
void attention_fwd(double* out, double* att, const double* qkv,
                   int B, int L, int D, int H);
void attention_bwd(double* dqkv, const double* dout, const double* att,
                   const double* qkv, double* scratch, int B, int L, int D, int H);

} // namespace ref

} // namespace mdtbox::kern
