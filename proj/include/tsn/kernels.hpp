#pragma once

// Dense numeric kernels. The functions in tsn::kernels are the OpenMP-parallel
// production path; tsn::kernels::ref holds straightforward serial versions kept
// for testing and benchmarking. Parallel loops only partition independent output
// elements, so results do not depend on the thread count.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "tsn/tensor.hpp"

namespace tsn::kernels {

// Row-major matrix products. When `accumulate` is false C is overwritten.
// C(m×n) = A(m×k) · B(k×n)
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
// C(m×n) = A(m×k) · B(n×k)ᵀ
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
// C(m×n) = A(k×m)ᵀ · B(k×n)
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);

/// Stride-1 "same" convolution with an odd square kernel (pad = k/2).
/// x: (N, Ci, H, W), weight: (Co, Ci, k, k), bias: (1, Co, 1, 1) or empty.
Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Accumulates into whichever of dx / dweight / dbias are non-null.
void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Tensor* dx,
                     Tensor* dweight, Tensor* dbias);

/// 2×2 stride-2 max pool. `argmax` receives the flat input index of each output.
Tensor maxpool2_forward(const Tensor& x, std::vector<std::size_t>& argmax);
void maxpool2_backward(const Tensor& dy, std::span<const std::size_t> argmax, Tensor& dx);

/// Non-overlapping `factor`×`factor` average pool; dims must divide.
Tensor avgpool_forward(const Tensor& x, int factor);
void avgpool_backward(const Tensor& dy, int factor, Tensor& dx);

/// Corner-aligned bilinear resampling of one plane (align_corners semantics).
void bilinear_resize(const double* src, int sh, int sw, double* dst, int dh, int dw);
/// Adjoint of bilinear_resize; accumulates into dsrc.
void bilinear_resize_backward(const double* ddst, int dh, int dw, double* dsrc, int sh, int sw);

/// Plane-wise bilinear resize of every (n, c) plane.
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
void resize_bilinear_backward(const Tensor& dy, Tensor& dx);

/// 5×5 binomial blur with reflect-101 borders, sampled at even coordinates.
/// dst must hold (h/2)·(w/2) values; h and w must be even.
void pyramid_down(const double* src, int h, int w, double* dst);

/// The normalized 5×5 binomial kernel, outer product of [1,4,6,4,1]/16.
const std::array<std::array<double, 5>, 5>& binomial5x5();

/// Reflect-101 index folding (…c b | a b c … | b a …).
int reflect101(int i, int n);

namespace ref {

void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate);
Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);
void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Tensor* dx,
                     Tensor* dweight, Tensor* dbias);
Tensor maxpool2_forward(const Tensor& x);
Tensor avgpool_forward(const Tensor& x, int factor);
/// Direct (non-separable) 5×5 convolution followed by decimation.
void pyramid_down(const double* src, int h, int w, double* dst);

}  // namespace ref

}  // namespace tsn::kernels
