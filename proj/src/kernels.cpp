#include "tsn/kernels.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace tsn::kernels {

namespace {

constexpr int kMr = 4;
constexpr int kNr = 16;
constexpr long kParallelWork = 1L << 15;

// Register tile of C: MR rows × NR columns accumulated over the full k range.
// op(A)(i,p) = a[i*a_row + p*a_col]; B is row-major with leading dimension ldb.
template <int MR, int NR>
inline void tile(int k, const double* a, long a_row, long a_col, const double* b, long ldb, double* c,
                 long ldc, bool accumulate) {
  double t[MR][NR] = {};
  for (int p = 0; p < k; ++p) {
    const double* bp = b + p * ldb;
    for (int r = 0; r < MR; ++r) {
      const double av = a[r * a_row + p * a_col];
#pragma omp simd
      for (int j = 0; j < NR; ++j) t[r][j] += av * bp[j];
    }
  }
  for (int r = 0; r < MR; ++r) {
    double* cr = c + r * ldc;
    for (int j = 0; j < NR; ++j) cr[j] = accumulate ? cr[j] + t[r][j] : t[r][j];
  }
}

template <int MR>
void tile_row_block(int n, int k, const double* a, long a_row, long a_col, const double* b, double* c,
                    bool accumulate) {
  int j = 0;
  for (; j + kNr <= n; j += kNr) tile<MR, kNr>(k, a, a_row, a_col, b + j, n, c + j, n, accumulate);
  for (; j + 4 <= n; j += 4) tile<MR, 4>(k, a, a_row, a_col, b + j, n, c + j, n, accumulate);
  for (; j < n; ++j) tile<MR, 1>(k, a, a_row, a_col, b + j, n, c + j, n, accumulate);
}

// C(m×n) (+)= op(A) · B.
void gemm_rows(int m, int n, int k, const double* a, long a_row, long a_col, const double* b,
               double* c, bool accumulate) {
  const int row_blocks = (m + kMr - 1) / kMr;
  const long work = static_cast<long>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int rb = 0; rb < row_blocks; ++rb) {
    const int i0 = rb * kMr;
    const double* ai = a + i0 * a_row;
    double* ci = c + static_cast<long>(i0) * n;
    if (m - i0 >= kMr) {
      tile_row_block<kMr>(n, k, ai, a_row, a_col, b, ci, accumulate);
    } else {
      for (int r = 0; r < m - i0; ++r) {
        tile_row_block<1>(n, k, ai + r * a_row, a_row, a_col, b, ci + static_cast<long>(r) * n, accumulate);
      }
    }
  }
}

// MR×NR block of dot products between rows of A and rows of B (both length k).
template <int MR, int NR>
inline void dot_tile(int k, const double* a, const double* b, double* c, long ldc, bool accumulate) {
  constexpr int kLanes = 8;
  double t[MR][NR][kLanes] = {};
  int p = 0;
  for (; p + kLanes <= k; p += kLanes) {
    for (int r = 0; r < MR; ++r) {
      const double* ar = a + static_cast<long>(r) * k + p;
      for (int s = 0; s < NR; ++s) {
        const double* bs = b + static_cast<long>(s) * k + p;
#pragma omp simd
        for (int l = 0; l < kLanes; ++l) t[r][s][l] += ar[l] * bs[l];
      }
    }
  }
  for (int r = 0; r < MR; ++r) {
    for (int s = 0; s < NR; ++s) {
      double sum = 0.0;
      for (int l = 0; l < kLanes; ++l) sum += t[r][s][l];
      for (int q = p; q < k; ++q) sum += a[static_cast<long>(r) * k + q] * b[static_cast<long>(s) * k + q];
      double& dst = c[r * ldc + s];
      dst = accumulate ? dst + sum : sum;
    }
  }
}

void im2col3(const double* x, int ci, int h, int w, double* col) {
  const long hw = static_cast<long>(h) * w;
#pragma omp parallel for schedule(static) if (ci * hw * 9 > kParallelWork)
  for (int c = 0; c < ci; ++c) {
    const double* src = x + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = col + (static_cast<long>(c) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          double* drow = dst + static_cast<long>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(drow, drow + w, 0.0);
            continue;
          }
          const double* srow = src + static_cast<long>(sy) * w;
          const int x0 = std::max(0, 1 - kx);
          const int x1 = std::min(w, w + 1 - kx);
          for (int xx = 0; xx < x0; ++xx) drow[xx] = 0.0;
          for (int xx = x0; xx < x1; ++xx) drow[xx] = srow[xx + kx - 1];
          for (int xx = x1; xx < w; ++xx) drow[xx] = 0.0;
        }
      }
    }
  }
}

void col2im3_add(const double* col, int ci, int h, int w, double* dx) {
  const long hw = static_cast<long>(h) * w;
#pragma omp parallel for schedule(static) if (ci * hw * 9 > kParallelWork)
  for (int c = 0; c < ci; ++c) {
    double* dst = dx + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* src = col + (static_cast<long>(c) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const double* srow = src + static_cast<long>(y) * w;
          double* drow = dst + static_cast<long>(sy) * w;
          const int x0 = std::max(0, 1 - kx);
          const int x1 = std::min(w, w + 1 - kx);
          for (int xx = x0; xx < x1; ++xx) drow[xx + kx - 1] += srow[xx];
        }
      }
    }
  }
}

void check_conv_shapes(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const int k = weight.h();
  if (k != weight.w() || (k != 1 && k != 3)) {
    throw DimensionError("conv2d: only 1x1 and 3x3 kernels are supported, got " + weight.shape().str());
  }
  if (weight.c() != x.c()) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.c()) + " vs weight " +
                         weight.shape().str());
  }
  if (!bias.empty() && !(bias.shape() == Shape{1, weight.n(), 1, 1})) {
    throw DimensionError("conv2d: bias shape " + bias.shape().str());
  }
}

}  // namespace

void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  gemm_rows(m, n, k, a, k, 1, b, c, accumulate);
}

void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  gemm_rows(m, n, k, a, 1, m, b, c, accumulate);
}

void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  const int row_blocks = (m + 3) / 4;
  const long work = static_cast<long>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int rb = 0; rb < row_blocks; ++rb) {
    const int i0 = rb * 4;
    const double* ai = a + static_cast<long>(i0) * k;
    double* ci = c + static_cast<long>(i0) * n;
    int j = 0;
    if (m - i0 >= 4) {
      for (; j + 4 <= n; j += 4) dot_tile<4, 4>(k, ai, b + static_cast<long>(j) * k, ci + j, n, accumulate);
      for (; j < n; ++j) dot_tile<4, 1>(k, ai, b + static_cast<long>(j) * k, ci + j, n, accumulate);
    } else {
      for (int r = 0; r < m - i0; ++r) {
        for (int jj = 0; jj < n; ++jj) {
          dot_tile<1, 1>(k, ai + static_cast<long>(r) * k, b + static_cast<long>(jj) * k,
                         ci + static_cast<long>(r) * n + jj, n, accumulate);
        }
      }
    }
  }
}

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_conv_shapes(x, weight, bias);
  const int n = x.n(), ci = x.c(), h = x.h(), w = x.w();
  const int co = weight.n(), k = weight.h();
  const int hw = h * w;
  Tensor y({n, co, h, w});
  std::vector<double> col(k == 3 ? static_cast<std::size_t>(ci) * 9 * hw : 0);
  for (int s = 0; s < n; ++s) {
    const double* xs = x.plane(s, 0);
    double* ys = y.plane(s, 0);
    const double* rhs = xs;
    if (k == 3) {
      im2col3(xs, ci, h, w, col.data());
      rhs = col.data();
    }
    gemm_nn(co, hw, ci * k * k, weight.data(), rhs, ys, false);
    if (!bias.empty()) {
      for (int o = 0; o < co; ++o) {
        const double b = bias[static_cast<std::size_t>(o)];
        double* p = ys + static_cast<long>(o) * hw;
        for (int i = 0; i < hw; ++i) p[i] += b;
      }
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Tensor* dx,
                     Tensor* dweight, Tensor* dbias) {
  const int n = x.n(), ci = x.c(), h = x.h(), w = x.w();
  const int co = weight.n(), k = weight.h();
  const int hw = h * w;
  require_shape(dy, {n, co, h, w}, "conv2d_backward dy");
  std::vector<double> col(k == 3 ? static_cast<std::size_t>(ci) * 9 * hw : 0);
  for (int s = 0; s < n; ++s) {
    const double* xs = x.plane(s, 0);
    const double* dys = dy.plane(s, 0);
    if (dbias) {
      for (int o = 0; o < co; ++o) {
        const double* p = dys + static_cast<long>(o) * hw;
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += p[i];
        (*dbias)[static_cast<std::size_t>(o)] += acc;
      }
    }
    if (dweight) {
      const double* rhs = xs;
      if (k == 3) {
        im2col3(xs, ci, h, w, col.data());
        rhs = col.data();
      }
      gemm_nt(co, ci * k * k, hw, dys, rhs, dweight->data(), true);
    }
    if (dx) {
      if (k == 3) {
        gemm_tn(ci * 9, hw, co, weight.data(), dys, col.data(), false);
        col2im3_add(col.data(), ci, h, w, dx->plane(s, 0));
      } else {
        gemm_tn(ci, hw, co, weight.data(), dys, dx->plane(s, 0), true);
      }
    }
  }
}

Tensor maxpool2_forward(const Tensor& x, std::vector<std::size_t>& argmax) {
  if (x.h() % 2 != 0 || x.w() % 2 != 0) {
    throw DimensionError("maxpool2: odd spatial dims " + x.shape().str());
  }
  const int oh = x.h() / 2, ow = x.w() / 2;
  Tensor y({x.n(), x.c(), oh, ow});
  argmax.assign(y.size(), 0);
  const int planes = x.n() * x.c();
#pragma omp parallel for schedule(static) if (static_cast<long>(y.size()) > kParallelWork)
  for (int pl = 0; pl < planes; ++pl) {
    const std::size_t in_base = static_cast<std::size_t>(pl) * x.h() * x.w();
    const std::size_t out_base = static_cast<std::size_t>(pl) * oh * ow;
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        std::size_t best = in_base + static_cast<std::size_t>(2 * yy) * x.w() + 2 * xx;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dxx = 0; dxx < 2; ++dxx) {
            const std::size_t idx = in_base + static_cast<std::size_t>(2 * yy + dy) * x.w() + 2 * xx + dxx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = out_base + static_cast<std::size_t>(yy) * ow + xx;
        y[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return y;
}

void maxpool2_backward(const Tensor& dy, std::span<const std::size_t> argmax, Tensor& dx) {
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
}

Tensor avgpool_forward(const Tensor& x, int factor) {
  if (factor < 1 || x.h() % factor != 0 || x.w() % factor != 0) {
    throw DimensionError("avgpool: " + x.shape().str() + " not divisible by " + std::to_string(factor));
  }
  if (factor == 1) return x;
  const int oh = x.h() / factor, ow = x.w() / factor;
  Tensor y({x.n(), x.c(), oh, ow});
  const double inv = 1.0 / (factor * factor);
  const int planes = x.n() * x.c();
#pragma omp parallel for schedule(static) if (static_cast<long>(x.size()) > kParallelWork)
  for (int pl = 0; pl < planes; ++pl) {
    const double* src = x.data() + static_cast<std::size_t>(pl) * x.h() * x.w();
    double* dst = y.data() + static_cast<std::size_t>(pl) * oh * ow;
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy) {
          const double* row = src + static_cast<std::size_t>(yy * factor + dy) * x.w() + xx * factor;
          for (int dxx = 0; dxx < factor; ++dxx) acc += row[dxx];
        }
        dst[yy * ow + xx] = acc * inv;
      }
    }
  }
  return y;
}

void avgpool_backward(const Tensor& dy, int factor, Tensor& dx) {
  const int oh = dy.h(), ow = dy.w();
  const double inv = 1.0 / (factor * factor);
  const int planes = dy.n() * dy.c();
#pragma omp parallel for schedule(static) if (static_cast<long>(dx.size()) > kParallelWork)
  for (int pl = 0; pl < planes; ++pl) {
    const double* src = dy.data() + static_cast<std::size_t>(pl) * oh * ow;
    double* dst = dx.data() + static_cast<std::size_t>(pl) * dx.h() * dx.w();
    for (int yy = 0; yy < dx.h(); ++yy) {
      for (int xx = 0; xx < dx.w(); ++xx) {
        dst[static_cast<std::size_t>(yy) * dx.w() + xx] += src[(yy / factor) * ow + xx / factor] * inv;
      }
    }
  }
}

namespace {

struct Tap {
  int i0;
  int i1;
  double f;
};

std::vector<Tap> corner_aligned_taps(int src, int dst) {
  std::vector<Tap> taps(static_cast<std::size_t>(dst));
  for (int i = 0; i < dst; ++i) {
    const double s = dst > 1 ? static_cast<double>(i) * (src - 1) / (dst - 1) : 0.0;
    int i0 = static_cast<int>(std::floor(s));
    i0 = std::clamp(i0, 0, src - 1);
    const int i1 = std::min(i0 + 1, src - 1);
    taps[static_cast<std::size_t>(i)] = {i0, i1, i1 == i0 ? 0.0 : s - i0};
  }
  return taps;
}

}  // namespace

void bilinear_resize(const double* src, int sh, int sw, double* dst, int dh, int dw) {
  const auto ty = corner_aligned_taps(sh, dh);
  const auto tx = corner_aligned_taps(sw, dw);
  for (int y = 0; y < dh; ++y) {
    const Tap& a = ty[static_cast<std::size_t>(y)];
    const double* r0 = src + static_cast<std::size_t>(a.i0) * sw;
    const double* r1 = src + static_cast<std::size_t>(a.i1) * sw;
    for (int x = 0; x < dw; ++x) {
      const Tap& b = tx[static_cast<std::size_t>(x)];
      const double top = r0[b.i0] + b.f * (r0[b.i1] - r0[b.i0]);
      const double bot = r1[b.i0] + b.f * (r1[b.i1] - r1[b.i0]);
      dst[static_cast<std::size_t>(y) * dw + x] = top + a.f * (bot - top);
    }
  }
}

void bilinear_resize_backward(const double* ddst, int dh, int dw, double* dsrc, int sh, int sw) {
  const auto ty = corner_aligned_taps(sh, dh);
  const auto tx = corner_aligned_taps(sw, dw);
  for (int y = 0; y < dh; ++y) {
    const Tap& a = ty[static_cast<std::size_t>(y)];
    double* r0 = dsrc + static_cast<std::size_t>(a.i0) * sw;
    double* r1 = dsrc + static_cast<std::size_t>(a.i1) * sw;
    for (int x = 0; x < dw; ++x) {
      const Tap& b = tx[static_cast<std::size_t>(x)];
      const double g = ddst[static_cast<std::size_t>(y) * dw + x];
      const double gt = g * (1.0 - a.f);
      const double gb = g * a.f;
      r0[b.i0] += gt * (1.0 - b.f);
      r0[b.i1] += gt * b.f;
      r1[b.i0] += gb * (1.0 - b.f);
      r1[b.i1] += gb * b.f;
    }
  }
}

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  Tensor y({x.n(), x.c(), out_h, out_w});
  const int planes = x.n() * x.c();
#pragma omp parallel for schedule(static) if (static_cast<long>(y.size()) > kParallelWork)
  for (int pl = 0; pl < planes; ++pl) {
    bilinear_resize(x.data() + static_cast<std::size_t>(pl) * x.h() * x.w(), x.h(), x.w(),
                    y.data() + static_cast<std::size_t>(pl) * out_h * out_w, out_h, out_w);
  }
  return y;
}

void resize_bilinear_backward(const Tensor& dy, Tensor& dx) {
  const int planes = dx.n() * dx.c();
#pragma omp parallel for schedule(static) if (static_cast<long>(dy.size()) > kParallelWork)
  for (int pl = 0; pl < planes; ++pl) {
    bilinear_resize_backward(dy.data() + static_cast<std::size_t>(pl) * dy.h() * dy.w(), dy.h(), dy.w(),
                             dx.data() + static_cast<std::size_t>(pl) * dx.h() * dx.w(), dx.h(), dx.w());
  }
}

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

const std::array<std::array<double, 5>, 5>& binomial5x5() {
  static const auto kernel = [] {
    constexpr std::array<double, 5> taps{1.0, 4.0, 6.0, 4.0, 1.0};
    std::array<std::array<double, 5>, 5> k{};
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) k[i][j] = taps[i] * taps[j] / 256.0;
    }
    return k;
  }();
  return kernel;
}

void pyramid_down(const double* src, int h, int w, double* dst) {
  if (h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2) {
    throw DimensionError("pyramid_down: dims must be even, got " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  static constexpr std::array<double, 5> taps{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  const int oh = h / 2, ow = w / 2;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y) {
    const double* srow = src + static_cast<std::size_t>(y) * w;
    for (int xo = 0; xo < ow; ++xo) {
      double acc = 0.0;
      for (int t = 0; t < 5; ++t) acc += taps[t] * srow[reflect101(2 * xo + t - 2, w)];
      rows[static_cast<std::size_t>(y) * ow + xo] = acc;
    }
  }
  for (int yo = 0; yo < oh; ++yo) {
    for (int xo = 0; xo < ow; ++xo) {
      double acc = 0.0;
      for (int t = 0; t < 5; ++t) {
        acc += taps[t] * rows[static_cast<std::size_t>(reflect101(2 * yo + t - 2, h)) * ow + xo];
      }
      dst[static_cast<std::size_t>(yo) * ow + xo] = acc;
    }
  }
}

}  // namespace tsn::kernels
