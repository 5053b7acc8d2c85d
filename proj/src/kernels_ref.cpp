// Serial reference kernels. Deliberately naive loops; used to validate the
// blocked/parallel kernels and as the baseline in the benchmark.
#include <algorithm>
#include <array>

#include "tsn/kernels.hpp"

namespace tsn::kernels::ref {

void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[static_cast<long>(i) * n + j] : 0.0;
      for (int p = 0; p < k; ++p) s += a[static_cast<long>(i) * k + p] * b[static_cast<long>(p) * n + j];
      c[static_cast<long>(i) * n + j] = s;
    }
  }
}

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const int n = x.n(), ci = x.c(), h = x.h(), w = x.w();
  const int co = weight.n(), k = weight.h(), pad = k / 2;
  Tensor y({n, co, h, w});
  for (int s = 0; s < n; ++s) {
    for (int o = 0; o < co; ++o) {
      for (int yy = 0; yy < h; ++yy) {
        for (int xx = 0; xx < w; ++xx) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
          for (int c = 0; c < ci; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int sy = yy + ky - pad;
              if (sy < 0 || sy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int sx = xx + kx - pad;
                if (sx < 0 || sx >= w) continue;
                acc += weight.at(o, c, ky, kx) * x.at(s, c, sy, sx);
              }
            }
          }
          y.at(s, o, yy, xx) = acc;
        }
      }
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Tensor* dx,
                     Tensor* dweight, Tensor* dbias) {
  const int n = x.n(), ci = x.c(), h = x.h(), w = x.w();
  const int co = weight.n(), k = weight.h(), pad = k / 2;
  for (int s = 0; s < n; ++s) {
    for (int o = 0; o < co; ++o) {
      for (int yy = 0; yy < h; ++yy) {
        for (int xx = 0; xx < w; ++xx) {
          const double g = dy.at(s, o, yy, xx);
          if (dbias) (*dbias)[static_cast<std::size_t>(o)] += g;
          for (int c = 0; c < ci; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int sy = yy + ky - pad;
              if (sy < 0 || sy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int sx = xx + kx - pad;
                if (sx < 0 || sx >= w) continue;
                if (dweight) dweight->at(o, c, ky, kx) += g * x.at(s, c, sy, sx);
                if (dx) dx->at(s, c, sy, sx) += g * weight.at(o, c, ky, kx);
              }
            }
          }
        }
      }
    }
  }
}

Tensor maxpool2_forward(const Tensor& x) {
  Tensor y({x.n(), x.c(), x.h() / 2, x.w() / 2});
  for (int s = 0; s < x.n(); ++s) {
    for (int c = 0; c < x.c(); ++c) {
      for (int yy = 0; yy < y.h(); ++yy) {
        for (int xx = 0; xx < y.w(); ++xx) {
          double m = x.at(s, c, 2 * yy, 2 * xx);
          m = std::max(m, x.at(s, c, 2 * yy, 2 * xx + 1));
          m = std::max(m, x.at(s, c, 2 * yy + 1, 2 * xx));
          m = std::max(m, x.at(s, c, 2 * yy + 1, 2 * xx + 1));
          y.at(s, c, yy, xx) = m;
        }
      }
    }
  }
  return y;
}

Tensor avgpool_forward(const Tensor& x, int factor) {
  Tensor y({x.n(), x.c(), x.h() / factor, x.w() / factor});
  for (int s = 0; s < x.n(); ++s) {
    for (int c = 0; c < x.c(); ++c) {
      for (int yy = 0; yy < x.h(); ++yy) {
        for (int xx = 0; xx < x.w(); ++xx) {
          y.at(s, c, yy / factor, xx / factor) += x.at(s, c, yy, xx) / (factor * factor);
        }
      }
    }
  }
  return y;
}

void pyramid_down(const double* src, int h, int w, double* dst) {
  const auto& kernel = binomial5x5();
  for (int yo = 0; yo < h / 2; ++yo) {
    for (int xo = 0; xo < w / 2; ++xo) {
      double acc = 0.0;
      for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 5; ++j) {
          const int sy = reflect101(2 * yo + i - 2, h);
          const int sx = reflect101(2 * xo + j - 2, w);
          acc += kernel[i][j] * src[static_cast<std::size_t>(sy) * w + sx];
        }
      }
      dst[static_cast<std::size_t>(yo) * (w / 2) + xo] = acc;
    }
  }
}

}  // namespace tsn::kernels::ref
