#pragma once

// Direct-formula SSIM: every window position is evaluated from scratch with a
// 2D Gaussian weight and centered second moments.

#include <cmath>
#include <vector>

#include "tsn/image.hpp"

namespace tsn::test {

inline double ssim_oracle(const Mask& a, const Mask& b, int win = 11, double sigma = 1.5, double k1 = 0.01,
                          double k2 = 0.03, double range = 1.0) {
  const int r = win / 2;
  std::vector<double> wgt(static_cast<std::size_t>(win * win));
  double z = 0.0;
  for (int u = 0; u < win; ++u)
    for (int v = 0; v < win; ++v) {
      const double d2 = double((u - r) * (u - r) + (v - r) * (v - r));
      wgt[u * win + v] = std::exp(-d2 / (2 * sigma * sigma));
      z += wgt[u * win + v];
    }
  for (auto& x : wgt) x /= z;
  const double c1 = (k1 * range) * (k1 * range), c2 = (k2 * range) * (k2 * range);

  double total = 0.0;
  int count = 0;
  for (int y0 = 0; y0 + win <= a.height(); ++y0)
    for (int x0 = 0; x0 + win <= a.width(); ++x0) {
      double ma = 0, mb = 0;
      for (int u = 0; u < win; ++u)
        for (int v = 0; v < win; ++v) {
          ma += wgt[u * win + v] * a(y0 + u, x0 + v);
          mb += wgt[u * win + v] * b(y0 + u, x0 + v);
        }
      double va = 0, vb = 0, cov = 0;
      for (int u = 0; u < win; ++u)
        for (int v = 0; v < win; ++v) {
          const double da = a(y0 + u, x0 + v) - ma, db = b(y0 + u, x0 + v) - mb;
          va += wgt[u * win + v] * da * da;
          vb += wgt[u * win + v] * db * db;
          cov += wgt[u * win + v] * da * db;
        }
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

}  // namespace tsn::test
