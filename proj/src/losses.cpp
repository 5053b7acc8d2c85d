#include "tsn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace tsn::losses {

void SSIMParams::validate() const {
  if (window_size < 1 || window_size % 2 == 0) {
    throw std::invalid_argument("SSIM window size must be odd and positive");
  }
  if (!(window_sigma > 0.0) || !(k1 > 0.0) || !(k2 > 0.0) || !(dynamic_range > 0.0)) {
    throw std::invalid_argument("SSIM sigma, k1, k2 and dynamic range must be positive");
  }
}

namespace {

std::vector<double> gaussian_taps(const SSIMParams& p) {
  std::vector<double> g(static_cast<std::size_t>(p.window_size));
  const int r = p.window_size / 2;
  double sum = 0.0;
  for (int i = 0; i < p.window_size; ++i) {
    const double d = i - r;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * p.window_sigma * p.window_sigma));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= sum;
  return g;
}

// Separable "valid" filtering: out is (h-k+1)×(w-k+1).
std::vector<double> filter_valid(const std::vector<double>& in, int h, int w, const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  const int oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int j = 0; j < k; ++j) acc += g[static_cast<std::size_t>(j)] * in[static_cast<std::size_t>(y) * w + x + j];
      tmp[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += g[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  return out;
}

// Adjoint of filter_valid: scatters an (h-k+1)×(w-k+1) map back to h×w.
std::vector<double> filter_valid_adjoint(const std::vector<double>& out, int h, int w,
                                         const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  const int oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const double v = out[static_cast<std::size_t>(y) * ow + x];
      for (int i = 0; i < k; ++i) tmp[static_cast<std::size_t>(y + i) * ow + x] += g[static_cast<std::size_t>(i)] * v;
    }
  }
  std::vector<double> in(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      const double v = tmp[static_cast<std::size_t>(y) * ow + x];
      for (int j = 0; j < k; ++j) in[static_cast<std::size_t>(y) * w + x + j] += g[static_cast<std::size_t>(j)] * v;
    }
  }
  return in;
}

double ssim_impl(const Mask& a, const Mask& b, const SSIMParams& p, Mask* grad_a) {
  p.validate();
  require_same_dims(a, b, "ssim");
  const int h = a.height(), w = a.width();
  if (h < p.window_size || w < p.window_size) {
    throw DimensionError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " smaller than window " + std::to_string(p.window_size));
  }
  const auto g = gaussian_taps(p);
  const std::size_t n = a.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a.vec(), h, w, g);
  const auto mu_b = filter_valid(b.vec(), h, w, g);
  const auto e_aa = filter_valid(aa, h, w, g);
  const auto e_bb = filter_valid(bb, h, w, g);
  const auto e_ab = filter_valid(ab, h, w, g);

  const double c1 = p.c1(), c2 = p.c2();
  const std::size_t positions = mu_a.size();
  const double inv_positions = 1.0 / static_cast<double>(positions);
  std::vector<double> g_mu, g_aa, g_ab;
  if (grad_a) {
    g_mu.resize(positions);
    g_aa.resize(positions);
    g_ab.resize(positions);
  }
  double total = 0.0;
  for (std::size_t q = 0; q < positions; ++q) {
    const double ma = mu_a[q], mb = mu_b[q];
    const double var_a = e_aa[q] - ma * ma;
    const double var_b = e_bb[q] - mb * mb;
    const double cov = e_ab[q] - ma * mb;
    const double a1 = 2.0 * ma * mb + c1;
    const double a2 = 2.0 * cov + c2;
    const double b1 = ma * ma + mb * mb + c1;
    const double b2 = var_a + var_b + c2;
    const double den = b1 * b2;
    const double s = a1 * a2 / den;
    total += s;
    if (grad_a) {
      g_mu[q] = (2.0 * mb * (a2 - a1) - s * 2.0 * ma * (b2 - b1)) / den * inv_positions;
      g_ab[q] = 2.0 * a1 / den * inv_positions;
      g_aa[q] = -s * b1 / den * inv_positions;
    }
  }
  if (grad_a) {
    const auto d_mu = filter_valid_adjoint(g_mu, h, w, g);
    const auto d_aa = filter_valid_adjoint(g_aa, h, w, g);
    const auto d_ab = filter_valid_adjoint(g_ab, h, w, g);
    *grad_a = Mask(h, w);
    for (std::size_t i = 0; i < n; ++i) {
      (*grad_a)[i] = d_mu[i] + 2.0 * a[i] * d_aa[i] + b[i] * d_ab[i];
    }
  }
  return total * inv_positions;
}

}  // namespace

double ssim(const Mask& a, const Mask& b, const SSIMParams& params) {
  return ssim_impl(a, b, params, nullptr);
}

double ssim_with_grad(const Mask& a, const Mask& b, const SSIMParams& params, Mask& grad_a) {
  return ssim_impl(a, b, params, &grad_a);
}

Mask correct_region(const Mask& pred, const Mask& gt) {
  require_same_dims(pred, gt, "correct_region");
  Mask out(pred.height(), pred.width());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = pred[i] * gt[i];
  return out;
}

LossValue structural_loss(const Mask& pred, const Mask& gt, const SSIMParams& params) {
  require_same_dims(pred, gt, "structural_loss");
  const Mask corrected = correct_region(pred, gt);
  Mask g_full, g_corr;
  const double s_full = ssim_with_grad(pred, gt, params, g_full);
  const double s_corr = ssim_with_grad(corrected, gt, params, g_corr);
  LossValue out{1.0 - 0.5 * (s_full + s_corr), Mask(pred.height(), pred.width())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    out.grad[i] = -0.5 * (g_full[i] + g_corr[i] * gt[i]);
  }
  return out;
}

LossValue dice_loss(const Mask& pred, const Mask& gt) {
  require_same_dims(pred, gt, "dice_loss");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    sp += pred[i];
    sg += gt[i];
  }
  const double num = 2.0 * inter + kDiceEpsilon;
  const double den = sp + sg + kDiceEpsilon;
  LossValue out{1.0 - num / den, Mask(pred.height(), pred.width())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    out.grad[i] = -(2.0 * gt[i] * den - num) / (den * den);
  }
  return out;
}

LossValue bce_loss(const Mask& pred, const Mask& gt) {
  require_same_dims(pred, gt, "bce_loss");
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  LossValue out{0.0, Mask(pred.height(), pred.width())};
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], kBceClamp, 1.0 - kBceClamp);
    const double g = gt[i];
    acc -= g * std::log(p) + (1.0 - g) * std::log1p(-p);
    out.grad[i] = (p - g) / (p * (1.0 - p)) * inv_n;
  }
  out.value = acc * inv_n;
  return out;
}

TotalLoss total_loss(const Mask& pred, const Mask& gt, const SSIMParams& params, bool sc_enabled) {
  const LossValue d = dice_loss(pred, gt);
  const LossValue b = bce_loss(pred, gt);
  TotalLoss out;
  out.dice = d.value;
  out.bce = b.value;
  out.grad = Mask(pred.height(), pred.width());
  for (std::size_t i = 0; i < pred.size(); ++i) out.grad[i] = d.grad[i] + b.grad[i];
  if (sc_enabled) {
    const LossValue s = structural_loss(pred, gt, params);
    out.structural = s.value;
    for (std::size_t i = 0; i < pred.size(); ++i) out.grad[i] += s.grad[i];
  }
  out.total = out.dice + out.bce + out.structural;
  return out;
}

}  // namespace tsn::losses
