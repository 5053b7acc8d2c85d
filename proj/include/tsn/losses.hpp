#pragma once

#include "tsn/image.hpp"

namespace tsn::losses {

/// Gaussian-window SSIM constants. Defaults are the canonical Wang et al. values.
struct SSIMParams {
  int window_size = 11;
  double window_sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  void validate() const;
};

inline constexpr double kDiceEpsilon = 1e-6;
inline constexpr double kBceClamp = 1e-7;

/// Mean SSIM over all valid window positions (no padding).
double ssim(const Mask& a, const Mask& b, const SSIMParams& params = {});

/// SSIM together with its gradient with respect to `a`.
double ssim_with_grad(const Mask& a, const Mask& b, const SSIMParams& params, Mask& grad_a);

/// A scalar loss and its gradient with respect to the prediction.
struct LossValue {
  double value = 0.0;
  Mask grad;
};

/// I_C: the prediction restricted to ground-truth foreground (pred ⊙ gt).
Mask correct_region(const Mask& pred, const Mask& gt);

/// 1 − [SSIM(pred, gt) + SSIM(pred ⊙ gt, gt)] / 2, on the probability map.
LossValue structural_loss(const Mask& pred, const Mask& gt, const SSIMParams& params = {});

/// 1 − (2Σpg + ε) / (Σp + Σg + ε).
LossValue dice_loss(const Mask& pred, const Mask& gt);

/// Mean binary cross-entropy with predictions clamped to [δ, 1−δ]. The
/// gradient is evaluated at the clamped value.
LossValue bce_loss(const Mask& pred, const Mask& gt);

struct TotalLoss {
  double dice = 0.0;
  double bce = 0.0;
  double structural = 0.0;  // exactly 0 when the structural term is disabled
  double total = 0.0;
  Mask grad;
};

/// Unit-weight sum dice + bce (+ structural when `sc_enabled`).
TotalLoss total_loss(const Mask& pred, const Mask& gt, const SSIMParams& params = {},
                     bool sc_enabled = true);

}  // namespace tsn::losses
