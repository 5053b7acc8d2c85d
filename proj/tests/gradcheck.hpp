#pragma once

// Central-difference check of d(total_loss ∘ forward)/d(parameter) for a
// sample of scalar parameters.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tsn/losses.hpp"
#include "tsn/model.hpp"
#include "tsn/rng.hpp"

namespace tsn::test {

struct GradCheckResult {
  std::size_t probes = 0;
  std::size_t groups = 0;
  double max_rel_error = 0.0;
  std::string worst;
};

/// Mean over the batch of total_loss(prob_i, gt_i); fills parameter grads when a tape is given.
inline double model_loss(model::ModelState& state, const model::ModelConfig& cfg, const Tensor& img,
                         const std::vector<Mask>& gts, bool with_grad) {
  ag::Tape tape;
  const model::Pass pass{with_grad ? &tape : nullptr, state, cfg, true};
  const ag::Var prob = model::forward(pass, img, img);
  Tensor seed(prob->value.shape());
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(gts.size());
  for (int n = 0; n < img.n(); ++n) {
    const auto t = losses::total_loss(model::plane_to_mask(prob->value, n), gts[static_cast<std::size_t>(n)]);
    loss += t.total * inv_n;
    std::transform(t.grad.pixels().begin(), t.grad.pixels().end(), seed.plane(n, 0),
                   [&](double g) { return g * inv_n; });
  }
  if (with_grad) {
    state.zero_grad();
    tape.backward(prob, seed);
  }
  return loss;
}

/// Probes `per_group` entries of every parameter tensor plus random extras up to `total`.
inline GradCheckResult gradient_check(model::ModelState& state, const model::ModelConfig& cfg, const Tensor& img,
                                      const std::vector<Mask>& gts, std::size_t total, std::size_t per_group,
                                      RandomState& rng, double step = 1e-6, double floor = 1e-6) {
  model_loss(state, cfg, img, gts, true);
  std::vector<std::pair<std::string, std::size_t>> probes;
  std::vector<std::string> names;
  for (const auto& [name, var] : state.params) {
    names.push_back(name);
    for (std::size_t k = 0; k < per_group; ++k) probes.emplace_back(name, rng.below(var->value.size()));
  }
  while (probes.size() < total) {
    const auto& name = names[rng.below(names.size())];
    probes.emplace_back(name, rng.below(state.params.at(name)->value.size()));
  }

  GradCheckResult r;
  r.groups = names.size();
  for (const auto& [name, idx] : probes) {
    auto& var = state.params.at(name);
    const double analytic = var->grad.empty() ? 0.0 : var->grad[idx];
    const double saved = var->value[idx];
    var->value[idx] = saved + step;
    const double up = model_loss(state, cfg, img, gts, false);
    var->value[idx] = saved - step;
    const double down = model_loss(state, cfg, img, gts, false);
    var->value[idx] = saved;
    const double numeric = (up - down) / (2 * step);
    const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst = name + "[" + std::to_string(idx) + "] analytic " + std::to_string(analytic) + " numeric " +
                std::to_string(numeric);
    }
    ++r.probes;
  }
  return r;
}

/// Two-stage, base-4, 16x16 configuration used for gradient checks.
inline model::ModelConfig gradcheck_config() {
  model::ModelConfig cfg;
  cfg.stages = 2;
  cfg.base_channels = 4;
  cfg.input_h = cfg.input_w = 16;
  cfg.patch_size = 4;
  cfg.se_reduction = 2;
  return cfg;
}

}  // namespace tsn::test
