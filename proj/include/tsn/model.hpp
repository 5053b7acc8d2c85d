#pragma once

// Two-branch encoder / channel-wise cross fusion decoder segmentation network.
//
// Stage s (1-based) of either encoder runs at spatial scale H/2^(s-1) with
// base_channels·2^(s-1) channels. Source features E_s and degraded-branch
// features L_s are summed into F_i = E_{i+1} + L_{i+1} for i = 1..S-1; the
// deepest fusion F_{S-1} is the bottleneck, gated by a squeeze-excitation block
// to give D_{S-1}. Each decoder level i then consumes
// O_{i+1} = CCF(F_i, D_{i+1}) and produces D_i at scale H/2^i. The prediction
// head reads concat(D_1, O_1 = CCF(E_1, D_1)) after a final 2× upsample.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsn/autograd.hpp"
#include "tsn/image.hpp"

namespace tsn::model {

enum class NormKind { Batch, Group };

struct ModelConfig {
  int stages = 5;
  int base_channels = 64;
  int patch_size = 16;
  int input_h = 512;
  int input_w = 512;
  bool use_ccf = true;
  bool use_ds_branch = true;
  NormKind norm = NormKind::Batch;
  int norm_groups = 4;
  int se_reduction = 16;

  /// Desk-scale configuration used by the tests and the default CLI runs.
  static ModelConfig toy();

  int channels(int stage) const { return base_channels << (stage - 1); }
  /// Channels of decoder feature D_i (i = 1..stages-1).
  int decoder_channels(int i) const { return base_channels << i; }
  /// Channel tokens carry one value per patch: (H/patch)·(W/patch).
  int token_length() const { return (input_h / patch_size) * (input_w / patch_size); }

  /// Throws ValidationError naming the violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

using ShapeManifest = std::map<std::string, Shape>;

/// Learnable parameters plus normalization running statistics, keyed by name.
struct ModelState {
  std::map<std::string, ag::Var> params;
  std::map<std::string, Tensor> buffers;

  const ag::Var& param(const std::string& name) const;
  Tensor& buffer(const std::string& name);

  /// name -> dims for every parameter and buffer.
  ShapeManifest manifest() const;
  std::size_t parameter_count() const;
  void zero_grad();
  ModelState clone() const;
};

/// Kaiming-uniform convolutions, zero biases, unit/zero norm affine terms and
/// near-identity attention projections. Deterministic in `seed`.
ModelState init_state(const ModelConfig& cfg, std::uint64_t seed);

/// Manifest implied by a configuration alone.
ShapeManifest expected_manifest(const ModelConfig& cfg);

/// Evaluation context for one pass. Passing a tape records gradients.
struct Pass {
  ag::Tape* tape = nullptr;
  ModelState& state;
  const ModelConfig& cfg;
  bool training = false;
};

/// Named intermediate tensors captured during a forward pass.
struct ForwardTrace {
  std::vector<std::pair<std::string, Tensor>> entries;
  const Tensor& get(const std::string& name) const;
};

using Features = std::vector<ag::Var>;  // index s-1 holds stage s

/// Packs equally sized images into an (N,1,H,W) tensor.
Tensor to_batch(const std::vector<Image>& images);
/// Extracts plane `index` of an (N,1,H,W) tensor.
Mask plane_to_mask(const Tensor& t, int index);

Features encode_source(const Pass& pass, const ag::Var& img);
/// Same stage layout as the source encoder with an extra 1×1 convolution per stage.
Features encode_degraded(const Pass& pass, const ag::Var& img_d);
/// F_i = E_{i+1} + L_{i+1}, i = 1..S-1.
Features fuse(ag::Tape* tape, const Features& enc, const Features& deg);
ag::Var se_block(const Pass& pass, const ag::Var& bottleneck);
/// Channel-wise cross fusion producing O_site at the decoder grid of `dec`.
ag::Var ccf(const Pass& pass, int site, const ag::Var& enc, const ag::Var& dec,
            ForwardTrace* trace = nullptr);
/// Returns per-pixel tooth probabilities (N,1,H,W).
ag::Var decode(const Pass& pass, const Features& fused, const ag::Var& e1, const ag::Var& bottom,
               ForwardTrace* trace = nullptr);

ag::Var forward(const Pass& pass, const Tensor& img, const Tensor& img_d, ForwardTrace* trace = nullptr);

/// Convenience inference: eval mode, no tape, degraded branch fed with the source image.
Mask predict(ModelState& state, const ModelConfig& cfg, const Image& img);

}  // namespace tsn::model
