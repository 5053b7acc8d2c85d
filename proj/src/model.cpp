#include "tsn/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tsn/rng.hpp"

namespace tsn::model {

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.stages = 5;
  c.base_channels = 8;
  c.patch_size = 16;
  c.input_h = 64;
  c.input_w = 64;
  c.se_reduction = 8;
  return c;
}

void ModelConfig::validate() const {
  const auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (stages < 2) fail("stages must be at least 2");
  if (base_channels < 1) fail("base_channels must be positive");
  if (input_h < 1 || input_w < 1) fail("input dims must be positive");
  const int reduction = 1 << (stages - 1);
  if (input_h % reduction != 0 || input_w % reduction != 0) {
    fail("input dims must be divisible by 2^(stages-1) = " + std::to_string(reduction));
  }
  if (patch_size < 1 || input_h % patch_size != 0 || input_w % patch_size != 0) {
    fail("input dims must be divisible by patch_size");
  }
  if (patch_size % reduction != 0) {
    fail("patch_size must be divisible by 2^(stages-1) so every decoder grid tiles into patches");
  }
  if (se_reduction < 1) fail("se_reduction must be positive");
  if (norm == NormKind::Group) {
    if (norm_groups < 1 || base_channels % norm_groups != 0) {
      fail("norm_groups must divide base_channels");
    }
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"stages", c.stages},
                     {"base_channels", c.base_channels},
                     {"patch_size", c.patch_size},
                     {"input_h", c.input_h},
                     {"input_w", c.input_w},
                     {"use_ccf", c.use_ccf},
                     {"use_ds_branch", c.use_ds_branch},
                     {"norm", c.norm == NormKind::Batch ? "batch" : "group"},
                     {"norm_groups", c.norm_groups},
                     {"se_reduction", c.se_reduction}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::vector<std::string> known{"stages",  "base_channels", "patch_size",   "input_h",
                                              "input_w", "use_ccf",       "use_ds_branch", "norm",
                                              "norm_groups", "se_reduction"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError("model config: unknown key '" + key + "'");
    }
  }
  ModelConfig d = c;
  d.stages = j.value("stages", d.stages);
  d.base_channels = j.value("base_channels", d.base_channels);
  d.patch_size = j.value("patch_size", d.patch_size);
  d.input_h = j.value("input_h", d.input_h);
  d.input_w = j.value("input_w", d.input_w);
  d.use_ccf = j.value("use_ccf", d.use_ccf);
  d.use_ds_branch = j.value("use_ds_branch", d.use_ds_branch);
  if (j.contains("norm")) {
    const auto n = j.at("norm").get<std::string>();
    if (n == "batch") {
      d.norm = NormKind::Batch;
    } else if (n == "group") {
      d.norm = NormKind::Group;
    } else {
      throw ValidationError("model config: norm must be 'batch' or 'group'");
    }
  }
  d.norm_groups = j.value("norm_groups", d.norm_groups);
  d.se_reduction = j.value("se_reduction", d.se_reduction);
  c = d;
}

const ag::Var& ModelState::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

Tensor& ModelState::buffer(const std::string& name) {
  auto it = buffers.find(name);
  if (it == buffers.end()) throw std::out_of_range("missing buffer '" + name + "'");
  return it->second;
}

ShapeManifest ModelState::manifest() const {
  ShapeManifest m;
  for (const auto& [name, var] : params) m[name] = var->value.shape();
  for (const auto& [name, t] : buffers) m[name] = t.shape();
  return m;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, var] : params) n += var->value.size();
  return n;
}

void ModelState::zero_grad() {
  for (auto& [name, var] : params) var->zero_grad();
}

ModelState ModelState::clone() const {
  ModelState out;
  for (const auto& [name, var] : params) out.params[name] = ag::parameter(var->value);
  out.buffers = buffers;
  return out;
}

namespace {

class Initializer {
 public:
  Initializer(ModelState& state, std::uint64_t seed) : state_(state), rng_(seed) {}

  void conv(const std::string& name, int cout, int cin, int k, bool bias) {
    Tensor w({cout, cin, k, k});
    const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
    for (auto& v : w.vec()) v = rng_.uniform(-bound, bound);
    state_.params[name + ".w"] = ag::parameter(std::move(w));
    if (bias) state_.params[name + ".b"] = ag::parameter(Tensor({1, cout, 1, 1}));
  }

  void norm(const std::string& name, int channels, NormKind kind) {
    state_.params[name + ".gamma"] = ag::parameter(Tensor({1, channels, 1, 1}, 1.0));
    state_.params[name + ".beta"] = ag::parameter(Tensor({1, channels, 1, 1}));
    if (kind == NormKind::Batch) {
      state_.buffers[name + ".running_mean"] = Tensor({1, channels, 1, 1});
      state_.buffers[name + ".running_var"] = Tensor({1, channels, 1, 1}, 1.0);
    }
  }

  void block(const std::string& name, int cin, int cout, NormKind kind) {
    conv(name + ".conv1", cout, cin, 3, false);
    norm(name + ".norm1", cout, kind);
    conv(name + ".conv2", cout, cout, 3, false);
    norm(name + ".norm2", cout, kind);
  }

  void near_identity(const std::string& name, int size) {
    Tensor w({1, 1, size, size});
    for (int i = 0; i < size; ++i) {
      for (int j = 0; j < size; ++j) w.at(0, 0, i, j) = (i == j ? 1.0 : 0.0) + rng_.uniform(-0.01, 0.01);
    }
    state_.params[name] = ag::parameter(std::move(w));
  }

 private:
  ModelState& state_;
  RandomState rng_;
};

std::string stage_name(const char* branch, int s) { return std::string(branch) + ".s" + std::to_string(s); }
std::string ccf_name(int site) { return "ccf" + std::to_string(site); }
std::string skip_name(int site) { return "skip" + std::to_string(site); }

}  // namespace

ModelState init_state(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState state;
  Initializer init(state, seed);
  const int S = cfg.stages;
  for (const char* branch : {"src", "deg"}) {
    for (int s = 1; s <= S; ++s) {
      const int cin = s == 1 ? 1 : cfg.channels(s - 1);
      init.block(stage_name(branch, s), cin, cfg.channels(s), cfg.norm);
      if (std::string(branch) == "deg") {
        init.conv(stage_name(branch, s) + ".proj", cfg.channels(s), cfg.channels(s), 1, true);
      }
    }
  }
  const int bottleneck = cfg.channels(S);
  const int hidden = std::max(1, bottleneck / cfg.se_reduction);
  init.conv("se.fc1", hidden, bottleneck, 1, true);
  init.conv("se.fc2", bottleneck, hidden, 1, true);

  // O_site for site = 1..S-1: encoder side E_1 (site 1) or F_{site-1}, decoder side D_site.
  const int tokens = cfg.token_length();
  for (int site = 1; site <= S - 1; ++site) {
    const int enc_c = cfg.channels(site);
    const int dec_c = cfg.decoder_channels(site);
    if (cfg.use_ccf) {
      init.near_identity(ccf_name(site) + ".q_enc", tokens);
      init.near_identity(ccf_name(site) + ".k_dec", tokens);
      init.near_identity(ccf_name(site) + ".q_dec", tokens);
      init.near_identity(ccf_name(site) + ".k_enc", tokens);
      init.conv(ccf_name(site) + ".proj_enc", dec_c, enc_c, 1, true);
      init.conv(ccf_name(site) + ".proj_dec", dec_c, dec_c, 1, true);
    } else {
      init.conv(skip_name(site), dec_c, enc_c, 1, true);
    }
  }
  for (int i = S - 2; i >= 1; --i) {
    init.block("dec" + std::to_string(i), 2 * cfg.decoder_channels(i + 1), cfg.decoder_channels(i), cfg.norm);
  }
  init.conv("head", 1, 2 * cfg.decoder_channels(1), 1, true);
  return state;
}

ShapeManifest expected_manifest(const ModelConfig& cfg) { return init_state(cfg, 0).manifest(); }

const Tensor& ForwardTrace::get(const std::string& name) const {
  for (const auto& [key, t] : entries) {
    if (key == name) return t;
  }
  throw std::out_of_range("trace has no entry '" + name + "'");
}

Tensor to_batch(const std::vector<Image>& images) {
  if (images.empty()) throw DimensionError("to_batch: no images");
  const int h = images.front().height(), w = images.front().width();
  Tensor t({static_cast<int>(images.size()), 1, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height() != h || images[i].width() != w) throw DimensionError("to_batch: mixed sizes");
    std::copy(images[i].pixels().begin(), images[i].pixels().end(), t.plane(static_cast<int>(i), 0));
  }
  return t;
}

Mask plane_to_mask(const Tensor& t, int index) {
  const double* p = t.plane(index, 0);
  return Mask(t.h(), t.w(), std::vector<double>(p, p + t.shape().plane()));
}

namespace {

void record(ForwardTrace* trace, const std::string& name, const ag::Var& v) {
  if (trace) trace->entries.emplace_back(name, v->value);
}

ag::Var norm(const Pass& pass, const std::string& name, const ag::Var& x) {
  const auto& gamma = pass.state.param(name + ".gamma");
  const auto& beta = pass.state.param(name + ".beta");
  if (pass.cfg.norm == NormKind::Group) {
    return ag::group_norm(pass.tape, x, gamma, beta, pass.cfg.norm_groups);
  }
  ag::NormBuffers buffers{&pass.state.buffer(name + ".running_mean"), &pass.state.buffer(name + ".running_var")};
  return ag::batch_norm(pass.tape, x, gamma, beta, buffers, pass.training);
}

ag::Var conv(const Pass& pass, const std::string& name, const ag::Var& x) {
  const auto it = pass.state.params.find(name + ".b");
  const ag::Var bias = it == pass.state.params.end() ? nullptr : it->second;
  return ag::conv2d(pass.tape, x, pass.state.param(name + ".w"), bias);
}

ag::Var conv_block(const Pass& pass, const std::string& name, ag::Var x) {
  x = ag::relu(pass.tape, norm(pass, name + ".norm1", conv(pass, name + ".conv1", x)));
  return ag::relu(pass.tape, norm(pass, name + ".norm2", conv(pass, name + ".conv2", x)));
}

void check_input(const ModelConfig& cfg, const Tensor& t, const char* what) {
  if (t.c() != 1 || t.h() != cfg.input_h || t.w() != cfg.input_w) {
    throw DimensionError(std::string(what) + ": expected (N,1," + std::to_string(cfg.input_h) + "," +
                         std::to_string(cfg.input_w) + "), got " + t.shape().str());
  }
}

Features encode(const Pass& pass, const ag::Var& img, const char* branch, bool project) {
  check_input(pass.cfg, img->value, "encoder input");
  Features out;
  ag::Var x = img;
  for (int s = 1; s <= pass.cfg.stages; ++s) {
    if (s > 1) x = ag::maxpool2(pass.tape, x);
    x = conv_block(pass, stage_name(branch, s), x);
    if (project) x = conv(pass, stage_name(branch, s) + ".proj", x);
    out.push_back(x);
  }
  return out;
}

}  // namespace

Features encode_source(const Pass& pass, const ag::Var& img) { return encode(pass, img, "src", false); }

Features encode_degraded(const Pass& pass, const ag::Var& img_d) { return encode(pass, img_d, "deg", true); }

Features fuse(ag::Tape* tape, const Features& enc, const Features& deg) {
  if (enc.size() != deg.size() || enc.size() < 2) {
    throw DimensionError("fuse: encoder feature lists must align and hold at least two stages");
  }
  Features out;
  for (std::size_t i = 1; i < enc.size(); ++i) out.push_back(ag::add(tape, enc[i], deg[i]));
  return out;
}

ag::Var se_block(const Pass& pass, const ag::Var& bottleneck) {
  ag::Var z = ag::global_avgpool(pass.tape, bottleneck);
  z = ag::relu(pass.tape, conv(pass, "se.fc1", z));
  const ag::Var gates = ag::sigmoid(pass.tape, conv(pass, "se.fc2", z));
  return ag::channel_scale(pass.tape, bottleneck, gates);
}

ag::Var ccf(const Pass& pass, int site, const ag::Var& enc, const ag::Var& dec, ForwardTrace* trace) {
  ag::Tape* tape = pass.tape;
  const Shape es = enc->value.shape();
  const Shape ds = dec->value.shape();
  if (es.n != ds.n || es.h % ds.h != 0 || es.w % ds.w != 0 || es.h / ds.h != es.w / ds.w) {
    throw DimensionError("ccf: encoder grid " + es.str() + " does not reduce onto decoder grid " + ds.str());
  }
  const ag::Var enc_aligned = ag::avgpool(tape, enc, es.h / ds.h);
  if (!pass.cfg.use_ccf) return conv(pass, skip_name(site), enc_aligned);

  const int patch = pass.cfg.patch_size * ds.h / pass.cfg.input_h;
  if (patch < 1 || ds.h % patch != 0 || ds.w % patch != 0) {
    throw DimensionError("ccf: decoder grid " + ds.str() + " does not tile into patches");
  }
  const int tokens = (ds.h / patch) * (ds.w / patch);
  const int hw = ds.h * ds.w;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(tokens));
  const std::string name = ccf_name(site);

  const auto enc_tokens = ag::reshape(tape, ag::avgpool(tape, enc_aligned, patch), {es.n, 1, es.c, tokens});
  const auto dec_tokens = ag::reshape(tape, ag::avgpool(tape, dec, patch), {ds.n, 1, ds.c, tokens});

  // Ê: encoder channels query decoder channels; values are decoder channel maps.
  const auto q_enc = ag::matmul(tape, enc_tokens, pass.state.param(name + ".q_enc"));
  const auto k_dec = ag::matmul(tape, dec_tokens, pass.state.param(name + ".k_dec"));
  const auto attn_enc = ag::softmax_rows(tape, ag::scale(tape, ag::matmul_nt(tape, q_enc, k_dec), inv_sqrt));
  const auto mixed_enc = ag::matmul(tape, attn_enc, ag::reshape(tape, dec, {ds.n, 1, ds.c, hw}));
  const auto e_hat = conv(pass, name + ".proj_enc", ag::reshape(tape, mixed_enc, {ds.n, es.c, ds.h, ds.w}));

  // D̂: decoder channels query encoder channels; values are the aligned encoder maps.
  const auto q_dec = ag::matmul(tape, dec_tokens, pass.state.param(name + ".q_dec"));
  const auto k_enc = ag::matmul(tape, enc_tokens, pass.state.param(name + ".k_enc"));
  const auto attn_dec = ag::softmax_rows(tape, ag::scale(tape, ag::matmul_nt(tape, q_dec, k_enc), inv_sqrt));
  const auto mixed_dec = ag::matmul(tape, attn_dec, ag::reshape(tape, enc_aligned, {ds.n, 1, es.c, hw}));
  const auto d_hat = conv(pass, name + ".proj_dec", ag::reshape(tape, mixed_dec, {ds.n, ds.c, ds.h, ds.w}));

  record(trace, name + ".attn_enc", attn_enc);
  record(trace, name + ".attn_dec", attn_dec);
  return ag::add(tape, e_hat, d_hat);
}

ag::Var decode(const Pass& pass, const Features& fused, const ag::Var& e1, const ag::Var& bottom,
               ForwardTrace* trace) {
  const int S = pass.cfg.stages;
  if (static_cast<int>(fused.size()) != S - 1) throw DimensionError("decode: expected S-1 fused features");
  ag::Var d = bottom;  // D_{S-1}
  for (int i = S - 2; i >= 1; --i) {
    const ag::Var o = ccf(pass, i + 1, fused[static_cast<std::size_t>(i - 1)], d, trace);
    record(trace, "O" + std::to_string(i + 1), o);
    ag::Var x = ag::concat_channels(pass.tape, d, o);
    x = ag::resize_bilinear(pass.tape, x, 2 * x->value.h(), 2 * x->value.w());
    d = conv_block(pass, "dec" + std::to_string(i), x);
    record(trace, "D" + std::to_string(i), d);
  }
  const ag::Var o1 = ccf(pass, 1, e1, d, trace);
  record(trace, "O1", o1);
  ag::Var x = ag::concat_channels(pass.tape, d, o1);
  x = ag::resize_bilinear(pass.tape, x, 2 * x->value.h(), 2 * x->value.w());
  const ag::Var logits = conv(pass, "head", x);
  record(trace, "logits", logits);
  return ag::sigmoid(pass.tape, logits);
}

ag::Var forward(const Pass& pass, const Tensor& img, const Tensor& img_d, ForwardTrace* trace) {
  if (!(img.shape() == img_d.shape())) {
    throw DimensionError("forward: source " + img.shape().str() + " vs degraded " + img_d.shape().str());
  }
  const auto src = ag::constant(img);
  const auto deg = ag::constant(img_d);
  const Features e = encode_source(pass, src);
  const Features l = encode_degraded(pass, deg);
  for (int s = 1; s <= pass.cfg.stages; ++s) {
    record(trace, "E" + std::to_string(s), e[static_cast<std::size_t>(s - 1)]);
    record(trace, "L" + std::to_string(s), l[static_cast<std::size_t>(s - 1)]);
  }
  const Features f = fuse(pass.tape, e, l);
  for (std::size_t i = 0; i < f.size(); ++i) record(trace, "F" + std::to_string(i + 1), f[i]);
  const ag::Var bottom = se_block(pass, f.back());
  record(trace, "D" + std::to_string(pass.cfg.stages - 1), bottom);
  const ag::Var prob = decode(pass, f, e.front(), bottom, trace);
  record(trace, "prob", prob);
  return prob;
}

Mask predict(ModelState& state, const ModelConfig& cfg, const Image& img) {
  const Tensor batch = to_batch({img});
  const Pass pass{nullptr, state, cfg, false};
  return plane_to_mask(forward(pass, batch, batch)->value, 0);
}

}  // namespace tsn::model
