#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "plain_unet.hpp"
#include "support.hpp"
#include "tsn/model.hpp"

using namespace tsn;
using namespace tsn::model;

namespace {

Tensor batch_of(int n, int hw, RandomState& rng) {
  std::vector<Image> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(test::random_image(hw, hw, rng));
  return to_batch(imgs);
}

Shape shape_of(const ForwardTrace& t, const std::string& name) { return t.get(name).shape(); }

// Perturbs norm statistics and biases so the reference comparison exercises them.
void randomize_state(ModelState& state, RandomState& rng) {
  for (auto& [name, var] : state.params) {
    if (name.ends_with(".b") || name.ends_with(".beta")) {
      for (auto& v : var->value.vec()) v = rng.uniform(-0.1, 0.1);
    } else if (name.ends_with(".gamma")) {
      for (auto& v : var->value.vec()) v = rng.uniform(0.5, 1.5);
    }
  }
  for (auto& [name, t] : state.buffers) {
    const bool var = name.ends_with("running_var");
    for (auto& v : t.vec()) v = var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.2, 0.2);
  }
}

}  // namespace

TEST_CASE("toy configuration shapes") {
  const ModelConfig cfg = ModelConfig::toy();
  CHECK(cfg.base_channels == 8);
  CHECK(cfg.input_h == 64);
  CHECK(cfg.channels(5) == 128);
  CHECK(cfg.channels(3) == 32);

  ModelState state = init_state(cfg, 1);
  RandomState rng(2);
  const Tensor img = batch_of(2, 64, rng);
  ForwardTrace trace;
  const Pass pass{nullptr, state, cfg, false};
  const auto prob = forward(pass, img, img, &trace);

  CHECK(shape_of(trace, "E5") == Shape{2, 128, 4, 4});
  CHECK(shape_of(trace, "L3") == Shape{2, 32, 16, 16});
  for (int s = 1; s <= 5; ++s) {
    const Shape e = shape_of(trace, "E" + std::to_string(s));
    CHECK(e == Shape{2, 8 << (s - 1), 64 >> (s - 1), 64 >> (s - 1)});
    CHECK(shape_of(trace, "L" + std::to_string(s)) == e);
  }
  for (int i = 1; i <= 4; ++i) {
    CHECK(shape_of(trace, "F" + std::to_string(i)) == shape_of(trace, "E" + std::to_string(i + 1)));
    CHECK(shape_of(trace, "D" + std::to_string(i)) == Shape{2, cfg.decoder_channels(i), 64 >> i, 64 >> i});
    CHECK(shape_of(trace, "O" + std::to_string(i)) == shape_of(trace, "D" + std::to_string(i)));
  }
  CHECK(prob->value.shape() == Shape{2, 1, 64, 64});
  for (double v : prob->value.vec()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("full-resolution input produces a full-resolution map") {
  ModelConfig cfg;
  CHECK(cfg.channels(1) == 64);
  CHECK(cfg.input_h == 512);
  CHECK(cfg.patch_size == 16);
  // Narrow variant so the 512x512 pass stays light.
  cfg.base_channels = 2;
  cfg.se_reduction = 4;
  ModelState state = init_state(cfg, 3);
  RandomState rng(3);
  const Image img = test::random_image(512, 512, rng);
  const Mask out = predict(state, cfg, img);
  CHECK(out.height() == 512);
  CHECK(out.width() == 512);
}

TEST_CASE("zero input with zero biases gives zero encoder features") {
  const ModelConfig cfg = ModelConfig::toy();
  ModelState state = init_state(cfg, 4);
  const Tensor zero({1, 1, 64, 64});
  ForwardTrace trace;
  forward({nullptr, state, cfg, false}, zero, zero, &trace);
  for (int s = 1; s <= 5; ++s) {
    for (double v : trace.get("E" + std::to_string(s)).vec()) REQUIRE(v == 0.0);
  }
}

TEST_CASE("fusion is a plain sum") {
  RandomState rng(5);
  Features e, l;
  for (int s = 0; s < 3; ++s) {
    e.push_back(ag::constant(test::random_tensor({1, 2 << s, 8 >> s, 8 >> s}, rng)));
    l.push_back(ag::constant(Tensor(e.back()->value.shape())));
  }
  const Features f = fuse(nullptr, e, l);
  REQUIRE(f.size() == 2);
  CHECK(f[0]->value == e[1]->value);
  CHECK(f[1]->value == e[2]->value);
  l[1] = ag::constant(test::random_tensor(e[1]->value.shape(), rng));
  const Features g = fuse(nullptr, e, l);
  for (std::size_t i = 0; i < g[0]->value.size(); ++i) CHECK(g[0]->value[i] == e[1]->value[i] + l[1]->value[i]);
  l.pop_back();
  CHECK_THROWS_AS(fuse(nullptr, e, l), DimensionError);
}

TEST_CASE("SE block gating") {
  const ModelConfig cfg = ModelConfig::toy();
  ModelState state = init_state(cfg, 6);
  RandomState rng(6);
  const auto x = ag::constant(test::random_tensor({2, 128, 4, 4}, rng));
  const Pass pass{nullptr, state, cfg, false};

  const auto y = se_block(pass, x);
  CHECK(y->value.shape() == x->value.shape());
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 128; ++c) {
      double in = 0, out = 0;
      for (int i = 0; i < 16; ++i) {
        in += x->value.plane(n, c)[i] * x->value.plane(n, c)[i];
        out += y->value.plane(n, c)[i] * y->value.plane(n, c)[i];
      }
      CHECK(out <= in);
    }

  // Saturated gates pass the input through.
  state.params.at("se.fc2.w")->value.fill(0.0);
  state.params.at("se.fc2.b")->value.fill(1000.0);
  CHECK(se_block(pass, x)->value == x->value);
}

TEST_CASE("CCF output shapes and attention normalization") {
  const ModelConfig cfg = ModelConfig::toy();
  ModelState state = init_state(cfg, 7);
  RandomState rng(7);
  const Tensor img = batch_of(2, 64, rng);
  ForwardTrace trace;
  forward({nullptr, state, cfg, false}, img, img, &trace);
  for (int site = 1; site <= 4; ++site) {
    for (const char* dir : {".attn_enc", ".attn_dec"}) {
      const Tensor& a = trace.get("ccf" + std::to_string(site) + dir);
      // Rows over channels of the key side.
      for (int n = 0; n < a.n(); ++n)
        for (int r = 0; r < a.h(); ++r) {
          double s = 0;
          for (int c = 0; c < a.w(); ++c) s += a.at(n, 0, r, c);
          CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
  }
  CHECK(cfg.token_length() == 16);
}

TEST_CASE("CCF rejects grids that do not reduce") {
  const ModelConfig cfg = ModelConfig::toy();
  ModelState state = init_state(cfg, 8);
  RandomState rng(8);
  const Pass pass{nullptr, state, cfg, false};
  const auto enc = ag::constant(test::random_tensor({1, 8, 12, 12}, rng));
  const auto dec = ag::constant(test::random_tensor({1, 16, 8, 8}, rng));
  CHECK_THROWS_AS(ccf(pass, 1, enc, dec), DimensionError);
}

TEST_CASE("plain-skip mode equals the reference network") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.use_ccf = false;
  ModelState state = init_state(cfg, 9);
  RandomState rng(9);
  randomize_state(state, rng);
  const Image img = test::random_image(64, 64, rng);
  const Mask got = predict(state, cfg, img);
  const test::Vol expect = test::PlainUNet(state, cfg).forward(img);
  double worst = 0;
  for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - expect.v[i]));
  CHECK(worst < 1e-9);
}

TEST_CASE("forward is deterministic and finite") {
  const ModelConfig cfg = ModelConfig::toy();
  ModelState state = init_state(cfg, 10);
  RandomState rng(10);
  const Tensor img = batch_of(2, 64, rng);
  const Pass pass{nullptr, state, cfg, false};
  CHECK(forward(pass, img, img)->value == forward(pass, img, img)->value);

  for (int trial = 0; trial < 100; ++trial) {
    RandomState r(1000 + trial);
    const Tensor x = batch_of(1, 64, r);
    const Tensor xd = batch_of(1, 64, r);
    ForwardTrace trace;
    forward(pass, x, xd, &trace);
    for (const auto& [name, t] : trace.entries) REQUIRE_MESSAGE(t.all_finite(), name);
  }
}

TEST_CASE("shape manifest depends only on the configuration") {
  for (bool ccf_on : {true, false}) {
    ModelConfig cfg = ModelConfig::toy();
    cfg.use_ccf = ccf_on;
    CHECK(init_state(cfg, 1).manifest() == init_state(cfg, 2).manifest());
    CHECK(init_state(cfg, 1).manifest() == expected_manifest(cfg));
  }
  ModelConfig a = ModelConfig::toy(), b = ModelConfig::toy();
  b.use_ccf = false;
  CHECK(expected_manifest(a) != expected_manifest(b));
  CHECK(init_state(a, 3).params.at("head.w")->value != init_state(a, 4).params.at("head.w")->value);
  CHECK(init_state(a, 3).params.at("head.w")->value == init_state(a, 3).params.at("head.w")->value);
}

TEST_CASE("group normalization supports single-image batches") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.norm = NormKind::Group;
  ModelState state = init_state(cfg, 11);
  CHECK(state.buffers.empty());
  RandomState rng(11);
  const Tensor img = batch_of(1, 64, rng);
  const auto p = forward({nullptr, state, cfg, true}, img, img);
  CHECK(p->value.all_finite());
}

TEST_CASE("end-to-end gradients match finite differences") {
  const ModelConfig cfg = test::gradcheck_config();
  ModelState state = init_state(cfg, 12);
  RandomState rng(12);
  const Tensor img = batch_of(2, 16, rng);
  const std::vector<Mask> gts{test::random_binary(16, 16, rng, 0.3), test::random_binary(16, 16, rng, 0.3)};
  const auto r = test::gradient_check(state, cfg, img, gts, 80, 1, rng);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("configuration validation") {
  ModelConfig cfg = ModelConfig::toy();
  CHECK_NOTHROW(cfg.validate());
  cfg.input_h = 60;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = ModelConfig::toy();
  cfg.patch_size = 5;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = ModelConfig::toy();
  cfg.stages = 1;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = ModelConfig::toy();
  cfg.base_channels = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("configuration JSON round-trips and rejects unknown keys") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.use_ccf = false;
  cfg.norm = NormKind::Group;
  const nlohmann::json j = cfg;
  CHECK(j.get<ModelConfig>() == cfg);
  nlohmann::json bad = j;
  bad["dropout"] = 0.1;
  CHECK_THROWS_AS(bad.get<ModelConfig>(), ValidationError);
}

TEST_CASE("inputs of the wrong size are rejected") {
  const ModelConfig cfg = ModelConfig::toy();
  ModelState state = init_state(cfg, 13);
  RandomState rng(13);
  const Tensor small = batch_of(1, 32, rng);
  CHECK_THROWS_AS(forward({nullptr, state, cfg, false}, small, small), DimensionError);
  const Tensor img = batch_of(1, 64, rng);
  const Tensor two = batch_of(2, 64, rng);
  CHECK_THROWS_AS(forward({nullptr, state, cfg, false}, img, two), DimensionError);
}
