// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "plain_unet.hpp"
#include "ssim_oracle.hpp"
#include "support.hpp"
#include "tsn/data.hpp"
#include "tsn/degrade.hpp"
#include "tsn/losses.hpp"
#include "tsn/metrics.hpp"
#include "tsn/recon.hpp"
#include "tsn/trainer.hpp"

using namespace tsn;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kSsimTol = 1e-6;
constexpr double kSsimSeconds = 10.0;
constexpr double kPerfectLossTol = 1e-6;
constexpr double kDrawLo = 0.245, kDrawHi = 0.255;
constexpr std::size_t kGradProbes = 200;
constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 300.0;
constexpr double kDiceFloor = 0.90;
constexpr int kMaxEpochs = 40;
constexpr double kTrainSeconds = 900.0;
constexpr double kPlainTol = 1e-6;
constexpr double kSphereVolume = 4188.8;
constexpr double kSphereVolumeTol = 0.15;
constexpr double kReconSeconds = 10.0;

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", n, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

// Runs a criterion, turning an escaped exception into a failure line.
void criterion(int n, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(n, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void c1_ssim() {
  RandomState rng(101);
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Mask a = test::random_prob(64, 64, rng), b = test::random_prob(64, 64, rng);
    worst = std::max(worst, std::abs(losses::ssim(a, b) - test::ssim_oracle(a, b)));
  }
  const double secs = since(t0);
  report(1, worst < kSsimTol && secs < kSsimSeconds, fmt("ssim vs oracle on 20 pairs, max |diff| %.3g, %.2f s", worst, secs));
}

void c2_structural() {
  RandomState rng(102);
  double worst_perfect = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Mask gt = test::random_binary(32, 32, rng, rng.uniform(0.1, 0.9));
    worst_perfect = std::max(worst_perfect, std::abs(losses::structural_loss(gt, gt).value));
  }
  bool zeroing = true;
  for (int t = 0; t < 100; ++t) {
    const Mask gt = test::random_binary(16, 16, rng, rng.uniform(0.05, 0.95));
    const Mask pred = test::random_prob(16, 16, rng);
    const Mask ic = losses::correct_region(pred, gt);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == 0.0 && ic[i] != 0.0) zeroing = false;
    }
  }
  report(2, worst_perfect < kPerfectLossTol && zeroing,
         fmt("perfect-prediction loss max %.3g; I_C zeroing on 100 cases: ", worst_perfect) + (zeroing ? "exact" : "violated"));
}

void c3_sampling() {
  RandomState rng(103);
  std::array<long, 4> counts{};
  const long n = 100000;
  for (long i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(degrade::sample_kind(rng))];
  bool ok = true;
  std::string detail = "frequencies";
  for (auto k : degrade::kAllKinds) {
    const double f = static_cast<double>(counts[static_cast<std::size_t>(k)]) / n;
    ok = ok && f >= kDrawLo && f <= kDrawHi;
    detail += " " + std::string(degrade::to_string(k)) + fmt("=%.4f", f);
  }
  report(3, ok, detail);
}

void c4_gradcheck() {
  const auto cfg = test::gradcheck_config();
  auto state = model::init_state(cfg, 104);
  RandomState rng(104);
  Tensor img(Shape{2, 1, 16, 16});
  for (auto& v : img.vec()) v = rng.uniform();
  const std::vector<Mask> gts{test::random_binary(16, 16, rng, 0.3), test::random_binary(16, 16, rng, 0.3)};
  const auto t0 = Clock::now();
  const auto r = test::gradient_check(state, cfg, img, gts, kGradProbes, 1, rng);
  const double secs = since(t0);
  report(4, r.probes >= kGradProbes && r.max_rel_error < kGradTol && secs < kGradSeconds,
         fmt("%.0f probes over %.0f tensors, max rel error %.3g", static_cast<double>(r.probes),
             static_cast<double>(r.groups), r.max_rel_error) +
             fmt(", %.1f s", secs) + (r.max_rel_error < kGradTol ? "" : " (worst " + r.worst + ")"));
}

void c5_metrics() {
  RandomState rng(105);
  bool exact = true, identity = true;
  for (int t = 0; t < 100; ++t) {
    const Mask pred = test::random_binary(16, 16, rng, rng.uniform(0.05, 0.95));
    const Mask gt = test::random_binary(16, 16, rng, rng.uniform(0.05, 0.95));
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const bool p = pred(y, x) == 1.0, g = gt(y, x) == 1.0;
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
        tn += !p && !g;
      }
    const auto c = metrics::confusion_counts(pred, gt);
    if (!(c == metrics::ConfusionCounts{tp, fp, fn, tn})) exact = false;
    const auto m = metrics::metrics_from_counts(c);
    if (m.iou != double(tp) / double(tp + fp + fn) || m.dice != double(2 * tp) / double(2 * tp + fp + fn)) exact = false;
    if (std::abs(m.dice - 2 * m.iou / (1 + m.iou)) > 1e-12) identity = false;
  }
  report(5, exact && identity,
         std::string("100 pairs: counts ") + (exact ? "exact" : "mismatch") + ", Dice/IoU identity " + (identity ? "holds" : "fails"));
}

void c8_plain() {
  model::ModelConfig cfg = model::ModelConfig::toy();
  cfg.use_ccf = false;
  auto state = model::init_state(cfg, 108);
  RandomState rng(108);
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
  double worst = 0.0;
  for (int t = 0; t < 3; ++t) {
    const Image img = test::random_image(cfg.input_h, cfg.input_w, rng);
    const Mask got = model::predict(state, cfg, img);
    const test::Vol expect = test::PlainUNet(state, cfg).forward(img);
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - expect.v[i]));
  }
  report(8, worst < kPlainTol, fmt("plain-skip network vs reference on 3 inputs, max |diff| %.3g", worst));
}

void c9_recon() {
  const auto t0 = Clock::now();
  std::vector<Mask> masks;
  const double c = 15.5;
  for (int z = 0; z < 32; ++z) {
    Mask m(32, 32);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) m(y, x) = (x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c) <= 100.0;
    masks.push_back(m);
  }
  const auto sphere = recon::marching_cubes(recon::stack_slices(masks));
  const bool closed = recon::is_closed_manifold(sphere);
  const long chi = recon::euler_characteristic(sphere);
  const double vol = recon::enclosed_volume(sphere);
  const double rel = std::abs(vol - kSphereVolume) / kSphereVolume;

  recon::LabelVolume blocks(12, 12, 20);
  for (int z = 2; z < 8; ++z)
    for (int y = 2; y < 8; ++y) {
      for (int x = 2; x < 7; ++x) blocks.at(z, y, x) = 1;
      for (int x = 12; x < 18; ++x) blocks.at(z, y, x) = 1;
    }
  const int comps = recon::count_components(recon::marching_cubes(blocks));
  const double secs = since(t0);
  report(9, closed && chi == 2 && rel < kSphereVolumeTol && comps == 2 && secs < kReconSeconds,
         std::string("sphere closed=") + (closed ? "yes" : "no") + fmt(" chi=%.0f volume=%.1f (%.1f%% off)", double(chi), vol, 100 * rel) +
             fmt(", blocks components=%.0f, %.2f s", comps, secs));
}

struct ToyCorpus {
  test::TempDir dir{"acceptance_data"};
  std::vector<data::Sample> train, test, degraded_test;
  ToyCorpus() {
    data::PhantomSpec spec;
    spec.seed = 7;
    const auto m = data::generate_dataset(spec, 40, 5, dir.path());
    train = data::load_samples(m, data::Split::Train);
    test = data::load_samples(m, data::Split::Test);
    for (const auto& s : test) {
      if (s.quality != data::QualityTag::Clean) degraded_test.push_back(s);
    }
  }
};

trainer::TrainResult toy_run(const ToyCorpus& corpus, std::uint64_t seed, bool use_ds, double* seconds = nullptr) {
  trainer::TrainConfig tc;
  tc.epochs = kMaxEpochs;
  tc.seed = seed;
  tc.ablation.use_ds = use_ds;
  const auto t0 = Clock::now();
  auto r = trainer::train(corpus.train, corpus.test, model::ModelConfig::toy(), tc);
  if (seconds) *seconds = since(t0);
  std::fprintf(stderr, "  toy run seed %llu ds=%d: test dice %s\n", static_cast<unsigned long long>(seed), int(use_ds),
               metrics::format_mean_std(r.final_eval.summary.dice).c_str());
  return r;
}

double degraded_dice(const ToyCorpus& corpus, trainer::TrainResult& r) {
  return trainer::evaluate(corpus.degraded_test, r.state, r.model_config).summary.dice.mean;
}

}  // namespace

int main() {
  criterion(1, c1_ssim);
  criterion(2, c2_structural);
  criterion(3, c3_sampling);
  criterion(4, c4_gradcheck);
  criterion(5, c5_metrics);

  std::unique_ptr<ToyCorpus> corpus;
  std::unique_ptr<trainer::TrainResult> base;
  criterion(6, [&] {
    corpus = std::make_unique<ToyCorpus>();
    double secs = 0.0;
    base = std::make_unique<trainer::TrainResult>(toy_run(*corpus, 0, true, &secs));
    const double dice = base->final_eval.summary.dice.mean;
    report(6, dice >= kDiceFloor && secs < kTrainSeconds,
           fmt("%.0f train / %.0f test slices, %.0f epochs", double(corpus->train.size()), double(corpus->test.size()),
               double(kMaxEpochs)) +
               ", test Dice " + metrics::format_mean_std(base->final_eval.summary.dice) + fmt(", %.0f s", secs));
  });

  criterion(7, [&] {
    if (!corpus || !base) throw std::runtime_error("toy corpus or seed-0 run unavailable");
    std::vector<double> with_ds{degraded_dice(*corpus, *base)}, without_ds;
    for (std::uint64_t seed : {1, 2}) {
      auto r = toy_run(*corpus, seed, true);
      with_ds.push_back(degraded_dice(*corpus, r));
    }
    for (std::uint64_t seed : {0, 1, 2}) {
      auto r = toy_run(*corpus, seed, false);
      without_ds.push_back(degraded_dice(*corpus, r));
    }
    const double a = trainer::median(with_ds), b = trainer::median(without_ds);
    std::string detail = fmt("%.0f degraded test slices; median Dice with DS %.4f vs without %.4f (per seed:",
                             double(corpus->degraded_test.size()), a, b);
    for (std::size_t i = 0; i < 3; ++i) detail += fmt(" %.4f/%.4f", with_ds[i], without_ds[i]);
    report(7, a >= b, detail + ")");
  });

  criterion(8, c8_plain);
  criterion(9, c9_recon);

  criterion(10, [&] {
    if (!corpus || !base) throw std::runtime_error("toy corpus or seed-0 run unavailable");
    auto again = toy_run(*corpus, 0, true);
    const bool same_log = base->log.same_trajectory(again.log);
    test::TempDir dir("acceptance_ckpt");
    trainer::save_checkpoint(dir / "a.ckpt", base->state, base->model_config);
    trainer::save_checkpoint(dir / "b.ckpt", again.state, again.model_config);
    const bool same_ckpt = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt");
    report(10, same_log && same_ckpt,
           std::string("rerun of seed 0: train log ") + (same_log ? "identical" : "differs") + ", final checkpoint " +
               (same_ckpt ? "byte-identical" : "differs"));
  });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
