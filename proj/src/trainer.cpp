#include "tsn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "tsn/rng.hpp"

namespace tsn::trainer {

std::string Ablation::name() const {
  const int off = !use_ds + !use_sc + !use_ccf;
  if (off == 0) return "full";
  if (off == 1) return !use_ds ? "no-ds" : (!use_sc ? "no-sc" : "no-ccf");
  std::string s;
  for (auto [on, tag] : {std::pair{use_ds, "ds"}, {use_sc, "sc"}, {use_ccf, "ccf"}}) {
    if (!on) continue;
    if (!s.empty()) s += '+';
    s += tag;
  }
  return s.empty() ? "none" : s;
}

std::vector<Ablation> ablation_grid() {
  return {{true, true, true}, {false, true, true}, {true, false, true}, {true, true, false}};
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.epochs = 300;
  return c;
}

void TrainConfig::validate() const {
  const auto fail = [](const std::string& m) { throw ValidationError("train config: " + m); };
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (epochs < 1) fail("epochs must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and non-negative");
  if (optimizer != "adam") fail("optimizer must be 'adam'");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0,1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (eval_every < 0) fail("eval_every must be non-negative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"learning_rate", c.learning_rate},
                     {"optimizer", c.optimizer},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"cosine_decay", c.cosine_decay},
                     {"augment", c.augment},
                     {"seed", c.seed},
                     {"use_ds", c.ablation.use_ds},
                     {"use_sc", c.ablation.use_sc},
                     {"use_ccf", c.ablation.use_ccf},
                     {"eval_every", c.eval_every},
                     {"checkpoint_dir", c.checkpoint_dir.string()}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{"batch_size", "epochs",       "learning_rate", "optimizer", "beta1",
                                           "beta2",      "adam_eps",     "cosine_decay",  "augment",   "seed",
                                           "use_ds",     "use_sc",       "use_ccf",       "eval_every", "checkpoint_dir"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ValidationError("train config: unknown key '" + key + "'");
  }
  TrainConfig d = c;
  d.batch_size = j.value("batch_size", d.batch_size);
  d.epochs = j.value("epochs", d.epochs);
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.optimizer = j.value("optimizer", d.optimizer);
  d.beta1 = j.value("beta1", d.beta1);
  d.beta2 = j.value("beta2", d.beta2);
  d.adam_eps = j.value("adam_eps", d.adam_eps);
  d.cosine_decay = j.value("cosine_decay", d.cosine_decay);
  d.augment = j.value("augment", d.augment);
  d.seed = j.value("seed", d.seed);
  d.ablation.use_ds = j.value("use_ds", d.ablation.use_ds);
  d.ablation.use_sc = j.value("use_sc", d.ablation.use_sc);
  d.ablation.use_ccf = j.value("use_ccf", d.ablation.use_ccf);
  d.eval_every = j.value("eval_every", d.eval_every);
  d.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir.string());
  c = d;
}

model::ModelConfig apply_ablation(model::ModelConfig cfg, const Ablation& ablation) {
  cfg.use_ccf = ablation.use_ccf;
  cfg.use_ds_branch = ablation.use_ds;
  return cfg;
}

void Adam::step(model::ModelState& state, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, var] : state.params) {
    if (var->grad.empty()) continue;
    auto [it, fresh] = moments_.try_emplace(name);
    auto& [m, v] = it->second;
    if (fresh) {
      m = Tensor(var->value.shape());
      v = Tensor(var->value.shape());
    }
    double* p = var->value.data();
    const double* g = var->grad.data();
    double* mm = m.data();
    double* vv = v.data();
    for (std::size_t i = 0; i < var->value.size(); ++i) {
      mm[i] = beta1_ * mm[i] + (1.0 - beta1_) * g[i];
      vv[i] = beta2_ * vv[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = mm[i] / bc1;
      const double vhat = vv[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

StepLosses train_step(const std::vector<Image>& images, const std::vector<Mask>& masks, model::ModelState& state,
                      const model::ModelConfig& mcfg, const TrainConfig& tcfg, Adam& optimizer, double lr,
                      const std::vector<std::uint64_t>& sample_seeds) {
  if (images.empty() || images.size() != masks.size() || images.size() != sample_seeds.size()) {
    throw DimensionError("train_step: images, masks and seeds must be non-empty and aligned");
  }
  const auto n = images.size();
  StepLosses out;
  std::vector<Image> degraded(n);
  for (std::size_t i = 0; i < n; ++i) {
    RandomState rng(sample_seeds[i]);
    const auto kind = tcfg.ablation.use_ds ? degrade::sample_kind(rng) : degrade::DegradationKind::Identity;
    out.kinds.push_back(kind);
    degraded[i] = degrade::apply(images[i], kind);
  }
  const Tensor x = model::to_batch(images);
  const Tensor xd = model::to_batch(degraded);

  state.zero_grad();
  ag::Tape tape;
  const model::Pass pass{&tape, state, mcfg, true};
  const ag::Var prob = model::forward(pass, x, xd);

  Tensor seed(prob->value.shape());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Mask p = model::plane_to_mask(prob->value, static_cast<int>(i));
    const losses::TotalLoss l = losses::total_loss(p, masks[i], {}, tcfg.ablation.use_sc);
    out.dice += l.dice * inv_n;
    out.bce += l.bce * inv_n;
    out.structural += l.structural * inv_n;
    out.total += l.total * inv_n;
    double* dst = seed.plane(static_cast<int>(i), 0);
    for (std::size_t k = 0; k < l.grad.size(); ++k) dst[k] = l.grad[k] * inv_n;
  }
  if (!std::isfinite(out.total) || !seed.all_finite()) {
    std::ostringstream msg;
    msg << "non-finite loss (total=" << out.total << "); sample seeds:";
    for (auto s : sample_seeds) msg << ' ' << s;
    throw TrainingError(msg.str());
  }
  tape.backward(prob, seed);
  optimizer.step(state, lr);
  return out;
}

std::vector<Mask> predict_batch(model::ModelState& state, const model::ModelConfig& mcfg, const std::vector<Image>& images) {
  constexpr std::size_t kChunk = 8;
  std::vector<Mask> out;
  for (std::size_t i = 0; i < images.size(); i += kChunk) {
    const std::vector<Image> chunk(images.begin() + static_cast<std::ptrdiff_t>(i),
                                   images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), i + kChunk)));
    const Tensor x = model::to_batch(chunk);
    const model::Pass pass{nullptr, state, mcfg, false};
    const ag::Var prob = model::forward(pass, x, x);
    for (std::size_t k = 0; k < chunk.size(); ++k) out.push_back(model::plane_to_mask(prob->value, static_cast<int>(k)));
  }
  return out;
}

EvalResult evaluate_predictions(const std::vector<data::Sample>& samples, const std::vector<Mask>& predictions,
                                metrics::Aggregation mode) {
  if (samples.empty()) throw ValidationError("evaluate: empty split");
  if (samples.size() != predictions.size()) throw DimensionError("evaluate: prediction count mismatch");
  EvalResult r;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Mask bin = metrics::binarize(predictions[i]);
    r.slices.push_back({samples[i].patient_id, metrics::confusion_counts(bin, samples[i].mask)});
  }
  r.patients = metrics::patient_aggregate(r.slices, mode);
  r.summary = metrics::summarize(r.patients);
  return r;
}

EvalResult evaluate(const std::vector<data::Sample>& samples, model::ModelState& state, const model::ModelConfig& mcfg,
                    metrics::Aggregation mode) {
  if (samples.empty()) throw ValidationError("evaluate: empty split");
  std::vector<Image> images;
  for (const auto& s : samples) images.push_back(s.image);
  return evaluate_predictions(samples, predict_batch(state, mcfg, images), mode);
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kAugmentStream = 0x4155;
constexpr std::uint64_t kDegradeStream = 0x4445;

std::uint64_t stream(std::uint64_t tag, int epoch) { return (tag << 32) | static_cast<std::uint32_t>(epoch); }

const char* kLogHeader =
    "epoch,loss,dice_loss,bce_loss,structural_loss,test_iou,test_iou_std,test_dice,test_dice_std,test_recall,"
    "test_precision,draws_blur1,draws_blur2,draws_identity,draws_artifact,wall_seconds";

}  // namespace

bool TrainLog::same_trajectory(const TrainLog& other) const {
  if (epochs.size() != other.epochs.size()) return false;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = other.epochs[i];
    if (a.epoch != b.epoch || a.loss != b.loss || a.dice_loss != b.dice_loss || a.bce_loss != b.bce_loss ||
        a.structural_loss != b.structural_loss || a.kind_counts != b.kind_counts || a.test.has_value() != b.test.has_value()) {
      return false;
    }
    if (a.test) {
      const auto& s = *a.test;
      const auto& t = *b.test;
      if (s.iou.mean != t.iou.mean || s.iou.std != t.iou.std || s.dice.mean != t.dice.mean || s.dice.std != t.dice.std ||
          s.recall.mean != t.recall.mean || s.precision.mean != t.precision.mean) {
        return false;
      }
    }
  }
  return true;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kLogHeader << '\n';
  char buf[512];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g", e.epoch, e.loss, e.dice_loss, e.bce_loss, e.structural_loss);
    out << buf;
    if (e.test) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", e.test->iou.mean, e.test->iou.std,
                    e.test->dice.mean, e.test->dice.std, e.test->recall.mean, e.test->precision.mean);
      out << buf;
    } else {
      out << ",,,,,,";
    }
    for (long c : e.kind_counts) out << ',' << c;
    std::snprintf(buf, sizeof buf, ",%.3f\n", e.wall_seconds);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

TrainLog TrainLog::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kLogHeader) throw IoError("unexpected training log header in " + path.string());
  TrainLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 16) throw IoError("malformed training log row in " + path.string());
    EpochRecord e;
    e.epoch = std::stoi(f[0]);
    e.loss = std::stod(f[1]);
    e.dice_loss = std::stod(f[2]);
    e.bce_loss = std::stod(f[3]);
    e.structural_loss = std::stod(f[4]);
    if (!f[5].empty()) {
      metrics::Summary s;
      s.iou = {std::stod(f[5]), std::stod(f[6])};
      s.dice = {std::stod(f[7]), std::stod(f[8])};
      s.recall.mean = std::stod(f[9]);
      s.precision.mean = std::stod(f[10]);
      e.test = s;
    }
    for (int k = 0; k < 4; ++k) e.kind_counts[static_cast<std::size_t>(k)] = std::stol(f[static_cast<std::size_t>(11 + k)]);
    e.wall_seconds = std::stod(f[15]);
    log.epochs.push_back(e);
  }
  return log;
}

TrainResult train(const std::vector<data::Sample>& train_set, const std::vector<data::Sample>& test_set,
                  const model::ModelConfig& base_model, const TrainConfig& tcfg, const EpochCallback& on_epoch) {
  tcfg.validate();
  if (train_set.empty()) throw ValidationError("train: empty training split");
  const model::ModelConfig mcfg = apply_ablation(base_model, tcfg.ablation);
  mcfg.validate();
  TrainResult result{model::init_state(mcfg, tcfg.seed), mcfg, {}, {}};
  Adam optimizer(tcfg.beta1, tcfg.beta2, tcfg.adam_eps);

  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double lr = tcfg.learning_rate;
    if (tcfg.cosine_decay) lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * (epoch - 1) / tcfg.epochs));

    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RandomState shuffle_rng(derive_seed(tcfg.seed, stream(kShuffleStream, epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());

    EpochRecord rec;
    rec.epoch = epoch;
    int steps = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(tcfg.batch_size)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(tcfg.batch_size));
      std::vector<Image> images;
      std::vector<Mask> masks;
      std::vector<std::uint64_t> seeds;
      for (std::size_t k = b; k < end; ++k) {
        const auto& s = train_set[order[k]];
        if (tcfg.augment) {
          RandomState aug_rng(derive_seed(tcfg.seed, stream(kAugmentStream, epoch), k));
          auto [im, mk] = data::augment(s.image, s.mask, aug_rng);
          images.push_back(std::move(im));
          masks.push_back(std::move(mk));
        } else {
          images.push_back(s.image);
          masks.push_back(s.mask);
        }
        seeds.push_back(derive_seed(tcfg.seed, stream(kDegradeStream, epoch), k));
      }
      const StepLosses l = train_step(images, masks, result.state, mcfg, tcfg, optimizer, lr, seeds);
      rec.loss += l.total;
      rec.dice_loss += l.dice;
      rec.bce_loss += l.bce;
      rec.structural_loss += l.structural;
      for (auto kind : l.kinds) ++rec.kind_counts[static_cast<std::size_t>(kind)];
      ++steps;
    }
    rec.loss /= steps;
    rec.dice_loss /= steps;
    rec.bce_loss /= steps;
    rec.structural_loss /= steps;

    const bool last = epoch == tcfg.epochs;
    const bool periodic = tcfg.eval_every > 0 && epoch % tcfg.eval_every == 0;
    if (!test_set.empty() && (last || periodic)) {
      EvalResult ev = evaluate(test_set, result.state, mcfg);
      rec.test = ev.summary;
      if (last) result.final_eval = std::move(ev);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(rec);
    if (!tcfg.checkpoint_dir.empty() && (last || periodic)) {
      std::filesystem::create_directories(tcfg.checkpoint_dir);
      save_checkpoint(tcfg.checkpoint_dir / (last ? std::string("final.ckpt") : "epoch" + std::to_string(epoch) + ".ckpt"),
                      result.state, mcfg);
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<AblationRow> run_ablation(const std::vector<Ablation>& grid, const std::vector<std::uint64_t>& seeds,
                                      const std::vector<data::Sample>& train_set, const std::vector<data::Sample>& test_set,
                                      const model::ModelConfig& base_model, const TrainConfig& base_train,
                                      const std::function<void(const std::string&)>& progress) {
  if (grid.empty() || seeds.empty()) throw ValidationError("run_ablation: grid and seed list must be non-empty");
  if (test_set.empty()) throw ValidationError("run_ablation: empty test split");
  std::vector<AblationRow> rows;
  for (const auto& ab : grid) {
    AblationRow row;
    row.ablation = ab;
    row.seeds = seeds;
    for (auto seed : seeds) {
      TrainConfig tc = base_train;
      tc.ablation = ab;
      tc.seed = seed;
      tc.checkpoint_dir.clear();
      const TrainResult r = train(train_set, test_set, base_model, tc);
      row.per_seed.push_back(r.final_eval.summary);
      if (progress) {
        progress(ab.name() + " seed " + std::to_string(seed) + ": dice " + metrics::format_mean_std(r.final_eval.summary.dice));
      }
    }
    std::vector<double> iou, dice, recall, precision;
    for (const auto& s : row.per_seed) {
      iou.push_back(s.iou.mean);
      dice.push_back(s.dice.mean);
      recall.push_back(s.recall.mean);
      precision.push_back(s.precision.mean);
    }
    row.iou = median(iou);
    row.dice = median(dice);
    row.recall = median(recall);
    row.precision = median(precision);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "variant,ds,sc,ccf,seeds,iou,dice,recall,precision\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%zu,%.17g,%.17g,%.17g,%.17g\n", r.ablation.name().c_str(),
                  r.ablation.use_ds, r.ablation.use_sc, r.ablation.use_ccf, r.seeds.size(), r.iou, r.dice, r.recall,
                  r.precision);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<AblationRow> read_ablation_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "variant,ds,sc,ccf,seeds,iou,dice,recall,precision") throw IoError("unexpected ablation header in " + path.string());
  std::vector<AblationRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw IoError("malformed ablation row in " + path.string());
    AblationRow r;
    r.ablation = {f[1] == "1", f[2] == "1", f[3] == "1"};
    r.seeds.resize(std::stoul(f[4]));
    r.iou = std::stod(f[5]);
    r.dice = std::stod(f[6]);
    r.recall = std::stod(f[7]);
    r.precision = std::stod(f[8]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace tsn::trainer
