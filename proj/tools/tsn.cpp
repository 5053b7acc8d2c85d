// tsn: data generation, degradation preview, training, evaluation, ablation,
// reconstruction and reports.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>

#include "CLI11.hpp"
#include "json.hpp"
#include "tsn/data.hpp"
#include "tsn/degrade.hpp"
#include "tsn/error.hpp"
#include "tsn/recon.hpp"
#include "tsn/report.hpp"
#include "tsn/run_config.hpp"
#include "tsn/trainer.hpp"

namespace fs = std::filesystem;
using namespace tsn;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct TrainOverrides {
  std::string config;
  std::string data;
  std::string out;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<int> eval_every;
  std::optional<std::string> aggregation;
  bool no_ds = false;
  bool no_sc = false;
  bool no_ccf = false;
  bool no_augment = false;
};

// flags > file > defaults
RunConfig resolve(const TrainOverrides& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::from_file(o.config);
  if (!o.data.empty()) cfg.data_dir = o.data;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  if (o.lr) cfg.train.learning_rate = *o.lr;
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.eval_every) cfg.train.eval_every = *o.eval_every;
  if (o.aggregation) cfg.aggregation = parse_aggregation(*o.aggregation);
  if (o.no_ds) cfg.train.ablation.use_ds = false;
  if (o.no_sc) cfg.train.ablation.use_sc = false;
  if (o.no_ccf) cfg.train.ablation.use_ccf = false;
  if (o.no_augment) cfg.train.augment = false;
  cfg.model = trainer::apply_ablation(cfg.model, cfg.train.ablation);
  return cfg;
}

void add_train_flags(CLI::App* cmd, TrainOverrides& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--data", o.data, "dataset directory (overrides paths.data)");
  cmd->add_option("--epochs", o.epochs);
  cmd->add_option("--batch-size", o.batch_size);
  cmd->add_option("--lr", o.lr, "learning rate");
  cmd->add_option("--seed", o.seed, "seed for initialization, shuffling, augmentation and degradation");
  cmd->add_option("--eval-every", o.eval_every, "evaluate every N epochs (0: final epoch only)");
  cmd->add_option("--aggregation", o.aggregation, "pooled or slice-mean");
  cmd->add_flag("--no-ds", o.no_ds, "disable the degradation branch");
  cmd->add_flag("--no-sc", o.no_sc, "disable the structural loss");
  cmd->add_flag("--no-ccf", o.no_ccf, "replace cross fusion with plain skips");
  cmd->add_flag("--no-augment", o.no_augment, "disable flips and rotations");
}

// Loads both splits and checks them against the model input size.
std::pair<std::vector<data::Sample>, std::vector<data::Sample>> load_splits(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) throw ValidationError("no dataset given (use --data or paths.data)");
  const auto manifest = data::load_dataset(cfg.data_dir);
  auto train = data::load_samples(manifest, data::Split::Train);
  auto test = data::load_samples(manifest, data::Split::Test);
  if (train.empty()) throw ValidationError("dataset has no training slices");
  if (test.empty()) throw ValidationError("dataset has no test slices");
  const auto& img = train.front().image;
  if (img.height() != cfg.model.input_h || img.width() != cfg.model.input_w) {
    throw ValidationError("dataset images are " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                          " but the model expects " + std::to_string(cfg.model.input_h) + "x" +
                          std::to_string(cfg.model.input_w));
  }
  return {std::move(train), std::move(test)};
}

void write_json(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text << '\n';
}

std::string slice_name(const std::string& patient, int slice) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_s%02d.png", patient.c_str(), slice);
  return buf;
}

int cmd_gen_data(int patients, int slices, int hw, std::optional<std::uint64_t> seed, const std::string& config,
                 double test_fraction, const fs::path& out) {
  RunConfig cfg = config.empty() ? RunConfig{} : RunConfig::from_file(config);
  if (patients > 0) cfg.dataset.patients = patients;
  if (slices > 0) cfg.dataset.slices = slices;
  if (hw > 0) cfg.phantom.height = cfg.phantom.width = hw;
  if (seed) cfg.phantom.seed = *seed;
  if (test_fraction > 0) cfg.dataset.test_fraction = test_fraction;
  cfg.phantom.validate();
  if (cfg.dataset.patients < 2) throw ValidationError("--patients must be at least 2");
  if (cfg.dataset.slices < 1) throw ValidationError("--slices must be positive");
  if (!(cfg.dataset.test_fraction > 0 && cfg.dataset.test_fraction < 1)) {
    throw ValidationError("--test-fraction must lie in (0, 1)");
  }
  const auto m = data::generate_dataset(cfg.phantom, cfg.dataset.patients, cfg.dataset.slices, out,
                                        cfg.dataset.test_fraction);
  nlohmann::ordered_json j;
  j["out"] = out.string();
  j["phantom"] = nlohmann::ordered_json::parse(nlohmann::json(cfg.phantom).dump());
  j["train_slices"] = m.select(data::Split::Train).size();
  j["test_slices"] = m.select(data::Split::Test).size();
  j["test_patients"] = m.patients(data::Split::Test).size();
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_degrade(const std::string& in, const std::string& out, const std::string& kind_name, bool random,
                std::uint64_t seed, const std::string& preview) {
  const int modes = (!kind_name.empty()) + random + (!preview.empty());
  if (modes != 1) throw ValidationError("degrade: give exactly one of --kind, --random or --preview");
  if (preview.empty() && out.empty()) throw ValidationError("degrade: --out is required with --kind or --random");
  std::optional<degrade::DegradationKind> kind;
  if (!kind_name.empty()) {
    kind = degrade::parse_kind(kind_name);
    if (!kind) throw ValidationError("degrade: unknown kind '" + kind_name + "' (blur1, blur2, identity, artifact)");
  }
  if (!fs::exists(in)) throw IoError("degrade: cannot read " + in);
  const Image img = read_png_gray(in);
  if (!preview.empty()) {
    fs::create_directories(preview);
    nlohmann::ordered_json files = nlohmann::ordered_json::array();
    for (const auto k : degrade::kAllKinds) {
      const fs::path p = fs::path(preview) / (std::string(degrade::to_string(k)) + ".png");
      write_png(p, degrade::apply(img, k));
      files.push_back(p.string());
    }
    std::cout << files.dump(2) << '\n';
    return 0;
  }
  if (random) {
    RandomState rng(seed);
    kind = degrade::sample_kind(rng);
  }
  write_png(out, degrade::apply(img, *kind));
  std::cout << nlohmann::ordered_json{{"kind", degrade::to_string(*kind)}, {"out", out}}.dump() << '\n';
  return 0;
}

int cmd_train(const TrainOverrides& o) {
  RunConfig cfg = resolve(o);
  if (cfg.out_dir.empty()) throw ValidationError("train: --out is required");
  cfg.validate();
  auto [train_set, test_set] = load_splits(cfg);

  const report::RunLayout run{cfg.out_dir};
  cfg.train.checkpoint_dir = run.ckpt_dir();
  std::cout << cfg.to_json().dump(2) << '\n' << std::flush;

  fs::create_directories(run.root);
  write_json(run.config(), cfg.to_json().dump(2));
  trainer::TrainLog progress;
  const auto on_epoch = [&](const trainer::EpochRecord& e) {
    progress.epochs.push_back(e);
    progress.write_csv(run.log());
    std::fprintf(stderr, "epoch %d/%d loss %.4f", e.epoch, cfg.train.epochs, e.loss);
    if (e.test) std::fprintf(stderr, " test dice %s", metrics::format_mean_std(e.test->dice).c_str());
    std::fprintf(stderr, " (%.1fs)\n", e.wall_seconds);
  };
  auto result = trainer::train(train_set, test_set, cfg.model, cfg.train, on_epoch);
  result.log.write_csv(run.log());
  auto eval = trainer::evaluate(test_set, result.state, result.model_config, cfg.aggregation);
  metrics::write_metrics_csv(run.metrics(), eval.patients);
  write_json(run.summary(), metrics::summary_json(eval.summary));
  std::cerr << metrics::summary_json(eval.summary) << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& split,
             const std::string& aggregation, const std::string& out) {
  const auto mode = parse_aggregation(aggregation);
  const auto which = data::parse_split(split);
  if (!fs::exists(checkpoint)) throw ValidationError("eval: checkpoint not found: " + checkpoint);
  auto ck = trainer::load_checkpoint(checkpoint);
  const auto samples = data::load_samples(data::load_dataset(data_dir), which);
  if (samples.empty()) throw ValidationError("eval: no slices in split '" + split + "'");
  if (samples.front().image.height() != ck.config.input_h || samples.front().image.width() != ck.config.input_w) {
    throw ValidationError("eval: dataset image size does not match the checkpoint's model input");
  }
  std::vector<Image> images;
  for (const auto& s : samples) images.push_back(s.image);
  const auto probs = trainer::predict_batch(ck.state, ck.config, images);
  const auto result = trainer::evaluate_predictions(samples, probs, mode);
  if (!out.empty()) {
    fs::create_directories(fs::path(out) / "masks");
    metrics::write_metrics_csv(fs::path(out) / "metrics.csv", result.patients);
    write_json(fs::path(out) / "summary.json", metrics::summary_json(result.summary));
    for (std::size_t i = 0; i < samples.size(); ++i) {
      write_png(fs::path(out) / "masks" / slice_name(samples[i].patient_id, samples[i].slice_id),
                metrics::binarize(probs[i]));
    }
  }
  std::cout << metrics::summary_json(result.summary) << '\n';
  return 0;
}

int cmd_ablate(const TrainOverrides& o, int n_seeds, const std::string& out) {
  if (n_seeds < 1) throw ValidationError("ablate: --seeds must be positive");
  if (out.empty()) throw ValidationError("ablate: --out is required");
  RunConfig cfg = resolve(o);
  cfg.validate();
  auto [train_set, test_set] = load_splits(cfg);
  std::cout << cfg.to_json().dump(2) << '\n' << std::flush;
  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < n_seeds; ++k) seeds.push_back(cfg.train.seed + static_cast<std::uint64_t>(k));
  const auto rows = trainer::run_ablation(trainer::ablation_grid(), seeds, train_set, test_set, cfg.model, cfg.train,
                                          [](const std::string& msg) { std::cerr << msg << '\n'; });
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  trainer::write_ablation_csv(out, rows);
  std::cout << report::ablation_table_text(rows);
  return 0;
}

// Mask files for one patient in slice order: from the manifest when the
// directory is a dataset, otherwise from <patient>_sNN.png names.
std::vector<fs::path> patient_masks(const fs::path& dir, const std::string& patient) {
  std::vector<std::pair<int, fs::path>> found;
  if (fs::exists(dir / data::kManifestName)) {
    const auto m = data::load_dataset(dir);
    for (const auto& e : m.entries) {
      if (e.patient_id == patient) found.emplace_back(e.slice_id, m.root / e.mask_path);
    }
  } else {
    if (!fs::is_directory(dir)) throw ValidationError("reconstruct: not a directory: " + dir.string());
    const std::regex pat(std::regex_replace(patient, std::regex(R"([.^$|()\[\]{}*+?\\])"), R"(\$&)") +
                         R"(_s(\d+)\.png)");
    for (const auto& f : fs::directory_iterator(dir)) {
      std::smatch mt;
      const std::string name = f.path().filename().string();
      if (std::regex_match(name, mt, pat)) found.emplace_back(std::stoi(mt[1].str()), f.path());
    }
  }
  if (found.empty()) throw ValidationError("reconstruct: no masks for patient '" + patient + "' in " + dir.string());
  std::sort(found.begin(), found.end());
  std::vector<fs::path> paths;
  for (auto& [id, p] : found) paths.push_back(std::move(p));
  return paths;
}

int cmd_reconstruct(const std::string& masks_dir, const std::string& patient, const std::string& out,
                    const std::string& stl, bool raw, const std::vector<double>& spacing) {
  if (spacing.size() != 3 || std::any_of(spacing.begin(), spacing.end(), [](double s) { return !(s > 0); })) {
    throw ValidationError("reconstruct: --spacing needs three positive values");
  }
  const auto ext = fs::path(out).extension().string();
  if (ext != ".obj" && ext != ".stl") throw ValidationError("reconstruct: --out must end in .obj or .stl");
  const auto files = patient_masks(masks_dir, patient);
  std::vector<Mask> masks;
  for (const auto& f : files) masks.push_back(read_png_mask(f));
  const auto vol = recon::stack_slices(masks, {spacing[0], spacing[1], spacing[2]});
  const auto mesh = recon::marching_cubes(vol, 0.5, !raw);
  if (ext == ".obj") {
    recon::write_obj(out, mesh);
  } else {
    recon::write_stl(out, mesh);
  }
  if (!stl.empty()) recon::write_stl(stl, mesh);
  nlohmann::ordered_json j;
  j["patient"] = patient;
  j["slices"] = masks.size();
  j["grid"] = {vol.depth, vol.height, vol.width};
  j["foreground_voxels"] = std::count(vol.voxels.begin(), vol.voxels.end(), 1);
  j["box_filter"] = !raw;
  j["vertices"] = mesh.vertices.size();
  j["faces"] = mesh.faces.size();
  j["components"] = recon::count_components(mesh);
  j["euler_characteristic"] = recon::euler_characteristic(mesh);
  j["closed_manifold"] = recon::is_closed_manifold(mesh);
  j["volume"] = recon::enclosed_volume(mesh);
  j["out"] = out;
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const auto files = report::generate_report(run_dir);
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& f : files) j.push_back(f.string());
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dental CBCT tooth segmentation lab"};
  app.require_subcommand(1);

  int patients = 0, slices = 0, hw = 0;
  double test_fraction = 0;
  std::optional<std::uint64_t> gen_seed;
  std::string gen_config, gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
  gen->add_option("--patients", patients, "number of patients");
  gen->add_option("--slices", slices, "slices per patient");
  gen->add_option("--hw", hw, "image height and width");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--test-fraction", test_fraction, "fraction of patients held out");
  gen->add_option("--config", gen_config, "JSON run configuration (phantom and dataset sections)")
      ->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output directory")->required();

  std::string deg_in, deg_out, deg_kind, deg_preview;
  bool deg_random = false;
  std::uint64_t deg_seed = 0;
  auto* deg = app.add_subcommand("degrade", "apply a degradation operator to a PNG");
  deg->add_option("--in", deg_in, "input grayscale PNG")->required();
  deg->add_option("--out", deg_out, "output PNG");
  deg->add_option("--kind", deg_kind, "blur1, blur2, identity or artifact");
  deg->add_flag("--random", deg_random, "draw the kind uniformly");
  deg->add_option("--seed", deg_seed, "seed for --random");
  deg->add_option("--preview", deg_preview, "write all four variants into this directory");

  TrainOverrides train_opts;
  auto* tr = app.add_subcommand("train", "train a model into a run directory");
  add_train_flags(tr, train_opts);
  tr->add_option("--out", train_opts.out, "run directory");

  std::string ev_ckpt, ev_data, ev_split = "test", ev_agg = "pooled", ev_out;
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train or test");
  ev->add_option("--aggregation", ev_agg, "pooled or slice-mean");
  ev->add_option("--out", ev_out, "write metrics.csv, summary.json and predicted masks here");

  TrainOverrides ab_opts;
  int ab_seeds = 3;
  std::string ab_out;
  auto* ab = app.add_subcommand("ablate", "train the four ablation variants over several seeds");
  add_train_flags(ab, ab_opts);
  ab->add_option("--seeds", ab_seeds, "number of seeds per variant");
  ab->add_option("--out", ab_out, "ablation CSV")->required();

  std::string rc_masks, rc_patient, rc_out, rc_stl;
  bool rc_raw = false;
  std::vector<double> rc_spacing{1.0, 1.0, 1.0};
  auto* rc = app.add_subcommand("reconstruct", "stack a patient's masks and extract a surface mesh");
  rc->add_option("--masks", rc_masks, "dataset directory or directory of <patient>_sNN.png masks")->required();
  rc->add_option("--patient", rc_patient, "patient id")->required();
  rc->add_option("--out", rc_out, "mesh path (.obj or .stl)")->required();
  rc->add_option("--stl", rc_stl, "additionally write binary STL here");
  rc->add_flag("--raw", rc_raw, "skip the 3x3x3 box filter");
  rc->add_option("--spacing", rc_spacing, "voxel spacing x y z")->expected(3)->delimiter(',');

  std::string rp_dir;
  auto* rp = app.add_subcommand("report", "tables, overlays and curves for a run directory");
  rp->add_option("run_dir", rp_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*gen) return cmd_gen_data(patients, slices, hw, gen_seed, gen_config, test_fraction, gen_out);
    if (*deg) return cmd_degrade(deg_in, deg_out, deg_kind, deg_random, deg_seed, deg_preview);
    if (*tr) return cmd_train(train_opts);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_agg, ev_out);
    if (*ab) return cmd_ablate(ab_opts, ab_seeds, ab_out);
    if (*rc) return cmd_reconstruct(rc_masks, rc_patient, rc_out, rc_stl, rc_raw, rc_spacing);
    if (*rp) return cmd_report(rp_dir);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}
