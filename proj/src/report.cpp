#include "tsn/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "tsn/error.hpp"
#include "tsn/run_config.hpp"

namespace tsn::report {

namespace {

std::string pad(const std::string& s, std::size_t width) {
  // Column widths count code points so the ± sign lines up.
  std::size_t cps = 0;
  for (unsigned char c : s) cps += (c & 0xC0) != 0x80;
  return cps >= width ? s + " " : s + std::string(width - cps, ' ');
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string metrics_table_text(const std::vector<NamedSummary>& rows) {
  std::size_t w = 8;
  for (const auto& r : rows) w = std::max(w, r.label.size() + 2);
  std::string out = pad("Method", w) + pad("IoU", 14) + pad("Dice", 14) + pad("Recall", 14) + "Precision\n";
  for (const auto& r : rows) {
    out += pad(r.label, w) + pad(metrics::format_mean_std(r.summary.iou), 14) +
           pad(metrics::format_mean_std(r.summary.dice), 14) + pad(metrics::format_mean_std(r.summary.recall), 14) +
           metrics::format_mean_std(r.summary.precision) + "\n";
  }
  return out;
}

void write_metrics_table_csv(const std::filesystem::path& path, const std::vector<NamedSummary>& rows) {
  std::ostringstream s;
  s << "method,iou_mean,iou_std,dice_mean,dice_std,recall_mean,recall_std,precision_mean,precision_std,patients\n";
  s.precision(17);
  for (const auto& r : rows) {
    const auto& m = r.summary;
    s << r.label << ',' << m.iou.mean << ',' << m.iou.std << ',' << m.dice.mean << ',' << m.dice.std << ','
      << m.recall.mean << ',' << m.recall.std << ',' << m.precision.mean << ',' << m.precision.std << ','
      << m.patients << '\n';
  }
  write_text(path, s.str());
}

std::string ablation_table_text(const std::vector<trainer::AblationRow>& rows) {
  const auto mark = [](bool on) { return std::string(on ? "✓" : "-"); };
  std::string out = pad("DS", 4) + pad("SC", 4) + pad("CCF", 5) + pad("IoU", 8) + pad("Dice", 8) + pad("Recall", 8) +
                    "Precision\n";
  for (const auto& r : rows) {
    out += pad(mark(r.ablation.use_ds), 4) + pad(mark(r.ablation.use_sc), 4) + pad(mark(r.ablation.use_ccf), 5) +
           pad(pct(r.iou), 8) + pad(pct(r.dice), 8) + pad(pct(r.recall), 8) + pct(r.precision) + "\n";
  }
  return out;
}

std::vector<std::uint8_t> overlay_panel(const Image& img, const Mask& pred_bin, const Mask& gt) {
  require_same_dims(img, gt, "overlay_panel");
  require_same_dims(pred_bin, gt, "overlay_panel");
  const int h = img.height();
  const int w = img.width();
  const int W = overlay_width(w);
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * W * 3);
  const auto gray = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  const auto put = [&](int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    auto* p = &rgb[(static_cast<std::size_t>(y) * W + x) * 3];
    p[0] = r;
    p[1] = g;
    p[2] = b;
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::uint8_t v = gray(img(y, x));
      put(y, x, v, v, v);
      const std::uint8_t m = gt(y, x) > 0.5 ? 255 : 0;
      put(y, w + x, m, m, m);
      const bool p = pred_bin(y, x) > 0.5;
      const bool t = gt(y, x) > 0.5;
      if (p && t) {
        put(y, 2 * w + x, v / 3, v / 3, static_cast<std::uint8_t>(128 + v / 2));
      } else if (t) {
        put(y, 2 * w + x, kFalseNegative[0], kFalseNegative[1], kFalseNegative[2]);
      } else if (p) {
        put(y, 2 * w + x, kFalsePositive[0], kFalsePositive[1], kFalsePositive[2]);
      } else {
        put(y, 2 * w + x, v, v, v);
      }
    }
  }
  return rgb;
}

std::string training_curve_svg(const trainer::TrainLog& log) {
  constexpr double kW = 720, kH = 300, kL = 60, kR = 20, kT = 30, kB = 40;
  const double pw = kW - kL - kR;
  const double ph = kH - kT - kB;
  const auto& ep = log.epochs;
  const int n = static_cast<int>(ep.size());
  double ymax = 0.0;
  for (const auto& e : ep) ymax = std::max(ymax, e.loss);
  if (!(ymax > 0.0)) ymax = 1.0;
  const int last = std::max(1, n > 0 ? ep.back().epoch : 1);
  const auto px = [&](int epoch) { return kL + (last > 1 ? (epoch - 1) * pw / (last - 1) : pw / 2); };
  const auto py = [&](double v, double top) { return kT + ph - std::clamp(v / top, 0.0, 1.0) * ph; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << 2 * kH << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const auto panel = [&](double oy, const std::string& title, double top) {
    s << "<g transform=\"translate(0," << oy << ")\">\n";
    s << "<text x=\"" << kL << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
    s << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#888\"/>\n";
    for (int k = 0; k <= 4; ++k) {
      const double v = top * k / 4.0;
      s << "<text x=\"" << kL - 6 << "\" y=\"" << fmt(py(v, top) + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << fmt(v) << "</text>\n";
    }
    s << "<text x=\"" << kL + pw / 2 << "\" y=\"" << kH - 8
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">epoch (1.." << last << ")</text>\n";
  };
  const auto line = [&](const std::string& color, double top, auto value) {
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& e : ep) s << fmt(px(e.epoch)) << ',' << fmt(py(value(e), top)) << ' ';
    s << "\"/>\n";
  };
  const auto legend = [&](int k, const std::string& color, const std::string& label) {
    const double x = kL + 10 + 130 * k;
    s << "<rect x=\"" << x << "\" y=\"" << kT + 6 << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>";
    s << "<text x=\"" << x + 14 << "\" y=\"" << kT + 15 << "\" font-family=\"sans-serif\" font-size=\"11\">" << label
      << "</text>\n";
  };

  panel(0, "training loss", ymax);
  line("#000000", ymax, [](const trainer::EpochRecord& e) { return e.loss; });
  line("#1f77b4", ymax, [](const trainer::EpochRecord& e) { return e.dice_loss; });
  line("#d62728", ymax, [](const trainer::EpochRecord& e) { return e.bce_loss; });
  line("#2ca02c", ymax, [](const trainer::EpochRecord& e) { return e.structural_loss; });
  legend(0, "#000000", "total");
  legend(1, "#1f77b4", "dice");
  legend(2, "#d62728", "bce");
  legend(3, "#2ca02c", "structural");
  s << "</g>\n";

  panel(kH, "test Dice (patient mean)", 1.0);
  s << "<polyline fill=\"none\" stroke=\"#9467bd\" stroke-width=\"1.5\" points=\"";
  for (const auto& e : ep) {
    if (e.test) s << fmt(px(e.epoch)) << ',' << fmt(py(e.test->dice.mean, 1.0)) << ' ';
  }
  s << "\"/>\n";
  for (const auto& e : ep) {
    if (e.test) {
      s << "<circle cx=\"" << fmt(px(e.epoch)) << "\" cy=\"" << fmt(py(e.test->dice.mean, 1.0))
        << "\" r=\"3\" fill=\"#9467bd\"><title>epoch " << e.epoch << ": " << pct(e.test->dice.mean)
        << "</title></circle>\n";
    }
  }
  s << "</g>\n</svg>\n";
  return s.str();
}

std::vector<std::filesystem::path> generate_report(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  const RunLayout run{run_dir};
  std::vector<std::string> missing;
  for (const auto& p : {run.config(), run.log(), run.checkpoint()}) {
    if (!fs::exists(p)) missing.push_back(p.string());
  }
  RunConfig cfg;
  if (fs::exists(run.config())) {
    cfg = RunConfig::from_file(run.config());
    const fs::path manifest = cfg.data_dir / data::kManifestName;
    if (cfg.data_dir.empty() || !fs::exists(manifest)) missing.push_back(manifest.string());
  }
  if (!missing.empty()) {
    std::string msg = "report: missing required files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw ValidationError(msg);
  }

  const fs::path out = run.report_dir();
  fs::create_directories(out / "overlays");
  std::vector<fs::path> written;

  const auto log = trainer::TrainLog::read_csv(run.log());
  write_text(out / "training_curve.svg", training_curve_svg(log));
  written.push_back(out / "training_curve.svg");

  auto ck = trainer::load_checkpoint(run.checkpoint(), cfg.model);
  const auto manifest = data::load_dataset(cfg.data_dir);
  const auto test = data::load_samples(manifest, data::Split::Test);
  const auto probs = trainer::predict_batch(ck.state, ck.config, [&] {
    std::vector<Image> imgs;
    for (const auto& s : test) imgs.push_back(s.image);
    return imgs;
  }());
  const auto result = trainer::evaluate_predictions(test, probs, cfg.aggregation);

  const std::vector<NamedSummary> rows{{"ToothSegNet (" + cfg.train.ablation.name() + ")", result.summary}};
  write_text(out / "metrics_table.txt", metrics_table_text(rows));
  write_metrics_table_csv(out / "metrics_table.csv", rows);
  metrics::write_metrics_csv(out / "patients.csv", result.patients);
  written.insert(written.end(), {out / "metrics_table.txt", out / "metrics_table.csv", out / "patients.csv"});

  for (std::size_t i = 0; i < test.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_s%02d.png", test[i].patient_id.c_str(), test[i].slice_id);
    const Mask bin = metrics::binarize(probs[i]);
    const auto rgb = overlay_panel(test[i].image, bin, test[i].mask);
    write_png_rgb(out / "overlays" / name, rgb, test[i].image.height(), overlay_width(test[i].image.width()));
    written.push_back(out / "overlays" / name);
  }

  if (fs::exists(run.ablation())) {
    const auto ab = trainer::read_ablation_csv(run.ablation());
    write_text(out / "ablation_table.txt", ablation_table_text(ab));
    trainer::write_ablation_csv(out / "ablation_table.csv", ab);
    written.insert(written.end(), {out / "ablation_table.txt", out / "ablation_table.csv"});
  }
  return written;
}

}  // namespace tsn::report
