#pragma once

// The CLI subcommands as plain functions over streams, so tests can drive them
// without spawning a process. Each returns the process exit code.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hres/config.hpp"
#include "hres/dataio.hpp"
#include "hres/gradcam.hpp"
#include "hres/metrics.hpp"
#include "hres/model.hpp"
#include "hres/train.hpp"

namespace hres::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 1;
inline constexpr int kExitNumeric = 2;

inline constexpr const char* kPreprocessedExt = ".hres";

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

/// Runs body and maps exceptions onto the exit-code contract.
inline int guarded(Streams io, const std::function<int()>& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    io.err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const FormatError& e) {
    io.err << "format error (" << to_string(e.kind) << "): " << e.what() << '\n';
    return kExitInput;
  } catch (const ConfigError& e) {
    io.err << "config error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kExitInput;
  }
}

inline void echo_config(std::ostream& os, const CliConfig& cfg) {
  os << "# effective configuration\n" << cfg.to_text() << "# end configuration\n";
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct LoadedSamples {
  DatasetManifest manifest;
  SampleSet samples;
  bool preprocessed = false;
};

/// Accepts either a PNG tree (preprocessed on the fly with cfg) or a tree of
/// tensor files written by `preprocess`.
inline LoadedSamples load_samples(const fs::path& dir, const CliConfig& cfg) {
  LoadedSamples ls;
  ls.manifest = scan_dataset_dir(dir, ".png");
  if (ls.manifest.entries.empty()) {
    const DatasetManifest pre = scan_dataset_dir(dir, kPreprocessedExt);
    if (!pre.entries.empty()) {
      ls.manifest = pre;
      ls.preprocessed = true;
    }
  }
  const std::size_t n = ls.manifest.entries.size();
  if (n == 0) throw IoError("dataset " + dir.string() + " contains no .png or " + kPreprocessedExt + " files");
  ls.samples.images = Tensor({n, kNumPlanes, kPatchSize, kPatchSize});
  const std::size_t per = kNumPlanes * kPatchSize * kPatchSize;
  const GaussianKernel kernel = cfg.blur_kernel();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = ls.manifest.entries[i];
    Tensor planes;
    if (ls.preprocessed) {
      PreprocessedRecord rec = load_preprocessed(e.path);
      if (rec.label != e.label) {
        throw FormatError(FormatErrorKind::malformed, e.path.string() + ": stored label " + std::to_string(rec.label) +
                                                          " disagrees with its class directory");
      }
      planes = std::move(rec.image.planes);
    } else {
      planes = preprocess_patch(read_png(e.path), kernel, cfg.clahe).planes;
    }
    std::copy_n(planes.data(), per, ls.samples.images.data() + i * per);
    ls.samples.labels.push_back(e.label);
  }
  return ls;
}

inline Splits splits_for(const CliConfig& cfg, std::span<const std::size_t> labels) {
  return split_dataset(labels, SplitSpec::from_fractions(labels.size(), cfg.test_fraction, cfg.val_fraction,
                                                         cfg.split_seed));
}

/// Weights carry their own architecture; an explicitly configured model must match it.
inline Network load_network(const fs::path& weights, const CliConfig& cfg) {
  if (!cfg.model_explicit) return load_weights(weights);
  Network net(cfg.model);
  load_weights_into(net, weights);
  return net;
}

// ---------------------------------------------------------------------------

inline int cmd_synth(const CliConfig& cfg, const fs::path& out_dir, Streams io) {
  return guarded(io, [&] {
    echo_config(io.out, cfg);
    const DatasetManifest m = generate_synthetic(SyntheticSpec{cfg.synth_per_class, cfg.synth_seed, 50}, out_dir);
    io.out << "synthesized " << m.entries.size() << " patches in " << out_dir.string() << " (normal=" << m.counts[0]
           << ", affected=" << m.counts[1] << ")\n";
    return kExitOk;
  });
}

inline int cmd_preprocess(const CliConfig& cfg, const fs::path& in_dir, const fs::path& out_dir, Streams io) {
  return guarded(io, [&] {
    echo_config(io.out, cfg);
    const DatasetManifest m = scan_dataset_dir(in_dir);
    for (const auto& w : m.warnings) io.err << "warning: " << w << '\n';
    const GaussianKernel kernel = cfg.blur_kernel();
    std::array<std::size_t, 2> done{0, 0};
    std::vector<std::string> failures;
    for (const auto& e : m.entries) {
      try {
        const MultiChannelImage img = preprocess_patch(read_png(e.path), kernel, cfg.clahe);
        const fs::path dir = out_dir / std::to_string(e.label);
        fs::create_directories(dir);
        fs::path name = e.path.stem();
        name += kPreprocessedExt;
        save_preprocessed(dir / name, img, e.label, e.path.filename().string());
        ++done[e.label];
      } catch (const std::exception& ex) {
        failures.push_back(ex.what());
      }
    }
    io.out << "preprocessed " << done[0] + done[1] << " of " << m.entries.size() << " patches (normal=" << done[0]
           << ", affected=" << done[1] << ")\n";
    if (failures.empty()) return kExitOk;
    io.err << failures.size() << " file(s) failed:\n";
    for (const auto& f : failures) io.err << "  " << f << '\n';
    return kExitInput;
  });
}

inline void write_history_csv(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << fmt17(r.train_loss) << ',' << fmt17(r.train_accuracy) << ',' << fmt17(r.val_loss) << ','
       << fmt17(r.val_accuracy) << '\n';
  }
  const std::string s = os.str();
  detail::write_file_atomic(path, s.data(), s.size());
}

struct TrainOptions {
  fs::path data_dir;
  fs::path weights_out;
  fs::path history_out;  // empty: <weights>.history.csv
  bool sweep = false;
  bool quiet = false;
};

inline int cmd_train(const CliConfig& cfg, const TrainOptions& opt, Streams io) {
  return guarded(io, [&] {
    echo_config(io.out, cfg);
    const LoadedSamples data = load_samples(opt.data_dir, cfg);
    for (const auto& w : data.manifest.warnings) io.err << "warning: " << w << '\n';
    const Splits splits = splits_for(cfg, data.samples.labels);
    io.out << "dataset: " << data.samples.size() << " patches (normal=" << data.manifest.counts[0]
           << ", affected=" << data.manifest.counts[1] << "); split train=" << splits.train.size()
           << " val=" << splits.val.size() << " test=" << splits.test.size() << '\n';

    auto run = [&](const ModelConfig& model) {
      Network net = build_network(model, cfg.train.seed);
      FitCallbacks cb;
      if (!opt.quiet) {
        cb.on_epoch = [&](const EpochRecord& r) {
          io.out << "epoch " << r.epoch << "  train_loss=" << fmt4(r.train_loss) << " train_acc=" << fmt4(r.train_accuracy)
                 << "  val_loss=" << fmt4(r.val_loss) << " val_acc=" << fmt4(r.val_accuracy) << std::endl;
        };
      }
      FitResult fr = fit(net, data.samples, splits, cfg.train, cb);
      return std::make_pair(std::move(net), std::move(fr));
    };

    if (!opt.sweep) {
      auto [net, fr] = run(cfg.model);
      save_weights(net, opt.weights_out);
      fs::path hist = opt.history_out;
      if (hist.empty()) (hist = opt.weights_out) += ".history.csv";
      write_history_csv(hist, fr.history);
      const EvalResult val = evaluate_loss(net, splits.val, data.samples);
      io.out << "best epoch " << fr.best_epoch << " of " << fr.history.size()
             << (fr.stopped_early ? " (early stop)" : "") << ": val_loss=" << fmt4(val.loss)
             << " val_acc=" << fmt4(val.accuracy) << '\n'
             << "weights written to " << opt.weights_out.string() << ", history to " << hist.string() << '\n';
      return kExitOk;
    }

    // Kernel sizes 2..7 against 1..5 residual blocks; keeps the best by validation loss.
    std::ostringstream csv;
    csv << "kernel,blocks,best_epoch,val_loss,val_acc\n";
    double best_loss = std::numeric_limits<double>::infinity();
    ModelConfig best_model;
    std::optional<Network> best_net;
    for (std::size_t k = 2; k <= 7; ++k) {
      for (std::size_t blocks = 1; blocks <= 5; ++blocks) {
        ModelConfig m = cfg.model;
        m.kernel_size = k;
        m.num_residual_blocks = blocks;
        if (!cfg.widths_explicit || m.stage_widths.size() != blocks) m.stage_widths = ModelConfig::default_widths(blocks);
        auto [net, fr] = run(m);
        const EvalResult val = evaluate_loss(net, splits.val, data.samples);
        csv << k << ',' << blocks << ',' << fr.best_epoch << ',' << fmt17(val.loss) << ',' << fmt17(val.accuracy) << '\n';
        io.out << "sweep k=" << k << " blocks=" << blocks << "  val_loss=" << fmt4(val.loss)
               << " val_acc=" << fmt4(val.accuracy) << std::endl;
        if (val.loss < best_loss) {
          best_loss = val.loss;
          best_model = m;
          best_net = std::move(net);
        }
      }
    }
    save_weights(*best_net, opt.weights_out);
    fs::path sweep_csv = opt.history_out;
    if (sweep_csv.empty()) (sweep_csv = opt.weights_out) += ".sweep.csv";
    const std::string s = csv.str();
    detail::write_file_atomic(sweep_csv, s.data(), s.size());
    io.out << "best: k=" << best_model.kernel_size << " blocks=" << best_model.num_residual_blocks
           << " val_loss=" << fmt4(best_loss) << "; weights written to " << opt.weights_out.string() << ", grid to "
           << sweep_csv.string() << '\n';
    return kExitOk;
  });
}

struct EvalOptions {
  fs::path weights;
  fs::path data_dir;
  fs::path roc_out = "roc.csv";
  fs::path metrics_out;  // optional
  bool all = false;      // evaluate every patch instead of the test split
};

inline int cmd_eval(const CliConfig& cfg, const EvalOptions& opt, Streams io) {
  return guarded(io, [&] {
    echo_config(io.out, cfg);
    const Network net = load_network(opt.weights, cfg);
    const LoadedSamples data = load_samples(opt.data_dir, cfg);
    std::vector<std::size_t> idx;
    if (opt.all) {
      idx.resize(data.samples.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
    } else {
      idx = splits_for(cfg, data.samples.labels).test;
      std::sort(idx.begin(), idx.end());
    }
    std::vector<std::size_t> labels;
    for (std::size_t i : idx) labels.push_back(data.samples.labels[i]);
    const std::vector<double> scores = predict_scores(net, idx, data.samples);

    const ConfusionMatrix cm = confusion_matrix(scores, labels, cfg.eval_threshold);
    const MetricsReport report = compute_metrics(cm);
    io.out << "evaluated " << idx.size() << " patches (" << (opt.all ? "all" : "test split") << "), threshold "
           << fmt4(cfg.eval_threshold) << "\n\nconfusion matrix\n"
           << format_confusion(cm) << '\n'
           << format_metrics(report);
    if (!opt.metrics_out.empty()) {
      std::ostringstream os;
      write_metrics_csv(os, report);
      const std::string s = os.str();
      detail::write_file_atomic(opt.metrics_out, s.data(), s.size());
    }
    try {
      const double a = auroc(scores, labels);
      io.out << "AUROC " << fmt4(a) << '\n';
      std::ostringstream os;
      write_roc_csv(os, roc_curve(scores, labels));
      const std::string s = os.str();
      detail::write_file_atomic(opt.roc_out, s.data(), s.size());
      io.out << "ROC curve written to " << opt.roc_out.string() << '\n';
    } catch (const std::invalid_argument& e) {
      io.out << "AUROC undefined (" << e.what() << "); no ROC curve written\n";
    }
    return kExitOk;
  });
}

struct GradcamOptions {
  fs::path weights;
  std::vector<fs::path> images;
  fs::path out_dir;
};

inline int cmd_gradcam(const CliConfig& cfg, const GradcamOptions& opt, Streams io) {
  return guarded(io, [&] {
    echo_config(io.out, cfg);
    const Network net = load_network(opt.weights, cfg);
    const std::string layer = select_layer(net, cfg.gradcam_layer);
    fs::create_directories(opt.out_dir);
    const GaussianKernel kernel = cfg.blur_kernel();
    std::vector<std::string> failures;
    for (const auto& path : opt.images) {
      try {
        const RgbPatch patch = read_png(path);
        const MultiChannelImage img = preprocess_patch(patch, kernel, cfg.clahe);
        const auto probs = predict_proba(net, img);
        const std::size_t cls = predicted_class(probs);
        const Heatmap heat = gradcam(net, img, cls, layer);
        const std::string stem = path.stem().string();
        write_png_gray(opt.out_dir / (stem + ".heat.png"), heat.width, heat.height, heatmap_gray(heat));
        write_png(opt.out_dir / (stem + ".overlay.png"),
                  overlay(heat, resize_bilinear(patch, heat.width, heat.height), cfg.gradcam_alpha));
        io.out << path.string() << ": predicted " << (cls == kAffected ? "affected" : "normal") << " p="
               << fmt4(probs[cls]) << " (layer " << layer << ")\n";
      } catch (const NumericError&) {
        throw;
      } catch (const std::exception& e) {
        failures.push_back(e.what());
      }
    }
    io.out << "gradcam: " << opt.images.size() - failures.size() << " of " << opt.images.size() << " images done\n";
    if (failures.empty()) return kExitOk;
    io.err << failures.size() << " image(s) failed:\n";
    for (const auto& f : failures) io.err << "  " << f << '\n';
    return kExitInput;
  });
}

struct SummaryOptions {
  bool sweep = false;
  fs::path csv_out;  // optional
};

inline std::string format_summary(const LayerSummary& s) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "layer" << std::right << std::setw(4) << "k" << std::setw(7) << "f_in"
     << std::setw(7) << "f_out" << std::setw(7) << "d_in" << std::setw(12) << "rho" << std::setw(16) << "kappa"
     << std::setw(8) << "bias" << '\n';
  for (const auto& l : s.layers) {
    os << std::left << std::setw(18) << l.name << std::right << std::setw(4) << l.kernel << std::setw(7) << l.f_in
       << std::setw(7) << l.f_out << std::setw(7) << l.d_in << std::setw(12) << l.rho << std::setw(16) << l.kappa
       << std::setw(8) << l.bias << '\n';
  }
  os << std::left << std::setw(43) << "total" << std::right << std::setw(12) << s.total_rho << std::setw(16)
     << s.total_kappa << std::setw(8) << s.total_bias << '\n'
     << "parameters (weights + biases): " << s.total_parameters << '\n';
  return os.str();
}

inline void write_summary_csv(std::ostream& os, const LayerSummary& s) {
  os << "layer,kernel,f_in,f_out,d_in,rho,kappa,bias\n";
  for (const auto& l : s.layers) {
    os << l.name << ',' << l.kernel << ',' << l.f_in << ',' << l.f_out << ',' << l.d_in << ',' << l.rho << ','
       << l.kappa << ',' << l.bias << '\n';
  }
  os << "total,,,,," << s.total_rho << ',' << s.total_kappa << ',' << s.total_bias << '\n';
}

inline int cmd_summary(const CliConfig& cfg, const SummaryOptions& opt, Streams io) {
  return guarded(io, [&] {
    echo_config(io.out, cfg);
    std::ostringstream csv;
    if (!opt.sweep) {
      const LayerSummary s = summarize(cfg.model, kPatchSize);
      io.out << format_summary(s);
      write_summary_csv(csv, s);
    } else {
      csv << "kernel,blocks,parameters,kappa\n";
      io.out << "total parameters (kappa in parentheses); rows kernel size, columns residual blocks\n"
             << std::setw(4) << "k";
      for (std::size_t b = 1; b <= 5; ++b) io.out << std::setw(24) << ("blocks=" + std::to_string(b));
      io.out << '\n';
      for (std::size_t k = 2; k <= 7; ++k) {
        io.out << std::setw(4) << k;
        for (std::size_t blocks = 1; blocks <= 5; ++blocks) {
          ModelConfig m = cfg.model;
          m.kernel_size = k;
          m.num_residual_blocks = blocks;
          if (!cfg.widths_explicit || m.stage_widths.size() != blocks) {
            m.stage_widths = ModelConfig::default_widths(blocks);
          }
          const LayerSummary s = summarize(m, kPatchSize);
          io.out << std::setw(24) << (std::to_string(s.total_parameters) + " (" + std::to_string(s.total_kappa) + ")");
          csv << k << ',' << blocks << ',' << s.total_parameters << ',' << s.total_kappa << '\n';
        }
        io.out << '\n';
      }
    }
    if (!opt.csv_out.empty()) {
      const std::string s = csv.str();
      detail::write_file_atomic(opt.csv_out, s.data(), s.size());
      io.out << "csv written to " << opt.csv_out.string() << '\n';
    }
    return kExitOk;
  });
}

}  // namespace hres::cli
