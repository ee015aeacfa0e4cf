#pragma once

// Plain-text key=value configuration. One key per line, '#' starts a comment.
// Every key has a default; unknown keys are errors.

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hres/imageproc.hpp"
#include "hres/model.hpp"
#include "hres/train.hpp"

namespace hres {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  errno = 0;
  const unsigned long long x = std::strtoull(v.c_str(), nullptr, 10);
  if (errno == ERANGE) throw ConfigError(key + ": value out of range '" + v + "'");
  return x;
}

inline double parse_double(const std::string& key, const std::string& v) {
  if (v == "inf" || v == "infinity") return std::numeric_limits<double>::infinity();
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || std::isnan(x)) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return x;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest form that round-trips
  return std::string(buf, r.ptr);
}

}  // namespace detail

/// Parses "key = value" lines; returns pairs in file order.
inline std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text,
                                                                      const std::string& origin = "config") {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": expected key=value, got '" + line + "'");
    }
    out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    if (out.back().first.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": empty key");
  }
  return out;
}

struct CliConfig {
  ModelConfig model;
  bool widths_explicit = false;
  bool model_explicit = false;  // any model.* key was given
  TrainConfig train;
  double blur_sigma = 1.0;
  std::size_t blur_radius = 2;
  ClaheConfig clahe;
  double test_fraction = 0.2;
  double val_fraction = 0.1;
  std::uint64_t split_seed = 0;
  double eval_threshold = 0.5;
  double gradcam_alpha = 0.4;
  std::string gradcam_layer = "last_conv";
  std::size_t synth_per_class = 250;
  std::uint64_t synth_seed = 7;

  /// Applies one key. Returns false for an unknown key.
  bool set(const std::string& key, const std::string& v) {
    using detail::parse_double;
    using detail::parse_uint;
    if (key.rfind("model.", 0) == 0) model_explicit = true;
    if (key == "model.blocks") {
      model.num_residual_blocks = parse_uint(key, v);
    } else if (key == "model.kernel") {
      model.kernel_size = parse_uint(key, v);
    } else if (key == "model.widths") {
      widths_explicit = v != "default";
      if (widths_explicit) model.stage_widths = detail::parse_list(key, v);
    } else if (key == "model.stem_width") {
      model.stem_width = parse_uint(key, v);
    } else if (key == "model.shortcut_kernel") {
      model.shortcut_kernel = parse_uint(key, v);
    } else if (key == "model.elu_alpha") {
      model.elu_alpha = parse_double(key, v);
    } else if (key == "train.batch_size") {
      train.batch_size = parse_uint(key, v);
    } else if (key == "train.max_epochs") {
      train.max_epochs = parse_uint(key, v);
    } else if (key == "train.patience") {
      train.patience = parse_uint(key, v);
    } else if (key == "train.min_delta") {
      train.min_delta = parse_double(key, v);
    } else if (key == "train.learning_rate") {
      train.optimizer.learning_rate = parse_double(key, v);
    } else if (key == "train.rho") {
      train.optimizer.rho = parse_double(key, v);
    } else if (key == "train.epsilon") {
      train.optimizer.epsilon = parse_double(key, v);
    } else if (key == "train.seed") {
      train.seed = parse_uint(key, v);
    } else if (key == "blur.sigma") {
      blur_sigma = parse_double(key, v);
    } else if (key == "blur.radius") {
      blur_radius = parse_uint(key, v);
    } else if (key == "clahe.tile_rows") {
      clahe.tile_rows = parse_uint(key, v);
    } else if (key == "clahe.tile_cols") {
      clahe.tile_cols = parse_uint(key, v);
    } else if (key == "clahe.clip_limit") {
      clahe.clip_limit = parse_double(key, v);
    } else if (key == "split.test_fraction") {
      test_fraction = parse_double(key, v);
    } else if (key == "split.val_fraction") {
      val_fraction = parse_double(key, v);
    } else if (key == "split.seed") {
      split_seed = parse_uint(key, v);
    } else if (key == "eval.threshold") {
      eval_threshold = parse_double(key, v);
    } else if (key == "gradcam.alpha") {
      gradcam_alpha = parse_double(key, v);
    } else if (key == "gradcam.layer") {
      gradcam_layer = v;
    } else if (key == "synth.per_class") {
      synth_per_class = parse_uint(key, v);
    } else if (key == "synth.seed") {
      synth_seed = parse_uint(key, v);
    } else {
      return false;
    }
    return true;
  }

  /// Fills derived defaults and checks every bound.
  void finalize() {
    if (!widths_explicit) model.stage_widths = ModelConfig::default_widths(model.num_residual_blocks);
    try {
      model.validate();
      train.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!(blur_sigma > 0.0)) throw ConfigError("blur.sigma must be > 0");
    if (blur_radius < 1) throw ConfigError("blur.radius must be >= 1");
    if (clahe.tile_rows < 1 || clahe.tile_cols < 1) throw ConfigError("clahe tile grid must be at least 1x1");
    if (!(clahe.clip_limit > 1.0)) throw ConfigError("clahe.clip_limit must be > 1 (or inf)");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("split.test_fraction must be in (0,1)");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("split.val_fraction must be in (0,1)");
    if (!(eval_threshold >= 0.0 && eval_threshold <= 1.0)) throw ConfigError("eval.threshold must be in [0,1]");
    if (!(gradcam_alpha >= 0.0 && gradcam_alpha <= 1.0)) throw ConfigError("gradcam.alpha must be in [0,1]");
    if (synth_per_class < 1) throw ConfigError("synth.per_class must be >= 1");
  }

  /// The fully resolved configuration, one key per line, in schema order.
  std::string to_text() const {
    std::ostringstream os;
    os << model.to_text();
    os << "train.batch_size=" << train.batch_size << '\n'
       << "train.max_epochs=" << train.max_epochs << '\n'
       << "train.patience=" << train.patience << '\n'
       << "train.min_delta=" << detail::format_double(train.min_delta) << '\n'
       << "train.learning_rate=" << detail::format_double(train.optimizer.learning_rate) << '\n'
       << "train.rho=" << detail::format_double(train.optimizer.rho) << '\n'
       << "train.epsilon=" << detail::format_double(train.optimizer.epsilon) << '\n'
       << "train.seed=" << train.seed << '\n'
       << "blur.sigma=" << detail::format_double(blur_sigma) << '\n'
       << "blur.radius=" << blur_radius << '\n'
       << "clahe.tile_rows=" << clahe.tile_rows << '\n'
       << "clahe.tile_cols=" << clahe.tile_cols << '\n'
       << "clahe.clip_limit=" << detail::format_double(clahe.clip_limit) << '\n'
       << "split.test_fraction=" << detail::format_double(test_fraction) << '\n'
       << "split.val_fraction=" << detail::format_double(val_fraction) << '\n'
       << "split.seed=" << split_seed << '\n'
       << "eval.threshold=" << detail::format_double(eval_threshold) << '\n'
       << "gradcam.alpha=" << detail::format_double(gradcam_alpha) << '\n'
       << "gradcam.layer=" << gradcam_layer << '\n'
       << "synth.per_class=" << synth_per_class << '\n'
       << "synth.seed=" << synth_seed << '\n';
    return os.str();
  }

  GaussianKernel blur_kernel() const { return make_gaussian_kernel(blur_sigma, blur_radius); }
};

/// Applies text then overrides (each "key=value"), then finalises.
inline CliConfig parse_cli_config(const std::string& text, const std::vector<std::string>& overrides = {},
                                  const std::string& origin = "config") {
  CliConfig cfg;
  for (const auto& [k, v] : parse_kv_text(text, origin)) {
    if (!cfg.set(k, v)) throw ConfigError(origin + ": unknown key '" + k + "'");
  }
  for (const auto& o : overrides) {
    const auto kv = parse_kv_text(o, "--set");
    if (kv.size() != 1) throw ConfigError("--set expects exactly one key=value, got '" + o + "'");
    if (!cfg.set(kv[0].first, kv[0].second)) throw ConfigError("--set: unknown key '" + kv[0].first + "'");
  }
  cfg.finalize();
  return cfg;
}

inline CliConfig load_cli_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return parse_cli_config(text, overrides, path.empty() ? "config" : path);
}

/// Reads back the model.* keys written by ModelConfig::to_text.
inline ModelConfig model_config_from_text(const std::string& text) {
  CliConfig c;
  c.widths_explicit = true;
  for (const auto& [k, v] : parse_kv_text(text, "embedded config")) {
    if (k.rfind("model.", 0) != 0 || !c.set(k, v)) throw ConfigError("embedded config: unexpected key '" + k + "'");
  }
  c.model.validate();
  return c.model;
}

}  // namespace hres
