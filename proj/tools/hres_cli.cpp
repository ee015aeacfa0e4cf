#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hres_commands.hpp"

using namespace hres;
using namespace hres::cli;

int main(int argc, char** argv) {
  CLI::App app{"hres: 7-channel residual CNN pipeline for histopathology patches"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "key=value configuration file");
  app.add_option("-s,--set", overrides, "override one key, e.g. --set train.max_epochs=20")->take_all();

  auto* synth = app.add_subcommand("synth", "generate a synthetic two-class PNG dataset");
  std::string synth_out;
  synth->add_option("-o,--out", synth_out, "output dataset directory")->required();

  auto* pre = app.add_subcommand("preprocess", "convert a PNG tree into 7x100x100 tensor files");
  std::string pre_in, pre_out;
  pre->add_option("-i,--in", pre_in, "dataset directory with 0/ and 1/")->required();
  pre->add_option("-o,--out", pre_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "split, fit with early stopping, save the best weights");
  TrainOptions topt;
  std::string t_data, t_out, t_hist;
  train->add_option("-d,--data", t_data, "dataset directory (PNG or preprocessed)")->required();
  train->add_option("-o,--out", t_out, "weights output path")->required();
  train->add_option("--history", t_hist, "history CSV path (default <out>.history.csv)");
  train->add_flag("--sweep", topt.sweep, "train every kernel 2..7 x blocks 1..5 combination");
  train->add_flag("-q,--quiet", topt.quiet, "no per-epoch lines");

  auto* eval = app.add_subcommand("eval", "confusion matrix, metric table, AUROC and ROC CSV");
  EvalOptions eopt;
  std::string e_w, e_data, e_roc = "roc.csv", e_metrics;
  eval->add_option("-w,--weights", e_w, "weights file")->required();
  eval->add_option("-d,--data", e_data, "dataset directory (PNG or preprocessed)")->required();
  eval->add_option("--roc", e_roc, "ROC CSV output path")->capture_default_str();
  eval->add_option("--metrics", e_metrics, "optional metrics CSV output path");
  eval->add_flag("--all", eopt.all, "evaluate every patch instead of the held-out test split");

  auto* cam = app.add_subcommand("gradcam", "heatmap and overlay PNGs per input image");
  GradcamOptions gopt;
  std::string g_w, g_out, g_layer;
  std::vector<std::string> g_images;
  cam->add_option("-w,--weights", g_w, "weights file")->required();
  cam->add_option("-o,--out", g_out, "output directory")->required();
  cam->add_option("--layer", g_layer, "conv layer name or last_conv (same as --set gradcam.layer=...)");
  cam->add_option("images", g_images, "input PNG patches")->required();

  auto* summary = app.add_subcommand("summary", "per-layer parameter and cost table");
  SummaryOptions sopt;
  std::string s_csv;
  summary->add_flag("--sweep", sopt.sweep, "totals for kernel 2..7 x blocks 1..5");
  summary->add_option("--csv", s_csv, "also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInput;
  }

  if (!g_layer.empty()) overrides.push_back("gradcam.layer=" + g_layer);
  Streams io{std::cout, std::cerr};
  CliConfig cfg;
  const int rc = guarded(io, [&] {
    cfg = load_cli_config(config_path, overrides);
    return kExitOk;
  });
  if (rc != kExitOk) return rc;

  if (*synth) return cmd_synth(cfg, synth_out, io);
  if (*pre) return cmd_preprocess(cfg, pre_in, pre_out, io);
  if (*train) {
    topt.data_dir = t_data;
    topt.weights_out = t_out;
    topt.history_out = t_hist;
    return cmd_train(cfg, topt, io);
  }
  if (*eval) {
    eopt.weights = e_w;
    eopt.data_dir = e_data;
    eopt.roc_out = e_roc;
    eopt.metrics_out = e_metrics;
    return cmd_eval(cfg, eopt, io);
  }
  if (*cam) {
    gopt.weights = g_w;
    gopt.out_dir = g_out;
    gopt.images.assign(g_images.begin(), g_images.end());
    return cmd_gradcam(cfg, gopt, io);
  }
  sopt.csv_out = s_csv;
  return cmd_summary(cfg, sopt, io);
}
