#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "hres_commands.hpp"

using namespace hres;
using namespace hres::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("hres_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Small enough to train in seconds.
CliConfig tiny_config(std::vector<std::string> extra = {}) {
  std::vector<std::string> o = {"model.blocks=1", "model.widths=4",    "model.stem_width=4", "train.max_epochs=2",
                                "synth.per_class=8", "train.batch_size=8"};
  o.insert(o.end(), extra.begin(), extra.end());
  return parse_cli_config("", o);
}

struct Capture {
  std::ostringstream out, err;
  Streams io() { return {out, err}; }
};

}  // namespace

TEST(CliConfig, EchoIsReparseable) {
  const CliConfig a = tiny_config({"train.learning_rate=0.0005", "clahe.clip_limit=inf"});
  Capture r;
  ASSERT_EQ(cmd_summary(a, {}, r.io()), 0);
  const std::string out = r.out.str();
  const auto b = out.find("# effective configuration\n"), e = out.find("# end configuration\n");
  ASSERT_NE(b, std::string::npos);
  ASSERT_NE(e, std::string::npos);
  const CliConfig again = parse_cli_config(out.substr(b, e - b));
  EXPECT_EQ(again.to_text(), a.to_text());
}

TEST(CliConfig, RejectsUnknownAndInvalid) {
  EXPECT_THROW(parse_cli_config("", {"train.patience=0"}), ConfigError);
  EXPECT_THROW(parse_cli_config("model.depth=3\n"), ConfigError);
  EXPECT_THROW(parse_cli_config("", {"train.seed=abc"}), ConfigError);
}

TEST(CliSynthPreprocess, CountsDeterminismAndPartialFailure) {
  TempDir t;
  const CliConfig cfg = parse_cli_config("", {"synth.per_class=3"});
  Capture s;
  ASSERT_EQ(cmd_synth(cfg, t.path / "data", s.io()), 0);
  // 3 + 2 patches
  fs::remove(t.path / "data" / "1" / "syn_00002.png");

  Capture p1;
  ASSERT_EQ(cmd_preprocess(cfg, t.path / "data", t.path / "pre1", p1.io()), 0) << p1.err.str();
  EXPECT_NE(p1.out.str().find("preprocessed 5 of 5 patches (normal=3, affected=2)"), std::string::npos);
  Capture p2;
  ASSERT_EQ(cmd_preprocess(cfg, t.path / "data", t.path / "pre2", p2.io()), 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(t.path / "pre1")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path twin = t.path / "pre2" / fs::relative(e.path(), t.path / "pre1");
    EXPECT_EQ(slurp(e.path()), slurp(twin)) << e.path();
  }
  EXPECT_EQ(files, 5u);

  std::ofstream(t.path / "data" / "0" / "broken.png") << "not a png";
  Capture p3;
  EXPECT_EQ(cmd_preprocess(cfg, t.path / "data", t.path / "pre3", p3.io()), 1);
  EXPECT_NE(p3.out.str().find("preprocessed 5 of 6 patches"), std::string::npos);
  EXPECT_NE(p3.err.str().find("broken.png"), std::string::npos);
}

TEST(CliTrainEval, HistoryRocAndDeterminism) {
  TempDir t;
  const CliConfig cfg = tiny_config();
  Capture s;
  ASSERT_EQ(cmd_synth(cfg, t.path / "data", s.io()), 0);

  TrainOptions opt{t.path / "data", t.path / "a.hres", {}, false, true};
  Capture tr1;
  ASSERT_EQ(cmd_train(cfg, opt, tr1.io()), 0) << tr1.err.str();
  const auto hist = lines_of(slurp(t.path / "a.hres.history.csv"));
  ASSERT_EQ(hist.size(), 3u);
  EXPECT_EQ(hist[0], "epoch,train_loss,train_acc,val_loss,val_acc");
  EXPECT_EQ(hist[1].rfind("1,", 0), 0u);

  opt.weights_out = t.path / "b.hres";
  Capture tr2;
  ASSERT_EQ(cmd_train(cfg, opt, tr2.io()), 0);
  EXPECT_EQ(slurp(t.path / "a.hres.history.csv"), slurp(t.path / "b.hres.history.csv"));
  EXPECT_EQ(slurp(t.path / "a.hres"), slurp(t.path / "b.hres"));

  // Weights carry their architecture; the default config needs no model keys.
  EvalOptions eo;
  eo.weights = t.path / "a.hres";
  eo.data_dir = t.path / "data";
  eo.roc_out = t.path / "roc.csv";
  eo.all = true;
  Capture ev;
  ASSERT_EQ(cmd_eval(parse_cli_config(""), eo, ev.io()), 0) << ev.err.str();
  const std::string out = ev.out.str();
  EXPECT_NE(out.find("evaluated 16 patches"), std::string::npos);
  EXPECT_NE(out.find("accuracy  precision   recall  specificity       f1"), std::string::npos);
  EXPECT_NE(out.find("actual affected"), std::string::npos);
  EXPECT_NE(out.find("AUROC "), std::string::npos);
  const auto roc = lines_of(slurp(eo.roc_out));
  ASSERT_GE(roc.size(), 3u);
  EXPECT_EQ(roc[0], "fpr,tpr,threshold");
  EXPECT_EQ(roc[1], "0,0,inf");
  EXPECT_EQ(roc.back().rfind("1,1,", 0), 0u);

  Capture mismatch;
  EXPECT_EQ(cmd_eval(parse_cli_config("", {"model.blocks=2"}), eo, mismatch.io()), 1);
  EXPECT_NE(mismatch.err.str().find("shape mismatch"), std::string::npos);
}

TEST(CliTrain, NonFiniteLossExitsTwo) {
  TempDir t;
  const CliConfig cfg = tiny_config({"train.learning_rate=1e300", "train.max_epochs=3"});
  Capture s;
  ASSERT_EQ(cmd_synth(cfg, t.path / "data", s.io()), 0);
  Capture tr;
  EXPECT_EQ(cmd_train(cfg, {t.path / "data", t.path / "w.hres", {}, false, true}, tr.io()), 2);
  EXPECT_NE(tr.err.str().find("non-finite"), std::string::npos);
  EXPECT_FALSE(fs::exists(t.path / "w.hres"));
}

TEST(CliTrain, MissingDataExitsOne) {
  TempDir t;
  Capture tr;
  EXPECT_EQ(cmd_train(tiny_config(), {t.path / "nope", t.path / "w.hres", {}, false, true}, tr.io()), 1);
}

TEST(CliGradcam, FanOutAndUnknownLayer) {
  TempDir t;
  const CliConfig cfg = tiny_config();
  Network net = build_network(cfg.model, 1);
  save_weights(net, t.path / "w.hres");
  Capture s;
  ASSERT_EQ(cmd_synth(parse_cli_config("", {"synth.per_class=2"}), t.path / "data", s.io()), 0);

  GradcamOptions g{t.path / "w.hres",
                   {t.path / "data/0/syn_00000.png", t.path / "data/0/syn_00001.png", t.path / "data/1/syn_00000.png",
                    t.path / "data/1/syn_00001.png"},
                   t.path / "cam"};
  // Same stems in both classes would collide, so rename the affected ones.
  fs::rename(t.path / "data/1/syn_00000.png", t.path / "data/1/a0.png");
  fs::rename(t.path / "data/1/syn_00001.png", t.path / "data/1/a1.png");
  g.images[2] = t.path / "data/1/a0.png";
  g.images[3] = t.path / "data/1/a1.png";
  Capture r;
  ASSERT_EQ(cmd_gradcam(cfg, g, r.io()), 0) << r.err.str();
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(t.path / "cam")) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 8u);
  const RgbPatch ov = read_png(t.path / "cam/a0.overlay.png");
  EXPECT_EQ(ov.width, kPatchSize);
  EXPECT_NE(r.out.str().find("(layer block1.conv3)"), std::string::npos);

  Capture bad;
  EXPECT_EQ(cmd_gradcam(tiny_config({"gradcam.layer=fc"}), g, bad.io()), 1);
  EXPECT_NE(bad.err.str().find("block1.shortcut"), std::string::npos);

  g.images.push_back(t.path / "missing.png");
  Capture partial;
  EXPECT_EQ(cmd_gradcam(cfg, g, partial.io()), 1);
  EXPECT_NE(partial.out.str().find("4 of 5 images done"), std::string::npos);
}

TEST(CliSummary, TableAndSweepGrid) {
  TempDir t;
  const CliConfig cfg = parse_cli_config("");
  Capture r;
  ASSERT_EQ(cmd_summary(cfg, {false, t.path / "s.csv"}, r.io()), 0);
  const auto rows = lines_of(slurp(t.path / "s.csv"));
  EXPECT_EQ(rows[0], "layer,kernel,f_in,f_out,d_in,rho,kappa,bias");
  EXPECT_EQ(rows[1], "stem,4,7,32,100,3584,35840000,32");
  EXPECT_NE(r.out.str().find("parameters (weights + biases): " + std::to_string(Network(cfg.model).parameter_count())),
            std::string::npos);

  Capture sw;
  ASSERT_EQ(cmd_summary(cfg, {true, t.path / "sweep.csv"}, sw.io()), 0);
  const auto grid = lines_of(slurp(t.path / "sweep.csv"));
  ASSERT_EQ(grid.size(), 31u);
  for (std::size_t i = 1; i < grid.size(); ++i) {
    std::istringstream in(grid[i]);
    std::size_t k, b, params;
    char c;
    in >> k >> c >> b >> c >> params;
    ModelConfig m = cfg.model;
    m.kernel_size = k;
    m.num_residual_blocks = b;
    m.stage_widths = ModelConfig::default_widths(b);
    EXPECT_EQ(params, Network(m).parameter_count()) << grid[i];
  }
}
