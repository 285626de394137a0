#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flowad/checkpoint.hpp"
#include "flowad/config.hpp"
#include "flowad/eval.hpp"

namespace fs = std::filesystem;

namespace flowad {
namespace {

const std::string kBase = R"(seed = 11

[model]
variant = conv
channels = 1
height = 8
width = 8
scales = 2
steps = 2
hidden = 8

[train]
dataset = train32
epochs = 1
batch_size = 16

[dataset.train32]
format = synthetic
n = 32
seed = 1
shape = 1x8x8
split = train

[dataset.test10]
format = synthetic
n = 10
seed = 2
shape = 1x8x8

[dataset.noise10]
format = synthetic
domain = textured
n = 10
seed = 3
shape = 1x8x8
inlier = false
)";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("flowad_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write_config(const std::string& name, const std::string& text) const {
    std::ofstream(path(name)) << text;
    return path(name);
  }

  int run(const std::string& args) const {
    const std::string cmd = std::string(FLOWAD_CLI_PATH) + " " + args + " >>" + path("cli.log") + " 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  }

  static std::string slurp(const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  }

  std::string train(const std::string& cfg, const std::string& out) const {
    EXPECT_EQ(run("train " + cfg + " --out-dir " + path(out)), 0);
    return path(out + "/model.ckpt");
  }

  fs::path dir_;
};

std::vector<std::string> data_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty() && line[0] != '#') out.push_back(line);
  return out;
}

TEST_F(Cli, TrainWritesCheckpointAndOneEpochHistory) {
  const auto cfg = write_config("a.ini", kBase);
  const auto ckpt = train(cfg, "run");
  ASSERT_TRUE(fs::exists(ckpt));
  const std::string hist = slurp(path("run/history.txt"));
  std::size_t nll_rows = 0;
  for (const auto& l : data_lines(hist)) {
    EXPECT_EQ(l[0], '1');
    nll_rows += l.rfind("1 train nll ", 0) == 0;
  }
  EXPECT_EQ(nll_rows, 1u);
  auto model = load_checkpoint(ckpt);
  EXPECT_TRUE(model->initialized());
}

TEST_F(Cli, SameSeedGivesByteIdenticalOutputs) {
  const auto cfg = write_config("a.ini", kBase);
  train(cfg, "r1");
  train(cfg, "r2");
  EXPECT_EQ(slurp(path("r1/history.txt")), slurp(path("r2/history.txt")));
  EXPECT_EQ(slurp(path("r1/model.ckpt")), slurp(path("r2/model.ckpt")));
  ASSERT_EQ(run("train " + cfg + " --seed 12 --out-dir " + path("r3")), 0);
  EXPECT_NE(slurp(path("r1/history.txt")), slurp(path("r3/history.txt")));
  EXPECT_NE(slurp(path("r3/history.txt")).find("# seed=12\n"), std::string::npos);
}

TEST_F(Cli, OutputsEmbedConfigHashAndSeed) {
  const auto cfg = write_config("a.ini", kBase);
  const std::string hash = fnv1a_hex(kBase);
  const auto ckpt = train(cfg, "run");
  ASSERT_EQ(run("score " + cfg + " --out-dir " + path("run") + " --checkpoint " + ckpt + " --dataset test10"), 0);
  ASSERT_EQ(run("decompose " + cfg + " --out-dir " + path("run") + " --checkpoint " + ckpt + " --dataset test10"), 0);
  for (const char* f : {"run/history.txt", "run/model.ckpt", "run/scores_test10.csv", "run/decompose_test10.csv"}) {
    const std::string text = slurp(path(f));
    EXPECT_NE(text.find("# config_hash=" + hash + "\n"), std::string::npos) << f;
    EXPECT_NE(text.find("# seed=11\n"), std::string::npos) << f;
  }
}

TEST_F(Cli, InvalidConfigsExitTwo) {
  EXPECT_EQ(run("train " + write_config("k.ini", kBase + "bogus_key = 1\n")), 2);
  EXPECT_EQ(run("train " + write_config("s.ini", kBase + "[nonsense]\n")), 2);
  EXPECT_EQ(run("train " + write_config("v.ini", "[model]\nvariant = spline\n")), 2);
  EXPECT_EQ(run("train " + path("missing.ini")), 2);
  EXPECT_EQ(run("train"), 2);
  EXPECT_EQ(run("frobnicate " + write_config("x.ini", kBase)), 2);
  // Referenced files must exist.
  EXPECT_EQ(run("train " + write_config("p.ini", kBase + "[dataset.disk]\nformat = raw\npath = nope.raw\n")), 2);
}

TEST_F(Cli, SetOverridesKeysAndChangesHash) {
  const auto cfg = write_config("a.ini", kBase + "[dataset.both]\nformat = concat\nparts = test10, noise10\n");
  ASSERT_EQ(run("train " + cfg + " --out-dir " + path("base")), 0);
  ASSERT_EQ(run("train " + cfg + " --out-dir " + path("big") + " --set train.epochs=2 --set train.dataset=both"), 0);
  const std::string hist = slurp(path("big/history.txt"));
  EXPECT_NE(hist.find("2 train nll "), std::string::npos);
  EXPECT_EQ(hist.find("# config_hash=" + fnv1a_hex(slurp(cfg)) + "\n"), std::string::npos);
  EXPECT_NE(slurp(path("base/history.txt")).find("# config_hash=" + fnv1a_hex(slurp(cfg)) + "\n"), std::string::npos);
  ASSERT_EQ(run("score " + cfg + " --checkpoint " + path("base/model.ckpt") + " --dataset both --output " +
                path("s.csv")),
            0);
  EXPECT_EQ(ScoreTable::load(path("s.csv")).records.size(), 20u);
  EXPECT_EQ(run("train " + cfg + " --set train.nonsense=1"), 2);
  EXPECT_EQ(run("train " + cfg + " --set novalue"), 2);
}

TEST(Config, InlineCommentsAndSections) {
  auto cfg = ExperimentConfig::from_text(
      "seed = 3   # run seed\n[model]  ; section comment\nvariant = dense\nsteps = 2 # K\n"
      "[dataset.a]\nformat = synthetic\nn = 4\nshape = 1x4x4\n");
  EXPECT_EQ(cfg.seed, 3u);
  EXPECT_EQ(cfg.model.variant, Variant::Dense);
  EXPECT_EQ(cfg.model.steps, 2u);
  EXPECT_EQ(cfg.model.seed, 3u);
  EXPECT_EQ(cfg.load_dataset("a").size(), 4u);
  EXPECT_THROW(ExperimentConfig::from_text("[model\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_text("[model]\nsteps = 1\nsteps = 2\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_text("[train]\ndataset = missing\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_text("[dataset.c]\nformat = concat\nparts = c\n").load_dataset("c"),
               ConfigError);
}

TEST_F(Cli, OutlierLossWithoutGeneralModelExitsTwo) {
  std::string text = kBase;
  text.replace(text.find("epochs = 1"), 10, "epochs = 1\nloss = nll_plus_outlier\ngeneral_dataset = noise10");
  EXPECT_EQ(run("train " + write_config("o.ini", text) + " --out-dir " + path("run")), 2);
  EXPECT_FALSE(fs::exists(path("run/model.ckpt")));
}

TEST_F(Cli, OutlierLossRunsWithGeneralModel) {
  const auto base = write_config("a.ini", kBase);
  train(base, "general");
  std::string text = kBase;
  text.replace(text.find("epochs = 1"), 10,
               "epochs = 1\nloss = nll_plus_outlier\ngeneral_dataset = noise10\ngeneral_checkpoint = general/model.ckpt");
  EXPECT_EQ(run("train " + write_config("o.ini", text) + " --out-dir " + path("run")), 0);
  EXPECT_NE(slurp(path("run/history.txt")).find("1 train outlier_loss "), std::string::npos);
}

TEST_F(Cli, ScoreRawHasOneRowPerImage) {
  const auto cfg = write_config("a.ini", kBase);
  const auto ckpt = train(cfg, "run");
  ASSERT_EQ(run("score " + cfg + " --checkpoint " + ckpt + " --dataset test10 --methods raw --output " +
                path("s.csv")),
            0);
  ScoreTable t = ScoreTable::load(path("s.csv"));
  EXPECT_EQ(t.records.size(), 10u);
  EXPECT_EQ(t.columns, std::vector<std::string>{"raw"});
  EXPECT_EQ(t.metadata_value("dims"), "64");
}

TEST_F(Cli, RatioEqualsDifferenceOfRawScores) {
  const auto cfg = write_config("a.ini", kBase);
  const auto in = train(cfg, "in");
  ASSERT_EQ(run("train " + cfg + " --seed 5 --out-dir " + path("g")), 0);
  const auto g = path("g/model.ckpt");
  ASSERT_EQ(run("score " + cfg + " --checkpoint " + in + " --dataset test10 --methods raw --output " + path("a.csv")), 0);
  ASSERT_EQ(run("score " + cfg + " --checkpoint " + g + " --dataset test10 --methods raw --output " + path("b.csv")), 0);
  ASSERT_EQ(run("score " + cfg + " --checkpoint " + in + " --general " + g +
                " --dataset test10 --methods ratio,raw --output " + path("r.csv")),
            0);
  auto a = ScoreTable::load(path("a.csv")).column("raw");
  auto b = ScoreTable::load(path("b.csv")).column("raw");
  auto r = ScoreTable::load(path("r.csv")).column("ratio");
  ASSERT_EQ(r.size(), 10u);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i], a[i] - b[i]);
}

TEST_F(Cli, ScoreContractViolationsExitTwo) {
  const auto cfg = write_config("a.ini", kBase);
  const auto ckpt = train(cfg, "run");
  const std::string base = "score " + cfg + " --out-dir " + path("run") + " --checkpoint " + ckpt;
  EXPECT_EQ(run(base + " --dataset test10 --methods ratio"), 2);
  EXPECT_EQ(run(base + " --dataset test10 --methods wavelet"), 2);
  EXPECT_EQ(run(base + " --dataset test10 --methods pseudo"), 2);
  EXPECT_EQ(run(base + " --dataset nosuch"), 2);

  std::string local = kBase;
  local.replace(local.find("variant = conv"), 14, "variant = local_patch\npatch_size = 4");
  local.replace(local.find("scales = 2"), 10, "scales = 1");
  const auto lcfg = write_config("l.ini", local);
  const auto lckpt = train(lcfg, "local");
  EXPECT_EQ(run("score " + lcfg + " --checkpoint " + lckpt + " --dataset test10 --methods last_scale --output " +
                path("x.csv")),
            2);
  EXPECT_EQ(run("decompose " + lcfg + " --checkpoint " + lckpt + " --dataset test10 --output " + path("d.csv")), 2);
}

TEST_F(Cli, SingularWeightsExitThree) {
  const auto cfg = write_config("a.ini", kBase);
  const auto ckpt = train(cfg, "run");
  auto m = load_checkpoint(ckpt);
  const std::size_t n = m->invconvs()[0]->weight().dim(0);
  m->invconvs()[0]->set_weight(Tensor(Shape{n, n}, 0.0));
  save_checkpoint(*m, path("singular.ckpt"));
  EXPECT_EQ(run("score " + cfg + " --checkpoint " + path("singular.ckpt") + " --dataset test10 --output " +
                path("s.csv")),
            3);
}

void write_table(const std::string& p, const std::vector<double>& v, bool inlier) {
  ScoreTable t;
  t.metadata = {{"dims", "4"}};
  t.columns = {"raw", "other"};
  for (std::size_t i = 0; i < v.size(); ++i) t.records.push_back({i, inlier, {v[i], -v[i] * v[i]}});
  t.save(p);
}

TEST_F(Cli, ReportSeparatedAndIdenticalTables) {
  const auto cfg = write_config("a.ini", kBase);
  write_table(path("in.csv"), {5, 6, 7, 8}, true);
  write_table(path("out.csv"), {1, 2, 3, 4}, false);
  ASSERT_EQ(run("report " + cfg + " --inlier " + path("in.csv") + " --outlier " + path("out.csv") +
                " --columns raw --spearman raw:other --output " + path("rep.txt")),
            0);
  const std::string rep = slurp(path("rep.txt"));
  EXPECT_NE(rep.find("auroc raw 100.0\n"), std::string::npos) << rep;
  EXPECT_NE(rep.find("spearman raw other -1.0000\n"), std::string::npos) << rep;
  EXPECT_NE(rep.find("bpd inlier "), std::string::npos);

  std::vector<double> v;
  for (int i = 0; i < 200; ++i) v.push_back(std::sin(i * 12.9898) * 43758.5453);
  write_table(path("same.csv"), v, true);
  ASSERT_EQ(run("report " + cfg + " --inlier " + path("same.csv") + " --outlier " + path("same.csv") +
                " --columns raw --output " + path("same.txt")),
            0);
  const std::string same = slurp(path("same.txt"));
  const auto pos = same.find("auroc raw ");
  ASSERT_NE(pos, std::string::npos);
  const double auc = std::stod(same.substr(pos + 10));
  EXPECT_GE(auc, 45.0);
  EXPECT_LE(auc, 55.0);

  // Pure function of its inputs.
  ASSERT_EQ(run("report " + cfg + " --inlier " + path("same.csv") + " --outlier " + path("same.csv") +
                " --columns raw --output " + path("same2.txt")),
            0);
  EXPECT_EQ(same, slurp(path("same2.txt")));
  EXPECT_EQ(run("report " + cfg + " --inlier " + path("in.csv") + " --outlier " + path("out.csv") +
                " --columns pseudo --output " + path("bad.txt")),
            2);
}

std::vector<std::vector<double>> decompose_rows(const std::string& text, double* check) {
  std::vector<std::vector<double>> rows;
  for (const auto& l : data_lines(text)) {
    if (l.rfind("id,", 0) == 0) continue;
    if (l.rfind("check,", 0) == 0) {
      *check = std::stod(l.substr(6));
      continue;
    }
    std::vector<double> r;
    std::stringstream ss(l);
    std::string cell;
    while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
    rows.push_back(r);
  }
  return rows;
}

TEST_F(Cli, DecomposeCheckRowAndPermutation) {
  const auto cfg0 = write_config("a.ini", kBase);
  const auto ckpt = train(cfg0, "run");
  // Ten images forward and reversed as raw files.
  LabeledDataset ds = gen_synthetic(Domain::Smooth, 10, 1, 8, 8, 9);
  std::ofstream fwd(path("fwd.raw"), std::ios::binary), rev(path("rev.raw"), std::ios::binary);
  for (std::size_t i = 0; i < 10; ++i) {
    fwd.write(reinterpret_cast<const char*>(ds.images[i].data()), 64);
    rev.write(reinterpret_cast<const char*>(ds.images[9 - i].data()), 64);
  }
  fwd.close();
  rev.close();
  const auto cfg = write_config("p.ini", kBase + "[dataset.fwd]\nformat = raw\npath = fwd.raw\nshape = 1x8x8\n"
                                                 "[dataset.rev]\nformat = raw\npath = rev.raw\nshape = 1x8x8\n");
  ASSERT_EQ(run("decompose " + cfg + " --checkpoint " + ckpt + " --dataset fwd --output " + path("f.csv")), 0);
  ASSERT_EQ(run("decompose " + cfg + " --checkpoint " + ckpt + " --dataset rev --output " + path("r.csv")), 0);
  double cf = 1, cr = 1;
  auto f = decompose_rows(slurp(path("f.csv")), &cf);
  auto r = decompose_rows(slurp(path("r.csv")), &cr);
  EXPECT_LT(cf, 1e-6);
  EXPECT_LT(cr, 1e-6);
  ASSERT_EQ(f.size(), 10u);
  ASSERT_EQ(f[0].size(), 4u);  // id, c_1, c_2, total
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t k = 1; k < 4; ++k) EXPECT_EQ(f[i][k], r[9 - i][k]);
}

TEST_F(Cli, DecomposeIdentityModelMatchesClosedForm) {
  ModelConfig mc;
  mc.height = mc.width = 8;
  mc.steps = 2;
  mc.hidden = 8;
  auto m = build_variant(mc);
  m->make_identity();
  save_checkpoint(*m, path("id.ckpt"));
  // Pixel 128 maps to x = 1/512 under noise-free preprocessing.
  std::ofstream(path("flat.raw"), std::ios::binary) << std::string(64 * 3, static_cast<char>(128));
  const auto cfg = write_config("c.ini", "[dataset.flat]\nformat = raw\npath = flat.raw\nshape = 1x8x8\n");
  ASSERT_EQ(run("decompose " + cfg + " --checkpoint " + path("id.ckpt") + " --dataset flat --output " + path("d.csv")), 0);
  double check = 1;
  auto rows = decompose_rows(slurp(path("d.csv")), &check);
  ASSERT_EQ(rows.size(), 3u);
  const double x = 1.0 / 512.0;
  const double expected = -32.0 * std::log(2.0 * M_PI) - 32.0 * x * x;
  for (const auto& r : rows) EXPECT_NEAR(r[3], expected, 1e-9);
}

TEST_F(Cli, MixReconstructsWithinQuantization) {
  const auto cfg = write_config("a.ini", kBase);
  const auto ckpt = train(cfg, "run");
  LabeledDataset ds = gen_synthetic(Domain::Smooth, 2, 1, 8, 8, 4);
  for (int k = 0; k < 2; ++k)
    std::ofstream(path(k ? "b.raw" : "a.raw"), std::ios::binary)
        .write(reinterpret_cast<const char*>(ds.images[k].data()), 64);
  auto mix = [&](const std::string& a, const std::string& b, const std::string& scales) {
    EXPECT_EQ(run("mix " + cfg + " --checkpoint " + ckpt + " --image-a " + path(a) + " --image-b " + path(b) +
                  " --scales " + scales + " --output " + path("m.raw")),
              0);
    return slurp(path("m.raw"));
  };
  auto close = [](const std::string& got, const std::vector<std::uint8_t>& want) {
    if (got.size() != want.size()) return false;
    for (std::size_t i = 0; i < got.size(); ++i)
      if (std::abs(static_cast<int>(static_cast<unsigned char>(got[i])) - static_cast<int>(want[i])) > 1) return false;
    return true;
  };
  EXPECT_TRUE(close(mix("a.raw", "b.raw", "all"), ds.images[1]));
  EXPECT_TRUE(close(mix("a.raw", "b.raw", "1,2"), ds.images[1]));
  EXPECT_TRUE(close(mix("a.raw", "b.raw", "none"), ds.images[0]));
  EXPECT_TRUE(close(mix("a.raw", "a.raw", "2"), ds.images[0]));
  EXPECT_NE(slurp(path("m.raw.txt")).find("# scales_from_b=2\n"), std::string::npos);

  std::ofstream(path("short.raw"), std::ios::binary) << std::string(63, 'x');
  EXPECT_EQ(run("mix " + cfg + " --checkpoint " + ckpt + " --image-a " + path("a.raw") + " --image-b " +
                path("short.raw") + " --output " + path("bad.raw")),
            2);
}

TEST_F(Cli, OptimizeLatentsTraceIsMonotone) {
  const auto cfg = write_config("a.ini", kBase);
  const auto ckpt = train(cfg, "run");
  ASSERT_EQ(run("optimize-latents " + cfg + " --out-dir " + path("run") + " --checkpoint " + ckpt +
                " --dataset test10 --steps 5 --limit 3"),
            0);
  EXPECT_EQ(fs::file_size(path("run/latents_test10.raw")), 3u * 64u);
  std::istringstream is(slurp(path("run/latents_test10.txt")));
  std::string line;
  std::size_t rows = 0, prev_id = 99;
  double prev = -INFINITY;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t id, step;
    double lp;
    ls >> id >> step >> lp;
    if (id == prev_id) EXPECT_GE(lp, prev);
    prev_id = id;
    prev = lp;
    ++rows;
  }
  EXPECT_EQ(rows, 3u * 6u);
}

}  // namespace
}  // namespace flowad
