#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "flowad/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("config", c.config, "Experiment config file")->required();
  sub->add_option("--seed", c.seed, "Override the config's seed");
  sub->add_option("--out-dir", c.out_dir, "Override the output directory");
  sub->add_option("--set", c.overrides, "Override a config key: section.key=value (repeatable)");
}

std::vector<std::pair<std::string, std::string>> parse_pairs(const std::vector<std::string>& items) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : items) {
    const auto colon = s.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == s.size())
      throw flowad::ConfigError("--spearman expects a:b, got '" + s + "'");
    out.emplace_back(s.substr(0, colon), s.substr(colon + 1));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow-based density estimation and anomaly scoring"};
  app.require_subcommand(1);
  Common common;

  auto* train = app.add_subcommand("train", "Train a flow and write model.ckpt and history.txt");
  add_common(train, common);

  flowad::ScoreRequest score_req;
  auto* score = app.add_subcommand("score", "Write a per-example score table");
  add_common(score, common);
  score->add_option("--checkpoint", score_req.checkpoint)->required();
  score->add_option("--dataset", score_req.dataset)->required();
  score->add_option("--methods", score_req.methods)->delimiter(',');
  score->add_option("--general", score_req.general_checkpoint, "General-model checkpoint for ratio methods");
  score->add_option("--output", score_req.output);

  flowad::ReportRequest report_req;
  std::vector<std::string> spearman_pairs;
  auto* report = app.add_subcommand("report", "AUROC, Spearman and bpd summaries from score tables");
  add_common(report, common);
  report->add_option("--inlier", report_req.inlier_table)->required();
  report->add_option("--outlier", report_req.outlier_table)->required();
  report->add_option("--columns", report_req.columns)->delimiter(',');
  report->add_option("--spearman", spearman_pairs, "Column pair a:b")->delimiter(',');
  report->add_option("--output", report_req.output);

  std::string checkpoint, dataset, output;
  auto* decompose = app.add_subcommand("decompose", "Per-scale log-likelihood contributions");
  add_common(decompose, common);
  decompose->add_option("--checkpoint", checkpoint)->required();
  decompose->add_option("--dataset", dataset)->required();
  decompose->add_option("--output", output);

  std::string image_a, image_b, scales = "none";
  auto* mix = app.add_subcommand("mix", "Decode a latent spliced from two images");
  add_common(mix, common);
  mix->add_option("--checkpoint", checkpoint)->required();
  mix->add_option("--image-a", image_a, "Raw 8-bit image")->required();
  mix->add_option("--image-b", image_b, "Raw 8-bit image")->required();
  mix->add_option("--scales", scales, "Scales taken from image B: 1,3 | all | none");
  mix->add_option("--output", output)->required();

  std::size_t steps = 50, limit = 10;
  double step_size = 0.05;
  auto* optimize = app.add_subcommand("optimize-latents", "Gradient ascent on log p over early latents");
  add_common(optimize, common);
  optimize->add_option("--checkpoint", checkpoint)->required();
  optimize->add_option("--dataset", dataset)->required();
  optimize->add_option("--steps", steps);
  optimize->add_option("--step-size", step_size);
  optimize->add_option("--limit", limit, "Number of images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : flowad::kExitUsage;
  }

  try {
    const auto cfg = flowad::ExperimentConfig::load(common.config, common.seed, common.overrides);
    const std::string out_dir = flowad::output_dir(cfg, common.out_dir);
    if (train->parsed()) {
      auto r = flowad::cmd_train(cfg, out_dir);
      std::cout << "wrote " << r.checkpoint << " and " << r.history << '\n';
    } else if (score->parsed()) {
      auto t = flowad::cmd_score(cfg, out_dir, score_req);
      std::cout << "scored " << t.records.size() << " examples\n";
    } else if (report->parsed()) {
      report_req.spearman = parse_pairs(spearman_pairs);
      std::cout << flowad::cmd_report(cfg, out_dir, report_req);
    } else if (decompose->parsed()) {
      const double worst = flowad::cmd_decompose(cfg, out_dir, checkpoint, dataset, output);
      std::cout << "check " << flowad::format_double(worst) << '\n';
    } else if (mix->parsed()) {
      flowad::cmd_mix(cfg, checkpoint, image_a, image_b, scales, output);
      std::cout << "wrote " << output << '\n';
    } else if (optimize->parsed()) {
      auto r = flowad::cmd_optimize_latents(cfg, out_dir, checkpoint, dataset, steps, step_size, limit);
      std::cout << "wrote " << r.images << " and " << r.trace << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "flowad: " << e.what() << '\n';
    return flowad::exit_code(e);
  }
  return flowad::kExitOk;
}
