#pragma once

// Command implementations behind the `flowad` executable. Each command
// throws a flowad::Error subclass on failure; exit_code() maps it to the
// process exit status.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flowad/baselines.hpp"
#include "flowad/checkpoint.hpp"
#include "flowad/config.hpp"
#include "flowad/eval.hpp"
#include "flowad/training.hpp"

namespace flowad {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const NumericsError*>(&e) || dynamic_cast<const SingularityError*>(&e) ||
      dynamic_cast<const DegenerateInputError*>(&e) || dynamic_cast<const DomainError*>(&e))
    return kExitNumeric;
  if (dynamic_cast<const Error*>(&e)) return kExitUsage;
  return kExitNumeric;
}

namespace detail {

inline void write_header(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& meta) {
  for (const auto& [k, v] : meta) os << "# " << k << '=' << v << '\n';
}

inline std::ofstream open_output(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  return os;
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

inline void check_shape(const FlowModel& m, const LabeledDataset& ds) {
  const ModelConfig& c = m.config();
  if (ds.channels != c.channels || ds.height != c.height || ds.width != c.width) {
    throw ShapeError("dataset shape " + std::to_string(ds.channels) + "x" + std::to_string(ds.height) + "x" +
                     std::to_string(ds.width) + " does not match the model's " + std::to_string(c.channels) + "x" +
                     std::to_string(c.height) + "x" + std::to_string(c.width));
  }
}

inline std::string join(const std::vector<std::string>& v, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
  return out;
}

/// Noise-free per-example encodings, batched.
inline std::vector<LatentCode> encode_dataset(FlowModel& m, const LabeledDataset& ds, std::size_t batch = 64) {
  std::vector<LatentCode> out;
  for (std::size_t b = 0; b < ds.size(); b += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(ds.size(), b + batch); ++i) idx.push_back(i);
    out.push_back(m.encode(preprocess_batch(ds, idx, Noise::HalfBin)));
  }
  return out;
}

struct PerExample {
  std::vector<double> log_prob;
  std::vector<std::vector<double>> contributions;  // [example][scale]
};

inline PerExample per_example(FlowModel& m, const LabeledDataset& ds) {
  PerExample r;
  for (const LatentCode& code : encode_dataset(m, ds)) {
    for (std::size_t i = 0; i < code.batch(); ++i) {
      r.log_prob.push_back(code.log_prob[i]);
      std::vector<double> c;
      for (const Tensor& t : code.contributions) c.push_back(t[i]);
      r.contributions.push_back(std::move(c));
    }
  }
  return r;
}

}  // namespace detail

/// Output directory: explicit override, else the config's (relative to the
/// config file), else the working directory.
inline std::string output_dir(const ExperimentConfig& cfg, const std::optional<std::string>& override_dir) {
  if (override_dir) return *override_dir;
  return cfg.resolve(cfg.out_dir);
}

struct TrainOutputs {
  std::string checkpoint;
  std::string history;
  History record;
};

inline TrainOutputs cmd_train(const ExperimentConfig& cfg, const std::string& out_dir) {
  if (cfg.train_dataset.empty()) throw ConfigError("train.dataset is required");
  if (cfg.train.loss != LossKind::NllOnly) {
    if (cfg.general_dataset.empty()) throw ConfigError(to_string(cfg.train.loss) + " needs train.general_dataset");
    if (cfg.general_checkpoint.empty())
      throw ConfigError(to_string(cfg.train.loss) + " needs train.general_checkpoint");
  }
  LabeledDataset data = cfg.load_dataset(cfg.train_dataset);
  std::unique_ptr<FlowModel> model =
      cfg.init_checkpoint.empty() ? build_variant(cfg.model) : load_checkpoint(cfg.resolve(cfg.init_checkpoint));
  detail::check_shape(*model, data);

  std::unique_ptr<FlowModel> general_model;
  LabeledDataset general;
  if (cfg.train.loss != LossKind::NllOnly) {
    general_model = load_checkpoint(cfg.resolve(cfg.general_checkpoint));
    general = cfg.load_dataset(cfg.general_dataset);
    detail::check_shape(*general_model, general);
  }
  History h = train(*model, data, general_model ? &general : nullptr, general_model.get(), cfg.train);
  for (const auto& r : h.records)
    if (r.metric == "nll" && !std::isfinite(r.value))
      throw NumericsError("training produced a non-finite loss at epoch " + std::to_string(r.epoch));

  TrainOutputs out;
  out.checkpoint = (std::filesystem::path(out_dir) / "model.ckpt").string();
  out.history = (std::filesystem::path(out_dir) / "history.txt").string();
  auto meta = cfg.provenance();
  {
    auto os = detail::open_output(out.checkpoint);
    save_checkpoint(*model, os, meta);
  }
  auto os = detail::open_output(out.history);
  meta.emplace_back("loss", to_string(cfg.train.loss));
  meta.emplace_back("columns", "epoch split metric value");
  detail::write_header(os, meta);
  h.write(os);
  out.record = std::move(h);
  return out;
}

inline const std::vector<std::string>& score_methods() {
  static const std::vector<std::string> m{"raw", "ratio", "last_scale", "last_scale_ratio", "pseudo", "compressed_ratio"};
  return m;
}

struct ScoreRequest {
  std::string checkpoint;
  std::string dataset;
  std::vector<std::string> methods;        // empty: the config's eval.methods
  std::string general_checkpoint;          // empty: the config's eval.general_checkpoint
  std::string output;                      // empty: <out_dir>/scores_<dataset>.csv
};

/// Every column is oriented so that larger means more inlier-like.
inline ScoreTable cmd_score(const ExperimentConfig& cfg, const std::string& out_dir, ScoreRequest req) {
  if (req.methods.empty()) req.methods = cfg.eval_methods;
  if (req.methods.empty()) throw ConfigError("no score methods requested");
  std::set<std::string> seen;
  bool need_general = false;
  for (const auto& m : req.methods) {
    if (std::find(score_methods().begin(), score_methods().end(), m) == score_methods().end())
      throw ConfigError("unknown score method '" + m + "'");
    if (!seen.insert(m).second) throw ConfigError("score method '" + m + "' listed twice");
    need_general |= m == "ratio" || m == "last_scale_ratio";
  }
  std::string general_path = req.general_checkpoint.empty() ? cfg.resolve(cfg.eval_general_checkpoint) : req.general_checkpoint;
  if (need_general && general_path.empty()) throw ConfigError("ratio methods need a general-model checkpoint");
  if (seen.count("pseudo") && cfg.pseudo_reference.empty())
    throw ConfigError("pseudo needs eval.pseudo_reference");

  std::unique_ptr<FlowModel> model = load_checkpoint(req.checkpoint);
  if (!model->initialized()) throw StateError("checkpoint holds an uninitialized model");
  if ((seen.count("last_scale") || seen.count("last_scale_ratio")) && model->num_scales() < 2)
    throw ContractError("last_scale needs a multi-scale model");
  std::unique_ptr<FlowModel> general;
  if (need_general) {
    general = load_checkpoint(general_path);
    if (seen.count("last_scale_ratio") && general->num_scales() < 2)
      throw ContractError("last_scale_ratio needs a multi-scale general model");
  }
  const DatasetSpec& spec = cfg.dataset(req.dataset);
  LabeledDataset ds = cfg.load_dataset(req.dataset);
  detail::check_shape(*model, ds);
  if (general) detail::check_shape(*general, ds);

  detail::PerExample in = detail::per_example(*model, ds);
  detail::PerExample g;
  if (general) g = detail::per_example(*general, ds);
  std::optional<PixelDiffHistogram> hist;
  if (seen.count("pseudo")) hist = PixelDiffHistogram::fit(cfg.load_dataset(cfg.pseudo_reference));
  const double dims = static_cast<double>(model->input_dim());

  ScoreTable t;
  t.metadata = cfg.provenance();
  t.metadata.emplace_back("checkpoint", req.checkpoint);
  if (general) t.metadata.emplace_back("general_checkpoint", general_path);
  t.metadata.emplace_back("dataset", req.dataset);
  t.metadata.emplace_back("dims", std::to_string(model->input_dim()));
  t.columns = req.methods;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ScoreTable::Record r;
    r.id = ds.ids[i];
    r.inlier = spec.inlier;
    for (const auto& m : req.methods) {
      double v = 0.0;
      if (m == "raw") v = clip_logp(in.log_prob[i]);
      else if (m == "ratio") v = ratio_score(in.log_prob[i], g.log_prob[i]);
      else if (m == "last_scale") v = clip_logp(last_scale_score(in.contributions[i]));
      else if (m == "last_scale_ratio")
        v = ratio_score(last_scale_score(in.contributions[i]), last_scale_score(g.contributions[i]));
      else if (m == "pseudo") v = hist->pseudo_loglik(pixels_to_tensor(ds, i));
      else {
        // Discrete log-likelihood in nats plus the deflate code length.
        const double bits = compressed_size_bits(ds.images[i]);
        v = clip_logp(in.log_prob[i]) - dims * std::log(256.0) + bits * std::numbers::ln2;
      }
      r.values.push_back(v);
    }
    t.records.push_back(std::move(r));
  }
  const std::string out = req.output.empty()
                              ? (std::filesystem::path(out_dir) / ("scores_" + req.dataset + ".csv")).string()
                              : req.output;
  auto os = detail::open_output(out);
  t.write(os);
  return t;
}

struct ReportRequest {
  std::string inlier_table;
  std::string outlier_table;
  std::vector<std::string> columns;                              // AUROC per column
  std::vector<std::pair<std::string, std::string>> spearman;     // column pairs over pooled rows
  std::string output;                                            // empty: <out_dir>/report.txt
};

inline std::string cmd_report(const ExperimentConfig& cfg, const std::string& out_dir, const ReportRequest& req) {
  ScoreTable in = ScoreTable::load(req.inlier_table);
  ScoreTable out = ScoreTable::load(req.outlier_table);
  if (req.columns.empty() && req.spearman.empty()) throw ConfigError("report needs --columns or --spearman");

  std::ostringstream os;
  auto meta = cfg.provenance();
  meta.emplace_back("inlier_table", req.inlier_table);
  meta.emplace_back("outlier_table", req.outlier_table);
  detail::write_header(os, meta);
  char buf[64];
  for (const auto& c : req.columns) {
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * auroc(in.column(c), out.column(c)));
    os << "auroc " << c << ' ' << buf << '\n';
  }
  for (const auto& [a, b] : req.spearman) {
    std::vector<double> xa = in.column(a), xb = in.column(b);
    for (double v : out.column(a)) xa.push_back(v);
    for (double v : out.column(b)) xb.push_back(v);
    std::snprintf(buf, sizeof buf, "%.4f", spearman(xa, xb));
    os << "spearman " << a << ' ' << b << ' ' << buf << '\n';
  }
  // bpd summaries need the raw log-likelihood column and the input size.
  auto bpd_line = [&](const char* role, const ScoreTable& t) {
    const auto& cols = t.columns;
    const std::string dims = t.metadata_value("dims");
    if (std::find(cols.begin(), cols.end(), "raw") == cols.end() || dims.empty()) return;
    const std::vector<double> lp = t.column("raw");
    double s = 0.0;
    for (double v : lp) s += v;
    std::snprintf(buf, sizeof buf, "%.4f", bits_per_dim(s / static_cast<double>(lp.size()), std::stoul(dims)));
    os << "bpd " << role << ' ' << buf << '\n';
  };
  bpd_line("inlier", in);
  bpd_line("outlier", out);

  const std::string path =
      req.output.empty() ? (std::filesystem::path(out_dir) / "report.txt").string() : req.output;
  auto f = detail::open_output(path);
  f << os.str();
  return os.str();
}

/// Per-example c_1..c_S and total, plus a trailing `check` row with the
/// largest |sum c_i - total|.
inline double cmd_decompose(const ExperimentConfig& cfg, const std::string& out_dir, const std::string& checkpoint,
                            const std::string& dataset, std::string output = {}) {
  std::unique_ptr<FlowModel> model = load_checkpoint(checkpoint);
  if (model->num_scales() < 2) throw ContractError("decompose needs a multi-scale model");
  LabeledDataset ds = cfg.load_dataset(dataset);
  detail::check_shape(*model, ds);
  detail::PerExample r = detail::per_example(*model, ds);

  if (output.empty()) output = (std::filesystem::path(out_dir) / ("decompose_" + dataset + ".csv")).string();
  auto os = detail::open_output(output);
  auto meta = cfg.provenance();
  meta.emplace_back("checkpoint", checkpoint);
  meta.emplace_back("dataset", dataset);
  detail::write_header(os, meta);
  os << "id";
  for (std::size_t s = 1; s <= model->num_scales(); ++s) os << ",c_" << s;
  os << ",total\n";
  double worst = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds.ids[i];
    double sum = 0.0;
    for (double c : r.contributions[i]) {
      os << ',' << format_double(c);
      sum += c;
    }
    os << ',' << format_double(r.log_prob[i]) << '\n';
    worst = std::max(worst, std::abs(sum - r.log_prob[i]));
  }
  os << "check," << format_double(worst) << '\n';
  return worst;
}

inline std::set<std::size_t> parse_scale_set(const std::string& s, std::size_t num_scales) {
  std::set<std::size_t> out;
  if (s == "none" || s.empty()) return out;
  if (s == "all") {
    for (std::size_t i = 1; i <= num_scales; ++i) out.insert(i);
    return out;
  }
  for (const auto& item : detail::split_list(s)) out.insert(detail::parse_count("scales", item));
  return out;
}

/// Decodes xA's latent with the listed scales taken from xB; writes the
/// 8-bit image and a `<output>.txt` provenance sidecar.
inline std::vector<std::uint8_t> cmd_mix(const ExperimentConfig& cfg, const std::string& checkpoint,
                                         const std::string& image_a, const std::string& image_b,
                                         const std::string& scales, const std::string& output) {
  std::unique_ptr<FlowModel> model = load_checkpoint(checkpoint);
  const std::size_t d = model->input_dim();
  LabeledDataset pair;
  pair.channels = model->config().channels;
  pair.height = model->config().height;
  pair.width = model->config().width;
  for (const auto& p : {image_a, image_b}) {
    auto bytes = detail::read_bytes(p);
    if (bytes.size() != d)
      throw ShapeError(p + " has " + std::to_string(bytes.size()) + " bytes, model expects " + std::to_string(d));
    pair.push_back(std::move(bytes));
  }
  const std::set<std::size_t> take = parse_scale_set(scales, model->num_scales());
  Tensor xa = preprocess_batch(pair, {0}, Noise::HalfBin);
  Tensor xb = preprocess_batch(pair, {1}, Noise::HalfBin);
  Tensor mixed = model->mix_latents(xa, xb, take);
  if (!mixed.all_finite()) throw NumericsError("decoded image is not finite");
  std::vector<std::uint8_t> img(d);
  for (std::size_t j = 0; j < d; ++j) img[j] = to_pixel(mixed[j]);
  {
    auto os = detail::open_output(output);
    os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  }
  auto side = detail::open_output(output + ".txt");
  auto meta = cfg.provenance();
  meta.emplace_back("checkpoint", checkpoint);
  meta.emplace_back("image_a", image_a);
  meta.emplace_back("image_b", image_b);
  std::vector<std::string> listed;
  for (std::size_t s : take) listed.push_back(std::to_string(s));
  meta.emplace_back("scales_from_b", detail::join(listed));
  detail::write_header(side, meta);
  return img;
}

struct OptimizeOutputs {
  std::string images;
  std::string trace;
  Tensor result;
  std::vector<std::vector<double>> log_probs;
};

/// Gradient ascent over z_1..z_{S-1} for the first `limit` images of a
/// dataset; writes the decoded 8-bit images and a per-step trace.
inline OptimizeOutputs cmd_optimize_latents(const ExperimentConfig& cfg, const std::string& out_dir,
                                            const std::string& checkpoint, const std::string& dataset,
                                            std::size_t steps, double step_size, std::size_t limit) {
  if (steps < 1) throw ContractError("--steps must be >= 1");
  std::unique_ptr<FlowModel> model = load_checkpoint(checkpoint);
  if (model->num_scales() < 2) throw ContractError("optimize-latents needs a multi-scale model");
  LabeledDataset ds = cfg.load_dataset(dataset);
  detail::check_shape(*model, ds);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(limit, ds.size()); ++i) idx.push_back(i);
  auto res = model->optimize_early_latents(preprocess_batch(ds, idx, Noise::HalfBin), steps, step_size);

  OptimizeOutputs out;
  out.images = (std::filesystem::path(out_dir) / ("latents_" + dataset + ".raw")).string();
  out.trace = (std::filesystem::path(out_dir) / ("latents_" + dataset + ".txt")).string();
  {
    auto os = detail::open_output(out.images);
    for (double v : res.image.data()) os.put(static_cast<char>(to_pixel(v)));
  }
  auto os = detail::open_output(out.trace);
  auto meta = cfg.provenance();
  meta.emplace_back("checkpoint", checkpoint);
  meta.emplace_back("dataset", dataset);
  meta.emplace_back("step_size", format_double(step_size));
  meta.emplace_back("columns", "id step log_prob");
  detail::write_header(os, meta);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t s = 0; s < res.trace[i].size(); ++s)
      os << ds.ids[idx[i]] << ' ' << s << ' ' << format_double(res.trace[i][s]) << '\n';
  out.result = std::move(res.image);
  out.log_probs = std::move(res.trace);
  return out;
}

}  // namespace flowad
