#pragma once

// Sectioned key-value experiment configuration.
//
//   seed = 7
//   out_dir = runs/smooth
//   [model]
//   variant = conv
//   [train]
//   dataset = smooth
//   [dataset.smooth]
//   format = synthetic
//   shape = 1x16x16
//   [eval]
//   methods = raw,ratio
//
// Relative paths resolve against the config file's directory.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flowad/data.hpp"
#include "flowad/errors.hpp"
#include "flowad/model.hpp"
#include "flowad/training.hpp"

namespace flowad {

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

inline std::string trim_ws(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline double parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    unsigned long long d = std::stoull(v, &pos);
    if (pos != v.size() || v.find('-') != std::string::npos) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim_ws(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

/// Ordered sections of `key = value` lines. Section "" holds top-level keys.
struct IniFile {
  std::map<std::string, std::map<std::string, std::string>> sections;
  std::vector<std::string> order;

  static IniFile parse(const std::string& text) {
    IniFile ini;
    ini.order.push_back("");
    ini.sections[""];
    std::istringstream is(text);
    std::string line, current;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      // Inline comments need leading whitespace so values may contain '#'.
      for (std::size_t i = 1; i < line.size(); ++i) {
        if ((line[i] == '#' || line[i] == ';') && (line[i - 1] == ' ' || line[i - 1] == '\t')) {
          line.resize(i);
          break;
        }
      }
      line = detail::trim_ws(line);
      if (line.empty() || line[0] == '#' || line[0] == ';') continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
        current = detail::trim_ws(line.substr(1, line.size() - 2));
        if (current.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty section name");
        if (ini.sections.count(current)) throw ConfigError("duplicate section [" + current + "]");
        ini.order.push_back(current);
        ini.sections[current];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = detail::trim_ws(line.substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      auto& sec = ini.sections[current];
      if (sec.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
      sec[key] = detail::trim_ws(line.substr(eq + 1));
    }
    return ini;
  }
};

struct DatasetSpec {
  std::string name;
  std::string format = "synthetic";  // synthetic | idx | raw | concat
  // synthetic
  Domain domain = Domain::Smooth;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  SyntheticOptions synth;
  // shared by synthetic and raw
  std::size_t channels = 1, height = 16, width = 16;
  // idx and raw
  std::string path;
  std::string labels;
  std::vector<std::string> parts;  // concat: other dataset names, in order
  bool to_grayscale = false;
  std::optional<std::size_t> limit;
  SplitTag split = SplitTag::Test;
  bool inlier = true;  // role tag copied into score tables
};

struct ExperimentConfig {
  std::string path;
  std::filesystem::path dir;
  std::string hash;
  std::uint64_t seed = 0;
  std::string out_dir = ".";

  ModelConfig model;
  TrainConfig train;
  std::string train_dataset;
  std::string general_dataset;
  std::string general_checkpoint;  // frozen general model for outlier/margin losses
  std::string init_checkpoint;     // finetune starting point

  std::map<std::string, DatasetSpec> datasets;

  std::vector<std::string> eval_methods{"raw"};
  std::string eval_general_checkpoint;
  std::string pseudo_reference;  // dataset the histogram baseline is fitted on

  std::string resolve(const std::string& p) const {
    if (p.empty()) return p;
    std::filesystem::path q(p);
    return q.is_absolute() ? q.string() : (dir / q).lexically_normal().string();
  }

  std::vector<std::pair<std::string, std::string>> provenance() const {
    return {{"config_hash", hash}, {"seed", std::to_string(seed)}};
  }

  const DatasetSpec& dataset(const std::string& name) const {
    auto it = datasets.find(name);
    if (it == datasets.end()) throw ConfigError("unknown dataset '" + name + "'");
    return it->second;
  }

  LabeledDataset load_dataset(const std::string& name, std::size_t depth = 0) const {
    const DatasetSpec& d = dataset(name);
    if (depth > datasets.size()) throw ConfigError("dataset." + name + " is part of a concat cycle");
    LabeledDataset ds;
    if (d.format == "concat") {
      ds = load_dataset(d.parts.at(0), depth + 1);
      for (std::size_t i = 1; i < d.parts.size(); ++i) ds = concat_datasets(ds, load_dataset(d.parts[i], depth + 1));
    } else if (d.format == "synthetic") {
      ds = gen_synthetic(d.domain, d.count, d.channels, d.height, d.width, d.seed, d.synth);
    } else if (d.format == "idx") {
      ds = load_idx(resolve(d.path), resolve(d.labels));
    } else {
      ds = load_raw(resolve(d.path), d.channels, d.height, d.width);
    }
    if (d.to_grayscale) ds = grayscale(ds);
    if (d.limit && *d.limit < ds.size()) {
      std::vector<std::size_t> idx(*d.limit);
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      ds = ds.subset(idx);
    }
    ds.split = d.split;
    return ds;
  }

  /// Concatenated u8 images of shape CxHxW, no header.
  static LabeledDataset load_raw(const std::string& file, std::size_t c, std::size_t h, std::size_t w) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw FormatError("cannot open " + file);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    const std::size_t per = c * h * w;
    if (per == 0 || bytes.size() % per != 0) {
      throw FormatError(file + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                        std::to_string(per));
    }
    LabeledDataset ds;
    ds.channels = c;
    ds.height = h;
    ds.width = w;
    for (std::size_t off = 0; off < bytes.size(); off += per)
      ds.push_back(std::vector<std::uint8_t>(bytes.begin() + static_cast<long>(off),
                                             bytes.begin() + static_cast<long>(off + per)));
    return ds;
  }

  static ExperimentConfig load(const std::string& file, std::optional<std::uint64_t> seed_override = {},
                               const std::vector<std::string>& overrides = {}) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw ConfigError("cannot read config " + file);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    ExperimentConfig cfg = from_text(text, seed_override, overrides);
    cfg.path = file;
    cfg.dir = std::filesystem::absolute(file).parent_path();
    cfg.check_paths();
    return cfg;
  }

  /// Referenced files must exist when the config is loaded.
  void check_paths() const {
    auto need = [&](const std::string& what, const std::string& p) {
      if (!p.empty() && !std::filesystem::exists(resolve(p))) throw ConfigError(what + ": no such file " + resolve(p));
    };
    // The eval checkpoint is often produced by a later train run with the
    // same config, so score checks it when it loads it.
    if (train.loss != LossKind::NllOnly) need("train.general_checkpoint", general_checkpoint);
    need("train.init_checkpoint", init_checkpoint);
    for (const auto& [name, d] : datasets) {
      need("dataset." + name + ".path", d.path);
      need("dataset." + name + ".labels", d.labels);
    }
  }

  /// `overrides` are `section.key=value` strings (top-level keys have no
  /// section); they replace file values and are folded into the hash.
  static ExperimentConfig from_text(const std::string& text, std::optional<std::uint64_t> seed_override = {},
                                    const std::vector<std::string>& overrides = {}) {
    using namespace detail;
    ExperimentConfig cfg;
    std::string hashed = text;
    for (const auto& o : overrides) hashed += "\n--set " + o;
    cfg.hash = fnv1a_hex(hashed);
    cfg.dir = std::filesystem::current_path();
    IniFile ini = IniFile::parse(text);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not section.key=value");
      const std::string lhs = trim_ws(o.substr(0, eq));
      const auto dot = lhs.rfind('.');
      const std::string sec = dot == std::string::npos ? "" : lhs.substr(0, dot);
      const std::string key = dot == std::string::npos ? lhs : lhs.substr(dot + 1);
      if (key.empty()) throw ConfigError("override '" + o + "' has an empty key");
      if (!ini.sections.count(sec)) ini.order.push_back(sec);
      ini.sections[sec][key] = trim_ws(o.substr(eq + 1));
    }

    for (const auto& [k, v] : ini.sections[""]) {
      if (k == "seed") cfg.seed = parse_count(k, v);
      else if (k == "out_dir") cfg.out_dir = v;
      else throw ConfigError("unknown top-level key '" + k + "'");
    }
    if (seed_override) cfg.seed = *seed_override;
    cfg.model.seed = cfg.seed;
    cfg.train.seed = cfg.seed;

    for (const auto& name : ini.order) {
      const auto& sec = ini.sections[name];
      if (name.empty()) continue;
      if (name == "model") {
        for (const auto& [k, v] : sec) cfg.model.set(k, v);
        if (seed_override) cfg.model.seed = *seed_override;
      } else if (name == "train") {
        for (const auto& [k, v] : sec) cfg.apply_train(k, v);
        if (seed_override) cfg.train.seed = *seed_override;
      } else if (name == "eval") {
        for (const auto& [k, v] : sec) {
          if (k == "methods") cfg.eval_methods = split_list(v);
          else if (k == "general_checkpoint") cfg.eval_general_checkpoint = v;
          else if (k == "pseudo_reference") cfg.pseudo_reference = v;
          else throw ConfigError("unknown key eval." + k);
        }
      } else if (name.rfind("dataset.", 0) == 0) {
        DatasetSpec d = parse_dataset(name.substr(8), sec);
        cfg.datasets[d.name] = d;
      } else {
        throw ConfigError("unknown section [" + name + "]");
      }
    }
    cfg.model.validate();
    cfg.train.validate();
    for (const std::string* ref : {&cfg.train_dataset, &cfg.general_dataset, &cfg.pseudo_reference})
      if (!ref->empty()) cfg.dataset(*ref);
    for (const auto& [name, d] : cfg.datasets)
      for (const auto& part : d.parts) cfg.dataset(part);
    return cfg;
  }

 private:
  void apply_train(const std::string& k, const std::string& v) {
    using namespace detail;
    const std::string key = "train." + k;
    if (k == "learning_rate") train.learning_rate = parse_number(key, v);
    else if (k == "weight_decay") train.weight_decay = parse_number(key, v);
    else if (k == "epochs") train.epochs = parse_count(key, v);
    else if (k == "batch_size") train.batch_size = parse_count(key, v);
    else if (k == "temperature") train.temperature = parse_number(key, v);
    else if (k == "outlier_weight") train.outlier_weight = parse_number(key, v);
    else if (k == "margin") train.margin = parse_number(key, v);
    else if (k == "loss") train.loss = parse_loss_kind(v);
    else if (k == "dequantize") train.dequantize = parse_bool(key, v);
    else if (k == "augment_translate") train.augment_translate = parse_bool(key, v);
    else if (k == "max_shift") train.max_shift = parse_count(key, v);
    else if (k == "augment_flip") train.augment_flip = parse_bool(key, v);
    else if (k == "supervised") train.supervised = parse_bool(key, v);
    else if (k == "init_batch") train.init_batch = parse_count(key, v);
    else if (k == "seed") train.seed = parse_count(key, v);
    else if (k == "dataset") train_dataset = v;
    else if (k == "general_dataset") general_dataset = v;
    else if (k == "general_checkpoint") general_checkpoint = v;
    else if (k == "init_checkpoint") init_checkpoint = v;
    else throw ConfigError("unknown key " + key);
  }

  static DatasetSpec parse_dataset(const std::string& name, const std::map<std::string, std::string>& sec) {
    using namespace detail;
    DatasetSpec d;
    d.name = name;
    if (name.empty()) throw ConfigError("dataset section needs a name");
    for (const auto& [k, v] : sec) {
      const std::string key = "dataset." + name + "." + k;
      if (k == "format") d.format = v;
      else if (k == "domain") d.domain = parse_domain(v);
      else if (k == "n") d.count = parse_count(key, v);
      else if (k == "seed") d.seed = parse_count(key, v);
      else if (k == "blur_passes") d.synth.blur_passes = parse_count(key, v);
      else if (k == "gain") d.synth.gain = parse_number(key, v);
      else if (k == "path") d.path = v;
      else if (k == "labels") d.labels = v;
      else if (k == "parts") d.parts = split_list(v);
      else if (k == "grayscale") d.to_grayscale = parse_bool(key, v);
      else if (k == "limit") d.limit = parse_count(key, v);
      else if (k == "split") d.split = parse_split(v);
      else if (k == "inlier") d.inlier = parse_bool(key, v);
      else if (k == "shape") {
        auto dims = split_list(v, 'x');
        if (dims.size() != 3) throw ConfigError(key + ": expected CxHxW, got '" + v + "'");
        d.channels = parse_count(key, dims[0]);
        d.height = parse_count(key, dims[1]);
        d.width = parse_count(key, dims[2]);
      } else {
        throw ConfigError("unknown key " + key);
      }
    }
    if (d.format != "synthetic" && d.format != "idx" && d.format != "raw" && d.format != "concat")
      throw ConfigError("dataset." + name + ".format must be synthetic, idx, raw or concat");
    if (d.format == "synthetic" && d.count == 0) throw ConfigError("dataset." + name + ".n must be >= 1");
    if ((d.format == "idx" || d.format == "raw") && d.path.empty())
      throw ConfigError("dataset." + name + ".path is required");
    if (d.format == "concat" && d.parts.empty()) throw ConfigError("dataset." + name + ".parts is required");
    return d;
  }
};

}  // namespace flowad
