#pragma once

// Anomaly scores and their evaluation. Polarity everywhere: a higher score
// means more inlier-like.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "flowad/errors.hpp"

namespace flowad {

/// Substitute for non-finite log-likelihoods, applied before any difference.
inline constexpr double kLogLikelihoodFloor = -3000000.0;

inline double clip_logp(double x) { return std::isfinite(x) ? x : kLogLikelihoodFloor; }

/// log p_in(x) - log p_g(x) of clipped inputs.
inline double ratio_score(double logp_in, double logp_g) { return clip_logp(logp_in) - clip_logp(logp_g); }

/// Final-scale contribution c_S.
inline double last_scale_score(const std::vector<double>& contributions) {
  if (contributions.size() < 2) throw ContractError("last-scale score needs a model with at least 2 scales");
  return contributions.back();
}

/// Fractional (tie-averaged) ranks starting at 1.
inline std::vector<double> fractional_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// P(random inlier outscores random outlier), ties counted 1/2, via the
/// Mann-Whitney rank sum.
inline double auroc(const std::vector<double>& inliers, const std::vector<double>& outliers) {
  if (inliers.empty() || outliers.empty()) throw ContractError("auroc needs nonempty inlier and outlier lists");
  std::vector<double> pooled(inliers);
  pooled.insert(pooled.end(), outliers.begin(), outliers.end());
  const auto ranks = fractional_ranks(pooled);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < inliers.size(); ++i) rank_sum += ranks[i];
  const double n = static_cast<double>(inliers.size());
  const double m = static_cast<double>(outliers.size());
  return (rank_sum - n * (n + 1.0) / 2.0) / (n * m);
}

/// Pearson correlation of fractional ranks.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("spearman needs equal-length lists");
  if (a.size() < 3) throw ContractError("spearman needs at least 3 values");
  const auto ra = fractional_ranks(a);
  const auto rb = fractional_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateInputError("spearman of a constant list");
  return sab / std::sqrt(saa * sbb);
}

/// Locale-independent shortest round-trip decimal.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  if (s == "nan") return NAN;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) throw FormatError("not a number: '" + s + "'");
  return v;
}

/// Per-example scores, one column per method.
struct ScoreTable {
  struct Record {
    std::size_t id = 0;
    bool inlier = true;
    std::vector<double> values;
  };

  std::vector<std::pair<std::string, std::string>> metadata;  // written as "# key=value"
  std::vector<std::string> columns;
  std::vector<Record> records;

  std::size_t column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw ContractError("score table has no column '" + name + "'");
  }

  std::vector<double> column(const std::string& name) const {
    const std::size_t c = column_index(name);
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.values[c]);
    return out;
  }

  std::string metadata_value(const std::string& key) const {
    for (const auto& [k, v] : metadata)
      if (k == key) return v;
    return {};
  }

  void write(std::ostream& os) const {
    for (const auto& [k, v] : metadata) os << "# " << k << '=' << v << '\n';
    os << "id,inlier";
    for (const auto& c : columns) os << ',' << c;
    os << '\n';
    for (const auto& r : records) {
      os << r.id << ',' << (r.inlier ? 1 : 0);
      for (double v : r.values) os << ',' << format_double(v);
      os << '\n';
    }
  }

  static ScoreTable read(std::istream& is) {
    ScoreTable t;
    std::string line;
    bool header = false;
    auto split = [](const std::string& s) {
      std::vector<std::string> parts;
      std::stringstream ss(s);
      std::string item;
      while (std::getline(ss, item, ',')) parts.push_back(item);
      return parts;
    };
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (line.rfind("# ", 0) == 0) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) t.metadata.emplace_back(line.substr(2, eq - 2), line.substr(eq + 1));
        continue;
      }
      auto parts = split(line);
      if (!header) {
        if (parts.size() < 2 || parts[0] != "id" || parts[1] != "inlier") throw FormatError("score table header must start with id,inlier");
        t.columns.assign(parts.begin() + 2, parts.end());
        header = true;
        continue;
      }
      if (parts.size() != t.columns.size() + 2) throw FormatError("score table row has wrong field count: " + line);
      Record r;
      try {
        r.id = std::stoull(parts[0]);
      } catch (const std::exception&) {
        throw FormatError("bad id field '" + parts[0] + "'");
      }
      r.inlier = parts[1] == "1";
      for (std::size_t i = 2; i < parts.size(); ++i) r.values.push_back(parse_double(parts[i]));
      t.records.push_back(std::move(r));
    }
    if (!header) throw FormatError("score table has no header row");
    return t;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path);
    write(os);
  }

  static ScoreTable load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open score table " + path);
    return read(is);
  }
};

}  // namespace flowad
