#pragma once

// Binary checkpoint container.
//
//   "FLOW"                 4 bytes magic
//   version                u32
//   variant tag            u32 (0 conv, 1 local_patch, 2 dense)
//   config echo            u32 byte length + ModelConfig::serialize() text
//   actnorm initialized    u8
//   parameter count        u32
//   per parameter, in FlowModel::parameters() order:
//     rank u32, rank x u64 dims, then the values as f64
//
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <memory>
#include <ostream>
#include <string>

#include "flowad/errors.hpp"
#include "flowad/model.hpp"

namespace flowad {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  std::array<char, sizeof(T)> buf;
  std::memcpy(buf.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
  os.write(buf.data(), buf.size());
}

template <class T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> buf;
  if (!is.read(buf.data(), buf.size())) throw FormatError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
  T v;
  std::memcpy(&v, buf.data(), sizeof(T));
  return v;
}

inline std::uint32_t variant_tag(Variant v) {
  switch (v) {
    case Variant::Conv: return 0;
    case Variant::LocalPatch: return 1;
    case Variant::Dense: return 2;
  }
  return 0;
}

}  // namespace detail

/// `provenance` entries are prepended to the config echo as `# key=value`
/// comment lines.
inline void save_checkpoint(FlowModel& model, std::ostream& os,
                            const std::vector<std::pair<std::string, std::string>>& provenance = {}) {
  os.write("FLOW", 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, detail::variant_tag(model.config().variant));
  std::string echo;
  for (const auto& [k, v] : provenance) echo += "# " + k + "=" + v + "\n";
  echo += model.config().serialize();
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(echo.size()));
  os.write(echo.data(), static_cast<std::streamsize>(echo.size()));
  detail::write_le<std::uint8_t>(os, model.initialized() ? 1 : 0);
  const auto params = model.parameters();
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    const Shape& s = p->value().shape();
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) detail::write_le<std::uint64_t>(os, d);
    for (double v : p->value().data()) detail::write_le<double>(os, v);
  }
  if (!os) throw FormatError("failed writing checkpoint");
}

inline std::unique_ptr<FlowModel> load_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FLOW", 4) != 0) throw FormatError("not a FLOW checkpoint");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto tag = detail::read_le<std::uint32_t>(is);
  const auto len = detail::read_le<std::uint32_t>(is);
  if (len > (1u << 20)) throw FormatError("checkpoint config echo too large");
  std::string echo(len, '\0');
  if (!is.read(echo.data(), len)) throw FormatError("checkpoint truncated in config echo");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::parse(echo);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config echo: ") + e.what());
  }
  if (detail::variant_tag(cfg.variant) != tag) throw FormatError("checkpoint variant tag disagrees with config echo");
  auto model = build_variant(cfg);
  const bool initialized = detail::read_le<std::uint8_t>(is) != 0;
  const auto count = detail::read_le<std::uint32_t>(is);
  auto params = model->parameters();
  if (count != params.size()) {
    throw FormatError("checkpoint has " + std::to_string(count) + " parameters, model declares " +
                      std::to_string(params.size()));
  }
  for (auto* p : params) {
    const auto rank = detail::read_le<std::uint32_t>(is);
    if (rank > 8) throw FormatError("checkpoint tensor rank too large");
    Shape s(rank);
    for (auto& d : s) d = detail::read_le<std::uint64_t>(is);
    if (s != p->value().shape()) {
      throw FormatError("checkpoint tensor " + p->name() + " has shape " + shape_string(s) + ", expected " +
                        shape_string(p->value().shape()));
    }
    Tensor t(s);
    for (double& v : t.data()) v = detail::read_le<double>(is);
    p->set_value(std::move(t));
  }
  if (initialized) model->mark_initialized();
  return model;
}

inline void save_checkpoint(FlowModel& model, const std::string& path,
                            const std::vector<std::pair<std::string, std::string>>& provenance = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  save_checkpoint(model, os, provenance);
}

inline std::unique_ptr<FlowModel> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path);
  return load_checkpoint(is);
}

}  // namespace flowad
