#pragma once

// FGPVAE01 checkpoints:
//   magic "FGPVAE01"
//   u64 manifest length, then UTF-8 manifest lines "name<TAB>d0,d1,...<TAB>offset\n"
//   little-endian IEEE-754 binary64 values, in offset order
// Offsets count doubles from the start of the value block.

#include <array>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "fgpvae/data.hpp"
#include "fgpvae/errors.hpp"
#include "fgpvae/io.hpp"
#include "fgpvae/model.hpp"
#include "fgpvae/nets.hpp"

namespace fgpvae {

inline constexpr std::array<char, 8> kCheckpointMagic = {'F', 'G', 'P', 'V', 'A', 'E', '0', '1'};

namespace detail {

inline NetParams model_meta(const ModelParams& p) {
  const auto& c = p.config;
  NetParams meta;
  auto put = [&](const std::string& name, std::vector<double> v) {
    const auto off = meta.add(name, {static_cast<std::int64_t>(v.size())});
    std::copy(v.begin(), v.end(), meta.values.begin() + static_cast<std::ptrdiff_t>(off));
  };
  put("model.latent_channels", {static_cast<double>(c.latent.total_channels),
                                static_cast<double>(c.latent.local_channels)});
  put("model.image_shape", {static_cast<double>(c.height), static_cast<double>(c.width)});
  put("model.prior_kind", {static_cast<double>(static_cast<int>(c.prior))});
  put("model.jitter", {c.jitter});
  put("kernel.params", {c.kernel.amplitude, c.kernel.lengthscale});
  put("likelihood.sigma_y", {c.sigma_y});
  put("geco.state", {p.geco.lagrange_multiplier, p.geco.constraint_ma});
  return meta;
}

inline std::string join_shape(const std::vector<std::int64_t>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  const NetParams meta = detail::model_meta(p);
  std::string manifest;
  std::vector<double> values;
  for (const NetParams* block : {&meta, &p.encoder, &p.decoder}) {
    for (const auto& e : block->manifest) {
      manifest += e.name + "\t" + detail::join_shape(e.shape) + "\t" +
                  std::to_string(values.size()) + "\n";
      const auto v = block->values.begin() + static_cast<std::ptrdiff_t>(e.offset);
      values.insert(values.end(), v, v + static_cast<std::ptrdiff_t>(e.count()));
    }
  }
  ByteWriter w;
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u64(manifest.size());
  w.bytes(manifest.data(), manifest.size());
  for (double v : values) w.f64(v);
  write_file_atomic(path, w.buffer());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  ByteReader r(bytes, path.string());
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw BadMagicError(path.string() + ": not an FGPVAE01 checkpoint");
  const std::uint64_t manifest_len = r.u64();
  if (manifest_len > r.remaining()) throw TruncatedFileError(path.string() + ": manifest truncated");
  std::string manifest(manifest_len, '\0');
  r.bytes(manifest.data(), manifest.size());
  if (r.remaining() % 8 != 0) throw TruncatedFileError(path.string() + ": partial value block");
  std::vector<double> values(r.remaining() / 8);
  for (double& v : values) v = r.f64();

  struct Entry {
    std::string name;
    std::vector<std::int64_t> shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::istringstream lines(manifest);
  std::string line;
  while (std::getline(lines, line)) {
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos) {
      throw DataError(path.string() + ": malformed manifest line '" + line + "'");
    }
    Entry e{line.substr(0, t1), {}, std::stoull(line.substr(t2 + 1))};
    std::istringstream dims(line.substr(t1 + 1, t2 - t1 - 1));
    std::string d;
    while (std::getline(dims, d, ',')) e.shape.push_back(std::stoll(d));
    entries.push_back(std::move(e));
  }
  auto find = [&](const std::string& name) -> const Entry& {
    for (const auto& e : entries) {
      if (e.name == name) return e;
    }
    throw DataError(path.string() + ": checkpoint lacks '" + name + "'");
  };
  auto count_of = [](const std::vector<std::int64_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
  };
  auto scalars = [&](const std::string& name) {
    const auto& e = find(name);
    const std::size_t n = count_of(e.shape);
    if (e.offset + n > values.size()) throw TruncatedFileError(path.string() + ": values truncated");
    return std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(e.offset),
                               values.begin() + static_cast<std::ptrdiff_t>(e.offset + n));
  };

  ModelParams p;
  const auto latent = scalars("model.latent_channels");
  const auto shape = scalars("model.image_shape");
  p.config.latent = {static_cast<int>(latent.at(0)), static_cast<int>(latent.at(1))};
  p.config.height = static_cast<int>(shape.at(0));
  p.config.width = static_cast<int>(shape.at(1));
  p.config.prior = static_cast<PriorKind>(static_cast<int>(scalars("model.prior_kind").at(0)));
  p.config.jitter = scalars("model.jitter").at(0);
  const auto kernel = scalars("kernel.params");
  p.config.kernel = {kernel.at(0), kernel.at(1)};
  p.config.sigma_y = scalars("likelihood.sigma_y").at(0);
  const auto geco = scalars("geco.state");
  p.geco = {geco.at(0), geco.at(1)};

  const Model model(p.config);
  p.encoder = model.encoder().layout();
  p.decoder = model.decoder().layout();
  for (NetParams* block : {&p.encoder, &p.decoder}) {
    for (const auto& e : block->manifest) {
      const auto& stored = find(e.name);
      if (stored.shape != e.shape) {
        throw ShapeError(path.string() + ": parameter '" + e.name + "' has shape " +
                         detail::join_shape(stored.shape) + ", expected " + detail::join_shape(e.shape));
      }
      const auto v = scalars(e.name);
      std::copy(v.begin(), v.end(), block->values.begin() + static_cast<std::ptrdiff_t>(e.offset));
    }
  }
  return p;
}

}  // namespace fgpvae
