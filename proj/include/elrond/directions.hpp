#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "elrond/io.hpp"
#include "elrond/pca.hpp"
#include "elrond/sae.hpp"

namespace elrond {

struct DirectionSet {
  std::string source;  // "pca" or "sae"
  std::string concept_name;
  std::size_t d_embed = 0;
  std::vector<double> dirs;  // count x d_embed row-major, unit rows
  std::vector<double> weights;

  std::size_t count() const { return d_embed == 0 ? 0 : dirs.size() / d_embed; }

  std::span<const double> dir(std::size_t i) const {
    if (i >= count()) throw std::out_of_range("DirectionSet: direction " + std::to_string(i));
    return std::span<const double>(dirs).subspan(i * d_embed, d_embed);
  }

  void validate() const {
    if (source != "pca" && source != "sae")
      throw std::runtime_error("DirectionSet: unknown source '" + source + "'");
    if (d_embed == 0) throw std::runtime_error("DirectionSet: d_embed must be positive");
    if (dirs.size() % d_embed != 0)
      throw std::runtime_error("DirectionSet: ragged direction data");
    if (weights.size() != count())
      throw std::runtime_error("DirectionSet: weight count " + std::to_string(weights.size()) +
                               " != direction count " + std::to_string(count()));
    for (std::size_t i = 0; i < count(); ++i) {
      double nrm = 0.0;
      for (double v : dir(i)) nrm += v * v;
      if (std::abs(std::sqrt(nrm) - 1.0) > 1e-10)
        throw std::runtime_error("DirectionSet: direction " + std::to_string(i) +
                                 " is not unit norm");
      if (!(weights[i] >= 0.0))
        throw std::runtime_error("DirectionSet: negative weight at " + std::to_string(i));
    }
  }
};

namespace detail {

inline void push_normalized(DirectionSet& ds, std::span<const double> v, double weight,
                            const char* what) {
  double nrm = 0.0;
  for (double x : v) nrm += x * x;
  nrm = std::sqrt(nrm);
  if (nrm < 1e-12)
    throw std::runtime_error(std::string("directions_from: degenerate ") + what);
  for (double x : v) ds.dirs.push_back(x / nrm);
  ds.weights.push_back(weight);
}

}  // namespace detail

// Retained principal components, weighted by explained-variance ratio.
inline DirectionSet directions_from(const PcaBasis& basis, const std::string& concept_name = "") {
  DirectionSet ds;
  ds.source = "pca";
  ds.concept_name = concept_name;
  ds.d_embed = basis.d;
  for (std::size_t i = 0; i < basis.retained; ++i)
    detail::push_normalized(ds, basis.component(i), basis.ratios[i], "principal component");
  return ds;
}

// Alive decoder atoms, weighted by activation density.
inline DirectionSet directions_from(const SaeModel& model, const AliveReport& alive,
                                    const std::string& concept_name = "") {
  DirectionSet ds;
  ds.source = "sae";
  ds.concept_name = concept_name;
  ds.d_embed = model.d_embed();
  for (std::size_t j : alive.alive)
    detail::push_normalized(ds, model.decoder_atom(j), alive.density[j], "decoder atom");
  return ds;
}

inline void save_directions_json(const std::filesystem::path& path, const DirectionSet& ds) {
  ds.validate();
  nlohmann::json j;
  j["source"] = ds.source;
  j["concept"] = ds.concept_name;
  j["count"] = ds.count();
  j["d_embed"] = ds.d_embed;
  j["weights"] = ds.weights;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.count(); ++i) {
    const auto d = ds.dir(i);
    rows.push_back(std::vector<double>(d.begin(), d.end()));
  }
  j["directions"] = std::move(rows);
  io::save_json(path, j);
}

namespace detail {

inline std::uint8_t direction_source_code(const std::string& source) {
  if (source == "pca") return 0;
  if (source == "sae") return 1;
  throw std::runtime_error("unknown direction source '" + source + "'");
}

inline std::string direction_source_name(std::uint8_t code) {
  if (code == 0) return "pca";
  if (code == 1) return "sae";
  throw std::runtime_error("unknown direction source code " + std::to_string(code));
}

}  // namespace detail

inline void save_directions_elds(const std::filesystem::path& path, const DirectionSet& ds) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  io::write_magic(out, "ELDS");
  io::write_u32(out, 1);
  io::write_u32(out, static_cast<std::uint32_t>(ds.d_embed));
  io::write_u64(out, ds.count());
  io::write_u8(out, detail::direction_source_code(ds.source));
  io::write_f64_span(out, ds.dirs);
  if (!out) throw std::runtime_error("write failed for " + path.string());
  out.close();

  nlohmann::json side;
  side["concept"] = ds.concept_name;
  side["weights"] = ds.weights;
  io::save_json(store_sidecar_path(path), side);
}

namespace detail {

inline DirectionSet load_directions_elds(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  io::check_magic_version(in, "ELDS", 1, path.string());
  DirectionSet ds;
  ds.d_embed = io::read_u32(in, "d_embed");
  const std::uint64_t count = io::read_u64(in, "count");
  ds.source = direction_source_name(io::read_u8(in, "source"));
  ds.dirs.resize(count * ds.d_embed);
  io::read_f64_span(in, ds.dirs, "direction rows");
  if (in.peek() != std::ifstream::traits_type::eof())
    throw std::runtime_error("trailing bytes after " + std::to_string(count) +
                             " directions in " + path.string());
  const nlohmann::json side = io::load_json(store_sidecar_path(path));
  ds.concept_name = side.at("concept").get<std::string>();
  ds.weights = side.at("weights").get<std::vector<double>>();
  ds.validate();
  return ds;
}

inline DirectionSet load_directions_json(const std::filesystem::path& path) {
  const nlohmann::json j = io::load_json(path);
  DirectionSet ds;
  ds.source = j.at("source").get<std::string>();
  ds.concept_name = j.at("concept").get<std::string>();
  ds.d_embed = j.at("d_embed").get<std::size_t>();
  ds.weights = j.at("weights").get<std::vector<double>>();
  const auto& rows = j.at("directions");
  if (!rows.is_array() || rows.size() != j.at("count").get<std::size_t>())
    throw std::runtime_error(path.string() + ": direction count does not match header");
  for (const auto& row : rows) {
    const auto v = row.get<std::vector<double>>();
    if (v.size() != ds.d_embed)
      throw std::runtime_error(path.string() + ": direction row has wrong dimension");
    ds.dirs.insert(ds.dirs.end(), v.begin(), v.end());
  }
  ds.validate();
  return ds;
}

}  // namespace detail

// Reads either format: binary files announce themselves with the ELDS
// magic, anything else is parsed as JSON.
inline DirectionSet load_directions(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw std::runtime_error("cannot open " + path.string());
  char magic[4] = {0, 0, 0, 0};
  probe.read(magic, 4);
  probe.close();
  if (std::string(magic, 4) == "ELDS") return detail::load_directions_elds(path);
  return detail::load_directions_json(path);
}

}  // namespace elrond
