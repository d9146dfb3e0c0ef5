#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "elrond/rng.hpp"

namespace elrond {

struct Mode {
  std::vector<double> center;
  double weight = 0.0;
};

// Ground-truth generative law for one concept: a mixture of mode centers
// plus a k-dimensional factor subspace and isotropic observation noise.
// Latents parse as P = d_latent/2 planar points so set losses are meaningful.
struct ConceptSpec {
  std::string name;
  std::size_t d_embed = 0;
  std::vector<double> e_tok;
  std::size_t d_latent = 0;
  std::vector<Mode> modes;
  std::size_t k_factors = 0;
  std::vector<double> B;  // d_latent x k_factors, row-major, orthonormal columns
  std::vector<double> factor_scale;
  double eta = 0.0;
  // Nonempty only for composite (multi-subject) concepts; halves sample
  // independently and concatenate, and each half conditions only on its own
  // embedding slot.
  std::vector<ConceptSpec> parts;

  double b_at(std::size_t row, std::size_t col) const { return B[row * k_factors + col]; }

  std::vector<double> factor_column(std::size_t col) const {
    std::vector<double> v(d_latent);
    for (std::size_t r = 0; r < d_latent; ++r) v[r] = b_at(r, col);
    return v;
  }

  void validate() const {
    if (name.empty()) throw std::invalid_argument("ConceptSpec: empty name");
    if (d_embed == 0 || d_latent == 0) throw std::invalid_argument("ConceptSpec: zero dimensions");
    if (e_tok.size() != d_embed)
      throw std::invalid_argument("ConceptSpec '" + name + "': e_tok size " +
                                  std::to_string(e_tok.size()) + " != d_embed " + std::to_string(d_embed));
    if (modes.empty()) throw std::invalid_argument("ConceptSpec '" + name + "': no modes");
    double wsum = 0.0;
    for (const auto& m : modes) {
      if (m.center.size() != d_latent)
        throw std::invalid_argument("ConceptSpec '" + name + "': mode center dim mismatch");
      if (m.weight < 0.0) throw std::invalid_argument("ConceptSpec '" + name + "': negative mode weight");
      wsum += m.weight;
    }
    if (std::abs(wsum - 1.0) > 1e-9)
      throw std::invalid_argument("ConceptSpec '" + name + "': mode weights sum to " + std::to_string(wsum));
    if (eta < 0.0) throw std::invalid_argument("ConceptSpec '" + name + "': negative eta");
    if (B.size() != d_latent * k_factors)
      throw std::invalid_argument("ConceptSpec '" + name + "': B size mismatch");
    if (factor_scale.size() != k_factors)
      throw std::invalid_argument("ConceptSpec '" + name + "': factor_scale size mismatch");
    for (std::size_t a = 0; a < k_factors; ++a)
      for (std::size_t b = a; b < k_factors; ++b) {
        double dot = 0.0;
        for (std::size_t r = 0; r < d_latent; ++r) dot += b_at(r, a) * b_at(r, b);
        const double want = a == b ? 1.0 : 0.0;
        if (std::abs(dot - want) > 1e-10)
          throw std::invalid_argument("ConceptSpec '" + name + "': factor columns not orthonormal (" +
                                      std::to_string(a) + "," + std::to_string(b) + ")");
      }
    for (const auto& p : parts) p.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["name"] = name;
    j["d_embed"] = d_embed;
    j["e_tok"] = e_tok;
    j["d_latent"] = d_latent;
    nlohmann::json jm = nlohmann::json::array();
    for (const auto& m : modes) jm.push_back({{"center", m.center}, {"weight", m.weight}});
    j["modes"] = jm;
    j["k_factors"] = k_factors;
    nlohmann::json jb = nlohmann::json::array();
    for (std::size_t r = 0; r < d_latent; ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t c = 0; c < k_factors; ++c) row.push_back(b_at(r, c));
      jb.push_back(row);
    }
    j["B"] = jb;
    j["factor_scale"] = factor_scale;
    j["eta"] = eta;
    if (!parts.empty()) {
      nlohmann::json jp = nlohmann::json::array();
      for (const auto& p : parts) jp.push_back(p.to_json());
      j["parts"] = jp;
    }
    return j;
  }

  static ConceptSpec from_json(const nlohmann::json& j) {
    if (!j.contains("version") || j.at("version").get<int>() != 1)
      throw std::runtime_error("ConceptSpec: unsupported or missing version");
    ConceptSpec s;
    s.name = j.at("name").get<std::string>();
    s.d_embed = j.at("d_embed").get<std::size_t>();
    s.e_tok = j.at("e_tok").get<std::vector<double>>();
    s.d_latent = j.at("d_latent").get<std::size_t>();
    for (const auto& jm : j.at("modes")) {
      Mode m;
      m.center = jm.at("center").get<std::vector<double>>();
      m.weight = jm.at("weight").get<double>();
      s.modes.push_back(std::move(m));
    }
    s.k_factors = j.at("k_factors").get<std::size_t>();
    const auto& jb = j.at("B");
    s.B.reserve(s.d_latent * s.k_factors);
    for (const auto& row : jb)
      for (const auto& v : row) s.B.push_back(v.get<double>());
    s.factor_scale = j.at("factor_scale").get<std::vector<double>>();
    s.eta = j.at("eta").get<double>();
    if (j.contains("parts"))
      for (const auto& jp : j.at("parts")) s.parts.push_back(from_json(jp));
    s.validate();
    return s;
  }
};

struct ConceptSample {
  std::vector<double> z0;
  std::size_t mode_id = 0;
  std::vector<double> factors;
};

namespace detail {

// Orthonormalizes k Gaussian columns in R^d. Two modified Gram-Schmidt
// passes keep the off-diagonal error near machine precision.
inline std::vector<double> random_orthonormal_columns(Rng& rng, std::size_t d, std::size_t k) {
  if (k > d) throw std::invalid_argument("random_orthonormal_columns: k > d");
  std::vector<std::vector<double>> cols(k);
  for (auto& c : cols) c = rng.normal_vec(d);
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < a; ++b) {
        double dot = 0.0;
        for (std::size_t r = 0; r < d; ++r) dot += cols[a][r] * cols[b][r];
        for (std::size_t r = 0; r < d; ++r) cols[a][r] -= dot * cols[b][r];
      }
      double nrm = 0.0;
      for (double v : cols[a]) nrm += v * v;
      nrm = std::sqrt(nrm);
      if (nrm < 1e-12) throw std::runtime_error("random_orthonormal_columns: degenerate draw");
      for (auto& v : cols[a]) v /= nrm;
    }
  }
  std::vector<double> flat(d * k);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < k; ++c) flat[r * k + c] = cols[c][r];
  return flat;
}

inline std::vector<double> random_unit(Rng& rng, std::size_t d) {
  auto v = rng.normal_vec(d);
  double nrm = 0.0;
  for (double x : v) nrm += x * x;
  nrm = std::sqrt(nrm);
  for (auto& x : v) x /= nrm;
  return v;
}

}  // namespace detail

struct ConceptParams {
  std::string name = "concept";
  std::size_t d_embed = 32;
  std::size_t d_latent = 32;
  std::size_t n_modes = 3;
  std::size_t k_factors = 5;
  double mode_separation = 6.0;
  double factor_scale = 0.4;
  double eta = 0.02;
  std::vector<double> mode_weights;  // empty = equal weights
};

inline ConceptSpec make_concept(const ConceptParams& p, std::uint64_t seed) {
  if (p.n_modes == 0) throw std::invalid_argument("make_concept: need at least one mode");
  if (p.k_factors > p.d_latent) throw std::invalid_argument("make_concept: k_factors > d_latent");
  ConceptSpec s;
  s.name = p.name;
  s.d_embed = p.d_embed;
  s.d_latent = p.d_latent;
  s.k_factors = p.k_factors;
  s.eta = p.eta;
  s.factor_scale.assign(p.k_factors, p.factor_scale);

  Rng erng(seed, 1);
  s.e_tok = detail::random_unit(erng, p.d_embed);

  Rng brng(seed, 2);
  s.B = p.k_factors > 0 ? detail::random_orthonormal_columns(brng, p.d_latent, p.k_factors)
                        : std::vector<double>{};

  // centers ~ N(0, s^2 I) with s chosen so expected pairwise distance is
  // mode_separation; resample any center closer than 0.7 of that to keep
  // basins disjoint.
  Rng crng(seed, 3);
  const double cs = p.mode_separation / std::sqrt(2.0 * static_cast<double>(p.d_latent));
  for (std::size_t m = 0; m < p.n_modes; ++m) {
    Mode mode;
    for (int attempt = 0; attempt < 200; ++attempt) {
      std::vector<double> c(p.d_latent);
      for (auto& v : c) v = cs * crng.normal();
      bool ok = true;
      for (const auto& prev : s.modes) {
        double d2 = 0.0;
        for (std::size_t r = 0; r < p.d_latent; ++r) {
          const double dv = c[r] - prev.center[r];
          d2 += dv * dv;
        }
        if (std::sqrt(d2) < 0.7 * p.mode_separation) {
          ok = false;
          break;
        }
      }
      if (ok || attempt == 199) {
        mode.center = std::move(c);
        break;
      }
    }
    mode.weight = p.mode_weights.empty() ? 1.0 / static_cast<double>(p.n_modes)
                                         : p.mode_weights.at(m);
    s.modes.push_back(std::move(mode));
  }
  double wsum = 0.0;
  for (const auto& m : s.modes) wsum += m.weight;
  for (auto& m : s.modes) m.weight /= wsum;
  s.validate();
  return s;
}

namespace detail {

inline ConceptSample sample_one(const ConceptSpec& spec, Rng& rng) {
  if (!spec.parts.empty()) {
    ConceptSample out;
    std::size_t mode_id = 0;
    for (const auto& part : spec.parts) {
      ConceptSample ps = sample_one(part, rng);
      out.z0.insert(out.z0.end(), ps.z0.begin(), ps.z0.end());
      out.factors.insert(out.factors.end(), ps.factors.begin(), ps.factors.end());
      mode_id = mode_id * part.modes.size() + ps.mode_id;
    }
    out.mode_id = mode_id;
    return out;
  }
  ConceptSample out;
  std::vector<double> weights;
  weights.reserve(spec.modes.size());
  for (const auto& m : spec.modes) weights.push_back(m.weight);
  out.mode_id = rng.categorical(weights);
  out.factors = rng.normal_vec(spec.k_factors);
  out.z0 = spec.modes[out.mode_id].center;
  for (std::size_t r = 0; r < spec.d_latent; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < spec.k_factors; ++c)
      acc += spec.b_at(r, c) * spec.factor_scale[c] * out.factors[c];
    out.z0[r] += acc;
  }
  if (spec.eta > 0.0)
    for (std::size_t r = 0; r < spec.d_latent; ++r) out.z0[r] += spec.eta * rng.normal();
  return out;
}

}  // namespace detail

inline std::vector<ConceptSample> sample_concept(const ConceptSpec& spec, std::size_t n,
                                                 std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_concept: n must be >= 1");
  spec.validate();
  std::vector<ConceptSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, i));
    out.push_back(detail::sample_one(spec, rng));
  }
  return out;
}

// Strict sub-concept: first half of the factor columns and modes. The
// specific embedding keeps a 45-degree overlap with the general one, so the
// pair stays related but separable by the conditioning network.
inline std::pair<ConceptSpec, ConceptSpec> make_hierarchy_pair(const ConceptSpec& general,
                                                               std::uint64_t seed = 0) {
  if (general.k_factors < 2)
    throw std::invalid_argument("make_hierarchy_pair: general concept needs k_factors >= 2");
  general.validate();
  ConceptSpec s;
  s.name = general.name + "-specific";
  s.d_embed = general.d_embed;
  s.d_latent = general.d_latent;
  s.eta = general.eta;
  s.k_factors = std::max<std::size_t>(1, general.k_factors / 2);
  s.factor_scale.assign(general.factor_scale.begin(),
                        general.factor_scale.begin() + static_cast<long>(s.k_factors));
  s.B.resize(s.d_latent * s.k_factors);
  for (std::size_t r = 0; r < s.d_latent; ++r)
    for (std::size_t c = 0; c < s.k_factors; ++c) s.B[r * s.k_factors + c] = general.b_at(r, c);

  const std::size_t keep = general.modes.size() > 1
                               ? std::max<std::size_t>(1, (general.modes.size() + 1) / 2)
                               : 1;
  double wsum = 0.0;
  for (std::size_t m = 0; m < keep; ++m) {
    s.modes.push_back(general.modes[m]);
    wsum += general.modes[m].weight;
  }
  for (auto& m : s.modes) m.weight /= wsum;

  // e_specific = (e_general + u_perp)/sqrt(2)
  Rng rng(seed, 11);
  std::vector<double> u = detail::random_unit(rng, general.d_embed);
  double dot = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * general.e_tok[i];
  double nrm = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] -= dot * general.e_tok[i];
    nrm += u[i] * u[i];
  }
  nrm = std::sqrt(nrm);
  s.e_tok.resize(general.d_embed);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (std::size_t i = 0; i < u.size(); ++i)
    s.e_tok[i] = inv_sqrt2 * (general.e_tok[i] + u[i] / nrm);
  s.validate();
  return {general, s};
}

// Composite two-subject concept: latents and embeddings concatenate, ground
// truth modes are the cross product, and B is block diagonal. Halves stay
// independent under sampling.
inline ConceptSpec make_two_subject(const ConceptSpec& a, const ConceptSpec& b) {
  a.validate();
  b.validate();
  if (!a.parts.empty() || !b.parts.empty())
    throw std::invalid_argument("make_two_subject: nesting composites is not supported");
  ConceptSpec s;
  s.name = a.name + "+" + b.name;
  s.d_embed = a.d_embed + b.d_embed;
  s.d_latent = a.d_latent + b.d_latent;
  s.k_factors = a.k_factors + b.k_factors;
  s.eta = std::max(a.eta, b.eta);
  s.e_tok = a.e_tok;
  s.e_tok.insert(s.e_tok.end(), b.e_tok.begin(), b.e_tok.end());
  s.factor_scale = a.factor_scale;
  s.factor_scale.insert(s.factor_scale.end(), b.factor_scale.begin(), b.factor_scale.end());
  s.B.assign(s.d_latent * s.k_factors, 0.0);
  for (std::size_t r = 0; r < a.d_latent; ++r)
    for (std::size_t c = 0; c < a.k_factors; ++c) s.B[r * s.k_factors + c] = a.b_at(r, c);
  for (std::size_t r = 0; r < b.d_latent; ++r)
    for (std::size_t c = 0; c < b.k_factors; ++c)
      s.B[(a.d_latent + r) * s.k_factors + (a.k_factors + c)] = b.b_at(r, c);
  for (const auto& ma : a.modes)
    for (const auto& mb : b.modes) {
      Mode m;
      m.center = ma.center;
      m.center.insert(m.center.end(), mb.center.begin(), mb.center.end());
      m.weight = ma.weight * mb.weight;
      s.modes.push_back(std::move(m));
    }
  s.parts = {a, b};
  s.validate();
  return s;
}

inline void save_concept(const std::string& path, const ConceptSpec& spec) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_concept: cannot open " + path);
  out << spec.to_json().dump(2) << "\n";
  if (!out) throw std::runtime_error("save_concept: write failed for " + path);
}

inline ConceptSpec load_concept(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_concept: cannot open " + path);
  nlohmann::json j;
  in >> j;
  return ConceptSpec::from_json(j);
}

}  // namespace elrond
