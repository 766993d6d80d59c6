#include "spec/forward_model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace spec {

using json = nlohmann::ordered_json;

void LineDatabase::validate() const {
  if (scale_kappa <= 0) throw std::invalid_argument("line db: scale_kappa must be > 0");
  if (band_min >= band_max) throw std::invalid_argument("line db: empty band");
  for (size_t i = 0; i < lines.size(); ++i) {
    const auto& l = lines[i];
    if (l.strength_ref <= 0 || l.gamma_ref <= 0 || l.lower_state_energy < 0)
      throw std::invalid_argument("line db: invalid line parameters");
    if (l.center < band_min - 5.0 || l.center > band_max + 5.0)
      throw std::invalid_argument("line db: line center outside band");
    if (i > 0 && lines[i - 1].center >= l.center)
      throw std::invalid_argument("line db: lines must be sorted by center, no duplicates");
  }
}

std::string SpectralGrid::id() const {
  std::ostringstream os;
  os << nu_min << ":" << spacing << ":" << n_points();
  return os.str();
}

double line_strength(const SpectralLine& line, double temperature) {
  if (!(temperature > 0)) throw std::domain_error("line_strength: temperature must be > 0");
  const double ratio = kTRef / temperature;
  return line.strength_ref * ratio * std::sqrt(ratio) *
         std::exp(-kC2 * line.lower_state_energy * (1.0 / temperature - 1.0 / kTRef));
}

double lorentzian(double nu, double center, double gamma) {
  if (!(gamma > 0)) throw std::domain_error("lorentzian: gamma must be > 0");
  const double d = nu - center;
  return (gamma / M_PI) / (d * d + gamma * gamma);
}

Spectrum simulate_absorbance(const GasState& state, const SpectralGrid& grid, const LineDatabase& db) {
  if (!state.valid()) throw std::domain_error("simulate_absorbance: invalid gas state");
  const int n = grid.n_points();
  Spectrum spec;
  spec.grid_id = grid.id();
  spec.values.assign(n, 0.0);

  const double t = state.temperature;
  const double width_scale = std::sqrt(kTRef / t);
  for (const auto& line : db.lines) {
    const double s = line_strength(line, t);
    const double gamma = line.gamma_ref * width_scale;
    const double g2 = gamma * gamma;
    const double amp = s * gamma / M_PI;
    for (int i = 0; i < n; ++i) {
      const double d = grid.nu(i) - line.center;
      spec.values[i] += amp / (d * d + g2);
    }
  }
  // mole fraction enters only here; see header note on exact linearity
  const double prefactor = db.scale_kappa * state.mole_fraction * (kTRef / t);
  for (auto& v : spec.values) v *= prefactor;
  return spec;
}

Spectrum simulate_emission(const GasState& state, const SpectralGrid& grid, const LineDatabase& db,
                           double emission_scale) {
  Spectrum a = simulate_absorbance(state, grid, db);
  const double t = state.temperature;
  for (int i = 0; i < static_cast<int>(a.values.size()); ++i) {
    const double nu = grid.nu(i);
    const double planck = emission_scale * nu * nu * nu / (std::exp(kC2 * nu / t) - 1.0);
    a.values[i] = (1.0 - std::exp(-a.values[i])) * planck;
  }
  return a;
}

Spectrum add_multiplicative_noise(const Spectrum& spectrum, double level, uint64_t seed) {
  if (level < 0) throw std::invalid_argument("add_multiplicative_noise: level must be >= 0");
  Spectrum out = spectrum;
  RngStream rng(seed, 0);
  for (auto& v : out.values) v *= 1.0 + level * rng.normal();
  return out;
}

LineDatabase gen_line_db(uint64_t seed, int n_lines, double band_min, double band_max, double kappa) {
  if (n_lines < 1) throw std::invalid_argument("gen_line_db: need at least one line");
  LineDatabase db;
  db.species_label = "toy";
  db.band_min = band_min;
  db.band_max = band_max;
  db.scale_kappa = kappa;
  RngStream rng(seed, 0);
  db.lines.resize(n_lines);
  const double ln_lo = std::log(0.1), ln_hi = std::log(1.0);
  for (auto& l : db.lines) {
    l.center = rng.uniform(band_min, band_max);
    l.strength_ref = std::exp(rng.uniform(ln_lo, ln_hi));
    l.lower_state_energy = rng.uniform(0.0, 3000.0);
    l.gamma_ref = rng.uniform(0.05, 0.2);
  }
  std::sort(db.lines.begin(), db.lines.end(),
            [](const SpectralLine& a, const SpectralLine& b) { return a.center < b.center; });
  db.validate();
  return db;
}

void calibrate_kappa(LineDatabase& db, const SpectralGrid& grid, const GasState& state, double target) {
  db.scale_kappa = 1.0;
  Spectrum s = simulate_absorbance(state, grid, db);
  const double peak = *std::max_element(s.values.begin(), s.values.end());
  if (!(peak > 0)) throw std::runtime_error("calibrate_kappa: zero spectrum");
  db.scale_kappa = target / peak;
}

std::string line_db_to_json(const LineDatabase& db) {
  json j;
  j["species_label"] = db.species_label;
  j["band"] = {db.band_min, db.band_max};
  j["scale_kappa"] = db.scale_kappa;
  json lines = json::array();
  for (const auto& l : db.lines)
    lines.push_back({{"center", l.center},
                     {"strength_ref", l.strength_ref},
                     {"lower_state_energy", l.lower_state_energy},
                     {"gamma_ref", l.gamma_ref}});
  j["lines"] = lines;
  return j.dump(2) + "\n";
}

LineDatabase line_db_from_json(const std::string& text) {
  json j = json::parse(text);
  LineDatabase db;
  db.species_label = j.at("species_label").get<std::string>();
  db.band_min = j.at("band").at(0).get<double>();
  db.band_max = j.at("band").at(1).get<double>();
  db.scale_kappa = j.at("scale_kappa").get<double>();
  for (const auto& lj : j.at("lines")) {
    SpectralLine l;
    l.center = lj.at("center").get<double>();
    l.strength_ref = lj.at("strength_ref").get<double>();
    l.lower_state_energy = lj.at("lower_state_energy").get<double>();
    l.gamma_ref = lj.at("gamma_ref").get<double>();
    db.lines.push_back(l);
  }
  db.validate();
  return db;
}

void save_line_db(const LineDatabase& db, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write line db: " + path);
  f << line_db_to_json(db);
}

LineDatabase load_line_db(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read line db: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return line_db_from_json(ss.str());
}

}  // namespace spec
