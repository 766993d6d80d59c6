#include "spec/pad.hpp"

#include <cmath>
#include <stdexcept>

namespace spec {

void FeasibleDomain::validate() const {
  if (!(t_min < t_max) || !(c_min < c_max))
    throw std::invalid_argument("feasible domain: min must be < max componentwise");
}

namespace {

Spectrum run_forward(const GasState& state, const PadConfig& config) {
  if (config.forward == ForwardKind::absorbance)
    return simulate_absorbance(state, config.grid, config.db);
  return simulate_emission(state, config.grid, config.db, config.emission_scale);
}

double l2_distance(const Spectrum& a, const Spectrum& b) {
  if (a.size() != b.size()) throw std::invalid_argument("pad: spectrum/grid size mismatch");
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

ErrorBreakdown combine(double e_r, const std::array<double, 2>& e_f, const PadConfig& config) {
  ErrorBreakdown b;
  b.e_r = e_r;
  b.e_f = e_f;
  b.e = config.w_r * e_r + config.w_f1 * e_f[0] + config.w_f2 * e_f[1];
  return b;
}

}  // namespace

double reconstruction_error(const GasState& state, const Spectrum& measured, const PadConfig& config) {
  return l2_distance(run_forward(state, config), measured);
}

std::array<double, 2> feasible_error(const GasState& state, const FeasibleDomain& domain) {
  domain.validate();
  const auto n = domain.normalize(state);
  std::array<double, 2> e;
  for (int i = 0; i < 2; ++i) e[i] = std::max(n[i] - 1.0, 0.0) + std::max(-n[i], 0.0);
  return e;
}

ErrorBreakdown overall_error(const GasState& state, const Spectrum& measured, const PadConfig& config) {
  return combine(reconstruction_error(state, measured, config),
                 feasible_error(state, config.domain), config);
}

bool is_anomaly(const ErrorBreakdown& breakdown, double epsilon) {
  if (!(epsilon > 0)) throw std::invalid_argument("is_anomaly: epsilon must be > 0");
  return breakdown.e > epsilon;
}

ErrorBreakdown PadEvaluator::evaluate(const GasState& state, const Spectrum& measured) {
  ++queries_;
  return overall_error(state, measured, config_);
}

ErrorBreakdown PadEvaluator::evaluate_guarded(const GasState& state, const Spectrum& measured) {
  ++queries_;
  const bool simulable = state.temperature > 0 && state.mole_fraction >= 0 &&
                         state.mole_fraction <= 1 && std::isfinite(state.temperature) &&
                         std::isfinite(state.mole_fraction);
  if (!simulable)
    return combine(kInvalidStateError, feasible_error(state, config_.domain), config_);
  return overall_error(state, measured, config_);
}

Spectrum PadEvaluator::reconstruct(const GasState& state) const { return run_forward(state, config_); }

}  // namespace spec
