#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>

#include "spec/forward_model.hpp"

// Physics-driven anomaly detection: score a candidate state against a
// measured spectrum by reconstructing it through the forward model, plus a
// soft penalty for leaving the feasible box. An estimate is accepted when the
// weighted overall error stays at or below the threshold.

namespace spec {

struct FeasibleDomain {
  double t_min = 0, t_max = 0;
  double c_min = 0, c_max = 0;

  void validate() const;

  // Normalized coordinates: 0 at the lower bound, 1 at the upper bound.
  std::array<double, 2> normalize(const GasState& s) const {
    return {(s.temperature - t_min) / (t_max - t_min), (s.mole_fraction - c_min) / (c_max - c_min)};
  }
  GasState denormalize(const std::array<double, 2>& n) const {
    return {t_min + n[0] * (t_max - t_min), c_min + n[1] * (c_max - c_min)};
  }
};

enum class ForwardKind { absorbance, emission };

struct PadConfig {
  ForwardKind forward = ForwardKind::absorbance;
  LineDatabase db;
  SpectralGrid grid;
  FeasibleDomain domain;
  double w_r = 1.0, w_f1 = 1.0, w_f2 = 1.0;
  double epsilon = 0.05;
  double emission_scale = kDefaultEmissionScale;
};

struct ErrorBreakdown {
  double e_r = 0.0;
  std::array<double, 2> e_f{0.0, 0.0};
  double e = 0.0;
};

// e_R = || F(state) - measured ||_2. Throws std::domain_error when the state
// is outside the forward model's domain.
double reconstruction_error(const GasState& state, const Spectrum& measured, const PadConfig& config);

// Per element: max(n-1, 0) + max(-n, 0) with n the normalized coordinate.
// Zero on the closed box, growing linearly with the normalized excursion.
std::array<double, 2> feasible_error(const GasState& state, const FeasibleDomain& domain);

ErrorBreakdown overall_error(const GasState& state, const Spectrum& measured, const PadConfig& config);

// Acceptance at equality: anomaly iff e > epsilon.
bool is_anomaly(const ErrorBreakdown& breakdown, double epsilon);

// Stateful wrapper counting forward-model queries for one run. The guarded
// path maps states the forward model cannot evaluate (T <= 0, C outside
// [0, 1]) to a large finite reconstruction error instead of throwing, which
// keeps population search probes well-defined everywhere in the safety box.
class PadEvaluator {
 public:
  static constexpr double kInvalidStateError = 1e12;

  explicit PadEvaluator(PadConfig config) : config_(std::move(config)) { config_.domain.validate(); }

  const PadConfig& config() const { return config_; }

  ErrorBreakdown evaluate(const GasState& state, const Spectrum& measured);          // throws on domain error
  ErrorBreakdown evaluate_guarded(const GasState& state, const Spectrum& measured);  // total

  Spectrum reconstruct(const GasState& state) const;

  int64_t query_count() const { return queries_; }

 private:
  PadConfig config_;
  int64_t queries_ = 0;
};

}  // namespace spec
