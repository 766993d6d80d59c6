#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spec/dataset.hpp"
#include "spec/network.hpp"

// Offline-trained estimator: spectrum -> (temperature, mole fraction). A
// compact 1-D conv stack with adaptive pooling, so any input length >= 16
// maps to the same 256-feature head.

namespace spec {

struct TrainConfig {
  int epochs = 150;
  int batch = 32;
  double lr = 1e-3;
  uint64_t seed = 1;
  int patience = 25;                            // epochs without val improvement
  std::vector<int> conv_channels = {16, 32, 64, 64};
  int threads = 0;

  void validate() const;
};

struct EstimatorNormalization {
  double in_min = 0, in_max = 1;  // global spectrum value range of the training split
  double t_min = 0, t_max = 1;    // target ranges of the training split
  double c_min = 0, c_max = 1;
};

struct EstimatorModel {
  nn::NetworkSpec spec;
  nn::NetworkWeights weights;
  EstimatorNormalization norm;
  std::string grid_id;
  uint64_t dataset_hash = 0;
  uint64_t seed = 0;
};

struct TrainTracePoint {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
};

struct TrainedEstimator {
  EstimatorModel model;
  std::vector<TrainTracePoint> trace;
};

nn::NetworkSpec make_estimator_spec(const std::vector<int>& conv_channels);

// Minimizes MSE on [0,1]-normalized targets; keeps the best-validation
// weights. Deterministic given config.seed, for any thread count.
TrainedEstimator train_estimator(const Dataset& dataset, const TrainConfig& config);

// Pure function of (model, spectrum); output is denormalized to physical
// units and may land outside any feasible domain - that is PAD's concern.
// Throws std::invalid_argument on non-finite input.
GasState estimate(const EstimatorModel& model, const Spectrum& spectrum);

void save_estimator(const EstimatorModel& model, const std::string& path_prefix);
EstimatorModel load_estimator(const std::string& path_prefix);

}  // namespace spec
