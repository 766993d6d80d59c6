#include "spec/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "spec/util.hpp"

namespace spec {

using nn::Tensor;

void TrainConfig::validate() const {
  if (epochs < 1 || batch < 1 || patience < 1 || !(lr > 0) || conv_channels.empty())
    throw std::invalid_argument("train config: values must be positive");
}

nn::NetworkSpec make_estimator_spec(const std::vector<int>& conv_channels) {
  nn::NetworkSpec s;
  int in_ch = 1;
  for (int ch : conv_channels) {
    s.layers.push_back(nn::Conv1dSpec{in_ch, ch, 3, {nn::Act::relu}});
    s.layers.push_back(nn::MaxPool1dSpec{2});
    in_ch = ch;
  }
  s.layers.push_back(nn::AdaptiveAvgPoolSpec{4});
  s.layers.push_back(nn::FlattenSpec{});
  const int feat = conv_channels.back() * 4;
  s.layers.push_back(nn::DenseSpec{feat, 256, {nn::Act::relu}});
  s.layers.push_back(nn::DenseSpec{256, 2, {nn::Act::linear}});
  return s;
}

namespace {

struct NormView {
  const EstimatorNormalization& n;
  double in_span() const { return n.in_max > n.in_min ? n.in_max - n.in_min : 1.0; }
  double t_span() const { return n.t_max > n.t_min ? n.t_max - n.t_min : 1.0; }
  double c_span() const { return n.c_max > n.c_min ? n.c_max - n.c_min : 1.0; }
};

Tensor spectrum_to_input(const EstimatorNormalization& norm, const std::vector<double>& values) {
  NormView v{norm};
  Tensor x({1, 1, static_cast<int>(values.size())});
  for (size_t i = 0; i < values.size(); ++i) x[i] = (values[i] - norm.in_min) / v.in_span();
  return x;
}

// per-sample forward/backward; gradients reduced in sample order afterwards
struct SampleResult {
  nn::NetworkWeights grads;
  double loss = 0;
};

}  // namespace

TrainedEstimator train_estimator(const Dataset& dataset, const TrainConfig& config) {
  config.validate();
  const auto train = dataset.split_view(Split::train);
  const auto val = dataset.split_view(Split::val);
  if (train.empty() || val.empty())
    throw std::invalid_argument("train_estimator: dataset needs non-empty train and val splits");

  TrainedEstimator out;
  EstimatorModel& model = out.model;
  model.seed = config.seed;
  model.grid_id = train.front()->spectrum.grid_id;

  // normalization ranges from the training split only
  auto& norm = model.norm;
  norm.in_min = std::numeric_limits<double>::infinity();
  norm.in_max = -norm.in_min;
  norm.t_min = norm.c_min = std::numeric_limits<double>::infinity();
  norm.t_max = norm.c_max = -norm.t_min;
  for (const auto* r : train) {
    for (double y : r->spectrum.values) {
      norm.in_min = std::min(norm.in_min, y);
      norm.in_max = std::max(norm.in_max, y);
    }
    norm.t_min = std::min(norm.t_min, r->state.temperature);
    norm.t_max = std::max(norm.t_max, r->state.temperature);
    norm.c_min = std::min(norm.c_min, r->state.mole_fraction);
    norm.c_max = std::max(norm.c_max, r->state.mole_fraction);
  }
  NormView nv{norm};

  model.spec = make_estimator_spec(config.conv_channels);
  RngStream init_rng(substream(config.seed, 1), 0);
  model.weights = nn::init_weights(model.spec, init_rng);

  const int threads = resolve_threads(config.threads);
  const int n_train = static_cast<int>(train.size());

  auto target_of = [&](const DatasetRecord* r) {
    return std::array<double, 2>{(r->state.temperature - norm.t_min) / nv.t_span(),
                                 (r->state.mole_fraction - norm.c_min) / nv.c_span()};
  };

  auto eval_sample = [&](const nn::NetworkWeights& w, const DatasetRecord* r, bool want_grads,
                         SampleResult& res) {
    const Tensor x = spectrum_to_input(norm, r->spectrum.values);
    const auto target = target_of(r);
    if (!want_grads) {
      const Tensor y = nn::forward(model.spec, w, x);
      const double d0 = y[0] - target[0], d1 = y[1] - target[1];
      res.loss = d0 * d0 + d1 * d1;
      return;
    }
    nn::ForwardCache cache;
    const Tensor y = nn::forward(model.spec, w, x, &cache);
    const double d0 = y[0] - target[0], d1 = y[1] - target[1];
    res.loss = d0 * d0 + d1 * d1;
    Tensor dout({1, 2}, {2.0 * d0, 2.0 * d1});
    res.grads = nn::backward(model.spec, w, cache, dout).wgrad;
  };

  nn::AdamState adam(config.lr, 0);
  RngStream shuffle_rng(substream(config.seed, 2), 0);
  std::vector<int> order(n_train);
  for (int i = 0; i < n_train; ++i) order[i] = i;

  double best_val = std::numeric_limits<double>::infinity();
  nn::NetworkWeights best_weights = model.weights;
  int since_best = 0;

  std::vector<SampleResult> results;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (int i = n_train - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.index(static_cast<uint64_t>(i) + 1));
      std::swap(order[i], order[j]);
    }

    double train_loss = 0;
    for (int start = 0; start < n_train; start += config.batch) {
      const int bsz = std::min(config.batch, n_train - start);
      results.assign(bsz, {});
      parallel_for(bsz, threads, [&](size_t s) {
        eval_sample(model.weights, train[order[start + static_cast<int>(s)]], true, results[s]);
      });
      // reduce in sample order so thread count cannot change the result
      nn::NetworkWeights batch_grads = std::move(results[0].grads);
      train_loss += results[0].loss;
      for (int s = 1; s < bsz; ++s) {
        train_loss += results[s].loss;
        for (size_t li = 0; li < batch_grads.layers.size(); ++li) {
          auto& acc = batch_grads.layers[li];
          const auto& g = results[s].grads.layers[li];
          for (size_t k = 0; k < acc.w.numel(); ++k) acc.w[k] += g.w[k];
          for (size_t k = 0; k < acc.b.numel(); ++k) acc.b[k] += g.b[k];
        }
      }
      const double inv = 1.0 / bsz;
      for (auto& lw : batch_grads.layers) {
        for (auto& g : lw.w.v) g *= inv;
        for (auto& g : lw.b.v) g *= inv;
      }
      nn::adam_step(adam, model.weights, batch_grads);
    }
    train_loss /= n_train;

    results.assign(val.size(), {});
    parallel_for(val.size(), threads,
                 [&](size_t s) { eval_sample(model.weights, val[s], false, results[s]); });
    double val_loss = 0;
    for (const auto& r : results) val_loss += r.loss;
    val_loss /= static_cast<double>(val.size());

    out.trace.push_back({epoch, train_loss, val_loss});
    if (val_loss < best_val) {
      best_val = val_loss;
      best_weights = model.weights;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  model.weights = std::move(best_weights);
  return out;
}

GasState estimate(const EstimatorModel& model, const Spectrum& spectrum) {
  for (double v : spectrum.values)
    if (!std::isfinite(v)) throw std::invalid_argument("estimate: non-finite spectrum");
  const Tensor x = spectrum_to_input(model.norm, spectrum.values);
  const Tensor y = nn::forward(model.spec, model.weights, x);
  NormView nv{model.norm};
  GasState s;
  s.temperature = model.norm.t_min + y[0] * nv.t_span();
  s.mole_fraction = model.norm.c_min + y[1] * nv.c_span();
  return s;
}

void save_estimator(const EstimatorModel& model, const std::string& path_prefix) {
  nlohmann::ordered_json extra;
  extra["grid_id"] = model.grid_id;
  extra["dataset_hash"] = model.dataset_hash;
  extra["norm"] = {{"in_min", model.norm.in_min}, {"in_max", model.norm.in_max},
                   {"t_min", model.norm.t_min},   {"t_max", model.norm.t_max},
                   {"c_min", model.norm.c_min},   {"c_max", model.norm.c_max}};
  nn::save_network(path_prefix, model.spec, model.weights, model.seed, extra.dump());
}

EstimatorModel load_estimator(const std::string& path_prefix) {
  nn::LoadedNetwork net = nn::load_network(path_prefix);
  EstimatorModel model;
  model.spec = std::move(net.spec);
  model.weights = std::move(net.weights);
  model.seed = net.seed;
  if (net.extra_json.empty()) throw std::runtime_error("estimator checkpoint: missing metadata");
  const auto extra = nlohmann::json::parse(net.extra_json);
  model.grid_id = extra.at("grid_id").get<std::string>();
  model.dataset_hash = extra.at("dataset_hash").get<uint64_t>();
  const auto& n = extra.at("norm");
  model.norm = {n.at("in_min"), n.at("in_max"), n.at("t_min"),
                n.at("t_max"), n.at("c_min"),  n.at("c_max")};
  return model;
}

}  // namespace spec
