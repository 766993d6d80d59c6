#include "spec/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace spec {

ElementMetrics compute_metrics(const std::vector<double>& predictions,
                               const std::vector<double>& truths) {
  if (predictions.size() != truths.size() || predictions.empty())
    throw std::invalid_argument("compute_metrics: need equal non-zero lengths");
  const size_t n = predictions.size();

  ElementMetrics m;
  m.count = n;
  double se = 0, ae = 0, re = 0;
  double sp = 0, st = 0;
  for (size_t i = 0; i < n; ++i) {
    const double d = predictions[i] - truths[i];
    se += d * d;
    ae += std::abs(d);
    if (truths[i] == 0) throw std::invalid_argument("compute_metrics: zero truth breaks MRE");
    re += std::abs(d) / std::abs(truths[i]);
    sp += predictions[i];
    st += truths[i];
  }
  m.rmse = std::sqrt(se / n);
  m.mae = ae / n;
  m.mre = re / n;

  const double mp = sp / n, mt = st / n;
  double cov = 0, vp = 0, vt = 0;
  for (size_t i = 0; i < n; ++i) {
    const double dp = predictions[i] - mp, dt = truths[i] - mt;
    cov += dp * dt;
    vp += dp * dp;
    vt += dt * dt;
  }
  if (vp > 0 && vt > 0) m.pearson_r = cov / std::sqrt(vp * vt);
  return m;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd ms;
  ms.count = values.size();
  if (values.empty()) return ms;
  double s = 0;
  for (double v : values) s += v;
  ms.mean = s / static_cast<double>(values.size());
  if (values.size() < 2) return ms;
  double var = 0;
  for (double v : values) var += (v - ms.mean) * (v - ms.mean);
  ms.stddev = std::sqrt(var / static_cast<double>(values.size() - 1));
  return ms;
}

}  // namespace spec
