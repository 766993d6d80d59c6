#include "spec/correction.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace spec {

using nn::Tensor;

void CorrectionConfig::validate() const {
  if (ensemble_size < 1 || batch_size < 1 || n_candidates < 1 || max_iterations < 0 ||
      max_epochs < 1 || train_freq < 1)
    throw std::invalid_argument("correction config: counts must be positive");
  if (!(epsilon > 0) || !(c1 > 0) || !(c2 > 0) || !(lr_surrogate > 0) || !(lr_search > 0))
    throw std::invalid_argument("correction config: thresholds and rates must be positive");
}

int target_dim_for(ErrorMode mode) { return mode == ErrorMode::all_elements ? 3 : 1; }

int greedy_budget(int n_e, int ensemble_size, int train_freq) {
  return train_freq * static_cast<int>(2 * n_e / ensemble_size + 1);
}

std::array<double, 3> make_target(const ErrorBreakdown& b, ErrorMode mode) {
  switch (mode) {
    case ErrorMode::reconstruction_only:
      return {clip_target(b.e_r), 0.0, 0.0};
    case ErrorMode::overall:
      return {clip_target(b.e), 0.0, 0.0};
    default:
      return {clip_target(b.e_r), clip_target(b.e_f[0]), clip_target(b.e_f[1])};
  }
}

std::array<double, 2> feasible_error_normalized(const std::array<double, 2>& xn) {
  std::array<double, 2> e;
  for (int i = 0; i < 2; ++i) e[i] = std::max(xn[i] - 1.0, 0.0) + std::max(-xn[i], 0.0);
  return e;
}

namespace {

// subgradient of max(n-1,0)+max(-n,0); zero inside the closed box
double feasible_error_slope(double n) { return n > 1.0 ? 1.0 : (n < 0.0 ? -1.0 : 0.0); }

}  // namespace

// ---------------------------------------------------------------------------
// SurrogateEnsemble
// ---------------------------------------------------------------------------

SurrogateEnsemble::SurrogateEnsemble(int n_nets, int out_dim, uint64_t seed, double lr)
    : out_dim_(out_dim) {
  spec = nn::mlp({2, 512, 1024, 512, out_dim}, {nn::Act::relu}, {nn::Act::sigmoid, 2.0});
  nets.reserve(n_nets);
  opt.reserve(n_nets);
  bootstrap_rng.reserve(n_nets);
  for (int i = 0; i < n_nets; ++i) {
    RngStream init_rng(substream(seed, 10 + i), 0);
    nets.push_back(nn::init_weights(spec, init_rng));
    opt.emplace_back(lr, 0);
    bootstrap_rng.emplace_back(substream(seed, 20 + i), 0);
  }
}

namespace {
thread_local nn::ForwardCache tl_bank_cache;
thread_local nn::Gradients tl_bank_grads;
}  // namespace

void SurrogateEnsemble::net_forward(int net, const Tensor& states, Tensor& out) const {
  nn::forward(spec, nets[net], states, &tl_bank_cache);
  out = tl_bank_cache.output();
}

void SurrogateEnsemble::net_forward_vjp(int net, const Tensor& states, const Tensor& coeff,
                                        Tensor& out, Tensor& grad_acc) const {
  nn::forward(spec, nets[net], states, &tl_bank_cache);
  out = tl_bank_cache.output();
  nn::backward_into(spec, nets[net], tl_bank_cache, coeff, tl_bank_grads);
  for (size_t i = 0; i < grad_acc.numel(); ++i) grad_acc[i] += tl_bank_grads.input_grad[i];
}

// ---------------------------------------------------------------------------
// Error estimation
// ---------------------------------------------------------------------------

void ensemble_errors(const ErrorNetBank& bank, ErrorMode mode, const Tensor& states,
                     std::vector<double>& values, Tensor* grads) {
  const int n = states.dim(0);
  const int od = bank.out_dim();
  const int expected = target_dim_for(mode);
  if (od != expected) throw std::invalid_argument("ensemble_errors: bank out_dim does not match mode");
  const double inv_l = 1.0 / bank.n_nets();

  values.assign(n, 0.0);
  if (grads) {
    *grads = Tensor({n, 2});
  }
  Tensor out;
  Tensor coeff;
  if (grads) {
    coeff = Tensor({n, od});
    coeff.fill(inv_l);
  }
  for (int i = 0; i < bank.n_nets(); ++i) {
    if (grads)
      bank.net_forward_vjp(i, states, coeff, out, *grads);
    else
      bank.net_forward(i, states, out);
    for (int s = 0; s < n; ++s) {
      double sum = 0;
      for (int j = 0; j < od; ++j) sum += out[static_cast<size_t>(s) * od + j];
      values[s] += inv_l * sum;
    }
  }

  if (mode == ErrorMode::reconstruction_only) {
    for (int s = 0; s < n; ++s) {
      const std::array<double, 2> xn{states[static_cast<size_t>(s) * 2],
                                     states[static_cast<size_t>(s) * 2 + 1]};
      const auto ef = feasible_error_normalized(xn);
      values[s] += ef[0] + ef[1];
      if (grads) {
        (*grads)[static_cast<size_t>(s) * 2] += feasible_error_slope(xn[0]);
        (*grads)[static_cast<size_t>(s) * 2 + 1] += feasible_error_slope(xn[1]);
      }
    }
  }
}

double estimate_error(const ErrorNetBank& bank, const std::array<double, 2>& x_norm, ErrorMode mode) {
  Tensor states({1, 2}, {x_norm[0], x_norm[1]});
  std::vector<double> values;
  ensemble_errors(bank, mode, states, values, nullptr);
  return values[0];
}

// ---------------------------------------------------------------------------
// Diversity error
// ---------------------------------------------------------------------------

double candidate_spread(const Tensor& candidates) {
  const int n = candidates.dim(0);
  double sigma_sum = 0;
  for (int d = 0; d < 2; ++d) {
    double mean = 0;
    for (int i = 0; i < n; ++i) mean += candidates[static_cast<size_t>(i) * 2 + d];
    mean /= n;
    double var = 0;
    for (int i = 0; i < n; ++i) {
      const double dv = candidates[static_cast<size_t>(i) * 2 + d] - mean;
      var += dv * dv;
    }
    sigma_sum += std::sqrt(var / n);
  }
  return sigma_sum / 2.0;
}

double diversity_error(const Tensor& candidates, double epsilon, double c1, double c2) {
  if (candidates.dim(0) < 2) throw std::invalid_argument("diversity_error: need at least 2 candidates");
  const double span = 0.288 * c1;
  const double sigma = candidate_spread(candidates);
  return std::max(span - sigma, 0.0) / span * (epsilon / c2);
}

namespace {

// d e_D / d candidates, accumulated into grad
void diversity_grad(const Tensor& candidates, double epsilon, double c1, double c2, Tensor& grad) {
  const int n = candidates.dim(0);
  const double span = 0.288 * c1;
  const double sigma = candidate_spread(candidates);
  if (sigma >= span) return;  // max() inactive
  // d e_D / d sigma = -epsilon / (c2 * span); sigma = (s_0 + s_1) / 2
  const double outer = -epsilon / (c2 * span) * 0.5;
  for (int d = 0; d < 2; ++d) {
    double mean = 0;
    for (int i = 0; i < n; ++i) mean += candidates[static_cast<size_t>(i) * 2 + d];
    mean /= n;
    double var = 0;
    for (int i = 0; i < n; ++i) {
      const double dv = candidates[static_cast<size_t>(i) * 2 + d] - mean;
      var += dv * dv;
    }
    const double sd = std::sqrt(var / n);
    if (sd < 1e-12) continue;  // collapsed dimension: subgradient 0
    const double scale = outer / (n * sd);
    for (int i = 0; i < n; ++i)
      grad[static_cast<size_t>(i) * 2 + d] += scale * (candidates[static_cast<size_t>(i) * 2 + d] - mean);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Warm-up probes
// ---------------------------------------------------------------------------

InitProbe init_buffer(const CorrectionConfig& cfg, PadEvaluator& pad, const Spectrum& measured,
                      RngStream& rng) {
  InitProbe probe;
  probe.buffer.target_dim = target_dim_for(cfg.error_mode);
  probe.best.e = std::numeric_limits<double>::infinity();
  const FeasibleDomain& domain = pad.config().domain;
  for (int i = 0; i < cfg.batch_size; ++i) {
    const std::array<double, 2> xn{rng.uniform01(), rng.uniform01()};
    const GasState state = domain.denormalize(xn);
    const ErrorBreakdown b = pad.evaluate_guarded(state, measured);
    probe.buffer.entries.push_back({xn, make_target(b, cfg.error_mode)});
    if (b.e < probe.best.e) {
      probe.best = b;
      probe.best_state = state;
    }
  }
  return probe;
}

// ---------------------------------------------------------------------------
// Surrogate training
// ---------------------------------------------------------------------------

int train_surrogate(SurrogateEnsemble& ensemble, const ReplayBuffer& buffer, int n_new,
                    const CorrectionConfig& cfg) {
  if (buffer.entries.empty()) throw std::invalid_argument("train_surrogate: empty buffer");
  if (n_new < 0 || static_cast<size_t>(n_new) > buffer.size())
    throw std::invalid_argument("train_surrogate: bad n_new");
  const size_t n_prev = buffer.size() - static_cast<size_t>(n_new);
  const int od = ensemble.out_dim();
  const size_t n_draws = std::min<size_t>(n_prev, cfg.batch_size);
  const size_t batch = n_draws + static_cast<size_t>(n_new);

  int n_early = 0;
  Tensor x({static_cast<int>(batch), 2});
  Tensor y({static_cast<int>(batch), od});
  Tensor dout({static_cast<int>(batch), od});
  nn::ForwardCache cache;
  nn::Gradients grads;
  for (int net = 0; net < ensemble.n_nets(); ++net) {
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
      const auto idx = nn::bootstrap_sample(n_prev > 0 ? n_prev : buffer.size(), n_draws,
                                            ensemble.bootstrap_rng[net]);
      for (size_t s = 0; s < batch; ++s) {
        const BufferEntry& e =
            s < n_draws ? buffer.entries[idx[s]] : buffer.entries[n_prev + (s - n_draws)];
        x[s * 2] = e.x[0];
        x[s * 2 + 1] = e.x[1];
        for (int j = 0; j < od; ++j) y[s * od + j] = e.target[j];
      }

      nn::forward(ensemble.spec, ensemble.nets[net], x, &cache);
      const Tensor& out = cache.output();
      double loss = 0;
      for (size_t i = 0; i < out.numel(); ++i) {
        const double d = out[i] - y[i];
        loss += d * d;
        dout[i] = 2.0 * d / static_cast<double>(batch);
      }
      loss /= static_cast<double>(batch);
      if (!std::isfinite(loss)) throw std::runtime_error("train_surrogate: non-finite loss");
      if (loss < cfg.early_stop_loss) {
        ++n_early;
        break;
      }
      nn::backward_into(ensemble.spec, ensemble.nets[net], cache, dout, grads);
      nn::adam_step(ensemble.opt[net], ensemble.nets[net], grads.wgrad);
    }
  }
  return n_early;
}

// ---------------------------------------------------------------------------
// Greedy ensemble search
// ---------------------------------------------------------------------------

SearchStats greedy_ensemble_search(Tensor& candidates, const ErrorNetBank& bank,
                                   const CorrectionConfig& cfg, int t_g,
                                   nn::AdamState& search_state) {
  SearchStats stats;
  const int n = candidates.dim(0);
  std::vector<double> values;
  Tensor grads;
  for (int step = 0; step < t_g; ++step) {
    ensemble_errors(bank, cfg.error_mode, candidates, values, &grads);
    // population objective: mean over candidates (+ diversity term)
    const double inv_n = 1.0 / n;
    for (auto& g : grads.v) g *= inv_n;
    if (cfg.diversity_enabled && n >= 2)
      diversity_grad(candidates, cfg.epsilon, cfg.c1, cfg.c2, grads);

    bool finite = true;
    for (double g : grads.v)
      if (!std::isfinite(g)) {
        finite = false;
        break;
      }
    if (!finite) {
      ++stats.skipped;
      continue;
    }
    nn::adam_step(search_state, candidates.data(), grads.data(), candidates.numel());
    for (auto& c : candidates.v) c = std::clamp(c, kSafetyBoxMin, kSafetyBoxMax);
    ++stats.steps;
  }
  return stats;
}

int select_candidate(const Tensor& candidates, const ErrorNetBank& bank, ErrorMode mode) {
  if (candidates.dim(0) < 1) throw std::invalid_argument("select_candidate: empty candidate set");
  std::vector<double> values;
  ensemble_errors(bank, mode, candidates, values, nullptr);
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i)
    if (values[i] < values[best]) best = i;  // strict: ties keep the lowest index
  return best;
}

// ---------------------------------------------------------------------------
// Exploration
// ---------------------------------------------------------------------------

std::array<double, 2> explore(const CorrectionConfig& cfg, const ErrorNetBank& bank, RngStream& rng) {
  std::array<double, 2> x{rng.uniform01(), rng.uniform01()};
  if (cfg.sampling_mode == SamplingMode::monte_carlo) return x;

  // disagreement: ascend the population standard deviation of per-net outputs
  const int l = bank.n_nets();
  const int od = bank.out_dim();
  Tensor state({1, 2});
  Tensor out;
  std::vector<double> f(l);
  std::vector<std::array<double, 2>> unit_grads(l);
  Tensor grad({1, 2});
  Tensor coeff({1, od});
  for (int step = 0; step < 20; ++step) {
    state[0] = x[0];
    state[1] = x[1];
    double mean = 0;
    coeff.fill(1.0);
    for (int i = 0; i < l; ++i) {
      grad.fill(0.0);
      bank.net_forward_vjp(i, state, coeff, out, grad);
      double sum = 0;
      for (int j = 0; j < od; ++j) sum += out[j];
      f[i] = sum;
      mean += sum;
      unit_grads[i] = {grad[0], grad[1]};
    }
    mean /= l;
    double var = 0;
    for (int i = 0; i < l; ++i) var += (f[i] - mean) * (f[i] - mean);
    const double sd = std::sqrt(var / l);
    if (sd < 1e-12) break;  // identical nets: nothing to climb

    double g0 = 0, g1 = 0;
    for (int i = 0; i < l; ++i) {
      const double c = (f[i] - mean) / (l * sd);
      g0 += c * unit_grads[i][0];
      g1 += c * unit_grads[i][1];
    }
    x[0] = std::clamp(x[0] + cfg.lr_search * g0, 0.0, 1.0);
    x[1] = std::clamp(x[1] + cfg.lr_search * g1, 0.0, 1.0);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

CorrectionResult run_correction(const Spectrum& measured,
                                const std::optional<std::pair<GasState, ErrorBreakdown>>& first_guess,
                                const PadConfig& pad_config, const CorrectionConfig& cfg) {
  cfg.validate();
  PadEvaluator pad(pad_config);
  const FeasibleDomain& domain = pad_config.domain;

  CorrectionResult result;
  result.best_breakdown.e = std::numeric_limits<double>::infinity();
  auto consider = [&](const GasState& s, const ErrorBreakdown& b) {
    if (b.e < result.best_breakdown.e) {
      result.best_breakdown = b;
      result.best_state = s;
    }
  };
  if (first_guess) consider(first_guess->first, first_guess->second);

  RngStream buffer_rng(substream(cfg.seed, 1), 0);
  RngStream candidate_rng(substream(cfg.seed, 2), 0);
  RngStream explore_rng(substream(cfg.seed, 3), 0);

  InitProbe warmup = init_buffer(cfg, pad, measured, buffer_rng);
  ReplayBuffer buffer = std::move(warmup.buffer);
  consider(warmup.best_state, warmup.best);

  result.initial_best_e = result.best_breakdown.e;
  result.initial_best_state = result.best_state;
  result.initial_best_breakdown = result.best_breakdown;

  Tensor candidates({cfg.n_candidates, 2});
  for (int i = 0; i < cfg.n_candidates; ++i) {
    candidates[static_cast<size_t>(i) * 2] = candidate_rng.uniform01();
    candidates[static_cast<size_t>(i) * 2 + 1] = candidate_rng.uniform01();
  }
  if (first_guess) {
    const auto xn = domain.normalize(first_guess->first);
    const bool in_safety = xn[0] >= kSafetyBoxMin && xn[0] <= kSafetyBoxMax &&
                           xn[1] >= kSafetyBoxMin && xn[1] <= kSafetyBoxMax;
    if (in_safety) {
      candidates[0] = xn[0];
      candidates[1] = xn[1];
    }
  }

  SurrogateEnsemble ensemble(cfg.ensemble_size, target_dim_for(cfg.error_mode), cfg.seed,
                             cfg.lr_surrogate);
  nn::AdamState search_state(cfg.lr_search, candidates.numel());

  int n_new = 0;
  for (int t = 1; t <= cfg.max_iterations; ++t) {
    result.iterations = t;
    IterationTrace it;
    it.t = t;

    it.n_e = train_surrogate(ensemble, buffer, n_new, cfg);
    it.t_g = greedy_budget(it.n_e, cfg.ensemble_size, cfg.train_freq);

    const SearchStats stats = greedy_ensemble_search(candidates, ensemble, cfg, it.t_g, search_state);
    result.skipped_steps += stats.skipped;

    const int ci = select_candidate(candidates, ensemble, cfg.error_mode);
    const std::array<double, 2> cn{candidates[static_cast<size_t>(ci) * 2],
                                   candidates[static_cast<size_t>(ci) * 2 + 1]};
    const GasState cand_state = domain.denormalize(cn);
    const ErrorBreakdown cand_b = pad.evaluate_guarded(cand_state, measured);
    consider(cand_state, cand_b);
    it.e_candidate = cand_b.e;
    it.candidate_state = cand_state;

    if (cand_b.e <= cfg.epsilon) {
      it.e_best = result.best_breakdown.e;
      it.buffer_len = buffer.size();
      result.trace.push_back(it);
      break;
    }

    const std::array<double, 2> xn = explore(cfg, ensemble, explore_rng);
    const GasState explore_state = domain.denormalize(xn);
    const ErrorBreakdown explore_b = pad.evaluate_guarded(explore_state, measured);
    consider(explore_state, explore_b);
    it.e_explore = explore_b.e;
    it.explore_state = explore_state;

    buffer.entries.push_back({cn, make_target(cand_b, cfg.error_mode)});
    buffer.entries.push_back({xn, make_target(explore_b, cfg.error_mode)});
    n_new = 2;

    it.e_best = result.best_breakdown.e;
    it.buffer_len = buffer.size();
    result.trace.push_back(it);

    if (explore_b.e <= cfg.epsilon) break;
  }

  result.success = result.best_breakdown.e <= cfg.epsilon;
  result.pad_queries = pad.query_count();
  return result;
}

std::string trace_to_jsonl(const CorrectionResult& result) {
  std::ostringstream os;
  for (const auto& it : result.trace) {
    nlohmann::ordered_json j;
    j["t"] = it.t;
    j["n_e"] = it.n_e;
    j["T_G"] = it.t_g;
    j["e_candidate"] = it.e_candidate;
    if (it.e_explore) j["e_explore"] = *it.e_explore;
    j["e_best"] = it.e_best;
    j["buffer_len"] = it.buffer_len;
    os << j.dump() << "\n";
  }
  return os.str();
}

}  // namespace spec
