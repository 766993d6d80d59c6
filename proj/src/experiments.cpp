#include "spec/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "spec/util.hpp"

namespace fs = std::filesystem;

namespace spec {

namespace {

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

ForwardKind forward_from(const std::string& s) {
  if (s == "absorbance") return ForwardKind::absorbance;
  if (s == "emission") return ForwardKind::emission;
  throw std::invalid_argument("config: unknown forward model '" + s + "'");
}

ErrorMode error_mode_from(const std::string& s) {
  if (s == "reconstruction_only") return ErrorMode::reconstruction_only;
  if (s == "overall") return ErrorMode::overall;
  if (s == "all_elements") return ErrorMode::all_elements;
  throw std::invalid_argument("config: unknown error_mode '" + s + "'");
}

SamplingMode sampling_mode_from(const std::string& s) {
  if (s == "monte_carlo") return SamplingMode::monte_carlo;
  if (s == "disagreement") return SamplingMode::disagreement;
  throw std::invalid_argument("config: unknown sampling_mode '" + s + "'");
}

SpectralGrid grid_from(const ojson& j) {
  SpectralGrid g;
  g.nu_min = j.at("nu_min").get<double>();
  g.nu_max = j.at("nu_max").get<double>();
  g.spacing = j.at("spacing").get<double>();
  if (g.n_points() < 2) throw std::invalid_argument("config: grid has fewer than 2 points");
  return g;
}

FeasibleDomain domain_from(const ojson& j) {
  FeasibleDomain d;
  d.t_min = j.at("t").at(0).get<double>();
  d.t_max = j.at("t").at(1).get<double>();
  d.c_min = j.at("c").at(0).get<double>();
  d.c_max = j.at("c").at(1).get<double>();
  d.validate();
  return d;
}

LineDbGenSpec gen_spec_from(const ojson& j) {
  LineDbGenSpec g;
  g.seed = j.value("seed", 42ull);
  g.n_lines = j.value("n_lines", 25);
  if (j.contains("band")) {
    g.band_min = j.at("band").at(0).get<double>();
    g.band_max = j.at("band").at(1).get<double>();
  }
  if (j.contains("calibration")) {
    const auto& c = j.at("calibration");
    g.calib_state.temperature = c.value("t", 2000.0);
    g.calib_state.mole_fraction = c.value("c", 0.07);
    g.calib_target = c.value("target", 1.0);
  }
  g.out_path = j.value("out", std::string());
  return g;
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config file not found: " + path);
  ojson j;
  try {
    j = ojson::parse(f);
  } catch (const std::exception& e) {
    throw std::invalid_argument("config parse error in " + path + ": " + e.what());
  }

  ExperimentConfig c;
  c.kind = j.value("kind", std::string());
  c.seed = j.value("seed", 0ull);
  c.out_dir = j.value("out_dir", std::string("results"));
  c.n_cases = j.value("n_cases", 100);
  c.threads = j.value("threads", 0);
  c.write_traces = j.value("write_traces", true);

  if (j.contains("grid")) c.grid = grid_from(j.at("grid"));
  c.line_db_path = j.value("line_db", std::string());

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset_path = d.value("path", std::string());
    c.dataset_k = d.value("k", 2000);
    if (d.contains("t_range")) {
      c.dataset_ranges.t_min = d.at("t_range").at(0).get<double>();
      c.dataset_ranges.t_max = d.at("t_range").at(1).get<double>();
    }
    if (d.contains("c_range")) {
      c.dataset_ranges.c_min = d.at("c_range").at(0).get<double>();
      c.dataset_ranges.c_max = d.at("c_range").at(1).get<double>();
    }
    c.dataset_seed = d.value("seed", 7ull);
  }

  if (j.contains("estimator")) {
    const auto& e = j.at("estimator");
    c.checkpoint = e.value("checkpoint", std::string());
    c.train.epochs = e.value("epochs", c.train.epochs);
    c.train.batch = e.value("batch", c.train.batch);
    c.train.lr = e.value("lr", c.train.lr);
    c.train.seed = e.value("seed", c.train.seed);
    c.train.patience = e.value("patience", c.train.patience);
    if (e.contains("conv_channels")) c.train.conv_channels = e.at("conv_channels").get<std::vector<int>>();
  }

  if (j.contains("pad")) {
    const auto& p = j.at("pad");
    c.pad.forward = forward_from(p.value("forward", std::string("absorbance")));
    if (p.contains("line_db")) c.line_db_path = p.at("line_db").get<std::string>();
    if (p.contains("domain")) c.pad.domain = domain_from(p.at("domain"));
    if (p.contains("weights")) {
      c.pad.w_r = p.at("weights").at(0).get<double>();
      c.pad.w_f1 = p.at("weights").at(1).get<double>();
      c.pad.w_f2 = p.at("weights").at(2).get<double>();
    }
    c.pad.epsilon = p.value("epsilon", 0.05);
    c.pad.emission_scale = p.value("emission_scale", kDefaultEmissionScale);
  }
  c.pad.grid = c.grid;

  if (j.contains("correction")) {
    const auto& k = j.at("correction");
    auto& cc = c.correction;
    cc.ensemble_size = k.value("ensemble_size", cc.ensemble_size);
    cc.batch_size = k.value("batch_size", cc.batch_size);
    cc.n_candidates = k.value("n_candidates", cc.n_candidates);
    cc.max_iterations = k.value("max_iterations", cc.max_iterations);
    cc.max_epochs = k.value("max_epochs", cc.max_epochs);
    cc.early_stop_loss = k.value("early_stop_loss", cc.early_stop_loss);
    cc.train_freq = k.value("train_freq", cc.train_freq);
    cc.lr_surrogate = k.value("lr_surrogate", cc.lr_surrogate);
    cc.lr_search = k.value("lr_search", cc.lr_search);
    cc.c1 = k.value("c1", cc.c1);
    cc.c2 = k.value("c2", cc.c2);
    if (k.contains("error_mode")) cc.error_mode = error_mode_from(k.at("error_mode").get<std::string>());
    if (k.contains("sampling_mode"))
      cc.sampling_mode = sampling_mode_from(k.at("sampling_mode").get<std::string>());
    cc.diversity_enabled = k.value("diversity_enabled", cc.diversity_enabled);
  }

  if (j.contains("ood")) {
    const auto& o = j.at("ood");
    if (o.contains("t_range")) {
      c.ood_ranges.t_min = o.at("t_range").at(0).get<double>();
      c.ood_ranges.t_max = o.at("t_range").at(1).get<double>();
    }
    if (o.contains("c_range")) {
      c.ood_ranges.c_min = o.at("c_range").at(0).get<double>();
      c.ood_ranges.c_max = o.at("c_range").at(1).get<double>();
    }
    if (o.contains("epsilons")) c.epsilons = o.at("epsilons").get<std::vector<double>>();
  }

  if (j.contains("noise")) {
    c.noise_level = j.at("noise").value("level", 0.1);
    if (j.at("noise").contains("checkpoints"))
      c.noise_checkpoints = j.at("noise").at("checkpoints").get<std::vector<int>>();
  }

  if (j.contains("reconfig")) {
    for (const auto& sj : j.at("reconfig").at("scenarios")) {
      ReconfigScenario s;
      s.name = sj.at("name").get<std::string>();
      s.forward = forward_from(sj.value("forward", std::string("absorbance")));
      if (sj.contains("line_db")) s.line_db_path = sj.at("line_db").get<std::string>();
      if (sj.contains("line_db_gen")) s.gen = gen_spec_from(sj.at("line_db_gen"));
      s.grid = sj.contains("grid") ? grid_from(sj.at("grid")) : c.grid;
      s.domain = domain_from(sj.at("domain"));
      s.epsilon = sj.value("epsilon", 0.1);
      s.n_cases = sj.value("n_cases", 10);
      s.emission_scale = sj.value("emission_scale", kDefaultEmissionScale);
      c.scenarios.push_back(std::move(s));
    }
  }

  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    c.ablation_epsilon = a.value("epsilon", 0.1);
    c.ablation_cases = a.value("n_cases", 50);
    for (const auto& aj : a.at("arms")) {
      AblationArm arm;
      arm.name = aj.at("name").get<std::string>();
      arm.error_mode = aj.contains("error_mode")
                           ? error_mode_from(aj.at("error_mode").get<std::string>())
                           : c.correction.error_mode;
      arm.sampling_mode = aj.contains("sampling_mode")
                              ? sampling_mode_from(aj.at("sampling_mode").get<std::string>())
                              : c.correction.sampling_mode;
      arm.diversity_enabled = aj.value("diversity_enabled", c.correction.diversity_enabled);
      c.arms.push_back(std::move(arm));
    }
  }

  if (j.contains("gen_lines")) c.gen_lines = gen_spec_from(j.at("gen_lines"));
  return c;
}

// ---------------------------------------------------------------------------
// Shared case machinery
// ---------------------------------------------------------------------------

namespace {

// per-case seed purposes; fixed so re-runs and thread counts cannot matter
constexpr uint64_t kPurposeCaseSelection = 101;
constexpr uint64_t kPurposeCorrection = 1000;
constexpr uint64_t kPurposeOodTruth = 2000;
constexpr uint64_t kPurposeOodDomain = 3000;
constexpr uint64_t kPurposeNoise = 4000;
constexpr uint64_t kPurposeReconfig = 5000;

std::vector<int> pick_without_replacement(size_t pool, int n, RngStream& rng) {
  if (static_cast<size_t>(n) > pool)
    throw std::invalid_argument("cannot pick " + std::to_string(n) + " cases from a pool of " +
                                std::to_string(pool));
  std::vector<int> idx(pool);
  for (size_t i = 0; i < pool; ++i) idx[i] = static_cast<int>(i);
  for (int i = 0; i < n; ++i) {
    const size_t j = i + rng.index(pool - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  return idx;
}

LineDatabase build_db(const LineDbGenSpec& g, const SpectralGrid& grid) {
  LineDatabase db = gen_line_db(g.seed, g.n_lines, g.band_min, g.band_max, 1.0);
  calibrate_kappa(db, grid, g.calib_state, g.calib_target);
  return db;
}

LineDatabase load_db_for(const ExperimentConfig& cfg) {
  if (cfg.line_db_path.empty()) throw std::invalid_argument("config: line_db path missing");
  return load_line_db(cfg.line_db_path);
}

Dataset load_dataset_for(const ExperimentConfig& cfg) {
  if (cfg.dataset_path.empty()) throw std::invalid_argument("config: dataset path missing");
  return load_dataset_csv(cfg.dataset_path);
}

EstimatorModel load_estimator_for(const ExperimentConfig& cfg) {
  if (cfg.checkpoint.empty()) throw std::invalid_argument("config: estimator checkpoint missing");
  return load_estimator(cfg.checkpoint);
}

// opt-in progress lines on stderr (SPEC_PROGRESS=1); never touches result files
void progress(const char* what, size_t i, int iterations) {
  if (std::getenv("SPEC_PROGRESS"))
    std::fprintf(stderr, "[progress] %s case %zu done, %d iterations\n", what, i, iterations);
}

void write_output(const std::string& dir, const std::string& name, const std::string& content) {
  fs::create_directories(dir);
  write_text_file((fs::path(dir) / name).string(), content);
}

void write_trace(const ExperimentConfig& cfg, const std::string& prefix, int case_id,
                 const CorrectionResult& run) {
  if (!cfg.write_traces) return;
  const fs::path dir = fs::path(cfg.out_dir) / "traces";
  fs::create_directories(dir);
  char name[64];
  std::snprintf(name, sizeof(name), "%scase_%04d.jsonl", prefix.c_str(), case_id);
  write_text_file((dir / name).string(), trace_to_jsonl(run));
}

ojson metrics_json(const ElementMetrics& m) {
  ojson j;
  j["rmse"] = m.rmse;
  j["mae"] = m.mae;
  j["mre"] = m.mre;
  if (m.pearson_r)
    j["pearson_r"] = *m.pearson_r;
  else
    j["pearson_r"] = nullptr;
  j["count"] = m.count;
  return j;
}

ojson state_metrics_json(const std::vector<CaseRecord>& cases, bool use_estimate) {
  std::vector<double> pt, tt, pc, tc;
  for (const auto& c : cases) {
    const GasState* s = use_estimate ? (c.estimate ? &*c.estimate : nullptr) : &c.final_state;
    if (!s) continue;
    pt.push_back(s->temperature);
    tt.push_back(c.truth.temperature);
    pc.push_back(s->mole_fraction);
    tc.push_back(c.truth.mole_fraction);
  }
  ojson j;
  if (pt.empty()) return j;
  j["temperature"] = metrics_json(compute_metrics(pt, tt));
  j["mole_fraction"] = metrics_json(compute_metrics(pc, tc));
  return j;
}

ojson iteration_stats_json(const std::vector<CaseRecord>& cases) {
  std::vector<double> iters;
  for (const auto& c : cases)
    if (c.corrected && c.success) iters.push_back(c.iterations);
  const MeanStd ms = mean_std(iters);
  ojson j;
  j["mean"] = ms.mean;
  j["std"] = ms.stddev;
  j["count"] = ms.count;
  return j;
}

int count_failures(const std::vector<CaseRecord>& cases) {
  int n = 0;
  for (const auto& c : cases)
    if (!c.success) ++n;
  return n;
}

int count_audit_failures(const std::vector<CaseRecord>& cases) {
  int n = 0;
  for (const auto& c : cases)
    if (!c.audit_ok) ++n;
  return n;
}

// Derives the outcome a run would have reported at threshold eps from the
// trace of the (shared) correction trajectory. Crossing at the warm-up stage
// counts as iteration 0.
struct DerivedOutcome {
  bool success = false;
  int iterations = 0;
  int64_t queries = 0;  // correction-run queries only
  GasState final_state;
};

DerivedOutcome derive_at_threshold(const CorrectionResult& run, double eps, int batch_size) {
  DerivedOutcome d;
  if (run.initial_best_e <= eps) {
    d.success = true;
    d.iterations = 0;
    d.queries = batch_size;
    d.final_state = run.initial_best_state;
    return d;
  }
  for (const auto& it : run.trace) {
    if (it.e_candidate <= eps) {
      d.success = true;
      d.iterations = it.t;
      d.queries = batch_size + 2 * (it.t - 1) + 1;
      d.final_state = it.candidate_state;
      return d;
    }
    if (it.e_explore && *it.e_explore <= eps) {
      d.success = true;
      d.iterations = it.t;
      d.queries = batch_size + 2 * it.t;
      d.final_state = *it.explore_state;
      return d;
    }
  }
  d.success = false;
  d.iterations = run.iterations;
  d.queries = run.pad_queries;
  d.final_state = run.best_state;
  return d;
}

}  // namespace

std::string cases_to_csv(const std::vector<CaseRecord>& cases) {
  std::ostringstream os;
  os << "case_id,T_true,C_true,T_est,C_est,e_est,corrected,T_final,C_final,e_final,iterations,pad_queries\n";
  for (const auto& c : cases) {
    os << c.case_id << "," << format_g9(c.truth.temperature) << ","
       << format_g9(c.truth.mole_fraction) << ",";
    if (c.estimate)
      os << format_g9(c.estimate->temperature) << "," << format_g9(c.estimate->mole_fraction) << ","
         << format_g9(*c.e_estimate);
    else
      os << ",,";
    os << "," << (c.corrected ? 1 : 0) << "," << format_g9(c.final_state.temperature) << ","
       << format_g9(c.final_state.mole_fraction) << "," << format_g9(c.e_final) << ","
       << c.iterations << "," << c.pad_queries << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// ID test
// ---------------------------------------------------------------------------

ojson run_id_test(const ExperimentConfig& cfg) {
  const LineDatabase db = load_db_for(cfg);
  const Dataset dataset = load_dataset_for(cfg);
  const EstimatorModel model = load_estimator_for(cfg);

  PadConfig pad_cfg = cfg.pad;
  pad_cfg.db = db;
  pad_cfg.grid = cfg.grid;

  const auto test = dataset.split_view(Split::test);
  RngStream pick_rng(substream(cfg.seed, kPurposeCaseSelection), 0);
  const auto picks = pick_without_replacement(test.size(), cfg.n_cases, pick_rng);

  std::vector<CaseRecord> cases(cfg.n_cases);
  std::vector<std::optional<CorrectionResult>> runs(cfg.n_cases);

  parallel_for(cfg.n_cases, cfg.threads, [&](size_t i) {
    const DatasetRecord& rec = *test[picks[i]];
    CaseRecord& c = cases[i];
    c.case_id = static_cast<int>(i);
    c.truth = rec.state;

    PadEvaluator pad(pad_cfg);
    const GasState est = estimate(model, rec.spectrum);
    const ErrorBreakdown first = pad.evaluate_guarded(est, rec.spectrum);
    c.estimate = est;
    c.e_estimate = first.e;

    if (!is_anomaly(first, pad_cfg.epsilon)) {
      c.corrected = false;
      c.final_state = est;
      c.iterations = 0;
      c.pad_queries = pad.query_count();
    } else {
      c.corrected = true;
      CorrectionConfig run_cfg = cfg.correction;
      run_cfg.seed = substream(cfg.seed, kPurposeCorrection + i);
      run_cfg.epsilon = pad_cfg.epsilon;
      CorrectionResult run = run_correction(rec.spectrum, std::make_pair(est, first), pad_cfg, run_cfg);
      c.final_state = run.best_state;
      c.iterations = run.iterations;
      c.pad_queries = pad.query_count() + run.pad_queries;
      runs[i] = std::move(run);
    }

    PadEvaluator audit(pad_cfg);
    const ErrorBreakdown final_b = audit.evaluate_guarded(c.final_state, rec.spectrum);
    c.e_final = final_b.e;
    c.success = final_b.e <= pad_cfg.epsilon;
    // independent re-verification plus the injection guarantee: the result
    // can never score worse than the first guess it started from
    c.audit_ok = (!c.success || final_b.e <= pad_cfg.epsilon) &&
                 c.e_final <= *c.e_estimate + 1e-12;
  });

  for (int i = 0; i < cfg.n_cases; ++i)
    if (runs[i]) write_trace(cfg, "", i, *runs[i]);

  int accepted = 0;
  for (const auto& c : cases)
    if (!c.corrected) ++accepted;

  ojson summary;
  summary["kind"] = "id_test";
  summary["seed"] = cfg.seed;
  summary["n_cases"] = cfg.n_cases;
  summary["epsilon"] = pad_cfg.epsilon;
  summary["accepted_without_correction"] = accepted;
  summary["failure_times"] = count_failures(cases);
  summary["iterations"] = iteration_stats_json(cases);
  summary["audit_failures"] = count_audit_failures(cases);
  summary["estimator_calls"] = cfg.n_cases;
  summary["estimation_metrics"] = state_metrics_json(cases, true);
  summary["final_metrics"] = state_metrics_json(cases, false);

  write_output(cfg.out_dir, "cases.csv", cases_to_csv(cases));
  write_output(cfg.out_dir, "summary.json", summary.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// OoD test (also the ablation workhorse)
// ---------------------------------------------------------------------------

namespace {

struct OodCase {
  GasState truth;
  FeasibleDomain domain;
};

OodCase make_ood_case(const ExperimentConfig& cfg, size_t i) {
  OodCase oc;
  RngStream truth_rng(substream(cfg.seed, kPurposeOodTruth + i), 0);
  oc.truth.temperature = truth_rng.uniform(cfg.ood_ranges.t_min, cfg.ood_ranges.t_max);
  oc.truth.mole_fraction = truth_rng.uniform(cfg.ood_ranges.c_min, cfg.ood_ranges.c_max);

  // Per-case feasible box around the truth: each bound drawn uniformly at
  // 10-40% of the full OoD span away, then truncated to the OoD range.
  RngStream dom_rng(substream(cfg.seed, kPurposeOodDomain + i), 0);
  const double t_span = cfg.ood_ranges.t_max - cfg.ood_ranges.t_min;
  const double c_span = cfg.ood_ranges.c_max - cfg.ood_ranges.c_min;
  oc.domain.t_min = std::max(cfg.ood_ranges.t_min,
                             dom_rng.uniform(oc.truth.temperature - 0.4 * t_span,
                                             oc.truth.temperature - 0.1 * t_span));
  oc.domain.t_max = std::min(cfg.ood_ranges.t_max,
                             dom_rng.uniform(oc.truth.temperature + 0.1 * t_span,
                                             oc.truth.temperature + 0.4 * t_span));
  oc.domain.c_min = std::max(cfg.ood_ranges.c_min,
                             dom_rng.uniform(oc.truth.mole_fraction - 0.4 * c_span,
                                             oc.truth.mole_fraction - 0.1 * c_span));
  oc.domain.c_max = std::min(cfg.ood_ranges.c_max,
                             dom_rng.uniform(oc.truth.mole_fraction + 0.1 * c_span,
                                             oc.truth.mole_fraction + 0.4 * c_span));
  return oc;
}

struct OodArmOutput {
  std::vector<std::vector<CaseRecord>> per_eps;  // indexed like the epsilon list
  std::vector<CorrectionResult> runs;
};

// One correction run per case at the tightest threshold; outcomes for looser
// thresholds are read off the shared trajectory, so the acceptance sets nest
// by construction.
OodArmOutput run_ood_arm(const ExperimentConfig& cfg, const EstimatorModel& model,
                         const LineDatabase& db, const CorrectionConfig& base,
                         const std::vector<double>& epsilons, int n_cases) {
  if (epsilons.empty()) throw std::invalid_argument("ood: empty epsilon list");
  const double eps_min = *std::min_element(epsilons.begin(), epsilons.end());

  OodArmOutput out;
  out.per_eps.assign(epsilons.size(), std::vector<CaseRecord>(n_cases));
  out.runs.resize(n_cases);

  parallel_for(n_cases, cfg.threads, [&](size_t i) {
    const OodCase oc = make_ood_case(cfg, i);
    PadConfig pad_cfg = cfg.pad;
    pad_cfg.db = db;
    pad_cfg.grid = cfg.grid;
    pad_cfg.domain = oc.domain;

    const Spectrum measured = simulate_absorbance(oc.truth, cfg.grid, db);

    PadEvaluator pad(pad_cfg);
    const GasState est = estimate(model, measured);
    const ErrorBreakdown first = pad.evaluate_guarded(est, measured);

    CorrectionConfig run_cfg = base;
    run_cfg.seed = substream(cfg.seed, kPurposeCorrection + i);
    run_cfg.epsilon = eps_min;
    CorrectionResult run = run_correction(measured, std::make_pair(est, first), pad_cfg, run_cfg);

    for (size_t e = 0; e < epsilons.size(); ++e) {
      const double eps = epsilons[e];
      CaseRecord& c = out.per_eps[e][i];
      c.case_id = static_cast<int>(i);
      c.truth = oc.truth;
      c.estimate = est;
      c.e_estimate = first.e;
      if (first.e <= eps) {
        c.corrected = false;
        c.final_state = est;
        c.iterations = 0;
        c.pad_queries = 1;
      } else {
        c.corrected = true;
        const DerivedOutcome d = derive_at_threshold(run, eps, base.batch_size);
        c.final_state = d.final_state;
        c.iterations = d.iterations;
        c.pad_queries = 1 + d.queries;
      }
      PadEvaluator audit(pad_cfg);
      const ErrorBreakdown fb = audit.evaluate_guarded(c.final_state, measured);
      c.e_final = fb.e;
      c.success = fb.e <= eps;
      c.audit_ok = (!c.success || fb.e <= eps) && c.e_final <= *c.e_estimate + 1e-12;
    }
    out.runs[i] = std::move(run);
    progress("ood", i, out.runs[i].iterations);
  });
  return out;
}

ojson arm_summary(const std::vector<CaseRecord>& cases) {
  ojson j;
  j["failure_times"] = count_failures(cases);
  j["iterations"] = iteration_stats_json(cases);
  j["audit_failures"] = count_audit_failures(cases);
  j["final_metrics"] = state_metrics_json(cases, false);
  return j;
}

}  // namespace

ojson run_ood_test(const ExperimentConfig& cfg) {
  const LineDatabase db = load_db_for(cfg);
  const EstimatorModel model = load_estimator_for(cfg);

  std::vector<double> eps = cfg.epsilons;
  std::sort(eps.begin(), eps.end());

  const OodArmOutput out = run_ood_arm(cfg, model, db, cfg.correction, eps, cfg.n_cases);
  for (int i = 0; i < cfg.n_cases; ++i) write_trace(cfg, "", i, out.runs[i]);

  ojson summary;
  summary["kind"] = "ood_test";
  summary["seed"] = cfg.seed;
  summary["n_cases"] = cfg.n_cases;
  summary["estimation_metrics"] = state_metrics_json(out.per_eps[0], true);

  ojson per_eps;
  std::vector<int> failures;
  for (size_t e = 0; e < eps.size(); ++e) {
    const auto& cases = out.per_eps[e];
    per_eps[format_g9(eps[e])] = arm_summary(cases);
    failures.push_back(count_failures(cases));
    write_output(cfg.out_dir, "cases_eps" + format_g9(eps[e]) + ".csv", cases_to_csv(cases));
  }
  summary["per_epsilon"] = per_eps;

  bool monotone = true;
  for (size_t e = 1; e < failures.size(); ++e)
    if (failures[e] > failures[e - 1]) monotone = false;
  summary["failures_monotone_in_epsilon"] = monotone;

  write_output(cfg.out_dir, "summary.json", summary.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Noise test
// ---------------------------------------------------------------------------

namespace {

double best_at_iteration(const CorrectionResult& run, int k) {
  double best = run.initial_best_e;
  for (const auto& it : run.trace) {
    if (it.t > k) break;
    best = it.e_best;
  }
  return best;
}

}  // namespace

ojson run_noise_test(const ExperimentConfig& cfg) {
  const LineDatabase db = load_db_for(cfg);
  const Dataset dataset = load_dataset_for(cfg);
  const EstimatorModel model = load_estimator_for(cfg);

  PadConfig pad_cfg = cfg.pad;
  pad_cfg.db = db;
  pad_cfg.grid = cfg.grid;

  const auto test = dataset.split_view(Split::test);
  RngStream pick_rng(substream(cfg.seed, kPurposeCaseSelection), 0);
  const auto picks = pick_without_replacement(test.size(), cfg.n_cases, pick_rng);

  std::vector<CaseRecord> cases(cfg.n_cases);
  std::vector<std::optional<CorrectionResult>> runs(cfg.n_cases);

  parallel_for(cfg.n_cases, cfg.threads, [&](size_t i) {
    const DatasetRecord& rec = *test[picks[i]];
    CaseRecord& c = cases[i];
    c.case_id = static_cast<int>(i);
    c.truth = rec.state;

    const Spectrum measured =
        add_multiplicative_noise(rec.spectrum, cfg.noise_level, substream(cfg.seed, kPurposeNoise + i));

    PadEvaluator pad(pad_cfg);
    const GasState est = estimate(model, measured);
    const ErrorBreakdown first = pad.evaluate_guarded(est, measured);
    c.estimate = est;
    c.e_estimate = first.e;

    if (!is_anomaly(first, pad_cfg.epsilon)) {
      c.corrected = false;
      c.final_state = est;
      c.iterations = 0;
      c.pad_queries = pad.query_count();
    } else {
      c.corrected = true;
      CorrectionConfig run_cfg = cfg.correction;
      run_cfg.seed = substream(cfg.seed, kPurposeCorrection + i);
      run_cfg.epsilon = pad_cfg.epsilon;
      CorrectionResult run = run_correction(measured, std::make_pair(est, first), pad_cfg, run_cfg);
      c.final_state = run.best_state;
      c.iterations = run.iterations;
      c.pad_queries = pad.query_count() + run.pad_queries;
      runs[i] = std::move(run);
    }

    PadEvaluator audit(pad_cfg);
    const ErrorBreakdown fb = audit.evaluate_guarded(c.final_state, measured);
    c.e_final = fb.e;
    c.success = fb.e <= pad_cfg.epsilon;
    c.audit_ok = (!c.success || fb.e <= pad_cfg.epsilon) &&
                 c.e_final <= *c.e_estimate + 1e-12;
    progress("noise", i, c.iterations);
  });

  for (int i = 0; i < cfg.n_cases; ++i)
    if (runs[i]) write_trace(cfg, "", i, *runs[i]);

  double mean_est = 0, mean_corr = 0;
  for (const auto& c : cases) {
    mean_est += *c.e_estimate;
    mean_corr += c.e_final;
  }
  mean_est /= cfg.n_cases;
  mean_corr /= cfg.n_cases;

  ojson checkpoints;
  for (int k : cfg.noise_checkpoints) {
    double mean_best = 0;
    int counted = 0;
    for (int i = 0; i < cfg.n_cases; ++i) {
      if (runs[i]) {
        mean_best += best_at_iteration(*runs[i], k);
        ++counted;
      } else {
        mean_best += cases[i].e_final;  // accepted in estimation mode
        ++counted;
      }
    }
    checkpoints[std::to_string(k)] = mean_best / counted;
  }

  ojson summary;
  summary["kind"] = "noise_test";
  summary["seed"] = cfg.seed;
  summary["n_cases"] = cfg.n_cases;
  summary["epsilon"] = pad_cfg.epsilon;
  summary["noise_level"] = cfg.noise_level;
  summary["mean_error_estimation"] = mean_est;
  summary["mean_error_correction"] = mean_corr;
  summary["reduction"] = mean_est > 0 ? 1.0 - mean_corr / mean_est : 0.0;
  summary["checkpoint_mean_best"] = checkpoints;
  summary["estimation_metrics"] = state_metrics_json(cases, true);
  summary["final_metrics"] = state_metrics_json(cases, false);
  summary["audit_failures"] = count_audit_failures(cases);

  write_output(cfg.out_dir, "cases.csv", cases_to_csv(cases));
  write_output(cfg.out_dir, "summary.json", summary.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Reconfigurability test
// ---------------------------------------------------------------------------

ojson run_reconfig_test(const ExperimentConfig& cfg) {
  if (cfg.scenarios.empty()) throw std::invalid_argument("reconfig: no scenarios configured");

  ojson scenarios_summary;
  int64_t estimator_calls = 0;  // correction-only: stays zero by construction

  for (size_t si = 0; si < cfg.scenarios.size(); ++si) {
    const ReconfigScenario& sc = cfg.scenarios[si];
    const LineDatabase db = sc.line_db_path ? load_line_db(*sc.line_db_path) : build_db(sc.gen, sc.grid);

    PadConfig pad_cfg;
    pad_cfg.forward = sc.forward;
    pad_cfg.db = db;
    pad_cfg.grid = sc.grid;
    pad_cfg.domain = sc.domain;
    pad_cfg.epsilon = sc.epsilon;
    pad_cfg.emission_scale = sc.emission_scale;

    std::vector<CaseRecord> cases(sc.n_cases);
    std::vector<CorrectionResult> runs(sc.n_cases);

    parallel_for(sc.n_cases, cfg.threads, [&](size_t i) {
      RngStream truth_rng(substream(cfg.seed, kPurposeReconfig + si * 100 + i), 0);
      GasState truth;
      truth.temperature = truth_rng.uniform(sc.domain.t_min, sc.domain.t_max);
      truth.mole_fraction = truth_rng.uniform(sc.domain.c_min, sc.domain.c_max);

      const Spectrum measured = sc.forward == ForwardKind::absorbance
                                    ? simulate_absorbance(truth, sc.grid, db)
                                    : simulate_emission(truth, sc.grid, db, sc.emission_scale);

      CorrectionConfig run_cfg = cfg.correction;
      run_cfg.seed = substream(cfg.seed, kPurposeCorrection + si * 1000 + i);
      run_cfg.epsilon = sc.epsilon;
      CorrectionResult run = run_correction(measured, std::nullopt, pad_cfg, run_cfg);

      CaseRecord& c = cases[i];
      c.case_id = static_cast<int>(i);
      c.truth = truth;
      c.corrected = true;
      c.final_state = run.best_state;
      c.iterations = run.iterations;
      c.pad_queries = run.pad_queries;

      PadEvaluator audit(pad_cfg);
      const ErrorBreakdown fb = audit.evaluate_guarded(c.final_state, measured);
      c.e_final = fb.e;
      c.success = fb.e <= sc.epsilon;
      c.audit_ok = !c.success || fb.e <= sc.epsilon;
      runs[i] = std::move(run);
      progress(sc.name.c_str(), i, c.iterations);
    });

    for (int i = 0; i < sc.n_cases; ++i) write_trace(cfg, sc.name + "_", i, runs[i]);

    ojson sj;
    sj["n_cases"] = sc.n_cases;
    sj["epsilon"] = sc.epsilon;
    sj["successes"] = sc.n_cases - count_failures(cases);
    sj["iterations"] = iteration_stats_json(cases);
    sj["audit_failures"] = count_audit_failures(cases);
    sj["final_metrics"] = state_metrics_json(cases, false);
    scenarios_summary[sc.name] = sj;

    write_output(cfg.out_dir, "cases_" + sc.name + ".csv", cases_to_csv(cases));
  }

  ojson summary;
  summary["kind"] = "reconfig_test";
  summary["seed"] = cfg.seed;
  summary["estimator_calls"] = estimator_calls;
  summary["scenarios"] = scenarios_summary;
  write_output(cfg.out_dir, "summary.json", summary.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

ojson run_ablation(const ExperimentConfig& cfg) {
  if (cfg.arms.empty()) throw std::invalid_argument("ablation: no arms configured");
  const LineDatabase db = load_db_for(cfg);
  const EstimatorModel model = load_estimator_for(cfg);

  const std::vector<double> eps{cfg.ablation_epsilon};

  ojson arms_summary;
  for (const auto& arm : cfg.arms) {
    CorrectionConfig base = cfg.correction;
    base.error_mode = arm.error_mode;
    base.sampling_mode = arm.sampling_mode;
    base.diversity_enabled = arm.diversity_enabled;

    const OodArmOutput out = run_ood_arm(cfg, model, db, base, eps, cfg.ablation_cases);
    const auto& cases = out.per_eps[0];

    ojson aj = arm_summary(cases);
    aj["error_mode"] = arm.error_mode == ErrorMode::reconstruction_only ? "reconstruction_only"
                       : arm.error_mode == ErrorMode::overall           ? "overall"
                                                                        : "all_elements";
    aj["sampling_mode"] =
        arm.sampling_mode == SamplingMode::monte_carlo ? "monte_carlo" : "disagreement";
    aj["diversity_enabled"] = arm.diversity_enabled;
    arms_summary[arm.name] = aj;

    write_output(cfg.out_dir, "cases_" + arm.name + ".csv", cases_to_csv(cases));
    for (int i = 0; i < cfg.ablation_cases; ++i) write_trace(cfg, arm.name + "_", i, out.runs[i]);
  }

  ojson summary;
  summary["kind"] = "ablation";
  summary["seed"] = cfg.seed;
  summary["epsilon"] = cfg.ablation_epsilon;
  summary["n_cases"] = cfg.ablation_cases;
  summary["arms"] = arms_summary;
  write_output(cfg.out_dir, "summary.json", summary.dump(2) + "\n");
  return summary;
}

ojson run_experiment(const ExperimentConfig& cfg) {
  if (cfg.kind == "id_test") return run_id_test(cfg);
  if (cfg.kind == "ood_test") return run_ood_test(cfg);
  if (cfg.kind == "noise_test") return run_noise_test(cfg);
  if (cfg.kind == "reconfig_test") return run_reconfig_test(cfg);
  if (cfg.kind == "ablation") return run_ablation(cfg);
  throw std::invalid_argument("config: unknown experiment kind '" + cfg.kind + "'");
}

// ---------------------------------------------------------------------------
// Support commands
// ---------------------------------------------------------------------------

LineDatabase generate_lines_from_config(const ExperimentConfig& cfg) {
  if (!cfg.gen_lines) throw std::invalid_argument("config: gen_lines block missing");
  LineDatabase db = build_db(*cfg.gen_lines, cfg.grid);
  const std::string out = cfg.gen_lines->out_path.empty() ? cfg.line_db_path : cfg.gen_lines->out_path;
  if (out.empty()) throw std::invalid_argument("config: no output path for gen-lines");
  fs::create_directories(fs::path(out).parent_path().empty() ? "." : fs::path(out).parent_path());
  save_line_db(db, out);
  return db;
}

ojson generate_data_from_config(const ExperimentConfig& cfg) {
  if (cfg.dataset_path.empty()) throw std::invalid_argument("config: dataset path missing");
  const LineDatabase db = load_db_for(cfg);
  const Dataset ds = generate_dataset(cfg.dataset_ranges, cfg.dataset_k, cfg.grid, db,
                                      cfg.dataset_seed, cfg.threads);
  fs::create_directories(fs::path(cfg.dataset_path).parent_path().empty()
                             ? "."
                             : fs::path(cfg.dataset_path).parent_path());
  save_dataset_csv(ds, cfg.dataset_path);
  ojson j;
  j["path"] = cfg.dataset_path;
  j["k"] = cfg.dataset_k;
  j["seed"] = cfg.dataset_seed;
  return j;
}

ojson train_estimator_from_config(const ExperimentConfig& cfg) {
  if (cfg.checkpoint.empty()) throw std::invalid_argument("config: estimator checkpoint missing");
  const Dataset ds = load_dataset_for(cfg);

  TrainConfig tc = cfg.train;
  tc.threads = cfg.threads;
  TrainedEstimator trained = train_estimator(ds, tc);
  const std::string csv_bytes = read_text_file(cfg.dataset_path);
  trained.model.dataset_hash = fnv1a64(csv_bytes.data(), csv_bytes.size());
  trained.model.grid_id = cfg.grid.id();

  fs::create_directories(fs::path(cfg.checkpoint).parent_path().empty()
                             ? "."
                             : fs::path(cfg.checkpoint).parent_path());
  save_estimator(trained.model, cfg.checkpoint);

  ojson trace = ojson::array();
  for (const auto& p : trained.trace)
    trace.push_back({{"epoch", p.epoch}, {"train_loss", p.train_loss}, {"val_loss", p.val_loss}});
  write_text_file(cfg.checkpoint + ".trace.json", trace.dump(2) + "\n");

  ojson j;
  j["checkpoint"] = cfg.checkpoint;
  j["epochs_run"] = trained.trace.size();
  j["final_val_loss"] = trained.trace.empty() ? 0.0 : trained.trace.back().val_loss;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : trained.trace) best = std::min(best, p.val_loss);
  j["best_val_loss"] = best;
  return j;
}

ojson eval_estimator_from_config(const ExperimentConfig& cfg) {
  const Dataset ds = load_dataset_for(cfg);
  const EstimatorModel model = load_estimator_for(cfg);

  ojson out;
  for (const Split split : {Split::val, Split::test}) {
    const auto view = ds.split_view(split);
    std::vector<double> pt, tt, pc, tc;
    for (const auto* r : view) {
      const GasState s = estimate(model, r->spectrum);
      pt.push_back(s.temperature);
      tt.push_back(r->state.temperature);
      pc.push_back(s.mole_fraction);
      tc.push_back(r->state.mole_fraction);
    }
    ojson j;
    j["temperature"] = metrics_json(compute_metrics(pt, tt));
    j["mole_fraction"] = metrics_json(compute_metrics(pc, tc));
    out[split == Split::val ? "val" : "test"] = j;
  }
  return out;
}

ojson aggregate_reports(const std::string& dir) {
  ojson report;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  for (const auto& path : files) {
    std::ifstream f(path);
    std::string header;
    if (!std::getline(f, header) || header.rfind("case_id,", 0) != 0) continue;

    int n = 0, corrected = 0;
    double sum_e = 0, max_e = 0, sum_iters = 0, sum_queries = 0;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string cell;
      std::vector<std::string> cells;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (cells.size() < 12) continue;
      ++n;
      corrected += cells[6] == "1" ? 1 : 0;
      const double e_final = std::stod(cells[9]);
      sum_e += e_final;
      max_e = std::max(max_e, e_final);
      sum_iters += std::stod(cells[10]);
      sum_queries += std::stod(cells[11]);
    }
    if (n == 0) continue;
    ojson j;
    j["cases"] = n;
    j["corrected"] = corrected;
    j["mean_e_final"] = sum_e / n;
    j["max_e_final"] = max_e;
    j["mean_iterations"] = sum_iters / n;
    j["mean_pad_queries"] = sum_queries / n;
    report[fs::relative(path, dir).string()] = j;
  }

  write_text_file((fs::path(dir) / "report.json").string(), report.dump(2) + "\n");
  return report;
}

}  // namespace spec
