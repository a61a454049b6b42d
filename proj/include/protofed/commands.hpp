#pragma once

#include "protofed/config.hpp"
#include "protofed/orchestrator.hpp"
#include "protofed/theory.hpp"
#include "protofed/world.hpp"

#include <json.hpp>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

namespace protofed {

// Exit-code contract: 0 ok, 1 flagged invariant violation or failed
// certificate, 2 configuration error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitViolation = 1;
inline constexpr int kExitConfig = 2;

namespace cmd_detail {

inline std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline bool has_violation(const std::vector<std::string>& flags) {
  for (const std::string& f : flags)
    if (f.rfind("violation:", 0) == 0) return true;
  return false;
}

inline nlohmann::json slice_metrics_json(const RunResult& res, int t) {
  const SliceAccuracy& sa = res.report.per_slice[t];
  const int T = int(res.report.per_slice.size());
  nlohmann::json j;
  j["slice"] = t;
  j["queries"] = sa.queries;
  const char* names[3] = {"5", "10", "20"};
  for (int ki = 0; ki < 3; ++ki) {
    j[std::string("hr") + names[ki]] = sa.hr[ki];
    j[std::string("ndcg") + names[ki]] = sa.ndcg[ki];
    j[std::string("mrr") + names[ki]] = sa.mrr[ki];
  }
  j["ndcg10_final"] = res.accuracy.at(t, T - 1);
  j["steps_to_95"] = res.report.steps_to_95_per_slice[t];
  return j;
}

inline void write_metrics_jsonl(const RunResult& res, const std::string& path) {
  std::ofstream out(path);
  require_state(bool(out), "cannot write " + path);
  for (int t = 0; t < int(res.report.per_slice.size()); ++t)
    out << slice_metrics_json(res, t).dump() << "\n";
}

inline const char* kSummaryHeader =
    "experiment,seed,ndcg10_mean,ndcg10_final_mean,af,bwt,fwt,mean_steps_to_95,"
    "disparity_item,disparity_user,epsilon_per_release,epsilon_composed,"
    "uploads,upload_bytes,trainable_params_per_client";

inline std::string summary_row(const std::string& name, std::uint64_t seed,
                               const MetricsReport& r) {
  std::string row = name + "," + std::to_string(seed);
  for (double v : {r.ndcg10_mean, r.ndcg10_final_mean, r.af, r.bwt, r.fwt,
                   r.mean_steps_to_95, r.disparity_item, r.disparity_user,
                   r.epsilon_per_release, r.epsilon_composed})
    row += "," + fmt(v);
  row += "," + std::to_string(r.upload_count);
  row += "," + std::to_string(r.upload_bytes_total);
  row += "," + std::to_string(r.trainable_params_per_client);
  return row;
}

inline void write_run_info(const RunConfig& rc, const RunResult& res,
                           const std::string& path) {
  nlohmann::json j;
  j["experiment"] = rc.experiment;
  j["seed"] = rc.params.seed;
  j["flags"] = res.flags;
  j["slice_wall_ms"] = res.slice_wall_ms;
  std::ofstream out(path);
  if (out) out << j.dump(2) << "\n";
}

}  // namespace cmd_detail

// Generates or loads the configured world.
inline World acquire_world(const RunConfig& rc) {
  if (!rc.world_load_path.empty()) return load_world(rc.world_load_path);
  World w = generate_world(rc.params.world);
  if (!rc.world_save_path.empty()) save_world(w, rc.world_save_path);
  return w;
}

// One full experiment with outputs; the workhorse behind cmd_run and the
// sweep/ablation drivers.
inline RunResult execute_run(const RunConfig& rc, const World& world) {
  Orchestrator orch(world, rc.params);
  if (!rc.resume_from.empty()) orch.load_checkpoint(rc.resume_from);
  if (rc.write_checkpoint)
    orch.set_checkpoint_path(rc.out_dir + "/checkpoint.json");
  return orch.run();
}

inline int cmd_run(const RunConfig& rc) {
  std::filesystem::create_directories(rc.out_dir);
  World world = acquire_world(rc);
  RunResult res = execute_run(rc, world);

  cmd_detail::write_metrics_jsonl(res, rc.out_dir + "/metrics.jsonl");
  {
    std::ofstream out(rc.out_dir + "/summary.csv");
    require_state(bool(out), "cannot write summary.csv");
    out << cmd_detail::kSummaryHeader << "\n"
        << cmd_detail::summary_row(rc.experiment, rc.params.seed, res.report)
        << "\n";
  }
  cmd_detail::write_run_info(rc, res, rc.out_dir + "/run_info.json");
  return cmd_detail::has_violation(res.flags) ? kExitViolation : kExitOk;
}

struct AblationVariant {
  std::string name;
  RunParams params;
};

inline std::vector<AblationVariant> ablation_variants(const RunParams& base) {
  std::vector<AblationVariant> out;
  out.push_back({"full", base});
  {
    RunParams p = base;
    p.orch.ablation.no_align = true;
    out.push_back({"wo_align", p});
  }
  {
    RunParams p = base;
    p.orch.ablation.no_short = true;
    out.push_back({"wo_short", p});
  }
  {
    RunParams p = base;
    p.orch.ablation.no_long = true;
    out.push_back({"wo_long", p});
  }
  {
    RunParams p = base;
    p.orch.ablation.static_prototypes = true;
    out.push_back({"static_prototypes", p});
  }
  {
    RunParams p = base;
    p.server.agg.kind = AggregatorKind::geometric_median;
    out.push_back({"agg_median", p});
  }
  {
    RunParams p = base;
    p.server.agg.kind = AggregatorKind::wasserstein_barycenter;
    out.push_back({"agg_barycenter", p});
  }
  return out;
}

// Runs a set of parameterizations against one shared world, optionally in
// parallel; results come back in input order.
inline std::vector<RunResult> run_variants(const World& world,
                                           const std::vector<RunParams>& params,
                                           int threads) {
  std::vector<RunResult> results(params.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Orchestrator orch(world, params[i]);
      results[i] = orch.run();
    }
    return results;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= params.size()) return;
      Orchestrator orch(world, params[i]);
      results[i] = orch.run();
    }
  };
  std::vector<std::thread> pool;
  int n = std::min<int>(threads, int(params.size()));
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  return results;
}

// Full model, the four single-factor ablations, and both alternative
// aggregators on a shared world; emits ablation.csv with one row each.
inline int cmd_ablate(const RunConfig& rc) {
  std::filesystem::create_directories(rc.out_dir);
  World world = acquire_world(rc);
  std::vector<AblationVariant> variants = ablation_variants(rc.params);
  std::vector<RunParams> params;
  for (const auto& v : variants) params.push_back(v.params);
  std::vector<RunResult> results = run_variants(world, params, rc.threads);

  std::ofstream out(rc.out_dir + "/ablation.csv");
  require_state(bool(out), "cannot write ablation.csv");
  out << "variant," << cmd_detail::kSummaryHeader << "\n";
  bool violation = false;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    out << variants[i].name << ","
        << cmd_detail::summary_row(rc.experiment, rc.params.seed,
                                   results[i].report)
        << "\n";
    violation = violation || cmd_detail::has_violation(results[i].flags);
  }
  return violation ? kExitViolation : kExitOk;
}

// Shared-seed sigma sweep; emits dp_sweep.csv with NDCG, AF and the composed
// epsilon per setting.
inline int cmd_dp_sweep(const RunConfig& rc) {
  std::filesystem::create_directories(rc.out_dir);
  World world = acquire_world(rc);
  std::vector<RunParams> params;
  for (double sigma : rc.dp_sweep_sigmas) {
    RunParams p = rc.params;
    p.privacy.dp.sigma = sigma;
    params.push_back(p);
  }
  std::vector<RunResult> results = run_variants(world, params, rc.threads);

  std::ofstream out(rc.out_dir + "/dp_sweep.csv");
  require_state(bool(out), "cannot write dp_sweep.csv");
  out << "sigma,ndcg10_mean,ndcg10_final_mean,af,epsilon_per_release,"
         "epsilon_composed\n";
  bool violation = false;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const MetricsReport& r = results[i].report;
    out << cmd_detail::fmt(rc.dp_sweep_sigmas[i]) << ","
        << cmd_detail::fmt(r.ndcg10_mean) << ","
        << cmd_detail::fmt(r.ndcg10_final_mean) << "," << cmd_detail::fmt(r.af)
        << "," << cmd_detail::fmt(r.epsilon_per_release) << ","
        << cmd_detail::fmt(r.epsilon_composed) << "\n";
    violation = violation || cmd_detail::has_violation(results[i].flags);
  }
  return violation ? kExitViolation : kExitOk;
}

// Numerical certification of the appendix results; writes a machine-readable
// certificate and fails on any slack below -1e-8.
inline int cmd_verify_theory(const RunConfig& rc) {
  std::filesystem::create_directories(rc.out_dir);
  const double tol = -1e-8;

  theory::SuiteSummary regret =
      theory::run_regret_suite(rc.theory_instances, rc.theory_seed, tol);
  theory::SuiteSummary contraction =
      theory::run_contraction_suite(rc.theory_instances, rc.theory_seed, tol);

  // Exact closed-form anchor point: H = I, lambda_s = 1.
  Matrix eye = Matrix::Identity(4, 4);
  std::vector<Vector> b = {Vector::Ones(4), 2.0 * Vector::Ones(4)};
  std::vector<Vector> c = {Vector::Zero(4), Vector::Ones(4)};
  theory::ContractionReport exact = theory::check_contraction(eye, 1.0, b, c);
  double kappa_err = std::abs(exact.kappa - 0.5);
  double alpha_err = std::abs(exact.alpha - 0.5);

  double injected_slack = 0.0;
  if (rc.theory_inject_violation) {
    // Negative control: corrupt the sign of eta in the regret bound and
    // confirm the certificate catches it.
    theory::QuadraticStream st = theory::random_stream(rc.theory_seed);
    theory::RegretCertificate cert = theory::run_regret_experiment(st);
    double bad_rhs = -cert.rhs;
    injected_slack = bad_rhs - cert.lhs;
  }

  bool passed = regret.passed(tol) && contraction.passed(tol) &&
                kappa_err <= 1e-12 && alpha_err <= 1e-12;
  if (rc.theory_inject_violation) passed = passed && injected_slack >= tol;

  nlohmann::json cert;
  cert["format"] = "protofed-theory-certificate";
  cert["version"] = 1;
  cert["tolerance"] = tol;
  cert["regret"] = {{"instances", regret.instances},
                    {"failures", regret.failures},
                    {"min_slack", regret.min_slack},
                    {"worst_seed", regret.worst_seed}};
  cert["contraction"] = {{"instances", contraction.instances},
                         {"failures", contraction.failures},
                         {"min_slack", contraction.min_slack},
                         {"worst_seed", contraction.worst_seed}};
  cert["exact_point"] = {{"kappa_error", kappa_err}, {"alpha_error", alpha_err}};
  if (rc.theory_inject_violation) cert["injected_slack"] = injected_slack;
  cert["passed"] = passed;
  std::ofstream out(rc.out_dir + "/theory_certificate.json");
  require_state(bool(out), "cannot write theory_certificate.json");
  out << cert.dump(2) << "\n";
  return passed ? kExitOk : kExitViolation;
}

}  // namespace protofed
