#include "rfvi/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

int cmd_run(const std::string& config_path, const std::string& preset_name, int trials, long iters,
            long long seed, const std::string& out_dir, int workers) {
    rfvi::ExperimentConfig cfg;
    if (!config_path.empty() && !preset_name.empty()) {
        std::cerr << "run: pass either --config or --preset, not both\n";
        return 2;
    }
    if (!config_path.empty())
        cfg = rfvi::parse_config_file(config_path);
    else if (!preset_name.empty())
        cfg = rfvi::preset(preset_name);
    else {
        std::cerr << "run: one of --config or --preset is required\n";
        return 2;
    }
    if (trials > 0)
        cfg.trials = trials;
    if (iters > 0)
        cfg.iterations = iters;
    if (seed >= 0)
        cfg.base_seed = static_cast<std::uint64_t>(seed);
    if (!out_dir.empty())
        cfg.out_dir = out_dir;
    if (workers > 0)
        cfg.workers = workers;

    const rfvi::ExperimentSummary summary = rfvi::run_experiment(cfg);
    std::printf("problem=%s trials=%d iterations=%ld out=%s\n", summary.problem.c_str(),
                summary.trials, summary.iterations, summary.out_dir.c_str());
    for (const auto& r : summary.runs) {
        std::printf("  %s-%s: alpha0=%.6g", r.method.c_str(), r.batch_label.c_str(), r.alpha0);
        if (std::isfinite(r.final_mean_sq_dist_solution))
            std::printf(" final_mean_sq_dist=%.6g", r.final_mean_sq_dist_solution);
        if (std::isfinite(r.final_mean_set_metric))
            std::printf(" final_mean_set_metric=%.6g", r.final_mean_set_metric);
        std::printf(" min_residual=%.3g audits=%s\n", r.min_feas_residual,
                    r.audits_pass() ? "pass" : "FAIL");
    }
    std::printf("all_audits_pass=%s\n", summary.all_audits_pass ? "true" : "false");
    return summary.all_audits_pass ? 0 : 1;
}

int cmd_audit(const std::string& trace_dir) {
    const rfvi::TraceAuditReport rep = rfvi::audit_trace_dir(trace_dir);
    std::printf("trial_files=%d aggregate_files=%d rows=%ld\n", rep.trial_files,
                rep.aggregate_files, rep.rows);
    if (std::isfinite(rep.min_residual))
        std::printf("min_feas_residual=%.17g\n", rep.min_residual);
    for (const auto& f : rep.findings)
        std::printf("finding: %s\n", f.c_str());
    std::printf("audit=%s\n", rep.ok() ? "pass" : "FAIL");
    return rep.ok() ? 0 : 1;
}

int cmd_calibrate(const std::string& preset_name, int samples, long long seed) {
    rfvi::ExperimentConfig cfg = rfvi::preset(preset_name);
    const rfvi::ProblemInstance problem = rfvi::build_problem(cfg);
    const auto cals = rfvi::calibrate_problem(problem, cfg.beta,
                                              samples, seed >= 0 ? static_cast<std::uint64_t>(seed)
                                                                 : cfg.base_seed);
    std::printf("problem=%s beta=%g\n", problem.name.c_str(), cfg.beta);
    for (const auto& c : cals) {
        if (!c.has_family) {
            std::printf("agent %ld: no functional constraints (direct projection)\n",
                        static_cast<long>(c.agent + 1));
            continue;
        }
        std::printf("agent %ld: declared_c=%.6g%s M_g=%.6g q=%.6g\n",
                    static_cast<long>(c.agent + 1), c.declared_c, c.c_nominal ? " (nominal)" : "",
                    c.mg, c.q);
        if (c.oracle_available)
            std::printf("agent %ld: monte-carlo calibrated c=%.6g (diagnostic only)\n",
                        static_cast<long>(c.agent + 1), c.calibrated_c);
        else
            std::printf("agent %ld: no exact set-distance oracle; c stays nominal\n",
                        static_cast<long>(c.agent + 1));
        if (std::isfinite(c.mg_trajectory))
            std::printf("agent %ld: trajectory-box M_g=%.6g -> q=%.6g\n",
                        static_cast<long>(c.agent + 1), c.mg_trajectory, c.q_trajectory);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Randomized feasibility-update methods for variational inequalities"};
    app.require_subcommand(1);

    std::string config_path, preset_name, out_dir, trace_dir;
    int trials = -1, workers = -1, samples = 200;
    long iters = -1;
    long long seed = -1;

    CLI::App* run_cmd = app.add_subcommand("run", "run an experiment from a config or preset");
    run_cmd->add_option("--config", config_path, "config file (key = value sections)");
    run_cmd->add_option("--preset", preset_name,
                        "preset: mg-k3 | mg-k20 | mg-k1000 | mg-k1000-bigstep | imitation");
    run_cmd->add_option("--trials", trials, "override trial count");
    run_cmd->add_option("--iters", iters, "override iteration budget");
    run_cmd->add_option("--seed", seed, "override base seed");
    run_cmd->add_option("--out", out_dir, "override output directory");
    run_cmd->add_option("--workers", workers, "worker threads for trials");

    CLI::App* audit_cmd = app.add_subcommand("audit", "re-check CSV traces in a directory");
    audit_cmd->add_option("--trace-dir", trace_dir, "directory with trace CSVs")->required();

    CLI::App* cal_cmd = app.add_subcommand("calibrate", "regularity and q diagnostics for a preset");
    cal_cmd->add_option("--preset", preset_name, "preset name")->required();
    cal_cmd->add_option("--samples", samples, "Monte Carlo points for the c estimate");
    cal_cmd->add_option("--seed", seed, "diagnostic rng seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed())
            return cmd_run(config_path, preset_name, trials, iters, seed, out_dir, workers);
        if (audit_cmd->parsed())
            return cmd_audit(trace_dir);
        if (cal_cmd->parsed())
            return cmd_calibrate(preset_name, samples, seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
