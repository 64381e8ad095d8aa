#pragma once

#include "rfvi/audit.hpp"
#include "rfvi/methods.hpp"
#include "rfvi/problem_io.hpp"
#include "rfvi/problems.hpp"

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

// Experiment harness: structured config, presets for the benchmark scenarios,
// trial scheduling, CSV traces, aggregates, and a key/value summary.

namespace rfvi {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------- config ----

struct ExperimentConfig {
    std::string problem_kind = "matrix_game";  // matrix_game | imitation
    MatrixGameSpec mg;
    ImitationGameSpec im;

    std::vector<Method> methods{Method::Projection, Method::Korpelevich, Method::Popov};
    std::vector<BatchSchedule> batches{BatchSchedule::constant(1)};
    double beta = 1.0;
    int trials = 1;
    long iterations = 1;
    std::uint64_t base_seed = 0;
    std::string out_dir = "out";
    bool cap_override_bigstep = false;  // alpha cap 1/(4(L+mu)) for Projection and Popov
    int workers = 1;
    long trace_stride = 1;
    bool record_set_metric = true;
    int set_metric_stride = 1;
    std::string save_instance_path;
    std::string load_instance_path;

    void validate() const {
        if (problem_kind != "matrix_game" && problem_kind != "imitation")
            throw std::invalid_argument("config: unknown problem kind '" + problem_kind + "'");
        if (methods.empty())
            throw std::invalid_argument("config: methods must be nonempty");
        if (batches.empty())
            throw std::invalid_argument("config: batches must be nonempty");
        if (!(beta > 0.0 && beta < 2.0))
            throw std::invalid_argument("config: beta must lie in (0,2)");
        if (trials < 1)
            throw std::invalid_argument("config: trials must be >= 1");
        if (iterations < 1)
            throw std::invalid_argument("config: iterations must be >= 1");
        if (workers < 1)
            throw std::invalid_argument("config: workers must be >= 1");
        if (trace_stride < 1 || set_metric_stride < 1)
            throw std::invalid_argument("config: strides must be >= 1");
        if (out_dir.empty())
            throw std::invalid_argument("config: out dir must be set");
    }
};

namespace detail {

struct ConfigLine {
    std::string section;
    std::string key;
    std::string value;
    int line_no;
};

[[noreturn]] inline void config_fail(const std::string& origin, int line, const std::string& msg) {
    throw std::invalid_argument(origin + ":" + std::to_string(line) + ": " + msg);
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos)
        return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') {
            if (!trim(cur).empty())
                out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (!trim(cur).empty())
        out.push_back(trim(cur));
    return out;
}

template <typename T>
T parse_number(const ConfigLine& l, const std::string& origin) {
    std::istringstream ss(l.value);
    T v{};
    char extra = 0;
    if (!(ss >> v) || (ss >> extra))
        config_fail(origin, l.line_no, "bad numeric value '" + l.value + "' for key '" + l.key + "'");
    return v;
}

inline bool parse_on_off(const ConfigLine& l, const std::string& origin) {
    if (l.value == "on" || l.value == "true" || l.value == "1")
        return true;
    if (l.value == "off" || l.value == "false" || l.value == "0")
        return false;
    config_fail(origin, l.line_no, "expected on/off for key '" + l.key + "'");
}

inline Method parse_method(const std::string& name, const ConfigLine& l, const std::string& origin) {
    if (name == "projection")
        return Method::Projection;
    if (name == "korpelevich")
        return Method::Korpelevich;
    if (name == "popov")
        return Method::Popov;
    config_fail(origin, l.line_no, "unknown method '" + name + "'");
}

inline BatchSchedule parse_batch(const std::string& token, const ConfigLine& l,
                                 const std::string& origin) {
    if (token == "logten")
        return BatchSchedule::log_ten();
    const std::string prefix = "constant:";
    if (token.rfind(prefix, 0) == 0) {
        std::istringstream ss(token.substr(prefix.size()));
        int n = 0;
        char extra = 0;
        if (!(ss >> n) || (ss >> extra) || n < 1)
            config_fail(origin, l.line_no, "bad batch size in '" + token + "'");
        return BatchSchedule::constant(n);
    }
    config_fail(origin, l.line_no, "unknown batch schedule '" + token + "' (constant:N or logten)");
}

}  // namespace detail

inline ExperimentConfig parse_config(std::istream& is, const std::string& origin = "<config>") {
    using detail::config_fail;
    ExperimentConfig cfg;
    std::string section;
    std::string raw;
    int line_no = 0;
    bool saw_methods = false, saw_batches = false;
    while (std::getline(is, raw)) {
        ++line_no;
        std::string line = detail::trim(raw);
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line = detail::trim(line.substr(0, hash));
        if (line.empty())
            continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                config_fail(origin, line_no, "unterminated section header");
            section = line.substr(1, line.size() - 2);
            if (section != "problem" && section != "run")
                config_fail(origin, line_no, "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            config_fail(origin, line_no, "expected key = value");
        detail::ConfigLine l{section, detail::trim(line.substr(0, eq)),
                             detail::trim(line.substr(eq + 1)), line_no};
        if (l.section.empty())
            config_fail(origin, line_no, "key '" + l.key + "' outside any section");

        if (l.section == "problem") {
            if (l.key == "kind")
                cfg.problem_kind = l.value;
            else if (l.key == "n_per_agent")
                cfg.mg.n_per_agent = detail::parse_number<Index>(l, origin);
            else if (l.key == "n_constraints")
                cfg.mg.n_constraints = detail::parse_number<int>(l, origin);
            else if (l.key == "mu")
                cfg.mg.mu_target = detail::parse_number<double>(l, origin);
            else if (l.key == "l")
                cfg.mg.l_target = detail::parse_number<double>(l, origin);
            else if (l.key == "box_half_width")
                cfg.mg.box_half_width = detail::parse_number<double>(l, origin);
            else if (l.key == "delta_lo")
                cfg.mg.delta_range.first = detail::parse_number<double>(l, origin);
            else if (l.key == "delta_hi")
                cfg.mg.delta_range.second = detail::parse_number<double>(l, origin);
            else if (l.key == "chi_lo")
                cfg.mg.chi_range.first = detail::parse_number<double>(l, origin);
            else if (l.key == "chi_hi")
                cfg.mg.chi_range.second = detail::parse_number<double>(l, origin);
            else if (l.key == "q_eig_lo")
                cfg.mg.q_eig_range.first = detail::parse_number<double>(l, origin);
            else if (l.key == "q_eig_hi")
                cfg.mg.q_eig_range.second = detail::parse_number<double>(l, origin);
            else if (l.key == "seed") {
                cfg.mg.seed = detail::parse_number<std::uint64_t>(l, origin);
                cfg.im.seed = cfg.mg.seed;
            } else if (l.key == "xi_max")
                cfg.im.xi_max = detail::parse_number<double>(l, origin);
            else if (l.key == "box_lo")
                cfg.im.box_lo = detail::parse_number<double>(l, origin);
            else if (l.key == "box_hi")
                cfg.im.box_hi = detail::parse_number<double>(l, origin);
            else
                config_fail(origin, line_no, "unknown key '" + l.key + "' in [problem]");
        } else {
            if (l.key == "methods") {
                cfg.methods.clear();
                for (const auto& name : detail::split_list(l.value))
                    cfg.methods.push_back(detail::parse_method(name, l, origin));
                saw_methods = true;
            } else if (l.key == "batches" || l.key == "batch") {
                cfg.batches.clear();
                for (const auto& tok : detail::split_list(l.value))
                    cfg.batches.push_back(detail::parse_batch(tok, l, origin));
                saw_batches = true;
            } else if (l.key == "beta")
                cfg.beta = detail::parse_number<double>(l, origin);
            else if (l.key == "trials")
                cfg.trials = detail::parse_number<int>(l, origin);
            else if (l.key == "iterations")
                cfg.iterations = detail::parse_number<long>(l, origin);
            else if (l.key == "base_seed")
                cfg.base_seed = detail::parse_number<std::uint64_t>(l, origin);
            else if (l.key == "out")
                cfg.out_dir = l.value;
            else if (l.key == "cap_override") {
                if (l.value == "bigstep")
                    cfg.cap_override_bigstep = true;
                else if (l.value == "off")
                    cfg.cap_override_bigstep = false;
                else
                    config_fail(origin, line_no, "cap_override must be off or bigstep");
            } else if (l.key == "workers")
                cfg.workers = detail::parse_number<int>(l, origin);
            else if (l.key == "trace_stride")
                cfg.trace_stride = detail::parse_number<long>(l, origin);
            else if (l.key == "set_metric")
                cfg.record_set_metric = detail::parse_on_off(l, origin);
            else if (l.key == "set_metric_stride")
                cfg.set_metric_stride = detail::parse_number<int>(l, origin);
            else if (l.key == "save_instance")
                cfg.save_instance_path = l.value;
            else if (l.key == "load_instance")
                cfg.load_instance_path = l.value;
            else
                config_fail(origin, line_no, "unknown key '" + l.key + "' in [run]");
        }
    }
    (void)saw_methods;
    (void)saw_batches;
    cfg.validate();
    return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw std::invalid_argument("config: cannot open " + path);
    return parse_config(is, path);
}

// Benchmark scenarios. Matrix-game presets keep the full scale (100 per agent,
// 10^4 constraints); reduce via a config file for desk-scale runs.
inline ExperimentConfig preset(const std::string& name) {
    ExperimentConfig cfg;
    cfg.trials = 5;
    cfg.iterations = 10000;
    cfg.base_seed = 1;
    cfg.out_dir = "out/" + name;
    auto matrix = [&](double mu, double l) {
        cfg.problem_kind = "matrix_game";
        cfg.mg.mu_target = mu;
        cfg.mg.l_target = l;
        cfg.mg.seed = 42;
        // scanning all 10^4 constraints for the violation proxy costs ~0.1 s
        // per iterate at full scale; sample it sparsely by default
        cfg.set_metric_stride = 250;
    };
    if (name == "mg-k3") {
        matrix(1.0, 3.0);
    } else if (name == "mg-k20") {
        matrix(0.05, 1.0);
    } else if (name == "mg-k1000") {
        matrix(0.01, 10.0);
    } else if (name == "mg-k1000-bigstep") {
        matrix(0.01, 10.0);
        cfg.cap_override_bigstep = true;
    } else if (name == "imitation") {
        cfg.problem_kind = "imitation";
        cfg.trials = 1000;
        cfg.batches = {BatchSchedule::constant(1), BatchSchedule::log_ten()};
        cfg.trace_stride = 10;  // per-trial files only; aggregates keep every iteration
    } else {
        throw std::invalid_argument("unknown preset '" + name + "'");
    }
    return cfg;
}

inline ProblemInstance build_problem(const ExperimentConfig& cfg) {
    if (!cfg.load_instance_path.empty())
        return load_instance_file(cfg.load_instance_path).instance;
    ProblemInstance inst = cfg.problem_kind == "matrix_game" ? build_matrix_game(cfg.mg)
                                                             : build_imitation_game(cfg.im);
    if (!cfg.save_instance_path.empty())
        save_instance_file(cfg.save_instance_path, inst,
                           cfg.problem_kind == "matrix_game" ? "normal" : "uniform01");
    return inst;
}

inline StepSchedule make_schedule(Method m, double mu, double lipschitz, bool bigstep) {
    std::optional<double> cap;
    if (bigstep && (m == Method::Projection || m == Method::Popov))
        cap = 1.0 / (4.0 * (lipschitz + mu));
    switch (m) {
    case Method::Projection:
        return StepSchedule::projection(mu, lipschitz, cap);
    case Method::Korpelevich:
        return StepSchedule::korpelevich(mu, lipschitz, cap);
    case Method::Popov:
        return StepSchedule::popov(mu, lipschitz, cap);
    }
    throw std::logic_error("make_schedule: unreachable");
}

// ------------------------------------------------------------- CSV output ----

namespace detail {

inline void write_trial_csv(const std::string& path, const RunTrace& trace, long stride,
                            const std::string& problem_name) {
    std::ofstream os(path);
    if (!os)
        throw std::runtime_error("cannot open trace file " + path);
    const long iters = trace.iterations();
    const Index j_count = trace.agents;
    os << "# rfvi-trace-v1 method=" << trace.method << " seed=" << trace.seed
       << " problem=" << problem_name << " set_metric="
       << (trace.set_metric.empty() ? "none"
                                    : (trace.set_metric_is_violation ? "violation" : "distance"))
       << "\n";
    os << "k,alpha";
    for (Index j = 0; j < j_count; ++j)
        os << ",N_agent" << (j + 1);
    os << ",sq_dist_solution,dist_set_or_violation,feas_residual,f_evals\n";
    for (long k = 0; k <= iters; ++k) {
        if (k % stride != 0 && k != iters)
            continue;
        const auto i = static_cast<std::size_t>(k);
        os << k << "," << fmt_g17(trace.alpha[i]);
        for (Index j = 0; j < j_count; ++j)
            os << "," << trace.batches[i * static_cast<std::size_t>(j_count) + static_cast<std::size_t>(j)];
        os << ",";
        if (!trace.sq_dist_solution.empty())
            os << fmt_g17(trace.sq_dist_solution[i]);
        os << ",";
        if (!trace.set_metric.empty() && std::isfinite(trace.set_metric[i]))
            os << fmt_g17(trace.set_metric[i]);
        os << ",";
        if (!trace.feas_residual.empty() && std::isfinite(trace.feas_residual[i]))
            os << fmt_g17(trace.feas_residual[i]);
        os << "," << trace.f_evals[i] << "\n";
    }
    if (!os)
        throw std::runtime_error("write failed for " + path);
}

struct Accumulated {
    // per-trial columns, trial-major; aggregation runs in trial order so the
    // output does not depend on worker scheduling
    std::vector<std::vector<double>> sq_sol;
    std::vector<std::vector<double>> set_metric;
    std::vector<std::vector<double>> sq_set;
    std::vector<double> min_residual;
    std::vector<char> finite_ok;
    std::vector<RunTrace> heads;  // truncated traces for the decay audit
};

inline bool trace_values_finite(const RunTrace& trace) {
    auto all_finite = [](const std::vector<double>& v) {
        for (double x : v)
            if (std::isinf(x) || std::isnan(x))
                return false;
        return true;
    };
    if (!all_finite(trace.alpha) || !all_finite(trace.sq_dist_solution) ||
        !all_finite(trace.sq_dist_set) || !all_finite(trace.v_sq_dist_xstar))
        return false;
    for (double x : trace.set_metric)
        if (std::isinf(x))
            return false;  // NaN marks stride-skipped rows
    for (double x : trace.feas_residual)
        if (std::isinf(x) && x > 0)
            return false;
    return true;
}

inline RunTrace truncate_trace(const RunTrace& trace, long keep_iters) {
    RunTrace head = trace;
    const auto rows = static_cast<std::size_t>(keep_iters) + 1;
    const auto j = static_cast<std::size_t>(trace.agents);
    auto cut = [&](auto& v, std::size_t per_row) {
        if (!v.empty())
            v.resize(rows * per_row);
    };
    cut(head.alpha, 1);
    cut(head.batches, j);
    cut(head.sq_dist_solution, 1);
    cut(head.set_metric, 1);
    cut(head.sq_dist_set, 1);
    cut(head.v_sq_dist_xstar, j);
    cut(head.feas_residual, 1);
    cut(head.f_evals, 1);
    return head;
}

}  // namespace detail

// ------------------------------------------------------------ experiment ----

struct MethodRunSummary {
    std::string method;
    std::string batch_label;
    double alpha0 = 0.0, alpha1 = 0.0;
    bool outside_guarantees = false;
    std::vector<double> agent_q;
    std::vector<bool> agent_q_nominal;

    double final_mean_sq_dist_solution = std::numeric_limits<double>::quiet_NaN();
    double final_mean_dist_solution = std::numeric_limits<double>::quiet_NaN();
    double final_mean_set_metric = std::numeric_limits<double>::quiet_NaN();
    double final_mean_sq_dist_set = std::numeric_limits<double>::quiet_NaN();
    double rate_c = std::numeric_limits<double>::quiet_NaN();
    double rate_p = std::numeric_limits<double>::quiet_NaN();

    double min_feas_residual = std::numeric_limits<double>::infinity();
    bool residual_ok = true;
    bool finite_ok = true;
    bool decay_applicable = false;
    bool decay_enough_trials = false;
    bool decay_ok = true;
    long decay_audit_iters = 0;

    bool audits_pass() const {
        return residual_ok && finite_ok && (!decay_applicable || !decay_enough_trials || decay_ok);
    }
};

struct ExperimentSummary {
    std::string out_dir;
    std::string problem;
    int trials = 0;
    long iterations = 0;
    std::vector<MethodRunSummary> runs;
    bool all_audits_pass = true;
};

namespace detail {

inline void parallel_for_trials(int trials, int workers, const std::function<void(int)>& body) {
    if (workers <= 1) {
        for (int t = 0; t < trials; ++t)
            body(t);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr err;
    std::mutex err_mx;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const int t = next.fetch_add(1);
                if (t >= trials)
                    return;
                try {
                    body(t);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mx);
                    if (!err)
                        err = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool)
        th.join();
    if (err)
        std::rethrow_exception(err);
}

}  // namespace detail

inline ExperimentSummary run_experiment(const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    cfg.validate();
    const ProblemInstance problem = build_problem(cfg);
    const long iters = cfg.iterations;
    const auto rows = static_cast<std::size_t>(iters) + 1;
    const long decay_iters = std::min<long>(10, iters);

    ExperimentSummary summary;
    summary.out_dir = cfg.out_dir;
    summary.problem = problem.name;
    summary.trials = cfg.trials;
    summary.iterations = iters;
    fs::create_directories(cfg.out_dir);

    std::vector<double> shared_alpha;  // same for every trial of one run set

    for (Method method : cfg.methods) {
        const StepSchedule sched =
            make_schedule(method, problem.mapping.mu, problem.mapping.lipschitz,
                          cfg.cap_override_bigstep);
        for (const BatchSchedule& batch : cfg.batches) {
            const std::string label = std::string(method_name(method)) + "-" + batch.label();
            const fs::path run_dir = fs::path(cfg.out_dir) / label;
            fs::create_directories(run_dir);

            detail::Accumulated acc;
            acc.sq_sol.resize(static_cast<std::size_t>(cfg.trials));
            acc.set_metric.resize(static_cast<std::size_t>(cfg.trials));
            acc.sq_set.resize(static_cast<std::size_t>(cfg.trials));
            acc.min_residual.assign(static_cast<std::size_t>(cfg.trials),
                                    std::numeric_limits<double>::infinity());
            acc.finite_ok.assign(static_cast<std::size_t>(cfg.trials), 1);
            acc.heads.resize(static_cast<std::size_t>(cfg.trials));

            MethodRunSummary run_sum;
            run_sum.method = method_name(method);
            run_sum.batch_label = batch.label();
            run_sum.alpha0 = sched.alpha(0);
            run_sum.alpha1 = sched.alpha(1);
            run_sum.outside_guarantees = sched.outside_guarantees();

            RunOptions opts;
            opts.record_set_metric = cfg.record_set_metric;
            opts.set_metric_stride = cfg.set_metric_stride;

            std::mutex alpha_mx;
            detail::parallel_for_trials(cfg.trials, cfg.workers, [&](int trial) {
                const auto ti = static_cast<std::size_t>(trial);
                RunTrace trace =
                    run(method, problem, sched, batch, FeasibilityConfig(cfg.beta, 1), iters,
                        cfg.base_seed + static_cast<std::uint64_t>(trial), opts);
                char name_buf[32];
                std::snprintf(name_buf, sizeof name_buf, "trial_%04d.csv", trial);
                detail::write_trial_csv((run_dir / name_buf).string(), trace, cfg.trace_stride,
                                        problem.name);
                acc.sq_sol[ti] = trace.sq_dist_solution;
                acc.set_metric[ti] = trace.set_metric;
                acc.sq_set[ti] = trace.sq_dist_set;
                acc.min_residual[ti] = trace.min_feas_residual();
                acc.finite_ok[ti] = detail::trace_values_finite(trace) ? 1 : 0;
                acc.heads[ti] = detail::truncate_trace(trace, decay_iters);
                if (trial == 0) {
                    std::lock_guard<std::mutex> lock(alpha_mx);
                    shared_alpha = trace.alpha;
                    run_sum.agent_q = trace.agent_q;
                    run_sum.agent_q_nominal.assign(trace.agent_q_nominal.begin(),
                                                   trace.agent_q_nominal.end());
                }
            });

            const double n = static_cast<double>(cfg.trials);
            const bool have_sol = !acc.sq_sol[0].empty();
            const bool have_set = !acc.set_metric[0].empty();
            const bool have_sq_set = !acc.sq_set[0].empty();

            // aggregate CSV, trial order fixed
            const fs::path agg_path = fs::path(cfg.out_dir) / (label + "-aggregate.csv");
            std::ofstream agg(agg_path);
            if (!agg)
                throw std::runtime_error("cannot open " + agg_path.string());
            agg << "# rfvi-aggregate-v1 method=" << run_sum.method << " batch=" << run_sum.batch_label
                << " trials=" << cfg.trials << " problem=" << problem.name << " set_metric="
                << (!have_set ? "none"
                              : (acc.heads[0].set_metric_is_violation ? "violation" : "distance"))
                << "\n";
            agg << "k,alpha,mean_sq_dist_solution,stderr_sq_dist_solution,mean_dist_solution,"
                   "stderr_dist_solution,mean_set_metric,stderr_set_metric,mean_sq_dist_set,"
                   "n_trials\n";
            std::vector<double> mean_sq_sol(rows, std::numeric_limits<double>::quiet_NaN());
            for (std::size_t i = 0; i < rows; ++i) {
                double s_sq = 0, s2_sq = 0, s_d = 0, s2_d = 0, s_set = 0, s2_set = 0, s_ss = 0;
                bool set_row = have_set;
                for (int t = 0; t < cfg.trials; ++t) {
                    const auto ti = static_cast<std::size_t>(t);
                    if (have_sol) {
                        const double v = acc.sq_sol[ti][i];
                        const double d = std::sqrt(v);
                        s_sq += v;
                        s2_sq += v * v;
                        s_d += d;
                        s2_d += d * d;
                    }
                    if (have_set) {
                        const double m = acc.set_metric[ti][i];
                        if (std::isnan(m))
                            set_row = false;  // stride-skipped row
                        else {
                            s_set += m;
                            s2_set += m * m;
                        }
                    }
                    if (have_sq_set)
                        s_ss += acc.sq_set[ti][i];
                }
                auto stderr_of = [&](double s, double s2) {
                    if (cfg.trials < 2)
                        return 0.0;
                    const double mean = s / n;
                    const double var = std::max(0.0, (s2 - n * mean * mean) / (n - 1.0));
                    return std::sqrt(var / n);
                };
                agg << i << "," << fmt_g17(shared_alpha[i]) << ",";
                if (have_sol) {
                    mean_sq_sol[i] = s_sq / n;
                    agg << fmt_g17(s_sq / n) << "," << fmt_g17(stderr_of(s_sq, s2_sq)) << ","
                        << fmt_g17(s_d / n) << "," << fmt_g17(stderr_of(s_d, s2_d));
                } else {
                    agg << ",,,";
                }
                agg << ",";
                if (set_row)
                    agg << fmt_g17(s_set / n) << "," << fmt_g17(stderr_of(s_set, s2_set));
                else
                    agg << ",";
                agg << ",";
                if (have_sq_set)
                    agg << fmt_g17(s_ss / n);
                agg << "," << cfg.trials << "\n";
            }
            if (!agg)
                throw std::runtime_error("write failed for " + agg_path.string());

            // summary metrics and audits
            for (int t = 0; t < cfg.trials; ++t) {
                const auto ti = static_cast<std::size_t>(t);
                run_sum.min_feas_residual = std::min(run_sum.min_feas_residual, acc.min_residual[ti]);
                run_sum.finite_ok = run_sum.finite_ok && acc.finite_ok[ti];
            }
            run_sum.residual_ok =
                !(run_sum.min_feas_residual < -1e-9);  // vacuous (inf) counts as ok
            if (have_sol) {
                run_sum.final_mean_sq_dist_solution = mean_sq_sol[rows - 1];
                double s_d = 0;
                for (int t = 0; t < cfg.trials; ++t)
                    s_d += std::sqrt(acc.sq_sol[static_cast<std::size_t>(t)][rows - 1]);
                run_sum.final_mean_dist_solution = s_d / n;
                // tail fit over {T/2..T}
                std::vector<std::pair<double, double>> tail;
                bool fit_ok = iters >= 4;
                for (long k = iters / 2; k <= iters && fit_ok; ++k) {
                    const double e = mean_sq_sol[static_cast<std::size_t>(k)];
                    if (!(e > 0.0))
                        fit_ok = false;
                    else
                        tail.emplace_back(static_cast<double>(k), e);
                }
                if (fit_ok && tail.size() >= 2) {
                    const RateFit fit = rate_fit(tail);
                    run_sum.rate_c = fit.c;
                    run_sum.rate_p = fit.p;
                }
            }
            if (have_set) {
                double s = 0;
                for (int t = 0; t < cfg.trials; ++t)
                    s += acc.set_metric[static_cast<std::size_t>(t)][rows - 1];
                run_sum.final_mean_set_metric = s / n;
            }
            if (have_sq_set) {
                double s = 0;
                for (int t = 0; t < cfg.trials; ++t)
                    s += acc.sq_set[static_cast<std::size_t>(t)][rows - 1];
                run_sum.final_mean_sq_dist_set = s / n;
            }

            const GeoDecayReport decay = geometric_decay_audit(acc.heads, 1000);
            run_sum.decay_applicable = decay.applicable;
            run_sum.decay_enough_trials = decay.enough_trials;
            run_sum.decay_ok = decay.all_pass();
            run_sum.decay_audit_iters = decay_iters;

            summary.all_audits_pass = summary.all_audits_pass && run_sum.audits_pass();
            summary.runs.push_back(std::move(run_sum));
        }
    }

    // key/value report
    std::ofstream rep(fs::path(cfg.out_dir) / "summary.txt");
    rep << "schema = summary-v1\n";
    rep << "problem = " << summary.problem << "\n";
    rep << "trials = " << summary.trials << "\n";
    rep << "iterations = " << summary.iterations << "\n";
    rep << "beta = " << fmt_g17(cfg.beta) << "\n";
    rep << "base_seed = " << cfg.base_seed << "\n";
    for (const MethodRunSummary& r : summary.runs) {
        const std::string p = "run." + r.method + "-" + r.batch_label + ".";
        rep << p << "alpha0 = " << fmt_g17(r.alpha0) << "\n";
        rep << p << "alpha1 = " << fmt_g17(r.alpha1) << "\n";
        if (r.outside_guarantees)
            rep << p << "note = cap_override outside the rate-theorem guarantees\n";
        for (std::size_t j = 0; j < r.agent_q.size(); ++j) {
            if (!std::isfinite(r.agent_q[j]))
                continue;
            rep << p << "q_agent" << (j + 1) << " = " << fmt_g17(r.agent_q[j])
                << (r.agent_q_nominal[j] ? " (nominal c)" : "") << "\n";
        }
        if (std::isfinite(r.final_mean_sq_dist_solution)) {
            rep << p << "final_mean_sq_dist_solution = " << fmt_g17(r.final_mean_sq_dist_solution)
                << "\n";
            rep << p << "final_mean_dist_solution = " << fmt_g17(r.final_mean_dist_solution) << "\n";
        }
        if (std::isfinite(r.final_mean_set_metric))
            rep << p << "final_mean_set_metric = " << fmt_g17(r.final_mean_set_metric) << "\n";
        if (std::isfinite(r.final_mean_sq_dist_set))
            rep << p << "final_mean_sq_dist_set = " << fmt_g17(r.final_mean_sq_dist_set) << "\n";
        if (std::isfinite(r.rate_p)) {
            rep << p << "rate_fit_c = " << fmt_g17(r.rate_c) << "\n";
            rep << p << "rate_fit_p = " << fmt_g17(r.rate_p) << "\n";
        }
        rep << p << "min_feas_residual = " << fmt_g17(r.min_feas_residual) << "\n";
        rep << p << "residual_ok = " << (r.residual_ok ? "true" : "false") << "\n";
        rep << p << "finite_ok = " << (r.finite_ok ? "true" : "false") << "\n";
        if (r.decay_applicable)
            rep << p << "decay_audit(first " << r.decay_audit_iters
                << " iters) = " << (!r.decay_enough_trials ? "insufficient-trials"
                                                           : (r.decay_ok ? "pass" : "FAIL"))
                << "\n";
    }
    rep << "all_audits_pass = " << (summary.all_audits_pass ? "true" : "false") << "\n";
    if (!rep)
        throw std::runtime_error("write failed for summary.txt");
    return summary;
}

// ------------------------------------------------------------ trace audit ----

struct TraceAuditReport {
    int trial_files = 0;
    int aggregate_files = 0;
    long rows = 0;
    double min_residual = std::numeric_limits<double>::infinity();
    std::vector<std::string> findings;

    bool ok() const { return findings.empty(); }
};

// Re-checks written traces: schema, finiteness, monotone counters, and the
// feasibility-residual floor.
inline TraceAuditReport audit_trace_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    TraceAuditReport rep;
    if (!fs::exists(dir)) {
        rep.findings.push_back("trace dir does not exist: " + dir);
        return rep;
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".csv")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
        rep.findings.push_back("no csv files under " + dir);

    for (const fs::path& path : files) {
        std::ifstream is(path);
        std::string line;
        std::string header;
        while (std::getline(is, line)) {
            if (!line.empty() && line[0] != '#') {
                header = line;
                break;
            }
        }
        const bool is_trial = header.rfind("k,alpha,N_agent1", 0) == 0;
        const bool is_aggregate = header.rfind("k,alpha,mean_sq_dist_solution", 0) == 0;
        if (!is_trial && !is_aggregate) {
            rep.findings.push_back(path.string() + ": unrecognized csv header");
            continue;
        }
        (is_trial ? rep.trial_files : rep.aggregate_files)++;
        std::size_t n_cols = 1;
        for (char c : header)
            if (c == ',')
                ++n_cols;
        long prev_k = -1;
        long prev_fe = -1;
        int line_no = 1;
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty())
                continue;
            ++rep.rows;
            std::vector<std::string> cells;
            std::string cur;
            for (char c : line) {
                if (c == ',') {
                    cells.push_back(cur);
                    cur.clear();
                } else
                    cur += c;
            }
            cells.push_back(cur);
            auto bad = [&](const std::string& msg) {
                rep.findings.push_back(path.string() + ":" + std::to_string(line_no) + ": " + msg);
            };
            if (cells.size() != n_cols) {
                bad("wrong column count");
                continue;
            }
            const long k = std::strtol(cells[0].c_str(), nullptr, 10);
            if (k <= prev_k)
                bad("iteration index not increasing");
            prev_k = k;
            for (std::size_t c = 1; c < cells.size(); ++c) {
                if (cells[c].empty())
                    continue;
                const double v = std::strtod(cells[c].c_str(), nullptr);
                if (!std::isfinite(v))
                    bad("non-finite value in column " + std::to_string(c));
            }
            if (is_trial) {
                const std::size_t residual_col = n_cols - 2;
                if (!cells[residual_col].empty()) {
                    const double r = std::strtod(cells[residual_col].c_str(), nullptr);
                    rep.min_residual = std::min(rep.min_residual, r);
                    if (r < -1e-9)
                        bad("feasibility residual below -1e-9: " + cells[residual_col]);
                }
                const long fe = std::strtol(cells[n_cols - 1].c_str(), nullptr, 10);
                if (fe < prev_fe)
                    bad("f_evals decreased");
                prev_fe = fe;
            }
        }
    }
    return rep;
}

// ------------------------------------------------------------- calibration ----

struct AgentCalibration {
    Index agent = 0;
    bool has_family = false;
    double declared_c = 0.0;
    bool c_nominal = false;
    double mg = 0.0;
    double q = 0.0;
    bool oracle_available = false;
    double calibrated_c = std::numeric_limits<double>::quiet_NaN();
    double mg_trajectory = std::numeric_limits<double>::quiet_NaN();
    double q_trajectory = std::numeric_limits<double>::quiet_NaN();
};

// Diagnostic report: declared constants, Monte Carlo calibration where an
// oracle exists, and the trajectory-box M_g for realistic q reporting.
inline std::vector<AgentCalibration> calibrate_problem(const ProblemInstance& problem, double beta,
                                                       int n_samples, std::uint64_t seed) {
    std::vector<AgentCalibration> out;
    // short probe trajectory for the observed iterate radius
    std::vector<double> max_block_norm(static_cast<std::size_t>(problem.layout.agents()), 0.0);
    {
        const StepSchedule sched =
            StepSchedule::projection(problem.mapping.mu, problem.mapping.lipschitz);
        Rng rng(seed);
        Vector x0 = problem.sample_initial(rng);
        block_project_inplace(problem.sets, problem.layout, x0);
        MethodState state{JointDecision(problem.layout, std::move(x0))};
        const BatchSchedule one = BatchSchedule::constant(1);
        const FeasibilityConfig fc(beta, 1);
        for (long k = 0; k < 200; ++k) {
            for (Index j = 0; j < problem.layout.agents(); ++j)
                max_block_norm[static_cast<std::size_t>(j)] =
                    std::max(max_block_norm[static_cast<std::size_t>(j)],
                             state.x.block(j).norm());
            state = projection_iteration(std::move(state), problem.mapping, problem.sets,
                                         problem.families, sched, one, fc, rng);
        }
    }
    Rng rng(seed + 1);
    for (Index j = 0; j < problem.layout.agents(); ++j) {
        AgentCalibration cal;
        cal.agent = j;
        const auto& fam = problem.families[static_cast<std::size_t>(j)];
        if (!fam) {
            out.push_back(cal);
            continue;
        }
        cal.has_family = true;
        cal.declared_c = fam->regularity_c();
        cal.c_nominal = fam->regularity_is_nominal();
        cal.mg = fam->mg_bound();
        cal.q = compute_q(beta, cal.declared_c, cal.mg, true).q;
        Vector probe = Vector::Zero(problem.layout.total());
        if (problem.xstar)
            probe = *problem.xstar;
        cal.oracle_available = fam->set_distance(probe.segment(problem.layout.offset(j),
                                                               problem.layout.size(j)),
                                                 probe)
                                   .has_value();
        if (cal.oracle_available)
            cal.calibrated_c = calibrate_c(*fam, problem.sets[static_cast<std::size_t>(j)],
                                           n_samples, rng, probe);
        if (auto mg_traj = fam->mg_bound_within(max_block_norm[static_cast<std::size_t>(j)])) {
            cal.mg_trajectory = *mg_traj;
            cal.q_trajectory = compute_q(beta, cal.declared_c, *mg_traj, true).q;
        }
        out.push_back(cal);
    }
    return out;
}

}  // namespace rfvi
