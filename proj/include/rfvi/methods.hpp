#pragma once

#include "rfvi/audit.hpp"
#include "rfvi/core.hpp"
#include "rfvi/feasibility.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

// The three outer methods -- modified Projection, Korpelevich, and Popov --
// with their step-size and batch-size schedules, and the run driver.

namespace rfvi {

enum class Method { Projection, Korpelevich, Popov };

inline const char* method_name(Method m) {
    switch (m) {
    case Method::Projection:
        return "projection";
    case Method::Korpelevich:
        return "korpelevich";
    case Method::Popov:
        return "popov";
    }
    return "?";
}

// tau chosen so that mu/(4 tau L^2) = (1 - 2/tau)/(2L/tau + L tau); always > 2.
inline double popov_tau(double mu, double lipschitz) {
    if (!(mu > 0.0) || !(lipschitz >= mu))
        throw std::invalid_argument("popov_tau: need 0 < mu <= lipschitz");
    const double l = lipschitz;
    return 8.0 * l * l * (1.0 + std::sqrt(1.0 + mu * (4.0 / l - mu / (l * l)))) /
           (8.0 * l * l - 2.0 * mu * l);
}

inline double popov_nu() { return 2.0; }

// k -> alpha_k. Caps come from the respective rate theorems; cap_override
// replaces the constant cap (used to reproduce the larger-initial-step
// experiment; outside the theorems' guarantees when larger than the cap).
class StepSchedule {
  public:
    static StepSchedule projection(double mu, double lipschitz,
                                   std::optional<double> cap_override = std::nullopt) {
        StepSchedule s(Method::Projection, mu, lipschitz);
        s.k_scale_ = 2.0 / mu;
        s.theorem_cap_ = mu / (2.0 * lipschitz * lipschitz);
        s.apply_override(cap_override);
        return s;
    }

    static StepSchedule korpelevich(double mu, double lipschitz,
                                    std::optional<double> cap_override = std::nullopt) {
        StepSchedule s(Method::Korpelevich, mu, lipschitz);
        s.k_scale_ = 2.0 / mu;
        s.theorem_cap_ = 1.0 / (4.0 * (lipschitz + mu));
        s.apply_override(cap_override);
        return s;
    }

    static StepSchedule popov(double mu, double lipschitz, double tau, double nu,
                              std::optional<double> cap_override = std::nullopt) {
        if (!(tau > 2.0))
            throw std::invalid_argument("StepSchedule::popov: tau must exceed 2");
        if (!(nu > 1.0))
            throw std::invalid_argument("StepSchedule::popov: nu must exceed 1");
        StepSchedule s(Method::Popov, mu, lipschitz);
        s.tau_ = tau;
        s.nu_ = nu;
        const double l = lipschitz;
        s.k_scale_ = 4.0 / mu;
        s.theorem_cap_ = std::min({mu / (4.0 * tau * l * l),
                                   (1.0 - 2.0 / tau) / (2.0 * l / tau + l * tau),
                                   (1.0 - 1.0 / nu) / (2.0 * mu + l * tau)});
        s.apply_override(cap_override);
        return s;
    }

    static StepSchedule popov(double mu, double lipschitz,
                              std::optional<double> cap_override = std::nullopt) {
        return popov(mu, lipschitz, popov_tau(mu, lipschitz), popov_nu(), cap_override);
    }

    double alpha(long k) const { return std::min(k_scale_ / static_cast<double>(k + 1), cap_); }

    Method method() const { return method_; }
    double mu() const { return mu_; }
    double lipschitz() const { return lipschitz_; }
    double tau() const { return tau_; }
    double nu() const { return nu_; }
    double cap() const { return cap_; }
    double theorem_cap() const { return theorem_cap_; }
    bool outside_guarantees() const { return cap_ > theorem_cap_; }

  private:
    StepSchedule(Method m, double mu, double lipschitz) : method_(m), mu_(mu), lipschitz_(lipschitz) {
        if (!(mu > 0.0) || !(lipschitz >= mu))
            throw std::invalid_argument("StepSchedule: need 0 < mu <= lipschitz");
    }
    void apply_override(std::optional<double> cap_override) {
        if (cap_override && !(*cap_override > 0.0))
            throw std::invalid_argument("StepSchedule: cap_override must be positive");
        cap_ = cap_override.value_or(theorem_cap_);
    }

    Method method_;
    double mu_, lipschitz_;
    double tau_ = 0.0, nu_ = 0.0;
    double k_scale_ = 0.0;
    double theorem_cap_ = 0.0;
    double cap_ = 0.0;
};

// (k, j) -> N_{k,j} >= 1 for k >= 1.
class BatchSchedule {
  public:
    enum class Kind { Constant, LogTen };

    static BatchSchedule constant(int n) {
        if (n < 1)
            throw std::invalid_argument("BatchSchedule::constant: n must be >= 1");
        BatchSchedule b;
        b.kind_ = Kind::Constant;
        b.n_ = n;
        return b;
    }

    static BatchSchedule log_ten() {
        BatchSchedule b;
        b.kind_ = Kind::LogTen;
        return b;
    }

    // N_{k,j} = max(1, ceil(log10 k)), computed in integers to dodge libm
    // rounding at exact powers of ten.
    int batch(long k, Index /*agent*/) const {
        if (k < 1)
            throw std::invalid_argument("BatchSchedule: k must be >= 1");
        if (kind_ == Kind::Constant)
            return n_;
        int p = 0;
        long pow10 = 1;
        while (pow10 < k) {
            pow10 = pow10 > std::numeric_limits<long>::max() / 10 ? k : pow10 * 10;
            ++p;
        }
        return std::max(1, p);
    }

    Kind kind() const { return kind_; }
    int constant_n() const { return n_; }
    std::string label() const {
        return kind_ == Kind::Constant ? "constant" + std::to_string(n_) : "logten";
    }

  private:
    BatchSchedule() = default;
    Kind kind_ = Kind::Constant;
    int n_ = 1;
};

// State carried across outer iterations. u persists for Popov (its next
// iteration uses the cached F(u_k)); Korpelevich recomputes u each iteration.
struct MethodState {
    long k = 0;
    JointDecision x;  // post-feasibility iterate, always in Y
    JointDecision u;  // auxiliary point (Korpelevich/Popov)
    JointDecision v;  // pre-feasibility iterate, kept for tracing
    Vector f_u;       // cached F(u_k), Popov only
    long f_evals = 0;

    explicit MethodState(JointDecision x0) : x(x0), u(x0), v(std::move(x0)) {}
};

struct IterationDetail {
    double alpha = 0.0;
    std::vector<int> batch_sizes;       // steps actually taken per agent (0 when no family)
    std::vector<double> residuals;      // per agent, NaN where no witness exists
    std::vector<double> sum_sq_g_plus;  // per agent
    long new_f_evals = 0;
};

namespace detail {

// Shared post-mapping stage: per agent, run the random feasibility batch with
// the other agents' freshest blocks frozen in `joint`. Mutates joint from v to x.
inline void feasibility_stage(Vector& joint, const BlockLayout& layout,
                              const std::vector<SimpleSet>& sets,
                              const std::vector<FamilyPtr>& families, const BatchSchedule& batch,
                              long k, double beta, Rng& rng, IterationDetail* det) {
    const Index j_count = layout.agents();
    if (det) {
        det->batch_sizes.assign(static_cast<std::size_t>(j_count), 0);
        det->residuals.assign(static_cast<std::size_t>(j_count),
                              std::numeric_limits<double>::quiet_NaN());
        det->sum_sq_g_plus.assign(static_cast<std::size_t>(j_count), 0.0);
    }
    for (Index j = 0; j < j_count; ++j) {
        const auto& fam = families[static_cast<std::size_t>(j)];
        if (!fam)
            continue;
        const int n = batch.batch(k, j);
        const Vector v_j = joint.segment(layout.offset(j), layout.size(j));
        auto res = random_feasibility_steps(v_j, *fam, sets[static_cast<std::size_t>(j)],
                                            FeasibilityConfig(beta, n), rng, joint);
        if (det) {
            det->batch_sizes[static_cast<std::size_t>(j)] = n;
            det->sum_sq_g_plus[static_cast<std::size_t>(j)] = res.audit.sum_sq_g_plus;
            if (auto w = fam->feasible_witness(joint))
                det->residuals[static_cast<std::size_t>(j)] = feasibility_residual_check(
                    v_j, res.x, *w, res.audit, beta, fam->mg_bound());
        }
        joint.segment(layout.offset(j), layout.size(j)) = res.x;
    }
}

inline void require_method(const StepSchedule& step, Method m, const char* who) {
    if (step.method() != m)
        throw std::invalid_argument(std::string(who) + ": schedule/method mismatch");
}

}  // namespace detail

// v_{k,j} = Pi_{Y_j}[x_{k-1,j} - alpha_{k-1} [F(x_{k-1})]_j], then the
// feasibility batch. One mapping evaluation per iteration.
inline MethodState projection_iteration(MethodState state, const GameMapping& mapping,
                                        const std::vector<SimpleSet>& sets,
                                        const std::vector<FamilyPtr>& families,
                                        const StepSchedule& step, const BatchSchedule& batch,
                                        const FeasibilityConfig& cfg, Rng& rng,
                                        IterationDetail* det = nullptr) {
    detail::require_method(step, Method::Projection, "projection_iteration");
    const double a = step.alpha(state.k);
    Vector v = state.x.values - a * mapping.eval(state.x.values);
    block_project_inplace(sets, state.x.layout, v);
    state.v.values = v;
    detail::feasibility_stage(v, state.x.layout, sets, families, batch, state.k + 1, cfg.beta, rng,
                              det);
    state.x.values = std::move(v);
    state.k += 1;
    state.f_evals += 1;
    if (det) {
        det->alpha = a;
        det->new_f_evals = 1;
    }
    return state;
}

// Two-stage extragradient update; exactly two mapping evaluations per iteration.
inline MethodState korpelevich_iteration(MethodState state, const GameMapping& mapping,
                                         const std::vector<SimpleSet>& sets,
                                         const std::vector<FamilyPtr>& families,
                                         const StepSchedule& step, const BatchSchedule& batch,
                                         const FeasibilityConfig& cfg, Rng& rng,
                                         IterationDetail* det = nullptr) {
    detail::require_method(step, Method::Korpelevich, "korpelevich_iteration");
    const double a = step.alpha(state.k);
    Vector u = state.x.values - a * mapping.eval(state.x.values);
    block_project_inplace(sets, state.x.layout, u);
    Vector v = state.x.values - a * mapping.eval(u);
    block_project_inplace(sets, state.x.layout, v);
    state.u.values = std::move(u);
    state.v.values = v;
    detail::feasibility_stage(v, state.x.layout, sets, families, batch, state.k + 1, cfg.beta, rng,
                              det);
    state.x.values = std::move(v);
    state.k += 1;
    state.f_evals += 2;
    if (det) {
        det->alpha = a;
        det->new_f_evals = 2;
    }
    return state;
}

// Optimistic update reusing the cached F(u_{k-1}); one new mapping evaluation
// per iteration. state.f_u must hold F(u_{k-1}) on entry (u_0 = x_0 with
// F(u_0) evaluated once at warm-up).
inline MethodState popov_iteration(MethodState state, const GameMapping& mapping,
                                   const std::vector<SimpleSet>& sets,
                                   const std::vector<FamilyPtr>& families, const StepSchedule& step,
                                   const BatchSchedule& batch, const FeasibilityConfig& cfg,
                                   Rng& rng, IterationDetail* det = nullptr) {
    detail::require_method(step, Method::Popov, "popov_iteration");
    if (state.f_u.size() != state.x.values.size())
        throw std::invalid_argument("popov_iteration: state.f_u not initialized (warm-up missing)");
    const double a = step.alpha(state.k);
    Vector u = state.x.values - a * state.f_u;
    block_project_inplace(sets, state.x.layout, u);
    Vector f_u_new = mapping.eval(u);
    Vector v = state.x.values - a * f_u_new;
    block_project_inplace(sets, state.x.layout, v);
    state.u.values = std::move(u);
    state.f_u = std::move(f_u_new);
    state.v.values = v;
    detail::feasibility_stage(v, state.x.layout, sets, families, batch, state.k + 1, cfg.beta, rng,
                              det);
    state.x.values = std::move(v);
    state.k += 1;
    state.f_evals += 1;
    if (det) {
        det->alpha = a;
        det->new_f_evals = 1;
    }
    return state;
}

struct RunOptions {
    bool record_solution = true;    // ignored when the problem has no known x*
    bool record_set_metric = true;  // distance oracles or the violation proxy
    int set_metric_stride = 1;      // thin the (possibly expensive) set metric
    bool record_residuals = true;
};

// Drives one method for `iterations` outer iterations and records metrics.
// Deterministic given the seed; trial-level parallelism is safe because the
// problem instance is shared read-only. Per-iteration batch sizes come from
// the batch schedule; cfg contributes the step size beta.
inline RunTrace run(Method method, const ProblemInstance& problem, const StepSchedule& step,
                    const BatchSchedule& batch, const FeasibilityConfig& cfg, long iterations,
                    std::uint64_t seed, const RunOptions& opts = RunOptions{}) {
    problem.validate();
    if (iterations < 0)
        throw std::invalid_argument("run: iteration budget must be >= 0");
    detail::require_method(step, method, "run");

    const BlockLayout& layout = problem.layout;
    const Index j_count = layout.agents();
    const auto nan = std::numeric_limits<double>::quiet_NaN();

    Rng rng(seed);
    Vector x0 = problem.sample_initial(rng);
    block_project_inplace(problem.sets, layout, x0);
    MethodState state(JointDecision(layout, std::move(x0)));
    if (method == Method::Popov) {
        state.f_u = problem.mapping.eval(state.x.values);
        state.f_evals = 1;
    }

    RunTrace trace;
    trace.method = method_name(method);
    trace.seed = seed;
    trace.agents = j_count;
    trace.alpha0 = step.alpha(0);
    trace.alpha1 = step.alpha(1);

    const bool want_solution = opts.record_solution && problem.xstar.has_value();
    bool oracle_dist = opts.record_set_metric;
    bool any_violation_proxy = false;
    for (Index j = 0; j < j_count; ++j) {
        const auto& fam = problem.families[static_cast<std::size_t>(j)];
        if (fam) {
            if (!fam->set_distance(state.x.block(j), state.x.values))
                oracle_dist = false;
            if (fam->max_violation(state.x.block(j), state.x.values))
                any_violation_proxy = true;
        }
        trace.agent_q.push_back(
            fam ? compute_q(cfg.beta, fam->regularity_c(), fam->mg_bound(), true).q : nan);
        trace.agent_q_nominal.push_back(fam && fam->regularity_is_nominal());
    }
    const bool want_set = opts.record_set_metric && (oracle_dist || any_violation_proxy);
    trace.set_metric_is_violation = want_set && !oracle_dist;

    const std::size_t rows = static_cast<std::size_t>(iterations) + 1;
    trace.alpha.assign(rows, 0.0);
    trace.batches.assign(rows * static_cast<std::size_t>(j_count), 0);
    trace.f_evals.assign(rows, 0);
    if (want_solution) {
        trace.sq_dist_solution.assign(rows, 0.0);
        trace.v_sq_dist_xstar.assign(rows * static_cast<std::size_t>(j_count), 0.0);
    }
    if (want_set) {
        trace.set_metric.assign(rows, nan);
        if (oracle_dist)
            trace.sq_dist_set.assign(rows, 0.0);
    }
    if (opts.record_residuals)
        trace.feas_residual.assign(rows, nan);

    const Vector* xstar = want_solution ? &*problem.xstar : nullptr;

    auto record_metrics = [&](long k, const Vector& x, const Vector& v) {
        const auto i = static_cast<std::size_t>(k);
        trace.f_evals[i] = state.f_evals;
        if (xstar) {
            trace.sq_dist_solution[i] = (x - *xstar).squaredNorm();
            for (Index j = 0; j < j_count; ++j) {
                const auto off = layout.offset(j);
                const auto sz = layout.size(j);
                trace.v_sq_dist_xstar[i * static_cast<std::size_t>(j_count) +
                                      static_cast<std::size_t>(j)] =
                    (v.segment(off, sz) - xstar->segment(off, sz)).squaredNorm();
            }
        }
        if (!want_set)
            return;
        const bool due = (k % opts.set_metric_stride == 0) || k == iterations;
        if (oracle_dist) {
            double dist_sum = 0.0, sq_sum = 0.0;
            for (Index j = 0; j < j_count; ++j) {
                const auto& fam = problem.families[static_cast<std::size_t>(j)];
                const auto block = x.segment(layout.offset(j), layout.size(j));
                const double d = fam ? *fam->set_distance(block, x)
                                     : problem.sets[static_cast<std::size_t>(j)].distance(block);
                dist_sum += d;
                sq_sum += d * d;
            }
            trace.set_metric[i] = dist_sum;
            trace.sq_dist_set[i] = sq_sum;
        } else if (due) {
            double worst = 0.0;
            for (Index j = 0; j < j_count; ++j) {
                const auto& fam = problem.families[static_cast<std::size_t>(j)];
                if (!fam)
                    continue;
                const auto block = x.segment(layout.offset(j), layout.size(j));
                if (auto viol = fam->max_violation(block, x))
                    worst = std::max(worst, *viol);
            }
            trace.set_metric[i] = worst;
        }
    };

    record_metrics(0, state.x.values, state.x.values);

    IterationDetail det;
    for (long k = 1; k <= iterations; ++k) {
        switch (method) {
        case Method::Projection:
            state = projection_iteration(std::move(state), problem.mapping, problem.sets,
                                         problem.families, step, batch, cfg, rng, &det);
            break;
        case Method::Korpelevich:
            state = korpelevich_iteration(std::move(state), problem.mapping, problem.sets,
                                          problem.families, step, batch, cfg, rng, &det);
            break;
        case Method::Popov:
            state = popov_iteration(std::move(state), problem.mapping, problem.sets,
                                    problem.families, step, batch, cfg, rng, &det);
            break;
        }
        const auto i = static_cast<std::size_t>(k);
        trace.alpha[i] = det.alpha;
        for (Index j = 0; j < j_count; ++j)
            trace.batches[i * static_cast<std::size_t>(j_count) + static_cast<std::size_t>(j)] =
                det.batch_sizes[static_cast<std::size_t>(j)];
        if (opts.record_residuals) {
            double worst = nan;
            for (double r : det.residuals)
                if (std::isfinite(r) && (!std::isfinite(worst) || r < worst))
                    worst = r;
            trace.feas_residual[i] = worst;
        }
        record_metrics(k, state.x.values, state.v.values);
    }
    return trace;
}

}  // namespace rfvi
