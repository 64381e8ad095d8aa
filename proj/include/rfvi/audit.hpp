#pragma once

#include "rfvi/core.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

// Distance oracles, theorem-inequality residual audits, and trace statistics.
// Audits are read-only over traces.

namespace rfvi {

// One row of a run trace, assembled on demand from the flat storage below.
struct IterationRecord {
    long k = 0;
    double alpha = 0.0;                        // alpha_{k-1} used to produce iterate k
    std::vector<int> batches;                  // N_{k,j} per agent
    std::optional<double> sq_dist_solution;    // ||x_k - x*||^2
    std::optional<double> set_metric;          // dist(x_k,S) or max-violation proxy
    std::optional<double> sq_dist_set;         // sum_j dist^2(x_{k,j},S_j) when oracles exist
    std::optional<double> feas_residual;       // min over audited agents
    long f_evals = 0;                          // cumulative mapping evaluations
};

// Per-run record, stored column-wise. Row k = 0 is the initial point.
struct RunTrace {
    std::string method;
    std::uint64_t seed = 0;
    Index agents = 0;
    bool set_metric_is_violation = false;  // proxy label: max_i g_i^+, NOT a distance
    double alpha0 = 0.0;                   // recorded separately; the Popov rate
    double alpha1 = 0.0;                   // bound references both

    std::vector<double> alpha;             // size T+1, alpha[0] = 0
    std::vector<int> batches;              // (T+1) * agents, row-major; row 0 = 0
    std::vector<double> sq_dist_solution;  // T+1, or empty when x* unknown
    std::vector<double> set_metric;        // T+1 (NaN where stride skipped), or empty
    std::vector<double> sq_dist_set;       // T+1, or empty when any family lacks an oracle
    std::vector<double> v_sq_dist_xstar;   // (T+1) * agents: ||v_{k,j} - x*_j||^2, or empty
    std::vector<double> feas_residual;     // T+1, or empty when no agent has a witness
    std::vector<long> f_evals;             // T+1
    std::vector<double> agent_q;           // per agent; NaN for agents without a family
    std::vector<bool> agent_q_nominal;     // q built from a nominal (flagged) c

    long iterations() const { return static_cast<long>(alpha.size()) - 1; }

    double min_feas_residual() const {
        double m = std::numeric_limits<double>::infinity();
        for (double r : feas_residual)
            if (std::isfinite(r) && r < m)
                m = r;
        return m;
    }

    IterationRecord record(long k) const {
        const auto i = static_cast<std::size_t>(k);
        IterationRecord rec;
        rec.k = k;
        rec.alpha = alpha.at(i);
        rec.batches.assign(batches.begin() + k * agents, batches.begin() + (k + 1) * agents);
        if (!sq_dist_solution.empty())
            rec.sq_dist_solution = sq_dist_solution.at(i);
        if (!set_metric.empty() && std::isfinite(set_metric.at(i)))
            rec.set_metric = set_metric.at(i);
        if (!sq_dist_set.empty())
            rec.sq_dist_set = sq_dist_set.at(i);
        if (!feas_residual.empty() && std::isfinite(feas_residual.at(i)))
            rec.feas_residual = feas_residual.at(i);
        rec.f_evals = f_evals.at(i);
        return rec;
    }
};

inline double sq_dist_to_solution(const JointDecision& x, const JointDecision& xstar) {
    if (!(x.layout == xstar.layout))
        throw std::invalid_argument("sq_dist_to_solution: layout mismatch");
    return (x.values - xstar.values).squaredNorm();
}

// Sum over agents of the exact per-agent set distance; absent when some agent
// has a constraint family without a distance oracle (matrix game).
inline std::optional<double> dist_to_set(const JointDecision& x, const ProblemInstance& problem) {
    double total = 0.0;
    for (Index j = 0; j < x.layout.agents(); ++j) {
        const auto& fam = problem.families[static_cast<std::size_t>(j)];
        if (fam) {
            auto d = fam->set_distance(x.block(j), x.values);
            if (!d)
                return std::nullopt;
            total += *d;
        } else {
            total += problem.sets[static_cast<std::size_t>(j)].distance(x.block(j));
        }
    }
    return total;
}

// --- geometric decay audit --------------------------------------------------

struct GeoDecayPoint {
    long k = 0;
    double mean_sq_dist = 0.0;   // Monte Carlo mean of sum_j dist^2(x_{k,j},S_j)
    double mean_bound = 0.0;     // mean of sum_j (1-q_j)^{N_{k,j}} ||v_{k,j}-x*_j||^2
    double diff_std_err = 0.0;   // standard error of the paired difference
    bool pass = false;
};

struct GeoDecayReport {
    std::size_t trials = 0;
    std::size_t requested_trials = 1000;
    bool enough_trials = false;
    bool applicable = false;  // oracles + x* + non-nominal q available
    std::vector<GeoDecayPoint> points;
    std::vector<long> violations;

    bool all_pass() const { return applicable && violations.empty(); }
};

// Checks E[dist^2(x_k,S)] <= sum_j (1-q_j)^{N_{k,j}} ||v_{k,j}-x*_j||^2 in the
// Monte Carlo mean, within a 3-sigma band on the paired per-trial difference.
// The sum runs over agents with constraint families; constraint-free agents
// contribute exactly zero distance, so dropping their slack term only tightens
// the test. Traces must come from runs of identical length and schedules.
inline GeoDecayReport geometric_decay_audit(std::span<const RunTrace> traces,
                                            std::size_t min_trials = 1000) {
    GeoDecayReport rep;
    rep.trials = traces.size();
    rep.requested_trials = min_trials;
    rep.enough_trials = traces.size() >= min_trials;
    if (traces.empty())
        return rep;

    const RunTrace& t0 = traces.front();
    const long iters = t0.iterations();
    rep.applicable = !t0.sq_dist_set.empty() && !t0.v_sq_dist_xstar.empty();
    for (Index j = 0; j < t0.agents; ++j)
        if (std::isfinite(t0.agent_q[static_cast<std::size_t>(j)]) &&
            t0.agent_q_nominal[static_cast<std::size_t>(j)])
            rep.applicable = false;
    if (!rep.applicable)
        return rep;

    const double n = static_cast<double>(traces.size());
    for (long k = 1; k <= iters; ++k) {
        double sum_d = 0.0, sum_b = 0.0, sum_diff = 0.0, sum_diff2 = 0.0;
        for (const RunTrace& tr : traces) {
            const double d = tr.sq_dist_set[static_cast<std::size_t>(k)];
            double b = 0.0;
            for (Index j = 0; j < tr.agents; ++j) {
                const double q = tr.agent_q[static_cast<std::size_t>(j)];
                if (!std::isfinite(q))
                    continue;  // no family for this agent
                const int nkj = tr.batches[static_cast<std::size_t>(k * tr.agents + j)];
                const double vsq = tr.v_sq_dist_xstar[static_cast<std::size_t>(k * tr.agents + j)];
                b += std::pow(1.0 - q, nkj) * vsq;
            }
            sum_d += d;
            sum_b += b;
            sum_diff += d - b;
            sum_diff2 += (d - b) * (d - b);
        }
        GeoDecayPoint pt;
        pt.k = k;
        pt.mean_sq_dist = sum_d / n;
        pt.mean_bound = sum_b / n;
        const double mean_diff = sum_diff / n;
        const double var = n > 1 ? std::max(0.0, (sum_diff2 - n * mean_diff * mean_diff) / (n - 1)) : 0.0;
        pt.diff_std_err = std::sqrt(var / n);
        pt.pass = mean_diff <= 3.0 * pt.diff_std_err + 1e-15;
        rep.points.push_back(pt);
        if (!pt.pass)
            rep.violations.push_back(k);
    }
    return rep;
}

// --- analysis constants --------------------------------------------------------

// zeta_k is an artifact of the convergence analysis, never a runtime
// parameter: it is the Young-inequality weight chosen so that a single
// feasibility sample per iteration is already admissible. For the projection
// and Korpelevich methods the selection is
//
//   zeta_k = q/(1-q) * (1 - alpha_k mu),
//
// and for the Popov method
//
//   zeta_k = q/(1-q) * (1 - alpha_k mu + 2 tau L^2 alpha_k^2).
//
// Both make (zeta_k + 1 - c_k)/(1 - c_k) = 1/(1-q) exactly (c_k the
// respective contraction coefficient), which is the N_{k,j} >= 1 admissibility
// identity checked by zeta_batch_requirement below.
inline double zeta_projection_like(double q, double alpha, double mu) {
    return q / (1.0 - q) * (1.0 - alpha * mu);
}

inline double zeta_popov(double q, double alpha, double mu, double lipschitz, double tau) {
    return q / (1.0 - q) *
           (1.0 - alpha * mu + 2.0 * tau * lipschitz * lipschitz * alpha * alpha);
}

// Batch-size lower bound implied by a zeta choice:
// log_{1/(1-q)}((zeta + coeff)/coeff) with coeff the contraction coefficient.
// Equals 1 exactly under the selections above.
inline double zeta_batch_requirement(double q, double zeta, double coeff) {
    if (!(q > 0.0 && q < 1.0) || !(coeff > 0.0))
        throw std::invalid_argument("zeta_batch_requirement: need q in (0,1), coeff > 0");
    return std::log((zeta + coeff) / coeff) / std::log(1.0 / (1.0 - q));
}

// --- rate fit ----------------------------------------------------------------

struct RateFit {
    double c = 0.0;  // log err = log c - p log T
    double p = 0.0;
};

// Least-squares fit of log(err) against log(T) over the supplied tail points.
inline RateFit rate_fit(std::span<const std::pair<double, double>> tail) {
    if (tail.size() < 2)
        throw std::invalid_argument("rate_fit: need at least two points");
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (const auto& [t, err] : tail) {
        if (!(err > 0.0) || !(t > 0.0))
            throw std::invalid_argument("rate_fit: nonpositive input");
        const double x = std::log(t), y = std::log(err);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double n = static_cast<double>(tail.size());
    const double denom = n * sxx - sx * sx;
    if (denom <= 0.0)
        throw std::invalid_argument("rate_fit: degenerate abscissae");
    const double slope = (n * sxy - sx * sy) / denom;
    const double intercept = (sy - slope * sx) / n;
    return RateFit{std::exp(intercept), -slope};
}

}  // namespace rfvi
