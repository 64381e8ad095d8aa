#pragma once

#include "rfvi/core.hpp"

#include <cmath>
#include <vector>

// One-step Polyak feasibility update and the batched random feasibility loop,
// plus the q-constant bookkeeping.

namespace rfvi {

struct FeasibilityConfig {
    double beta = 1.0;  // in (0,2), required by the contraction beta(2-beta) > 0
    int batch = 1;      // N, sequential steps per call

    FeasibilityConfig(double beta_in, int batch_in) : beta(beta_in), batch(batch_in) {
        if (!(beta > 0.0 && beta < 2.0))
            throw std::invalid_argument("FeasibilityConfig: beta must lie in (0,2)");
        if (batch < 1)
            throw std::invalid_argument("FeasibilityConfig: batch must be >= 1");
    }
};

// q = beta(2-beta) / (c M_g^2), the per-sample contraction factor of the
// expected squared set distance.
struct QConstant {
    double q = 0.0;
    double beta = 0.0;
    double c = 0.0;
    double mg = 0.0;
};

inline QConstant compute_q(double beta, double c, double mg, bool clamp = false) {
    if (!(beta > 0.0 && beta < 2.0))
        throw std::invalid_argument("compute_q: beta must lie in (0,2)");
    if (!(c > 0.0) || !(mg > 0.0))
        throw std::invalid_argument("compute_q: c and mg must be positive");
    double q = beta * (2.0 - beta) / (c * mg * mg);
    if (q >= 1.0) {
        if (!clamp)
            throw std::domain_error("compute_q: q >= 1; the contraction argument needs q < 1");
        q = 1.0 - 1e-12;
    }
    return QConstant{q, beta, c, mg};
}

struct PolyakStepInfo {
    double g_plus = 0.0;
    double subgrad_norm = 0.0;
};

// z_hat = Pi_set[ z - beta g^+(z)/||d||^2 d ]. Fixes z exactly when g^+(z) = 0.
inline Vector polyak_step(const Vector& z, const ConstraintHandle& handle,
                          const ConstraintFamily& family, const SimpleSet& set, double beta,
                          const Vector& context, PolyakStepInfo* info = nullptr) {
    if (!(beta > 0.0 && beta < 2.0))
        throw std::invalid_argument("polyak_step: beta must lie in (0,2)");
    const double g_plus = positive_part(family.value(handle, z, context));
    if (info) {
        info->g_plus = g_plus;
        info->subgrad_norm = 0.0;
    }
    if (g_plus == 0.0)
        return z;
    const Vector d = family.subgradient(handle, z, context);
    const double d_sq = d.squaredNorm();
    // No clamping here: silently capping the step would corrupt the
    // per-step contraction the residual audits assert.
    if (d_sq < 1e-24)
        throw contract_error("polyak_step: zero-norm subgradient with g^+(z) > 0");
    if (info)
        info->subgrad_norm = std::sqrt(d_sq);
    return set.project(z - (beta * g_plus / d_sq) * d);
}

// Per-batch audit: g^+(z^{i-1}) and ||d_i|| for each step, and the running
// sum of squares needed by the feasibility-residual inequality.
struct FeasibilityAudit {
    std::vector<double> g_plus;
    std::vector<double> subgrad_norm;
    double sum_sq_g_plus = 0.0;
};

struct FeasibilityResult {
    Vector x;
    FeasibilityAudit audit;
};

// Algorithm: z^0 = v; for i = 1..N sample a constraint and take one Polyak
// step; output x = z^N. Strictly sequential: z^i depends on z^{i-1}.
inline FeasibilityResult random_feasibility_steps(const Vector& v, const ConstraintFamily& family,
                                                  const SimpleSet& set, const FeasibilityConfig& cfg,
                                                  Rng& rng, const Vector& context) {
    FeasibilityResult res;
    res.x = v;
    res.audit.g_plus.reserve(static_cast<std::size_t>(cfg.batch));
    res.audit.subgrad_norm.reserve(static_cast<std::size_t>(cfg.batch));
    for (int i = 0; i < cfg.batch; ++i) {
        const ConstraintHandle h = family.sample(rng);
        PolyakStepInfo info;
        res.x = polyak_step(res.x, h, family, set, cfg.beta, context, &info);
        res.audit.g_plus.push_back(info.g_plus);
        res.audit.subgrad_norm.push_back(info.subgrad_norm);
        res.audit.sum_sq_g_plus += info.g_plus * info.g_plus;
    }
    return res;
}

// ||v - x_bar||^2 - ||x - x_bar||^2 - beta(2-beta)/M_g^2 * sum_i (g_i^+)^2.
// Nonnegative (up to roundoff) for every known-feasible witness x_bar on every
// realized trajectory; this is the deterministic half of the feasibility
// theorem, not just an in-expectation statement.
inline double feasibility_residual_check(const Vector& v, const Vector& x,
                                         const Vector& feasible_point, const FeasibilityAudit& audit,
                                         double beta, double mg) {
    const double lhs = (v - feasible_point).squaredNorm();
    const double rhs = (x - feasible_point).squaredNorm();
    return lhs - rhs - beta * (2.0 - beta) / (mg * mg) * audit.sum_sq_g_plus;
}

}  // namespace rfvi
