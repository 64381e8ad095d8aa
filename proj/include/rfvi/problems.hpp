#pragma once

#include "rfvi/core.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

// Generators for the two experiment problems with known solutions and
// certified constants, plus small hand-built constraint fixtures.

namespace rfvi {

namespace detail {
// Shared by constraint construction and evaluation so that g_i(x*) is the
// floating-point difference of identically computed quantities.
inline double quad_value(const Matrix& q, const Vector& b, const Vector& x) {
    return x.dot(q * x) + b.dot(x);
}
}  // namespace detail

// Symmetric matrix with eigenvalues sampled U[lo,hi], built as G Lambda G^T
// from the QR factor of a Gaussian matrix. Optionally reports the sampled
// spectrum.
inline Matrix generate_spd_with_spectrum(Index dim, double lo, double hi, Rng& rng,
                                         Vector* spectrum_out = nullptr) {
    if (dim < 1)
        throw std::invalid_argument("generate_spd_with_spectrum: dim must be >= 1");
    if (!(0.0 <= lo && lo <= hi))
        throw std::invalid_argument("generate_spd_with_spectrum: need 0 <= lo <= hi");
    std::uniform_real_distribution<double> unif(lo, hi);
    Vector lambda(dim);
    for (Index i = 0; i < dim; ++i)
        lambda[i] = unif(rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(dim, dim);
    for (Index i = 0; i < dim; ++i)
        for (Index j = 0; j < dim; ++j)
            m(i, j) = normal(rng);
    Eigen::HouseholderQR<Matrix> qr(m);
    Matrix g = qr.householderQ();
    const double ortho_err = (g.transpose() * g - Matrix::Identity(dim, dim)).cwiseAbs().maxCoeff();
    if (ortho_err > 1e-10)
        throw std::runtime_error("generate_spd_with_spectrum: QR factor not orthogonal");
    Matrix s = g * lambda.asDiagonal() * g.transpose();
    s = 0.5 * (s + s.transpose().eval());
    if (spectrum_out)
        *spectrum_out = lambda;
    return s;
}

// Finite family of quadratic level-set constraints g_i(x) = <x,Q_i x> + <b_i,x> - c_i
// with Q_i PSD. Sampling is uniform over the index set.
class QuadraticConstraintFamily final : public ConstraintFamily {
  public:
    QuadraticConstraintFamily(Index agent, std::vector<Matrix> q, std::vector<Vector> b,
                              std::vector<double> c, double max_lambda, double box_radius,
                              std::optional<Vector> witness)
        : agent_(agent), q_(std::move(q)), b_(std::move(b)), c_(std::move(c)),
          max_lambda_(max_lambda), box_radius_(box_radius), witness_(std::move(witness)) {
        if (q_.empty() || q_.size() != b_.size() || q_.size() != c_.size())
            throw std::invalid_argument("QuadraticConstraintFamily: inconsistent constraint data");
        dim_ = q_.front().rows();
        max_b_norm_ = 0.0;
        for (const Vector& bi : b_)
            max_b_norm_ = std::max(max_b_norm_, bi.norm());
        // sup over ||x|| <= R of ||2 Q_i x + b_i||, with slack covering the
        // roundoff between the sampled and realized spectra
        mg_ = (2.0 * max_lambda_ * box_radius + max_b_norm_) * (1.0 + 1e-9);
    }

    Index agent() const override { return agent_; }
    Index dimension() const override { return dim_; }

    ConstraintHandle sample(Rng& rng) const override {
        std::uniform_int_distribution<std::uint64_t> pick(0, q_.size() - 1);
        return pick(rng);
    }

    double value(const ConstraintHandle& h, const Vector& x, const Vector&) const override {
        const auto i = std::get<std::uint64_t>(h);
        return detail::quad_value(q_[i], b_[i], x) - c_[i];
    }

    Vector subgradient(const ConstraintHandle& h, const Vector& x, const Vector& ctx) const override {
        if (positive_part(value(h, x, ctx)) == 0.0)
            return fallback_direction(dim_);
        const auto i = std::get<std::uint64_t>(h);
        return 2.0 * (q_[i] * x) + b_[i];
    }

    double mg_bound() const override { return mg_; }
    // No exact set-distance oracle exists for an intersection of quadratic
    // sets; c is nominal and only labels diagnostics.
    double regularity_c() const override { return 1.0; }
    bool regularity_is_nominal() const override { return true; }

    std::optional<Vector> feasible_witness(const Vector&) const override { return witness_; }

    std::optional<double> max_violation(const Vector& x, const Vector&) const override {
        double worst = 0.0;
        for (std::size_t i = 0; i < q_.size(); ++i)
            worst = std::max(worst, positive_part(detail::quad_value(q_[i], b_[i], x) - c_[i]));
        return worst;
    }

    std::optional<double> mg_bound_within(double radius) const override {
        return 2.0 * max_lambda_ * radius + max_b_norm_;
    }

    std::size_t count() const { return q_.size(); }
    const Matrix& q_matrix(std::size_t i) const { return q_[i]; }
    const Vector& b_vector(std::size_t i) const { return b_[i]; }
    double c_scalar(std::size_t i) const { return c_[i]; }
    double max_lambda() const { return max_lambda_; }
    double box_radius() const { return box_radius_; }

  private:
    Index agent_;
    Index dim_ = 0;
    std::vector<Matrix> q_;
    std::vector<Vector> b_;
    std::vector<double> c_;
    double max_lambda_ = 0.0;
    double box_radius_ = 0.0;
    double max_b_norm_ = 0.0;
    double mg_ = 0.0;
    std::optional<Vector> witness_;
};

// Infinite family g_xi(x2) = ||x2 - x1||^2 - xi with xi ~ U[0, xi_max]. The
// anchor x1 is agent 1's block of the joint context (the freezing protocol),
// or a fixed vector for standalone use. Since the intersection over xi is the
// singleton {x1}, the exact set distance is ||x2 - x1||.
class ImitationExplorationFamily final : public ConstraintFamily {
  public:
    ImitationExplorationFamily(Index agent, Index dim, double xi_max, Index anchor_offset,
                               double mg_bound, std::optional<Vector> fixed_anchor = std::nullopt)
        : agent_(agent), dim_(dim), xi_max_(xi_max), anchor_offset_(anchor_offset), mg_(mg_bound),
          fixed_anchor_(std::move(fixed_anchor)) {
        if (!(xi_max_ > 0.0))
            throw std::invalid_argument("ImitationExplorationFamily: xi_max must be positive");
        if (!(mg_ > 0.0))
            throw std::invalid_argument("ImitationExplorationFamily: mg bound must be positive");
    }

    Index agent() const override { return agent_; }
    Index dimension() const override { return dim_; }

    ConstraintHandle sample(Rng& rng) const override {
        std::uniform_real_distribution<double> unif(0.0, xi_max_);
        return unif(rng);
    }

    double value(const ConstraintHandle& h, const Vector& x, const Vector& ctx) const override {
        return (x - anchor(ctx)).squaredNorm() - std::get<double>(h);
    }

    Vector subgradient(const ConstraintHandle& h, const Vector& x, const Vector& ctx) const override {
        const Vector a = anchor(ctx);
        if (positive_part((x - a).squaredNorm() - std::get<double>(h)) == 0.0)
            return fallback_direction(dim_);
        return 2.0 * (x - a);
    }

    // Certified over the reachable region: 2 (initial offset + box diameter).
    double mg_bound() const override { return mg_; }

    // Unit-distance anchor (calibration ratio at r = 1, safety factor 2).
    // No global c exists for this family: dist^2 / E[(g^+)^2] ~ 0.3 r^-4 as
    // r -> 0, so the value is only meaningful at unit scale.
    double regularity_c() const override {
        return 2.0 * 3.0 * xi_max_ / (1.0 - std::pow(1.0 - xi_max_, 3));
    }

    std::optional<double> set_distance(const Vector& x, const Vector& ctx) const override {
        return (x - anchor(ctx)).norm();
    }

    std::optional<Vector> feasible_witness(const Vector& ctx) const override { return anchor(ctx); }

    double xi_max() const { return xi_max_; }
    Index anchor_offset() const { return anchor_offset_; }

  private:
    Vector anchor(const Vector& ctx) const {
        if (fixed_anchor_)
            return *fixed_anchor_;
        if (ctx.size() < anchor_offset_ + dim_)
            throw std::invalid_argument(
                "ImitationExplorationFamily: joint context missing the anchor block");
        return ctx.segment(anchor_offset_, dim_);
    }

    Index agent_;
    Index dim_;
    double xi_max_;
    Index anchor_offset_;
    double mg_ = 0.0;
    std::optional<Vector> fixed_anchor_;
};

// Single halfspace g(x) = <a,x> - b; exact distance oracle (a^T x - b)^+ / ||a||.
// Test fixture.
class HalfspaceFamily final : public ConstraintFamily {
  public:
    HalfspaceFamily(Index agent, Vector a, double b) : agent_(agent), a_(std::move(a)), b_(b) {
        if (a_.norm() == 0.0)
            throw std::invalid_argument("HalfspaceFamily: zero normal");
    }

    Index agent() const override { return agent_; }
    Index dimension() const override { return a_.size(); }
    ConstraintHandle sample(Rng&) const override { return std::uint64_t{0}; }

    double value(const ConstraintHandle&, const Vector& x, const Vector&) const override {
        return a_.dot(x) - b_;
    }

    Vector subgradient(const ConstraintHandle& h, const Vector& x, const Vector& ctx) const override {
        if (positive_part(value(h, x, ctx)) == 0.0)
            return fallback_direction(a_.size());
        return a_;
    }

    double mg_bound() const override { return a_.norm(); }
    double regularity_c() const override { return 1.0; }

    std::optional<double> set_distance(const Vector& x, const Vector&) const override {
        return positive_part(a_.dot(x) - b_) / a_.norm();
    }

    std::optional<Vector> feasible_witness(const Vector&) const override {
        // foot of the perpendicular from the origin onto the boundary
        return Vector((b_ / a_.squaredNorm()) * a_);
    }

  private:
    Index agent_;
    Vector a_;
    double b_ = 0.0;
};

// --- matrix game --------------------------------------------------------------

struct MatrixGameSpec {
    Index n_per_agent = 100;
    double mu_target = 1.0;
    double l_target = 3.0;
    int n_constraints = 10000;
    double box_half_width = 10000.0;
    std::pair<double, double> delta_range{1.0, 2.0};
    std::pair<double, double> chi_range{1.0, 2.0};
    std::pair<double, double> q_eig_range{0.0, 2.0};
    std::uint64_t seed = 0;
};

// Two-player quadratic game with N quadratic constraints per agent, built so
// that x* = -(grad F)^{-1} [p;s] solves the unconstrained VI, every g_i(x*) is
// strictly interior by the sampled margin, and the declared mu/L are the
// realized eigenvalue extremes of the Jacobian. The offset vector is
// recomputed from the rounded x* so that F(x*) is bitwise zero.
inline ProblemInstance build_matrix_game(const MatrixGameSpec& spec) {
    if (spec.n_per_agent < 1 || spec.n_constraints < 1)
        throw std::invalid_argument("build_matrix_game: invalid sizes");
    const Index n = spec.n_per_agent;
    const Index total = 2 * n;
    Rng rng(spec.seed);

    Matrix jac = generate_spd_with_spectrum(total, spec.mu_target, spec.l_target, rng);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(jac, Eigen::EigenvaluesOnly);
    const double mu = eig.eigenvalues().minCoeff();
    const double lip = eig.eigenvalues().maxCoeff();
    if (!(mu > 0.0))
        throw std::runtime_error("build_matrix_game: Jacobian not positive definite");

    std::normal_distribution<double> normal(0.0, 1.0);
    Vector ps(total);
    for (Index i = 0; i < total; ++i)
        ps[i] = normal(rng);
    Vector xstar = jac.ldlt().solve(-ps);
    Vector offset = -(jac * xstar);
    if (xstar.cwiseAbs().maxCoeff() >= spec.box_half_width)
        throw std::runtime_error("build_matrix_game: x* escaped the box; resample the seed");

    const double box_radius = spec.box_half_width * std::sqrt(static_cast<double>(n));
    auto make_family = [&](Index agent, const std::pair<double, double>& margin_range) {
        std::uniform_real_distribution<double> margin(margin_range.first, margin_range.second);
        const Vector xs = xstar.segment(agent * n, n);
        std::vector<Matrix> qs;
        std::vector<Vector> bs;
        std::vector<double> cs;
        qs.reserve(static_cast<std::size_t>(spec.n_constraints));
        double max_lambda = 0.0;
        for (int i = 0; i < spec.n_constraints; ++i) {
            Vector spectrum;
            qs.push_back(generate_spd_with_spectrum(n, spec.q_eig_range.first,
                                                    spec.q_eig_range.second, rng, &spectrum));
            max_lambda = std::max(max_lambda, spectrum.maxCoeff());
            Vector b(n);
            for (Index r = 0; r < n; ++r)
                b[r] = normal(rng);
            bs.push_back(std::move(b));
            cs.push_back(detail::quad_value(qs.back(), bs.back(), xs) + margin(rng));
        }
        return std::make_shared<QuadraticConstraintFamily>(agent, std::move(qs), std::move(bs),
                                                           std::move(cs), max_lambda, box_radius,
                                                           xs);
    };

    ProblemInstance inst{
        "matrix_game",
        BlockLayout({n, n}),
        GameMapping::from_affine(jac, offset, mu, lip),
        {SimpleSet::box(Vector::Constant(n, -spec.box_half_width),
                        Vector::Constant(n, spec.box_half_width)),
         SimpleSet::box(Vector::Constant(n, -spec.box_half_width),
                        Vector::Constant(n, spec.box_half_width))},
        {make_family(0, spec.delta_range), make_family(1, spec.chi_range)},
        xstar,
        [total](Rng& r) {
            std::normal_distribution<double> nd(0.0, 1.0);
            Vector x(total);
            for (Index i = 0; i < total; ++i)
                x[i] = nd(r);
            return x;
        }};
    inst.validate();
    return inst;
}

// --- imitation game ------------------------------------------------------------

struct ImitationGameSpec {
    double xi_max = 0.1;
    double box_lo = 0.1;
    double box_hi = 10.0;
    std::uint64_t seed = 0;  // interface parity; construction is deterministic
};

// Imitation learning with exploration: agent 1 projects directly onto its box
// (no functional constraints), agent 2 chases agent 1's latest block through
// sampled exploration constraints. x* = (0.1, 0.1, 0.1, 0.1), mu = 1, L = 3.
inline ProblemInstance build_imitation_game(const ImitationGameSpec& spec) {
    Matrix a(4, 4);
    a << 2, 0, 1, 0,  //
        0, 2, 0, 1,   //
        1, 0, 2, 0,   //
        0, 1, 0, 2;
    // 2 (initial offset + box diameter); x0 ~ U[0,1]^4 keeps the offset <= sqrt(2)
    const double diam = (spec.box_hi - spec.box_lo) * std::sqrt(2.0);
    auto family = std::make_shared<ImitationExplorationFamily>(1, 2, spec.xi_max, 0,
                                                               2.0 * (std::sqrt(2.0) + diam));

    ProblemInstance inst{"imitation",
                         BlockLayout({2, 2}),
                         GameMapping::from_affine(a, Vector::Zero(4), 1.0, 3.0),
                         {SimpleSet::box(Vector::Constant(2, spec.box_lo),
                                         Vector::Constant(2, spec.box_hi)),
                          SimpleSet::full_space(2)},
                         {nullptr, family},
                         Vector::Constant(4, 0.1),
                         [](Rng& r) {
                             std::uniform_real_distribution<double> unif(0.0, 1.0);
                             Vector x(4);
                             for (Index i = 0; i < 4; ++i)
                                 x[i] = unif(r);
                             return x;
                         }};
    inst.validate();
    return inst;
}

// --- regularity calibration -----------------------------------------------------

struct CalibrationDiagnostics {
    double max_ratio = 0.0;
    std::size_t points_used = 0;
    std::size_t points_skipped = 0;  // feasible or unresolved (empirical mean zero)
    bool all_feasible = false;
};

// Monte Carlo diagnostic for the regularity constant: 2 * max over sampled
// x in Y of dist^2(x,S) / mean[(g^+)^2]. Requires the family's exact distance
// oracle. Never gates the algorithms; returns the documented default 1 when
// every sampled point is feasible.
inline double calibrate_c(const ConstraintFamily& family, const SimpleSet& set, int n_samples,
                          Rng& rng, const Vector& context = Vector(),
                          CalibrationDiagnostics* diag = nullptr, int handle_samples = 256) {
    if (n_samples < 1 || handle_samples < 1)
        throw std::invalid_argument("calibrate_c: sample counts must be positive");
    auto draw_point = [&]() -> Vector {
        const Index d = set.dimension();
        switch (set.kind()) {
        case SimpleSet::Kind::Box: {
            Vector x(d);
            for (Index i = 0; i < d; ++i) {
                std::uniform_real_distribution<double> unif(set.lower()[i], set.upper()[i]);
                x[i] = unif(rng);
            }
            return x;
        }
        case SimpleSet::Kind::Ball:
        case SimpleSet::Kind::FullSpace: {
            // unit-scale Gaussian cloud around a feasible anchor
            Vector anchor = family.feasible_witness(context).value_or(Vector::Zero(d));
            std::normal_distribution<double> nd(0.0, 1.0);
            Vector x(d);
            for (Index i = 0; i < d; ++i)
                x[i] = anchor[i] + nd(rng);
            return set.kind() == SimpleSet::Kind::Ball ? set.project(x) : x;
        }
        }
        throw std::logic_error("calibrate_c: unreachable");
    };

    CalibrationDiagnostics local;
    bool any_infeasible = false;
    for (int s = 0; s < n_samples; ++s) {
        const Vector x = draw_point();
        auto dist = family.set_distance(x, context);
        if (!dist)
            throw std::invalid_argument("calibrate_c: family lacks an exact set-distance oracle");
        if (*dist == 0.0) {
            ++local.points_skipped;
            continue;
        }
        any_infeasible = true;
        double mean_sq = 0.0;
        for (int t = 0; t < handle_samples; ++t) {
            const double g = positive_part(family.value(family.sample(rng), x, context));
            mean_sq += g * g;
        }
        mean_sq /= static_cast<double>(handle_samples);
        if (mean_sq == 0.0) {
            ++local.points_skipped;
            continue;
        }
        local.max_ratio = std::max(local.max_ratio, *dist * *dist / mean_sq);
        ++local.points_used;
    }
    local.all_feasible = !any_infeasible;
    if (diag)
        *diag = local;
    if (local.points_used == 0)
        return 1.0;
    return 2.0 * local.max_ratio;
}

}  // namespace rfvi
