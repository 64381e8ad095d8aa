#include "rfvi/audit.hpp"
#include "rfvi/methods.hpp"
#include "rfvi/problems.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace rfvi;

namespace {

Vector vec2(double a, double b) {
    Vector v(2);
    v << a, b;
    return v;
}

// family whose single constraint never binds inside the test region and whose
// distance oracle reports zero there
class SlackFamily final : public ConstraintFamily {
  public:
    Index agent() const override { return 0; }
    Index dimension() const override { return 2; }
    ConstraintHandle sample(Rng&) const override { return std::uint64_t{0}; }
    double value(const ConstraintHandle&, const Vector& x, const Vector&) const override {
        return x.squaredNorm() - 1e6;
    }
    Vector subgradient(const ConstraintHandle& h, const Vector& x, const Vector& c) const override {
        if (positive_part(value(h, x, c)) == 0.0)
            return fallback_direction(2);
        return 2.0 * x;
    }
    double mg_bound() const override { return 4000.0; }
    double regularity_c() const override { return 1.0; }
    std::optional<double> set_distance(const Vector& x, const Vector&) const override {
        return positive_part(x.norm() - 1000.0);
    }
    std::optional<Vector> feasible_witness(const Vector&) const override {
        return Vector(Vector::Zero(2));
    }
};

}  // namespace

TEST_CASE("sq_dist_to_solution") {
    BlockLayout layout({2, 2});
    JointDecision x(layout, Vector::Zero(4));
    JointDecision xs(layout, Vector::Constant(4, 0.1));
    CHECK(sq_dist_to_solution(xs, xs) == 0.0);
    CHECK_THAT(sq_dist_to_solution(x, xs), Catch::Matchers::WithinAbs(0.04, 1e-15));

    BlockLayout one({1});
    JointDecision a(one, Vector::Constant(1, 4.0));
    JointDecision b(one, Vector::Constant(1, 1.0));
    CHECK(sq_dist_to_solution(a, b) == 9.0);
    CHECK_THROWS_AS(sq_dist_to_solution(a, xs), std::invalid_argument);
}

TEST_CASE("dist_to_set") {
    ProblemInstance im = build_imitation_game(ImitationGameSpec{});

    SECTION("imitation: coincident blocks give zero") {
        Vector v(4);
        v << 0.5, 0.5, 0.5, 0.5;
        auto d = dist_to_set(JointDecision(im.layout, v), im);
        REQUIRE(d.has_value());
        CHECK(*d == 0.0);
    }

    SECTION("imitation: oracle distance is the block gap") {
        Vector v(4);
        v << 0.5, 0.5, 0.8, 0.9;
        auto d = dist_to_set(JointDecision(im.layout, v), im);
        REQUIRE(d.has_value());
        CHECK_THAT(*d, Catch::Matchers::WithinAbs(0.5, 1e-12));
    }

    SECTION("agent-1 box distance contributes when outside") {
        Vector v(4);
        v << 0.0, 0.5, 0.0, 0.5;
        auto d = dist_to_set(JointDecision(im.layout, v), im);
        REQUIRE(d.has_value());
        CHECK_THAT(*d, Catch::Matchers::WithinAbs(0.1, 1e-12));
    }

    SECTION("matrix game has no exact oracle") {
        MatrixGameSpec spec;
        spec.n_per_agent = 4;
        spec.n_constraints = 10;
        spec.seed = 1;
        ProblemInstance mg = build_matrix_game(spec);
        CHECK(!dist_to_set(JointDecision(mg.layout, Vector::Zero(8)), mg).has_value());
    }
}

TEST_CASE("rate_fit") {
    SECTION("synthetic 1/T gives p=1, C=1") {
        std::vector<std::pair<double, double>> pts;
        for (double t = 50; t <= 500; t += 25)
            pts.emplace_back(t, 1.0 / t);
        const RateFit fit = rate_fit(pts);
        CHECK_THAT(fit.p, Catch::Matchers::WithinAbs(1.0, 1e-9));
        CHECK_THAT(fit.c, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }

    SECTION("synthetic c/T^2 gives p=2") {
        std::vector<std::pair<double, double>> pts;
        for (double t = 50; t <= 500; t += 25)
            pts.emplace_back(t, 7.5 / (t * t));
        const RateFit fit = rate_fit(pts);
        CHECK_THAT(fit.p, Catch::Matchers::WithinAbs(2.0, 1e-9));
        CHECK_THAT(fit.c, Catch::Matchers::WithinAbs(7.5, 1e-6));
    }

    SECTION("errors") {
        std::vector<std::pair<double, double>> bad{{10.0, 1.0}, {20.0, -1.0}};
        CHECK_THROWS_AS(rate_fit(bad), std::invalid_argument);
        std::vector<std::pair<double, double>> one{{10.0, 1.0}};
        CHECK_THROWS_AS(rate_fit(one), std::invalid_argument);
    }
}

TEST_CASE("geometric_decay_audit bound formula: N=1 vs N=3 ratio is (1-q)^2") {
    // hand-built single-agent traces with fixed v-distance
    auto make_trace = [](int batch, double q) {
        RunTrace t;
        t.agents = 1;
        t.alpha = {0.0, 0.1};
        t.batches = {0, batch};
        t.sq_dist_set = {0.0, 0.25};
        t.v_sq_dist_xstar = {0.0, 4.0};
        t.agent_q = {q};
        t.agent_q_nominal = {false};
        return t;
    };
    const double q = 0.125;
    std::vector<RunTrace> one{make_trace(1, q)};
    std::vector<RunTrace> three{make_trace(3, q)};
    const GeoDecayReport rep1 = geometric_decay_audit(one, 1);
    const GeoDecayReport rep3 = geometric_decay_audit(three, 1);
    REQUIRE(rep1.points.size() == 1);
    CHECK_THAT(rep3.points[0].mean_bound / rep1.points[0].mean_bound,
               Catch::Matchers::WithinAbs((1 - q) * (1 - q), 1e-12));
    CHECK(rep1.points[0].mean_bound == std::pow(1 - q, 1) * 4.0);
}

TEST_CASE("geometric_decay_audit trivial and statistical cases") {
    SECTION("always-feasible family at the fixed point: both sides zero") {
        auto fam = std::make_shared<SlackFamily>();
        Matrix a = Matrix::Identity(2, 2);
        ProblemInstance p{"slack",
                          BlockLayout({2}),
                          GameMapping::from_affine(a, -vec2(0.25, 0.25), 1.0, 1.0),
                          {SimpleSet::full_space(2)},
                          {fam},
                          vec2(0.25, 0.25),
                          [](Rng&) { return vec2(0.25, 0.25); }};
        StepSchedule sched = StepSchedule::projection(1.0, 1.0);
        std::vector<RunTrace> traces;
        for (int t = 0; t < 4; ++t)
            traces.push_back(run(Method::Projection, p, sched, BatchSchedule::constant(2),
                                 FeasibilityConfig(1.0, 1), 5, 100 + t));
        const GeoDecayReport rep = geometric_decay_audit(traces, 2);
        CHECK(rep.applicable);
        CHECK(rep.enough_trials);
        CHECK(rep.violations.empty());
        for (const auto& pt : rep.points) {
            CHECK(pt.mean_sq_dist == 0.0);
            CHECK(pt.mean_bound == 0.0);
        }
    }

    SECTION("imitation game, 300 trials at k=1") {
        ProblemInstance p = build_imitation_game(ImitationGameSpec{});
        StepSchedule sched = StepSchedule::projection(1.0, 3.0);
        std::vector<RunTrace> traces;
        for (int t = 0; t < 300; ++t)
            traces.push_back(run(Method::Projection, p, sched, BatchSchedule::constant(1),
                                 FeasibilityConfig(1.0, 1), 1, 555 + t));
        const GeoDecayReport rep = geometric_decay_audit(traces, 300);
        REQUIRE(rep.applicable);
        REQUIRE(rep.points.size() == 1);
        CHECK(rep.points[0].pass);
        CHECK(rep.points[0].mean_sq_dist < rep.points[0].mean_bound);
    }

    SECTION("nominal q makes the audit inapplicable") {
        MatrixGameSpec spec;
        spec.n_per_agent = 4;
        spec.n_constraints = 10;
        spec.seed = 6;
        ProblemInstance p = build_matrix_game(spec);
        StepSchedule sched = StepSchedule::projection(p.mapping.mu, p.mapping.lipschitz);
        std::vector<RunTrace> traces{run(Method::Projection, p, sched, BatchSchedule::constant(1),
                                         FeasibilityConfig(1.0, 1), 2, 0)};
        CHECK(!geometric_decay_audit(traces, 1).applicable);
    }
}

TEST_CASE("IterationRecord view and invariants") {
    ProblemInstance p = build_imitation_game(ImitationGameSpec{});
    StepSchedule sched = StepSchedule::korpelevich(1.0, 3.0);
    RunTrace tr = run(Method::Korpelevich, p, sched, BatchSchedule::log_ten(),
                      FeasibilityConfig(1.0, 1), 20, 12);
    for (long k = 0; k <= 20; ++k) {
        const IterationRecord rec = tr.record(k);
        CHECK(rec.k == k);
        REQUIRE(rec.sq_dist_solution.has_value());
        CHECK(*rec.sq_dist_solution >= 0.0);
        if (rec.sq_dist_set)
            CHECK(*rec.sq_dist_set >= 0.0);
        if (rec.feas_residual)
            CHECK(*rec.feas_residual >= -1e-9);
        CHECK(rec.batches.size() == 2);
        if (k >= 1) {
            CHECK(rec.batches[0] == 0);  // agent 1 takes no feasibility steps
            CHECK(rec.batches[1] >= 1);
            CHECK(rec.alpha > 0.0);
        }
    }
    CHECK(tr.record(20).f_evals == 40);
}

TEST_CASE("zeta selections make a single sample admissible") {
    // for any q in (0,1) and admissible alpha, the implied batch requirement
    // is exactly one feasibility sample per iteration
    const double mu = 1.0, L = 3.0, tau = popov_tau(mu, L);
    Rng rng(2);
    std::uniform_real_distribution<double> qs(1e-6, 0.9);
    for (int t = 0; t < 200; ++t) {
        const double q = qs(rng);
        const double a_proj = StepSchedule::projection(mu, L).alpha(t);
        const double z1 = zeta_projection_like(q, a_proj, mu);
        CHECK(z1 > 0.0);  // positive whenever alpha mu < 1
        CHECK_THAT(zeta_batch_requirement(q, z1, 1.0 - a_proj * mu),
                   Catch::Matchers::WithinAbs(1.0, 1e-9));

        const double a_pop = StepSchedule::popov(mu, L).alpha(t);
        const double z2 = zeta_popov(q, a_pop, mu, L, tau);
        CHECK(z2 > 0.0);
        CHECK_THAT(zeta_batch_requirement(q, z2, 1.0 - a_pop * mu + 2 * tau * L * L * a_pop * a_pop),
                   Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
}

TEST_CASE("iterates stay inside Y at every step") {
    ProblemInstance p = build_imitation_game(ImitationGameSpec{});
    const BatchSchedule batch = BatchSchedule::constant(2);
    const FeasibilityConfig cfg(1.0, 1);
    Rng rng(88);
    Vector x0 = p.sample_initial(rng);
    block_project_inplace(p.sets, p.layout, x0);
    MethodState st{JointDecision(p.layout, x0)};
    st.f_u = p.mapping.eval(st.x.values);
    StepSchedule sched = StepSchedule::popov(p.mapping.mu, p.mapping.lipschitz);
    for (int k = 0; k < 200; ++k) {
        st = popov_iteration(std::move(st), p.mapping, p.sets, p.families, sched, batch, cfg, rng);
        for (Index j = 0; j < p.layout.agents(); ++j) {
            CHECK(p.sets[static_cast<std::size_t>(j)].contains(st.x.block(j)));
            CHECK(p.sets[static_cast<std::size_t>(j)].contains(st.v.block(j)));
            CHECK(p.sets[static_cast<std::size_t>(j)].contains(st.u.block(j)));
        }
    }
}

TEST_CASE("audits never mutate traces") {
    ProblemInstance p = build_imitation_game(ImitationGameSpec{});
    StepSchedule sched = StepSchedule::projection(1.0, 3.0);
    std::vector<RunTrace> traces{run(Method::Projection, p, sched, BatchSchedule::constant(1),
                                     FeasibilityConfig(1.0, 1), 10, 3)};
    const std::vector<double> sq_before = traces[0].sq_dist_set;
    const std::vector<double> v_before = traces[0].v_sq_dist_xstar;
    (void)geometric_decay_audit(traces, 1);
    (void)geometric_decay_audit(traces, 1);
    CHECK(traces[0].sq_dist_set == sq_before);
    CHECK(traces[0].v_sq_dist_xstar == v_before);
}
