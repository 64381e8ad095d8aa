#include "rfvi/methods.hpp"
#include "rfvi/problems.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

using namespace rfvi;

namespace {

Vector vec1(double a) {
    Vector v(1);
    v << a;
    return v;
}

// 1-D problem on Y = [0, inf): F(x) = x - 1, mu = L = 1, x* = 1
ProblemInstance one_dim_problem() {
    Matrix a(1, 1);
    a << 1.0;
    return ProblemInstance{"one-dim",
                           BlockLayout({1}),
                           GameMapping::from_affine(a, vec1(-1.0), 1.0, 1.0),
                           {SimpleSet::box(vec1(0.0), vec1(std::numeric_limits<double>::infinity()))},
                           {nullptr},
                           vec1(1.0),
                           [](Rng&) { return vec1(0.0); }};
}

bool bytes_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

StepSchedule make_schedule_for_test(Method m, double mu, double lipschitz) {
    switch (m) {
    case Method::Projection:
        return StepSchedule::projection(mu, lipschitz);
    case Method::Korpelevich:
        return StepSchedule::korpelevich(mu, lipschitz);
    case Method::Popov:
        return StepSchedule::popov(mu, lipschitz);
    }
    throw std::logic_error("unreachable");
}

}  // namespace

TEST_CASE("popov_tau closed form") {
    // kappa-form oracle evaluated independently
    auto tau_of_kappa = [](double kappa) {
        return 8.0 * (1.0 + std::sqrt(1.0 + (4.0 / kappa - 1.0 / (kappa * kappa)))) /
               (8.0 - 2.0 / kappa);
    };
    CHECK_THAT(popov_tau(1.0, 1.0), Catch::Matchers::WithinAbs(4.0, 1e-12));
    CHECK_THAT(popov_tau(1.0, 3.0), Catch::Matchers::WithinAbs(tau_of_kappa(3.0), 1e-12));
    CHECK_THAT(popov_tau(1.0, 3.0), Catch::Matchers::WithinAbs(2.7171, 2e-4));
    CHECK_THAT(popov_tau(0.5, 1.5), Catch::Matchers::WithinAbs(tau_of_kappa(3.0), 1e-12));
    for (double kappa : {1.0, 3.0, 20.0, 1000.0})
        CHECK(popov_tau(1.0, kappa) > 2.0);
    CHECK(popov_tau(1.0, 1000.0) < 2.01);  // tau -> 2 from above as kappa grows
}

TEST_CASE("popov_nu and schedule parameter contracts") {
    CHECK(popov_nu() == 2.0);
    CHECK(1.0 - 1.0 / popov_nu() == 0.5);
    CHECK_THROWS_AS(StepSchedule::popov(1.0, 3.0, popov_tau(1.0, 3.0), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(StepSchedule::popov(1.0, 3.0, 2.0, 2.0), std::invalid_argument);
    CHECK_THROWS_AS(StepSchedule::projection(1.0, 0.5), std::invalid_argument);
}

TEST_CASE("step schedules honor their rate-theorem caps") {
    const double mu = 1.0, L = 3.0;
    StepSchedule proj = StepSchedule::projection(mu, L);
    StepSchedule kor = StepSchedule::korpelevich(mu, L);
    StepSchedule pop = StepSchedule::popov(mu, L);
    const double tau = pop.tau(), nu = pop.nu();

    CHECK(proj.alpha(0) == mu / (2 * L * L));
    CHECK(kor.alpha(0) == 1.0 / (4 * (L + mu)));
    double prev = std::numeric_limits<double>::infinity();
    for (long k = 0; k <= 2000; ++k) {
        CHECK(proj.alpha(k) > 0.0);
        CHECK(proj.alpha(k) <= std::min(2.0 / (mu * (k + 1)), mu / (2 * L * L)) + 0.0);
        CHECK(kor.alpha(k) <= std::min(2.0 / (mu * (k + 1)), 1.0 / (4 * (L + mu))));
        const double pk = pop.alpha(k);
        CHECK(pk > 0.0);
        CHECK(pk <= 4.0 / (mu * (k + 1)));
        CHECK(pk <= mu / (4 * tau * L * L));
        CHECK(pk <= (1 - 2 / tau) / (2 * L / tau + L * tau));
        CHECK(pk <= (1 - 1 / nu) / (2 * mu + L * tau));
        CHECK(pk <= prev);  // non-increasing
        prev = pk;
    }

    // cap_override replaces the constant cap
    StepSchedule big = StepSchedule::projection(mu, L, 1.0 / (4 * (L + mu)));
    CHECK(big.alpha(0) == 1.0 / 16.0);
    CHECK(big.outside_guarantees());
    CHECK(!proj.outside_guarantees());
}

TEST_CASE("one-dimensional hand-evaluated iterations") {
    ProblemInstance p = one_dim_problem();
    const BatchSchedule batch = BatchSchedule::constant(1);
    const FeasibilityConfig cfg(1.0, 1);
    Rng rng(0);

    SECTION("projection: alpha0 = 0.5, v1 = 0.5") {
        StepSchedule sched = StepSchedule::projection(1.0, 1.0);
        CHECK(sched.alpha(0) == 0.5);
        MethodState st{JointDecision(p.layout, vec1(0.0))};
        st = projection_iteration(std::move(st), p.mapping, p.sets, p.families, sched, batch, cfg,
                                  rng);
        CHECK(st.v.values[0] == 0.5);
        CHECK(st.x.values[0] == 0.5);
        CHECK(st.k == 1);
    }

    SECTION("korpelevich with alpha0 = 0.5: u1 = 0.5, v1 = 0.25") {
        StepSchedule sched = StepSchedule::korpelevich(1.0, 1.0, 0.5);
        MethodState st{JointDecision(p.layout, vec1(0.0))};
        st = korpelevich_iteration(std::move(st), p.mapping, p.sets, p.families, sched, batch, cfg,
                                   rng);
        CHECK(st.u.values[0] == 0.5);
        CHECK(st.v.values[0] == 0.25);
    }

    SECTION("popov from u0 = x0: u1 = alpha0, v1 = alpha0(1 - alpha0)") {
        StepSchedule sched = StepSchedule::popov(1.0, 1.0);
        const double a0 = sched.alpha(0);
        CHECK(a0 == 1.0 / 16.0);  // mu/(4 tau L^2) with tau = 4
        MethodState st{JointDecision(p.layout, vec1(0.0))};
        st.f_u = p.mapping.eval(st.x.values);
        st = popov_iteration(std::move(st), p.mapping, p.sets, p.families, sched, batch, cfg, rng);
        CHECK(st.u.values[0] == a0);
        CHECK(st.v.values[0] == a0 * (1.0 - a0));
    }

    SECTION("schedule/method mismatch is rejected") {
        StepSchedule sched = StepSchedule::projection(1.0, 1.0);
        MethodState st{JointDecision(p.layout, vec1(0.0))};
        CHECK_THROWS_AS(korpelevich_iteration(std::move(st), p.mapping, p.sets, p.families, sched,
                                              batch, cfg, rng),
                        std::invalid_argument);
    }
}

TEST_CASE("affine recursion: alpha A = I/2 halves the error in one step") {
    Matrix a = Matrix::Identity(2, 2);
    Vector xstar(2);
    xstar << 0.0, 0.0;
    ProblemInstance p{"halving",
                      BlockLayout({2}),
                      GameMapping::from_affine(a, Vector::Zero(2), 1.0, 1.0),
                      {SimpleSet::full_space(2)},
                      {nullptr},
                      xstar,
                      [](Rng&) {
                          Vector v(2);
                          v << 1.0, -2.0;
                          return v;
                      }};
    StepSchedule sched = StepSchedule::projection(1.0, 1.0);  // alpha0 = 0.5
    RunTrace tr = run(Method::Projection, p, sched, BatchSchedule::constant(1),
                      FeasibilityConfig(1.0, 1), 3, 0);
    CHECK(tr.sq_dist_solution[0] == 5.0);
    CHECK(tr.sq_dist_solution[1] == 1.25);  // error halved, squared quartered
    CHECK(tr.sq_dist_solution[2] > 0.0);
}

TEST_CASE("fixed point: all methods stay at x* exactly") {
    MatrixGameSpec spec;
    spec.n_per_agent = 6;
    spec.n_constraints = 40;
    spec.seed = 7;
    ProblemInstance p = build_matrix_game(spec);
    REQUIRE((p.mapping.eval(*p.xstar)).cwiseAbs().maxCoeff() == 0.0);
    ProblemInstance pinned = p;
    const Vector xs = *p.xstar;
    pinned.sample_initial = [xs](Rng&) { return xs; };

    for (Method m : {Method::Projection, Method::Korpelevich, Method::Popov}) {
        StepSchedule sched = make_schedule_for_test(m, p.mapping.mu, p.mapping.lipschitz);
        RunTrace tr = run(m, pinned, sched, BatchSchedule::constant(1), FeasibilityConfig(1.0, 1),
                          100, 99);
        for (double d : tr.sq_dist_solution)
            CHECK(d == 0.0);
    }
}

TEST_CASE("mapping evaluation economy") {
    ProblemInstance base = build_imitation_game(ImitationGameSpec{});
    auto counter = std::make_shared<long>(0);
    const GameMapping& orig = base.mapping;
    GameMapping counting(
        [counter, eval = orig.eval](const Vector& x) {
            ++*counter;
            return eval(x);
        },
        orig.mu, orig.lipschitz, orig.affine);
    ProblemInstance p{base.name,     base.layout,  std::move(counting),  base.sets,
                      base.families, base.xstar,   base.sample_initial};

    const long T = 50;
    struct Case {
        Method m;
        long expected;
    };
    for (const Case c : {Case{Method::Projection, T}, Case{Method::Korpelevich, 2 * T},
                         Case{Method::Popov, T + 1}}) {
        *counter = 0;
        StepSchedule sched = make_schedule_for_test(c.m, p.mapping.mu, p.mapping.lipschitz);
        RunTrace tr = run(c.m, p, sched, BatchSchedule::constant(1), FeasibilityConfig(1.0, 1), T,
                          1234);
        CHECK(*counter == c.expected);
        CHECK(tr.f_evals.back() == c.expected);
    }
}

TEST_CASE("korpelevich agrees bitwise with a straight-line extragradient oracle") {
    // random 4-D affine strongly monotone problem, no functional constraints
    Rng gen_rng(42);
    Matrix a = generate_spd_with_spectrum(4, 0.5, 2.0, gen_rng);
    Vector r(4);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Index i = 0; i < 4; ++i)
        r[i] = nd(gen_rng);
    const double mu = 0.5, L = 2.0;
    Vector lo = Vector::Constant(4, -5.0), hi = Vector::Constant(4, 5.0);
    ProblemInstance p{"extragradient-oracle",
                      BlockLayout({2, 2}),
                      GameMapping::from_affine(a, r, mu, L),
                      {SimpleSet::box(lo.head(2), hi.head(2)), SimpleSet::box(lo.tail(2), hi.tail(2))},
                      {nullptr, nullptr},
                      std::nullopt,
                      [](Rng& g) {
                          std::normal_distribution<double> d(0.0, 1.0);
                          Vector x(4);
                          for (Index i = 0; i < 4; ++i)
                              x[i] = d(g);
                          return x;
                      }};

    StepSchedule sched = StepSchedule::korpelevich(mu, L);
    const long T = 25;

    // library path
    Rng rng_lib(777);
    Vector x_lib = p.sample_initial(rng_lib);
    block_project_inplace(p.sets, p.layout, x_lib);
    MethodState st{JointDecision(p.layout, x_lib)};
    const BatchSchedule batch = BatchSchedule::constant(1);
    const FeasibilityConfig cfg(1.0, 1);
    for (long k = 0; k < T; ++k)
        st = korpelevich_iteration(std::move(st), p.mapping, p.sets, p.families, sched, batch, cfg,
                                   rng_lib);

    // independent transcription of the classical two-stage method
    Rng rng_ora(777);
    Vector x = p.sample_initial(rng_ora);
    for (Index i = 0; i < 4; ++i)
        x[i] = std::min(5.0, std::max(-5.0, x[i]));
    for (long k = 0; k < T; ++k) {
        const double alpha = std::min(2.0 / (mu * (k + 1)), 1.0 / (4.0 * (L + mu)));
        Vector f_x = p.mapping.eval(x);
        Vector u(4), v(4);
        for (Index i = 0; i < 4; ++i)
            u[i] = std::min(5.0, std::max(-5.0, x[i] - alpha * f_x[i]));
        Vector f_u = p.mapping.eval(u);
        for (Index i = 0; i < 4; ++i)
            v[i] = std::min(5.0, std::max(-5.0, x[i] - alpha * f_u[i]));
        x = v;
    }
    CHECK(st.x.values == x);
}

TEST_CASE("run smoke: T=0, finiteness, determinism") {
    MatrixGameSpec spec;
    spec.n_per_agent = 8;
    spec.n_constraints = 100;
    spec.seed = 3;
    ProblemInstance p = build_matrix_game(spec);
    StepSchedule sched = StepSchedule::projection(p.mapping.mu, p.mapping.lipschitz);

    SECTION("zero budget keeps only the initial point") {
        RunTrace tr = run(Method::Projection, p, sched, BatchSchedule::constant(1),
                          FeasibilityConfig(1.0, 1), 0, 5);
        CHECK(tr.iterations() == 0);
        CHECK(tr.alpha.size() == 1);
        CHECK_THROWS_AS(run(Method::Projection, p, sched, BatchSchedule::constant(1),
                            FeasibilityConfig(1.0, 1), -1, 5),
                        std::invalid_argument);
    }

    SECTION("1000 iterations produce a finite trace") {
        RunOptions opts;
        opts.set_metric_stride = 100;
        RunTrace tr = run(Method::Projection, p, sched, BatchSchedule::constant(1),
                          FeasibilityConfig(1.0, 1), 1000, 5, opts);
        for (double d : tr.sq_dist_solution) {
            CHECK(std::isfinite(d));
            CHECK(d >= 0.0);
        }
        for (double v : tr.feas_residual)
            if (std::isfinite(v))
                CHECK(v >= -1e-9);
        CHECK(tr.min_feas_residual() >= -1e-9);
        // violation proxy, labeled as such, present at stride points
        CHECK(tr.set_metric_is_violation);
        CHECK(std::isfinite(tr.set_metric[0]));
        CHECK(std::isfinite(tr.set_metric[1000]));
    }

    SECTION("identical seeds give byte-identical traces") {
        RunTrace a = run(Method::Popov, p, StepSchedule::popov(p.mapping.mu, p.mapping.lipschitz),
                         BatchSchedule::log_ten(), FeasibilityConfig(1.0, 1), 200, 17);
        RunTrace b = run(Method::Popov, p, StepSchedule::popov(p.mapping.mu, p.mapping.lipschitz),
                         BatchSchedule::log_ten(), FeasibilityConfig(1.0, 1), 200, 17);
        CHECK(bytes_equal(a.alpha, b.alpha));
        CHECK(bytes_equal(a.sq_dist_solution, b.sq_dist_solution));
        CHECK(bytes_equal(a.feas_residual, b.feas_residual));
        CHECK(a.batches == b.batches);
        CHECK(a.f_evals == b.f_evals);
    }
}

TEST_CASE("batch schedules") {
    BatchSchedule c3 = BatchSchedule::constant(3);
    BatchSchedule lt = BatchSchedule::log_ten();
    CHECK(c3.batch(1, 0) == 3);
    CHECK(c3.batch(100000, 1) == 3);
    CHECK(lt.batch(1, 0) == 1);
    CHECK(lt.batch(2, 0) == 1);
    CHECK(lt.batch(10, 0) == 1);
    CHECK(lt.batch(11, 0) == 2);
    CHECK(lt.batch(100, 0) == 2);
    CHECK(lt.batch(101, 0) == 3);
    CHECK(lt.batch(1000, 0) == 3);
    CHECK(lt.batch(10000, 0) == 4);
    CHECK_THROWS_AS(lt.batch(0, 0), std::invalid_argument);
    CHECK_THROWS_AS(BatchSchedule::constant(0), std::invalid_argument);
}

TEST_CASE("matrix game kappa=3 error regression") {
    MatrixGameSpec spec;
    spec.n_per_agent = 10;
    spec.n_constraints = 200;
    spec.seed = 11;
    ProblemInstance p = build_matrix_game(spec);
    StepSchedule sched = StepSchedule::projection(p.mapping.mu, p.mapping.lipschitz);
    RunOptions opts;
    opts.record_set_metric = false;

    const long T = 10000;
    std::vector<double> mean(static_cast<std::size_t>(T) + 1, 0.0);
    const int trials = 5;
    for (int t = 0; t < trials; ++t) {
        RunTrace tr = run(Method::Projection, p, sched, BatchSchedule::constant(1),
                          FeasibilityConfig(1.0, 1), T, 100 + static_cast<std::uint64_t>(t), opts);
        for (std::size_t i = 0; i < mean.size(); ++i)
            mean[i] += tr.sq_dist_solution[i] / trials;
    }
    CHECK(mean.back() <= 0.01 * mean.front());  // decays well below 1% of the start

    std::vector<std::pair<double, double>> tail;
    for (long k = T / 2; k <= T; k += 250)
        if (mean[static_cast<std::size_t>(k)] > 0.0)
            tail.emplace_back(static_cast<double>(k), mean[static_cast<std::size_t>(k)]);
    if (tail.size() >= 10) {
        const RateFit fit = rate_fit(tail);
        CHECK(fit.c > 0.0);
        CHECK(std::isfinite(fit.c));
    }
}
