#include "qfbsde/expr_model.hpp"
#include "qfbsde/rng.hpp"
#include "qfbsde/simulate.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace qfbsde;

namespace {

CoefficientSet scalar(const std::string& b, const std::string& f, const std::string& g) {
    return build_coefficients({1, 1, 1.0, {b}, {"1"}, {f}, {g}});
}

GridSpec line(double half, int nodes) {
    GridSpec g;
    g.box = {{-half, half}};
    g.nodes_per_axis = nodes;
    return g;
}

const std::vector<double> origin{0.0};

}  // namespace

TEST_CASE("Philox known-answer vector") {
    const Philox4x32 gen(0);
    const auto out = gen({0, 0, 0, 0});
    CHECK(out[0] == 0x6627e8d5U);
    CHECK(out[1] == 0xe169c58dU);
    CHECK(out[2] == 0xbc57ac4cU);
    CHECK(out[3] == 0x9b00dbd8U);
}

TEST_CASE("Brownian moments") {
    const auto c = scalar("0", "0", "0");
    const auto B = simulate_driftless(nullptr, c, 0.0, origin, 0.01, 20000, 42);
    CHECK(B.steps == 100);
    std::vector<double> xt(B.paths), inc;
    for (std::size_t p = 0; p < B.paths; ++p) {
        xt[p] = B.x(p, B.steps)[0];
        for (std::size_t l = 0; l < B.steps; l += 10) inc.push_back(B.dw(p, l)[0]);
    }
    const auto s = sample_stats(xt);
    CHECK(std::fabs(s.mean) < 4.0 * s.se);
    CHECK(s.variance == Catch::Approx(1.0).margin(0.05));
    const auto w = sample_stats(inc);
    CHECK(std::fabs(w.mean) < 4.0 * w.se);
    CHECK(w.variance == Catch::Approx(0.01).epsilon(0.03));
}

TEST_CASE("constant drift shifts the terminal mean") {
    const auto c = scalar("0.5", "0", "0");
    const auto field = tabulate_field(c, line(10.0, 41), 3, [](double, std::span<const double>, std::span<double> u) { u[0] = 0.0; });
    const auto B = simulate_paths(field, c, 0.0, origin, 0.01, 20000, 7);
    std::vector<double> xt(B.paths);
    for (std::size_t p = 0; p < B.paths; ++p) xt[p] = B.x(p, B.steps)[0];
    const auto s = sample_stats(xt);
    CHECK(std::fabs(s.mean - 0.5) < 4.0 * s.se);
    CHECK(B.exit_fraction == 0.0);
}

TEST_CASE("paths are identical for any thread count and differ across seeds") {
    const auto c = scalar("sin(x1)", "0", "0");
    const auto field = tabulate_field(c, line(10.0, 41), 3, [](double, std::span<const double>, std::span<double> u) { u[0] = 0.0; });
    SimulationOptions one, four;
    four.threads = 4;
    const auto a = simulate_paths(field, c, 0.0, origin, 0.02, 1000, 99, one);
    const auto b = simulate_paths(field, c, 0.0, origin, 0.02, 1000, 99, four);
    CHECK(a.X == b.X);
    CHECK(a.dW == b.dW);
    const auto other = simulate_paths(field, c, 0.0, origin, 0.02, 1000, 100, one);
    CHECK(a.dW != other.dW);
}

TEST_CASE("paths leaving the grid box are frozen and flagged") {
    const auto c = scalar("0", "0", "0");
    const auto field = tabulate_field(c, line(0.5, 11), 3, [](double, std::span<const double>, std::span<double> u) { u[0] = 0.0; });
    const auto B = simulate_paths(field, c, 0.0, origin, 0.01, 2000, 5);
    CHECK(B.exit_fraction > 0.5);
    CHECK(B.exit_warning);
    for (std::size_t p = 0; p < B.paths; ++p)
        for (std::size_t l = 0; l <= B.steps; ++l) REQUIRE(std::fabs(B.x(p, l)[0]) <= 0.5);
    CHECK_THROWS_AS(simulate_paths(field, c, 0.0, std::vector<double>{1.0}, 0.01, 10, 5), ExtrapolationError);
}

TEST_CASE("payoff Monte Carlo on exact cases") {
    const auto c = scalar("0", "0", "0");
    const auto B = simulate_driftless(nullptr, c, 0.0, origin, 0.01, 500, 3);
    const auto one = payoff_mc(B, [](double, std::span<const double>) { return 1.0; }, [](std::span<const double>) { return 0.0; });
    CHECK(one.mean == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(one.se <= 1e-12);
    const auto time = payoff_mc(B, [](double t, std::span<const double>) { return t; }, [](std::span<const double>) { return 2.0; });
    CHECK(time.mean == Catch::Approx(2.0 + 0.5 - 0.5 * B.dt).epsilon(1e-12));  // left sum of t
    const auto terminal = payoff_mc(B, [](double, std::span<const double>) { return 0.0; }, [](std::span<const double> x) { return x[0]; });
    double mean = 0.0;
    for (std::size_t p = 0; p < B.paths; ++p) mean += B.x(p, B.steps)[0];
    CHECK(terminal.mean == Catch::Approx(mean / static_cast<double>(B.paths)).margin(1e-12));
}

TEST_CASE("BMO estimate with constant Z") {
    const auto c = scalar("0", "0", "2 * x1");
    const auto field = tabulate_field(c, line(10.0, 41), 3, [](double, std::span<const double> x, std::span<double> u) { u[0] = 2.0 * x[0]; });
    const auto B = simulate_driftless(&field, c, 0.0, origin, 0.01, 400, 11);
    const auto bmo = bmo_estimate(B);
    CHECK(bmo.value == Catch::Approx(4.0).epsilon(1e-9));
    CHECK(bmo.time == 0.0);
}

TEST_CASE("Girsanov weights") {
    SECTION("b = 0 gives unit weights") {
        const auto c = scalar("0", "0", "0");
        const auto B = simulate_driftless(nullptr, c, 0.0, origin, 0.01, 1000, 13);
        const auto g = girsanov_check(B, c);
        CHECK(g.weight.mean == 1.0);
        CHECK(g.weight.se == 0.0);
        CHECK(g.max_log_weight == 0.0);
    }
    SECTION("constant drift is recovered by reweighting") {
        const auto c = scalar("0.5", "0", "0");
        const auto B = simulate_driftless(nullptr, c, 0.0, origin, 0.01, 20000, 17);
        const auto g = girsanov_check(B, c);
        CHECK(std::fabs(g.weight.mean - 1.0) < 4.0 * g.weight.se);
        CHECK(std::fabs(g.reweighted[0].mean - 0.5) < 4.0 * g.reweighted[0].se);
    }
}

TEST_CASE("BSDE residual vanishes for exact solutions") {
    SECTION("constant") {
        const auto c = scalar("0", "0", "3");
        const auto field = tabulate_field(c, line(10.0, 41), 3, [](double, std::span<const double>, std::span<double> u) { u[0] = 3.0; });
        const auto B = simulate_driftless(&field, c, 0.0, origin, 0.01, 200, 19);
        const auto r = bsde_residual(B, c);
        CHECK(r.rms == 0.0);
        CHECK(r.per_component[0].mean == 0.0);
    }
    SECTION("linear, where the Ito sum is exact") {
        const auto c = scalar("0", "0", "x1");
        const auto field = tabulate_field(c, line(10.0, 41), 3, [](double, std::span<const double> x, std::span<double> u) { u[0] = x[0]; });
        const auto B = simulate_driftless(&field, c, 0.0, origin, 0.01, 200, 23);
        CHECK(bsde_residual(B, c).rms <= 1e-12);
        CHECK(bsde_residual(B, c, TimeQuadrature::trapezoid).rms <= 1e-12);
    }
    SECTION("deterministic driver integrates exactly under the trapezoid rule") {
        const auto c = scalar("0", "2 * t", "0");
        const auto field = tabulate_field(c, line(10.0, 41), 101, [](double t, std::span<const double>, std::span<double> u) { u[0] = 1.0 - t * t; });
        const auto B = simulate_driftless(&field, c, 0.0, origin, 0.01, 50, 29);
        CHECK(bsde_residual(B, c, TimeQuadrature::trapezoid).rms <= 1e-12);
        CHECK(bsde_residual(B, c).per_component[0].mean == Catch::Approx(B.dt).epsilon(1e-9));
    }
}

TEST_CASE("submartingale check needs field values") {
    const auto c = scalar("0", "0", "0");
    const auto B = simulate_driftless(nullptr, c, 0.0, origin, 0.01, 100, 31);
    StructuralDecl decl;
    decl.spanning_vectors = {{1.0}, {-1.0}};
    CHECK_THROWS_AS(submartingale_check(B, decl), DimensionMismatch);
}

TEST_CASE("input validation") {
    const auto c = scalar("0", "0", "0");
    CHECK_THROWS_AS(simulate_driftless(nullptr, c, 1.0, origin, 0.01, 10, 1), ValidationError);
    CHECK_THROWS_AS(simulate_driftless(nullptr, c, 0.0, origin, 0.0, 10, 1), ValidationError);
    CHECK_THROWS_AS(simulate_driftless(nullptr, c, 0.0, origin, 0.01, 0, 1), ValidationError);
    CHECK_THROWS_AS(simulate_driftless(nullptr, c, 0.0, std::vector<double>{0.0, 0.0}, 0.01, 10, 1), DimensionMismatch);
}

TEST_CASE("BSDE residual is exact for a linear field under a non-symmetric sigma") {
    const auto c = build_coefficients({1, 2, 1.0, {"0", "0"}, {"1", "1", "0", "1"}, {"0"}, {"x1 - 2 * x2"}});
    GridSpec g;
    g.box = {{-10.0, 10.0}, {-10.0, 10.0}};
    g.nodes_per_axis = 41;
    const auto field = tabulate_field(c, g, 3, [](double, std::span<const double> x, std::span<double> u) { u[0] = x[0] - 2.0 * x[1]; });
    const auto B = simulate_driftless(&field, c, 0.0, std::vector<double>{0.0, 0.0}, 0.01, 200, 37);
    CHECK(bsde_residual(B, c).rms <= 1e-12);
}
