#include "oracles.hpp"

#include "qfbsde/conditions.hpp"
#include "qfbsde/expr_model.hpp"

#include <catch_amalgamated.hpp>

#include <random>

using namespace qfbsde;

namespace {

CoefficientSet scalar_model(const std::string& f, const std::string& g = "0") {
    return build_coefficients({1, 1, 1.0, {"0"}, {"1"}, {f}, {g}});
}

SamplePlan plan_for(const CoefficientSet& c) {
    SamplePlan p;
    p.t_range = {0.0, c.T};
    p.x_box.assign(static_cast<std::size_t>(c.d), {-1.0, 1.0});
    p.y_box.assign(static_cast<std::size_t>(c.n), {-1.0, 1.0});
    p.z_range = {-5.0, 5.0};
    return p;
}

const ConditionReport& find(const std::vector<ConditionReport>& reps, ConditionId id) {
    for (const auto& r : reps)
        if (r.id == id) return r;
    throw std::runtime_error("missing report");
}

}  // namespace

TEST_CASE("hand-checked spanning sets") {
    CHECK(positive_spanning({{1.0}, {-1.0}}).spans);
    CHECK_FALSE(positive_spanning({{1.0}, {2.0}}).spans);
    CHECK(positive_spanning({{1.0, 0.0}, {0.0, 1.0}, {-1.0, -1.0}}).spans);
    CHECK_FALSE(positive_spanning({{1.0, 0.0}, {0.0, 1.0}}).spans);
    CHECK_FALSE(positive_spanning({{1.0, 0.0}, {-1.0, 0.0}}).spans);  // rank 1
    CHECK(positive_spanning({{1.0, 0.0}, {-1.0, 0.0}, {0.0, 1.0}, {0.0, -1.0}}).spans);
    CHECK_FALSE(positive_spanning({{1.0, 0.0}, {-1.0, 0.0}, {0.0, 1.0}}).spans);
    CHECK_FALSE(positive_spanning({{0.0, 0.0}, {0.0, 0.0}}).spans);
    CHECK_THROWS_AS(positive_spanning({}), DimensionMismatch);
    CHECK_THROWS_AS(positive_spanning({{1.0}, {1.0, 2.0}}), DimensionMismatch);
}

TEST_CASE("spanning certificate carries a positive combination") {
    const auto cert = positive_spanning({{1.0, 0.0}, {0.0, 1.0}, {-1.0, -1.0}});
    REQUIRE(cert.spans);
    CHECK(cert.rank == 2);
    REQUIRE(cert.positive_combination.size() == 3);
    for (double l : cert.positive_combination) CHECK(l == Catch::Approx(1.0 / 3.0).margin(1e-12));
    CHECK(cert.combination_residual <= 1e-12);
    CHECK(cert.margin > 0.0);
    const auto fail = positive_spanning({{1.0, 0.0}, {0.0, 1.0}});
    CHECK(fail.margin <= 0.0);
}

TEST_CASE("spanning agrees with a brute-force directional oracle on 100 random sets") {
    std::mt19937_64 rng(123);
    std::normal_distribution<double> normal;
    int agree = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + trial % 3;
        const int M = n + 1 + static_cast<int>(rng() % 4);
        std::vector<std::vector<double>> vecs(static_cast<std::size_t>(M), std::vector<double>(static_cast<std::size_t>(n)));
        for (auto& v : vecs)
            for (double& e : v) e = normal(rng);
        // Half the sets are pushed into a half-space so both verdicts occur.
        if (trial % 2 == 0)
            for (auto& v : vecs) v[0] = std::fabs(v[0]) + 0.05;
        const auto cert = positive_spanning(vecs);
        const auto ref = oracle::directional_spanning(vecs, 1000 + static_cast<std::uint64_t>(trial));
        if (cert.spans == ref.spans) ++agree;
        INFO("trial " << trial << " margin " << ref.margin);
        CHECK(cert.spans == ref.spans);
    }
    CHECK(agree == 100);
}

TEST_CASE("spanning verdict is invariant under positive rescaling") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> normal;
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<std::vector<double>> vecs(4, std::vector<double>(2));
        for (auto& v : vecs)
            for (double& e : v) e = normal(rng);
        const bool base = positive_spanning(vecs).spans;
        for (double s : {1e-6, 1e-3, 7.0, 1e6}) {
            auto scaled = vecs;
            for (auto& v : scaled)
                for (double& e : v) e *= s;
            CHECK(positive_spanning(scaled).spans == base);
        }
        auto per_vector = vecs;
        for (std::size_t m = 0; m < per_vector.size(); ++m)
            for (double& e : per_vector[m]) e *= 0.5 + static_cast<double>(m);
        CHECK(positive_spanning(per_vector).spans == base);
    }
}

TEST_CASE("witnesses re-evaluate to the reported violation") {
    const auto c = build_coefficients({2, 1, 1.0, {"0"}, {"1"}, {"z2_1^2", "sin(x1) * z1_1"}, {"0", "0"}});
    StructuralDecl decl;
    decl.C0 = 2.0;
    decl.CQ = 0.5;
    decl.spanning_vectors = {{1.0, 0.0}, {0.0, 1.0}, {-1.0, -1.0}};
    auto plan = plan_for(c);
    plan.x_box = {{-2.0, 2.0}};
    const auto reps = check_structural(c, decl, plan);
    REQUIRE(reps.size() == 4);
    for (const auto& r : reps) {
        INFO(condition_name(r.id));
        const auto again = evaluate_condition(r.id, c, decl, r.witness);
        CHECK(std::fabs(again.slack - r.worst_violation) <= 1e-12 * std::max(1.0, std::fabs(r.worst_violation)));
    }
}

TEST_CASE("H0 detects a drift growing faster than linearly") {
    const auto c = build_coefficients({1, 1, 1.0, {"z1_1^2"}, {"1"}, {"0"}, {"0"}});
    StructuralDecl decl;
    decl.C0 = 5.0;
    const auto reps = check_structural(c, decl, plan_for(c));
    CHECK(find(reps, ConditionId::H0).falsified());
    CHECK(find(reps, ConditionId::HQ).worst_violation <= 0.0);
}

TEST_CASE("HQ fitted constant for a pure quadratic driver") {
    const auto c = scalar_model("0.5 * z1_1^2");
    StructuralDecl decl;
    decl.CQ = 0.5;
    const auto reps = check_structural(c, decl, plan_for(c));
    const auto& hq = find(reps, ConditionId::HQ);
    CHECK_FALSE(hq.falsified());
    CHECK(hq.fitted_constant < 0.5);
    CHECK(hq.fitted_constant > 0.49);
    decl.CQ = 0.4;
    CHECK(find(check_structural(c, decl, plan_for(c)), ConditionId::HQ).falsified());
}

TEST_CASE("HAB is falsified by a strongly concave driver") {
    const auto c = scalar_model("-2 * z1_1^2", "tanh(x1)");
    StructuralDecl decl;
    decl.C0 = 10.0;
    decl.CQ = 2.0;
    decl.rho = 0.0;
    decl.spanning_vectors = {{1.0}, {-1.0}};
    const auto reports = check_structural(c, decl, plan_for(c));
    const auto& hab = find(reports, ConditionId::HAB);
    CHECK(hab.falsified());
    CHECK(hab.violation_count > 0);
}

TEST_CASE("HBF: off-diagonal quadratic growth is falsified") {
    const auto c = build_coefficients({2, 1, 1.0, {"0"}, {"1"}, {"z2_1^2", "0"}, {"0", "0"}});
    StructuralDecl decl;
    decl.CQ = 10.0;
    decl.C0 = 10.0;
    const auto reports = check_structural(c, decl, plan_for(c));
    const auto& hbf = find(reports, ConditionId::HBF);
    CHECK(hbf.falsified());
    CHECK(hbf.witness.z(0, 0) == 0.0);
    CHECK(std::fabs(hbf.witness.z(1, 0)) >= 100.0);
}

TEST_CASE("HBF: a triangular driver is consistent") {
    const auto c = build_coefficients({2, 1, 1.0, {"0"}, {"1"}, {"z1_1 * z2_1", "z1_1^2 + z2_1^2"}, {"0", "0"}});
    StructuralDecl decl;
    decl.CQ = 1.0;
    const auto reports = check_structural(c, decl, plan_for(c));
    const auto& hbf = find(reports, ConditionId::HBF);
    CHECK_FALSE(hbf.falsified());
    CHECK(hbf.fitted_constant <= 1.0);
}

TEST_CASE("decomposition identity F = z.l + q + s") {
    const auto c = build_coefficients({2, 2, 1.0, {"x1 + z1_2", "sin(z2_1)"}, {"1 + 0.1 * x1^2", "0.2", "0", "1.5"},
                                       {"z1_1 * z2_2 + y1", "exp(-x2^2) * (z1_1^2 + z2_1^2)"}, {"0", "0"}});
    StructuralDecl decl;
    decl.kappa = [](double r) { return std::pow(r, 1.5); };
    decl.kappa_exponent = 1.5;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int k = 0; k < 200; ++k) {
        const std::vector<double> x{u(rng), u(rng)}, y{u(rng), u(rng)};
        ZMatrix z(2, 2, {u(rng), u(rng), u(rng), u(rng)});
        if (k % 10 == 0) z(0, 0) = z(0, 1) = 0.0;
        const double scale = k % 3 == 0 ? 100.0 : 1.0;
        for (double& v : z.data()) v *= scale;
        const auto dec = bf_decompose(c, decl, 0.5, x, y, z);
        const auto F = assemble_F(c, 0.5, x, y, z);
        double fmax = 1.0;
        for (double v : F) fmax = std::max(fmax, std::fabs(v));
        CHECK(dec.identity_residual <= 1e-12 * fmax);
    }
}

TEST_CASE("sample sets are deterministic and include stress points") {
    const auto c = scalar_model("z1_1^2");
    auto plan = plan_for(c);
    const auto a = build_samples(c, plan);
    const auto b = build_samples(c, plan);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].flat() == b[k].flat());
    double zmax = 0.0;
    for (const auto& p : a) zmax = std::max(zmax, p.z.norm());
    CHECK(zmax == Catch::Approx(1000.0));
    plan.max_grid_points = 100;
    CHECK(build_samples(c, plan).size() == 100 + static_cast<std::size_t>(plan.stress_count));
}
