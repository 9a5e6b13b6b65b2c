#include "qfbsde/games.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace qfbsde;

namespace {

PlayerSources lq_player(const std::string& q, const std::string& c, const std::string& a_hat = "clamp(p1, -5, 5)") {
    PlayerSources p;
    p.k = 1;
    p.box = {{-5.0, 5.0}};
    p.b = {"a1"};
    p.r = "-0.5 * a1^2 - " + q + " * x1^2";
    p.a_hat = {a_hat};
    p.g = "-" + c + " * x1^2";
    return p;
}

DiagonalGameSpec lq_game(int players = 2, const std::string& q = "0", const std::string& c = "0.2") {
    GameSources src;
    src.d = 1;
    src.T = 1.0;
    src.sigma = {"1"};
    for (int i = 0; i < players; ++i) src.players.push_back(lq_player(q, c));
    return build_game(src);
}

GridSpec line(double half, int nodes) {
    GridSpec g;
    g.box = {{-half, half}};
    g.nodes_per_axis = nodes;
    return g;
}

DecouplingField solve_game(const DiagonalGameSpec& game, const GridSpec& grid) {
    return solve_backward(assemble_game(game), grid, TruncationSchedule{});
}

}  // namespace

TEST_CASE("Hamiltonian of a two-player game") {
    const auto game = lq_game();
    const std::vector<double> x{1.0}, p{3.0};
    // (2 + 1.5) * 3 - 0.5 * 4
    CHECK(hamiltonian_eval(game, 0, 0.0, x, p, {{2.0}, {1.5}}) == 8.5);
    // (2 + 1.5) * 3 - 0.5 * 2.25
    CHECK(hamiltonian_eval(game, 1, 0.0, x, p, {{2.0}, {1.5}}) == 9.375);
    CHECK_THROWS_AS(hamiltonian_eval(game, 0, 0.0, x, p, {{6.0}, {0.0}}), ActionOutsideBox);
    CHECK_THROWS_AS(hamiltonian_eval(game, 0, 0.0, x, p, {{0.0}}), DimensionMismatch);
}

TEST_CASE("Isaacs gap") {
    IsaacsProbe pr;
    pr.t = 0.0;
    pr.x = {0.0};
    pr.p = {{1.0}, {-0.7}};
    SECTION("the true maximiser has no slack") {
        const auto rep = isaacs_gap(lq_game(), {pr});
        CHECK(std::fabs(rep.worst_slack) <= 1e-12);
        CHECK(rep.evaluations == 202);
    }
    SECTION("a wrong optimiser is detected") {
        GameSources src;
        src.sigma = {"1"};
        src.players = {lq_player("0", "0", "0"), lq_player("0", "0")};
        const auto rep = isaacs_gap(build_game(src), {pr});
        CHECK(rep.worst_slack == Catch::Approx(0.5).margin(1e-12));
        CHECK(rep.player == 0);
        CHECK(rep.best_action[0] == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("action grid ordering") {
    const auto g = action_grid({{0.0, 1.0}, {-1.0, 1.0}}, 3);
    REQUIRE(g.size() == 9);
    CHECK(g[0] == std::vector<double>{0.0, -1.0});
    CHECK(g[1] == std::vector<double>{0.0, 0.0});
    CHECK(g[3] == std::vector<double>{0.5, -1.0});
    CHECK(g[8] == std::vector<double>{1.0, 1.0});
}

TEST_CASE("game sources keep every player's drift diagonal") {
    GameSources src;
    src.sigma = {"1"};
    src.players = {lq_player("0", "0"), lq_player("0", "0")};
    src.players[0].b = {"a2"};
    try {
        build_game(src);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(e.path() == "game.players[0].b[0]");
    }
    src.players[0].b = {"a1"};
    src.players[1].a_hat = {"z1_1"};
    CHECK_THROWS_AS(build_game(src), ValidationError);
    src.players[1].a_hat = {"p1"};
    src.players[1].box = {{1.0, 0.0}};
    CHECK_THROWS_AS(build_game(src).validate(), ValidationError);
}

TEST_CASE("assembled value-system coefficients") {
    const auto c = assemble_game(lq_game(2, "0.1", "0"));
    const std::vector<double> x{2.0}, y{0.0, 0.0}, z{0.3, -0.4};
    std::vector<double> b(1), f(2);
    c.eval_b(0.0, x, y, z, b);
    c.eval_f(0.0, x, y, z, f);
    CHECK(b[0] == Catch::Approx(-0.1).margin(1e-15));
    CHECK(f[0] == Catch::Approx(-0.045 - 0.4).margin(1e-15));
    CHECK(f[1] == Catch::Approx(-0.08 - 0.4).margin(1e-15));
}

TEST_CASE("Riccati oracle") {
    SECTION("symmetric data gives symmetric solutions") {
        const auto tab = lq_riccati_oracle({0.1, 0.1}, {0.3, 0.3}, 1.0);
        for (std::size_t k = 0; k < tab.t.size(); k += 97) {
            CHECK(tab.P[0][k] == tab.P[1][k]);
            CHECK(tab.S[0][k] == tab.S[1][k]);
        }
    }
    SECTION("zero data gives zero") {
        const auto tab = lq_riccati_oracle({0.0, 0.0}, {0.0, 0.0}, 1.0);
        CHECK(tab.P[0].front() == 0.0);
        CHECK(tab.S[1].front() == 0.0);
    }
    SECTION("closed form for q = 0 and equal c") {
        // P = c / (1 + 6 c (T - t)),  S = log(1 + 6 c (T - t)) / 6
        const auto tab = lq_riccati_oracle({0.0, 0.0}, {0.2, 0.2}, 1.0);
        CHECK(tab.P[0].front() == Catch::Approx(0.2 / 2.2).epsilon(1e-12));
        CHECK(tab.S[0].front() == Catch::Approx(std::log(2.2) / 6.0).epsilon(1e-12));
        CHECK(tab.value(0, 0.0, 1.0) == Catch::Approx(-0.2 / 2.2 - std::log(2.2) / 6.0).epsilon(1e-12));
        CHECK(tab.feedback(1, 0.0, 1.0) == Catch::Approx(-0.4 / 2.2).epsilon(1e-12));
    }
    SECTION("step refinement agrees") {
        const auto a = lq_riccati_oracle({0.3, 0.05}, {0.2, 0.4}, 1.0, 2048);
        const auto b = lq_riccati_oracle({0.3, 0.05}, {0.2, 0.4}, 1.0, 4096);
        for (int i = 0; i < 2; ++i) {
            CHECK(std::fabs(a.P[static_cast<std::size_t>(i)].front() - b.P[static_cast<std::size_t>(i)].front()) <= 1e-8);
            CHECK(std::fabs(a.S[static_cast<std::size_t>(i)].front() - b.S[static_cast<std::size_t>(i)].front()) <= 1e-8);
        }
    }
}

TEST_CASE("LQ field matches the Riccati solution and passes the gap checks") {
    const auto game = lq_game(2, "0.05", "0.2");
    const auto field = solve_game(game, line(6.0, 121));
    const auto tab = lq_riccati_oracle({0.05, 0.05}, {0.2, 0.2}, 1.0);
    for (double x : {-2.0, -1.0, 0.0, 0.5, 2.0}) {
        const std::vector<double> xs{x};
        const auto s = sample_field(field, 0.0, xs);
        CHECK(s.u[0] == Catch::Approx(tab.value(0, 0.0, x)).margin(1e-2));
        CHECK(s.u[1] == Catch::Approx(tab.value(1, 0.0, x)).margin(1e-2));
    }
    for (int i = 0; i < 2; ++i) CHECK(best_response_gap(game, field, i).gap <= 1e-2);

    SECTION("a perturbed profile is not an equilibrium") {
        auto eq = equilibrium_policy(field, game);
        const auto lazy = eq.with(0, [](double, std::span<const double>, std::span<double> out) { out[0] = 0.0; });
        CHECK(best_response_gap(game, field, 0, &lazy).gap > 0.02);
    }
}

TEST_CASE("single player: the best response reproduces the value") {
    const auto game = lq_game(1, "0.1", "0.3");
    const auto field = solve_game(game, line(6.0, 121));
    CHECK(std::fabs(best_response_gap(game, field, 0).gap) <= 1e-2);
}

TEST_CASE("game validation samples the optimiser") {
    const auto good = validate_game(lq_game(), {{-1.0, 1.0}});
    CHECK(good.optimizer_in_box);
    CHECK(good.growth_constant <= 1.0);
    GameSources src;
    src.sigma = {"1"};
    src.players = {lq_player("0", "0", "p1")};
    const auto bad = validate_game(build_game(src), {{-1.0, 1.0}});
    CHECK_FALSE(bad.optimizer_in_box);
    CHECK(bad.worst_box_excess > 100.0);
}
