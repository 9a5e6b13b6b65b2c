#pragma once

// Diagonal-cost games with additive drift
//   dX = sum_j b^j(t, X, alpha^j) dt + sigma(t, X) dB,
//   J^i = E[ g^i(X_T) + int r^i(t, X, alpha^i) dt ]   (maximised),
// their value system, equilibrium feedback and Nash certification.

#include "qfbsde/errors.hpp"
#include "qfbsde/expr_model.hpp"
#include "qfbsde/model.hpp"
#include "qfbsde/parallel.hpp"
#include "qfbsde/pde.hpp"
#include "qfbsde/simulate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace qfbsde {

class ActionOutsideBox : public Error {
public:
    using Error::Error;
};

using ActionDrift = std::function<void(double t, std::span<const double> x, std::span<const double> a, std::span<double> out)>;
using RunningReward = std::function<double(double t, std::span<const double> x, std::span<const double> a)>;
using Optimizer = std::function<void(double t, std::span<const double> x, std::span<const double> p, std::span<double> out)>;
using ScalarTerminal = std::function<double(std::span<const double> x)>;

struct PlayerSpec {
    int k = 1;
    std::vector<Interval> box;  // A^i, k entries
    ActionDrift b;
    RunningReward r;
    Optimizer a_hat;
    ScalarTerminal g;

    bool contains(std::span<const double> a, double tol = 1e-12) const {
        for (int m = 0; m < k; ++m) {
            const auto& [lo, hi] = box[static_cast<std::size_t>(m)];
            const double s = tol * (1.0 + std::fabs(lo) + std::fabs(hi));
            if (!(a[static_cast<std::size_t>(m)] >= lo - s && a[static_cast<std::size_t>(m)] <= hi + s)) return false;
        }
        return true;
    }
};

struct DiagonalGameSpec {
    int d = 1;
    double T = 1.0;
    SigmaMap sigma;
    std::vector<PlayerSpec> players;

    int n() const noexcept { return static_cast<int>(players.size()); }

    SmallMatrix eval_sigma(double t, std::span<const double> x) const {
        SmallMatrix s(d, d);
        sigma(std::clamp(t, 0.0, T), x, std::span<double>(s.data(), static_cast<std::size_t>(d) * d));
        return s;
    }

    void validate() const {
        if (d < 1 || d > kMaxStateDim) throw ValidationError("game.d", "must be in [1, 3]");
        if (!(T > 0.0)) throw ValidationError("game.T", "must be positive");
        if (players.empty()) throw ValidationError("game.players", "need at least one player");
        if (!sigma) throw ValidationError("game.sigma", "missing");
        for (std::size_t i = 0; i < players.size(); ++i) {
            const auto& p = players[i];
            const std::string path = "game.players[" + std::to_string(i) + "]";
            if (p.k < 1 || p.k > 2) throw ValidationError(path + ".k", "action dimension must be 1 or 2");
            if (p.box.size() != static_cast<std::size_t>(p.k)) throw ValidationError(path + ".box", "need k intervals");
            for (const auto& [lo, hi] : p.box)
                if (!(hi >= lo) || !std::isfinite(lo) || !std::isfinite(hi)) throw ValidationError(path + ".box", "bounded lo <= hi required");
            if (!p.b || !p.r || !p.a_hat || !p.g) throw ValidationError(path, "missing map");
        }
    }
};

// ---------------------------------------------------------------------------
// Expression-built games

struct PlayerSources {
    int k = 1;
    std::vector<Interval> box;
    std::vector<std::string> b;      // d expressions in (t, x, a)
    std::string r;                   // (t, x, a)
    std::vector<std::string> a_hat;  // k expressions in (t, x, p)
    std::string g;                   // x
};

struct GameSources {
    int d = 1;
    double T = 1.0;
    std::vector<std::string> sigma;  // d*d, (t, x)
    std::vector<PlayerSources> players;
};

inline DiagonalGameSpec build_game(const GameSources& src, const std::string& path = "game") {
    const int d = src.d;
    if (d < 1 || d > kMaxStateDim) throw ValidationError(path + ".d", "must be in [1, 3]");
    if (!(src.T > 0.0)) throw ValidationError(path + ".T", "must be positive");
    if (src.sigma.size() != static_cast<std::size_t>(d * d)) throw ValidationError(path + ".sigma", "expected d*d expressions");
    if (src.players.empty()) throw ValidationError(path + ".players", "need at least one player");
    DiagonalGameSpec game;
    game.d = d;
    game.T = src.T;
    {
        const auto lay = layout::tx(d);
        std::vector<expr::BoundExpr> s;
        for (std::size_t k = 0; k < src.sigma.size(); ++k)
            s.emplace_back(parse_for_slot(src.sigma[k], lay, path + ".sigma[" + std::to_string(k) + "]"), lay);
        game.sigma = [s](double t, std::span<const double> x, std::span<double> out) {
            std::array<double, kMaxStateDim + 1> env{};
            env[0] = t;
            std::copy(x.begin(), x.end(), env.begin() + 1);
            for (std::size_t k = 0; k < s.size(); ++k) out[k] = s[k](std::span<const double>(env.data(), x.size() + 1));
        };
    }
    for (std::size_t i = 0; i < src.players.size(); ++i) {
        const auto& ps = src.players[i];
        const std::string pp = path + ".players[" + std::to_string(i) + "]";
        if (ps.k < 1 || ps.k > 2) throw ValidationError(pp + ".k", "action dimension must be 1 or 2");
        if (ps.box.size() != static_cast<std::size_t>(ps.k)) throw ValidationError(pp + ".box", "need k intervals");
        if (ps.b.size() != static_cast<std::size_t>(d)) throw ValidationError(pp + ".b", "expected d expressions");
        if (ps.a_hat.size() != static_cast<std::size_t>(ps.k)) throw ValidationError(pp + ".a_hat", "expected k expressions");
        const auto l_txa = layout::txa(d, ps.k);
        const auto l_txp = layout::txp(d);
        const auto l_x = layout::x_only(d);
        std::vector<expr::BoundExpr> b, ah;
        for (std::size_t m = 0; m < ps.b.size(); ++m)
            b.emplace_back(parse_for_slot(ps.b[m], l_txa, pp + ".b[" + std::to_string(m) + "]"), l_txa);
        for (std::size_t m = 0; m < ps.a_hat.size(); ++m)
            ah.emplace_back(parse_for_slot(ps.a_hat[m], l_txp, pp + ".a_hat[" + std::to_string(m) + "]"), l_txp);
        expr::BoundExpr r(parse_for_slot(ps.r, l_txa, pp + ".r"), l_txa);
        expr::BoundExpr g(parse_for_slot(ps.g, l_x, pp + ".g"), l_x);

        PlayerSpec p;
        p.k = ps.k;
        p.box = ps.box;
        const std::size_t env_txa = l_txa.size(), env_txp = l_txp.size();
        p.b = [b, env_txa](double t, std::span<const double> x, std::span<const double> a, std::span<double> out) {
            detail::EnvBuffer env(env_txa);
            detail::fill_txyz(env.data(), t, x, a, {});
            for (std::size_t m = 0; m < b.size(); ++m) out[m] = b[m](env.view());
        };
        p.r = [r, env_txa](double t, std::span<const double> x, std::span<const double> a) {
            detail::EnvBuffer env(env_txa);
            detail::fill_txyz(env.data(), t, x, a, {});
            return r(env.view());
        };
        p.a_hat = [ah, env_txp](double t, std::span<const double> x, std::span<const double> pv, std::span<double> out) {
            detail::EnvBuffer env(env_txp);
            detail::fill_txyz(env.data(), t, x, pv, {});
            for (std::size_t m = 0; m < ah.size(); ++m) out[m] = ah[m](env.view());
        };
        p.g = [g](std::span<const double> x) { return g(x); };
        game.players.push_back(std::move(p));
    }
    return game;
}

// ---------------------------------------------------------------------------

/// H^i = sum_j b^j(t, x, a^j) . p_i + r^i(t, x, a^i).
inline double hamiltonian_eval(const DiagonalGameSpec& game, int i, double t, std::span<const double> x,
                               std::span<const double> p_i, const std::vector<std::vector<double>>& a) {
    if (a.size() != game.players.size()) throw DimensionMismatch("hamiltonian_eval: need one action per player");
    std::array<double, kMaxStateDim> bj{};
    const std::span<double> bs(bj.data(), static_cast<std::size_t>(game.d));
    double h = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const auto& pl = game.players[j];
        if (a[j].size() != static_cast<std::size_t>(pl.k)) throw DimensionMismatch("hamiltonian_eval: action dimension");
        if (!pl.contains(a[j])) throw ActionOutsideBox("hamiltonian_eval: action of player " + std::to_string(j + 1) + " outside its box");
        pl.b(t, x, a[j], bs);
        for (int m = 0; m < game.d; ++m) h += bj[static_cast<std::size_t>(m)] * p_i[static_cast<std::size_t>(m)];
    }
    return h + game.players[static_cast<std::size_t>(i)].r(t, x, a[static_cast<std::size_t>(i)]);
}

/// Per-axis uniform grid of a box; lexicographic order, first axis slowest.
inline std::vector<std::vector<double>> action_grid(const std::vector<Interval>& box, int resolution) {
    std::vector<std::vector<double>> out{{}};
    for (const auto& [lo, hi] : box) {
        std::vector<std::vector<double>> next;
        for (const auto& prefix : out)
            for (int j = 0; j < resolution; ++j) {
                auto a = prefix;
                a.push_back(resolution == 1 ? lo : lo + (hi - lo) * j / (resolution - 1));
                next.push_back(std::move(a));
            }
        out = std::move(next);
    }
    return out;
}

struct IsaacsProbe {
    double t = 0.0;
    std::vector<double> x;
    std::vector<std::vector<double>> p;  // one p^i in R^d per player
};

struct IsaacsReport {
    double worst_slack = -std::numeric_limits<double>::infinity();
    std::size_t probe = 0;
    int player = 0;
    std::vector<double> best_action;  // grid maximiser at the witness
    std::size_t evaluations = 0;
};

/// slack_i = max over the action grid of H^i(.., (a_hat^{-i}, a)) - H^i(.., a_hat).
/// Grid ties go to the lowest lexicographic index.
inline IsaacsReport isaacs_gap(const DiagonalGameSpec& game, const std::vector<IsaacsProbe>& probes, int resolution = 101) {
    IsaacsReport rep;
    const int n = game.n();
    std::vector<std::vector<std::vector<double>>> grids;
    for (const auto& pl : game.players) grids.push_back(action_grid(pl.box, resolution));
    for (std::size_t q = 0; q < probes.size(); ++q) {
        const auto& pr = probes[q];
        std::vector<std::vector<double>> ahat(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
            ahat[static_cast<std::size_t>(j)].resize(static_cast<std::size_t>(game.players[static_cast<std::size_t>(j)].k));
            game.players[static_cast<std::size_t>(j)].a_hat(pr.t, pr.x, pr.p[static_cast<std::size_t>(j)], ahat[static_cast<std::size_t>(j)]);
        }
        for (int i = 0; i < n; ++i) {
            const double h0 = hamiltonian_eval(game, i, pr.t, pr.x, pr.p[static_cast<std::size_t>(i)], ahat);
            auto trial = ahat;
            double best = -std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            const auto& grid = grids[static_cast<std::size_t>(i)];
            for (std::size_t g = 0; g < grid.size(); ++g) {
                trial[static_cast<std::size_t>(i)] = grid[g];
                const double h = hamiltonian_eval(game, i, pr.t, pr.x, pr.p[static_cast<std::size_t>(i)], trial);
                if (h > best) {
                    best = h;
                    arg = g;
                }
            }
            rep.evaluations += grid.size();
            const double slack = best - h0;
            if (slack > rep.worst_slack) {
                rep.worst_slack = slack;
                rep.probe = q;
                rep.player = i;
                rep.best_action = grid[arg];
            }
        }
    }
    return rep;
}

/// Value-system coefficients:
///   b(t,x,y,z) = sum_j b^j(t, x, a_hat^j(t, x, sigma^{-1} z^j)),
///   f^i(t,x,y,z) = r^i(t, x, a_hat^i(t, x, sigma^{-1} z^i)).
inline CoefficientSet assemble_game(const DiagonalGameSpec& game) {
    game.validate();
    const int n = game.n(), d = game.d;
    auto g_ptr = std::make_shared<const DiagonalGameSpec>(game);
    auto actions = [g_ptr, n, d](double t, std::span<const double> x, std::span<const double> z, std::vector<std::vector<double>>& a) {
        const SmallMatrix s = g_ptr->eval_sigma(t, x);
        std::array<double, kMaxStateDim> p{};
        a.resize(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
            const auto& pl = g_ptr->players[static_cast<std::size_t>(j)];
            gradient_from_row(s, z.subspan(static_cast<std::size_t>(j * d), static_cast<std::size_t>(d)),
                        std::span<double>(p.data(), static_cast<std::size_t>(d)), t, x);
            a[static_cast<std::size_t>(j)].resize(static_cast<std::size_t>(pl.k));
            pl.a_hat(t, x, std::span<const double>(p.data(), static_cast<std::size_t>(d)), a[static_cast<std::size_t>(j)]);
        }
    };
    CoefficientSet c;
    c.n = n;
    c.d = d;
    c.T = game.T;
    c.sigma = game.sigma;
    c.b = [g_ptr, actions, n, d](double t, std::span<const double> x, std::span<const double>, std::span<const double> z,
                                 std::span<double> out) {
        std::vector<std::vector<double>> a;
        actions(t, x, z, a);
        std::fill(out.begin(), out.end(), 0.0);
        std::array<double, kMaxStateDim> bj{};
        for (int j = 0; j < n; ++j) {
            g_ptr->players[static_cast<std::size_t>(j)].b(t, x, a[static_cast<std::size_t>(j)],
                                                          std::span<double>(bj.data(), static_cast<std::size_t>(d)));
            for (int m = 0; m < d; ++m) out[static_cast<std::size_t>(m)] += bj[static_cast<std::size_t>(m)];
        }
    };
    c.f = [g_ptr, n, d](double t, std::span<const double> x, std::span<const double>, std::span<const double> z,
                        std::span<double> out) {
        const SmallMatrix s = g_ptr->eval_sigma(t, x);
        std::array<double, kMaxStateDim> p{};
        std::array<double, 2> a{};
        for (int i = 0; i < n; ++i) {
            const auto& pl = g_ptr->players[static_cast<std::size_t>(i)];
            gradient_from_row(s, z.subspan(static_cast<std::size_t>(i * d), static_cast<std::size_t>(d)),
                        std::span<double>(p.data(), static_cast<std::size_t>(d)), t, x);
            const std::span<double> as(a.data(), static_cast<std::size_t>(pl.k));
            pl.a_hat(t, x, std::span<const double>(p.data(), static_cast<std::size_t>(d)), as);
            out[static_cast<std::size_t>(i)] = pl.r(t, x, as);
        }
    };
    c.g = [g_ptr, n](std::span<const double> x, std::span<double> out) {
        for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = g_ptr->players[static_cast<std::size_t>(i)].g(x);
    };
    return c;
}

// ---------------------------------------------------------------------------
// Feedback policies

/// Feedback profile (t, x) -> (alpha^1, ..., alpha^n).
class PolicyProfile {
public:
    using PlayerPolicy = std::function<void(double t, std::span<const double> x, std::span<double> out)>;

    PolicyProfile() = default;
    explicit PolicyProfile(std::vector<PlayerPolicy> policies) : policies_(std::move(policies)) {}

    void action(int j, double t, std::span<const double> x, std::span<double> out) const {
        policies_[static_cast<std::size_t>(j)](t, x, out);
    }
    PolicyProfile with(int i, PlayerPolicy beta) const {
        PolicyProfile p = *this;
        p.policies_[static_cast<std::size_t>(i)] = std::move(beta);
        return p;
    }
    int size() const noexcept { return static_cast<int>(policies_.size()); }

private:
    std::vector<PlayerPolicy> policies_;
};

/// alpha^i(t, x) = a_hat^i(t, x, sigma^{-1}(t, x) v^i(t, x)).
inline PolicyProfile equilibrium_policy(const DecouplingField& field, const DiagonalGameSpec& game) {
    if (field.n != game.n() || field.d != game.d) throw DimensionMismatch("equilibrium_policy: field does not match the game");
    auto f = std::make_shared<const DecouplingField>(field);
    auto g = std::make_shared<const DiagonalGameSpec>(game);
    std::vector<PolicyProfile::PlayerPolicy> pol;
    for (int i = 0; i < game.n(); ++i)
        pol.push_back([f, g, i](double t, std::span<const double> x, std::span<double> out) {
            const int n = f->n, d = f->d;
            std::vector<double> u(static_cast<std::size_t>(n)), v(static_cast<std::size_t>(n * d));
            f->sample(t, x, u, v);
            std::array<double, kMaxStateDim> p{};
            gradient_from_row(g->eval_sigma(t, x), std::span<const double>(v).subspan(static_cast<std::size_t>(i * d), static_cast<std::size_t>(d)),
                        std::span<double>(p.data(), static_cast<std::size_t>(d)), t, x);
            g->players[static_cast<std::size_t>(i)].a_hat(t, x, std::span<const double>(p.data(), static_cast<std::size_t>(d)), out);
        });
    return PolicyProfile(std::move(pol));
}

namespace detail {

/// CoefficientSet carrying only sigma and T of the game, for marching scalar equations.
inline CoefficientSet sigma_only(const DiagonalGameSpec& game) {
    CoefficientSet c;
    c.n = 1;
    c.d = game.d;
    c.T = game.T;
    c.sigma = game.sigma;
    return c;
}

inline std::vector<double> player_terminal(const DiagonalGameSpec& game, int i, const Lattice& lat) {
    std::vector<double> w(lat.count);
    std::array<double, kMaxStateDim> x{};
    for (std::size_t node = 0; node < lat.count; ++node) {
        lat.coords(node, x);
        w[node] = game.players[static_cast<std::size_t>(i)].g(std::span<const double>(x.data(), static_cast<std::size_t>(lat.d)));
    }
    return w;
}

/// sum_{j != i} b^j(t, x, alpha^j(t, x)) into out.
inline void frozen_drift(const DiagonalGameSpec& game, const PolicyProfile& profile, int i, double t, std::span<const double> x,
                         std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    std::array<double, 2> a{};
    std::array<double, kMaxStateDim> bj{};
    for (int j = 0; j < game.n(); ++j) {
        if (j == i) continue;
        const auto& pl = game.players[static_cast<std::size_t>(j)];
        const std::span<double> as(a.data(), static_cast<std::size_t>(pl.k));
        profile.action(j, t, x, as);
        pl.b(t, x, as, std::span<double>(bj.data(), static_cast<std::size_t>(game.d)));
        for (int m = 0; m < game.d; ++m) out[static_cast<std::size_t>(m)] += bj[static_cast<std::size_t>(m)];
    }
}

}  // namespace detail

/// Value of player i under a fixed profile: the linear equation
///   d_t w + tr(a D^2 w) + (sum_j b^j(alpha^j)) . Dw + r^i(alpha^i) = 0,  w(T) = g^i,
/// marched on the field's grid and time plan. Stored level x node.
inline std::vector<double> policy_value(const DiagonalGameSpec& game, const DecouplingField& field, const PolicyProfile& profile,
                                        int i, int threads = 1) {
    const Lattice lat(field.grid);
    const auto c = detail::sigma_only(game);
    const int d = game.d;
    auto source = [&](double t, std::span<const double> x, std::span<const double>, std::span<const double> grad,
                      const SmallMatrix&, std::span<double> out) {
        std::array<double, kMaxStateDim> drift{}, bi{};
        std::array<double, 2> a{};
        const auto& pl = game.players[static_cast<std::size_t>(i)];
        const std::span<double> as(a.data(), static_cast<std::size_t>(pl.k));
        detail::frozen_drift(game, profile, i, t, x, std::span<double>(drift.data(), static_cast<std::size_t>(d)));
        profile.action(i, t, x, as);
        pl.b(t, x, as, std::span<double>(bi.data(), static_cast<std::size_t>(d)));
        double s = pl.r(t, x, as);
        for (int m = 0; m < d; ++m) s += (drift[static_cast<std::size_t>(m)] + bi[static_cast<std::size_t>(m)]) * grad[static_cast<std::size_t>(m)];
        out[0] = s;
    };
    return detail::march_backward(field.grid, c, 1, field.plan, detail::player_terminal(game, i, lat), source, threads, nullptr).stored;
}

/// Best response of player i against alpha^{-i} frozen from the profile:
///   d_t w + tr(a D^2 w) + sup_a [ (b^i(a) + sum_{j != i} b^j(alpha^j)) . Dw + r^i(a) ] = 0,
/// with the sup attained at a_hat^i(t, x, sigma^{-1} pi^k(sigma Dw)), k the field's radius.
inline std::vector<double> best_response_value(const DiagonalGameSpec& game, const DecouplingField& field,
                                               const PolicyProfile& profile, int i, int threads = 1) {
    const Lattice lat(field.grid);
    const auto c = detail::sigma_only(game);
    const int d = game.d;
    const double k = field.truncation_radius_used > 0.0 ? field.truncation_radius_used : std::numeric_limits<double>::infinity();
    auto source = [&, k](double t, std::span<const double> x, std::span<const double>, std::span<const double> grad,
                         const SmallMatrix& sig, std::span<double> out) {
        std::array<double, kMaxStateDim> drift{}, bi{}, z{}, p{};
        std::array<double, 2> a{};
        const auto& pl = game.players[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int m = 0; m < d; ++m) acc += sig(m, j) * grad[static_cast<std::size_t>(m)];
            z[static_cast<std::size_t>(j)] = acc;
        }
        if (std::isfinite(k)) truncate_in_place(std::span<double>(z.data(), static_cast<std::size_t>(d)), k);
        gradient_from_row(sig, std::span<const double>(z.data(), static_cast<std::size_t>(d)), std::span<double>(p.data(), static_cast<std::size_t>(d)), t, x);
        const std::span<double> as(a.data(), static_cast<std::size_t>(pl.k));
        pl.a_hat(t, x, std::span<const double>(p.data(), static_cast<std::size_t>(d)), as);
        detail::frozen_drift(game, profile, i, t, x, std::span<double>(drift.data(), static_cast<std::size_t>(d)));
        pl.b(t, x, as, std::span<double>(bi.data(), static_cast<std::size_t>(d)));
        double s = pl.r(t, x, as);
        for (int m = 0; m < d; ++m) s += (drift[static_cast<std::size_t>(m)] + bi[static_cast<std::size_t>(m)]) * grad[static_cast<std::size_t>(m)];
        out[0] = s;
    };
    return detail::march_backward(field.grid, c, 1, field.plan, detail::player_terminal(game, i, lat), source, threads, nullptr).stored;
}

struct BestResponseGap {
    double gap = -std::numeric_limits<double>::infinity();
    double t = 0.0;
    std::vector<double> x;
};

/// max over stored levels and the reporting subdomain of w - u^i, where w is
/// the best-response value against the profile (default: the equilibrium
/// policy of the field) and u^i is the field value, or the profile's own
/// value for player i when a profile is supplied.
inline BestResponseGap best_response_gap(const DiagonalGameSpec& game, const DecouplingField& field, int i,
                                         const PolicyProfile* profile = nullptr, int threads = 1) {
    if (i < 0 || i >= game.n()) throw DimensionMismatch("best_response_gap: player index out of range");
    const PolicyProfile eq = profile ? *profile : equilibrium_policy(field, game);
    const auto w = best_response_value(game, field, eq, i, threads);
    std::vector<double> ref;
    if (profile) ref = policy_value(game, field, *profile, i, threads);
    const Lattice lat(field.grid);
    const auto sub = lat.mask(field.grid.reporting_box());
    BestResponseGap out;
    std::size_t best_level = 0, best_node = 0;
    for (std::size_t l = 0; l < field.levels(); ++l)
        for (std::size_t node = 0; node < lat.count; ++node) {
            if (!sub[node]) continue;
            const double u = profile ? ref[l * lat.count + node] : field.u_at(l, node, i);
            const double gap = w[l * lat.count + node] - u;
            if (gap > out.gap) {
                out.gap = gap;
                best_level = l;
                best_node = node;
            }
        }
    out.t = field.times[best_level];
    out.x.resize(static_cast<std::size_t>(lat.d));
    lat.coords(best_node, out.x);
    return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo deviations

struct DeviationResult {
    std::string name;
    double excess = 0.0;  // J^i(alpha^{-i}, beta) - u^i(t0, x0)
    double se = 0.0;
    double payoff = 0.0;
    double value = 0.0;   // u^i(t0, x0)
    double exit_fraction = 0.0;
};

struct McSettings {
    std::size_t paths = 20000;
    double dt_sim = 0.01;
    std::uint64_t seed = 1;
    int threads = 1;
};

/// Simulates X under sum_{j != i} b^j(alpha^j) + b^i(beta) with alpha from the
/// field and evaluates the payoff of player i.
inline DeviationResult deviation_payoff_mc(const DiagonalGameSpec& game, const DecouplingField& field, int i,
                                           const PolicyProfile::PlayerPolicy& beta, double t0, std::span<const double> x0,
                                           const McSettings& mc) {
    const auto coeffs = assemble_game(game);
    const auto eq = equilibrium_policy(field, game);
    const int d = game.d;
    const auto& pl = game.players[static_cast<std::size_t>(i)];
    auto drift = [&](double t, std::span<const double> x, std::span<const double>, std::span<const double>, std::span<double> out) {
        detail::frozen_drift(game, eq, i, t, x, out);
        std::array<double, 2> a{};
        std::array<double, kMaxStateDim> bi{};
        const std::span<double> as(a.data(), static_cast<std::size_t>(pl.k));
        beta(t, x, as);
        if (!pl.contains(as)) throw ActionOutsideBox("deviation policy leaves the action box");
        pl.b(t, x, as, std::span<double>(bi.data(), static_cast<std::size_t>(d)));
        for (int m = 0; m < d; ++m) out[static_cast<std::size_t>(m)] += bi[static_cast<std::size_t>(m)];
    };
    SimulationOptions opt;
    opt.threads = mc.threads;
    const auto bundle = simulate_with_drift(coeffs, &field, drift, t0, x0, mc.dt_sim, mc.paths, mc.seed, opt);
    const auto stats = payoff_mc(
        bundle,
        [&](double t, std::span<const double> x) {
            std::array<double, 2> a{};
            const std::span<double> as(a.data(), static_cast<std::size_t>(pl.k));
            beta(t, x, as);
            return pl.r(t, x, as);
        },
        [&](std::span<const double> x) { return pl.g(x); });
    DeviationResult out;
    out.value = sample_field(field, t0, x0).u[static_cast<std::size_t>(i)];
    out.payoff = stats.mean;
    out.se = stats.se;
    out.excess = stats.mean - out.value;
    out.exit_fraction = bundle.exit_fraction;
    return out;
}

/// Default deviations for player i: the equilibrium action itself, the
/// constant 0 (clamped into the box), the box corners and a_hat with p
/// shifted by 0.5 in every coordinate.
inline std::vector<std::pair<std::string, PolicyProfile::PlayerPolicy>> deviation_battery(const DiagonalGameSpec& game,
                                                                                        const DecouplingField& field, int i) {
    const auto eq = equilibrium_policy(field, game);
    const auto& pl = game.players[static_cast<std::size_t>(i)];
    std::vector<std::pair<std::string, PolicyProfile::PlayerPolicy>> out;
    out.emplace_back("equilibrium", [eq, i](double t, std::span<const double> x, std::span<double> a) { eq.action(i, t, x, a); });
    auto constant = [](std::vector<double> v) {
        return [v](double, std::span<const double>, std::span<double> a) { std::copy(v.begin(), v.end(), a.begin()); };
    };
    std::vector<double> zero;
    for (const auto& [lo, hi] : pl.box) zero.push_back(std::clamp(0.0, lo, hi));
    out.emplace_back("zero", constant(zero));
    for (std::size_t corner = 0; corner < (std::size_t{1} << pl.k); ++corner) {
        std::vector<double> v;
        std::string name = "corner";
        for (int m = 0; m < pl.k; ++m) {
            const bool up = (corner >> m) & 1U;
            v.push_back(up ? pl.box[static_cast<std::size_t>(m)].second : pl.box[static_cast<std::size_t>(m)].first);
            name += up ? "+" : "-";
        }
        out.emplace_back(name, constant(v));
    }
    auto f = std::make_shared<const DecouplingField>(field);
    auto g = std::make_shared<const DiagonalGameSpec>(game);
    out.emplace_back("shifted_p", [f, g, i](double t, std::span<const double> x, std::span<double> a) {
        const int n = f->n, d = f->d;
        std::vector<double> u(static_cast<std::size_t>(n)), v(static_cast<std::size_t>(n * d));
        f->sample(t, x, u, v);
        std::array<double, kMaxStateDim> p{};
        gradient_from_row(g->eval_sigma(t, x), std::span<const double>(v).subspan(static_cast<std::size_t>(i * d), static_cast<std::size_t>(d)),
                    std::span<double>(p.data(), static_cast<std::size_t>(d)), t, x);
        for (int m = 0; m < d; ++m) p[static_cast<std::size_t>(m)] += 0.5;
        g->players[static_cast<std::size_t>(i)].a_hat(t, x, std::span<const double>(p.data(), static_cast<std::size_t>(d)), a);
        const auto& box = g->players[static_cast<std::size_t>(i)].box;
        for (std::size_t m = 0; m < box.size(); ++m) a[m] = std::clamp(a[m], box[m].first, box[m].second);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Certificate

struct NashTolerances {
    double pde = 1e-2;
    double mc = 1e-2;
    double isaacs = 1e-6;
    double se_multiplier = 3.0;
};

struct PlayerCertificate {
    BestResponseGap gap;
    std::vector<DeviationResult> deviations;
    bool pde_ok = false;
    bool mc_ok = false;
};

struct NashCertificate {
    std::vector<PlayerCertificate> players;
    IsaacsReport isaacs;
    NashTolerances tolerances;
    bool isaacs_ok = false;
    bool certified = false;
    std::string scope = "finitely many (t,x) probes and deviation policies; best responses on the reporting subdomain";
};

/// Isaacs probes at three times and 9 points per axis of the reporting box,
/// with p^i taken from the field.
inline std::vector<IsaacsProbe> field_probes(const DecouplingField& field, const DiagonalGameSpec& game) {
    const auto box = field.grid.reporting_box();
    const int d = field.d, n = field.n;
    std::vector<IsaacsProbe> out;
    const auto grid = action_grid(box, 9);
    for (double frac : {0.0, 0.5, 0.9}) {
        const double t = frac * game.T;
        for (const auto& x : grid) {
            IsaacsProbe pr;
            pr.t = t;
            pr.x = x;
            std::vector<double> u(static_cast<std::size_t>(n)), v(static_cast<std::size_t>(n * d));
            field.sample(t, x, u, v);
            const SmallMatrix s = game.eval_sigma(t, x);
            for (int i = 0; i < n; ++i) {
                std::vector<double> p(static_cast<std::size_t>(d));
                gradient_from_row(s, std::span<const double>(v).subspan(static_cast<std::size_t>(i * d), static_cast<std::size_t>(d)), p, t, x);
                pr.p.push_back(std::move(p));
            }
            out.push_back(std::move(pr));
        }
    }
    return out;
}

inline NashCertificate certify_nash(const DiagonalGameSpec& game, const DecouplingField& field, double t0,
                                    std::span<const double> x0, const McSettings& mc, const NashTolerances& tol = {},
                                    int isaacs_resolution = 101) {
    NashCertificate cert;
    cert.tolerances = tol;
    cert.isaacs = isaacs_gap(game, field_probes(field, game), isaacs_resolution);
    cert.isaacs_ok = cert.isaacs.worst_slack <= tol.isaacs;
    bool all = cert.isaacs_ok;
    for (int i = 0; i < game.n(); ++i) {
        PlayerCertificate pc;
        pc.gap = best_response_gap(game, field, i, nullptr, mc.threads);
        pc.pde_ok = pc.gap.gap <= tol.pde;
        pc.mc_ok = true;
        std::uint64_t k = 0;
        for (const auto& [name, beta] : deviation_battery(game, field, i)) {
            McSettings s = mc;
            s.seed = mc.seed + 1000003ULL * static_cast<std::uint64_t>(i) + 7919ULL * k++;
            auto dev = deviation_payoff_mc(game, field, i, beta, t0, x0, s);
            dev.name = name;
            pc.mc_ok = pc.mc_ok && dev.excess <= tol.se_multiplier * dev.se + tol.mc;
            pc.deviations.push_back(std::move(dev));
        }
        all = all && pc.pde_ok && pc.mc_ok;
        cert.players.push_back(std::move(pc));
    }
    cert.certified = all;
    return cert;
}

// ---------------------------------------------------------------------------
// LQ benchmark

/// Two-player LQ game with b^j = a^j, r^i = -(a^i)^2/2 - q_i x^2, g^i = -c_i x^2,
/// sigma = 1. Substituting u^i = -P_i x^2 - S_i and a_hat = p into the value
/// system gives, backward from P_i(T) = c_i, S_i(T) = 0,
///   P_i' = 2 P_i^2 + 4 P_i P_j - q_i,   S_i' = -P_i,
/// with equilibrium feedback alpha^i = -2 P_i x.
struct RiccatiTable {
    double T = 1.0;
    std::vector<double> t;                 // increasing
    std::array<std::vector<double>, 2> P;
    std::array<std::vector<double>, 2> S;

    /// Linear interpolation in t.
    std::array<double, 2> interp(const std::array<std::vector<double>, 2>& v, double s) const {
        const double pos = std::clamp(s / T, 0.0, 1.0) * static_cast<double>(t.size() - 1);
        auto k = static_cast<std::size_t>(std::floor(pos));
        if (k >= t.size() - 1) k = t.size() - 2;
        const double w = pos - static_cast<double>(k);
        return {(1 - w) * v[0][k] + w * v[0][k + 1], (1 - w) * v[1][k] + w * v[1][k + 1]};
    }
    double value(int i, double s, double x) const {
        return -interp(P, s)[static_cast<std::size_t>(i)] * x * x - interp(S, s)[static_cast<std::size_t>(i)];
    }
    double feedback(int i, double s, double x) const { return -2.0 * interp(P, s)[static_cast<std::size_t>(i)] * x; }
};

inline RiccatiTable lq_riccati_oracle(std::array<double, 2> q, std::array<double, 2> c, double T, std::size_t steps = 4096) {
    if (!(T > 0.0) || steps == 0) throw ValidationError("riccati", "T and steps must be positive");
    using State = std::array<double, 4>;  // P1, P2, S1, S2
    auto rhs = [&](const State& s) {
        return State{2 * s[0] * s[0] + 4 * s[0] * s[1] - q[0], 2 * s[1] * s[1] + 4 * s[1] * s[0] - q[1], -s[0], -s[1]};
    };
    RiccatiTable tab;
    tab.T = T;
    tab.t.resize(steps + 1);
    for (auto* v : {&tab.P[0], &tab.P[1], &tab.S[0], &tab.S[1]}) v->resize(steps + 1);
    State s{c[0], c[1], 0.0, 0.0};
    const double h = -T / static_cast<double>(steps);  // backward
    auto store = [&](std::size_t k) {
        tab.t[k] = k == steps ? T : T * static_cast<double>(k) / static_cast<double>(steps);
        tab.P[0][k] = s[0];
        tab.P[1][k] = s[1];
        tab.S[0][k] = s[2];
        tab.S[1][k] = s[3];
    };
    store(steps);
    for (std::size_t k = steps; k-- > 0;) {
        auto add = [](const State& a, const State& b, double w) {
            return State{a[0] + w * b[0], a[1] + w * b[1], a[2] + w * b[2], a[3] + w * b[3]};
        };
        const State k1 = rhs(s);
        const State k2 = rhs(add(s, k1, h / 2));
        const State k3 = rhs(add(s, k2, h / 2));
        const State k4 = rhs(add(s, k3, h));
        for (int m = 0; m < 4; ++m) s[static_cast<std::size_t>(m)] += h / 6 * (k1[static_cast<std::size_t>(m)] + 2 * k2[static_cast<std::size_t>(m)] + 2 * k3[static_cast<std::size_t>(m)] + k4[static_cast<std::size_t>(m)]);
        for (double v : s)
            if (!std::isfinite(v)) throw NumericFailure("lq_riccati_oracle: non-finite value at step " + std::to_string(k));
        store(k);
    }
    return tab;
}

// ---------------------------------------------------------------------------

struct GameValidation {
    bool optimizer_in_box = true;
    double worst_box_excess = 0.0;
    double growth_constant = 0.0;  // smallest C with |a_hat| <= C (1 + |p|) on samples
    std::size_t samples = 0;
};

/// Samples a_hat over t in [0,T], x in `box`, |p| up to 1e3.
inline GameValidation validate_game(const DiagonalGameSpec& game, const std::vector<Interval>& box, std::uint64_t seed = 11,
                                    std::size_t count = 2000) {
    GameValidation out;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int d = game.d;
    std::vector<double> x(static_cast<std::size_t>(d)), p(static_cast<std::size_t>(d));
    static constexpr std::array<double, 5> scales{0.1, 1.0, 10.0, 100.0, 1000.0};
    for (std::size_t s = 0; s < count; ++s) {
        const double t = unif(rng) * game.T;
        for (int a = 0; a < d; ++a) {
            const auto& [lo, hi] = box[static_cast<std::size_t>(a)];
            x[static_cast<std::size_t>(a)] = lo + unif(rng) * (hi - lo);
        }
        double pn = 0.0;
        for (double& v : p) {
            v = normal(rng);
            pn += v * v;
        }
        pn = std::sqrt(pn);
        const double scale = scales[s % scales.size()];
        for (double& v : p) v *= scale / std::max(pn, 1e-300);
        for (const auto& pl : game.players) {
            std::vector<double> a(static_cast<std::size_t>(pl.k));
            pl.a_hat(t, x, p, a);
            double an = 0.0;
            for (int m = 0; m < pl.k; ++m) {
                const auto& [lo, hi] = pl.box[static_cast<std::size_t>(m)];
                const double v = a[static_cast<std::size_t>(m)];
                out.worst_box_excess = std::max(out.worst_box_excess, std::max(lo - v, v - hi));
                an += v * v;
            }
            out.growth_constant = std::max(out.growth_constant, std::sqrt(an) / (1.0 + scale));
            ++out.samples;
        }
    }
    out.optimizer_in_box = out.worst_box_excess <= 1e-12;
    return out;
}

}  // namespace qfbsde
