#pragma once

// Euler-Maruyama forward paths under a decoupling field, and Monte Carlo
// checks of the probabilistic identities attached to it.

#include "qfbsde/errors.hpp"
#include "qfbsde/model.hpp"
#include "qfbsde/parallel.hpp"
#include "qfbsde/pde.hpp"
#include "qfbsde/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace qfbsde {

/// P paths of L steps. X is P x (L+1) x d, dW is P x L x d; Y (P x (L+1) x n)
/// and Z (P x (L+1) x n*d) hold field values along the path when a field was
/// attached. Exited paths are frozen at their last in-box state.
struct PathBundle {
    int d = 1;
    int n = 0;
    double t0 = 0.0;
    double T = 1.0;
    std::vector<double> x0;
    double dt = 0.0;
    std::size_t steps = 0;
    std::size_t paths = 0;
    std::uint64_t seed = 0;
    std::vector<double> X;
    std::vector<double> dW;
    std::vector<double> Y;
    std::vector<double> Z;
    std::vector<char> exited;
    double exit_fraction = 0.0;
    bool exit_warning = false;

    bool has_field_values() const noexcept { return n > 0; }
    double time(std::size_t l) const noexcept { return l == steps ? T : t0 + static_cast<double>(l) * dt; }

    std::span<const double> x(std::size_t p, std::size_t l) const {
        return {X.data() + (p * (steps + 1) + l) * static_cast<std::size_t>(d), static_cast<std::size_t>(d)};
    }
    std::span<const double> dw(std::size_t p, std::size_t l) const {
        return {dW.data() + (p * steps + l) * static_cast<std::size_t>(d), static_cast<std::size_t>(d)};
    }
    std::span<const double> y(std::size_t p, std::size_t l) const {
        return {Y.data() + (p * (steps + 1) + l) * static_cast<std::size_t>(n), static_cast<std::size_t>(n)};
    }
    std::span<const double> z(std::size_t p, std::size_t l) const {
        const auto w = static_cast<std::size_t>(n * d);
        return {Z.data() + (p * (steps + 1) + l) * w, w};
    }
    std::vector<std::size_t> active_paths() const {
        std::vector<std::size_t> out;
        for (std::size_t p = 0; p < paths; ++p)
            if (!exited[p]) out.push_back(p);
        return out;
    }
};

struct SimulationOptions {
    int threads = 1;
    double exit_warning_threshold = 0.05;
};

/// Drift as a function of (t, x, u, v); u and v are empty without a field.
using PathDrift = std::function<void(double t, std::span<const double> x, std::span<const double> u,
                                     std::span<const double> v, std::span<double> out)>;

/// Euler-Maruyama with the given drift and sigma from `coeffs`. With a field
/// attached, (u, v) are sampled at every step and paths that leave the grid
/// box are frozen and flagged.
inline PathBundle simulate_with_drift(const CoefficientSet& coeffs, const DecouplingField* field, const PathDrift& drift,
                                      double t0, std::span<const double> x0, double dt_sim, std::size_t P,
                                      std::uint64_t seed, const SimulationOptions& opt = {}) {
    const int d = coeffs.d;
    if (static_cast<int>(x0.size()) != d) throw DimensionMismatch("simulate: x0 has wrong dimension");
    if (field && (field->d != d || field->n != coeffs.n)) throw DimensionMismatch("simulate: field and coefficients disagree");
    if (!(t0 >= 0.0 && t0 < coeffs.T)) throw ValidationError("mc.t0", "must lie in [0, T)");
    if (!(dt_sim > 0.0)) throw ValidationError("mc.dt_sim", "must be positive");
    if (P == 0) throw ValidationError("mc.paths", "must be positive");

    PathBundle B;
    B.d = d;
    B.n = field ? field->n : 0;
    B.t0 = t0;
    B.T = coeffs.T;
    B.x0.assign(x0.begin(), x0.end());
    B.steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround((coeffs.T - t0) / dt_sim)));
    B.dt = (coeffs.T - t0) / static_cast<double>(B.steps);
    B.paths = P;
    B.seed = seed;
    const std::size_t L = B.steps, ud = static_cast<std::size_t>(d), un = static_cast<std::size_t>(B.n);
    const std::size_t uz = un * ud;
    B.X.assign(P * (L + 1) * ud, 0.0);
    B.dW.assign(P * L * ud, 0.0);
    B.Y.assign(P * (L + 1) * un, 0.0);
    B.Z.assign(P * (L + 1) * uz, 0.0);
    B.exited.assign(P, 0);

    auto in_box = [&](std::span<const double> x) {
        if (!field) return true;
        for (int a = 0; a < d; ++a) {
            const auto& [lo, hi] = field->grid.box[static_cast<std::size_t>(a)];
            if (!(x[static_cast<std::size_t>(a)] >= lo && x[static_cast<std::size_t>(a)] <= hi)) return false;
        }
        return true;
    };
    if (!in_box(x0)) throw ExtrapolationError("simulate: x0 lies outside the grid box");

    const Philox4x32 gen(seed);
    const double sq = std::sqrt(B.dt);
    parallel_for(P, opt.threads, [&](std::size_t begin, std::size_t end) {
        std::vector<double> x(ud), xn(ud), b(ud), u(un), v(uz);
        for (std::size_t p = begin; p < end; ++p) {
            std::copy(x0.begin(), x0.end(), x.begin());
            bool frozen = false;
            for (std::size_t l = 0; l <= L; ++l) {
                const double t = B.time(l);
                std::copy(x.begin(), x.end(), B.X.begin() + static_cast<std::ptrdiff_t>((p * (L + 1) + l) * ud));
                if (field && !frozen) field->sample(t, x, u, v);
                std::copy(u.begin(), u.end(), B.Y.begin() + static_cast<std::ptrdiff_t>((p * (L + 1) + l) * un));
                std::copy(v.begin(), v.end(), B.Z.begin() + static_cast<std::ptrdiff_t>((p * (L + 1) + l) * uz));
                if (l == L) break;
                double* dw = B.dW.data() + (p * L + l) * ud;
                for (int a = 0; a < d; ++a) dw[a] = sq * normal_variate(gen, p, l, static_cast<std::uint32_t>(a));
                if (frozen) continue;
                drift(t, x, u, v, b);
                const SmallMatrix s = coeffs.eval_sigma(t, x);
                for (int a = 0; a < d; ++a) {
                    double acc = x[static_cast<std::size_t>(a)] + b[static_cast<std::size_t>(a)] * B.dt;
                    for (int k = 0; k < d; ++k) acc += s(a, k) * dw[k];
                    xn[static_cast<std::size_t>(a)] = acc;
                }
                for (double val : xn)
                    if (!std::isfinite(val)) throw NonFiniteValue(static_cast<long>(l + 1), static_cast<long>(p), "X");
                if (in_box(xn))
                    x.swap(xn);
                else {
                    frozen = true;
                    B.exited[p] = 1;
                }
            }
        }
    });
    const auto exits = static_cast<double>(std::count(B.exited.begin(), B.exited.end(), 1));
    B.exit_fraction = exits / static_cast<double>(P);
    B.exit_warning = B.exit_fraction > opt.exit_warning_threshold;
    return B;
}

/// Paths of dX = b(t, X, u(t,X), v(t,X)) dt + sigma(t,X) dB.
inline PathBundle simulate_paths(const DecouplingField& field, const CoefficientSet& coeffs, double t0,
                                 std::span<const double> x0, double dt_sim, std::size_t P, std::uint64_t seed,
                                 const SimulationOptions& opt = {}) {
    auto drift = [&coeffs](double t, std::span<const double> x, std::span<const double> u, std::span<const double> v,
                           std::span<double> out) { coeffs.eval_b(t, x, u, v, out); };
    return simulate_with_drift(coeffs, &field, drift, t0, x0, dt_sim, P, seed, opt);
}

/// Paths of dX = sigma(t,X) dB, optionally carrying field values.
inline PathBundle simulate_driftless(const DecouplingField* field, const CoefficientSet& coeffs, double t0,
                                     std::span<const double> x0, double dt_sim, std::size_t P, std::uint64_t seed,
                                     const SimulationOptions& opt = {}) {
    auto drift = [](double, std::span<const double>, std::span<const double>, std::span<const double>,
                    std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); };
    return simulate_with_drift(coeffs, field, drift, t0, x0, dt_sim, P, seed, opt);
}

// ---------------------------------------------------------------------------

/// Rule for the ds-integral of f; the dB-integral is always left-point.
enum class TimeQuadrature { left, trapezoid };

struct BsdeResidual {
    std::vector<SampleStats> per_component;  // one entry per component of Y
    double rms = 0.0;                        // sqrt(mean over paths of |residual|^2)
    std::size_t paths = 0;
};

/// residual_p = Y_{t0} - g(X_T) - int f(s, X, Y, Z) ds + sum_l Z_l dW_l
/// with row i of Z paired against dW. The left rule is the plain Ito sum;
/// the trapezoid rule drops its O(dt) quadrature bias (exact X only).
inline BsdeResidual bsde_residual(const PathBundle& B, const CoefficientSet& coeffs,
                                  TimeQuadrature rule = TimeQuadrature::left) {
    if (!B.has_field_values()) throw DimensionMismatch("bsde_residual: bundle carries no field values");
    if (B.n != coeffs.n || B.d != coeffs.d) throw DimensionMismatch("bsde_residual: bundle and coefficients disagree");
    const int n = B.n, d = B.d;
    const auto active = B.active_paths();
    std::vector<std::vector<double>> res(static_cast<std::size_t>(n), std::vector<double>(active.size()));
    std::vector<double> sq(active.size());
    std::vector<double> f(static_cast<std::size_t>(n)), g(static_cast<std::size_t>(n));
    for (std::size_t k = 0; k < active.size(); ++k) {
        const std::size_t p = active[k];
        std::vector<double> r(B.y(p, 0).begin(), B.y(p, 0).end());
        coeffs.eval_g(B.x(p, B.steps), g);
        for (int i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] -= g[static_cast<std::size_t>(i)];
        for (std::size_t l = 0; l <= B.steps; ++l) {
            const auto z = B.z(p, l);
            coeffs.eval_f(B.time(l), B.x(p, l), B.y(p, l), z, f);
            const double w = rule == TimeQuadrature::left ? (l < B.steps ? 1.0 : 0.0) : (l == 0 || l == B.steps ? 0.5 : 1.0);
            for (int i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] -= w * f[static_cast<std::size_t>(i)] * B.dt;
            if (l == B.steps) break;
            const auto dw = B.dw(p, l);
            for (int i = 0; i < n; ++i) {
                double zdw = 0.0;
                for (int j = 0; j < d; ++j) zdw += z[static_cast<std::size_t>(i * d + j)] * dw[static_cast<std::size_t>(j)];
                r[static_cast<std::size_t>(i)] += zdw;
            }
        }
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            res[static_cast<std::size_t>(i)][k] = r[static_cast<std::size_t>(i)];
            s += r[static_cast<std::size_t>(i)] * r[static_cast<std::size_t>(i)];
        }
        sq[k] = s;
    }
    BsdeResidual out;
    out.paths = active.size();
    for (const auto& r : res) out.per_component.push_back(sample_stats(r));
    if (!sq.empty()) out.rms = std::sqrt(pairwise_sum(sq) / static_cast<double>(sq.size()));
    return out;
}

// ---------------------------------------------------------------------------
// State binning for conditional expectations

namespace detail {

/// Equal-count bins of the active paths by X at step l: `per_axis` bins on
/// each axis, cells are products of axis bins. Equal values share a bin.
/// Returns one list of path indices per nonempty cell, in cell order.
inline std::vector<std::vector<std::size_t>> state_bins(const PathBundle& B, const std::vector<std::size_t>& active,
                                                        std::size_t l, int per_axis) {
    const int d = B.d;
    const std::size_t m = active.size();
    std::vector<std::size_t> cell(m, 0);
    std::vector<std::size_t> order(m);
    for (int a = 0; a < d; ++a) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto coord = [&](std::size_t k) { return B.x(active[k], l)[static_cast<std::size_t>(a)]; };
        std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return coord(i) < coord(j); });
        std::size_t bin = 0;
        for (std::size_t r = 0; r < m; ++r) {
            const std::size_t target = r * static_cast<std::size_t>(per_axis) / m;
            if (r == 0 || coord(order[r]) != coord(order[r - 1])) bin = target;
            cell[order[r]] = cell[order[r]] * static_cast<std::size_t>(per_axis) + bin;
        }
    }
    std::size_t cells = 1;
    for (int a = 0; a < d; ++a) cells *= static_cast<std::size_t>(per_axis);
    std::vector<std::vector<std::size_t>> groups(cells);
    for (std::size_t k = 0; k < m; ++k) groups[cell[k]].push_back(active[k]);
    std::erase_if(groups, [](const auto& g) { return g.empty(); });
    return groups;
}

inline int default_bins(int d) { return d == 1 ? 8 : 4; }

}  // namespace detail

struct BmoEstimate {
    double value = 0.0;
    double time = 0.0;      // time of the maximising (time, bin)
    std::size_t bin_size = 0;
};

/// max over steps l and state bins of mean( sum_{m >= l} |Z_m|^2 dt ).
inline BmoEstimate bmo_estimate(const PathBundle& B, int bins_per_axis = 0) {
    if (!B.has_field_values()) throw DimensionMismatch("bmo_estimate: bundle carries no field values");
    const int per_axis = bins_per_axis > 0 ? bins_per_axis : detail::default_bins(B.d);
    const auto active = B.active_paths();
    BmoEstimate best;
    if (active.empty()) return best;
    const std::size_t L = B.steps;
    // tail[k][l] = sum_{m=l}^{L-1} |Z_m|^2 dt for active path k.
    std::vector<std::vector<double>> tail(active.size(), std::vector<double>(L + 1, 0.0));
    for (std::size_t k = 0; k < active.size(); ++k)
        for (std::size_t l = L; l-- > 0;) {
            double s = 0.0;
            for (double v : B.z(active[k], l)) s += v * v;
            tail[k][l] = tail[k][l + 1] + s * B.dt;
        }
    std::vector<std::size_t> slot(B.paths, 0);
    for (std::size_t k = 0; k < active.size(); ++k) slot[active[k]] = k;
    for (std::size_t l = 0; l < L; ++l) {
        for (const auto& group : detail::state_bins(B, active, l, per_axis)) {
            std::vector<double> vals(group.size());
            for (std::size_t q = 0; q < group.size(); ++q) vals[q] = tail[slot[group[q]]][l];
            const double mean = pairwise_sum(vals) / static_cast<double>(vals.size());
            if (mean > best.value) best = {mean, B.time(l), group.size()};
        }
    }
    return best;
}

struct GirsanovStats {
    SampleStats weight;                      // W_p
    std::vector<SampleStats> reweighted;     // W_p X_T per axis
    std::vector<SampleStats> direct;         // X_T per axis on the drifted bundle
    double max_abs_z = 0.0;                  // max over axes of |reweighted - direct| / combined SE
    double max_log_weight = 0.0;
};

/// Stochastic-exponential weights along a driftless bundle,
///   W = exp( sum theta_l . dW_l - 1/2 sum |theta_l|^2 dt ),  theta = sigma^{-1} b(t, X, Y, Z),
/// accumulated in log space. Without field values, b is evaluated at y = 0, z = 0.
/// When `drifted` is given, the reweighted terminal mean is compared with it.
inline GirsanovStats girsanov_check(const PathBundle& B, const CoefficientSet& coeffs, const PathBundle* drifted = nullptr) {
    const int d = B.d, n = coeffs.n;
    const auto active = B.active_paths();
    std::vector<double> logw(active.size());
    std::vector<double> y0(static_cast<std::size_t>(n), 0.0), z0(static_cast<std::size_t>(n * d), 0.0);
    std::vector<double> b(static_cast<std::size_t>(d)), theta(static_cast<std::size_t>(d));
    for (std::size_t k = 0; k < active.size(); ++k) {
        const std::size_t p = active[k];
        double lw = 0.0;
        for (std::size_t l = 0; l < B.steps; ++l) {
            const double t = B.time(l);
            const auto x = B.x(p, l);
            const std::span<const double> y = B.has_field_values() ? B.y(p, l) : std::span<const double>(y0);
            const std::span<const double> z = B.has_field_values() ? B.z(p, l) : std::span<const double>(z0);
            coeffs.eval_b(t, x, y, z, b);
            SigmaFactor(coeffs.eval_sigma(t, x), t, x).solve(b, theta);
            const auto dw = B.dw(p, l);
            for (int j = 0; j < d; ++j)
                lw += theta[static_cast<std::size_t>(j)] * dw[static_cast<std::size_t>(j)] -
                      0.5 * theta[static_cast<std::size_t>(j)] * theta[static_cast<std::size_t>(j)] * B.dt;
        }
        logw[k] = lw;
    }
    GirsanovStats out;
    std::vector<double> w(active.size());
    for (std::size_t k = 0; k < active.size(); ++k) {
        w[k] = std::exp(logw[k]);
        out.max_log_weight = std::max(out.max_log_weight, logw[k]);
    }
    out.weight = sample_stats(w);
    for (int a = 0; a < d; ++a) {
        std::vector<double> wx(active.size());
        for (std::size_t k = 0; k < active.size(); ++k) wx[k] = w[k] * B.x(active[k], B.steps)[static_cast<std::size_t>(a)];
        out.reweighted.push_back(sample_stats(wx));
    }
    if (drifted) {
        const auto act = drifted->active_paths();
        for (int a = 0; a < d; ++a) {
            std::vector<double> xt(act.size());
            for (std::size_t k = 0; k < act.size(); ++k) xt[k] = drifted->x(act[k], drifted->steps)[static_cast<std::size_t>(a)];
            out.direct.push_back(sample_stats(xt));
            const auto& r = out.reweighted[static_cast<std::size_t>(a)];
            const auto& s = out.direct.back();
            const double se = std::sqrt(r.se * r.se + s.se * s.se);
            const double diff = std::fabs(r.mean - s.mean);
            out.max_abs_z = std::max(out.max_abs_z, se > 0.0 ? diff / se : (diff > 0.0 ? std::numeric_limits<double>::infinity() : 0.0));
        }
    }
    return out;
}

struct SubmartingaleVector {
    std::vector<double> a;
    double worst_mean = 0.0;   // most negative standardised bin mean, unstandardised value
    double worst_se = 0.0;
    double worst_z = 0.0;      // worst_mean / worst_se
    double worst_time = 0.0;
    std::size_t bins_tested = 0;
    bool violated = false;     // some bin mean below -3 SE
};

struct SubmartingaleOptions {
    int bins_per_axis = 0;     // 0: default binning
    std::size_t block_steps = 0;  // 0: about a tenth of the steps
    double z_threshold = 3.0;
};

/// For every declared a_m, R_l = exp(2 a_m . Y_l + 2 rho t_l); tests the
/// increments R_{l+B} - R_l binned by X_l for negative conditional means.
inline std::vector<SubmartingaleVector> submartingale_check(const PathBundle& bundle, const StructuralDecl& decl,
                                                            const SubmartingaleOptions& opt = {}) {
    if (!bundle.has_field_values()) throw DimensionMismatch("submartingale_check: bundle carries no field values");
    const int per_axis = opt.bins_per_axis > 0 ? opt.bins_per_axis : detail::default_bins(bundle.d);
    const std::size_t block = opt.block_steps > 0 ? opt.block_steps : std::max<std::size_t>(1, bundle.steps / 10);
    const auto active = bundle.active_paths();
    std::vector<SubmartingaleVector> out;
    for (const auto& a : decl.spanning_vectors) {
        if (static_cast<int>(a.size()) != bundle.n) throw DimensionMismatch("submartingale_check: vector not in R^n");
        SubmartingaleVector rep;
        rep.a = a;
        auto R = [&](std::size_t p, std::size_t l) {
            double s = 0.0;
            const auto y = bundle.y(p, l);
            for (int i = 0; i < bundle.n; ++i) s += a[static_cast<std::size_t>(i)] * y[static_cast<std::size_t>(i)];
            return std::exp(2.0 * s + 2.0 * decl.rho * bundle.time(l));
        };
        for (std::size_t l = 0; l + block <= bundle.steps; l += block) {
            for (const auto& group : detail::state_bins(bundle, active, l, per_axis)) {
                if (group.size() < 2) continue;
                std::vector<double> inc(group.size());
                for (std::size_t q = 0; q < group.size(); ++q) inc[q] = R(group[q], l + block) - R(group[q], l);
                const auto st = sample_stats(inc);
                ++rep.bins_tested;
                const double z = st.se > 0.0 ? st.mean / st.se : (st.mean < 0.0 ? -std::numeric_limits<double>::infinity() : 0.0);
                if (rep.bins_tested == 1 || z < rep.worst_z) {
                    rep.worst_z = z;
                    rep.worst_mean = st.mean;
                    rep.worst_se = st.se;
                    rep.worst_time = bundle.time(l);
                }
            }
        }
        rep.violated = rep.worst_z < -opt.z_threshold;
        out.push_back(std::move(rep));
    }
    return out;
}

/// mean +- SE of g(X_T) + sum_l r(t_l, X_l) dt over the active paths.
inline SampleStats payoff_mc(const PathBundle& B, const std::function<double(double, std::span<const double>)>& r,
                             const std::function<double(std::span<const double>)>& g) {
    const auto active = B.active_paths();
    std::vector<double> pay(active.size());
    for (std::size_t k = 0; k < active.size(); ++k) {
        const std::size_t p = active[k];
        std::vector<double> run(B.steps);
        for (std::size_t l = 0; l < B.steps; ++l) run[l] = r(B.time(l), B.x(p, l));
        pay[k] = g(B.x(p, B.steps)) + pairwise_sum(run) * B.dt;
    }
    return sample_stats(pay);
}

}  // namespace qfbsde
