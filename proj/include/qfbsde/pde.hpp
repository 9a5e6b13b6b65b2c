#pragma once

// Explicit finite-difference solver for the backward parabolic system
//   d_t u^i + tr(a D^2 u^i) + f^i(t,x,u,pi^k(Du sigma)) + Du^i . b(t,x,u,pi^k(Du sigma)) = 0,
//   u(T) = g,  a = sigma sigma^T / 2,
// on a box with linear-extrapolation ghost nodes, and diagnostics on the
// resulting decoupling field.

#include "qfbsde/errors.hpp"
#include "qfbsde/model.hpp"
#include "qfbsde/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qfbsde {

using Interval = std::pair<double, double>;

struct GridSpec {
    std::vector<Interval> box;  // one [lo, hi] per axis
    int nodes_per_axis = 101;
    std::optional<double> dt;   // empty: CFL-auto
    double cfl = 0.5;
    double boundary_band = 0.15;
    std::size_t max_stored_levels = 1000;

    int dims() const noexcept { return static_cast<int>(box.size()); }
    double spacing(int axis) const {
        const auto& [lo, hi] = box[static_cast<std::size_t>(axis)];
        return (hi - lo) / (nodes_per_axis - 1);
    }
    std::size_t node_count() const {
        std::size_t c = 1;
        for (int a = 0; a < dims(); ++a) c *= static_cast<std::size_t>(nodes_per_axis);
        return c;
    }
    /// Box with boundary_band * width removed from each side.
    std::vector<Interval> reporting_box() const {
        std::vector<Interval> out;
        for (const auto& [lo, hi] : box) {
            const double w = hi - lo;
            out.emplace_back(lo + boundary_band * w, hi - boundary_band * w);
        }
        return out;
    }
    void validate() const {
        if (box.empty() || dims() > kMaxStateDim) throw ValidationError("grid.box", "need 1 to 3 axes");
        for (const auto& [lo, hi] : box)
            if (!(hi > lo) || !std::isfinite(lo) || !std::isfinite(hi))
                throw ValidationError("grid.box", "each axis needs finite lo < hi");
        if (nodes_per_axis < 8) throw ValidationError("grid.nodes_per_axis", "must be >= 8");
        if (dt && !(*dt > 0.0)) throw ValidationError("grid.dt", "must be positive");
        if (!(cfl > 0.0 && cfl <= 1.0)) throw ValidationError("grid.cfl", "must be in (0, 1]");
        if (!(boundary_band >= 0.0 && boundary_band < 0.5)) throw ValidationError("grid.boundary_band", "must be in [0, 0.5)");
        if (max_stored_levels < 2) throw ValidationError("grid.max_stored_levels", "must be >= 2");
    }
};

/// Tensor lattice helper; the last axis varies fastest.
struct Lattice {
    int d = 1;
    int N = 8;
    std::array<double, kMaxStateDim> lo{}, dx{};
    std::array<std::size_t, kMaxStateDim> stride{};
    std::size_t count = 0;

    Lattice() = default;
    explicit Lattice(const GridSpec& g) : d(g.dims()), N(g.nodes_per_axis) {
        std::size_t s = 1;
        for (int a = d - 1; a >= 0; --a) {
            lo[static_cast<std::size_t>(a)] = g.box[static_cast<std::size_t>(a)].first;
            dx[static_cast<std::size_t>(a)] = g.spacing(a);
            stride[static_cast<std::size_t>(a)] = s;
            s *= static_cast<std::size_t>(N);
        }
        count = s;
    }

    std::array<int, kMaxStateDim> index(std::size_t node) const {
        std::array<int, kMaxStateDim> idx{};
        for (int a = 0; a < d; ++a)
            idx[static_cast<std::size_t>(a)] = static_cast<int>((node / stride[static_cast<std::size_t>(a)]) % static_cast<std::size_t>(N));
        return idx;
    }
    std::size_t flat(const std::array<int, kMaxStateDim>& idx) const {
        std::size_t f = 0;
        for (int a = 0; a < d; ++a) f += static_cast<std::size_t>(idx[static_cast<std::size_t>(a)]) * stride[static_cast<std::size_t>(a)];
        return f;
    }
    double coord(int axis, int i) const {
        return lo[static_cast<std::size_t>(axis)] + i * dx[static_cast<std::size_t>(axis)];
    }
    void coords(std::size_t node, std::span<double> x) const {
        const auto idx = index(node);
        for (int a = 0; a < d; ++a) x[static_cast<std::size_t>(a)] = coord(a, idx[static_cast<std::size_t>(a)]);
    }
    double min_spacing() const { return *std::min_element(dx.begin(), dx.begin() + d); }

    /// Value of component i at idx, where one step outside the box on any
    /// axis is filled by linear extrapolation.
    double value(std::span<const double> u, int n, int i, std::array<int, kMaxStateDim> idx) const {
        for (int a = 0; a < d; ++a) {
            auto& k = idx[static_cast<std::size_t>(a)];
            if (k < 0 || k >= N) {
                const int edge = k < 0 ? 0 : N - 1;
                const int inner = k < 0 ? 1 : N - 2;
                k = edge;
                const double e = value(u, n, i, idx);
                k = inner;
                return 2.0 * e - value(u, n, i, idx);
            }
        }
        return u[flat(idx) * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
    }

    /// Nodes inside the box `sub` (closed).
    std::vector<char> mask(const std::vector<Interval>& sub) const {
        std::vector<char> m(count, 1);
        std::array<double, kMaxStateDim> x{};
        for (std::size_t node = 0; node < count; ++node) {
            coords(node, x);
            for (int a = 0; a < d; ++a) {
                const auto& [l, h] = sub[static_cast<std::size_t>(a)];
                const double tol = 1e-12 * (1.0 + std::fabs(l) + std::fabs(h));
                if (x[static_cast<std::size_t>(a)] < l - tol || x[static_cast<std::size_t>(a)] > h + tol) m[node] = 0;
            }
        }
        return m;
    }
};

/// Uniform compute steps on [0, T]; every `stride`-th level is stored.
struct TimePlan {
    double T = 1.0;
    std::size_t steps = 1;
    std::size_t stride = 1;
    double dt = 1.0;

    std::size_t stored_count() const noexcept { return steps / stride + 1; }
    double compute_time(std::size_t m) const noexcept { return m == steps ? T : static_cast<double>(m) * dt; }
    double stored_time(std::size_t l) const noexcept { return compute_time(l * stride); }

    static TimePlan make(double T, double dt_target, std::size_t max_stored) {
        TimePlan p;
        p.T = T;
        auto L = static_cast<std::size_t>(std::ceil(T / dt_target - 1e-9));
        L = std::max<std::size_t>(L, 1);
        p.stride = (L + max_stored - 2) / (max_stored - 1);
        p.stride = std::max<std::size_t>(p.stride, 1);
        const std::size_t Ls = (L + p.stride - 1) / p.stride;
        p.steps = Ls * p.stride;
        p.dt = T / static_cast<double>(p.steps);
        return p;
    }
};

/// Grid-sampled decoupling field (u, v^i = Du^i sigma). Levels are stored in
/// increasing time; u is level x node x n, v is level x node x (n*d).
struct DecouplingField {
    int n = 1;
    int d = 1;
    GridSpec grid;
    TimePlan plan;
    std::vector<double> times;
    std::vector<double> u_values;
    std::vector<double> v_values;
    double truncation_radius_used = 0.0;
    bool converged = true;
    std::vector<double> schedule_radii;
    std::vector<double> schedule_diffs;  // sup change of u(0,.) against the previous radius
    double sigma_bound = 0.0;            // max |sigma|_2^2 used for the stability limit
    std::vector<double> grad_times;      // every compute level, increasing
    std::vector<double> grad_sup;        // max over the reporting subdomain of |Du|

    std::size_t levels() const noexcept { return times.size(); }
    std::size_t nodes() const noexcept { return grid.node_count(); }
    Lattice lattice() const { return Lattice(grid); }

    std::span<const double> u_level(std::size_t l) const {
        const std::size_t stride = nodes() * static_cast<std::size_t>(n);
        return {u_values.data() + l * stride, stride};
    }
    std::span<const double> v_level(std::size_t l) const {
        const std::size_t stride = nodes() * static_cast<std::size_t>(n * d);
        return {v_values.data() + l * stride, stride};
    }
    double u_at(std::size_t level, std::size_t node, int i) const {
        return u_values[(level * nodes() + node) * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
    }
    double v_at(std::size_t level, std::size_t node, int i, int j) const {
        return v_values[(level * nodes() + node) * static_cast<std::size_t>(n * d) + static_cast<std::size_t>(i * d + j)];
    }

    /// Multilinear in x, linear in t. Writes u (n) and v (n*d, row-major).
    void sample(double t, std::span<const double> x, std::span<double> u, std::span<double> v) const;
};

struct FieldSample {
    std::vector<double> u;
    ZMatrix v;
};

// ---------------------------------------------------------------------------

/// Du at every node: centered differences inside, one-sided second order at
/// faces. Output is node x n x d.
inline std::vector<double> gradient_field(std::span<const double> u, int n, const GridSpec& grid) {
    const Lattice lat(grid);
    if (u.size() != lat.count * static_cast<std::size_t>(n)) throw DimensionMismatch("gradient_field: size mismatch");
    const int d = lat.d;
    std::vector<double> out(lat.count * static_cast<std::size_t>(n * d));
    for (std::size_t node = 0; node < lat.count; ++node) {
        const auto idx = lat.index(node);
        for (int a = 0; a < d; ++a) {
            const int k = idx[static_cast<std::size_t>(a)];
            const std::size_t s = lat.stride[static_cast<std::size_t>(a)];
            const double h = lat.dx[static_cast<std::size_t>(a)];
            for (int i = 0; i < n; ++i) {
                auto at = [&](std::ptrdiff_t off) {
                    return u[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(node) + off * static_cast<std::ptrdiff_t>(s)) *
                                 static_cast<std::size_t>(n) +
                             static_cast<std::size_t>(i)];
                };
                double g;
                if (k == 0)
                    g = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
                else if (k == lat.N - 1)
                    g = (3.0 * at(0) - 4.0 * at(-1) + at(-2)) / (2.0 * h);
                else
                    g = (at(1) - at(-1)) / (2.0 * h);
                out[(node * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)) * static_cast<std::size_t>(d) +
                    static_cast<std::size_t>(a)] = g;
            }
        }
    }
    return out;
}

namespace detail {

inline double sigma_norm2(const SmallMatrix& s) {
    Eigen::JacobiSVD<SmallMatrix> svd(s);
    return svd.singularValues()(0) * svd.singularValues()(0);
}

/// max |sigma|_2^2 over the nodes at t in {0, T/2, T}.
inline double sigma_bound(const CoefficientSet& c, const Lattice& lat) {
    double bound = 0.0;
    std::array<double, kMaxStateDim> x{};
    for (double t : {0.0, 0.5 * c.T, c.T})
        for (std::size_t node = 0; node < lat.count; ++node) {
            lat.coords(node, std::span<double>(x.data(), static_cast<std::size_t>(lat.d)));
            const double s = sigma_norm2(c.eval_sigma(t, std::span<const double>(x.data(), static_cast<std::size_t>(lat.d))));
            if (!std::isfinite(s)) throw NonFiniteValue(0, node, "sigma");
            bound = std::max(bound, s);
        }
    return bound;
}

inline TimePlan plan_time(const CoefficientSet& c, const GridSpec& grid, const Lattice& lat, double& sbound) {
    sbound = sigma_bound(c, lat);
    const double h = lat.min_spacing();
    const double limit = h * h / (lat.d * std::max(sbound, 1e-300));
    double dt;
    if (grid.dt) {
        if (*grid.dt > limit * (1.0 + 1e-12))
            throw CflViolation("dt = " + std::to_string(*grid.dt) + " exceeds the explicit stability limit " +
                               std::to_string(limit));
        dt = *grid.dt;
    } else {
        dt = grid.cfl * limit;
    }
    return TimePlan::make(c.T, dt, grid.max_stored_levels);
}

/// Node-local nonlinear term of a backward march.
using SourceFn = std::function<void(double t, std::span<const double> x, std::span<const double> u,
                                    std::span<const double> grad, const SmallMatrix& sigma, std::span<double> out)>;

struct MarchOutput {
    std::vector<double> stored;  // stored level x node x n, increasing time
    std::vector<double> grad_sup;  // per compute level, increasing time
};

/// Explicit Euler march from T to 0:
///   u^m = u^{m+1} + dt [ tr(a D^2 u^{m+1}) + source(t_{m+1}, x, u^{m+1}, Du^{m+1}) ].
inline MarchOutput march_backward(const GridSpec& grid, const CoefficientSet& c, int n, const TimePlan& plan,
                                  std::vector<double> terminal, const SourceFn& source, int threads,
                                  const std::vector<char>* grad_mask) {
    const Lattice lat(grid);
    const int d = lat.d;
    const std::size_t nn = static_cast<std::size_t>(n);
    const std::size_t level_size = lat.count * nn;
    MarchOutput out;
    out.stored.assign(plan.stored_count() * level_size, 0.0);
    std::copy(terminal.begin(), terminal.end(), out.stored.begin() + static_cast<std::ptrdiff_t>((plan.stored_count() - 1) * level_size));
    if (grad_mask) out.grad_sup.assign(plan.steps + 1, 0.0);

    std::vector<double> cur = std::move(terminal), next(level_size);
    std::vector<double> gnorm(grad_mask ? lat.count : 0);

    auto step = [&](std::size_t m) {
        const double t = plan.compute_time(m);
        parallel_for(lat.count, threads, [&](std::size_t begin, std::size_t end) {
            std::array<double, kMaxStateDim> x{};
            std::vector<double> grad(nn * static_cast<std::size_t>(d)), src(nn);
            for (std::size_t node = begin; node < end; ++node) {
                const auto idx = lat.index(node);
                lat.coords(node, x);
                const std::span<const double> xs(x.data(), static_cast<std::size_t>(d));
                const SmallMatrix sig = c.eval_sigma(t, xs);
                const SmallMatrix A = 0.5 * sig * sig.transpose();
                bool interior = true;
                for (int a = 0; a < d; ++a)
                    interior = interior && idx[static_cast<std::size_t>(a)] > 0 && idx[static_cast<std::size_t>(a)] < lat.N - 1;
                for (int i = 0; i < n; ++i) {
                    const double u0 = cur[node * nn + static_cast<std::size_t>(i)];
                    auto val = [&](int a, int oa, int b, int ob) {
                        if (interior) {
                            const auto off = static_cast<std::ptrdiff_t>(node) +
                                             oa * static_cast<std::ptrdiff_t>(lat.stride[static_cast<std::size_t>(a)]) +
                                             ob * static_cast<std::ptrdiff_t>(lat.stride[static_cast<std::size_t>(b)]);
                            return cur[static_cast<std::size_t>(off) * nn + static_cast<std::size_t>(i)];
                        }
                        auto j = idx;
                        j[static_cast<std::size_t>(a)] += oa;
                        j[static_cast<std::size_t>(b)] += ob;
                        return lat.value(cur, n, i, j);
                    };
                    double diff = 0.0;
                    for (int a = 0; a < d; ++a) {
                        const double ha = lat.dx[static_cast<std::size_t>(a)];
                        const double second = (val(a, 1, a, 0) - 2.0 * u0 + val(a, -1, a, 0)) / (ha * ha);
                        diff += A(a, a) * second;
                        for (int b = a + 1; b < d; ++b) {
                            const double hb = lat.dx[static_cast<std::size_t>(b)];
                            const double cross =
                                (val(a, 1, b, 1) - val(a, 1, b, -1) - val(a, -1, b, 1) + val(a, -1, b, -1)) / (4.0 * ha * hb);
                            diff += 2.0 * A(a, b) * cross;
                        }
                        // Gradient: centered inside, one-sided second order on faces.
                        const int k = idx[static_cast<std::size_t>(a)];
                        const auto s = static_cast<std::ptrdiff_t>(lat.stride[static_cast<std::size_t>(a)]);
                        auto at = [&](std::ptrdiff_t o) {
                            return cur[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(node) + o * s) * nn + static_cast<std::size_t>(i)];
                        };
                        double g;
                        if (k == 0)
                            g = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * ha);
                        else if (k == lat.N - 1)
                            g = (3.0 * at(0) - 4.0 * at(-1) + at(-2)) / (2.0 * ha);
                        else
                            g = (at(1) - at(-1)) / (2.0 * ha);
                        grad[static_cast<std::size_t>(i * d + a)] = g;
                    }
                    next[node * nn + static_cast<std::size_t>(i)] = diff;
                }
                if (grad_mask) {
                    double s2 = 0.0;
                    for (double g : grad) s2 += g * g;
                    gnorm[node] = std::sqrt(s2);
                }
                source(t, xs, std::span<const double>(cur.data() + node * nn, nn), grad, sig, src);
                for (std::size_t i = 0; i < nn; ++i)
                    next[node * nn + i] = cur[node * nn + i] + plan.dt * (next[node * nn + i] + src[i]);
            }
        });
        if (grad_mask) {
            double g = 0.0;
            for (std::size_t node = 0; node < lat.count; ++node)
                if ((*grad_mask)[node]) g = std::max(g, gnorm[node]);
            out.grad_sup[m] = g;
        }
        for (std::size_t k = 0; k < level_size; ++k)
            if (!std::isfinite(next[k])) throw NonFiniteValue(m - 1, k / nn, "u");
        std::swap(cur, next);
        if ((m - 1) % plan.stride == 0)
            std::copy(cur.begin(), cur.end(), out.stored.begin() + static_cast<std::ptrdiff_t>(((m - 1) / plan.stride) * level_size));
    };
    for (std::size_t m = plan.steps; m >= 1; --m) step(m);

    if (grad_mask) {
        const auto g = gradient_field(cur, n, grid);
        double best = 0.0;
        for (std::size_t node = 0; node < lat.count; ++node) {
            if (!(*grad_mask)[node]) continue;
            double s2 = 0.0;
            for (std::size_t k = 0; k < nn * static_cast<std::size_t>(d); ++k) {
                const double v = g[node * nn * static_cast<std::size_t>(d) + k];
                s2 += v * v;
            }
            best = std::max(best, std::sqrt(s2));
        }
        out.grad_sup[0] = best;
    }
    return out;
}

inline std::vector<double> terminal_values(const CoefficientSet& c, const Lattice& lat) {
    std::vector<double> u(lat.count * static_cast<std::size_t>(c.n));
    std::array<double, kMaxStateDim> x{};
    for (std::size_t node = 0; node < lat.count; ++node) {
        lat.coords(node, x);
        c.eval_g(std::span<const double>(x.data(), static_cast<std::size_t>(lat.d)),
                 std::span<double>(u.data() + node * static_cast<std::size_t>(c.n), static_cast<std::size_t>(c.n)));
    }
    for (std::size_t k = 0; k < u.size(); ++k)
        if (!std::isfinite(u[k])) throw NonFiniteValue(0, k / static_cast<std::size_t>(c.n), "g");
    return u;
}

/// v^i = Du^i sigma (row i) at every stored level.
inline std::vector<double> velocity_from(const CoefficientSet& c, const GridSpec& grid, const TimePlan& plan,
                                         const std::vector<double>& stored, int n, int threads) {
    const Lattice lat(grid);
    const int d = lat.d;
    const std::size_t level_size = lat.count * static_cast<std::size_t>(n);
    const std::size_t vsize = lat.count * static_cast<std::size_t>(n * d);
    std::vector<double> v(plan.stored_count() * vsize);
    parallel_for(plan.stored_count(), threads, [&](std::size_t begin, std::size_t end) {
        std::array<double, kMaxStateDim> x{};
        for (std::size_t l = begin; l < end; ++l) {
            const double t = plan.stored_time(l);
            const auto grad = gradient_field(std::span<const double>(stored.data() + l * level_size, level_size), n, grid);
            for (std::size_t node = 0; node < lat.count; ++node) {
                lat.coords(node, x);
                const SmallMatrix s = c.eval_sigma(t, std::span<const double>(x.data(), static_cast<std::size_t>(d)));
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) {
                        double acc = 0.0;
                        for (int k = 0; k < d; ++k)
                            acc += s(k, j) * grad[(node * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)) * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)];
                        v[l * vsize + node * static_cast<std::size_t>(n * d) + static_cast<std::size_t>(i * d + j)] = acc;
                    }
            }
        }
    });
    return v;
}

/// Coefficient evaluation at every grid corner, at t = 0 and t = T.
inline void dry_run(const CoefficientSet& c, const Lattice& lat) {
    const int d = lat.d;
    std::vector<double> y(static_cast<std::size_t>(c.n), 0.0), z(static_cast<std::size_t>(c.n * d), 0.0);
    std::vector<double> bo(static_cast<std::size_t>(d)), fo(static_cast<std::size_t>(c.n));
    for (std::size_t corner = 0; corner < (std::size_t{1} << d); ++corner) {
        std::vector<double> x(static_cast<std::size_t>(d));
        for (int a = 0; a < d; ++a) x[static_cast<std::size_t>(a)] = lat.coord(a, (corner >> a) & 1U ? lat.N - 1 : 0);
        for (double t : {0.0, c.T}) {
            c.eval_b(t, x, y, z, bo);
            c.eval_f(t, x, y, z, fo);
            SigmaFactor(c.eval_sigma(t, x), t, x);
        }
        c.eval_g(x, fo);
    }
}

}  // namespace detail

struct TruncationSchedule {
    std::vector<double> radii{2.0, 4.0, 8.0, 16.0, 32.0};
    double tol = 1e-4;

    void validate() const {
        if (radii.empty()) throw ValidationError("schedule.radii", "must be nonempty");
        for (std::size_t k = 0; k < radii.size(); ++k) {
            if (!(radii[k] > 0.0)) throw ValidationError("schedule.radii", "radii must be positive");
            if (k > 0 && !(radii[k] > radii[k - 1])) throw ValidationError("schedule.radii", "radii must increase");
        }
        if (!(tol > 0.0)) throw ValidationError("schedule.tol", "must be positive");
    }
};

/// Runs the truncated problems for k in the schedule until u(0,.) stabilises
/// on the reporting subdomain. A one-radius schedule is a plain truncated
/// solve and counts as converged.
inline DecouplingField solve_backward(const CoefficientSet& c, const GridSpec& grid, const TruncationSchedule& schedule,
                                      int threads = 1) {
    c.validate();
    grid.validate();
    schedule.validate();
    if (grid.dims() != c.d) throw DimensionMismatch("solve_backward: grid has " + std::to_string(grid.dims()) + " axes, model d = " + std::to_string(c.d));
    const Lattice lat(grid);
    detail::dry_run(c, lat);

    DecouplingField field;
    field.n = c.n;
    field.d = c.d;
    field.grid = grid;
    field.plan = detail::plan_time(c, grid, lat, field.sigma_bound);
    const auto sub = lat.mask(grid.reporting_box());
    const auto terminal = detail::terminal_values(c, lat);
    const int n = c.n, d = c.d;
    const std::size_t level_size = lat.count * static_cast<std::size_t>(n);

    std::vector<double> previous;
    detail::MarchOutput result;
    field.converged = schedule.radii.size() == 1;
    for (std::size_t r = 0; r < schedule.radii.size(); ++r) {
        const double k = schedule.radii[r];
        auto source = [&c, k, n, d](double t, std::span<const double> x, std::span<const double> u, std::span<const double> grad,
                                    const SmallMatrix& sig, std::span<double> out) {
            std::array<double, kMaxStateDim * 8> zbuf{};
            std::vector<double> zheap;
            std::span<double> z(zbuf.data(), static_cast<std::size_t>(n * d));
            if (static_cast<std::size_t>(n * d) > zbuf.size()) {
                zheap.resize(static_cast<std::size_t>(n * d));
                z = zheap;
            }
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (int m = 0; m < d; ++m) acc += sig(m, j) * grad[static_cast<std::size_t>(i * d + m)];
                    z[static_cast<std::size_t>(i * d + j)] = acc;
                }
            truncate_in_place(z, k);
            std::array<double, kMaxStateDim> drift{};
            c.eval_b(t, x, u, z, std::span<double>(drift.data(), static_cast<std::size_t>(d)));
            c.eval_f(t, x, u, z, out);
            for (int i = 0; i < n; ++i) {
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += grad[static_cast<std::size_t>(i * d + j)] * drift[static_cast<std::size_t>(j)];
                out[static_cast<std::size_t>(i)] += dot;
            }
        };
        result = detail::march_backward(grid, c, n, field.plan, terminal, source, threads, &sub);
        field.schedule_radii.push_back(k);
        field.truncation_radius_used = k;
        if (!previous.empty()) {
            double diff = 0.0;
            for (std::size_t node = 0; node < lat.count; ++node) {
                if (!sub[node]) continue;
                for (int i = 0; i < n; ++i) {
                    const std::size_t at = node * static_cast<std::size_t>(n) + static_cast<std::size_t>(i);
                    diff = std::max(diff, std::fabs(result.stored[at] - previous[at]));
                }
            }
            field.schedule_diffs.push_back(diff);
            if (diff <= schedule.tol) {
                field.converged = true;
                break;
            }
        }
        previous.assign(result.stored.begin(), result.stored.begin() + static_cast<std::ptrdiff_t>(level_size));
    }

    field.u_values = std::move(result.stored);
    field.grad_sup = std::move(result.grad_sup);
    for (std::size_t l = 0; l < field.plan.stored_count(); ++l) field.times.push_back(field.plan.stored_time(l));
    for (std::size_t m = 0; m <= field.plan.steps; ++m) field.grad_times.push_back(field.plan.compute_time(m));
    field.v_values = detail::velocity_from(c, grid, field.plan, field.u_values, n, threads);
    return field;
}

/// Field tabulated from a closed form, with v^i = Du^i sigma from the grid
/// gradient. `levels` stored levels spread uniformly over [0, T].
inline DecouplingField tabulate_field(const CoefficientSet& c, const GridSpec& grid, std::size_t levels,
                                      const std::function<void(double, std::span<const double>, std::span<double>)>& u_fn) {
    grid.validate();
    if (levels < 2) throw DimensionMismatch("tabulate_field: need at least two levels");
    const Lattice lat(grid);
    DecouplingField field;
    field.n = c.n;
    field.d = c.d;
    field.grid = grid;
    field.plan.T = c.T;
    field.plan.steps = levels - 1;
    field.plan.stride = 1;
    field.plan.dt = c.T / static_cast<double>(levels - 1);
    field.u_values.resize(levels * lat.count * static_cast<std::size_t>(c.n));
    std::array<double, kMaxStateDim> x{};
    for (std::size_t l = 0; l < levels; ++l) {
        const double t = field.plan.stored_time(l);
        field.times.push_back(t);
        for (std::size_t node = 0; node < lat.count; ++node) {
            lat.coords(node, x);
            u_fn(t, std::span<const double>(x.data(), static_cast<std::size_t>(lat.d)),
                 std::span<double>(field.u_values.data() + (l * lat.count + node) * static_cast<std::size_t>(c.n),
                                   static_cast<std::size_t>(c.n)));
        }
    }
    field.v_values = detail::velocity_from(c, grid, field.plan, field.u_values, c.n, 1);
    return field;
}

// ---------------------------------------------------------------------------
// Interpolation

namespace detail {

struct Bracket {
    std::size_t lo = 0;
    double w = 0.0;  // weight of lo + 1
};

inline Bracket bracket(double pos, std::size_t cells) {
    // pos is in cell units; snap to knots so that queries at nodes are exact.
    const double r = std::round(pos);
    if (std::fabs(pos - r) <= 1e-10 * std::max(1.0, std::fabs(r))) pos = r;
    auto i = static_cast<std::size_t>(std::floor(pos));
    if (i >= cells) i = cells - 1;
    return {i, pos - static_cast<double>(i)};
}

}  // namespace detail

inline void DecouplingField::sample(double t, std::span<const double> x, std::span<double> u, std::span<double> v) const {
    if (static_cast<int>(x.size()) != d) throw DimensionMismatch("sample_field: x has wrong dimension");
    const double T = plan.T;
    if (!(t >= -1e-12 * T && t <= T * (1.0 + 1e-12))) throw ExtrapolationError("sample_field: t outside [0, T]");
    const Lattice lat(grid);
    std::array<detail::Bracket, kMaxStateDim> br{};
    for (int a = 0; a < d; ++a) {
        const auto& [lo, hi] = grid.box[static_cast<std::size_t>(a)];
        const double tol = 1e-12 * (hi - lo);
        if (!(x[static_cast<std::size_t>(a)] >= lo - tol && x[static_cast<std::size_t>(a)] <= hi + tol))
            throw ExtrapolationError("sample_field: x outside the grid box on axis " + std::to_string(a + 1));
        br[static_cast<std::size_t>(a)] =
            detail::bracket((x[static_cast<std::size_t>(a)] - lo) / lat.dx[static_cast<std::size_t>(a)], static_cast<std::size_t>(lat.N - 1));
    }
    const double tpos = std::clamp(t, 0.0, T) / (plan.dt * static_cast<double>(plan.stride));
    const auto tb = detail::bracket(tpos, levels() - 1);

    const std::size_t un = static_cast<std::size_t>(n), vn = static_cast<std::size_t>(n * d);
    std::fill(u.begin(), u.end(), 0.0);
    std::fill(v.begin(), v.end(), 0.0);
    for (int tl = 0; tl < 2; ++tl) {
        const double wt = tl == 0 ? 1.0 - tb.w : tb.w;
        if (wt == 0.0) continue;
        const std::size_t level = tb.lo + static_cast<std::size_t>(tl);
        for (std::size_t corner = 0; corner < (std::size_t{1} << d); ++corner) {
            double w = wt;
            std::array<int, kMaxStateDim> idx{};
            for (int a = 0; a < d; ++a) {
                const bool up = (corner >> a) & 1U;
                const auto& b = br[static_cast<std::size_t>(a)];
                w *= up ? b.w : 1.0 - b.w;
                idx[static_cast<std::size_t>(a)] = static_cast<int>(b.lo) + (up ? 1 : 0);
            }
            if (w == 0.0) continue;
            const std::size_t node = lat.flat(idx);
            const std::size_t base = level * nodes() + node;
            for (std::size_t i = 0; i < un; ++i) u[i] += w * u_values[base * un + i];
            for (std::size_t k = 0; k < vn; ++k) v[k] += w * v_values[base * vn + k];
        }
    }
}

inline FieldSample sample_field(const DecouplingField& field, double t, std::span<const double> x) {
    FieldSample s{std::vector<double>(static_cast<std::size_t>(field.n)), ZMatrix(field.n, field.d)};
    field.sample(t, x, s.u, s.v.data());
    return s;
}

// ---------------------------------------------------------------------------
// Diagnostics

struct ResidualStats {
    double max_abs = 0.0;
    double rms = 0.0;
    std::size_t count = 0;
};

/// Residual of the untruncated PDE evaluated on the stored field with
/// fourth-order five-point spatial stencils and central time differences
/// between stored levels. Uses nodes inside `subdomain` (default: the
/// reporting box) with two neighbours on every side.
inline ResidualStats pde_residual(const DecouplingField& field, const CoefficientSet& c,
                                  std::optional<std::vector<Interval>> subdomain = std::nullopt) {
    const Lattice lat(field.grid);
    const int n = field.n, d = field.d;
    const auto sub = lat.mask(subdomain ? *subdomain : field.grid.reporting_box());
    const std::size_t L = field.levels();
    std::vector<double> residuals;
    if (L < 3) return {};
    std::array<double, kMaxStateDim> x{};
    std::vector<double> grad(static_cast<std::size_t>(n * d)), z(static_cast<std::size_t>(n * d)), u(static_cast<std::size_t>(n)),
        fo(static_cast<std::size_t>(n)), drift(static_cast<std::size_t>(d));

    static constexpr std::array<double, 5> D1{1.0 / 12, -8.0 / 12, 0.0, 8.0 / 12, -1.0 / 12};
    static constexpr std::array<double, 5> D2{-1.0 / 12, 16.0 / 12, -30.0 / 12, 16.0 / 12, -1.0 / 12};

    for (std::size_t l = 1; l + 1 < L; ++l) {
        const double t = field.times[l];
        const auto cur = field.u_level(l);
        const auto up = field.u_level(l + 1);
        const auto dn = field.u_level(l - 1);
        const double two_dt = field.times[l + 1] - field.times[l - 1];
        for (std::size_t node = 0; node < lat.count; ++node) {
            if (!sub[node]) continue;
            const auto idx = lat.index(node);
            bool ok = true;
            for (int a = 0; a < d; ++a)
                ok = ok && idx[static_cast<std::size_t>(a)] >= 2 && idx[static_cast<std::size_t>(a)] <= lat.N - 3;
            if (!ok) continue;
            lat.coords(node, x);
            const std::span<const double> xs(x.data(), static_cast<std::size_t>(d));
            const SmallMatrix sig = c.eval_sigma(t, xs);
            const SmallMatrix A = 0.5 * sig * sig.transpose();
            auto at = [&](int i, int a, int oa, int b, int ob) {
                const auto off = static_cast<std::ptrdiff_t>(node) +
                                 oa * static_cast<std::ptrdiff_t>(lat.stride[static_cast<std::size_t>(a)]) +
                                 ob * static_cast<std::ptrdiff_t>(lat.stride[static_cast<std::size_t>(b)]);
                return cur[static_cast<std::size_t>(off) * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
            };
            std::vector<double> diff(static_cast<std::size_t>(n), 0.0);
            for (int i = 0; i < n; ++i) {
                u[static_cast<std::size_t>(i)] = cur[node * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
                for (int a = 0; a < d; ++a) {
                    const double ha = lat.dx[static_cast<std::size_t>(a)];
                    double g = 0.0, s2 = 0.0;
                    for (int k = 0; k < 5; ++k) {
                        g += D1[static_cast<std::size_t>(k)] * at(i, a, k - 2, a, 0);
                        s2 += D2[static_cast<std::size_t>(k)] * at(i, a, k - 2, a, 0);
                    }
                    grad[static_cast<std::size_t>(i * d + a)] = g / ha;
                    diff[static_cast<std::size_t>(i)] += A(a, a) * s2 / (ha * ha);
                    for (int b = a + 1; b < d; ++b) {
                        const double hb = lat.dx[static_cast<std::size_t>(b)];
                        double cr = 0.0;
                        for (int ka = 0; ka < 5; ++ka)
                            for (int kb = 0; kb < 5; ++kb)
                                cr += D1[static_cast<std::size_t>(ka)] * D1[static_cast<std::size_t>(kb)] * at(i, a, ka - 2, b, kb - 2);
                        diff[static_cast<std::size_t>(i)] += 2.0 * A(a, b) * cr / (ha * hb);
                    }
                }
            }
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (int m = 0; m < d; ++m) acc += sig(m, j) * grad[static_cast<std::size_t>(i * d + m)];
                    z[static_cast<std::size_t>(i * d + j)] = acc;
                }
            c.eval_f(t, xs, u, z, fo);
            c.eval_b(t, xs, u, z, drift);
            for (int i = 0; i < n; ++i) {
                const std::size_t k = node * static_cast<std::size_t>(n) + static_cast<std::size_t>(i);
                double r = (up[k] - dn[k]) / two_dt + diff[static_cast<std::size_t>(i)] + fo[static_cast<std::size_t>(i)];
                for (int j = 0; j < d; ++j) r += grad[static_cast<std::size_t>(i * d + j)] * drift[static_cast<std::size_t>(j)];
                residuals.push_back(r);
            }
        }
    }
    ResidualStats s;
    s.count = residuals.size();
    if (residuals.empty()) return s;
    std::vector<double> sq(residuals.size());
    for (std::size_t k = 0; k < residuals.size(); ++k) {
        s.max_abs = std::max(s.max_abs, std::fabs(residuals[k]));
        sq[k] = residuals[k] * residuals[k];
    }
    s.rms = std::sqrt(pairwise_sum(sq) / static_cast<double>(sq.size()));
    return s;
}

struct HolderOptions {
    std::size_t random_pairs = 20000;
    std::uint64_t seed = 7;
    bool use_v = false;  // seminorm of v instead of u
    std::optional<std::vector<Interval>> region;  // default: whole box
};

/// Lower bound for the parabolic alpha-Holder seminorm from sampled pairs:
/// extreme face-to-face pairs along each axis through the region centre at
/// every stored level, nearest-neighbour pairs at every node of the first,
/// middle and last levels, and uniformly random pairs in [0,T] x region.
inline double holder_seminorm(const DecouplingField& field, double alpha, const HolderOptions& opt = {}) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw DimensionMismatch("holder_seminorm: alpha must lie in (0, 1)");
    const int d = field.d;
    const auto region = opt.region ? *opt.region : field.grid.box;
    const std::size_t width = static_cast<std::size_t>(opt.use_v ? field.n * d : field.n);
    std::vector<double> ua(static_cast<std::size_t>(field.n)), va(static_cast<std::size_t>(field.n * d)), ub(ua), vb(va);
    auto eval = [&](double t, std::span<const double> x, std::vector<double>& u, std::vector<double>& v) -> std::vector<double>& {
        field.sample(t, x, u, v);
        return opt.use_v ? v : u;
    };
    double best = 0.0;
    auto pair = [&](double t1, std::span<const double> x1, double t2, std::span<const double> x2) {
        const auto& a = eval(t1, x1, ua, va);
        const auto& b = eval(t2, x2, ub, vb);
        double num = 0.0, dx2 = 0.0;
        for (std::size_t k = 0; k < width; ++k) num += (a[k] - b[k]) * (a[k] - b[k]);
        for (int j = 0; j < d; ++j) dx2 += (x1[static_cast<std::size_t>(j)] - x2[static_cast<std::size_t>(j)]) * (x1[static_cast<std::size_t>(j)] - x2[static_cast<std::size_t>(j)]);
        const double den = std::pow(std::fabs(t1 - t2), alpha / 2.0) + std::pow(std::sqrt(dx2), alpha);
        if (den > 0.0) best = std::max(best, std::sqrt(num) / den);
    };

    std::vector<double> centre(static_cast<std::size_t>(d));
    for (int a = 0; a < d; ++a)
        centre[static_cast<std::size_t>(a)] = 0.5 * (region[static_cast<std::size_t>(a)].first + region[static_cast<std::size_t>(a)].second);
    for (double t : field.times)
        for (int a = 0; a < d; ++a) {
            auto x1 = centre, x2 = centre;
            x1[static_cast<std::size_t>(a)] = region[static_cast<std::size_t>(a)].first;
            x2[static_cast<std::size_t>(a)] = region[static_cast<std::size_t>(a)].second;
            pair(t, x1, t, x2);
        }

    const Lattice lat(field.grid);
    const auto inside = lat.mask(region);
    std::array<double, kMaxStateDim> xa{}, xb{};
    for (std::size_t l : {std::size_t{0}, field.levels() / 2, field.levels() - 1})
        for (std::size_t node = 0; node < lat.count; ++node) {
            if (!inside[node]) continue;
            const auto idx = lat.index(node);
            for (int a = 0; a < d; ++a) {
                if (idx[static_cast<std::size_t>(a)] + 1 >= lat.N) continue;
                auto j = idx;
                j[static_cast<std::size_t>(a)] += 1;
                const std::size_t other = lat.flat(j);
                if (!inside[other]) continue;
                lat.coords(node, xa);
                lat.coords(other, xb);
                pair(field.times[l], std::span<const double>(xa.data(), static_cast<std::size_t>(d)), field.times[l],
                     std::span<const double>(xb.data(), static_cast<std::size_t>(d)));
            }
        }

    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> x1(static_cast<std::size_t>(d)), x2(static_cast<std::size_t>(d));
    for (std::size_t k = 0; k < opt.random_pairs; ++k) {
        const double t1 = unif(rng) * field.plan.T, t2 = unif(rng) * field.plan.T;
        for (int a = 0; a < d; ++a) {
            const auto& [lo, hi] = region[static_cast<std::size_t>(a)];
            x1[static_cast<std::size_t>(a)] = lo + unif(rng) * (hi - lo);
            x2[static_cast<std::size_t>(a)] = lo + unif(rng) * (hi - lo);
        }
        pair(t1, x1, t2, x2);
    }
    return best;
}

struct BlowupFit {
    double slope = 0.0;
    double intercept = 0.0;
    std::size_t points = 0;
    double tau_min = 0.0;
    double tau_max = 0.0;
};

/// Least-squares slope of log max|Du(t,.)| against -log(T - t) over one
/// decade of T - t, starting after the three compute levels nearest T.
inline BlowupFit blowup_fit(const DecouplingField& field) {
    const std::size_t M = field.grad_sup.size();
    if (M < 5 || field.grad_times.size() != M) throw InsufficientData("blowup_fit: field carries no gradient history");
    const double T = field.plan.T;
    // Index M-1 is t = T; skip it and the three levels before it.
    const double tau_start = T - field.grad_times[M - 5];
    const double tau_end = 10.0 * tau_start;
    std::vector<double> xs, ys;
    for (std::size_t m = 0; m + 4 < M; ++m) {
        const double tau = T - field.grad_times[m];
        if (tau < tau_start * (1.0 - 1e-9) || tau > tau_end * (1.0 + 1e-9)) continue;
        xs.push_back(-std::log(tau));
        ys.push_back(std::log(std::max(field.grad_sup[m], 1e-300)));
    }
    if (xs.size() < 3) throw InsufficientData("blowup_fit: fewer than 3 levels in the fit window");
    const double k = static_cast<double>(xs.size());
    const double mx = pairwise_sum(xs) / k, my = pairwise_sum(ys) / k;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    BlowupFit fit;
    fit.slope = sxx > 0.0 ? sxy / sxx : 0.0;
    fit.intercept = my - fit.slope * mx;
    fit.points = xs.size();
    fit.tau_min = tau_start;
    fit.tau_max = std::min(tau_end, T);
    return fit;
}

}  // namespace qfbsde
