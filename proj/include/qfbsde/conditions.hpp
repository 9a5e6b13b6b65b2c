#pragma once

// Certification and falsification of the structural conditions on a model:
// positive spanning of the declared vectors, sampled growth/structure
// inequalities, and the l/q/s decomposition of the transformed driver.
//
// Sampled checks can falsify a condition but never prove it; reports say
// "falsified" or "consistent on samples".

#include "qfbsde/errors.hpp"
#include "qfbsde/model.hpp"
#include "qfbsde/parallel.hpp"
#include "qfbsde/simplex.hpp"

#include <Eigen/Dense>
#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace qfbsde {

// ---------------------------------------------------------------------------
// Positive spanning

struct SpanningCertificate {
    bool spans = false;
    int rank = 0;
    int dimension = 0;
    /// lambda_m >= 0 with sum lambda_m a_m = 0 and sum lambda_m = 1 (empty if none exists).
    std::vector<double> positive_combination;
    /// |sum lambda_m a_m| computed on the input vectors.
    double combination_residual = 0.0;
    /// min over probe directions w of max_m a_m . w; capped at 0 when spans is false.
    double margin = 0.0;
};

namespace detail {

inline double halton(std::uint64_t index, std::uint64_t base) {
    double f = 1.0, r = 0.0;
    while (index > 0) {
        f /= static_cast<double>(base);
        r += f * static_cast<double>(index % base);
        index /= base;
    }
    return r;
}

inline constexpr std::array<std::uint64_t, 16> kPrimes{2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53};

/// Quasi-uniform unit directions in R^n (Halton points pushed through the
/// inverse normal CDF, then normalised).
inline std::vector<std::vector<double>> probe_directions(int n, std::size_t count) {
    std::vector<std::vector<double>> out;
    if (n == 1) return {{1.0}, {-1.0}};
    out.reserve(count);
    for (std::uint64_t k = 1; out.size() < count; ++k) {
        std::vector<double> w(static_cast<std::size_t>(n));
        double norm = 0.0;
        for (int a = 0; a < n; ++a) {
            const double u = halton(k, kPrimes[static_cast<std::size_t>(a) % kPrimes.size()]);
            w[static_cast<std::size_t>(a)] = std::sqrt(2.0) * boost::math::erf_inv(2.0 * u - 1.0);
            norm += w[static_cast<std::size_t>(a)] * w[static_cast<std::size_t>(a)];
        }
        norm = std::sqrt(norm);
        if (!(norm > 1e-12) || !std::isfinite(norm)) continue;
        for (double& v : w) v /= norm;
        out.push_back(std::move(w));
    }
    return out;
}

inline double max_projection(const std::vector<std::vector<double>>& vecs, const std::vector<double>& w) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& a : vecs) {
        double dot = 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) dot += a[k] * w[k];
        best = std::max(best, dot);
    }
    return best;
}

/// Direction w != 0 with a_m . w <= 0 for all m, maximising the uniform
/// depth s in a_m . w + s <= 0 over the box |w_k| <= 1.
inline std::vector<double> separating_direction(const std::vector<std::vector<double>>& vecs, int n) {
    const std::size_t M = vecs.size();
    const std::size_t un = static_cast<std::size_t>(n);
    // Columns: w+ (n), w- (n), s, slack_m (M), u+ (n), u- (n), s_slack.
    const std::size_t cols = 2 * un + 1 + M + 2 * un + 1;
    std::vector<std::vector<double>> A;
    std::vector<double> b;
    for (std::size_t m = 0; m < M; ++m) {
        std::vector<double> row(cols, 0.0);
        for (std::size_t k = 0; k < un; ++k) {
            row[k] = vecs[m][k];
            row[un + k] = -vecs[m][k];
        }
        row[2 * un] = 1.0;
        row[2 * un + 1 + m] = 1.0;
        A.push_back(std::move(row));
        b.push_back(0.0);
    }
    for (std::size_t k = 0; k < 2 * un; ++k) {
        std::vector<double> row(cols, 0.0);
        row[k] = 1.0;
        row[2 * un + 1 + M + k] = 1.0;
        A.push_back(std::move(row));
        b.push_back(1.0);
    }
    std::vector<double> row(cols, 0.0);
    row[2 * un] = 1.0;
    row[cols - 1] = 1.0;
    A.push_back(std::move(row));
    b.push_back(1.0);
    std::vector<double> c(cols, 0.0);
    c[2 * un] = 1.0;
    const auto res = lp::solve(A, b, c);
    if (res.status != lp::Status::optimal || !(res.objective > 1e-12)) return {};
    std::vector<double> w(un);
    double norm = 0.0;
    for (std::size_t k = 0; k < un; ++k) {
        w[k] = res.x[k] - res.x[un + k];
        norm += w[k] * w[k];
    }
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) return {};
    for (double& v : w) v /= norm;
    return w;
}

}  // namespace detail

inline constexpr double kSpanningStrictness = 1e-8;

/// Decides whether `vectors` positively span R^n: full rank and a strictly
/// positive combination summing to zero, found by maximising the minimum
/// coefficient with a simplex LP.
inline SpanningCertificate positive_spanning(const std::vector<std::vector<double>>& vectors,
                                             std::size_t probe_count = 4096) {
    if (vectors.empty()) throw DimensionMismatch("positive_spanning: empty vector list");
    const int n = static_cast<int>(vectors.front().size());
    if (n < 1) throw DimensionMismatch("positive_spanning: zero-dimensional vectors");
    double amax = 0.0;
    for (const auto& a : vectors) {
        if (static_cast<int>(a.size()) != n) throw DimensionMismatch("positive_spanning: vectors differ in dimension");
        for (double v : a) {
            if (!std::isfinite(v)) throw DimensionMismatch("positive_spanning: non-finite entry");
            amax = std::max(amax, std::fabs(v));
        }
    }
    const std::size_t M = vectors.size();
    const std::size_t un = static_cast<std::size_t>(n);

    SpanningCertificate cert;
    cert.dimension = n;
    if (amax == 0.0) {
        cert.rank = 0;
        cert.margin = 0.0;
        return cert;
    }
    // Power-of-two rescaling keeps the LP data exactly invariant under such scalings.
    int exponent = 0;
    std::frexp(amax, &exponent);
    std::vector<std::vector<double>> scaled = vectors;
    for (auto& a : scaled)
        for (double& v : a) v = std::ldexp(v, -exponent);

    Eigen::MatrixXd V(n, static_cast<Eigen::Index>(M));
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < un; ++k) V(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m)) = scaled[m][k];
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(V);
    qr.setThreshold(1e-10);
    cert.rank = static_cast<int>(qr.rank());

    // maximise tau  s.t.  sum_m (mu_m + tau) a_m = 0,  sum_m mu_m + M tau = 1,  mu, tau >= 0
    std::vector<std::vector<double>> A(un + 1, std::vector<double>(M + 1, 0.0));
    std::vector<double> b(un + 1, 0.0);
    for (std::size_t k = 0; k < un; ++k) {
        double total = 0.0;
        for (std::size_t m = 0; m < M; ++m) {
            A[k][m] = scaled[m][k];
            total += scaled[m][k];
        }
        A[k][M] = total;
    }
    for (std::size_t m = 0; m < M; ++m) A[un][m] = 1.0;
    A[un][M] = static_cast<double>(M);
    b[un] = 1.0;
    std::vector<double> c(M + 1, 0.0);
    c[M] = 1.0;
    const auto res = lp::solve(A, b, c);

    bool strict = false;
    if (res.status == lp::Status::optimal) {
        const double tau = res.x[M];
        cert.positive_combination.resize(M);
        for (std::size_t m = 0; m < M; ++m) cert.positive_combination[m] = res.x[m] + tau;
        const double lmax = *std::max_element(cert.positive_combination.begin(), cert.positive_combination.end());
        const double lmin = *std::min_element(cert.positive_combination.begin(), cert.positive_combination.end());
        double lsum = 0.0, r2 = 0.0, r2_scaled = 0.0;
        for (double l : cert.positive_combination) lsum += l;
        for (std::size_t k = 0; k < un; ++k) {
            double s = 0.0, ss = 0.0;
            for (std::size_t m = 0; m < M; ++m) {
                s += cert.positive_combination[m] * vectors[m][k];
                ss += cert.positive_combination[m] * scaled[m][k];
            }
            r2 += s * s;
            r2_scaled += ss * ss;
        }
        cert.combination_residual = std::sqrt(r2);
        strict = tau > 0.0 && lmin >= kSpanningStrictness * lmax && std::sqrt(r2_scaled) <= 1e-10 * lsum;
    }
    cert.spans = cert.rank == n && strict;

    double margin = std::numeric_limits<double>::infinity();
    for (const auto& w : detail::probe_directions(n, probe_count))
        margin = std::min(margin, detail::max_projection(vectors, w));
    if (!cert.spans) {
        if (cert.rank == n) {
            const auto w = detail::separating_direction(scaled, n);
            if (!w.empty()) margin = std::min(margin, detail::max_projection(vectors, w));
        }
        margin = std::min(margin, 0.0);
    }
    cert.margin = margin;
    return cert;
}

// ---------------------------------------------------------------------------
// Sampled condition checks

enum class ConditionId { H0, HAB, HQ, HBF };

inline const char* condition_name(ConditionId id) {
    switch (id) {
    case ConditionId::H0: return "H0";
    case ConditionId::HAB: return "HAB";
    case ConditionId::HQ: return "HQ";
    case ConditionId::HBF: return "HBF";
    }
    return "?";
}

struct SamplePoint {
    double t = 0.0;
    std::vector<double> x;
    std::vector<double> y;
    ZMatrix z;

    /// Flattened (t, x, y, z) for lexicographic ordering.
    std::vector<double> flat() const {
        std::vector<double> v{t};
        v.insert(v.end(), x.begin(), x.end());
        v.insert(v.end(), y.begin(), y.end());
        v.insert(v.end(), z.data().begin(), z.data().end());
        return v;
    }
};

using Interval = std::pair<double, double>;

/// Box ranges and counts for the sampled checks.
struct SamplePlan {
    Interval t_range{0.0, 1.0};
    std::vector<Interval> x_box;  // d entries
    std::vector<Interval> y_box;  // n entries
    Interval z_range{-2.0, 2.0};  // every z entry
    int points_per_axis = 5;
    std::size_t max_grid_points = 20000;
    int stress_count = 64;
    std::vector<double> stress_norms{10.0, 100.0, 1000.0};
    std::uint64_t seed = 1;
    int threads = 1;
};

struct ConditionReport {
    ConditionId id = ConditionId::H0;
    std::size_t sample_count = 0;
    /// Largest LHS - RHS over samples; <= 0 means satisfied on all samples.
    double worst_violation = -std::numeric_limits<double>::infinity();
    SamplePoint witness;
    /// Smallest constant making the inequality hold on every sample.
    double fitted_constant = 0.0;
    std::size_t violation_count = 0;

    bool falsified() const noexcept { return worst_violation > 0.0; }
    std::string verdict() const { return falsified() ? "falsified" : "consistent on samples"; }
};

struct ConditionEval {
    double slack = 0.0;
    double fitted = 0.0;  // constant that would make this sample tight
};

/// Evaluates one condition at one point. Reports re-evaluate their witness
/// through this same function.
inline ConditionEval evaluate_condition(ConditionId id, const CoefficientSet& c, const StructuralDecl& decl,
                                        const SamplePoint& p) {
    const int n = c.n, d = c.d;
    const double znorm = p.z.norm();
    ConditionEval out{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    auto take = [&](double slack, double fitted) {
        out.slack = std::max(out.slack, slack);
        out.fitted = std::max(out.fitted, fitted);
    };
    switch (id) {
    case ConditionId::H0: {
        std::vector<double> drift(static_cast<std::size_t>(d));
        c.eval_b(p.t, p.x, p.y, p.z.data(), drift);
        double bn = 0.0;
        for (double v : drift) bn += v * v;
        bn = std::sqrt(bn);
        take(bn - decl.C0 * (1.0 + znorm), bn / (1.0 + znorm));
        const SmallMatrix s = c.eval_sigma(p.t, p.x);
        Eigen::JacobiSVD<SmallMatrix> svd(s);
        const double smax2 = svd.singularValues()(0) * svd.singularValues()(0);
        const double smin = svd.singularValues()(d - 1);
        const double smin2 = smin * smin;
        take(smax2 - decl.C0, smax2);
        take(1.0 / decl.C0 - smin2, smin2 > 0.0 ? 1.0 / smin2 : std::numeric_limits<double>::infinity());
        constexpr double h = 1e-3;
        for (int k = 0; k < d; ++k) {
            std::vector<double> xh = p.x;
            xh[static_cast<std::size_t>(k)] += h;
            const double lip = (c.eval_sigma(p.t, xh) - s).norm() / h;
            take(lip - decl.C0, lip);
        }
        break;
    }
    case ConditionId::HAB: {
        std::vector<double> f(static_cast<std::size_t>(n));
        c.eval_f(p.t, p.x, p.y, p.z.data(), f);
        for (const auto& a : decl.spanning_vectors) {
            double af = 0.0;
            for (int i = 0; i < n; ++i) af += a[static_cast<std::size_t>(i)] * f[static_cast<std::size_t>(i)];
            double az2 = 0.0;
            for (int j = 0; j < d; ++j) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += a[static_cast<std::size_t>(i)] * p.z(i, j);
                az2 += s * s;
            }
            take(af - decl.rho - 0.5 * az2, af - 0.5 * az2);
        }
        break;
    }
    case ConditionId::HQ: {
        std::vector<double> f(static_cast<std::size_t>(n));
        c.eval_f(p.t, p.x, p.y, p.z.data(), f);
        for (int i = 0; i < n; ++i) {
            const double fi = std::fabs(f[static_cast<std::size_t>(i)]);
            take(fi - decl.CQ * (1.0 + znorm * znorm), fi / (1.0 + znorm * znorm));
        }
        break;
    }
    case ConditionId::HBF: {
        std::vector<double> f(static_cast<std::size_t>(n));
        c.eval_f(p.t, p.x, p.y, p.z.data(), f);
        const double kap = decl.kappa(znorm);
        double lower = 0.0;  // sum_{j<i} |z^j|^2
        for (int i = 0; i < n; ++i) {
            const double denom = 1.0 + p.z.row_norm(i) * znorm + lower + kap;
            const double fi = std::fabs(f[static_cast<std::size_t>(i)]);
            take(fi - decl.CQ * denom, fi / denom);
            lower += p.z.row_norm(i) * p.z.row_norm(i);
        }
        break;
    }
    }
    return out;
}

/// Deterministic sample set: tensor grid (or a Halton cloud when the grid is
/// too large) plus stress points at large |z|, including rays confined to a
/// single row of z.
inline std::vector<SamplePoint> build_samples(const CoefficientSet& c, const SamplePlan& plan) {
    const int n = c.n, d = c.d;
    if (plan.x_box.size() != static_cast<std::size_t>(d)) throw DimensionMismatch("SamplePlan: x_box must have d entries");
    if (plan.y_box.size() != static_cast<std::size_t>(n)) throw DimensionMismatch("SamplePlan: y_box must have n entries");
    std::vector<Interval> axes{plan.t_range};
    axes.insert(axes.end(), plan.x_box.begin(), plan.x_box.end());
    axes.insert(axes.end(), plan.y_box.begin(), plan.y_box.end());
    for (int k = 0; k < n * d; ++k) axes.push_back(plan.z_range);
    const std::size_t D = axes.size();

    auto make_point = [&](const std::vector<double>& coords) {
        SamplePoint p;
        p.t = coords[0];
        p.x.assign(coords.begin() + 1, coords.begin() + 1 + d);
        p.y.assign(coords.begin() + 1 + d, coords.begin() + 1 + d + n);
        p.z = ZMatrix(n, d, std::vector<double>(coords.begin() + 1 + d + n, coords.end()));
        return p;
    };

    std::vector<SamplePoint> out;
    const int ppa = std::max(plan.points_per_axis, 1);
    double grid_size = std::pow(static_cast<double>(ppa), static_cast<double>(D));
    if (grid_size <= static_cast<double>(plan.max_grid_points)) {
        const auto total = static_cast<std::size_t>(grid_size);
        std::vector<double> coords(D);
        for (std::size_t idx = 0; idx < total; ++idx) {
            std::size_t rem = idx;
            for (std::size_t a = D; a-- > 0;) {
                const std::size_t k = rem % static_cast<std::size_t>(ppa);
                rem /= static_cast<std::size_t>(ppa);
                const double frac = ppa == 1 ? 0.5 : static_cast<double>(k) / (ppa - 1);
                coords[a] = axes[a].first + frac * (axes[a].second - axes[a].first);
            }
            out.push_back(make_point(coords));
        }
    } else {
        std::vector<double> coords(D);
        for (std::size_t idx = 1; idx <= plan.max_grid_points; ++idx) {
            for (std::size_t a = 0; a < D; ++a) {
                const double u = detail::halton(idx, detail::kPrimes[a % detail::kPrimes.size()] +
                                                         (a >= detail::kPrimes.size() ? 58 : 0));
                coords[a] = axes[a].first + u * (axes[a].second - axes[a].first);
            }
            out.push_back(make_point(coords));
        }
    }

    std::mt19937_64 rng(plan.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t nnorms = std::max<std::size_t>(plan.stress_norms.size(), 1);
    for (int s = 0; s < plan.stress_count; ++s) {
        const double magnitude = plan.stress_norms.empty() ? 10.0 : plan.stress_norms[static_cast<std::size_t>(s) % nnorms];
        const int ray = static_cast<int>(static_cast<std::size_t>(s) / nnorms);
        std::vector<double> coords(D);
        for (std::size_t a = 0; a < 1 + static_cast<std::size_t>(d + n); ++a)
            coords[a] = axes[a].first + unif(rng) * (axes[a].second - axes[a].first);
        std::vector<double> dir(static_cast<std::size_t>(n * d), 0.0);
        double norm = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) {
                const double g = normal(rng);
                // The first n rays live in a single row of z.
                if (ray >= n || ray == i) dir[static_cast<std::size_t>(i * d + j)] = g;
            }
        for (double v : dir) norm += v * v;
        norm = std::sqrt(norm);
        if (!(norm > 0.0)) continue;
        for (std::size_t k = 0; k < dir.size(); ++k) coords[1 + static_cast<std::size_t>(d + n) + k] = magnitude * dir[k] / norm;
        out.push_back(make_point(coords));
    }
    return out;
}

/// Sampled check of one condition. Witness ties are broken by lexicographic
/// order of the flattened point.
inline ConditionReport check_condition(ConditionId id, const CoefficientSet& c, const StructuralDecl& decl,
                                       const std::vector<SamplePoint>& samples, int threads = 1) {
    std::vector<ConditionEval> evals(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t k = begin; k < end; ++k) evals[k] = evaluate_condition(id, c, decl, samples[k]);
    });
    ConditionReport rep;
    rep.id = id;
    rep.sample_count = samples.size();
    rep.fitted_constant = -std::numeric_limits<double>::infinity();
    std::size_t best = samples.size();
    for (std::size_t k = 0; k < samples.size(); ++k) {
        rep.fitted_constant = std::max(rep.fitted_constant, evals[k].fitted);
        if (evals[k].slack > 0.0) ++rep.violation_count;
        if (best == samples.size() || evals[k].slack > evals[best].slack ||
            (evals[k].slack == evals[best].slack && samples[k].flat() < samples[best].flat()))
            best = k;
    }
    if (best < samples.size()) {
        rep.worst_violation = evals[best].slack;
        rep.witness = samples[best];
    }
    return rep;
}

/// One report per declared condition: H0, HAB (when spanning vectors are
/// declared), HQ and HBF.
inline std::vector<ConditionReport> check_structural(const CoefficientSet& c, const StructuralDecl& decl,
                                                     const SamplePlan& plan) {
    const auto samples = build_samples(c, plan);
    std::vector<ConditionReport> out;
    out.push_back(check_condition(ConditionId::H0, c, decl, samples, plan.threads));
    if (!decl.spanning_vectors.empty()) {
        for (const auto& a : decl.spanning_vectors)
            if (static_cast<int>(a.size()) != c.n) throw DimensionMismatch("spanning vectors must lie in R^n");
        out.push_back(check_condition(ConditionId::HAB, c, decl, samples, plan.threads));
    }
    out.push_back(check_condition(ConditionId::HQ, c, decl, samples, plan.threads));
    out.push_back(check_condition(ConditionId::HBF, c, decl, samples, plan.threads));
    return out;
}

// ---------------------------------------------------------------------------
// l/q/s decomposition

struct BfDecomposition {
    ZMatrix l;
    std::vector<double> q;
    std::vector<double> s;
    double identity_residual = 0.0;
};

/// F^i = z^i . l^i + q^i + s^i with
///   D_i = 1 + |z^i||z| + sum_{j<i} |z^j|^2 + kappa(|z|)
///   l^i = (f^i / D_i) z^i |z| / |z^i| 1{|z^i| != 0} + sigma^{-1} b
///   q^i = (f^i / D_i)(1 + sum_{j<i} |z^j|^2),   s^i = (f^i / D_i) kappa(|z|)
inline BfDecomposition bf_decompose(const CoefficientSet& c, const StructuralDecl& decl, double t,
                                    std::span<const double> x, std::span<const double> y, const ZMatrix& z) {
    const int n = c.n, d = c.d;
    std::vector<double> f(static_cast<std::size_t>(n)), drift(static_cast<std::size_t>(d)), theta(static_cast<std::size_t>(d));
    c.eval_f(t, x, y, z.data(), f);
    c.eval_b(t, x, y, z.data(), drift);
    SigmaFactor(c.eval_sigma(t, x), t, x).solve(drift, theta);
    const auto F = assemble_F(c, t, x, y, z);

    BfDecomposition out{ZMatrix(n, d), std::vector<double>(static_cast<std::size_t>(n)),
                        std::vector<double>(static_cast<std::size_t>(n)), 0.0};
    const double znorm = z.norm();
    const double kap = decl.kappa(znorm);
    double lower = 0.0;
    for (int i = 0; i < n; ++i) {
        const double zi = z.row_norm(i);
        const double ratio = f[static_cast<std::size_t>(i)] / (1.0 + zi * znorm + lower + kap);
        for (int j = 0; j < d; ++j)
            out.l(i, j) = (zi != 0.0 ? ratio * z(i, j) * znorm / zi : 0.0) + theta[static_cast<std::size_t>(j)];
        out.q[static_cast<std::size_t>(i)] = ratio * (1.0 + lower);
        out.s[static_cast<std::size_t>(i)] = ratio * kap;
        lower += zi * zi;
        double zl = 0.0;
        for (int j = 0; j < d; ++j) zl += z(i, j) * out.l(i, j);
        out.identity_residual = std::max(
            out.identity_residual,
            std::fabs(F[static_cast<std::size_t>(i)] - zl - out.q[static_cast<std::size_t>(i)] - out.s[static_cast<std::size_t>(i)]));
    }
    return out;
}

}  // namespace qfbsde
