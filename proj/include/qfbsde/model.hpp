#pragma once

// Core data model of the FBSDE
//   dX = b(t,X,Y,Z) dt + sigma(t,X) dB,   dY = -f(t,X,Y,Z) dt + Z dB,   Y_T = g(X_T)
// with X in R^d, Y in R^n and Z in (R^d)^n stored as an n x d row-major
// matrix whose row i is z^i.

#include "qfbsde/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace qfbsde {

inline constexpr int kMaxStateDim = 3;

using SmallMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor, kMaxStateDim, kMaxStateDim>;
using SmallVector = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxStateDim, 1>;

/// Element of (R^d)^n: n rows of d entries.
class ZMatrix {
public:
    ZMatrix() = default;
    ZMatrix(int n, int d) : n_(n), d_(d), e_(static_cast<std::size_t>(n) * d, 0.0) {}
    ZMatrix(int n, int d, std::vector<double> entries) : n_(n), d_(d), e_(std::move(entries)) {
        if (e_.size() != static_cast<std::size_t>(n) * d) throw DimensionMismatch("ZMatrix: entry count != n*d");
    }

    int rows() const noexcept { return n_; }
    int cols() const noexcept { return d_; }

    double& operator()(int i, int j) { return e_[static_cast<std::size_t>(i) * d_ + j]; }
    double operator()(int i, int j) const { return e_[static_cast<std::size_t>(i) * d_ + j]; }

    std::span<double> row(int i) { return {e_.data() + static_cast<std::size_t>(i) * d_, static_cast<std::size_t>(d_)}; }
    std::span<const double> row(int i) const {
        return {e_.data() + static_cast<std::size_t>(i) * d_, static_cast<std::size_t>(d_)};
    }
    std::span<const double> data() const noexcept { return e_; }
    std::span<double> data() noexcept { return e_; }

    /// Frobenius norm |z|.
    double norm() const {
        double s = 0.0;
        for (double v : e_) s += v * v;
        return std::sqrt(s);
    }

    /// Euclidean norm of row i, |z^i|.
    double row_norm(int i) const {
        double s = 0.0;
        for (double v : row(i)) s += v * v;
        return std::sqrt(s);
    }

    friend bool operator==(const ZMatrix&, const ZMatrix&) = default;

private:
    int n_ = 0;
    int d_ = 0;
    std::vector<double> e_;
};

// Evaluable maps. Outputs are written into caller-provided spans; z is the
// row-major n*d view of a ZMatrix.
using DriftMap = std::function<void(double t, std::span<const double> x, std::span<const double> y,
                                    std::span<const double> z, std::span<double> out)>;
using SigmaMap = std::function<void(double t, std::span<const double> x, std::span<double> out)>;
using DriverMap = DriftMap;
using TerminalMap = std::function<void(std::span<const double> x, std::span<double> out)>;

/// Evaluable data (b, sigma, f, g) of the FBSDE. Immutable after construction
/// and safe to evaluate concurrently.
struct CoefficientSet {
    int n = 1;
    int d = 1;
    double T = 1.0;
    DriftMap b;
    SigmaMap sigma;
    DriverMap f;
    TerminalMap g;

    /// Times outside [0,T] are clamped to the nearest endpoint.
    double clamp_time(double t) const noexcept { return std::clamp(t, 0.0, T); }

    void eval_b(double t, std::span<const double> x, std::span<const double> y, std::span<const double> z,
                std::span<double> out) const {
        b(clamp_time(t), x, y, z, out);
    }
    void eval_f(double t, std::span<const double> x, std::span<const double> y, std::span<const double> z,
                std::span<double> out) const {
        f(clamp_time(t), x, y, z, out);
    }
    void eval_g(std::span<const double> x, std::span<double> out) const { g(x, out); }

    SmallMatrix eval_sigma(double t, std::span<const double> x) const {
        SmallMatrix s(d, d);
        sigma(clamp_time(t), x, std::span<double>(s.data(), static_cast<std::size_t>(d) * d));
        return s;
    }

    void validate() const {
        if (n < 1) throw DimensionMismatch("CoefficientSet: n must be >= 1");
        if (d < 1 || d > kMaxStateDim) throw DimensionMismatch("CoefficientSet: d must be in [1, 3]");
        if (!(T > 0.0)) throw DimensionMismatch("CoefficientSet: T must be positive");
        if (!b || !sigma || !f || !g) throw DimensionMismatch("CoefficientSet: missing coefficient map");
    }
};

/// LU factorisation of sigma(t,x) with a singularity check.
class SigmaFactor {
public:
    SigmaFactor(const SmallMatrix& sigma, double t, std::span<const double> x) : sigma_(sigma) {
        Eigen::JacobiSVD<SmallMatrix> svd(sigma_);
        const auto& sv = svd.singularValues();
        smax_ = sv(0);
        smin_ = sv(sv.size() - 1);
        if (!(smin_ > 1e-14 * std::max(1.0, smax_)) || !std::isfinite(smax_))
            throw NonconvertibleCoefficient(t, std::vector<double>(x.begin(), x.end()));
        lu_.compute(sigma_);
    }

    /// Solves sigma * out = rhs.
    void solve(std::span<const double> rhs, std::span<double> out) const {
        const auto d = static_cast<Eigen::Index>(rhs.size());
        SmallVector r(d);
        for (Eigen::Index k = 0; k < d; ++k) r(k) = rhs[static_cast<std::size_t>(k)];
        SmallVector s = lu_.solve(r);
        for (Eigen::Index k = 0; k < d; ++k) out[static_cast<std::size_t>(k)] = s(k);
    }

    const SmallMatrix& matrix() const noexcept { return sigma_; }
    double smallest_singular_value() const noexcept { return smin_; }
    double largest_singular_value() const noexcept { return smax_; }

private:
    SmallMatrix sigma_;
    Eigen::PartialPivLU<SmallMatrix> lu_;
    double smax_ = 0.0;
    double smin_ = 0.0;
};

/// Solves sigma * out = rhs by LU without the singular-value check of
/// SigmaFactor; throws when the estimated reciprocal condition is tiny.
inline void sigma_solve(const SmallMatrix& sigma, std::span<const double> rhs, std::span<double> out, double t,
                        std::span<const double> x) {
    const auto d = static_cast<Eigen::Index>(rhs.size());
    if (d == 1) {
        const double s = sigma(0, 0);
        if (!(std::fabs(s) > 1e-300) || !std::isfinite(s)) throw NonconvertibleCoefficient(t, std::vector<double>(x.begin(), x.end()));
        out[0] = rhs[0] / s;
        return;
    }
    Eigen::PartialPivLU<SmallMatrix> lu(sigma);
    if (!(lu.rcond() > 1e-14)) throw NonconvertibleCoefficient(t, std::vector<double>(x.begin(), x.end()));
    SmallVector r(d);
    for (Eigen::Index k = 0; k < d; ++k) r(k) = rhs[static_cast<std::size_t>(k)];
    const SmallVector s = lu.solve(r);
    for (Eigen::Index k = 0; k < d; ++k) out[static_cast<std::size_t>(k)] = s(k);
}

/// Recovers the gradient row p = Du^i from z^i = Du^i sigma, i.e. solves
/// sigma^T p = z^i.
inline void gradient_from_row(const SmallMatrix& sigma, std::span<const double> z_row, std::span<double> p, double t,
                              std::span<const double> x) {
    sigma_solve(sigma.transpose(), z_row, p, t, x);
}

/// F^i = f^i(t,x,y,z) + z^i . sigma^{-1}(t,x) b(t,x,y,z)
inline std::vector<double> assemble_F(const CoefficientSet& c, double t, std::span<const double> x,
                                      std::span<const double> y, const ZMatrix& z) {
    if (static_cast<int>(x.size()) != c.d || static_cast<int>(y.size()) != c.n || z.rows() != c.n || z.cols() != c.d)
        throw DimensionMismatch("assemble_F: argument dimensions do not match the coefficient set");
    std::vector<double> F(static_cast<std::size_t>(c.n));
    std::vector<double> drift(static_cast<std::size_t>(c.d)), theta(static_cast<std::size_t>(c.d));
    c.eval_f(t, x, y, z.data(), F);
    c.eval_b(t, x, y, z.data(), drift);
    SigmaFactor(c.eval_sigma(t, x), t, x).solve(drift, theta);
    for (int i = 0; i < c.n; ++i) {
        double dot = 0.0;
        for (int j = 0; j < c.d; ++j) dot += z(i, j) * theta[static_cast<std::size_t>(j)];
        F[static_cast<std::size_t>(i)] += dot;
    }
    return F;
}

/// Radial projection onto the Frobenius ball of radius k, in place.
inline void truncate_in_place(std::span<double> z, double k) {
    double s = 0.0;
    for (double v : z) s += v * v;
    const double norm = std::sqrt(s);
    if (norm <= k * (1.0 + 4.0 * std::numeric_limits<double>::epsilon())) return;  // keeps the projection idempotent
    const double scale = k / norm;
    for (double& v : z) v *= scale;
}

/// pi^k(z): identity on |z| <= k, radial projection onto the sphere otherwise.
inline ZMatrix truncate_z(const ZMatrix& z, double k) {
    if (!(k > 0.0)) throw DimensionMismatch("truncate_z: radius must be positive");
    ZMatrix out = z;
    truncate_in_place(out.data(), k);
    return out;
}

/// Declared structural constants for the growth and structure conditions.
struct StructuralDecl {
    double C0 = 1.0;
    double CQ = 1.0;
    double rho = 0.0;
    std::vector<std::vector<double>> spanning_vectors;
    /// Sub-quadratic kappa : R+ -> R+, evaluated at |z|.
    std::function<double(double)> kappa = [](double) { return 0.0; };
    double kappa_exponent = 0.0;

    /// Spot check of the sub-quadratic growth claim:
    /// kappa(r) <= c r^e + c on sampled r, with c fitted on [0, 1e3] and
    /// verified out to r = 1e6.
    bool kappa_is_subquadratic() const {
        if (!(kappa_exponent < 2.0)) return false;
        auto ratio = [&](double r) { return kappa(r) / (std::pow(r, kappa_exponent) + 1.0); };
        double c = 0.0;
        for (double r = 0.0; r <= 1e3; r = r < 1.0 ? r + 0.125 : r * 1.25) c = std::max(c, ratio(r));
        for (double r = 1e3; r <= 1e6; r *= 1.5)
            if (kappa(r) < 0.0 || ratio(r) > 1.01 * c + 1e-12) return false;
        return kappa(0.0) >= 0.0;
    }
};

}  // namespace qfbsde
