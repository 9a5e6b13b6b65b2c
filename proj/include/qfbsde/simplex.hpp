#pragma once

// Dense two-phase tableau simplex with Bland's rule, for the small LPs of the
// spanning certificate:   maximise c^T x  s.t.  A x = b,  x >= 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace qfbsde::lp {

enum class Status { optimal, infeasible, unbounded };

struct Result {
    Status status = Status::infeasible;
    std::vector<double> x;
    double objective = 0.0;
};

namespace detail {

class Tableau {
public:
    Tableau(std::size_t rows, std::size_t cols) : m_(rows), n_(cols), t_((rows + 1) * (cols + 1), 0.0) {}

    double& at(std::size_t i, std::size_t j) { return t_[i * (n_ + 1) + j]; }
    double at(std::size_t i, std::size_t j) const { return t_[i * (n_ + 1) + j]; }
    double& rhs(std::size_t i) { return at(i, n_); }
    double& obj(std::size_t j) { return at(m_, j); }

    void pivot(std::size_t r, std::size_t c) {
        const double p = at(r, c);
        for (std::size_t j = 0; j <= n_; ++j) at(r, j) /= p;
        at(r, c) = 1.0;
        for (std::size_t i = 0; i <= m_; ++i) {
            if (i == r) continue;
            const double factor = at(i, c);
            if (factor == 0.0) continue;
            for (std::size_t j = 0; j <= n_; ++j) at(i, j) -= factor * at(r, j);
            at(i, c) = 0.0;
        }
    }

    std::size_t rows() const noexcept { return m_; }
    std::size_t cols() const noexcept { return n_; }

private:
    std::size_t m_, n_;
    std::vector<double> t_;
};

/// Bland's rule iterations on the objective row. Returns false if unbounded.
inline bool iterate(Tableau& tab, std::vector<std::size_t>& basis, const std::vector<bool>& eligible, double eps) {
    for (std::size_t guard = 0; guard < 100000; ++guard) {
        std::size_t enter = tab.cols();
        for (std::size_t j = 0; j < tab.cols(); ++j)
            if (eligible[j] && tab.obj(j) > eps) {
                enter = j;
                break;
            }
        if (enter == tab.cols()) return true;
        std::size_t leave = tab.rows();
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < tab.rows(); ++i) {
            const double a = tab.at(i, enter);
            if (a <= eps) continue;
            const double ratio = tab.rhs(i) / a;
            const bool better = leave == tab.rows() || ratio < best - eps;
            const bool tie_break = !better && ratio <= best + eps && basis[i] < basis[leave];
            if (better || tie_break) {
                best = std::min(best, ratio);
                leave = i;
            }
        }
        if (leave == tab.rows()) return false;
        tab.pivot(leave, enter);
        basis[leave] = enter;
    }
    return true;
}

}  // namespace detail

/// A is row-major m x n.
inline Result solve(const std::vector<std::vector<double>>& A, std::vector<double> b, const std::vector<double>& c,
                    double eps = 1e-12) {
    const std::size_t m = A.size();
    const std::size_t n = c.size();
    const std::size_t total = n + m;
    detail::Tableau tab(m, total);
    std::vector<std::size_t> basis(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double sign = b[i] < 0.0 ? -1.0 : 1.0;
        for (std::size_t j = 0; j < n; ++j) tab.at(i, j) = sign * A[i][j];
        tab.at(i, n + i) = 1.0;
        tab.rhs(i) = sign * b[i];
        basis[i] = n + i;
    }
    // Phase 1: maximise -sum(artificials).
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += tab.at(i, j);
        tab.obj(j) = s;
    }
    double bsum = 0.0;
    for (std::size_t i = 0; i < m; ++i) bsum += tab.rhs(i);
    tab.obj(total) = bsum;

    std::vector<bool> eligible(total, true);
    detail::iterate(tab, basis, eligible, eps);
    double scale = 1.0;
    for (std::size_t i = 0; i < m; ++i) scale = std::max(scale, std::fabs(b[i]));
    if (tab.obj(total) > 1e-9 * scale) return {Status::infeasible, {}, 0.0};

    // Drive remaining artificials out of the basis.
    for (std::size_t i = 0; i < m; ++i) {
        if (basis[i] < n) continue;
        for (std::size_t j = 0; j < n; ++j)
            if (std::fabs(tab.at(i, j)) > 1e-9) {
                tab.pivot(i, j);
                basis[i] = j;
                break;
            }
    }

    // Phase 2.
    for (std::size_t j = n; j < total; ++j) eligible[j] = false;
    for (std::size_t j = 0; j <= total; ++j) {
        double r = j < n ? c[j] : 0.0;
        if (j == total) r = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double cb = basis[i] < n ? c[basis[i]] : 0.0;
            r -= cb * tab.at(i, j);
        }
        tab.obj(j) = r;
    }
    if (!detail::iterate(tab, basis, eligible, eps)) return {Status::unbounded, {}, 0.0};

    Result res;
    res.status = Status::optimal;
    res.x.assign(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        if (basis[i] < n) res.x[basis[i]] = std::max(0.0, tab.rhs(i));
    for (std::size_t j = 0; j < n; ++j) res.objective += c[j] * res.x[j];
    return res;
}

}  // namespace qfbsde::lp
