#pragma once

// Builds coefficient maps from expression sources. Each slot has a fixed
// variable layout; an expression may only reference variables of its slot.

#include "qfbsde/errors.hpp"
#include "qfbsde/exprlang.hpp"
#include "qfbsde/model.hpp"

#include <array>
#include <span>
#include <string>
#include <vector>

namespace qfbsde {

namespace layout {

inline void append_indexed(std::vector<std::string>& out, char slot, int count) {
    for (int k = 1; k <= count; ++k) out.push_back(std::string(1, slot) + std::to_string(k));
}

/// (t, x, y, z) slots: drift b and driver f.
inline std::vector<std::string> txyz(int n, int d) {
    std::vector<std::string> out{"t"};
    append_indexed(out, 'x', d);
    append_indexed(out, 'y', n);
    for (int i = 1; i <= n; ++i)
        for (int j = 1; j <= d; ++j) out.push_back("z" + std::to_string(i) + "_" + std::to_string(j));
    return out;
}

/// (t, x) slot: diffusion sigma.
inline std::vector<std::string> tx(int d) {
    std::vector<std::string> out{"t"};
    append_indexed(out, 'x', d);
    return out;
}

/// x slot: terminal g.
inline std::vector<std::string> x_only(int d) {
    std::vector<std::string> out;
    append_indexed(out, 'x', d);
    return out;
}

/// (t, x, p) slot: optimiser a_hat.
inline std::vector<std::string> txp(int d) {
    auto out = tx(d);
    append_indexed(out, 'p', d);
    return out;
}

/// (t, x, a) slot: per-player drift and running reward.
inline std::vector<std::string> txa(int d, int k) {
    auto out = tx(d);
    append_indexed(out, 'a', k);
    return out;
}

/// kappa is written in p1, bound to |z|.
inline std::vector<std::string> kappa() { return {"p1"}; }

}  // namespace layout

/// Parses `source` and checks its free variables against `allowed`.
inline expr::Expr parse_for_slot(const std::string& source, std::span<const std::string> allowed,
                                 const std::string& path) {
    expr::Expr e;
    try {
        e = expr::parse_expr(source);
    } catch (const expr::ExprError& err) {
        throw ValidationError(path, err.what());
    }
    for (const auto& v : e.variables()) {
        bool ok = false;
        for (const auto& a : allowed) ok = ok || (a == v);
        if (!ok) throw ValidationError(path, "variable '" + v + "' is not available in this slot");
    }
    return e;
}

namespace detail {

/// Small fixed buffer for assembling evaluation environments without heap
/// traffic in the common case.
class EnvBuffer {
public:
    explicit EnvBuffer(std::size_t size) : size_(size) {
        if (size > small_.size()) large_.resize(size);
    }
    double* data() noexcept { return large_.empty() ? small_.data() : large_.data(); }
    std::span<const double> view() const noexcept {
        return {large_.empty() ? small_.data() : large_.data(), size_};
    }

private:
    std::array<double, 64> small_{};
    std::vector<double> large_;
    std::size_t size_;
};

inline void fill_txyz(double* env, double t, std::span<const double> x, std::span<const double> y,
                      std::span<const double> z) {
    env[0] = t;
    std::size_t k = 1;
    for (double v : x) env[k++] = v;
    for (double v : y) env[k++] = v;
    for (double v : z) env[k++] = v;
}

}  // namespace detail

/// Expression sources for a CoefficientSet. sigma is row-major d x d.
struct CoefficientSources {
    int n = 1;
    int d = 1;
    double T = 1.0;
    std::vector<std::string> b;
    std::vector<std::string> sigma;
    std::vector<std::string> f;
    std::vector<std::string> g;
};

inline CoefficientSet build_coefficients(const CoefficientSources& src, const std::string& path = "model") {
    const int n = src.n, d = src.d;
    if (n < 1) throw ValidationError(path + ".n", "must be >= 1");
    if (d < 1 || d > kMaxStateDim) throw ValidationError(path + ".d", "must be in [1, 3]");
    if (!(src.T > 0.0)) throw ValidationError(path + ".T", "must be positive");
    auto need = [&](const std::vector<std::string>& v, std::size_t count, const char* name) {
        if (v.size() != count)
            throw ValidationError(path + "." + name, "expected " + std::to_string(count) + " expressions, got " +
                                                         std::to_string(v.size()));
    };
    need(src.b, static_cast<std::size_t>(d), "b");
    need(src.sigma, static_cast<std::size_t>(d) * d, "sigma");
    need(src.f, static_cast<std::size_t>(n), "f");
    need(src.g, static_cast<std::size_t>(n), "g");

    const auto l_txyz = layout::txyz(n, d);
    const auto l_tx = layout::tx(d);
    const auto l_x = layout::x_only(d);
    auto bind_all = [&](const std::vector<std::string>& sources, const std::vector<std::string>& lay,
                        const char* name) {
        std::vector<expr::BoundExpr> out;
        for (std::size_t k = 0; k < sources.size(); ++k) {
            const std::string p = path + "." + name + "[" + std::to_string(k) + "]";
            out.emplace_back(parse_for_slot(sources[k], lay, p), lay);
        }
        return out;
    };
    auto b = bind_all(src.b, l_txyz, "b");
    auto sigma = bind_all(src.sigma, l_tx, "sigma");
    auto f = bind_all(src.f, l_txyz, "f");
    auto g = bind_all(src.g, l_x, "g");

    const std::size_t env_txyz = l_txyz.size();
    CoefficientSet c;
    c.n = n;
    c.d = d;
    c.T = src.T;
    c.b = [b, env_txyz](double t, std::span<const double> x, std::span<const double> y, std::span<const double> z,
                        std::span<double> out) {
        detail::EnvBuffer env(env_txyz);
        detail::fill_txyz(env.data(), t, x, y, z);
        for (std::size_t k = 0; k < b.size(); ++k) out[k] = b[k](env.view());
    };
    c.f = [f, env_txyz](double t, std::span<const double> x, std::span<const double> y, std::span<const double> z,
                        std::span<double> out) {
        detail::EnvBuffer env(env_txyz);
        detail::fill_txyz(env.data(), t, x, y, z);
        for (std::size_t k = 0; k < f.size(); ++k) out[k] = f[k](env.view());
    };
    c.sigma = [sigma](double t, std::span<const double> x, std::span<double> out) {
        detail::EnvBuffer env(x.size() + 1);
        detail::fill_txyz(env.data(), t, x, {}, {});
        for (std::size_t k = 0; k < sigma.size(); ++k) out[k] = sigma[k](env.view());
    };
    c.g = [g](std::span<const double> x, std::span<double> out) {
        for (std::size_t k = 0; k < g.size(); ++k) out[k] = g[k](x);
    };
    return c;
}

/// kappa(|z|) from an expression in p1.
inline std::function<double(double)> build_kappa(const std::string& source, const std::string& path) {
    const auto lay = layout::kappa();
    expr::BoundExpr k(parse_for_slot(source, lay, path), lay);
    return [k](double r) {
        const double env[1] = {r};
        return k(env);
    };
}

}  // namespace qfbsde
