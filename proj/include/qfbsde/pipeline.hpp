#pragma once

// Stage runner behind the command-line tool: conditions, solve, simulate and
// Nash verification, collected into one deterministic JSON report.

#include "qfbsde/conditions.hpp"
#include "qfbsde/config.hpp"
#include "qfbsde/games.hpp"
#include "qfbsde/pde.hpp"
#include "qfbsde/simulate.hpp"

#include <json.hpp>

#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace qfbsde {

inline constexpr const char* kVersion = "fbsde-lab 1.0.0";

enum ExitCode : int { exit_ok = 0, exit_validation = 2, exit_numeric = 3, exit_certificate = 4 };

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
};

struct RunResult {
    json report;
    int exit_code = exit_ok;
    std::optional<DecouplingField> field;
    std::optional<PathBundle> bundle;
    std::vector<StageTiming> timings;  // kept out of the report so it stays byte-stable
};

namespace detail {

inline json witness_json(const SamplePoint& p) {
    return {{"t", p.t}, {"x", p.x}, {"y", p.y}, {"z", std::vector<double>(p.z.data().begin(), p.z.data().end())}};
}

inline json stats_json(const SampleStats& s) {
    return {{"count", s.count}, {"mean", s.mean}, {"variance", s.variance}, {"se", s.se}, {"rms", s.rms}};
}

inline StructuralDecl make_decl(const StructuralSources& s) {
    StructuralDecl d;
    d.C0 = s.C0;
    d.CQ = s.CQ;
    d.rho = s.rho;
    d.spanning_vectors = s.spanning_vectors;
    d.kappa = build_kappa(s.kappa, "structural.kappa");
    d.kappa_exponent = s.kappa_exponent;
    return d;
}

inline SamplePlan make_plan(const SamplerConfig& s, int threads) {
    SamplePlan p;
    p.t_range = *s.t_range;
    p.x_box = s.x_box;
    p.y_box = s.y_box;
    p.z_range = s.z_range;
    p.points_per_axis = s.points_per_axis;
    p.max_grid_points = s.max_grid_points;
    p.stress_count = s.stress_count;
    p.stress_norms = s.stress_norms;
    p.seed = s.seed;
    p.threads = threads;
    return p;
}

inline json conditions_stage(const RunConfig& cfg, const CoefficientSet& c, const std::optional<DiagonalGameSpec>& game,
                             int threads) {
    const auto decl = make_decl(cfg.structural);
    const auto plan = make_plan(cfg.sampler, threads);
    json out;
    json reports = json::array();
    for (const auto& r : check_structural(c, decl, plan)) {
        reports.push_back({{"condition", condition_name(r.id)},
                           {"sample_count", r.sample_count},
                           {"worst_violation", r.worst_violation},
                           {"violation_count", r.violation_count},
                           {"fitted_constant", r.fitted_constant},
                           {"verdict", r.verdict()},
                           {"witness", witness_json(r.witness)}});
    }
    out["conditions"] = reports;
    out["kappa_subquadratic"] = decl.kappa_is_subquadratic();

    if (!decl.spanning_vectors.empty()) {
        const auto cert = positive_spanning(decl.spanning_vectors);
        out["spanning"] = {{"spans", cert.spans},
                           {"rank", cert.rank},
                           {"dimension", cert.dimension},
                           {"positive_combination", cert.positive_combination},
                           {"combination_residual", cert.combination_residual},
                           {"margin", cert.margin}};
    }

    // Decomposition identity on the sample set.
    double worst = 0.0;
    for (const auto& p : build_samples(c, plan)) worst = std::max(worst, bf_decompose(c, decl, p.t, p.x, p.y, p.z).identity_residual);
    out["decomposition_identity_residual"] = worst;

    if (game) {
        const auto v = validate_game(*game, plan.x_box, cfg.sampler.seed);
        out["game"] = {{"optimizer_in_box", v.optimizer_in_box},
                       {"worst_box_excess", v.worst_box_excess},
                       {"growth_constant", v.growth_constant},
                       {"samples", v.samples}};
    }
    return out;
}

inline std::vector<double> probe_point(const RunConfig& cfg) {
    if (cfg.mc) return cfg.mc->x0;
    std::vector<double> x;
    for (const auto& [lo, hi] : cfg.grid.box) x.push_back(0.5 * (lo + hi));
    return x;
}

inline json solve_stage(const RunConfig& cfg, const CoefficientSet& c, const DecouplingField& field) {
    json out;
    out["dt"] = field.plan.dt;
    out["steps"] = field.plan.steps;
    out["stored_levels"] = field.levels();
    out["store_stride"] = field.plan.stride;
    out["nodes"] = field.nodes();
    out["sigma_bound"] = field.sigma_bound;
    out["truncation_radius_used"] = field.truncation_radius_used;
    out["converged"] = field.converged;
    out["schedule_radii"] = field.schedule_radii;
    out["schedule_diffs"] = field.schedule_diffs;

    const double t0 = cfg.mc ? cfg.mc->t0 : 0.0;
    const auto x0 = probe_point(cfg);
    std::vector<double> u(static_cast<std::size_t>(field.n)), v(static_cast<std::size_t>(field.n * field.d));
    field.sample(t0, x0, u, v);
    out["probe"] = {{"t", t0}, {"x", x0}, {"u", u}, {"v", v}};

    const auto sub = field.grid.reporting_box();
    const auto mask = field.lattice().mask(sub);
    double umax = 0.0, vmax = 0.0;
    for (std::size_t l = 0; l < field.levels(); ++l)
        for (std::size_t node = 0; node < field.nodes(); ++node) {
            if (!mask[node]) continue;
            for (int i = 0; i < field.n; ++i) {
                umax = std::max(umax, std::fabs(field.u_at(l, node, i)));
                for (int j = 0; j < field.d; ++j) vmax = std::max(vmax, std::fabs(field.v_at(l, node, i, j)));
            }
        }
    out["sup_u"] = umax;
    out["sup_v"] = vmax;

    const auto res = pde_residual(field, c);
    out["pde_residual"] = {{"max_abs", res.max_abs}, {"rms", res.rms}, {"count", res.count}};

    HolderOptions ho;
    ho.region = sub;
    out["holder_half_u"] = holder_seminorm(field, 0.5, ho);
    ho.use_v = true;
    out["holder_half_v"] = holder_seminorm(field, 0.5, ho);

    try {
        const auto fit = blowup_fit(field);
        out["blowup_fit"] = {{"slope", fit.slope}, {"intercept", fit.intercept}, {"points", fit.points},
                             {"tau_min", fit.tau_min}, {"tau_max", fit.tau_max}};
    } catch (const InsufficientData& e) {
        out["blowup_fit"] = {{"unavailable", e.what()}};
    }
    return out;
}

inline json simulate_stage(const RunConfig& cfg, const CoefficientSet& c, const DecouplingField& field, int threads,
                           std::optional<PathBundle>& keep) {
    const auto& mc = *cfg.mc;
    SimulationOptions opt;
    opt.threads = threads;
    auto drifted = simulate_paths(field, c, mc.t0, mc.x0, mc.dt_sim, mc.paths, mc.seed, opt);
    const auto driftless = simulate_driftless(&field, c, mc.t0, mc.x0, mc.dt_sim, mc.paths, mc.seed, opt);

    json out;
    out["paths"] = drifted.paths;
    out["steps"] = drifted.steps;
    out["dt"] = drifted.dt;
    out["exit_fraction"] = drifted.exit_fraction;
    out["exit_warning"] = drifted.exit_warning;

    const auto res = bsde_residual(drifted, c);
    json comps = json::array();
    for (const auto& s : res.per_component) comps.push_back(stats_json(s));
    out["bsde_residual"] = {{"rms", res.rms}, {"paths", res.paths}, {"per_component", comps}};

    const auto bmo = bmo_estimate(drifted);
    out["bmo"] = {{"value", bmo.value}, {"time", bmo.time}, {"bin_size", bmo.bin_size}};

    const auto gs = girsanov_check(driftless, c, &drifted);
    json rw = json::array(), dr = json::array();
    for (const auto& s : gs.reweighted) rw.push_back(stats_json(s));
    for (const auto& s : gs.direct) dr.push_back(stats_json(s));
    out["girsanov"] = {{"weight", stats_json(gs.weight)}, {"reweighted_terminal", rw}, {"direct_terminal", dr},
                       {"max_abs_z", gs.max_abs_z}, {"max_log_weight", gs.max_log_weight},
                       {"driftless_exit_fraction", driftless.exit_fraction}};

    if (!cfg.structural.spanning_vectors.empty()) {
        json sm = json::array();
        for (const auto& r : submartingale_check(drifted, make_decl(cfg.structural)))
            sm.push_back({{"a", r.a}, {"worst_mean", r.worst_mean}, {"worst_se", r.worst_se}, {"worst_z", r.worst_z},
                          {"worst_time", r.worst_time}, {"bins_tested", r.bins_tested}, {"violated", r.violated}});
        out["submartingale"] = sm;
    }
    keep = std::move(drifted);
    return out;
}

inline json nash_stage(const RunConfig& cfg, const DiagonalGameSpec& game, const DecouplingField& field, int threads,
                       bool& certified) {
    const auto& m = *cfg.mc;
    McSettings mc;
    mc.paths = m.paths;
    mc.dt_sim = m.dt_sim;
    mc.seed = m.seed;
    mc.threads = threads;
    const auto cert = certify_nash(game, field, m.t0, m.x0, mc, cfg.nash.tol, cfg.nash.isaacs_resolution);
    certified = cert.certified;
    json players = json::array();
    for (const auto& pc : cert.players) {
        json devs = json::array();
        for (const auto& d : pc.deviations)
            devs.push_back({{"name", d.name}, {"excess", d.excess}, {"se", d.se}, {"payoff", d.payoff}, {"value", d.value},
                            {"exit_fraction", d.exit_fraction}});
        players.push_back({{"best_response_gap", pc.gap.gap}, {"gap_t", pc.gap.t}, {"gap_x", pc.gap.x},
                           {"pde_ok", pc.pde_ok}, {"mc_ok", pc.mc_ok}, {"deviations", devs}});
    }
    return {{"certified", cert.certified},
            {"scope", cert.scope},
            {"isaacs", {{"worst_slack", cert.isaacs.worst_slack}, {"probe", cert.isaacs.probe},
                        {"player", cert.isaacs.player}, {"best_action", cert.isaacs.best_action},
                        {"evaluations", cert.isaacs.evaluations}, {"ok", cert.isaacs_ok}}},
            {"players", players}};
}

inline bool wants(RunMode mode, const char* stage) {
    const std::string s = stage;
    switch (mode) {
    case RunMode::check_conditions: return s == "conditions";
    case RunMode::solve: return s == "solve";
    case RunMode::simulate: return s == "solve" || s == "simulate";
    case RunMode::verify_nash: return s == "solve" || s == "nash";
    case RunMode::full: return true;
    }
    return false;
}

}  // namespace detail

/// Runs the stages selected by cfg.mode. A failing stage is recorded in the
/// report and skips the stages that depend on it; the others still run.
inline RunResult run_config(const RunConfig& cfg, int threads = 1) {
    using clock = std::chrono::steady_clock;
    RunResult result;
    json& rep = result.report;
    const json canonical = to_json(cfg);
    rep["version"] = kVersion;
    rep["config"] = canonical;
    rep["config_hash"] = content_hash(canonical);
    rep["mode"] = mode_name(cfg.mode);
    rep["stages"] = json::object();
    rep["errors"] = json::array();

    bool validation_failed = false, numeric_failed = false, certificate_failed = false;
    auto run_stage = [&](const char* name, auto&& body) {
        const auto start = clock::now();
        try {
            rep["stages"][name] = body();
        } catch (const ValidationError& e) {
            validation_failed = true;
            rep["stages"][name] = {{"failed", true}};
            rep["errors"].push_back({{"stage", name}, {"kind", "validation"}, {"message", e.what()}});
        } catch (const std::exception& e) {
            numeric_failed = true;
            rep["stages"][name] = {{"failed", true}};
            rep["errors"].push_back({{"stage", name}, {"kind", "numeric"}, {"message", e.what()}});
        }
        result.timings.push_back({name, std::chrono::duration<double>(clock::now() - start).count()});
        return !rep["stages"][name].contains("failed");
    };

    std::optional<DiagonalGameSpec> game;
    std::optional<CoefficientSet> coeffs;
    run_stage("model", [&] {
        if (cfg.game) {
            game = build_game(*cfg.game, "game");
            coeffs = assemble_game(*game);
        } else {
            coeffs = build_coefficients(*cfg.model, "model");
        }
        return json{{"n", coeffs->n}, {"d", coeffs->d}, {"T", coeffs->T}, {"kind", game ? "game" : "model"}};
    });

    if (coeffs) {
        if (detail::wants(cfg.mode, "conditions"))
            run_stage("conditions", [&] { return detail::conditions_stage(cfg, *coeffs, game, threads); });

        bool solved = false;
        if (detail::wants(cfg.mode, "solve"))
            solved = run_stage("solve", [&] {
                result.field = solve_backward(*coeffs, cfg.grid, cfg.schedule, threads);
                return detail::solve_stage(cfg, *coeffs, *result.field);
            });

        if (solved && detail::wants(cfg.mode, "simulate"))
            run_stage("simulate", [&] { return detail::simulate_stage(cfg, *coeffs, *result.field, threads, result.bundle); });

        if (solved && game && detail::wants(cfg.mode, "nash")) {
            bool certified = false;
            if (run_stage("nash", [&] { return detail::nash_stage(cfg, *game, *result.field, threads, certified); }))
                certificate_failed = !certified;
        }
    }

    if (validation_failed)
        result.exit_code = exit_validation;
    else if (numeric_failed)
        result.exit_code = exit_numeric;
    else if (certificate_failed)
        result.exit_code = exit_certificate;
    rep["status"] = result.exit_code == exit_ok ? "ok"
                    : result.exit_code == exit_certificate ? "certificate_failed"
                    : "stage_failed";
    rep["exit_code"] = result.exit_code;
    return result;
}

// ---------------------------------------------------------------------------
// Output files

namespace detail {

inline void put_number(std::string& line, double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    line.append(buf, r.ptr);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("output.dir", "cannot write " + path.string());
    os << text;
}

}  // namespace detail

/// Writes fields.csv (one row per stored level and node) and fields.meta.json.
inline void write_fields_csv(const DecouplingField& field, const std::filesystem::path& dir) {
    const int n = field.n, d = field.d;
    std::string text = "t";
    for (int j = 0; j < d; ++j) text += ",x" + std::to_string(j + 1);
    for (int i = 0; i < n; ++i) text += ",u" + std::to_string(i + 1);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) text += ",v" + std::to_string(i + 1) + "_" + std::to_string(j + 1);
    text += '\n';
    const Lattice lat(field.grid);
    std::vector<double> x(static_cast<std::size_t>(d));
    for (std::size_t l = 0; l < field.levels(); ++l)
        for (std::size_t node = 0; node < lat.count; ++node) {
            lat.coords(node, x);
            detail::put_number(text, field.times[l]);
            for (double v : x) {
                text += ',';
                detail::put_number(text, v);
            }
            for (int i = 0; i < n; ++i) {
                text += ',';
                detail::put_number(text, field.u_at(l, node, i));
            }
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) {
                    text += ',';
                    detail::put_number(text, field.v_at(l, node, i, j));
                }
            text += '\n';
        }
    detail::write_text(dir / "fields.csv", text);

    json box = json::array();
    for (const auto& [lo, hi] : field.grid.box) box.push_back({lo, hi});
    const json meta = {{"n", n},
                       {"d", d},
                       {"levels", field.levels()},
                       {"nodes", field.nodes()},
                       {"nodes_per_axis", field.grid.nodes_per_axis},
                       {"box", box},
                       {"times", field.times},
                       {"row_order", "level-major, then nodes with the last axis fastest"},
                       {"v_convention", "v^i = Du^i sigma (row i)"},
                       {"truncation_radius_used", field.truncation_radius_used},
                       {"converged", field.converged}};
    detail::write_text(dir / "fields.meta.json", meta.dump(2) + "\n");
}

inline constexpr std::size_t kMaxDumpedPaths = 100;

/// Writes paths.csv for the first min(100, P) paths.
inline void write_paths_csv(const PathBundle& B, const std::filesystem::path& dir) {
    std::string text = "path,step,t";
    for (int j = 0; j < B.d; ++j) text += ",x" + std::to_string(j + 1);
    for (int i = 0; i < B.n; ++i) text += ",y" + std::to_string(i + 1);
    if (B.has_field_values()) text += ",z_norm";
    text += ",exited\n";
    const std::size_t count = std::min(B.paths, kMaxDumpedPaths);
    for (std::size_t p = 0; p < count; ++p)
        for (std::size_t l = 0; l <= B.steps; ++l) {
            text += std::to_string(p) + ',' + std::to_string(l) + ',';
            detail::put_number(text, B.time(l));
            for (double v : B.x(p, l)) {
                text += ',';
                detail::put_number(text, v);
            }
            if (B.has_field_values()) {
                for (double v : B.y(p, l)) {
                    text += ',';
                    detail::put_number(text, v);
                }
                double s = 0.0;
                for (double v : B.z(p, l)) s += v * v;
                text += ',';
                detail::put_number(text, std::sqrt(s));
            }
            text += B.exited[p] ? ",1\n" : ",0\n";
        }
    detail::write_text(dir / "paths.csv", text);
}

/// report.json with sorted keys, plus the optional dumps.
inline void write_outputs(const RunResult& result, const RunConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    detail::write_text(dir / "report.json", result.report.dump(2) + "\n");
    if (cfg.output.dump_fields && result.field) write_fields_csv(*result.field, dir);
    if (cfg.output.dump_paths && result.bundle) write_paths_csv(*result.bundle, dir);
}

}  // namespace qfbsde
