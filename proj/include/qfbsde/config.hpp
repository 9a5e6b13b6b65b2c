#pragma once

// Run configuration: JSON parsing with field-path validation, and the
// canonical serialisation used for the report echo and the content hash.

#include "qfbsde/conditions.hpp"
#include "qfbsde/errors.hpp"
#include "qfbsde/expr_model.hpp"
#include "qfbsde/games.hpp"
#include "qfbsde/pde.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

namespace qfbsde {

using nlohmann::json;

enum class RunMode { check_conditions, solve, simulate, verify_nash, full };

inline const char* mode_name(RunMode m) {
    switch (m) {
    case RunMode::check_conditions: return "check-conditions";
    case RunMode::solve: return "solve";
    case RunMode::simulate: return "simulate";
    case RunMode::verify_nash: return "verify-nash";
    case RunMode::full: return "full";
    }
    return "?";
}

inline std::optional<RunMode> parse_mode(const std::string& s) {
    for (RunMode m : {RunMode::check_conditions, RunMode::solve, RunMode::simulate, RunMode::verify_nash, RunMode::full})
        if (s == mode_name(m)) return m;
    return std::nullopt;
}

struct StructuralSources {
    double C0 = 1.0;
    double CQ = 1.0;
    double rho = 0.0;
    std::vector<std::vector<double>> spanning_vectors;
    std::string kappa = "0";
    double kappa_exponent = 0.0;
};

struct SamplerConfig {
    std::optional<Interval> t_range;
    std::vector<Interval> x_box;
    std::vector<Interval> y_box;
    Interval z_range{-5.0, 5.0};
    int points_per_axis = 5;
    std::size_t max_grid_points = 20000;
    int stress_count = 64;
    std::vector<double> stress_norms{10.0, 100.0, 1000.0};
    std::uint64_t seed = 1;
};

struct McConfig {
    std::size_t paths = 10000;
    double dt_sim = 0.01;
    std::uint64_t seed = 0;
    double t0 = 0.0;
    std::vector<double> x0;
};

struct NashConfig {
    NashTolerances tol;
    int isaacs_resolution = 101;
};

struct OutputConfig {
    std::string dir = "out";
    bool dump_fields = false;
    bool dump_paths = false;
};

struct RunConfig {
    RunMode mode = RunMode::full;
    std::optional<CoefficientSources> model;
    std::optional<GameSources> game;
    StructuralSources structural;
    SamplerConfig sampler;
    GridSpec grid;
    TruncationSchedule schedule;
    std::optional<McConfig> mc;
    NashConfig nash;
    OutputConfig output;

    int n() const { return model ? model->n : static_cast<int>(game->players.size()); }
    int d() const { return model ? model->d : game->d; }
    double T() const { return model ? model->T : game->T; }
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ValidationError(path_, "expected an object");
    }

    bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }
    std::string sub(const char* key) const { return path_.empty() ? std::string(key) : path_ + "." + key; }
    const json& at(const char* key) const { return j_.at(key); }

    double number(const char* key, std::optional<double> fallback = std::nullopt) const {
        if (!has(key)) {
            if (fallback) return *fallback;
            throw ValidationError(sub(key), "required number is missing");
        }
        const auto& v = j_.at(key);
        if (!v.is_number()) throw ValidationError(sub(key), "expected a number");
        const double x = v.get<double>();
        if (!std::isfinite(x)) throw ValidationError(sub(key), "must be finite");
        return x;
    }
    long long integer(const char* key, std::optional<long long> fallback = std::nullopt) const {
        if (!has(key)) {
            if (fallback) return *fallback;
            throw ValidationError(sub(key), "required integer is missing");
        }
        const auto& v = j_.at(key);
        if (!v.is_number_integer()) throw ValidationError(sub(key), "expected an integer");
        return v.get<long long>();
    }
    std::uint64_t unsigned_integer(const char* key) const {
        if (!has(key)) throw ValidationError(sub(key), "required integer is missing");
        const auto& v = j_.at(key);
        if (v.is_number_unsigned()) return v.get<std::uint64_t>();
        if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::uint64_t>(v.get<long long>());
        throw ValidationError(sub(key), "expected a non-negative integer");
    }
    bool boolean(const char* key, bool fallback) const {
        if (!has(key)) return fallback;
        if (!j_.at(key).is_boolean()) throw ValidationError(sub(key), "expected a boolean");
        return j_.at(key).get<bool>();
    }
    std::string string(const char* key, std::optional<std::string> fallback = std::nullopt) const {
        if (!has(key)) {
            if (fallback) return *fallback;
            throw ValidationError(sub(key), "required string is missing");
        }
        if (!j_.at(key).is_string()) throw ValidationError(sub(key), "expected a string");
        return j_.at(key).get<std::string>();
    }
    std::vector<std::string> strings(const char* key) const {
        if (!has(key)) throw ValidationError(sub(key), "required list of expressions is missing");
        const auto& v = j_.at(key);
        if (!v.is_array()) throw ValidationError(sub(key), "expected an array of strings");
        std::vector<std::string> out;
        for (std::size_t k = 0; k < v.size(); ++k) {
            if (!v[k].is_string()) throw ValidationError(sub(key) + "[" + std::to_string(k) + "]", "expected a string");
            out.push_back(v[k].get<std::string>());
        }
        return out;
    }
    std::vector<double> numbers(const char* key) const { return number_list(at(key), sub(key)); }
    Interval interval(const char* key) const { return to_interval(at(key), sub(key)); }
    std::vector<Interval> intervals(const char* key) const {
        const auto& v = at(key);
        if (!v.is_array()) throw ValidationError(sub(key), "expected an array of [lo, hi] pairs");
        std::vector<Interval> out;
        for (std::size_t k = 0; k < v.size(); ++k) out.push_back(to_interval(v[k], sub(key) + "[" + std::to_string(k) + "]"));
        return out;
    }

    static std::vector<double> number_list(const json& v, const std::string& path) {
        if (!v.is_array()) throw ValidationError(path, "expected an array of numbers");
        std::vector<double> out;
        for (std::size_t k = 0; k < v.size(); ++k) {
            if (!v[k].is_number()) throw ValidationError(path + "[" + std::to_string(k) + "]", "expected a number");
            out.push_back(v[k].get<double>());
        }
        return out;
    }
    static Interval to_interval(const json& v, const std::string& path) {
        const auto xs = number_list(v, path);
        if (xs.size() != 2) throw ValidationError(path, "expected [lo, hi]");
        if (!(xs[0] <= xs[1])) throw ValidationError(path, "lo must not exceed hi");
        return {xs[0], xs[1]};
    }

    void reject_unknown(std::initializer_list<const char*> known) const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            bool ok = false;
            for (const char* k : known) ok = ok || it.key() == k;
            if (!ok) throw ValidationError(sub(it.key().c_str()), "unknown field");
        }
    }

private:
    const json& j_;
    std::string path_;
};

inline std::size_t positive_size(const Reader& r, const char* key, long long fallback) {
    const long long v = r.integer(key, fallback);
    if (v <= 0) throw ValidationError(r.sub(key), "must be positive");
    return static_cast<std::size_t>(v);
}

inline CoefficientSources parse_model(const json& j) {
    const Reader r(j, "model");
    r.reject_unknown({"n", "d", "T", "b", "sigma", "f", "g"});
    CoefficientSources m;
    m.n = static_cast<int>(r.integer("n"));
    m.d = static_cast<int>(r.integer("d"));
    m.T = r.number("T");
    m.b = r.strings("b");
    m.sigma = r.strings("sigma");
    m.f = r.strings("f");
    m.g = r.strings("g");
    build_coefficients(m, "model");  // slot and count checks before any numerics
    return m;
}

inline GameSources parse_game(const json& j) {
    const Reader r(j, "game");
    r.reject_unknown({"d", "T", "sigma", "players"});
    GameSources g;
    g.d = static_cast<int>(r.integer("d"));
    g.T = r.number("T");
    g.sigma = r.strings("sigma");
    if (!r.has("players") || !r.at("players").is_array()) throw ValidationError("game.players", "expected an array");
    const auto& ps = r.at("players");
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const Reader p(ps[i], "game.players[" + std::to_string(i) + "]");
        p.reject_unknown({"k", "box", "b", "r", "a_hat", "g"});
        PlayerSources s;
        s.k = static_cast<int>(p.integer("k", 1));
        s.box = p.intervals("box");
        s.b = p.strings("b");
        s.r = p.string("r");
        s.a_hat = p.strings("a_hat");
        s.g = p.string("g");
        g.players.push_back(std::move(s));
    }
    build_game(g, "game");
    return g;
}

}  // namespace detail

/// Parses and validates a configuration. Every error names the field path.
inline RunConfig parse_config(const json& j) {
    using detail::Reader;
    const Reader root(j, "");
    root.reject_unknown({"mode", "model", "game", "structural", "sampler", "grid", "schedule", "mc", "nash", "output"});
    RunConfig c;
    const auto mode = parse_mode(root.string("mode"));
    if (!mode) throw ValidationError("mode", "expected one of check-conditions, solve, simulate, verify-nash, full");
    c.mode = *mode;

    if (root.has("model") == root.has("game")) throw ValidationError("model", "exactly one of model or game is required");
    if (root.has("model")) c.model = detail::parse_model(root.at("model"));
    if (root.has("game")) c.game = detail::parse_game(root.at("game"));
    if (c.mode == RunMode::verify_nash && !c.game) throw ValidationError("game", "verify-nash needs a game");
    const int n = c.n(), d = c.d();

    if (root.has("structural")) {
        const Reader r(root.at("structural"), "structural");
        r.reject_unknown({"C0", "CQ", "rho", "spanning_vectors", "kappa", "kappa_exponent"});
        auto& s = c.structural;
        s.C0 = r.number("C0", 1.0);
        s.CQ = r.number("CQ", 1.0);
        s.rho = r.number("rho", 0.0);
        if (!(s.C0 > 0.0)) throw ValidationError("structural.C0", "must be positive");
        if (!(s.CQ > 0.0)) throw ValidationError("structural.CQ", "must be positive");
        if (r.has("spanning_vectors")) {
            const auto& v = r.at("spanning_vectors");
            if (!v.is_array()) throw ValidationError("structural.spanning_vectors", "expected an array of vectors");
            for (std::size_t k = 0; k < v.size(); ++k) {
                const std::string p = "structural.spanning_vectors[" + std::to_string(k) + "]";
                auto a = Reader::number_list(v[k], p);
                if (static_cast<int>(a.size()) != n) throw ValidationError(p, "must have n entries");
                s.spanning_vectors.push_back(std::move(a));
            }
        }
        s.kappa = r.string("kappa", std::string("0"));
        build_kappa(s.kappa, "structural.kappa");
        s.kappa_exponent = r.number("kappa_exponent", 0.0);
        if (!(s.kappa_exponent < 2.0)) throw ValidationError("structural.kappa_exponent", "must be below 2");
    }

    if (root.has("grid")) {
        const Reader r(root.at("grid"), "grid");
        r.reject_unknown({"box", "nodes_per_axis", "dt", "cfl", "boundary_band", "max_stored_levels"});
        c.grid.box = r.intervals("box");
        c.grid.nodes_per_axis = static_cast<int>(r.integer("nodes_per_axis", 101));
        if (r.has("dt")) c.grid.dt = r.number("dt");
        c.grid.cfl = r.number("cfl", 0.5);
        c.grid.boundary_band = r.number("boundary_band", 0.15);
        c.grid.max_stored_levels = detail::positive_size(r, "max_stored_levels", 1000);
        c.grid.validate();
        if (c.grid.dims() != d) throw ValidationError("grid.box", "needs one interval per state axis");
    } else if (c.mode != RunMode::check_conditions) {
        throw ValidationError("grid", "required for this mode");
    }

    if (root.has("schedule")) {
        const Reader r(root.at("schedule"), "schedule");
        r.reject_unknown({"radii", "tol"});
        if (r.has("radii")) c.schedule.radii = r.numbers("radii");
        c.schedule.tol = r.number("tol", 1e-4);
        c.schedule.validate();
    }

    {
        auto& s = c.sampler;
        if (root.has("sampler")) {
            const Reader r(root.at("sampler"), "sampler");
            r.reject_unknown({"t_range", "x_box", "y_box", "z_range", "points_per_axis", "max_grid_points", "stress_count",
                              "stress_norms", "seed"});
            if (r.has("t_range")) s.t_range = r.interval("t_range");
            if (r.has("x_box")) s.x_box = r.intervals("x_box");
            if (r.has("y_box")) s.y_box = r.intervals("y_box");
            if (r.has("z_range")) s.z_range = r.interval("z_range");
            s.points_per_axis = static_cast<int>(r.integer("points_per_axis", 5));
            if (s.points_per_axis < 1) throw ValidationError("sampler.points_per_axis", "must be positive");
            s.max_grid_points = detail::positive_size(r, "max_grid_points", 20000);
            s.stress_count = static_cast<int>(r.integer("stress_count", 64));
            if (s.stress_count < 0) throw ValidationError("sampler.stress_count", "must be non-negative");
            if (r.has("stress_norms")) s.stress_norms = r.numbers("stress_norms");
            if (r.has("seed")) s.seed = r.unsigned_integer("seed");
        }
        if (!s.t_range) s.t_range = Interval{0.0, c.T()};
        if (s.x_box.empty()) s.x_box = root.has("grid") ? c.grid.reporting_box() : std::vector<Interval>(static_cast<std::size_t>(d), Interval{-1.0, 1.0});
        if (s.y_box.empty()) s.y_box.assign(static_cast<std::size_t>(n), Interval{-1.0, 1.0});
        if (s.x_box.size() != static_cast<std::size_t>(d)) throw ValidationError("sampler.x_box", "needs d intervals");
        if (s.y_box.size() != static_cast<std::size_t>(n)) throw ValidationError("sampler.y_box", "needs n intervals");
    }

    if (root.has("mc")) {
        const Reader r(root.at("mc"), "mc");
        r.reject_unknown({"paths", "dt_sim", "seed", "t0", "x0"});
        McConfig m;
        m.paths = detail::positive_size(r, "paths", 10000);
        m.dt_sim = r.number("dt_sim", 0.01);
        if (!(m.dt_sim > 0.0)) throw ValidationError("mc.dt_sim", "must be positive");
        m.seed = r.unsigned_integer("seed");
        m.t0 = r.number("t0", 0.0);
        if (!(m.t0 >= 0.0 && m.t0 < c.T())) throw ValidationError("mc.t0", "must lie in [0, T)");
        m.x0 = r.has("x0") ? r.numbers("x0") : std::vector<double>(static_cast<std::size_t>(d), 0.0);
        if (m.x0.size() != static_cast<std::size_t>(d)) throw ValidationError("mc.x0", "needs d entries");
        c.mc = m;
    } else if (c.mode == RunMode::simulate || c.mode == RunMode::verify_nash || c.mode == RunMode::full) {
        throw ValidationError("mc", "required for this mode");
    }

    if (root.has("nash")) {
        const Reader r(root.at("nash"), "nash");
        r.reject_unknown({"tol_pde", "tol_mc", "tol_isaacs", "se_multiplier", "isaacs_resolution"});
        c.nash.tol.pde = r.number("tol_pde", 1e-2);
        c.nash.tol.mc = r.number("tol_mc", 1e-2);
        c.nash.tol.isaacs = r.number("tol_isaacs", 1e-6);
        c.nash.tol.se_multiplier = r.number("se_multiplier", 3.0);
        c.nash.isaacs_resolution = static_cast<int>(r.integer("isaacs_resolution", 101));
        if (c.nash.isaacs_resolution < 2) throw ValidationError("nash.isaacs_resolution", "must be >= 2");
    }

    if (root.has("output")) {
        const Reader r(root.at("output"), "output");
        r.reject_unknown({"dir", "dump_fields", "dump_paths"});
        c.output.dir = r.string("dir", std::string("out"));
        c.output.dump_fields = r.boolean("dump_fields", false);
        c.output.dump_paths = r.boolean("dump_paths", false);
    }
    return c;
}

// ---------------------------------------------------------------------------
// Serialisation

namespace detail {

inline json interval_json(const Interval& v) { return json::array({v.first, v.second}); }
inline json intervals_json(const std::vector<Interval>& v) {
    json a = json::array();
    for (const auto& i : v) a.push_back(interval_json(i));
    return a;
}

}  // namespace detail

/// Canonical form with every default made explicit.
inline json to_json(const RunConfig& c) {
    using detail::interval_json;
    using detail::intervals_json;
    json j;
    j["mode"] = mode_name(c.mode);
    if (c.model) {
        const auto& m = *c.model;
        j["model"] = {{"n", m.n}, {"d", m.d}, {"T", m.T}, {"b", m.b}, {"sigma", m.sigma}, {"f", m.f}, {"g", m.g}};
    }
    if (c.game) {
        const auto& g = *c.game;
        json players = json::array();
        for (const auto& p : g.players)
            players.push_back({{"k", p.k}, {"box", intervals_json(p.box)}, {"b", p.b}, {"r", p.r}, {"a_hat", p.a_hat}, {"g", p.g}});
        j["game"] = {{"d", g.d}, {"T", g.T}, {"sigma", g.sigma}, {"players", players}};
    }
    {
        const auto& s = c.structural;
        j["structural"] = {{"C0", s.C0}, {"CQ", s.CQ}, {"rho", s.rho}, {"spanning_vectors", s.spanning_vectors},
                           {"kappa", s.kappa}, {"kappa_exponent", s.kappa_exponent}};
    }
    {
        const auto& s = c.sampler;
        j["sampler"] = {{"t_range", interval_json(*s.t_range)}, {"x_box", intervals_json(s.x_box)},
                        {"y_box", intervals_json(s.y_box)},     {"z_range", interval_json(s.z_range)},
                        {"points_per_axis", s.points_per_axis}, {"max_grid_points", s.max_grid_points},
                        {"stress_count", s.stress_count},       {"stress_norms", s.stress_norms},
                        {"seed", s.seed}};
    }
    if (!c.grid.box.empty()) {
        const auto& g = c.grid;
        j["grid"] = {{"box", intervals_json(g.box)}, {"nodes_per_axis", g.nodes_per_axis}, {"cfl", g.cfl},
                     {"boundary_band", g.boundary_band}, {"max_stored_levels", g.max_stored_levels}};
        j["grid"]["dt"] = g.dt ? json(*g.dt) : json(nullptr);
    }
    j["schedule"] = {{"radii", c.schedule.radii}, {"tol", c.schedule.tol}};
    if (c.mc) {
        const auto& m = *c.mc;
        j["mc"] = {{"paths", m.paths}, {"dt_sim", m.dt_sim}, {"seed", m.seed}, {"t0", m.t0}, {"x0", m.x0}};
    }
    j["nash"] = {{"tol_pde", c.nash.tol.pde}, {"tol_mc", c.nash.tol.mc}, {"tol_isaacs", c.nash.tol.isaacs},
                 {"se_multiplier", c.nash.tol.se_multiplier}, {"isaacs_resolution", c.nash.isaacs_resolution}};
    j["output"] = {{"dir", c.output.dir}, {"dump_fields", c.output.dump_fields}, {"dump_paths", c.output.dump_paths}};
    return j;
}

/// FNV-1a 64 of the compact canonical JSON, as 16 hex digits.
inline std::string content_hash(const json& canonical) {
    const std::string text = canonical.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace qfbsde
