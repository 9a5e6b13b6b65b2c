#include "qfbsde/config.hpp"
#include "qfbsde/pipeline.hpp"

#include <catch_amalgamated.hpp>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

using namespace qfbsde;
namespace fs = std::filesystem;

namespace {

const fs::path kScratch = fs::path("cli_scratch");

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path write_config(const std::string& name, const json& j) {
    fs::create_directories(kScratch);
    const auto p = kScratch / (name + ".json");
    std::ofstream(p) << j.dump(2);
    return p;
}

struct Run {
    int code = -1;
    std::string err;
};

Run run_cli(const std::string& args, const std::string& tag) {
    fs::create_directories(kScratch);
    const auto err = kScratch / (tag + ".stderr");
    const std::string cmd = std::string(FBSDE_LAB_EXE) + " " + args + " 2> " + err.string() + " > /dev/null";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err);
    return r;
}

json small_model(const std::string& g) {
    json j = json::parse(R"js({
        "mode": "solve",
        "model": {"n": 1, "d": 1, "T": 1.0, "b": ["0"], "sigma": ["1"], "f": ["0.5 * z1_1^2"], "g": ["0"]},
        "grid": {"box": [[-4, 4]], "nodes_per_axis": 41},
        "mc": {"paths": 200, "dt_sim": 0.05, "seed": 5, "x0": [0.0]}
    })js");
    j["model"]["g"] = {g};
    return j;
}

json small_game(const std::string& a_hat_1) {
    json j = json::parse(R"js({
        "mode": "verify-nash",
        "game": {"d": 1, "T": 1.0, "sigma": ["1"], "players": [
            {"k": 1, "box": [[-5, 5]], "b": ["a1"], "r": "-0.5 * a1^2", "a_hat": ["clamp(p1, -5, 5)"], "g": "-0.2 * x1^2"},
            {"k": 1, "box": [[-5, 5]], "b": ["a1"], "r": "-0.5 * a1^2", "a_hat": ["clamp(p1, -5, 5)"], "g": "-0.2 * x1^2"}]},
        "grid": {"box": [[-5, 5]], "nodes_per_axis": 51},
        "mc": {"paths": 300, "dt_sim": 0.05, "seed": 9, "x0": [0.5]},
        "nash": {"isaacs_resolution": 21}
    })js");
    j["game"]["players"][0]["a_hat"] = {a_hat_1};
    return j;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("canonical configuration round trip is idempotent") {
    for (const auto& entry : fs::directory_iterator(CONFIG_DIR)) {
        INFO(entry.path().string());
        const json raw = json::parse(slurp(entry.path()));
        const json once = to_json(parse_config(raw));
        const json twice = to_json(parse_config(once));
        CHECK(once == twice);
        CHECK(content_hash(once) == content_hash(twice));
        CHECK(content_hash(once).size() == 16);
    }
}

TEST_CASE("configuration errors name the offending field") {
    auto expect_path = [](json j, const std::string& path) {
        try {
            parse_config(j);
            FAIL("expected a validation error for " << path);
        } catch (const ValidationError& e) {
            CHECK(e.path() == path);
        }
    };
    json j = small_model("x1");
    j["model"]["f"] = {"1 +"};
    expect_path(j, "model.f[0]");
    j = small_model("x1");
    j["grid"]["nodes_per_axis"] = "many";
    expect_path(j, "grid.nodes_per_axis");
    j = small_model("x1");
    j["grid"]["colour"] = 1;
    expect_path(j, "grid.colour");
    j = small_model("x1");
    j["mode"] = "dance";
    expect_path(j, "mode");
    j = small_model("x1");
    j["mode"] = "simulate";
    j.erase("mc");
    expect_path(j, "mc");
    j = small_model("x1");
    j["game"] = small_game("p1")["game"];
    expect_path(j, "model");
}

TEST_CASE("CLI exit code 2 on invalid input, with the field path on stderr") {
    json j = small_model("x1");
    j["model"]["sigma"] = {"y1"};
    const auto cfg = write_config("bad_slot", j);
    const auto r = run_cli("solve --config " + cfg.string() + " --out " + (kScratch / "bad_slot").string(), "bad_slot");
    CHECK(r.code == 2);
    CHECK(r.err.find("model.sigma[0]") != std::string::npos);
    CHECK_FALSE(fs::exists(kScratch / "bad_slot" / "report.json"));

    CHECK(run_cli("solve --config " + (kScratch / "missing.json").string(), "missing").code == 2);
    CHECK(run_cli("explode", "unknown_sub").code == 2);
}

TEST_CASE("solve with constant terminal data") {
    const auto cfg = write_config("const", small_model("1"));
    const auto out = kScratch / "const";
    fs::remove_all(out);
    const auto r = run_cli("solve --config " + cfg.string() + " --out " + out.string(), "const");
    REQUIRE(r.code == 0);
    const json rep = json::parse(slurp(out / "report.json"));
    CHECK(rep["status"] == "ok");
    CHECK(rep["version"] == kVersion);
    CHECK(rep["stages"]["solve"]["probe"]["u"][0] == 1.0);
    CHECK(rep["stages"]["solve"]["sup_v"] == 0.0);
    CHECK(rep["config"]["mode"] == "solve");
    CHECK(fs::directory_iterator(out) != fs::directory_iterator());
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(out)) ++files;
    CHECK(files == 1);  // no dumps requested
    CHECK(r.err.find("[time] solve") != std::string::npos);
}

TEST_CASE("field and path dumps") {
    json j = small_model("tanh(x1)");
    const auto cfg = write_config("dump", j);
    const auto out = kScratch / "dump";
    fs::remove_all(out);
    REQUIRE(run_cli("simulate --config " + cfg.string() + " --out " + out.string() + " --dump-fields --dump-paths", "dump").code == 0);
    const json meta = json::parse(slurp(out / "fields.meta.json"));
    const std::string fields = slurp(out / "fields.csv");
    CHECK(fields.rfind("t,x1,u1,v1_1\n", 0) == 0);
    CHECK(count_lines(fields) == 1 + meta["levels"].get<std::size_t>() * meta["nodes"].get<std::size_t>());
    const std::string paths = slurp(out / "paths.csv");
    CHECK(paths.rfind("path,step,t,x1,y1,z_norm,exited\n", 0) == 0);
    CHECK(count_lines(paths) == 1 + 100 * 21);  // 100 of 200 paths, 20 steps
}

TEST_CASE("seed and thread overrides") {
    const auto cfg = write_config("seeded", small_model("tanh(x1)"));
    auto report = [&](const std::string& extra, const std::string& tag) {
        const auto out = kScratch / tag;
        REQUIRE(run_cli("simulate --config " + cfg.string() + " --out " + out.string() + " " + extra, tag).code == 0);
        return slurp(out / "report.json");
    };
    const auto a = report("--threads 1", "t1");
    const auto b = report("--threads 3", "t3");
    const auto c = report("--threads 1 --seed 77", "s77");
    CHECK(a == b);
    CHECK(a != c);
    CHECK(json::parse(c)["config"]["mc"]["seed"] == 77);
}

TEST_CASE("a failing certificate exits with 4 and still writes the report") {
    const auto cfg = write_config("lazy_game", small_game("0"));
    const auto out = kScratch / "lazy_game";
    fs::remove_all(out);
    const auto r = run_cli("verify-nash --config " + cfg.string() + " --out " + out.string(), "lazy_game");
    CHECK(r.code == 4);
    REQUIRE(fs::exists(out / "report.json"));
    const json rep = json::parse(slurp(out / "report.json"));
    CHECK(rep["status"] == "certificate_failed");
    CHECK(rep["exit_code"] == 4);
    CHECK(rep["stages"]["nash"]["certified"] == false);
}

TEST_CASE("version flag") {
    fs::create_directories(kScratch);
    const auto file = kScratch / "version.txt";
    const int status = std::system((std::string(FBSDE_LAB_EXE) + " --version > " + file.string()).c_str());
    CHECK(WEXITSTATUS(status) == 0);
    CHECK(slurp(file).find(kVersion) != std::string::npos);
}
