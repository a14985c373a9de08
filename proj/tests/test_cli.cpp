#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "sepdon/config.hpp"
#include "sepdon/errors.hpp"

using namespace sepdon;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SEPDON_BIN) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
}

} // namespace

TEST_CASE("toml subset parsing") {
    const std::string text = R"(
# comment
[run]
problem = "burgers"   # trailing comment
seed = 42
ratio = 1.5e-3
flag = true

[model]
branch_hidden = [10, 20, 30]
names = ["a", "b"]
)";
    ConfigMap m = parse_toml(text);
    CHECK(m.at("run.problem").as_string() == "burgers");
    CHECK(m.at("run.seed").as_int() == 42);
    CHECK(m.at("run.ratio").as_double() == doctest::Approx(1.5e-3));
    CHECK(m.at("run.flag").as_bool());
    CHECK(m.at("model.branch_hidden").as_size_list() == std::vector<std::size_t>{10, 20, 30});
    CHECK(m.at("model.names").v.index() == 5);

    CHECK_THROWS_AS(parse_toml("[broken\n"), usage_error);
    CHECK_THROWS_AS(parse_toml("novalue\n"), usage_error);
    CHECK_THROWS_AS(parse_toml("x = [1, 2\n"), usage_error);
}

TEST_CASE("run config resolution from a preset") {
    RunConfig rc = load_run_config("presets/burgers_desk.toml");
    CHECK(rc.problem.kind == ProblemKind::burgers);
    CHECK(rc.model.variant == Variant::separable);
    CHECK(rc.model.p == 20);
    CHECK(rc.model.r == 20);
    CHECK(rc.model.d == 2);
    CHECK(rc.model.sensors == 101);
    CHECK(rc.n_train == 100);
    CHECK(rc.n_test == 20);
    CHECK(rc.train.epochs == 10000);
    CHECK(rc.train.decay_rate == doctest::Approx(0.95));
    // paper plan captured in the problem spec
    CHECK(rc.problem.residual_axes == std::vector<std::size_t>{50, 50});
    CHECK(rc.problem.weight_ic == doctest::Approx(20.0));
}

TEST_CASE("json config is accepted") {
    auto dir = fs::temp_directory_path() / "sepdon_cli_json";
    fs::create_directories(dir);
    write_text(dir / "cfg.json", R"({
      "run": {"problem": "heat", "seed": 9},
      "dataset": {"path": "x", "n_train": 3, "n_test": 2},
      "model": {"variant": "separable", "p": 5, "r": 6}
    })");
    RunConfig rc = load_run_config((dir / "cfg.json").string());
    CHECK(rc.problem.kind == ProblemKind::heat);
    CHECK(rc.model.p == 5);
    CHECK(rc.model.r == 6);
    CHECK(rc.model.d == 4);
    CHECK(rc.seed == 9);
    fs::remove_all(dir);
}

TEST_CASE("missing problem kind is a usage error naming the field") {
    auto dir = fs::temp_directory_path() / "sepdon_cli_badcfg";
    fs::create_directories(dir);
    write_text(dir / "bad.toml", "[dataset]\npath = \"x\"\n");
    try {
        load_run_config((dir / "bad.toml").string());
        FAIL("expected usage_error");
    } catch (const usage_error& e) {
        CHECK(std::string(e.what()).find("problem") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("cli round trip: gen-data, train, eval, corruption paths") {
    auto dir = fs::temp_directory_path() / "sepdon_cli_e2e";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string cfg = (dir / "run.toml").string();
    write_text(cfg, R"([run]
problem = "burgers"
seed = 3
out_dir = ")" + (dir / "out").string() + R"("

[dataset]
path = ")" + (dir / "ds").string() + R"("
n_train = 4
n_test = 2

[problem]
residual_axes = [5, 5]
bc_nt = 4
ic_nx = 101
eval_axes = [11, 11]

[model]
variant = "separable"
p = 3
r = 3
branch_hidden = [8]
trunk_hidden = [8]

[train]
epochs = 3
eval_every = 0
)");

    CHECK(run_cli("gen-data --config " + cfg) == 0);
    CHECK(fs::exists(dir / "ds.json"));
    auto checksum = [&] {
        auto j = nlohmann::json::parse(std::ifstream(dir / "ds.json"));
        return j.at("checksum_fnv1a64").get<std::string>();
    };
    const std::string c1 = checksum();
    CHECK(run_cli("gen-data --config " + cfg) == 0);
    CHECK(checksum() == c1); // idempotent given identical config + seed

    CHECK(run_cli("train --config " + cfg) == 0);
    CHECK(fs::exists(dir / "out" / "run_summary.json"));
    CHECK(fs::exists(dir / "out" / "metrics.csv"));
    CHECK(fs::exists(dir / "out" / "model_final.json"));
    auto summary = nlohmann::json::parse(std::ifstream(dir / "out" / "run_summary.json"));
    CHECK(summary.at("param_count").get<std::size_t>() > 0);
    CHECK(summary.at("final_rel_l2").get<double>() >= 0.0);

    CHECK(run_cli("eval --config " + cfg + " --checkpoint " + (dir / "out" / "model_final").string()) == 0);
    CHECK(fs::exists(dir / "out" / "eval_summary.json"));

    // epochs = 0 is a valid empty run
    write_text(dir / "zero.toml", R"([run]
problem = "burgers"
seed = 3
out_dir = ")" + (dir / "out0").string() + R"("
[dataset]
path = ")" + (dir / "ds").string() + R"("
[problem]
residual_axes = [5, 5]
bc_nt = 4
eval_axes = [11, 11]
[model]
variant = "separable"
p = 3
r = 3
branch_hidden = [8]
trunk_hidden = [8]
[train]
epochs = 0
eval_every = 0
)");
    CHECK(run_cli("train --config " + (dir / "zero.toml").string()) == 0);

    // corrupted dataset -> io/corruption exit code 4
    auto size = fs::file_size(dir / "ds.bin");
    fs::resize_file(dir / "ds.bin", size - 8);
    CHECK(run_cli("train --config " + cfg) == 4);

    // unknown flag / missing config -> usage exit code 2
    CHECK(run_cli("train --config /nonexistent.toml") == 4);
    CHECK(run_cli("train") == 2);
    CHECK(run_cli("bench --config " + cfg + " --bogus") == 2);
    fs::remove_all(dir);
}

TEST_CASE("cli bench pass accounting prints the worked example") {
    auto dir = fs::temp_directory_path() / "sepdon_cli_bench";
    fs::create_directories(dir);
    const std::string out = (dir / "cap.txt").string();
    const std::string cmd = std::string(SEPDON_BIN) +
                            " bench --config presets/bench_burgers_passes.toml --out " +
                            (dir / "o").string() + " > " + out + " 2>&1";
    REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    std::ifstream f(out);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    CHECK(text.find("branch=1000 trunk=100/102/102 total=1304") != std::string::npos);
    CHECK(text.find("2701000") != std::string::npos);
    fs::remove_all(dir);
}
