#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "sepdon/bench.hpp"
#include "sepdon/model.hpp"
#include "sepdon/problem.hpp"
#include "sepdon/train.hpp"

namespace sepdon {

// Minimal TOML reader covering the preset grammar: [section] headers,
// key = value lines, strings, integers, floats, booleans and single-line
// arrays of numbers or strings. Keys flatten to "section.key". JSON configs
// with one level of nesting parse into the same map.
struct ConfigValue {
    std::variant<bool, std::int64_t, double, std::string, std::vector<double>,
                 std::vector<std::string>>
        v;

    bool as_bool() const;
    std::int64_t as_int() const;
    double as_double() const;
    const std::string& as_string() const;
    std::vector<std::size_t> as_size_list() const;
    std::vector<double> as_double_list() const;
};

using ConfigMap = std::map<std::string, ConfigValue>;

ConfigMap parse_toml(const std::string& text);
ConfigMap parse_config_file(const std::string& path); // dispatches on extension

enum class BenchMode { passes, sweep, paper_ratio };

struct BenchSettings {
    BenchMode mode = BenchMode::passes;
    SweepConfig sweep;
    std::size_t ratio_warmup = 1;
    std::size_t ratio_iters = 3;
    std::size_t n_train = 1000;
};

// One fully-resolved run: problem plan, architecture, schedules, data paths.
struct RunConfig {
    ProblemSpec problem;
    DeepONetConfig model;
    TrainConfig train;
    BenchSettings bench;
    std::string dataset_path;
    std::size_t n_train = 1000;
    std::size_t n_test = 1000;
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    bool deterministic = false;
    int threads = 0;
};

RunConfig load_run_config(const std::string& path);

} // namespace sepdon
