#include "sepdon/config.hpp"

#include <cctype>
#include <cmath>
#include <json.hpp>

#include "io_util.hpp"
#include "sepdon/errors.hpp"

namespace sepdon {

using nlohmann::json;

bool ConfigValue::as_bool() const {
    if (auto* b = std::get_if<bool>(&v)) return *b;
    throw usage_error("config: expected a boolean");
}

std::int64_t ConfigValue::as_int() const {
    if (auto* i = std::get_if<std::int64_t>(&v)) return *i;
    if (auto* d = std::get_if<double>(&v)) {
        if (*d == static_cast<double>(static_cast<std::int64_t>(*d)))
            return static_cast<std::int64_t>(*d);
    }
    throw usage_error("config: expected an integer");
}

double ConfigValue::as_double() const {
    if (auto* d = std::get_if<double>(&v)) return *d;
    if (auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
    throw usage_error("config: expected a number");
}

const std::string& ConfigValue::as_string() const {
    if (auto* s = std::get_if<std::string>(&v)) return *s;
    throw usage_error("config: expected a string");
}

std::vector<std::size_t> ConfigValue::as_size_list() const {
    if (auto* a = std::get_if<std::vector<double>>(&v)) {
        std::vector<std::size_t> out;
        for (double d : *a) {
            if (d < 0 || d != std::floor(d)) throw usage_error("config: expected nonnegative integers");
            out.push_back(static_cast<std::size_t>(d));
        }
        return out;
    }
    throw usage_error("config: expected an array of integers");
}

std::vector<double> ConfigValue::as_double_list() const {
    if (auto* a = std::get_if<std::vector<double>>(&v)) return *a;
    throw usage_error("config: expected an array of numbers");
}

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

ConfigValue parse_scalar(const std::string& tok, int line_no) {
    if (tok == "true") return {true};
    if (tok == "false") return {false};
    if (!tok.empty() && tok.front() == '"') {
        if (tok.size() < 2 || tok.back() != '"')
            throw usage_error("config line " + std::to_string(line_no) + ": unterminated string");
        std::string out;
        for (std::size_t i = 1; i + 1 < tok.size(); ++i) {
            if (tok[i] == '\\' && i + 2 < tok.size()) {
                ++i;
                if (tok[i] == 'n') out.push_back('\n');
                else out.push_back(tok[i]);
            } else {
                out.push_back(tok[i]);
            }
        }
        return {out};
    }
    try {
        std::size_t used = 0;
        if (tok.find_first_of(".eE") == std::string::npos || tok.starts_with("0x")) {
            long long i = std::stoll(tok, &used);
            if (used == tok.size()) return {static_cast<std::int64_t>(i)};
        }
        double d = std::stod(tok, &used);
        if (used == tok.size()) return {d};
    } catch (...) {
    }
    throw usage_error("config line " + std::to_string(line_no) + ": cannot parse value '" + tok + "'");
}

ConfigValue parse_value(const std::string& raw, int line_no) {
    std::string tok = trim(raw);
    if (tok.empty()) throw usage_error("config line " + std::to_string(line_no) + ": empty value");
    if (tok.front() == '[') {
        if (tok.back() != ']')
            throw usage_error("config line " + std::to_string(line_no) + ": unterminated array");
        std::string body = tok.substr(1, tok.size() - 2);
        std::vector<std::string> items;
        std::string cur;
        bool in_str = false;
        for (char c : body) {
            if (c == '"') in_str = !in_str;
            if (c == ',' && !in_str) {
                items.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!trim(cur).empty()) items.push_back(cur);
        bool strings = false;
        for (auto& it : items)
            if (trim(it).starts_with("\"")) strings = true;
        if (strings) {
            std::vector<std::string> out;
            for (auto& it : items) out.push_back(std::get<std::string>(parse_scalar(trim(it), line_no).v));
            return {out};
        }
        std::vector<double> out;
        for (auto& it : items) out.push_back(parse_scalar(trim(it), line_no).as_double());
        return {out};
    }
    return parse_scalar(tok, line_no);
}

} // namespace

ConfigMap parse_toml(const std::string& text) {
    ConfigMap map;
    std::string section;
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        // strip comments outside strings
        bool in_str = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_str = !in_str;
            if (line[i] == '#' && !in_str) {
                line = line.substr(0, i);
                break;
            }
        }
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw usage_error("config line " + std::to_string(line_no) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw usage_error("config line " + std::to_string(line_no) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw usage_error("config line " + std::to_string(line_no) + ": empty key");
        std::string full = section.empty() ? key : section + "." + key;
        map[full] = parse_value(line.substr(eq + 1), line_no);
    }
    return map;
}

namespace {

void flatten_json(const json& j, const std::string& prefix, ConfigMap& map) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        const json& v = it.value();
        if (v.is_object()) {
            flatten_json(v, key, map);
        } else if (v.is_boolean()) {
            map[key] = {v.get<bool>()};
        } else if (v.is_number_integer() || v.is_number_unsigned()) {
            map[key] = {v.get<std::int64_t>()};
        } else if (v.is_number_float()) {
            map[key] = {v.get<double>()};
        } else if (v.is_string()) {
            map[key] = {v.get<std::string>()};
        } else if (v.is_array()) {
            if (!v.empty() && v.front().is_string()) {
                map[key] = {v.get<std::vector<std::string>>()};
            } else {
                std::vector<double> out;
                for (const auto& e : v) out.push_back(e.get<double>());
                map[key] = {out};
            }
        } else {
            throw usage_error("config: unsupported json value at " + key);
        }
    }
}

} // namespace

ConfigMap parse_config_file(const std::string& path) {
    const std::string text = detail::read_text_file(path);
    if (path.size() > 5 && path.ends_with(".json")) {
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw usage_error("config: invalid json in " + path + ": " + e.what());
        }
        ConfigMap map;
        flatten_json(j, "", map);
        return map;
    }
    return parse_toml(text);
}

namespace {

const ConfigValue* find(const ConfigMap& m, const std::string& key) {
    auto it = m.find(key);
    return it == m.end() ? nullptr : &it->second;
}

DeepONetConfig paper_model_defaults(const ProblemSpec& p) {
    DeepONetConfig c;
    c.variant = Variant::separable;
    c.d = p.trunk_dim();
    c.fields = p.num_fields();
    c.sensors = p.sensors;
    switch (p.kind) {
        case ProblemKind::burgers:
            c.p = 50;
            c.r = 50;
            c.branch_hidden = std::vector<std::size_t>(6, 100);
            c.trunk_hidden = std::vector<std::size_t>(6, 100);
            break;
        case ProblemKind::biot:
            c.p = 20;
            c.r = 20;
            c.branch_hidden = std::vector<std::size_t>(6, 100);
            c.trunk_hidden = std::vector<std::size_t>(6, 50);
            break;
        case ProblemKind::heat:
            c.p = 50;
            c.r = 50;
            c.branch_hidden = std::vector<std::size_t>(6, 50);
            c.trunk_hidden = std::vector<std::size_t>(6, 50);
            break;
    }
    return c;
}

TrainConfig paper_train_defaults(ProblemKind kind) {
    TrainConfig t;
    switch (kind) {
        case ProblemKind::burgers:
            t.epochs = 50000;
            t.decay_rate = 0.95;
            t.decay_every = 1000;
            break;
        case ProblemKind::biot:
            t.epochs = 150000;
            t.decay_rate = 0.8;
            t.decay_every = 10000;
            break;
        case ProblemKind::heat:
            t.epochs = 50000;
            t.decay_rate = 0.9;
            t.decay_every = 2000;
            break;
    }
    return t;
}

} // namespace

RunConfig load_run_config(const std::string& path) {
    ConfigMap m = parse_config_file(path);
    RunConfig rc;

    const ConfigValue* kind = find(m, "run.problem");
    if (!kind) throw usage_error("config: missing required field 'run.problem' (kind)");
    switch (problem_from_name(kind->as_string())) {
        case ProblemKind::burgers: rc.problem = burgers_problem(); break;
        case ProblemKind::biot: rc.problem = biot_problem(); break;
        case ProblemKind::heat: rc.problem = heat_problem(); break;
    }
    if (auto* v = find(m, "run.seed")) rc.seed = static_cast<std::uint64_t>(v->as_int());
    if (auto* v = find(m, "run.out_dir")) rc.out_dir = v->as_string();
    if (auto* v = find(m, "run.deterministic")) rc.deterministic = v->as_bool();
    if (auto* v = find(m, "run.threads")) rc.threads = static_cast<int>(v->as_int());

    if (auto* v = find(m, "dataset.path")) rc.dataset_path = v->as_string();
    if (auto* v = find(m, "dataset.n_train")) rc.n_train = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "dataset.n_test")) rc.n_test = static_cast<std::size_t>(v->as_int());

    // problem-plan overrides
    ProblemSpec& p = rc.problem;
    if (auto* v = find(m, "problem.residual_axes")) p.residual_axes = v->as_size_list();
    if (auto* v = find(m, "problem.residual_random")) p.residual_random = v->as_bool();
    if (auto* v = find(m, "problem.bc_nt")) p.bc_nt = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "problem.ic_nx")) p.ic_nx = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "problem.biot_n")) p.biot_n = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "problem.heat_ic_n")) p.heat_ic_n = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "problem.heat_bc_n")) p.heat_bc_n = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "problem.heat_c_n")) p.heat_c_n = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "problem.eval_axes")) p.eval_axes = v->as_size_list();
    if (auto* v = find(m, "problem.sensors")) p.sensors = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "problem.weight_physics")) p.weight_physics = v->as_double();
    if (auto* v = find(m, "problem.weight_bc")) p.weight_bc = v->as_double();
    if (auto* v = find(m, "problem.weight_ic")) p.weight_ic = v->as_double();
    if (auto* v = find(m, "problem.alpha_log_uniform")) p.alpha_log_uniform = v->as_bool();
    if (rc.problem.kind == ProblemKind::burgers && rc.problem.ic_nx != rc.problem.sensors)
        rc.problem.ic_nx = rc.problem.sensors;

    rc.model = paper_model_defaults(p);
    if (auto* v = find(m, "model.variant")) {
        const std::string s = v->as_string();
        if (s == "separable") rc.model.variant = Variant::separable;
        else if (s == "vanilla") rc.model.variant = Variant::vanilla;
        else throw usage_error("config: model.variant must be 'separable' or 'vanilla'");
    }
    if (auto* v = find(m, "model.p")) rc.model.p = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "model.r")) rc.model.r = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "model.branch_hidden")) rc.model.branch_hidden = v->as_size_list();
    if (auto* v = find(m, "model.trunk_hidden")) rc.model.trunk_hidden = v->as_size_list();
    if (rc.model.variant == Variant::vanilla) rc.model.r = 1;
    rc.model.sensors = p.sensors;
    rc.model.d = p.trunk_dim();
    rc.model.fields = p.num_fields();

    rc.train = paper_train_defaults(p.kind);
    if (auto* v = find(m, "train.epochs")) rc.train.epochs = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "train.lr0")) rc.train.lr0 = v->as_double();
    if (auto* v = find(m, "train.decay_rate")) rc.train.decay_rate = v->as_double();
    if (auto* v = find(m, "train.decay_every")) rc.train.decay_every = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "train.eval_every")) rc.train.eval_every = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "train.checkpoint_every"))
        rc.train.checkpoint_every = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "train.pair_batch")) rc.train.pair_batch = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "train.pair_chunk")) rc.train.pair_chunk = static_cast<std::size_t>(v->as_int());
    rc.train.seed = rc.seed;

    if (auto* v = find(m, "bench.mode")) {
        const std::string s = v->as_string();
        if (s == "passes") rc.bench.mode = BenchMode::passes;
        else if (s == "sweep") rc.bench.mode = BenchMode::sweep;
        else if (s == "paper-ratio") rc.bench.mode = BenchMode::paper_ratio;
        else throw usage_error("config: bench.mode must be passes | sweep | paper-ratio");
    }
    if (auto* v = find(m, "bench.n_list")) rc.bench.sweep.n_list = v->as_size_list();
    if (auto* v = find(m, "bench.iters")) rc.bench.sweep.iters = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "bench.warmup")) rc.bench.sweep.warmup = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "bench.n_train")) {
        rc.bench.sweep.n_train = static_cast<std::size_t>(v->as_int());
        rc.bench.n_train = rc.bench.sweep.n_train;
    }
    if (auto* v = find(m, "bench.hidden")) rc.bench.sweep.hidden = v->as_size_list();
    if (auto* v = find(m, "bench.p")) rc.bench.sweep.p = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "bench.r")) rc.bench.sweep.r = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "bench.ratio_warmup")) rc.bench.ratio_warmup = static_cast<std::size_t>(v->as_int());
    if (auto* v = find(m, "bench.ratio_iters")) rc.bench.ratio_iters = static_cast<std::size_t>(v->as_int());
    rc.bench.sweep.seed = rc.seed;
    return rc;
}

} // namespace sepdon
