#include "sepdon/model.hpp"

#include <cmath>
#include <json.hpp>

#include "io_util.hpp"
#include "kernels.hpp"
#include "sepdon/errors.hpp"
#include "sepdon/mathutil.hpp"
#include "sepdon/rng.hpp"

namespace sepdon {

using nlohmann::json;

std::vector<std::pair<std::size_t, std::size_t>> MlpSpec::layer_dims() const {
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    std::size_t prev = input_dim;
    for (std::size_t h : hidden) {
        dims.emplace_back(prev, h);
        prev = h;
    }
    dims.emplace_back(prev, output_dim);
    return dims;
}

std::size_t MlpSpec::param_count() const {
    std::size_t n = 0;
    for (auto [fi, fo] : layer_dims()) n += fi * fo + fo;
    return n;
}

MlpSpec DeepONetConfig::branch_spec() const { return {sensors, branch_hidden, p}; }

MlpSpec DeepONetConfig::trunk_spec() const {
    if (variant == Variant::vanilla) return {d, trunk_hidden, p * fields};
    return {1, trunk_hidden, p * r * fields};
}

void DeepONetConfig::validate() const {
    if (d < 1 || p < 1 || fields < 1 || sensors < 1) throw usage_error("deeponet config: dims must be >= 1");
    if (variant == Variant::separable && r < 1) throw usage_error("deeponet config: rank must be >= 1");
    for (std::size_t h : branch_hidden)
        if (h < 1) throw usage_error("deeponet config: zero-width branch layer");
    for (std::size_t h : trunk_hidden)
        if (h < 1) throw usage_error("deeponet config: zero-width trunk layer");
}

std::size_t count_params(const DeepONetConfig& config) {
    config.validate();
    return config.branch_spec().param_count() +
           config.num_trunks() * config.trunk_spec().param_count() + config.fields;
}

std::size_t DeepONetModel::trunk_tensor_base(std::size_t trunk_index) const {
    const std::size_t branch_tensors = 2 * config.branch_spec().layer_dims().size();
    const std::size_t trunk_tensors = 2 * config.trunk_spec().layer_dims().size();
    return branch_tensors + trunk_index * trunk_tensors;
}

std::span<const Tensor> DeepONetModel::branch_params() const {
    return {params.data(), 2 * config.branch_spec().layer_dims().size()};
}

std::span<const Tensor> DeepONetModel::trunk_params(std::size_t trunk_index) const {
    return {params.data() + trunk_tensor_base(trunk_index),
            2 * config.trunk_spec().layer_dims().size()};
}

namespace {

void init_mlp(std::vector<Tensor>& out, const MlpSpec& spec, Rng rng) {
    for (auto [fan_in, fan_out] : spec.layer_dims()) {
        Tensor w({fan_out, fan_in});
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.next_uniform(-bound, bound);
        out.push_back(std::move(w));
        out.push_back(Tensor::zeros({fan_out}));
    }
}

} // namespace

DeepONetModel init_params(const DeepONetConfig& config, std::uint64_t seed) {
    config.validate();
    DeepONetModel m;
    m.config = config;
    Rng root(seed);
    init_mlp(m.params, config.branch_spec(), root.split("init/branch"));
    for (std::size_t j = 0; j < config.num_trunks(); ++j)
        init_mlp(m.params, config.trunk_spec(), root.split("init/trunk").split(j));
    m.params.push_back(Tensor::zeros({config.fields}));
    return m;
}

Tensor mlp_forward(const MlpSpec& spec, std::span<const Tensor> layer_params, const Tensor& x) {
    if (x.rank() != 2 || x.dim(1) != spec.input_dim)
        throw shape_error("mlp_forward: input must be [batch," + std::to_string(spec.input_dim) +
                          "], got " + x.shape_str());
    auto dims = spec.layer_dims();
    if (layer_params.size() != 2 * dims.size()) throw shape_error("mlp_forward: wrong parameter count");
    const std::size_t rows = x.dim(0);
    Tensor cur = x;
    for (std::size_t l = 0; l < dims.size(); ++l) {
        auto [fan_in, fan_out] = dims[l];
        const Tensor& w = layer_params[2 * l];
        const Tensor& b = layer_params[2 * l + 1];
        if (w.shape() != std::vector<std::size_t>{fan_out, fan_in} || b.size() != fan_out)
            throw shape_error("mlp_forward: parameter tensor shape mismatch at layer " + std::to_string(l));
        Tensor next({rows, fan_out});
        std::vector<double> wt = detail::transpose(w.data(), fan_out, fan_in);
        detail::matmul_ikj(next.data(), cur.data(), wt.data(), rows, fan_in, fan_out);
        for (std::size_t rr = 0; rr < rows; ++rr)
            for (std::size_t j = 0; j < fan_out; ++j) next[rr * fan_out + j] += b[j];
        if (l + 1 < dims.size())
            for (std::size_t i = 0; i < next.size(); ++i) next[i] = std::tanh(next[i]);
        cur = std::move(next);
    }
    return cur;
}

SeparableTrunkResult trunk_forward_separable(const DeepONetModel& model,
                                             std::span<const Tensor> axes) {
    const DeepONetConfig& cfg = model.config;
    if (cfg.variant != Variant::separable)
        throw shape_error("trunk_forward_separable: model is not separable");
    if (axes.size() != cfg.d) throw shape_error("trunk_forward_separable: expected " +
                                                std::to_string(cfg.d) + " axes, got " +
                                                std::to_string(axes.size()));
    SeparableTrunkResult res;
    const MlpSpec tspec = cfg.trunk_spec();
    // Per-axis embeddings reshaped to [n_j, p, r] per field, then recombined.
    std::vector<std::vector<Tensor>> parts_per_field(cfg.fields);
    for (std::size_t j = 0; j < cfg.d; ++j) {
        const Tensor& ax = axes[j];
        if (ax.rank() != 1 || ax.size() == 0)
            throw shape_error("trunk_forward_separable: axis must be a nonempty vector");
        const std::size_t nj = ax.size();
        Tensor in({nj, 1}, std::vector<double>(ax.values().begin(), ax.values().end()));
        Tensor emb = mlp_forward(tspec, model.trunk_params(j), in); // [nj, p*r*F]
        res.mlp_passes += nj;
        for (std::size_t f = 0; f < cfg.fields; ++f) {
            Tensor part({nj, cfg.p, cfg.r});
            const std::size_t stride = cfg.p * cfg.r * cfg.fields;
            for (std::size_t a = 0; a < nj; ++a)
                for (std::size_t k = 0; k < cfg.p; ++k)
                    for (std::size_t i = 0; i < cfg.r; ++i)
                        part[(a * cfg.p + k) * cfg.r + i] =
                            emb[a * stride + f * cfg.p * cfg.r + k * cfg.r + i];
            parts_per_field[f].push_back(std::move(part));
        }
    }
    for (std::size_t f = 0; f < cfg.fields; ++f)
        res.fields.push_back(outer_combine(parts_per_field[f]));
    return res;
}

VanillaTrunkResult trunk_forward_vanilla(const DeepONetModel& model, const Tensor& points) {
    const DeepONetConfig& cfg = model.config;
    if (points.rank() != 2 || points.dim(1) != cfg.d)
        throw shape_error("trunk_forward_vanilla: points must be [M," + std::to_string(cfg.d) + "]");
    VanillaTrunkResult res;
    const std::size_t m = points.dim(0);
    if (cfg.variant == Variant::vanilla) {
        Tensor emb = mlp_forward(cfg.trunk_spec(), model.trunk_params(0), points); // [M, p*F]
        res.mlp_passes = m;
        for (std::size_t f = 0; f < cfg.fields; ++f) {
            Tensor field({m, cfg.p});
            for (std::size_t row = 0; row < m; ++row)
                for (std::size_t k = 0; k < cfg.p; ++k)
                    field[row * cfg.p + k] = emb[row * cfg.p * cfg.fields + f * cfg.p + k];
            res.fields.push_back(std::move(field));
        }
        return res;
    }
    // Separable parameters evaluated pointwise: every sub-trunk sees each
    // point's own coordinate, features recombined by the product-sum rule.
    const MlpSpec tspec = cfg.trunk_spec();
    std::vector<Tensor> embs; // per sub-trunk [M, p*r*F]
    for (std::size_t j = 0; j < cfg.d; ++j) {
        Tensor col({m, 1});
        for (std::size_t row = 0; row < m; ++row) col[row] = points.at2(row, j);
        embs.push_back(mlp_forward(tspec, model.trunk_params(j), col));
        res.mlp_passes += m;
    }
    const std::size_t stride = cfg.p * cfg.r * cfg.fields;
    for (std::size_t f = 0; f < cfg.fields; ++f) {
        Tensor field({m, cfg.p});
        for (std::size_t row = 0; row < m; ++row)
            for (std::size_t k = 0; k < cfg.p; ++k) {
                double acc = 0.0;
                for (std::size_t i = 0; i < cfg.r; ++i) {
                    double prod = 1.0;
                    for (std::size_t j = 0; j < cfg.d; ++j)
                        prod *= embs[j][row * stride + f * cfg.p * cfg.r + k * cfg.r + i];
                    acc += prod;
                }
                field[row * cfg.p + k] = acc;
            }
        res.fields.push_back(std::move(field));
    }
    return res;
}

namespace {

Tensor branch_forward(const DeepONetModel& model, const Tensor& branch_in) {
    const DeepONetConfig& cfg = model.config;
    if (branch_in.rank() != 2 || branch_in.dim(1) != cfg.sensors)
        throw shape_error("deeponet_eval: branch input must be [N," + std::to_string(cfg.sensors) +
                          "], got " + branch_in.shape_str());
    return mlp_forward(cfg.branch_spec(), model.branch_params(), branch_in);
}

} // namespace

DeepONetEvalResult deeponet_eval(const DeepONetModel& model, const Tensor& branch_in,
                                 std::span<const Tensor> axes) {
    DeepONetEvalResult res;
    Tensor branch = branch_forward(model, branch_in);
    res.branch_passes = branch_in.dim(0);
    const Tensor& biases = model.output_biases();
    if (model.config.variant == Variant::separable) {
        SeparableTrunkResult trunk = trunk_forward_separable(model, axes);
        res.trunk_passes = trunk.mlp_passes;
        for (std::size_t f = 0; f < model.config.fields; ++f)
            res.fields.push_back(branch_trunk_contract(branch, trunk.fields[f], biases[f]));
    } else {
        std::vector<Tensor> axvec(axes.begin(), axes.end());
        Tensor points = meshgrid_points(axvec);
        VanillaTrunkResult trunk = trunk_forward_vanilla(model, points);
        res.trunk_passes = trunk.mlp_passes;
        std::vector<std::size_t> lattice_shape;
        for (const Tensor& ax : axes) lattice_shape.push_back(ax.size());
        for (std::size_t f = 0; f < model.config.fields; ++f) {
            Tensor feat = trunk.fields[f]; // [M, p]
            std::vector<std::size_t> tshape = lattice_shape;
            tshape.push_back(model.config.p);
            res.fields.push_back(branch_trunk_contract(branch, feat.reshaped(tshape), biases[f]));
        }
    }
    return res;
}

DeepONetEvalResult deeponet_eval_points(const DeepONetModel& model, const Tensor& branch_in,
                                        const Tensor& points) {
    DeepONetEvalResult res;
    Tensor branch = branch_forward(model, branch_in);
    res.branch_passes = branch_in.dim(0);
    VanillaTrunkResult trunk = trunk_forward_vanilla(model, points);
    res.trunk_passes = trunk.mlp_passes;
    const Tensor& biases = model.output_biases();
    for (std::size_t f = 0; f < model.config.fields; ++f)
        res.fields.push_back(branch_trunk_contract(branch, trunk.fields[f], biases[f]));
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoint io
// ---------------------------------------------------------------------------

namespace {

json config_to_json(const DeepONetConfig& c) {
    return json{{"variant", c.variant == Variant::separable ? "separable" : "vanilla"},
                {"d", c.d},
                {"p", c.p},
                {"r", c.r},
                {"fields", c.fields},
                {"sensors", c.sensors},
                {"branch_hidden", c.branch_hidden},
                {"trunk_hidden", c.trunk_hidden}};
}

DeepONetConfig config_from_json(const json& j) {
    DeepONetConfig c;
    std::string v = j.at("variant").get<std::string>();
    if (v == "separable") c.variant = Variant::separable;
    else if (v == "vanilla") c.variant = Variant::vanilla;
    else throw format_error("checkpoint: unknown variant '" + v + "'");
    c.d = j.at("d").get<std::size_t>();
    c.p = j.at("p").get<std::size_t>();
    c.r = j.at("r").get<std::size_t>();
    c.fields = j.at("fields").get<std::size_t>();
    c.sensors = j.at("sensors").get<std::size_t>();
    c.branch_hidden = j.at("branch_hidden").get<std::vector<std::size_t>>();
    c.trunk_hidden = j.at("trunk_hidden").get<std::vector<std::size_t>>();
    return c;
}

char hexdigit(unsigned v) { return v < 10 ? static_cast<char>('0' + v) : static_cast<char>('a' + v - 10); }

std::string hex64(std::uint64_t v) {
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = hexdigit(static_cast<unsigned>(v & 0xf));
        v >>= 4;
    }
    return s;
}

} // namespace

void save_checkpoint(const DeepONetModel& model, const std::string& path_base,
                     std::uint64_t seed, std::uint64_t step) {
    std::vector<unsigned char> blob;
    for (const Tensor& t : model.params) detail::append_f64_le(blob, t.data(), t.size());
    const std::uint64_t checksum = fnv1a64(blob.data(), blob.size());
    json manifest{{"format", "sepdon-checkpoint"},
                  {"version", 1},
                  {"config", config_to_json(model.config)},
                  {"seed", seed},
                  {"step", step},
                  {"param_count", count_params(model.config)},
                  {"total_bytes", blob.size()},
                  {"checksum_fnv1a64", hex64(checksum)}};
    detail::write_file(path_base + ".bin", blob.data(), blob.size());
    std::string text = manifest.dump(2);
    detail::write_file(path_base + ".json", text.data(), text.size());
}

Checkpoint load_checkpoint(const std::string& path_base) {
    json manifest;
    try {
        manifest = json::parse(detail::read_text_file(path_base + ".json"));
    } catch (const json::parse_error& e) {
        throw format_error("checkpoint manifest is not valid json: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "sepdon-checkpoint")
        throw format_error("not a checkpoint manifest: " + path_base + ".json");
    if (manifest.value("version", 0) != 1)
        throw format_error("unsupported checkpoint version");
    Checkpoint ck;
    ck.model.config = config_from_json(manifest.at("config"));
    ck.seed = manifest.at("seed").get<std::uint64_t>();
    ck.step = manifest.at("step").get<std::uint64_t>();

    std::vector<unsigned char> blob = detail::read_file(path_base + ".bin");
    const std::size_t expect = manifest.at("total_bytes").get<std::size_t>();
    if (blob.size() < expect) throw corruption_error("checkpoint blob is truncated");
    if (blob.size() != expect) throw format_error("checkpoint blob larger than manifest records");
    if (hex64(fnv1a64(blob.data(), blob.size())) != manifest.at("checksum_fnv1a64").get<std::string>())
        throw corruption_error("checkpoint blob checksum mismatch");
    if (expect != count_params(ck.model.config) * 8)
        throw format_error("checkpoint parameter count does not match config");

    DeepONetModel proto = init_params(ck.model.config, 0);
    std::size_t offset = 0;
    for (Tensor& t : proto.params) {
        detail::read_f64_le(blob.data() + offset, t.data(), t.size());
        offset += t.size() * 8;
    }
    ck.model.params = std::move(proto.params);
    return ck;
}

} // namespace sepdon
