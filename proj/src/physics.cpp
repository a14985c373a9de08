#include "sepdon/physics.hpp"

#include <cmath>

#include "sepdon/errors.hpp"

namespace sepdon {

namespace {

std::size_t lattice_size(std::span<const Tensor> axes) {
    std::size_t m = 1;
    for (const Tensor& ax : axes) m *= ax.size();
    return m;
}

std::vector<std::size_t> lattice_shape(std::size_t n, std::span<const Tensor> axes) {
    std::vector<std::size_t> s{n};
    for (const Tensor& ax : axes) s.push_back(ax.size());
    return s;
}

// Plane layouts per seed pattern: unseeded 1 = (v); single tangent 2 =
// (v, d); coinciding seeds 3 = (v, d, dd); distinct seeds 4 = (v, d1, d2, d12).
int pass_ncomp(int dir1, int dir2) {
    if (dir1 < 0) return 1;
    if (dir2 < 0) return 2;
    return dir1 == dir2 ? 3 : 4;
}

// Component index of the second derivative for a given seed pattern.
int second_comp(int dir1, int dir2) { return dir1 == dir2 ? 2 : 3; }

} // namespace

// ---------------------------------------------------------------------------
// ModelOnTape
// ---------------------------------------------------------------------------

ModelOnTape ModelOnTape::make(Tape& tape, const DeepONetModel& model, const Tensor& branch_in,
                              bool trainable) {
    std::vector<Tape::Id> ids;
    ids.reserve(model.params.size());
    for (const Tensor& t : model.params) ids.push_back(tape.input(t, trainable));
    return from_ids(tape, model.config, ids, branch_in);
}

ModelOnTape ModelOnTape::from_ids(Tape& tape, const DeepONetConfig& config,
                                  std::span<const Tape::Id> param_ids, const Tensor& branch_in) {
    if (branch_in.rank() != 2 || branch_in.dim(1) != config.sensors)
        throw shape_error("branch input must be [N," + std::to_string(config.sensors) + "], got " +
                          branch_in.shape_str());
    ModelOnTape m;
    m.config = &config;
    m.params.assign(param_ids.begin(), param_ids.end());

    const auto dims = config.branch_spec().layer_dims();
    Tape::Id cur = tape.input(branch_in, false);
    for (std::size_t l = 0; l < dims.size(); ++l) {
        cur = tape.affine(cur, m.params[2 * l], m.params[2 * l + 1]);
        if (l + 1 < dims.size()) cur = tape.tanh_(cur);
    }
    m.branch_out = cur;
    return m;
}

namespace {

// MLP over an already-created input node using the parameter slice starting
// at `base` in the flat id list.
Tape::Id mlp_on_tape(Tape& tape, const MlpSpec& spec, std::span<const Tape::Id> params,
                     std::size_t base, Tape::Id input) {
    const auto dims = spec.layer_dims();
    Tape::Id cur = input;
    for (std::size_t l = 0; l < dims.size(); ++l) {
        cur = tape.affine(cur, params[base + 2 * l], params[base + 2 * l + 1]);
        if (l + 1 < dims.size()) cur = tape.tanh_(cur);
    }
    return cur;
}

} // namespace

std::vector<Tape::Id> ModelOnTape::lattice_fields(Tape& tape, std::span<const Tensor> axes,
                                                  int dir1, int dir2) const {
    const DeepONetConfig& cfg = *config;
    if (axes.size() != cfg.d)
        throw shape_error("lattice_fields: expected " + std::to_string(cfg.d) + " axes");
    const std::size_t branch_tensors = 2 * cfg.branch_spec().layer_dims().size();
    const std::size_t trunk_tensors = 2 * cfg.trunk_spec().layer_dims().size();
    const Tape::Id bias_id = params.back();
    std::vector<Tape::Id> outs;

    if (cfg.variant == Variant::separable) {
        // Axes carrying a seed run with tangent planes; the rest stay real.
        std::vector<std::vector<Tape::Id>> parts(cfg.fields);
        for (std::size_t j = 0; j < cfg.d; ++j) {
            const Tensor& ax = axes[j];
            const bool seeded = static_cast<int>(j) == dir1 || static_cast<int>(j) == dir2;
            const int nc = seeded ? pass_ncomp(dir1, dir2) : 1;
            TapeValue in({ax.size(), 1}, nc);
            for (std::size_t i = 0; i < ax.size(); ++i) in.plane(0)[i] = ax[i];
            if (nc >= 2 && static_cast<int>(j) == dir1)
                for (std::size_t i = 0; i < ax.size(); ++i) in.plane(1)[i] = 1.0;
            if (nc == 4 && static_cast<int>(j) == dir2)
                for (std::size_t i = 0; i < ax.size(); ++i) in.plane(2)[i] = 1.0;
            Tape::Id emb = mlp_on_tape(tape, cfg.trunk_spec(), params,
                                       branch_tensors + j * trunk_tensors,
                                       tape.input_seeded(std::move(in)));
            for (std::size_t f = 0; f < cfg.fields; ++f) {
                Tape::Id sl = tape.slice_cols(emb, f * cfg.p * cfg.r, (f + 1) * cfg.p * cfg.r);
                parts[f].push_back(tape.reshape(sl, {ax.size(), cfg.p, cfg.r}));
            }
        }
        for (std::size_t f = 0; f < cfg.fields; ++f) {
            Tape::Id comb = tape.outer_combine(parts[f]);
            outs.push_back(tape.add_bias(tape.contract_bt(branch_out, comb), bias_id, f));
        }
        return outs;
    }

    // vanilla: one trunk pass per meshgrid point, seeds on the point columns
    std::vector<Tensor> axvec(axes.begin(), axes.end());
    Tensor points = meshgrid_points(axvec);
    const std::size_t m = points.dim(0);
    const int nc = pass_ncomp(dir1, dir2);
    TapeValue in({m, cfg.d}, nc);
    for (std::size_t e = 0; e < m * cfg.d; ++e) in.plane(0)[e] = points[e];
    if (nc >= 2 && dir1 >= 0)
        for (std::size_t row = 0; row < m; ++row) in.plane(1)[row * cfg.d + static_cast<std::size_t>(dir1)] = 1.0;
    if (nc == 4 && dir2 >= 0)
        for (std::size_t row = 0; row < m; ++row) in.plane(2)[row * cfg.d + static_cast<std::size_t>(dir2)] = 1.0;
    Tape::Id emb = mlp_on_tape(tape, cfg.trunk_spec(), params, branch_tensors,
                               tape.input_seeded(std::move(in)));
    for (std::size_t f = 0; f < cfg.fields; ++f) {
        Tape::Id feat = tape.slice_cols(emb, f * cfg.p, (f + 1) * cfg.p);
        outs.push_back(tape.add_bias(tape.contract_bt(branch_out, feat), bias_id, f));
    }
    return outs;
}

std::size_t ModelOnTape::trunk_value_passes(std::span<const Tensor> axes) const {
    if (config->variant == Variant::separable) {
        std::size_t n = 0;
        for (const Tensor& ax : axes) n += ax.size();
        return n;
    }
    return lattice_size(axes);
}

// ---------------------------------------------------------------------------
// Evaluators
// ---------------------------------------------------------------------------

ModelField::ModelField(const DeepONetModel& model, Tensor branch_in)
    : model_(model), branch_in_(std::move(branch_in)) {}

std::size_t ModelField::num_fields() const { return model_.config.fields; }
std::size_t ModelField::num_samples() const { return branch_in_.dim(0); }

std::vector<FieldComponents> ModelField::eval(std::span<const Tensor> axes, int dir1,
                                              int dir2) const {
    Tape tape;
    ModelOnTape mt = ModelOnTape::make(tape, model_, branch_in_, false);
    std::vector<Tape::Id> ids = mt.lattice_fields(tape, axes, dir1, dir2);
    std::vector<FieldComponents> out;
    const int nc = pass_ncomp(dir1, dir2);
    for (Tape::Id id : ids) {
        FieldComponents fc;
        fc.v = tape.value_tensor(id, 0);
        fc.d1 = nc >= 2 ? tape.value_tensor(id, 1) : Tensor::zeros(fc.v.shape());
        if (nc == 3) {
            fc.d2 = fc.d1; // coinciding seeds: both tangents are the same derivative
            fc.d12 = tape.value_tensor(id, 2);
        } else {
            fc.d2 = nc >= 4 ? tape.value_tensor(id, 2) : Tensor::zeros(fc.v.shape());
            fc.d12 = nc >= 4 ? tape.value_tensor(id, 3) : Tensor::zeros(fc.v.shape());
        }
        out.push_back(std::move(fc));
    }
    return out;
}

ClosedFormField::ClosedFormField(std::vector<Fn> fields) : fields_(std::move(fields)) {
    if (fields_.empty()) throw std::invalid_argument("ClosedFormField: need at least one field");
}

std::vector<FieldComponents> ClosedFormField::eval(std::span<const Tensor> axes, int dir1,
                                                   int dir2) const {
    std::vector<Tensor> axvec(axes.begin(), axes.end());
    Tensor points = meshgrid_points(axvec);
    const std::size_t m = points.dim(0), d = points.dim(1);
    std::vector<FieldComponents> out(fields_.size());
    for (auto& fc : out) {
        fc.v = Tensor::zeros({1, m});
        fc.d1 = Tensor::zeros({1, m});
        fc.d2 = Tensor::zeros({1, m});
        fc.d12 = Tensor::zeros({1, m});
    }
    std::vector<HyperDual> coords(d);
    for (std::size_t row = 0; row < m; ++row) {
        for (std::size_t a = 0; a < d; ++a) {
            coords[a] = HyperDual(points.at2(row, a),
                                  static_cast<int>(a) == dir1 ? 1.0 : 0.0,
                                  static_cast<int>(a) == dir2 ? 1.0 : 0.0, 0.0);
        }
        for (std::size_t f = 0; f < fields_.size(); ++f) {
            HyperDual val = fields_[f](coords);
            out[f].v[row] = val.v;
            out[f].d1[row] = val.d1;
            out[f].d2[row] = val.d2;
            out[f].d12[row] = val.d12;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Residual operators (plain tensors)
// ---------------------------------------------------------------------------

Tensor burgers_residual(const FieldEvaluator& field, const Tensor& x_axis, const Tensor& t_axis,
                        double nu) {
    std::vector<Tensor> axes{x_axis, t_axis};
    auto pass_x = field.eval(axes, 0, 0);
    auto pass_t = field.eval(axes, 1, -1);
    const Tensor& s = pass_x[0].v;
    const Tensor& sx = pass_x[0].d1;
    const Tensor& sxx = pass_x[0].d12;
    const Tensor& st = pass_t[0].d1;
    Tensor r(lattice_shape(field.num_samples(), axes));
    for (std::size_t e = 0; e < r.size(); ++e) {
        const double v = st[e] + s[e] * sx[e] - nu * sxx[e];
        if (!std::isfinite(v)) throw numeric_error("burgers_residual: non-finite value");
        r[e] = v;
    }
    return r;
}

std::pair<Tensor, Tensor> biot_residuals(const FieldEvaluator& field, const Tensor& z_axis,
                                         const Tensor& t_axis, double lam2mu, double k_over_rhog) {
    if (field.num_fields() != 2)
        throw shape_error("biot_residuals: evaluator must expose (u, p) fields");
    std::vector<Tensor> axes{z_axis, t_axis};
    auto pass_zz = field.eval(axes, 0, 0); // u,zz and p,z / p,zz
    auto pass_tz = field.eval(axes, 1, 0); // u,tz in the cross term
    Tensor r1(lattice_shape(field.num_samples(), axes));
    Tensor r2(lattice_shape(field.num_samples(), axes));
    const Tensor& u_zz = pass_zz[0].d12;
    const Tensor& p_z = pass_zz[1].d1;
    const Tensor& p_zz = pass_zz[1].d12;
    const Tensor& u_tz = pass_tz[0].d12;
    for (std::size_t e = 0; e < r1.size(); ++e) {
        r1[e] = lam2mu * u_zz[e] - p_z[e];
        r2[e] = u_tz[e] - k_over_rhog * p_zz[e];
        if (!std::isfinite(r1[e]) || !std::isfinite(r2[e]))
            throw numeric_error("biot_residuals: non-finite value");
    }
    return {std::move(r1), std::move(r2)};
}

Tensor heat_residual(const FieldEvaluator& field, const Tensor& x_axis, const Tensor& y_axis,
                     const Tensor& t_axis, const Tensor& c_axis) {
    std::vector<Tensor> axes{x_axis, y_axis, t_axis, c_axis};
    auto pass_xx = field.eval(axes, 0, 0);
    auto pass_yy = field.eval(axes, 1, 1);
    auto pass_t = field.eval(axes, 2, -1);
    const std::size_t nc = c_axis.size();
    Tensor r(lattice_shape(field.num_samples(), axes));
    const std::size_t lattice = lattice_size(axes);
    for (std::size_t s = 0; s < field.num_samples(); ++s)
        for (std::size_t m = 0; m < lattice; ++m) {
            const double c = c_axis[m % nc]; // c is the fastest axis
            const std::size_t e = s * lattice + m;
            const double v = pass_t[0].d1[e] - c * c * (pass_xx[0].d12[e] + pass_yy[0].d12[e]);
            if (!std::isfinite(v)) throw numeric_error("heat_residual: non-finite value");
            r[e] = v;
        }
    return r;
}

// ---------------------------------------------------------------------------
// Plain losses
// ---------------------------------------------------------------------------

namespace {

double mse(const Tensor& t) {
    double acc = 0.0;
    for (std::size_t e = 0; e < t.size(); ++e) acc += t[e] * t[e];
    return acc / static_cast<double>(t.size());
}

} // namespace

ProblemAxes ProblemAxes::build(const ProblemSpec& problem, Rng& run_rng) {
    ProblemAxes a;
    a.residual = build_axes(problem, AxisRole::residual, run_rng);
    a.ic = build_axes(problem, AxisRole::ic, run_rng);
    if (problem.kind == ProblemKind::heat)
        a.bc_sets = build_axes_sets(problem, AxisRole::bc, run_rng);
    else
        a.bc = build_axes(problem, AxisRole::bc, run_rng);
    return a;
}

double total_loss(const LossBreakdown& t) {
    return t.weight_physics * t.physics + t.weight_bc * t.bc + t.weight_ic * t.ic;
}

LossBreakdown burgers_losses(const FieldEvaluator& field, const Tensor& u_batch,
                             const ProblemSpec& problem, const ProblemAxes& axes) {
    if (u_batch.dim(0) != field.num_samples())
        throw shape_error("burgers_losses: batch size mismatch");
    LossBreakdown out;
    out.weight_physics = problem.weight_physics;
    out.weight_bc = problem.weight_bc;
    out.weight_ic = problem.weight_ic;

    out.physics = mse(burgers_residual(field, axes.residual[0], axes.residual[1], problem.nu));

    auto bc = field.eval(axes.bc, 0, -1);
    const std::size_t nt = axes.bc[1].size();
    const std::size_t n = field.num_samples();
    double acc_v = 0.0, acc_d = 0.0;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < nt; ++j) {
            const double dv = bc[0].v[s * 2 * nt + j] - bc[0].v[s * 2 * nt + nt + j];
            const double dd = bc[0].d1[s * 2 * nt + j] - bc[0].d1[s * 2 * nt + nt + j];
            acc_v += dv * dv;
            acc_d += dd * dd;
        }
    out.bc = acc_v / static_cast<double>(n * nt) + acc_d / static_cast<double>(n * nt);

    auto ic = field.eval(axes.ic, -1, -1);
    const std::size_t nx = axes.ic[0].size();
    if (u_batch.dim(1) != nx) throw shape_error("burgers_losses: sensor grid mismatch");
    double acc_ic = 0.0;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < nx; ++i) {
            const double d = ic[0].v[s * nx + i] - u_batch.at2(s, i);
            acc_ic += d * d;
        }
    out.ic = acc_ic / static_cast<double>(n * nx);
    out.total = total_loss(out);
    return out;
}

LossBreakdown biot_losses(const FieldEvaluator& field, const Tensor& f_batch,
                          const Tensor& g_batch, const ProblemSpec& problem,
                          const ProblemAxes& axes) {
    const std::size_t n = field.num_samples();
    if (f_batch.dim(0) != n || g_batch.dim(0) != n)
        throw shape_error("biot_losses: batch size mismatch");
    if (g_batch.dim(1) != axes.bc[1].size())
        throw std::invalid_argument("biot_losses: boundary reference grid mismatch");
    LossBreakdown out;
    out.weight_physics = problem.weight_physics;
    out.weight_bc = problem.weight_bc;
    out.weight_ic = problem.weight_ic;

    auto [r1, r2] = biot_residuals(field, axes.residual[0], axes.residual[1], problem.lam2mu,
                                   problem.k_over_rhog);
    out.physics = mse(r1) + mse(r2);

    auto bc = field.eval(axes.bc, 0, -1);
    const std::size_t nt = axes.bc[1].size();
    double acc_u0 = 0.0, acc_u1 = 0.0, acc_p0 = 0.0, acc_pz1 = 0.0;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < nt; ++j) {
            const double u0 = bc[0].v[s * 2 * nt + j] - g_batch.at2(s, j);
            const double u1 = bc[0].v[s * 2 * nt + nt + j];
            const double p0 = bc[1].v[s * 2 * nt + j];
            const double pz1 = bc[1].d1[s * 2 * nt + nt + j];
            acc_u0 += u0 * u0;
            acc_u1 += u1 * u1;
            acc_p0 += p0 * p0;
            acc_pz1 += pz1 * pz1;
        }
    const double denom = static_cast<double>(n * nt);
    out.bc = (acc_u0 + acc_u1 + acc_p0 + acc_pz1) / denom;

    auto ic = field.eval(axes.ic, -1, -1);
    const std::size_t nz = axes.ic[0].size();
    double acc_u = 0.0, acc_p = 0.0;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < nz; ++i) {
            const double uv = ic[0].v[s * nz + i];
            const double pv = ic[1].v[s * nz + i] - f_batch.at2(s, 0);
            acc_u += uv * uv;
            acc_p += pv * pv;
        }
    out.ic = (acc_u + acc_p) / static_cast<double>(n * nz);
    out.total = total_loss(out);
    return out;
}

LossBreakdown heat_losses(const FieldEvaluator& field, const Tensor& t0_batch,
                          const ProblemSpec& problem, const ProblemAxes& axes) {
    const std::size_t n = field.num_samples();
    if (t0_batch.dim(0) != n) throw shape_error("heat_losses: batch size mismatch");
    LossBreakdown out;
    out.weight_physics = problem.weight_physics;
    out.weight_bc = problem.weight_bc;
    out.weight_ic = problem.weight_ic;

    out.physics = mse(heat_residual(field, axes.residual[0], axes.residual[1], axes.residual[2],
                                    axes.residual[3]));

    auto ic = field.eval(axes.ic, -1, -1);
    const std::size_t icm = ic[0].v.size() / n;
    double acc_ic = 0.0;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t m = 0; m < icm; ++m) {
            const double d = ic[0].v[s * icm + m] - t0_batch[s];
            acc_ic += d * d;
        }
    out.ic = acc_ic / static_cast<double>(n * icm);

    double acc_bc = 0.0;
    for (const auto& edge : axes.bc_sets) {
        auto bc = field.eval(edge, -1, -1);
        acc_bc += mse(bc[0].v);
    }
    out.bc = acc_bc / static_cast<double>(axes.bc_sets.size());
    out.total = total_loss(out);
    return out;
}

// ---------------------------------------------------------------------------
// Tape loss builders
// ---------------------------------------------------------------------------

TapeLoss build_burgers_loss(Tape& tape, const ModelOnTape& model, const Tensor& u_batch,
                            const ProblemSpec& problem, const ProblemAxes& axes) {
    TapeLoss out;
    // residual: one (x,x) pass for s, s_x, s_xx; one (t) pass for s_t
    auto fx = model.lattice_fields(tape, axes.residual, 0, 0);
    auto ft = model.lattice_fields(tape, axes.residual, 1, -1);
    Tape::Id s = tape.extract(fx[0], 0);
    Tape::Id sx = tape.extract(fx[0], 1);
    Tape::Id sxx = tape.extract(fx[0], second_comp(0, 0));
    Tape::Id st = tape.extract(ft[0], 1);
    Tape::Id resid = tape.sub(tape.add(st, tape.mul(s, sx)), tape.scale(sxx, problem.nu));
    out.physics = tape.mean_sq(resid);

    // periodic boundary: match value and slope across x=0 / x=1
    auto fb = model.lattice_fields(tape, axes.bc, 0, -1);
    const std::size_t nt = axes.bc[1].size();
    Tape::Id bv = tape.extract(fb[0], 0);
    Tape::Id bd = tape.extract(fb[0], 1);
    Tape::Id v_gap = tape.sub(tape.slice_cols(bv, 0, nt), tape.slice_cols(bv, nt, 2 * nt));
    Tape::Id d_gap = tape.sub(tape.slice_cols(bd, 0, nt), tape.slice_cols(bd, nt, 2 * nt));
    std::vector<Tape::Id> bc_terms{tape.mean_sq(v_gap), tape.mean_sq(d_gap)};
    std::vector<double> ones{1.0, 1.0};
    out.bc = tape.lincomb(bc_terms, ones);

    // initial condition against the branch input samples
    auto fi = model.lattice_fields(tape, axes.ic, -1, -1);
    Tape::Id iv = tape.extract(fi[0], 0);
    Tape::Id target = tape.input(u_batch, false);
    out.ic = tape.mean_sq(tape.sub(iv, target));

    std::vector<Tape::Id> terms{out.physics, out.bc, out.ic};
    std::vector<double> w{problem.weight_physics, problem.weight_bc, problem.weight_ic};
    out.total = tape.lincomb(terms, w);
    out.trunk_passes = model.trunk_value_passes(axes.residual) + model.trunk_value_passes(axes.bc) +
                       model.trunk_value_passes(axes.ic);
    return out;
}

TapeLoss build_biot_loss(Tape& tape, const ModelOnTape& model, const Tensor& f_batch,
                         const Tensor& g_batch, const ProblemSpec& problem,
                         const ProblemAxes& axes) {
    TapeLoss out;
    const std::size_t n = f_batch.dim(0);

    auto fzz = model.lattice_fields(tape, axes.residual, 0, 0);
    auto ftz = model.lattice_fields(tape, axes.residual, 1, 0);
    Tape::Id u_zz = tape.extract(fzz[0], second_comp(0, 0));
    Tape::Id p_z = tape.extract(fzz[1], 1);
    Tape::Id p_zz = tape.extract(fzz[1], second_comp(0, 0));
    Tape::Id u_tz = tape.extract(ftz[0], second_comp(1, 0));
    Tape::Id r1 = tape.sub(tape.scale(u_zz, problem.lam2mu), p_z);
    Tape::Id r2 = tape.sub(u_tz, tape.scale(p_zz, problem.k_over_rhog));
    std::vector<Tape::Id> phys_terms{tape.mean_sq(r1), tape.mean_sq(r2)};
    std::vector<double> ones2{1.0, 1.0};
    out.physics = tape.lincomb(phys_terms, ones2);

    auto fbc = model.lattice_fields(tape, axes.bc, 0, -1);
    const std::size_t nt = axes.bc[1].size();
    Tape::Id uv = tape.extract(fbc[0], 0);
    Tape::Id pv = tape.extract(fbc[1], 0);
    Tape::Id pd = tape.extract(fbc[1], 1);
    Tape::Id gt = tape.input(g_batch, false);
    Tape::Id u0_gap = tape.sub(tape.slice_cols(uv, 0, nt), gt);
    std::vector<Tape::Id> bc_terms{
        tape.mean_sq(u0_gap),
        tape.mean_sq(tape.slice_cols(uv, nt, 2 * nt)),
        tape.mean_sq(tape.slice_cols(pv, 0, nt)),
        tape.mean_sq(tape.slice_cols(pd, nt, 2 * nt)),
    };
    std::vector<double> ones4(4, 1.0);
    out.bc = tape.lincomb(bc_terms, ones4);

    auto fic = model.lattice_fields(tape, axes.ic, -1, -1);
    Tape::Id uic = tape.extract(fic[0], 0);
    Tape::Id pic = tape.extract(fic[1], 0);
    Tensor f0({n});
    for (std::size_t s = 0; s < n; ++s) f0[s] = f_batch.at2(s, 0);
    Tape::Id f0_id = tape.input(f0, false);
    std::vector<Tape::Id> ic_terms{tape.mean_sq(uic),
                                   tape.mean_sq(tape.colbcast_sub(pic, f0_id))};
    out.ic = tape.lincomb(ic_terms, ones2);

    std::vector<Tape::Id> terms{out.physics, out.bc, out.ic};
    std::vector<double> w{problem.weight_physics, problem.weight_bc, problem.weight_ic};
    out.total = tape.lincomb(terms, w);
    out.trunk_passes = model.trunk_value_passes(axes.residual) + model.trunk_value_passes(axes.bc) +
                       model.trunk_value_passes(axes.ic);
    return out;
}

TapeLoss build_heat_loss(Tape& tape, const ModelOnTape& model, const Tensor& t0_batch,
                         const ProblemSpec& problem, const ProblemAxes& axes) {
    TapeLoss out;
    auto fxx = model.lattice_fields(tape, axes.residual, 0, 0);
    auto fyy = model.lattice_fields(tape, axes.residual, 1, 1);
    auto ft = model.lattice_fields(tape, axes.residual, 2, -1);
    Tape::Id t_xx = tape.extract(fxx[0], second_comp(0, 0));
    Tape::Id t_yy = tape.extract(fyy[0], second_comp(1, 1));
    Tape::Id t_t = tape.extract(ft[0], 1);

    const std::size_t lattice = lattice_size(axes.residual);
    const Tensor& c_ax = axes.residual[3];
    Tensor csq({lattice});
    for (std::size_t m = 0; m < lattice; ++m) {
        const double c = c_ax[m % c_ax.size()];
        csq[m] = c * c;
    }
    Tape::Id csq_id = tape.input(csq, false);
    Tape::Id laplace = tape.rowbcast_mul(tape.add(t_xx, t_yy), csq_id);
    out.physics = tape.mean_sq(tape.sub(t_t, laplace));

    auto fic = model.lattice_fields(tape, axes.ic, -1, -1);
    Tensor t0col({t0_batch.dim(0)});
    for (std::size_t s = 0; s < t0col.size(); ++s) t0col[s] = t0_batch[s];
    Tape::Id t0_id = tape.input(t0col, false);
    out.ic = tape.mean_sq(tape.colbcast_sub(tape.extract(fic[0], 0), t0_id));

    std::vector<Tape::Id> edge_terms;
    for (const auto& edge : axes.bc_sets) {
        auto fe = model.lattice_fields(tape, edge, -1, -1);
        edge_terms.push_back(tape.mean_sq(tape.extract(fe[0], 0)));
    }
    std::vector<double> edge_w(edge_terms.size(), 1.0 / static_cast<double>(edge_terms.size()));
    out.bc = tape.lincomb(edge_terms, edge_w);

    std::vector<Tape::Id> terms{out.physics, out.bc, out.ic};
    std::vector<double> w{problem.weight_physics, problem.weight_bc, problem.weight_ic};
    out.total = tape.lincomb(terms, w);
    out.trunk_passes = model.trunk_value_passes(axes.residual) + model.trunk_value_passes(axes.ic);
    for (const auto& edge : axes.bc_sets) out.trunk_passes += model.trunk_value_passes(edge);
    return out;
}

TapeLoss build_problem_loss(Tape& tape, const ModelOnTape& model, const Tensor& branch_batch,
                            const Tensor* g_batch, const ProblemSpec& problem,
                            const ProblemAxes& axes) {
    switch (problem.kind) {
        case ProblemKind::burgers:
            return build_burgers_loss(tape, model, branch_batch, problem, axes);
        case ProblemKind::biot:
            if (!g_batch)
                throw std::invalid_argument("biot loss requires the boundary reference batch");
            return build_biot_loss(tape, model, branch_batch, *g_batch, problem, axes);
        case ProblemKind::heat:
            return build_heat_loss(tape, model, branch_batch, problem, axes);
    }
    throw std::invalid_argument("unknown problem kind");
}

} // namespace sepdon
