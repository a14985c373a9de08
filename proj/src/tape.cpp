#include "sepdon/tape.hpp"

#include <cmath>
#include <cstring>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "sepdon/errors.hpp"
#include "sepdon/parallel.hpp"

#include "kernels.hpp"

namespace sepdon {

namespace {

// The training loop churns multi-megabyte activation buffers every step.
// Keep them on the heap instead of round-tripping through mmap/munmap, which
// costs a page-fault pass per epoch.
struct MallocTuning {
    MallocTuning() {
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    }
};
const MallocTuning malloc_tuning;

} // namespace

TapeValue::TapeValue(std::vector<std::size_t> s, int nc) : shape(std::move(s)), ncomp(nc) {
    buf.assign(static_cast<std::size_t>(nc) * shape_numel(shape), 0.0);
}

TapeValue TapeValue::uninit(std::vector<std::size_t> s, int nc) {
    TapeValue v;
    v.shape = std::move(s);
    v.ncomp = nc;
    v.buf.resize(static_cast<std::size_t>(nc) * shape_numel(v.shape));
    return v;
}

std::size_t TapeValue::numel() const { return shape_numel(shape); }

namespace {

struct CPlanes {
    const double* p[4] = {nullptr, nullptr, nullptr, nullptr};
};
struct MPlanes {
    double* p[4] = {nullptr, nullptr, nullptr, nullptr};
};

CPlanes cplanes(const TapeValue& v) {
    CPlanes c;
    for (int i = 0; i < v.ncomp; ++i) c.p[i] = v.plane(i);
    return c;
}
MPlanes mplanes(TapeValue& v) {
    MPlanes m;
    for (int i = 0; i < v.ncomp; ++i) m.p[i] = v.plane(i);
    return m;
}

// o[io] = a[ia] (*) b[ib]: truncated-algebra product with compile-time plane
// counts. Counts 1/2/4 are the hyper-dual layout (value, d1, d2, d12); count 3
// is the pure second-order layout (value, d, dd) used when both tangent seeds
// coincide, with the product rule dd <- a0*dd_b + 2*d_a*d_b + dd_a*b0.
template <int NCA, int NCB>
inline void hd_mul_elem(const MPlanes& o, std::size_t io, const CPlanes& a, std::size_t ia,
                        const CPlanes& b, std::size_t ib) {
    constexpr int NCO = NCA > NCB ? NCA : NCB;
    constexpr bool PURE = (NCA == 3 || NCB == 3);
    const double a0 = a.p[0][ia], b0 = b.p[0][ib];
    o.p[0][io] = a0 * b0;
    if constexpr (NCO >= 2) {
        double t1 = 0.0;
        if constexpr (NCB >= 2) t1 += a0 * b.p[1][ib];
        if constexpr (NCA >= 2) t1 += a.p[1][ia] * b0;
        o.p[1][io] = t1;
    }
    if constexpr (PURE && NCO >= 3) {
        double t2 = 0.0;
        if constexpr (NCB >= 3) t2 += a0 * b.p[2][ib];
        if constexpr (NCA >= 2 && NCB >= 2) t2 += 2.0 * a.p[1][ia] * b.p[1][ib];
        if constexpr (NCA >= 3) t2 += a.p[2][ia] * b0;
        o.p[2][io] = t2;
    }
    if constexpr (!PURE && NCO >= 4) {
        double t2 = 0.0, t3 = 0.0;
        if constexpr (NCB >= 4) t2 += a0 * b.p[2][ib];
        if constexpr (NCA >= 4) t2 += a.p[2][ia] * b0;
        if constexpr (NCB >= 4) t3 += a0 * b.p[3][ib];
        if constexpr (NCA >= 2 && NCB >= 4) t3 += a.p[1][ia] * b.p[2][ib];
        if constexpr (NCA >= 4 && NCB >= 2) t3 += a.p[2][ia] * b.p[1][ib];
        if constexpr (NCA >= 4) t3 += a.p[3][ia] * b0;
        o.p[2][io] = t2;
        o.p[3][io] = t3;
    }
}

// For c = a (*) b, accumulate abar += (dc/da)^T cbar. a carries NCA planes
// (written), b carries NCB; cbar carries max(NCA,NCB).
template <int NCA, int NCB>
inline void hd_tmul_elem_acc(const MPlanes& abar, std::size_t ia, const CPlanes& b, std::size_t ib,
                             const CPlanes& cbar, std::size_t ic) {
    constexpr int NCC = NCA > NCB ? NCA : NCB;
    constexpr bool PURE = (NCA == 3 || NCB == 3);
    const double b0 = b.p[0][ib];
    if constexpr (PURE) {
        double t = b0 * cbar.p[0][ic];
        if constexpr (NCB >= 2 && NCC >= 2) t += b.p[1][ib] * cbar.p[1][ic];
        if constexpr (NCB >= 3 && NCC >= 3) t += b.p[2][ib] * cbar.p[2][ic];
        abar.p[0][ia] += t;
        if constexpr (NCA >= 2) {
            double t1 = 0.0;
            if constexpr (NCC >= 2) t1 += b0 * cbar.p[1][ic];
            if constexpr (NCB >= 2 && NCC >= 3) t1 += 2.0 * b.p[1][ib] * cbar.p[2][ic];
            abar.p[1][ia] += t1;
        }
        if constexpr (NCA >= 3) abar.p[2][ia] += b0 * cbar.p[2][ic];
        return;
    }
    {
        double t = b0 * cbar.p[0][ic];
        if constexpr (NCB >= 2 && NCC >= 2) t += b.p[1][ib] * cbar.p[1][ic];
        if constexpr (NCB >= 4 && NCC >= 4)
            t += b.p[2][ib] * cbar.p[2][ic] + b.p[3][ib] * cbar.p[3][ic];
        abar.p[0][ia] += t;
    }
    if constexpr (NCA >= 2) {
        double t = 0.0;
        if constexpr (NCC >= 2) t += b0 * cbar.p[1][ic];
        if constexpr (NCB >= 4 && NCC >= 4) t += b.p[2][ib] * cbar.p[3][ic];
        abar.p[1][ia] += t;
    }
    if constexpr (NCA >= 4) {
        double t2 = b0 * cbar.p[2][ic];
        if constexpr (NCB >= 2) t2 += b.p[1][ib] * cbar.p[3][ic];
        abar.p[2][ia] += t2;
        abar.p[3][ia] += b0 * cbar.p[3][ic];
    }
}

#define SEPDON_DISPATCH_NC(FN, NCA, NCB, ...)              \
    do {                                                   \
        const int na__ = (NCA), nb__ = (NCB);              \
        if (na__ == 1 && nb__ == 1) FN<1, 1>(__VA_ARGS__); \
        else if (na__ == 1 && nb__ == 2) FN<1, 2>(__VA_ARGS__); \
        else if (na__ == 1 && nb__ == 3) FN<1, 3>(__VA_ARGS__); \
        else if (na__ == 1 && nb__ == 4) FN<1, 4>(__VA_ARGS__); \
        else if (na__ == 2 && nb__ == 1) FN<2, 1>(__VA_ARGS__); \
        else if (na__ == 2 && nb__ == 2) FN<2, 2>(__VA_ARGS__); \
        else if (na__ == 2 && nb__ == 4) FN<2, 4>(__VA_ARGS__); \
        else if (na__ == 3 && nb__ == 1) FN<3, 1>(__VA_ARGS__); \
        else if (na__ == 3 && nb__ == 3) FN<3, 3>(__VA_ARGS__); \
        else if (na__ == 4 && nb__ == 1) FN<4, 1>(__VA_ARGS__); \
        else if (na__ == 4 && nb__ == 2) FN<4, 2>(__VA_ARGS__); \
        else if (na__ == 4 && nb__ == 4) FN<4, 4>(__VA_ARGS__); \
        else throw shape_error("invalid component-count combination");   \
    } while (0)

// Progressive fold kernels for the rank-last recombination layout: stages
// carry shape [rows, p*r] with the rank axis fastest, so inner loops stream.

// next[(m,a),:] = cur[m,:] (*) part[a,:], width = p*r
template <int NCA, int NCB>
void fold_mul_k(TapeValue& next, const TapeValue& cur, const CPlanes& part, std::size_t nj,
                std::size_t width) {
    const std::size_t rows = cur.shape[0];
    MPlanes o = mplanes(next);
    CPlanes a = cplanes(cur);
    parallel_for(rows, rows * nj * width * static_cast<std::size_t>(NCA + NCB), [&](std::size_t m) {
        for (std::size_t ax = 0; ax < nj; ++ax) {
            const std::size_t base = (m * nj + ax) * width;
            for (std::size_t w = 0; w < width; ++w)
                hd_mul_elem<NCA, NCB>(o, base + w, a, m * width + w, part, ax * width + w);
        }
    });
}
void fold_mul(TapeValue& next, const TapeValue& cur, const CPlanes& part, int part_nc,
              std::size_t nj, std::size_t width) {
    SEPDON_DISPATCH_NC(fold_mul_k, cur.ncomp, part_nc, next, cur, part, nj, width);
}

// partbar[a,:] += sum_m tmul(cur[m,:], upbar[(m,a),:])
template <int NCA, int NCB>
void fold_part_bar_k(MPlanes& partbar, const TapeValue& cur, const TapeValue& upbar,
                     std::size_t nj, std::size_t width) {
    const std::size_t rows = cur.shape[0];
    CPlanes b = cplanes(cur);
    CPlanes g = cplanes(upbar);
    parallel_for(nj, rows * nj * width * static_cast<std::size_t>(NCA + NCB), [&](std::size_t ax) {
        for (std::size_t m = 0; m < rows; ++m) {
            const std::size_t base = (m * nj + ax) * width;
            for (std::size_t w = 0; w < width; ++w)
                hd_tmul_elem_acc<NCA, NCB>(partbar, ax * width + w, b, m * width + w, g, base + w);
        }
    });
}
void fold_part_bar(MPlanes& partbar, int part_nc, const TapeValue& cur, const TapeValue& upbar,
                   std::size_t nj, std::size_t width) {
    SEPDON_DISPATCH_NC(fold_part_bar_k, part_nc, cur.ncomp, partbar, cur, upbar, nj, width);
}

// curbar[m,:] += sum_a tmul(part[a,:], upbar[(m,a),:])
template <int NCA, int NCB>
void fold_cur_bar_k(TapeValue& curbar, const CPlanes& part, const TapeValue& upbar,
                    std::size_t nj, std::size_t width) {
    const std::size_t rows = curbar.shape[0];
    MPlanes o = mplanes(curbar);
    CPlanes g = cplanes(upbar);
    parallel_for(rows, rows * nj * width * static_cast<std::size_t>(NCA + NCB), [&](std::size_t m) {
        for (std::size_t ax = 0; ax < nj; ++ax) {
            const std::size_t base = (m * nj + ax) * width;
            for (std::size_t w = 0; w < width; ++w)
                hd_tmul_elem_acc<NCA, NCB>(o, m * width + w, part, ax * width + w, g, base + w);
        }
    });
}
void fold_cur_bar(TapeValue& curbar, const CPlanes& part, int part_nc, const TapeValue& upbar,
                  std::size_t nj, std::size_t width) {
    SEPDON_DISPATCH_NC(fold_cur_bar_k, curbar.ncomp, part_nc, curbar, part, upbar, nj, width);
}

// Final fold fused with the rank summation (ascending i, products completed
// left to right by construction of the stage):
//   out[(m,a),k] = sum_i stage[m,k,i] (*) part[a,k,i]
template <int NCA, int NCB>
void final_fold_fwd_k(TapeValue& out, const TapeValue& stage, const CPlanes& part, std::size_t nj,
                      std::size_t p, std::size_t r) {
    const std::size_t rows = stage.shape[0];
    MPlanes o = mplanes(out);
    CPlanes a = cplanes(stage);
    constexpr int NCO = NCA > NCB ? NCA : NCB;
    parallel_for(rows, rows * nj * p * r * static_cast<std::size_t>(NCA + NCB), [&](std::size_t m) {
        if constexpr (NCB == 1) {
            // unseeded last axis: each component reduces to a plain dot
            for (std::size_t ax = 0; ax < nj; ++ax)
                for (std::size_t k = 0; k < p; ++k) {
                    const double* __restrict pb = part.p[0] + (ax * p + k) * r;
                    const std::size_t sbase = (m * p + k) * r;
                    const std::size_t obase = (m * nj + ax) * p + k;
                    for (int c = 0; c < NCO; ++c) {
                        const double* __restrict sa = a.p[c] + sbase;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < r; ++i) acc += sa[i] * pb[i];
                        o.p[c][obase] = acc;
                    }
                }
            return;
        }
        double acc[4];
        double term[4];
        MPlanes termp;
        for (int c = 0; c < 4; ++c) termp.p[c] = &term[c];
        for (std::size_t ax = 0; ax < nj; ++ax) {
            for (std::size_t k = 0; k < p; ++k) {
                for (int c = 0; c < NCO; ++c) acc[c] = 0.0;
                const std::size_t sbase = (m * p + k) * r;
                const std::size_t pbase = (ax * p + k) * r;
                for (std::size_t i = 0; i < r; ++i) {
                    hd_mul_elem<NCA, NCB>(termp, 0, a, sbase + i, part, pbase + i);
                    for (int c = 0; c < NCO; ++c) acc[c] += term[c];
                }
                const std::size_t obase = (m * nj + ax) * p + k;
                for (int c = 0; c < NCO; ++c) o.p[c][obase] = acc[c];
            }
        }
    });
}
void final_fold_fwd(TapeValue& out, const TapeValue& stage, const CPlanes& part, int part_nc,
                    std::size_t nj, std::size_t p, std::size_t r) {
    SEPDON_DISPATCH_NC(final_fold_fwd_k, stage.ncomp, part_nc, out, stage, part, nj, p, r);
}

// stagebar[m,k,i] += sum_a tmul(part[a,k,i], obar[(m,a),k])
template <int NCA, int NCB>
void final_fold_stage_bar_k(TapeValue& stagebar, const CPlanes& part, const TapeValue& obar,
                            std::size_t nj, std::size_t p, std::size_t r) {
    const std::size_t rows = stagebar.shape[0];
    MPlanes o = mplanes(stagebar);
    CPlanes g = cplanes(obar);
    parallel_for(rows, rows * nj * p * r * static_cast<std::size_t>(NCA + NCB), [&](std::size_t m) {
        if constexpr (NCB == 1) {
            for (std::size_t ax = 0; ax < nj; ++ax)
                for (std::size_t k = 0; k < p; ++k) {
                    const double* __restrict pb = part.p[0] + (ax * p + k) * r;
                    const std::size_t gidx = (m * nj + ax) * p + k;
                    const std::size_t sbase = (m * p + k) * r;
                    for (int c = 0; c < NCA; ++c) {
                        const double gv = g.p[c][gidx];
                        double* __restrict sb = o.p[c] + sbase;
                        for (std::size_t i = 0; i < r; ++i) sb[i] += gv * pb[i];
                    }
                }
            return;
        }
        for (std::size_t ax = 0; ax < nj; ++ax)
            for (std::size_t k = 0; k < p; ++k) {
                const std::size_t gidx = (m * nj + ax) * p + k;
                const std::size_t sbase = (m * p + k) * r;
                const std::size_t pbase = (ax * p + k) * r;
                for (std::size_t i = 0; i < r; ++i)
                    hd_tmul_elem_acc<NCA, NCB>(o, sbase + i, part, pbase + i, g, gidx);
            }
    });
}
void final_fold_stage_bar(TapeValue& stagebar, const CPlanes& part, int part_nc,
                          const TapeValue& obar, std::size_t nj, std::size_t p, std::size_t r) {
    SEPDON_DISPATCH_NC(final_fold_stage_bar_k, stagebar.ncomp, part_nc, stagebar, part, obar, nj, p, r);
}

// partbar[a,k,i] += sum_m tmul(stage[m,k,i], obar[(m,a),k])
template <int NCA, int NCB>
void final_fold_part_bar_k(MPlanes& partbar, const TapeValue& stage, const TapeValue& obar,
                           std::size_t nj, std::size_t p, std::size_t r) {
    const std::size_t rows = stage.shape[0];
    CPlanes b = cplanes(stage);
    CPlanes g = cplanes(obar);
    parallel_for(nj, rows * nj * p * r * static_cast<std::size_t>(NCA + NCB), [&](std::size_t ax) {
        if constexpr (NCA == 1) {
            // adjoint of an unseeded axis: sum of per-plane products
            constexpr int NCS = NCB;
            for (std::size_t m = 0; m < rows; ++m)
                for (std::size_t k = 0; k < p; ++k) {
                    const std::size_t gidx = (m * nj + ax) * p + k;
                    const std::size_t sbase = (m * p + k) * r;
                    double* __restrict pb = partbar.p[0] + (ax * p + k) * r;
                    for (int c = 0; c < NCS; ++c) {
                        const double gv = g.p[c][gidx];
                        const double* __restrict sv = b.p[c] + sbase;
                        for (std::size_t i = 0; i < r; ++i) pb[i] += gv * sv[i];
                    }
                }
            return;
        }
        for (std::size_t m = 0; m < rows; ++m)
            for (std::size_t k = 0; k < p; ++k) {
                const std::size_t gidx = (m * nj + ax) * p + k;
                const std::size_t sbase = (m * p + k) * r;
                const std::size_t pbase = (ax * p + k) * r;
                for (std::size_t i = 0; i < r; ++i)
                    hd_tmul_elem_acc<NCA, NCB>(partbar, pbase + i, b, sbase + i, g, gidx);
            }
    });
}
void final_fold_part_bar(MPlanes& partbar, int part_nc, const TapeValue& stage,
                         const TapeValue& obar, std::size_t nj, std::size_t p, std::size_t r) {
    SEPDON_DISPATCH_NC(final_fold_part_bar_k, part_nc, stage.ncomp, partbar, stage, obar, nj, p, r);
}

// Elementwise hyper-dual product over whole buffers (same shape).
template <int NCA, int NCB>
void elem_mul_k(TapeValue& out, const TapeValue& a, const TapeValue& b) {
    const std::size_t n = out.numel();
    MPlanes o = mplanes(out);
    CPlanes pa = cplanes(a);
    CPlanes pb = cplanes(b);
    for (std::size_t i = 0; i < n; ++i) hd_mul_elem<NCA, NCB>(o, i, pa, i, pb, i);
}
void elem_mul(TapeValue& out, const TapeValue& a, const TapeValue& b) {
    SEPDON_DISPATCH_NC(elem_mul_k, a.ncomp, b.ncomp, out, a, b);
}

// abar += tmul(b, cbar) elementwise; used by Mul's VJP (and Tanh's, with the
// lifted local derivative playing the role of b).
template <int NCA, int NCB>
void elem_tmul_acc_k(TapeValue& abar, const TapeValue& b, const TapeValue& cbar) {
    const std::size_t n = abar.numel();
    MPlanes o = mplanes(abar);
    CPlanes pb = cplanes(b);
    CPlanes pc = cplanes(cbar);
    for (std::size_t i = 0; i < n; ++i) hd_tmul_elem_acc<NCA, NCB>(o, i, pb, i, pc, i);
}
void elem_tmul_acc(TapeValue& abar, const TapeValue& b, const TapeValue& cbar) {
    SEPDON_DISPATCH_NC(elem_tmul_acc_k, abar.ncomp, b.ncomp, abar, b, cbar);
}

} // namespace

enum class Op {
    Leaf,
    Affine,
    Tanh,
    Add,
    Sub,
    Mul,
    Scale,
    AddConst,
    AddBias,
    Reshape,
    OuterCombine,
    ContractBT,
    PairDot,
    Extract,
    SliceCols,
    RowBcastMul,
    ColBcastSub,
    MeanSq,
    MeanAll,
    Lincomb,
};

static const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Affine: return "affine";
        case Op::Tanh: return "tanh";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::AddConst: return "add_const";
        case Op::AddBias: return "add_bias";
        case Op::Reshape: return "reshape";
        case Op::OuterCombine: return "outer_combine";
        case Op::ContractBT: return "contract_bt";
        case Op::PairDot: return "pair_dot";
        case Op::Extract: return "extract";
        case Op::SliceCols: return "slice_cols";
        case Op::RowBcastMul: return "rowbcast_mul";
        case Op::ColBcastSub: return "colbcast_sub";
        case Op::MeanSq: return "mean_sq";
        case Op::MeanAll: return "mean_all";
        case Op::Lincomb: return "lincomb";
    }
    return "?";
}

struct Tape::Node {
    Op op = Op::Leaf;
    std::vector<Id> parents;
    TapeValue val;
    TapeValue adj; // allocated on demand during backward()
    bool requires_grad = false;
    double scalar = 0.0;
    std::size_t i0 = 0, i1 = 0;
    std::vector<double> weights;
};

Tape::Tape() = default;
Tape::~Tape() = default;

void Tape::reset() { nodes_.clear(); }

std::size_t Tape::num_nodes() const { return nodes_.size(); }

Tape::Id Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::input(const Tensor& t, bool requires_grad) {
    Node n;
    n.val = TapeValue::uninit(t.shape(), 1);
    std::memcpy(n.val.plane(0), t.data(), t.size() * sizeof(double));
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::input_seeded(TapeValue v) {
    Node n;
    n.val = std::move(v);
    return push(std::move(n));
}

static void require_same_shape(const TapeValue& a, const TapeValue& b, const char* what) {
    if (a.shape != b.shape) throw shape_error(std::string(what) + ": operand shapes differ");
}

Tape::Id Tape::affine(Id x, Id w, Id b) {
    const TapeValue& xv = nodes_[x].val;
    const TapeValue& wv = nodes_[w].val;
    if (xv.shape.size() != 2 || wv.shape.size() != 2) throw shape_error("affine: x and W must be rank-2");
    if (wv.ncomp != 1) throw shape_error("affine: W must be single-component");
    const std::size_t rows = xv.shape[0], in_dim = xv.shape[1], out_dim = wv.shape[0];
    if (wv.shape[1] != in_dim) throw shape_error("affine: W columns do not match input width");

    Node n;
    n.op = Op::Affine;
    n.parents = {x, w, b};
    n.val = TapeValue::uninit({rows, out_dim}, xv.ncomp);
    std::vector<double> wt = detail::transpose(wv.plane(0), out_dim, in_dim);
    for (int c = 0; c < xv.ncomp; ++c)
        detail::matmul_ikj(n.val.plane(c), xv.plane(c), wt.data(), rows, in_dim, out_dim, true);
    if (b >= 0) {
        const TapeValue& bv = nodes_[b].val;
        if (bv.numel() != out_dim) throw shape_error("affine: bias length mismatch");
        double* y0 = n.val.plane(0);
        const double* bb = bv.plane(0);
        for (std::size_t rr = 0; rr < rows; ++rr)
            for (std::size_t j = 0; j < out_dim; ++j) y0[rr * out_dim + j] += bb[j];
    }
    n.requires_grad = nodes_[x].requires_grad || nodes_[w].requires_grad || (b >= 0 && nodes_[b].requires_grad);
    return push(std::move(n));
}

Tape::Id Tape::tanh_(Id x) {
    const TapeValue& xv = nodes_[x].val;
    Node n;
    n.op = Op::Tanh;
    n.parents = {x};
    n.val = TapeValue::uninit(xv.shape, xv.ncomp);
    const std::size_t m = xv.numel();
    const double* x0 = xv.plane(0);
    double* y0 = n.val.plane(0);
    for (std::size_t i = 0; i < m; ++i) y0[i] = std::tanh(x0[i]);
    if (xv.ncomp >= 2) {
        const double* x1 = xv.plane(1);
        double* y1 = n.val.plane(1);
        for (std::size_t i = 0; i < m; ++i) y1[i] = (1.0 - y0[i] * y0[i]) * x1[i];
    }
    if (xv.ncomp == 3) {
        const double* x1 = xv.plane(1);
        const double* x2 = xv.plane(2);
        double* y2 = n.val.plane(2);
        for (std::size_t i = 0; i < m; ++i) {
            const double t = y0[i];
            const double g = 1.0 - t * t;
            y2[i] = g * x2[i] - 2.0 * t * g * x1[i] * x1[i];
        }
    }
    if (xv.ncomp >= 4) {
        const double* x1 = xv.plane(1);
        const double* x2 = xv.plane(2);
        const double* x3 = xv.plane(3);
        double* y2 = n.val.plane(2);
        double* y3 = n.val.plane(3);
        for (std::size_t i = 0; i < m; ++i) {
            const double t = y0[i];
            const double g = 1.0 - t * t;
            y2[i] = g * x2[i];
            y3[i] = g * x3[i] - 2.0 * t * g * x1[i] * x2[i];
        }
    }
    n.requires_grad = nodes_[x].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::add(Id x, Id y) {
    const TapeValue& a = nodes_[x].val;
    const TapeValue& b = nodes_[y].val;
    require_same_shape(a, b, "add");
    Node n;
    n.op = Op::Add;
    n.parents = {x, y};
    n.val = TapeValue::uninit(a.shape, std::max(a.ncomp, b.ncomp));
    const std::size_t m = a.numel();
    for (int c = 0; c < n.val.ncomp; ++c) {
        const double* pa = a.plane_or_null(c);
        const double* pb = b.plane_or_null(c);
        double* pc = n.val.plane(c);
        for (std::size_t i = 0; i < m; ++i) pc[i] = (pa ? pa[i] : 0.0) + (pb ? pb[i] : 0.0);
    }
    n.requires_grad = nodes_[x].requires_grad || nodes_[y].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::sub(Id x, Id y) {
    const TapeValue& a = nodes_[x].val;
    const TapeValue& b = nodes_[y].val;
    require_same_shape(a, b, "sub");
    Node n;
    n.op = Op::Sub;
    n.parents = {x, y};
    n.val = TapeValue::uninit(a.shape, std::max(a.ncomp, b.ncomp));
    const std::size_t m = a.numel();
    for (int c = 0; c < n.val.ncomp; ++c) {
        const double* pa = a.plane_or_null(c);
        const double* pb = b.plane_or_null(c);
        double* pc = n.val.plane(c);
        for (std::size_t i = 0; i < m; ++i) pc[i] = (pa ? pa[i] : 0.0) - (pb ? pb[i] : 0.0);
    }
    n.requires_grad = nodes_[x].requires_grad || nodes_[y].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::mul(Id x, Id y) {
    const TapeValue& a = nodes_[x].val;
    const TapeValue& b = nodes_[y].val;
    require_same_shape(a, b, "mul");
    Node n;
    n.op = Op::Mul;
    n.parents = {x, y};
    n.val = TapeValue::uninit(a.shape, std::max(a.ncomp, b.ncomp));
    elem_mul(n.val, a, b);
    n.requires_grad = nodes_[x].requires_grad || nodes_[y].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::scale(Id x, double s) {
    const TapeValue& a = nodes_[x].val;
    Node n;
    n.op = Op::Scale;
    n.parents = {x};
    n.scalar = s;
    n.val = TapeValue::uninit(a.shape, a.ncomp);
    for (std::size_t i = 0; i < a.buf.size(); ++i) n.val.buf[i] = a.buf[i] * s;
    n.requires_grad = nodes_[x].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::add_const(Id x, double s) {
    Node n;
    n.op = Op::AddConst;
    n.parents = {x};
    n.scalar = s;
    n.val = nodes_[x].val;
    double* p0 = n.val.plane(0);
    for (std::size_t i = 0; i < n.val.numel(); ++i) p0[i] += s;
    n.requires_grad = nodes_[x].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::add_bias(Id x, Id bias, std::size_t element) {
    const TapeValue& bv = nodes_[bias].val;
    if (bv.ncomp != 1 || element >= bv.numel())
        throw shape_error("add_bias: bias element out of range");
    Node n;
    n.op = Op::AddBias;
    n.parents = {x, bias};
    n.i0 = element;
    n.val = nodes_[x].val;
    double* p0 = n.val.plane(0);
    const double b0 = bv.plane(0)[element];
    for (std::size_t i = 0; i < n.val.numel(); ++i) p0[i] += b0;
    n.requires_grad = nodes_[x].requires_grad || nodes_[bias].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::reshape(Id x, std::vector<std::size_t> shape) {
    const TapeValue& a = nodes_[x].val;
    if (shape_numel(shape) != a.numel()) throw shape_error("reshape: element count changes");
    Node n;
    n.op = Op::Reshape;
    n.parents = {x};
    n.val = a;
    n.val.shape = std::move(shape);
    n.requires_grad = nodes_[x].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::outer_combine(std::span<const Id> parts) {
    if (parts.empty()) throw std::invalid_argument("outer_combine: empty parts list");
    const std::size_t d = parts.size();
    std::size_t p = 0, r = 0, lattice = 1;
    int nc = 1;
    for (std::size_t j = 0; j < d; ++j) {
        const TapeValue& v = nodes_[parts[j]].val;
        if (v.shape.size() != 3) throw shape_error("outer_combine: parts must be [n_j,p,r]");
        if (j == 0) {
            p = v.shape[1];
            r = v.shape[2];
        } else if (v.shape[1] != p || v.shape[2] != r) {
            throw shape_error("outer_combine: parts disagree on (p,r)");
        }
        lattice *= v.shape[0];
        nc = std::max(nc, v.ncomp);
    }
    Node n;
    n.op = Op::OuterCombine;
    n.parents.assign(parts.begin(), parts.end());
    n.val = TapeValue::uninit({lattice, p}, nc);
    n.i0 = r;

    // Rank-last progressive products; the final fold performs the ascending-
    // rank summation without materializing per-rank lattices.
    const std::size_t width = p * r;
    if (d == 1) {
        const TapeValue& a = nodes_[parts[0]].val;
        const std::size_t rows = a.shape[0];
        for (int c = 0; c < n.val.ncomp; ++c) {
            const double* src = c < a.ncomp ? a.plane(c) : nullptr;
            double* dst = n.val.plane(c);
            for (std::size_t m = 0; m < rows; ++m)
                for (std::size_t k = 0; k < p; ++k) {
                    double acc = 0.0;
                    if (src)
                        for (std::size_t i = 0; i < r; ++i) acc += src[(m * p + k) * r + i];
                    dst[m * p + k] = acc;
                }
        }
    } else {
        TapeValue stage = nodes_[parts[0]].val;
        stage.shape = {nodes_[parts[0]].val.shape[0], width};
        for (std::size_t j = 1; j + 1 < d; ++j) {
            const TapeValue& part = nodes_[parts[j]].val;
            const std::size_t nj = part.shape[0];
            TapeValue next = TapeValue::uninit({stage.shape[0] * nj, width},
                                               std::max(stage.ncomp, part.ncomp));
            fold_mul(next, stage, cplanes(part), part.ncomp, nj, width);
            stage = std::move(next);
        }
        const TapeValue& last = nodes_[parts[d - 1]].val;
        final_fold_fwd(n.val, stage, cplanes(last), last.ncomp, last.shape[0], p, r);
    }
    for (Id pid : parts) n.requires_grad = n.requires_grad || nodes_[pid].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::contract_bt(Id branch, Id trunk) {
    const TapeValue& b = nodes_[branch].val;
    const TapeValue& t = nodes_[trunk].val;
    if (b.shape.size() != 2 || t.shape.size() != 2) throw shape_error("contract_bt: operands must be rank-2");
    if (b.ncomp != 1) throw shape_error("contract_bt: branch must be single-component");
    const std::size_t nrow = b.shape[0], p = b.shape[1], lattice = t.shape[0];
    if (t.shape[1] != p) throw shape_error("contract_bt: p mismatch between branch and trunk");

    Node n;
    n.op = Op::ContractBT;
    n.parents = {branch, trunk};
    n.val = TapeValue::uninit({nrow, lattice}, t.ncomp);
    // Lattice tiles are transposed into an L1-resident scratch so the inner
    // axpy streams; per output element the k order stays strictly ascending.
    const std::size_t tile = 512;
    const double* bp = b.plane(0);
    for (int c = 0; c < t.ncomp; ++c) {
        const double* tp = t.plane(c);
        double* out = n.val.plane(c);
        for (std::size_t m0 = 0; m0 < lattice; m0 += tile) {
            const std::size_t w = std::min(tile, lattice - m0);
            std::vector<double> tt(p * w);
            for (std::size_t m = 0; m < w; ++m)
                for (std::size_t k = 0; k < p; ++k) tt[k * w + m] = tp[(m0 + m) * p + k];
            parallel_for(nrow, nrow * w * p, [&](std::size_t s) {
                double* __restrict orow = out + s * lattice + m0;
                const double* brow = bp + s * p;
                for (std::size_t k = 0; k < p; ++k) {
                    const double a = brow[k];
                    const double* __restrict tr = tt.data() + k * w;
                    if (k == 0) {
                        for (std::size_t m = 0; m < w; ++m) orow[m] = a * tr[m];
                    } else {
                        for (std::size_t m = 0; m < w; ++m) orow[m] += a * tr[m];
                    }
                }
            });
        }
    }
    n.requires_grad = nodes_[branch].requires_grad || nodes_[trunk].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::pair_dot(Id branch, Id trunk) {
    const TapeValue& b = nodes_[branch].val;
    const TapeValue& t = nodes_[trunk].val;
    if (b.shape.size() != 2 || t.shape.size() != 2) throw shape_error("pair_dot: operands must be rank-2");
    if (b.ncomp != 1) throw shape_error("pair_dot: branch must be single-component");
    require_same_shape(b, t, "pair_dot");
    const std::size_t rows = b.shape[0], p = b.shape[1];

    Node n;
    n.op = Op::PairDot;
    n.parents = {branch, trunk};
    n.val = TapeValue({rows, 1}, t.ncomp);
    const double* bp = b.plane(0);
    for (int c = 0; c < t.ncomp; ++c) {
        const double* tp = t.plane(c);
        double* o = n.val.plane(c);
        parallel_for(rows, rows * p, [&](std::size_t rr) {
            double acc = 0.0;
            for (std::size_t k = 0; k < p; ++k) acc += bp[rr * p + k] * tp[rr * p + k];
            o[rr] = acc;
        });
    }
    n.requires_grad = nodes_[branch].requires_grad || nodes_[trunk].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::extract(Id x, int comp) {
    const TapeValue& a = nodes_[x].val;
    if (comp < 0 || comp >= a.ncomp) throw shape_error("extract: component out of range");
    Node n;
    n.op = Op::Extract;
    n.parents = {x};
    n.i0 = static_cast<std::size_t>(comp);
    n.val = TapeValue::uninit(a.shape, 1);
    std::memcpy(n.val.plane(0), a.plane(comp), a.numel() * sizeof(double));
    n.requires_grad = nodes_[x].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::slice_cols(Id x, std::size_t col0, std::size_t col1) {
    const TapeValue& a = nodes_[x].val;
    if (a.shape.size() != 2) throw shape_error("slice_cols: operand must be rank-2");
    const std::size_t rows = a.shape[0], cols = a.shape[1];
    if (col0 >= col1 || col1 > cols) throw shape_error("slice_cols: bad column range");
    const std::size_t w = col1 - col0;
    Node n;
    n.op = Op::SliceCols;
    n.parents = {x};
    n.i0 = col0;
    n.i1 = col1;
    n.val = TapeValue::uninit({rows, w}, a.ncomp);
    for (int c = 0; c < a.ncomp; ++c) {
        const double* src = a.plane(c);
        double* dst = n.val.plane(c);
        for (std::size_t rr = 0; rr < rows; ++rr)
            std::memcpy(dst + rr * w, src + rr * cols + col0, w * sizeof(double));
    }
    n.requires_grad = nodes_[x].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::rowbcast_mul(Id x, Id w) {
    const TapeValue& a = nodes_[x].val;
    const TapeValue& wv = nodes_[w].val;
    if (a.shape.size() != 2) throw shape_error("rowbcast_mul: x must be rank-2");
    if (a.ncomp != 1 || wv.ncomp != 1) throw shape_error("rowbcast_mul: single-component only");
    if (wv.numel() != a.shape[1]) throw shape_error("rowbcast_mul: weight length mismatch");
    Node n;
    n.op = Op::RowBcastMul;
    n.parents = {x, w};
    n.val = TapeValue::uninit(a.shape, 1);
    const std::size_t rows = a.shape[0], cols = a.shape[1];
    const double* src = a.plane(0);
    const double* ww = wv.plane(0);
    double* dst = n.val.plane(0);
    for (std::size_t rr = 0; rr < rows; ++rr)
        for (std::size_t j = 0; j < cols; ++j) dst[rr * cols + j] = src[rr * cols + j] * ww[j];
    n.requires_grad = nodes_[x].requires_grad || nodes_[w].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::colbcast_sub(Id x, Id v) {
    const TapeValue& a = nodes_[x].val;
    const TapeValue& vv = nodes_[v].val;
    if (a.shape.size() != 2) throw shape_error("colbcast_sub: x must be rank-2");
    if (a.ncomp != 1 || vv.ncomp != 1) throw shape_error("colbcast_sub: single-component only");
    if (vv.numel() != a.shape[0]) throw shape_error("colbcast_sub: vector length mismatch");
    Node n;
    n.op = Op::ColBcastSub;
    n.parents = {x, v};
    n.val = TapeValue::uninit(a.shape, 1);
    const std::size_t rows = a.shape[0], cols = a.shape[1];
    const double* src = a.plane(0);
    const double* vp = vv.plane(0);
    double* dst = n.val.plane(0);
    for (std::size_t rr = 0; rr < rows; ++rr)
        for (std::size_t j = 0; j < cols; ++j) dst[rr * cols + j] = src[rr * cols + j] - vp[rr];
    n.requires_grad = nodes_[x].requires_grad || nodes_[v].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::mean_sq(Id x) {
    const TapeValue& a = nodes_[x].val;
    if (a.ncomp != 1) throw shape_error("mean_sq: single-component only");
    Node n;
    n.op = Op::MeanSq;
    n.parents = {x};
    n.val = TapeValue({1}, 1);
    const double* src = a.plane(0);
    double acc = 0.0; // serial, fixed order
    for (std::size_t i = 0; i < a.numel(); ++i) acc += src[i] * src[i];
    n.val.plane(0)[0] = acc / static_cast<double>(a.numel());
    n.requires_grad = nodes_[x].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::mean_all(Id x) {
    const TapeValue& a = nodes_[x].val;
    if (a.ncomp != 1) throw shape_error("mean_all: single-component only");
    Node n;
    n.op = Op::MeanAll;
    n.parents = {x};
    n.val = TapeValue({1}, 1);
    const double* src = a.plane(0);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += src[i];
    n.val.plane(0)[0] = acc / static_cast<double>(a.numel());
    n.requires_grad = nodes_[x].requires_grad;
    return push(std::move(n));
}

Tape::Id Tape::lincomb(std::span<const Id> xs, std::span<const double> ws) {
    if (xs.empty() || xs.size() != ws.size()) throw std::invalid_argument("lincomb: bad argument lists");
    Node n;
    n.op = Op::Lincomb;
    n.parents.assign(xs.begin(), xs.end());
    n.weights.assign(ws.begin(), ws.end());
    n.val = TapeValue({1}, 1);
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const TapeValue& a = nodes_[xs[i]].val;
        if (a.numel() != 1 || a.ncomp != 1) throw shape_error("lincomb: inputs must be real scalars");
        acc += ws[i] * a.plane(0)[0];
        n.requires_grad = n.requires_grad || nodes_[xs[i]].requires_grad;
    }
    n.val.plane(0)[0] = acc;
    return push(std::move(n));
}

const TapeValue& Tape::value(Id id) const { return nodes_[static_cast<std::size_t>(id)].val; }

double Tape::scalar_value(Id id) const {
    const TapeValue& v = nodes_[static_cast<std::size_t>(id)].val;
    if (v.numel() != 1) throw shape_error("scalar_value: node is not a scalar");
    return v.plane(0)[0];
}

Tensor Tape::value_tensor(Id id, int comp) const {
    const TapeValue& v = nodes_[static_cast<std::size_t>(id)].val;
    if (comp >= v.ncomp) throw shape_error("value_tensor: component out of range");
    std::vector<double> data(v.plane(comp), v.plane(comp) + v.numel());
    return Tensor(v.shape, std::move(data));
}

bool Tape::has_grad(Id id) const { return !nodes_[static_cast<std::size_t>(id)].adj.buf.empty(); }

Tensor Tape::grad_tensor(Id id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.adj.buf.empty()) return Tensor::zeros(n.val.shape);
    std::vector<double> data(n.adj.plane(0), n.adj.plane(0) + n.adj.numel());
    return Tensor(n.val.shape, std::move(data));
}

namespace {
void ensure_adj(TapeValue& adj, const TapeValue& val) {
    if (adj.buf.empty()) adj = TapeValue(val.shape, val.ncomp);
}
} // namespace

void Tape::backward(Id loss) {
    Node& ln = nodes_[static_cast<std::size_t>(loss)];
    if (ln.val.numel() != 1 || ln.val.ncomp != 1)
        throw shape_error("backward: loss must be a real scalar");
    if (!std::isfinite(ln.val.plane(0)[0])) {
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            for (double v : nodes_[i].val.buf)
                if (!std::isfinite(v))
                    throw numeric_error("non-finite value first appears at tape node " +
                                        std::to_string(i) + " (op " + op_name(nodes_[i].op) + ")");
        throw numeric_error("non-finite loss value");
    }
    if (!ln.requires_grad) return;
    ensure_adj(ln.adj, ln.val);
    ln.adj.plane(0)[0] = 1.0;

    for (std::size_t ni = nodes_.size(); ni-- > 0;) {
        Node& n = nodes_[ni];
        if (n.adj.buf.empty() || n.op == Op::Leaf) continue;
        const TapeValue& g = n.adj;
        switch (n.op) {
            case Op::Affine: {
                Node& xn = nodes_[n.parents[0]];
                Node& wn = nodes_[n.parents[1]];
                const std::size_t rows = xn.val.shape[0], in_dim = xn.val.shape[1],
                                  out_dim = wn.val.shape[0];
                if (xn.requires_grad) {
                    ensure_adj(xn.adj, xn.val);
                    for (int c = 0; c < xn.val.ncomp; ++c)
                        detail::matmul_ikj(xn.adj.plane(c), g.plane(c), wn.val.plane(0), rows, out_dim, in_dim);
                }
                if (wn.requires_grad) {
                    ensure_adj(wn.adj, wn.val);
                    for (int c = 0; c < xn.val.ncomp; ++c)
                        detail::acc_outer_t(wn.adj.plane(0), g.plane(c), xn.val.plane(c), rows, out_dim, in_dim);
                }
                if (n.parents[2] >= 0) {
                    Node& bn = nodes_[n.parents[2]];
                    if (bn.requires_grad) {
                        ensure_adj(bn.adj, bn.val);
                        double* ba = bn.adj.plane(0);
                        const double* g0 = g.plane(0);
                        for (std::size_t rr = 0; rr < rows; ++rr)
                            for (std::size_t j = 0; j < out_dim; ++j) ba[j] += g0[rr * out_dim + j];
                    }
                }
                break;
            }
            case Op::Tanh: {
                Node& xn = nodes_[n.parents[0]];
                if (!xn.requires_grad) break;
                ensure_adj(xn.adj, xn.val);
                // Local derivative lifted into the algebra, then pushed through.
                const std::size_t m = xn.val.numel();
                TapeValue lift(xn.val.shape, xn.val.ncomp);
                const double* y0 = n.val.plane(0);
                double* l0 = lift.plane(0);
                for (std::size_t i = 0; i < m; ++i) l0[i] = 1.0 - y0[i] * y0[i];
                if (xn.val.ncomp >= 2) {
                    const double* x1 = xn.val.plane(1);
                    double* l1 = lift.plane(1);
                    for (std::size_t i = 0; i < m; ++i) l1[i] = -2.0 * y0[i] * l0[i] * x1[i];
                }
                if (xn.val.ncomp == 3) {
                    const double* x1 = xn.val.plane(1);
                    const double* x2 = xn.val.plane(2);
                    double* l2 = lift.plane(2);
                    for (std::size_t i = 0; i < m; ++i) {
                        const double t = y0[i], gg = l0[i];
                        const double gp = -2.0 * t * gg;
                        const double gpp = -2.0 * gg * gg + 4.0 * t * t * gg;
                        l2[i] = gp * x2[i] + gpp * x1[i] * x1[i];
                    }
                }
                if (xn.val.ncomp >= 4) {
                    const double* x1 = xn.val.plane(1);
                    const double* x2 = xn.val.plane(2);
                    const double* x3 = xn.val.plane(3);
                    double* l2 = lift.plane(2);
                    double* l3 = lift.plane(3);
                    for (std::size_t i = 0; i < m; ++i) {
                        const double t = y0[i], gg = l0[i];
                        const double gp = -2.0 * t * gg;
                        const double gpp = -2.0 * gg * gg + 4.0 * t * t * gg;
                        l2[i] = gp * x2[i];
                        l3[i] = gp * x3[i] + gpp * x1[i] * x2[i];
                    }
                }
                elem_tmul_acc(xn.adj, lift, g);
                break;
            }
            case Op::Add:
            case Op::Sub: {
                for (int side = 0; side < 2; ++side) {
                    Node& pn = nodes_[n.parents[side]];
                    if (!pn.requires_grad) continue;
                    ensure_adj(pn.adj, pn.val);
                    const double sgn = (n.op == Op::Sub && side == 1) ? -1.0 : 1.0;
                    const std::size_t m = pn.val.numel();
                    for (int c = 0; c < pn.val.ncomp; ++c) {
                        if (c >= g.ncomp) break;
                        const double* gp = g.plane(c);
                        double* ap = pn.adj.plane(c);
                        for (std::size_t i = 0; i < m; ++i) ap[i] += sgn * gp[i];
                    }
                }
                break;
            }
            case Op::Mul: {
                Node& an = nodes_[n.parents[0]];
                Node& bn = nodes_[n.parents[1]];
                if (an.requires_grad) {
                    ensure_adj(an.adj, an.val);
                    elem_tmul_acc(an.adj, bn.val, g);
                }
                if (bn.requires_grad) {
                    ensure_adj(bn.adj, bn.val);
                    elem_tmul_acc(bn.adj, an.val, g);
                }
                break;
            }
            case Op::Scale: {
                Node& xn = nodes_[n.parents[0]];
                if (!xn.requires_grad) break;
                ensure_adj(xn.adj, xn.val);
                for (int c = 0; c < xn.val.ncomp && c < g.ncomp; ++c) {
                    const double* gp = g.plane(c);
                    double* ap = xn.adj.plane(c);
                    for (std::size_t i = 0; i < xn.val.numel(); ++i) ap[i] += n.scalar * gp[i];
                }
                break;
            }
            case Op::AddConst:
            case Op::Reshape: {
                Node& xn = nodes_[n.parents[0]];
                if (!xn.requires_grad) break;
                ensure_adj(xn.adj, xn.val);
                for (int c = 0; c < xn.val.ncomp && c < g.ncomp; ++c) {
                    const double* gp = g.plane(c);
                    double* ap = xn.adj.plane(c);
                    for (std::size_t i = 0; i < xn.val.numel(); ++i) ap[i] += gp[i];
                }
                break;
            }
            case Op::AddBias: {
                Node& xn = nodes_[n.parents[0]];
                Node& bn = nodes_[n.parents[1]];
                if (xn.requires_grad) {
                    ensure_adj(xn.adj, xn.val);
                    for (int c = 0; c < xn.val.ncomp && c < g.ncomp; ++c) {
                        const double* gp = g.plane(c);
                        double* ap = xn.adj.plane(c);
                        for (std::size_t i = 0; i < xn.val.numel(); ++i) ap[i] += gp[i];
                    }
                }
                if (bn.requires_grad) {
                    ensure_adj(bn.adj, bn.val);
                    const double* g0 = g.plane(0);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < n.val.numel(); ++i) acc += g0[i];
                    bn.adj.plane(0)[n.i0] += acc;
                }
                break;
            }
            case Op::OuterCombine: {
                const std::size_t d = n.parents.size();
                const std::size_t r = n.i0;
                const std::size_t p = n.val.shape[1];
                const std::size_t width = p * r;
                if (d == 1) {
                    Node& pn = nodes_[n.parents[0]];
                    if (!pn.requires_grad) break;
                    ensure_adj(pn.adj, pn.val);
                    const std::size_t rows = pn.val.shape[0];
                    for (int c = 0; c < pn.val.ncomp; ++c) {
                        const double* gp = g.plane(c);
                        double* ap = pn.adj.plane(c);
                        for (std::size_t m = 0; m < rows; ++m)
                            for (std::size_t k = 0; k < p; ++k)
                                for (std::size_t i = 0; i < r; ++i)
                                    ap[(m * p + k) * r + i] += gp[m * p + k];
                    }
                    break;
                }
                // Recompute the cheap early stages, then sweep back through the
                // fused final fold and the early folds.
                std::vector<TapeValue> stages(d - 1);
                stages[0] = nodes_[n.parents[0]].val;
                stages[0].shape = {nodes_[n.parents[0]].val.shape[0], width};
                for (std::size_t j = 1; j + 1 < d; ++j) {
                    const TapeValue& part = nodes_[n.parents[j]].val;
                    stages[j] = TapeValue::uninit({stages[j - 1].shape[0] * part.shape[0], width},
                                                  std::max(stages[j - 1].ncomp, part.ncomp));
                    fold_mul(stages[j], stages[j - 1], cplanes(part), part.ncomp, part.shape[0], width);
                }
                const TapeValue& last_val = nodes_[n.parents[d - 1]].val;
                const std::size_t n_last = last_val.shape[0];
                Node& last_node = nodes_[n.parents[d - 1]];
                if (last_node.requires_grad) {
                    ensure_adj(last_node.adj, last_node.val);
                    MPlanes pb = mplanes(last_node.adj);
                    final_fold_part_bar(pb, last_node.val.ncomp, stages[d - 2], g, n_last, p, r);
                }
                TapeValue upbar(stages[d - 2].shape, stages[d - 2].ncomp);
                final_fold_stage_bar(upbar, cplanes(last_val), last_val.ncomp, g, n_last, p, r);
                for (std::size_t j = d - 1; j-- > 1;) {
                    Node& pn = nodes_[n.parents[j]];
                    const std::size_t nj = pn.val.shape[0];
                    if (pn.requires_grad) {
                        ensure_adj(pn.adj, pn.val);
                        MPlanes pb = mplanes(pn.adj);
                        fold_part_bar(pb, pn.val.ncomp, stages[j - 1], upbar, nj, width);
                    }
                    TapeValue down(stages[j - 1].shape, stages[j - 1].ncomp);
                    fold_cur_bar(down, cplanes(pn.val), pn.val.ncomp, upbar, nj, width);
                    upbar = std::move(down);
                }
                Node& p0 = nodes_[n.parents[0]];
                if (p0.requires_grad) {
                    ensure_adj(p0.adj, p0.val);
                    for (int c = 0; c < p0.val.ncomp; ++c) {
                        const double* src = upbar.plane(c);
                        double* dst = p0.adj.plane(c);
                        for (std::size_t e = 0; e < p0.val.numel(); ++e) dst[e] += src[e];
                    }
                }
                break;
            }
            case Op::ContractBT: {
                Node& bn = nodes_[n.parents[0]];
                Node& tn = nodes_[n.parents[1]];
                const std::size_t nrow = bn.val.shape[0], p = bn.val.shape[1],
                                  lattice = tn.val.shape[0];
                const double* bp = bn.val.plane(0);
                auto plane_live = [&](int c) {
                    const double* gp = g.plane(c);
                    for (std::size_t e = 0; e < g.numel(); ++e)
                        if (gp[e] != 0.0) return true;
                    return false;
                };
                std::vector<char> live(static_cast<std::size_t>(g.ncomp));
                for (int c = 0; c < g.ncomp; ++c) live[static_cast<std::size_t>(c)] = plane_live(c);
                if (tn.requires_grad) {
                    ensure_adj(tn.adj, tn.val);
                    // lattice tiles keep the written adjoint rows cache-hot;
                    // per element the s accumulation order stays ascending
                    const std::size_t tile = 512;
                    for (int c = 0; c < tn.val.ncomp; ++c) {
                        if (!live[static_cast<std::size_t>(c)]) continue;
                        const double* gp = g.plane(c);
                        double* ta = tn.adj.plane(c);
                        for (std::size_t m0 = 0; m0 < lattice; m0 += tile) {
                            const std::size_t m1 = std::min(lattice, m0 + tile);
                            for (std::size_t s = 0; s < nrow; ++s) {
                                const double* grow = gp + s * lattice;
                                const double* br = bp + s * p;
                                for (std::size_t m = m0; m < m1; ++m) {
                                    const double a = grow[m];
                                    double* __restrict row = ta + m * p;
                                    for (std::size_t k = 0; k < p; ++k) row[k] += a * br[k];
                                }
                            }
                        }
                    }
                }
                if (bn.requires_grad) {
                    ensure_adj(bn.adj, bn.val);
                    double* ba = bn.adj.plane(0);
                    // lattice blocks keep the trunk tile cache-resident; the
                    // per-element accumulation order stays ascending in m
                    const std::size_t blk = 512;
                    for (int c = 0; c < tn.val.ncomp; ++c) {
                        if (!live[static_cast<std::size_t>(c)]) continue;
                        const double* gp = g.plane(c);
                        const double* tp = tn.val.plane(c);
                        for (std::size_t m0 = 0; m0 < lattice; m0 += blk) {
                            const std::size_t m1 = std::min(lattice, m0 + blk);
                            parallel_for(nrow, nrow * (m1 - m0) * p, [&](std::size_t s) {
                                double* row = ba + s * p;
                                const double* grow = gp + s * lattice;
                                for (std::size_t m = m0; m < m1; ++m) {
                                    const double a = grow[m];
                                    const double* tr = tp + m * p;
                                    for (std::size_t k = 0; k < p; ++k) row[k] += a * tr[k];
                                }
                            });
                        }
                    }
                }
                break;
            }
            case Op::PairDot: {
                Node& bn = nodes_[n.parents[0]];
                Node& tn = nodes_[n.parents[1]];
                const std::size_t rows = bn.val.shape[0], p = bn.val.shape[1];
                if (tn.requires_grad) {
                    ensure_adj(tn.adj, tn.val);
                    const double* bp = bn.val.plane(0);
                    for (int c = 0; c < tn.val.ncomp; ++c) {
                        const double* gp = g.plane(c);
                        double* ta = tn.adj.plane(c);
                        for (std::size_t rr = 0; rr < rows; ++rr)
                            for (std::size_t k = 0; k < p; ++k) ta[rr * p + k] += gp[rr] * bp[rr * p + k];
                    }
                }
                if (bn.requires_grad) {
                    ensure_adj(bn.adj, bn.val);
                    double* ba = bn.adj.plane(0);
                    for (int c = 0; c < tn.val.ncomp; ++c) {
                        const double* gp = g.plane(c);
                        const double* tp = tn.val.plane(c);
                        for (std::size_t rr = 0; rr < rows; ++rr)
                            for (std::size_t k = 0; k < p; ++k) ba[rr * p + k] += gp[rr] * tp[rr * p + k];
                    }
                }
                break;
            }
            case Op::Extract: {
                Node& xn = nodes_[n.parents[0]];
                if (!xn.requires_grad) break;
                ensure_adj(xn.adj, xn.val);
                const double* gp = g.plane(0);
                double* ap = xn.adj.plane(static_cast<int>(n.i0));
                for (std::size_t i = 0; i < xn.val.numel(); ++i) ap[i] += gp[i];
                break;
            }
            case Op::SliceCols: {
                Node& xn = nodes_[n.parents[0]];
                if (!xn.requires_grad) break;
                ensure_adj(xn.adj, xn.val);
                const std::size_t rows = xn.val.shape[0], cols = xn.val.shape[1];
                const std::size_t w = n.i1 - n.i0;
                for (int c = 0; c < xn.val.ncomp && c < g.ncomp; ++c) {
                    const double* gp = g.plane(c);
                    double* ap = xn.adj.plane(c);
                    for (std::size_t rr = 0; rr < rows; ++rr)
                        for (std::size_t j = 0; j < w; ++j) ap[rr * cols + n.i0 + j] += gp[rr * w + j];
                }
                break;
            }
            case Op::RowBcastMul: {
                Node& xn = nodes_[n.parents[0]];
                Node& wn = nodes_[n.parents[1]];
                const std::size_t rows = xn.val.shape[0], cols = xn.val.shape[1];
                const double* gp = g.plane(0);
                if (xn.requires_grad) {
                    ensure_adj(xn.adj, xn.val);
                    const double* ww = wn.val.plane(0);
                    double* ap = xn.adj.plane(0);
                    for (std::size_t rr = 0; rr < rows; ++rr)
                        for (std::size_t j = 0; j < cols; ++j) ap[rr * cols + j] += gp[rr * cols + j] * ww[j];
                }
                if (wn.requires_grad) {
                    ensure_adj(wn.adj, wn.val);
                    const double* xp = xn.val.plane(0);
                    double* wa = wn.adj.plane(0);
                    for (std::size_t rr = 0; rr < rows; ++rr)
                        for (std::size_t j = 0; j < cols; ++j) wa[j] += gp[rr * cols + j] * xp[rr * cols + j];
                }
                break;
            }
            case Op::ColBcastSub: {
                Node& xn = nodes_[n.parents[0]];
                Node& vn = nodes_[n.parents[1]];
                const std::size_t rows = xn.val.shape[0], cols = xn.val.shape[1];
                const double* gp = g.plane(0);
                if (xn.requires_grad) {
                    ensure_adj(xn.adj, xn.val);
                    double* ap = xn.adj.plane(0);
                    for (std::size_t i = 0; i < rows * cols; ++i) ap[i] += gp[i];
                }
                if (vn.requires_grad) {
                    ensure_adj(vn.adj, vn.val);
                    double* va = vn.adj.plane(0);
                    for (std::size_t rr = 0; rr < rows; ++rr) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < cols; ++j) acc += gp[rr * cols + j];
                        va[rr] -= acc;
                    }
                }
                break;
            }
            case Op::MeanSq: {
                Node& xn = nodes_[n.parents[0]];
                if (!xn.requires_grad) break;
                ensure_adj(xn.adj, xn.val);
                const double scale = 2.0 * g.plane(0)[0] / static_cast<double>(xn.val.numel());
                const double* xp = xn.val.plane(0);
                double* ap = xn.adj.plane(0);
                for (std::size_t i = 0; i < xn.val.numel(); ++i) ap[i] += scale * xp[i];
                break;
            }
            case Op::MeanAll: {
                Node& xn = nodes_[n.parents[0]];
                if (!xn.requires_grad) break;
                ensure_adj(xn.adj, xn.val);
                const double scale = g.plane(0)[0] / static_cast<double>(xn.val.numel());
                double* ap = xn.adj.plane(0);
                for (std::size_t i = 0; i < xn.val.numel(); ++i) ap[i] += scale;
                break;
            }
            case Op::Lincomb: {
                const double g0 = g.plane(0)[0];
                for (std::size_t i = 0; i < n.parents.size(); ++i) {
                    Node& pn = nodes_[n.parents[i]];
                    if (!pn.requires_grad) continue;
                    ensure_adj(pn.adj, pn.val);
                    pn.adj.plane(0)[0] += n.weights[i] * g0;
                }
                break;
            }
            case Op::Leaf:
                break;
        }
        // Interior adjoints and values are dead once their node is processed:
        // every consumer sits later on the tape and has already run.
        if (n.op != Op::Leaf) {
            n.adj = TapeValue{};
            n.val.buf = {};
        }
    }
}

static std::vector<Tensor> grad_impl(const LossBuilder& build, std::span<const Tensor> params,
                                     double* loss_value) {
    Tape tape;
    std::vector<Tape::Id> ids;
    ids.reserve(params.size());
    for (const Tensor& t : params) ids.push_back(tape.input(t, true));
    Tape::Id loss = build(tape, ids);
    if (loss_value) *loss_value = tape.scalar_value(loss);
    tape.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) grads.push_back(tape.grad_tensor(ids[i]));
    return grads;
}

std::vector<Tensor> grad_params(const LossBuilder& build, std::span<const Tensor> params,
                                double* loss_value) {
    return grad_impl(build, params, loss_value);
}

std::vector<Tensor> grad_params_through_jvp2(const LossBuilder& build,
                                             std::span<const Tensor> params, double* loss_value) {
    return grad_impl(build, params, loss_value);
}

} // namespace sepdon
