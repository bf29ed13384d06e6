#ifndef SGP_DETAIL_ENGINE_HPP
#define SGP_DETAIL_ENGINE_HPP

// Shared evaluation of every tractable objective of the form
//
//   collapsed:    log N(y; 0, Q_ff + R) + penalty(D blocks, sigma2, m)
//   uncollapsed:  -KL[q||p] + sum_b E_q log N(y_b; Psi_b u, R_b) + penalty
//
// with R_b = c * D_bb + sigma2 I (c = 0 for VI, c = alpha * m for Power-EP),
// together with reverse-mode adjoints with respect to K_ff blocks, K_fu,
// K_uu, sigma2, m and the q(u) parameters.

#include <cmath>
#include <optional>
#include <vector>

#include "../data.hpp"
#include "../kernel.hpp"
#include "../linalg.hpp"
#include "../model.hpp"

namespace sgp {

/// Objective value split into its data-fit and regularizer parts.
struct BoundBreakdown {
    double total = 0.0;
    double fit_term = 0.0;
    double regularizer = 0.0;
    double jitter_used = 0.0;
};

namespace detail {

enum class Penalty {
    Trace,     // -(1/2 s2) sum_n d_nn
    DiagLog,   // -1/2 sum_n log(1 + d_nn / s2)
    BlockLog,  // -1/2 sum_b log|I + D_bb / s2|
    SharedLog, // -(B/2) log|I + (1/(B s2)) sum_b D_bb|
    Pep,       // -((1-a)/2a) sum_b log|I + a m D_bb / s2| - (N/2a) log(1 + a(m-1)) + (N/2) log m
};

struct Family {
    Penalty penalty = Penalty::Trace;
    double alpha = 0.0;
    double m = 1.0;
    bool inflate = false;     // R_b includes alpha * m * D_bb
    bool m_trainable = false; // report d/dm

    double c() const { return inflate ? alpha * m : 0.0; }
};

struct Block {
    std::vector<int> idx;
    Matrix x;   // Nb x D
    Vector y;   // Nb
    Matrix kfu; // Nb x M
    Matrix v;   // M x Nb, L^{-1} K_uf
    Matrix psi; // Nb x M, K_fu K_uu^{-1}
    Matrix kff; // Nb x Nb
    Matrix d;   // Nb x Nb, diagonal clamped at 0
};

struct Cache {
    int n = 0;
    double sigma2 = 0.0;
    Matrix z;
    Matrix kuu;
    CholeskyFactor luu;
    std::vector<Block> blocks;
    std::size_t total_blocks = 0;
    double clamped = 0.0;
};

inline Cache build_cache(const Dataset& data, const ModelState& state, const Partition& part,
                         const std::vector<std::size_t>& which)
{
    state.validate();
    if (data.dim() != state.dim())
        throw DimensionMismatch("data has " + std::to_string(data.dim()) + " columns, model expects " +
                                std::to_string(state.dim()));
    if (part.num_points() != data.size())
        throw DimensionMismatch("partition covers " + std::to_string(part.num_points()) + " points, data has " +
                                std::to_string(data.size()));
    Cache c;
    c.n = static_cast<int>(data.size());
    c.sigma2 = state.sigma2();
    c.z = state.inducing;
    c.kuu = kernel_matrix(c.z, c.z, state.kernel);
    c.luu = chol(c.kuu);
    c.total_blocks = part.num_blocks();
    c.blocks.reserve(which.size());
    for (std::size_t b : which) {
        if (b >= part.num_blocks())
            throw IndexOutOfRange("block index " + std::to_string(b) + " out of range (B = " +
                                  std::to_string(part.num_blocks()) + ")");
        Block blk;
        blk.idx = part.block(b);
        const Index nb = static_cast<Index>(blk.idx.size());
        blk.x.resize(nb, data.dim());
        blk.y.resize(nb);
        for (Index i = 0; i < nb; ++i) {
            blk.x.row(i) = data.X.row(blk.idx[static_cast<std::size_t>(i)]);
            blk.y(i) = data.y(blk.idx[static_cast<std::size_t>(i)]);
        }
        blk.kfu = kernel_matrix(blk.x, c.z, state.kernel);
        blk.v = c.luu.solve_lower(blk.kfu.transpose());
        blk.psi = c.luu.solve_upper(blk.v).transpose();
        blk.kff = kernel_matrix(blk.x, blk.x, state.kernel);
        blk.d = blk.kff;
        blk.d.noalias() -= blk.v.transpose() * blk.v;
        blk.d = symmetrize(blk.d);
        for (Index i = 0; i < nb; ++i)
            if (blk.d(i, i) < 0.0) {
                c.clamped += -blk.d(i, i);
                blk.d(i, i) = 0.0;
            }
        c.blocks.push_back(std::move(blk));
    }
    return c;
}

inline std::vector<std::size_t> all_blocks(const Partition& p)
{
    std::vector<std::size_t> w(p.num_blocks());
    for (std::size_t b = 0; b < w.size(); ++b)
        w[b] = b;
    return w;
}

struct Adjoints {
    std::vector<Matrix> kff;
    std::vector<Matrix> kfu;
    Matrix kuu;
    double sigma2 = 0.0;
    double m = 0.0;
    Vector q_mean;
    Matrix q_lower;

    void init(const Cache& c)
    {
        const Index mm = c.kuu.rows();
        kuu = Matrix::Zero(mm, mm);
        kff.clear();
        kfu.clear();
        for (const auto& b : c.blocks) {
            kff.push_back(Matrix::Zero(b.kff.rows(), b.kff.cols()));
            kfu.push_back(Matrix::Zero(b.kfu.rows(), b.kfu.cols()));
        }
    }
};

struct Evaluation {
    BoundBreakdown value;
    std::optional<Adjoints> adj;
};

/// Adds the penalty value and its adjoints. `scale` multiplies the per-block
/// part; the N-proportional Power-EP terms are added unscaled when `global`.
inline double add_penalty(const Cache& c, const Family& f, double scale, bool global, Adjoints* adj,
                          std::vector<Matrix>& dbar)
{
    const double s2 = c.sigma2;
    double pen = 0.0;
    switch (f.penalty) {
    case Penalty::Trace:
        for (std::size_t b = 0; b < c.blocks.size(); ++b) {
            const double tr = c.blocks[b].d.trace();
            pen += -scale * tr / (2.0 * s2);
            if (adj) {
                dbar[b].diagonal().array() += -scale / (2.0 * s2);
                adj->sigma2 += scale * tr / (2.0 * s2 * s2);
            }
        }
        break;
    case Penalty::DiagLog:
        for (std::size_t b = 0; b < c.blocks.size(); ++b) {
            const Vector dd = c.blocks[b].d.diagonal();
            for (Index i = 0; i < dd.size(); ++i) {
                pen += -0.5 * scale * std::log1p(dd(i) / s2);
                if (adj) {
                    dbar[b](i, i) += -0.5 * scale / (s2 + dd(i));
                    adj->sigma2 += 0.5 * scale * (1.0 / s2 - 1.0 / (s2 + dd(i)));
                }
            }
        }
        break;
    case Penalty::BlockLog:
        for (std::size_t b = 0; b < c.blocks.size(); ++b) {
            const Matrix& d = c.blocks[b].d;
            Matrix j = d / s2;
            j.diagonal().array() += 1.0;
            const CholeskyFactor lj = chol(j);
            pen += -0.5 * scale * logdet(lj);
            if (adj) {
                const Matrix jinv = lj.inverse();
                dbar[b] += -0.5 * scale / s2 * jinv;
                adj->sigma2 += 0.5 * scale * jinv.cwiseProduct(d).sum() / (s2 * s2);
            }
        }
        break;
    case Penalty::SharedLog: {
        if (c.blocks.size() != c.total_blocks)
            throw InvalidArgument("shared-block penalty needs every block");
        const Index nb = c.blocks.front().d.rows();
        Matrix mean_d = Matrix::Zero(nb, nb);
        for (const auto& blk : c.blocks) {
            if (blk.d.rows() != nb)
                throw InvalidArgument("shared-block bound requires equal block sizes");
            mean_d += blk.d;
        }
        const double nblocks = static_cast<double>(c.blocks.size());
        mean_d /= nblocks;
        Matrix j = mean_d / s2;
        j.diagonal().array() += 1.0;
        const CholeskyFactor lj = chol(j);
        pen += -0.5 * scale * nblocks * logdet(lj);
        if (adj) {
            const Matrix jinv = lj.inverse();
            for (auto& db : dbar)
                db += -0.5 * scale / s2 * jinv;
            adj->sigma2 += 0.5 * scale * nblocks * jinv.cwiseProduct(mean_d).sum() / (s2 * s2);
        }
        break;
    }
    case Penalty::Pep: {
        const double a = f.alpha;
        const double m = f.m;
        const double k = (1.0 - a) / (2.0 * a);
        if (!(1.0 + a * (m - 1.0) > 0.0))
            throw InvalidArgument("m_scale: 1 + alpha (m - 1) must be positive");
        if (k != 0.0) {
            const double g = a * m / s2;
            double gbar = 0.0;
            for (std::size_t b = 0; b < c.blocks.size(); ++b) {
                const Matrix& d = c.blocks[b].d;
                Matrix j = g * d;
                j.diagonal().array() += 1.0;
                const CholeskyFactor lj = chol(j);
                pen += -scale * k * logdet(lj);
                if (adj) {
                    const Matrix jinv = lj.inverse();
                    dbar[b] += -scale * k * g * jinv;
                    gbar += -scale * k * jinv.cwiseProduct(d).sum();
                }
            }
            if (adj) {
                adj->sigma2 += gbar * (-g / s2);
                adj->m += gbar * (a / s2);
            }
        }
        if (global) {
            const double n = static_cast<double>(c.n);
            pen += -n / (2.0 * a) * std::log1p(a * (m - 1.0)) + 0.5 * n * std::log(m);
            if (adj)
                adj->m += -0.5 * n / (1.0 + a * (m - 1.0)) + 0.5 * n / m;
        }
        break;
    }
    }
    return pen;
}

/// Pushes D_bb adjoints through D_bb = K_ff,bb - Psi_b K_uf,b.
inline void chain_gap(const Cache& c, const std::vector<Matrix>& dbar, Adjoints& adj)
{
    for (std::size_t b = 0; b < c.blocks.size(); ++b) {
        const Matrix& psi = c.blocks[b].psi;
        adj.kff[b] += dbar[b];
        adj.kfu[b].noalias() += -2.0 * dbar[b] * psi;
        adj.kuu.noalias() += psi.transpose() * dbar[b] * psi;
    }
}

inline Evaluation collapsed(const Cache& c, const Family& f, bool want_grad)
{
    const Index mm = c.kuu.rows();
    const double s2 = c.sigma2;
    const double cc = f.c();
    const std::size_t nb = c.blocks.size();
    if (nb != c.total_blocks)
        throw InvalidArgument("collapsed objective needs every block");

    std::vector<CholeskyFactor> lr(nb);
    std::vector<Matrix> rinv_vt(nb);
    std::vector<Vector> rinv_y(nb);
    Matrix inner = Matrix::Identity(mm, mm);
    Vector cvec = Vector::Zero(mm);
    double logdet_r = 0.0, quad_r = 0.0;
    double jitter = c.luu.jitter_used;
    for (std::size_t b = 0; b < nb; ++b) {
        const Block& blk = c.blocks[b];
        Matrix r = cc * blk.d;
        r.diagonal().array() += s2;
        lr[b] = chol(r);
        jitter = std::max(jitter, lr[b].jitter_used);
        rinv_vt[b] = lr[b].solve(blk.v.transpose());
        rinv_y[b] = lr[b].solve(blk.y);
        inner.noalias() += blk.v * rinv_vt[b];
        cvec.noalias() += blk.v * rinv_y[b];
        logdet_r += logdet(lr[b]);
        quad_r += blk.y.dot(rinv_y[b]);
    }
    const CholeskyFactor lb = chol(inner);
    jitter = std::max(jitter, lb.jitter_used);
    const Vector w = lb.solve(cvec);
    const double quad = quad_r - cvec.dot(w);
    const double fit = -0.5 * (static_cast<double>(c.n) * kLog2Pi + logdet_r + logdet(lb) + quad);

    Evaluation out;
    std::vector<Matrix> dbar;
    Adjoints* adj = nullptr;
    if (want_grad) {
        out.adj.emplace();
        adj = &*out.adj;
        adj->init(c);
        for (const auto& blk : c.blocks)
            dbar.push_back(Matrix::Zero(blk.d.rows(), blk.d.cols()));
    }
    const double pen = add_penalty(c, f, 1.0, true, adj, dbar);
    out.value = {fit + pen, fit, pen, std::max(jitter, 0.0)};
    if (!want_grad)
        return out;

    // dF/dSigma = 1/2 (beta beta^T - Sigma^{-1}),  Sigma = Q + R.
    const Matrix inner_inv = lb.inverse();
    std::vector<Vector> beta(nb);
    std::vector<Matrix> sinv_psi(nb);
    Matrix wsum = Matrix::Zero(mm, mm);
    Vector beta_psi = Vector::Zero(mm);
    for (std::size_t b = 0; b < nb; ++b) {
        beta[b] = rinv_y[b] - rinv_vt[b] * w;
        wsum.noalias() += rinv_vt[b].transpose() * c.blocks[b].psi;
        beta_psi.noalias() += c.blocks[b].psi.transpose() * beta[b];
    }
    const Matrix correction = inner_inv * wsum;
    Matrix psi_sinv_psi = Matrix::Zero(mm, mm);
    double cbar = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
        const Block& blk = c.blocks[b];
        sinv_psi[b] = lr[b].solve(blk.psi) - rinv_vt[b] * correction;
        psi_sinv_psi.noalias() += blk.psi.transpose() * sinv_psi[b];
        adj->kfu[b] += beta[b] * beta_psi.transpose() - sinv_psi[b];

        Matrix sinv_bb = lr[b].inverse();
        sinv_bb.noalias() -= rinv_vt[b] * inner_inv * rinv_vt[b].transpose();
        const Matrix g = 0.5 * (beta[b] * beta[b].transpose() - sinv_bb);
        adj->sigma2 += g.trace();
        if (cc != 0.0 || f.inflate) {
            dbar[b] += cc * g;
            cbar += g.cwiseProduct(blk.d).sum();
        }
    }
    adj->kuu += -0.5 * (beta_psi * beta_psi.transpose() - psi_sinv_psi);
    if (f.inflate)
        adj->m += f.alpha * cbar;
    chain_gap(c, dbar, *adj);
    return out;
}

/// Uncollapsed objective over the cached blocks: -KL + scale * sum_b (ELL_b + pen_b) + global terms.
inline Evaluation uncollapsed(const Cache& c, const Family& f, const GaussianQU& q, double scale, bool want_grad)
{
    const Index mm = c.kuu.rows();
    if (q.size() != mm || q.cov_chol.size() != mm)
        throw DimensionMismatch("q(u) dimension does not match the number of inducing points");
    const double s2 = c.sigma2;
    const double cc = f.c();
    const Matrix& ls = q.cov_chol.lower;
    const Vector& mu = q.mean;

    const Matrix a_ls = c.luu.solve_lower(ls);
    const Vector a_mu = c.luu.solve_lower(mu);
    double logdet_s = 0.0;
    for (Index i = 0; i < mm; ++i)
        logdet_s += 2.0 * std::log(std::abs(ls(i, i)));
    const double kl =
        0.5 * (a_ls.squaredNorm() + a_mu.squaredNorm() - static_cast<double>(mm) + logdet(c.luu) - logdet_s);

    Evaluation out;
    std::vector<Matrix> dbar;
    Adjoints* adj = nullptr;
    Matrix kuu_inv, s, sum_psi_rinv_psi;
    if (want_grad) {
        out.adj.emplace();
        adj = &*out.adj;
        adj->init(c);
        for (const auto& blk : c.blocks)
            dbar.push_back(Matrix::Zero(blk.d.rows(), blk.d.cols()));
        kuu_inv = c.luu.inverse();
        s = ls * ls.transpose();
        sum_psi_rinv_psi = Matrix::Zero(mm, mm);
        adj->q_mean = -kuu_inv * mu;
    }

    double ell = 0.0;
    double jitter = c.luu.jitter_used;
    double cbar = 0.0;
    for (std::size_t b = 0; b < c.blocks.size(); ++b) {
        const Block& blk = c.blocks[b];
        const Index nbk = blk.y.size();
        Matrix r = cc * blk.d;
        r.diagonal().array() += s2;
        const CholeskyFactor lr = chol(r);
        jitter = std::max(jitter, lr.jitter_used);
        const Vector resid = blk.y - blk.psi * mu;
        const Matrix p = blk.psi * ls;
        const Vector lr_resid = lr.solve_lower(resid);
        const Matrix lr_p = lr.solve_lower(p);
        ell += -0.5 * scale *
               (static_cast<double>(nbk) * kLog2Pi + logdet(lr) + lr_resid.squaredNorm() + lr_p.squaredNorm());
        if (!want_grad)
            continue;

        const Vector rinv_resid = lr.solve(resid);
        const Matrix rinv_psi = lr.solve(blk.psi);
        adj->q_mean.noalias() += scale * blk.psi.transpose() * rinv_resid;
        sum_psi_rinv_psi.noalias() += scale * blk.psi.transpose() * rinv_psi;

        const Matrix psi_bar = scale * (rinv_resid * mu.transpose() - rinv_psi * s);
        adj->kfu[b].noalias() += psi_bar * kuu_inv;
        adj->kuu.noalias() += -blk.psi.transpose() * psi_bar * kuu_inv;

        const Matrix rinv = lr.inverse();
        const Matrix pp = p * p.transpose();
        Matrix outer = resid * resid.transpose() + pp;
        const Matrix g = 0.5 * scale * (-rinv + rinv * outer * rinv);
        adj->sigma2 += g.trace();
        if (f.inflate) {
            dbar[b] += cc * g;
            cbar += g.cwiseProduct(blk.d).sum();
        }
    }

    const double pen = add_penalty(c, f, scale, true, adj, dbar);
    out.value = {ell - kl + pen, ell, -kl + pen, jitter};
    if (!want_grad)
        return out;

    // -KL adjoint with respect to K_uu.
    const Matrix second = s + mu * mu.transpose();
    adj->kuu += 0.5 * (kuu_inv * second * kuu_inv - kuu_inv);
    // dF/dL_S = (-K_uu^{-1} - sum Psi^T R^{-1} Psi) L_S + L_S^{-T}
    const Matrix ls_inv_t =
        ls.transpose().triangularView<Eigen::Upper>().solve(Matrix::Identity(mm, mm));
    adj->q_lower = ((-kuu_inv - sum_psi_rinv_psi) * ls + ls_inv_t).triangularView<Eigen::Lower>();
    if (f.inflate)
        adj->m += f.alpha * cbar;
    chain_gap(c, dbar, *adj);
    return out;
}

/// Gradient with respect to the model's unconstrained parameters.
struct ParamGradient {
    Vector log_lengthscales;
    double log_signal_variance = 0.0;
    double log_noise_variance = 0.0;
    double log_m = 0.0;
    Matrix inducing;
};

inline ParamGradient chain_params(const Cache& c, const ModelState& state, const Adjoints& adj)
{
    ParamGradient g;
    KernelGradient kg(state.dim());
    g.inducing = Matrix::Zero(c.z.rows(), c.z.cols());
    for (std::size_t b = 0; b < c.blocks.size(); ++b) {
        const Block& blk = c.blocks[b];
        kg.add_hyper(blk.x, c.z, blk.kfu, adj.kfu[b], state.kernel);
        kg.add_hyper(blk.x, blk.x, blk.kff, adj.kff[b], state.kernel);
        add_cross_input_grad(blk.x, c.z, blk.kfu, adj.kfu[b], state.kernel, g.inducing);
    }
    kg.add_hyper(c.z, c.z, c.kuu, adj.kuu, state.kernel);
    add_self_input_grad(c.z, c.kuu, adj.kuu, state.kernel, g.inducing);
    g.log_lengthscales = kg.log_lengthscales;
    g.log_signal_variance = kg.log_signal_variance;
    g.log_noise_variance = adj.sigma2 * c.sigma2;
    g.log_m = adj.m * state.m();
    return g;
}

} // namespace detail
} // namespace sgp

#endif
