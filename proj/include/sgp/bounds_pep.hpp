#ifndef SGP_BOUNDS_PEP_HPP
#define SGP_BOUNDS_PEP_HPP

#include <cmath>
#include <string>
#include <vector>

#include "bounds_vi.hpp"

namespace sgp {

struct PepConfig {
    double alpha = 0.5;
    double m_scale = 1.0;
    Partition partition;

    void validate(Index n) const
    {
        if (!(alpha > 0.0 && alpha <= 1.0))
            throw InvalidArgument("alpha: must lie in (0, 1], got " + std::to_string(alpha));
        if (!(m_scale > 0.0) || !std::isfinite(m_scale))
            throw InvalidArgument("m_scale: must be positive, got " + std::to_string(m_scale));
        if (!(1.0 + alpha * (m_scale - 1.0) > 0.0))
            throw InvalidArgument("m_scale: 1 + alpha (m - 1) must be positive");
        if (partition.num_points() != n)
            throw DimensionMismatch("partition covers " + std::to_string(partition.num_points()) +
                                    " points, data has " + std::to_string(n));
    }
};

namespace detail {

inline Family pep_family(double alpha, double m)
{
    Family f;
    f.penalty = Penalty::Pep;
    f.alpha = alpha;
    f.m = m;
    f.inflate = true;
    return f;
}

} // namespace detail

/// Power-EP energy with the standard conditional (m = 1); `cfg.m_scale` is ignored.
inline BoundBreakdown pep_collapsed(const Dataset& data, const ModelState& state, const PepConfig& cfg)
{
    PepConfig c = cfg;
    c.m_scale = 1.0;
    c.validate(data.size());
    return detail::collapsed_value(data, state, c.partition, detail::pep_family(c.alpha, 1.0));
}

/// Power-EP energy with the conditional covariance scaled by m.
inline BoundBreakdown tpep_collapsed(const Dataset& data, const ModelState& state, const PepConfig& cfg)
{
    cfg.validate(data.size());
    return detail::collapsed_value(data, state, cfg.partition, detail::pep_family(cfg.alpha, cfg.m_scale));
}

/// alpha * m * blkdiag(D_bb) + sigma2 I
inline BlockDiagonalPlusScalar tpep_likelihood_cov(const Dataset& data, const ModelState& state,
                                                   const PepConfig& cfg)
{
    cfg.validate(data.size());
    const detail::Cache c = detail::build_cache(data, state, cfg.partition, detail::all_blocks(cfg.partition));
    BlockDiagonalPlusScalar r;
    r.scalar = c.sigma2;
    for (const auto& blk : c.blocks) {
        r.part.index.push_back(blk.idx);
        r.part.blocks.push_back(cfg.alpha * cfg.m_scale * blk.d);
    }
    return r;
}

inline GaussianQU tpep_optimal_qu(const Dataset& data, const ModelState& state, const PepConfig& cfg)
{
    return optimal_qu(data, state, tpep_likelihood_cov(data, state, cfg));
}

inline BoundBreakdown tpep_uncollapsed(const Dataset& data, const ModelState& state, const PepConfig& cfg,
                                       const GaussianQU& q)
{
    cfg.validate(data.size());
    const detail::Cache c = detail::build_cache(data, state, cfg.partition, detail::all_blocks(cfg.partition));
    return detail::uncollapsed(c, detail::pep_family(cfg.alpha, cfg.m_scale), q, 1.0, false).value;
}

/// Dense evaluation of the Power-EP energy for an arbitrary block-diagonal
/// scaling M, using C = D^{1/2} M D^{1/2} and its diagonal blocks.
inline BoundBreakdown general_pep_oracle(const Dataset& data, const ModelState& state, double alpha,
                                         const Partition& part, const BlockDiagonal& mmat)
{
    const Index n = data.size();
    if (n > kOracleCap)
        throw InvalidArgument("general_pep_oracle: N = " + std::to_string(n) + " exceeds the oracle cap of " +
                              std::to_string(kOracleCap));
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw InvalidArgument("alpha: must lie in (0, 1], got " + std::to_string(alpha));
    if (part.num_points() != n)
        throw DimensionMismatch("general_pep_oracle: partition does not match data");
    if (mmat.count() != part.num_blocks())
        throw DimensionMismatch("general_pep_oracle: M has " + std::to_string(mmat.count()) + " blocks, partition has " +
                                std::to_string(part.num_blocks()));
    const double s2 = state.sigma2();
    const ConditionalGap gap = conditional_gap(data.X, state.inducing, state.kernel);
    const Matrix d_sqrt = SymmetricEigen(gap.d).sqrt();
    BlockDiagonal m_dense;
    m_dense.index = part.blocks();
    m_dense.blocks = mmat.blocks;
    const Matrix c = symmetrize(d_sqrt * m_dense.dense(n) * d_sqrt);

    Matrix cov = kernel_matrix(data.X, data.X, state.kernel) - gap.d;
    double reg = 0.0;
    double jitter = gap.jitter_used;
    const double k = (1.0 - alpha) / (2.0 * alpha);
    for (std::size_t b = 0; b < part.num_blocks(); ++b) {
        const auto& idx = part.block(b);
        const Index nb = static_cast<Index>(idx.size());
        if (mmat.blocks[b].rows() != nb || mmat.blocks[b].cols() != nb)
            throw DimensionMismatch("general_pep_oracle: block " + std::to_string(b) + " of M has the wrong size");
        Matrix cbb(nb, nb);
        for (Index i = 0; i < nb; ++i)
            for (Index j = 0; j < nb; ++j) {
                cbb(i, j) = c(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
                cov(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]) += alpha * cbb(i, j);
            }
        Matrix j1 = alpha / s2 * cbb;
        j1.diagonal().array() += 1.0;
        Matrix j2 = alpha * mmat.blocks[b];
        j2.diagonal().array() += 1.0 - alpha;
        const CholeskyFactor l1 = chol(j1), l2 = chol(j2), l3 = chol(mmat.blocks[b]);
        jitter = std::max({jitter, l1.jitter_used, l2.jitter_used, l3.jitter_used});
        reg += -k * logdet(l1) - logdet(l2) / (2.0 * alpha) + 0.5 * logdet(l3);
    }
    cov.diagonal().array() += s2;
    const double fit = dense_gauss_logpdf(data.y, symmetrize(cov));
    return {fit + reg, fit, reg, jitter};
}

/// Scalar multiple of identity blocks, one per partition block.
inline BlockDiagonal scaled_identity_blocks(const Partition& part, double m)
{
    BlockDiagonal out;
    for (const auto& idx : part.blocks()) {
        out.index.push_back(idx);
        const Index nb = static_cast<Index>(idx.size());
        out.blocks.push_back(m * Matrix::Identity(nb, nb));
    }
    return out;
}

struct FixedPointReport {
    std::size_t blocks_checked = 0;
    double max_deviation = 0.0; // relative, over precision and linear parameters
};

/// Checks, block by block, that the alpha-fraction of the site with
/// g_b = y_b and v_b = alpha m D_bb + sigma2 I equals the contribution of
/// p^alpha(y_b | f_b) integrated against q(f_b | u). Throws FixedPointMismatch.
inline FixedPointReport verify_site_fixed_point(const Dataset& data, const ModelState& state, const PepConfig& cfg,
                                                double rtol = 1e-7)
{
    cfg.validate(data.size());
    if (data.size() > kOracleCap)
        throw InvalidArgument("verify_site_fixed_point: N exceeds the oracle cap of " + std::to_string(kOracleCap));
    const detail::Cache c = detail::build_cache(data, state, cfg.partition, detail::all_blocks(cfg.partition));
    const double a = cfg.alpha / c.sigma2;
    FixedPointReport rep;
    for (const auto& blk : c.blocks) {
        // Integral route: with C_bb = V diag(c) V^T the integral is proportional to
        // N(y_b; h, C_bb + I / a) in h = K_fu K_uu^{-1} u.
        const Matrix cbb = cfg.m_scale * blk.d;
        const SymmetricEigen e(cbb);
        const Vector w = (a / (1.0 + a * e.values.array())).matrix();
        const Matrix prec_int = e.vectors * w.asDiagonal() * e.vectors.transpose();
        const Vector lin_int = prec_int * blk.y;

        // Site route: alpha v_b^{-1} and alpha v_b^{-1} g_b.
        Matrix vb = cfg.alpha * cbb;
        vb.diagonal().array() += c.sigma2;
        const CholeskyFactor lv = chol(vb);
        const Matrix prec_site = cfg.alpha * lv.inverse();
        const Vector lin_site = cfg.alpha * lv.solve(blk.y);

        const double dp = (prec_int - prec_site).cwiseAbs().maxCoeff() / std::max(prec_site.cwiseAbs().maxCoeff(), 1e-300);
        const double scale_l = std::max(lin_site.cwiseAbs().maxCoeff(), prec_site.cwiseAbs().maxCoeff() * blk.y.cwiseAbs().maxCoeff());
        const double dl = (lin_int - lin_site).cwiseAbs().maxCoeff() / std::max(scale_l, 1e-300);
        rep.max_deviation = std::max({rep.max_deviation, dp, dl});
        ++rep.blocks_checked;
    }
    if (!(rep.max_deviation <= rtol))
        throw FixedPointMismatch("site natural parameters deviate from the integral by " +
                                     std::to_string(rep.max_deviation),
                                 rep.max_deviation);
    return rep;
}

/// t_b(u) = N(K_{f_b u} K_uu^{-1} u; g, v)
struct SiteFactor {
    std::size_t block = 0;
    Vector g;
    Matrix v;
};

struct PepResult {
    GaussianQU q;
    std::vector<SiteFactor> sites;
    double energy = 0.0;
    bool converged = false;
    int sweeps = 0;
    double last_change = 0.0;
};

namespace detail {

/// log-normalizer of a Gaussian in natural parameters, without the (M/2) log 2 pi term.
inline double gauss_log_normalizer(const Matrix& prec, const Vector& lin)
{
    const CholeskyFactor l = chol(prec);
    const Vector z = l.solve_lower(lin);
    return 0.5 * z.squaredNorm() - 0.5 * logdet(l);
}

} // namespace detail

/// Sequential damped Power-EP over the blocks of cfg.partition, in whitened
/// coordinates w = L^{-1} u so that each site acts through V_b^T = K_{f_b u} L^{-T}.
inline PepResult pep_iterate(const Dataset& data, const ModelState& state, const PepConfig& cfg,
                             double damping = 0.5, int max_sweeps = 200, double tol = 1e-8)
{
    cfg.validate(data.size());
    if (data.size() > 500)
        throw InvalidArgument("pep_iterate: N = " + std::to_string(data.size()) + " exceeds the desk-scale cap of 500");
    if (!(damping > 0.0 && damping <= 1.0))
        throw InvalidArgument("damping: must lie in (0, 1], got " + std::to_string(damping));
    if (max_sweeps < 1)
        throw InvalidArgument("max_sweeps: must be positive");
    const detail::Cache c = detail::build_cache(data, state, cfg.partition, detail::all_blocks(cfg.partition));
    const Index mm = c.kuu.rows();
    const double alpha = cfg.alpha, s2 = c.sigma2;
    const std::size_t nb = c.blocks.size();

    std::vector<Matrix> prec(nb);
    std::vector<Vector> lin(nb);
    std::vector<Matrix> kb(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        const Index n_b = c.blocks[b].y.size();
        prec[b] = Matrix::Zero(n_b, n_b);
        lin[b] = Vector::Zero(n_b);
        kb[b] = cfg.m_scale * c.blocks[b].d;
        kb[b].diagonal().array() += s2 / alpha;
    }
    Matrix q_prec = Matrix::Identity(mm, mm);
    Vector q_lin = Vector::Zero(mm);

    PepResult res;
    for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
        double change = 0.0;
        for (std::size_t b = 0; b < nb; ++b) {
            const Matrix& v = c.blocks[b].v; // M x Nb
            const Matrix cav_prec = q_prec - alpha * v * prec[b] * v.transpose();
            const Vector cav_lin = q_lin - alpha * v * lin[b];
            const CholeskyFactor lc = chol(cav_prec);
            const Vector cav_mean = lc.solve(cav_lin);
            const Matrix a = lc.solve_lower(v);
            const Matrix proj_cov = a.transpose() * a; // V^T S_cav V

            // Tilted log-normalizer derivatives with respect to the projected mean.
            const Vector mf = v.transpose() * cav_mean;
            const CholeskyFactor lf = chol(Matrix(proj_cov + kb[b]));
            const Vector d1 = lf.solve(Vector(c.blocks[b].y - mf));
            const Matrix neg_d2_inv = proj_cov + kb[b]; // -(d2)^{-1}
            const Matrix vt = symmetrize(neg_d2_inv - proj_cov);
            const Vector gt = mf + neg_d2_inv * d1;

            const CholeskyFactor lt = chol(vt);
            const Matrix new_prec = symmetrize(lt.inverse()) / alpha;
            const Vector new_lin = lt.solve(gt) / alpha;
            const Matrix upd_prec = (1.0 - damping) * prec[b] + damping * new_prec;
            const Vector upd_lin = (1.0 - damping) * lin[b] + damping * new_lin;
            change = std::max({change, (upd_prec - prec[b]).cwiseAbs().maxCoeff(),
                               (upd_lin - lin[b]).cwiseAbs().maxCoeff()});
            q_prec += v * (upd_prec - prec[b]) * v.transpose();
            q_lin += v * (upd_lin - lin[b]);
            q_prec = symmetrize(q_prec);
            prec[b] = upd_prec;
            lin[b] = upd_lin;
        }
        res.sweeps = sweep;
        res.last_change = change;
        if (change < tol) {
            res.converged = true;
            break;
        }
    }

    // Recompute q from the final sites to avoid drift from incremental updates.
    q_prec = Matrix::Identity(mm, mm);
    q_lin = Vector::Zero(mm);
    for (std::size_t b = 0; b < nb; ++b) {
        q_prec.noalias() += c.blocks[b].v * prec[b] * c.blocks[b].v.transpose();
        q_lin.noalias() += c.blocks[b].v * lin[b];
    }
    q_prec = symmetrize(q_prec);
    const CholeskyFactor lq = chol(q_prec);
    const Vector mean_w = lq.solve(q_lin);
    const Matrix cov_w = symmetrize(lq.inverse());
    res.q = GaussianQU::from_cov(c.luu.lower * mean_w,
                                 symmetrize(c.luu.lower * cov_w * c.luu.lower.transpose()));

    // Energy: G(q) - G(p) + (1/alpha) sum_b [log Z_b + G(q\b) - G(q)] plus the
    // normalizer differences of the scaled conditional q(f | u).
    const double g_q = detail::gauss_log_normalizer(q_prec, q_lin);
    double energy = g_q;
    const double n = static_cast<double>(c.n);
    for (std::size_t b = 0; b < nb; ++b) {
        const Matrix& v = c.blocks[b].v;
        const Index n_b = c.blocks[b].y.size();
        const Matrix cav_prec = symmetrize(q_prec - alpha * v * prec[b] * v.transpose());
        const Vector cav_lin = q_lin - alpha * v * lin[b];
        const CholeskyFactor lc = chol(cav_prec);
        const Vector cav_mean = lc.solve(cav_lin);
        const Matrix a = lc.solve_lower(v);
        const Matrix proj_cov = a.transpose() * a;
        const double log_z = dense_gauss_logpdf(Vector(c.blocks[b].y - v.transpose() * cav_mean),
                                                symmetrize(proj_cov + kb[b])) -
                             0.5 * alpha * static_cast<double>(n_b) * (kLog2Pi + std::log(s2)) +
                             0.5 * static_cast<double>(n_b) * (kLog2Pi + std::log(s2 / alpha));
        energy += (log_z + detail::gauss_log_normalizer(cav_prec, cav_lin) - g_q) / alpha;
    }
    energy += 0.5 * n * std::log(cfg.m_scale) - n / (2.0 * alpha) * std::log1p(alpha * (cfg.m_scale - 1.0));
    res.energy = energy;

    for (std::size_t b = 0; b < nb; ++b) {
        SiteFactor s;
        s.block = b;
        const CholeskyFactor lp = chol(prec[b]);
        s.v = symmetrize(lp.inverse());
        s.g = s.v * lin[b];
        res.sites.push_back(std::move(s));
    }
    return res;
}

} // namespace sgp

#endif
