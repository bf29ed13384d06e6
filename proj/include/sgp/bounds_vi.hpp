#ifndef SGP_BOUNDS_VI_HPP
#define SGP_BOUNDS_VI_HPP

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "detail/engine.hpp"

namespace sgp {

inline constexpr Index kExactDenseCap = 5000;
inline constexpr Index kOracleCap = 200;

namespace detail {

struct ExactResult {
    BoundBreakdown value;
    std::optional<ParamGradient> grad;
};

inline ExactResult exact_eval(const Dataset& data, const ModelState& state, bool want_grad, Index cap)
{
    if (data.size() > cap)
        throw InvalidArgument("exact_lml: N = " + std::to_string(data.size()) + " exceeds the dense cap of " +
                              std::to_string(cap));
    if (data.dim() != state.kernel.dim())
        throw DimensionMismatch("exact_lml: data and kernel dimensions differ");
    const Matrix kff = kernel_matrix(data.X, data.X, state.kernel);
    Matrix cov = kff;
    cov.diagonal().array() += state.sigma2();
    const CholeskyFactor l = chol(cov);
    const Vector a = l.solve(data.y);
    ExactResult out;
    const double v = -0.5 * (static_cast<double>(data.size()) * kLog2Pi + logdet(l) + data.y.dot(a));
    out.value = {v, v, 0.0, l.jitter_used};
    if (!want_grad)
        return out;
    const Matrix kbar = 0.5 * (a * a.transpose() - l.inverse());
    KernelGradient kg(state.dim());
    kg.add_hyper(data.X, data.X, kff, kbar, state.kernel);
    ParamGradient g;
    g.log_lengthscales = kg.log_lengthscales;
    g.log_signal_variance = kg.log_signal_variance;
    g.log_noise_variance = kbar.trace() * state.sigma2();
    g.inducing = Matrix::Zero(state.num_inducing(), state.dim());
    out.grad = std::move(g);
    return out;
}

inline Family vi_family(Penalty p)
{
    Family f;
    f.penalty = p;
    return f;
}

inline BoundBreakdown collapsed_value(const Dataset& data, const ModelState& state, const Partition& part,
                                      const Family& f)
{
    const Cache c = build_cache(data, state, part, all_blocks(part));
    return collapsed(c, f, false).value;
}

inline Vector gap_diagonal(const Dataset& data, const ModelState& state)
{
    const CholeskyFactor luu = chol(kernel_matrix(state.inducing, state.inducing, state.kernel));
    const Matrix v = luu.solve_lower(kernel_matrix(state.inducing, data.X, state.kernel));
    Vector d = (state.kernel.signal_variance() - v.colwise().squaredNorm().array()).matrix().transpose();
    return d.cwiseMax(0.0);
}

} // namespace detail

/// log N(y; 0, K_ff + sigma2 I), dense.
inline BoundBreakdown exact_lml(const Dataset& data, const ModelState& state, Index dense_cap = kExactDenseCap)
{
    return detail::exact_eval(data, state, false, dense_cap).value;
}

inline BoundBreakdown sgpr_collapsed(const Dataset& data, const ModelState& state)
{
    return detail::collapsed_value(data, state, Partition::singletons(static_cast<int>(data.size())),
                                   detail::vi_family(detail::Penalty::Trace));
}

inline BoundBreakdown tsgpr_collapsed(const Dataset& data, const ModelState& state)
{
    return detail::collapsed_value(data, state, Partition::singletons(static_cast<int>(data.size())),
                                   detail::vi_family(detail::Penalty::DiagLog));
}

inline BoundBreakdown btsgpr_collapsed(const Dataset& data, const ModelState& state, const Partition& part)
{
    return detail::collapsed_value(data, state, part, detail::vi_family(detail::Penalty::BlockLog));
}

inline BoundBreakdown sharedblock_collapsed(const Dataset& data, const ModelState& state, const Partition& part)
{
    if (!part.equal_sizes())
        throw InvalidArgument("sharedblock_collapsed: all blocks must have the same size");
    return detail::collapsed_value(data, state, part, detail::vi_family(detail::Penalty::SharedLog));
}

inline BoundBreakdown spherical_collapsed(const Dataset& data, const ModelState& state)
{
    return detail::collapsed_value(data, state, Partition::singletons(static_cast<int>(data.size())),
                                   detail::vi_family(detail::Penalty::SharedLog));
}

/// m = (1 + mean_n(d_nn) / sigma2)^{-1}
inline double spherical_optimal_m(const Dataset& data, const ModelState& state)
{
    const Vector d = detail::gap_diagonal(data, state);
    return 1.0 / (1.0 + d.mean() / state.sigma2());
}

/// m_b = (I + D_bb / sigma2)^{-1} for every block.
inline BlockDiagonal optimal_mb(const Dataset& data, const ModelState& state, const Partition& part)
{
    const detail::Cache c = detail::build_cache(data, state, part, detail::all_blocks(part));
    BlockDiagonal out;
    for (const auto& blk : c.blocks) {
        Matrix j = blk.d / c.sigma2;
        j.diagonal().array() += 1.0;
        out.index.push_back(blk.idx);
        out.blocks.push_back(symmetrize(chol(j).inverse()));
    }
    return out;
}

/// Dense evaluation of the bound for an arbitrary PSD covariance C of q(f | u):
///   log N(y; 0, Q + s2 I) - 1/2 tr[(D^{-1} + s2^{-1} I) C] - 1/2 log|C^{-1} D| + N/2.
inline BoundBreakdown general_c_oracle(const Dataset& data, const ModelState& state, const Matrix& c)
{
    const Index n = data.size();
    if (n > kOracleCap)
        throw InvalidArgument("general_c_oracle: N = " + std::to_string(n) + " exceeds the oracle cap of " +
                              std::to_string(kOracleCap));
    if (c.rows() != n || c.cols() != n)
        throw DimensionMismatch("general_c_oracle: C must be N x N");
    const double s2 = state.sigma2();
    const ConditionalGap gap = conditional_gap(data.X, state.inducing, state.kernel);
    Matrix q = kernel_matrix(data.X, data.X, state.kernel) - gap.d;
    q.diagonal().array() += s2;
    const double fit = dense_gauss_logpdf(data.y, symmetrize(q));

    const CholeskyFactor ld = chol(gap.d);
    const SymmetricEigen ed(gap.d);
    const Matrix d_isqrt = ed.inv_sqrt(ld.jitter_used);
    const Matrix ct = symmetrize(d_isqrt * symmetrize(c) * d_isqrt);
    const CholeskyFactor lc = chol(ct);
    const double reg = -0.5 * c.trace() / s2 - 0.5 * ct.trace() + 0.5 * logdet(lc) + 0.5 * static_cast<double>(n);
    return {fit + reg, fit, reg, std::max({gap.jitter_used, ld.jitter_used, lc.jitter_used})};
}

/// q(u) maximizing the bound with likelihood N(y; K_fu K_uu^{-1} u, R).
inline GaussianQU optimal_qu(const Dataset& data, const ModelState& state, const BlockDiagonalPlusScalar& r)
{
    const CholeskyFactor luu = chol(kernel_matrix(state.inducing, state.inducing, state.kernel));
    const Matrix v = luu.solve_lower(kernel_matrix(state.inducing, data.X, state.kernel));
    const detail::WhitenedSystem w = detail::whitened_system(v, data.y, r);
    const CholeskyFactor lb = chol(w.inner);
    const Matrix s = symmetrize(luu.lower * lb.inverse() * luu.lower.transpose());
    return GaussianQU::from_cov(luu.lower * lb.solve(w.c), s);
}

inline BlockDiagonalPlusScalar noise_only(const ModelState& state) { return {{}, state.sigma2()}; }

inline double kl_qu(const GaussianQU& q, const ModelState& state)
{
    const Index m = state.num_inducing();
    if (q.size() != m)
        throw DimensionMismatch("kl_qu: q(u) has dimension " + std::to_string(q.size()) + ", expected " +
                                std::to_string(m));
    const CholeskyFactor luu = chol(kernel_matrix(state.inducing, state.inducing, state.kernel));
    const Matrix a = luu.solve_lower(q.cov_chol.lower);
    const Vector b = luu.solve_lower(q.mean);
    double logdet_s = 0.0;
    for (Index i = 0; i < m; ++i)
        logdet_s += 2.0 * std::log(std::abs(q.cov_chol.lower(i, i)));
    return 0.5 * (a.squaredNorm() + b.squaredNorm() - static_cast<double>(m) + logdet(luu) - logdet_s);
}

/// Penalty attached to the expected log-likelihood of an uncollapsed bound.
enum class VariationalPenalty {
    Trace,    // SGPR
    Diagonal, // T-SGPR, expects singleton blocks
    Block,    // BT-SGPR
    Shared,   // SharedBlock / spherical, full batch only
};

namespace detail {

inline Penalty to_penalty(VariationalPenalty p)
{
    switch (p) {
    case VariationalPenalty::Trace: return Penalty::Trace;
    case VariationalPenalty::Diagonal: return Penalty::DiagLog;
    case VariationalPenalty::Block: return Penalty::BlockLog;
    case VariationalPenalty::Shared: return Penalty::SharedLog;
    }
    return Penalty::Trace;
}

} // namespace detail

inline BoundBreakdown btsgpr_uncollapsed(const Dataset& data, const ModelState& state, const Partition& part,
                                         const GaussianQU& q,
                                         VariationalPenalty penalty = VariationalPenalty::Block)
{
    if (penalty == VariationalPenalty::Shared && !part.equal_sizes())
        throw InvalidArgument("btsgpr_uncollapsed: shared penalty requires equal block sizes");
    const detail::Cache c = detail::build_cache(data, state, part, detail::all_blocks(part));
    return detail::uncollapsed(c, detail::vi_family(detail::to_penalty(penalty)), q, 1.0, false).value;
}

/// One-block estimate: -KL + B * (block term of `block_index`).
inline double btsgpr_stochastic(const Dataset& data, const ModelState& state, const Partition& part,
                                const GaussianQU& q, std::size_t block_index,
                                VariationalPenalty penalty = VariationalPenalty::Block)
{
    if (penalty == VariationalPenalty::Shared)
        throw InvalidArgument("btsgpr_stochastic: the shared penalty does not split over blocks");
    if (block_index >= part.num_blocks())
        throw IndexOutOfRange("btsgpr_stochastic: block index " + std::to_string(block_index) +
                              " out of range (B = " + std::to_string(part.num_blocks()) + ")");
    const detail::Cache c = detail::build_cache(data, state, part, {block_index});
    const double scale = static_cast<double>(part.num_blocks());
    return detail::uncollapsed(c, detail::vi_family(detail::to_penalty(penalty)), q, scale, false).value.total;
}

} // namespace sgp

#endif
