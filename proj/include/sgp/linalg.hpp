#ifndef SGP_LINALG_HPP
#define SGP_LINALG_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace sgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Square symmetric positive semi-definite matrix (K_uu, D_ff blocks, S, ...).
using PsdMatrix = Matrix;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112; // log(2 pi)

/// Lower Cholesky factor of `a + jitter_used * I`.
struct CholeskyFactor {
    Matrix lower;
    double jitter_used = 0.0;

    Index size() const { return lower.rows(); }

    /// L^{-1} b
    Matrix solve_lower(const Matrix& b) const { return lower.triangularView<Eigen::Lower>().solve(b); }
    /// L^{-T} b
    Matrix solve_upper(const Matrix& b) const
    {
        return lower.transpose().triangularView<Eigen::Upper>().solve(b);
    }
    /// (L L^T)^{-1} b
    Matrix solve(const Matrix& b) const { return solve_upper(solve_lower(b)); }

    Matrix inverse() const { return solve(Matrix::Identity(size(), size())); }
};

struct CholeskyOptions {
    double initial_relative_jitter = 1e-10;
    double max_relative_jitter = 1e-2;
    double growth = 10.0;
};

namespace detail {

inline bool try_llt(const Matrix& a, double jitter, Matrix& out)
{
    Matrix shifted = a;
    if (jitter > 0.0)
        shifted.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() != Eigen::Success)
        return false;
    out = llt.matrixL();
    // LLT can "succeed" with a zero or NaN pivot on singular input.
    for (Index i = 0; i < out.rows(); ++i)
        if (!(out(i, i) > 0.0) || !std::isfinite(out(i, i)))
            return false;
    return true;
}

} // namespace detail

/// Cholesky factorization with a jitter ladder.
///
/// The input is symmetrized as (A + A^T)/2. Jitter starts at zero, then
/// 1e-10 * mean(diag) growing x10 per retry, capped at 1e-2 * mean(diag).
inline CholeskyFactor chol(const Matrix& a, const CholeskyOptions& opt = {})
{
    if (a.rows() != a.cols())
        throw DimensionMismatch("chol: matrix is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
    CholeskyFactor f;
    const Index n = a.rows();
    if (n == 0)
        return f;
    if (!a.allFinite())
        throw NotPositiveDefinite("chol: non-finite entries");
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
        throw InvalidArgument("chol: matrix is not symmetric");
    const Matrix sym = 0.5 * (a + a.transpose());

    if (detail::try_llt(sym, 0.0, f.lower))
        return f;

    double mean_diag = sym.diagonal().mean();
    if (!(mean_diag > 0.0))
        mean_diag = 1.0;
    const double cap = opt.max_relative_jitter * mean_diag;
    for (double jitter = opt.initial_relative_jitter * mean_diag; jitter <= cap * (1.0 + 1e-12);
         jitter *= opt.growth) {
        if (detail::try_llt(sym, jitter, f.lower)) {
            f.jitter_used = jitter;
            return f;
        }
    }
    throw NotPositiveDefinite("chol: factorization failed with jitter up to " + std::to_string(cap));
}

inline double logdet(const CholeskyFactor& f)
{
    return 2.0 * f.lower.diagonal().array().log().sum();
}

/// Block-diagonal matrix whose blocks are placed at arbitrary index sets
/// (normally the blocks of a Partition).
struct BlockDiagonal {
    std::vector<std::vector<int>> index;
    std::vector<Matrix> blocks;

    std::size_t count() const { return blocks.size(); }

    Index total_size() const
    {
        Index n = 0;
        for (const auto& b : blocks)
            n += b.rows();
        return n;
    }

    std::vector<Index> sizes() const
    {
        std::vector<Index> s;
        for (const auto& b : blocks)
            s.push_back(b.rows());
        return s;
    }

    /// Scatter into a dense n x n matrix.
    Matrix dense(Index n) const
    {
        Matrix out = Matrix::Zero(n, n);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const auto& idx = index[b];
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < idx.size(); ++j)
                    out(idx[i], idx[j]) = blocks[b](static_cast<Index>(i), static_cast<Index>(j));
        }
        return out;
    }
};

/// blkdiag(A_b) + scalar * I. Points outside every block contribute scalar * I only.
struct BlockDiagonalPlusScalar {
    BlockDiagonal part;
    double scalar = 0.0;

    Matrix dense(Index n) const
    {
        Matrix out = part.count() ? part.dense(n) : Matrix::Zero(n, n);
        out.diagonal().array() += scalar;
        return out;
    }
};

inline double dense_gauss_logpdf(const Vector& y, const Matrix& cov)
{
    if (cov.rows() != y.size() || cov.cols() != y.size())
        throw DimensionMismatch("dense_gauss_logpdf: covariance does not match y");
    const CholeskyFactor f = chol(cov);
    const Vector alpha = f.solve_lower(y);
    return -0.5 * (static_cast<double>(y.size()) * kLog2Pi + logdet(f) + alpha.squaredNorm());
}

namespace detail {

/// Pieces of the Woodbury/determinant-lemma system for Q + R with Q = V^T V.
struct WhitenedSystem {
    Matrix inner;       // I + V R^{-1} V^T
    Vector c;           // V R^{-1} y
    double logdet_r = 0.0;
    double quad_r = 0.0; // y^T R^{-1} y
    double jitter_used = 0.0;
};

inline WhitenedSystem whitened_system(const Matrix& v, const Vector& y, const BlockDiagonalPlusScalar& a)
{
    const Index n = y.size();
    const Index m = v.rows();
    WhitenedSystem w;
    w.inner = Matrix::Identity(m, m);
    w.c = Vector::Zero(m);
    if (a.part.count() == 0) {
        if (!(a.scalar > 0.0))
            throw NotPositiveDefinite("scalar noise must be positive");
        w.inner.noalias() += v * v.transpose() / a.scalar;
        w.c = v * y / a.scalar;
        w.logdet_r = static_cast<double>(n) * std::log(a.scalar);
        w.quad_r = y.squaredNorm() / a.scalar;
        return w;
    }
    std::vector<char> covered(static_cast<std::size_t>(n), 0);
    for (const auto& idx : a.part.index)
        for (int i : idx) {
            if (i < 0 || i >= n)
                throw IndexOutOfRange("block index " + std::to_string(i) + " outside 0.." + std::to_string(n - 1));
            if (covered[static_cast<std::size_t>(i)]++)
                throw InvalidArgument("block index " + std::to_string(i) + " appears twice");
        }
    if (!(a.scalar > 0.0) && std::find(covered.begin(), covered.end(), 0) != covered.end())
        throw NotPositiveDefinite("points outside every block need a positive scalar");
    for (Index i = 0; i < n; ++i) {
        if (covered[static_cast<std::size_t>(i)])
            continue;
        w.inner.noalias() += v.col(i) * v.col(i).transpose() / a.scalar;
        w.c += v.col(i) * (y(i) / a.scalar);
        w.logdet_r += std::log(a.scalar);
        w.quad_r += y(i) * y(i) / a.scalar;
    }
    for (std::size_t b = 0; b < a.part.count(); ++b) {
        const auto& idx = a.part.index[b];
        const Index nb = static_cast<Index>(idx.size());
        Matrix rb = a.part.blocks[b];
        rb.diagonal().array() += a.scalar;
        Matrix vb(m, nb);
        Vector yb(nb);
        for (Index i = 0; i < nb; ++i) {
            vb.col(i) = v.col(idx[static_cast<std::size_t>(i)]);
            yb(i) = y(idx[static_cast<std::size_t>(i)]);
        }
        const CholeskyFactor lr = chol(rb);
        const Matrix wb = lr.solve_lower(vb.transpose()); // Nb x M
        const Vector zb = lr.solve_lower(yb);
        w.inner.noalias() += wb.transpose() * wb;
        w.c.noalias() += wb.transpose() * zb;
        w.logdet_r += logdet(lr);
        w.quad_r += zb.squaredNorm();
        w.jitter_used = std::max(w.jitter_used, lr.jitter_used);
    }
    return w;
}

} // namespace detail

/// log N(y; 0, Kfu Kuu^{-1} Kuf + A) without forming the N x N covariance.
///
/// With L = chol(Kuu), V = L^{-1} Kuf and R = A:
///   log|Q + R| = log|R| + log|I + V R^{-1} V^T|
///   y^T (Q + R)^{-1} y = y^T R^{-1} y - c^T (I + V R^{-1} V^T)^{-1} c,  c = V R^{-1} y.
inline double gauss_logpdf_lowrank(const Vector& y, const Matrix& kfu, const PsdMatrix& kuu,
                                   const BlockDiagonalPlusScalar& a)
{
    const Index n = y.size();
    if (kfu.rows() != n || kfu.cols() != kuu.rows())
        throw DimensionMismatch("gauss_logpdf_lowrank: Kfu must be N x M");
    const CholeskyFactor luu = chol(kuu);
    const Matrix v = luu.solve_lower(kfu.transpose()); // M x N
    const detail::WhitenedSystem w = detail::whitened_system(v, y, a);
    const CholeskyFactor lb = chol(w.inner);
    const Vector gamma = lb.solve_lower(w.c);
    const double quad = w.quad_r - gamma.squaredNorm();
    return -0.5 * (static_cast<double>(n) * kLog2Pi + w.logdet_r + logdet(lb) + quad);
}

/// Symmetric eigendecomposition with eigenvalues clamped at zero from below.
struct SymmetricEigen {
    Vector values;
    Matrix vectors;

    explicit SymmetricEigen(const Matrix& a)
    {
        Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
        values = es.eigenvalues().cwiseMax(0.0);
        vectors = es.eigenvectors();
    }

    Matrix sqrt() const { return vectors * values.cwiseSqrt().asDiagonal() * vectors.transpose(); }

    /// (A + shift I)^{-1/2}
    Matrix inv_sqrt(double shift = 0.0) const
    {
        const Vector d = (values.array() + shift).rsqrt();
        return vectors * d.asDiagonal() * vectors.transpose();
    }
};

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

} // namespace sgp

#endif
