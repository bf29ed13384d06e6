#ifndef SGP_KERNEL_HPP
#define SGP_KERNEL_HPP

#include <cmath>
#include <string>

#include "linalg.hpp"

namespace sgp {

/// ARD squared-exponential hyperparameters, stored in log space.
struct KernelParams {
    Vector log_lengthscales;
    double log_signal_variance = 0.0;

    Index dim() const { return log_lengthscales.size(); }
    double lengthscale(Index d) const { return std::exp(log_lengthscales(d)); }
    Vector lengthscales() const { return log_lengthscales.array().exp(); }
    double signal_variance() const { return std::exp(log_signal_variance); }

    static KernelParams from_natural(const Vector& lengthscales, double signal_variance)
    {
        return {lengthscales.array().log().matrix(), std::log(signal_variance)};
    }
};

struct NoiseParam {
    double log_noise_variance = std::log(0.1);

    double variance() const { return std::exp(log_noise_variance); }
};

/// k(x, x') = s^2 exp(-1/2 sum_d (x_d - x'_d)^2 / l_d^2)
inline Matrix kernel_matrix(const Matrix& x1, const Matrix& x2, const KernelParams& p)
{
    if (x1.cols() != p.dim() || x2.cols() != p.dim())
        throw DimensionMismatch("kernel_matrix: inputs have " + std::to_string(x1.cols()) + " and " +
                                std::to_string(x2.cols()) + " columns, kernel expects " +
                                std::to_string(p.dim()));
    const Eigen::RowVectorXd inv_ell = (-p.log_lengthscales.array()).exp().matrix().transpose();
    const Matrix a = x1.array().rowwise() * inv_ell.array();
    const Matrix b = x2.array().rowwise() * inv_ell.array();
    Matrix k(x1.rows(), x2.rows());
    const double s2 = p.signal_variance();
    for (Index j = 0; j < b.rows(); ++j)
        for (Index i = 0; i < a.rows(); ++i)
            k(i, j) = s2 * std::exp(-0.5 * (a.row(i) - b.row(j)).squaredNorm());
    return k;
}

struct ConditionalGap {
    PsdMatrix d;
    /// Total amount added to negative diagonal entries to clamp them at zero.
    double clamped = 0.0;
    double jitter_used = 0.0;
};

/// D_ff = K_ff - K_fu K_uu^{-1} K_uf with its diagonal clamped at zero.
inline ConditionalGap conditional_gap(const Matrix& x, const Matrix& z, const KernelParams& p)
{
    ConditionalGap out;
    out.d = kernel_matrix(x, x, p);
    if (z.rows() > 0) {
        const CholeskyFactor luu = chol(kernel_matrix(z, z, p));
        const Matrix v = luu.solve_lower(kernel_matrix(z, x, p));
        out.d.noalias() -= v.transpose() * v;
        out.jitter_used = luu.jitter_used;
    }
    for (Index i = 0; i < out.d.rows(); ++i) {
        if (out.d(i, i) < 0.0) {
            out.clamped += -out.d(i, i);
            out.d(i, i) = 0.0;
        }
    }
    out.d = symmetrize(out.d);
    return out;
}

/// Gradient of the ARD kernel with respect to its hyperparameters and inputs,
/// given the adjoint `kbar` = dF/dK of a kernel matrix K = k(x1, x2).
struct KernelGradient {
    Vector log_lengthscales;
    double log_signal_variance = 0.0;

    explicit KernelGradient(Index dim) : log_lengthscales(Vector::Zero(dim)) {}

    /// Accumulates the hyperparameter part only.
    void add_hyper(const Matrix& x1, const Matrix& x2, const Matrix& k, const Matrix& kbar, const KernelParams& p)
    {
        const Matrix w = kbar.cwiseProduct(k);
        log_signal_variance += w.sum();
        for (Index d = 0; d < p.dim(); ++d) {
            const double inv_l2 = std::exp(-2.0 * p.log_lengthscales(d));
            double acc = 0.0;
            for (Index j = 0; j < x2.rows(); ++j)
                for (Index i = 0; i < x1.rows(); ++i) {
                    const double diff = x1(i, d) - x2(j, d);
                    acc += w(i, j) * diff * diff;
                }
            log_lengthscales(d) += acc * inv_l2;
        }
    }
};

/// dF/dZ contribution of K_fu = k(x, z): dK(x_i, z_k)/dz_k = K (x_i - z_k) / l^2.
inline void add_cross_input_grad(const Matrix& x, const Matrix& z, const Matrix& k, const Matrix& kbar,
                                 const KernelParams& p, Matrix& zbar)
{
    const Matrix w = kbar.cwiseProduct(k);
    for (Index d = 0; d < p.dim(); ++d) {
        const double inv_l2 = std::exp(-2.0 * p.log_lengthscales(d));
        for (Index kk = 0; kk < z.rows(); ++kk) {
            double acc = 0.0;
            for (Index i = 0; i < x.rows(); ++i)
                acc += w(i, kk) * (x(i, d) - z(kk, d));
            zbar(kk, d) += acc * inv_l2;
        }
    }
}

/// dF/dZ contribution of K_uu = k(z, z).
inline void add_self_input_grad(const Matrix& z, const Matrix& k, const Matrix& kbar, const KernelParams& p,
                                Matrix& zbar)
{
    const Matrix w = (kbar + kbar.transpose()).cwiseProduct(k);
    for (Index d = 0; d < p.dim(); ++d) {
        const double inv_l2 = std::exp(-2.0 * p.log_lengthscales(d));
        for (Index kk = 0; kk < z.rows(); ++kk) {
            double acc = 0.0;
            for (Index j = 0; j < z.rows(); ++j)
                acc += w(kk, j) * (z(j, d) - z(kk, d));
            zbar(kk, d) += acc * inv_l2;
        }
    }
}

} // namespace sgp

#endif
