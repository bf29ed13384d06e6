#ifndef SGP_PREDICT_HPP
#define SGP_PREDICT_HPP

#include <cmath>
#include <string>

#include "data.hpp"
#include "kernel.hpp"
#include "model.hpp"

namespace sgp {

struct PredictiveGaussian {
    Vector mean;
    Vector variance;
    /// Number of variances that came out slightly negative and were clamped to zero.
    int clamped = 0;
};

/// Predictive marginals at `xt` under q(f* | u) = p(f* | u):
///   mean = K_*u K_uu^{-1} m,  var = k_** - q_** + a^T S a (+ sigma2),  a = K_uu^{-1} K_u*.
inline PredictiveGaussian predict(const Matrix& xt, const ModelState& state, const GaussianQU& q,
                                  bool include_noise = true)
{
    if (xt.cols() != state.dim())
        throw DimensionMismatch("predict: test inputs have " + std::to_string(xt.cols()) + " columns, model expects " +
                                std::to_string(state.dim()));
    if (q.size() != state.num_inducing())
        throw DimensionMismatch("predict: q(u) does not match the inducing set");
    const CholeskyFactor luu = chol(kernel_matrix(state.inducing, state.inducing, state.kernel));
    const Matrix kus = kernel_matrix(state.inducing, xt, state.kernel);
    const Matrix a = luu.solve(kus);               // M x T
    const Matrix v = luu.solve_lower(kus);         // M x T
    const Matrix sa = q.cov_chol.lower.transpose() * a;
    PredictiveGaussian out;
    out.mean = a.transpose() * q.mean;
    out.variance.resize(xt.rows());
    const double s2 = state.kernel.signal_variance();
    for (Index t = 0; t < xt.rows(); ++t) {
        double var = s2 - v.col(t).squaredNorm() + sa.col(t).squaredNorm();
        if (var < 0.0) {
            ++out.clamped;
            var = 0.0;
        }
        out.variance(t) = var + (include_noise ? state.sigma2() : 0.0);
    }
    return out;
}

inline PredictiveGaussian predict(const Dataset& test, const ModelState& state, const GaussianQU& q,
                                  bool include_noise = true)
{
    return predict(test.X, state, q, include_noise);
}

/// Full GP predictive marginals conditioned on `train`. O(N^3).
inline PredictiveGaussian predict_exact(const Matrix& xt, const Dataset& train, const ModelState& state,
                                        bool include_noise = true)
{
    if (xt.cols() != train.dim())
        throw DimensionMismatch("predict_exact: test inputs have " + std::to_string(xt.cols()) +
                                " columns, training data has " + std::to_string(train.dim()));
    Matrix k = kernel_matrix(train.X, train.X, state.kernel);
    k.diagonal().array() += state.sigma2();
    const CholeskyFactor l = chol(k);
    const Matrix kfs = kernel_matrix(train.X, xt, state.kernel);
    const Matrix v = l.solve_lower(kfs);
    PredictiveGaussian out;
    out.mean = kfs.transpose() * l.solve(train.y);
    out.variance.resize(xt.rows());
    const double s2 = state.kernel.signal_variance();
    for (Index t = 0; t < xt.rows(); ++t) {
        double var = s2 - v.col(t).squaredNorm();
        if (var < 0.0) {
            ++out.clamped;
            var = 0.0;
        }
        out.variance(t) = var + (include_noise ? state.sigma2() : 0.0);
    }
    return out;
}

struct Metrics {
    double rmse = 0.0;
    double mean_ll = 0.0;
};

/// RMSE and mean per-point log N(y; mean, variance). Pass predictions made with noise included.
inline Metrics metrics(const PredictiveGaussian& pred, const Vector& y)
{
    if (pred.mean.size() != y.size() || pred.variance.size() != y.size())
        throw LengthMismatch("metrics: " + std::to_string(pred.mean.size()) + " predictions for " +
                             std::to_string(y.size()) + " targets");
    if (y.size() == 0)
        throw EmptyDataset("metrics: no test points");
    Metrics m;
    const Vector r = pred.mean - y;
    m.rmse = std::sqrt(r.squaredNorm() / static_cast<double>(y.size()));
    double ll = 0.0;
    for (Index i = 0; i < y.size(); ++i)
        ll += -0.5 * (kLog2Pi + std::log(pred.variance(i)) + r(i) * r(i) / pred.variance(i));
    m.mean_ll = ll / static_cast<double>(y.size());
    return m;
}

/// Maps standardized-scale predictions back to the original target scale.
inline PredictiveGaussian destandardize(const PredictiveGaussian& p, const StandardizationStats& s)
{
    PredictiveGaussian out = p;
    if (!s.applied)
        return out;
    out.mean = (p.mean.array() * s.y_std + s.y_mean).matrix();
    out.variance = p.variance * (s.y_std * s.y_std);
    return out;
}

} // namespace sgp

#endif
