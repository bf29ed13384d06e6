#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace sgp;

namespace {

Instance instance(std::uint64_t seed, bool at_inputs = false)
{
    Rng rng(seed);
    InstanceOptions opt;
    opt.n_max = 30;
    opt.inducing_at_inputs = at_inputs;
    return random_instance(rng, opt);
}

} // namespace

TEST(Predict, AtInducingPointWithCollapsedCovariance)
{
    const Instance in = instance(1);
    const Index m = in.state.num_inducing();
    GaussianQU q = GaussianQU::from_cov(Vector::LinSpaced(m, -1.0, 1.0), 1e-14 * Matrix::Identity(m, m));
    const PredictiveGaussian p = predict(in.state.inducing, in.state, q, false);
    for (Index i = 0; i < m; ++i) {
        EXPECT_NEAR(p.mean(i), q.mean(i), 1e-8);
        EXPECT_NEAR(p.variance(i), 0.0, 1e-8);
    }
}

TEST(Predict, FullInducingSetMatchesExactGp)
{
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Instance in = instance(seed, true);
        const GaussianQU q = optimal_qu(in.data, in.state, noise_only(in.state));
        Rng rng(seed + 100);
        Matrix xt(15, in.data.dim());
        for (Index i = 0; i < xt.size(); ++i)
            xt(i) = uniform(rng, -3.0, 3.0);
        const oracle::Posterior o = oracle::gp_predict(in.data, in.state, xt);
        const PredictiveGaussian p = predict(xt, in.state, q, false);
        const PredictiveGaussian e = predict_exact(xt, in.data, in.state, false);
        for (Index t = 0; t < xt.rows(); ++t) {
            EXPECT_NEAR(p.mean(t), o.mean(t), 1e-7 * std::max(1.0, std::abs(o.mean(t))));
            EXPECT_NEAR(p.variance(t), o.cov(t, t), 1e-7 * std::max(1.0, o.cov(t, t)));
            EXPECT_NEAR(e.mean(t), o.mean(t), 1e-9 * std::max(1.0, std::abs(o.mean(t))));
            EXPECT_NEAR(e.variance(t), o.cov(t, t), 1e-9);
        }
    }
}

TEST(Predict, FarPointRevertsToPrior)
{
    const Instance in = instance(2);
    const GaussianQU q = optimal_qu(in.data, in.state, noise_only(in.state));
    const Matrix far = Matrix::Constant(1, in.data.dim(), 1e4);
    const PredictiveGaussian p = predict(far, in.state, q);
    EXPECT_NEAR(p.mean(0), 0.0, 1e-12);
    EXPECT_NEAR(p.variance(0), in.state.kernel.signal_variance() + in.state.sigma2(), 1e-12);
}

TEST(Predict, NoiseFloorAndPermutation)
{
    Rng rng(3);
    const Instance in = instance(3);
    const GaussianQU q = random_qu(rng, in.state.num_inducing());
    Matrix xt(20, in.data.dim());
    for (Index i = 0; i < xt.size(); ++i)
        xt(i) = uniform(rng, -3.0, 3.0);
    const PredictiveGaussian p = predict(xt, in.state, q);
    EXPECT_GE(p.variance.minCoeff(), in.state.sigma2());
    EXPECT_GE(predict(xt, in.state, q, false).variance.minCoeff(), 0.0);
    const std::vector<int> perm = permutation(20, rng);
    Matrix xp(20, xt.cols());
    for (int i = 0; i < 20; ++i)
        xp.row(i) = xt.row(perm[static_cast<std::size_t>(i)]);
    const PredictiveGaussian pp = predict(xp, in.state, q);
    for (int i = 0; i < 20; ++i) {
        EXPECT_EQ(pp.mean(i), p.mean(perm[static_cast<std::size_t>(i)]));
        EXPECT_EQ(pp.variance(i), p.variance(perm[static_cast<std::size_t>(i)]));
    }
}

TEST(Predict, DimensionChecks)
{
    const Instance in = instance(4);
    const GaussianQU q = optimal_qu(in.data, in.state, noise_only(in.state));
    EXPECT_THROW(predict(Matrix::Zero(2, in.data.dim() + 1), in.state, q), DimensionMismatch);
    EXPECT_THROW(predict(Matrix::Zero(2, in.data.dim()), in.state, GaussianQU::from_cov(Vector::Zero(1), Matrix::Identity(1, 1))),
                 DimensionMismatch);
}

TEST(Metrics, Examples)
{
    PredictiveGaussian p;
    p.mean = Vector::LinSpaced(4, 0.0, 3.0);
    p.variance = Vector::Constant(4, 1.0 / (2.0 * M_PI));
    Metrics m = metrics(p, p.mean);
    EXPECT_EQ(m.rmse, 0.0);
    EXPECT_NEAR(m.mean_ll, 0.0, 1e-15);
    m = metrics(p, (p.mean.array() - 1.0).matrix());
    EXPECT_NEAR(m.rmse, 1.0, 1e-15);
}

TEST(Metrics, MatchesPointwiseComputation)
{
    Rng rng(5);
    PredictiveGaussian p;
    p.mean.resize(7);
    p.variance.resize(7);
    Vector y(7);
    for (Index i = 0; i < 7; ++i) {
        p.mean(i) = standard_normal(rng);
        p.variance(i) = uniform(rng, 0.1, 2.0);
        y(i) = standard_normal(rng);
    }
    double se = 0.0, ll = 0.0;
    for (Index i = 0; i < 7; ++i) {
        const double r = y(i) - p.mean(i);
        se += r * r;
        ll += std::log(std::exp(-0.5 * r * r / p.variance(i)) / std::sqrt(2.0 * M_PI * p.variance(i)));
    }
    const Metrics m = metrics(p, y);
    EXPECT_NEAR(m.rmse, std::sqrt(se / 7.0), 1e-14);
    EXPECT_NEAR(m.mean_ll, ll / 7.0, 1e-13);
}

TEST(Metrics, LengthMismatch)
{
    PredictiveGaussian p;
    p.mean = Vector::Zero(3);
    p.variance = Vector::Ones(3);
    EXPECT_THROW(metrics(p, Vector::Zero(4)), LengthMismatch);
}

TEST(Destandardize, MapsMomentsBack)
{
    const Dataset raw = snelson_like(50, 6);
    const Dataset z = standardize(raw);
    PredictiveGaussian p;
    p.mean = z.y;
    p.variance = Vector::Ones(50);
    const PredictiveGaussian back = destandardize(p, z.stats);
    for (Index i = 0; i < 50; ++i)
        EXPECT_NEAR(back.mean(i), raw.y(i), 1e-12);
    EXPECT_NEAR(back.variance(0), z.stats.y_std * z.stats.y_std, 1e-12);
}
