#ifndef SGP_SYNTHETIC_HPP
#define SGP_SYNTHETIC_HPP

#include <cmath>
#include <cstdint>
#include <string>

#include "data.hpp"
#include "model.hpp"

namespace sgp {

/// A random regression problem together with a model state and a partition.
struct Instance {
    Dataset data;
    ModelState state;
    Partition partition;
};

struct InstanceOptions {
    int n_min = 20, n_max = 60;
    int d_min = 1, d_max = 4;
    int m_min = 2, m_max = 8;
    /// Minimum distance between any two of the N + M points, in lengthscale units.
    double min_separation = 0.5;
    /// Number of blocks drawn in [1, n / 2] so at least one block has two or more points.
    bool multi_point_blocks = true;
    bool inducing_at_inputs = false;
};

namespace detail {

inline int uniform_int(Rng& rng, int lo, int hi)
{
    return lo + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(hi - lo + 1)));
}

/// Rejection-samples `count` points so that pairwise distances, in lengthscale units, stay above `sep`.
inline Matrix separated_points(Rng& rng, int count, const Vector& ell, double sep)
{
    const Index d = ell.size();
    double side = 2.5 * sep * std::pow(static_cast<double>(count), 1.0 / static_cast<double>(d));
    side = std::max(side, 2.0);
    Matrix pts(count, d);
    for (;;) {
        int have = 0;
        int tries = 0;
        while (have < count && tries < 200 * count) {
            ++tries;
            Eigen::RowVectorXd cand(d);
            for (Index j = 0; j < d; ++j)
                cand(j) = uniform(rng, 0.0, side);
            bool ok = true;
            for (int i = 0; i < have && ok; ++i)
                ok = (pts.row(i) - cand).norm() >= sep;
            if (ok)
                pts.row(have++) = cand;
        }
        if (have == count)
            return (pts.array().rowwise() * ell.transpose().array()).matrix();
        side *= 1.1;
    }
}

} // namespace detail

/// Random well-conditioned instance: y is drawn from the model it is paired with.
inline Instance random_instance(Rng& rng, const InstanceOptions& opt = {})
{
    const int n = detail::uniform_int(rng, opt.n_min, opt.n_max);
    const int d = detail::uniform_int(rng, opt.d_min, opt.d_max);
    const int m = opt.inducing_at_inputs ? n : detail::uniform_int(rng, opt.m_min, opt.m_max);

    Vector ell(d);
    for (int j = 0; j < d; ++j)
        ell(j) = uniform(rng, 0.5, 1.5);
    const double s2 = uniform(rng, 0.5, 2.0);
    const double noise = uniform(rng, 0.05, 0.5);

    Instance inst;
    inst.state.kernel = KernelParams::from_natural(ell, s2);
    inst.state.noise.log_noise_variance = std::log(noise);

    // Inducing points are rejection-sampled jointly with the inputs but stored separately.
    const int total = opt.inducing_at_inputs ? n : n + m;
    const Matrix pts = detail::separated_points(rng, total, ell, opt.min_separation);
    inst.data.X = pts.topRows(n);
    inst.state.inducing = opt.inducing_at_inputs ? Matrix(inst.data.X) : Matrix(pts.bottomRows(m));

    Matrix k = kernel_matrix(inst.data.X, inst.data.X, inst.state.kernel);
    k.diagonal().array() += noise;
    const CholeskyFactor l = chol(k);
    Vector e(n);
    for (int i = 0; i < n; ++i)
        e(i) = standard_normal(rng);
    inst.data.y = l.lower * e;

    const int b = opt.multi_point_blocks ? detail::uniform_int(rng, 1, std::max(1, n / 2))
                                         : detail::uniform_int(rng, 1, n);
    inst.partition = make_partition(n, b, rng());
    return inst;
}

/// Random symmetric positive definite matrix A A^T / n + ridge I.
inline Matrix random_spd(Rng& rng, Index n, double ridge = 0.1)
{
    Matrix a(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
            a(i, j) = standard_normal(rng);
    Matrix out = a * a.transpose() / static_cast<double>(n);
    out.diagonal().array() += ridge;
    return 0.5 * (out + out.transpose());
}

/// Random q(u) with standard normal mean and a random SPD covariance.
inline GaussianQU random_qu(Rng& rng, Index m)
{
    Vector mean(m);
    for (Index i = 0; i < m; ++i)
        mean(i) = standard_normal(rng);
    return GaussianQU::from_cov(mean, random_spd(rng, m, 0.05));
}

/// Seeded 1-D toy problem in the style of the classic Snelson data:
/// inputs on [0, 6], smooth nonlinear target, Gaussian noise.
inline Dataset snelson_like(int n, std::uint64_t seed, double noise_std = 0.3)
{
    Rng rng(seed);
    Dataset d;
    d.X.resize(n, 1);
    d.y.resize(n);
    for (int i = 0; i < n; ++i) {
        const double x = uniform(rng, 0.0, 6.0);
        d.X(i, 0) = x;
        d.y(i) = std::sin(2.0 * x) + 0.5 * std::cos(5.0 * x) * std::exp(-0.2 * x) + 0.2 * x - 0.6 +
                 noise_std * standard_normal(rng);
    }
    d.column_names = {"x"};
    d.target_name = "y";
    return d;
}

} // namespace sgp

#endif
