#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace sgp;
using oracle::rel_close;

namespace {

Instance instance(std::uint64_t seed, int n_min = 20, int n_max = 40)
{
    Rng rng(seed);
    InstanceOptions opt;
    opt.n_min = n_min;
    opt.n_max = n_max;
    return random_instance(rng, opt);
}

Partition singletons(const Instance& in) { return Partition::singletons(static_cast<int>(in.data.size())); }

} // namespace

TEST(PepConfig, Validation)
{
    const Instance in = instance(1);
    EXPECT_THROW(pep_collapsed(in.data, in.state, {0.0, 1.0, in.partition}), InvalidArgument);
    EXPECT_THROW(pep_collapsed(in.data, in.state, {1.5, 1.0, in.partition}), InvalidArgument);
    EXPECT_THROW(tpep_collapsed(in.data, in.state, {0.5, -1.0, in.partition}), InvalidArgument);
    EXPECT_THROW(tpep_collapsed(in.data, in.state, {0.5, 1.0, Partition::singletons(3)}), DimensionMismatch);
    try {
        pep_collapsed(in.data, in.state, {2.0, 1.0, in.partition});
    } catch (const InvalidArgument& e) {
        EXPECT_EQ(std::string(e.what()).rfind("alpha:", 0), 0u);
    }
}

TEST(Pep, AlphaOneSingletonsIsFitc)
{
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Instance in = instance(seed);
        EXPECT_TRUE(rel_close(pep_collapsed(in.data, in.state, {1.0, 1.0, singletons(in)}).total,
                              oracle::fitc(in.data, in.state), 1e-10));
    }
}

TEST(Pep, MatchesDenseOracleAndIgnoresMScale)
{
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Instance in = instance(seed);
        const double a = 0.1 + 0.04 * static_cast<double>(seed);
        const double v = pep_collapsed(in.data, in.state, {a, 1.0, in.partition}).total;
        EXPECT_TRUE(rel_close(v, oracle::tpep(in.data, in.state, in.partition, a, 1.0), 1e-10));
        EXPECT_EQ(v, pep_collapsed(in.data, in.state, {a, 1.7, in.partition}).total);
        EXPECT_TRUE(rel_close(v,
                              general_pep_oracle(in.data, in.state, a, in.partition,
                                                 scaled_identity_blocks(in.partition, 1.0))
                                  .total,
                              1e-8));
    }
}

TEST(Pep, SmallAlphaApproachesSgprLinearly)
{
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Instance in = instance(seed);
        const double sg = sgpr_collapsed(in.data, in.state).total;
        const double g1 = std::abs(pep_collapsed(in.data, in.state, {1e-5, 1.0, singletons(in)}).total - sg);
        const double g2 = std::abs(pep_collapsed(in.data, in.state, {1e-6, 1.0, singletons(in)}).total - sg);
        EXPECT_NEAR(g1 / g2, 10.0, 0.05);
        EXPECT_LT(std::abs(pep_collapsed(in.data, in.state, {1e-9, 1.0, singletons(in)}).total - sg), 1e-4);
    }
}

TEST(Tpep, MatchesDenseOracle)
{
    Rng rng(2);
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Instance in = instance(seed);
        const double a = uniform(rng, 0.05, 1.0);
        const double m = uniform(rng, 0.3, 1.8);
        EXPECT_TRUE(rel_close(tpep_collapsed(in.data, in.state, {a, m, in.partition}).total,
                              oracle::tpep(in.data, in.state, in.partition, a, m), 1e-10));
        EXPECT_TRUE(rel_close(tpep_collapsed(in.data, in.state, {a, m, in.partition}).total,
                              general_pep_oracle(in.data, in.state, a, in.partition,
                                                 scaled_identity_blocks(in.partition, m))
                                  .total,
                              1e-8));
    }
}

TEST(Tpep, UnitScaleIsPep)
{
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Instance in = instance(seed);
        const PepConfig c{0.3, 1.0, in.partition};
        EXPECT_TRUE(rel_close(tpep_collapsed(in.data, in.state, c).total, pep_collapsed(in.data, in.state, c).total,
                              1e-12));
    }
}

TEST(Tpep, AlphaOneHasNoPenalty)
{
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Instance in = instance(seed);
        const oracle::Dense o = oracle::dense(in.data, in.state);
        for (double m : {0.5, 1.0, 2.0}) {
            const BoundBreakdown b = tpep_collapsed(in.data, in.state, {1.0, m, in.partition});
            EXPECT_NEAR(b.regularizer, 0.0, 1e-10);
            EXPECT_TRUE(rel_close(b.total,
                                  oracle::q_fit(in.data, in.state, m * oracle::block_mask(o.d, in.partition)), 1e-10));
        }
    }
}

TEST(Tpep, SmallAlphaSphericalLimit)
{
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Instance in = instance(seed);
        const double m = spherical_optimal_m(in.data, in.state);
        EXPECT_LT(std::abs(tpep_collapsed(in.data, in.state, {1e-9, m, singletons(in)}).total -
                           spherical_collapsed(in.data, in.state).total),
                  1e-4);
    }
}

namespace {

double m_slope(const Instance& in, double alpha, double m, double h = 1e-5)
{
    const Partition p = singletons(in);
    const auto f = [&](double mm) { return tpep_collapsed(in.data, in.state, {alpha, mm, p}).total; };
    return (f(m + h) - f(m - h)) / (2 * h);
}

} // namespace

TEST(Tpep, SphericalMIsStationaryAtSmallAlpha)
{
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Instance in = instance(seed);
        EXPECT_LT(std::abs(m_slope(in, 1e-6, spherical_optimal_m(in.data, in.state))), 1e-5);
    }
}

TEST(Tpep, MSlopeAtSphericalMVanishesLinearlyInAlpha)
{
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Instance in = instance(seed);
        const double m = spherical_optimal_m(in.data, in.state);
        const double s1 = m_slope(in, 1e-3, m), s2 = m_slope(in, 1e-4, m);
        EXPECT_NEAR(s1 / s2, 10.0, 0.1);
    }
}

TEST(Tpep, ZeroDataAndFullInducingSet)
{
    Instance in = instance(3);
    in.data.y.setZero();
    const PepConfig c{0.5, 0.8, in.partition};
    EXPECT_LT(tpep_optimal_qu(in.data, in.state, c).mean.cwiseAbs().maxCoeff(), 1e-14);

    Rng rng(4);
    InstanceOptions opt;
    opt.inducing_at_inputs = true;
    opt.n_max = 30;
    const Instance z = random_instance(rng, opt);
    const double ex = exact_lml(z.data, z.state).total;
    for (double a : {0.1, 0.5, 1.0}) {
        EXPECT_TRUE(rel_close(tpep_collapsed(z.data, z.state, {a, 1.0, z.partition}).total, ex, 1e-7));
        EXPECT_TRUE(rel_close(tpep_collapsed(z.data, z.state, {1.0, 1.0 + a, z.partition}).total, ex, 1e-7));
    }
    EXPECT_LT(tpep_collapsed(z.data, z.state, {0.5, 1.3, z.partition}).total, ex);
}

TEST(Tpep, OptimalQAtAlphaOneIsFitcPosterior)
{
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Instance in = instance(seed, 10, 20);
        const oracle::Dense o = oracle::dense(in.data, in.state);
        Matrix r = o.d.diagonal().asDiagonal();
        r.diagonal().array() += in.state.sigma2();
        const oracle::Posterior p = oracle::bayes_linear(in.data, in.state, r);
        const GaussianQU q = tpep_optimal_qu(in.data, in.state, {1.0, 1.0, singletons(in)});
        EXPECT_LT((q.mean - p.mean).norm(), 1e-8 * p.mean.norm());
        EXPECT_LT((q.cov() - p.cov).norm(), 1e-8 * p.cov.norm());
    }
}

TEST(Tpep, UncollapsedAtOptimalQ)
{
    Rng rng(5);
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Instance in = instance(seed);
        const PepConfig c{uniform(rng, 0.05, 1.0), uniform(rng, 0.5, 1.5), in.partition};
        const double collapsed = tpep_collapsed(in.data, in.state, c).total;
        const GaussianQU q = tpep_optimal_qu(in.data, in.state, c);
        EXPECT_TRUE(rel_close(tpep_uncollapsed(in.data, in.state, c, q).total, collapsed, 1e-8));
        for (int t = 0; t < 10; ++t)
            EXPECT_LE(tpep_uncollapsed(in.data, in.state, c, random_qu(rng, in.state.num_inducing())).total,
                      collapsed + 1e-9);
    }
}

TEST(SiteFixedPoint, Examples)
{
    const Instance in = instance(6);
    EXPECT_GT(verify_site_fixed_point(in.data, in.state, {1.0, 1.0, in.partition}).blocks_checked, 0u);
    EXPECT_LT(verify_site_fixed_point(in.data, in.state, {0.5, 0.7, in.partition}).max_deviation, 1e-7);

    Rng rng(7);
    InstanceOptions opt;
    opt.inducing_at_inputs = true;
    const Instance z = random_instance(rng, opt);
    EXPECT_LT(verify_site_fixed_point(z.data, z.state, {0.5, 1.0, z.partition}).max_deviation, 1e-7);
}

TEST(PepIterate, MatchesClosedForm)
{
    const double alphas[] = {0.25, 0.5, 1.0};
    const double ms[] = {0.5, 1.0, 1.5};
    for (std::uint64_t seed = 1; seed <= 9; ++seed) {
        const Instance in = instance(seed);
        const PepConfig c{alphas[seed % 3], ms[(seed / 3) % 3], in.partition};
        const PepResult res = pep_iterate(in.data, in.state, c);
        ASSERT_TRUE(res.converged);
        EXPECT_TRUE(rel_close(res.energy, tpep_collapsed(in.data, in.state, c).total, 1e-6));
        const GaussianQU q = tpep_optimal_qu(in.data, in.state, c);
        EXPECT_LT((res.q.mean - q.mean).norm(), 1e-6 * std::max(1.0, q.mean.norm()));
        EXPECT_LT((res.q.cov() - q.cov()).norm(), 1e-6 * std::max(1.0, q.cov().norm()));
    }
}

TEST(PepIterate, SmallAlphaRecoversVariationalPosterior)
{
    const Instance in = instance(8);
    const PepResult res = pep_iterate(in.data, in.state, {1e-6, 1.0, singletons(in)});
    const GaussianQU vi = optimal_qu(in.data, in.state, noise_only(in.state));
    EXPECT_LT((res.q.mean - vi.mean).norm(), 1e-4 * std::max(1.0, vi.mean.norm()));
    EXPECT_LT((res.q.cov() - vi.cov()).norm(), 1e-4 * std::max(1.0, vi.cov().norm()));
}

TEST(PepIterate, Validation)
{
    const Instance in = instance(9);
    EXPECT_THROW(pep_iterate(in.data, in.state, {0.5, 1.0, in.partition}, 0.0), InvalidArgument);
    EXPECT_THROW(pep_iterate(in.data, in.state, {0.5, 1.0, in.partition}, 0.5, 0), InvalidArgument);
}

TEST(GeneralPep, OptimalMbAtSmallAlphaApproachesBtsgpr)
{
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Instance in = instance(seed);
        EXPECT_LT(std::abs(general_pep_oracle(in.data, in.state, 1e-9, in.partition,
                                              optimal_mb(in.data, in.state, in.partition))
                               .total -
                           btsgpr_collapsed(in.data, in.state, in.partition).total),
                  1e-4);
    }
}
