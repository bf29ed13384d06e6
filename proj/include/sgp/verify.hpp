#ifndef SGP_VERIFY_HPP
#define SGP_VERIFY_HPP

// Seeded property suites for the bound lattice. Used by `sgp_cli verify` and
// by the acceptance test.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "objectives.hpp"
#include "synthetic.hpp"
#include "training.hpp"

namespace sgp {

struct CriterionResult {
    int id = 0;
    std::string key;
    std::string title;
    bool passed = false;
    int instances = 0;
    std::string detail;
    double seconds = 0.0;
};

struct VerifyOptions {
    int multiplier = 1; // 1 for "small", 5 for "full"
    std::uint64_t seed = 1;
    std::string tamper; // key of a criterion whose computed values get corrupted
};

inline VerifyOptions verify_options_for(const std::string& scale, std::uint64_t seed = 1)
{
    VerifyOptions o;
    if (scale == "small")
        o.multiplier = 1;
    else if (scale == "full")
        o.multiplier = 5;
    else
        throw InvalidArgument("scale: expected 'small' or 'full', got '" + scale + "'");
    o.seed = seed;
    return o;
}

namespace detail {

inline std::string fmt(const char* f, double a)
{
    char buf[96];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

inline CriterionResult make_result(int id, std::string key, std::string title)
{
    CriterionResult r;
    r.id = id;
    r.key = std::move(key);
    r.title = std::move(title);
    return r;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

/// Random divisor-based equal-size partition with blocks of at least two points.
inline Partition equal_partition(int n, Rng& rng)
{
    std::vector<int> divisors;
    for (int b = 1; b <= n / 2; ++b)
        if (n % b == 0)
            divisors.push_back(b);
    return make_partition(n, divisors[uniform_index(rng, divisors.size())], rng());
}

struct Tally {
    int failures = 0;
    double worst = 0.0;
    void add(double err, double tol)
    {
        worst = std::max(worst, err);
        if (!(err <= tol))
            ++failures;
    }
};

class Runner {
public:
    explicit Runner(const VerifyOptions& opt) : opt_(opt) {}

    bool tampered(const std::string& key) const { return opt_.tamper == key; }
    double tamper(const std::string& key, double v) const { return tampered(key) ? v + 1.0 : v; }
    int count(int base) const { return base * opt_.multiplier; }
    Rng rng(int id) const { return Rng(opt_.seed * 1000003ULL + static_cast<std::uint64_t>(id)); }

private:
    VerifyOptions opt_;
};

inline CriterionResult ordering_chain(const Runner& run)
{
    CriterionResult r = make_result(1, "ordering", "ordering chain sgpr <= spherical <= tsgpr <= btsgpr <= exact, shared <= bt");
    Rng rng = run.rng(1);
    r.instances = run.count(200);
    int bad = 0;
    double worst = 1e300;
    for (int i = 0; i < r.instances; ++i) {
        const Instance in = random_instance(rng);
        const auto& d = in.data;
        const auto& s = in.state;
        const double ex = exact_lml(d, s).total;
        const double sg = run.tampered("ordering") ? ex + 1.0 : sgpr_collapsed(d, s).total;
        const double sp = spherical_collapsed(d, s).total;
        const double t = tsgpr_collapsed(d, s).total;
        const double bt = btsgpr_collapsed(d, s, in.partition).total;
        const Partition eq = equal_partition(static_cast<int>(d.size()), rng);
        const double sh = sharedblock_collapsed(d, s, eq).total;
        const double bt_eq = btsgpr_collapsed(d, s, eq).total;
        const double gaps[] = {sp - sg, t - sp, bt - t, ex - bt, bt_eq - sh};
        for (double g : gaps) {
            worst = std::min(worst, g);
            if (g < -1e-9)
                ++bad;
        }
    }
    r.passed = bad == 0;
    r.detail = std::to_string(bad) + " violated gaps, most negative gap " + fmt("%.3g", worst);
    return r;
}

inline CriterionResult collapse_identities(const Runner& run)
{
    CriterionResult r = make_result(2, "collapse", "uncollapsed at optimal q(u) equals collapsed (4 VI methods + T-PEP)");
    Rng rng = run.rng(2);
    r.instances = run.count(50);
    Tally t;
    for (int i = 0; i < r.instances; ++i) {
        const Instance in = random_instance(rng);
        const auto& d = in.data;
        const auto& s = in.state;
        const int n = static_cast<int>(d.size());
        const GaussianQU q = optimal_qu(d, s, noise_only(s));
        const Partition sing = Partition::singletons(n);
        const Partition eq = equal_partition(n, rng);
        t.add(rel_err(run.tamper("collapse", btsgpr_uncollapsed(d, s, sing, q, VariationalPenalty::Trace).total),
                      sgpr_collapsed(d, s).total), 1e-8);
        t.add(rel_err(btsgpr_uncollapsed(d, s, sing, q, VariationalPenalty::Diagonal).total, tsgpr_collapsed(d, s).total),
              1e-8);
        t.add(rel_err(btsgpr_uncollapsed(d, s, in.partition, q, VariationalPenalty::Block).total,
                      btsgpr_collapsed(d, s, in.partition).total),
              1e-8);
        t.add(rel_err(btsgpr_uncollapsed(d, s, eq, q, VariationalPenalty::Shared).total,
                      sharedblock_collapsed(d, s, eq).total),
              1e-8);
        const double alphas[] = {0.25, 0.5, 1.0};
        const PepConfig cfg{alphas[i % 3], uniform(rng, 0.5, 1.5), in.partition};
        t.add(rel_err(tpep_uncollapsed(d, s, cfg, tpep_optimal_qu(d, s, cfg)).total, tpep_collapsed(d, s, cfg).total),
              1e-8);
    }
    r.passed = t.failures == 0;
    r.detail = std::to_string(t.failures) + " mismatches, max rel err " + fmt("%.3g", t.worst);
    return r;
}

inline double dense_fitc(const Dataset& d, const ModelState& s)
{
    const ConditionalGap gap = conditional_gap(d.X, s.inducing, s.kernel);
    Matrix cov = kernel_matrix(d.X, d.X, s.kernel) - gap.d;
    cov.diagonal() += gap.d.diagonal();
    cov.diagonal().array() += s.sigma2();
    return dense_gauss_logpdf(d.y, symmetrize(cov));
}

inline CriterionResult limit_lattice(const Runner& run)
{
    CriterionResult r = make_result(3, "limits", "limit lattice: alpha->0 limits, FITC at alpha=1, T-PEP(m=1)=PEP");
    Rng rng = run.rng(3);
    r.instances = run.count(50);
    Tally small_alpha, fitc, m_one;
    double ratio_min = 1e300, ratio_max = 0.0;
    for (int i = 0; i < r.instances; ++i) {
        const Instance in = random_instance(rng);
        const auto& d = in.data;
        const auto& s = in.state;
        const int n = static_cast<int>(d.size());
        const Partition sing = Partition::singletons(n);
        const double a = 1e-6;
        const double sg = sgpr_collapsed(d, s).total;
        const double gap1 = std::abs(run.tamper("limits", pep_collapsed(d, s, {a, 1.0, sing}).total) - sg);
        small_alpha.add(gap1, 1e-4);
        const double m = spherical_optimal_m(d, s);
        small_alpha.add(std::abs(tpep_collapsed(d, s, {a, m, sing}).total - spherical_collapsed(d, s).total), 1e-4);
        small_alpha.add(std::abs(general_pep_oracle(d, s, a, in.partition, optimal_mb(d, s, in.partition)).total -
                                 btsgpr_collapsed(d, s, in.partition).total),
                        1e-4);
        const double gap2 = std::abs(pep_collapsed(d, s, {a / 10.0, 1.0, sing}).total - sg);
        if (gap2 > 0.0) {
            ratio_min = std::min(ratio_min, gap1 / gap2);
            ratio_max = std::max(ratio_max, gap1 / gap2);
        }
        const double f = dense_fitc(d, s);
        fitc.add(std::abs(pep_collapsed(d, s, {1.0, 1.0, sing}).total - f) / std::abs(f), 1e-8);
        const PepConfig c{uniform(rng, 0.05, 1.0), 1.0, in.partition};
        const double pep = pep_collapsed(d, s, c).total;
        m_one.add(std::abs(tpep_collapsed(d, s, c).total - pep) / std::abs(pep), 1e-10);
    }
    r.passed = small_alpha.failures + fitc.failures + m_one.failures == 0;
    r.detail = "alpha=1e-6 gaps: " + std::to_string(small_alpha.failures) + " over 1e-4 (max " +
               fmt("%.3g", small_alpha.worst) + ", gap ratio alpha/(alpha/10) in [" + fmt("%.4g", ratio_min) + ", " +
               fmt("%.4g", ratio_max) + "]); FITC max rel " + fmt("%.3g", fitc.worst) + "; m=1 max rel " +
               fmt("%.3g", m_one.worst);
    return r;
}

inline double max_rel_diff(const Matrix& a, const Matrix& b)
{
    return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), 1e-300);
}

inline CriterionResult pep_fixed_point(const Runner& run)
{
    CriterionResult r = make_result(4, "pep-fixed-point", "PEP fixed point: site check and iterated q(u)/energy vs closed form");
    Rng rng = run.rng(4);
    r.instances = run.count(50);
    const double alphas[] = {0.25, 0.5, 1.0};
    const double ms[] = {0.5, 1.0, 1.5};
    int site_fail = 0, iter_fail = 0, not_conv = 0;
    double site_worst = 0.0, iter_worst = 0.0;
    for (int i = 0; i < r.instances; ++i) {
        const Instance in = random_instance(rng);
        const PepConfig cfg{alphas[i % 3], ms[(i / 3) % 3], in.partition};
        try {
            const FixedPointReport rep = verify_site_fixed_point(in.data, in.state, cfg, 1e-7);
            site_worst = std::max(site_worst, rep.max_deviation);
        } catch (const FixedPointMismatch& e) {
            ++site_fail;
            site_worst = std::max(site_worst, e.max_deviation());
        }
        const PepResult res = pep_iterate(in.data, in.state, cfg, 0.5, 200);
        if (!res.converged)
            ++not_conv;
        const GaussianQU q = tpep_optimal_qu(in.data, in.state, cfg);
        const double e = std::max({max_rel_diff(res.q.mean, q.mean), max_rel_diff(res.q.cov(), q.cov()),
                                   rel_err(run.tamper("pep-fixed-point", res.energy),
                                           tpep_collapsed(in.data, in.state, cfg).total)});
        iter_worst = std::max(iter_worst, e);
        if (!(e <= 1e-6))
            ++iter_fail;
    }
    r.passed = site_fail == 0 && iter_fail == 0 && not_conv == 0;
    r.detail = "site mismatches " + std::to_string(site_fail) + " (max dev " + fmt("%.3g", site_worst) +
               "), iterate mismatches " + std::to_string(iter_fail) + " (max rel " + fmt("%.3g", iter_worst) +
               "), non-converged " + std::to_string(not_conv);
    return r;
}

inline CriterionResult unbiasedness(const Runner& run)
{
    CriterionResult r = make_result(5, "unbiased", "block-averaged one-block estimator equals the uncollapsed bound");
    Rng rng = run.rng(5);
    r.instances = run.count(50);
    Tally t;
    for (int i = 0; i < r.instances; ++i) {
        const Instance in = random_instance(rng);
        const auto& d = in.data;
        const auto& s = in.state;
        const GaussianQU q = (i % 2) ? optimal_qu(d, s, noise_only(s)) : random_qu(rng, s.num_inducing());
        const std::size_t nb = in.partition.num_blocks();
        double sum = 0.0;
        for (std::size_t b = 0; b < nb; ++b)
            sum += btsgpr_stochastic(d, s, in.partition, q, b);
        const double avg = run.tamper("unbiased", sum / static_cast<double>(nb));
        t.add(rel_err(avg, btsgpr_uncollapsed(d, s, in.partition, q).total), 1e-12);
    }
    r.passed = t.failures == 0;
    r.detail = std::to_string(t.failures) + " mismatches, max rel err " + fmt("%.3g", t.worst);
    return r;
}

inline CriterionResult general_c_optimality(const Runner& run)
{
    CriterionResult r = make_result(6, "general-c", "general-C oracle <= BT-SGPR for random C, equality at the optimum");
    Rng rng = run.rng(6);
    r.instances = run.count(10);
    const int per_instance = 100;
    int above = 0, opt_fail = 0;
    double worst_excess = -1e300, worst_opt = 0.0;
    for (int i = 0; i < r.instances; ++i) {
        const Instance in = random_instance(rng);
        const auto& d = in.data;
        const auto& s = in.state;
        const Index n = d.size();
        const Partition one = Partition::single_block(static_cast<int>(n));
        const double bt_one = btsgpr_collapsed(d, s, one).total;
        const double bt_part = btsgpr_collapsed(d, s, in.partition).total;
        const Matrix gap = conditional_gap(d.X, s.inducing, s.kernel).d;
        const Matrix d_sqrt = SymmetricEigen(gap).sqrt();
        const double scale = gap.trace() / static_cast<double>(n);

        // Optimal C for one block and for the instance partition.
        const auto dense_c = [&](const BlockDiagonal& m, const Partition& p) {
            BlockDiagonal b;
            b.index = p.blocks();
            b.blocks = m.blocks;
            return Matrix(symmetrize(d_sqrt * b.dense(n) * d_sqrt));
        };
        const Matrix c_one = dense_c(optimal_mb(d, s, one), one);
        const Matrix c_part = dense_c(optimal_mb(d, s, in.partition), in.partition);
        const double e1 = rel_err(run.tamper("general-c", general_c_oracle(d, s, c_one).total), bt_one);
        const double e2 = rel_err(general_c_oracle(d, s, c_part).total, bt_part);
        worst_opt = std::max({worst_opt, e1, e2});
        opt_fail += (e1 > 1e-7) + (e2 > 1e-7);

        const SymmetricEigen c_one_eig(c_one);
        const Matrix c_one_sqrt = c_one_eig.sqrt();
        for (int k = 0; k < per_instance; ++k) {
            double value = 0.0, bound = 0.0;
            switch (k % 3) {
            case 0: { // arbitrary SPD C on the data scale
                value = general_c_oracle(d, s, scale * random_spd(rng, n, 0.05)).total;
                bound = bt_one;
                break;
            }
            case 1: { // perturbation of the one-block optimum
                Matrix g = random_spd(rng, n, 0.0);
                g = 0.5 * (g + g.transpose()) - Matrix::Identity(n, n) * (g.trace() / static_cast<double>(n));
                const double eps = 0.2 * std::pow(10.0, -uniform(rng, 0.0, 3.0)) / std::max(1.0, g.norm());
                Matrix m = Matrix::Identity(n, n) + eps * g;
                value = general_c_oracle(d, s, symmetrize(c_one_sqrt * m * c_one_sqrt)).total;
                bound = bt_one;
                break;
            }
            default: { // block-structured scaling on the instance partition
                BlockDiagonal m;
                for (const auto& blk : in.partition.blocks()) {
                    m.index.push_back(blk);
                    m.blocks.push_back(random_spd(rng, static_cast<Index>(blk.size()), 0.05));
                }
                value = general_c_oracle(d, s, dense_c(m, in.partition)).total;
                bound = bt_part;
                break;
            }
            }
            const double excess = (value - bound) / std::max(1.0, std::abs(bound));
            worst_excess = std::max(worst_excess, excess);
            if (excess > 1e-7)
                ++above;
        }
    }
    r.passed = above == 0 && opt_fail == 0;
    r.detail = std::to_string(above) + " random C above the bound (max rel excess " + fmt("%.3g", worst_excess) +
               "), optimum mismatches " + std::to_string(opt_fail) + " (max rel " + fmt("%.3g", worst_opt) + ")";
    return r;
}

struct GradientFamily {
    std::string name;
    BoundSpec spec;
    enum Kind { Collapsed, Uncollapsed, Stochastic } kind = Collapsed;
};

inline std::vector<GradientFamily> gradient_families()
{
    using K = GradientFamily::Kind;
    return {
        {"Exact", {Method::Exact, {}, {}}, K::Collapsed},
        {"SGPR", {Method::SGPR, {}, {}}, K::Collapsed},
        {"T-SGPR", {Method::TSGPR, {}, {}}, K::Collapsed},
        {"BT-SGPR", {Method::BTSGPR, {}, 3}, K::Collapsed},
        {"SharedBlock", {Method::SharedBlock, {}, 4}, K::Collapsed},
        {"Spherical", {Method::Spherical, {}, {}}, K::Collapsed},
        {"PEP", {Method::PEP, 0.5, 3}, K::Collapsed},
        {"T-PEP", {Method::TPEP, 0.5, 3}, K::Collapsed},
        {"SGPR-uncollapsed", {Method::SGPR, {}, {}}, K::Uncollapsed},
        {"T-SGPR-uncollapsed", {Method::TSGPR, {}, {}}, K::Uncollapsed},
        {"BT-SGPR-uncollapsed", {Method::BTSGPR, {}, 3}, K::Uncollapsed},
        {"SharedBlock-uncollapsed", {Method::SharedBlock, {}, 4}, K::Uncollapsed},
        {"PEP-uncollapsed", {Method::PEP, 0.5, 3}, K::Uncollapsed},
        {"T-PEP-uncollapsed", {Method::TPEP, 0.5, 3}, K::Uncollapsed},
        {"BT-SGPR-stochastic", {Method::BTSGPR, {}, 3}, K::Stochastic},
        {"T-PEP-stochastic", {Method::TPEP, 0.5, 3}, K::Stochastic},
    };
}

inline CriterionResult gradient_checks(const Runner& run)
{
    CriterionResult r = make_result(7, "gradients", "analytic gradients match central finite differences, every family");
    Rng rng = run.rng(7);
    const int per_family = run.count(20);
    InstanceOptions opt;
    opt.n_min = 12;
    opt.n_max = 24;
    opt.d_min = 1;
    opt.d_max = 3;
    opt.m_min = 2;
    opt.m_max = 5;
    std::string failed;
    double worst = 0.0;
    for (const auto& fam : gradient_families()) {
        for (int i = 0; i < per_family; ++i) {
            opt.n_min = opt.n_max = 12 * (1 + static_cast<int>(uniform_index(rng, 2))); // divisible by 3 and 4
            Instance in = random_instance(rng, opt);
            BoundSpec spec = fam.spec;
            if (spec.alpha)
                spec.alpha = uniform(rng, 0.1, 1.0);
            if (spec.method == Method::TPEP)
                in.state.log_m = uniform(rng, -0.4, 0.4);
            const int n = static_cast<int>(in.data.size());
            const Partition part = bound_partition(spec, n, rng());
            ObjectiveFn f;
            Vector theta;
            if (fam.kind == GradientFamily::Collapsed) {
                f = collapsed_objective(in.data, in.state, spec, part);
                theta = layout_for(in.state, spec, false).pack(in.state);
            } else {
                const GaussianQU q = random_qu(rng, in.state.num_inducing());
                std::vector<std::size_t> blocks = all_blocks(part);
                double scale = 1.0;
                if (fam.kind == GradientFamily::Stochastic) {
                    blocks = {uniform_index(rng, part.num_blocks())};
                    scale = static_cast<double>(part.num_blocks());
                }
                f = uncollapsed_objective(in.data, in.state, spec, part, blocks, scale);
                theta = layout_for(in.state, spec, true).pack(in.state, &q);
            }
            ++r.instances;
            Vector ga = gradient(f, theta, GradientMode::Analytic);
            const Vector gf = gradient(f, theta, GradientMode::FiniteDifference, 1e-5);
            if (run.tamper("gradients", 0.0) != 0.0)
                ga(0) += 1.0;
            bool ok = true;
            for (Index k = 0; k < ga.size(); ++k) {
                const double err = std::abs(ga(k) - gf(k));
                const double tol = 1e-6 + 1e-4 * std::abs(gf(k));
                worst = std::max(worst, err / tol);
                ok = ok && err <= tol;
            }
            if (!ok && failed.find(fam.name) == std::string::npos)
                failed += (failed.empty() ? "" : ",") + fam.name;
        }
    }
    r.passed = failed.empty();
    r.detail = "families " + std::to_string(gradient_families().size()) + " x " + std::to_string(per_family) +
               ", worst err/tol " + fmt("%.3g", worst) + (failed.empty() ? "" : ", failing: " + failed);
    return r;
}

} // namespace detail

/// Runs criteria 1 to 7 and returns one result per criterion.
inline std::vector<CriterionResult> run_verification(
    const VerifyOptions& opt, const std::function<void(const CriterionResult&)>& on_result = {})
{
    const detail::Runner run(opt);
    using Fn = CriterionResult (*)(const detail::Runner&);
    const Fn suites[] = {detail::ordering_chain,   detail::collapse_identities, detail::limit_lattice,
                         detail::pep_fixed_point,  detail::unbiasedness,        detail::general_c_optimality,
                         detail::gradient_checks};
    std::vector<CriterionResult> out;
    for (Fn f : suites) {
        const auto t0 = std::chrono::steady_clock::now();
        CriterionResult r;
        try {
            r = f(run);
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("exception: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (on_result)
            on_result(r);
        out.push_back(r);
    }
    return out;
}

inline std::vector<std::string> verification_keys()
{
    return {"ordering", "collapse", "limits", "pep-fixed-point", "unbiased", "general-c", "gradients"};
}

} // namespace sgp

#endif
