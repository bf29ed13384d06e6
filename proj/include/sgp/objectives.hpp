#ifndef SGP_OBJECTIVES_HPP
#define SGP_OBJECTIVES_HPP

// Uniform access to every trainable objective: dispatch on BoundSpec, flat
// parameter packing, and value-plus-gradient evaluation.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bounds_pep.hpp"
#include "bounds_vi.hpp"

namespace sgp {

/// Partition used by a method: seeded blocks if the method takes a block
/// count, otherwise one point per block.
inline Partition bound_partition(const BoundSpec& spec, int n, std::uint64_t seed)
{
    spec.validate(n);
    if (spec.num_blocks)
        return make_partition(n, *spec.num_blocks, seed);
    return Partition::singletons(n);
}

inline bool is_collapsible(Method m) { return !is_oracle(m); }

inline bool supports_uncollapsed(Method m)
{
    return m == Method::SGPR || m == Method::TSGPR || m == Method::BTSGPR || m == Method::SharedBlock ||
           m == Method::Spherical || m == Method::PEP || m == Method::TPEP;
}

inline bool supports_stochastic(Method m)
{
    return supports_uncollapsed(m) && m != Method::SharedBlock && m != Method::Spherical;
}

inline bool has_trainable_m(Method m) { return m == Method::TPEP; }

namespace detail {

inline Family family_for(const BoundSpec& spec, const ModelState& state)
{
    switch (spec.method) {
    case Method::SGPR: return vi_family(Penalty::Trace);
    case Method::TSGPR: return vi_family(Penalty::DiagLog);
    case Method::BTSGPR: return vi_family(Penalty::BlockLog);
    case Method::SharedBlock:
    case Method::Spherical: return vi_family(Penalty::SharedLog);
    case Method::PEP: return pep_family(*spec.alpha, 1.0);
    case Method::TPEP: {
        Family f = pep_family(*spec.alpha, state.m());
        f.m_trainable = true;
        return f;
    }
    default: break;
    }
    throw InvalidArgument("method: " + to_string(spec.method) + " has no tractable family");
}

inline void check_partition(const BoundSpec& spec, const Partition& part, Index n)
{
    if (part.num_points() != n)
        throw DimensionMismatch("partition covers " + std::to_string(part.num_points()) + " points, data has " +
                                std::to_string(n));
    if ((spec.method == Method::SharedBlock || spec.method == Method::Spherical) && !part.equal_sizes())
        throw InvalidArgument("num_blocks: shared-block bound requires equal block sizes");
}

} // namespace detail

/// Collapsed value of any method, oracles excluded. `part` must come from bound_partition.
inline BoundBreakdown evaluate(const Dataset& data, const ModelState& state, const BoundSpec& spec,
                               const Partition& part)
{
    spec.validate(static_cast<int>(data.size()));
    if (spec.method == Method::Exact)
        return exact_lml(data, state);
    if (spec.method == Method::TPEP)
        return tpep_collapsed(data, state, {*spec.alpha, state.m(), part});
    detail::check_partition(spec, part, data.size());
    return detail::collapsed_value(data, state, part, detail::family_for(spec, state));
}

/// Flat unconstrained parameter vector:
///   [log l (D) | log s2 | log sigma2 | Z row-major (M D) | log m? | q mean (M) | q lower-tri row-major?]
/// with the diagonal of the q(u) Cholesky factor stored as a log.
struct ParamLayout {
    Index dim = 0;
    Index num_inducing = 0;
    bool has_m = false;
    bool has_q = false;

    Index size() const
    {
        Index s = dim + 2 + num_inducing * dim + (has_m ? 1 : 0);
        if (has_q)
            s += num_inducing + num_inducing * (num_inducing + 1) / 2;
        return s;
    }

    Index z_offset() const { return dim + 2; }
    Index m_offset() const { return z_offset() + num_inducing * dim; }
    Index q_offset() const { return m_offset() + (has_m ? 1 : 0); }

    Vector pack(const ModelState& s, const GaussianQU* q = nullptr) const
    {
        Vector v(size());
        v.head(dim) = s.kernel.log_lengthscales;
        v(dim) = s.kernel.log_signal_variance;
        v(dim + 1) = s.noise.log_noise_variance;
        Index k = z_offset();
        for (Index i = 0; i < num_inducing; ++i)
            for (Index j = 0; j < dim; ++j)
                v(k++) = s.inducing(i, j);
        if (has_m)
            v(k++) = s.log_m.value_or(0.0);
        if (has_q) {
            if (!q)
                throw InvalidArgument("ParamLayout: q(u) required");
            for (Index i = 0; i < num_inducing; ++i)
                v(k++) = q->mean(i);
            const Matrix& l = q->cov_chol.lower;
            for (Index i = 0; i < num_inducing; ++i)
                for (Index j = 0; j <= i; ++j)
                    v(k++) = (i == j) ? std::log(std::abs(l(i, i))) : l(i, j);
        }
        return v;
    }

    void unpack(const Vector& v, ModelState& s, GaussianQU* q = nullptr) const
    {
        if (v.size() != size())
            throw DimensionMismatch("ParamLayout: expected " + std::to_string(size()) + " parameters, got " +
                                    std::to_string(v.size()));
        s.kernel.log_lengthscales = v.head(dim);
        s.kernel.log_signal_variance = v(dim);
        s.noise.log_noise_variance = v(dim + 1);
        s.inducing.resize(num_inducing, dim);
        Index k = z_offset();
        for (Index i = 0; i < num_inducing; ++i)
            for (Index j = 0; j < dim; ++j)
                s.inducing(i, j) = v(k++);
        if (has_m)
            s.log_m = v(k++);
        if (has_q && q) {
            q->mean.resize(num_inducing);
            for (Index i = 0; i < num_inducing; ++i)
                q->mean(i) = v(k++);
            Matrix l = Matrix::Zero(num_inducing, num_inducing);
            for (Index i = 0; i < num_inducing; ++i)
                for (Index j = 0; j <= i; ++j)
                    l(i, j) = (i == j) ? std::exp(v(k++)) : v(k++);
            q->cov_chol.lower = l;
            q->cov_chol.jitter_used = 0.0;
        }
    }

    Vector pack_gradient(const detail::ParamGradient& g, const detail::Adjoints* adj,
                         const GaussianQU* q) const
    {
        Vector v(size());
        v.head(dim) = g.log_lengthscales;
        v(dim) = g.log_signal_variance;
        v(dim + 1) = g.log_noise_variance;
        Index k = z_offset();
        for (Index i = 0; i < num_inducing; ++i)
            for (Index j = 0; j < dim; ++j)
                v(k++) = g.inducing(i, j);
        if (has_m)
            v(k++) = g.log_m;
        if (has_q) {
            for (Index i = 0; i < num_inducing; ++i)
                v(k++) = adj->q_mean(i);
            const Matrix& l = q->cov_chol.lower;
            for (Index i = 0; i < num_inducing; ++i)
                for (Index j = 0; j <= i; ++j)
                    v(k++) = (i == j) ? adj->q_lower(i, i) * l(i, i) : adj->q_lower(i, j);
        }
        return v;
    }
};

inline ParamLayout layout_for(const ModelState& s, const BoundSpec& spec, bool with_q)
{
    ParamLayout l;
    l.dim = s.dim();
    l.num_inducing = s.num_inducing();
    l.has_m = has_trainable_m(spec.method);
    l.has_q = with_q;
    return l;
}

/// f(theta) with optional gradient output.
using ObjectiveFn = std::function<double(const Vector& theta, Vector* grad)>;

/// Collapsed objective of `spec` as a function of the flat parameters.
inline ObjectiveFn collapsed_objective(const Dataset& data, const ModelState& base, const BoundSpec& spec,
                                       const Partition& part)
{
    spec.validate(static_cast<int>(data.size()));
    if (!is_collapsible(spec.method))
        throw InvalidArgument("method: " + to_string(spec.method) + " is a dense oracle and cannot be trained");
    if (spec.method != Method::Exact)
        detail::check_partition(spec, part, data.size());
    const ParamLayout layout = layout_for(base, spec, false);
    return [data, base, spec, part, layout](const Vector& theta, Vector* grad) {
        ModelState s = base;
        layout.unpack(theta, s);
        if (spec.method == Method::Exact) {
            const auto r = detail::exact_eval(data, s, grad != nullptr, kExactDenseCap);
            if (grad)
                *grad = layout.pack_gradient(*r.grad, nullptr, nullptr);
            return r.value.total;
        }
        const detail::Cache c = detail::build_cache(data, s, part, detail::all_blocks(part));
        const detail::Evaluation e = detail::collapsed(c, detail::family_for(spec, s), grad != nullptr);
        if (grad)
            *grad = layout.pack_gradient(detail::chain_params(c, s, *e.adj), nullptr, nullptr);
        return e.value.total;
    };
}

/// Uncollapsed objective restricted to `blocks` with the per-block part scaled by `scale`.
/// Parameters include q(u).
inline ObjectiveFn uncollapsed_objective(const Dataset& data, const ModelState& base, const BoundSpec& spec,
                                         const Partition& part, std::vector<std::size_t> blocks, double scale)
{
    spec.validate(static_cast<int>(data.size()));
    if (!supports_uncollapsed(spec.method))
        throw InvalidArgument("method: " + to_string(spec.method) + " has no uncollapsed form");
    detail::check_partition(spec, part, data.size());
    if (blocks.size() != part.num_blocks() && !supports_stochastic(spec.method))
        throw InvalidArgument("method: " + to_string(spec.method) + " does not split over blocks");
    const ParamLayout layout = layout_for(base, spec, true);
    return [data, base, spec, part, blocks = std::move(blocks), scale, layout](const Vector& theta, Vector* grad) {
        ModelState s = base;
        GaussianQU q;
        layout.unpack(theta, s, &q);
        const detail::Cache c = detail::build_cache(data, s, part, blocks);
        const detail::Evaluation e = detail::uncollapsed(c, detail::family_for(spec, s), q, scale, grad != nullptr);
        if (grad)
            *grad = layout.pack_gradient(detail::chain_params(c, s, *e.adj), &*e.adj, &q);
        return e.value.total;
    };
}

/// Closed-form optimal q(u) for a collapsed method at `state`. Exact uses the VI posterior
/// on the current inducing set.
inline GaussianQU posterior_for(const Dataset& data, const ModelState& state, const BoundSpec& spec,
                                const Partition& part)
{
    if (spec.method == Method::PEP)
        return tpep_optimal_qu(data, state, {*spec.alpha, 1.0, part});
    if (spec.method == Method::TPEP)
        return tpep_optimal_qu(data, state, {*spec.alpha, state.m(), part});
    return optimal_qu(data, state, noise_only(state));
}

} // namespace sgp

#endif
