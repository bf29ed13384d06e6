#ifndef SGP_TRAINING_HPP
#define SGP_TRAINING_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "objectives.hpp"

namespace sgp {

enum class GradientMode { Analytic, FiniteDifference };
enum class OptimizerKind { Adam, LBFGS };

struct TrainConfig {
    BoundSpec objective;
    OptimizerKind optimizer = OptimizerKind::LBFGS;
    double learning_rate = 0.005;
    int epochs = 300;
    std::uint64_t seed = 0;
    GradientMode gradient_mode = GradientMode::Analytic;
    double fd_step = 1e-5;
    double grad_tol = 1e-6; // L-BFGS stopping rule on the max-norm of the gradient

    void validate() const
    {
        if (!(learning_rate > 0.0))
            throw InvalidArgument("learning_rate: must be positive");
        if (!(fd_step > 0.0))
            throw InvalidArgument("fd_step: must be positive");
        if (epochs < 1)
            throw InvalidArgument("epochs: must be positive");
    }
};

struct TraceRow {
    int step = 0;
    double objective = 0.0;
    double sigma2 = 0.0;
    double kernel_variance = 0.0;
    Vector lengthscales;
    std::optional<double> m;
    double wall_ms = 0.0;
};

using TrainTrace = std::vector<TraceRow>;

/// Gradient of `f` at `theta`, analytic or by central differences with step
/// fd_step * max(1, |theta_i|). A failing perturbed evaluation is retried once
/// with half the step.
inline Vector gradient(const ObjectiveFn& f, const Vector& theta, GradientMode mode, double fd_step = 1e-5)
{
    if (mode == GradientMode::Analytic) {
        Vector g;
        try {
            f(theta, &g);
        } catch (const NotPositiveDefinite& e) {
            throw EvaluationFailed(std::string("gradient: ") + e.what());
        }
        return g;
    }
    Vector g(theta.size());
    for (Index i = 0; i < theta.size(); ++i) {
        double h = fd_step * std::max(1.0, std::abs(theta(i)));
        for (int attempt = 0;; ++attempt) {
            try {
                Vector tp = theta, tm = theta;
                tp(i) += h;
                tm(i) -= h;
                g(i) = (f(tp, nullptr) - f(tm, nullptr)) / (2.0 * h);
                break;
            } catch (const Error& e) {
                if (attempt == 1)
                    throw EvaluationFailed("gradient: finite difference failed at coordinate " + std::to_string(i) +
                                           ": " + e.what());
                h *= 0.5;
            }
        }
    }
    return g;
}

/// Adam for maximization.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps)
    {
    }

    void step(Vector& theta, const Vector& grad)
    {
        if (m_.size() != theta.size()) {
            m_ = Vector::Zero(theta.size());
            v_ = Vector::Zero(theta.size());
        }
        ++t_;
        m_ = b1_ * m_ + (1.0 - b1_) * grad;
        v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(b1_, t_);
        const double c2 = 1.0 - std::pow(b2_, t_);
        theta.array() += lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
    }

private:
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    Vector m_, v_;
};

struct LbfgsOptions {
    int max_iterations = 1000;
    int history = 10;
    double grad_tol = 1e-6;
    double armijo = 1e-4;
    int max_backtracks = 30;
};

struct LbfgsResult {
    Vector theta;
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// Limited-memory BFGS maximizer with a backtracking Armijo line search.
/// `on_iter(iteration, theta, value)` is invoked after every accepted step.
template <typename Callback>
LbfgsResult lbfgs_maximize(const ObjectiveFn& f, Vector theta, const LbfgsOptions& opt, GradientMode mode,
                           double fd_step, Callback&& on_iter)
{
    // Work on g = -f so the textbook minimization recursion applies.
    auto eval = [&](const Vector& t, Vector& grad) {
        const double v = f(t, nullptr);
        grad = -gradient(f, t, mode, fd_step);
        return -v;
    };
    auto value_only = [&](const Vector& t) -> std::optional<double> {
        try {
            const double v = f(t, nullptr);
            if (!std::isfinite(v))
                return std::nullopt;
            return -v;
        } catch (const Error&) {
            return std::nullopt;
        }
    };

    LbfgsResult res;
    Vector g;
    double fx = eval(theta, g);
    if (!std::isfinite(fx))
        throw EvaluationFailed("lbfgs: non-finite objective at the starting point");
    std::deque<Vector> s_hist, y_hist;
    std::deque<double> rho_hist;
    for (int it = 1; it <= opt.max_iterations; ++it) {
        if (g.cwiseAbs().maxCoeff() < opt.grad_tol) {
            res.converged = true;
            break;
        }
        // Two-loop recursion.
        Vector q = g;
        std::vector<double> a(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            a[static_cast<std::size_t>(i)] = rho_hist[static_cast<std::size_t>(i)] * s_hist[static_cast<std::size_t>(i)].dot(q);
            q -= a[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)];
        }
        double gamma = 1.0;
        if (!s_hist.empty())
            gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        else
            gamma = 1.0 / std::max(1.0, g.norm());
        Vector dir = gamma * q;
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            const double b = rho_hist[i] * y_hist[i].dot(dir);
            dir += s_hist[i] * (a[i] - b);
        }
        dir = -dir;
        double slope = g.dot(dir);
        if (!(slope < 0.0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -g / std::max(1.0, g.norm());
            slope = g.dot(dir);
        }

        double step = 1.0;
        std::optional<double> fnew;
        Vector cand;
        for (int k = 0; k < opt.max_backtracks; ++k) {
            cand = theta + step * dir;
            fnew = value_only(cand);
            if (fnew && *fnew <= fx + opt.armijo * step * slope)
                break;
            fnew.reset();
            step *= 0.5;
        }
        if (!fnew)
            break;
        Vector gnew;
        try {
            gnew = -gradient(f, cand, mode, fd_step);
        } catch (const Error&) {
            break;
        }
        const Vector s = cand - theta;
        const Vector y = gnew - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opt.history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        const double decrease = fx - *fnew;
        theta = cand;
        g = gnew;
        fx = *fnew;
        res.iterations = it;
        on_iter(it, theta, -fx);
        if (decrease <= 1e-15 * std::max(1.0, std::abs(fx))) {
            res.converged = g.cwiseAbs().maxCoeff() < opt.grad_tol;
            break;
        }
    }
    res.theta = theta;
    res.value = -fx;
    return res;
}

namespace detail {

inline TraceRow trace_row(int step, double objective, const ModelState& s, double wall_ms)
{
    TraceRow r;
    r.step = step;
    r.objective = objective;
    r.sigma2 = s.sigma2();
    r.kernel_variance = s.kernel.signal_variance();
    r.lengthscales = s.kernel.lengthscales();
    if (s.log_m)
        r.m = s.m();
    r.wall_ms = wall_ms;
    return r;
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline void prepare_state(ModelState& s, const BoundSpec& spec)
{
    if (has_trainable_m(spec.method)) {
        if (!s.log_m)
            s.log_m = 0.0;
    } else {
        s.log_m.reset();
    }
}

inline std::pair<double, Vector> value_and_gradient(const ObjectiveFn& f, const Vector& theta, GradientMode mode,
                                                    double fd_step)
{
    if (mode == GradientMode::Analytic) {
        Vector g;
        const double v = f(theta, &g);
        return {v, g};
    }
    return {f(theta, nullptr), gradient(f, theta, mode, fd_step)};
}

inline void check_finite(double v, int step)
{
    if (!std::isfinite(v))
        throw EvaluationFailed("training diverged: non-finite objective at step " + std::to_string(step));
}

} // namespace detail

struct FitResult {
    ModelState state;
    Partition partition;
    TrainTrace trace;
    double objective = 0.0;
    bool converged = false;
};

/// Full-batch ascent of a collapsed objective. Block methods draw their
/// partition from cfg.seed; it stays fixed for the whole run.
inline FitResult fit_collapsed(const Dataset& data, const ModelState& init, const TrainConfig& cfg)
{
    cfg.validate();
    const int n = static_cast<int>(data.size());
    FitResult out;
    out.partition = bound_partition(cfg.objective, n, cfg.seed);
    ModelState state = init;
    detail::prepare_state(state, cfg.objective);
    const ObjectiveFn f = collapsed_objective(data, state, cfg.objective, out.partition);
    const ParamLayout layout = layout_for(state, cfg.objective, false);
    Vector theta = layout.pack(state);
    const auto t0 = std::chrono::steady_clock::now();

    if (cfg.optimizer == OptimizerKind::LBFGS) {
        LbfgsOptions opt;
        opt.max_iterations = cfg.epochs;
        opt.grad_tol = cfg.grad_tol;
        const LbfgsResult r = lbfgs_maximize(f, theta, opt, cfg.gradient_mode, cfg.fd_step,
                                             [&](int it, const Vector& th, double v) {
                                                 detail::check_finite(v, it);
                                                 ModelState s = state;
                                                 layout.unpack(th, s);
                                                 out.trace.push_back(detail::trace_row(it, v, s, detail::elapsed_ms(t0)));
                                             });
        theta = r.theta;
        out.converged = r.converged;
        out.objective = r.value;
    } else {
        Adam adam(cfg.learning_rate);
        for (int it = 1; it <= cfg.epochs; ++it) {
            const auto [v, g] = detail::value_and_gradient(f, theta, cfg.gradient_mode, cfg.fd_step);
            detail::check_finite(v, it);
            ModelState s = state;
            layout.unpack(theta, s);
            out.trace.push_back(detail::trace_row(it, v, s, detail::elapsed_ms(t0)));
            adam.step(theta, g);
        }
        out.objective = f(theta, nullptr);
        detail::check_finite(out.objective, cfg.epochs);
    }
    layout.unpack(theta, state);
    out.state = state;
    return out;
}

struct StochasticResult {
    ModelState state;
    GaussianQU q;
    TrainTrace trace;
};

namespace detail {

inline StochasticResult run_uncollapsed(const Dataset& data, const ModelState& init, const Partition& part,
                                        const TrainConfig& cfg, std::optional<GaussianQU> q_init, bool stochastic)
{
    cfg.validate();
    if (!supports_uncollapsed(cfg.objective.method))
        throw InvalidArgument("method: " + to_string(cfg.objective.method) + " has no uncollapsed form");
    if (stochastic && !supports_stochastic(cfg.objective.method))
        throw InvalidArgument("method: " + to_string(cfg.objective.method) + " cannot be trained stochastically");
    ModelState state = init;
    prepare_state(state, cfg.objective);
    GaussianQU q = q_init ? *q_init : posterior_for(data, state, cfg.objective, part);
    const ParamLayout layout = layout_for(state, cfg.objective, true);
    Vector theta = layout.pack(state, &q);

    const std::size_t nb = part.num_blocks();
    std::vector<ObjectiveFn> per_block;
    ObjectiveFn full;
    if (stochastic)
        for (std::size_t b = 0; b < nb; ++b)
            per_block.push_back(uncollapsed_objective(data, state, cfg.objective, part, {b}, static_cast<double>(nb)));
    else
        full = uncollapsed_objective(data, state, cfg.objective, part, all_blocks(part), 1.0);

    Rng rng(cfg.seed);
    Adam adam(cfg.learning_rate);
    StochasticResult out;
    const auto t0 = std::chrono::steady_clock::now();
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = all_blocks(part);
        if (stochastic)
            shuffle(order, rng);
        const std::size_t steps = stochastic ? nb : 1;
        for (std::size_t k = 0; k < steps; ++k) {
            const ObjectiveFn& f = stochastic ? per_block[order[k]] : full;
            const auto [v, g] = value_and_gradient(f, theta, cfg.gradient_mode, cfg.fd_step);
            check_finite(v, ++step);
            ModelState s = state;
            layout.unpack(theta, s);
            out.trace.push_back(trace_row(step, v, s, elapsed_ms(t0)));
            adam.step(theta, g);
        }
    }
    layout.unpack(theta, state, &q);
    out.state = state;
    out.q = q;
    return out;
}

} // namespace detail

/// Adam on the uncollapsed objective, one step per block in a seeded shuffled
/// order each epoch. Each trace row holds the one-block estimate and the
/// hyperparameters at which the step's gradient was taken.
inline StochasticResult fit_stochastic(const Dataset& data, const ModelState& init, const Partition& part,
                                       const TrainConfig& cfg, std::optional<GaussianQU> q_init = std::nullopt)
{
    return detail::run_uncollapsed(data, init, part, cfg, std::move(q_init), true);
}

/// Adam on the full uncollapsed objective, one step per epoch.
inline StochasticResult fit_uncollapsed(const Dataset& data, const ModelState& init, const Partition& part,
                                        const TrainConfig& cfg, std::optional<GaussianQU> q_init = std::nullopt)
{
    return detail::run_uncollapsed(data, init, part, cfg, std::move(q_init), false);
}

} // namespace sgp

#endif
