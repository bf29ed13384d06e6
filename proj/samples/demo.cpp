// Fits SGPR, T-SGPR and BT-SGPR on a 1-D toy problem and prints the bounds.

#include <cstdio>

#include "sgp/sgp.hpp"

int main()
{
    const sgp::Dataset data = sgp::standardize(sgp::snelson_like(200, 7));
    sgp::ModelState init;
    init.kernel = sgp::init_lengthscales_median(data);
    init.noise.log_noise_variance = std::log(0.1);
    init.inducing = sgp::init_inducing_kmeans(data, 5, 7);

    const sgp::BoundSpec specs[] = {
        {sgp::Method::SGPR, {}, {}},
        {sgp::Method::TSGPR, {}, {}},
        {sgp::Method::BTSGPR, {}, 10},
        {sgp::Method::TPEP, 0.5, 10},
    };
    for (const auto& spec : specs) {
        sgp::TrainConfig cfg;
        cfg.objective = spec;
        cfg.seed = 7;
        const sgp::FitResult fit = sgp::fit_collapsed(data, init, cfg);
        const sgp::GaussianQU q = sgp::posterior_for(data, fit.state, spec, fit.partition);
        const sgp::Metrics m = sgp::metrics(sgp::predict(data, fit.state, q), data.y);
        std::printf("%-22s bound %10.4f  exact %10.4f  sigma2 %.4f  train rmse %.4f\n", spec.label().c_str(),
                    fit.objective, sgp::exact_lml(data, fit.state).total, fit.state.sigma2(), m.rmse);
    }
}
