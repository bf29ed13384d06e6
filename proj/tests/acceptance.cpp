#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sgp/sgp.hpp"

using namespace sgp;

namespace {

struct Line {
    int id;
    bool passed;
    std::string title;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

Line snelson_reproduction()
{
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t seed = 1;
    const Dataset data = standardize(snelson_like(200, seed));
    ModelState init;
    init.kernel = init_lengthscales_median(data);
    init.noise.log_noise_variance = std::log(0.1);
    init.inducing = init_inducing_subset(data, 5, seed);

    const std::vector<BoundSpec> specs = {{Method::SGPR, std::nullopt, std::nullopt},
                                          {Method::TSGPR, std::nullopt, std::nullopt},
                                          {Method::BTSGPR, std::nullopt, 20},
                                          {Method::BTSGPR, std::nullopt, 10}};
    std::vector<double> obj, s2;
    std::string detail;
    for (const BoundSpec& spec : specs) {
        TrainConfig cfg;
        cfg.objective = spec;
        cfg.optimizer = OptimizerKind::LBFGS;
        cfg.epochs = 1000;
        cfg.seed = seed;
        const FitResult r = fit_collapsed(data, init, cfg);
        obj.push_back(r.objective);
        s2.push_back(r.state.sigma2());
        detail += spec.label() + " " + num(r.objective) + "/" + num(r.state.sigma2()) + "; ";
    }
    bool ordered = true, noise = true;
    for (std::size_t i = 1; i < obj.size(); ++i)
        ordered = ordered && obj[i] - obj[i - 1] >= -1e-6;
    for (std::size_t i = 1; i < s2.size(); ++i)
        noise = noise && s2[i] <= 1.05 * s2[i - 1];
    const double t = seconds_since(t0);
    detail += "objective order " + std::string(ordered ? "ok" : "violated") + ", noise trend " +
              (noise ? "ok" : "violated") + ", " + num(t) + " s";
    return {8, ordered && noise && t < 300.0, "Snelson-scale reproduction (bound order, noise trend)", detail};
}

Line inducing_at_inputs()
{
    Rng rng(909);
    InstanceOptions opt;
    opt.inducing_at_inputs = true;
    double worst = 0.0;
    int checks = 0;
    auto check = [&](double v, double ex) {
        worst = std::max(worst, std::abs(v - ex) / std::max(1.0, std::abs(ex)));
        ++checks;
    };
    for (int t = 0; t < 50; ++t) {
        const Instance in = random_instance(rng, opt);
        const Dataset& d = in.data;
        const ModelState& s = in.state;
        const int n = static_cast<int>(d.size());
        const Partition one = Partition::single_block(n);
        const Partition sing = Partition::singletons(n);
        const double ex = exact_lml(d, s).total;
        check(sgpr_collapsed(d, s).total, ex);
        check(tsgpr_collapsed(d, s).total, ex);
        check(btsgpr_collapsed(d, s, in.partition).total, ex);
        check(sharedblock_collapsed(d, s, one).total, ex);
        check(sharedblock_collapsed(d, s, sing).total, ex);
        check(spherical_collapsed(d, s).total, ex);
        for (double a : {1e-3, 0.25, 0.5, 1.0}) {
            check(pep_collapsed(d, s, {a, 1.0, sing}).total, ex);
            check(pep_collapsed(d, s, {a, 1.0, in.partition}).total, ex);
            check(tpep_collapsed(d, s, {a, 1.0, in.partition}).total, ex);
            check(general_pep_oracle(d, s, a, in.partition, scaled_identity_blocks(in.partition, 1.0)).total, ex);
        }
    }
    return {9, worst <= 1e-7, "Exactness with inducing points at the inputs",
            std::to_string(checks) + " checks on 50 instances, max rel err " + num(worst)};
}

Line cli_verify()
{
    namespace fs = std::filesystem;
    const fs::path log = fs::temp_directory_path() / ("sgp_acceptance_verify_" + std::to_string(::getpid()) + ".txt");
    const std::string cmd = std::string(SGP_CLI_PATH) + " verify --scale small > " + log.string() + " 2>&1";
    const auto t0 = std::chrono::steady_clock::now();
    const int status = std::system(cmd.c_str());
    const double t = seconds_since(t0);
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    fs::remove(log);
    const std::string out = ss.str();
    int listed = 0;
    for (const std::string& key : verification_keys())
        if (out.find("  " + key + "  ") != std::string::npos)
            ++listed;
    std::string failed;
    const auto pos = out.find("failed:");
    if (pos != std::string::npos)
        failed = out.substr(pos, out.find('\n', pos) - pos);
    const bool ok = code == 0 && t < 60.0 && listed == 7;
    return {10, ok, "CLI verify --scale small",
            "exit " + std::to_string(code) + ", " + num(t) + " s, " + std::to_string(listed) + "/7 criteria listed" +
                (failed.empty() ? "" : ", " + failed)};
}

} // namespace

int main()
{
    std::vector<Line> lines;
    const auto t0 = std::chrono::steady_clock::now();
    VerifyOptions opt = verify_options_for("small", 1);
    run_verification(opt, [&](const CriterionResult& r) {
        std::string detail = std::to_string(r.instances) + " instances, " + r.detail + ", " + num(r.seconds) + " s";
        bool passed = r.passed;
        if (r.id == 1 && r.seconds >= 30.0) {
            passed = false;
            detail += " (over 30 s)";
        }
        lines.push_back({r.id, passed, r.title, detail});
    });
    lines.push_back(snelson_reproduction());
    lines.push_back(inducing_at_inputs());
    lines.push_back(cli_verify());

    int failures = 0;
    for (const Line& l : lines) {
        std::cout << (l.passed ? "PASS" : "FAIL") << "  C" << l.id << "  " << l.title << "  [" << l.detail << "]\n";
        failures += l.passed ? 0 : 1;
    }
    std::cout << lines.size() - static_cast<std::size_t>(failures) << "/" << lines.size() << " criteria passed in "
              << num(seconds_since(t0)) << " s\n";
    return failures == 0 ? 0 : 1;
}
