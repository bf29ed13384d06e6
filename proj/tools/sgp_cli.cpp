// Experiment runner: fit, compare, verify, predict.

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sgp/sgp.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

// Bad configuration or flag values; exits with status 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct MethodEntry {
    std::string name;
    std::optional<double> alpha;
    std::optional<int> blocks;
};

struct Experiment {
    std::string data_path;
    std::string target = "last";
    double test_fraction = 0.2;
    bool standardize = true;
    bool original_scale_metrics = false;

    MethodEntry method{"SGPR", {}, {}};
    std::vector<MethodEntry> methods;
    int num_inducing = 10;
    std::string inducing_init = "kmeans";

    std::string optimizer = "adam";
    double learning_rate = 0.01;
    int epochs = 300;
    std::string gradient = "analytic";
    double fd_step = 1e-5;
    bool stochastic = false;
    double noise_init = 0.1;
    std::optional<double> lengthscale_init;

    std::uint64_t seed = 1;
    std::string out = "out";

    json to_json() const
    {
        auto entry = [](const MethodEntry& m) {
            json j{{"method", m.name}};
            j["alpha"] = m.alpha ? json(*m.alpha) : json(nullptr);
            j["blocks"] = m.blocks ? json(*m.blocks) : json(nullptr);
            return j;
        };
        json ms = json::array();
        for (const auto& m : methods)
            ms.push_back(entry(m));
        return {
            {"dataset",
             {{"path", data_path},
              {"target", target},
              {"test_fraction", test_fraction},
              {"standardize", standardize},
              {"original_scale_metrics", original_scale_metrics}}},
            {"method", entry(method)},
            {"methods", ms},
            {"num_inducing", num_inducing},
            {"inducing_init", inducing_init},
            {"train",
             {{"optimizer", optimizer},
              {"learning_rate", learning_rate},
              {"epochs", epochs},
              {"gradient", gradient},
              {"fd_step", fd_step},
              {"stochastic", stochastic},
              {"noise_init", noise_init},
              {"lengthscale_init", lengthscale_init ? json(*lengthscale_init) : json("median")}}},
            {"seed", seed},
        };
    }
};

std::string fmt17(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fnv1a(const std::string& bytes)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

std::string config_hash(const Experiment& e) { return fnv1a(e.to_json().dump()); }

std::string data_hash(const sgp::Dataset& d)
{
    std::string bytes(reinterpret_cast<const char*>(d.X.data()), sizeof(double) * static_cast<std::size_t>(d.X.size()));
    bytes.append(reinterpret_cast<const char*>(d.y.data()), sizeof(double) * static_cast<std::size_t>(d.y.size()));
    return fnv1a(bytes);
}

// ---------------------------------------------------------------------------
// Config parsing

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where)
{
    if (!j.is_object())
        throw UsageError((where.empty() ? "config" : where) + ": expected an object");
    for (const auto& item : j.items())
        if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
            throw UsageError((where.empty() ? "" : where + ".") + item.key() + ": unknown key");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where)
{
    if (!j.contains(key) || j[key].is_null())
        return;
    try {
        out = j[key].get<T>();
    } catch (const json::exception&) {
        throw UsageError((where.empty() ? "" : where + ".") + key + ": wrong type");
    }
}

template <typename T>
void read_optional(const json& j, const char* key, std::optional<T>& out, const std::string& where)
{
    if (!j.contains(key) || j[key].is_null())
        return;
    T v{};
    read(j, key, v, where);
    out = v;
}

MethodEntry parse_entry(const json& j, const std::string& where)
{
    MethodEntry m;
    if (j.is_string()) {
        m.name = j.get<std::string>();
        return m;
    }
    check_keys(j, {"method", "alpha", "blocks"}, where);
    read(j, "method", m.name, where);
    read_optional(j, "alpha", m.alpha, where);
    read_optional(j, "blocks", m.blocks, where);
    return m;
}

void load_config(const std::string& path, Experiment& e)
{
    std::ifstream in(path);
    if (!in)
        throw UsageError("config: cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& ex) {
        throw UsageError(std::string("config: ") + ex.what());
    }
    check_keys(j, {"dataset", "method", "alpha", "blocks", "methods", "num_inducing", "inducing_init", "train",
                   "seed", "out"},
               "");
    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        check_keys(d, {"path", "target", "test_fraction", "standardize", "original_scale_metrics"}, "dataset");
        read(d, "path", e.data_path, "dataset");
        if (d.contains("target") && d["target"].is_number_integer())
            e.target = std::to_string(d["target"].get<int>());
        else
            read(d, "target", e.target, "dataset");
        read(d, "test_fraction", e.test_fraction, "dataset");
        read(d, "standardize", e.standardize, "dataset");
        read(d, "original_scale_metrics", e.original_scale_metrics, "dataset");
    }
    if (j.contains("method")) {
        if (j["method"].is_object())
            e.method = parse_entry(j["method"], "method");
        else
            read(j, "method", e.method.name, "");
    }
    read_optional(j, "alpha", e.method.alpha, "");
    read_optional(j, "blocks", e.method.blocks, "");
    if (j.contains("methods")) {
        if (!j["methods"].is_array())
            throw UsageError("methods: expected an array");
        for (std::size_t i = 0; i < j["methods"].size(); ++i)
            e.methods.push_back(parse_entry(j["methods"][i], "methods[" + std::to_string(i) + "]"));
    }
    read(j, "num_inducing", e.num_inducing, "");
    read(j, "inducing_init", e.inducing_init, "");
    read(j, "seed", e.seed, "");
    read(j, "out", e.out, "");
    if (j.contains("train")) {
        const json& t = j["train"];
        check_keys(t, {"optimizer", "learning_rate", "epochs", "gradient", "fd_step", "stochastic", "noise_init",
                       "lengthscale_init"},
                   "train");
        read(t, "optimizer", e.optimizer, "train");
        read(t, "learning_rate", e.learning_rate, "train");
        read(t, "epochs", e.epochs, "train");
        read(t, "gradient", e.gradient, "train");
        read(t, "fd_step", e.fd_step, "train");
        read(t, "stochastic", e.stochastic, "train");
        read(t, "noise_init", e.noise_init, "train");
        if (t.contains("lengthscale_init")) {
            if (t["lengthscale_init"].is_number())
                e.lengthscale_init = t["lengthscale_init"].get<double>();
            else if (t["lengthscale_init"] != "median")
                throw UsageError("train.lengthscale_init: expected \"median\" or a number");
        }
    }
}

sgp::BoundSpec to_spec(const MethodEntry& m, const std::string& field, int n)
{
    sgp::BoundSpec spec;
    try {
        spec.method = sgp::parse_method(m.name);
        spec.alpha = m.alpha;
        spec.num_blocks = m.blocks;
        spec.validate(n);
    } catch (const sgp::InvalidArgument& e) {
        throw UsageError(field.empty() ? std::string(e.what()) : field + "." + e.what());
    }
    if (sgp::is_oracle(spec.method))
        throw UsageError((field.empty() ? "" : field + ".") + "method: " + sgp::to_string(spec.method) +
                         " is a dense oracle and cannot be fitted");
    return spec;
}

// List entries given by name pick up the global alpha/blocks when the method takes them.
MethodEntry inherit(MethodEntry m, const MethodEntry& global)
{
    sgp::Method meth;
    try {
        meth = sgp::parse_method(m.name);
    } catch (const sgp::InvalidArgument&) {
        return m;
    }
    if (!m.alpha && sgp::uses_alpha(meth))
        m.alpha = global.alpha;
    if (!m.blocks && sgp::accepts_blocks(meth))
        m.blocks = global.blocks;
    return m;
}

void validate_experiment(const Experiment& e)
{
    if (e.data_path.empty())
        throw UsageError("dataset.path: required (use --data or a config file)");
    if (e.num_inducing < 1)
        throw UsageError("num_inducing: must be positive");
    if (e.inducing_init != "kmeans" && e.inducing_init != "subset")
        throw UsageError("inducing_init: expected \"kmeans\" or \"subset\"");
    if (e.optimizer != "adam" && e.optimizer != "lbfgs")
        throw UsageError("train.optimizer: expected \"adam\" or \"lbfgs\"");
    if (e.gradient != "analytic" && e.gradient != "fd")
        throw UsageError("train.gradient: expected \"analytic\" or \"fd\"");
    if (!(e.learning_rate > 0.0))
        throw UsageError("train.learning_rate: must be positive");
    if (e.epochs < 1)
        throw UsageError("train.epochs: must be positive");
    if (!(e.fd_step > 0.0))
        throw UsageError("train.fd_step: must be positive");
    if (!(e.test_fraction >= 0.0 && e.test_fraction < 1.0))
        throw UsageError("dataset.test_fraction: must lie in [0, 1)");
    if (!(e.noise_init > 0.0))
        throw UsageError("train.noise_init: must be positive");
    if (e.lengthscale_init && !(*e.lengthscale_init > 0.0))
        throw UsageError("train.lengthscale_init: must be positive");
}

// ---------------------------------------------------------------------------
// Running

struct Prepared {
    sgp::Dataset train;
    sgp::Dataset test; // equals train when no split is requested
    bool has_test = false;
};

Prepared prepare_data(const Experiment& e)
{
    const sgp::Dataset all = sgp::load_csv(e.data_path, e.target);
    for (const auto& w : all.warnings)
        std::cerr << "warning: " << w << "\n";
    Prepared p;
    if (e.test_fraction > 0.0) {
        auto [tr, te] = sgp::split(all, e.test_fraction, e.seed);
        p.train = std::move(tr);
        p.test = std::move(te);
        p.has_test = true;
    } else {
        p.train = all;
        p.test = all;
    }
    if (e.standardize) {
        p.train = sgp::standardize(p.train);
        p.test = sgp::apply_standardization(p.test, p.train.stats);
    }
    if (e.num_inducing > p.train.size())
        throw UsageError("num_inducing: " + std::to_string(e.num_inducing) + " exceeds the " +
                         std::to_string(p.train.size()) + " training points");
    return p;
}

sgp::ModelState initial_state(const Experiment& e, const sgp::Dataset& train)
{
    sgp::ModelState s;
    s.kernel = sgp::init_lengthscales_median(train, e.seed);
    if (e.lengthscale_init)
        s.kernel.log_lengthscales.setConstant(std::log(*e.lengthscale_init));
    s.noise.log_noise_variance = std::log(e.noise_init);
    s.inducing = e.inducing_init == "kmeans" ? sgp::init_inducing_kmeans(train, e.num_inducing, e.seed)
                                             : sgp::init_inducing_subset(train, e.num_inducing, e.seed);
    return s;
}

sgp::TrainConfig train_config(const Experiment& e, const sgp::BoundSpec& spec)
{
    sgp::TrainConfig c;
    c.objective = spec;
    c.optimizer = e.optimizer == "lbfgs" ? sgp::OptimizerKind::LBFGS : sgp::OptimizerKind::Adam;
    c.learning_rate = e.learning_rate;
    c.epochs = e.epochs;
    c.seed = e.seed;
    c.gradient_mode = e.gradient == "fd" ? sgp::GradientMode::FiniteDifference : sgp::GradientMode::Analytic;
    c.fd_step = e.fd_step;
    return c;
}

struct MethodRun {
    sgp::BoundSpec spec;
    sgp::ModelState state;
    sgp::GaussianQU q;
    sgp::TrainTrace trace;
    double init_objective = 0.0;
    double objective = 0.0;
    double jitter_used = 0.0;
    bool converged = false;
    sgp::Metrics metrics;
};

sgp::PredictiveGaussian predict_with(const MethodRun& r, const sgp::Dataset& train, const sgp::Matrix& xt)
{
    if (r.spec.method == sgp::Method::Exact)
        return sgp::predict_exact(xt, train, r.state);
    return sgp::predict(xt, r.state, r.q);
}

MethodRun run_method(const Experiment& e, const sgp::BoundSpec& spec, const Prepared& data,
                     const sgp::ModelState& init)
{
    const int n = static_cast<int>(data.train.size());
    MethodRun r;
    r.spec = spec;
    const sgp::Partition part = sgp::bound_partition(spec, n, e.seed);
    sgp::ModelState s0 = init;
    if (sgp::has_trainable_m(spec.method))
        s0.log_m = 0.0;
    else
        s0.log_m.reset();
    r.init_objective = sgp::evaluate(data.train, s0, spec, part).total;

    const sgp::TrainConfig cfg = train_config(e, spec);
    if (e.stochastic) {
        if (!sgp::supports_stochastic(spec.method))
            throw UsageError("train.stochastic: method " + sgp::to_string(spec.method) +
                             " has no block-separable uncollapsed bound");
        sgp::StochasticResult res = sgp::fit_stochastic(data.train, s0, part, cfg);
        r.state = res.state;
        r.q = res.q;
        r.trace = std::move(res.trace);
    } else {
        sgp::FitResult res = sgp::fit_collapsed(data.train, s0, cfg);
        r.state = res.state;
        r.trace = std::move(res.trace);
        r.converged = res.converged;
        if (spec.method != sgp::Method::Exact)
            r.q = sgp::posterior_for(data.train, r.state, spec, part);
    }
    const sgp::BoundBreakdown final_value = sgp::evaluate(data.train, r.state, spec, part);
    r.objective = final_value.total;
    r.jitter_used = final_value.jitter_used;

    sgp::PredictiveGaussian pred = predict_with(r, data.train, data.test.X);
    sgp::Vector y = data.test.y;
    if (e.original_scale_metrics && data.test.stats.applied) {
        pred = sgp::destandardize(pred, data.test.stats);
        y = sgp::destandardize(data.test).y;
    }
    r.metrics = sgp::metrics(pred, y);
    return r;
}

// ---------------------------------------------------------------------------
// Output

void ensure_dir(const std::string& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw sgp::Error("out: cannot create '" + dir + "': " + ec.message());
}

void write_file(const fs::path& path, const std::string& content)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw sgp::Error("cannot write '" + path.string() + "'");
    out << content;
}

json vec_json(const sgp::Vector& v)
{
    json a = json::array();
    for (sgp::Index i = 0; i < v.size(); ++i)
        a.push_back(v(i));
    return a;
}

json mat_json(const sgp::Matrix& m)
{
    json a = json::array();
    for (sgp::Index i = 0; i < m.rows(); ++i)
        a.push_back(vec_json(m.row(i).transpose()));
    return a;
}

sgp::Vector json_vec(const json& a)
{
    sgp::Vector v(static_cast<sgp::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        v(static_cast<sgp::Index>(i)) = a[i].get<double>();
    return v;
}

sgp::Matrix json_mat(const json& a)
{
    const sgp::Index rows = static_cast<sgp::Index>(a.size());
    const sgp::Index cols = rows ? static_cast<sgp::Index>(a[0].size()) : 0;
    sgp::Matrix m(rows, cols);
    for (sgp::Index i = 0; i < rows; ++i) {
        if (static_cast<sgp::Index>(a[static_cast<std::size_t>(i)].size()) != cols)
            throw sgp::ParseError("model: ragged matrix", i, 0);
        for (sgp::Index j = 0; j < cols; ++j)
            m(i, j) = a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<double>();
    }
    return m;
}

std::string trace_csv(const sgp::TrainTrace& trace, sgp::Index dim)
{
    std::ostringstream os;
    os << "step,objective,sigma2,kernel_var";
    for (sgp::Index d = 0; d < dim; ++d)
        os << ",lengthscale_" << d + 1;
    os << ",m\n";
    for (const auto& row : trace) {
        os << row.step << ',' << fmt17(row.objective) << ',' << fmt17(row.sigma2) << ','
           << fmt17(row.kernel_variance);
        for (sgp::Index d = 0; d < dim; ++d)
            os << ',' << fmt17(row.lengthscales(d));
        os << ',' << (row.m ? fmt17(*row.m) : std::string()) << '\n';
    }
    return os.str();
}

json stats_json(const sgp::StandardizationStats& s)
{
    return {{"applied", s.applied},
            {"x_mean", s.applied ? vec_json(s.x_mean) : json::array()},
            {"x_std", s.applied ? vec_json(s.x_std) : json::array()},
            {"y_mean", s.y_mean},
            {"y_std", s.y_std}};
}

json optional_m(const MethodRun& r)
{
    return sgp::has_trainable_m(r.spec.method) ? json(r.state.m()) : json(nullptr);
}

json report_json(const Experiment& e, const MethodRun& r, const Prepared& data)
{
    return {
        {"method", r.spec.label()},
        {"objective", r.objective},
        {"init_objective", r.init_objective},
        {"rmse", r.metrics.rmse},
        {"mean_ll", r.metrics.mean_ll},
        {"sigma2", r.state.sigma2()},
        {"kernel_variance", r.state.kernel.signal_variance()},
        {"lengthscales", vec_json(r.state.kernel.lengthscales())},
        {"m", optional_m(r)},
        {"jitter_used", r.jitter_used},
        {"converged", r.converged},
        {"metrics_on", data.has_test ? "test" : "train"},
        {"metrics_scale", e.original_scale_metrics && data.test.stats.applied ? "original" : "standardized"},
        {"n_train", data.train.size()},
        {"n_test", data.has_test ? data.test.size() : 0},
        {"split_hash", fnv1a(data_hash(data.train) + data_hash(data.test))},
        {"config_hash", config_hash(e)},
        {"seed", e.seed},
        {"version", kVersion},
    };
}

json model_json(const Experiment& e, const MethodRun& r, const Prepared& data)
{
    json j{
        {"version", kVersion},
        {"config_hash", config_hash(e)},
        {"seed", e.seed},
        {"method", sgp::to_string(r.spec.method)},
        {"alpha", r.spec.alpha ? json(*r.spec.alpha) : json(nullptr)},
        {"blocks", r.spec.num_blocks ? json(*r.spec.num_blocks) : json(nullptr)},
        {"lengthscales", vec_json(r.state.kernel.lengthscales())},
        {"signal_variance", r.state.kernel.signal_variance()},
        {"noise_variance", r.state.sigma2()},
        {"m", optional_m(r)},
        {"inducing", mat_json(r.state.inducing)},
        {"standardization", stats_json(data.train.stats)},
    };
    if (r.spec.method == sgp::Method::Exact) {
        j["train_inputs"] = mat_json(data.train.X);
        j["train_targets"] = vec_json(data.train.y);
    } else {
        j["q_mean"] = vec_json(r.q.mean);
        j["q_cov_lower"] = mat_json(r.q.cov_chol.lower);
    }
    return j;
}

// 1-D predictive curve on a regular grid spanning the training inputs, on the original scale.
std::string curve_csv(const MethodRun& r, const sgp::Dataset& train)
{
    const int points = 200;
    const double lo = train.X.col(0).minCoeff(), hi = train.X.col(0).maxCoeff();
    const double pad = 0.1 * (hi - lo);
    sgp::Matrix grid(points, 1);
    for (int i = 0; i < points; ++i)
        grid(i, 0) = lo - pad + (hi - lo + 2.0 * pad) * i / (points - 1);
    const sgp::PredictiveGaussian pred = sgp::destandardize(predict_with(r, train, grid), train.stats);
    std::ostringstream os;
    os << "x_grid,mean,lower,upper\n";
    for (int i = 0; i < points; ++i) {
        const double x = train.stats.applied ? grid(i, 0) * train.stats.x_std(0) + train.stats.x_mean(0) : grid(i, 0);
        const double sd = std::sqrt(pred.variance(i));
        os << fmt17(x) << ',' << fmt17(pred.mean(i)) << ',' << fmt17(pred.mean(i) - 2.0 * sd) << ','
           << fmt17(pred.mean(i) + 2.0 * sd) << '\n';
    }
    return os.str();
}

std::string slug(const std::string& label)
{
    std::string s;
    for (char c : label)
        s.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '.' ? static_cast<char>(std::tolower(c)) : '_');
    while (!s.empty() && s.back() == '_')
        s.pop_back();
    return s;
}

// ---------------------------------------------------------------------------
// Commands

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> method;
    std::optional<double> alpha;
    std::optional<int> blocks;
    std::optional<int> num_inducing;
    std::optional<std::string> data;
    std::optional<std::string> target;
};

Experiment resolve(const Flags& f)
{
    Experiment e;
    if (!f.config.empty())
        load_config(f.config, e);
    if (f.seed)
        e.seed = *f.seed;
    if (f.out)
        e.out = *f.out;
    if (f.alpha)
        e.method.alpha = f.alpha;
    if (f.blocks)
        e.method.blocks = f.blocks;
    if (f.num_inducing)
        e.num_inducing = *f.num_inducing;
    if (f.data)
        e.data_path = *f.data;
    if (f.target)
        e.target = *f.target;
    validate_experiment(e);
    return e;
}

int cmd_fit(const Flags& f)
{
    Experiment e = resolve(f);
    if (f.method)
        e.method.name = *f.method;
    to_spec(e.method, "", std::numeric_limits<int>::max());
    const Prepared data = prepare_data(e);
    const sgp::BoundSpec spec = to_spec(e.method, "", static_cast<int>(data.train.size()));
    const sgp::ModelState init = initial_state(e, data.train);
    const MethodRun r = run_method(e, spec, data, init);

    ensure_dir(e.out);
    const fs::path dir(e.out);
    write_file(dir / "model.json", model_json(e, r, data).dump(2) + "\n");
    write_file(dir / "trace.csv", trace_csv(r.trace, data.train.dim()));
    const json report = report_json(e, r, data);
    write_file(dir / "report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_compare(const Flags& f)
{
    Experiment e = resolve(f);
    if (f.method) {
        e.methods.clear();
        std::stringstream ss(*f.method);
        std::string name;
        while (std::getline(ss, name, ','))
            if (!name.empty())
                e.methods.push_back({name, {}, {}});
    }
    if (e.methods.size() < 2)
        throw UsageError("methods: compare needs at least two methods");
    for (auto& m : e.methods)
        m = inherit(m, e.method);
    for (std::size_t i = 0; i < e.methods.size(); ++i)
        to_spec(e.methods[i], "methods[" + std::to_string(i) + "]", std::numeric_limits<int>::max());

    const Prepared data = prepare_data(e);
    const int n = static_cast<int>(data.train.size());
    const sgp::ModelState init = initial_state(e, data.train);
    const sgp::Index dim = data.train.dim();
    ensure_dir(e.out);
    const fs::path dir(e.out);

    std::ostringstream csv;
    csv << "method,init_objective,objective,rmse,mean_ll,sigma2,kernel_variance";
    for (sgp::Index d = 0; d < dim; ++d)
        csv << ",lengthscale_" << d + 1;
    csv << ",m\n";
    json rows = json::array();
    for (std::size_t i = 0; i < e.methods.size(); ++i) {
        const sgp::BoundSpec spec = to_spec(e.methods[i], "methods[" + std::to_string(i) + "]", n);
        const MethodRun r = run_method(e, spec, data, init);
        const std::string label = spec.label();
        csv << label << ',' << fmt17(r.init_objective) << ',' << fmt17(r.objective) << ',' << fmt17(r.metrics.rmse)
            << ',' << fmt17(r.metrics.mean_ll) << ',' << fmt17(r.state.sigma2()) << ','
            << fmt17(r.state.kernel.signal_variance());
        for (sgp::Index d = 0; d < dim; ++d)
            csv << ',' << fmt17(r.state.kernel.lengthscale(d));
        csv << ',' << (sgp::has_trainable_m(spec.method) ? fmt17(r.state.m()) : std::string()) << '\n';
        rows.push_back(report_json(e, r, data));
        write_file(dir / ("trace_" + slug(label) + ".csv"), trace_csv(r.trace, dim));
        if (dim == 1)
            write_file(dir / ("curve_" + slug(label) + ".csv"), curve_csv(r, data.train));
        std::cerr << label << ": objective " << fmt17(r.objective) << ", rmse " << fmt17(r.metrics.rmse) << "\n";
    }
    write_file(dir / "compare.csv", csv.str());
    const json table{{"config_hash", config_hash(e)}, {"seed", e.seed}, {"version", kVersion}, {"methods", rows}};
    write_file(dir / "compare.json", table.dump(2) + "\n");
    std::cout << csv.str();
    return 0;
}

int cmd_verify(const std::string& scale, std::uint64_t seed, const std::string& tamper,
               const std::optional<std::string>& out)
{
    sgp::VerifyOptions opt;
    try {
        opt = sgp::verify_options_for(scale, seed);
    } catch (const sgp::InvalidArgument& ex) {
        throw UsageError(ex.what());
    }
    if (!tamper.empty()) {
        const auto keys = sgp::verification_keys();
        if (std::find(keys.begin(), keys.end(), tamper) == keys.end())
            throw UsageError("tamper: unknown criterion key '" + tamper + "'");
        opt.tamper = tamper;
    }
    std::vector<std::string> failed;
    json rows = json::array();
    double total = 0.0;
    sgp::run_verification(opt, [&](const sgp::CriterionResult& r) {
        std::cout << (r.passed ? "PASS" : "FAIL") << "  " << r.id << "  " << r.key << "  (" << r.instances
                  << " instances)  " << r.detail << std::endl;
        std::cerr << "  " << r.key << " took " << r.seconds << " s\n";
        total += r.seconds;
        if (!r.passed)
            failed.push_back(r.key);
        rows.push_back({{"id", r.id},
                        {"key", r.key},
                        {"title", r.title},
                        {"passed", r.passed},
                        {"instances", r.instances},
                        {"detail", r.detail}});
    });
    std::cerr << "total " << total << " s\n";
    if (out) {
        ensure_dir(*out);
        const json report{{"scale", scale}, {"seed", seed}, {"version", kVersion}, {"criteria", rows},
                          {"passed", failed.empty()}};
        write_file(fs::path(*out) / "verify.json", report.dump(2) + "\n");
    }
    if (failed.empty())
        return 0;
    std::string names;
    for (const auto& k : failed)
        names += (names.empty() ? "" : ", ") + k;
    std::cerr << "failed: " << names << "\n";
    return 1;
}

int cmd_predict(const std::string& model_path, const std::string& data_path, const std::string& target,
                const std::string& out, bool original_scale)
{
    std::ifstream in(model_path);
    if (!in)
        throw std::runtime_error("model: cannot open '" + model_path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& ex) {
        throw sgp::ParseError(std::string("model: ") + ex.what(), 0, 0);
    }
    MethodRun r;
    try {
        r.spec.method = sgp::parse_method(j.at("method").get<std::string>());
        r.state.kernel.log_lengthscales = json_vec(j.at("lengthscales")).array().log().matrix();
        r.state.kernel.log_signal_variance = std::log(j.at("signal_variance").get<double>());
        r.state.noise.log_noise_variance = std::log(j.at("noise_variance").get<double>());
        r.state.inducing = json_mat(j.at("inducing"));
        if (!j.at("m").is_null())
            r.state.log_m = std::log(j.at("m").get<double>());
    } catch (const json::exception& ex) {
        throw sgp::ParseError(std::string("model: ") + ex.what(), 0, 0);
    }
    sgp::StandardizationStats stats;
    const json& st = j.at("standardization");
    stats.applied = st.at("applied").get<bool>();
    if (stats.applied) {
        stats.x_mean = json_vec(st.at("x_mean"));
        stats.x_std = json_vec(st.at("x_std"));
        stats.y_mean = st.at("y_mean").get<double>();
        stats.y_std = st.at("y_std").get<double>();
    }
    sgp::Dataset train;
    if (r.spec.method == sgp::Method::Exact) {
        train.X = json_mat(j.at("train_inputs"));
        train.y = json_vec(j.at("train_targets"));
    } else {
        r.q.mean = json_vec(j.at("q_mean"));
        r.q.cov_chol.lower = json_mat(j.at("q_cov_lower"));
    }

    const sgp::Dataset raw = sgp::load_csv(data_path, target);
    const sgp::Dataset test = stats.applied ? sgp::apply_standardization(raw, stats) : raw;
    sgp::PredictiveGaussian pred = predict_with(r, train, test.X);
    const sgp::PredictiveGaussian orig = sgp::destandardize(pred, stats);
    const sgp::Metrics m = original_scale ? sgp::metrics(orig, raw.y) : sgp::metrics(pred, test.y);

    ensure_dir(out);
    std::ostringstream csv;
    csv << "index,mean,variance,lower,upper\n";
    for (sgp::Index i = 0; i < orig.mean.size(); ++i) {
        const double sd = std::sqrt(orig.variance(i));
        csv << i << ',' << fmt17(orig.mean(i)) << ',' << fmt17(orig.variance(i)) << ','
            << fmt17(orig.mean(i) - 2.0 * sd) << ',' << fmt17(orig.mean(i) + 2.0 * sd) << '\n';
    }
    write_file(fs::path(out) / "predictions.csv", csv.str());
    const json report{{"rmse", m.rmse},
                      {"mean_ll", m.mean_ll},
                      {"metrics_scale", original_scale || !stats.applied ? "original" : "standardized"},
                      {"n", raw.size()},
                      {"model", model_path},
                      {"version", kVersion}};
    write_file(fs::path(out) / "predict_report.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return 0;
}

void add_experiment_flags(CLI::App* cmd, Flags& f)
{
    cmd->add_option("--config", f.config, "JSON experiment config");
    cmd->add_option("--seed", f.seed, "Seed for split, init, partition and training");
    cmd->add_option("--out", f.out, "Output directory");
    cmd->add_option("--method", f.method, "Method name (compare: comma-separated list)");
    cmd->add_option("--alpha", f.alpha, "Power-EP alpha in (0, 1]");
    cmd->add_option("--blocks", f.blocks, "Number of blocks B");
    cmd->add_option("--num-inducing", f.num_inducing, "Number of inducing points M");
    cmd->add_option("--data", f.data, "CSV dataset path");
    cmd->add_option("--target", f.target, "Target column: name, 0-based index or 'last'");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Sparse GP regression with structured variational and Power-EP bounds"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    Flags fit_flags, cmp_flags;
    CLI::App* fit = app.add_subcommand("fit", "Train one method and write model, trace and report");
    add_experiment_flags(fit, fit_flags);
    CLI::App* cmp = app.add_subcommand("compare", "Train several methods from a shared init and tabulate them");
    add_experiment_flags(cmp, cmp_flags);

    std::string scale = "small", tamper;
    std::uint64_t verify_seed = 1;
    std::optional<std::string> verify_out;
    CLI::App* ver = app.add_subcommand("verify", "Run the seeded property suites and print a pass/fail matrix");
    ver->add_option("--scale", scale, "small or full")->capture_default_str();
    ver->add_option("--seed", verify_seed, "Seed for the random instances")->capture_default_str();
    ver->add_option("--out", verify_out, "Directory for verify.json");
    ver->add_option("--tamper", tamper)->group("");

    std::string model_path, pred_data, pred_target = "last", pred_out = "out";
    bool original_scale = false;
    CLI::App* pred = app.add_subcommand("predict", "Predict with a saved model");
    pred->add_option("--model", model_path, "model.json written by fit")->required();
    pred->add_option("--data", pred_data, "CSV with the same feature columns and a target")->required();
    pred->add_option("--target", pred_target, "Target column")->capture_default_str();
    pred->add_option("--out", pred_out, "Output directory")->capture_default_str();
    pred->add_flag("--original-scale", original_scale, "Report metrics on the original target scale");

    CLI11_PARSE(app, argc, argv);

    try {
        if (fit->parsed())
            return cmd_fit(fit_flags);
        if (cmp->parsed())
            return cmd_compare(cmp_flags);
        if (ver->parsed())
            return cmd_verify(scale, verify_seed, tamper, verify_out);
        if (pred->parsed())
            return cmd_predict(model_path, pred_data, pred_target, pred_out, original_scale);
    } catch (const UsageError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 1;
}
