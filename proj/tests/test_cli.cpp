#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include <json.hpp>

#include "sgp/sgp.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& s)
{
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);)
        out.push_back(l);
    return out;
}

class Cli : public ::testing::Test {
protected:
    static fs::path root_;

    static void SetUpTestSuite()
    {
        root_ = fs::temp_directory_path() / ("sgp_cli_test_" + std::to_string(::getpid()));
        fs::create_directories(root_);
        const sgp::Dataset d = sgp::snelson_like(120, 5);
        std::ofstream csv(root_ / "snelson.csv");
        csv.precision(17);
        csv << "x,y\n";
        for (sgp::Index i = 0; i < d.size(); ++i)
            csv << d.X(i, 0) << ',' << d.y(i) << '\n';
        write_config("fit.json", {{"dataset", {{"path", (root_ / "snelson.csv").string()}, {"target", "y"}}},
                                  {"method", "SGPR"},
                                  {"num_inducing", 5},
                                  {"train", {{"epochs", 40}}}});
    }

    static void TearDownTestSuite() { fs::remove_all(root_); }

    static void write_config(const std::string& name, const json& j)
    {
        std::ofstream(root_ / name) << j.dump(2);
    }

    static Result run(const std::string& args)
    {
        const fs::path o = root_ / "stdout.txt", e = root_ / "stderr.txt";
        const std::string cmd = std::string(SGP_CLI_PATH) + " " + args + " > " + o.string() + " 2> " + e.string();
        const int status = std::system(cmd.c_str());
        Result r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(o);
        r.err = slurp(e);
        return r;
    }

    static std::string cfg(const std::string& name) { return "--config " + (root_ / name).string(); }
    static std::string dir(const std::string& name) { return (root_ / name).string(); }
};

fs::path Cli::root_;

} // namespace

TEST_F(Cli, FitWritesModelTraceAndReport)
{
    const Result r = run("fit " + cfg("fit.json") + " --out " + dir("fit"));
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* f : {"model.json", "trace.csv", "report.json"})
        EXPECT_TRUE(fs::exists(fs::path(dir("fit")) / f)) << f;
    const auto rows = lines(slurp(fs::path(dir("fit")) / "trace.csv"));
    ASSERT_EQ(rows.size(), 41u);
    EXPECT_EQ(rows[0], "step,objective,sigma2,kernel_var,lengthscale_1,m");
    const json report = json::parse(slurp(fs::path(dir("fit")) / "report.json"));
    for (const char* k : {"objective", "rmse", "mean_ll", "sigma2", "kernel_variance", "lengthscales", "m",
                          "jitter_used", "config_hash", "seed", "version"})
        EXPECT_TRUE(report.contains(k)) << k;
    EXPECT_EQ(report["method"], "SGPR");
}

TEST_F(Cli, RerunGivesIdenticalTrace)
{
    ASSERT_EQ(run("fit " + cfg("fit.json") + " --out " + dir("a") + " --method BTSGPR --blocks 4").code, 0);
    ASSERT_EQ(run("fit " + cfg("fit.json") + " --out " + dir("b") + " --method BTSGPR --blocks 4").code, 0);
    EXPECT_EQ(slurp(fs::path(dir("a")) / "trace.csv"), slurp(fs::path(dir("b")) / "trace.csv"));
    EXPECT_EQ(slurp(fs::path(dir("a")) / "report.json"), slurp(fs::path(dir("b")) / "report.json"));
}

TEST_F(Cli, InvalidCombinationsExitWithUsageError)
{
    const std::string base = "fit " + cfg("fit.json") + " --out " + dir("bad");
    Result r = run(base + " --method PEP");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("alpha"), std::string::npos) << r.err;
    r = run(base + " --method SGPR --alpha 0.5");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("alpha"), std::string::npos) << r.err;
    r = run(base + " --method TPEP --alpha 1.5");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("alpha"), std::string::npos) << r.err;
    r = run(base + " --method NotAMethod");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("method"), std::string::npos) << r.err;
    r = run(base + " --method BTSGPR --blocks 0");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("blocks"), std::string::npos) << r.err;
    r = run(base + " --num-inducing 1000");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("num_inducing"), std::string::npos) << r.err;

    write_config("typo.json", {{"dataset", {{"path", "x.csv"}}}, {"methd", "SGPR"}});
    r = run("fit " + cfg("typo.json"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("methd"), std::string::npos) << r.err;
}

TEST_F(Cli, CompareSharesInitAndSplit)
{
    const Result r = run("compare " + cfg("fit.json") + " --method SGPR,TSGPR,BTSGPR,Spherical --blocks 6 --out " +
                      dir("cmp"));
    ASSERT_EQ(r.code, 0) << r.err;
    const json table = json::parse(slurp(fs::path(dir("cmp")) / "compare.json"));
    ASSERT_EQ(table["methods"].size(), 4u);
    std::map<std::string, double> init;
    for (const auto& m : table["methods"]) {
        init[m["method"].get<std::string>()] = m["init_objective"].get<double>();
        EXPECT_EQ(m["split_hash"], table["methods"][0]["split_hash"]);
        EXPECT_EQ(m["n_train"], table["methods"][0]["n_train"]);
    }
    EXPECT_LE(init["SGPR"], init["Spherical"] + 1e-9);
    EXPECT_LE(init["Spherical"], init["T-SGPR"] + 1e-9);
    EXPECT_LE(init["T-SGPR"], init["BT-SGPR[B=6]"] + 1e-9);

    const auto csv = lines(slurp(fs::path(dir("cmp")) / "compare.csv"));
    ASSERT_EQ(csv.size(), 5u);
    EXPECT_EQ(csv[0], "method,init_objective,objective,rmse,mean_ll,sigma2,kernel_variance,lengthscale_1,m");
    int curves = 0;
    for (const auto& entry : fs::directory_iterator(dir("cmp"))) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("curve_", 0) != 0)
            continue;
        ++curves;
        const auto rows = lines(slurp(entry.path()));
        ASSERT_EQ(rows.size(), 201u);
        EXPECT_EQ(rows[0], "x_grid,mean,lower,upper");
    }
    EXPECT_EQ(curves, 4);
}

TEST_F(Cli, CompareNeedsTwoMethods)
{
    const Result r = run("compare " + cfg("fit.json") + " --method SGPR --out " + dir("cmp1"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("methods"), std::string::npos) << r.err;
}

TEST_F(Cli, VerifyTamperNamesTheCriterion)
{
    const Result clean = run("verify --scale small --seed 3 --out " + dir("v1"));
    EXPECT_NE(clean.out.find("PASS  1  ordering"), std::string::npos) << clean.out;
    const Result tampered = run("verify --scale small --seed 3 --tamper ordering");
    EXPECT_EQ(tampered.code, 1);
    EXPECT_NE(tampered.out.find("FAIL  1  ordering"), std::string::npos) << tampered.out;
    EXPECT_NE(tampered.err.find("ordering"), std::string::npos) << tampered.err;
    EXPECT_EQ(run("verify --tamper nonsense").code, 2);
    EXPECT_EQ(run("verify --scale huge").code, 2);
}

TEST_F(Cli, VerifyReportIsReproducible)
{
    ASSERT_NE(run("verify --scale small --seed 5 --out " + dir("va")).code, 2);
    ASSERT_NE(run("verify --scale small --seed 5 --out " + dir("vb")).code, 2);
    const std::string a = slurp(fs::path(dir("va")) / "verify.json");
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, slurp(fs::path(dir("vb")) / "verify.json"));
}

TEST_F(Cli, PredictFromSavedModel)
{
    ASSERT_EQ(run("fit " + cfg("fit.json") + " --method TPEP --alpha 0.5 --out " + dir("pm")).code, 0);
    const Result r = run("predict --model " + dir("pm") + "/model.json --data " + dir("snelson.csv") +
                      " --target y --out " + dir("pp"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(lines(slurp(fs::path(dir("pp")) / "predictions.csv")).size(), 121u);
    const json rep = json::parse(slurp(fs::path(dir("pp")) / "predict_report.json"));
    EXPECT_GT(rep["rmse"].get<double>(), 0.0);
    EXPECT_LT(rep["rmse"].get<double>(), 1.0);
    EXPECT_EQ(rep["metrics_scale"], "standardized");
    EXPECT_EQ(run("predict --model " + dir("missing.json") + " --data " + dir("snelson.csv")).code, 1);
}
