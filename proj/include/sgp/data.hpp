#ifndef SGP_DATA_HPP
#define SGP_DATA_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kernel.hpp"
#include "random.hpp"

namespace sgp {

struct StandardizationStats {
    Vector x_mean;
    Vector x_std;
    double y_mean = 0.0;
    double y_std = 1.0;
    bool applied = false;
};

struct Dataset {
    Matrix X; // N x D
    Vector y;
    std::vector<std::string> column_names; // feature names, empty if headerless
    std::string target_name;
    StandardizationStats stats;
    std::vector<std::string> warnings;

    Index size() const { return X.rows(); }
    Index dim() const { return X.cols(); }

    Dataset subset(const std::vector<int>& rows) const
    {
        Dataset out;
        out.X.resize(static_cast<Index>(rows.size()), X.cols());
        out.y.resize(static_cast<Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            out.X.row(static_cast<Index>(i)) = X.row(rows[i]);
            out.y(static_cast<Index>(i)) = y(rows[i]);
        }
        out.column_names = column_names;
        out.target_name = target_name;
        out.stats = stats;
        return out;
    }
};

namespace detail {

inline std::string trim(const std::string& s)
{
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a])))
        ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1])))
        --b;
    std::string out = s.substr(a, b - a);
    if (out.size() >= 2 && out.front() == '"' && out.back() == '"')
        out = out.substr(1, out.size() - 2);
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

/// Finite decimal number with '.' separator; NaN/Inf and trailing garbage rejected.
inline bool parse_number(const std::string& s, double& out)
{
    if (s.empty())
        return false;
    for (char c : s)
        if (!(std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '+' || c == 'e' ||
              c == 'E'))
            return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size() && std::isfinite(out);
}

} // namespace detail

/// Reads a numeric CSV. `target` is a column name, a 0-based column index, or "last".
/// A header row is detected when any field of the first row is not numeric.
inline Dataset load_csv(const std::string& path, const std::string& target = "last")
{
    std::ifstream in(path);
    if (!in)
        throw ParseError("load_csv: cannot open '" + path + "'", 0, 0);

    std::vector<std::vector<std::string>> rows;
    std::vector<long> line_numbers;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty())
            continue;
        rows.push_back(detail::split_csv_line(line));
        line_numbers.push_back(lineno);
    }
    if (rows.empty())
        throw EmptyDataset("load_csv: '" + path + "' has no rows");

    std::vector<std::string> header;
    {
        double tmp = 0.0;
        for (const auto& f : rows.front())
            if (!detail::parse_number(f, tmp)) {
                header = rows.front();
                break;
            }
    }
    const std::size_t first = header.empty() ? 0 : 1;
    const std::size_t ncols = rows.front().size();
    if (rows.size() <= first)
        throw EmptyDataset("load_csv: '" + path + "' has a header but no data");
    if (ncols < 2)
        throw ParseError("load_csv: need at least one feature and a target", line_numbers.front(), 1);

    std::size_t target_col = ncols - 1;
    if (target != "last") {
        auto it = std::find(header.begin(), header.end(), target);
        double idx = 0.0;
        if (it != header.end()) {
            target_col = static_cast<std::size_t>(it - header.begin());
        } else if (detail::parse_number(target, idx) && idx >= 0 && idx < static_cast<double>(ncols) &&
                   idx == std::floor(idx)) {
            target_col = static_cast<std::size_t>(idx);
        } else {
            throw InvalidArgument("target: no column named '" + target + "'");
        }
    }

    const Index n = static_cast<Index>(rows.size() - first);
    Matrix raw(n, static_cast<Index>(ncols));
    for (std::size_t r = first; r < rows.size(); ++r) {
        if (rows[r].size() != ncols)
            throw ParseError("load_csv: expected " + std::to_string(ncols) + " fields, found " +
                                 std::to_string(rows[r].size()),
                             line_numbers[r], static_cast<long>(std::min(rows[r].size(), ncols)) + 1);
        for (std::size_t c = 0; c < ncols; ++c) {
            double v = 0.0;
            if (!detail::parse_number(rows[r][c], v))
                throw ParseError("load_csv: non-numeric or non-finite value '" + rows[r][c] + "'",
                                 line_numbers[r], static_cast<long>(c) + 1);
            raw(static_cast<Index>(r - first), static_cast<Index>(c)) = v;
        }
    }

    Dataset d;
    d.y = raw.col(static_cast<Index>(target_col));
    d.target_name = header.empty() ? "y" : header[target_col];
    std::vector<Index> keep;
    for (std::size_t c = 0; c < ncols; ++c) {
        if (c == target_col)
            continue;
        const auto col = raw.col(static_cast<Index>(c));
        const std::string name = header.empty() ? "x" + std::to_string(c) : header[c];
        if (col.maxCoeff() == col.minCoeff()) {
            d.warnings.push_back("dropped constant column '" + name + "'");
            continue;
        }
        keep.push_back(static_cast<Index>(c));
        if (!header.empty())
            d.column_names.push_back(name);
    }
    if (keep.empty())
        throw EmptyDataset("load_csv: no non-constant feature columns");
    d.X.resize(n, static_cast<Index>(keep.size()));
    for (std::size_t j = 0; j < keep.size(); ++j)
        d.X.col(static_cast<Index>(j)) = raw.col(keep[j]);
    return d;
}

/// Zero mean, unit population standard deviation for every X column and y.
inline Dataset standardize(const Dataset& d)
{
    if (d.size() < 2)
        throw EmptyDataset("standardize: need at least two rows");
    Dataset out = d;
    const double n = static_cast<double>(d.size());
    auto stats = [&](const auto& col, const std::string& name, double& mean, double& sd) {
        mean = col.mean();
        sd = std::sqrt((col.array() - mean).square().sum() / n);
        if (!(sd > 0.0))
            throw DegenerateColumn("standardize: column '" + name + "' has zero variance");
    };
    out.stats.x_mean.resize(d.dim());
    out.stats.x_std.resize(d.dim());
    for (Index j = 0; j < d.dim(); ++j) {
        const std::string name = j < static_cast<Index>(d.column_names.size())
                                     ? d.column_names[static_cast<std::size_t>(j)]
                                     : "x" + std::to_string(j);
        stats(d.X.col(j), name, out.stats.x_mean(j), out.stats.x_std(j));
        out.X.col(j) = (d.X.col(j).array() - out.stats.x_mean(j)) / out.stats.x_std(j);
    }
    stats(d.y, d.target_name.empty() ? "y" : d.target_name, out.stats.y_mean, out.stats.y_std);
    out.y = (d.y.array() - out.stats.y_mean) / out.stats.y_std;
    out.stats.applied = true;
    return out;
}

/// Applies stored statistics of `reference` to another dataset (e.g. a test split).
inline Dataset apply_standardization(const Dataset& d, const StandardizationStats& s)
{
    Dataset out = d;
    for (Index j = 0; j < d.dim(); ++j)
        out.X.col(j) = (d.X.col(j).array() - s.x_mean(j)) / s.x_std(j);
    out.y = (d.y.array() - s.y_mean) / s.y_std;
    out.stats = s;
    return out;
}

inline Dataset destandardize(const Dataset& d)
{
    if (!d.stats.applied)
        return d;
    Dataset out = d;
    for (Index j = 0; j < d.dim(); ++j)
        out.X.col(j) = d.X.col(j).array() * d.stats.x_std(j) + d.stats.x_mean(j);
    out.y = d.y.array() * d.stats.y_std + d.stats.y_mean;
    out.stats = StandardizationStats{};
    return out;
}

/// Seeded random split; the test part has floor(N * test_fraction) rows.
inline std::pair<Dataset, Dataset> split(const Dataset& d, double test_fraction, std::uint64_t seed)
{
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw InvalidArgument("test_fraction: must lie in (0, 1)");
    const int n = static_cast<int>(d.size());
    const int n_test = static_cast<int>(std::floor(n * test_fraction));
    if (n_test < 1 || n_test >= n)
        throw InvalidArgument("test_fraction: split of " + std::to_string(n) + " rows leaves an empty part");
    Rng rng(seed);
    const std::vector<int> perm = permutation(n, rng);
    std::vector<int> test(perm.begin(), perm.begin() + n_test);
    std::vector<int> train(perm.begin() + n_test, perm.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    return {d.subset(train), d.subset(test)};
}

inline Matrix init_inducing_subset(const Dataset& d, int m, std::uint64_t seed)
{
    if (m < 1 || m > d.size())
        throw InvalidArgument("num_inducing: must lie in [1, N]");
    Rng rng(seed);
    const std::vector<int> perm = permutation(static_cast<int>(d.size()), rng);
    Matrix z(m, d.dim());
    for (int i = 0; i < m; ++i)
        z.row(i) = d.X.row(perm[static_cast<std::size_t>(i)]);
    return z;
}

/// k-means++ seeding followed by Lloyd iterations (center movement < 1e-6 or 100 iterations).
inline Matrix init_inducing_kmeans(const Dataset& d, int m, std::uint64_t seed)
{
    const Index n = d.size();
    if (m < 1 || m > n)
        throw InvalidArgument("num_inducing: must lie in [1, N]");
    Rng rng(seed);
    Matrix centers(m, d.dim());
    centers.row(0) = d.X.row(static_cast<Index>(uniform_index(rng, static_cast<std::size_t>(n))));
    Vector dist2 = (d.X.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int k = 1; k < m; ++k) {
        const double total = dist2.sum();
        Index pick = 0;
        if (total > 0.0) {
            double u = uniform01(rng) * total;
            pick = n - 1;
            for (Index i = 0; i < n; ++i) {
                u -= dist2(i);
                if (u < 0.0 && dist2(i) > 0.0) {
                    pick = i;
                    break;
                }
            }
            while (dist2(pick) <= 0.0 && pick > 0)
                --pick;
        } else {
            pick = static_cast<Index>(uniform_index(rng, static_cast<std::size_t>(n)));
        }
        centers.row(k) = d.X.row(pick);
        dist2 = dist2.cwiseMin((d.X.rowwise() - centers.row(k)).rowwise().squaredNorm());
    }

    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    for (int iter = 0; iter < 100; ++iter) {
        for (Index i = 0; i < n; ++i) {
            Index best = 0;
            (centers.rowwise() - d.X.row(i)).rowwise().squaredNorm().minCoeff(&best);
            assign[static_cast<std::size_t>(i)] = static_cast<int>(best);
        }
        Matrix next = Matrix::Zero(m, d.dim());
        Vector counts = Vector::Zero(m);
        for (Index i = 0; i < n; ++i) {
            next.row(assign[static_cast<std::size_t>(i)]) += d.X.row(i);
            counts(assign[static_cast<std::size_t>(i)]) += 1.0;
        }
        for (int k = 0; k < m; ++k)
            next.row(k) = counts(k) > 0 ? Eigen::RowVectorXd(next.row(k) / counts(k))
                                        : Eigen::RowVectorXd(centers.row(k));
        const double moved = (next - centers).rowwise().norm().maxCoeff();
        centers = next;
        if (moved < 1e-6)
            break;
    }
    return centers;
}

/// Median pairwise Euclidean distance (over a seeded subsample of at most
/// `max_points` rows), used as every lengthscale; signal variance 1.
inline KernelParams init_lengthscales_median(const Dataset& d, std::uint64_t seed = 0,
                                             std::size_t max_points = 1000)
{
    const int n = static_cast<int>(d.size());
    std::vector<int> rows(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        rows[static_cast<std::size_t>(i)] = i;
    if (rows.size() > max_points) {
        Rng rng(seed);
        shuffle(rows, rng);
        rows.resize(max_points);
    }
    std::vector<double> dists;
    dists.reserve(rows.size() * (rows.size() - 1) / 2);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = i + 1; j < rows.size(); ++j)
            dists.push_back((d.X.row(rows[i]) - d.X.row(rows[j])).norm());
    double median = 1.0;
    if (!dists.empty()) {
        const std::size_t mid = dists.size() / 2;
        std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
        median = dists[mid];
        if (dists.size() % 2 == 0) {
            const double lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
            median = 0.5 * (median + lower);
        }
    }
    if (!(median > 0.0))
        median = 1.0;
    return KernelParams::from_natural(Vector::Constant(d.dim(), median), 1.0);
}

} // namespace sgp

#endif
