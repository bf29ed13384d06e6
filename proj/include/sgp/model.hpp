#ifndef SGP_MODEL_HPP
#define SGP_MODEL_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kernel.hpp"
#include "random.hpp"

namespace sgp {

/// Everything trainable: kernel, noise, inducing locations and (for T-PEP) the scalar m.
struct ModelState {
    KernelParams kernel;
    NoiseParam noise;
    Matrix inducing; // M x D
    std::optional<double> log_m;

    Index num_inducing() const { return inducing.rows(); }
    Index dim() const { return inducing.cols(); }
    double sigma2() const { return noise.variance(); }
    double m() const { return log_m ? std::exp(*log_m) : 1.0; }

    void validate() const
    {
        if (inducing.rows() < 1)
            throw InvalidArgument("ModelState: at least one inducing point is required");
        if (inducing.cols() != kernel.dim())
            throw DimensionMismatch("ModelState: inducing dimension does not match kernel");
        if (!inducing.allFinite())
            throw InvalidArgument("ModelState: non-finite inducing location");
        if (!kernel.log_lengthscales.allFinite() || !std::isfinite(kernel.log_signal_variance) ||
            !std::isfinite(noise.log_noise_variance) || (log_m && !std::isfinite(*log_m)))
            throw InvalidArgument("ModelState: non-finite hyperparameter");
    }
};

/// Disjoint, covering assignment of 0..N-1 into nonempty blocks.
class Partition {
public:
    Partition() = default;

    Partition(std::vector<std::vector<int>> blocks, int n) : blocks_(std::move(blocks)), n_(n)
    {
        std::vector<char> seen(static_cast<std::size_t>(n), 0);
        int count = 0;
        for (const auto& b : blocks_) {
            if (b.empty())
                throw InvalidArgument("Partition: empty block");
            for (int i : b) {
                if (i < 0 || i >= n)
                    throw IndexOutOfRange("Partition: index " + std::to_string(i) + " outside 0.." +
                                          std::to_string(n - 1));
                if (seen[static_cast<std::size_t>(i)])
                    throw InvalidArgument("Partition: index " + std::to_string(i) + " appears twice");
                seen[static_cast<std::size_t>(i)] = 1;
                ++count;
            }
        }
        if (count != n)
            throw InvalidArgument("Partition: blocks do not cover all " + std::to_string(n) + " points");
    }

    static Partition singletons(int n)
    {
        std::vector<std::vector<int>> b(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            b[static_cast<std::size_t>(i)] = {i};
        return Partition(std::move(b), n);
    }

    static Partition single_block(int n)
    {
        std::vector<int> all(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            all[static_cast<std::size_t>(i)] = i;
        return Partition({all}, n);
    }

    int num_points() const { return n_; }
    std::size_t num_blocks() const { return blocks_.size(); }
    const std::vector<int>& block(std::size_t b) const { return blocks_.at(b); }
    const std::vector<std::vector<int>>& blocks() const { return blocks_; }

    std::size_t max_block_size() const
    {
        std::size_t s = 0;
        for (const auto& b : blocks_)
            s = std::max(s, b.size());
        return s;
    }

    bool equal_sizes() const
    {
        return std::all_of(blocks_.begin(), blocks_.end(),
                           [&](const auto& b) { return b.size() == blocks_.front().size(); });
    }

    bool operator==(const Partition&) const = default;

private:
    std::vector<std::vector<int>> blocks_;
    int n_ = 0;
};

/// Balanced random partition: a seeded permutation cut into consecutive chunks.
/// For a fixed seed, partitions with B and kB blocks are nested whenever kB divides n.
inline Partition make_partition(int n, int num_blocks, std::uint64_t seed)
{
    if (num_blocks < 1 || num_blocks > n)
        throw InvalidArgument("make_partition: need 1 <= num_blocks <= n, got num_blocks=" +
                              std::to_string(num_blocks) + ", n=" + std::to_string(n));
    Rng rng(seed);
    const std::vector<int> perm = permutation(n, rng);
    std::vector<std::vector<int>> blocks(static_cast<std::size_t>(num_blocks));
    const int base = n / num_blocks;
    const int extra = n % num_blocks;
    std::size_t pos = 0;
    for (int b = 0; b < num_blocks; ++b) {
        const int size = base + (b < extra ? 1 : 0);
        auto& blk = blocks[static_cast<std::size_t>(b)];
        blk.assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                   perm.begin() + static_cast<std::ptrdiff_t>(pos + static_cast<std::size_t>(size)));
        pos += static_cast<std::size_t>(size);
    }
    return Partition(std::move(blocks), n);
}

enum class Method {
    Exact,
    SGPR,
    TSGPR,
    BTSGPR,
    SharedBlock,
    Spherical,
    PEP,
    TPEP,
    GeneralCOracle,
    GeneralPEPOracle,
};

inline std::string to_string(Method m)
{
    switch (m) {
    case Method::Exact: return "Exact";
    case Method::SGPR: return "SGPR";
    case Method::TSGPR: return "T-SGPR";
    case Method::BTSGPR: return "BT-SGPR";
    case Method::SharedBlock: return "SharedBlock";
    case Method::Spherical: return "Spherical";
    case Method::PEP: return "PEP";
    case Method::TPEP: return "T-PEP";
    case Method::GeneralCOracle: return "GeneralC-Oracle";
    case Method::GeneralPEPOracle: return "GeneralPEP-Oracle";
    }
    return "?";
}

inline Method parse_method(std::string_view name)
{
    auto canon = [](std::string_view s) {
        std::string out;
        for (char c : s)
            if (c != '-' && c != '_' && c != ' ')
                out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        return out;
    };
    const std::string key = canon(name);
    for (Method m : {Method::Exact, Method::SGPR, Method::TSGPR, Method::BTSGPR, Method::SharedBlock,
                     Method::Spherical, Method::PEP, Method::TPEP, Method::GeneralCOracle,
                     Method::GeneralPEPOracle})
        if (canon(to_string(m)) == key)
            return m;
    if (key == "svgp")
        return Method::SGPR;
    if (key == "tsvgp")
        return Method::TSGPR;
    if (key == "btsvgp")
        return Method::BTSGPR;
    throw InvalidArgument("method: unknown method '" + std::string(name) + "'");
}

inline bool uses_alpha(Method m)
{
    return m == Method::PEP || m == Method::TPEP || m == Method::GeneralPEPOracle;
}

inline bool accepts_blocks(Method m)
{
    return m == Method::BTSGPR || m == Method::SharedBlock || m == Method::PEP || m == Method::TPEP ||
           m == Method::GeneralPEPOracle;
}

inline bool requires_blocks(Method m) { return m == Method::BTSGPR || m == Method::SharedBlock; }

inline bool is_oracle(Method m) { return m == Method::GeneralCOracle || m == Method::GeneralPEPOracle; }

/// Which objective to evaluate.
struct BoundSpec {
    Method method = Method::SGPR;
    std::optional<double> alpha;
    std::optional<int> num_blocks;

    /// Throws InvalidArgument naming the offending field.
    void validate(int n) const
    {
        if (uses_alpha(method)) {
            if (!alpha)
                throw InvalidArgument("alpha: required for method " + to_string(method));
            if (!(*alpha > 0.0 && *alpha <= 1.0))
                throw InvalidArgument("alpha: must lie in (0, 1], got " + std::to_string(*alpha));
        } else if (alpha) {
            throw InvalidArgument("alpha: not applicable to method " + to_string(method));
        }
        if (num_blocks) {
            if (!accepts_blocks(method))
                throw InvalidArgument("num_blocks: not applicable to method " + to_string(method));
            if (*num_blocks < 1 || *num_blocks > n)
                throw InvalidArgument("num_blocks: must lie in [1, " + std::to_string(n) + "], got " +
                                      std::to_string(*num_blocks));
        } else if (requires_blocks(method)) {
            throw InvalidArgument("num_blocks: required for method " + to_string(method));
        }
    }

    /// Blocks actually used: the requested count, or one point per block.
    int effective_blocks(int n) const { return num_blocks.value_or(n); }

    std::string label() const
    {
        std::string s = to_string(method);
        if (alpha)
            s += "[a=" + std::to_string(*alpha).substr(0, 6) + "]";
        if (num_blocks)
            s += "[B=" + std::to_string(*num_blocks) + "]";
        return s;
    }
};

/// q(u) = N(mean, S) with S held by its Cholesky factor.
struct GaussianQU {
    Vector mean;
    CholeskyFactor cov_chol;

    Index size() const { return mean.size(); }
    Matrix cov() const { return cov_chol.lower * cov_chol.lower.transpose(); }

    static GaussianQU from_cov(const Vector& mean, const Matrix& s) { return {mean, chol(s)}; }
};

} // namespace sgp

#endif
