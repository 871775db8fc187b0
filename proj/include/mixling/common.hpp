#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mixling {

class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Every stochastic routine takes this generator explicitly. The helpers below
// are written against the raw 64-bit stream so results do not depend on the
// standard library's distribution implementations.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

// Unbiased integer in [0, n) by rejection.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    if (n == 0) throw Error("uniform_index: empty range");
    const std::uint64_t range = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t x = rng();
    while (x >= limit) x = rng();
    return static_cast<std::size_t>(x % range);
}

inline double standard_normal(Rng& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template <typename Seq>
void shuffle_in_place(Seq& seq, Rng& rng) {
    for (std::size_t i = seq.size(); i > 1; --i) {
        const std::size_t j = uniform_index(rng, i);
        std::swap(seq[i - 1], seq[j]);
    }
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Derives an independent child seed from a parent seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    return splitmix64(seed ^ splitmix64(tag + 0x632BE59BD9B4E019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return derive_seed(seed, h);
}

// FNV-1a, used for checkpoint checksums.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

enum class Task : int { mlm = 0, dae, ms, cmlm, mt, cls };

inline constexpr int kNumTasks = 6;
inline constexpr int kNumPretrainTasks = 5;

inline constexpr std::string_view task_name(Task t) {
    switch (t) {
        case Task::mlm: return "mlm";
        case Task::dae: return "dae";
        case Task::ms: return "ms";
        case Task::cmlm: return "cmlm";
        case Task::mt: return "mt";
        case Task::cls: return "cls";
    }
    return "?";
}

inline Task task_from_name(std::string_view name) {
    for (int i = 0; i < kNumTasks; ++i) {
        if (task_name(static_cast<Task>(i)) == name) return static_cast<Task>(i);
    }
    throw Error("unknown task '" + std::string(name) + "'");
}

inline constexpr Task kPretrainTasks[kNumPretrainTasks] = {Task::mlm, Task::dae, Task::ms, Task::cmlm,
                                                          Task::mt};

}  // namespace mixling
