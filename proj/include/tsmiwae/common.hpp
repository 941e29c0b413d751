#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsmiwae {

// Violated API contract (bad arguments, broken preconditions).
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed or inconsistent input data (files, schemas).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical failure that survived all recovery attempts.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major matrix of plain values. Used for non-differentiable
// quantities (data grids, masks, time intervals); differentiable compute
// goes through Tensor instead.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const double& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return data.size(); }

    bool operator==(const Mat& o) const = default;
};

constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

// FNV-1a, used for config digests and RNG stream derivation.
inline uint64_t fnv1a(const std::string& s, uint64_t h = 14695981039346656037ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string to_hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace tsmiwae
