#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "tsmiwae/common.hpp"
#include "tsmiwae/tensor.hpp"

namespace tsmiwae {

constexpr double kProbEps = 1e-6;     // Bernoulli probabilities clamped to [eps, 1-eps]
constexpr double kSigmaFloor = 1e-4;  // additive floor under softplus for all std devs
constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Scalar kernels. These are the plain (non-differentiable) evaluation paths;
// the tape ops below reuse them for their forward passes.
// ---------------------------------------------------------------------------

inline double logsumexp(std::span<const double> v) {
    if (v.empty()) throw ContractError("logsumexp: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) {
        if (std::isnan(x) || x == std::numeric_limits<double>::infinity())
            throw ContractError("logsumexp: entries must be finite or -inf");
        mx = std::max(mx, x);
    }
    if (mx == -std::numeric_limits<double>::infinity())
        throw ContractError("logsumexp: all entries are -inf");
    long double s = 0.0L;
    for (double x : v) s += std::exp(x - mx);
    return static_cast<double>(mx + std::log(static_cast<double>(s)));
}

inline double gaussian_diag_logpdf(std::span<const double> x, std::span<const double> mu,
                                   std::span<const double> sigma) {
    if (x.size() != mu.size() || x.size() != sigma.size())
        throw ContractError("gaussian_diag_logpdf: length mismatch");
    double lp = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        if (!(sigma[i] > 0.0)) throw ContractError("gaussian_diag_logpdf: sigma must be positive");
        double r = (x[i] - mu[i]) / sigma[i];
        lp += -0.5 * kLog2Pi - std::log(sigma[i]) - 0.5 * r * r;
    }
    return lp;
}

inline double bernoulli_logpmf(int s, double p) {
    p = std::clamp(p, kProbEps, 1.0 - kProbEps);
    return s ? std::log(p) : std::log(1.0 - p);
}

// In-place lower Cholesky of the row-major n x n matrix `a`. On success the
// lower triangle holds L and the strict upper triangle is zeroed. Reports the
// smallest pivot seen (pre-sqrt diagonal value).
inline bool cholesky_factor(std::vector<double>& a, int n, double& min_pivot) {
    min_pivot = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
        double d = a[static_cast<size_t>(j) * n + j];
        for (int k = 0; k < j; ++k) {
            double l = a[static_cast<size_t>(j) * n + k];
            d -= l * l;
        }
        min_pivot = std::min(min_pivot, d);
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        double ljj = std::sqrt(d);
        a[static_cast<size_t>(j) * n + j] = ljj;
        for (int i = j + 1; i < n; ++i) {
            double s = a[static_cast<size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                s -= a[static_cast<size_t>(i) * n + k] * a[static_cast<size_t>(j) * n + k];
            a[static_cast<size_t>(i) * n + j] = s / ljj;
        }
        for (int k = j + 1; k < n; ++k) a[static_cast<size_t>(j) * n + k] = 0.0;
    }
    return true;
}

// Solves (L L^T) x = b in place given the Cholesky factor L.
inline void cholesky_solve(const std::vector<double>& L, int n, std::vector<double>& b) {
    for (int i = 0; i < n; ++i) {
        double s = b[i];
        for (int k = 0; k < i; ++k) s -= L[static_cast<size_t>(i) * n + k] * b[k];
        b[i] = s / L[static_cast<size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = b[i];
        for (int k = i + 1; k < n; ++k) s -= L[static_cast<size_t>(k) * n + i] * b[k];
        b[i] = s / L[static_cast<size_t>(i) * n + i];
    }
}

struct CholeskyResult {
    std::vector<double> factor;  // lower triangular L of (gram + jitter I)
    double jitter = 0.0;         // absolute jitter that was added to the diagonal
    double log_det = 0.0;        // log det of the jittered matrix
};

// Factors a kernel gram matrix. A clean factorization is tried first; on
// failure, jitter of 1e-6 x (mean diagonal) is added to the diagonal and
// escalated tenfold up to 1e-2 before giving up. Dense time grids make
// smooth-kernel grams nearly singular.
inline CholeskyResult cholesky_with_jitter(std::span<const double> gram, int n) {
    double mean_diag = 0.0;
    for (int i = 0; i < n; ++i) mean_diag += gram[static_cast<size_t>(i) * n + i];
    mean_diag /= n;
    double worst_pivot = 0.0;
    for (double mult : {0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2}) {
        double jit = mult * mean_diag;
        std::vector<double> a(gram.begin(), gram.end());
        for (int i = 0; i < n; ++i) a[static_cast<size_t>(i) * n + i] += jit;
        double pivot = 0.0;
        if (cholesky_factor(a, n, pivot)) {
            CholeskyResult res;
            res.factor = std::move(a);
            res.jitter = jit;
            for (int i = 0; i < n; ++i) res.log_det += 2.0 * std::log(res.factor[static_cast<size_t>(i) * n + i]);
            return res;
        }
        worst_pivot = pivot;
    }
    throw NumericError("singular kernel gram matrix: Cholesky failed after jitter escalation, smallest pivot " +
                       std::to_string(worst_pivot));
}

inline double mvn_logpdf_chol(std::span<const double> x, const Mat& gram) {
    const int n = gram.rows;
    if (gram.rows != gram.cols || static_cast<int>(x.size()) != n)
        throw ContractError("mvn_logpdf_chol: shape mismatch");
    CholeskyResult ch = cholesky_with_jitter(gram.data, n);
    std::vector<double> alpha(x.begin(), x.end());
    cholesky_solve(ch.factor, n, alpha);
    double quad = 0.0;
    for (int i = 0; i < n; ++i) quad += x[i] * alpha[i];
    return -0.5 * (n * kLog2Pi + ch.log_det + quad);
}

// ---------------------------------------------------------------------------
// Small dense matrix helpers (row-major, accumulate into C).
// ---------------------------------------------------------------------------

inline void gemm_nn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            double a = A[static_cast<size_t>(i) * k + p];
            if (a == 0.0) continue;
            const double* brow = B + static_cast<size_t>(p) * n;
            double* crow = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
}

// C(m,n) += A(m,k) * B(n,k)^T
inline void gemm_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            const double* arow = A + static_cast<size_t>(i) * k;
            const double* brow = B + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            C[static_cast<size_t>(i) * n + j] += s;
        }
}

// C(k,n) += A(m,k)^T * B(m,n)
inline void gemm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int p = 0; p < m; ++p) {
        const double* arow = A + static_cast<size_t>(p) * k;
        const double* brow = B + static_cast<size_t>(p) * n;
        for (int i = 0; i < k; ++i) {
            double a = arow[i];
            if (a == 0.0) continue;
            double* crow = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Tape ops
// ---------------------------------------------------------------------------

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) throw ContractError(std::string(op) + ": shape mismatch");
    if (a.tape() != b.tape()) throw ContractError(std::string(op) + ": tensors from different tapes");
}

// Unary op whose backward multiplies the incoming adjoint by a precomputed
// elementwise derivative.
inline Tensor unary_from_deriv(const Tensor& a, std::vector<double> out, std::vector<double> deriv) {
    int ai = a.id();
    return a.tape()->make(a.shape(), std::move(out), {ai},
                          [ai, d = std::move(deriv)](Tape& t, int self) {
                              if (!t.requires_grad(ai)) return;
                              auto dout = t.adjoint(self);
                              auto dx = t.adjoint(ai);
                              for (size_t i = 0; i < d.size(); ++i) dx[i] += dout[i] * d[i];
                          });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    int ai = a.id(), bi = b.id();
    return a.tape()->make(a.shape(), std::move(out), {ai, bi}, [ai, bi](Tape& t, int self) {
        auto dout = t.adjoint(self);
        if (t.requires_grad(ai)) {
            auto da = t.adjoint(ai);
            for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
        }
        if (t.requires_grad(bi)) {
            auto db = t.adjoint(bi);
            for (size_t i = 0; i < dout.size(); ++i) db[i] += dout[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    int ai = a.id(), bi = b.id();
    return a.tape()->make(a.shape(), std::move(out), {ai, bi}, [ai, bi](Tape& t, int self) {
        auto dout = t.adjoint(self);
        if (t.requires_grad(ai)) {
            auto da = t.adjoint(ai);
            for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
        }
        if (t.requires_grad(bi)) {
            auto db = t.adjoint(bi);
            for (size_t i = 0; i < dout.size(); ++i) db[i] -= dout[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    int ai = a.id(), bi = b.id();
    return a.tape()->make(a.shape(), std::move(out), {ai, bi}, [ai, bi](Tape& t, int self) {
        auto dout = t.adjoint(self);
        auto av2 = t.values(ai);
        auto bv2 = t.values(bi);
        if (t.requires_grad(ai)) {
            auto da = t.adjoint(ai);
            for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i] * bv2[i];
        }
        if (t.requires_grad(bi)) {
            auto db = t.adjoint(bi);
            for (size_t i = 0; i < dout.size(); ++i) db[i] += dout[i] * av2[i];
        }
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    int ai = a.id(), bi = b.id();
    return a.tape()->make(a.shape(), std::move(out), {ai, bi}, [ai, bi](Tape& t, int self) {
        auto dout = t.adjoint(self);
        auto av2 = t.values(ai);
        auto bv2 = t.values(bi);
        if (t.requires_grad(ai)) {
            auto da = t.adjoint(ai);
            for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i] / bv2[i];
        }
        if (t.requires_grad(bi)) {
            auto db = t.adjoint(bi);
            for (size_t i = 0; i < dout.size(); ++i) db[i] -= dout[i] * av2[i] / (bv2[i] * bv2[i]);
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    auto av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    int ai = a.id();
    return a.tape()->make(a.shape(), std::move(out), {ai}, [ai, c](Tape& t, int self) {
        if (!t.requires_grad(ai)) return;
        auto dout = t.adjoint(self);
        auto da = t.adjoint(ai);
        for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i] * c;
    });
}

inline Tensor shift(const Tensor& a, double c) {
    auto av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    int ai = a.id();
    return a.tape()->make(a.shape(), std::move(out), {ai}, [ai](Tape& t, int self) {
        if (!t.requires_grad(ai)) return;
        auto dout = t.adjoint(self);
        auto da = t.adjoint(ai);
        for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
    });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
    auto av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    std::vector<double> deriv = out;
    return detail::unary_from_deriv(a, std::move(out), std::move(deriv));
}

inline Tensor log(const Tensor& a) {
    auto av = a.values();
    std::vector<double> out(av.size()), deriv(av.size());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = std::log(av[i]);
        deriv[i] = 1.0 / av[i];
    }
    return detail::unary_from_deriv(a, std::move(out), std::move(deriv));
}

inline Tensor tanh(const Tensor& a) {
    auto av = a.values();
    std::vector<double> out(av.size()), deriv(av.size());
    for (size_t i = 0; i < out.size(); ++i) {
        double y = std::tanh(av[i]);
        out[i] = y;
        deriv[i] = 1.0 - y * y;
    }
    return detail::unary_from_deriv(a, std::move(out), std::move(deriv));
}

inline Tensor sigmoid(const Tensor& a) {
    auto av = a.values();
    std::vector<double> out(av.size()), deriv(av.size());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = av[i];
        double y = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        out[i] = y;
        deriv[i] = y * (1.0 - y);
    }
    return detail::unary_from_deriv(a, std::move(out), std::move(deriv));
}

inline Tensor softplus(const Tensor& a) {
    auto av = a.values();
    std::vector<double> out(av.size()), deriv(av.size());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = av[i];
        out[i] = x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
        deriv[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return detail::unary_from_deriv(a, std::move(out), std::move(deriv));
}

// max(0, x); subgradient 0 at the kink
inline Tensor maxzero(const Tensor& a) {
    auto av = a.values();
    std::vector<double> out(av.size()), deriv(av.size());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] > 0.0 ? av[i] : 0.0;
        deriv[i] = av[i] > 0.0 ? 1.0 : 0.0;
    }
    return detail::unary_from_deriv(a, std::move(out), std::move(deriv));
}

// Clamp with zero gradient outside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    auto av = a.values();
    std::vector<double> out(av.size()), deriv(av.size());
    for (size_t i = 0; i < out.size(); ++i) {
        bool inside = av[i] > lo && av[i] < hi;
        out[i] = std::clamp(av[i], lo, hi);
        deriv[i] = inside ? 1.0 : 0.0;
    }
    return detail::unary_from_deriv(a, std::move(out), std::move(deriv));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != numel(a.shape())) throw ContractError("reshape: element count mismatch");
    auto av = a.values();
    int ai = a.id();
    return a.tape()->make(std::move(shape), std::vector<double>(av.begin(), av.end()), {ai},
                          [ai](Tape& t, int self) {
                              if (!t.requires_grad(ai)) return;
                              auto dout = t.adjoint(self);
                              auto da = t.adjoint(ai);
                              for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
                          });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
        throw ContractError("matmul: incompatible shapes");
    int m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    gemm_nn_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
    int ai = a.id(), bi = b.id();
    return a.tape()->make({m, n}, std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& t, int self) {
        auto dout = t.adjoint(self);
        if (t.requires_grad(ai)) {
            // dA += dC * B^T
            gemm_nt_acc(dout.data(), t.values(bi).data(), t.adjoint(ai).data(), m, n, k);
        }
        if (t.requires_grad(bi)) {
            // dB += A^T * dC
            gemm_tn_acc(t.values(ai).data(), dout.data(), t.adjoint(bi).data(), m, k, n);
        }
    });
}

// A(m,k) * B(n,k)^T -> (m,n)
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
        throw ContractError("matmul_nt: incompatible shapes");
    int m = a.rows(), k = a.cols(), n = b.rows();
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    gemm_nt_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
    int ai = a.id(), bi = b.id();
    return a.tape()->make({m, n}, std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& t, int self) {
        auto dout = t.adjoint(self);
        if (t.requires_grad(ai)) {
            // dA += dC * B
            gemm_nn_acc(dout.data(), t.values(bi).data(), t.adjoint(ai).data(), m, n, k);
        }
        if (t.requires_grad(bi)) {
            // dB += dC^T * A
            gemm_tn_acc(dout.data(), t.values(ai).data(), t.adjoint(bi).data(), m, n, k);
        }
    });
}

// x(m,n) + v(n) broadcast over rows
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (x.shape().size() != 2 || v.shape().size() != 1 || x.cols() != static_cast<int>(v.values().size()))
        throw ContractError("add_rowvec: incompatible shapes");
    int m = x.rows(), n = x.cols();
    auto xv = x.values();
    auto vv = v.values();
    std::vector<double> out(xv.size());
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out[static_cast<size_t>(r) * n + c] = xv[static_cast<size_t>(r) * n + c] + vv[c];
    int xi = x.id(), vi = v.id();
    return x.tape()->make({m, n}, std::move(out), {xi, vi}, [xi, vi, m, n](Tape& t, int self) {
        auto dout = t.adjoint(self);
        if (t.requires_grad(xi)) {
            auto dx = t.adjoint(xi);
            for (size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i];
        }
        if (t.requires_grad(vi)) {
            auto dv = t.adjoint(vi);
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c) dv[c] += dout[static_cast<size_t>(r) * n + c];
        }
    });
}

// x(m,n) * v(n) broadcast over rows
inline Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    if (x.shape().size() != 2 || v.shape().size() != 1 || x.cols() != static_cast<int>(v.values().size()))
        throw ContractError("mul_rowvec: incompatible shapes");
    int m = x.rows(), n = x.cols();
    auto xv = x.values();
    auto vv = v.values();
    std::vector<double> out(xv.size());
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out[static_cast<size_t>(r) * n + c] = xv[static_cast<size_t>(r) * n + c] * vv[c];
    int xi = x.id(), vi = v.id();
    return x.tape()->make({m, n}, std::move(out), {xi, vi}, [xi, vi, m, n](Tape& t, int self) {
        auto dout = t.adjoint(self);
        auto xv2 = t.values(xi);
        auto vv2 = t.values(vi);
        if (t.requires_grad(xi)) {
            auto dx = t.adjoint(xi);
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c)
                    dx[static_cast<size_t>(r) * n + c] += dout[static_cast<size_t>(r) * n + c] * vv2[c];
        }
        if (t.requires_grad(vi)) {
            auto dv = t.adjoint(vi);
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c)
                    dv[c] += dout[static_cast<size_t>(r) * n + c] * xv2[static_cast<size_t>(r) * n + c];
        }
    });
}

// Broadcast a scalar to a full shape.
inline Tensor expand(const Tensor& s, Shape shape) {
    if (numel(s.shape()) != 1) throw ContractError("expand: input must be scalar");
    double v = s.values()[0];
    int si = s.id();
    std::vector<double> out(numel(shape), v);
    return s.tape()->make(std::move(shape), std::move(out), {si}, [si](Tape& t, int self) {
        if (!t.requires_grad(si)) return;
        auto dout = t.adjoint(self);
        double acc = 0.0;
        for (double d : dout) acc += d;
        t.adjoint(si)[0] += acc;
    });
}

inline Tensor sum(const Tensor& a) {
    auto av = a.values();
    double s = 0.0;
    for (double x : av) s += x;
    int ai = a.id();
    return a.tape()->make({}, {s}, {ai}, [ai](Tape& t, int self) {
        if (!t.requires_grad(ai)) return;
        double d = t.adjoint(self)[0];
        auto da = t.adjoint(ai);
        for (size_t i = 0; i < da.size(); ++i) da[i] += d;
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.values().size())); }

// Single row of a matrix as a rank-1 tensor.
inline Tensor row(const Tensor& a, int r) {
    if (a.shape().size() != 2 || r < 0 || r >= a.rows()) throw ContractError("row: index out of range");
    int n = a.cols();
    auto av = a.values();
    std::vector<double> out(av.begin() + static_cast<size_t>(r) * n, av.begin() + static_cast<size_t>(r + 1) * n);
    int ai = a.id();
    return a.tape()->make({n}, std::move(out), {ai}, [ai, r, n](Tape& t, int self) {
        if (!t.requires_grad(ai)) return;
        auto dout = t.adjoint(self);
        auto da = t.adjoint(ai);
        for (int c = 0; c < n; ++c) da[static_cast<size_t>(r) * n + c] += dout[c];
    });
}

// Column slice [c0, c1) of a matrix.
inline Tensor cols(const Tensor& a, int c0, int c1) {
    if (a.shape().size() != 2 || c0 < 0 || c1 > a.cols() || c0 >= c1) throw ContractError("cols: bad slice");
    int m = a.rows(), n = a.cols(), w = c1 - c0;
    auto av = a.values();
    std::vector<double> out(static_cast<size_t>(m) * w);
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < w; ++c) out[static_cast<size_t>(r) * w + c] = av[static_cast<size_t>(r) * n + c0 + c];
    int ai = a.id();
    return a.tape()->make({m, w}, std::move(out), {ai}, [ai, c0, m, n, w](Tape& t, int self) {
        if (!t.requires_grad(ai)) return;
        auto dout = t.adjoint(self);
        auto da = t.adjoint(ai);
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < w; ++c)
                da[static_cast<size_t>(r) * n + c0 + c] += dout[static_cast<size_t>(r) * w + c];
    });
}

// Concatenate matrices with equal row counts along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    int m = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.shape().size() != 2 || p.rows() != m) throw ContractError("concat_cols: row mismatch");
        total += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(m) * total);
    std::vector<int> ids;
    std::vector<int> widths;
    int off = 0;
    for (const Tensor& p : parts) {
        auto pv = p.values();
        int w = p.cols();
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < w; ++c) out[static_cast<size_t>(r) * total + off + c] = pv[static_cast<size_t>(r) * w + c];
        ids.push_back(p.id());
        widths.push_back(w);
        off += w;
    }
    return parts[0].tape()->make({m, total}, std::move(out), ids,
                                 [ids, widths, m, total](Tape& t, int self) {
                                     auto dout = t.adjoint(self);
                                     int o = 0;
                                     for (size_t p = 0; p < ids.size(); ++p) {
                                         int w = widths[p];
                                         if (t.requires_grad(ids[p])) {
                                             auto dp = t.adjoint(ids[p]);
                                             for (int r = 0; r < m; ++r)
                                                 for (int c = 0; c < w; ++c)
                                                     dp[static_cast<size_t>(r) * w + c] +=
                                                         dout[static_cast<size_t>(r) * total + o + c];
                                         }
                                         o += w;
                                     }
                                 });
}

// Stack rank-1 tensors of equal length into an (N, len) matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ContractError("stack_rows: empty input");
    int n = static_cast<int>(rows[0].values().size());
    std::vector<double> out;
    out.reserve(rows.size() * n);
    std::vector<int> ids(rows.size());
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].shape().size() != 1 || static_cast<int>(rows[r].values().size()) != n)
            throw ContractError("stack_rows: rows must be rank-1 of equal length");
        auto v = rows[r].values();
        out.insert(out.end(), v.begin(), v.end());
        ids[r] = rows[r].id();
    }
    return rows[0].tape()->make({static_cast<int>(rows.size()), n}, std::move(out), ids,
                                [ids, n](Tape& t, int self) {
                                    auto dout = t.adjoint(self);
                                    for (size_t r = 0; r < ids.size(); ++r) {
                                        if (!t.requires_grad(ids[r])) continue;
                                        auto dr = t.adjoint(ids[r]);
                                        for (int c = 0; c < n; ++c) dr[c] += dout[r * n + c];
                                    }
                                });
}

// Stack scalar tensors into a rank-1 tensor.
inline Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("stack: empty input");
    std::vector<double> out(parts.size());
    std::vector<int> ids(parts.size());
    for (size_t i = 0; i < parts.size(); ++i) {
        if (numel(parts[i].shape()) != 1) throw ContractError("stack: inputs must be scalars");
        out[i] = parts[i].values()[0];
        ids[i] = parts[i].id();
    }
    return parts[0].tape()->make({static_cast<int>(parts.size())}, std::move(out), ids,
                                 [ids](Tape& t, int self) {
                                     auto dout = t.adjoint(self);
                                     for (size_t i = 0; i < ids.size(); ++i)
                                         if (t.requires_grad(ids[i])) t.adjoint(ids[i])[0] += dout[i];
                                 });
}

// log sum exp over all elements; entries may be -inf (fully ignored), the
// max-shift keeps everything else stable.
inline Tensor logsumexp(const Tensor& a) {
    double lse = logsumexp(a.values());
    auto av = a.values();
    std::vector<double> soft(av.size());
    for (size_t i = 0; i < av.size(); ++i) soft[i] = std::exp(av[i] - lse);
    int ai = a.id();
    return a.tape()->make({}, {lse}, {ai}, [ai, s = std::move(soft)](Tape& t, int self) {
        if (!t.requires_grad(ai)) return;
        double d = t.adjoint(self)[0];
        auto da = t.adjoint(ai);
        for (size_t i = 0; i < s.size(); ++i) da[i] += d * s[i];
    });
}

// Row-wise softmax. Entries equal to -inf get exactly zero weight; a fully
// masked row is a contract violation.
inline Tensor softmax_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw ContractError("softmax_rows: rank-2 input required");
    int m = a.rows(), n = a.cols();
    auto av = a.values();
    std::vector<double> out(av.size());
    for (int r = 0; r < m; ++r) {
        const double* x = av.data() + static_cast<size_t>(r) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < n; ++c) mx = std::max(mx, x[c]);
        if (mx == -std::numeric_limits<double>::infinity())
            throw ContractError("softmax_rows: fully masked row");
        double s = 0.0;
        for (int c = 0; c < n; ++c) s += std::exp(x[c] - mx);
        for (int c = 0; c < n; ++c) out[static_cast<size_t>(r) * n + c] = std::exp(x[c] - mx) / s;
    }
    int ai = a.id();
    return a.tape()->make({m, n}, std::move(out), {ai}, [ai, m, n](Tape& t, int self) {
        if (!t.requires_grad(ai)) return;
        auto dout = t.adjoint(self);
        auto y = t.values(self);
        auto da = t.adjoint(ai);
        for (int r = 0; r < m; ++r) {
            const double* yr = y.data() + static_cast<size_t>(r) * n;
            const double* dr = dout.data() + static_cast<size_t>(r) * n;
            double dot = 0.0;
            for (int c = 0; c < n; ++c) dot += yr[c] * dr[c];
            for (int c = 0; c < n; ++c) da[static_cast<size_t>(r) * n + c] += yr[c] * (dr[c] - dot);
        }
    });
}

// Row-wise log softmax (stable).
inline Tensor log_softmax_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw ContractError("log_softmax_rows: rank-2 input required");
    int m = a.rows(), n = a.cols();
    auto av = a.values();
    std::vector<double> out(av.size());
    for (int r = 0; r < m; ++r) {
        const double* x = av.data() + static_cast<size_t>(r) * n;
        double lse = logsumexp(std::span<const double>(x, static_cast<size_t>(n)));
        for (int c = 0; c < n; ++c) out[static_cast<size_t>(r) * n + c] = x[c] - lse;
    }
    int ai = a.id();
    return a.tape()->make({m, n}, std::move(out), {ai}, [ai, m, n](Tape& t, int self) {
        if (!t.requires_grad(ai)) return;
        auto dout = t.adjoint(self);
        auto y = t.values(self);
        auto da = t.adjoint(ai);
        for (int r = 0; r < m; ++r) {
            const double* yr = y.data() + static_cast<size_t>(r) * n;
            const double* dr = dout.data() + static_cast<size_t>(r) * n;
            double dsum = 0.0;
            for (int c = 0; c < n; ++c) dsum += dr[c];
            for (int c = 0; c < n; ++c)
                da[static_cast<size_t>(r) * n + c] += dr[c] - std::exp(yr[c]) * dsum;
        }
    });
}

// Per-row layer normalization with learned gain/bias.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    if (x.shape().size() != 2 || gain.shape().size() != 1 || bias.shape().size() != 1 ||
        x.cols() != static_cast<int>(gain.values().size()) || x.cols() != static_cast<int>(bias.values().size()))
        throw ContractError("layer_norm_rows: incompatible shapes");
    int m = x.rows(), n = x.cols();
    auto xv = x.values();
    auto gv = gain.values();
    auto bv = bias.values();
    std::vector<double> out(xv.size());
    std::vector<double> xhat(xv.size());
    std::vector<double> inv_sd(m);
    for (int r = 0; r < m; ++r) {
        const double* xr = xv.data() + static_cast<size_t>(r) * n;
        double mu = 0.0;
        for (int c = 0; c < n; ++c) mu += xr[c];
        mu /= n;
        double var = 0.0;
        for (int c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= n;
        double isd = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_sd[r] = isd;
        for (int c = 0; c < n; ++c) {
            double xh = (xr[c] - mu) * isd;
            xhat[static_cast<size_t>(r) * n + c] = xh;
            out[static_cast<size_t>(r) * n + c] = gv[c] * xh + bv[c];
        }
    }
    int xi = x.id(), gi = gain.id(), bi = bias.id();
    return x.tape()->make({m, n}, std::move(out), {xi, gi, bi},
                          [xi, gi, bi, m, n, xh = std::move(xhat), isd = std::move(inv_sd)](Tape& t, int self) {
                              auto dout = t.adjoint(self);
                              auto gv2 = t.values(gi);
                              if (t.requires_grad(gi)) {
                                  auto dg = t.adjoint(gi);
                                  for (int r = 0; r < m; ++r)
                                      for (int c = 0; c < n; ++c)
                                          dg[c] += dout[static_cast<size_t>(r) * n + c] * xh[static_cast<size_t>(r) * n + c];
                              }
                              if (t.requires_grad(bi)) {
                                  auto db = t.adjoint(bi);
                                  for (int r = 0; r < m; ++r)
                                      for (int c = 0; c < n; ++c) db[c] += dout[static_cast<size_t>(r) * n + c];
                              }
                              if (t.requires_grad(xi)) {
                                  auto dx = t.adjoint(xi);
                                  for (int r = 0; r < m; ++r) {
                                      const double* dr = dout.data() + static_cast<size_t>(r) * n;
                                      const double* xhr = xh.data() + static_cast<size_t>(r) * n;
                                      double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                                      for (int c = 0; c < n; ++c) {
                                          double dxh = dr[c] * gv2[c];
                                          sum_dxh += dxh;
                                          sum_dxh_xh += dxh * xhr[c];
                                      }
                                      for (int c = 0; c < n; ++c) {
                                          double dxh = dr[c] * gv2[c];
                                          dx[static_cast<size_t>(r) * n + c] +=
                                              isd[r] * (dxh - sum_dxh / n - xhr[c] * sum_dxh_xh / n);
                                      }
                                  }
                              }
                          });
}

// 1D convolution along the time axis. x is (T, in_ch), kernels are
// (out_ch, in_ch, width) flattened row-major, bias is (out_ch). Causal mode
// left-pads with width-1 zeros so output t sees inputs <= t; non-causal mode
// uses symmetric same-padding.
inline Tensor conv1d_time(const Tensor& x, const Tensor& kernels, const Tensor& bias, int out_ch, int width,
                          bool causal) {
    if (x.shape().size() != 2) throw ContractError("conv1d_time: input must be rank-2");
    int T = x.rows(), in_ch = x.cols();
    if (width < 1) throw ContractError("conv1d_time: kernel width must be >= 1");
    if (static_cast<long long>(out_ch) * in_ch * width != numel(kernels.shape()) ||
        out_ch != static_cast<int>(bias.values().size()))
        throw ContractError("conv1d_time: kernel bank shape mismatch");
    int pad_left = causal ? width - 1 : (width - 1) / 2;
    int pad_right = causal ? 0 : width / 2;
    if (width > T + pad_left + pad_right) throw ContractError("conv1d_time: kernel wider than padded sequence");
    auto xv = x.values();
    auto wv = kernels.values();
    auto bv = bias.values();
    std::vector<double> out(static_cast<size_t>(T) * out_ch);
    for (int t = 0; t < T; ++t)
        for (int o = 0; o < out_ch; ++o) {
            double s = bv[o];
            for (int u = 0; u < width; ++u) {
                int src = t - pad_left + u;
                if (src < 0 || src >= T) continue;
                const double* xr = xv.data() + static_cast<size_t>(src) * in_ch;
                const double* wr = wv.data() + (static_cast<size_t>(o) * width + u) * in_ch;
                for (int c = 0; c < in_ch; ++c) s += wr[c] * xr[c];
            }
            out[static_cast<size_t>(t) * out_ch + o] = s;
        }
    int xi = x.id(), wi = kernels.id(), bi = bias.id();
    return x.tape()->make({T, out_ch}, std::move(out), {xi, wi, bi},
                          [xi, wi, bi, T, in_ch, out_ch, width, pad_left](Tape& t, int self) {
                              auto dout = t.adjoint(self);
                              auto xv2 = t.values(xi);
                              auto wv2 = t.values(wi);
                              if (t.requires_grad(bi)) {
                                  auto db = t.adjoint(bi);
                                  for (int tt = 0; tt < T; ++tt)
                                      for (int o = 0; o < out_ch; ++o) db[o] += dout[static_cast<size_t>(tt) * out_ch + o];
                              }
                              if (t.requires_grad(wi)) {
                                  auto dw = t.adjoint(wi);
                                  for (int tt = 0; tt < T; ++tt)
                                      for (int u = 0; u < width; ++u) {
                                          int src = tt - pad_left + u;
                                          if (src < 0 || src >= T) continue;
                                          const double* xr = xv2.data() + static_cast<size_t>(src) * in_ch;
                                          for (int o = 0; o < out_ch; ++o) {
                                              double d = dout[static_cast<size_t>(tt) * out_ch + o];
                                              double* wr = dw.data() + (static_cast<size_t>(o) * width + u) * in_ch;
                                              for (int c = 0; c < in_ch; ++c) wr[c] += d * xr[c];
                                          }
                                      }
                              }
                              if (t.requires_grad(xi)) {
                                  auto dx = t.adjoint(xi);
                                  for (int tt = 0; tt < T; ++tt)
                                      for (int u = 0; u < width; ++u) {
                                          int src = tt - pad_left + u;
                                          if (src < 0 || src >= T) continue;
                                          double* xr = dx.data() + static_cast<size_t>(src) * in_ch;
                                          for (int o = 0; o < out_ch; ++o) {
                                              double d = dout[static_cast<size_t>(tt) * out_ch + o];
                                              const double* wr = wv2.data() + (static_cast<size_t>(o) * width + u) * in_ch;
                                              for (int c = 0; c < in_ch; ++c) xr[c] += d * wr[c];
                                          }
                                      }
                              }
                          });
}

// Scaled dot-product attention where position t attends only to positions
// <= t. Strictly-future scores are -inf before the softmax, so outputs at t
// are bit-identical under any change of later inputs.
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.shape().size() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
        throw ContractError("causal_attention: q, k, v must share a (T, h) shape");
    int T = q.rows(), h = q.cols();
    std::vector<double> maskv(static_cast<size_t>(T) * T, 0.0);
    for (int r = 0; r < T; ++r)
        for (int c = r + 1; c < T; ++c) maskv[static_cast<size_t>(r) * T + c] = -std::numeric_limits<double>::infinity();
    Tensor mask = q.tape()->constant({T, T}, std::move(maskv));
    Tensor scores = add(scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(h))), mask);
    return matmul(softmax_rows(scores), v);
}

// Multivariate normal log density with zero mean via Cholesky. The gram gets
// the jitter treatment from cholesky_with_jitter; the jitter's dependence on
// the gram diagonal is differentiated exactly.
inline Tensor mvn_logpdf_chol(const Tensor& x, const Tensor& gram) {
    if (x.shape().size() != 1 || gram.shape().size() != 2 || gram.rows() != gram.cols() ||
        gram.rows() != static_cast<int>(x.values().size()))
        throw ContractError("mvn_logpdf_chol: shape mismatch");
    const int n = gram.rows();
    CholeskyResult ch = cholesky_with_jitter(gram.values(), n);
    std::vector<double> alpha(x.values().begin(), x.values().end());
    cholesky_solve(ch.factor, n, alpha);
    double quad = 0.0;
    for (int i = 0; i < n; ++i) quad += x.values()[i] * alpha[i];
    double lp = -0.5 * (n * kLog2Pi + ch.log_det + quad);

    // Kinv for the gram adjoint
    std::vector<double> kinv(static_cast<size_t>(n) * n, 0.0);
    for (int j = 0; j < n; ++j) {
        std::vector<double> e(n, 0.0);
        e[j] = 1.0;
        cholesky_solve(ch.factor, n, e);
        for (int i = 0; i < n; ++i) kinv[static_cast<size_t>(i) * n + j] = e[i];
    }
    double jitter_scale = ch.jitter > 0.0 ? ch.jitter * n / [&] {
        double tr = 0.0;
        for (int i = 0; i < n; ++i) tr += gram.values()[static_cast<size_t>(i) * n + i];
        return tr;
    }() : 0.0;  // jitter = mult * mean(diag) => d jitter / d K_ii = mult / n

    int xi = x.id(), gi = gram.id();
    return x.tape()->make({}, {lp}, {xi, gi},
                          [xi, gi, n, a = std::move(alpha), ki = std::move(kinv), jitter_scale](Tape& t, int self) {
                              double d = t.adjoint(self)[0];
                              if (t.requires_grad(xi)) {
                                  auto dx = t.adjoint(xi);
                                  for (int i = 0; i < n; ++i) dx[i] += -d * a[i];
                              }
                              if (t.requires_grad(gi)) {
                                  auto dg = t.adjoint(gi);
                                  double tr_term = 0.0;
                                  for (int i = 0; i < n; ++i)
                                      tr_term += ki[static_cast<size_t>(i) * n + i] - a[i] * a[i];
                                  for (int i = 0; i < n; ++i)
                                      for (int j = 0; j < n; ++j) {
                                          double adj = -0.5 * (ki[static_cast<size_t>(i) * n + j] - a[i] * a[j]);
                                          dg[static_cast<size_t>(i) * n + j] += d * adj;
                                      }
                                  // diagonal contribution through the jitter
                                  double jd = d * (-0.5) * tr_term * (jitter_scale / n);
                                  for (int i = 0; i < n; ++i) dg[static_cast<size_t>(i) * n + i] += jd;
                              }
                          });
}

// Sum over latent dimensions of zero-mean MVN log densities sharing one gram
// (independent processes per dimension). z is (T, J). One factorization is
// shared across all J solves.
inline Tensor gp_logpdf_shared_gram(const Tensor& z, const Tensor& gram) {
    if (z.shape().size() != 2 || gram.shape().size() != 2 || gram.rows() != gram.cols() ||
        gram.rows() != z.rows())
        throw ContractError("gp_logpdf_shared_gram: shape mismatch");
    const int T = z.rows(), J = z.cols();
    CholeskyResult ch = cholesky_with_jitter(gram.values(), T);
    auto zv = z.values();
    std::vector<double> alphas(static_cast<size_t>(T) * J);
    double quad = 0.0;
    std::vector<double> col(T);
    for (int j = 0; j < J; ++j) {
        for (int i = 0; i < T; ++i) col[i] = zv[static_cast<size_t>(i) * J + j];
        std::vector<double> a = col;
        cholesky_solve(ch.factor, T, a);
        for (int i = 0; i < T; ++i) {
            quad += col[i] * a[i];
            alphas[static_cast<size_t>(i) * J + j] = a[i];
        }
    }
    double lp = -0.5 * (J * (T * kLog2Pi + ch.log_det) + quad);

    std::vector<double> kinv(static_cast<size_t>(T) * T, 0.0);
    for (int j = 0; j < T; ++j) {
        std::vector<double> e(T, 0.0);
        e[j] = 1.0;
        cholesky_solve(ch.factor, T, e);
        for (int i = 0; i < T; ++i) kinv[static_cast<size_t>(i) * T + j] = e[i];
    }
    double tr = 0.0;
    for (int i = 0; i < T; ++i) tr += gram.values()[static_cast<size_t>(i) * T + i];
    double jitter_scale = ch.jitter > 0.0 ? ch.jitter * T / tr : 0.0;

    int zi = z.id(), gi = gram.id();
    return z.tape()->make({}, {lp}, {zi, gi},
                          [zi, gi, T, J, al = std::move(alphas), ki = std::move(kinv), jitter_scale](Tape& t, int self) {
                              double d = t.adjoint(self)[0];
                              if (t.requires_grad(zi)) {
                                  auto dz = t.adjoint(zi);
                                  for (size_t i = 0; i < al.size(); ++i) dz[i] += -d * al[i];
                              }
                              if (t.requires_grad(gi)) {
                                  auto dg = t.adjoint(gi);
                                  double tr_term = 0.0;
                                  std::vector<double> aat(static_cast<size_t>(T) * T, 0.0);
                                  for (int j = 0; j < J; ++j)
                                      for (int r = 0; r < T; ++r) {
                                          double ar = al[static_cast<size_t>(r) * J + j];
                                          for (int c = 0; c < T; ++c)
                                              aat[static_cast<size_t>(r) * T + c] += ar * al[static_cast<size_t>(c) * J + j];
                                      }
                                  for (int r = 0; r < T; ++r)
                                      tr_term += J * ki[static_cast<size_t>(r) * T + r] - aat[static_cast<size_t>(r) * T + r];
                                  for (int r = 0; r < T; ++r)
                                      for (int c = 0; c < T; ++c) {
                                          double adj = -0.5 * (J * ki[static_cast<size_t>(r) * T + c] - aat[static_cast<size_t>(r) * T + c]);
                                          dg[static_cast<size_t>(r) * T + c] += d * adj;
                                      }
                                  double jd = d * (-0.5) * tr_term * (jitter_scale / T);
                                  for (int r = 0; r < T; ++r) dg[static_cast<size_t>(r) * T + r] += jd;
                              }
                          });
}

// ---------------------------------------------------------------------------
// Composite helpers shared by the model and baselines
// ---------------------------------------------------------------------------

// Per-cell Gaussian log density terms; sum against a mask to get a masked
// log likelihood.
inline Tensor gaussian_logpdf_cells(const Tensor& x, const Tensor& mu, const Tensor& sigma) {
    Tensor r = div(sub(x, mu), sigma);
    return shift(sub(scale(mul(r, r), -0.5), log(sigma)), -0.5 * kLog2Pi);
}

// Per-cell Bernoulli log pmf of a constant 0/1 mask under probabilities p
// (clamped to [kProbEps, 1-kProbEps]).
inline Tensor bernoulli_logpmf_cells(const Tensor& s, const Tensor& p) {
    Tensor pc = clamp(p, kProbEps, 1.0 - kProbEps);
    Tensor one_minus_s = shift(scale(s, -1.0), 1.0);
    Tensor one_minus_p = shift(scale(pc, -1.0), 1.0);
    return add(mul(s, log(pc)), mul(one_minus_s, log(one_minus_p)));
}

// softplus(x) + floor, the positivity map for every standard deviation.
inline Tensor softplus_floor(const Tensor& raw) { return shift(softplus(raw), kSigmaFloor); }

// Inverse of softplus_floor's softplus part, for picking raw initializers.
inline double inv_softplus(double y) { return std::log(std::expm1(y)); }

inline Tensor log_softmax_vec(const Tensor& logits) {
    if (logits.shape().size() != 1) throw ContractError("log_softmax_vec: rank-1 input required");
    Tensor lse = logsumexp(logits);
    return sub(logits, expand(lse, logits.shape()));
}

}  // namespace tsmiwae
