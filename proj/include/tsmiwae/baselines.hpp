#pragma once

#include <string>
#include <vector>

#include "tsmiwae/data.hpp"
#include "tsmiwae/ops.hpp"
#include "tsmiwae/params.hpp"

namespace tsmiwae {

// ---------------------------------------------------------------------------
// Time intervals since the last observation (per feature)
// ---------------------------------------------------------------------------

// delta(1,j) = 0
// delta(t,j) = t_t - t_{t-1}             if feature j was observed at t-1
//            = t_t - t_{t-1} + delta(t-1,j) otherwise
inline Mat compute_intervals(const Mat& mask, const std::vector<double>& times) {
    const int T = mask.rows, d = mask.cols;
    if (static_cast<int>(times.size()) != T) throw ContractError("compute_intervals: times length mismatch");
    for (int t = 1; t < T; ++t)
        if (!(times[t] > times[t - 1])) throw ContractError("compute_intervals: times must be strictly increasing");
    Mat delta(T, d);
    for (int t = 1; t < T; ++t) {
        double gap = times[t] - times[t - 1];
        for (int j = 0; j < d; ++j)
            delta.at(t, j) = mask.at(t - 1, j) != 0.0 ? gap : gap + delta.at(t - 1, j);
    }
    return delta;
}

// ---------------------------------------------------------------------------
// Heuristic imputers. All of them leave observed entries untouched.
// ---------------------------------------------------------------------------

inline Mat impute_zero(const MaskedTimeSeries& s) {
    Mat out(s.steps(), s.features());
    for (int t = 0; t < s.steps(); ++t)
        for (int j = 0; j < s.features(); ++j)
            out.at(t, j) = s.mask.at(t, j) != 0.0 ? s.values.at(t, j) : 0.0;
    return out;
}

inline Mat impute_mean(const MaskedTimeSeries& s, const std::vector<double>& feat_mean) {
    Mat out(s.steps(), s.features());
    for (int t = 0; t < s.steps(); ++t)
        for (int j = 0; j < s.features(); ++j)
            out.at(t, j) = s.mask.at(t, j) != 0.0 ? s.values.at(t, j) : feat_mean[j];
    return out;
}

// Carry-forward; cold start (no prior observation) falls back to the feature
// mean, mirroring the decay mixture's limit.
inline Mat impute_forward(const MaskedTimeSeries& s, const std::vector<double>& feat_mean) {
    Mat out(s.steps(), s.features());
    std::vector<double> last(s.features());
    std::vector<bool> seen(s.features(), false);
    for (int t = 0; t < s.steps(); ++t)
        for (int j = 0; j < s.features(); ++j) {
            if (s.mask.at(t, j) != 0.0) {
                out.at(t, j) = s.values.at(t, j);
                last[j] = s.values.at(t, j);
                seen[j] = true;
            } else {
                out.at(t, j) = seen[j] ? last[j] : feat_mean[j];
            }
        }
    return out;
}

// Last value observed strictly before each step (for decay mixtures); cold
// start uses the feature mean. Strictness matters when an observed cell is
// dropped out: the carry-forward must not leak the dropped value back in.
inline Mat last_observed(const MaskedTimeSeries& s, const std::vector<double>& feat_mean) {
    Mat out(s.steps(), s.features());
    std::vector<double> last = feat_mean;
    for (int t = 0; t < s.steps(); ++t)
        for (int j = 0; j < s.features(); ++j) {
            out.at(t, j) = last[j];
            if (s.mask.at(t, j) != 0.0) last[j] = s.values.at(t, j);
        }
    return out;
}

inline std::vector<double> observed_feature_means(const Dataset& ds) {
    std::vector<double> mean(ds.feature_dim(), 0.0);
    std::vector<long long> count(ds.feature_dim(), 0);
    for (const auto& s : ds.series)
        for (int t = 0; t < s.steps(); ++t)
            for (int j = 0; j < s.features(); ++j)
                if (s.mask.at(t, j) != 0.0) {
                    mean[j] += s.values.at(t, j);
                    count[j] += 1;
                }
    for (int j = 0; j < ds.feature_dim(); ++j) {
        if (count[j] == 0) throw DataError("feature '" + ds.feature_names[j] + "' has no observed entries");
        mean[j] /= static_cast<double>(count[j]);
    }
    return mean;
}

// Mixture of last observation and fallback, gated by the decay:
//   s*x + (1-s) * (gamma * x_last + (1-gamma) * fallback)
inline double grud_impute(int s, double x, double gamma, double x_last, double x_mean) {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ContractError("grud_impute: gamma must be in (0, 1]");
    return s ? x : gamma * x_last + (1.0 - gamma) * x_mean;
}

// ---------------------------------------------------------------------------
// GRU cell
// ---------------------------------------------------------------------------

struct GruDims {
    int input = 0;
    int hidden = 0;
};

// Parameter group layout for one GRU cell under `prefix`:
//   prefix.wa/ua/ba  update gate, prefix.wr/ur/br reset gate,
//   prefix.w/u/b     candidate state
inline void init_gru(ParamStore& store, const std::string& prefix, GruDims dims, uint64_t seed) {
    init_xavier(store, prefix + ".wa", {dims.input, dims.hidden}, dims.input, dims.hidden, seed);
    init_xavier(store, prefix + ".ua", {dims.hidden, dims.hidden}, dims.hidden, dims.hidden, seed);
    init_zeros(store, prefix + ".ba", {dims.hidden});
    init_xavier(store, prefix + ".wr", {dims.input, dims.hidden}, dims.input, dims.hidden, seed);
    init_xavier(store, prefix + ".ur", {dims.hidden, dims.hidden}, dims.hidden, dims.hidden, seed);
    init_zeros(store, prefix + ".br", {dims.hidden});
    init_xavier(store, prefix + ".w", {dims.input, dims.hidden}, dims.input, dims.hidden, seed);
    init_xavier(store, prefix + ".u", {dims.hidden, dims.hidden}, dims.hidden, dims.hidden, seed);
    init_zeros(store, prefix + ".b", {dims.hidden});
}

// a = sigmoid(x Wa + h Ua + ba), r = sigmoid(x Wr + h Ur + br)
// cand = tanh(x W + (r . h) U + b)
// h' = (1 - a) . h + a . cand
// x is (1, in), h is (1, hidden).
inline Tensor gru_cell(ParamCtx& P, const std::string& prefix, const Tensor& x, const Tensor& h) {
    Tensor a = sigmoid(add_rowvec(add(matmul(x, P(prefix + ".wa")), matmul(h, P(prefix + ".ua"))), P(prefix + ".ba")));
    Tensor r = sigmoid(add_rowvec(add(matmul(x, P(prefix + ".wr")), matmul(h, P(prefix + ".ur"))), P(prefix + ".br")));
    Tensor cand = tanh(add_rowvec(add(matmul(x, P(prefix + ".w")), matmul(mul(r, h), P(prefix + ".u"))), P(prefix + ".b")));
    Tensor keep = shift(scale(a, -1.0), 1.0);
    return add(mul(keep, h), mul(a, cand));
}

// exp(-max(0, pre)) as a tensor op; lands in (0, 1], equal to 1 exactly when
// the pre-activation is <= 0.
inline Tensor decay_gamma(const Tensor& pre) { return exp(neg(maxzero(pre))); }

}  // namespace tsmiwae
