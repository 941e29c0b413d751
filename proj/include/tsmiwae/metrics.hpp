#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tsmiwae/common.hpp"

namespace tsmiwae {

// Raised when a metric has no defined value on the given inputs (single-class
// AUROC, zero-denominator MRE, ...). Callers decide whether to omit or fail.
struct UndefinedMetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mann-Whitney AUROC with midrank tie handling.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty()) throw ContractError("auroc: bad input sizes");
    size_t n_pos = 0, n_neg = 0;
    for (int y : labels) (y ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("auroc: needs both classes present");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum_pos += midrank;
        i = j;
    }
    double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Mean negative log likelihood of the true class. probs is N rows of C
// class probabilities each summing to 1.
inline double cross_entropy(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels) {
    if (probs.size() != labels.size() || probs.empty()) throw ContractError("cross_entropy: bad input sizes");
    double s = 0.0;
    for (size_t n = 0; n < probs.size(); ++n) {
        int y = labels[n];
        if (y < 0 || y >= static_cast<int>(probs[n].size())) throw ContractError("cross_entropy: label out of range");
        double p = std::clamp(probs[n][y], 1e-12, 1.0);
        s += -std::log(p);
    }
    return s / static_cast<double>(probs.size());
}

// Expected calibration error over `bins` equal-width confidence bins on
// (0, 1]. Confidence is the max-class probability.
inline double ece(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels, int bins = 10) {
    if (probs.size() != labels.size() || probs.empty()) throw ContractError("ece: bad input sizes");
    if (bins < 1) throw ContractError("ece: bins must be >= 1");
    std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
    std::vector<int> count(bins, 0);
    for (size_t n = 0; n < probs.size(); ++n) {
        int arg = 0;
        for (size_t c = 1; c < probs[n].size(); ++c)
            if (probs[n][c] > probs[n][arg]) arg = static_cast<int>(c);
        double conf = probs[n][arg];
        int b = std::min(bins - 1, std::max(0, static_cast<int>(std::ceil(conf * bins)) - 1));
        conf_sum[b] += conf;
        acc_sum[b] += (arg == labels[n]) ? 1.0 : 0.0;
        count[b] += 1;
    }
    double e = 0.0;
    double n_total = static_cast<double>(probs.size());
    for (int b = 0; b < bins; ++b) {
        if (count[b] == 0) continue;
        double acc = acc_sum[b] / count[b];
        double conf = conf_sum[b] / count[b];
        e += (count[b] / n_total) * std::abs(acc - conf);
    }
    return e;
}

// Multiclass Brier score: mean over samples of the squared distance between
// the probability vector and the one-hot label.
inline double brier(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels) {
    if (probs.size() != labels.size() || probs.empty()) throw ContractError("brier: bad input sizes");
    double s = 0.0;
    for (size_t n = 0; n < probs.size(); ++n) {
        for (size_t c = 0; c < probs[n].size(); ++c) {
            double target = (static_cast<int>(c) == labels[n]) ? 1.0 : 0.0;
            double d = probs[n][c] - target;
            s += d * d;
        }
    }
    return s / static_cast<double>(probs.size());
}

struct ClassificationCounts {
    std::optional<double> accuracy;
    std::optional<double> precision;
    std::optional<double> recall;
};

// Accuracy, precision, recall from hard predictions. Binary uses class 1 as
// positive; multiclass macro-averages the per-class one-vs-rest values over
// the classes where they are defined. A zero denominator leaves the
// component unset rather than zero.
inline ClassificationCounts accuracy_precision_recall(const std::vector<int>& preds, const std::vector<int>& labels,
                                                      int num_classes) {
    if (preds.size() != labels.size() || preds.empty()) throw ContractError("accuracy_precision_recall: bad input");
    ClassificationCounts out;
    size_t correct = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) ++correct;
    out.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());

    auto one_vs_rest = [&](int cls, std::optional<double>& prec, std::optional<double>& rec) {
        size_t tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            bool p = preds[i] == cls, y = labels[i] == cls;
            if (p && y) ++tp;
            else if (p && !y) ++fp;
            else if (!p && y) ++fn;
        }
        if (tp + fp > 0) prec = static_cast<double>(tp) / static_cast<double>(tp + fp);
        if (tp + fn > 0) rec = static_cast<double>(tp) / static_cast<double>(tp + fn);
    };

    if (num_classes <= 2) {
        one_vs_rest(1, out.precision, out.recall);
    } else {
        double psum = 0.0, rsum = 0.0;
        int pn = 0, rn = 0;
        for (int c = 0; c < num_classes; ++c) {
            std::optional<double> p, r;
            one_vs_rest(c, p, r);
            if (p) { psum += *p; ++pn; }
            if (r) { rsum += *r; ++rn; }
        }
        if (pn > 0) out.precision = psum / pn;
        if (rn > 0) out.recall = rsum / rn;
    }
    return out;
}

// Everything a finished evaluation reports; unset fields are omitted from
// the serialized form.
struct MetricsReport {
    std::optional<double> auroc;
    std::optional<double> accuracy;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> cross_entropy;
    std::optional<double> ece;
    std::optional<double> brier;
    std::optional<double> mae;
    std::optional<double> mre;
    long sample_count = 0;
    uint64_t seed = 0;
    std::string config_digest;
};

}  // namespace tsmiwae
