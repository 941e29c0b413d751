#pragma once

#include <algorithm>
#include <chrono>
#include <limits>
#include <thread>
#include <vector>

#include "tsmiwae/data.hpp"
#include "tsmiwae/metrics.hpp"
#include "tsmiwae/optim.hpp"
#include "tsmiwae/params.hpp"

namespace tsmiwae {

struct TrainConfig {
    int batch_size = 128;
    double lr = 1e-3;
    double weight_decay = 0.0;
    int max_epochs = 100;
    int patience = 20;
    bool oversample = false;
    uint64_t seed = 0;
    int threads = 1;
    // sampling effort for the per-epoch validation metric (kept small; the
    // final evaluation uses the full test-time configuration)
    int val_particles = 5;
    int val_samples = 1;
    // early-stop on the negative validation loss instead of the
    // classification metric (the right criterion for imputation runs)
    bool stop_on_val_loss = false;
};

struct TrainLogEntry {
    int epoch = 0;
    double loss = 0.0;
    double val_metric = 0.0;
    double wall_s = 0.0;
};

// Anything trainable by the shared loop: a parameterized per-series loss plus
// a class-probability predictor. Implementations must key all randomness by
// the (seed, epoch, series_key) arguments so batch order and threading never
// change the draws.
class SeriesClassifier {
public:
    virtual ~SeriesClassifier() = default;
    virtual ParamStore& params() = 0;
    virtual const ParamStore& params() const = 0;
    virtual int num_classes() const = 0;
    virtual Tensor loss(Tape& tape, ParamCtx& ctx, const MaskedTimeSeries& s, int label, uint64_t seed,
                        uint64_t epoch, uint64_t series_key) const = 0;
    virtual std::vector<double> predict(const ParamStore& params, const MaskedTimeSeries& s, uint64_t seed,
                                        uint64_t key, int k, int s_outer) const = 0;
};

// Checkpointable training progress. Resuming from a saved state continues
// the exact trajectory because every random draw re-derives from
// (seed, epoch, series index).
struct TrainState {
    int next_epoch = 0;
    AdamWState opt;
    ParamStore best_params;
    double best_metric = -std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    std::vector<TrainLogEntry> log;
    bool diverged = false;
};

namespace detail {

// Deterministic parallel map: worker w handles indices w, w+threads, ...;
// results land in per-index slots.
template <class Fn>
void parallel_for(int n, int threads, Fn&& fn) {
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&, w]() {
            for (int i = w; i < n; i += threads) fn(i);
        });
    for (auto& t : pool) t.join();
}

inline std::vector<int> epoch_order(const Dataset& train, const TrainConfig& tc, uint64_t epoch) {
    std::vector<int> order;
    if (tc.oversample) {
        int classes = train.num_classes();
        std::vector<std::vector<int>> by_class(classes);
        for (size_t i = 0; i < train.series.size(); ++i) by_class[*train.series[i].label].push_back(static_cast<int>(i));
        size_t target = 0;
        for (const auto& v : by_class) target = std::max(target, v.size());
        RngStream rng = derive_stream(tc.seed, "oversample", epoch);
        for (const auto& v : by_class) {
            if (v.empty()) continue;
            order.insert(order.end(), v.begin(), v.end());
            for (size_t extra = v.size(); extra < target; ++extra)
                order.push_back(v[rng.uniform_index(v.size())]);
        }
    } else {
        order.resize(train.series.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    }
    RngStream rng = derive_stream(tc.seed, "shuffle", epoch);
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    return order;
}

}  // namespace detail

// Negative mean validation loss under fixed evaluation noise, so epochs stay
// comparable.
inline double validation_neg_loss(const SeriesClassifier& model, const Dataset& val, const TrainConfig& tc) {
    int n = static_cast<int>(val.series.size());
    std::vector<double> losses(n, 0.0);
    detail::parallel_for(n, tc.threads, [&](int i) {
        Tape tape;
        ParamCtx ctx(tape, model.params());
        const uint64_t kValEpochKey = ~0ull;  // constant across epochs
        losses[i] =
            model.loss(tape, ctx, val.series[i], *val.series[i].label, tc.seed, kValEpochKey, static_cast<uint64_t>(i))
                .item();
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return -total / std::max(1, n);
}

// Validation metric: AUROC for binary labels (accuracy if the split is
// degenerate), accuracy for multiclass.
inline double validation_metric(const SeriesClassifier& model, const ParamStore& params, const Dataset& val,
                                const TrainConfig& tc) {
    int n = static_cast<int>(val.series.size());
    std::vector<std::vector<double>> probs(n);
    detail::parallel_for(n, tc.threads, [&](int i) {
        probs[i] = model.predict(params, val.series[i], tc.seed, static_cast<uint64_t>(i), tc.val_particles,
                                 tc.val_samples);
    });
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = *val.series[i].label;
    if (model.num_classes() == 2) {
        std::vector<double> scores(n);
        for (int i = 0; i < n; ++i) scores[i] = probs[i][1];
        try {
            return auroc(scores, labels);
        } catch (const UndefinedMetricError&) {
            // fall through to accuracy below
        }
    }
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        int arg = 0;
        for (size_t c = 1; c < probs[i].size(); ++c)
            if (probs[i][c] > probs[i][arg]) arg = static_cast<int>(c);
        correct += (arg == labels[i]);
    }
    return static_cast<double>(correct) / std::max(1, n);
}

// AdamW minimization of the mean per-series loss with early stopping on the
// validation metric. Per-series gradients within a batch may be computed in
// parallel; accumulation order is fixed by index, so a given (config, seed)
// always reproduces the same trajectory. On divergence the best finite state
// is retained and the loop stops.
inline TrainState train_classifier(SeriesClassifier& model, const Dataset& train, const Dataset& val,
                                   const TrainConfig& tc, TrainState state = {}) {
    for (const auto& s : train.series)
        if (!s.label) throw DataError("train: unlabeled series " + s.id + " in the training split");
    for (const auto& s : val.series)
        if (!s.label) throw DataError("train: unlabeled series " + s.id + " in the validation split");

    if (state.opt.m.empty()) {
        state.opt.cfg.lr = tc.lr;
        state.opt.cfg.weight_decay = tc.weight_decay;
    }
    if (state.best_params.vars.empty()) state.best_params = model.params();

    auto t_start = std::chrono::steady_clock::now();
    for (int epoch = state.next_epoch; epoch < tc.max_epochs; ++epoch) {
        std::vector<int> order = detail::epoch_order(train, tc, static_cast<uint64_t>(epoch));
        double epoch_loss = 0.0;
        long seen = 0;
        bool finite = true;

        for (size_t start = 0; start < order.size() && finite; start += tc.batch_size) {
            size_t stop = std::min(order.size(), start + tc.batch_size);
            int bsz = static_cast<int>(stop - start);
            std::vector<double> losses(bsz, 0.0);
            std::vector<GradMap> grads(bsz);
            std::vector<std::string> errors(bsz);
            detail::parallel_for(bsz, tc.threads, [&](int bi) {
                const MaskedTimeSeries& s = train.series[order[start + bi]];
                try {
                    Tape tape;
                    ParamCtx ctx(tape, model.params());
                    Tensor loss = model.loss(tape, ctx, s, *s.label, tc.seed, static_cast<uint64_t>(epoch),
                                             static_cast<uint64_t>(order[start + bi]));
                    losses[bi] = loss.item();
                    tape.backward(loss);
                    grads[bi] = ctx.grads();
                } catch (const NumericError& e) {
                    errors[bi] = e.what();
                    losses[bi] = std::numeric_limits<double>::quiet_NaN();
                }
            });
            GradMap batch_grad;
            for (const auto& [name, var] : model.params().vars)
                batch_grad.emplace(name, std::vector<double>(var.value.size(), 0.0));
            for (int bi = 0; bi < bsz; ++bi) {
                if (!std::isfinite(losses[bi])) {
                    finite = false;
                    break;
                }
                epoch_loss += losses[bi];
                ++seen;
                for (auto& [name, acc] : batch_grad) {
                    const std::vector<double>& g = grads[bi].at(name);
                    for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
                }
            }
            if (!finite) break;
            for (auto& [name, acc] : batch_grad)
                for (double& v : acc) v /= static_cast<double>(bsz);
            adamw_step(state.opt, model.params(), batch_grad);
        }

        if (!finite) {
            state.diverged = true;
            break;
        }

        epoch_loss /= std::max<long>(1, seen);
        double metric = tc.stop_on_val_loss ? validation_neg_loss(model, val, tc)
                                            : validation_metric(model, model.params(), val, tc);
        TrainLogEntry e;
        e.epoch = epoch;
        e.loss = epoch_loss;
        e.val_metric = metric;
        e.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        state.log.push_back(e);

        if (metric > state.best_metric) {
            state.best_metric = metric;
            state.best_epoch = epoch;
            state.best_params = model.params();
        }
        state.next_epoch = epoch + 1;
        if (epoch - state.best_epoch >= tc.patience) break;
    }
    if (state.best_params.vars.empty()) state.best_params = model.params();
    return state;
}

// Full test-split evaluation with the given sampling effort.
inline MetricsReport evaluate_classifier(const SeriesClassifier& model, const ParamStore& params, const Dataset& test,
                                         int k, int s_outer, uint64_t seed, int threads, int ece_bins = 10) {
    int n = static_cast<int>(test.series.size());
    if (n == 0) throw DataError("evaluate: empty test split");
    std::vector<std::vector<double>> probs(n);
    detail::parallel_for(n, threads, [&](int i) {
        probs[i] = model.predict(params, test.series[i], seed, static_cast<uint64_t>(i), k, s_outer);
    });
    std::vector<int> labels(n), preds(n);
    for (int i = 0; i < n; ++i) {
        if (!test.series[i].label) throw DataError("evaluate: unlabeled series " + test.series[i].id);
        labels[i] = *test.series[i].label;
        int arg = 0;
        for (size_t c = 1; c < probs[i].size(); ++c)
            if (probs[i][c] > probs[i][arg]) arg = static_cast<int>(c);
        preds[i] = arg;
    }
    MetricsReport rep;
    rep.sample_count = n;
    rep.seed = seed;
    if (model.num_classes() == 2) {
        std::vector<double> scores(n);
        for (int i = 0; i < n; ++i) scores[i] = probs[i][1];
        try {
            rep.auroc = auroc(scores, labels);
        } catch (const UndefinedMetricError&) {
            rep.auroc.reset();  // single-class split: omitted
        }
    }
    auto counts = accuracy_precision_recall(preds, labels, model.num_classes());
    rep.accuracy = counts.accuracy;
    rep.precision = counts.precision;
    rep.recall = counts.recall;
    rep.cross_entropy = cross_entropy(probs, labels);
    rep.ece = ece(probs, labels, ece_bins);
    rep.brier = brier(probs, labels);
    return rep;
}

}  // namespace tsmiwae
