#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tsmiwae/baselines.hpp"
#include "tsmiwae/inference.hpp"
#include "tsmiwae/train.hpp"

namespace tsmiwae {

// ---------------------------------------------------------------------------
// The generative classifier (training adapter)
// ---------------------------------------------------------------------------

class GenerativeClassifier final : public SeriesClassifier {
public:
    GenerativeClassifier(ModelParams model, SamplingConfig sc, AblationFlags abl, std::vector<double> feat_mean)
        : model_(std::move(model)), sc_(sc), abl_(abl), feat_mean_(std::move(feat_mean)), test_beta_(sc.beta) {}

    ParamStore& params() override { return model_.store; }
    const ParamStore& params() const override { return model_.store; }
    int num_classes() const override { return model_.hyper.classes; }

    ModelParams& model() { return model_; }
    const ModelParams& model() const { return model_; }
    const SamplingConfig& sampling() const { return sc_; }
    const AblationFlags& ablation() const { return abl_; }
    const std::vector<double>& feature_means() const { return feat_mean_; }

    // observation-dropout rate used at prediction time (defaults to the
    // training rate)
    void set_test_beta(double b) { test_beta_ = b; }
    double test_beta() const { return test_beta_; }

    Tensor loss(Tape& tape, ParamCtx& ctx, const MaskedTimeSeries& s, int label, uint64_t seed, uint64_t epoch,
                uint64_t series_key) const override {
        RngStream noise = derive_stream(seed, "noise", epoch, series_key);
        RngStream drop = derive_stream(seed, "drop", epoch, series_key);
        return series_loss(tape, ctx, model_.hyper, s, label, sc_, abl_, feat_mean_, noise, drop);
    }

    std::vector<double> predict(const ParamStore& params, const MaskedTimeSeries& s, uint64_t seed, uint64_t key,
                                int k, int s_outer) const override {
        SamplingConfig sc = sc_;
        sc.k_test = k;
        sc.s_test = s_outer;
        return snis_predict(model_.hyper, params, s, sc, test_beta_, feat_mean_, seed, key);
    }

private:
    ModelParams model_;
    SamplingConfig sc_;
    AblationFlags abl_;
    std::vector<double> feat_mean_;
    double test_beta_;
};

// Trains the generative classifier on (train, val): AdamW on the negative
// bound, early stopping on the validation metric. Returns the training state
// whose best_params snapshot is the deliverable.
inline TrainState train(GenerativeClassifier& model, const Dataset& train_ds, const Dataset& val_ds,
                        const TrainConfig& tc, TrainState resume = {}) {
    return train_classifier(model, train_ds, val_ds, tc, std::move(resume));
}

// ---------------------------------------------------------------------------
// GRU baselines
// ---------------------------------------------------------------------------

enum class GruVariant { Zero, Mean, Forward, Simple, GruD };

inline std::string gru_variant_name(GruVariant v) {
    switch (v) {
        case GruVariant::Zero: return "gru-zero";
        case GruVariant::Mean: return "gru-mean";
        case GruVariant::Forward: return "gru-forward";
        case GruVariant::Simple: return "gru-simple";
        case GruVariant::GruD: return "gru-d";
    }
    return "?";
}

struct GruSpec {
    GruVariant variant = GruVariant::Forward;
    int hidden = 64;
    // GRU-simple imputes with forward fill by default; flip for mean fill
    bool simple_use_mean = false;
    bool online = false;
};

class GruClassifier final : public SeriesClassifier {
public:
    GruClassifier(GruSpec spec, int feature_dim, int classes, std::vector<double> feat_mean, uint64_t seed)
        : spec_(spec), d_(feature_dim), classes_(classes), feat_mean_(std::move(feat_mean)) {
        GruDims dims;
        dims.hidden = spec_.hidden;
        dims.input = spec_.variant == GruVariant::Simple ? 3 * d_ : d_;
        init_gru(store_, "gru", dims, seed);
        init_xavier(store_, "gru.head.w", {spec_.hidden, classes_}, spec_.hidden, classes_, seed);
        init_zeros(store_, "gru.head.b", {classes_});
        if (spec_.variant == GruVariant::GruD) {
            // biases start just inside the active region of max(0, .)
            init_zeros(store_, "gru.decay_in.w", {d_});
            init_const(store_, "gru.decay_in.b", {d_}, 0.01);
            init_zeros(store_, "gru.decay_h.w", {d_, spec_.hidden});
            init_const(store_, "gru.decay_h.b", {spec_.hidden}, 0.01);
        }
    }

    ParamStore& params() override { return store_; }
    const ParamStore& params() const override { return store_; }
    int num_classes() const override { return classes_; }
    const GruSpec& spec() const { return spec_; }

    // Log class probabilities: (C) in sequence mode, (T, C) online.
    Tensor log_probs(Tape& tape, ParamCtx& P, const MaskedTimeSeries& s) const {
        const int T = s.steps();
        Mat delta = compute_intervals(s.mask, s.times);
        Mat xlast = last_observed(s, feat_mean_);
        Mat filled = spec_.variant == GruVariant::Mean || (spec_.variant == GruVariant::Simple && spec_.simple_use_mean)
                         ? impute_mean(s, feat_mean_)
                         : spec_.variant == GruVariant::Zero ? impute_zero(s)
                                                             : impute_forward(s, feat_mean_);
        std::vector<double> zeros_h(static_cast<size_t>(spec_.hidden), 0.0);
        Tensor h = tape.constant({1, spec_.hidden}, zeros_h);
        std::vector<Tensor> step_logits;
        if (spec_.online) step_logits.reserve(T);

        for (int t = 0; t < T; ++t) {
            Tensor x;
            if (spec_.variant == GruVariant::GruD) {
                std::vector<double> dl(d_), sm(d_), sx(d_, 0.0), xl(d_), mn(d_);
                for (int j = 0; j < d_; ++j) {
                    dl[j] = delta.at(t, j);
                    sm[j] = s.mask.at(t, j);
                    if (sm[j] != 0.0) sx[j] = s.values.at(t, j);
                    xl[j] = xlast.at(t, j);
                    mn[j] = feat_mean_[j];
                }
                Tensor delta_t = tape.constant({1, d_}, dl);
                Tensor gamma = decay_gamma(add_rowvec(mul_rowvec(delta_t, P("gru.decay_in.w")), P("gru.decay_in.b")));
                Tensor mask_t = tape.constant({1, d_}, sm);
                Tensor inv_mask = shift(scale(mask_t, -1.0), 1.0);
                Tensor inv_gamma = shift(scale(gamma, -1.0), 1.0);
                Tensor mixture = add(mul(gamma, tape.constant({1, d_}, xl)), mul(inv_gamma, tape.constant({1, d_}, mn)));
                x = add(tape.constant({1, d_}, sx), mul(inv_mask, mixture));
                // hidden decay from the same staleness intervals
                Tensor gamma_h = decay_gamma(add_rowvec(matmul(delta_t, P("gru.decay_h.w")), P("gru.decay_h.b")));
                h = mul(gamma_h, h);
            } else if (spec_.variant == GruVariant::Simple) {
                std::vector<double> in(static_cast<size_t>(3) * d_);
                for (int j = 0; j < d_; ++j) {
                    in[j] = filled.at(t, j);
                    in[d_ + j] = s.mask.at(t, j);
                    in[2 * d_ + j] = delta.at(t, j);
                }
                x = tape.constant({1, 3 * d_}, std::move(in));
            } else {
                std::vector<double> in(d_);
                for (int j = 0; j < d_; ++j) in[j] = filled.at(t, j);
                x = tape.constant({1, d_}, std::move(in));
            }
            h = gru_cell(P, "gru", x, h);
            if (spec_.online)
                step_logits.push_back(add_rowvec(matmul(h, P("gru.head.w")), P("gru.head.b")));
        }
        if (spec_.online) {
            std::vector<Tensor> rows;
            rows.reserve(T);
            for (Tensor& l : step_logits) rows.push_back(reshape(l, {classes_}));
            return log_softmax_rows(stack_rows(rows));  // (T, C)
        }
        Tensor logits = reshape(add_rowvec(matmul(h, P("gru.head.w")), P("gru.head.b")), {classes_});
        return log_softmax_vec(logits);
    }

    Tensor loss(Tape& tape, ParamCtx& ctx, const MaskedTimeSeries& s, int label, uint64_t, uint64_t,
                uint64_t) const override {
        Tensor lp = log_probs(tape, ctx, s);
        if (spec_.online) {
            const int T = lp.rows(), C = lp.cols();
            std::vector<double> onehot(static_cast<size_t>(T) * C, 0.0);
            for (int t = 0; t < T; ++t) onehot[static_cast<size_t>(t) * C + label] = 1.0;
            return scale(sum(mul(lp, tape.constant({T, C}, std::move(onehot)))), -1.0 / static_cast<double>(T));
        }
        std::vector<double> onehot(classes_, 0.0);
        onehot[label] = 1.0;
        return neg(sum(mul(lp, tape.constant({classes_}, std::move(onehot)))));
    }

    std::vector<double> predict(const ParamStore& params, const MaskedTimeSeries& s, uint64_t, uint64_t, int,
                                int) const override {
        Tape tape;
        ParamCtx P(tape, params);
        Tensor lp = log_probs(tape, P, s);
        std::vector<double> probs(classes_);
        if (spec_.online) {
            const int T = lp.rows();
            auto v = lp.values();
            for (int c = 0; c < classes_; ++c) probs[c] = std::exp(v[static_cast<size_t>(T - 1) * classes_ + c]);
        } else {
            auto v = lp.values();
            for (int c = 0; c < classes_; ++c) probs[c] = std::exp(v[c]);
        }
        return probs;
    }

private:
    GruSpec spec_;
    int d_;
    int classes_;
    ParamStore store_;
    std::vector<double> feat_mean_;
};

// Trains and evaluates one baseline variant end to end.
inline MetricsReport run_baseline_classifier(GruVariant variant, const Dataset& train_ds, const Dataset& val_ds,
                                             const Dataset& test_ds, const TrainConfig& tc, int hidden = 64) {
    GruSpec spec;
    spec.variant = variant;
    spec.hidden = hidden;
    GruClassifier model(spec, train_ds.feature_dim(), std::max(2, train_ds.num_classes()),
                        observed_feature_means(train_ds), tc.seed);
    TrainState st = train_classifier(model, train_ds, val_ds, tc);
    MetricsReport rep = evaluate_classifier(model, st.best_params, test_ds, 1, 1, tc.seed, tc.threads);
    return rep;
}

}  // namespace tsmiwae
