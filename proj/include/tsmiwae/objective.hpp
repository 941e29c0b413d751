#pragma once

#include <array>
#include <chrono>
#include <map>
#include <string>
#include <vector>

#include "tsmiwae/model.hpp"

namespace tsmiwae {

struct SamplingConfig {
    int k_train = 10;
    int s_train = 1;
    int k_test = 20;
    int s_test = 30;
    double beta = 0.3;

    bool operator==(const SamplingConfig&) const = default;
};

struct AblationFlags {
    bool supervision = true;
    bool mnar = true;
    bool obsdropout = true;

    bool operator==(const AblationFlags&) const = default;
};

// Per-particle importance weight with its full breakdown. The weight is
// always the signed sum of exactly these five components; the generated-cell
// density and the dropout mask probability cancel against the variational
// family and never appear.
struct WeightComponents {
    double log_class = 0.0;  // log p(y | classifier input)
    double log_mask = 0.0;   // log p(s | packed series)
    double log_obs = 0.0;    // log p(x_obs | z)
    double log_prior = 0.0;  // log p(z)
    double log_q = 0.0;      // log q(z | x_obs), subtracted

    static constexpr int kCount = 5;

    double total() const { return log_class + log_mask + log_obs + log_prior - log_q; }
};

struct LogWeights {
    std::vector<double> log_w;
    std::vector<WeightComponents> components;
};

// log mean of exponentiated weights: logsumexp(log_w) - log K.
inline double iwae_bound(const LogWeights& lw) {
    if (lw.log_w.empty()) throw ContractError("iwae_bound: no particles");
    return logsumexp(std::span<const double>(lw.log_w)) - std::log(static_cast<double>(lw.log_w.size()));
}

// ---------------------------------------------------------------------------
// Per-series bound construction
// ---------------------------------------------------------------------------

struct SeriesBound {
    Tensor bound;  // scalar tensor, the K-particle bound for this series
    LogWeights weights;
};

namespace detail {

inline Tensor pick_log_class(const Tensor& log_probs, int label, bool online) {
    if (online) {
        int T = log_probs.rows(), C = log_probs.cols();
        std::vector<double> onehot(static_cast<size_t>(T) * C, 0.0);
        for (int t = 0; t < T; ++t) onehot[static_cast<size_t>(t) * C + label] = 1.0;
        Tensor oh = log_probs.tape()->constant({T, C}, std::move(onehot));
        return scale(sum(mul(log_probs, oh)), 1.0 / static_cast<double>(T));
    }
    int C = static_cast<int>(log_probs.values().size());
    std::vector<double> onehot(C, 0.0);
    onehot[label] = 1.0;
    Tensor oh = log_probs.tape()->constant({C}, std::move(onehot));
    return sum(mul(log_probs, oh));
}

}  // namespace detail

// Builds the K-particle bound for one labeled series on the given tape.
// Distinct noise streams drive the latent/missing draws and the dropout mask
// so ablations share upstream randomness.
inline SeriesBound series_bound(Tape& tape, ParamCtx& P, const ModelHyper& hyper, const MaskedTimeSeries& s,
                                int label, int K, double beta, const AblationFlags& abl,
                                const std::vector<double>& feat_mean, RngStream& noise_rng, RngStream& drop_rng) {
    if (K < 1) throw ContractError("series_bound: K must be >= 1");
    const int T = s.steps(), d = s.features();

    EncoderOutput enc = encoder_forward(P, hyper, tape, s);
    Tensor gram = kernel_gram(P, tape, s.times);
    Mat delta = compute_intervals(s.mask, s.times);

    Tensor mask_c = tape.constant({T, d}, std::vector<double>(s.mask.data));
    std::vector<double> obs(static_cast<size_t>(T) * d, 0.0);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j)
            if (s.mask.at(t, j) != 0.0) obs[static_cast<size_t>(t) * d + j] = s.values.at(t, j);
    Tensor obs_c = tape.constant({T, d}, std::move(obs));

    double eff_beta = abl.obsdropout ? beta : 0.0;

    SeriesBound out;
    std::vector<Tensor> log_w;
    log_w.reserve(K);
    for (int k = 0; k < K; ++k) {
        LatentPath lat = sample_latent(tape, enc, gram, noise_rng);
        DecoderOutput dec = decoder_forward(P, hyper, tape, lat.z);
        Tensor log_obs = sum(mul(gaussian_logpdf_cells(obs_c, dec.mu, dec.sigma), mask_c));
        MissingSample ms = sample_missing(tape, s, dec, noise_rng);

        WeightComponents wc;
        Tensor w = sub(add(log_obs, lat.log_prior), lat.log_q);
        if (abl.mnar) {
            Tensor probs = missing_model_forward(P, ms.packed);
            Tensor log_mask = sum(bernoulli_logpmf_cells(mask_c, probs));
            w = add(w, log_mask);
            wc.log_mask = log_mask.item();
        }
        if (abl.supervision) {
            DropMask drop = obsdropout_mask(s.mask, eff_beta, drop_rng);
            Tensor x_hat = decayed_impute(P, tape, s, ms.generated, drop, delta, feat_mean);
            Tensor log_probs = classifier_forward(P, hyper, tape, x_hat);
            Tensor log_class = detail::pick_log_class(log_probs, label, hyper.online);
            w = add(w, log_class);
            wc.log_class = log_class.item();
        }
        wc.log_obs = log_obs.item();
        wc.log_prior = lat.log_prior.item();
        wc.log_q = lat.log_q.item();
        double wv = w.item();
        if (!std::isfinite(wv)) {
            std::string which = !std::isfinite(wc.log_obs)     ? "log p(x_obs|z)"
                                : !std::isfinite(wc.log_prior) ? "log p(z)"
                                : !std::isfinite(wc.log_q)     ? "log q(z|x_obs)"
                                : !std::isfinite(wc.log_mask)  ? "log p(s|x)"
                                                               : "log p(y|x)";
            throw NumericError("series_bound: non-finite weight component " + which);
        }
        out.weights.log_w.push_back(wv);
        out.weights.components.push_back(wc);
        log_w.push_back(w);
    }
    out.bound = shift(logsumexp(stack(log_w)), -std::log(static_cast<double>(K)));
    return out;
}

// Training loss for one series: the negative bound averaged over s_train
// independent K-particle bounds.
inline Tensor series_loss(Tape& tape, ParamCtx& P, const ModelHyper& hyper, const MaskedTimeSeries& s, int label,
                          const SamplingConfig& sc, const AblationFlags& abl, const std::vector<double>& feat_mean,
                          RngStream& noise_rng, RngStream& drop_rng) {
    std::vector<Tensor> bounds;
    bounds.reserve(sc.s_train);
    for (int rep = 0; rep < sc.s_train; ++rep)
        bounds.push_back(
            series_bound(tape, P, hyper, s, label, sc.k_train, sc.beta, abl, feat_mean, noise_rng, drop_rng).bound);
    Tensor acc = bounds[0];
    for (size_t i = 1; i < bounds.size(); ++i) acc = add(acc, bounds[i]);
    return scale(acc, -1.0 / static_cast<double>(bounds.size()));
}

// ---------------------------------------------------------------------------
// Gradient check: analytic gradients of the bound vs central finite
// differences under common random numbers.
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::map<std::string, double> group_rel_err;       // theta / psi / lambda / phi
    std::map<std::string, double> group_grad_absmax;   // largest |gradient| per group
    double elapsed_s = 0.0;
    long coords = 0;
    bool pass = false;
};

inline std::string param_group(const std::string& name) {
    if (name.rfind("enc.", 0) == 0) return "phi";
    if (name.rfind("mis.", 0) == 0) return "psi";
    if (name.rfind("cls.", 0) == 0) return "lambda";
    return "theta";  // dec.* and prior.*
}

// Runs on a fixed built-in instance (T=8, d=3, z=4, K=3). All stochastic
// draws re-derive from the same seed for every evaluation, so the perturbed
// losses see identical noise. Relative error uses a 1e-4 denominator floor:
// coordinates whose gradient is below that are compared absolutely at
// tol * 1e-4, which is still far above the finite-difference rounding floor
// for this instance's loss magnitude.
inline GradCheckReport gradient_check(const AblationFlags& abl, uint64_t seed = 0, double tol = 1e-4,
                                      double fd_step = 1e-5) {
    auto t0 = std::chrono::steady_clock::now();

    ModelHyper hyper;
    hyper.feature_dim = 3;
    hyper.classes = 2;
    hyper.z_dim = 4;
    hyper.hidden = 8;
    hyper.conv_channels = 6;
    hyper.heads = 2;
    hyper.mis_hidden = 8;
    ModelParams model = make_model(hyper, seed);

    SyntheticConfig dcfg;
    dcfg.n = 1;
    dcfg.steps = 8;
    dcfg.features = 3;
    dcfg.classes = 2;
    dcfg.mech.mechanism = Mechanism::MNAR;
    dcfg.mech.base_rate = 0.4;
    dcfg.seed = seed + 1;
    Dataset data = standardize(generate_synthetic(dcfg).data);
    const MaskedTimeSeries& s = data.series[0];
    std::vector<double> feat_mean(hyper.feature_dim, 0.0);

    SamplingConfig sc;
    sc.k_train = 3;
    sc.s_train = 1;
    sc.beta = 0.3;

    auto make_loss = [&](Tape& tp, ParamCtx& ctx) {
        RngStream noise = derive_stream(seed, "gradcheck/noise");
        RngStream drop = derive_stream(seed, "gradcheck/drop");
        return series_loss(tp, ctx, hyper, s, *s.label, sc, abl, feat_mean, noise, drop);
    };
    GradMap grads;
    {
        Tape tape;
        ParamCtx ctx(tape, model.store);
        Tensor loss = make_loss(tape, ctx);
        tape.backward(loss);
        grads = ctx.grads();
    }
    auto eval_plain = [&]() {
        Tape tape;
        ParamCtx ctx(tape, model.store);
        return make_loss(tape, ctx).item();
    };

    GradCheckReport rep;
    for (const char* g : {"theta", "psi", "lambda", "phi"}) {
        rep.group_rel_err[g] = 0.0;
        rep.group_grad_absmax[g] = 0.0;
    }
    for (auto& [name, var] : model.store.vars) {
        const std::string group = param_group(name);
        const std::vector<double>& g = grads.at(name);
        for (size_t i = 0; i < var.value.size(); ++i) {
            rep.group_grad_absmax[group] = std::max(rep.group_grad_absmax[group], std::abs(g[i]));
            double orig = var.value[i];
            var.value[i] = orig + fd_step;
            double fp = eval_plain();
            var.value[i] = orig - fd_step;
            double fm = eval_plain();
            var.value[i] = orig;
            double fd = (fp - fm) / (2.0 * fd_step);
            double err = std::abs(g[i] - fd) / std::max({1e-4, std::abs(g[i]), std::abs(fd)});
            rep.group_rel_err[group] = std::max(rep.group_rel_err[group], err);
            rep.max_rel_err = std::max(rep.max_rel_err, err);
            rep.coords += 1;
        }
    }
    rep.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

}  // namespace tsmiwae
