#pragma once

#include <vector>

#include "tsmiwae/metrics.hpp"
#include "tsmiwae/objective.hpp"

namespace tsmiwae {

struct SnisDiagnostics {
    // per outer sample: sum of normalized particle weights (must be 1) and
    // the effective sample size of the raw weights
    std::vector<double> weight_sums;
    std::vector<double> effective_samples;
};

// Self-normalized importance sampling over the variational draws:
//   p(y | x_obs) ~= (1/S) sum_s sum_k wbar_k^(s) p(y | x_hat_k^(s))
// with wbar the per-outer-sample normalization of the marginal weights
// p(x_obs | z) p(z) / q(z | x_obs). The class likelihood multiplies the
// normalized weight; it does not enter the normalizer.
inline std::vector<double> snis_predict(const ModelHyper& hyper, const ParamStore& params,
                                        const MaskedTimeSeries& s, const SamplingConfig& sc, double beta,
                                        const std::vector<double>& feat_mean, uint64_t seed, uint64_t key,
                                        SnisDiagnostics* diag = nullptr) {
    if (sc.k_test < 1 || sc.s_test < 1) throw ContractError("snis_predict: particle counts must be >= 1");
    const int T = s.steps(), d = s.features(), C = hyper.classes;

    Tape tape;
    ParamCtx P(tape, params);
    EncoderOutput enc = encoder_forward(P, hyper, tape, s);
    Tensor gram = kernel_gram(P, tape, s.times);
    Mat delta = compute_intervals(s.mask, s.times);

    Tensor mask_c = tape.constant({T, d}, std::vector<double>(s.mask.data));
    std::vector<double> obs(static_cast<size_t>(T) * d, 0.0);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j)
            if (s.mask.at(t, j) != 0.0) obs[static_cast<size_t>(t) * d + j] = s.values.at(t, j);
    Tensor obs_c = tape.constant({T, d}, std::move(obs));

    RngStream noise = derive_stream(seed, "eval/noise", key);
    RngStream drop = derive_stream(seed, "eval/drop", key);

    std::vector<double> out(C, 0.0);
    for (int rep = 0; rep < sc.s_test; ++rep) {
        std::vector<double> log_w(sc.k_test);
        std::vector<std::vector<double>> cls_probs(sc.k_test);
        for (int k = 0; k < sc.k_test; ++k) {
            LatentPath lat = sample_latent(tape, enc, gram, noise);
            DecoderOutput dec = decoder_forward(P, hyper, tape, lat.z);
            Tensor log_obs = sum(mul(gaussian_logpdf_cells(obs_c, dec.mu, dec.sigma), mask_c));
            log_w[k] = log_obs.item() + lat.log_prior.item() - lat.log_q.item();

            MissingSample ms = sample_missing(tape, s, dec, noise);
            DropMask dm = obsdropout_mask(s.mask, beta, drop);
            Tensor x_hat = decayed_impute(P, tape, s, ms.generated, dm, delta, feat_mean);
            Tensor log_probs = classifier_forward(P, hyper, tape, x_hat);
            std::vector<double> probs(C);
            if (hyper.online) {
                // series-level read-out: the final step's distribution
                auto v = log_probs.values();
                for (int c = 0; c < C; ++c) probs[c] = std::exp(v[static_cast<size_t>(T - 1) * C + c]);
            } else {
                auto v = log_probs.values();
                for (int c = 0; c < C; ++c) probs[c] = std::exp(v[c]);
            }
            cls_probs[k] = std::move(probs);
        }
        double mx = *std::max_element(log_w.begin(), log_w.end());
        if (mx == -std::numeric_limits<double>::infinity())
            throw NumericError("snis_predict: all importance weights vanished (degenerate posterior)");
        double z = 0.0;
        for (double lw : log_w) z += std::exp(lw - mx);
        double wsum = 0.0, ess_den = 0.0;
        for (int k = 0; k < sc.k_test; ++k) {
            double wbar = std::exp(log_w[k] - mx) / z;
            wsum += wbar;
            ess_den += wbar * wbar;
            for (int c = 0; c < C; ++c) out[c] += wbar * cls_probs[k][c];
        }
        if (diag) {
            diag->weight_sums.push_back(wsum);
            diag->effective_samples.push_back(1.0 / ess_den);
        }
    }
    for (double& p : out) p /= static_cast<double>(sc.s_test);
    return out;
}

// ---------------------------------------------------------------------------
// Multiple imputation
// ---------------------------------------------------------------------------

struct ImputationResult {
    Mat mean;                // full grid; observed cells carry their values
    Mat stdev;               // observed cells have exactly zero deviation
    std::vector<Mat> draws;  // the raw sampled complete series
};

// M posterior draws; the point estimate is the SNIS-weighted decoder mean at
// missing cells, the deviation combines decoder variance with the spread of
// the decoder means across particles.
inline ImputationResult impute(const ModelHyper& hyper, const ParamStore& params, const MaskedTimeSeries& s,
                               int draws, uint64_t seed, uint64_t key) {
    if (draws < 1) throw ContractError("impute: draw count must be >= 1");
    const int T = s.steps(), d = s.features();

    Tape tape;
    ParamCtx P(tape, params);
    EncoderOutput enc = encoder_forward(P, hyper, tape, s);
    Tensor gram = kernel_gram(P, tape, s.times);
    Tensor mask_c = tape.constant({T, d}, std::vector<double>(s.mask.data));
    std::vector<double> obs(static_cast<size_t>(T) * d, 0.0);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j)
            if (s.mask.at(t, j) != 0.0) obs[static_cast<size_t>(t) * d + j] = s.values.at(t, j);
    Tensor obs_c = tape.constant({T, d}, std::move(obs));

    RngStream noise = derive_stream(seed, "impute/noise", key);

    std::vector<double> log_w(draws);
    std::vector<std::vector<double>> mus(draws), sigmas(draws);
    ImputationResult res;
    res.draws.reserve(draws);
    for (int m = 0; m < draws; ++m) {
        LatentPath lat = sample_latent(tape, enc, gram, noise);
        DecoderOutput dec = decoder_forward(P, hyper, tape, lat.z);
        Tensor log_obs = sum(mul(gaussian_logpdf_cells(obs_c, dec.mu, dec.sigma), mask_c));
        log_w[m] = log_obs.item() + lat.log_prior.item() - lat.log_q.item();
        mus[m].assign(dec.mu.values().begin(), dec.mu.values().end());
        sigmas[m].assign(dec.sigma.values().begin(), dec.sigma.values().end());
        MissingSample ms = sample_missing(tape, s, dec, noise);
        Mat draw(T, d);
        auto pv = ms.packed.values();
        std::copy(pv.begin(), pv.end(), draw.data.begin());
        res.draws.push_back(std::move(draw));
    }
    double mx = *std::max_element(log_w.begin(), log_w.end());
    double z = 0.0;
    for (double lw : log_w) z += std::exp(lw - mx);
    std::vector<double> wbar(draws);
    for (int m = 0; m < draws; ++m) wbar[m] = std::exp(log_w[m] - mx) / z;

    res.mean = Mat(T, d);
    res.stdev = Mat(T, d);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j) {
            size_t idx = static_cast<size_t>(t) * d + j;
            if (s.mask.at(t, j) != 0.0) {
                res.mean.at(t, j) = s.values.at(t, j);
                continue;
            }
            double m1 = 0.0, m2 = 0.0;
            for (int m = 0; m < draws; ++m) {
                m1 += wbar[m] * mus[m][idx];
                m2 += wbar[m] * (sigmas[m][idx] * sigmas[m][idx] + mus[m][idx] * mus[m][idx]);
            }
            res.mean.at(t, j) = m1;
            res.stdev.at(t, j) = std::sqrt(std::max(0.0, m2 - m1 * m1));
        }
    return res;
}

// ---------------------------------------------------------------------------
// Imputation scoring
// ---------------------------------------------------------------------------

struct ImputationScore {
    double mae = 0.0;
    double mre = 0.0;
    size_t cells = 0;
};

// MAE and MRE over the held-out cells of a dataset, given complete imputed
// value grids aligned with the holdout.
inline ImputationScore evaluate_imputation_values(const std::vector<Mat>& imputed, const HoldoutMask& holdout) {
    if (imputed.size() != holdout.hidden.size()) throw ContractError("evaluate_imputation: series count mismatch");
    double abs_err = 0.0, abs_truth = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < imputed.size(); ++i)
        for (int t = 0; t < holdout.hidden[i].rows; ++t)
            for (int j = 0; j < holdout.hidden[i].cols; ++j)
                if (holdout.hidden[i].at(t, j) != 0.0) {
                    double truth = holdout.truth[i].at(t, j);
                    abs_err += std::abs(imputed[i].at(t, j) - truth);
                    abs_truth += std::abs(truth);
                    ++n;
                }
    if (n == 0) throw ContractError("evaluate_imputation: empty holdout");
    ImputationScore sc;
    sc.cells = n;
    sc.mae = abs_err / static_cast<double>(n);
    if (abs_truth == 0.0) throw UndefinedMetricError("evaluate_imputation: MRE undefined, zero total magnitude");
    sc.mre = abs_err / abs_truth;
    return sc;
}

inline ImputationScore evaluate_imputation(const std::vector<ImputationResult>& results, const HoldoutMask& holdout) {
    std::vector<Mat> means;
    means.reserve(results.size());
    for (const auto& r : results) means.push_back(r.mean);
    return evaluate_imputation_values(means, holdout);
}

}  // namespace tsmiwae
