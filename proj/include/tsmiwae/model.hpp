#pragma once

#include <string>
#include <vector>

#include "tsmiwae/baselines.hpp"
#include "tsmiwae/data.hpp"
#include "tsmiwae/ops.hpp"
#include "tsmiwae/params.hpp"

namespace tsmiwae {

// ---------------------------------------------------------------------------
// Kernel / latent prior
// ---------------------------------------------------------------------------

struct KernelConfig {
    double length_scale = 0.2;  // in normalized time units
    double variance = 1.0;

    bool valid() const { return length_scale > 0.0 && variance > 0.0; }
};

// Cauchy kernel gram: K_ij = var / (1 + (t_i - t_j)^2 / len^2)
inline Mat build_gram(const std::vector<double>& times, const KernelConfig& kc) {
    if (!kc.valid()) throw ContractError("build_gram: kernel parameters must be positive");
    int T = static_cast<int>(times.size());
    Mat k(T, T);
    for (int i = 0; i < T; ++i)
        for (int j = 0; j < T; ++j) {
            double dt = times[i] - times[j];
            k.at(i, j) = kc.variance / (1.0 + dt * dt / (kc.length_scale * kc.length_scale));
        }
    return k;
}

// Sum over latent dimensions of zero-mean MVN log densities sharing one gram.
inline Tensor gp_prior_logpdf(const Tensor& z, const Tensor& gram) { return gp_logpdf_shared_gram(z, gram); }

inline double gp_prior_logpdf(const Mat& z, const Mat& gram) {
    double lp = 0.0;
    std::vector<double> col(z.rows);
    for (int j = 0; j < z.cols; ++j) {
        for (int t = 0; t < z.rows; ++t) col[t] = z.at(t, j);
        lp += mvn_logpdf_chol(col, gram);
    }
    return lp;
}

// ---------------------------------------------------------------------------
// Hyperparameters and parameter initialization
// ---------------------------------------------------------------------------

struct ModelHyper {
    int feature_dim = 0;
    int classes = 2;
    int z_dim = 32;
    int hidden = 128;
    int conv_channels = 64;
    int conv_width = 3;
    int heads = 4;
    int enc_blocks = 2;
    int dec_blocks = 2;
    int cls_blocks = 1;
    int mis_hidden = 64;
    double kernel_len_init = 0.2;
    double kernel_var_init = 1.0;
    bool online = false;

    bool operator==(const ModelHyper&) const = default;
};

namespace detail {

inline void init_transformer_block(ParamStore& s, const std::string& p, int hidden, uint64_t seed) {
    init_xavier(s, p + ".attn.wq", {hidden, hidden}, hidden, hidden, seed);
    init_xavier(s, p + ".attn.wk", {hidden, hidden}, hidden, hidden, seed);
    init_xavier(s, p + ".attn.wv", {hidden, hidden}, hidden, hidden, seed);
    init_xavier(s, p + ".attn.wo", {hidden, hidden}, hidden, hidden, seed);
    init_const(s, p + ".ln1.g", {hidden}, 1.0);
    init_zeros(s, p + ".ln1.b", {hidden});
    init_xavier(s, p + ".ff.w1", {hidden, hidden}, hidden, hidden, seed);
    init_zeros(s, p + ".ff.b1", {hidden});
    init_xavier(s, p + ".ff.w2", {hidden, hidden}, hidden, hidden, seed);
    init_zeros(s, p + ".ff.b2", {hidden});
    init_const(s, p + ".ln2.g", {hidden}, 1.0);
    init_zeros(s, p + ".ln2.b", {hidden});
}

}  // namespace detail

// Canonical parameter groups:
//   enc.*            encoder (variational)
//   dec.* + prior.*  generative decoder and latent prior kernel
//   mis.*            missing model
//   cls.*            classifier, including its input decay
inline ParamStore init_model_params(const ModelHyper& h, uint64_t seed) {
    if (h.hidden % h.heads != 0) throw ContractError("init_model_params: hidden must be divisible by heads");
    ParamStore s;
    int d = h.feature_dim;

    // encoder: zero-imputed values + mask indicators -> conv -> transformer -> heads
    init_xavier(s, "enc.conv.w", {h.conv_channels * 2 * d * h.conv_width}, 2 * d * h.conv_width, h.conv_channels, seed);
    init_zeros(s, "enc.conv.b", {h.conv_channels});
    init_xavier(s, "enc.proj.w", {h.conv_channels, h.hidden}, h.conv_channels, h.hidden, seed);
    init_zeros(s, "enc.proj.b", {h.hidden});
    for (int b = 0; b < h.enc_blocks; ++b)
        detail::init_transformer_block(s, "enc.blk" + std::to_string(b), h.hidden, seed);
    init_xavier(s, "enc.head.w1", {h.hidden, h.hidden}, h.hidden, h.hidden, seed);
    init_zeros(s, "enc.head.b1", {h.hidden});
    init_xavier(s, "enc.head.wmu", {h.hidden, h.z_dim}, h.hidden, h.z_dim, seed);
    init_zeros(s, "enc.head.bmu", {h.z_dim});
    init_xavier(s, "enc.head.wsig", {h.hidden, h.z_dim}, h.hidden, h.z_dim, seed);
    init_zeros(s, "enc.head.bsig", {h.z_dim});

    // decoder: latent path -> transformer -> per-feature mean and std
    init_xavier(s, "dec.proj.w", {h.z_dim, h.hidden}, h.z_dim, h.hidden, seed);
    init_zeros(s, "dec.proj.b", {h.hidden});
    for (int b = 0; b < h.dec_blocks; ++b)
        detail::init_transformer_block(s, "dec.blk" + std::to_string(b), h.hidden, seed);
    init_xavier(s, "dec.head.w1", {h.hidden, h.hidden}, h.hidden, h.hidden, seed);
    init_zeros(s, "dec.head.b1", {h.hidden});
    init_xavier(s, "dec.head.wmu", {h.hidden, d}, h.hidden, d, seed);
    init_zeros(s, "dec.head.bmu", {d});
    init_xavier(s, "dec.head.wsig", {h.hidden, d}, h.hidden, d, seed);
    init_zeros(s, "dec.head.bsig", {d});

    // prior kernel, raw values under softplus + floor
    init_const(s, "prior.len_raw", {1}, inv_softplus(h.kernel_len_init - kSigmaFloor));
    init_const(s, "prior.var_raw", {1}, inv_softplus(h.kernel_var_init - kSigmaFloor));

    // missing model: pointwise two-layer MLP
    init_xavier(s, "mis.w1", {d, h.mis_hidden}, d, h.mis_hidden, seed);
    init_zeros(s, "mis.b1", {h.mis_hidden});
    init_xavier(s, "mis.w2", {h.mis_hidden, d}, h.mis_hidden, d, seed);
    init_zeros(s, "mis.b2", {d});

    // classifier: conv -> transformer -> linear head, plus its input decay
    init_xavier(s, "cls.conv.w", {h.conv_channels * d * h.conv_width}, d * h.conv_width, h.conv_channels, seed);
    init_zeros(s, "cls.conv.b", {h.conv_channels});
    init_xavier(s, "cls.proj.w", {h.conv_channels, h.hidden}, h.conv_channels, h.hidden, seed);
    init_zeros(s, "cls.proj.b", {h.hidden});
    for (int b = 0; b < h.cls_blocks; ++b)
        detail::init_transformer_block(s, "cls.blk" + std::to_string(b), h.hidden, seed);
    init_xavier(s, "cls.head.w", {h.hidden, h.classes}, h.hidden, h.classes, seed);
    init_zeros(s, "cls.head.b", {h.classes});
    // decay starts just inside the active region of max(0, .); starting on
    // the kink itself would freeze these parameters at zero gradient
    init_zeros(s, "cls.decay.w", {d});
    init_const(s, "cls.decay.b", {d}, 0.01);
    return s;
}

// Trained model state: architecture, parameters, and the feature scaling the
// parameters were trained under.
struct ModelParams {
    ModelHyper hyper;
    ParamStore store;
    std::vector<std::string> feature_names;
    std::vector<double> feat_mean;  // original-space statistics of the train split
    std::vector<double> feat_std;

    bool operator==(const ModelParams&) const = default;
};

inline ModelParams make_model(const ModelHyper& h, uint64_t seed) {
    ModelParams m;
    m.hyper = h;
    m.store = init_model_params(h, seed);
    return m;
}

// ---------------------------------------------------------------------------
// Shared network pieces
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor positional_encoding(Tape& tape, int T, int width) {
    std::vector<double> pe(static_cast<size_t>(T) * width);
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < width; ++c) {
            double rate = std::pow(10000.0, -2.0 * (c / 2) / static_cast<double>(width));
            pe[static_cast<size_t>(t) * width + c] = (c % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
        }
    return tape.constant({T, width}, std::move(pe));
}

// Post-norm block: LN(x + MHA(x)) then LN(h + FF(h)), causal attention.
inline Tensor transformer_block(ParamCtx& P, const std::string& p, const Tensor& x, int heads) {
    int hidden = x.cols();
    int hd = hidden / heads;
    Tensor q = matmul(x, P(p + ".attn.wq"));
    Tensor k = matmul(x, P(p + ".attn.wk"));
    Tensor v = matmul(x, P(p + ".attn.wv"));
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (int hh = 0; hh < heads; ++hh)
        head_outs.push_back(causal_attention(cols(q, hh * hd, (hh + 1) * hd), cols(k, hh * hd, (hh + 1) * hd),
                                             cols(v, hh * hd, (hh + 1) * hd)));
    Tensor att = matmul(concat_cols(head_outs), P(p + ".attn.wo"));
    Tensor h1 = layer_norm_rows(add(x, att), P(p + ".ln1.g"), P(p + ".ln1.b"));
    Tensor ff = add_rowvec(matmul(tanh(add_rowvec(matmul(h1, P(p + ".ff.w1")), P(p + ".ff.b1"))), P(p + ".ff.w2")),
                           P(p + ".ff.b2"));
    return layer_norm_rows(add(h1, ff), P(p + ".ln2.g"), P(p + ".ln2.b"));
}

// (mu, sigma) head shared by encoder and decoder.
struct MuSigma {
    Tensor mu;
    Tensor sigma;
};

inline MuSigma mu_sigma_head(ParamCtx& P, const std::string& p, const Tensor& h) {
    Tensor t1 = tanh(add_rowvec(matmul(h, P(p + ".w1")), P(p + ".b1")));
    Tensor mu = add_rowvec(matmul(t1, P(p + ".wmu")), P(p + ".bmu"));
    Tensor sigma = softplus_floor(add_rowvec(matmul(t1, P(p + ".wsig")), P(p + ".bsig")));
    return {mu, sigma};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model components
// ---------------------------------------------------------------------------

// Gram matrix as a differentiable function of the prior kernel parameters.
inline Tensor kernel_gram(ParamCtx& P, Tape& tape, const std::vector<double>& times) {
    int T = static_cast<int>(times.size());
    Tensor len = softplus_floor(P("prior.len_raw"));
    Tensor var = softplus_floor(P("prior.var_raw"));
    std::vector<double> d2(static_cast<size_t>(T) * T);
    for (int i = 0; i < T; ++i)
        for (int j = 0; j < T; ++j) {
            double dt = times[i] - times[j];
            d2[static_cast<size_t>(i) * T + j] = dt * dt;
        }
    Tensor dist2 = tape.constant({T, T}, std::move(d2));
    Tensor denom = shift(div(dist2, expand(mul(len, len), {T, T})), 1.0);
    return div(expand(var, {T, T}), denom);
}

struct EncoderOutput {
    Tensor mu;     // (T, z)
    Tensor sigma;  // (T, z), strictly positive
};

// Encoder input: zero-imputed values with the mask indicators appended,
// width 2d.
inline std::vector<double> encoder_input(const MaskedTimeSeries& s) {
    int T = s.steps(), d = s.features();
    std::vector<double> in(static_cast<size_t>(T) * 2 * d);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j) {
            double obs = s.mask.at(t, j);
            in[static_cast<size_t>(t) * 2 * d + j] = obs != 0.0 ? s.values.at(t, j) : 0.0;
            in[static_cast<size_t>(t) * 2 * d + d + j] = obs;
        }
    return in;
}

// Zero-impute, append the mask indicators, causal conv, causal transformer,
// then the (mu, sigma) head. Row t depends only on observations at <= t.
inline EncoderOutput encoder_forward(ParamCtx& P, const ModelHyper& h, Tape& tape, const MaskedTimeSeries& s) {
    int T = s.steps(), d = s.features();
    Tensor x = tape.constant({T, 2 * d}, encoder_input(s));
    Tensor r = tanh(conv1d_time(x, P("enc.conv.w"), P("enc.conv.b"), h.conv_channels, h.conv_width, true));
    Tensor proj = add(add_rowvec(matmul(r, P("enc.proj.w")), P("enc.proj.b")),
                      detail::positional_encoding(tape, T, h.hidden));
    for (int b = 0; b < h.enc_blocks; ++b) proj = detail::transformer_block(P, "enc.blk" + std::to_string(b), proj, h.heads);
    auto ms = detail::mu_sigma_head(P, "enc.head", proj);
    return {ms.mu, ms.sigma};
}

struct DecoderOutput {
    Tensor mu;     // (T, d)
    Tensor sigma;  // (T, d), strictly positive
};

// Causal transformer over the latent path; one shared decoder emits the
// parameters for observed and missing cells alike.
inline DecoderOutput decoder_forward(ParamCtx& P, const ModelHyper& h, Tape& tape, const Tensor& z) {
    int T = z.rows();
    Tensor proj = add(add_rowvec(matmul(z, P("dec.proj.w")), P("dec.proj.b")),
                      detail::positional_encoding(tape, T, h.hidden));
    for (int b = 0; b < h.dec_blocks; ++b) proj = detail::transformer_block(P, "dec.blk" + std::to_string(b), proj, h.heads);
    auto ms = detail::mu_sigma_head(P, "dec.head", proj);
    return {ms.mu, ms.sigma};
}

// Pointwise per-step MLP producing per-cell observation probabilities.
inline Tensor missing_model_forward(ParamCtx& P, const Tensor& x_complete) {
    Tensor h1 = tanh(add_rowvec(matmul(x_complete, P("mis.w1")), P("mis.b1")));
    Tensor logits = add_rowvec(matmul(h1, P("mis.w2")), P("mis.b2"));
    return clamp(sigmoid(logits), kProbEps, 1.0 - kProbEps);
}

// Classifier over a complete (T, d) input. Sequence mode reads the final
// step; online mode emits per-step log probabilities and keeps the conv
// causal so nothing leaks backward in time.
inline Tensor classifier_forward(ParamCtx& P, const ModelHyper& h, Tape& tape, const Tensor& x_hat) {
    int T = x_hat.rows();
    Tensor r = tanh(conv1d_time(x_hat, P("cls.conv.w"), P("cls.conv.b"), h.conv_channels, h.conv_width, h.online));
    Tensor proj = add(add_rowvec(matmul(r, P("cls.proj.w")), P("cls.proj.b")),
                      detail::positional_encoding(tape, T, h.hidden));
    for (int b = 0; b < h.cls_blocks; ++b) proj = detail::transformer_block(P, "cls.blk" + std::to_string(b), proj, h.heads);
    if (h.online) {
        Tensor logits = add_rowvec(matmul(proj, P("cls.head.w")), P("cls.head.b"));
        return log_softmax_rows(logits);  // (T, C)
    }
    Tensor last = reshape(row(proj, T - 1), {1, h.hidden});
    Tensor logits = reshape(add_rowvec(matmul(last, P("cls.head.w")), P("cls.head.b")), {h.classes});
    return log_softmax_vec(logits);  // (C)
}

// ---------------------------------------------------------------------------
// Sampling and the classifier input construction
// ---------------------------------------------------------------------------

struct LatentPath {
    Tensor z;          // (T, z)
    Tensor log_q;      // scalar, log q(z | x_obs)
    Tensor log_prior;  // scalar, log p(z)
};

// Reparameterized draw z = mu + sigma * eps with eps from `rng`; fills both
// log densities. Pass eps_override for deterministic tests.
inline LatentPath sample_latent(Tape& tape, const EncoderOutput& enc, const Tensor& gram, RngStream& rng,
                                const std::vector<double>* eps_override = nullptr) {
    int T = enc.mu.rows(), zd = enc.mu.cols();
    std::vector<double> eps(static_cast<size_t>(T) * zd);
    if (eps_override) {
        if (eps_override->size() != eps.size()) throw ContractError("sample_latent: bad eps override size");
        eps = *eps_override;
    } else {
        for (double& e : eps) e = rng.normal();
    }
    Tensor eps_t = tape.constant({T, zd}, std::move(eps));
    LatentPath lp;
    lp.z = add(enc.mu, mul(enc.sigma, eps_t));
    lp.log_q = sum(gaussian_logpdf_cells(lp.z, enc.mu, enc.sigma));
    lp.log_prior = gp_prior_logpdf(lp.z, gram);
    return lp;
}

struct MissingSample {
    Tensor generated;  // (T, d) decoder draw at every cell
    Tensor packed;     // observed values where observed, generated elsewhere
};

// Draws x from the decoder everywhere, then packs: observed cells keep their
// observed values bit-exactly.
inline MissingSample sample_missing(Tape& tape, const MaskedTimeSeries& s, const DecoderOutput& dec, RngStream& rng,
                                    const std::vector<double>* eps_override = nullptr) {
    int T = s.steps(), d = s.features();
    std::vector<double> eps(static_cast<size_t>(T) * d);
    if (eps_override) {
        if (eps_override->size() != eps.size()) throw ContractError("sample_missing: bad eps override size");
        eps = *eps_override;
    } else {
        for (double& e : eps) e = rng.normal();
    }
    Tensor eps_t = tape.constant({T, d}, std::move(eps));
    MissingSample ms;
    ms.generated = add(dec.mu, mul(dec.sigma, eps_t));
    Tensor mask = tape.constant({T, d}, std::vector<double>(s.mask.data));
    std::vector<double> obs(static_cast<size_t>(T) * d, 0.0);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j)
            if (s.mask.at(t, j) != 0.0) obs[static_cast<size_t>(t) * d + j] = s.values.at(t, j);
    Tensor obs_t = tape.constant({T, d}, std::move(obs));
    Tensor inv_mask = shift(scale(mask, -1.0), 1.0);
    ms.packed = add(obs_t, mul(inv_mask, ms.generated));
    return ms;
}

struct DropMask {
    Mat m;  // 1 = keep
    double beta = 0.0;
};

// Training-time deletion of observed inputs: m ~ Bern(1 - beta) i.i.d. per
// cell. beta = 0 produces all-ones without consuming any randomness, so the
// dropout-free code path is bit-identical.
inline DropMask obsdropout_mask(const Mat& observed_mask, double beta, RngStream& rng) {
    if (!(beta >= 0.0 && beta < 1.0)) throw ContractError("obsdropout_mask: beta must be in [0, 1)");
    DropMask dm;
    dm.beta = beta;
    dm.m = Mat(observed_mask.rows, observed_mask.cols, 1.0);
    if (beta > 0.0)
        for (double& v : dm.m.data) v = rng.bernoulli(1.0 - beta) ? 1.0 : 0.0;
    return dm;
}

// Classifier input: observed-and-kept cells pass through; everything else is
// a decay mixture of the last real observation and the generated value.
// The decay gamma = exp(-max(0, w * delta + b)) uses the classifier's own
// parameters and the pre-dropout staleness intervals.
inline Tensor decayed_impute(ParamCtx& P, Tape& tape, const MaskedTimeSeries& s, const Tensor& generated,
                             const DropMask& drop, const Mat& delta, const std::vector<double>& feat_mean) {
    int T = s.steps(), d = s.features();
    Tensor delta_t = tape.constant({T, d}, std::vector<double>(delta.data));
    Tensor gamma = decay_gamma(add_rowvec(mul_rowvec(delta_t, P("cls.decay.w")), P("cls.decay.b")));

    std::vector<double> u(static_cast<size_t>(T) * d), ux(static_cast<size_t>(T) * d, 0.0);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j) {
            double keep = s.mask.at(t, j) * drop.m.at(t, j);
            u[static_cast<size_t>(t) * d + j] = keep;
            if (keep != 0.0) ux[static_cast<size_t>(t) * d + j] = s.values.at(t, j);
        }
    Mat xlast = last_observed(s, feat_mean);
    Tensor u_t = tape.constant({T, d}, std::move(u));
    Tensor ux_t = tape.constant({T, d}, std::move(ux));
    Tensor xlast_t = tape.constant({T, d}, std::vector<double>(xlast.data));
    Tensor inv_u = shift(scale(u_t, -1.0), 1.0);
    Tensor inv_gamma = shift(scale(gamma, -1.0), 1.0);
    Tensor mixture = add(mul(gamma, xlast_t), mul(inv_gamma, generated));
    return add(ux_t, mul(inv_u, mixture));
}

}  // namespace tsmiwae
