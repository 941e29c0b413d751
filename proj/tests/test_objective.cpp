#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "tsmiwae/classifiers.hpp"

using namespace tsmiwae;

namespace {

ModelHyper tiny_hyper(int d = 3, int classes = 2) {
    ModelHyper h;
    h.feature_dim = d;
    h.classes = classes;
    h.z_dim = 4;
    h.hidden = 8;
    h.conv_channels = 6;
    h.heads = 2;
    h.mis_hidden = 8;
    return h;
}

Dataset tiny_dataset(int n, uint64_t seed, double rate = 0.4, Mechanism mech = Mechanism::MNAR) {
    SyntheticConfig cfg;
    cfg.n = n;
    cfg.steps = 10;
    cfg.features = 3;
    cfg.classes = 2;
    cfg.mech.mechanism = mech;
    cfg.mech.base_rate = rate;
    cfg.seed = seed;
    return standardize(generate_synthetic(cfg).data);
}

GradMap analytic_grads(const ModelParams& m, const MaskedTimeSeries& s, const SamplingConfig& sc,
                       const AblationFlags& abl, uint64_t seed) {
    Tape tape;
    ParamCtx P(tape, m.store);
    RngStream noise = derive_stream(seed, "n");
    RngStream drop = derive_stream(seed, "d");
    std::vector<double> fm(m.hyper.feature_dim, 0.0);
    Tensor loss = series_loss(tape, P, m.hyper, s, *s.label, sc, abl, fm, noise, drop);
    tape.backward(loss);
    return P.grads();
}

}  // namespace

static_assert(WeightComponents::kCount == 5, "the importance weight has exactly five components");

TEST_CASE("log weight breakdown") {
    ModelHyper h = tiny_hyper();
    ModelParams m = make_model(h, 3);
    Dataset ds = tiny_dataset(4, 11);
    std::vector<double> fm(3, 0.0);
    SamplingConfig sc;
    sc.k_train = 4;
    AblationFlags abl;

    SUBCASE("weights are the signed sum of their components") {
        for (const auto& s : ds.series) {
            Tape tape;
            ParamCtx P(tape, m.store);
            RngStream noise = derive_stream(1, "n"), drop = derive_stream(1, "d");
            SeriesBound sb = series_bound(tape, P, h, s, *s.label, sc.k_train, 0.3, abl, fm, noise, drop);
            REQUIRE(sb.weights.log_w.size() == 4);
            for (size_t k = 0; k < sb.weights.log_w.size(); ++k) {
                const WeightComponents& c = sb.weights.components[k];
                CHECK(std::abs(sb.weights.log_w[k] - c.total()) < 1e-9);
                CHECK(std::isfinite(sb.weights.log_w[k]));
            }
        }
    }

    SUBCASE("without the missing model, the mask term is identically zero") {
        AblationFlags no_mnar;
        no_mnar.mnar = false;
        Tape tape;
        ParamCtx P(tape, m.store);
        RngStream noise = derive_stream(1, "n"), drop = derive_stream(1, "d");
        SeriesBound sb = series_bound(tape, P, h, ds.series[0], 1, 3, 0.3, no_mnar, fm, noise, drop);
        for (const auto& c : sb.weights.components) CHECK(c.log_mask == 0.0);
    }

    SUBCASE("without supervision and mnar, three components remain") {
        AblationFlags miwae;
        miwae.mnar = false;
        miwae.supervision = false;
        Tape tape;
        ParamCtx P(tape, m.store);
        RngStream noise = derive_stream(1, "n"), drop = derive_stream(1, "d");
        SeriesBound sb = series_bound(tape, P, h, ds.series[0], 1, 3, 0.3, miwae, fm, noise, drop);
        for (size_t k = 0; k < sb.weights.components.size(); ++k) {
            const WeightComponents& c = sb.weights.components[k];
            CHECK(c.log_mask == 0.0);
            CHECK(c.log_class == 0.0);
            CHECK(c.log_obs != 0.0);
            CHECK(std::abs(sb.weights.log_w[k] - (c.log_obs + c.log_prior - c.log_q)) < 1e-9);
        }
    }
}

TEST_CASE("one-step one-feature hand oracle") {
    // T = 1, d = 1: every density in the weight is a scalar formula the test
    // evaluates independently from the model's forward outputs.
    ModelHyper h = tiny_hyper(1);
    ModelParams m = make_model(h, 7);
    std::vector<double> fm{0.0};

    MaskedTimeSeries s;
    s.id = "h";
    s.times = {0.0};
    s.values = Mat(1, 1);
    s.mask = Mat(1, 1, 1.0);
    s.values.at(0, 0) = 0.8;
    s.label = 1;

    const uint64_t seed = 5;
    Tape tape;
    ParamCtx P(tape, m.store);
    RngStream noise = derive_stream(seed, "n"), drop = derive_stream(seed, "d");
    SeriesBound sb = series_bound(tape, P, h, s, 1, 1, 0.3, AblationFlags{}, fm, noise, drop);

    // Re-derive every term with scalar arithmetic and the same noise stream.
    RngStream noise2 = derive_stream(seed, "n"), drop2 = derive_stream(seed, "d");
    Tape t2;
    ParamCtx P2(t2, m.store);
    EncoderOutput enc = encoder_forward(P2, h, t2, s);
    std::vector<double> eps_z(h.z_dim);
    for (double& e : eps_z) e = noise2.normal();
    std::vector<double> z(h.z_dim);
    double log_q = 0.0;
    for (int j = 0; j < h.z_dim; ++j) {
        double mu = enc.mu.values()[j], sg = enc.sigma.values()[j];
        z[j] = mu + sg * eps_z[j];
        double r = (z[j] - mu) / sg;
        log_q += -0.5 * kLog2Pi - std::log(sg) - 0.5 * r * r;
    }
    // T = 1 gram is the kernel variance (~1 at init); prior is N(0, k)
    KernelConfig kc;
    kc.length_scale = h.kernel_len_init;
    kc.variance = h.kernel_var_init;
    double kvar = build_gram(s.times, kc).at(0, 0);
    double log_prior = 0.0;
    for (int j = 0; j < h.z_dim; ++j)
        log_prior += -0.5 * (kLog2Pi + std::log(kvar) + z[j] * z[j] / kvar);

    DecoderOutput dec = decoder_forward(P2, h, t2, t2.constant({1, h.z_dim}, z));
    double mu_d = dec.mu.values()[0], sg_d = dec.sigma.values()[0];
    double rr = (0.8 - mu_d) / sg_d;
    double log_obs = -0.5 * kLog2Pi - std::log(sg_d) - 0.5 * rr * rr;

    double eps_x = noise2.normal();
    double generated = mu_d + sg_d * eps_x;
    // packed value at the observed cell is the observation itself
    Tensor probs = missing_model_forward(P2, t2.constant({1, 1}, {0.8}));
    double log_mask = bernoulli_logpmf(1, probs.values()[0]);

    int keep = drop2.bernoulli(1.0 - 0.3) ? 1 : 0;
    // decay from the stored parameters; delta at t=0 is 0 so the
    // pre-activation is just the bias, and x_last is the feature mean 0
    double decay_pre = m.store.at("cls.decay.b").value[0];
    double gamma = std::exp(-std::max(0.0, decay_pre));
    double x_hat = keep ? 0.8 : gamma * 0.0 + (1.0 - gamma) * generated;
    Tensor lp = classifier_forward(P2, h, t2, t2.constant({1, 1}, {x_hat}));
    double log_class = lp.values()[1];

    double expect = log_class + log_mask + log_obs + log_prior - log_q;
    CHECK(sb.weights.log_w[0] == doctest::Approx(expect).epsilon(1e-9));
    // K = 1: the bound equals the single log weight
    CHECK(sb.bound.item() == doctest::Approx(sb.weights.log_w[0]).epsilon(1e-12));
}

TEST_CASE("iwae_bound") {
    SUBCASE("single particle") {
        LogWeights lw;
        lw.log_w = {-3.7};
        CHECK(iwae_bound(lw) == doctest::Approx(-3.7).epsilon(1e-12));
    }
    SUBCASE("equal weights are K-invariant") {
        for (int k : {1, 5, 20}) {
            LogWeights lw;
            lw.log_w.assign(k, -2.25);
            CHECK(iwae_bound(lw) == doctest::Approx(-2.25).epsilon(1e-12));
        }
    }
    SUBCASE("invariant under particle permutation") {
        LogWeights lw;
        lw.log_w = {-1.0, -5.0, -2.5, -0.3};
        double base = iwae_bound(lw);
        std::swap(lw.log_w[0], lw.log_w[3]);
        std::swap(lw.log_w[1], lw.log_w[2]);
        CHECK(iwae_bound(lw) == doctest::Approx(base).epsilon(1e-15));
    }
}

TEST_CASE("ablation gradient structure") {
    ModelHyper h = tiny_hyper();
    ModelParams m = make_model(h, 13);
    Dataset ds = tiny_dataset(2, 17);
    SamplingConfig sc;
    sc.k_train = 3;

    auto group_absmax = [&](const GradMap& g, const std::string& group) {
        double mx = 0.0;
        for (const auto& [name, vec] : g)
            if (param_group(name) == group)
                for (double v : vec) mx = std::max(mx, std::abs(v));
        return mx;
    };

    SUBCASE("full model moves every group") {
        GradMap g = analytic_grads(m, ds.series[0], sc, AblationFlags{}, 2);
        for (const char* grp : {"theta", "psi", "lambda", "phi"}) CHECK(group_absmax(g, grp) > 0.0);
    }

    SUBCASE("without mnar the missing model gets exactly zero gradient") {
        AblationFlags abl;
        abl.mnar = false;
        GradMap g = analytic_grads(m, ds.series[0], sc, abl, 2);
        CHECK(group_absmax(g, "psi") == 0.0);
        CHECK(group_absmax(g, "theta") > 0.0);
    }

    SUBCASE("without supervision the classifier gets exactly zero gradient") {
        AblationFlags abl;
        abl.supervision = false;
        GradMap g = analytic_grads(m, ds.series[0], sc, abl, 2);
        CHECK(group_absmax(g, "lambda") == 0.0);
        CHECK(group_absmax(g, "phi") > 0.0);
    }

    SUBCASE("beta zero equals the dropout-free code path bit-exactly") {
        SamplingConfig beta0 = sc;
        beta0.beta = 0.0;
        AblationFlags no_drop;
        no_drop.obsdropout = false;
        SamplingConfig with_beta = sc;
        with_beta.beta = 0.3;  // ignored when the flag is off

        Tape t1;
        ParamCtx p1(t1, m.store);
        RngStream n1 = derive_stream(9, "n"), d1 = derive_stream(9, "d");
        std::vector<double> fm(3, 0.0);
        double a = series_loss(t1, p1, h, ds.series[0], 1, beta0, AblationFlags{}, fm, n1, d1).item();

        Tape t2;
        ParamCtx p2(t2, m.store);
        RngStream n2 = derive_stream(9, "n"), d2 = derive_stream(9, "d");
        double b = series_loss(t2, p2, h, ds.series[0], 1, with_beta, no_drop, fm, n2, d2).item();
        CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
    }
}

TEST_CASE("training loop") {
    Dataset all = tiny_dataset(30, 23, 0.3, Mechanism::MCAR);
    Dataset train_ds = all, val_ds = all;
    train_ds.series.assign(all.series.begin(), all.series.begin() + 22);
    val_ds.series.assign(all.series.begin() + 22, all.series.end());

    auto fresh = [&](uint64_t seed) {
        ModelHyper h = tiny_hyper();
        SamplingConfig sc;
        sc.k_train = 2;
        sc.beta = 0.3;
        return GenerativeClassifier(make_model(h, seed), sc, AblationFlags{},
                                    std::vector<double>(3, 0.0));
    };

    SUBCASE("zero epochs returns the initial parameters unchanged") {
        GenerativeClassifier c = fresh(1);
        ParamStore before = c.params();
        TrainConfig tc;
        tc.max_epochs = 0;
        tc.batch_size = 8;
        TrainState st = train(c, train_ds, val_ds, tc);
        CHECK(c.params() == before);
        CHECK(st.best_params == before);
        CHECK(st.log.empty());
    }

    SUBCASE("fixed seed gives a bit-identical trajectory") {
        TrainConfig tc;
        tc.max_epochs = 2;
        tc.batch_size = 8;
        tc.lr = 1e-3;
        tc.seed = 4;
        tc.threads = 2;
        tc.val_particles = 2;
        GenerativeClassifier a = fresh(2), b = fresh(2);
        TrainState sa = train(a, train_ds, val_ds, tc);
        TrainState sb = train(b, train_ds, val_ds, tc);
        CHECK(a.params() == b.params());
        CHECK(sa.best_params == sb.best_params);
        REQUIRE(sa.log.size() == sb.log.size());
        for (size_t i = 0; i < sa.log.size(); ++i) {
            CHECK(sa.log[i].loss == sb.log[i].loss);
            CHECK(sa.log[i].val_metric == sb.log[i].val_metric);
        }
    }

    SUBCASE("resuming from a checkpointed state continues the exact trajectory") {
        TrainConfig tc;
        tc.max_epochs = 4;
        tc.batch_size = 8;
        tc.seed = 6;
        tc.val_particles = 2;
        GenerativeClassifier full = fresh(3);
        TrainState sf = train(full, train_ds, val_ds, tc);

        GenerativeClassifier split = fresh(3);
        TrainConfig tc2 = tc;
        tc2.max_epochs = 2;
        TrainState mid = train(split, train_ds, val_ds, tc2);
        TrainState done = train(split, train_ds, val_ds, tc, mid);

        CHECK(full.params() == split.params());
        CHECK(sf.best_params == done.best_params);
        REQUIRE(sf.log.size() == done.log.size());
        for (size_t i = 0; i < sf.log.size(); ++i) CHECK(sf.log[i].loss == done.log[i].loss);
    }
}

TEST_CASE("gradient check harness") {
    // the acceptance suite runs the full built-in instance; here the same
    // harness is exercised for the ablation zero-gradient reports
    AblationFlags no_mnar;
    no_mnar.mnar = false;
    GradCheckReport rep = gradient_check(no_mnar, 3, 1e-4);
    CHECK(rep.pass);
    CHECK(rep.group_grad_absmax.at("psi") == 0.0);
    CHECK(rep.group_grad_absmax.at("theta") > 0.0);
    CHECK(rep.max_rel_err < 1e-4);
}
