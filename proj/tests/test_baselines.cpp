#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "tsmiwae/classifiers.hpp"

using namespace tsmiwae;

namespace {

MaskedTimeSeries column_series(std::vector<double> values, std::vector<double> mask, std::vector<double> times) {
    MaskedTimeSeries s;
    s.id = "t";
    s.times = std::move(times);
    int T = static_cast<int>(values.size());
    s.values = Mat(T, 1);
    s.mask = Mat(T, 1);
    for (int t = 0; t < T; ++t) {
        s.mask.at(t, 0) = mask[t];
        s.values.at(t, 0) = mask[t] != 0.0 ? values[t] : 0.0;
    }
    return s;
}

}  // namespace

TEST_CASE("compute_intervals") {
    SUBCASE("fully observed column") {
        Mat mask(3, 1, 1.0);
        Mat delta = compute_intervals(mask, {0.0, 1.0, 2.0});
        CHECK(delta.at(0, 0) == 0.0);
        CHECK(delta.at(1, 0) == 1.0);
        CHECK(delta.at(2, 0) == 1.0);
    }
    SUBCASE("gap accumulates while unobserved") {
        Mat mask(3, 1, 0.0);
        mask.at(0, 0) = 1.0;
        Mat delta = compute_intervals(mask, {0.0, 1.0, 2.0});
        CHECK(delta.at(0, 0) == 0.0);
        CHECK(delta.at(1, 0) == 1.0);
        CHECK(delta.at(2, 0) == 2.0);
    }
    SUBCASE("unit spacing resets every step when observed") {
        Mat mask(5, 2, 1.0);
        Mat delta = compute_intervals(mask, {0.0, 1.0, 2.0, 3.0, 4.0});
        for (int t = 1; t < 5; ++t)
            for (int j = 0; j < 2; ++j) CHECK(delta.at(t, j) == 1.0);
    }
    SUBCASE("depends only on mask and times") {
        Mat mask(3, 1, 1.0);
        mask.at(1, 0) = 0.0;
        Mat d1 = compute_intervals(mask, {0.0, 0.3, 1.0});
        Mat d2 = compute_intervals(mask, {0.0, 0.3, 1.0});
        CHECK(d1 == d2);
    }
    SUBCASE("non-increasing times rejected") {
        Mat mask(2, 1, 1.0);
        CHECK_THROWS_AS(compute_intervals(mask, {0.5, 0.5}), ContractError);
    }
}

TEST_CASE("heuristic imputers") {
    std::vector<double> mean{1.0};

    SUBCASE("fully observed series pass through all modes") {
        MaskedTimeSeries s = column_series({2.0, -1.0, 0.5}, {1, 1, 1}, {0.0, 0.5, 1.0});
        for (const Mat& out : {impute_zero(s), impute_mean(s, mean), impute_forward(s, mean)}) {
            CHECK(out.at(0, 0) == 2.0);
            CHECK(out.at(1, 0) == -1.0);
            CHECK(out.at(2, 0) == 0.5);
        }
    }

    SUBCASE("forward carries the first value") {
        MaskedTimeSeries s = column_series({5.0, 0.0, 0.0}, {1, 0, 0}, {0.0, 0.5, 1.0});
        Mat out = impute_forward(s, mean);
        CHECK(out.at(0, 0) == 5.0);
        CHECK(out.at(1, 0) == 5.0);
        CHECK(out.at(2, 0) == 5.0);
    }

    SUBCASE("mean fills around an interior observation") {
        MaskedTimeSeries s = column_series({0.0, 3.0, 0.0}, {0, 1, 0}, {0.0, 0.5, 1.0});
        Mat out = impute_mean(s, mean);
        CHECK(out.at(0, 0) == 1.0);
        CHECK(out.at(1, 0) == 3.0);
        CHECK(out.at(2, 0) == 1.0);
    }

    SUBCASE("forward cold start falls back to the mean") {
        MaskedTimeSeries s = column_series({0.0, 4.0, 0.0}, {0, 1, 0}, {0.0, 0.5, 1.0});
        Mat out = impute_forward(s, mean);
        CHECK(out.at(0, 0) == 1.0);
        CHECK(out.at(2, 0) == 4.0);
    }

    SUBCASE("forward fill is idempotent") {
        MaskedTimeSeries s = column_series({2.0, 0.0, 7.0, 0.0}, {1, 0, 1, 0}, {0.0, 0.3, 0.6, 1.0});
        Mat once = impute_forward(s, mean);
        MaskedTimeSeries s2 = s;
        s2.values = once;
        Mat twice = impute_forward(s2, mean);
        CHECK(once == twice);
    }

    SUBCASE("observed entries stay bit-identical") {
        MaskedTimeSeries s = column_series({0.1234567890123, 0.0, -9.87}, {1, 0, 1}, {0.0, 0.5, 1.0});
        for (const Mat& out : {impute_zero(s), impute_mean(s, mean), impute_forward(s, mean)}) {
            CHECK(std::memcmp(&out.at(0, 0), &s.values.at(0, 0), sizeof(double)) == 0);
            CHECK(std::memcmp(&out.at(2, 0), &s.values.at(2, 0), sizeof(double)) == 0);
        }
    }
}

TEST_CASE("grud_impute") {
    CHECK(grud_impute(1, 3.5, 0.7, -1.0, 2.0) == 3.5);
    CHECK(grud_impute(0, 3.5, 1.0, -1.0, 2.0) == -1.0);
    CHECK(grud_impute(0, 0.0, 0.5, 4.0, 2.0) == doctest::Approx(3.0).epsilon(1e-15));
    CHECK_THROWS_AS(grud_impute(0, 0.0, 0.0, 1.0, 1.0), ContractError);
}

TEST_CASE("decay gamma") {
    Tape tape;
    RngStream rng(19);
    std::vector<double> pre(64);
    for (double& p : pre) p = rng.uniform(-3.0, 3.0);
    pre[0] = 0.0;
    pre[1] = -1e-12;
    Tensor g = decay_gamma(tape.constant({64}, pre));
    for (size_t i = 0; i < pre.size(); ++i) {
        double v = g.values()[i];
        CHECK(v > 0.0);
        CHECK(v <= 1.0);
        if (pre[i] <= 0.0) CHECK(v == 1.0);
        if (pre[i] > 0.0) CHECK(v < 1.0);
    }
}

TEST_CASE("gru_cell") {
    auto zero_gru = [](int in, int hidden) {
        ParamStore s;
        for (const char* n : {".wa", ".wr", ".w"}) s.add("gru" + std::string(n), {in, hidden}, std::vector<double>(in * hidden, 0.0));
        for (const char* n : {".ua", ".ur", ".u"}) s.add("gru" + std::string(n), {hidden, hidden}, std::vector<double>(hidden * hidden, 0.0));
        for (const char* n : {".ba", ".br", ".b"}) s.add("gru" + std::string(n), {hidden}, std::vector<double>(hidden, 0.0));
        return s;
    };

    SUBCASE("all-zero parameters and state stay at zero") {
        ParamStore s = zero_gru(2, 3);
        Tape tape;
        ParamCtx P(tape, s);
        Tensor h = gru_cell(P, "gru", tape.constant({1, 2}, {0.4, -0.7}), tape.constant({1, 3}, {0, 0, 0}));
        for (double v : h.values()) CHECK(v == 0.0);
    }

    SUBCASE("zero parameters halve the previous state") {
        ParamStore s = zero_gru(2, 3);
        Tape tape;
        ParamCtx P(tape, s);
        Tensor h = gru_cell(P, "gru", tape.constant({1, 2}, {1.0, 1.0}), tape.constant({1, 3}, {0.8, -0.2, 0.5}));
        CHECK(h.values()[0] == doctest::Approx(0.4).epsilon(1e-12));
        CHECK(h.values()[1] == doctest::Approx(-0.1).epsilon(1e-12));
        CHECK(h.values()[2] == doctest::Approx(0.25).epsilon(1e-12));
    }

    SUBCASE("saturated update gate drives the state to the candidate") {
        ParamStore s = zero_gru(1, 1);
        s.at("gru.ba").value[0] = 20.0;  // update gate ~ 1
        s.at("gru.b").value[0] = 0.9;    // candidate tanh(0.9)
        Tape tape;
        ParamCtx P(tape, s);
        Tensor h = gru_cell(P, "gru", tape.constant({1, 1}, {0.0}), tape.constant({1, 1}, {0.5}));
        CHECK(h.values()[0] == doctest::Approx(std::tanh(0.9)).epsilon(1e-8));
    }

    SUBCASE("gradients flow through the cell") {
        ParamStore s;
        init_gru(s, "gru", {2, 3}, 11);
        Tape tape;
        ParamCtx P(tape, s);
        Tensor h = tape.constant({1, 3}, {0.1, -0.2, 0.3});
        for (int t = 0; t < 3; ++t) h = gru_cell(P, "gru", tape.constant({1, 2}, {0.5, -0.5}), h);
        tape.backward(sum(mul(h, h)));
        bool any_nonzero = false;
        for (double g : tape.grad_of(P("gru.w"))) any_nonzero |= (g != 0.0);
        CHECK(any_nonzero);
    }
}

TEST_CASE("gru classifier variants") {
    SyntheticConfig cfg;
    cfg.n = 24;
    cfg.steps = 12;
    cfg.features = 3;
    cfg.mech.mechanism = Mechanism::MCAR;
    cfg.mech.base_rate = 0.3;
    cfg.seed = 5;
    Dataset ds = standardize(generate_synthetic(cfg).data);
    std::vector<double> means = observed_feature_means(ds);

    SUBCASE("gru-simple consumes values, mask and intervals") {
        GruSpec spec;
        spec.variant = GruVariant::Simple;
        spec.hidden = 8;
        GruClassifier m(spec, 3, 2, means, 1);
        CHECK(m.params().at("gru.wa").shape == Shape{9, 8});
    }

    SUBCASE("gru-d with zero decay parameters reduces to forward fill") {
        GruSpec fwd;
        fwd.variant = GruVariant::Forward;
        fwd.hidden = 8;
        GruSpec grud;
        grud.variant = GruVariant::GruD;
        grud.hidden = 8;
        GruClassifier mf(fwd, 3, 2, means, 7);
        GruClassifier md(grud, 3, 2, means, 7);  // same seed: identical shared weights
        for (double& v : md.params().at("gru.decay_in.b").value) v = 0.0;  // gamma = 1
        for (double& v : md.params().at("gru.decay_h.b").value) v = 0.0;
        for (const auto& s : ds.series) {
            Tape t1, t2;
            ParamCtx p1(t1, mf.params()), p2(t2, md.params());
            auto a = mf.log_probs(t1, p1, s).values();
            auto b = md.log_probs(t2, p2, s).values();
            REQUIRE(a.size() == b.size());
            for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
        }
    }

    SUBCASE("probabilities are a distribution") {
        GruSpec spec;
        spec.variant = GruVariant::GruD;
        spec.hidden = 8;
        GruClassifier m(spec, 3, 2, means, 3);
        for (const auto& s : ds.series) {
            auto p = m.predict(m.params(), s, 0, 0, 1, 1);
            CHECK(p[0] >= 0.0);
            CHECK(p[1] >= 0.0);
            CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-9));
        }
    }

    SUBCASE("online mode emits causal per-step predictions") {
        GruSpec spec;
        spec.variant = GruVariant::Forward;
        spec.hidden = 8;
        spec.online = true;
        GruClassifier m(spec, 3, 2, means, 9);
        const MaskedTimeSeries& s = ds.series[0];
        Tape t1;
        ParamCtx p1(t1, m.params());
        auto base = m.log_probs(t1, p1, s);
        MaskedTimeSeries pert = s;
        int cut = s.steps() / 2;
        for (int t = cut; t < s.steps(); ++t)
            for (int j = 0; j < s.features(); ++j)
                if (pert.mask.at(t, j) != 0.0) pert.values.at(t, j) += 1.0;
        Tape t2;
        ParamCtx p2(t2, m.params());
        auto moved = m.log_probs(t2, p2, pert);
        CHECK(std::memcmp(base.values().data(), moved.values().data(), sizeof(double) * cut * 2) == 0);
    }
}

TEST_CASE("gru-mean baseline learns better than chance") {
    SyntheticConfig cfg;
    cfg.n = 260;
    cfg.steps = 16;
    cfg.features = 3;
    cfg.classes = 2;
    cfg.mech.mechanism = Mechanism::MCAR;
    cfg.mech.base_rate = 0.3;
    cfg.class_sep = 1.2;
    cfg.seed = 21;
    auto gen = generate_synthetic(cfg);
    Dataset all = standardize(gen.data);
    Dataset train = all, val = all, test = all;
    train.series.assign(all.series.begin(), all.series.begin() + 160);
    val.series.assign(all.series.begin() + 160, all.series.begin() + 200);
    test.series.assign(all.series.begin() + 200, all.series.end());

    TrainConfig tc;
    tc.batch_size = 32;
    tc.lr = 5e-3;
    tc.max_epochs = 10;
    tc.patience = 10;
    tc.seed = 2;
    tc.threads = 2;
    MetricsReport rep = run_baseline_classifier(GruVariant::Mean, train, val, test, tc, 16);
    REQUIRE(rep.auroc.has_value());
    CHECK(*rep.auroc > 0.5);
}
