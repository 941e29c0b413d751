#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tsmiwae/data.hpp"

using namespace tsmiwae;

namespace {

Dataset tiny_dataset() {
    Dataset ds;
    ds.feature_names = {"hr", "temp"};
    MaskedTimeSeries s;
    s.id = "a";
    s.times = {0.0, 0.5, 1.0};
    s.values = Mat(3, 2);
    s.mask = Mat(3, 2);
    s.values.at(0, 0) = 2.0;
    s.mask.at(0, 0) = 1.0;
    s.values.at(2, 0) = 4.0;
    s.mask.at(2, 0) = 1.0;
    s.values.at(1, 1) = -1.0;
    s.mask.at(1, 1) = 1.0;
    s.values.at(2, 1) = 3.0;
    s.mask.at(2, 1) = 1.0;
    s.label = 1;
    ds.series.push_back(s);
    return ds;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("standardize") {
    SUBCASE("two observed values map to -1 and +1 under population stats") {
        Dataset ds = tiny_dataset();
        Dataset out = standardize(ds);
        // feature hr observes {2, 4}: mean 3, population std 1
        CHECK(out.series[0].values.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
        CHECK(out.series[0].values.at(2, 0) == doctest::Approx(1.0).epsilon(1e-12));
        // masks untouched, sentinel zero at missing cells
        CHECK(out.series[0].mask == ds.series[0].mask);
        CHECK(out.series[0].values.at(1, 0) == 0.0);
    }

    SUBCASE("re-fitting standardized data is the identity") {
        Dataset once = standardize(tiny_dataset());
        Dataset twice = standardize(once);
        for (int t = 0; t < 3; ++t)
            for (int j = 0; j < 2; ++j)
                CHECK(std::abs(twice.series[0].values.at(t, j) - once.series[0].values.at(t, j)) < 1e-9);
    }

    SUBCASE("masked sentinels do not contaminate the statistics") {
        Dataset ds;
        ds.feature_names = {"f0"};
        MaskedTimeSeries s;
        s.id = "a";
        s.values = Mat(12, 1, 777.0);  // junk in unobserved cells
        s.mask = Mat(12, 1, 0.0);
        s.times.resize(12);
        for (int t = 0; t < 12; ++t) s.times[t] = t / 11.0;
        s.values.at(0, 0) = 0.0;
        s.mask.at(0, 0) = 1.0;
        s.values.at(5, 0) = 2.0;
        s.mask.at(5, 0) = 1.0;
        ds.series.push_back(s);
        StandardScaler sc;
        sc.fit(ds);
        CHECK(sc.mean[0] == doctest::Approx(1.0).epsilon(1e-12));  // mean of {0, 2}
    }

    SUBCASE("zero variance feature is an error naming the feature") {
        Dataset ds = tiny_dataset();
        ds.series[0].values.at(2, 0) = 2.0;  // hr observes {2, 2}
        try {
            standardize(ds);
            CHECK(false);
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("hr") != std::string::npos);
        }
    }

    SUBCASE("inverse recovers observed entries") {
        Dataset ds = tiny_dataset();
        StandardScaler sc;
        sc.fit(ds);
        Dataset back = sc.inverse(sc.transform(ds));
        for (int t = 0; t < 3; ++t)
            for (int j = 0; j < 2; ++j)
                if (ds.series[0].mask.at(t, j) != 0.0)
                    CHECK(std::abs(back.series[0].values.at(t, j) - ds.series[0].values.at(t, j)) < 1e-9);
    }
}

TEST_CASE("generate_synthetic") {
    SUBCASE("mcar empirical rate") {
        SyntheticConfig cfg;
        cfg.n = 250;
        cfg.steps = 30;
        cfg.features = 8;  // 60000 cells
        cfg.mech.mechanism = Mechanism::MCAR;
        cfg.mech.base_rate = 0.3;
        cfg.seed = 100;
        auto out = generate_synthetic(cfg);
        CHECK(std::abs(out.empirical_missing_rate - 0.3) < 0.01);
    }

    SUBCASE("mnar and mar hit the requested rate too") {
        for (auto mech : {Mechanism::MNAR, Mechanism::MAR}) {
            SyntheticConfig cfg;
            cfg.n = 250;
            cfg.steps = 30;
            cfg.features = 8;
            cfg.mech.mechanism = mech;
            cfg.mech.base_rate = 0.4;
            cfg.seed = 101;
            auto out = generate_synthetic(cfg);
            CHECK(std::abs(out.empirical_missing_rate - 0.4) < 0.01);
        }
    }

    SUBCASE("rate zero keeps the mask full") {
        SyntheticConfig cfg;
        cfg.n = 5;
        cfg.steps = 8;
        cfg.features = 3;
        cfg.mech.base_rate = 0.0;
        auto out = generate_synthetic(cfg);
        for (const auto& s : out.data.series)
            for (double m : s.mask.data) CHECK(m == 1.0);
    }

    SUBCASE("mnar self-masking with positive slope hides high values") {
        SyntheticConfig cfg;
        cfg.n = 300;
        cfg.steps = 30;
        cfg.features = 6;
        cfg.mech.mechanism = Mechanism::MNAR;
        cfg.mech.base_rate = 0.4;
        cfg.mech.slope = 4.0;
        cfg.seed = 7;
        auto out = generate_synthetic(cfg);
        double miss_sum = 0.0, obs_sum = 0.0;
        double miss_sq = 0.0, obs_sq = 0.0;
        long miss_n = 0, obs_n = 0;
        for (size_t i = 0; i < out.data.series.size(); ++i)
            for (int t = 0; t < cfg.steps; ++t)
                for (int j = 0; j < cfg.features; ++j) {
                    double v = out.truth[i].at(t, j);
                    if (out.data.series[i].mask.at(t, j) == 0.0) {
                        miss_sum += v;
                        miss_sq += v * v;
                        ++miss_n;
                    } else {
                        obs_sum += v;
                        obs_sq += v * v;
                        ++obs_n;
                    }
                }
        double mm = miss_sum / miss_n, om = obs_sum / obs_n;
        double mv = miss_sq / miss_n - mm * mm, ov = obs_sq / obs_n - om * om;
        double se = std::sqrt(mv / miss_n + ov / obs_n);
        CHECK(mm - om > 5.0 * se);
    }

    SUBCASE("mcar leaves the conditional means equal") {
        SyntheticConfig cfg;
        cfg.n = 300;
        cfg.steps = 30;
        cfg.features = 6;
        cfg.mech.mechanism = Mechanism::MCAR;
        cfg.mech.base_rate = 0.4;
        cfg.seed = 8;
        auto out = generate_synthetic(cfg);
        double miss_sum = 0.0, obs_sum = 0.0, miss_sq = 0.0, obs_sq = 0.0;
        long miss_n = 0, obs_n = 0;
        for (size_t i = 0; i < out.data.series.size(); ++i)
            for (int t = 0; t < cfg.steps; ++t)
                for (int j = 0; j < cfg.features; ++j) {
                    double v = out.truth[i].at(t, j);
                    if (out.data.series[i].mask.at(t, j) == 0.0) {
                        miss_sum += v;
                        miss_sq += v * v;
                        ++miss_n;
                    } else {
                        obs_sum += v;
                        obs_sq += v * v;
                        ++obs_n;
                    }
                }
        double mm = miss_sum / miss_n, om = obs_sum / obs_n;
        double mv = miss_sq / miss_n - mm * mm, ov = obs_sq / obs_n - om * om;
        double se = std::sqrt(mv / miss_n + ov / obs_n);
        CHECK(std::abs(mm - om) < 4.0 * se);
    }

    SUBCASE("identical config and seed give bit-identical datasets") {
        SyntheticConfig cfg;
        cfg.n = 20;
        cfg.steps = 16;
        cfg.features = 4;
        cfg.mech.mechanism = Mechanism::MNAR;
        cfg.mech.base_rate = 0.35;
        cfg.seed = 42;
        auto a = generate_synthetic(cfg);
        auto b = generate_synthetic(cfg);
        CHECK(a.data == b.data);
        REQUIRE(a.truth.size() == b.truth.size());
        for (size_t i = 0; i < a.truth.size(); ++i) CHECK(a.truth[i] == b.truth[i]);
    }

    SUBCASE("times are strictly increasing and normalized") {
        SyntheticConfig cfg;
        cfg.n = 10;
        cfg.steps = 25;
        cfg.features = 2;
        cfg.seed = 3;
        auto out = generate_synthetic(cfg);
        for (const auto& s : out.data.series) {
            CHECK(s.times.front() >= 0.0);
            CHECK(s.times.back() <= 1.0);
            for (size_t t = 1; t < s.times.size(); ++t) CHECK(s.times[t] > s.times[t - 1]);
        }
    }
}

TEST_CASE("make_holdout") {
    SyntheticConfig cfg;
    cfg.n = 60;
    cfg.steps = 25;
    cfg.features = 8;
    cfg.mech.mechanism = Mechanism::MCAR;
    cfg.mech.base_rate = 0.2;
    cfg.seed = 12;
    auto gen = generate_synthetic(cfg);

    SUBCASE("exact-count selection stays within the binomial envelope") {
        size_t observed = gen.data.observed_count();
        auto [masked, hm] = make_holdout(gen.data, 0.1, 99);
        double target = 0.1 * static_cast<double>(observed);
        CHECK(std::abs(static_cast<double>(hm.count()) - target) <= 60.0);
        CHECK(std::abs(static_cast<double>(hm.count()) / observed - 0.1) < 0.02);
        CHECK(gen.data.observed_count() == observed);  // original untouched
        CHECK(masked.observed_count() == observed - hm.count());
    }

    SUBCASE("rate zero is a no-op") {
        auto [masked, hm] = make_holdout(gen.data, 0.0, 99);
        CHECK(hm.count() == 0);
        CHECK(masked == gen.data);
    }

    SUBCASE("hidden cells are a subset of the observed mask") {
        auto [masked, hm] = make_holdout(gen.data, 0.15, 5);
        for (size_t i = 0; i < gen.data.series.size(); ++i)
            for (int t = 0; t < cfg.steps; ++t)
                for (int j = 0; j < cfg.features; ++j)
                    if (hm.hidden[i].at(t, j) != 0.0) {
                        CHECK(gen.data.series[i].mask.at(t, j) == 1.0);
                        CHECK(masked.series[i].mask.at(t, j) == 0.0);
                    }
    }

    SUBCASE("rate one rejected") {
        CHECK_THROWS_AS(make_holdout(gen.data, 1.0, 1), ContractError);
    }
}

TEST_CASE("csv io") {
    SUBCASE("direct encoding of a small file") {
        std::string path = temp_path("tsmiwae_test_small.csv");
        {
            std::ofstream f(path);
            f << "series_id,time,feature,value,label\n";
            f << "a,0,hr,61.5,1\n";
            f << "a,0,temp,36.6,1\n";
            f << "a,1,hr,62,1\n";
            f << "a,1,temp,,1\n";
        }
        Dataset ds = load_csv(path);
        REQUIRE(ds.series.size() == 1);
        CHECK(ds.feature_names == std::vector<std::string>{"hr", "temp"});
        const auto& s = ds.series[0];
        CHECK(s.mask.at(0, 0) == 1.0);
        CHECK(s.mask.at(0, 1) == 1.0);
        CHECK(s.mask.at(1, 0) == 1.0);
        CHECK(s.mask.at(1, 1) == 0.0);  // empty value field
        CHECK(s.value_at(1, 0) == 62.0);
        CHECK(*s.label == 1);
        // times normalized by the horizon
        CHECK(s.times[0] == 0.0);
        CHECK(s.times[1] == 1.0);
        std::remove(path.c_str());
    }

    SUBCASE("round trip is bit-identical") {
        SyntheticConfig cfg;
        cfg.n = 3;
        cfg.steps = 14;
        cfg.features = 3;
        cfg.mech.mechanism = Mechanism::MNAR;
        cfg.mech.base_rate = 0.3;
        cfg.seed = 77;
        Dataset ds = generate_synthetic(cfg).data;
        std::string p1 = temp_path("tsmiwae_rt1.csv"), p2 = temp_path("tsmiwae_rt2.csv");
        save_csv(ds, p1);
        Dataset back = load_csv(p1);
        CHECK(back == ds);
        save_csv(back, p2);
        std::ifstream f1(p1), f2(p2);
        std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        CHECK(c1 == c2);
        std::remove(p1.c_str());
        std::remove(p2.c_str());
    }

    SUBCASE("parse errors carry line numbers") {
        std::string path = temp_path("tsmiwae_bad.csv");
        {
            std::ofstream f(path);
            f << "series_id,time,feature,value,label\n";
            f << "a,0,hr,1.0,0\n";
            f << "a,zzz,hr,1.0,0\n";
        }
        try {
            load_csv(path);
            CHECK(false);
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        }
        std::remove(path.c_str());
    }

    SUBCASE("duplicate cells rejected") {
        std::string path = temp_path("tsmiwae_dup.csv");
        {
            std::ofstream f(path);
            f << "series_id,time,feature,value,label\n";
            f << "a,0,hr,1.0,0\n";
            f << "a,0,hr,2.0,0\n";
        }
        CHECK_THROWS_AS(load_csv(path), DataError);
        std::remove(path.c_str());
    }

    SUBCASE("reading a masked cell through value_at is a contract violation") {
        Dataset ds = tiny_dataset();
        CHECK_THROWS_AS(ds.series[0].value_at(1, 0), ContractError);
    }
}
