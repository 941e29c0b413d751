#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tsmiwae/metrics.hpp"
#include "tsmiwae/random.hpp"

using namespace tsmiwae;

TEST_CASE("auroc") {
    SUBCASE("perfect separation") {
        CHECK(auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
    }
    SUBCASE("all scores tied give 0.5 via midranks") {
        CHECK(auroc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
    }
    SUBCASE("hand-counted concordant pairs") {
        // pairs (neg, pos): (0.1,0.35) (0.1,0.8) (0.4,0.35)x (0.4,0.8) -> 3/4
        CHECK(auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75).epsilon(1e-12));
    }
    SUBCASE("single class undefined") {
        CHECK_THROWS_AS(auroc({0.1, 0.2}, {1, 1}), UndefinedMetricError);
    }
    SUBCASE("invariant under strictly monotone transforms") {
        RngStream rng(9);
        std::vector<double> scores(60);
        std::vector<int> labels(60);
        for (size_t i = 0; i < scores.size(); ++i) {
            scores[i] = rng.normal();
            labels[i] = rng.bernoulli(0.4) ? 1 : 0;
        }
        labels[0] = 0;
        labels[1] = 1;
        double base = auroc(scores, labels);
        std::vector<double> warped = scores;
        for (double& s : warped) s = std::exp(3.0 * s) + 7.0;
        CHECK(auroc(warped, labels) == doctest::Approx(base).epsilon(1e-12));
        for (double& s : warped) s = std::atan(s);
        CHECK(auroc(warped, labels) == doctest::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("cross entropy") {
    SUBCASE("perfect one-hot is zero") {
        CHECK(cross_entropy({{1.0, 0.0}, {0.0, 1.0}}, {0, 1}) == 0.0);
    }
    SUBCASE("uniform binary is log 2") {
        CHECK(cross_entropy({{0.5, 0.5}, {0.5, 0.5}}, {0, 1}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("hand arithmetic") {
        double expected = -(std::log(0.9) + std::log(0.8)) / 2.0;
        CHECK(cross_entropy({{0.9, 0.1}, {0.2, 0.8}}, {0, 1}) == doctest::Approx(expected).epsilon(1e-12));
        CHECK(std::abs(cross_entropy({{0.9, 0.1}, {0.2, 0.8}}, {0, 1}) - 0.16425203348119852) < 1e-9);
    }
    SUBCASE("nonnegative, zero only when confidently correct") {
        CHECK(cross_entropy({{0.7, 0.3}}, {0}) > 0.0);
    }
}

TEST_CASE("ece") {
    SUBCASE("confident and correct everywhere") {
        CHECK(ece({{1.0, 0.0}, {0.0, 1.0}}, {0, 1}, 10) == 0.0);
    }
    SUBCASE("single prediction, one bin") {
        CHECK(ece({{0.8, 0.2}}, {0}, 1) == doctest::Approx(0.2).epsilon(1e-12));
    }
    SUBCASE("two predictions pooled in one bin") {
        // confidences 0.7 and 0.9, accuracy 0.5 -> |0.5 - 0.8| = 0.3
        CHECK(ece({{0.7, 0.3}, {0.9, 0.1}}, {0, 1}, 1) == doctest::Approx(0.3).epsilon(1e-12));
    }
    SUBCASE("bounded by one") {
        RngStream rng(2);
        std::vector<std::vector<double>> probs;
        std::vector<int> labels;
        for (int i = 0; i < 200; ++i) {
            double p = rng.uniform();
            probs.push_back({p, 1.0 - p});
            labels.push_back(static_cast<int>(rng.uniform_index(2)));
        }
        double e = ece(probs, labels, 10);
        CHECK(e >= 0.0);
        CHECK(e <= 1.0);
    }
}

TEST_CASE("brier") {
    SUBCASE("perfect one-hot is zero") {
        CHECK(brier({{1.0, 0.0}}, {0}) == 0.0);
    }
    SUBCASE("uniform binary") {
        CHECK(brier({{0.5, 0.5}}, {0}) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("hand arithmetic") {
        CHECK(brier({{0.8, 0.2}}, {0}) == doctest::Approx(0.08).epsilon(1e-12));
        CHECK(std::abs(brier({{0.8, 0.2}}, {0}) - 0.08) < 1e-9);
    }
    SUBCASE("binary decomposition identity") {
        RngStream rng(4);
        std::vector<std::vector<double>> probs;
        std::vector<int> labels;
        double acc = 0.0;
        for (int i = 0; i < 100; ++i) {
            double p = rng.uniform();
            probs.push_back({1.0 - p, p});
            int y = rng.bernoulli(0.5) ? 1 : 0;
            labels.push_back(y);
            acc += (p - y) * (p - y);
        }
        CHECK(brier(probs, labels) == doctest::Approx(2.0 * acc / 100.0).epsilon(1e-12));
    }
}

TEST_CASE("accuracy precision recall") {
    SUBCASE("all correct") {
        auto r = accuracy_precision_recall({1, 0, 1}, {1, 0, 1}, 2);
        CHECK(*r.accuracy == 1.0);
        CHECK(*r.precision == 1.0);
        CHECK(*r.recall == 1.0);
    }
    SUBCASE("hand counts tp=1 fp=1 fn=0 tn=0") {
        auto r = accuracy_precision_recall({1, 1}, {1, 0}, 2);
        CHECK(*r.accuracy == 0.5);
        CHECK(*r.precision == 0.5);
        CHECK(*r.recall == 1.0);
    }
    SUBCASE("no predicted positives leaves precision undefined") {
        auto r = accuracy_precision_recall({0, 0}, {1, 0}, 2);
        CHECK_FALSE(r.precision.has_value());
        CHECK(r.recall.has_value());
        CHECK(*r.recall == 0.0);
    }
    SUBCASE("macro average for multiclass") {
        auto r = accuracy_precision_recall({0, 1, 2, 2}, {0, 1, 1, 2}, 3);
        CHECK(*r.accuracy == 0.75);
        // per-class precision: 1, 1, 0.5 -> 2.5/3; recall: 1, 0.5, 1 -> 2.5/3
        CHECK(*r.precision == doctest::Approx(2.5 / 3.0).epsilon(1e-12));
        CHECK(*r.recall == doctest::Approx(2.5 / 3.0).epsilon(1e-12));
    }
}
