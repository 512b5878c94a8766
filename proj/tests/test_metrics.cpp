#include "oracles.hpp"

#include "intrafair/error.hpp"
#include "intrafair/metrics.hpp"

#include <doctest.h>

using namespace intrafair;

TEST_CASE("group rates on a hand-counted instance") {
    const BinaryVector y{1, 1, 0, 0};
    const BinaryVector p{1, 0, 0, 1};
    const BinaryVector g{0, 0, 1, 1};
    const auto r = group_rates(y, p, g);
    CHECK(r.tpr(0) == 0.5);
    CHECK(r.fpr(1) == 0.5);
    CHECK_THROWS_AS(r.tpr(1), UndefinedRateError);
    CHECK_THROWS_AS(r.fpr(0), UndefinedRateError);
    CHECK(r.counts[0].total() + r.counts[1].total() == 4);
}

TEST_CASE("perfect and all-positive predictions") {
    const BinaryVector y{1, 0, 1, 0};
    const BinaryVector g{0, 0, 1, 1};
    const auto perfect = group_rates(y, y, g);
    for (int a : {0, 1}) {
        CHECK(perfect.tpr(a) == 1.0);
        CHECK(perfect.fpr(a) == 0.0);
    }
    const auto ones = group_rates(y, BinaryVector{1, 1, 1, 1}, g);
    for (int a : {0, 1}) {
        CHECK(ones.tpr(a) == 1.0);
        CHECK(ones.fpr(a) == 1.0);
    }
    CHECK(balanced_accuracy(y, y) == 1.0);
    CHECK(balanced_accuracy(y, BinaryVector{1, 1, 1, 1}) == 0.5);
}

TEST_CASE("bias examples") {
    CHECK(bias(BiasKind::spd, BinaryVector{0, 1, 0, 1}, BinaryVector{1, 1, 1, 0}, BinaryVector{0, 0, 1, 1}) == 0.5);
    CHECK(bias(BiasKind::eod, BinaryVector{1, 1, 1, 1}, BinaryVector{1, 1, 1, 0}, BinaryVector{0, 0, 1, 1}) == 0.5);
    CHECK(balanced_accuracy(BinaryVector{1, 1, 0, 0}, BinaryVector{1, 0, 0, 0}) == 0.75);

    const BinaryVector y{1, 0, 1, 0};
    const BinaryVector p{1, 0, 1, 0};
    const BinaryVector g{0, 0, 1, 1};
    for (auto k : {BiasKind::spd, BiasKind::eod, BiasKind::aod}) CHECK(bias(k, y, p, g) == 0.0);
}

TEST_CASE("balanced accuracy of single-class labels is undefined") {
    CHECK_THROWS_AS(balanced_accuracy(BinaryVector{1, 1}, BinaryVector{1, 0}), UndefinedRateError);
}

TEST_CASE("objective is strict at epsilon") {
    ObjectiveSpec spec;
    CHECK(objective_value(spec, 0.04, 0.8) == 0.8);
    CHECK(objective_value(spec, -0.06, 0.9) == 0.0);
    CHECK(objective_value(spec, 0.05, 0.9) == 0.0);
    CHECK(objective_value(spec, -0.04, 0.7) == 0.7);
}

TEST_CASE("epsilon must lie in (0, 1]") {
    CHECK_THROWS_AS(ObjectiveSpec({BiasKind::spd, 0.0}).validate(), ValidationError);
    CHECK_THROWS_AS(ObjectiveSpec({BiasKind::spd, 1.5}).validate(), ValidationError);
    CHECK_NOTHROW(ObjectiveSpec({BiasKind::spd, 1.0}).validate());
}

TEST_CASE("non-binary inputs are rejected") {
    CHECK_THROWS_AS(bias(BiasKind::spd, BinaryVector{0, 1}, BinaryVector{2, 1}, BinaryVector{0, 1}), ValidationError);
    CHECK_THROWS_AS(bias(BiasKind::spd, BinaryVector{0, 1}, BinaryVector{1}, BinaryVector{0, 1}), ShapeError);
}

TEST_CASE("metrics match the counting oracle") {
    Rng rng(11);
    std::uniform_int_distribution<std::size_t> size(2, 50);
    for (int t = 0; t < 300; ++t) {
        const auto in = oracle::random_instance(rng, size(rng));
        for (auto k : {BiasKind::spd, BiasKind::eod, BiasKind::aod}) {
            const auto expected = oracle::bias(k, in.labels, in.preds, in.groups);
            if (expected) {
                CHECK(std::abs(bias(k, in.labels, in.preds, in.groups) - *expected) <= 1e-12);
            } else {
                CHECK_THROWS_AS(bias(k, in.labels, in.preds, in.groups), UndefinedRateError);
            }
        }
        const auto ba = oracle::balanced_accuracy(in.labels, in.preds);
        if (ba) CHECK(std::abs(balanced_accuracy(in.labels, in.preds) - *ba) <= 1e-12);
    }
}

TEST_CASE("swapping groups negates every bias measure") {
    Rng rng(5);
    for (int t = 0; t < 200; ++t) {
        auto in = oracle::random_instance(rng, 40);
        BinaryVector swapped = in.groups;
        for (int& a : swapped) a = 1 - a;
        for (auto k : {BiasKind::spd, BiasKind::eod, BiasKind::aod}) {
            if (!oracle::bias(k, in.labels, in.preds, in.groups)) continue;
            CHECK(bias(k, in.labels, in.preds, swapped) == doctest::Approx(-bias(k, in.labels, in.preds, in.groups)).epsilon(1e-15));
        }
    }
}

TEST_CASE("flipping predictions exchanges TPR/FNR and TNR/FPR") {
    Rng rng(6);
    for (int t = 0; t < 200; ++t) {
        auto in = oracle::random_instance(rng, 30);
        BinaryVector flipped = in.preds;
        for (int& p : flipped) p = 1 - p;
        const auto a = group_rates(in.labels, in.preds, in.groups);
        const auto b = group_rates(in.labels, flipped, in.groups);
        for (int g : {0, 1}) {
            if (a.tpr_[static_cast<std::size_t>(g)]) CHECK(a.tpr(g) == doctest::Approx(b.fnr(g)));
            if (a.fpr_[static_cast<std::size_t>(g)]) CHECK(a.fpr(g) == doctest::Approx(b.tnr(g)));
            if (a.tpr_[static_cast<std::size_t>(g)]) CHECK(a.tpr(g) + a.fnr(g) == doctest::Approx(1.0));
        }
    }
}

TEST_CASE("objective is exactly zero or exactly the performance") {
    Rng rng(7);
    ObjectiveSpec spec{BiasKind::spd, 0.1};
    for (int t = 0; t < 300; ++t) {
        auto in = oracle::random_instance(rng, 20);
        if (!oracle::balanced_accuracy(in.labels, in.preds)) continue;
        const auto r = evaluate_predictions(spec, in.labels, in.preds, in.groups, 0.5);
        CHECK((r.objective == 0.0 || r.objective == r.performance));
        CHECK((r.objective == r.performance) == (std::abs(r.bias_value) < spec.epsilon));
    }
}

TEST_CASE("threshold selection equals exhaustive enumeration") {
    Rng rng(8);
    std::uniform_int_distribution<std::size_t> size(4, 200);
    for (int t = 0; t < 100; ++t) {
        auto in = oracle::random_instance(rng, size(rng));
        for (auto k : {BiasKind::spd, BiasKind::eod}) {
            const ObjectiveSpec spec{k, 0.1};
            const auto best = oracle::best_binarization(spec, in.labels, in.scores, in.groups);
            if (!best.found) continue;
            const auto got = select_threshold(spec, in.labels, in.scores, in.groups);
            CHECK(got.objective == best.objective);
            CHECK(std::abs(got.bias_value) == best.abs_bias);
            CHECK(got.performance == best.performance);
            // The chosen threshold reproduces the reported values.
            const auto rep = evaluate_scores(spec, in.labels, in.scores, in.groups, got.threshold);
            CHECK(rep.objective == got.objective);
        }
    }
}

TEST_CASE("threshold selection on degenerate and separable scores") {
    ObjectiveSpec spec;
    const BinaryVector y{1, 0, 1, 0};
    const BinaryVector g{0, 0, 1, 1};
    const auto sep = select_threshold(spec, y, std::vector<double>{0.9, 0.1, 0.8, 0.2}, g);
    CHECK(sep.objective == 1.0);

    // Identical scores: only all-0 or all-1, both balanced accuracy 0.5 with zero SPD.
    const auto flat = select_threshold(spec, y, std::vector<double>{0.3, 0.3, 0.3, 0.3}, g);
    CHECK(flat.objective == 0.5);
    CHECK(flat.bias_value == 0.0);
}

TEST_CASE("binarize is strict") {
    const auto p = binarize(std::vector<double>{0.5, 0.50001, 0.0, 1.0}, 0.5);
    CHECK(p == BinaryVector{0, 1, 0, 1});
}
