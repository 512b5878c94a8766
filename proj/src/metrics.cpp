#include "intrafair/metrics.hpp"

#include "intrafair/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <vector>

namespace intrafair {

namespace {

const char* group_name(int g) { return g == 0 ? "group 0" : "group 1"; }

double require(const std::optional<double>& v, const char* rate, int group) {
    if (!v) {
        throw UndefinedRateError(std::string(rate) + " undefined for " + group_name(group) +
                                 " (empty conditioning set)");
    }
    return *v;
}

void check_lengths(std::size_t a, std::size_t b, std::size_t c) {
    if (a != b || a != c) throw ShapeError("labels, predictions and groups must have equal length");
}

std::optional<double> ratio(std::int64_t num, std::int64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::string to_string(BiasKind kind) {
    switch (kind) {
        case BiasKind::spd: return "spd";
        case BiasKind::eod: return "eod";
        case BiasKind::aod: return "aod";
    }
    return "spd";
}

BiasKind parse_bias_kind(const std::string& name) {
    std::string s = name;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (s == "spd") return BiasKind::spd;
    if (s == "eod") return BiasKind::eod;
    if (s == "aod") return BiasKind::aod;
    throw ValidationError("unknown bias measure '" + name + "' (expected spd, eod or aod)");
}

GroupCounts count_groups(std::span<const int> labels, std::span<const int> predictions, std::span<const int> groups) {
    check_lengths(labels.size(), predictions.size(), groups.size());
    GroupCounts c{};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        const int p = predictions[i];
        const int g = groups[i];
        if ((y != 0 && y != 1) || (p != 0 && p != 1) || (g != 0 && g != 1)) {
            throw ValidationError("labels, predictions and groups must be 0/1 (row " + std::to_string(i) + ")");
        }
        auto& cell = c[static_cast<std::size_t>(g)];
        if (y == 1) {
            (p == 1 ? cell.tp : cell.fn) += 1;
        } else {
            (p == 1 ? cell.fp : cell.tn) += 1;
        }
    }
    return c;
}

double GroupRates::tpr(int g) const { return require(tpr_.at(static_cast<std::size_t>(g)), "TPR", g); }
double GroupRates::fpr(int g) const { return require(fpr_.at(static_cast<std::size_t>(g)), "FPR", g); }
double GroupRates::tnr(int g) const { return require(tnr_.at(static_cast<std::size_t>(g)), "TNR", g); }
double GroupRates::fnr(int g) const { return require(fnr_.at(static_cast<std::size_t>(g)), "FNR", g); }

double GroupRates::positive_rate(int g) const {
    const auto& c = counts.at(static_cast<std::size_t>(g));
    return require(ratio(c.predicted_positive(), c.total()), "positive rate", g);
}

GroupRates GroupRates::from_counts(const GroupCounts& counts) {
    GroupRates r;
    r.counts = counts;
    for (std::size_t g = 0; g < 2; ++g) {
        const auto& c = counts[g];
        r.tpr_[g] = ratio(c.tp, c.positives());
        r.fnr_[g] = ratio(c.fn, c.positives());
        r.fpr_[g] = ratio(c.fp, c.negatives());
        r.tnr_[g] = ratio(c.tn, c.negatives());
    }
    return r;
}

GroupRates group_rates(std::span<const int> labels, std::span<const int> predictions, std::span<const int> groups) {
    return GroupRates::from_counts(count_groups(labels, predictions, groups));
}

double bias_from_counts(BiasKind kind, const GroupCounts& counts) {
    const auto r = GroupRates::from_counts(counts);
    switch (kind) {
        case BiasKind::spd: return r.positive_rate(0) - r.positive_rate(1);
        case BiasKind::eod: return r.tpr(0) - r.tpr(1);
        case BiasKind::aod: return ((r.fpr(0) - r.fpr(1)) + (r.tpr(0) - r.tpr(1))) / 2.0;
    }
    return 0.0;
}

double bias(BiasKind kind, std::span<const int> labels, std::span<const int> predictions, std::span<const int> groups) {
    return bias_from_counts(kind, count_groups(labels, predictions, groups));
}

double balanced_accuracy_from_counts(const GroupCounts& counts) {
    const std::int64_t tp = counts[0].tp + counts[1].tp;
    const std::int64_t fn = counts[0].fn + counts[1].fn;
    const std::int64_t tn = counts[0].tn + counts[1].tn;
    const std::int64_t fp = counts[0].fp + counts[1].fp;
    if (tp + fn == 0 || tn + fp == 0) {
        throw UndefinedRateError("balanced accuracy undefined: labels contain a single class");
    }
    const double tpr = static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double tnr = static_cast<double>(tn) / static_cast<double>(tn + fp);
    return (tpr + tnr) / 2.0;
}

double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions) {
    std::vector<int> zeros(labels.size(), 0);
    return balanced_accuracy_from_counts(count_groups(labels, predictions, zeros));
}

void ObjectiveSpec::validate() const {
    if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ValidationError("epsilon must be in (0, 1]");
}

double objective_value(const ObjectiveSpec& spec, double bias_value, double performance) {
    return std::abs(bias_value) < spec.epsilon ? performance : 0.0;
}

double objective(const ObjectiveSpec& spec, std::span<const int> labels, std::span<const int> predictions,
                 std::span<const int> groups) {
    const auto counts = count_groups(labels, predictions, groups);
    return objective_value(spec, bias_from_counts(spec.bias, counts), balanced_accuracy_from_counts(counts));
}

BinaryVector binarize(std::span<const double> scores, double threshold) {
    BinaryVector out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > threshold ? 1 : 0;
    return out;
}

BinaryVector binarize(const Vector& scores, double threshold) {
    return binarize(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), threshold);
}

EvalReport evaluate_predictions(const ObjectiveSpec& spec, std::span<const int> labels,
                                std::span<const int> predictions, std::span<const int> groups, double threshold) {
    const auto counts = count_groups(labels, predictions, groups);
    EvalReport r;
    r.bias_kind = spec.bias;
    r.bias_value = bias_from_counts(spec.bias, counts);
    r.performance = balanced_accuracy_from_counts(counts);
    r.objective = objective_value(spec, r.bias_value, r.performance);
    r.threshold = threshold;
    r.group_rates = GroupRates::from_counts(counts);
    return r;
}

EvalReport evaluate_scores(const ObjectiveSpec& spec, std::span<const int> labels, std::span<const double> scores,
                           std::span<const int> groups, double threshold) {
    const auto preds = binarize(scores, threshold);
    return evaluate_predictions(spec, labels, preds, groups, threshold);
}

bool better_candidate(double objective_a, double bias_a, double perf_a, double objective_b, double bias_b,
                      double perf_b) {
    if (objective_a != objective_b) return objective_a > objective_b;
    if (std::abs(bias_a) != std::abs(bias_b)) return std::abs(bias_a) < std::abs(bias_b);
    return perf_a > perf_b;
}

ThresholdChoice select_threshold(const ObjectiveSpec& spec, std::span<const int> labels,
                                 std::span<const double> scores, std::span<const int> groups) {
    check_lengths(labels.size(), scores.size(), groups.size());
    const std::size_t n = scores.size();
    for (double s : scores) {
        if (!(s >= 0.0 && s <= 1.0)) throw ValidationError("scores must lie in [0,1]");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Start at tau = 0: everything with score > 0 is predicted positive.
    auto preds = binarize(scores, 0.0);
    GroupCounts counts = count_groups(labels, preds, groups);

    auto consider = [&](double tau, ThresholdChoice& best, bool first) {
        const double b = bias_from_counts(spec.bias, counts);
        const double perf = balanced_accuracy_from_counts(counts);
        const double phi = objective_value(spec, b, perf);
        // Thresholds are visited in increasing order, so strict improvement keeps the smallest tau.
        if (first || better_candidate(phi, b, perf, best.objective, best.bias_value, best.performance)) {
            best = {tau, phi, b, perf};
        }
    };

    // Moves every example with score == value from predicted positive to negative.
    auto demote = [&](std::size_t i) {
        if (preds[i] == 0) return;
        preds[i] = 0;
        auto& cell = counts[static_cast<std::size_t>(groups[i])];
        if (labels[i] == 1) {
            --cell.tp;
            ++cell.fn;
        } else {
            --cell.fp;
            ++cell.tn;
        }
    };

    ThresholdChoice best;
    consider(0.0, best, true);
    std::size_t k = 0;
    while (k < n) {
        const double value = scores[order[k]];
        std::size_t j = k;
        while (j < n && scores[order[j]] == value) demote(order[j++]);
        double tau = 1.0;
        if (j < n) {
            const double next = scores[order[j]];
            tau = value + (next - value) / 2.0;
            // Adjacent doubles: the midpoint may round up onto `next`.
            if (!(tau < next)) tau = value;
        }
        consider(tau, best, false);
        k = j;
    }
    return best;
}

ThresholdChoice select_threshold(const ObjectiveSpec& spec, std::span<const int> labels, const Vector& scores,
                                 std::span<const int> groups) {
    return select_threshold(spec, labels, std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())),
                            groups);
}

}  // namespace intrafair
