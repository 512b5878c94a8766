#pragma once

#include "intrafair/types.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

namespace intrafair {

enum class BiasKind { spd, eod, aod };

std::string to_string(BiasKind kind);
BiasKind parse_bias_kind(const std::string& name);

struct Confusion {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t tn = 0;
    std::int64_t fn = 0;

    std::int64_t positives() const { return tp + fn; }
    std::int64_t negatives() const { return tn + fp; }
    std::int64_t predicted_positive() const { return tp + fp; }
    std::int64_t total() const { return tp + fp + tn + fn; }
    bool operator==(const Confusion&) const = default;
};

/// Confusion counts per protected group (index = group value).
using GroupCounts = std::array<Confusion, 2>;

GroupCounts count_groups(std::span<const int> labels, std::span<const int> predictions, std::span<const int> groups);

/// Group-conditional rates. A rate is empty when its conditioning set is empty;
/// the accessors throw UndefinedRateError in that case.
struct GroupRates {
    GroupCounts counts{};
    std::array<std::optional<double>, 2> tpr_{};
    std::array<std::optional<double>, 2> fpr_{};
    std::array<std::optional<double>, 2> tnr_{};
    std::array<std::optional<double>, 2> fnr_{};

    double tpr(int group) const;
    double fpr(int group) const;
    double tnr(int group) const;
    double fnr(int group) const;
    /// P(prediction = 1 | group). Throws if the group is empty.
    double positive_rate(int group) const;

    static GroupRates from_counts(const GroupCounts& counts);
};

GroupRates group_rates(std::span<const int> labels, std::span<const int> predictions, std::span<const int> groups);

/// Signed bias: SPD = P(1|a=0) - P(1|a=1); EOD = TPR0 - TPR1; AOD = mean of FPR and TPR gaps.
double bias(BiasKind kind, std::span<const int> labels, std::span<const int> predictions, std::span<const int> groups);
double bias_from_counts(BiasKind kind, const GroupCounts& counts);

/// (TPR + TNR) / 2 over the whole dataset.
double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions);
double balanced_accuracy_from_counts(const GroupCounts& counts);

/// Bias measure, constraint level and (implicitly) balanced accuracy as performance.
struct ObjectiveSpec {
    BiasKind bias = BiasKind::spd;
    double epsilon = 0.05;

    void validate() const;
};

/// rho if |bias| < epsilon, else 0.
double objective_value(const ObjectiveSpec& spec, double bias_value, double performance);
double objective(const ObjectiveSpec& spec, std::span<const int> labels, std::span<const int> predictions,
                 std::span<const int> groups);

struct EvalReport {
    BiasKind bias_kind = BiasKind::spd;
    double bias_value = 0.0;
    double performance = 0.0;
    double objective = 0.0;
    double threshold = 0.5;
    GroupRates group_rates;
};

/// Predictions are 1{score > threshold}.
BinaryVector binarize(std::span<const double> scores, double threshold);
BinaryVector binarize(const Vector& scores, double threshold);

EvalReport evaluate_predictions(const ObjectiveSpec& spec, std::span<const int> labels,
                                std::span<const int> predictions, std::span<const int> groups, double threshold);
EvalReport evaluate_scores(const ObjectiveSpec& spec, std::span<const int> labels, std::span<const double> scores,
                           std::span<const int> groups, double threshold);

struct ThresholdChoice {
    double threshold = 0.0;
    double objective = 0.0;
    double bias_value = 0.0;
    double performance = 0.0;
};

/// Ordering used everywhere a candidate is selected: higher objective, then
/// smaller |bias|, then higher performance. Ties are left to the caller.
bool better_candidate(double objective_a, double bias_a, double perf_a, double objective_b, double bias_b,
                      double perf_b);

/// Maximises the objective over thresholds {0, 1} and midpoints of consecutive
/// distinct scores, which covers every binarisation reachable with tau in [0,1].
/// Ties go to smaller |bias|, then higher performance, then smaller tau.
ThresholdChoice select_threshold(const ObjectiveSpec& spec, std::span<const int> labels,
                                 std::span<const double> scores, std::span<const int> groups);
ThresholdChoice select_threshold(const ObjectiveSpec& spec, std::span<const int> labels, const Vector& scores,
                                 std::span<const int> groups);

}  // namespace intrafair
