#pragma once

#include "intrafair/metrics.hpp"
#include "intrafair/rng.hpp"
#include "intrafair/types.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>

namespace intrafair {

enum class PostprocKind { reject_option, eq_odds, calibrated_eq_odds };

std::string to_string(PostprocKind kind);
PostprocKind parse_postproc_kind(const std::string& name);

enum class CostKind { fpr, fnr, weighted };

std::string to_string(CostKind kind);
CostKind parse_cost_kind(const std::string& name);

struct RejectOptionParams {
    double threshold = 0.5;
    double halfwidth = 0.0;
    int favored_group = 1;  // receives positive predictions inside the band

    bool operator==(const RejectOptionParams&) const = default;
};

/// flip[a][yhat]: probability of flipping a thresholded prediction yhat in group a.
struct EqOddsParams {
    double threshold = 0.5;
    std::array<std::array<double, 2>, 2> flip{};
    bool feasible = true;
    double violation = 0.0;  // max(|dTPR|, |dFPR|) in expectation on the fitting set

    bool operator==(const EqOddsParams&) const = default;
};

/// With probability withhold[a], a group-a score is replaced by base_rate[a].
struct CalibratedEqOddsParams {
    double threshold = 0.5;
    CostKind cost = CostKind::fnr;
    std::array<double, 2> withhold{};
    std::array<double, 2> base_rate{};
    std::array<double, 2> group_cost{};

    bool operator==(const CalibratedEqOddsParams&) const = default;
};

struct PostprocRule {
    PostprocKind kind = PostprocKind::reject_option;
    RejectOptionParams reject_option;
    EqOddsParams eq_odds;
    CalibratedEqOddsParams calibrated;
    Seed seed = 0;

    bool randomized() const { return kind != PostprocKind::reject_option; }
    void validate() const;
    bool operator==(const PostprocRule&) const = default;
};

struct RejectOptionConfig {
    int favored_group = 1;
    double max_halfwidth = 0.5;
    double halfwidth_step = 0.01;
    double threshold_step = 0.01;
};

/// Grid search over band halfwidth and base threshold maximising the objective.
PostprocRule fit_reject_option(std::span<const double> scores, std::span<const int> labels, std::span<const int> groups,
                               const ObjectiveSpec& spec, const RejectOptionConfig& cfg = {});

/// Deterministic reject-option predictions.
BinaryVector apply_reject_option(const RejectOptionParams& p, std::span<const double> scores,
                                 std::span<const int> groups);

struct EqOddsConfig {
    double threshold = 0.5;
    double tolerance = 1e-2;
    double grid_step = 0.02;
};

/// Expected per-group (TPR, FPR) after flipping with `flip`, from confusion counts.
struct ExpectedRates {
    std::array<double, 2> tpr{};
    std::array<double, 2> fpr{};
    double error = 0.0;
};
ExpectedRates eq_odds_expected_rates(const std::array<std::array<double, 2>, 2>& flip, const GroupCounts& counts);

PostprocRule fit_eq_odds(std::span<const double> scores, std::span<const int> labels, std::span<const int> groups,
                         Seed seed, const EqOddsConfig& cfg = {});

struct CalibratedEqOddsConfig {
    CostKind cost = CostKind::fnr;
    double threshold = 0.5;
};

/// Generalised cost of scores for one group: mean (1 - s) over positives (fnr),
/// mean s over negatives (fpr), or their base-rate weighted sum.
double generalized_cost(CostKind kind, std::span<const double> scores, std::span<const int> labels,
                        double weight_base_rate);

/// (c_high - c_low) / (c_trivial - c_low), clamped to [0, 1].
double mixing_probability(double cost_high, double cost_low, double cost_trivial_low);

PostprocRule fit_calibrated_eq_odds(std::span<const double> scores, std::span<const int> labels,
                                    std::span<const int> groups, Seed seed, const CalibratedEqOddsConfig& cfg = {});

/// Binary predictions from the rule; labels are never consulted.
BinaryVector apply(const PostprocRule& rule, std::span<const double> scores, std::span<const int> groups, Seed seed);
BinaryVector apply(const PostprocRule& rule, std::span<const double> scores, std::span<const int> groups);

std::string rule_to_string(const PostprocRule& rule);
PostprocRule rule_from_string(const std::string& text);
void save_rule(const PostprocRule& rule, const std::filesystem::path& path);
PostprocRule load_rule(const std::filesystem::path& path);

struct ScoreTable {
    std::vector<double> scores;
    BinaryVector labels;
    BinaryVector groups;
};

/// CSV with header columns score, label, protected (any order).
ScoreTable load_scores_csv(const std::filesystem::path& path);

}  // namespace intrafair
