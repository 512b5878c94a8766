#include "intrafair/postproc.hpp"

#include "intrafair/error.hpp"
#include "intrafair/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace intrafair {

namespace {

using json = nlohmann::json;

void check_inputs(std::span<const double> scores, std::span<const int> groups, std::size_t labels_size) {
    if (scores.size() != groups.size() || (labels_size != std::size_t(-1) && labels_size != scores.size())) {
        throw ShapeError("scores, labels and groups must have equal length");
    }
    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (groups[i] != 0 && groups[i] != 1) {
            throw ValidationError("protected attribute must be 0/1, found " + std::to_string(groups[i]) + " at row " +
                                  std::to_string(i));
        }
        if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) {
            throw ValidationError("scores must lie in [0,1] (row " + std::to_string(i) + ")");
        }
    }
}

// Per-example uniform draw: a pure function of (seed, index).
double uniform_at(Seed seed, std::size_t i) {
    return static_cast<double>(derive_seed(seed, i) >> 11) * 0x1.0p-53;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

}  // namespace

std::string to_string(PostprocKind kind) {
    switch (kind) {
        case PostprocKind::reject_option: return "reject_option";
        case PostprocKind::eq_odds: return "eq_odds";
        case PostprocKind::calibrated_eq_odds: return "calibrated_eq_odds";
    }
    return "reject_option";
}

PostprocKind parse_postproc_kind(const std::string& name) {
    const auto s = lower(name);
    if (s == "reject_option" || s == "roc") return PostprocKind::reject_option;
    if (s == "eq_odds" || s == "eqodds") return PostprocKind::eq_odds;
    if (s == "calibrated_eq_odds" || s == "calib-eqodds") return PostprocKind::calibrated_eq_odds;
    throw ValidationError("unknown post-processing rule '" + name + "'");
}

std::string to_string(CostKind kind) {
    switch (kind) {
        case CostKind::fpr: return "fpr";
        case CostKind::fnr: return "fnr";
        case CostKind::weighted: return "weighted";
    }
    return "fnr";
}

CostKind parse_cost_kind(const std::string& name) {
    const auto s = lower(name);
    if (s == "fpr") return CostKind::fpr;
    if (s == "fnr") return CostKind::fnr;
    if (s == "weighted") return CostKind::weighted;
    throw ValidationError("unknown cost '" + name + "' (expected fpr, fnr or weighted)");
}

void PostprocRule::validate() const {
    bool ok = true;
    switch (kind) {
        case PostprocKind::reject_option:
            ok = is_probability(reject_option.threshold) && reject_option.halfwidth >= 0.0 &&
                 (reject_option.favored_group == 0 || reject_option.favored_group == 1);
            break;
        case PostprocKind::eq_odds:
            ok = is_probability(eq_odds.threshold);
            for (const auto& row : eq_odds.flip)
                for (double p : row) ok = ok && is_probability(p);
            break;
        case PostprocKind::calibrated_eq_odds:
            ok = is_probability(calibrated.threshold);
            for (int a = 0; a < 2; ++a) {
                ok = ok && is_probability(calibrated.withhold[a]) && is_probability(calibrated.base_rate[a]);
            }
            break;
    }
    if (!ok) throw ValidationError("post-processing rule has parameters outside [0,1]");
}

// ---------------------------------------------------------------------------
// Reject option

BinaryVector apply_reject_option(const RejectOptionParams& p, std::span<const double> scores,
                                 std::span<const int> groups) {
    check_inputs(scores, groups, std::size_t(-1));
    BinaryVector out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double s = scores[i];
        if (p.halfwidth > 0.0 && s >= p.threshold - p.halfwidth && s <= p.threshold + p.halfwidth) {
            out[i] = groups[i] == p.favored_group ? 1 : 0;
        } else {
            out[i] = s > p.threshold ? 1 : 0;
        }
    }
    return out;
}

PostprocRule fit_reject_option(std::span<const double> scores, std::span<const int> labels, std::span<const int> groups,
                               const ObjectiveSpec& spec, const RejectOptionConfig& cfg) {
    spec.validate();
    check_inputs(scores, groups, labels.size());
    if (cfg.favored_group != 0 && cfg.favored_group != 1) throw ValidationError("favored group must be 0 or 1");
    if (!(cfg.halfwidth_step > 0.0 && cfg.threshold_step > 0.0)) throw ValidationError("grid steps must be positive");

    const auto n_w = static_cast<std::size_t>(std::llround(cfg.max_halfwidth / cfg.halfwidth_step));
    const auto n_t = static_cast<std::size_t>(std::llround(1.0 / cfg.threshold_step));

    PostprocRule best;
    best.kind = PostprocKind::reject_option;
    ThresholdChoice best_choice;
    bool first = true;
    for (std::size_t k = 0; k <= n_w; ++k) {
        for (std::size_t t = 1; t < n_t; ++t) {
            RejectOptionParams p{static_cast<double>(t) * cfg.threshold_step, static_cast<double>(k) * cfg.halfwidth_step,
                                 cfg.favored_group};
            const auto preds = apply_reject_option(p, scores, groups);
            const auto counts = count_groups(labels, preds, groups);
            const double b = bias_from_counts(spec.bias, counts);
            const double perf = balanced_accuracy_from_counts(counts);
            const double phi = objective_value(spec, b, perf);
            if (first || better_candidate(phi, b, perf, best_choice.objective, best_choice.bias_value,
                                          best_choice.performance)) {
                best_choice = {p.threshold, phi, b, perf};
                best.reject_option = p;
                first = false;
            }
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Equalized odds

ExpectedRates eq_odds_expected_rates(const std::array<std::array<double, 2>, 2>& flip, const GroupCounts& counts) {
    ExpectedRates r;
    double errors = 0.0;
    double total = 0.0;
    for (std::size_t a = 0; a < 2; ++a) {
        const auto& c = counts[a];
        const double keep1 = 1.0 - flip[a][1];
        const double flip0 = flip[a][0];
        const double tp = static_cast<double>(c.tp) * keep1 + static_cast<double>(c.fn) * flip0;
        const double fp = static_cast<double>(c.fp) * keep1 + static_cast<double>(c.tn) * flip0;
        const double pos = static_cast<double>(c.positives());
        const double neg = static_cast<double>(c.negatives());
        r.tpr[a] = pos > 0 ? tp / pos : 0.0;
        r.fpr[a] = neg > 0 ? fp / neg : 0.0;
        errors += (pos - tp) + fp;
        total += pos + neg;
    }
    r.error = total > 0 ? errors / total : 0.0;
    return r;
}

PostprocRule fit_eq_odds(std::span<const double> scores, std::span<const int> labels, std::span<const int> groups,
                         Seed seed, const EqOddsConfig& cfg) {
    check_inputs(scores, groups, labels.size());
    if (!(cfg.grid_step > 0.0 && cfg.grid_step <= 1.0)) throw ValidationError("eq-odds grid step must be in (0,1]");
    const auto counts = count_groups(labels, binarize(scores, cfg.threshold), groups);
    for (int a = 0; a < 2; ++a) {
        if (counts[a].positives() == 0 || counts[a].negatives() == 0) {
            throw UndefinedRateError("equalized odds needs positives and negatives in both groups (group " +
                                     std::to_string(a) + ")");
        }
    }
    const auto steps = static_cast<std::size_t>(std::llround(1.0 / cfg.grid_step));
    auto grid = [&](std::size_t k) { return static_cast<double>(k) / static_cast<double>(steps); };

    // Per-group expected (tp, fp) counts are separable; enumerate each group's grid once.
    struct Cell {
        double p0, p1, tpr, fpr, errors;
    };
    std::array<std::vector<Cell>, 2> cells;
    for (std::size_t a = 0; a < 2; ++a) {
        const auto& c = counts[a];
        const double pos = static_cast<double>(c.positives());
        const double neg = static_cast<double>(c.negatives());
        for (std::size_t i = 0; i <= steps; ++i) {
            for (std::size_t j = 0; j <= steps; ++j) {
                const double p0 = grid(i);
                const double p1 = grid(j);
                const double tp = static_cast<double>(c.tp) * (1.0 - p1) + static_cast<double>(c.fn) * p0;
                const double fp = static_cast<double>(c.fp) * (1.0 - p1) + static_cast<double>(c.tn) * p0;
                cells[a].push_back({p0, p1, tp / pos, fp / neg, (pos - tp) + fp});
            }
        }
    }
    const double n = static_cast<double>(scores.size());

    // Feasible: minimise error, then total flip mass (identity first), then grid order.
    // Infeasible: minimise the violation.
    double best_err = std::numeric_limits<double>::infinity();
    double best_mass = std::numeric_limits<double>::infinity();
    double best_violation = std::numeric_limits<double>::infinity();
    const Cell* b0 = nullptr;
    const Cell* b1 = nullptr;
    bool feasible_found = false;
    constexpr double tie = 1e-12;
    for (const auto& c0 : cells[0]) {
        for (const auto& c1 : cells[1]) {
            const double violation = std::max(std::abs(c0.tpr - c1.tpr), std::abs(c0.fpr - c1.fpr));
            const bool feasible = violation <= cfg.tolerance + tie;
            const double err = (c0.errors + c1.errors) / n;
            const double mass = c0.p0 + c0.p1 + c1.p0 + c1.p1;
            bool take = false;
            if (feasible) {
                if (!feasible_found) {
                    take = true;
                } else if (err < best_err - tie) {
                    take = true;
                } else if (err <= best_err + tie && mass < best_mass - tie) {
                    take = true;
                }
            } else if (!feasible_found) {
                take = violation < best_violation - tie ||
                       (violation <= best_violation + tie && err < best_err - tie);
            }
            if (take) {
                feasible_found = feasible_found || feasible;
                best_err = err;
                best_mass = mass;
                best_violation = violation;
                b0 = &c0;
                b1 = &c1;
            }
        }
    }

    PostprocRule rule;
    rule.kind = PostprocKind::eq_odds;
    rule.seed = seed;
    rule.eq_odds.threshold = cfg.threshold;
    rule.eq_odds.flip = {{{b0->p0, b0->p1}, {b1->p0, b1->p1}}};
    rule.eq_odds.feasible = feasible_found;
    rule.eq_odds.violation = best_violation;
    return rule;
}

// ---------------------------------------------------------------------------
// Calibrated equalized odds

double generalized_cost(CostKind kind, std::span<const double> scores, std::span<const int> labels,
                        double weight_base_rate) {
    if (scores.size() != labels.size()) throw ShapeError("scores and labels must have equal length");
    double fn_sum = 0.0;
    double fp_sum = 0.0;
    std::size_t pos = 0;
    std::size_t neg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 1) {
            fn_sum += 1.0 - scores[i];
            ++pos;
        } else {
            fp_sum += scores[i];
            ++neg;
        }
    }
    const double gfnr = pos ? fn_sum / static_cast<double>(pos) : 0.0;
    const double gfpr = neg ? fp_sum / static_cast<double>(neg) : 0.0;
    switch (kind) {
        case CostKind::fnr: return gfnr;
        case CostKind::fpr: return gfpr;
        case CostKind::weighted: return weight_base_rate * gfnr + (1.0 - weight_base_rate) * gfpr;
    }
    return gfnr;
}

double mixing_probability(double cost_high, double cost_low, double cost_trivial_low) {
    const double den = cost_trivial_low - cost_low;
    if (!(den > 0.0)) return 0.0;
    return std::clamp((cost_high - cost_low) / den, 0.0, 1.0);
}

PostprocRule fit_calibrated_eq_odds(std::span<const double> scores, std::span<const int> labels,
                                    std::span<const int> groups, Seed seed, const CalibratedEqOddsConfig& cfg) {
    check_inputs(scores, groups, labels.size());
    std::array<std::vector<double>, 2> s;
    std::array<std::vector<int>, 2> y;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        s[static_cast<std::size_t>(groups[i])].push_back(scores[i]);
        y[static_cast<std::size_t>(groups[i])].push_back(labels[i]);
        positives += labels[i] == 1;
    }
    for (int a = 0; a < 2; ++a) {
        if (s[a].empty()) throw UndefinedRateError("calibrated equalized odds: group " + std::to_string(a) + " is empty");
    }
    const double overall = static_cast<double>(positives) / static_cast<double>(scores.size());

    PostprocRule rule;
    rule.kind = PostprocKind::calibrated_eq_odds;
    rule.seed = seed;
    auto& p = rule.calibrated;
    p.cost = cfg.cost;
    p.threshold = cfg.threshold;
    std::array<double, 2> trivial{};
    for (std::size_t a = 0; a < 2; ++a) {
        double sum = 0.0;
        for (int v : y[a]) sum += v;
        p.base_rate[a] = sum / static_cast<double>(y[a].size());
        p.group_cost[a] = generalized_cost(cfg.cost, s[a], y[a], overall);
        const std::vector<double> constant(s[a].size(), p.base_rate[a]);
        trivial[a] = generalized_cost(cfg.cost, constant, y[a], overall);
    }
    if (std::abs(p.group_cost[0] - p.group_cost[1]) <= 1e-12) return rule;
    const std::size_t low = p.group_cost[0] < p.group_cost[1] ? 0 : 1;
    const std::size_t high = 1 - low;
    p.withhold[low] = mixing_probability(p.group_cost[high], p.group_cost[low], trivial[low]);
    return rule;
}

// ---------------------------------------------------------------------------
// Application

BinaryVector apply(const PostprocRule& rule, std::span<const double> scores, std::span<const int> groups, Seed seed) {
    rule.validate();
    check_inputs(scores, groups, std::size_t(-1));
    switch (rule.kind) {
        case PostprocKind::reject_option: return apply_reject_option(rule.reject_option, scores, groups);
        case PostprocKind::eq_odds: {
            const auto& p = rule.eq_odds;
            BinaryVector out(scores.size());
            for (std::size_t i = 0; i < scores.size(); ++i) {
                const int yhat = scores[i] > p.threshold ? 1 : 0;
                const double flip = p.flip[static_cast<std::size_t>(groups[i])][static_cast<std::size_t>(yhat)];
                out[i] = flip > 0.0 && uniform_at(seed, i) < flip ? 1 - yhat : yhat;
            }
            return out;
        }
        case PostprocKind::calibrated_eq_odds: {
            const auto& p = rule.calibrated;
            BinaryVector out(scores.size());
            for (std::size_t i = 0; i < scores.size(); ++i) {
                const auto a = static_cast<std::size_t>(groups[i]);
                double s = scores[i];
                if (p.withhold[a] > 0.0 && uniform_at(seed, i) < p.withhold[a]) s = p.base_rate[a];
                out[i] = s > p.threshold ? 1 : 0;
            }
            return out;
        }
    }
    return {};
}

BinaryVector apply(const PostprocRule& rule, std::span<const double> scores, std::span<const int> groups) {
    return apply(rule, scores, groups, rule.seed);
}

// ---------------------------------------------------------------------------
// Serialisation

std::string rule_to_string(const PostprocRule& rule) {
    json j;
    j["format"] = "intrafair-postproc-rule";
    j["version"] = 1;
    j["kind"] = to_string(rule.kind);
    j["seed"] = rule.seed;
    switch (rule.kind) {
        case PostprocKind::reject_option:
            j["threshold"] = rule.reject_option.threshold;
            j["halfwidth"] = rule.reject_option.halfwidth;
            j["favored_group"] = rule.reject_option.favored_group;
            break;
        case PostprocKind::eq_odds:
            j["threshold"] = rule.eq_odds.threshold;
            j["flip"] = rule.eq_odds.flip;
            j["feasible"] = rule.eq_odds.feasible;
            j["violation"] = rule.eq_odds.violation;
            break;
        case PostprocKind::calibrated_eq_odds:
            j["threshold"] = rule.calibrated.threshold;
            j["cost"] = to_string(rule.calibrated.cost);
            j["withhold"] = rule.calibrated.withhold;
            j["base_rate"] = rule.calibrated.base_rate;
            j["group_cost"] = rule.calibrated.group_cost;
            break;
    }
    return j.dump(2) + "\n";
}

PostprocRule rule_from_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw LoadError(std::string("post-processing rule: ") + e.what());
    }
    if (j.value("format", "") != "intrafair-postproc-rule") throw LoadError("not a post-processing rule file");
    if (j.value("version", 0) != 1) throw LoadError("unsupported rule version " + j.value("version", json(0)).dump());
    try {
        PostprocRule r;
        r.kind = parse_postproc_kind(j.at("kind").get<std::string>());
        r.seed = j.at("seed").get<Seed>();
        switch (r.kind) {
            case PostprocKind::reject_option:
                r.reject_option.threshold = j.at("threshold").get<double>();
                r.reject_option.halfwidth = j.at("halfwidth").get<double>();
                r.reject_option.favored_group = j.at("favored_group").get<int>();
                break;
            case PostprocKind::eq_odds:
                r.eq_odds.threshold = j.at("threshold").get<double>();
                r.eq_odds.flip = j.at("flip").get<std::array<std::array<double, 2>, 2>>();
                r.eq_odds.feasible = j.at("feasible").get<bool>();
                r.eq_odds.violation = j.at("violation").get<double>();
                break;
            case PostprocKind::calibrated_eq_odds:
                r.calibrated.threshold = j.at("threshold").get<double>();
                r.calibrated.cost = parse_cost_kind(j.at("cost").get<std::string>());
                r.calibrated.withhold = j.at("withhold").get<std::array<double, 2>>();
                r.calibrated.base_rate = j.at("base_rate").get<std::array<double, 2>>();
                r.calibrated.group_cost = j.at("group_cost").get<std::array<double, 2>>();
                break;
        }
        r.validate();
        return r;
    } catch (const json::exception& e) {
        throw LoadError(std::string("post-processing rule: ") + e.what());
    }
}

void save_rule(const PostprocRule& rule, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    out << rule_to_string(rule);
}

PostprocRule load_rule(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return rule_from_string(ss.str());
}

ScoreTable load_scores_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw SchemaError(path.string() + ": empty file");
    const auto header = split_csv_line(line);
    int col_score = -1, col_label = -1, col_group = -1;
    for (std::size_t c = 0; c < header.size(); ++c) {
        const auto name = lower(trim(header[c]));
        if (name == "score") col_score = static_cast<int>(c);
        if (name == "label") col_label = static_cast<int>(c);
        if (name == "protected") col_group = static_cast<int>(c);
    }
    if (col_score < 0 || col_label < 0 || col_group < 0) {
        throw SchemaError(path.string() + ": header must contain score, label and protected columns");
    }
    ScoreTable t;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != header.size()) {
            throw SchemaError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(f.size()) +
                              " fields, expected " + std::to_string(header.size()));
        }
        const auto s = parse_double(trim(f[static_cast<std::size_t>(col_score)]));
        const auto y = parse_double(trim(f[static_cast<std::size_t>(col_label)]));
        const auto a = parse_double(trim(f[static_cast<std::size_t>(col_group)]));
        if (!s || !(*s >= 0.0 && *s <= 1.0)) throw ValidationError("row " + std::to_string(row) + ": score must be in [0,1]");
        if (!y || (*y != 0.0 && *y != 1.0)) throw ValidationError("row " + std::to_string(row) + ": label must be 0/1");
        if (!a || (*a != 0.0 && *a != 1.0)) throw ValidationError("row " + std::to_string(row) + ": protected must be 0/1");
        t.scores.push_back(*s);
        t.labels.push_back(static_cast<int>(*y));
        t.groups.push_back(static_cast<int>(*a));
    }
    return t;
}

}  // namespace intrafair
