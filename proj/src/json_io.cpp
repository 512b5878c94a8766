#include "intrafair/json_io.hpp"

#include "intrafair/error.hpp"

#include <fstream>

namespace intrafair {

namespace {

Json optional_rate(const GroupRates& r, double (GroupRates::*rate)(int) const, int g) {
    try {
        return (r.*rate)(g);
    } catch (const UndefinedRateError&) {
        return nullptr;
    }
}

Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

}  // namespace

Json to_json(const EvalReport& report) {
    Json groups = Json::array();
    for (int g = 0; g < 2; ++g) {
        const auto& c = report.group_rates.counts[static_cast<std::size_t>(g)];
        groups.push_back({{"group", g},
                          {"counts", {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}}},
                          {"positive_rate", optional_rate(report.group_rates, &GroupRates::positive_rate, g)},
                          {"tpr", optional_rate(report.group_rates, &GroupRates::tpr, g)},
                          {"fpr", optional_rate(report.group_rates, &GroupRates::fpr, g)}});
    }
    return {{"bias_kind", to_string(report.bias_kind)},
            {"bias", number(report.bias_value)},
            {"performance", number(report.performance)},
            {"objective", number(report.objective)},
            {"threshold", report.threshold},
            {"groups", groups}};
}

Json to_json(const TraceEntry& e) {
    Json j{{"iteration", e.iteration},
           {"objective", number(e.objective)},
           {"bias", number(e.bias_value)},
           {"performance", number(e.performance)},
           {"threshold", e.threshold}};
    if (e.layer >= 0) j["layer"] = e.layer;
    return j;
}

Json to_json(const MethodOutcome& o) {
    Json j{{"method", to_string(o.method)}, {"threshold", o.threshold}, {"valid", to_json(o.valid)}, {"test", to_json(o.test)}};
    if (o.rule) j["rule"] = Json::parse(rule_to_string(*o.rule));
    Json trace = Json::array();
    for (const auto& e : o.trace) trace.push_back(to_json(e));
    j["trace"] = trace;
    return j;
}

Json to_json(const TrialResult& t) {
    Json j{{"method", to_string(t.method)}, {"seed", t.seed}, {"status", t.outcome ? "ok" : "failed"}};
    if (t.outcome) {
        const Json o = to_json(*t.outcome);
        for (const auto& item : o.items()) {
            if (item.key() != "method") j[item.key()] = item.value();
        }
    } else {
        j["error"] = t.error;
    }
    return j;
}

Json to_json(const AggregateRow& row) {
    return {{"method", to_string(row.method)},
            {"trials", row.trials},
            {"failed", row.failed},
            {"bias_mean", number(row.bias_mean)},
            {"bias_std", number(row.bias_std)},
            {"objective_median", number(row.objective_median)},
            {"performance_mean", number(row.performance_mean)},
            {"default_positive", row.default_positive}};
}

Json to_json(const VarianceReport& r) {
    Json nets = Json::array();
    for (const auto& n : r.networks) {
        nets.push_back({{"seed", n.seed},
                        {"aod", number(n.aod)},
                        {"eod", number(n.eod)},
                        {"spd", number(n.spd)},
                        {"accuracy", number(n.accuracy)}});
    }
    auto summary = [](const MeasureSummary& s) { return Json{{"mean", number(s.mean)}, {"std", number(s.std)}}; };
    return {{"networks", nets},
            {"aod", summary(r.aod)},
            {"eod", summary(r.eod)},
            {"spd", summary(r.spd)},
            {"accuracy", summary(r.accuracy)},
            {"single_network", r.single_network}};
}

Json to_json(const SensitivityReport& r) {
    Json nets = Json::array();
    for (const auto& n : r.networks) {
        nets.push_back({{"seed", n.seed},
                        {"r2", number(n.r2)},
                        {"holdout_r2", number(n.holdout_r2)},
                        {"ridge_used", n.ridge_used},
                        {"sorted_abs_coef", n.sorted_abs_coef}});
    }
    return {{"networks", nets}, {"singular_values", r.singular_values}};
}

Json to_json(const TrainResult& r) {
    Json history = Json::array();
    for (const auto& e : r.history) {
        history.push_back({{"epoch", e.epoch}, {"train_loss", number(e.train_loss)}, {"valid_loss", number(e.valid_loss)}});
    }
    return {{"best_epoch", r.best_epoch}, {"epochs_run", r.epochs_run}, {"history", history}};
}

void write_json(const Json& j, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace intrafair
