#include "intrafair/harness.hpp"

#include "intrafair/error.hpp"
#include "intrafair/json_io.hpp"
#include "intrafair/text.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

namespace intrafair {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct MethodName {
    MethodKind kind;
    const char* name;
};

constexpr MethodName kMethodNames[] = {
    {MethodKind::default_threshold, "default"}, {MethodKind::random, "random"},
    {MethodKind::layerwise, "layerwise"},       {MethodKind::adversarial, "adversarial"},
    {MethodKind::zhang, "zhang"},               {MethodKind::roc, "roc"},
    {MethodKind::eqodds, "eqodds"},             {MethodKind::calib_eqodds, "calib-eqodds"},
};

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::min(std::max<std::size_t>(workers, 1), std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw LoadError("cannot write " + path.string());
        out << text;
    }
    std::filesystem::rename(tmp, path);
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

double csv_number(double v, std::ostream& os) {
    if (std::isfinite(v)) os << format_double(v);
    return v;
}

// ---------------------------------------------------------------------------
// Config reading

/// Object reader that remembers which keys were consumed.
class Reader {
public:
    Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ValidationError(where_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key) || j_.at(key).is_null()) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const Json::exception& e) {
            throw ValidationError(where_ + "." + key + ": " + e.what());
        }
    }

    void get(const char* key, std::filesystem::path& out) {
        std::string s = out.string();
        get(key, s);
        out = s;
    }

    template <class T>
    void get(const char* key, std::optional<T>& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        if (j_.at(key).is_null()) {
            out.reset();
            return;
        }
        T v{};
        get(key, v);
        out = v;
    }

    std::optional<Reader> child(const char* key) {
        seen_.insert(key);
        if (!j_.contains(key) || j_.at(key).is_null()) return std::nullopt;
        return Reader(j_.at(key), where_ + "." + key);
    }

    void finish() const {
        for (const auto& item : j_.items()) {
            if (!seen_.count(item.key())) throw ValidationError(where_ + ": unknown key '" + item.key() + "'");
        }
    }

private:
    const Json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

Json acquisition_json(const AcquisitionSpec& a) { return {{"beta", a.beta}, {"pool_size", a.pool_size}}; }
Json gbrt_json(const GbrtConfig& g) {
    return {{"ensemble_size", g.ensemble_size},
            {"depth", g.depth},
            {"shrinkage", g.shrinkage},
            {"trees_per_model", g.trees_per_model},
            {"bootstrap", g.bootstrap}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Names

std::string to_string(MethodKind kind) {
    for (const auto& m : kMethodNames) {
        if (m.kind == kind) return m.name;
    }
    throw ValidationError("unknown method kind");
}

MethodKind parse_method_kind(const std::string& name) {
    for (const auto& m : kMethodNames) {
        if (name == m.name) return m.kind;
    }
    if (name == "calib_eqodds") return MethodKind::calib_eqodds;
    throw ValidationError("unknown method '" + name + "'");
}

bool is_postprocessing(MethodKind kind) {
    return kind == MethodKind::roc || kind == MethodKind::eqodds || kind == MethodKind::calib_eqodds;
}

const std::vector<MethodKind>& all_methods() {
    static const std::vector<MethodKind> methods = [] {
        std::vector<MethodKind> v;
        for (const auto& m : kMethodNames) v.push_back(m.kind);
        return v;
    }();
    return methods;
}

std::string to_string(DataSource::Kind kind) {
    switch (kind) {
        case DataSource::Kind::synthetic: return "synthetic";
        case DataSource::Kind::csv: return "csv";
        case DataSource::Kind::dump: return "dump";
    }
    throw ValidationError("unknown data source kind");
}

DataSource::Kind parse_source_kind(const std::string& name) {
    if (name == "synthetic") return DataSource::Kind::synthetic;
    if (name == "csv") return DataSource::Kind::csv;
    if (name == "dump") return DataSource::Kind::dump;
    throw ValidationError("unknown data source '" + name + "'");
}

DataSet load_source(const DataSource& source) {
    switch (source.kind) {
        case DataSource::Kind::synthetic: return generate_synthetic(source.synthetic);
        case DataSource::Kind::csv:
            if (source.schema.empty()) throw SchemaError("csv data source needs a schema file");
            return load_csv(source.path, CsvSchema::from_file(source.schema));
        case DataSource::Kind::dump: return load_dump(source.path);
    }
    throw ValidationError("unknown data source kind");
}

// ---------------------------------------------------------------------------
// Config

ObjectiveSpec ExperimentConfig::selection_spec() const {
    ObjectiveSpec s = objective;
    if (selection_epsilon) s.epsilon = *selection_epsilon;
    return s;
}

void ExperimentConfig::validate() const {
    objective.validate();
    selection_spec().validate();
    if (seeds.empty()) throw ValidationError("config: at least one seed is required");
    if (methods.empty()) throw ValidationError("config: at least one method is required");
    if (workers == 0) throw ValidationError("config: workers must be positive");
    if (data.kind != DataSource::Kind::synthetic && data.path.empty())
        throw ValidationError("config: data.path is required for " + to_string(data.kind) + " sources");
    method.adversarial.validate();
}

std::string config_to_json(const ExperimentConfig& cfg) {
    Json j;
    const auto& s = cfg.data.synthetic;
    j["data"] = {{"source", to_string(cfg.data.kind)},
                 {"path", cfg.data.path.string()},
                 {"schema", cfg.data.schema.string()},
                 {"synthetic",
                  {{"n", s.n},
                   {"d", s.d},
                   {"target_spd", s.target_spd},
                   {"group0_fraction", s.group0_fraction},
                   {"label_noise", s.label_noise},
                   {"signal", s.signal},
                   {"group_shift", s.group_shift},
                   {"seed", s.seed}}}};
    j["split"] = {{"fractions", cfg.split.fractions}, {"seed", cfg.split.seed}};
    j["arch"] = {{"hidden", cfg.arch.hidden}, {"dropout", cfg.arch.dropout}};
    j["train"] = {{"learning_rate", cfg.train.learning_rate},
                  {"batch_size", cfg.train.batch_size},
                  {"max_epochs", cfg.train.max_epochs},
                  {"patience", cfg.train.patience}};
    j["objective"] = {{"bias", to_string(cfg.objective.bias)}, {"epsilon", cfg.objective.epsilon}};
    j["selection_epsilon"] = cfg.selection_epsilon ? Json(*cfg.selection_epsilon) : Json(nullptr);
    Json methods = Json::array();
    for (auto m : cfg.methods) methods.push_back(to_string(m));
    j["methods"] = methods;

    const auto& m = cfg.method;
    j["random"] = {{"iterations", m.random.iterations}, {"noise_std", m.random.noise_std}};
    j["layerwise"] = {{"per_layer_budget", m.layerwise.per_layer_budget},
                      {"layer_budgets", m.layerwise.layer_budgets},
                      {"n_init", m.layerwise.n_init},
                      {"relative_halfwidth", m.layerwise.relative_halfwidth},
                      {"abs_halfwidth", m.layerwise.abs_halfwidth},
                      {"acquisition", acquisition_json(m.layerwise.acquisition)},
                      {"gbrt", gbrt_json(m.layerwise.gbrt)}};
    const auto& a = m.adversarial;
    j["adversarial"] = {{"lambda", a.lambda},
                        {"epsilon", a.epsilon},
                        {"delta", a.delta ? Json(*a.delta) : Json(nullptr)},
                        {"outer_iterations", a.outer_iterations},
                        {"critic_steps", a.critic_steps},
                        {"critic_warmup", a.critic_warmup},
                        {"actor_steps", a.actor_steps},
                        {"batch_size", a.batch_size},
                        {"actor_lr", a.actor_lr},
                        {"critic_lr", a.critic_lr},
                        {"critic_encoder", a.critic_encoder},
                        {"critic_hidden", a.critic_hidden},
                        {"critic_context", a.critic_context},
                        {"max_resample", a.max_resample},
                        {"actor_mode", a.actor_mode == Mode::train ? "train" : "eval"}};
    const auto& z = m.zhang;
    j["zhang"] = {{"alpha", z.alpha},
                  {"projection", z.projection},
                  {"use_label", z.use_label ? Json(*z.use_label) : Json(nullptr)},
                  {"outer_iterations", z.outer_iterations},
                  {"adversary_steps", z.adversary_steps},
                  {"actor_steps", z.actor_steps},
                  {"batch_size", z.batch_size},
                  {"actor_lr", z.actor_lr},
                  {"adversary_lr", z.adversary_lr},
                  {"max_resample", z.max_resample}};
    j["roc"] = {{"favored_group", m.reject_option.favored_group},
                {"max_halfwidth", m.reject_option.max_halfwidth},
                {"halfwidth_step", m.reject_option.halfwidth_step},
                {"threshold_step", m.reject_option.threshold_step}};
    j["eqodds"] = {{"threshold", m.eq_odds.threshold},
                   {"tolerance", m.eq_odds.tolerance},
                   {"grid_step", m.eq_odds.grid_step}};
    j["calib_eqodds"] = {{"cost", to_string(m.calibrated.cost)}, {"threshold", m.calibrated.threshold}};
    j["seeds"] = cfg.seeds;
    j["output_dir"] = cfg.output_dir.string();
    j["cache_dir"] = cfg.cache_dir.string();
    j["workers"] = cfg.workers;
    return j.dump(2) + "\n";
}

ExperimentConfig config_from_json(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::exception& e) {
        throw LoadError(std::string("config: ") + e.what());
    }
    ExperimentConfig cfg;
    Reader r(j, "config");

    if (auto d = r.child("data")) {
        std::string source = to_string(cfg.data.kind);
        d->get("source", source);
        cfg.data.kind = parse_source_kind(source);
        d->get("path", cfg.data.path);
        d->get("schema", cfg.data.schema);
        if (auto s = d->child("synthetic")) {
            auto& ss = cfg.data.synthetic;
            s->get("n", ss.n);
            s->get("d", ss.d);
            s->get("target_spd", ss.target_spd);
            s->get("group0_fraction", ss.group0_fraction);
            s->get("label_noise", ss.label_noise);
            s->get("signal", ss.signal);
            s->get("group_shift", ss.group_shift);
            s->get("seed", ss.seed);
            s->finish();
        }
        d->finish();
    }
    if (auto s = r.child("split")) {
        s->get("fractions", cfg.split.fractions);
        s->get("seed", cfg.split.seed);
        s->finish();
    }
    if (auto a = r.child("arch")) {
        a->get("hidden", cfg.arch.hidden);
        a->get("dropout", cfg.arch.dropout);
        a->finish();
    }
    if (auto t = r.child("train")) {
        t->get("learning_rate", cfg.train.learning_rate);
        t->get("batch_size", cfg.train.batch_size);
        t->get("max_epochs", cfg.train.max_epochs);
        t->get("patience", cfg.train.patience);
        t->finish();
    }
    if (auto o = r.child("objective")) {
        std::string bias = to_string(cfg.objective.bias);
        o->get("bias", bias);
        cfg.objective.bias = parse_bias_kind(bias);
        o->get("epsilon", cfg.objective.epsilon);
        o->finish();
    }
    r.get("selection_epsilon", cfg.selection_epsilon);
    {
        std::vector<std::string> names;
        r.get("methods", names);
        if (!names.empty()) {
            cfg.methods.clear();
            for (const auto& n : names) cfg.methods.push_back(parse_method_kind(n));
        }
    }

    auto& m = cfg.method;
    if (auto c = r.child("random")) {
        c->get("iterations", m.random.iterations);
        c->get("noise_std", m.random.noise_std);
        c->finish();
    }
    if (auto c = r.child("layerwise")) {
        auto& l = m.layerwise;
        c->get("per_layer_budget", l.per_layer_budget);
        c->get("layer_budgets", l.layer_budgets);
        c->get("n_init", l.n_init);
        c->get("relative_halfwidth", l.relative_halfwidth);
        c->get("abs_halfwidth", l.abs_halfwidth);
        if (auto a = c->child("acquisition")) {
            a->get("beta", l.acquisition.beta);
            a->get("pool_size", l.acquisition.pool_size);
            a->finish();
        }
        if (auto g = c->child("gbrt")) {
            g->get("ensemble_size", l.gbrt.ensemble_size);
            g->get("depth", l.gbrt.depth);
            g->get("shrinkage", l.gbrt.shrinkage);
            g->get("trees_per_model", l.gbrt.trees_per_model);
            g->get("bootstrap", l.gbrt.bootstrap);
            g->finish();
        }
        c->finish();
    }
    if (auto c = r.child("adversarial")) {
        auto& a = m.adversarial;
        c->get("lambda", a.lambda);
        c->get("epsilon", a.epsilon);
        c->get("delta", a.delta);
        c->get("outer_iterations", a.outer_iterations);
        c->get("critic_steps", a.critic_steps);
        c->get("critic_warmup", a.critic_warmup);
        c->get("actor_steps", a.actor_steps);
        c->get("batch_size", a.batch_size);
        c->get("actor_lr", a.actor_lr);
        c->get("critic_lr", a.critic_lr);
        c->get("critic_encoder", a.critic_encoder);
        c->get("critic_hidden", a.critic_hidden);
        c->get("critic_context", a.critic_context);
        c->get("max_resample", a.max_resample);
        std::string mode = a.actor_mode == Mode::train ? "train" : "eval";
        c->get("actor_mode", mode);
        if (mode != "train" && mode != "eval") throw ValidationError("config.adversarial.actor_mode: train or eval");
        a.actor_mode = mode == "train" ? Mode::train : Mode::eval;
        c->finish();
    }
    if (auto c = r.child("zhang")) {
        auto& z = m.zhang;
        c->get("alpha", z.alpha);
        c->get("projection", z.projection);
        c->get("use_label", z.use_label);
        c->get("outer_iterations", z.outer_iterations);
        c->get("adversary_steps", z.adversary_steps);
        c->get("actor_steps", z.actor_steps);
        c->get("batch_size", z.batch_size);
        c->get("actor_lr", z.actor_lr);
        c->get("adversary_lr", z.adversary_lr);
        c->get("max_resample", z.max_resample);
        c->finish();
    }
    if (auto c = r.child("roc")) {
        c->get("favored_group", m.reject_option.favored_group);
        c->get("max_halfwidth", m.reject_option.max_halfwidth);
        c->get("halfwidth_step", m.reject_option.halfwidth_step);
        c->get("threshold_step", m.reject_option.threshold_step);
        c->finish();
    }
    if (auto c = r.child("eqodds")) {
        c->get("threshold", m.eq_odds.threshold);
        c->get("tolerance", m.eq_odds.tolerance);
        c->get("grid_step", m.eq_odds.grid_step);
        c->finish();
    }
    if (auto c = r.child("calib_eqodds")) {
        std::string cost = to_string(m.calibrated.cost);
        c->get("cost", cost);
        m.calibrated.cost = parse_cost_kind(cost);
        c->get("threshold", m.calibrated.threshold);
        c->finish();
    }
    r.get("seeds", cfg.seeds);
    r.get("output_dir", cfg.output_dir);
    r.get("cache_dir", cfg.cache_dir);
    r.get("workers", cfg.workers);
    r.finish();
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return config_from_json(read_text(path)); }

// ---------------------------------------------------------------------------
// Baselines

PreparedData prepare_data(const ExperimentConfig& cfg) {
    const DataSet ds = load_source(cfg.data);
    return {split_standardize(ds, cfg.split), ds.content_hash()};
}

std::string baseline_key(const ExperimentConfig& cfg, std::uint64_t data_hash, Seed seed) {
    std::ostringstream os;
    os << "intrafair-baseline v" << kCheckpointVersion << "\n";
    os << "data " << hex(data_hash) << "\n";
    os << "split";
    for (double f : cfg.split.fractions) os << ' ' << format_double(f);
    os << " seed " << cfg.split.seed << "\n";
    os << "hidden";
    for (auto h : cfg.arch.hidden) os << ' ' << h;
    os << " dropout " << format_double(cfg.arch.dropout) << "\n";
    os << "train lr " << format_double(cfg.train.learning_rate) << " batch " << cfg.train.batch_size << " epochs "
       << cfg.train.max_epochs << " patience " << cfg.train.patience << "\n";
    os << "seed " << seed << "\n";
    return os.str();
}

Network baseline_network(const ExperimentConfig& cfg, const PreparedData& data, Seed seed) {
    const std::string key = baseline_key(cfg, data.hash, seed);
    std::filesystem::path model_path;
    std::filesystem::path key_path;
    if (!cfg.cache_dir.empty()) {
        const std::string stem = "baseline-" + hex(fnv1a(key));
        model_path = cfg.cache_dir / (stem + ".json");
        key_path = cfg.cache_dir / (stem + ".key");
        if (std::filesystem::exists(model_path) && std::filesystem::exists(key_path) && read_text(key_path) == key) {
            return load_checkpoint(model_path);
        }
    }
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    Network net = train(data.splits.train, data.splits.valid, cfg.arch, tc).network;
    if (!cfg.cache_dir.empty()) {
        write_text(model_path, checkpoint_to_string(net));
        write_text(key_path, key);
    }
    return net;
}

// ---------------------------------------------------------------------------
// Methods

Seed method_seed(Seed trial_seed, MethodKind kind) {
    return derive_seed(trial_seed, 0x6d00 + static_cast<std::uint64_t>(kind));
}

namespace {

double rule_threshold(const PostprocRule& rule) {
    switch (rule.kind) {
        case PostprocKind::reject_option: return rule.reject_option.threshold;
        case PostprocKind::eq_odds: return rule.eq_odds.threshold;
        case PostprocKind::calibrated_eq_odds: return rule.calibrated.threshold;
    }
    return 0.5;
}

EvalReport postproc_report(const PostprocRule& rule, const Network& net, const DataSet& ds, const ObjectiveSpec& spec) {
    const auto scores = to_std(forward(net, ds.features));
    const auto preds = apply(rule, scores, ds.groups);
    return evaluate_predictions(spec, ds.labels, preds, ds.groups, rule_threshold(rule));
}

}  // namespace

MethodOutcome run_method(MethodKind kind, const Network& baseline, const Splits& splits, const ExperimentConfig& cfg,
                         Seed trial_seed) {
    const ObjectiveSpec sel = cfg.selection_spec();
    const Seed seed = method_seed(trial_seed, kind);
    const DataSet& valid = splits.valid;
    MethodOutcome out;
    out.method = kind;

    if (is_postprocessing(kind)) {
        const auto scores = to_std(forward(baseline, valid.features));
        PostprocRule rule;
        switch (kind) {
            case MethodKind::roc: rule = fit_reject_option(scores, valid.labels, valid.groups, sel, cfg.method.reject_option); break;
            case MethodKind::eqodds: rule = fit_eq_odds(scores, valid.labels, valid.groups, seed, cfg.method.eq_odds); break;
            default: rule = fit_calibrated_eq_odds(scores, valid.labels, valid.groups, seed, cfg.method.calibrated); break;
        }
        out.threshold = rule_threshold(rule);
        out.valid = postproc_report(rule, baseline, valid, cfg.objective);
        out.test = postproc_report(rule, baseline, splits.test, cfg.objective);
        out.rule = rule;
        return out;
    }

    DebiasResult r;
    switch (kind) {
        case MethodKind::default_threshold: r = default_threshold_only(baseline, valid, sel); break;
        case MethodKind::random: {
            auto c = cfg.method.random;
            c.seed = seed;
            r = random_perturbation(baseline, valid, sel, c);
            break;
        }
        case MethodKind::layerwise: {
            auto c = cfg.method.layerwise;
            c.seed = seed;
            r = layerwise_optimization(baseline, valid, sel, c);
            break;
        }
        case MethodKind::adversarial: {
            auto c = cfg.method.adversarial;
            c.seed = seed;
            r = adversarial_finetune(baseline, valid, sel, c);
            break;
        }
        case MethodKind::zhang: {
            auto c = cfg.method.zhang;
            c.seed = seed;
            r = protected_attr_adversarial(baseline, valid, sel, c);
            break;
        }
        default: throw ValidationError("unhandled method " + to_string(kind));
    }
    out.threshold = r.threshold;
    out.valid = evaluate_network(r.network, valid, cfg.objective, r.threshold);
    out.test = evaluate_network(r.network, splits.test, cfg.objective, r.threshold);
    out.trace = std::move(r.trace);
    out.network = std::move(r.network);
    return out;
}

// ---------------------------------------------------------------------------
// Sweep

double median(std::vector<double> values) {
    if (values.empty()) return kNaN;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

double sample_std(std::span<const double> values) {
    const std::size_t n = values.size();
    if (n < 2) return 0.0;
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(n - 1));
}

std::vector<AggregateRow> aggregate_trials(const std::vector<MethodKind>& methods, const std::vector<TrialResult>& trials,
                                           const std::vector<double>& default_objectives) {
    std::vector<double> finite_defaults;
    for (double v : default_objectives) {
        if (std::isfinite(v)) finite_defaults.push_back(v);
    }
    const bool default_positive = !finite_defaults.empty() && median(finite_defaults) > 0.0;

    std::vector<AggregateRow> rows;
    for (auto m : methods) {
        AggregateRow row;
        row.method = m;
        row.default_positive = default_positive;
        std::vector<double> bias_values;
        std::vector<double> objectives;
        double perf = 0.0;
        for (const auto& t : trials) {
            if (t.method != m) continue;
            ++row.trials;
            if (!t.outcome) {
                ++row.failed;
                continue;
            }
            bias_values.push_back(t.outcome->test.bias_value);
            objectives.push_back(t.outcome->test.objective);
            perf += t.outcome->test.performance;
        }
        if (bias_values.empty()) {
            row.bias_mean = row.bias_std = row.objective_median = row.performance_mean = kNaN;
        } else {
            const auto k = static_cast<double>(bias_values.size());
            double sum = 0.0;
            for (double b : bias_values) sum += b;
            row.bias_mean = sum / k;
            row.bias_std = sample_std(bias_values);
            row.objective_median = median(objectives);
            row.performance_mean = perf / k;
        }
        rows.push_back(row);
    }
    return rows;
}

SweepResult run_sweep(const ExperimentConfig& cfg) {
    cfg.validate();
    const PreparedData data = prepare_data(cfg);
    const std::size_t n_seeds = cfg.seeds.size();

    std::vector<std::optional<Network>> baselines(n_seeds);
    std::vector<std::string> baseline_errors(n_seeds);
    std::vector<double> default_objectives(n_seeds, kNaN);
    parallel_for(n_seeds, cfg.workers, [&](std::size_t s) {
        try {
            baselines[s] = baseline_network(cfg, data, cfg.seeds[s]);
            default_objectives[s] =
                run_method(MethodKind::default_threshold, *baselines[s], data.splits, cfg, cfg.seeds[s]).test.objective;
        } catch (const std::exception& e) {
            baseline_errors[s] = e.what();
        }
    });

    SweepResult result;
    result.trials.resize(cfg.methods.size() * n_seeds);
    parallel_for(result.trials.size(), cfg.workers, [&](std::size_t cell) {
        const std::size_t s = cell % n_seeds;
        auto& trial = result.trials[cell];
        trial.method = cfg.methods[cell / n_seeds];
        trial.seed = cfg.seeds[s];
        if (!baselines[s]) {
            trial.error = "baseline: " + baseline_errors[s];
            return;
        }
        const auto t0 = std::chrono::steady_clock::now();
        try {
            trial.outcome = run_method(trial.method, *baselines[s], data.splits, cfg, trial.seed);
        } catch (const std::exception& e) {
            trial.error = e.what();
        }
        trial.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    });

    result.aggregate = aggregate_trials(cfg.methods, result.trials, default_objectives);
    if (!cfg.output_dir.empty()) write_sweep(cfg, result);
    return result;
}

void write_sweep(const ExperimentConfig& cfg, const SweepResult& result) {
    const auto& dir = cfg.output_dir;
    std::filesystem::create_directories(dir / "trials");
    write_text(dir / "config.json", config_to_json(cfg));

    std::ostringstream long_csv;
    long_csv << "method,seed,split,measure,value\n";
    std::ostringstream timing;
    timing << "method,seed,status,seconds\n";
    for (const auto& t : result.trials) {
        const std::string name = to_string(t.method);
        write_json(to_json(t), dir / "trials" / (name + "-seed" + std::to_string(t.seed) + ".json"));
        timing << name << ',' << t.seed << ',' << (t.outcome ? "ok" : "failed") << ',' << format_double(t.seconds)
               << '\n';
        if (!t.outcome) continue;
        for (const auto& [split, rep] : {std::pair{"valid", &t.outcome->valid}, std::pair{"test", &t.outcome->test}}) {
            for (const auto& [measure, value] : {std::pair{"bias", rep->bias_value},
                                                 std::pair{"performance", rep->performance},
                                                 std::pair{"objective", rep->objective},
                                                 std::pair{"threshold", rep->threshold}}) {
                long_csv << name << ',' << t.seed << ',' << split << ',' << measure << ',';
                csv_number(value, long_csv);
                long_csv << '\n';
            }
        }
    }
    write_text(dir / "long.csv", long_csv.str());
    write_text(dir / "timing.csv", timing.str());

    Json rows = Json::array();
    std::ostringstream agg;
    agg << "method,trials,failed,bias_mean,bias_std,objective_median,performance_mean,default_positive\n";
    for (const auto& row : result.aggregate) {
        rows.push_back(to_json(row));
        agg << to_string(row.method) << ',' << row.trials << ',' << row.failed << ',';
        csv_number(row.bias_mean, agg);
        agg << ',';
        csv_number(row.bias_std, agg);
        agg << ',';
        csv_number(row.objective_median, agg);
        agg << ',';
        csv_number(row.performance_mean, agg);
        agg << ',' << (row.default_positive ? 1 : 0) << '\n';
    }
    write_json({{"bias", to_string(cfg.objective.bias)}, {"epsilon", cfg.objective.epsilon}, {"rows", rows}},
               dir / "aggregate.json");
    write_text(dir / "aggregate.csv", agg.str());
}

// ---------------------------------------------------------------------------
// Variance study

VarianceReport summarize_variance(std::vector<VarianceRow> rows) {
    VarianceReport rep;
    rep.networks = std::move(rows);
    rep.single_network = rep.networks.size() == 1;
    auto summary = [&](double VarianceRow::*field) {
        std::vector<double> v;
        for (const auto& r : rep.networks) v.push_back(r.*field);
        MeasureSummary s;
        if (v.empty()) return MeasureSummary{kNaN, kNaN};
        for (double x : v) s.mean += x;
        s.mean /= static_cast<double>(v.size());
        s.std = sample_std(v);
        return s;
    };
    rep.aod = summary(&VarianceRow::aod);
    rep.eod = summary(&VarianceRow::eod);
    rep.spd = summary(&VarianceRow::spd);
    rep.accuracy = summary(&VarianceRow::accuracy);
    return rep;
}

VarianceReport variance_study(const ExperimentConfig& cfg, std::size_t networks) {
    cfg.validate();
    if (networks == 0) throw ValidationError("variance study: need at least one network");
    const PreparedData data = prepare_data(cfg);
    const DataSet& test = data.splits.test;
    std::vector<VarianceRow> rows(networks);
    std::vector<std::string> errors(networks);
    parallel_for(networks, cfg.workers, [&](std::size_t k) {
        try {
            const Seed seed = cfg.seeds.front() + k;
            const Network net = baseline_network(cfg, data, seed);
            const auto preds = binarize(forward(net, test.features), 0.5);
            auto& row = rows[k];
            row.seed = seed;
            row.aod = bias(BiasKind::aod, test.labels, preds, test.groups);
            row.eod = bias(BiasKind::eod, test.labels, preds, test.groups);
            row.spd = bias(BiasKind::spd, test.labels, preds, test.groups);
            std::size_t correct = 0;
            for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == test.labels[i] ? 1 : 0;
            row.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
        } catch (const std::exception& e) {
            errors[k] = e.what();
        }
    });
    for (std::size_t k = 0; k < networks; ++k) {
        if (!errors[k].empty()) throw Error("variance study, network " + std::to_string(k) + ": " + errors[k]);
    }
    return summarize_variance(std::move(rows));
}

// ---------------------------------------------------------------------------
// Sensitivity study

double r_squared(const Vector& y, const Vector& predicted) {
    if (y.size() != predicted.size()) throw ShapeError("r_squared: size mismatch");
    if (y.size() == 0) return kNaN;
    const double mean = y.mean();
    const double ss_tot = (y.array() - mean).square().sum();
    const double ss_res = (y - predicted).squaredNorm();
    if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
    return 1.0 - ss_res / ss_tot;
}

LinearFit fit_linear(const Matrix& x, const Vector& y, double ridge) {
    const auto n = x.rows();
    const auto p = x.cols();
    if (y.size() != n) throw ShapeError("fit_linear: rows of x and y differ");
    if (n < 2) throw ValidationError("fit_linear: need at least two rows");
    const Eigen::RowVectorXd x_mean = x.colwise().mean();
    const double y_mean = y.mean();
    const Matrix xc = x.rowwise() - x_mean;
    const Vector yc = y.array() - y_mean;

    LinearFit fit;
    Vector coef;
    if (p >= n) {
        Matrix gram = xc * xc.transpose();
        gram.diagonal().array() += ridge;
        const Vector alpha = gram.ldlt().solve(yc);
        coef = xc.transpose() * alpha;
        fit.ridge_used = true;
    } else {
        coef = xc.colPivHouseholderQr().solve(yc);
    }
    fit.coef.assign(coef.data(), coef.data() + coef.size());
    fit.intercept = y_mean - x_mean.dot(coef);
    const Vector pred = (x * coef).array() + fit.intercept;
    fit.r2 = r_squared(y, pred);
    return fit;
}

std::vector<double> normalized_singular_values(const Matrix& rows) {
    Matrix m = rows;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double norm = m.row(i).norm();
        if (norm > 0.0) m.row(i) /= norm;
    }
    // Singular values from the eigenvalues of the small Gram matrix.
    const Matrix gram = m * m.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
    std::vector<double> out;
    const auto k = std::min(m.rows(), m.cols());
    for (Eigen::Index i = gram.rows() - 1; i >= 0 && static_cast<Eigen::Index>(out.size()) < k; --i) {
        out.push_back(std::sqrt(std::max(0.0, eig.eigenvalues()(i))));
    }
    return out;
}

PerturbationSample perturbation_sample(const Network& net, const DataSet& test, const SensitivityConfig& cfg, Seed seed) {
    const auto p = net.parameters().size();
    PerturbationSample s;
    s.deltas.resize(static_cast<Eigen::Index>(cfg.deltas), static_cast<Eigen::Index>(p));
    s.bias.resize(static_cast<Eigen::Index>(cfg.deltas));
    Rng rng(seed);
    std::normal_distribution<double> noise(1.0, cfg.delta_std);
    Network work = net;
    const auto original = net.parameters();
    for (std::size_t v = 0; v < cfg.deltas; ++v) {
        auto params = work.parameters();
        for (std::size_t i = 0; i < p; ++i) {
            const double d = noise(rng);
            s.deltas(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(i)) = d;
            params[i] = original[i] * d;
        }
        const auto preds = binarize(forward(work, test.features), 0.5);
        s.bias(static_cast<Eigen::Index>(v)) = bias(cfg.measure, test.labels, preds, test.groups);
    }
    return s;
}

SensitivityReport sensitivity_study(const ExperimentConfig& cfg, const SensitivityConfig& scfg) {
    cfg.validate();
    if (scfg.networks == 0 || scfg.deltas < 2) throw ValidationError("sensitivity study: need networks and >= 2 deltas");
    if (!(scfg.holdout_fraction >= 0.0 && scfg.holdout_fraction < 1.0))
        throw ValidationError("sensitivity study: holdout fraction must be in [0, 1)");
    const PreparedData data = prepare_data(cfg);
    const DataSet& test = data.splits.test;

    SensitivityReport rep;
    rep.networks.resize(scfg.networks);
    std::vector<std::vector<double>> coefs(scfg.networks);
    std::vector<std::string> errors(scfg.networks);
    parallel_for(scfg.networks, cfg.workers, [&](std::size_t k) {
        try {
            const Seed seed = cfg.seeds.front() + k;
            const Network net = baseline_network(cfg, data, seed);
            const auto sample = perturbation_sample(net, test, scfg, derive_seed(seed, 0x5e45));
            const auto fit = fit_linear(sample.deltas, sample.bias, scfg.ridge);

            auto& out = rep.networks[k];
            out.seed = seed;
            out.r2 = fit.r2;
            out.ridge_used = fit.ridge_used;
            const auto held = static_cast<Eigen::Index>(std::llround(scfg.holdout_fraction * static_cast<double>(scfg.deltas)));
            const auto n_fit = static_cast<Eigen::Index>(scfg.deltas) - held;
            out.holdout_r2 = kNaN;
            if (held >= 2 && n_fit >= 2) {
                const auto part = fit_linear(sample.deltas.topRows(n_fit), sample.bias.head(n_fit), scfg.ridge);
                const Eigen::Map<const Vector> c(part.coef.data(), static_cast<Eigen::Index>(part.coef.size()));
                const Vector pred = (sample.deltas.bottomRows(held) * c).array() + part.intercept;
                out.holdout_r2 = r_squared(sample.bias.tail(held), pred);
            }
            out.sorted_abs_coef = fit.coef;
            for (double& c : out.sorted_abs_coef) c = std::abs(c);
            std::sort(out.sorted_abs_coef.begin(), out.sorted_abs_coef.end(), std::greater<>());
            coefs[k] = fit.coef;
        } catch (const std::exception& e) {
            errors[k] = e.what();
        }
    });
    for (std::size_t k = 0; k < scfg.networks; ++k) {
        if (!errors[k].empty()) throw Error("sensitivity study, network " + std::to_string(k) + ": " + errors[k]);
    }
    Matrix stacked(static_cast<Eigen::Index>(scfg.networks), static_cast<Eigen::Index>(coefs.front().size()));
    for (std::size_t k = 0; k < scfg.networks; ++k) {
        stacked.row(static_cast<Eigen::Index>(k)) =
            Eigen::Map<const Eigen::RowVectorXd>(coefs[k].data(), static_cast<Eigen::Index>(coefs[k].size()));
    }
    rep.singular_values = normalized_singular_values(stacked);
    return rep;
}

// ---------------------------------------------------------------------------

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const DataSet& ds, const ObjectiveSpec& spec,
                               double threshold) {
    const Network net = load_checkpoint(checkpoint);
    if (net.input_dim() != ds.dim())
        throw ShapeError("checkpoint expects " + std::to_string(net.input_dim()) + " features, data has " +
                         std::to_string(ds.dim()));
    return evaluate_scores(spec, ds.labels, to_std(forward(net, ds.features)), ds.groups, threshold);
}

}  // namespace intrafair
