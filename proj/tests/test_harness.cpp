#include "intrafair/error.hpp"
#include "intrafair/harness.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace intrafair;

namespace {

std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "intrafair-test-harness" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ExperimentConfig small_config() {
    ExperimentConfig cfg;
    cfg.data.synthetic.n = 1500;
    cfg.data.synthetic.seed = 3;
    cfg.arch = {{8}, 0.1};
    cfg.train.max_epochs = 4;
    cfg.train.patience = 2;
    cfg.methods = all_methods();
    cfg.method.random.iterations = 5;
    cfg.method.layerwise.per_layer_budget = 10;
    cfg.method.layerwise.gbrt.trees_per_model = 10;
    cfg.method.layerwise.acquisition.pool_size = 50;
    cfg.method.adversarial.outer_iterations = 2;
    cfg.method.adversarial.critic_steps = 3;
    cfg.method.adversarial.actor_steps = 2;
    cfg.method.adversarial.critic_encoder = {4};
    cfg.method.adversarial.critic_hidden = {4};
    cfg.method.adversarial.batch_size = 32;
    cfg.method.zhang.outer_iterations = 2;
    cfg.method.zhang.adversary_steps = 3;
    cfg.method.zhang.actor_steps = 2;
    cfg.method.zhang.batch_size = 32;
    cfg.method.reject_option.halfwidth_step = 0.05;
    cfg.method.reject_option.threshold_step = 0.05;
    cfg.seeds = {0, 1};
    return cfg;
}

TrialResult trial(MethodKind m, Seed seed, std::optional<double> objective, double bias = 0.0) {
    TrialResult t;
    t.method = m;
    t.seed = seed;
    if (objective) {
        MethodOutcome o;
        o.method = m;
        o.test.objective = *objective;
        o.test.performance = *objective;
        o.test.bias_value = bias;
        t.outcome = o;
    } else {
        t.error = "failed";
    }
    return t;
}

}  // namespace

TEST_CASE("median and sample standard deviation") {
    CHECK(median({0.0, 0.0, 0.8, 0.81, 0.82}) == 0.8);
    CHECK(median({1.0, 3.0}) == 2.0);
    CHECK(median({0.7}) == 0.7);
    CHECK(sample_std(std::vector<double>{0.5}) == 0.0);
    CHECK(sample_std(std::vector<double>{1.0, 3.0}) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("aggregation") {
    const std::vector<MethodKind> methods{MethodKind::default_threshold, MethodKind::random};
    std::vector<TrialResult> trials;
    const std::vector<double> objectives{0.0, 0.0, 0.8, 0.81, 0.82};
    for (Seed s = 0; s < 5; ++s) trials.push_back(trial(MethodKind::default_threshold, s, objectives[s], 0.1 * s));
    trials.push_back(trial(MethodKind::random, 0, 0.7, 0.02));
    trials.push_back(trial(MethodKind::random, 1, std::nullopt));

    const auto rows = aggregate_trials(methods, trials, objectives);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].objective_median == 0.8);
    CHECK(rows[0].bias_mean == doctest::Approx(0.2));
    CHECK(rows[0].trials == 5);
    CHECK(rows[0].default_positive);

    // A single completed trial: its values, with zero spread.
    CHECK(rows[1].trials == 2);
    CHECK(rows[1].failed == 1);
    CHECK(rows[1].objective_median == 0.7);
    CHECK(rows[1].bias_mean == 0.02);
    CHECK(rows[1].bias_std == 0.0);

    const auto zero = aggregate_trials(methods, trials, {0.0, 0.0, 0.8});
    CHECK(!zero[0].default_positive);
}

TEST_CASE("method names round trip") {
    for (auto m : all_methods()) CHECK(parse_method_kind(to_string(m)) == m);
    CHECK(all_methods().size() == 8);
    CHECK(is_postprocessing(MethodKind::eqodds));
    CHECK(!is_postprocessing(MethodKind::zhang));
    CHECK_THROWS_AS(parse_method_kind("magic"), ValidationError);
}

TEST_CASE("config json round trip") {
    auto cfg = small_config();
    cfg.selection_epsilon = 0.03;
    cfg.method.layerwise.layer_budgets = {20, 5};
    cfg.method.zhang.use_label = true;
    cfg.method.adversarial.delta = 0.01;
    cfg.output_dir = "out";
    cfg.workers = 3;
    const auto text = config_to_json(cfg);
    CHECK(config_to_json(config_from_json(text)) == text);
    const auto back = config_from_json(text);
    CHECK(back.selection_spec().epsilon == 0.03);
    CHECK(back.objective.epsilon == cfg.objective.epsilon);
    CHECK(back.method.layerwise.layer_budgets == std::vector<std::size_t>{20, 5});

    CHECK_THROWS_AS(config_from_json(R"({"arch": {"hiden": [4]}})"), ValidationError);
    CHECK_THROWS_AS(config_from_json(R"({"colour": 1})"), ValidationError);
    CHECK_THROWS_AS(config_from_json(R"({"objective": {"epsilon": 2.0}})"), ValidationError);
}

TEST_CASE("linear fits and singular values") {
    Rng rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix x(50, 3);
    Vector y(50);
    for (Eigen::Index i = 0; i < 50; ++i) {
        for (Eigen::Index j = 0; j < 3; ++j) x(i, j) = n(rng);
        y(i) = 2.0 * x(i, 0) - x(i, 2) + 0.5;
    }
    const auto fit = fit_linear(x, y, 1e-6);
    CHECK(!fit.ridge_used);
    CHECK(fit.r2 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fit.coef[0] == doctest::Approx(2.0));
    CHECK(fit.coef[1] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(fit.intercept == doctest::Approx(0.5));

    // More columns than rows falls back to the ridge dual.
    Matrix wide(5, 20);
    Vector w(5);
    for (Eigen::Index k = 0; k < wide.size(); ++k) wide.data()[k] = n(rng);
    for (Eigen::Index i = 0; i < 5; ++i) w(i) = n(rng);
    CHECK(fit_linear(wide, w, 1e-8).ridge_used);

    CHECK(r_squared(y, y) == 1.0);
    Vector mean = Vector::Constant(50, y.mean());
    CHECK(r_squared(y, mean) == doctest::Approx(0.0).epsilon(1e-12));

    Matrix same(4, 6);
    for (Eigen::Index i = 0; i < 4; ++i) same.row(i) << 1, 2, 3, 4, 5, 6;
    same.row(2) *= 3.0;
    const auto sv = normalized_singular_values(same);
    REQUIRE(sv.size() == 4);
    CHECK(sv[0] == doctest::Approx(2.0));
    for (std::size_t k = 1; k < sv.size(); ++k) CHECK(sv[k] < 1e-6);

    Matrix eye = Matrix::Identity(3, 5);
    for (double v : normalized_singular_values(eye)) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("variance summary") {
    const auto one = summarize_variance({VarianceRow{0, 0.1, 0.2, 0.3, 0.8}});
    CHECK(one.single_network);
    CHECK(one.spd.mean == 0.3);
    CHECK(one.spd.std == 0.0);
    const auto two = summarize_variance({VarianceRow{0, 0.1, 0.2, 0.3, 0.8}, VarianceRow{1, 0.3, 0.2, 0.1, 0.6}});
    CHECK(!two.single_network);
    CHECK(two.aod.mean == doctest::Approx(0.2));
    CHECK(two.aod.std == doctest::Approx(std::sqrt(0.02)));
    CHECK(two.eod.std == 0.0);
}

TEST_CASE("baseline cache and checkpoint evaluation") {
    auto cfg = small_config();
    cfg.cache_dir = scratch("cache");
    const auto data = prepare_data(cfg);
    const auto a = baseline_network(cfg, data, 0);
    std::size_t cached = 0;
    for (const auto& e : std::filesystem::directory_iterator(cfg.cache_dir)) cached += e.path().extension() == ".key";
    CHECK(cached == 1);
    CHECK(baseline_network(cfg, data, 0) == a);

    auto other = cfg;
    other.arch.hidden = {6};
    CHECK(baseline_key(other, data.hash, 0) != baseline_key(cfg, data.hash, 0));
    CHECK(baseline_key(cfg, data.hash, 1) != baseline_key(cfg, data.hash, 0));
    // Output settings do not affect the baseline.
    other = cfg;
    other.output_dir = "elsewhere";
    other.workers = 4;
    CHECK(baseline_key(other, data.hash, 0) == baseline_key(cfg, data.hash, 0));

    const auto ckpt = cfg.cache_dir / "model.json";
    save_checkpoint(a, ckpt);
    const auto& test = data.splits.test;
    const auto all_pos = evaluate_checkpoint(ckpt, test, cfg.objective, 0.0);
    const auto all_neg = evaluate_checkpoint(ckpt, test, cfg.objective, 1.0);
    CHECK(all_pos.performance == 0.5);
    CHECK(all_neg.performance == 0.5);
    CHECK(all_pos.bias_value == 0.0);
    CHECK(all_neg.bias_value == 0.0);

    auto narrow = test;
    narrow.features = test.features.leftCols(test.dim() - 1);
    narrow.column_kinds.pop_back();
    narrow.protected_column.reset();
    CHECK_THROWS_AS(evaluate_checkpoint(ckpt, narrow, cfg.objective, 0.5), ShapeError);
}

TEST_CASE("sweeps are deterministic and record failures") {
    auto cfg = small_config();
    cfg.workers = 2;
    cfg.method.zhang.batch_size = 1;  // fails at run time
    const auto da = scratch("sweep-a");
    cfg.output_dir = da;
    const auto a = run_sweep(cfg);
    cfg.workers = 1;
    cfg.output_dir = scratch("sweep-b");
    const auto b = run_sweep(cfg);

    CHECK(slurp(da / "aggregate.json") == slurp(cfg.output_dir / "aggregate.json"));
    CHECK(slurp(da / "long.csv") == slurp(cfg.output_dir / "long.csv"));
    CHECK(!slurp(da / "aggregate.json").empty());

    REQUIRE(a.trials.size() == 16);
    for (const auto& t : a.trials) {
        if (t.method == MethodKind::zhang) {
            CHECK(!t.outcome.has_value());
            CHECK(!t.error.empty());
        } else {
            CHECK(t.outcome.has_value());
        }
    }
    for (const auto& row : a.aggregate) {
        if (row.method == MethodKind::zhang) {
            CHECK(row.failed == 2);
            CHECK(std::isnan(row.objective_median));
        } else {
            CHECK(row.failed == 0);
        }
    }

    // Post-processing trials carry a rule, in-processing trials a network.
    for (const auto& t : b.trials) {
        if (!t.outcome) continue;
        CHECK(t.outcome->rule.has_value() == is_postprocessing(t.method));
        CHECK(t.outcome->network.has_value() == !is_postprocessing(t.method));
    }
}
