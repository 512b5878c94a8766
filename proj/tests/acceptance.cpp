// Acceptance run: one PASS/FAIL/SKIP line per criterion.

#include "oracles.hpp"

#include "intrafair/blackbox.hpp"
#include "intrafair/error.hpp"
#include "intrafair/harness.hpp"
#include "intrafair/postproc.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

using namespace intrafair;

namespace {

enum class Status { pass, fail, skip };

struct Verdict {
    Status status = Status::fail;
    std::string detail;
};

Verdict verdict(bool ok, std::string detail) { return {ok ? Status::pass : Status::fail, std::move(detail)}; }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

class Stopwatch {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
    return m;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------

Verdict metric_oracle() {
    Stopwatch sw;
    Rng rng(101);
    std::uniform_int_distribution<std::size_t> size(2, 50);
    double worst = 0.0;
    std::size_t mismatched_definedness = 0;
    for (int t = 0; t < 1000; ++t) {
        const auto in = oracle::random_instance(rng, size(rng));
        auto compare = [&](const std::optional<double>& expected, auto compute) {
            try {
                const double got = compute();
                if (!expected) ++mismatched_definedness;
                else worst = std::max(worst, std::abs(got - *expected));
            } catch (const UndefinedRateError&) {
                if (expected) ++mismatched_definedness;
            }
        };
        for (auto k : {BiasKind::spd, BiasKind::eod, BiasKind::aod})
            compare(oracle::bias(k, in.labels, in.preds, in.groups), [&] { return bias(k, in.labels, in.preds, in.groups); });
        compare(oracle::balanced_accuracy(in.labels, in.preds), [&] { return balanced_accuracy(in.labels, in.preds); });
    }
    const double s = sw.seconds();
    return verdict(worst <= 1e-12 && mismatched_definedness == 0 && s < 10.0,
                   fmt("1000 instances, max |diff| %.1e, definedness mismatches %zu, %.2f s", worst, mismatched_definedness, s));
}

Verdict gradient_check() {
    Stopwatch sw;
    Rng rng(102);
    std::uniform_int_distribution<std::size_t> width(1, 8);
    std::uniform_int_distribution<std::size_t> depth(0, 2);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::normal_distribution<double> n(0.0, 0.3);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        std::vector<std::size_t> hidden(depth(rng));
        for (auto& h : hidden) h = width(rng);
        const std::size_t d = width(rng);
        Network net(d, hidden, 0.0, static_cast<Seed>(t));
        for (std::size_t l = 0; l < net.num_layers(); ++l) {
            for (Eigen::Index k = 0; k < net.scale(l).size(); ++k) {
                net.scale(l)(k) = u(rng);
                net.shift(l)(k) = n(rng);
                net.running_mean(l)(k) = n(rng);
                net.running_var(l)(k) = u(rng);
            }
        }
        const auto x = random_matrix(rng, 16, static_cast<Eigen::Index>(d));
        BinaryVector y(16);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
        y[0] = 0;
        y[1] = 1;
        for (auto mode : {Mode::eval, Mode::train}) {
            const auto analytic = bce_gradients(net, x, y, mode).grads.params;
            const auto numeric = oracle::numeric_param_gradient(net, x, y, mode);
            for (std::size_t i = 0; i < analytic.size(); ++i)
                worst = std::max(worst, oracle::relative_error(analytic[i], numeric[i], 1e-5));
        }
    }
    const double s = sw.seconds();
    return verdict(worst < 1e-4 && s < 30.0, fmt("20 networks, eval and train mode, max rel err %.2e, %.2f s", worst, s));
}

Verdict threshold_optimality() {
    Stopwatch sw;
    Rng rng(103);
    std::uniform_int_distribution<std::size_t> size(4, 200);
    std::size_t compared = 0;
    std::size_t mismatches = 0;
    for (int t = 0; t < 200; ++t) {
        const auto in = oracle::random_instance(rng, size(rng));
        for (auto k : {BiasKind::spd, BiasKind::eod, BiasKind::aod}) {
            for (double eps : {0.02, 0.1}) {
                const ObjectiveSpec spec{k, eps};
                const auto best = oracle::best_binarization(spec, in.labels, in.scores, in.groups);
                if (!best.found) continue;
                ++compared;
                const auto got = select_threshold(spec, in.labels, in.scores, in.groups);
                if (got.objective != best.objective || std::abs(got.bias_value) != best.abs_bias ||
                    got.performance != best.performance)
                    ++mismatches;
            }
        }
    }
    const double s = sw.seconds();
    return verdict(mismatches == 0 && compared > 0 && s < 30.0,
                   fmt("200 instances, %zu comparisons, %zu mismatches, %.2f s", compared, mismatches, s));
}

// ---------------------------------------------------------------------------

ExperimentConfig synthetic_config(const std::filesystem::path& cache) {
    ExperimentConfig cfg;
    cfg.data.synthetic.n = 20000;
    cfg.data.synthetic.target_spd = 0.3;
    cfg.data.synthetic.seed = 12345;
    cfg.split.seed = 7;
    cfg.objective = {BiasKind::spd, 0.05};
    cfg.cache_dir = cache;
    cfg.seeds = {0, 1, 2, 3, 4};
    return cfg;
}

/// Method settings for the end-to-end run.
ExperimentConfig debias_config(const std::filesystem::path& cache) {
    auto cfg = synthetic_config(cache);
    cfg.selection_epsilon = 0.03;
    cfg.methods = all_methods();
    auto& m = cfg.method;
    m.random.iterations = 300;
    m.random.noise_std = 0.8;
    m.layerwise.relative_halfwidth = 3.0;
    m.layerwise.per_layer_budget = 10;
    m.layerwise.layer_budgets = {150};
    m.adversarial.actor_lr = 3e-4;
    m.adversarial.critic_lr = 3e-3;
    m.adversarial.critic_warmup = 4000;
    m.adversarial.outer_iterations = 150;
    m.zhang.actor_lr = 1e-3;
    return cfg;
}

struct EndToEnd {
    SweepResult sweep;
    std::vector<double> baseline_spd;
    std::vector<double> baseline_ba;
    double seconds = 0.0;
    double slowest_trial = 0.0;
};

const EndToEnd& end_to_end(const std::filesystem::path& cache) {
    static std::optional<EndToEnd> run;
    if (run) return *run;
    EndToEnd e;
    Stopwatch sw;
    const auto cfg = debias_config(cache);
    const auto data = prepare_data(cfg);
    for (Seed s : cfg.seeds) {
        const auto net = baseline_network(cfg, data, s);
        const auto rep = evaluate_network(net, data.splits.test, cfg.objective, 0.5);
        e.baseline_spd.push_back(rep.bias_value);
        e.baseline_ba.push_back(rep.performance);
    }
    e.sweep = run_sweep(cfg);
    e.seconds = sw.seconds();
    for (const auto& t : e.sweep.trials) e.slowest_trial = std::max(e.slowest_trial, t.seconds);
    run = std::move(e);
    return *run;
}

std::vector<Verdict> debiasing_end_to_end(const std::filesystem::path& cache) {
    const auto& e = end_to_end(cache);
    const auto cfg = debias_config(cache);
    std::vector<Verdict> out;

    double min_abs_spd = 1.0;
    for (double v : e.baseline_spd) min_abs_spd = std::min(min_abs_spd, std::abs(v));
    out.push_back(verdict(min_abs_spd >= 0.15, fmt("baseline test |SPD| >= 0.15 on every seed (min %.3f)", min_abs_spd)));

    for (auto m : {MethodKind::random, MethodKind::layerwise, MethodKind::adversarial, MethodKind::zhang}) {
        std::size_t ok = 0;
        std::string cells;
        for (const auto& t : e.sweep.trials) {
            if (t.method != m) continue;
            const auto idx = static_cast<std::size_t>(std::find(cfg.seeds.begin(), cfg.seeds.end(), t.seed) - cfg.seeds.begin());
            if (!t.outcome) {
                cells += " seed" + std::to_string(t.seed) + ":error";
                continue;
            }
            const auto& o = *t.outcome;
            const bool good = std::abs(o.valid.bias_value) < 0.05 && std::abs(o.test.bias_value) < 0.05 &&
                              o.test.performance >= e.baseline_ba[idx] - 0.10;
            ok += good;
            cells += fmt(" s%llu:%+.3f/%+.3f/%.3f%s", static_cast<unsigned long long>(t.seed), o.valid.bias_value,
                         o.test.bias_value, o.test.performance, good ? "" : "*");
        }
        out.push_back(verdict(ok >= 3 && e.slowest_trial < 600.0,
                              fmt("%-11s %zu/5 seeds (valid SPD/test SPD/test BA:%s)", to_string(m).c_str(), ok, cells.c_str())));
    }
    out.back().detail += fmt("; slowest trial %.0f s, sweep %.0f s", e.slowest_trial, e.seconds);
    return out;
}

Verdict intra_beats_post(const std::filesystem::path& cache) {
    const auto& e = end_to_end(cache);
    double best_intra = -1.0;
    double best_post = -1.0;
    std::string intra_name, post_name;
    for (const auto& row : e.sweep.aggregate) {
        if (row.method == MethodKind::default_threshold) continue;
        const double v = std::isnan(row.objective_median) ? 0.0 : row.objective_median;
        if (is_postprocessing(row.method)) {
            if (v > best_post) {
                best_post = v;
                post_name = to_string(row.method);
            }
        } else if (v > best_intra) {
            best_intra = v;
            intra_name = to_string(row.method);
        }
    }
    return verdict(best_intra >= best_post, fmt("best intra %s median %.3f vs best post %s median %.3f", intra_name.c_str(),
                                                 best_intra, post_name.c_str(), best_post));
}

Verdict seed_sensitivity() {
    Stopwatch sw;
    auto cfg = synthetic_config({});  // no cache: the runtime bound covers training
    cfg.seeds = {0};
    const auto rep = variance_study(cfg, 10);
    const double s = sw.seconds();
    return verdict(rep.spd.std >= 3.0 * rep.accuracy.std && s < 1200.0,
                   fmt("std(SPD) %.4f vs 3 x std(accuracy) %.4f; SPD %.3f, accuracy %.3f; %.0f s", rep.spd.std,
                       3.0 * rep.accuracy.std, rep.spd.mean, rep.accuracy.mean, s));
}

Verdict adult_check(const std::filesystem::path& cache, const std::string& csv, const std::string& schema) {
    if (csv.empty()) return {Status::skip, "no Adult CSV supplied (--adult or INTRAFAIR_ADULT_CSV)"};
    ExperimentConfig cfg;
    cfg.data.kind = DataSource::Kind::csv;
    cfg.data.path = csv;
    cfg.data.schema = schema;
    cfg.cache_dir = cache;
    cfg.seeds = {0};
    const auto rep = variance_study(cfg, 10);
    const bool ok = std::abs(rep.accuracy.mean - 0.855) <= 0.02 && std::abs(rep.spd.mean + 0.198) <= 0.05;
    return verdict(ok, fmt("accuracy %.3f (0.855 +- 0.02), SPD %.3f (-0.198 +- 0.05)", rep.accuracy.mean, rep.spd.mean));
}

Verdict gbrt_quality() {
    Stopwatch sw;
    const std::size_t dim = 20;
    const auto space = SearchSpace::box(std::vector<double>(dim, -5.12), std::vector<double>(dim, 5.12));
    auto sphere = [](std::span<const double> x) {
        double s = 0.0;
        for (double v : x) s += v * v;
        return s;
    };
    std::size_t wins = 0;
    std::string cells;
    for (Seed seed = 0; seed < 10; ++seed) {
        MinimizeConfig cfg;
        cfg.budget = 200;
        cfg.seed = seed;
        const double model = minimize(sphere, space, cfg).best_value;
        const double random = random_search(sphere, space, cfg.budget, seed).best_value;
        wins += model <= random;
        cells += fmt(" %.1f/%.1f", model, random);
    }
    const double s = sw.seconds();
    return verdict(wins >= 8 && s < 120.0, fmt("%zu/10 seeds at or below random search (model/random:%s), %.1f s", wins,
                                               cells.c_str(), s));
}

std::vector<Verdict> sensitivity(const std::filesystem::path& cache) {
    std::vector<Verdict> out;
    const std::size_t k = 10;
    Rng rng(109);
    Matrix rows(static_cast<Eigen::Index>(k), 50);
    const Matrix base = random_matrix(rng, 1, 50);
    for (Eigen::Index i = 0; i < rows.rows(); ++i) rows.row(i) = base.row(0) * (0.5 + static_cast<double>(i));
    const auto sv = normalized_singular_values(rows);
    double rest = 0.0;
    for (std::size_t i = 1; i < sv.size(); ++i) rest = std::max(rest, sv[i]);
    out.push_back(verdict(std::abs(sv[0] - std::sqrt(static_cast<double>(k))) < 1e-9 && rest < 1e-6,
                          fmt("rank-1 rows: first singular value %.9f (sqrt(10) = %.9f), max of rest %.1e", sv[0],
                              std::sqrt(10.0), rest)));

    std::normal_distribution<double> delta(1.0, 0.1);
    std::normal_distribution<double> noise(0.0, 1e-3);
    Matrix x(1000, 1);
    Vector y(1000);
    for (Eigen::Index i = 0; i < 1000; ++i) {
        x(i, 0) = delta(rng);
        y(i) = 0.4 * x(i, 0) - 0.3 + noise(rng);
    }
    const auto toy = fit_linear(x, y, 1e-6);
    out.push_back(verdict(toy.r2 > 0.99, fmt("one-parameter linear toy R^2 %.6f", toy.r2)));

    Stopwatch sw;
    auto cfg = synthetic_config(cache);
    cfg.seeds = {0};
    const auto rep = sensitivity_study(cfg, SensitivityConfig{});
    double min_r2 = 1.0;
    double min_holdout = 1.0;
    for (const auto& n : rep.networks) {
        min_r2 = std::min(min_r2, n.r2);
        min_holdout = std::min(min_holdout, n.holdout_r2);
    }
    out.push_back(verdict(min_r2 > 0.5,
                          fmt("full study, 10 networks x 1000 deltas: min R^2 %.3f (held-out diagnostic: min %.3f), "
                              "first singular values %.3f %.3f; %.0f s",
                              min_r2, min_holdout, rep.singular_values[0], rep.singular_values[1], sw.seconds())));
    return out;
}

std::vector<Verdict> postproc_fidelity() {
    std::vector<Verdict> out;
    // Group 0 has TPR 1, group 1 TPR 0.5; both FPR 0.
    std::vector<double> s;
    BinaryVector y, g;
    for (int a = 0; a < 2; ++a) {
        for (int k = 0; k < 20; ++k) {
            g.push_back(a);
            y.push_back(k < 10 ? 1 : 0);
            s.push_back(k < 10 && (a == 0 || k < 5) ? 0.9 : 0.1);
        }
    }
    const auto rule = fit_eq_odds(s, y, g, 0);
    const auto& f = rule.eq_odds.flip;
    const bool ok = std::abs(f[0][1] - 0.5) <= 0.02 && f[0][0] <= 0.02 && f[1][0] <= 0.02 && f[1][1] <= 0.02;
    out.push_back(verdict(ok, fmt("eq-odds flips g0:(%.2f, %.2f) g1:(%.2f, %.2f); closed form g0:(0, 0.5) g1:(0, 0)", f[0][0],
                                  f[0][1], f[1][0], f[1][1])));

    Rng rng(110);
    std::size_t differ = 0;
    for (int t = 0; t < 200; ++t) {
        const auto in = oracle::random_instance(rng, 100);
        for (double thr : {0.25, 0.5, 0.75}) {
            differ += apply_reject_option(RejectOptionParams{thr, 0.0, 1}, in.scores, in.groups) != binarize(in.scores, thr);
        }
    }
    out.push_back(verdict(differ == 0, fmt("reject option w = 0 vs thresholding: %zu of 600 prediction vectors differ", differ)));
    return out;
}

Verdict cli_determinism(const std::filesystem::path& cli, const std::filesystem::path& work) {
    if (!std::filesystem::exists(cli)) return {Status::fail, "command-line tool not found at " + cli.string()};
    std::filesystem::remove_all(work);
    std::filesystem::create_directories(work);
    {
        Rng rng(111);
        std::ofstream csv(work / "scores.csv");
        csv << "score,label,protected\n";
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (int i = 0; i < 400; ++i) {
            const int a = i % 2;
            const int label = u(rng) < (a ? 0.35 : 0.6) ? 1 : 0;
            csv << std::min(1.0, std::max(0.0, 0.3 * label + 0.15 * (1 - a) + 0.5 * u(rng))) << "," << label << "," << a << "\n";
        }
    }
    const std::string common =
        " --syn-n 1500 --hidden 8 8 --max-epochs 4 --patience 2 --random-iterations 5 --lw-budget 8 --lw-trees 10"
        " --lw-pool 50 --adv-outer 2 --adv-critic-steps 3 --adv-actor-steps 2 --adv-batch 32 --zhang-outer 2"
        " --zhang-adv-steps 3 --zhang-actor-steps 2 --zhang-batch 32";
    const std::vector<std::pair<std::string, std::string>> commands{
        {"train", "train --seed 3"},
        {"debias-layerwise", "debias --method layerwise"},
        {"debias-adversarial", "debias --method adversarial"},
        {"debias-eqodds", "debias --method eqodds"},
        {"sweep", "sweep --seeds 0 1 --workers 2 --methods default random zhang roc calib-eqodds"},
        {"variance", "variance-study --networks 2"},
        {"sensitivity", "sensitivity-study --networks 2 --deltas 40"},
        {"postproc", "postproc --scores " + (work / "scores.csv").string() + " --method eqodds --rule-seed 4"},
    };
    std::size_t compared = 0;
    std::vector<std::string> problems;
    // Each command runs twice into the same output directory; the first run's files are snapshotted.
    auto twice = [&](const std::string& name, const std::string& args) {
        const auto dir = work / name / "out";
        const auto first = work / name / "first";
        for (int rep = 0; rep < 2; ++rep) {
            const std::string cmd = cli.string() + " " + args + common + " -o " + dir.string() + " > " +
                                    (work / (name + ".log")).string() + " 2>&1";
            if (std::system(cmd.c_str()) != 0) problems.push_back(name + " exited non-zero");
            if (rep == 0 && std::filesystem::exists(dir)) std::filesystem::rename(dir, first);
        }
        if (!std::filesystem::exists(first)) return;
        std::size_t files = 0;
        for (const auto& entry : std::filesystem::recursive_directory_iterator(first)) {
            if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
            const auto rel = std::filesystem::relative(entry.path(), first);
            ++files;
            ++compared;
            if (slurp(entry.path()) != slurp(dir / rel)) problems.push_back(name + "/" + rel.string() + " differs");
        }
        if (files == 0) problems.push_back(name + " wrote no JSON");
    };
    for (const auto& [name, args] : commands) twice(name, args);
    twice("evaluate", "evaluate --split test --model " + (work / "train" / "first" / "model.json").string());

    std::string detail = fmt("%zu commands run twice, %zu JSON files compared", commands.size() + 1, compared);
    for (const auto& p : problems) detail += "; " + p;
    return verdict(problems.empty(), detail);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::set<int> only;
    std::string cache = "acceptance-cache";
    std::string work = "acceptance-work";
    std::string cli = INTRAFAIR_CLI_PATH;
    const char* env_adult = std::getenv("INTRAFAIR_ADULT_CSV");
    std::string adult = env_adult ? env_adult : "";
    std::string adult_schema = INTRAFAIR_SOURCE_DIR "/data/schemas/adult.json";
    app.add_option("--only", only, "Criteria to run (default: all)");
    app.add_option("--cache-dir", cache, "Baseline checkpoint cache");
    app.add_option("--work-dir", work, "Scratch directory");
    app.add_option("--cli", cli, "Path of the intrafair tool");
    app.add_option("--adult", adult, "Adult CSV");
    app.add_option("--adult-schema", adult_schema);
    CLI11_PARSE(app, argc, argv);

    std::size_t failures = 0;
    auto report = [&](int id, const std::string& name, const Verdict& v) {
        const char* tag = v.status == Status::pass ? "PASS" : v.status == Status::fail ? "FAIL" : "SKIP";
        failures += v.status == Status::fail;
        std::cout << tag << "  [" << id << "] " << name << ": " << v.detail << std::endl;
    };
    auto run = [&](int id, const std::string& name, const std::function<std::vector<Verdict>()>& f) {
        if (!only.empty() && !only.count(id)) return;
        std::vector<Verdict> vs;
        try {
            vs = f();
        } catch (const std::exception& e) {
            vs = {Verdict{Status::fail, std::string("exception: ") + e.what()}};
        }
        // A criterion passes only if every part passes.
        Verdict combined{Status::pass, ""};
        for (const auto& v : vs) {
            if (v.status == Status::fail) combined.status = Status::fail;
            if (v.status == Status::skip && combined.status == Status::pass) combined.status = Status::skip;
        }
        if (vs.size() == 1) {
            combined.detail = vs[0].detail;
        } else {
            for (const auto& v : vs)
                combined.detail += std::string("\n        ") + (v.status == Status::pass ? "ok   " : v.status == Status::fail ? "FAIL " : "skip ") + v.detail;
        }
        report(id, name, combined);
    };
    auto one = [](auto f) { return [f] { return std::vector<Verdict>{f()}; }; };

    const std::filesystem::path cache_dir = cache;
    run(1, "metric oracle equivalence", one(metric_oracle));
    run(2, "gradient correctness", one(gradient_check));
    run(3, "threshold optimality", one(threshold_optimality));
    run(8, "GBRT optimizer vs random search", one(gbrt_quality));
    run(10, "post-processing unit fidelity", postproc_fidelity);
    run(11, "CLI determinism", one([&] { return cli_determinism(cli, std::filesystem::path(work) / "cli"); }));
    run(6, "seed sensitivity", one([&] { return seed_sensitivity(); }));
    run(4, "end-to-end debiasing", [&] { return debiasing_end_to_end(cache_dir); });
    run(5, "intra beats post", one([&] { return intra_beats_post(cache_dir); }));
    run(7, "Adult dataset", one([&] { return adult_check(cache_dir, adult, adult_schema); }));
    run(9, "sensitivity study", [&] { return sensitivity(cache_dir); });

    std::cout << (failures == 0 ? "all criteria met" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
