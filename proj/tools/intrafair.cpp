#include "intrafair/error.hpp"
#include "intrafair/harness.hpp"
#include "intrafair/json_io.hpp"
#include "intrafair/text.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace intrafair;

namespace {

struct Options {
    ExperimentConfig cfg;
    std::string source = "synthetic";
    std::vector<double> split{0.6, 0.2, 0.2};
    std::string bias = "spd";
    std::vector<std::string> methods{"default"};
    std::string adv_mode = "train";
    std::string calib_cost = "fnr";
    std::string output;
    std::string cache_dir;

    ExperimentConfig resolve() {
        ExperimentConfig c = cfg;
        c.data.kind = parse_source_kind(source);
        if (split.size() != 3) throw ValidationError("--split takes three fractions");
        std::copy(split.begin(), split.end(), c.split.fractions.begin());
        c.objective.bias = parse_bias_kind(bias);
        c.methods.clear();
        for (const auto& m : methods) c.methods.push_back(parse_method_kind(m));
        if (adv_mode != "train" && adv_mode != "eval") throw ValidationError("--adv-actor-mode: train or eval");
        c.method.adversarial.actor_mode = adv_mode == "train" ? Mode::train : Mode::eval;
        c.method.calibrated.cost = parse_cost_kind(calib_cost);
        c.output_dir = output;
        c.cache_dir = cache_dir;
        c.validate();
        return c;
    }
};

void add_config_options(CLI::App& app, Options& o) {
    auto& c = o.cfg;
    auto& s = c.data.synthetic;
    const char* g = "Data";
    app.add_option("--source", o.source, "synthetic, csv or dump")->group(g)->check(CLI::IsMember({"synthetic", "csv", "dump"}));
    app.add_option("--data", c.data.path, "CSV or dump file")->group(g);
    app.add_option("--schema", c.data.schema, "JSON column schema for CSV input")->group(g);
    app.add_option("--syn-n", s.n, "Synthetic rows")->group(g);
    app.add_option("--syn-d", s.d, "Synthetic columns including the protected one")->group(g);
    app.add_option("--syn-spd", s.target_spd, "Gap in positive-label rate between groups")->group(g);
    app.add_option("--syn-group0", s.group0_fraction, "Fraction of group 0")->group(g);
    app.add_option("--syn-noise", s.label_noise, "Label flip probability")->group(g);
    app.add_option("--syn-signal", s.signal, "Mean shift of informative features")->group(g);
    app.add_option("--syn-shift", s.group_shift, "Mean shift of group-cluster features")->group(g);
    app.add_option("--syn-seed", s.seed, "Synthetic data seed")->group(g);
    app.add_option("--split", o.split, "Train/valid/test fractions")->expected(3)->group(g);
    app.add_option("--split-seed", c.split.seed)->group(g);

    g = "Model";
    app.add_option("--hidden", c.arch.hidden, "Hidden layer widths")->group(g);
    app.add_option("--dropout", c.arch.dropout)->group(g);
    app.add_option("--lr", c.train.learning_rate, "Training learning rate")->group(g);
    app.add_option("--batch-size", c.train.batch_size)->group(g);
    app.add_option("--max-epochs", c.train.max_epochs)->group(g);
    app.add_option("--patience", c.train.patience)->group(g);

    g = "Experiment";
    app.add_option("--bias", o.bias, "spd, eod or aod")->group(g)->check(CLI::IsMember({"spd", "eod", "aod"}));
    app.add_option("--epsilon", c.objective.epsilon, "Bias constraint used for reporting")->group(g);
    app.add_option("--selection-epsilon", c.selection_epsilon, "Bias constraint the methods select with")->group(g);
    app.add_option("--methods", o.methods, "Methods of a sweep")->group(g);
    app.add_option("--seeds,--seed", c.seeds, "Network seeds")->group(g);
    app.add_option("-o,--output", o.output, "Output directory (stdout when empty)")->group(g);
    app.add_option("--cache-dir", o.cache_dir, "Baseline checkpoint cache")->group(g);
    app.add_option("--workers", c.workers, "Parallel sweep cells")->group(g);

    auto& m = c.method;
    g = "Random perturbation";
    app.add_option("--random-iterations", m.random.iterations)->group(g);
    app.add_option("--random-std", m.random.noise_std)->group(g);

    g = "Layer-wise";
    app.add_option("--lw-budget", m.layerwise.per_layer_budget, "Evaluations per layer")->group(g);
    app.add_option("--lw-layer-budgets", m.layerwise.layer_budgets, "Per-layer overrides, from layer 0")->group(g);
    app.add_option("--lw-init", m.layerwise.n_init)->group(g);
    app.add_option("--lw-rel", m.layerwise.relative_halfwidth, "Relative box halfwidth")->group(g);
    app.add_option("--lw-abs", m.layerwise.abs_halfwidth, "Box halfwidth of zero weights")->group(g);
    app.add_option("--lw-beta", m.layerwise.acquisition.beta)->group(g);
    app.add_option("--lw-pool", m.layerwise.acquisition.pool_size)->group(g);
    app.add_option("--lw-ensemble", m.layerwise.gbrt.ensemble_size)->group(g);
    app.add_option("--lw-depth", m.layerwise.gbrt.depth)->group(g);
    app.add_option("--lw-shrinkage", m.layerwise.gbrt.shrinkage)->group(g);
    app.add_option("--lw-trees", m.layerwise.gbrt.trees_per_model)->group(g);

    g = "Adversarial fine-tuning";
    auto& a = m.adversarial;
    app.add_option("--adv-lambda", a.lambda)->group(g);
    app.add_option("--adv-epsilon", a.epsilon)->group(g);
    app.add_option("--adv-delta", a.delta)->group(g);
    app.add_option("--adv-outer", a.outer_iterations)->group(g);
    app.add_option("--adv-critic-steps", a.critic_steps)->group(g);
    app.add_option("--adv-warmup", a.critic_warmup)->group(g);
    app.add_option("--adv-actor-steps", a.actor_steps)->group(g);
    app.add_option("--adv-batch", a.batch_size)->group(g);
    app.add_option("--adv-actor-lr", a.actor_lr)->group(g);
    app.add_option("--adv-critic-lr", a.critic_lr)->group(g);
    app.add_option("--adv-encoder", a.critic_encoder, "Critic row encoder widths")->group(g);
    app.add_option("--adv-hidden", a.critic_hidden, "Critic head widths")->group(g);
    app.add_option("--adv-context", a.critic_context)->group(g);
    app.add_option("--adv-actor-mode", o.adv_mode)->group(g);

    g = "Protected-attribute adversary";
    auto& z = m.zhang;
    app.add_option("--zhang-alpha", z.alpha)->group(g);
    app.add_option("--zhang-projection", z.projection)->group(g);
    app.add_option("--zhang-use-label", z.use_label)->group(g);
    app.add_option("--zhang-outer", z.outer_iterations)->group(g);
    app.add_option("--zhang-adv-steps", z.adversary_steps)->group(g);
    app.add_option("--zhang-actor-steps", z.actor_steps)->group(g);
    app.add_option("--zhang-batch", z.batch_size)->group(g);
    app.add_option("--zhang-actor-lr", z.actor_lr)->group(g);
    app.add_option("--zhang-adv-lr", z.adversary_lr)->group(g);

    g = "Post-processing";
    app.add_option("--roc-favored", m.reject_option.favored_group)->group(g);
    app.add_option("--roc-max-halfwidth", m.reject_option.max_halfwidth)->group(g);
    app.add_option("--eqodds-threshold", m.eq_odds.threshold)->group(g);
    app.add_option("--eqodds-tolerance", m.eq_odds.tolerance)->group(g);
    app.add_option("--eqodds-grid", m.eq_odds.grid_step)->group(g);
    app.add_option("--calib-cost", o.calib_cost, "fnr, fpr or weighted")->group(g);
    app.add_option("--calib-threshold", m.calibrated.threshold)->group(g);
}

void emit(const Json& j, const ExperimentConfig& cfg, const std::string& name) {
    if (cfg.output_dir.empty()) {
        std::cout << j.dump(2) << "\n";
    } else {
        write_json(j, cfg.output_dir / name);
    }
}

const DataSet& pick_split(const Splits& s, const std::string& name) {
    if (name == "train") return s.train;
    if (name == "valid") return s.valid;
    return s.test;
}

Network model_or_baseline(const ExperimentConfig& cfg, const PreparedData& data, const std::string& model) {
    return model.empty() ? baseline_network(cfg, data, cfg.seeds.front()) : load_checkpoint(model);
}

void write_csv(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path.string());
    out << text;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Intra-processing debiasing of neural network classifiers"};
    app.set_config("--config", "", "TOML file whose keys are the long option names");
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    add_config_options(app, o);

    auto* train_cmd = app.add_subcommand("train", "Train a baseline network");
    std::string save_model;
    train_cmd->add_option("--save-model", save_model, "Checkpoint path (default <output>/model.json)");

    auto* debias_cmd = app.add_subcommand("debias", "Debias a trained network with one method");
    std::string method;
    std::string model;
    debias_cmd->add_option("--method", method)
        ->required()
        ->check(CLI::IsMember({"default", "random", "layerwise", "adversarial", "zhang", "roc", "eqodds", "calib-eqodds"}));
    debias_cmd->add_option("--model", model, "Checkpoint (default: baseline for the first seed)");

    auto* sweep_cmd = app.add_subcommand("sweep", "Run every method over every seed");

    auto* variance_cmd = app.add_subcommand("variance-study", "Bias and accuracy spread across seeds");
    std::size_t networks = 10;
    variance_cmd->add_option("--networks", networks);

    auto* sensitivity_cmd = app.add_subcommand("sensitivity-study", "Linear sensitivity of bias to weight perturbations");
    SensitivityConfig scfg;
    std::string measure = "spd";
    sensitivity_cmd->add_option("--networks", scfg.networks);
    sensitivity_cmd->add_option("--deltas", scfg.deltas);
    sensitivity_cmd->add_option("--delta-std", scfg.delta_std);
    sensitivity_cmd->add_option("--ridge", scfg.ridge);
    sensitivity_cmd->add_option("--holdout", scfg.holdout_fraction);
    sensitivity_cmd->add_option("--measure", measure)->check(CLI::IsMember({"spd", "eod", "aod"}));

    auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint at a fixed threshold");
    std::string split_name = "test";
    double threshold = 0.5;
    evaluate_cmd->add_option("--model", model)->required();
    evaluate_cmd->add_option("--threshold", threshold);
    evaluate_cmd->add_option("--split", split_name)->check(CLI::IsMember({"train", "valid", "test"}));

    auto* postproc_cmd = app.add_subcommand("postproc", "Fit or apply a post-processing rule on a scores CSV");
    std::string scores_path;
    std::string rule_path;
    std::string apply_path;
    std::string postproc_method = "roc";
    Seed rule_seed = 0;
    postproc_cmd->add_option("--scores", scores_path, "CSV with columns score, label, protected")->required();
    postproc_cmd->add_option("--method", postproc_method)->check(CLI::IsMember({"roc", "eqodds", "calib-eqodds"}));
    postproc_cmd->add_option("--rule", rule_path, "Apply this saved rule instead of fitting");
    postproc_cmd->add_option("--apply", apply_path, "Scores CSV to predict after fitting");
    postproc_cmd->add_option("--rule-seed", rule_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig cfg = o.resolve();
        if (!cfg.output_dir.empty()) std::filesystem::create_directories(cfg.output_dir);

        if (*train_cmd) {
            const PreparedData data = prepare_data(cfg);
            TrainConfig tc = cfg.train;
            tc.seed = cfg.seeds.front();
            const TrainResult tr = train(data.splits.train, data.splits.valid, cfg.arch, tc);
            Json j = to_json(tr);
            j["seed"] = tc.seed;
            j["valid"] = to_json(evaluate_network(tr.network, data.splits.valid, cfg.objective, 0.5));
            j["test"] = to_json(evaluate_network(tr.network, data.splits.test, cfg.objective, 0.5));
            if (save_model.empty() && !cfg.output_dir.empty()) save_model = (cfg.output_dir / "model.json").string();
            if (!save_model.empty()) {
                if (std::filesystem::path(save_model).has_parent_path())
                    std::filesystem::create_directories(std::filesystem::path(save_model).parent_path());
                save_checkpoint(tr.network, save_model);
            }
            emit(j, cfg, "train.json");
        } else if (*debias_cmd) {
            const PreparedData data = prepare_data(cfg);
            const Network net = model_or_baseline(cfg, data, model);
            const MethodKind kind = parse_method_kind(method);
            const auto outcome = run_method(kind, net, data.splits, cfg, cfg.seeds.front());
            Json j = to_json(outcome);
            j["seed"] = cfg.seeds.front();
            if (!cfg.output_dir.empty()) {
                std::filesystem::create_directories(cfg.output_dir);
                if (outcome.network) save_checkpoint(*outcome.network, cfg.output_dir / (method + "-model.json"));
                if (outcome.rule) save_rule(*outcome.rule, cfg.output_dir / (method + "-rule.json"));
            }
            emit(j, cfg, "debias-" + method + ".json");
        } else if (*sweep_cmd) {
            const auto result = run_sweep(cfg);
            Json rows = Json::array();
            for (const auto& r : result.aggregate) rows.push_back(to_json(r));
            if (cfg.output_dir.empty()) std::cout << rows.dump(2) << "\n";
            std::size_t failed = 0;
            for (const auto& t : result.trials) {
                if (!t.outcome) {
                    ++failed;
                    std::cerr << to_string(t.method) << " seed " << t.seed << " failed: " << t.error << "\n";
                }
            }
            if (failed > 0) std::cerr << failed << " of " << result.trials.size() << " trials failed\n";
        } else if (*variance_cmd) {
            const auto rep = variance_study(cfg, networks);
            emit(to_json(rep), cfg, "variance.json");
            if (!cfg.output_dir.empty()) {
                std::string csv = "measure,mean,std\n";
                for (const auto& [name, s] : {std::pair{"aod", rep.aod}, std::pair{"eod", rep.eod},
                                              std::pair{"spd", rep.spd}, std::pair{"accuracy", rep.accuracy}}) {
                    csv += std::string(name) + "," + format_double(s.mean) + "," + format_double(s.std) + "\n";
                }
                write_csv(cfg.output_dir / "variance.csv", csv);
            }
        } else if (*sensitivity_cmd) {
            scfg.measure = parse_bias_kind(measure);
            const auto rep = sensitivity_study(cfg, scfg);
            emit(to_json(rep), cfg, "sensitivity.json");
            if (!cfg.output_dir.empty()) {
                std::string csv = "seed,rank,abs_coef\n";
                for (const auto& n : rep.networks) {
                    for (std::size_t r = 0; r < n.sorted_abs_coef.size(); ++r) {
                        csv += std::to_string(n.seed) + "," + std::to_string(r) + "," +
                               format_double(n.sorted_abs_coef[r]) + "\n";
                    }
                }
                write_csv(cfg.output_dir / "sensitivity_coef.csv", csv);
            }
        } else if (*evaluate_cmd) {
            const PreparedData data = prepare_data(cfg);
            const auto rep = evaluate_checkpoint(model, pick_split(data.splits, split_name), cfg.objective, threshold);
            Json j = to_json(rep);
            j["split"] = split_name;
            emit(j, cfg, "evaluate.json");
        } else if (*postproc_cmd) {
            const ScoreTable table = load_scores_csv(scores_path);
            PostprocRule rule;
            if (!rule_path.empty()) {
                rule = load_rule(rule_path);
            } else if (postproc_method == "roc") {
                rule = fit_reject_option(table.scores, table.labels, table.groups, cfg.selection_spec(),
                                         cfg.method.reject_option);
            } else if (postproc_method == "eqodds") {
                rule = fit_eq_odds(table.scores, table.labels, table.groups, rule_seed, cfg.method.eq_odds);
            } else {
                rule = fit_calibrated_eq_odds(table.scores, table.labels, table.groups, rule_seed,
                                              cfg.method.calibrated);
            }
            const auto preds = apply(rule, table.scores, table.groups);
            const double thr = rule.kind == PostprocKind::reject_option ? rule.reject_option.threshold
                               : rule.kind == PostprocKind::eq_odds    ? rule.eq_odds.threshold
                                                                       : rule.calibrated.threshold;
            Json j{{"rule", Json::parse(rule_to_string(rule))},
                   {"report", to_json(evaluate_predictions(cfg.objective, table.labels, preds, table.groups, thr))}};
            if (!cfg.output_dir.empty() && rule_path.empty()) save_rule(rule, cfg.output_dir / "rule.json");
            if (!apply_path.empty()) {
                const ScoreTable other = load_scores_csv(apply_path);
                const auto out = apply(rule, other.scores, other.groups);
                std::string csv = "score,protected,prediction\n";
                for (std::size_t i = 0; i < out.size(); ++i) {
                    csv += format_double(other.scores[i]) + "," + std::to_string(other.groups[i]) + "," +
                           std::to_string(out[i]) + "\n";
                }
                if (cfg.output_dir.empty()) {
                    std::cout << csv;
                } else {
                    write_csv(cfg.output_dir / "predictions.csv", csv);
                }
            }
            emit(j, cfg, "postproc.json");
        }
    } catch (const intrafair::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
