#pragma once

#include "intrafair/data.hpp"
#include "intrafair/debias.hpp"
#include "intrafair/metrics.hpp"
#include "intrafair/nn.hpp"
#include "intrafair/postproc.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace intrafair {

enum class MethodKind { default_threshold, random, layerwise, adversarial, zhang, roc, eqodds, calib_eqodds };

std::string to_string(MethodKind kind);
MethodKind parse_method_kind(const std::string& name);
bool is_postprocessing(MethodKind kind);
const std::vector<MethodKind>& all_methods();

struct DataSource {
    enum class Kind { synthetic, csv, dump };
    Kind kind = Kind::synthetic;
    SyntheticSpec synthetic;
    std::filesystem::path path;    // csv or dump file
    std::filesystem::path schema;  // csv only
};

std::string to_string(DataSource::Kind kind);
DataSource::Kind parse_source_kind(const std::string& name);

DataSet load_source(const DataSource& source);

struct MethodConfigs {
    RandomPerturbConfig random;
    LayerwiseConfig layerwise;
    AdversarialConfig adversarial;
    ProtectedAdversaryConfig zhang;
    RejectOptionConfig reject_option;
    EqOddsConfig eq_odds;
    CalibratedEqOddsConfig calibrated;
};

struct ExperimentConfig {
    DataSource data;
    SplitSpec split;
    Architecture arch;
    TrainConfig train;
    ObjectiveSpec objective;                   // reporting
    std::optional<double> selection_epsilon;  // epsilon the methods select with; defaults to objective.epsilon
    std::vector<MethodKind> methods{MethodKind::default_threshold};
    MethodConfigs method;
    std::vector<Seed> seeds{0};
    std::filesystem::path output_dir;
    std::filesystem::path cache_dir;  // empty: baselines are always retrained
    std::size_t workers = 1;

    ObjectiveSpec selection_spec() const;
    void validate() const;
};

/// Missing keys keep their defaults; unknown keys are rejected.
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Data loaded and split once per experiment.
struct PreparedData {
    Splits splits;
    std::uint64_t hash = 0;  // content hash of the unsplit dataset
};

PreparedData prepare_data(const ExperimentConfig& cfg);

/// Key identifying a baseline checkpoint: dataset, split, architecture, training config and seed.
std::string baseline_key(const ExperimentConfig& cfg, std::uint64_t data_hash, Seed seed);

/// Trains the seed's baseline, or reloads it from `cfg.cache_dir` when the
/// sidecar key file matches exactly.
Network baseline_network(const ExperimentConfig& cfg, const PreparedData& data, Seed seed);

/// Outcome of one method applied to one baseline. Post-processing methods
/// leave `network` empty and carry a rule instead.
struct MethodOutcome {
    MethodKind method = MethodKind::default_threshold;
    double threshold = 0.5;
    EvalReport valid;
    EvalReport test;
    std::optional<Network> network;
    std::optional<PostprocRule> rule;
    std::vector<TraceEntry> trace;
};

/// Seed handed to the method's own randomness for a trial seed.
Seed method_seed(Seed trial_seed, MethodKind kind);

/// Runs the method against the validation split only, then evaluates the
/// selected model once on test. Both reports use `cfg.objective`.
MethodOutcome run_method(MethodKind kind, const Network& baseline, const Splits& splits, const ExperimentConfig& cfg,
                         Seed trial_seed);

struct TrialResult {
    MethodKind method = MethodKind::default_threshold;
    Seed seed = 0;
    std::optional<MethodOutcome> outcome;  // empty when the trial failed
    std::string error;
    double seconds = 0.0;
};

struct AggregateRow {
    MethodKind method = MethodKind::default_threshold;
    std::size_t trials = 0;
    std::size_t failed = 0;
    double bias_mean = 0.0;
    double bias_std = 0.0;
    double objective_median = 0.0;
    double performance_mean = 0.0;
    bool default_positive = false;  // the default's median test objective is > 0
};

struct SweepResult {
    std::vector<TrialResult> trials;  // method-major, seeds in config order
    std::vector<AggregateRow> aggregate;
};

/// Median; the mean of the two middle values for even sizes.
double median(std::vector<double> values);
/// Sample standard deviation; 0 for fewer than two values.
double sample_std(std::span<const double> values);

std::vector<AggregateRow> aggregate_trials(const std::vector<MethodKind>& methods, const std::vector<TrialResult>& trials,
                                           const std::vector<double>& default_objectives);

/// Every (method, seed) cell on a pool of `cfg.workers` threads. Failed cells
/// are recorded and the sweep continues. Writes outputs when `cfg.output_dir` is set.
SweepResult run_sweep(const ExperimentConfig& cfg);

void write_sweep(const ExperimentConfig& cfg, const SweepResult& result);

// ---------------------------------------------------------------------------
// Variance study

struct MeasureSummary {
    double mean = 0.0;
    double std = 0.0;
};

struct VarianceRow {
    Seed seed = 0;
    double aod = 0.0;
    double eod = 0.0;
    double spd = 0.0;
    double accuracy = 0.0;
};

struct VarianceReport {
    std::vector<VarianceRow> networks;
    MeasureSummary aod;
    MeasureSummary eod;
    MeasureSummary spd;
    MeasureSummary accuracy;
    bool single_network = false;  // std is 0 by convention
};

VarianceReport summarize_variance(std::vector<VarianceRow> rows);

/// Trains `networks` baselines with seeds seeds[0], seeds[0] + 1, ... and
/// evaluates each at threshold 0.5 on test.
VarianceReport variance_study(const ExperimentConfig& cfg, std::size_t networks = 10);

// ---------------------------------------------------------------------------
// Sensitivity study

struct LinearFit {
    std::vector<double> coef;
    double intercept = 0.0;
    double r2 = 0.0;
    bool ridge_used = false;
};

/// Least squares of y on the columns of x with an intercept. When there are at
/// least as many columns as rows the centered problem is solved with a ridge
/// penalty in dual form and `ridge_used` is set.
LinearFit fit_linear(const Matrix& x, const Vector& y, double ridge);

double r_squared(const Vector& y, const Vector& predicted);

/// Singular values of the matrix whose rows are the given vectors scaled to unit length.
std::vector<double> normalized_singular_values(const Matrix& rows);

struct SensitivityConfig {
    std::size_t networks = 10;
    std::size_t deltas = 1000;
    double delta_std = 0.1;
    double ridge = 1e-6;
    BiasKind measure = BiasKind::spd;
    double holdout_fraction = 0.2;
};

struct SensitivityNetwork {
    Seed seed = 0;
    double r2 = 0.0;          // in-sample
    double holdout_r2 = 0.0;  // refit on the first deltas, scored on the rest
    bool ridge_used = false;
    std::vector<double> sorted_abs_coef;  // descending
};

struct SensitivityReport {
    std::vector<SensitivityNetwork> networks;
    std::vector<double> singular_values;
};

/// Measured bias on test of `deltas` multiplicative perturbations N(1, delta_std) of a network.
struct PerturbationSample {
    Matrix deltas;
    Vector bias;
};
PerturbationSample perturbation_sample(const Network& net, const DataSet& test, const SensitivityConfig& cfg, Seed seed);

SensitivityReport sensitivity_study(const ExperimentConfig& cfg, const SensitivityConfig& scfg);

// ---------------------------------------------------------------------------

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const DataSet& ds, const ObjectiveSpec& spec,
                               double threshold);

}  // namespace intrafair
