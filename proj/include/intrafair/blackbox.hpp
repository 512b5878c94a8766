#pragma once

#include "intrafair/rng.hpp"
#include "intrafair/types.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace intrafair {

struct Observation {
    std::vector<double> point;
    double value = 0.0;
};

/// Per-feature sample order, stored contiguously: entry (f, k) is the k-th
/// smallest sample on feature f.
struct PresortedFeatures {
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<std::uint32_t> index;
    std::vector<double> value;

    static PresortedFeatures build(std::span<const std::vector<double>> points);
};

/// Least-squares regression tree with axis-aligned splits `x[feature] <= threshold`.
class RegressionTree {
public:
    struct Node {
        int feature = -1;  // -1 marks a leaf
        double threshold = 0.0;
        int left = -1;
        int right = -1;
        double value = 0.0;
    };

    /// Exhaustive best-split search on every feature, grown to `depth` levels.
    static RegressionTree fit(std::span<const std::vector<double>> points, std::span<const double> targets,
                              const PresortedFeatures& sorted, std::size_t depth);

    double predict(std::span<const double> x) const;
    const std::vector<Node>& nodes() const { return nodes_; }

private:
    std::vector<Node> nodes_;
};

/// Stage-wise boosted trees fitted to residuals of squared loss.
class BoostedTrees {
public:
    static BoostedTrees fit(std::span<const std::vector<double>> points, std::span<const double> targets,
                            std::size_t n_trees, std::size_t depth, double shrinkage);

    double predict(std::span<const double> x) const;
    const std::vector<RegressionTree>& trees() const { return trees_; }

private:
    double base_ = 0.0;
    double shrinkage_ = 0.1;
    std::vector<RegressionTree> trees_;
};

struct GbrtConfig {
    std::size_t ensemble_size = 5;
    std::size_t depth = 3;
    double shrinkage = 0.1;
    std::size_t trees_per_model = 100;
    bool bootstrap = true;
};

struct Prediction {
    double mean = 0.0;
    double sigma = 0.0;
};

/// Ensemble of boosted models, each fitted to a bootstrap resample.
/// The spread across members is the uncertainty estimate.
class GbrtModel {
public:
    static GbrtModel fit(std::span<const Observation> observations, const GbrtConfig& cfg, Seed seed);

    /// Mean over members and their sample standard deviation (0 for a single member).
    Prediction predict(std::span<const double> x) const;
    std::size_t ensemble_size() const { return members_.size(); }
    std::size_t dim() const { return dim_; }

private:
    std::vector<BoostedTrees> members_;
    std::size_t dim_ = 0;
};

/// Axis-aligned box of candidate points.
struct SearchSpace {
    std::vector<double> lower;
    std::vector<double> upper;

    /// Box [c(1-s), c(1+s)] per coordinate (ordered), with `abs_halfwidth` around zero coordinates.
    static SearchSpace around(std::span<const double> center, double relative_halfwidth, double abs_halfwidth = 0.1);
    static SearchSpace box(std::vector<double> lower, std::vector<double> upper);

    std::size_t dim() const { return lower.size(); }
    bool contains(std::span<const double> x) const;
    std::vector<double> sample(Rng& rng) const;
};

struct AcquisitionSpec {
    double beta = 1.0;
    std::size_t pool_size = 1000;
};

/// Lower confidence bound mean - beta * sigma.
double lower_confidence_bound(const Prediction& p, double beta);

/// Argmin of the lower confidence bound over `pool_size` uniform samples of the space.
std::vector<double> propose(const GbrtModel& model, const SearchSpace& space, const AcquisitionSpec& acq, Seed seed);

struct MinimizeConfig {
    std::size_t budget = 50;
    std::size_t n_init = 0;  // 0 selects max(10, budget / 5), capped at budget
    AcquisitionSpec acquisition;
    GbrtConfig gbrt;
    Seed seed = 0;

    std::size_t effective_n_init() const;
};

struct MinimizeResult {
    std::vector<double> best_point;
    double best_value = 0.0;
    std::size_t best_index = 0;
    std::vector<Observation> history;
};

using Objective = std::function<double(std::span<const double>)>;

/// Sequential model-based minimisation: `n_init` random evaluations, then one
/// surrogate-guided proposal per remaining evaluation. `initial_points` are
/// evaluated first and count toward both `n_init` and `budget`.
/// Non-finite objective values are recorded as +infinity.
MinimizeResult minimize(const Objective& f, const SearchSpace& space, const MinimizeConfig& cfg,
                        const std::vector<std::vector<double>>& initial_points = {});

/// Uniform random search with the same budget and history bookkeeping.
MinimizeResult random_search(const Objective& f, const SearchSpace& space, std::size_t budget, Seed seed);

}  // namespace intrafair
