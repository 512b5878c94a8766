#include "intrafair/blackbox.hpp"

#include "intrafair/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace intrafair {

// ---------------------------------------------------------------------------
// Regression tree

PresortedFeatures PresortedFeatures::build(std::span<const std::vector<double>> points) {
    PresortedFeatures p;
    p.n = points.size();
    p.d = p.n ? points[0].size() : 0;
    p.index.resize(p.n * p.d);
    p.value.resize(p.n * p.d);
    std::vector<std::uint32_t> idx(p.n);
    for (std::size_t f = 0; f < p.d; ++f) {
        std::iota(idx.begin(), idx.end(), std::uint32_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) { return points[a][f] < points[b][f]; });
        for (std::size_t k = 0; k < p.n; ++k) {
            p.index[f * p.n + k] = idx[k];
            p.value[f * p.n + k] = points[idx[k]][f];
        }
    }
    return p;
}

RegressionTree RegressionTree::fit(std::span<const std::vector<double>> points, std::span<const double> targets,
                                   const PresortedFeatures& sorted, std::size_t depth) {
    const std::size_t n = targets.size();
    const std::size_t d = sorted.d;
    if (sorted.n != n) throw ShapeError("regression tree: presorted features do not match targets");
    RegressionTree tree;
    if (n == 0) {
        tree.nodes_.push_back({});
        return tree;
    }

    std::vector<double> inv(n + 1, 0.0);
    for (std::size_t c = 1; c <= n; ++c) inv[c] = 1.0 / static_cast<double>(c);

    std::vector<int> node_of(n, 0);
    tree.nodes_.push_back({-1, 0.0, -1, -1, std::accumulate(targets.begin(), targets.end(), 0.0) / static_cast<double>(n)});
    std::vector<int> active{0};

    struct Candidate {
        int feature = -1;
        double threshold = 0.0;
    };

    for (std::size_t level = 0; level < depth && !active.empty(); ++level) {
        // slot_of maps a node id to its position in `active` (-1 when not splittable this level).
        std::vector<int> slot_of(tree.nodes_.size(), -1);
        for (std::size_t s = 0; s < active.size(); ++s) slot_of[static_cast<std::size_t>(active[s])] = static_cast<int>(s);

        const std::size_t m = active.size();
        std::vector<double> total_sum(m, 0.0);
        std::vector<double> total_cnt(m, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const int s = slot_of[static_cast<std::size_t>(node_of[i])];
            if (s < 0) continue;
            total_sum[static_cast<std::size_t>(s)] += targets[i];
            total_cnt[static_cast<std::size_t>(s)] += 1.0;
        }

        // Split score ls^2/lc + rs^2/rc; the gain subtracts the constant parent term.
        std::vector<Candidate> best(m);
        std::vector<double> best_score(m);
        for (std::size_t s = 0; s < m; ++s) best_score[s] = total_sum[s] * total_sum[s] * inv[static_cast<std::size_t>(total_cnt[s])];
        std::vector<double> left_sum(m);
        std::vector<std::size_t> left_cnt(m);
        std::vector<double> prev(m);
        std::vector<int> slot(n);
        for (std::size_t i = 0; i < n; ++i) slot[i] = slot_of[static_cast<std::size_t>(node_of[i])];
        for (std::size_t f = 0; f < d; ++f) {
            std::fill(left_sum.begin(), left_sum.end(), 0.0);
            std::fill(left_cnt.begin(), left_cnt.end(), 0);
            const std::uint32_t* order = sorted.index.data() + f * n;
            const double* values = sorted.value.data() + f * n;
            for (std::size_t k = 0; k < n; ++k) {
                const std::uint32_t idx = order[k];
                const int si = slot[idx];
                if (si < 0) continue;
                const auto s = static_cast<std::size_t>(si);
                const double v = values[k];
                if (left_cnt[s] > 0 && v > prev[s]) {
                    const double ls = left_sum[s];
                    const double rs = total_sum[s] - ls;
                    const auto lc = left_cnt[s];
                    const auto rc = static_cast<std::size_t>(total_cnt[s]) - lc;
                    const double score = ls * ls * inv[lc] + rs * rs * inv[rc];
                    if (score > best_score[s] + 1e-12) {
                        double thr = prev[s] + (v - prev[s]) / 2.0;
                        if (!(thr < v)) thr = prev[s];
                        best_score[s] = score;
                        best[s].feature = static_cast<int>(f);
                        best[s].threshold = thr;
                    }
                }
                left_sum[s] += targets[idx];
                ++left_cnt[s];
                prev[s] = v;
            }
        }

        std::vector<int> next;
        for (std::size_t s = 0; s < m; ++s) {
            if (best[s].feature < 0) continue;
            const int id = active[s];
            const int left = static_cast<int>(tree.nodes_.size());
            tree.nodes_.push_back({});
            tree.nodes_.push_back({});
            auto& node = tree.nodes_[static_cast<std::size_t>(id)];
            node.feature = best[s].feature;
            node.threshold = best[s].threshold;
            node.left = left;
            node.right = left + 1;
            next.push_back(left);
            next.push_back(left + 1);
        }
        // Route samples of split nodes and compute child means.
        std::vector<double> sums(tree.nodes_.size(), 0.0);
        std::vector<double> counts(tree.nodes_.size(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& node = tree.nodes_[static_cast<std::size_t>(node_of[i])];
            if (node.feature < 0 || slot_of[static_cast<std::size_t>(node_of[i])] < 0) continue;
            node_of[i] = points[i][static_cast<std::size_t>(node.feature)] <= node.threshold ? node.left : node.right;
            sums[static_cast<std::size_t>(node_of[i])] += targets[i];
            counts[static_cast<std::size_t>(node_of[i])] += 1.0;
        }
        for (int c : next) {
            const auto k = static_cast<std::size_t>(c);
            tree.nodes_[k].value = counts[k] > 0.0 ? sums[k] / counts[k] : 0.0;
        }
        active = std::move(next);
    }
    return tree;
}

double RegressionTree::predict(std::span<const double> x) const {
    std::size_t k = 0;
    while (nodes_[k].feature >= 0) {
        const auto& node = nodes_[k];
        k = static_cast<std::size_t>(x[static_cast<std::size_t>(node.feature)] <= node.threshold ? node.left : node.right);
    }
    return nodes_[k].value;
}

// ---------------------------------------------------------------------------
// Boosting

BoostedTrees BoostedTrees::fit(std::span<const std::vector<double>> points, std::span<const double> targets,
                               std::size_t n_trees, std::size_t depth, double shrinkage) {
    const std::size_t n = targets.size();
    if (n == 0) throw ValidationError("boosting: no observations");
    const std::size_t d = points[0].size();

    for (const auto& p : points) {
        if (p.size() != d) throw ShapeError("boosting: points have different dimensions");
    }
    const auto sorted = PresortedFeatures::build(points);

    BoostedTrees model;
    model.shrinkage_ = shrinkage;
    model.base_ = std::accumulate(targets.begin(), targets.end(), 0.0) / static_cast<double>(n);
    std::vector<double> residual(n);
    for (std::size_t i = 0; i < n; ++i) residual[i] = targets[i] - model.base_;

    model.trees_.reserve(n_trees);
    for (std::size_t t = 0; t < n_trees; ++t) {
        auto tree = RegressionTree::fit(points, residual, sorted, depth);
        if (tree.nodes().size() == 1) break;  // no split reduces the loss any further
        for (std::size_t i = 0; i < n; ++i) residual[i] -= shrinkage * tree.predict(points[i]);
        model.trees_.push_back(std::move(tree));
    }
    return model;
}

double BoostedTrees::predict(std::span<const double> x) const {
    double out = base_;
    for (const auto& t : trees_) out += shrinkage_ * t.predict(x);
    return out;
}

// ---------------------------------------------------------------------------
// Ensemble

GbrtModel GbrtModel::fit(std::span<const Observation> observations, const GbrtConfig& cfg, Seed seed) {
    if (observations.size() < 2) throw ValidationError("gbrt: need at least 2 observations");
    if (cfg.ensemble_size == 0) throw ValidationError("gbrt: ensemble size must be positive");
    const std::size_t n = observations.size();
    const std::size_t d = observations[0].point.size();
    for (const auto& o : observations) {
        if (o.point.size() != d) throw ShapeError("gbrt: observations have different dimensions");
    }

    GbrtModel model;
    model.dim_ = d;
    std::vector<std::vector<double>> points(n);
    std::vector<double> targets(n);
    for (std::size_t k = 0; k < cfg.ensemble_size; ++k) {
        if (cfg.bootstrap) {
            Rng rng(derive_seed(seed, k));
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            for (std::size_t i = 0; i < n; ++i) {
                const auto j = pick(rng);
                points[i] = observations[j].point;
                targets[i] = observations[j].value;
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                points[i] = observations[i].point;
                targets[i] = observations[i].value;
            }
        }
        model.members_.push_back(BoostedTrees::fit(points, targets, cfg.trees_per_model, cfg.depth, cfg.shrinkage));
    }
    return model;
}

Prediction GbrtModel::predict(std::span<const double> x) const {
    if (x.size() != dim_) throw ShapeError("gbrt: query dimension mismatch");
    const std::size_t k = members_.size();
    std::vector<double> values(k);
    for (std::size_t i = 0; i < k; ++i) values[i] = members_[i].predict(x);
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(k);
    if (k < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(k - 1))};
}

// ---------------------------------------------------------------------------
// Search space and acquisition

SearchSpace SearchSpace::around(std::span<const double> center, double relative_halfwidth, double abs_halfwidth) {
    if (!(relative_halfwidth > 0.0) || !(abs_halfwidth > 0.0)) throw ValidationError("search space: halfwidths must be positive");
    SearchSpace s;
    s.lower.resize(center.size());
    s.upper.resize(center.size());
    for (std::size_t i = 0; i < center.size(); ++i) {
        const double c = center[i];
        if (c == 0.0) {
            s.lower[i] = -abs_halfwidth;
            s.upper[i] = abs_halfwidth;
        } else {
            const double a = c * (1.0 - relative_halfwidth);
            const double b = c * (1.0 + relative_halfwidth);
            s.lower[i] = std::min(a, b);
            s.upper[i] = std::max(a, b);
        }
    }
    return s;
}

SearchSpace SearchSpace::box(std::vector<double> lower, std::vector<double> upper) {
    if (lower.size() != upper.size()) throw ShapeError("search space: bound lengths differ");
    for (std::size_t i = 0; i < lower.size(); ++i) {
        if (!(lower[i] <= upper[i])) throw ValidationError("search space: lower bound exceeds upper bound");
    }
    return {std::move(lower), std::move(upper)};
}

bool SearchSpace::contains(std::span<const double> x) const {
    if (x.size() != dim()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] < lower[i] || x[i] > upper[i]) return false;
    }
    return true;
}

std::vector<double> SearchSpace::sample(Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> x(dim());
    for (std::size_t i = 0; i < dim(); ++i) x[i] = std::min(upper[i], lower[i] + u(rng) * (upper[i] - lower[i]));
    return x;
}

double lower_confidence_bound(const Prediction& p, double beta) { return p.mean - beta * p.sigma; }

std::vector<double> propose(const GbrtModel& model, const SearchSpace& space, const AcquisitionSpec& acq, Seed seed) {
    if (model.dim() != space.dim()) throw ShapeError("propose: model and space dimensions differ");
    if (!std::isfinite(acq.beta) || acq.beta < 0.0) throw ValidationError("acquisition: beta must be finite and >= 0");
    if (acq.pool_size == 0) throw ValidationError("acquisition: pool size must be positive");
    Rng rng(seed);
    std::vector<double> best;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < acq.pool_size; ++k) {
        auto x = space.sample(rng);
        const double score = lower_confidence_bound(model.predict(x), acq.beta);
        if (best.empty() || score < best_score) {
            best_score = score;
            best = std::move(x);
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Minimisation

std::size_t MinimizeConfig::effective_n_init() const {
    const std::size_t n = n_init > 0 ? n_init : std::max<std::size_t>(10, budget / 5);
    return std::min(n, budget);
}

namespace {

void record(MinimizeResult& r, std::vector<double> x, double v) {
    if (!std::isfinite(v)) v = std::numeric_limits<double>::infinity();
    if (r.history.empty() || v < r.best_value) {
        r.best_value = v;
        r.best_point = x;
        r.best_index = r.history.size();
    }
    r.history.push_back({std::move(x), v});
}

// Surrogates cannot fit infinities; they are replaced by a value just above the worst finite one.
std::vector<Observation> sanitized(const std::vector<Observation>& history) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& o : history) {
        if (std::isfinite(o.value)) {
            lo = std::min(lo, o.value);
            hi = std::max(hi, o.value);
        }
    }
    const double worst = std::isfinite(hi) ? hi + std::max(1.0, hi - lo) : 0.0;
    std::vector<Observation> out = history;
    for (auto& o : out) {
        if (!std::isfinite(o.value)) o.value = worst;
    }
    return out;
}

}  // namespace

MinimizeResult minimize(const Objective& f, const SearchSpace& space, const MinimizeConfig& cfg,
                        const std::vector<std::vector<double>>& initial_points) {
    const std::size_t n_init = cfg.effective_n_init();
    if (cfg.budget < 2 || n_init < 2) throw ValidationError("minimize: need budget >= n_init >= 2");
    for (const auto& p : initial_points) {
        if (p.size() != space.dim()) throw ShapeError("minimize: initial point has wrong dimension");
    }

    MinimizeResult result;
    result.history.reserve(cfg.budget);
    Rng rng(derive_seed(cfg.seed, 0));
    for (std::size_t t = 0; t < cfg.budget; ++t) {
        std::vector<double> x;
        if (t < initial_points.size()) {
            x = initial_points[t];
        } else if (t < n_init) {
            x = space.sample(rng);
        } else {
            const auto obs = sanitized(result.history);
            const auto model = GbrtModel::fit(obs, cfg.gbrt, derive_seed(cfg.seed, 1'000'000 + t));
            x = propose(model, space, cfg.acquisition, derive_seed(cfg.seed, 2'000'000 + t));
        }
        const double v = f(x);
        record(result, std::move(x), v);
    }
    return result;
}

MinimizeResult random_search(const Objective& f, const SearchSpace& space, std::size_t budget, Seed seed) {
    if (budget == 0) throw ValidationError("random search: budget must be positive");
    MinimizeResult result;
    Rng rng(derive_seed(seed, 0));
    for (std::size_t t = 0; t < budget; ++t) {
        auto x = space.sample(rng);
        const double v = f(x);
        record(result, std::move(x), v);
    }
    return result;
}

}  // namespace intrafair
