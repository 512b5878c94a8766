#pragma once

#include "intrafair/blackbox.hpp"
#include "intrafair/data.hpp"
#include "intrafair/metrics.hpp"
#include "intrafair/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace intrafair {

/// One evaluated candidate during a debiasing run.
struct TraceEntry {
    std::size_t iteration = 0;
    double objective = 0.0;
    double bias_value = 0.0;
    double performance = 0.0;
    double threshold = 0.0;
    int layer = -1;  // layer-wise optimisation only
};

/// Fine-tuned network with its decision threshold.
///
/// `valid_report` is recomputable from (network, threshold) on the validation
/// set. `test_report` is filled in afterwards by `attach_test_report`; no
/// debiasing routine ever receives the test split.
struct DebiasResult {
    std::string method;
    Network network;
    double threshold = 0.5;
    EvalReport valid_report;
    std::optional<EvalReport> test_report;
    std::vector<TraceEntry> trace;

    FlatWeights weights() const { return get_flat(network); }
};

/// Evaluates the network at its best threshold for `spec` on `ds`.
ThresholdChoice best_threshold(const Network& net, const DataSet& ds, const ObjectiveSpec& spec);

/// Evaluation report of `net` at a fixed threshold.
EvalReport evaluate_network(const Network& net, const DataSet& ds, const ObjectiveSpec& spec, double threshold);

void attach_test_report(DebiasResult& result, const DataSet& test, const ObjectiveSpec& spec);

/// The unmodified network with its validation-optimal threshold.
DebiasResult default_threshold_only(const Network& net, const DataSet& valid, const ObjectiveSpec& spec);

// ---------------------------------------------------------------------------
// Random perturbation

struct RandomPerturbConfig {
    std::size_t iterations = 100;
    double noise_std = 0.1;
    Seed seed = 0;
};

/// Evaluates the original weights (iteration 0) and then `iterations`
/// independent multiplicative Gaussian perturbations N(1, noise_std) of the
/// original parameters; keeps the candidate with the best validation objective.
DebiasResult random_perturbation(const Network& net, const DataSet& valid, const ObjectiveSpec& spec,
                                 const RandomPerturbConfig& cfg);

// ---------------------------------------------------------------------------
// Layer-wise optimisation

struct LayerwiseConfig {
    std::size_t per_layer_budget = 50;
    std::vector<std::size_t> layer_budgets;  // layer i uses layer_budgets[i] when present
    std::size_t n_init = 0;  // 0: blackbox default
    double relative_halfwidth = 0.5;
    double abs_halfwidth = 0.1;
    AcquisitionSpec acquisition;
    GbrtConfig gbrt;
    Seed seed = 0;

    std::size_t budget_for(std::size_t layer) const {
        return layer < layer_budgets.size() ? layer_budgets[layer] : per_layer_budget;
    }
};

/// For each layer in turn (the others held at their original values) runs the
/// GBRT/LCB minimiser on -objective over that layer's parameters, thresholding
/// optimally inside every evaluation. Returns the single best layer replacement,
/// or the original network if none improves on it.
DebiasResult layerwise_optimization(const Network& net, const DataSet& valid, const ObjectiveSpec& spec,
                                    const LayerwiseConfig& cfg);

// ---------------------------------------------------------------------------
// Adversarial fine-tuning

/// Maps a minibatch representation (rows x width) to one real number, the
/// estimated minibatch bias.
///
/// With an empty encoder the rows are concatenated into a single input of the
/// head MLP. Otherwise each row goes through a shared encoder MLP and the head
/// sees the mean encoding, which makes the critic invariant to row order.
class Critic {
public:
    Critic() = default;
    Critic(std::size_t rows, std::size_t width, const std::vector<std::size_t>& encoder_hidden,
           const std::vector<std::size_t>& head_hidden, Seed seed);

    std::size_t rows() const { return rows_; }
    std::size_t width() const { return width_; }
    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }

    double forward(const Matrix& batch) const;

    struct Gradient {
        double output = 0.0;
        std::vector<double> params;
        Matrix input;
    };
    /// Output plus gradients of `upstream * output` with respect to parameters and input.
    Gradient backward(const Matrix& batch, double upstream) const;

    struct Stack {
        std::vector<std::size_t> sizes;
        std::size_t offset = 0;
        bool relu_last = false;
    };

private:
    std::size_t rows_ = 0;
    std::size_t width_ = 0;
    Stack encoder_;
    Stack head_;
    std::vector<double> params_;
};

struct AdversarialConfig {
    double lambda = 30.0;
    double epsilon = 0.05;
    std::optional<double> delta;  // defaults to epsilon / 2
    std::size_t outer_iterations = 50;
    std::size_t critic_steps = 30;
    std::size_t critic_warmup = 0;  // extra critic steps before the first actor step
    std::size_t actor_steps = 10;
    std::size_t batch_size = 64;
    double actor_lr = 1e-4;
    double critic_lr = 1e-3;
    std::vector<std::size_t> critic_encoder{32, 32};  // empty: plain concatenation
    std::vector<std::size_t> critic_hidden{64, 64};
    bool critic_context = true;  // append group (and label for EOD/AOD) to each critic row
    std::size_t max_resample = 100;
    Mode actor_mode = Mode::train;  // batch statistics and dropout during actor steps
    Seed seed = 0;

    double effective_delta() const { return delta.value_or(epsilon / 2.0); }
    void validate() const;
};

/// max{1, lambda * (|mu_hat| - epsilon + delta) + 1}.
double loss_multiplier(double critic_estimate, double lambda, double epsilon, double delta);

/// Alternates critic regression onto bootstrapped minibatch bias with actor
/// steps on the bias-weighted cross-entropy; reselects the threshold after
/// each outer iteration and returns the best validation snapshot.
DebiasResult adversarial_finetune(const Network& net, const DataSet& valid, const ObjectiveSpec& spec,
                                  const AdversarialConfig& cfg);

// ---------------------------------------------------------------------------
// Protected-attribute adversary

struct ProtectedAdversaryConfig {
    double alpha = 1.0;
    bool projection = true;
    std::optional<bool> use_label;  // default: true for EOD/AOD, false for SPD
    std::size_t outer_iterations = 50;
    std::size_t adversary_steps = 30;
    std::size_t actor_steps = 10;
    std::size_t batch_size = 64;
    double actor_lr = 1e-4;  // one tenth of the default training rate
    double adversary_lr = 1e-3;
    std::size_t max_resample = 100;
    Seed seed = 0;
};

/// Logistic adversary that predicts the protected attribute from the
/// classifier output s = sigmoid((1 + |c|) * logit), optionally with s*y and
/// s*(1-y) for the equalized-odds variant.
struct ProtectedAdversary {
    double c = 0.0;
    std::vector<double> w;
    double b = 0.0;

    explicit ProtectedAdversary(bool use_label = false);
    std::size_t num_parameters() const { return w.size() + 2; }

    struct Result {
        double loss = 0.0;
        std::vector<double> param_grad;  // (c, w..., b)
        Vector logit_grad;               // d loss / d classifier logit
    };
    /// Mean BCE of predicting `groups` and its gradients.
    Result evaluate(const Vector& logits, std::span<const int> labels, std::span<const int> groups) const;
    std::vector<double> pack() const;
    void unpack(std::span<const double> p);
};

/// Actor update direction g_task - proj_{g_adv} g_task - alpha * g_adv, where
/// g_adv is the gradient of the adversary's loss.
std::vector<double> debiased_direction(std::span<const double> task_grad, std::span<const double> adversary_grad,
                                       double alpha, bool projection);

DebiasResult protected_attr_adversarial(const Network& net, const DataSet& valid, const ObjectiveSpec& spec,
                                        const ProtectedAdversaryConfig& cfg);

}  // namespace intrafair
