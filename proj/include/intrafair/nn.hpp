#pragma once

#include "intrafair/data.hpp"
#include "intrafair/rng.hpp"
#include "intrafair/types.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace intrafair {

enum class Mode { train, eval };

enum class ParamKind { weight, bias, scale, shift };

/// Where one parameter tensor lives inside the flat parameter vector.
struct ParamSlot {
    std::size_t layer = 0;
    ParamKind kind = ParamKind::weight;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;

    std::size_t size() const { return rows * cols; }
    bool operator==(const ParamSlot&) const = default;
};

/// Trainable parameters as one vector plus the layout mapping it back onto layers.
struct FlatWeights {
    std::vector<double> values;
    std::vector<ParamSlot> layout;
};

/// Architecture of a feed-forward binary classifier.
struct Architecture {
    std::vector<std::size_t> hidden = std::vector<std::size_t>(10, 32);
    double dropout = 0.2;
};

/// Dense feed-forward network.
///
/// Every layer is dense -> batch-norm; hidden layers continue with ReLU and
/// dropout, the last layer has a single unit whose logit goes through the
/// logistic function. Parameters of layer `i` (W, b, gamma, beta) occupy one
/// contiguous slice of `parameters()`; running statistics live separately.
/// Layers are indexed from 0.
class Network {
public:
    struct Layer {
        std::size_t in = 0;
        std::size_t out = 0;
        std::size_t param_offset = 0;
        std::size_t stat_offset = 0;

        std::size_t param_count() const { return out * in + 3 * out; }
        bool operator==(const Layer&) const = default;
    };

    using MatrixMap = Eigen::Map<Matrix>;
    using ConstMatrixMap = Eigen::Map<const Matrix>;
    using RowMap = Eigen::Map<Eigen::RowVectorXd>;
    using ConstRowMap = Eigen::Map<const Eigen::RowVectorXd>;

    static constexpr double kBatchNormMomentum = 0.9;
    static constexpr double kBatchNormEps = 1e-5;

    Network() = default;

    /// Layer widths are `hidden` followed by the single output unit. Weights use
    /// the usual fan-in uniform initialisation; BN scale 1, shift 0.
    Network(std::size_t input_dim, const std::vector<std::size_t>& hidden, double dropout, Seed init_seed);

    /// Same shape with every parameter zero (running mean 0, running variance 1).
    static Network zeros(std::size_t input_dim, const std::vector<std::size_t>& hidden, double dropout = 0.0);

    std::size_t input_dim() const { return layers_.empty() ? 0 : layers_.front().in; }
    std::size_t num_layers() const { return layers_.size(); }
    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<std::size_t> hidden_sizes() const;
    /// Width of the penultimate representation (input width for a one-layer net).
    std::size_t representation_dim() const { return layers_.back().in; }
    double dropout() const { return dropout_; }

    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::span<double> running_stats() { return stats_; }
    std::span<const double> running_stats() const { return stats_; }

    std::span<double> layer_parameters(std::size_t i);
    std::span<const double> layer_parameters(std::size_t i) const;

    ConstMatrixMap weight(std::size_t i) const;
    ConstRowMap bias(std::size_t i) const;
    ConstRowMap scale(std::size_t i) const;
    ConstRowMap shift(std::size_t i) const;
    ConstRowMap running_mean(std::size_t i) const;
    ConstRowMap running_var(std::size_t i) const;
    MatrixMap weight(std::size_t i);
    RowMap scale(std::size_t i);
    RowMap shift(std::size_t i);
    RowMap running_mean(std::size_t i);
    RowMap running_var(std::size_t i);

    std::vector<ParamSlot> layout() const;

    bool all_finite() const;
    bool operator==(const Network& other) const = default;

private:
    void build(std::size_t input_dim, const std::vector<std::size_t>& hidden);

    std::vector<Layer> layers_;
    std::vector<double> params_;
    std::vector<double> stats_;
    double dropout_ = 0.0;
};

// ---------------------------------------------------------------------------
// Forward / backward

/// Intermediate values of one forward pass, kept for backpropagation.
struct ForwardCache {
    Mode mode = Mode::eval;
    std::vector<Matrix> inputs;         // input of layer l
    std::vector<Matrix> normalized;     // batch-normalised pre-activation
    std::vector<Matrix> pre_relu;       // gamma * normalized + beta
    std::vector<Matrix> dropout_masks;  // empty matrix when no dropout applied
    std::vector<Eigen::RowVectorXd> inv_std;
    std::vector<Eigen::RowVectorXd> batch_mean;
    std::vector<Eigen::RowVectorXd> batch_var;
    Vector logits;

    const Matrix& representation() const { return inputs.back(); }
};

/// Full forward pass. In train mode batch statistics are used and, when
/// `dropout_rng` is given, dropout is applied. The network is not modified.
ForwardCache forward_cached(const Network& net, const Matrix& x, Mode mode, Rng* dropout_rng = nullptr);

/// Evaluation-mode probabilities f(x) in (0,1).
Vector forward(const Network& net, const Matrix& x);
Vector forward(const Network& net, const Matrix& x, Mode mode, Rng* dropout_rng = nullptr);

/// Evaluation-mode output of all but the last layer.
Matrix penultimate(const Network& net, const Matrix& representation_input);

/// Applies only the last layer (evaluation mode) to a penultimate representation.
Vector apply_final_layer(const Network& net, const Matrix& representation);

double sigmoid(double z);
Vector sigmoid(const Vector& z);

/// Mean (optionally weighted) binary cross-entropy computed from logits.
double bce_from_logits(const Vector& logits, std::span<const int> labels, std::span<const double> weights = {});

/// d(mean weighted BCE)/d logit.
Vector bce_logit_gradient(const Vector& logits, std::span<const int> labels, std::span<const double> weights = {});

struct Gradients {
    std::vector<double> params;  // same layout as Network::parameters()
    Matrix input;                // gradient with respect to the network input
    Matrix representation;       // gradient with respect to the penultimate representation
};

/// Backpropagates an upstream gradient on the logits, plus an optional extra
/// gradient injected at the penultimate representation.
Gradients backward(const Network& net, const ForwardCache& cache, const Vector& d_logits,
                   const Matrix* d_representation = nullptr);

struct LossGradients {
    double loss = 0.0;
    Gradients grads;
};

/// Analytic gradients of mean (per-example weighted) binary cross-entropy.
/// Throws NumericError if the loss is not finite.
LossGradients bce_gradients(const Network& net, const Matrix& x, std::span<const int> labels, Mode mode,
                            std::span<const double> weights = {}, Rng* dropout_rng = nullptr);

/// Exponential moving average of batch statistics from a train-mode pass.
void update_running_stats(Network& net, const ForwardCache& cache);

// ---------------------------------------------------------------------------
// Optimisation

class Adam {
public:
    explicit Adam(std::size_t size, double learning_rate = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);

    void step(std::span<double> params, std::span<const double> grads);
    double learning_rate() const { return lr_; }

private:
    std::vector<double> m_;
    std::vector<double> v_;
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    std::size_t t_ = 0;
};

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    std::size_t max_epochs = 1000;
    std::size_t patience = 100;
    Seed seed = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double valid_loss = 0.0;
};

struct TrainResult {
    Network network;  // parameters of the epoch with the best validation loss
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};

/// Adam on binary cross-entropy with early stopping on validation BCE.
/// Training stops once `patience` consecutive epochs fail to improve and one more does too.
TrainResult train(const DataSet& train_set, const DataSet& valid_set, const Architecture& arch,
                  const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Flat weight access

FlatWeights get_flat(const Network& net);
Network set_flat(const Network& net, const FlatWeights& flat);

std::vector<double> get_layer_flat(const Network& net, std::size_t layer);
Network set_layer_flat(const Network& net, std::size_t layer, std::span<const double> values);
void assign_layer_flat(Network& net, std::size_t layer, std::span<const double> values);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

/// JSON text; doubles are written in shortest round-trip form so reloads are bit-exact.
std::string checkpoint_to_string(const Network& net);
Network checkpoint_from_string(const std::string& text);
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace intrafair
