#include "intrafair/nn.hpp"

#include "intrafair/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace intrafair {

namespace {

using RowVec = Eigen::RowVectorXd;

void check_layer(const Network& net, std::size_t i) {
    if (i >= net.num_layers()) {
        throw ShapeError("layer index " + std::to_string(i) + " out of range (network has " +
                         std::to_string(net.num_layers()) + " layers)");
    }
}

void check_input(const Network& net, const Matrix& x) {
    if (static_cast<std::size_t>(x.cols()) != net.input_dim()) {
        throw ShapeError("input has " + std::to_string(x.cols()) + " columns, network expects " +
                         std::to_string(net.input_dim()));
    }
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

// ---------------------------------------------------------------------------
// Network

void Network::build(std::size_t input_dim, const std::vector<std::size_t>& hidden) {
    if (input_dim == 0) throw ShapeError("network input dimension must be positive");
    layers_.clear();
    std::size_t in = input_dim;
    std::size_t p = 0;
    std::size_t s = 0;
    auto add = [&](std::size_t out) {
        if (out == 0) throw ShapeError("layer width must be positive");
        Layer l{in, out, p, s};
        layers_.push_back(l);
        p += l.param_count();
        s += 2 * out;
        in = out;
    };
    for (auto h : hidden) add(h);
    add(1);
    params_.assign(p, 0.0);
    stats_.assign(s, 0.0);
    for (std::size_t i = 0; i < layers_.size(); ++i) running_var(i).setOnes();
}

Network::Network(std::size_t input_dim, const std::vector<std::size_t>& hidden, double dropout, Seed init_seed)
    : dropout_(dropout) {
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout rate must be in [0,1)");
    build(input_dim, hidden);
    Rng rng(init_seed);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
        std::uniform_real_distribution<double> u(-bound, bound);
        double* w = params_.data() + l.param_offset;
        for (std::size_t k = 0; k < l.out * l.in + l.out; ++k) w[k] = u(rng);
        scale(i).setOnes();
    }
}

Network Network::zeros(std::size_t input_dim, const std::vector<std::size_t>& hidden, double dropout) {
    Network net;
    net.dropout_ = dropout;
    net.build(input_dim, hidden);
    return net;
}

std::vector<std::size_t> Network::hidden_sizes() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) out.push_back(layers_[i].out);
    return out;
}

std::span<double> Network::layer_parameters(std::size_t i) {
    check_layer(*this, i);
    return std::span<double>(params_).subspan(layers_[i].param_offset, layers_[i].param_count());
}

std::span<const double> Network::layer_parameters(std::size_t i) const {
    check_layer(*this, i);
    return std::span<const double>(params_).subspan(layers_[i].param_offset, layers_[i].param_count());
}

Network::ConstMatrixMap Network::weight(std::size_t i) const {
    const auto& l = layers_[i];
    return ConstMatrixMap(params_.data() + l.param_offset, static_cast<Eigen::Index>(l.out),
                          static_cast<Eigen::Index>(l.in));
}
Network::ConstRowMap Network::bias(std::size_t i) const {
    const auto& l = layers_[i];
    return ConstRowMap(params_.data() + l.param_offset + l.out * l.in, static_cast<Eigen::Index>(l.out));
}
Network::ConstRowMap Network::scale(std::size_t i) const {
    const auto& l = layers_[i];
    return ConstRowMap(params_.data() + l.param_offset + l.out * l.in + l.out, static_cast<Eigen::Index>(l.out));
}
Network::ConstRowMap Network::shift(std::size_t i) const {
    const auto& l = layers_[i];
    return ConstRowMap(params_.data() + l.param_offset + l.out * l.in + 2 * l.out, static_cast<Eigen::Index>(l.out));
}
Network::ConstRowMap Network::running_mean(std::size_t i) const {
    const auto& l = layers_[i];
    return ConstRowMap(stats_.data() + l.stat_offset, static_cast<Eigen::Index>(l.out));
}
Network::ConstRowMap Network::running_var(std::size_t i) const {
    const auto& l = layers_[i];
    return ConstRowMap(stats_.data() + l.stat_offset + l.out, static_cast<Eigen::Index>(l.out));
}
Network::MatrixMap Network::weight(std::size_t i) {
    const auto& l = layers_[i];
    return MatrixMap(params_.data() + l.param_offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
}
Network::RowMap Network::scale(std::size_t i) {
    const auto& l = layers_[i];
    return RowMap(params_.data() + l.param_offset + l.out * l.in + l.out, static_cast<Eigen::Index>(l.out));
}
Network::RowMap Network::shift(std::size_t i) {
    const auto& l = layers_[i];
    return RowMap(params_.data() + l.param_offset + l.out * l.in + 2 * l.out, static_cast<Eigen::Index>(l.out));
}
Network::RowMap Network::running_mean(std::size_t i) {
    const auto& l = layers_[i];
    return RowMap(stats_.data() + l.stat_offset, static_cast<Eigen::Index>(l.out));
}
Network::RowMap Network::running_var(std::size_t i) {
    const auto& l = layers_[i];
    return RowMap(stats_.data() + l.stat_offset + l.out, static_cast<Eigen::Index>(l.out));
}

std::vector<ParamSlot> Network::layout() const {
    std::vector<ParamSlot> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        std::size_t off = l.param_offset;
        out.push_back({i, ParamKind::weight, l.out, l.in, off});
        off += l.out * l.in;
        out.push_back({i, ParamKind::bias, 1, l.out, off});
        off += l.out;
        out.push_back({i, ParamKind::scale, 1, l.out, off});
        off += l.out;
        out.push_back({i, ParamKind::shift, 1, l.out, off});
    }
    return out;
}

bool Network::all_finite() const {
    auto finite = [](double v) { return std::isfinite(v); };
    return std::all_of(params_.begin(), params_.end(), finite) && std::all_of(stats_.begin(), stats_.end(), finite);
}

// ---------------------------------------------------------------------------
// Forward

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

Vector sigmoid(const Vector& z) { return z.unaryExpr([](double v) { return sigmoid(v); }); }

ForwardCache forward_cached(const Network& net, const Matrix& x, Mode mode, Rng* dropout_rng) {
    check_input(net, x);
    const std::size_t n_layers = net.num_layers();
    const bool use_dropout = mode == Mode::train && dropout_rng != nullptr && net.dropout() > 0.0;
    const double keep = 1.0 - net.dropout();

    ForwardCache c;
    c.mode = mode;
    c.inputs.reserve(n_layers);
    c.normalized.reserve(n_layers);
    c.pre_relu.reserve(n_layers);
    c.dropout_masks.resize(n_layers);
    c.inv_std.reserve(n_layers);
    if (mode == Mode::train) {
        c.batch_mean.reserve(n_layers);
        c.batch_var.reserve(n_layers);
    }

    Matrix a = x;
    for (std::size_t i = 0; i < n_layers; ++i) {
        Matrix z = a * net.weight(i).transpose();
        z.rowwise() += net.bias(i);

        RowVec mean;
        RowVec var;
        if (mode == Mode::train) {
            mean = z.colwise().mean();
            var = (z.rowwise() - mean).array().square().colwise().mean();
            c.batch_mean.push_back(mean);
            c.batch_var.push_back(var);
        } else {
            mean = net.running_mean(i);
            var = net.running_var(i);
        }
        RowVec inv = (var.array() + Network::kBatchNormEps).rsqrt();
        Matrix xhat = (z.rowwise() - mean).array().rowwise() * inv.array();
        Matrix h = xhat.array().rowwise() * net.scale(i).array();
        h.rowwise() += net.shift(i);

        c.inputs.push_back(std::move(a));
        c.normalized.push_back(std::move(xhat));
        c.inv_std.push_back(std::move(inv));

        if (i + 1 == n_layers) {
            c.logits = h.col(0);
            c.pre_relu.push_back(std::move(h));
        } else {
            a = h.cwiseMax(0.0);
            if (use_dropout) {
                std::bernoulli_distribution keep_unit(keep);
                Matrix mask(a.rows(), a.cols());
                for (Eigen::Index k = 0; k < mask.size(); ++k) mask.data()[k] = keep_unit(*dropout_rng) ? 1.0 / keep : 0.0;
                a.array() *= mask.array();
                c.dropout_masks[i] = std::move(mask);
            }
            c.pre_relu.push_back(std::move(h));
        }
    }
    return c;
}

Vector forward(const Network& net, const Matrix& x) { return forward(net, x, Mode::eval); }

Vector forward(const Network& net, const Matrix& x, Mode mode, Rng* dropout_rng) {
    return sigmoid(forward_cached(net, x, mode, dropout_rng).logits);
}

Matrix penultimate(const Network& net, const Matrix& x) {
    return forward_cached(net, x, Mode::eval).representation();
}

Vector apply_final_layer(const Network& net, const Matrix& representation) {
    const std::size_t last = net.num_layers() - 1;
    if (static_cast<std::size_t>(representation.cols()) != net.representation_dim()) {
        throw ShapeError("representation width does not match the final layer");
    }
    Matrix z = representation * net.weight(last).transpose();
    z.rowwise() += net.bias(last);
    RowVec inv = (net.running_var(last).array() + Network::kBatchNormEps).rsqrt();
    Matrix xhat = (z.rowwise() - RowVec(net.running_mean(last))).array().rowwise() * inv.array();
    Matrix h = xhat.array().rowwise() * net.scale(last).array();
    h.rowwise() += net.shift(last);
    return sigmoid(Vector(h.col(0)));
}

// ---------------------------------------------------------------------------
// Loss and backward

double bce_from_logits(const Vector& logits, std::span<const int> labels, std::span<const double> weights) {
    if (static_cast<std::size_t>(logits.size()) != labels.size()) throw ShapeError("bce: length mismatch");
    if (!weights.empty() && weights.size() != labels.size()) throw ShapeError("bce: weight length mismatch");
    if (labels.empty()) throw ShapeError("bce: empty batch");
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double z = logits[static_cast<Eigen::Index>(i)];
        // -[y log s(z) + (1-y) log(1 - s(z))] = softplus(z) - y z
        const double l = softplus(z) - labels[i] * z;
        total += weights.empty() ? l : weights[i] * l;
    }
    return total / static_cast<double>(labels.size());
}

Vector bce_logit_gradient(const Vector& logits, std::span<const int> labels, std::span<const double> weights) {
    if (static_cast<std::size_t>(logits.size()) != labels.size()) throw ShapeError("bce: length mismatch");
    const double n = static_cast<double>(labels.size());
    Vector g(logits.size());
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const auto k = static_cast<std::size_t>(i);
        const double w = weights.empty() ? 1.0 : weights[k];
        g[i] = w * (sigmoid(logits[i]) - labels[k]) / n;
    }
    return g;
}

Gradients backward(const Network& net, const ForwardCache& cache, const Vector& d_logits,
                   const Matrix* d_representation) {
    const std::size_t n_layers = net.num_layers();
    const auto n = static_cast<double>(d_logits.size());
    Gradients out;
    out.params.assign(net.parameters().size(), 0.0);

    Matrix g = d_logits;  // gradient w.r.t. the output of the current layer (post activation)
    for (std::size_t k = n_layers; k-- > 0;) {
        const auto& l = net.layers()[k];
        if (k + 1 < n_layers) {
            if (cache.dropout_masks[k].size() > 0) g.array() *= cache.dropout_masks[k].array();
            g.array() *= (cache.pre_relu[k].array() > 0.0).cast<double>();
        }
        const Matrix& xhat = cache.normalized[k];
        double* grad = out.params.data() + l.param_offset;
        Eigen::Map<RowVec> d_gamma(grad + l.out * l.in + l.out, static_cast<Eigen::Index>(l.out));
        Eigen::Map<RowVec> d_beta(grad + l.out * l.in + 2 * l.out, static_cast<Eigen::Index>(l.out));
        d_gamma = (g.array() * xhat.array()).colwise().sum();
        d_beta = g.colwise().sum();

        Matrix d_xhat = g.array().rowwise() * net.scale(k).array();
        Matrix dz;
        if (cache.mode == Mode::train) {
            // Batch statistics depend on every row of the batch.
            RowVec sum_d = d_xhat.colwise().sum();
            RowVec sum_dx = (d_xhat.array() * xhat.array()).colwise().sum();
            dz = (d_xhat * n).rowwise() - sum_d;
            dz -= (xhat.array().rowwise() * sum_dx.array()).matrix();
            dz = dz.array().rowwise() * (cache.inv_std[k].array() / n);
        } else {
            dz = d_xhat.array().rowwise() * cache.inv_std[k].array();
        }

        Eigen::Map<Matrix> d_w(grad, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
        Eigen::Map<RowVec> d_b(grad + l.out * l.in, static_cast<Eigen::Index>(l.out));
        d_w = dz.transpose() * cache.inputs[k];
        d_b = dz.colwise().sum();

        g = dz * net.weight(k);
        if (k + 1 == n_layers) {
            if (d_representation != nullptr) {
                if (d_representation->rows() != g.rows() || d_representation->cols() != g.cols()) {
                    throw ShapeError("representation gradient has wrong shape");
                }
                g += *d_representation;
            }
            out.representation = g;
        }
    }
    out.input = std::move(g);
    return out;
}

LossGradients bce_gradients(const Network& net, const Matrix& x, std::span<const int> labels, Mode mode,
                            std::span<const double> weights, Rng* dropout_rng) {
    if (labels.empty()) throw ShapeError("gradients: empty batch");
    if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ShapeError("gradients: label length mismatch");
    auto cache = forward_cached(net, x, mode, dropout_rng);
    LossGradients out;
    out.loss = bce_from_logits(cache.logits, labels, weights);
    if (!std::isfinite(out.loss)) throw NumericError("gradients: non-finite loss on batch of " + std::to_string(labels.size()));
    out.grads = backward(net, cache, bce_logit_gradient(cache.logits, labels, weights));
    return out;
}

void update_running_stats(Network& net, const ForwardCache& cache) {
    if (cache.mode != Mode::train) return;
    const double m = Network::kBatchNormMomentum;
    const double n = static_cast<double>(cache.logits.size());
    const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    for (std::size_t i = 0; i < net.num_layers(); ++i) {
        net.running_mean(i) = m * net.running_mean(i) + (1.0 - m) * cache.batch_mean[i];
        net.running_var(i) = m * net.running_var(i) + (1.0 - m) * unbias * cache.batch_var[i];
    }
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::size_t size, double learning_rate, double beta1, double beta2, double eps)
    : m_(size, 0.0), v_(size, 0.0), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
}

void Adam::step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) throw ShapeError("adam: size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
        params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const DataSet& train_set, const DataSet& valid_set, const Architecture& arch,
                  const TrainConfig& cfg) {
    train_set.validate();
    valid_set.validate();
    if (train_set.dim() != valid_set.dim()) throw ShapeError("train/valid feature counts differ");
    if (train_set.size() == 0 || valid_set.size() == 0) throw ShapeError("train: empty dataset");
    if (cfg.batch_size == 0) throw ValidationError("train: batch size must be positive");
    if (cfg.patience > cfg.max_epochs) throw ValidationError("train: patience must not exceed max_epochs");

    Network net(train_set.dim(), arch.hidden, arch.dropout, derive_seed(cfg.seed, 0));
    Adam adam(net.parameters().size(), cfg.learning_rate);
    Rng rng(derive_seed(cfg.seed, 1));

    TrainResult result;
    result.network = net;
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    const std::size_t n = train_set.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Matrix xb;
    BinaryVector yb;

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            // A single-row batch has no batch variance.
            if (end - start < 2) continue;
            xb.resize(static_cast<Eigen::Index>(end - start), train_set.features.cols());
            yb.resize(end - start);
            for (std::size_t r = start; r < end; ++r) {
                xb.row(static_cast<Eigen::Index>(r - start)) = train_set.features.row(static_cast<Eigen::Index>(order[r]));
                yb[r - start] = train_set.labels[order[r]];
            }
            auto cache = forward_cached(net, xb, Mode::train, &rng);
            const double loss = bce_from_logits(cache.logits, yb);
            if (!std::isfinite(loss)) {
                throw NumericError("training diverged: non-finite loss in epoch " + std::to_string(epoch));
            }
            auto grads = backward(net, cache, bce_logit_gradient(cache.logits, yb));
            adam.step(net.parameters(), grads.params);
            update_running_stats(net, cache);
            loss_sum += loss * static_cast<double>(end - start);
            loss_count += end - start;
        }
        if (!net.all_finite()) throw NumericError("training diverged: non-finite parameters in epoch " + std::to_string(epoch));

        const double valid_loss = bce_from_logits(forward_cached(net, valid_set.features, Mode::eval).logits,
                                                  valid_set.labels);
        if (!std::isfinite(valid_loss)) {
            throw NumericError("training diverged: non-finite validation loss in epoch " + std::to_string(epoch));
        }
        result.history.push_back({epoch, loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0, valid_loss});
        result.epochs_run = epoch + 1;
        if (valid_loss < best_loss) {
            best_loss = valid_loss;
            result.network = net;
            result.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best > cfg.patience) {
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Flat weights

FlatWeights get_flat(const Network& net) {
    return {std::vector<double>(net.parameters().begin(), net.parameters().end()), net.layout()};
}

Network set_flat(const Network& net, const FlatWeights& flat) {
    if (flat.values.size() != net.parameters().size()) {
        throw ShapeError("flat weights have " + std::to_string(flat.values.size()) + " values, network has " +
                         std::to_string(net.parameters().size()));
    }
    if (!flat.layout.empty() && flat.layout != net.layout()) throw ShapeError("flat weight layout does not match network");
    Network out = net;
    std::copy(flat.values.begin(), flat.values.end(), out.parameters().begin());
    return out;
}

std::vector<double> get_layer_flat(const Network& net, std::size_t layer) {
    auto s = net.layer_parameters(layer);
    return {s.begin(), s.end()};
}

void assign_layer_flat(Network& net, std::size_t layer, std::span<const double> values) {
    auto s = net.layer_parameters(layer);
    if (values.size() != s.size()) {
        throw ShapeError("layer " + std::to_string(layer) + " has " + std::to_string(s.size()) + " parameters, got " +
                         std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), s.begin());
}

Network set_layer_flat(const Network& net, std::size_t layer, std::span<const double> values) {
    Network out = net;
    assign_layer_flat(out, layer, values);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string checkpoint_to_string(const Network& net) {
    nlohmann::json j;
    j["format"] = "intrafair-checkpoint";
    j["version"] = kCheckpointVersion;
    j["input_dim"] = net.input_dim();
    j["hidden"] = net.hidden_sizes();
    j["dropout"] = net.dropout();
    j["parameters"] = std::vector<double>(net.parameters().begin(), net.parameters().end());
    j["running_stats"] = std::vector<double>(net.running_stats().begin(), net.running_stats().end());
    return j.dump();
}

Network checkpoint_from_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("checkpoint: ") + e.what());
    }
    if (j.value("format", std::string{}) != "intrafair-checkpoint") throw LoadError("checkpoint: unknown format");
    const int version = j.value("version", -1);
    if (version != kCheckpointVersion) {
        throw LoadError("checkpoint: version " + std::to_string(version) + " not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    try {
        Network net = Network::zeros(j.at("input_dim").get<std::size_t>(), j.at("hidden").get<std::vector<std::size_t>>(),
                                     j.at("dropout").get<double>());
        auto params = j.at("parameters").get<std::vector<double>>();
        auto stats = j.at("running_stats").get<std::vector<double>>();
        if (params.size() != net.parameters().size() || stats.size() != net.running_stats().size()) {
            throw LoadError("checkpoint: parameter count does not match architecture");
        }
        std::copy(params.begin(), params.end(), net.parameters().begin());
        std::copy(stats.begin(), stats.end(), net.running_stats().begin());
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("checkpoint: ") + e.what());
    }
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path.string());
    out << checkpoint_to_string(net) << '\n';
}

Network load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open checkpoint " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return checkpoint_from_string(buf.str());
}

}  // namespace intrafair
