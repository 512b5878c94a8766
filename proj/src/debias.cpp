#include "intrafair/debias.hpp"

#include "intrafair/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace intrafair {

namespace {

std::span<const int> as_span(const BinaryVector& v) { return {v.data(), v.size()}; }

TraceEntry trace_entry(std::size_t iteration, const ThresholdChoice& c, int layer = -1) {
    return {iteration, c.objective, c.bias_value, c.performance, c.threshold, layer};
}

bool improves(const ThresholdChoice& candidate, const ThresholdChoice& incumbent) {
    return better_candidate(candidate.objective, candidate.bias_value, candidate.performance, incumbent.objective,
                            incumbent.bias_value, incumbent.performance);
}

DebiasResult finish(std::string method, Network net, const ThresholdChoice& choice, const DataSet& valid,
                    const ObjectiveSpec& spec, std::vector<TraceEntry> trace) {
    DebiasResult r;
    r.method = std::move(method);
    r.threshold = choice.threshold;
    r.valid_report = evaluate_network(net, valid, spec, choice.threshold);
    r.network = std::move(net);
    r.trace = std::move(trace);
    return r;
}

// Copies the given rows of `ds` into a batch.
void gather(const DataSet& ds, std::span<const std::size_t> rows, Matrix& x, BinaryVector& y, BinaryVector& a) {
    x.resize(static_cast<Eigen::Index>(rows.size()), ds.features.cols());
    y.resize(rows.size());
    a.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        x.row(static_cast<Eigen::Index>(i)) = ds.features.row(static_cast<Eigen::Index>(rows[i]));
        y[i] = ds.labels[rows[i]];
        a[i] = ds.groups[rows[i]];
    }
}

// True when every rate the bias measure needs is defined on this minibatch.
bool bias_defined(BiasKind kind, const BinaryVector& y, const BinaryVector& a) {
    std::array<std::array<int, 2>, 2> cells{};
    for (std::size_t i = 0; i < y.size(); ++i) ++cells[static_cast<std::size_t>(a[i])][static_cast<std::size_t>(y[i])];
    const bool groups = cells[0][0] + cells[0][1] > 0 && cells[1][0] + cells[1][1] > 0;
    const bool positives = cells[0][1] > 0 && cells[1][1] > 0;
    const bool negatives = cells[0][0] > 0 && cells[1][0] > 0;
    switch (kind) {
        case BiasKind::spd: return groups;
        case BiasKind::eod: return positives;
        case BiasKind::aod: return positives && negatives;
    }
    return groups;
}

// Bootstrap minibatch (sampling with replacement), resampled until the bias is defined.
std::vector<std::size_t> sample_minibatch(const DataSet& ds, std::size_t batch, BiasKind kind, std::size_t max_tries,
                                          Rng& rng, Matrix& x, BinaryVector& y, BinaryVector& a) {
    std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
    std::vector<std::size_t> rows(batch);
    for (std::size_t attempt = 0; attempt < std::max<std::size_t>(1, max_tries); ++attempt) {
        for (auto& r : rows) r = pick(rng);
        gather(ds, rows, x, y, a);
        if (bias_defined(kind, y, a)) return rows;
    }
    throw UndefinedRateError("could not sample a minibatch of " + std::to_string(batch) +
                             " rows on which the bias measure is defined after " + std::to_string(max_tries) +
                             " attempts; increase the batch size");
}


}  // namespace

ThresholdChoice best_threshold(const Network& net, const DataSet& ds, const ObjectiveSpec& spec) {
    const Vector scores = forward(net, ds.features);
    return select_threshold(spec, as_span(ds.labels), scores, as_span(ds.groups));
}

EvalReport evaluate_network(const Network& net, const DataSet& ds, const ObjectiveSpec& spec, double threshold) {
    const Vector scores = forward(net, ds.features);
    return evaluate_predictions(spec, as_span(ds.labels), binarize(scores, threshold), as_span(ds.groups), threshold);
}

void attach_test_report(DebiasResult& result, const DataSet& test, const ObjectiveSpec& spec) {
    result.test_report = evaluate_network(result.network, test, spec, result.threshold);
}

DebiasResult default_threshold_only(const Network& net, const DataSet& valid, const ObjectiveSpec& spec) {
    spec.validate();
    const auto choice = best_threshold(net, valid, spec);
    return finish("default", net, choice, valid, spec, {trace_entry(0, choice)});
}

// ---------------------------------------------------------------------------
// Random perturbation

DebiasResult random_perturbation(const Network& net, const DataSet& valid, const ObjectiveSpec& spec,
                                 const RandomPerturbConfig& cfg) {
    spec.validate();
    if (!(cfg.noise_std > 0.0)) throw ValidationError("random perturbation: noise_std must be positive");

    std::vector<TraceEntry> trace;
    ThresholdChoice best = best_threshold(net, valid, spec);
    trace.push_back(trace_entry(0, best));
    Network best_net = net;

    Network candidate = net;
    const auto original = net.parameters();
    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        // Per-iteration streams keep iterations independent of evaluation order.
        Rng rng(derive_seed(cfg.seed, it));
        std::normal_distribution<double> q(1.0, cfg.noise_std);
        auto params = candidate.parameters();
        for (std::size_t j = 0; j < params.size(); ++j) params[j] = original[j] * q(rng);

        const auto choice = best_threshold(candidate, valid, spec);
        trace.push_back(trace_entry(it, choice));
        if (improves(choice, best)) {
            best = choice;
            best_net = candidate;
        }
    }
    return finish("random", std::move(best_net), best, valid, spec, std::move(trace));
}

// ---------------------------------------------------------------------------
// Layer-wise optimisation

DebiasResult layerwise_optimization(const Network& net, const DataSet& valid, const ObjectiveSpec& spec,
                                    const LayerwiseConfig& cfg) {
    spec.validate();
    std::vector<TraceEntry> trace;
    ThresholdChoice best = best_threshold(net, valid, spec);
    trace.push_back(trace_entry(0, best));
    Network best_net = net;

    Network work = net;
    std::size_t iteration = 0;
    for (std::size_t layer = 0; layer < net.num_layers(); ++layer) {
        const auto center = get_layer_flat(net, layer);
        const auto space = SearchSpace::around(center, cfg.relative_halfwidth, cfg.abs_halfwidth);

        MinimizeConfig mc;
        mc.budget = cfg.budget_for(layer);
        if (mc.budget == 0) continue;
        mc.n_init = cfg.n_init;
        mc.acquisition = cfg.acquisition;
        mc.gbrt = cfg.gbrt;
        mc.seed = derive_seed(cfg.seed, layer);

        auto objective_of = [&](std::span<const double> x) {
            assign_layer_flat(work, layer, x);
            const auto choice = best_threshold(work, valid, spec);
            trace.push_back(trace_entry(++iteration, choice, static_cast<int>(layer)));
            if (improves(choice, best)) {
                best = choice;
                best_net = work;
            }
            return -choice.objective;
        };
        minimize(objective_of, space, mc);
        assign_layer_flat(work, layer, center);
    }
    return finish("layerwise", std::move(best_net), best, valid, spec, std::move(trace));
}

// ---------------------------------------------------------------------------
// Critic

namespace {

std::size_t stack_size(const Critic::Stack& st) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < st.sizes.size(); ++l) n += st.sizes[l + 1] * st.sizes[l] + st.sizes[l + 1];
    return n;
}

struct StackCache {
    std::vector<Matrix> inputs;  // input of each layer
    std::vector<Matrix> pre;     // pre-activation of each layer
    Matrix output;
};

// Dense layers applied row-wise; ReLU after every layer but the last unless relu_last.
StackCache stack_forward(const Critic::Stack& st, const std::vector<double>& params, const Matrix& x) {
    StackCache c;
    Matrix a = x;
    std::size_t off = st.offset;
    const std::size_t n_layers = st.sizes.size() - 1;
    for (std::size_t l = 0; l < n_layers; ++l) {
        const auto in = static_cast<Eigen::Index>(st.sizes[l]);
        const auto out = static_cast<Eigen::Index>(st.sizes[l + 1]);
        Eigen::Map<const Matrix> w(params.data() + off, out, in);
        Eigen::Map<const Eigen::RowVectorXd> b(params.data() + off + static_cast<std::size_t>(out * in), out);
        Matrix z = a * w.transpose();
        z.rowwise() += b;
        c.inputs.push_back(std::move(a));
        a = (l + 1 < n_layers || st.relu_last) ? Matrix(z.cwiseMax(0.0)) : z;
        c.pre.push_back(std::move(z));
        off += static_cast<std::size_t>(out * in + out);
    }
    c.output = std::move(a);
    return c;
}

// Accumulates parameter gradients into `grad` and returns the gradient at the stack input.
Matrix stack_backward(const Critic::Stack& st, const std::vector<double>& params, const StackCache& c, Matrix d,
                      std::vector<double>& grad) {
    const std::size_t n_layers = st.sizes.size() - 1;
    std::vector<std::size_t> offsets;
    std::size_t off = st.offset;
    for (std::size_t l = 0; l < n_layers; ++l) {
        offsets.push_back(off);
        off += st.sizes[l + 1] * st.sizes[l] + st.sizes[l + 1];
    }
    for (std::size_t l = n_layers; l-- > 0;) {
        if (l + 1 < n_layers || st.relu_last) d.array() *= (c.pre[l].array() > 0.0).cast<double>();
        const auto in = static_cast<Eigen::Index>(st.sizes[l]);
        const auto out = static_cast<Eigen::Index>(st.sizes[l + 1]);
        Eigen::Map<Matrix> dw(grad.data() + offsets[l], out, in);
        Eigen::Map<Eigen::RowVectorXd> db(grad.data() + offsets[l] + static_cast<std::size_t>(out * in), out);
        dw += d.transpose() * c.inputs[l];
        db += d.colwise().sum();
        Eigen::Map<const Matrix> w(params.data() + offsets[l], out, in);
        d = d * w;
    }
    return d;
}

}  // namespace

Critic::Critic(std::size_t rows, std::size_t width, const std::vector<std::size_t>& encoder_hidden,
               const std::vector<std::size_t>& head_hidden, Seed seed)
    : rows_(rows), width_(width) {
    if (rows == 0 || width == 0) throw ShapeError("critic: input shape must be non-empty");
    std::size_t head_in = rows * width;
    if (!encoder_hidden.empty()) {
        encoder_.sizes.push_back(width);
        for (auto h : encoder_hidden) encoder_.sizes.push_back(h);
        encoder_.relu_last = true;
        head_in = encoder_hidden.back();
    }
    head_.sizes.push_back(head_in);
    for (auto h : head_hidden) head_.sizes.push_back(h);
    head_.sizes.push_back(1);
    const std::size_t enc = encoder_.sizes.empty() ? 0 : stack_size(encoder_);
    head_.offset = enc;
    params_.resize(enc + stack_size(head_));

    Rng rng(seed);
    for (const Stack* st : {&encoder_, &head_}) {
        std::size_t off = st->offset;
        for (std::size_t l = 0; l + 1 < st->sizes.size(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(st->sizes[l]));
            std::uniform_real_distribution<double> u(-bound, bound);
            const std::size_t n = st->sizes[l + 1] * st->sizes[l] + st->sizes[l + 1];
            for (std::size_t k = 0; k < n; ++k) params_[off + k] = u(rng);
            off += n;
        }
    }
}

double Critic::forward(const Matrix& batch) const {
    if (static_cast<std::size_t>(batch.rows()) != rows_ || static_cast<std::size_t>(batch.cols()) != width_) {
        throw ShapeError("critic: expected a " + std::to_string(rows_) + "x" + std::to_string(width_) + " batch");
    }
    Matrix pooled;
    if (encoder_.sizes.empty()) {
        pooled = Eigen::Map<const Matrix>(batch.data(), 1, batch.size());
    } else {
        pooled = stack_forward(encoder_, params_, batch).output.colwise().mean();
    }
    return stack_forward(head_, params_, pooled).output(0, 0);
}

Critic::Gradient Critic::backward(const Matrix& batch, double upstream) const {
    if (static_cast<std::size_t>(batch.rows()) != rows_ || static_cast<std::size_t>(batch.cols()) != width_) {
        throw ShapeError("critic: expected a " + std::to_string(rows_) + "x" + std::to_string(width_) + " batch");
    }
    Gradient g;
    g.params.assign(params_.size(), 0.0);
    const Matrix d_out = Matrix::Constant(1, 1, upstream);
    if (encoder_.sizes.empty()) {
        const Matrix flat = Eigen::Map<const Matrix>(batch.data(), 1, batch.size());
        const auto head = stack_forward(head_, params_, flat);
        g.output = head.output(0, 0);
        const Matrix d_flat = stack_backward(head_, params_, head, d_out, g.params);
        g.input = Eigen::Map<const Matrix>(d_flat.data(), batch.rows(), batch.cols());
        return g;
    }
    const auto enc = stack_forward(encoder_, params_, batch);
    const Matrix pooled = enc.output.colwise().mean();
    const auto head = stack_forward(head_, params_, pooled);
    g.output = head.output(0, 0);
    const Matrix d_pooled = stack_backward(head_, params_, head, d_out, g.params);
    Matrix d_enc = d_pooled.replicate(batch.rows(), 1) / static_cast<double>(batch.rows());
    g.input = stack_backward(encoder_, params_, enc, std::move(d_enc), g.params);
    return g;
}

// ---------------------------------------------------------------------------
// Adversarial fine-tuning

void AdversarialConfig::validate() const {
    if (!(lambda > 0.0)) throw ValidationError("adversarial: lambda must be positive");
    const double d = effective_delta();
    if (!(d >= 0.0 && epsilon - d > 0.0)) throw ValidationError("adversarial: need 0 <= delta < epsilon");
    if (batch_size < 2) throw ValidationError("adversarial: batch size must be at least 2");
    if (!(actor_lr > 0.0 && critic_lr > 0.0)) throw ValidationError("adversarial: learning rates must be positive");
}

double loss_multiplier(double critic_estimate, double lambda, double epsilon, double delta) {
    return std::max(1.0, lambda * (std::abs(critic_estimate) - epsilon + delta) + 1.0);
}

DebiasResult adversarial_finetune(const Network& net, const DataSet& valid, const ObjectiveSpec& spec,
                                  const AdversarialConfig& cfg) {
    spec.validate();
    cfg.validate();
    const double delta = cfg.effective_delta();

    Network actor = net;
    const std::size_t context = cfg.critic_context ? (spec.bias == BiasKind::spd ? 1 : 2) : 0;
    const auto rep_dim = static_cast<Eigen::Index>(net.representation_dim());
    Critic critic(cfg.batch_size, net.representation_dim() + context, cfg.critic_encoder, cfg.critic_hidden,
                  derive_seed(cfg.seed, 0));
    auto critic_input = [&](const Matrix& rep, const BinaryVector& y, const BinaryVector& a) {
        if (context == 0) return rep;
        Matrix in(rep.rows(), rep.cols() + static_cast<Eigen::Index>(context));
        in.leftCols(rep.cols()) = rep;
        for (Eigen::Index i = 0; i < rep.rows(); ++i) {
            in(i, rep.cols()) = a[static_cast<std::size_t>(i)];
            if (context > 1) in(i, rep.cols() + 1) = y[static_cast<std::size_t>(i)];
        }
        return in;
    };
    Adam critic_opt(critic.parameters().size(), cfg.critic_lr);
    Adam actor_opt(actor.parameters().size(), cfg.actor_lr);
    Rng rng(derive_seed(cfg.seed, 1));

    std::vector<TraceEntry> trace;
    ThresholdChoice best = best_threshold(net, valid, spec);
    trace.push_back(trace_entry(0, best));
    Network best_net = net;

    Matrix xb;
    BinaryVector yb;
    BinaryVector ab;
    for (std::size_t outer = 1; outer <= cfg.outer_iterations; ++outer) {
        const std::size_t critic_steps = cfg.critic_steps + (outer == 1 ? cfg.critic_warmup : 0);
        for (std::size_t j = 0; j < critic_steps; ++j) {
            sample_minibatch(valid, cfg.batch_size, spec.bias, cfg.max_resample, rng, xb, yb, ab);
            const auto cache = forward_cached(actor, xb, Mode::eval);
            BinaryVector hard(yb.size());
            for (std::size_t i = 0; i < hard.size(); ++i) hard[i] = cache.logits[static_cast<Eigen::Index>(i)] > 0.0 ? 1 : 0;
            double target = bias(spec.bias, yb, hard, ab);
            const Matrix input = critic_input(cache.representation(), yb, ab);
            const double estimate = critic.forward(input);
            // d/dpsi (target - g)^2 = 2 (g - target) dg/dpsi
            const auto grad = critic.backward(input, 2.0 * (estimate - target));
            critic_opt.step(critic.parameters(), grad.params);
        }

        for (std::size_t j = 0; j < cfg.actor_steps; ++j) {
            sample_minibatch(valid, cfg.batch_size, spec.bias, cfg.max_resample, rng, xb, yb, ab);
            const auto cache = forward_cached(actor, xb, cfg.actor_mode, &rng);
            const double bce = bce_from_logits(cache.logits, yb);
            if (!std::isfinite(bce)) throw NumericError("adversarial: non-finite loss in outer iteration " + std::to_string(outer));
            const Matrix input = critic_input(cache.representation(), yb, ab);
            const double estimate = critic.forward(input);
            const double mult = loss_multiplier(estimate, cfg.lambda, cfg.epsilon, delta);
            Vector d_logits = mult * bce_logit_gradient(cache.logits, yb);

            Matrix d_rep;
            const Matrix* d_rep_ptr = nullptr;
            if (cfg.lambda * (std::abs(estimate) - cfg.epsilon + delta) > 0.0) {
                // Product rule: BCE * lambda * sign(g) * dg/d(representation); critic weights stay frozen.
                const double sign = estimate > 0.0 ? 1.0 : (estimate < 0.0 ? -1.0 : 0.0);
                d_rep = critic.backward(input, bce * cfg.lambda * sign).input.leftCols(rep_dim);
                d_rep_ptr = &d_rep;
            }
            const auto grads = backward(actor, cache, d_logits, d_rep_ptr);
            actor_opt.step(actor.parameters(), grads.params);
            update_running_stats(actor, cache);
        }
        if (!actor.all_finite()) throw NumericError("adversarial: non-finite weights in outer iteration " + std::to_string(outer));

        const auto choice = best_threshold(actor, valid, spec);
        trace.push_back(trace_entry(outer, choice));
        if (improves(choice, best)) {
            best = choice;
            best_net = actor;
        }
    }
    return finish("adversarial", std::move(best_net), best, valid, spec, std::move(trace));
}

// ---------------------------------------------------------------------------
// Protected-attribute adversary

ProtectedAdversary::ProtectedAdversary(bool use_label) : w(use_label ? 3 : 1, 0.0) {}

std::vector<double> ProtectedAdversary::pack() const {
    std::vector<double> p;
    p.push_back(c);
    p.insert(p.end(), w.begin(), w.end());
    p.push_back(b);
    return p;
}

void ProtectedAdversary::unpack(std::span<const double> p) {
    if (p.size() != num_parameters()) throw ShapeError("adversary: parameter count mismatch");
    c = p[0];
    std::copy(p.begin() + 1, p.end() - 1, w.begin());
    b = p.back();
}

ProtectedAdversary::Result ProtectedAdversary::evaluate(const Vector& logits, std::span<const int> labels,
                                                        std::span<const int> groups) const {
    const std::size_t n = labels.size();
    if (static_cast<std::size_t>(logits.size()) != n || groups.size() != n) throw ShapeError("adversary: length mismatch");
    const bool use_label = w.size() == 3;
    const double k = 1.0 + std::abs(c);
    const double dk_dc = c >= 0.0 ? 1.0 : -1.0;

    Result r;
    r.param_grad.assign(num_parameters(), 0.0);
    r.logit_grad = Vector::Zero(logits.size());
    for (std::size_t i = 0; i < n; ++i) {
        const double z = logits[static_cast<Eigen::Index>(i)];
        const double s = sigmoid(k * z);
        const double y = labels[i];
        const double u[3] = {s, s * y, s * (1.0 - y)};
        double t = b;
        for (std::size_t q = 0; q < w.size(); ++q) t += w[q] * u[q];
        const double a = groups[i];
        r.loss += (t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t))) - a * t;

        const double dt = (sigmoid(t) - a) / static_cast<double>(n);
        for (std::size_t q = 0; q < w.size(); ++q) r.param_grad[1 + q] += dt * u[q];
        r.param_grad.back() += dt;
        const double du_ds = use_label ? w[0] + w[1] * y + w[2] * (1.0 - y) : w[0];
        const double ds = dt * du_ds;
        const double slope = s * (1.0 - s);
        r.logit_grad[static_cast<Eigen::Index>(i)] = ds * slope * k;
        r.param_grad[0] += ds * slope * z * dk_dc;
    }
    r.loss /= static_cast<double>(n);
    return r;
}

std::vector<double> debiased_direction(std::span<const double> task_grad, std::span<const double> adversary_grad,
                                       double alpha, bool projection) {
    if (task_grad.size() != adversary_grad.size()) throw ShapeError("debiased direction: gradient sizes differ");
    double dot = 0.0;
    double norm2 = 0.0;
    for (std::size_t i = 0; i < task_grad.size(); ++i) {
        dot += task_grad[i] * adversary_grad[i];
        norm2 += adversary_grad[i] * adversary_grad[i];
    }
    const double coef = projection && norm2 > 0.0 ? dot / norm2 : 0.0;
    std::vector<double> out(task_grad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = task_grad[i] - (coef + alpha) * adversary_grad[i];
    return out;
}

DebiasResult protected_attr_adversarial(const Network& net, const DataSet& valid, const ObjectiveSpec& spec,
                                        const ProtectedAdversaryConfig& cfg) {
    spec.validate();
    if (cfg.batch_size < 2) throw ValidationError("protected adversary: batch size must be at least 2");
    if (!(cfg.actor_lr > 0.0 && cfg.adversary_lr > 0.0)) throw ValidationError("protected adversary: learning rates must be positive");
    const bool use_label = cfg.use_label.value_or(spec.bias != BiasKind::spd);

    Network actor = net;
    ProtectedAdversary adversary(use_label);
    Adam adversary_opt(adversary.num_parameters(), cfg.adversary_lr);
    Adam actor_opt(actor.parameters().size(), cfg.actor_lr);
    Rng rng(derive_seed(cfg.seed, 1));

    std::vector<TraceEntry> trace;
    ThresholdChoice best = best_threshold(net, valid, spec);
    trace.push_back(trace_entry(0, best));
    Network best_net = net;

    Matrix xb;
    BinaryVector yb;
    BinaryVector ab;
    for (std::size_t outer = 1; outer <= cfg.outer_iterations; ++outer) {
        for (std::size_t j = 0; j < cfg.adversary_steps; ++j) {
            sample_minibatch(valid, cfg.batch_size, spec.bias, cfg.max_resample, rng, xb, yb, ab);
            const auto cache = forward_cached(actor, xb, Mode::eval);
            const auto res = adversary.evaluate(cache.logits, yb, ab);
            auto p = adversary.pack();
            adversary_opt.step(p, res.param_grad);
            adversary.unpack(p);
        }
        for (std::size_t j = 0; j < cfg.actor_steps; ++j) {
            sample_minibatch(valid, cfg.batch_size, spec.bias, cfg.max_resample, rng, xb, yb, ab);
            const auto cache = forward_cached(actor, xb, Mode::eval);
            const auto task = backward(actor, cache, bce_logit_gradient(cache.logits, yb));
            const auto res = adversary.evaluate(cache.logits, yb, ab);
            const auto adv = backward(actor, cache, res.logit_grad);
            const auto dir = debiased_direction(task.params, adv.params, cfg.alpha, cfg.projection);
            actor_opt.step(actor.parameters(), dir);
        }
        if (!actor.all_finite()) {
            throw NumericError("protected adversary: non-finite weights in outer iteration " + std::to_string(outer));
        }
        const auto choice = best_threshold(actor, valid, spec);
        trace.push_back(trace_entry(outer, choice));
        if (improves(choice, best)) {
            best = choice;
            best_net = actor;
        }
    }
    return finish("zhang", std::move(best_net), best, valid, spec, std::move(trace));
}

}  // namespace intrafair
