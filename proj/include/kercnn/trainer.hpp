#pragma once

#include "kercnn/corruptions.hpp"
#include "kercnn/data.hpp"

#include <chrono>
#include <optional>
#include <sstream>

namespace kercnn {

// ---------------------------------------------------------------------------
// Training: cross-entropy loss, bias-corrected Adam, L2 regularisation as
// gradient augmentation (biases excluded), validation-based early stopping.
//
// KerCNN models use a split-tape scheme per batch: the lateral kernels are
// built once on a kernel tape from the current filters, their values feed
// every per-sample graph as watched leaves, and after the batch the summed
// kernel gradients are pushed back through the construction tape. The chain
// rule through both uses of the filters (feedforward and kernel) is the sum
// of the two contributions.
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double lr = 0.001;
    double eps = 1e-8;
};

struct TrainConfig {
    int max_epochs = 150;
    int batch_size = 50;
    AdamConfig adam;
    double l2_lambda = 0.0005;
    int patience = 10;
    std::uint64_t seed = 0;

    void validate() const {
        if (max_epochs < 0) throw std::invalid_argument("train: max_epochs must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (adam.lr <= 0.0 || adam.eps <= 0.0 || adam.beta1 <= 0.0 || adam.beta1 >= 1.0 ||
            adam.beta2 <= 0.0 || adam.beta2 >= 1.0)
            throw std::invalid_argument("train: bad adam parameters");
        if (l2_lambda < 0.0) throw std::invalid_argument("train: l2_lambda must be >= 0");
        if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
    }
};

template <typename T>
struct OptimizerState {
    std::vector<Tensor<T>> m, v;  // lazily shaped to the parameter list
    long step = 0;
};

namespace detail {

// Flat parameter views in a fixed order: per layer conv_w, conv_b, rec_w
// (when present), then the dense head. Gradients reuse ModelState as a
// same-shaped container.
template <typename T, typename State>
auto param_ptrs(State& s) {
    using Ptr = decltype(&s.dense_w);
    std::vector<Ptr> out;
    for (std::size_t l = 0; l < s.conv_w.size(); ++l) {
        out.push_back(&s.conv_w[l]);
        out.push_back(&s.conv_b[l]);
        if (!s.rec_w[l].empty()) out.push_back(&s.rec_w[l]);
    }
    out.push_back(&s.dense_w);
    out.push_back(&s.dense_b);
    return out;
}

template <typename T>
std::vector<bool> bias_mask(const ModelState<T>& s) {
    std::vector<bool> out;
    for (std::size_t l = 0; l < s.conv_w.size(); ++l) {
        out.push_back(false);
        out.push_back(true);
        if (!s.rec_w[l].empty()) out.push_back(false);
    }
    out.push_back(false);
    out.push_back(true);
    return out;
}

template <typename T>
ModelState<T> zeros_like(const ModelState<T>& s) {
    ModelState<T> g;
    for (std::size_t l = 0; l < s.conv_w.size(); ++l) {
        g.conv_w.push_back(Tensor<T>{s.conv_w[l].shape()});
        g.conv_b.push_back(Tensor<T>{s.conv_b[l].shape()});
        g.rec_w.push_back(s.rec_w[l].empty() ? Tensor<T>{} : Tensor<T>{s.rec_w[l].shape()});
    }
    g.dense_w = Tensor<T>{s.dense_w.shape()};
    g.dense_b = Tensor<T>{s.dense_b.shape()};
    return g;
}

template <typename T>
void axpy_into(Tensor<T>& y, const Tensor<T>& x, T a) {
    if (y.shape() != x.shape()) throw std::invalid_argument("axpy_into: shape mismatch");
    for (std::size_t i = 0; i < y.size(); ++i) y.flat(i) += a * x.flat(i);
}

}  // namespace detail

// One bias-corrected Adam update over a parameter list. The L2 term enters
// the gradient as lambda * theta, skipping parameters flagged as biases.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params,
               const std::vector<const Tensor<T>*>& grads, const std::vector<bool>& is_bias,
               OptimizerState<T>& opt, const AdamConfig& cfg, double l2) {
    if (params.size() != grads.size() || params.size() != is_bias.size())
        throw std::invalid_argument("adam_step: list size mismatch");
    if (opt.m.empty()) {
        for (const Tensor<T>* p : params) {
            opt.m.emplace_back(p->shape());
            opt.v.emplace_back(p->shape());
        }
    }
    if (opt.m.size() != params.size())
        throw std::invalid_argument("adam_step: optimizer state size mismatch");

    opt.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor<T>& theta = *params[p];
        const Tensor<T>& grad = *grads[p];
        if (theta.shape() != grad.shape())
            throw std::invalid_argument("adam_step: gradient shape mismatch");
        if (!grad.all_finite()) throw std::runtime_error("adam_step: non-finite gradient");
        Tensor<T>& m = opt.m[p];
        Tensor<T>& v = opt.v[p];
        const double decay = is_bias[p] ? 0.0 : l2;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g = static_cast<double>(grad.flat(i)) +
                             decay * static_cast<double>(theta.flat(i));
            const double mi = cfg.beta1 * static_cast<double>(m.flat(i)) + (1.0 - cfg.beta1) * g;
            const double vi =
                cfg.beta2 * static_cast<double>(v.flat(i)) + (1.0 - cfg.beta2) * g * g;
            m.flat(i) = static_cast<T>(mi);
            v.flat(i) = static_cast<T>(vi);
            theta.flat(i) -= static_cast<T>(cfg.lr * (mi / bc1) /
                                            (std::sqrt(vi / bc2) + cfg.eps));
        }
    }
}

namespace detail {

// Kernel-construction tape for one batch: filters in, kernel values out.
template <typename T>
struct KernelGraph {
    Tape<T> tape;
    std::vector<Var<T>> psi;    // indexed per layer; valid where built[l]
    std::vector<Var<T>> kvar;
    std::vector<bool> built;
    std::vector<Tensor<T>> values;

    KernelGraph(const ModelConfig& c, const ModelState<T>& s)
        : psi(c.layers.size()), kvar(c.layers.size()), built(c.layers.size(), false),
          values(c.layers.size()) {
        if (c.variant != Variant::kercnn) return;
        for (std::size_t l = 0; l < c.layers.size(); ++l) {
            if (c.stopping_times[l] <= 1) continue;
            psi[l] = tape.leaf(s.conv_w[l], true);
            kvar[l] = lateral_kernel_var(tape, psi[l]);
            values[l] = tape.value(kvar[l]);
            built[l] = true;
        }
    }
};

}  // namespace detail

// One optimizer update on a fixed batch. Returns the mean loss and, via
// `correct`, the running count of argmax hits before the update. Dropout
// masks are drawn from `dropout_rng` per sample.
template <typename T>
double train_step(const TrainConfig& tc, const ModelConfig& mc, ModelState<T>& state,
                  OptimizerState<T>& opt, const Dataset<T>& data,
                  const std::vector<int>& batch, Rng& dropout_rng, int* correct = nullptr) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    detail::KernelGraph<T> kg(mc, state);

    ModelState<T> grads = detail::zeros_like(state);
    std::vector<Tensor<T>> kernel_grads(mc.layers.size());
    for (std::size_t l = 0; l < mc.layers.size(); ++l)
        if (kg.built[l]) kernel_grads[l] = Tensor<T>{kg.values[l].shape()};

    const T inv_b = static_cast<T>(1.0 / static_cast<double>(batch.size()));
    double loss_sum = 0.0;
    for (int idx : batch) {
        Tape<T> t;
        ForwardOptions<T> opts;
        opts.training = true;
        opts.dropout_rng = &dropout_rng;
        opts.kernels = &kg.values;
        opts.watch_kernels = true;
        auto h = build_forward(t, mc, state, data.image(idx), opts);
        auto loss = cross_entropy_with_logits(t, h.logits, data.labels[static_cast<std::size_t>(idx)]);
        loss_sum += static_cast<double>(t.value(loss)(0));
        if (correct != nullptr) {
            const Tensor<T>& z = t.value(h.logits);
            int arg = 0;
            for (int k = 1; k < z.dim(0); ++k)
                if (z(k) > z(arg)) arg = k;
            if (arg == data.labels[static_cast<std::size_t>(idx)]) ++(*correct);
        }
        t.backward(loss);
        for (std::size_t l = 0; l < mc.layers.size(); ++l) {
            detail::axpy_into(grads.conv_w[l], t.grad(h.conv_w[l]), inv_b);
            detail::axpy_into(grads.conv_b[l], t.grad(h.conv_b[l]), inv_b);
            if (!state.rec_w[l].empty())
                detail::axpy_into(grads.rec_w[l], t.grad(h.rec_w[l]), inv_b);
            if (kg.built[l]) detail::axpy_into(kernel_grads[l], t.grad(h.kernels[l]), inv_b);
        }
        detail::axpy_into(grads.dense_w, t.grad(h.dense_w), inv_b);
        detail::axpy_into(grads.dense_b, t.grad(h.dense_b), inv_b);
    }

    // push the summed kernel gradients through the construction graph and
    // fold the result into the filter gradients
    std::vector<std::pair<Var<T>, Tensor<T>>> seeds;
    for (std::size_t l = 0; l < mc.layers.size(); ++l)
        if (kg.built[l]) seeds.emplace_back(kg.kvar[l], kernel_grads[l]);
    if (!seeds.empty()) {
        kg.tape.backward_seeded(seeds);
        for (std::size_t l = 0; l < mc.layers.size(); ++l)
            if (kg.built[l]) detail::axpy_into(grads.conv_w[l], kg.tape.grad(kg.psi[l]), T(1));
    }

    const auto params = detail::param_ptrs<T>(state);
    const auto gptrs = detail::param_ptrs<T>(const_cast<const ModelState<T>&>(grads));
    adam_step<T>(params, gptrs, detail::bias_mask(state), opt, tc.adam, tc.l2_lambda);
    return loss_sum / static_cast<double>(batch.size());
}

struct EpochRecord {
    int epoch = 0;            // 1-based
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = -1.0;    // -1 when no validation set was given
    double wall_seconds = 0.0;
};

template <typename T>
struct TrainResult {
    ModelState<T> state;  // best-validation checkpoint (last good one on divergence)
    std::vector<EpochRecord> log;
    int best_epoch = -1;
    double best_val_acc = -1.0;
    bool diverged = false;
};

inline std::string train_log_csv(const std::vector<EpochRecord>& log) {
    std::ostringstream os;
    os << "epoch,trainLoss,trainAcc,valAcc,wallClock\n";
    os.setf(std::ios::fixed);
    os.precision(6);
    for (const auto& r : log)
        os << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.val_acc << ','
           << r.wall_seconds << '\n';
    return os.str();
}

struct EvalResult {
    double accuracy = 0.0;
    int correct = 0;
    int total = 0;
    std::vector<int> confusion;  // class_count x class_count, row true, col predicted
};

// Accuracy over a test set, optionally under a corruption. The per-image
// corruption seed is base_seed xor image index; base_seed replaces any seed
// stored in the spec.
template <typename T>
EvalResult evaluate(const ModelConfig& mc, const ModelState<T>& state, const Dataset<T>& test,
                    const std::optional<CorruptionSpec>& spec = std::nullopt,
                    std::uint64_t base_seed = 0) {
    if (test.n() == 0) throw std::invalid_argument("evaluate: empty test set");
    EvalResult r;
    r.total = test.n();
    r.confusion.assign(static_cast<std::size_t>(mc.class_count) *
                           static_cast<std::size_t>(mc.class_count), 0);
    const std::vector<Tensor<T>> kernels = build_all_kernels(mc, state);
    for (int i = 0; i < test.n(); ++i) {
        Tensor<T> img = test.image(i);
        const int label = test.labels[static_cast<std::size_t>(i)];
        if (spec.has_value() && spec->kind != CorruptionKind::none) {
            CorruptionSpec s = *spec;
            s.rng_seed = base_seed;
            img = corrupt_image(img, label, s, static_cast<std::uint64_t>(i), &mc, &state);
        }
        const Tensor<T> z = logits_of(mc, state, img, &kernels);
        int arg = 0;
        for (int k = 1; k < z.dim(0); ++k)
            if (z(k) > z(arg)) arg = k;
        if (arg == label) ++r.correct;
        r.confusion[static_cast<std::size_t>(label) * static_cast<std::size_t>(mc.class_count) +
                    static_cast<std::size_t>(arg)] += 1;
    }
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
    return r;
}

// Full training loop. Expects normalised datasets. Per epoch: reshuffled
// batches, one adam_step each, then validation accuracy. Early stopping
// keeps the earliest-best checkpoint; a non-finite loss anywhere aborts
// with the state from the last completed epoch and sets `diverged`.
template <typename T>
TrainResult<T> train(const TrainConfig& tc, const ModelConfig& mc, const Dataset<T>& train_set,
                     const Dataset<T>& val_set) {
    tc.validate();
    validate(mc);
    if (train_set.n() == 0) throw std::invalid_argument("train: empty training set");

    TrainResult<T> out;
    out.state = init_state<T>(mc, mix_seed(tc.seed, 0x1717));
    if (tc.max_epochs == 0) return out;

    OptimizerState<T> opt;
    ModelState<T> last_good = out.state;
    ModelState<T> best = out.state;
    const auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        const auto batches =
            epoch_batches(train_set.n(), tc.batch_size, mix_seed(tc.seed, 0xBA7C), epoch);
        Rng dropout_rng(mix_seed(tc.seed, 0xD0D0 + static_cast<std::uint64_t>(epoch)));
        double loss_sum = 0.0;
        int correct = 0;
        bool failed = false;
        for (const auto& batch : batches) {
            double batch_loss = 0.0;
            try {
                batch_loss = train_step(tc, mc, out.state, opt, train_set, batch, dropout_rng,
                                        &correct);
            } catch (const std::runtime_error&) {
                failed = true;
                break;
            }
            if (!std::isfinite(batch_loss)) {
                failed = true;
                break;
            }
            loss_sum += batch_loss * static_cast<double>(batch.size());
        }
        if (failed) {
            out.diverged = true;
            out.state = (out.best_epoch > 0) ? best : last_good;
            return out;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(train_set.n());
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.n());
        if (val_set.n() > 0) rec.val_acc = evaluate(mc, out.state, val_set).accuracy;
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.log.push_back(rec);
        last_good = out.state;

        if (val_set.n() > 0) {
            if (rec.val_acc > out.best_val_acc) {
                out.best_val_acc = rec.val_acc;
                out.best_epoch = epoch;
                best = out.state;
            } else if (epoch - out.best_epoch >= tc.patience) {
                break;
            }
        }
    }
    if (val_set.n() > 0 && out.best_epoch > 0) out.state = best;
    return out;
}

}  // namespace kercnn
