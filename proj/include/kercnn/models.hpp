#pragma once

#include "kercnn/lateral.hpp"

#include <sstream>
#include <utility>

namespace kercnn {

// ---------------------------------------------------------------------------
// Model zoo: a plain feedforward CNN, the KerCNN (lateral kernels derived
// from the feedforward filters, no extra parameters), and a recurrent CNN
// with trainable lateral weights (parameter-matched via a smaller conv2).
//
// All convolutions are valid (no padding); each layer is followed by
// pool_stages 2x2 max pools with floor semantics. The reference MNIST
// geometry is 28 -> 24 -> 12 -> 8 -> 4 -> 2, flatten 64, 7482 parameters.
// ---------------------------------------------------------------------------

enum class Variant { cnn, kercnn, reccnn };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::cnn: return "cnn";
        case Variant::kercnn: return "kercnn";
        case Variant::reccnn: return "reccnn";
    }
    return "?";
}

inline Variant variant_from(const std::string& s) {
    if (s == "cnn") return Variant::cnn;
    if (s == "kercnn") return Variant::kercnn;
    if (s == "reccnn") return Variant::reccnn;
    throw std::invalid_argument("unknown variant: " + s);
}

struct LrnConfig {
    int radius = 2;
    double alpha = 1e-4;
    double beta = 0.75;
    double k = 2.0;
    bool enabled = true;
};

struct LayerSpec {
    int filter_size = 5;
    int filter_count = 16;
    int pool_stages = 1;      // 2x2 floor pools after this layer
    int rec_filter_size = 0;  // lateral weight extent (reccnn); 0 = none
};

struct ModelConfig {
    Variant variant = Variant::cnn;
    int in_h = 28, in_w = 28, in_c = 1;
    int class_count = 10;
    std::vector<LayerSpec> layers;
    std::vector<int> stopping_times;  // kercnn iteration counts T_l
    int rec_time_steps = 1;           // reccnn global clock T
    bool detach_kernel = false;       // freeze K in backward passes
    double recurrent_dropout = 0.2;   // applied to lateral contributions
    LrnConfig lrn;

    static ModelConfig mnist_cnn() {
        ModelConfig c;
        c.variant = Variant::cnn;
        c.layers = {{5, 16, 1, 0}, {5, 16, 2, 0}};
        c.stopping_times = {1, 1};
        return c;
    }

    static ModelConfig mnist_kercnn(int t1, int t2) {
        ModelConfig c = mnist_cnn();
        c.variant = Variant::kercnn;
        c.stopping_times = {t1, t2};
        return c;
    }

    // Lateral weights in layer 1; conv2 shrinks to 3x3 so the parameter
    // count stays matched at 7482.
    static ModelConfig mnist_reccnn(int steps) {
        ModelConfig c;
        c.variant = Variant::reccnn;
        c.layers = {{5, 16, 1, 4}, {3, 16, 2, 0}};
        c.stopping_times = {1, 1};
        c.rec_time_steps = steps;
        return c;
    }
};

struct LayerGeometry {
    int in_h, in_w, in_c;
    int conv_h, conv_w;  // after the valid convolution
    int out_h, out_w;    // after pooling
};

inline void validate(const ModelConfig& c) {
    if (c.layers.empty()) throw std::invalid_argument("config: no layers");
    if (c.class_count < 2) throw std::invalid_argument("config: class_count < 2");
    if (c.in_h < 1 || c.in_w < 1 || c.in_c < 1)
        throw std::invalid_argument("config: bad input dims");
    if (!c.stopping_times.empty() && c.stopping_times.size() != c.layers.size())
        throw std::invalid_argument("config: stopping_times must match layer count");
    if (c.recurrent_dropout < 0.0 || c.recurrent_dropout >= 1.0)
        throw std::invalid_argument("config: recurrent_dropout must be in [0, 1)");
    for (const auto& l : c.layers) {
        if (l.filter_size < 1 || l.filter_count < 1 || l.pool_stages < 0 ||
            l.rec_filter_size < 0)
            throw std::invalid_argument("config: bad layer spec");
        if (c.variant != Variant::reccnn && l.rec_filter_size != 0)
            throw std::invalid_argument("config: rec_filter_size needs variant reccnn");
    }
    for (int t : c.stopping_times) {
        if (t < 1) throw std::invalid_argument("config: stopping time < 1");
        if (c.variant != Variant::kercnn && t != 1)
            throw std::invalid_argument("config: stopping times > 1 need variant kercnn");
    }
    if (c.rec_time_steps < 1) throw std::invalid_argument("config: rec_time_steps < 1");
    if (c.variant != Variant::reccnn && c.rec_time_steps != 1)
        throw std::invalid_argument("config: rec_time_steps > 1 need variant reccnn");
}

inline std::vector<LayerGeometry> propagate_shapes(const ModelConfig& c) {
    validate(c);
    std::vector<LayerGeometry> out;
    int h = c.in_h, w = c.in_w, ch = c.in_c;
    for (const auto& l : c.layers) {
        LayerGeometry g{};
        g.in_h = h;
        g.in_w = w;
        g.in_c = ch;
        g.conv_h = h - l.filter_size + 1;
        g.conv_w = w - l.filter_size + 1;
        if (g.conv_h < 1 || g.conv_w < 1)
            throw std::invalid_argument("config: filter larger than its input");
        h = g.conv_h;
        w = g.conv_w;
        for (int s = 0; s < l.pool_stages; ++s) {
            h /= 2;
            w /= 2;
            if (h < 1 || w < 1) throw std::invalid_argument("config: pooled away to nothing");
        }
        g.out_h = h;
        g.out_w = w;
        ch = l.filter_count;
        out.push_back(g);
    }
    return out;
}

inline int flatten_size(const ModelConfig& c) {
    const auto geo = propagate_shapes(c);
    return geo.back().out_h * geo.back().out_w * c.layers.back().filter_count;
}

inline std::size_t param_count(const ModelConfig& c) {
    const auto geo = propagate_shapes(c);
    std::size_t n = 0;
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
        const auto& spec = c.layers[l];
        n += static_cast<std::size_t>(spec.filter_size) * spec.filter_size *
                 spec.filter_count * geo[l].in_c +
             static_cast<std::size_t>(spec.filter_count);
        if (spec.rec_filter_size > 0)
            n += static_cast<std::size_t>(spec.rec_filter_size) * spec.rec_filter_size *
                 spec.filter_count * spec.filter_count;
    }
    n += static_cast<std::size_t>(flatten_size(c)) * c.class_count +
         static_cast<std::size_t>(c.class_count);
    return n;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct ModelState {
    std::vector<Tensor<T>> conv_w;  // (d, d, K, C) per layer
    std::vector<Tensor<T>> conv_b;  // (K) per layer
    std::vector<Tensor<T>> rec_w;   // (s, s, K, K) per layer; empty if none
    Tensor<T> dense_w;              // (S, n)
    Tensor<T> dense_b;              // (n)

    std::size_t param_count() const {
        std::size_t n = dense_w.size() + dense_b.size();
        for (const auto& w : conv_w) n += w.size();
        for (const auto& b : conv_b) n += b.size();
        for (const auto& r : rec_w) n += r.size();
        return n;
    }

    template <typename U>
    ModelState<U> cast() const {
        ModelState<U> s;
        for (const auto& w : conv_w) s.conv_w.push_back(w.template cast<U>());
        for (const auto& b : conv_b) s.conv_b.push_back(b.template cast<U>());
        for (const auto& r : rec_w) s.rec_w.push_back(r.template cast<U>());
        s.dense_w = dense_w.template cast<U>();
        s.dense_b = dense_b.template cast<U>();
        return s;
    }
};

// Uniform Xavier/Glorot: bound = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void xavier_fill(Tensor<T>& t, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::size_t i = 0; i < t.size(); ++i)
        t.flat(i) = static_cast<T>(rng.uniform(-bound, bound));
}

// Xavier weights, zero biases. Draw order: per layer conv_w then rec_w,
// then the dense head; fixed so a seed pins the whole initialisation.
template <typename T>
ModelState<T> init_state(const ModelConfig& c, Rng& rng) {
    const auto geo = propagate_shapes(c);
    ModelState<T> s;
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
        const auto& spec = c.layers[l];
        const int d = spec.filter_size, k = spec.filter_count, ch = geo[l].in_c;
        Tensor<T> w{Shape{d, d, k, ch}};
        xavier_fill(w, d * d * ch, d * d * k, rng);
        s.conv_w.push_back(std::move(w));
        s.conv_b.push_back(Tensor<T>{Shape{k}});
        if (spec.rec_filter_size > 0) {
            const int rs = spec.rec_filter_size;
            Tensor<T> r{Shape{rs, rs, k, k}};
            xavier_fill(r, rs * rs * k, rs * rs * k, rng);
            s.rec_w.push_back(std::move(r));
        } else {
            s.rec_w.push_back(Tensor<T>{});
        }
    }
    const int flat = flatten_size(c);
    s.dense_w = Tensor<T>{Shape{flat, c.class_count}};
    xavier_fill(s.dense_w, flat, c.class_count, rng);
    s.dense_b = Tensor<T>{Shape{c.class_count}};
    return s;
}

template <typename T>
ModelState<T> init_state(const ModelConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    return init_state<T>(c, rng);
}

// Shape audit of a state against its config.
template <typename T>
void check_state(const ModelConfig& c, const ModelState<T>& s) {
    const auto geo = propagate_shapes(c);
    if (s.conv_w.size() != c.layers.size() || s.conv_b.size() != c.layers.size() ||
        s.rec_w.size() != c.layers.size())
        throw std::runtime_error("state audit: layer count mismatch");
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
        const auto& spec = c.layers[l];
        if (s.conv_w[l].shape() !=
            Shape({spec.filter_size, spec.filter_size, spec.filter_count, geo[l].in_c}))
            throw std::runtime_error("state audit: conv weight shape mismatch");
        if (s.conv_b[l].shape() != Shape({spec.filter_count}))
            throw std::runtime_error("state audit: conv bias shape mismatch");
        const bool want_rec = spec.rec_filter_size > 0;
        if (want_rec != !s.rec_w[l].empty())
            throw std::runtime_error("state audit: lateral weight presence mismatch");
        if (want_rec && s.rec_w[l].shape() != Shape({spec.rec_filter_size,
                                                     spec.rec_filter_size,
                                                     spec.filter_count, spec.filter_count}))
            throw std::runtime_error("state audit: lateral weight shape mismatch");
    }
    if (s.dense_w.shape() != Shape({flatten_size(c), c.class_count}) ||
        s.dense_b.shape() != Shape({c.class_count}))
        throw std::runtime_error("state audit: dense shape mismatch");
}

// ---------------------------------------------------------------------------
// Forward graphs
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardOptions {
    bool training = false;
    Rng* dropout_rng = nullptr;  // required when training uses dropout
    // Hoisted lateral kernels, one slot per layer (empty tensor = none).
    // When set they enter the graph as leaves; watch_kernels controls
    // whether they collect gradients (for the two-tape training scheme).
    const std::vector<Tensor<T>>* kernels = nullptr;
    bool watch_kernels = false;
    bool watch_input = false;
};

template <typename T>
struct ForwardHandles {
    Var<T> input;
    Var<T> logits;
    std::vector<Var<T>> conv_w, conv_b, rec_w;
    Var<T> dense_w, dense_b;
    std::vector<Var<T>> kernels;  // valid only where a kernel was used
};

namespace detail {

template <typename T>
Tensor<T> dropout_mask(Shape s, double p, Rng& rng) {
    Tensor<T> m{s};
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < m.size(); ++i)
        m.flat(i) = rng.bernoulli(p) ? T(0) : keep;
    return m;
}

}  // namespace detail

template <typename T>
ForwardHandles<T> build_forward(Tape<T>& t, const ModelConfig& c, const ModelState<T>& s,
                                const Tensor<T>& image, const ForwardOptions<T>& opts = {}) {
    validate(c);
    check_state(c, s);
    if (image.rank() != 3 || image.shape() != Shape({c.in_h, c.in_w, c.in_c}))
        throw std::invalid_argument("forward: image shape does not match config");
    const bool want_dropout = opts.training && c.recurrent_dropout > 0.0;
    const bool has_laterals =
        (c.variant == Variant::reccnn && c.rec_time_steps > 1 &&
         std::any_of(c.layers.begin(), c.layers.end(),
                     [](const LayerSpec& l) { return l.rec_filter_size > 0; })) ||
        (c.variant == Variant::kercnn &&
         std::any_of(c.stopping_times.begin(), c.stopping_times.end(),
                     [](int v) { return v > 1; }));
    if (want_dropout && has_laterals && opts.dropout_rng == nullptr)
        throw std::invalid_argument("forward: training with dropout needs a dropout rng");

    ForwardHandles<T> h;
    h.input = t.leaf(image, opts.watch_input);
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
        h.conv_w.push_back(t.leaf(s.conv_w[l], true));
        h.conv_b.push_back(t.leaf(s.conv_b[l], true));
        h.rec_w.push_back(s.rec_w[l].empty() ? Var<T>{} : t.leaf(s.rec_w[l], true));
    }
    h.dense_w = t.leaf(s.dense_w, true);
    h.dense_b = t.leaf(s.dense_b, true);
    h.kernels.assign(c.layers.size(), Var<T>{});

    Var<T> top;
    if (c.variant == Variant::reccnn) {
        std::vector<Var<T>> prev(c.layers.size());  // h_l^{t-1}, invalid at t=1
        std::vector<Tensor<T>> masks(c.layers.size());
        for (int step = 1; step <= c.rec_time_steps; ++step) {
            Var<T> a = h.input;
            for (std::size_t l = 0; l < c.layers.size(); ++l) {
                const auto& spec = c.layers[l];
                Var<T> pre = conv2d(t, a, h.conv_w[l], h.conv_b[l], Pad::none());
                if (h.rec_w[l].valid() && step > 1) {
                    Var<T> lat = conv2d(t, prev[l], h.rec_w[l],
                                        Pad::same(spec.rec_filter_size));
                    if (want_dropout) {
                        if (masks[l].empty())
                            masks[l] = detail::dropout_mask<T>(
                                t.value(lat).shape(), c.recurrent_dropout,
                                *opts.dropout_rng);
                        lat = hadamard_const(t, lat, masks[l]);
                    }
                    pre = add(t, pre, lat);
                }
                Var<T> act = relu(t, pre);
                if (h.rec_w[l].valid() && c.lrn.enabled)
                    act = lrn(t, act, c.lrn.radius, static_cast<T>(c.lrn.alpha),
                              static_cast<T>(c.lrn.beta), static_cast<T>(c.lrn.k));
                prev[l] = act;
                a = act;
                for (int p = 0; p < spec.pool_stages; ++p) a = maxpool2(t, a, false);
            }
            top = a;
        }
    } else {
        Var<T> a = h.input;
        for (std::size_t l = 0; l < c.layers.size(); ++l) {
            const auto& spec = c.layers[l];
            Var<T> act =
                relu(t, conv2d(t, a, h.conv_w[l], h.conv_b[l], Pad::none()));
            const int steps = c.stopping_times.empty()
                                  ? 1
                                  : c.stopping_times[l];
            if (steps > 1) {
                Var<T> kern;
                if (opts.kernels != nullptr) {
                    const Tensor<T>& kv = (*opts.kernels)[l];
                    if (kv.empty())
                        throw std::invalid_argument("forward: missing hoisted kernel");
                    kern = t.leaf(kv, opts.watch_kernels);
                } else if (c.detach_kernel) {
                    kern = lateral_kernel_var(t, t.constant(s.conv_w[l]));
                } else {
                    kern = lateral_kernel_var(t, h.conv_w[l]);
                }
                h.kernels[l] = kern;
                Tensor<T> mask;
                if (want_dropout)
                    mask = detail::dropout_mask<T>(t.value(act).shape(),
                                                   c.recurrent_dropout, *opts.dropout_rng);
                for (int it = 2; it <= steps; ++it) {
                    Var<T> kh = apply_kernel_var(t, kern, act);
                    if (want_dropout) kh = hadamard_const(t, kh, mask);
                    act = axpby(t, T(0.5), kh, T(0.5), act);
                }
            }
            for (int p = 0; p < spec.pool_stages; ++p) act = maxpool2(t, act, false);
            a = act;
        }
        top = a;
    }

    h.logits = dense(t, flatten(t, top), h.dense_w, h.dense_b);
    return h;
}

// Lateral kernels for every layer that iterates (kercnn); empty slots
// elsewhere. Build once per batch or checkpoint, not per sample.
template <typename T>
std::vector<Tensor<T>> build_all_kernels(const ModelConfig& c, const ModelState<T>& s) {
    std::vector<Tensor<T>> out(c.layers.size());
    if (c.variant != Variant::kercnn) return out;
    for (std::size_t l = 0; l < c.layers.size(); ++l)
        if (c.stopping_times[l] > 1)
            out[l] = build_lateral_kernel(s.conv_w[l], static_cast<int>(l)).values;
    return out;
}

template <typename T>
struct Prediction {
    int label = -1;
    Tensor<T> probs;
};

template <typename T>
Tensor<T> logits_of(const ModelConfig& c, const ModelState<T>& s, const Tensor<T>& image,
                    const std::vector<Tensor<T>>* kernels = nullptr) {
    Tape<T> t;
    ForwardOptions<T> opts;
    opts.kernels = kernels;
    auto h = build_forward(t, c, s, image, opts);
    return t.value(h.logits);
}

// Argmax prediction; ties resolve to the lowest class index.
template <typename T>
Prediction<T> predict(const ModelConfig& c, const ModelState<T>& s, const Tensor<T>& image,
                      const std::vector<Tensor<T>>* kernels = nullptr) {
    Prediction<T> p;
    p.probs = softmax(logits_of(c, s, image, kernels));
    p.label = 0;
    for (int i = 1; i < p.probs.dim(0); ++i)
        if (p.probs(i) > p.probs(p.label)) p.label = i;
    return p;
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary plus a human-readable .txt manifest.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void put_tensor(std::ostream& os, const Tensor<T>& t) {
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
    for (std::size_t i = 0; i < t.size(); ++i) put_f64(os, static_cast<double>(t.flat(i)));
}

template <typename T>
Tensor<T> get_tensor(std::istream& is) {
    const std::uint32_t rank = get_u32(is);
    if (!is || rank < 1 || rank > 4) throw std::runtime_error("checkpoint: bad tensor rank");
    Shape s;
    s.rank = static_cast<int>(rank);
    for (std::uint32_t i = 0; i < rank; ++i) s.d[i] = static_cast<int>(get_u32(is));
    Tensor<T> t{s};
    for (std::size_t i = 0; i < t.size(); ++i) t.flat(i) = static_cast<T>(get_f64(is));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor data");
    return t;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& c, const ModelState<T>& s) {
    validate(c);
    check_state(c, s);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("KCKP", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(c.variant));
    detail::put_u32(os, static_cast<std::uint32_t>(c.in_h));
    detail::put_u32(os, static_cast<std::uint32_t>(c.in_w));
    detail::put_u32(os, static_cast<std::uint32_t>(c.in_c));
    detail::put_u32(os, static_cast<std::uint32_t>(c.class_count));
    detail::put_u32(os, static_cast<std::uint32_t>(c.layers.size()));
    for (const auto& l : c.layers) {
        detail::put_u32(os, static_cast<std::uint32_t>(l.filter_size));
        detail::put_u32(os, static_cast<std::uint32_t>(l.filter_count));
        detail::put_u32(os, static_cast<std::uint32_t>(l.pool_stages));
        detail::put_u32(os, static_cast<std::uint32_t>(l.rec_filter_size));
    }
    detail::put_u32(os, static_cast<std::uint32_t>(c.stopping_times.size()));
    for (int t : c.stopping_times) detail::put_u32(os, static_cast<std::uint32_t>(t));
    detail::put_u32(os, static_cast<std::uint32_t>(c.rec_time_steps));
    os.put(c.detach_kernel ? '\1' : '\0');
    detail::put_f64(os, c.recurrent_dropout);
    detail::put_u32(os, static_cast<std::uint32_t>(c.lrn.radius));
    detail::put_f64(os, c.lrn.alpha);
    detail::put_f64(os, c.lrn.beta);
    detail::put_f64(os, c.lrn.k);
    os.put(c.lrn.enabled ? '\1' : '\0');

    for (std::size_t l = 0; l < c.layers.size(); ++l) {
        detail::put_tensor(os, s.conv_w[l]);
        detail::put_tensor(os, s.conv_b[l]);
        os.put(s.rec_w[l].empty() ? '\0' : '\1');
        if (!s.rec_w[l].empty()) detail::put_tensor(os, s.rec_w[l]);
    }
    detail::put_tensor(os, s.dense_w);
    detail::put_tensor(os, s.dense_b);
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
    os.close();

    std::ofstream mf(path + ".txt");
    if (!mf) throw std::runtime_error("save_checkpoint: cannot open " + path + ".txt");
    mf << "kercnn checkpoint v" << kCheckpointVersion << "\n";
    mf << "variant: " << variant_name(c.variant) << "\n";
    mf << "input: " << c.in_h << "x" << c.in_w << "x" << c.in_c << "\n";
    mf << "classes: " << c.class_count << "\n";
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
        const auto& sp = c.layers[l];
        mf << "layer " << l + 1 << ": conv " << sp.filter_size << "x" << sp.filter_size
           << "x" << sp.filter_count << ", pool stages " << sp.pool_stages;
        if (sp.rec_filter_size > 0)
            mf << ", lateral " << sp.rec_filter_size << "x" << sp.rec_filter_size;
        mf << "\n";
    }
    mf << "stopping_times:";
    for (int t : c.stopping_times) mf << " " << t;
    mf << "\n";
    mf << "rec_time_steps: " << c.rec_time_steps << "\n";
    mf << "recurrent_dropout: " << c.recurrent_dropout << "\n";
    mf << "detach_kernel: " << (c.detach_kernel ? "yes" : "no") << "\n";
    mf << "parameters: " << s.param_count() << "\n";
    std::uint64_t digest = 0xcbf29ce484222325ull;
    auto fold = [&digest](const Tensor<T>& t) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double v = static_cast<double>(t.flat(i));
            digest = fnv1a(&v, sizeof(v), digest);
        }
    };
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
        fold(s.conv_w[l]);
        fold(s.conv_b[l]);
        if (!s.rec_w[l].empty()) fold(s.rec_w[l]);
    }
    fold(s.dense_w);
    fold(s.dense_b);
    mf << "weights_digest: " << hex64(digest) << "\n";
}

template <typename T>
std::pair<ModelConfig, ModelState<T>> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "KCKP")
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    if (detail::get_u32(is) != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: unsupported version in " + path);

    ModelConfig c;
    const std::uint32_t variant = detail::get_u32(is);
    if (variant > 2) throw std::runtime_error("load_checkpoint: bad variant");
    c.variant = static_cast<Variant>(variant);
    c.in_h = static_cast<int>(detail::get_u32(is));
    c.in_w = static_cast<int>(detail::get_u32(is));
    c.in_c = static_cast<int>(detail::get_u32(is));
    c.class_count = static_cast<int>(detail::get_u32(is));
    const std::uint32_t layers = detail::get_u32(is);
    if (!is || layers == 0 || layers > 64)
        throw std::runtime_error("load_checkpoint: bad layer count");
    c.layers.resize(layers);
    for (auto& l : c.layers) {
        l.filter_size = static_cast<int>(detail::get_u32(is));
        l.filter_count = static_cast<int>(detail::get_u32(is));
        l.pool_stages = static_cast<int>(detail::get_u32(is));
        l.rec_filter_size = static_cast<int>(detail::get_u32(is));
    }
    const std::uint32_t nst = detail::get_u32(is);
    if (nst > layers) throw std::runtime_error("load_checkpoint: bad stopping times");
    c.stopping_times.resize(nst);
    for (auto& t : c.stopping_times) t = static_cast<int>(detail::get_u32(is));
    c.rec_time_steps = static_cast<int>(detail::get_u32(is));
    c.detach_kernel = is.get() != 0;
    c.recurrent_dropout = detail::get_f64(is);
    c.lrn.radius = static_cast<int>(detail::get_u32(is));
    c.lrn.alpha = detail::get_f64(is);
    c.lrn.beta = detail::get_f64(is);
    c.lrn.k = detail::get_f64(is);
    c.lrn.enabled = is.get() != 0;
    if (!is) throw std::runtime_error("load_checkpoint: truncated header in " + path);

    ModelState<T> s;
    for (std::uint32_t l = 0; l < layers; ++l) {
        s.conv_w.push_back(detail::get_tensor<T>(is));
        s.conv_b.push_back(detail::get_tensor<T>(is));
        const int has_rec = is.get();
        s.rec_w.push_back(has_rec ? detail::get_tensor<T>(is) : Tensor<T>{});
    }
    s.dense_w = detail::get_tensor<T>(is);
    s.dense_b = detail::get_tensor<T>(is);

    validate(c);
    check_state(c, s);  // shape audit catches config/tensor mismatches
    return {c, s};
}

}  // namespace kercnn
