#pragma once

// Independent reference implementations used to validate the library's fast
// paths. These are deliberately written as direct summations of the defining
// formulas, sharing no code with the implementations under test.

#include "kercnn/ops.hpp"
#include "kercnn/tensor.hpp"

namespace oracle {

template <typename T>
kercnn::Tensor<T> rand_tensor(kercnn::Shape s, kercnn::Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
    kercnn::Tensor<T> t{s};
    for (std::size_t i = 0; i < t.size(); ++i)
        t.flat(i) = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// out(oi, oj, k) = sum_{i,j,c} xpad(oi+i, oj+j, c) * w(i, j, k, c)
template <typename T>
kercnn::Tensor<T> naive_conv2d(const kercnn::Tensor<T>& x, const kercnn::Tensor<T>& w,
                               const kercnn::Tensor<T>* bias, kercnn::Pad p) {
    const int h = x.dim(0), wd = x.dim(1), c = x.dim(2);
    const int d = w.dim(0), k = w.dim(2);
    const int ho = h + p.top + p.bottom - d + 1;
    const int wo = wd + p.left + p.right - d + 1;
    kercnn::Tensor<T> out{kercnn::Shape{ho, wo, k}};
    for (int oi = 0; oi < ho; ++oi) {
        for (int oj = 0; oj < wo; ++oj) {
            for (int kk = 0; kk < k; ++kk) {
                T acc = bias ? (*bias)(kk) : T(0);
                for (int i = 0; i < d; ++i) {
                    for (int j = 0; j < d; ++j) {
                        const int si = oi + i - p.top, sj = oj + j - p.left;
                        if (si < 0 || si >= h || sj < 0 || sj >= wd) continue;
                        for (int cc = 0; cc < c; ++cc)
                            acc += x(si, sj, cc) * w(i, j, kk, cc);
                    }
                }
                out(oi, oj, kk) = acc;
            }
        }
    }
    return out;
}

// Correlation table built by explicitly shifting psi_g over psi_f, looping
// the offsets in the opposite nesting order from the library.
template <typename T>
kercnn::Tensor<T> naive_correlation(const kercnn::Tensor<T>& psi) {
    const int d = psi.dim(0), f = psi.dim(2), c = psi.dim(3);
    const int s = 2 * d - 1;
    kercnn::Tensor<T> out{kercnn::Shape{s, s, f, f}};
    for (int ff = 0; ff < f; ++ff) {
        for (int gg = 0; gg < f; ++gg) {
            for (int di = -(d - 1); di <= d - 1; ++di) {
                for (int dj = -(d - 1); dj <= d - 1; ++dj) {
                    T acc = T(0);
                    for (int pi = 0; pi < d; ++pi) {
                        for (int pj = 0; pj < d; ++pj) {
                            const int qi = pi - di, qj = pj - dj;
                            if (qi < 0 || qi >= d || qj < 0 || qj >= d) continue;
                            for (int cc = 0; cc < c; ++cc)
                                acc += psi(pi, pj, ff, cc) * psi(qi, qj, gg, cc);
                        }
                    }
                    out(di + d - 1, dj + d - 1, ff, gg) = acc;
                }
            }
        }
    }
    return out;
}

// Spatial sizes through one conv (valid) followed by n 2x2 floor pools.
inline int shape_after_layer(int extent, int filter_size, int pool_stages) {
    int e = extent - filter_size + 1;
    for (int i = 0; i < pool_stages; ++i) e = e / 2;
    return e;
}

}  // namespace oracle

#include "kercnn/models.hpp"

namespace oracle {

enum class ParamKind { conv_w, conv_b, rec_w, dense_w, dense_b, input };

// Central-difference audit of a model's loss gradient w.r.t. one parameter
// tensor (or the input image), exercising build_forward end to end.
template <typename T>
double fd_model_check(const kercnn::ModelConfig& c, const kercnn::ModelState<T>& state,
                      const kercnn::Tensor<T>& image, int label, ParamKind kind,
                      std::size_t layer, double step) {
    using namespace kercnn;

    auto loss_of = [&](const ModelState<T>& s, const Tensor<T>& img) {
        Tape<T> t;
        auto h = build_forward(t, c, s, img);
        auto l = cross_entropy_with_logits(t, h.logits, label);
        return static_cast<double>(t.value(l)(0));
    };

    Tape<T> t;
    ForwardOptions<T> opts;
    opts.watch_input = (kind == ParamKind::input);
    auto h = build_forward(t, c, state, image, opts);
    t.backward(cross_entropy_with_logits(t, h.logits, label));

    Var<T> v;
    switch (kind) {
        case ParamKind::conv_w: v = h.conv_w[layer]; break;
        case ParamKind::conv_b: v = h.conv_b[layer]; break;
        case ParamKind::rec_w: v = h.rec_w[layer]; break;
        case ParamKind::dense_w: v = h.dense_w; break;
        case ParamKind::dense_b: v = h.dense_b; break;
        case ParamKind::input: v = h.input; break;
    }
    const kercnn::Tensor<T> analytic = t.grad(v);

    kercnn::ModelState<T> s = state;
    kercnn::Tensor<T> img = image;
    kercnn::Tensor<T>* target = nullptr;
    switch (kind) {
        case ParamKind::conv_w: target = &s.conv_w[layer]; break;
        case ParamKind::conv_b: target = &s.conv_b[layer]; break;
        case ParamKind::rec_w: target = &s.rec_w[layer]; break;
        case ParamKind::dense_w: target = &s.dense_w; break;
        case ParamKind::dense_b: target = &s.dense_b; break;
        case ParamKind::input: target = &img; break;
    }

    double worst = 0.0;
    for (std::size_t i = 0; i < target->size(); ++i) {
        const T orig = target->flat(i);
        target->flat(i) = orig + static_cast<T>(step);
        const double fp = loss_of(s, img);
        target->flat(i) = orig - static_cast<T>(step);
        const double fm = loss_of(s, img);
        target->flat(i) = orig;

        const double fd = (fp - fm) / (2.0 * step);
        const double an = static_cast<double>(analytic.flat(i));
        const double mag = std::max(std::abs(fd), std::abs(an));
        if (mag <= 1e-8) continue;
        worst = std::max(worst, std::abs(fd - an) / std::max(mag, 1e-6));
    }
    return worst;
}

// Block-mean downsample of an (H, W, 1) image, for feeding full-size synth
// digits to the miniature configs below.
template <typename T>
kercnn::Tensor<T> shrink_to(const kercnn::Tensor<T>& img, int oh = 8, int ow = 8) {
    const int h = img.dim(0), w = img.dim(1);
    kercnn::Tensor<T> out{kercnn::Shape{oh, ow, 1}};
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            const int y0 = y * h / oh, y1 = std::max(y0 + 1, (y + 1) * h / oh);
            const int x0 = x * w / ow, x1 = std::max(x0 + 1, (x + 1) * w / ow);
            double acc = 0.0;
            for (int yy = y0; yy < y1; ++yy)
                for (int xx = x0; xx < x1; ++xx) acc += static_cast<double>(img(yy, xx, 0));
            out(y, x, 0) = static_cast<T>(acc / ((y1 - y0) * (x1 - x0)));
        }
    return out;
}

// A deliberately tiny KerCNN (well under 200 parameters) for end-to-end
// gradient audits: 8x8 input, two iterating layers, three classes.
inline kercnn::ModelConfig miniature_kercnn_config(int t1, int t2) {
    kercnn::ModelConfig c;
    c.variant = kercnn::Variant::kercnn;
    c.in_h = 8;
    c.in_w = 8;
    c.in_c = 1;
    c.class_count = 3;
    c.layers = {{3, 4, 1, 0}, {2, 4, 1, 0}};
    c.stopping_times = {t1, t2};
    return c;
}

}  // namespace oracle
