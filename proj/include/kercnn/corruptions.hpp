#pragma once

#include "kercnn/models.hpp"

namespace kercnn {

// ---------------------------------------------------------------------------
// Test-time perturbations. Three kinds:
//
//   patches  severity = gamma, the pixel width of a peak-one Gaussian
//            occlusion bump pulling pixels toward the background colour
//   strips   severity = D, the maximum shift; the image is cut into strips
//            of `strip_thickness` pixels, each shifted by a random amount
//            in {0..D} with a random sign (horizontal pass, then vertical)
//   fgsm     severity = epsilon, a single gradient-sign ascent step on the
//            cross-entropy loss, taken in the model's normalised input space
//
// The background colour b is the upper-left pixel (per channel). Severity
// zero of every kind returns the input bit for bit. Corruption is applied
// only at evaluation time, never during training.
// ---------------------------------------------------------------------------

enum class CorruptionKind { none, patches, strips, fgsm };

inline const char* corruption_name(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::none: return "none";
        case CorruptionKind::patches: return "patches";
        case CorruptionKind::strips: return "strips";
        case CorruptionKind::fgsm: return "fgsm";
    }
    return "?";
}

inline CorruptionKind corruption_from(const std::string& s) {
    if (s == "none") return CorruptionKind::none;
    if (s == "patches") return CorruptionKind::patches;
    if (s == "strips") return CorruptionKind::strips;
    if (s == "fgsm") return CorruptionKind::fgsm;
    throw std::invalid_argument("unknown corruption kind: " + s);
}

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::none;
    double severity = 0.0;    // gamma (pixels) | D (pixels) | epsilon
    int patch_count = 4;
    int strip_thickness = 2;
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (severity < 0.0) throw std::invalid_argument("corruption: severity must be >= 0");
        if (patch_count < 0) throw std::invalid_argument("corruption: patch_count must be >= 0");
        if (strip_thickness < 1)
            throw std::invalid_argument("corruption: strip_thickness must be >= 1");
    }
};

// Seed for one image of a batch: the base seed xor the image's index.
inline std::uint64_t corruption_seed(std::uint64_t base, std::uint64_t image_index) {
    return base ^ image_index;
}

namespace detail {

template <typename T>
std::vector<T> background_colour(const Tensor<T>& img) {
    const int c = img.dim(2);
    std::vector<T> b(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) b[static_cast<std::size_t>(ch)] = img(0, 0, ch);
    return b;
}

}  // namespace detail

// One occlusion bump centred at (cu, cv) in (row, col) pixel coordinates:
// I'(u) = (I(u) - b) * (1 - g(u)) + b with g a peak-one Gaussian of standard
// deviation gamma / 2, so a bump of severity gamma wipes out a region about
// gamma pixels across. At the centre g = 1 and the pixel becomes exactly b.
template <typename T>
Tensor<T> apply_gaussian_patch(const Tensor<T>& img, double cu, double cv, double gamma) {
    if (img.rank() != 3) throw std::invalid_argument("patch: image must be (H, W, C)");
    if (gamma < 0.0) throw std::invalid_argument("patch: gamma must be >= 0");
    Tensor<T> out = img;
    if (gamma == 0.0) return out;
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    const std::vector<T> b = detail::background_colour(img);
    for (int u = 0; u < h; ++u)
        for (int v = 0; v < w; ++v) {
            const double du = u - cu, dv = v - cv;
            const double g = std::exp(-2.0 * (du * du + dv * dv) / (gamma * gamma));
            for (int ch = 0; ch < c; ++ch) {
                const double bg = static_cast<double>(b[static_cast<std::size_t>(ch)]);
                out(u, v, ch) = static_cast<T>(
                    (static_cast<double>(img(u, v, ch)) - bg) * (1.0 - g) + bg);
            }
        }
    return out;
}

// `count` patches applied one after another; each centre is drawn uniformly
// over [0, H-1] x [0, W-1], row coordinate first.
template <typename T>
Tensor<T> gaussian_patches(const Tensor<T>& img, double gamma, int count, Rng& rng) {
    if (count < 0) throw std::invalid_argument("patches: count must be >= 0");
    if (gamma < 0.0) throw std::invalid_argument("patches: gamma must be >= 0");
    Tensor<T> out = img;
    if (gamma == 0.0 || count == 0) return out;
    const int h = img.dim(0), w = img.dim(1);
    for (int p = 0; p < count; ++p) {
        const double cu = rng.uniform(0.0, static_cast<double>(h - 1));
        const double cv = rng.uniform(0.0, static_cast<double>(w - 1));
        out = apply_gaussian_patch(out, cu, cv, gamma);
    }
    return out;
}

// Horizontal strips shifted horizontally, then vertical strips shifted
// vertically on the result. Per strip the draws are the magnitude d in
// {0..D} followed by the sign. Vacated pixels take the background colour
// of the original image. Thickness beyond the image extent means one strip.
template <typename T>
Tensor<T> strip_shift(const Tensor<T>& img, int max_shift, int thickness, Rng& rng) {
    if (img.rank() != 3) throw std::invalid_argument("strips: image must be (H, W, C)");
    if (max_shift < 0) throw std::invalid_argument("strips: max shift must be >= 0");
    if (thickness < 1) throw std::invalid_argument("strips: thickness must be >= 1");
    Tensor<T> out = img;
    if (max_shift == 0) return out;
    const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    const std::vector<T> b = detail::background_colour(img);

    Tensor<T> mid{img.shape()};
    for (int y0 = 0; y0 < h; y0 += thickness) {
        const int y1 = std::min(y0 + thickness, h);
        const int d = rng.uniform_int(0, max_shift);
        const int shift = d * rng.sign();
        for (int y = y0; y < y1; ++y)
            for (int x = 0; x < w; ++x) {
                const int src = x - shift;
                for (int ch = 0; ch < c; ++ch)
                    mid(y, x, ch) = (src >= 0 && src < w) ? out(y, src, ch)
                                                          : b[static_cast<std::size_t>(ch)];
            }
    }
    for (int x0 = 0; x0 < w; x0 += thickness) {
        const int x1 = std::min(x0 + thickness, w);
        const int d = rng.uniform_int(0, max_shift);
        const int shift = d * rng.sign();
        for (int x = x0; x < x1; ++x)
            for (int y = 0; y < h; ++y) {
                const int src = y - shift;
                for (int ch = 0; ch < c; ++ch)
                    out(y, x, ch) = (src >= 0 && src < h) ? mid(src, x, ch)
                                                          : b[static_cast<std::size_t>(ch)];
            }
    }
    return out;
}

// Fast gradient sign attack: I' = I + eps * sign(dL/dI) for the true-label
// cross-entropy loss, evaluated in the model's (normalised) input space.
// sign(0) = 0, so untouched pixels stay bit-identical. No range clamping,
// but the max-norm bound |I' - I| <= eps is enforced exactly per pixel.
template <typename T>
Tensor<T> fgsm(const ModelConfig& config, const ModelState<T>& state, const Tensor<T>& img,
               int label, double eps) {
    if (eps < 0.0) throw std::invalid_argument("fgsm: eps must be >= 0");
    if (eps == 0.0) return img;
    const std::vector<Tensor<T>> kernels = build_all_kernels(config, state);

    Tape<T> tape;
    ForwardOptions<T> opts;
    opts.kernels = &kernels;
    opts.watch_input = true;
    auto h = build_forward(tape, config, state, img, opts);
    auto loss = cross_entropy_with_logits(tape, h.logits, label);
    tape.backward(loss);
    const Tensor<T> grad = tape.grad(h.input);

    Tensor<T> out = img;
    const T step = static_cast<T>(eps);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T g = grad.flat(i);
        if (g > T(0))
            out.flat(i) = img.flat(i) + step;
        else if (g < T(0))
            out.flat(i) = img.flat(i) - step;
        // rounding in x + eps can overshoot the bound by an ulp; walk back
        while (std::abs(static_cast<double>(out.flat(i)) -
                        static_cast<double>(img.flat(i))) > static_cast<double>(step))
            out.flat(i) = std::nextafter(out.flat(i), img.flat(i));
    }
    return out;
}

// One image under `spec`, seeded by (spec.rng_seed, image_index). The model
// is consulted only for fgsm; pass nullptr otherwise.
template <typename T>
Tensor<T> corrupt_image(const Tensor<T>& img, int label, const CorruptionSpec& spec,
                        std::uint64_t image_index, const ModelConfig* config = nullptr,
                        const ModelState<T>* state = nullptr) {
    spec.validate();
    Rng rng(corruption_seed(spec.rng_seed, image_index));
    switch (spec.kind) {
        case CorruptionKind::none:
            return img;
        case CorruptionKind::patches:
            return gaussian_patches(img, spec.severity, spec.patch_count, rng);
        case CorruptionKind::strips:
            return strip_shift(img, static_cast<int>(std::lround(spec.severity)),
                               spec.strip_thickness, rng);
        case CorruptionKind::fgsm:
            if (config == nullptr || state == nullptr)
                throw std::invalid_argument("corrupt_image: fgsm needs a model");
            return fgsm(*config, *state, img, label, spec.severity);
    }
    throw std::logic_error("corrupt_image: unreachable");
}

}  // namespace kercnn
