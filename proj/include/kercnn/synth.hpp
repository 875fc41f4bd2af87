#pragma once

#include "kercnn/data.hpp"

namespace kercnn {

// ---------------------------------------------------------------------------
// Synthetic stroke digits.
//
// Stand-in for real handwritten-digit IDX files when none are on disk. Each
// digit class is a set of stroke templates (lines, quadratic beziers,
// ellipses) in a unit square. Per image the stroke anchors are jittered,
// stroke ends are shortened to leave handwriting-like gaps, and the whole
// glyph gets a random affine distortion (rotation, anisotropic scale, shear,
// translation) before being drawn with a soft Gaussian pen of varying width
// and ink onto a 28x28 [0, 1] canvas. The variation budget is tuned so a
// desk-scale CNN lands in the high-90s rather than at a saturated 100%,
// keeping corruption and attack behaviour comparable to real digit data.
// Every image depends only on (seed, index), so datasets are reproducible
// sample by sample.
// ---------------------------------------------------------------------------

namespace synth_detail {

struct Pt {
    double x, y;
};

struct Segment {
    enum class Kind { line, quad, ellipse } kind;
    Pt a, b, c;      // line: a-b | quad: a, control b, end c
    double rx, ry;   // ellipse: centre a, radii, angle range [t0, t1]
    double t0, t1;
};

inline Segment line(Pt a, Pt b) { return {Segment::Kind::line, a, b, {}, 0, 0, 0, 0}; }
inline Segment quad(Pt a, Pt ctrl, Pt b) {
    return {Segment::Kind::quad, a, ctrl, b, 0, 0, 0, 0};
}
inline Segment ellipse(Pt centre, double rx, double ry, double t0 = 0.0,
                       double t1 = 2.0 * 3.14159265358979323846) {
    return {Segment::Kind::ellipse, centre, {}, {}, rx, ry, t0, t1};
}

inline Pt eval(const Segment& s, double t) {
    switch (s.kind) {
        case Segment::Kind::line:
            return {s.a.x + t * (s.b.x - s.a.x), s.a.y + t * (s.b.y - s.a.y)};
        case Segment::Kind::quad: {
            const double u = 1.0 - t;
            return {u * u * s.a.x + 2.0 * u * t * s.b.x + t * t * s.c.x,
                    u * u * s.a.y + 2.0 * u * t * s.b.y + t * t * s.c.y};
        }
        case Segment::Kind::ellipse: {
            const double ang = s.t0 + t * (s.t1 - s.t0);
            return {s.a.x + s.rx * std::cos(ang), s.a.y + s.ry * std::sin(ang)};
        }
    }
    return {0, 0};
}

// Writing styles per class. Classes people write several ways (1, 2, 4, 7, 9)
// get more than one template; the rest rely on jitter for their spread.
inline int digit_variant_count(int digit) {
    switch (digit) {
        case 1: return 3;
        case 2: case 4: case 7: case 9: return 2;
        default: return 1;
    }
}

// Stroke templates per class and style, unit square coordinates, y down.
inline std::vector<Segment> digit_strokes(int digit, int variant = 0) {
    switch (digit * 4 + variant) {
        case 0 * 4:
            return {ellipse({0.50, 0.50}, 0.30, 0.40)};
        case 1 * 4:  // flag and stem
            return {line({0.34, 0.26}, {0.54, 0.10}), line({0.54, 0.10}, {0.54, 0.90})};
        case 1 * 4 + 1:  // bare stem
            return {line({0.53, 0.10}, {0.48, 0.90})};
        case 1 * 4 + 2:  // flag, stem and base bar
            return {line({0.36, 0.26}, {0.54, 0.10}), line({0.54, 0.10}, {0.52, 0.88}),
                    line({0.34, 0.88}, {0.70, 0.88})};
        case 2 * 4:
            return {quad({0.28, 0.28}, {0.50, 0.02}, {0.72, 0.28}),
                    quad({0.72, 0.28}, {0.74, 0.55}, {0.26, 0.88}),
                    line({0.26, 0.88}, {0.76, 0.88})};
        case 2 * 4 + 1:  // looped bottom
            return {quad({0.30, 0.26}, {0.52, 0.04}, {0.70, 0.30}),
                    quad({0.70, 0.30}, {0.66, 0.56}, {0.34, 0.80}),
                    ellipse({0.40, 0.82}, 0.09, 0.07),
                    line({0.48, 0.86}, {0.78, 0.84})};
        case 3 * 4:
            return {quad({0.30, 0.16}, {0.88, 0.08}, {0.50, 0.46}),
                    quad({0.50, 0.46}, {0.96, 0.58}, {0.30, 0.88})};
        case 4 * 4:  // closed top
            return {line({0.62, 0.10}, {0.24, 0.62}), line({0.24, 0.62}, {0.82, 0.62}),
                    line({0.62, 0.10}, {0.62, 0.92})};
        case 4 * 4 + 1:  // open top, floating stem
            return {line({0.56, 0.08}, {0.26, 0.56}), line({0.26, 0.56}, {0.80, 0.56}),
                    line({0.64, 0.30}, {0.64, 0.92})};
        case 5 * 4:
            return {line({0.74, 0.12}, {0.32, 0.12}), line({0.32, 0.12}, {0.30, 0.46}),
                    quad({0.30, 0.46}, {0.92, 0.42}, {0.54, 0.88}),
                    line({0.54, 0.88}, {0.28, 0.82})};
        case 6 * 4:
            return {quad({0.68, 0.10}, {0.28, 0.18}, {0.32, 0.62}),
                    ellipse({0.50, 0.68}, 0.20, 0.20)};
        case 7 * 4:
            return {line({0.24, 0.14}, {0.78, 0.14}), line({0.78, 0.14}, {0.40, 0.90})};
        case 7 * 4 + 1:  // crossbar
            return {line({0.24, 0.14}, {0.78, 0.14}), line({0.78, 0.14}, {0.40, 0.90}),
                    line({0.38, 0.52}, {0.68, 0.52})};
        case 8 * 4:
            return {ellipse({0.50, 0.30}, 0.20, 0.19), ellipse({0.50, 0.70}, 0.24, 0.22)};
        case 9 * 4:  // curled tail
            return {ellipse({0.48, 0.32}, 0.21, 0.21),
                    quad({0.69, 0.34}, {0.70, 0.72}, {0.52, 0.92})};
        case 9 * 4 + 1:  // straight tail
            return {ellipse({0.48, 0.32}, 0.21, 0.21), line({0.69, 0.32}, {0.62, 0.92})};
        default:
            throw std::invalid_argument("digit_strokes: no such digit/variant");
    }
}

// Sub-range [u0, u1] of a segment as a segment of the same kind. For quads
// the control point follows from matching the start tangent of the original
// curve at u0.
inline Segment clip_segment(const Segment& s, double u0, double u1) {
    Segment out = s;
    switch (s.kind) {
        case Segment::Kind::line:
            out.a = eval(s, u0);
            out.b = eval(s, u1);
            break;
        case Segment::Kind::quad: {
            const double du = u1 - u0;
            const Pt d = {(1.0 - u0) * (s.b.x - s.a.x) + u0 * (s.c.x - s.b.x),
                          (1.0 - u0) * (s.b.y - s.a.y) + u0 * (s.c.y - s.b.y)};
            out.a = eval(s, u0);
            out.b = {out.a.x + du * d.x, out.a.y + du * d.y};
            out.c = eval(s, u1);
            break;
        }
        case Segment::Kind::ellipse:
            out.t0 = s.t0 + u0 * (s.t1 - s.t0);
            out.t1 = s.t0 + u1 * (s.t1 - s.t0);
            break;
    }
    return out;
}

// Per-image glyph: a random writing style for the class, with jittered
// anchors, wobbled radii and shortened ends. A per-image sloppiness scale
// stretches the jitter budget so the dataset spans tidy through
// barely-legible writers. The gap a clipped closed ellipse leaves lands at a
// random start-angle phase.
inline std::vector<Segment> sample_glyph(int digit, Rng& rng) {
    const int variant = static_cast<int>(rng.uniform_int(0, digit_variant_count(digit) - 1));
    std::vector<Segment> segs = digit_strokes(digit, variant);
    const double sloppy = rng.uniform(0.65, 1.90);
    const double j = 0.065 * sloppy;                    // anchor jitter, unit-square units
    const double jc = 0.10 * sloppy;                    // quad control point: curvature wobble
    const double clip = 0.07 * std::min(sloppy, 1.3);   // stroke-end shortening budget
    for (Segment& s : segs) {
        s.a.x += rng.uniform(-j, j);
        s.a.y += rng.uniform(-j, j);
        switch (s.kind) {
            case Segment::Kind::line:
                s.b.x += rng.uniform(-j, j);
                s.b.y += rng.uniform(-j, j);
                break;
            case Segment::Kind::quad:
                s.b.x += rng.uniform(-jc, jc);
                s.b.y += rng.uniform(-jc, jc);
                s.c.x += rng.uniform(-j, j);
                s.c.y += rng.uniform(-j, j);
                break;
            case Segment::Kind::ellipse: {
                s.rx *= rng.uniform(0.82, 1.18);
                s.ry *= rng.uniform(0.82, 1.18);
                const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
                s.t0 += phase;
                s.t1 += phase;
                break;
            }
        }
        const double u0 = rng.uniform(0.0, clip);
        const double u1 = rng.uniform(1.0 - clip, 1.0);
        s = clip_segment(s, u0, u1);
    }
    return segs;
}

struct Affine {
    // p' = M * (p - 0.5) + shift, pixel coordinates
    double m00, m01, m10, m11, tx, ty;
    Pt apply(Pt p) const {
        const double x = p.x - 0.5, y = p.y - 0.5;
        return {m00 * x + m01 * y + tx, m10 * x + m11 * y + ty};
    }
};

inline Affine sample_affine(Rng& rng, int h, int w) {
    const double rot = rng.uniform(-0.30, 0.30);
    const double sx = rng.uniform(0.76, 1.20);
    const double sy = rng.uniform(0.76, 1.20);
    const double shear = rng.uniform(-0.22, 0.22);
    const double tx = rng.uniform(-2.2, 2.2);
    const double ty = rng.uniform(-2.2, 2.2);
    const double ext = 0.66 * std::min(h, w);  // content box inside the canvas
    const double cr = std::cos(rot), sr = std::sin(rot);
    // R(rot) * Shear(shear) * diag(sx, sy), scaled to pixels
    Affine a;
    a.m00 = ext * (cr * sx + (-sr) * sx * shear);
    a.m01 = ext * (-sr * sy);
    a.m10 = ext * (sr * sx + cr * sx * shear);
    a.m11 = ext * (cr * sy);
    a.tx = 0.5 * w + tx;
    a.ty = 0.5 * h + ty;
    return a;
}

inline void splat_stroke(Tensor<double>& acc, const std::vector<Segment>& segs,
                         const Affine& af, double sigma) {
    const int h = acc.dim(0), w = acc.dim(1);
    const double step = 0.35;  // pixels between pen samples
    const double reach = 3.0 * sigma;
    for (const Segment& s : segs) {
        // coarse pass to estimate the mapped arc length
        double len = 0.0;
        Pt prev = af.apply(eval(s, 0.0));
        for (int k = 1; k <= 16; ++k) {
            const Pt cur = af.apply(eval(s, k / 16.0));
            len += std::hypot(cur.x - prev.x, cur.y - prev.y);
            prev = cur;
        }
        const int samples = std::max(2, static_cast<int>(std::ceil(len / step)));
        for (int k = 0; k <= samples; ++k) {
            const Pt p = af.apply(eval(s, static_cast<double>(k) / samples));
            const int x0 = std::max(0, static_cast<int>(std::floor(p.x - reach)));
            const int x1 = std::min(w - 1, static_cast<int>(std::ceil(p.x + reach)));
            const int y0 = std::max(0, static_cast<int>(std::floor(p.y - reach)));
            const int y1 = std::min(h - 1, static_cast<int>(std::ceil(p.y + reach)));
            const double weight = len / samples;
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double dx = x - p.x, dy = y - p.y;
                    acc(y, x) += weight * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                }
        }
    }
}

}  // namespace synth_detail

// (28, 28, 1) image of `digit` in [0, 1], fully determined by the rng state.
// Draw order: affine, pen width, ink pressure grid, then per-segment glyph
// style. The ink gain is a bilinearly upsampled coarse random field rather
// than a constant, giving pen-pressure variation along strokes the way
// scanned handwriting has.
template <typename T>
Tensor<T> synth_digit_image(int digit, Rng& rng, int h = 28, int w = 28) {
    using namespace synth_detail;
    const Affine af = sample_affine(rng, h, w);
    const double sigma = rng.uniform(0.80, 1.40);
    constexpr int kGrid = 7;
    double gain[kGrid][kGrid];
    for (int gy = 0; gy < kGrid; ++gy)
        for (int gx = 0; gx < kGrid; ++gx) gain[gy][gx] = rng.uniform(0.75, 1.80);
    Tensor<double> acc = Tensor<double>::zeros({h, w});
    splat_stroke(acc, sample_glyph(digit, rng), af, sigma);
    Tensor<T> img{Shape{h, w, 1}};
    for (int y = 0; y < h; ++y) {
        const double fy = (h > 1) ? y * (kGrid - 1.0) / (h - 1.0) : 0.0;
        const int y0 = std::min(kGrid - 2, static_cast<int>(fy));
        const double wy = fy - y0;
        for (int x = 0; x < w; ++x) {
            const double fx = (w > 1) ? x * (kGrid - 1.0) / (w - 1.0) : 0.0;
            const int x0 = std::min(kGrid - 2, static_cast<int>(fx));
            const double wx = fx - x0;
            const double g = (1.0 - wy) * ((1.0 - wx) * gain[y0][x0] + wx * gain[y0][x0 + 1]) +
                             wy * ((1.0 - wx) * gain[y0 + 1][x0] + wx * gain[y0 + 1][x0 + 1]);
            // saturating ink response: dense sample coverage -> solid stroke core
            const double v = 1.0 - std::exp(-g * acc(y, x));
            img(y, x, 0) = static_cast<T>(v);
        }
    }
    return img;
}

// Balanced synthetic dataset: label = index mod 10, image seeded by
// mix_seed(seed, index). Raw [0, 1] space, same as load_idx output.
template <typename T>
Dataset<T> make_synth_dataset(int n, std::uint64_t seed, int h = 28, int w = 28) {
    if (n < 1) throw std::invalid_argument("make_synth_dataset: need n >= 1");
    Dataset<T> ds;
    ds.class_count = 10;
    ds.images = Tensor<T>{Shape{n, h, w, 1}};
    ds.labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int digit = i % 10;
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        ds.set_image(i, synth_digit_image<T>(digit, rng, h, w));
        ds.labels[static_cast<std::size_t>(i)] = digit;
    }
    return ds;
}

}  // namespace kercnn
