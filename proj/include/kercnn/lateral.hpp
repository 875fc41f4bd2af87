#pragma once

#include "kercnn/ops.hpp"

#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace kercnn {

// ---------------------------------------------------------------------------
// Lateral connectivity kernels derived from feedforward filters.
//
// Raw kernel: K~(i, j, f, g) = sigmoid(<psi_f, shift(psi_g)>) over spatial
// offsets (i, j) in [-(d-1), d-1]^2, extent S = 2d-1. Two-stage
// normalization then turns it into a transition kernel with unit mass per
// source feature f:
//   K1 = K~ / (rowmass(f) * colmass(g))        (symmetric stage)
//   K  = K1 / rowmass1(f)                      (per-f mass exactly 1)
//
// apply_kernel computes the spread (K * h)(x, g) = sum_{q,f} K(x-q, f, g)
// h(q, f) on a zero-padded grid; gather_apply is its exact adjoint, realised
// by the flip_swap involution, so n-step propagation and single-step
// application agree to machine precision on finite grids.
// ---------------------------------------------------------------------------

template <typename T>
struct RawKernel {
    Tensor<T> values;  // (S, S, F, F)
    int source_layer = -1;
    std::uint64_t filter_checksum = 0;
};

template <typename T>
struct LateralKernel {
    Tensor<T> values;  // (S, S, F, F), sum_{i,j,g} = 1 for every f
    int source_layer = -1;
    std::uint64_t filter_checksum = 0;
};

// ---------------------------------------------------------------------------
// Tape-graph builders (differentiable w.r.t. the filters)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> build_raw_kernel_var(Tape<T>& t, Var<T> psi) {
    return sigmoid(t, filter_correlation(t, psi));
}

template <typename T>
Var<T> normalize_kernel_var(Tape<T>& t, Var<T> raw) {
    Var<T> vf = sum_over_ijg(t, raw);
    Var<T> vg = sum_over_ijf(t, raw);
    Var<T> k1 = div_fg(t, raw, vf, vg);
    Var<T> vf1 = sum_over_ijg(t, k1);
    return div_f(t, k1, vf1);
}

template <typename T>
Var<T> lateral_kernel_var(Tape<T>& t, Var<T> psi) {
    return normalize_kernel_var(t, build_raw_kernel_var(t, psi));
}

// (K * h): h (H, W, F) -> (H, W, F), zero padding d-1 on every side.
template <typename T>
Var<T> apply_kernel_var(Tape<T>& t, Var<T> kern, Var<T> h) {
    const Tensor<T>& kv = t.value(kern);
    if (kv.rank() != 4 || kv.dim(0) != kv.dim(1) || kv.dim(0) % 2 == 0)
        throw std::invalid_argument("apply_kernel: extent must be odd square");
    if (kv.dim(2) != kv.dim(3))
        throw std::invalid_argument("apply_kernel: feature dims must match");
    if (t.value(h).rank() != 3 || t.value(h).dim(2) != kv.dim(2))
        throw std::invalid_argument("apply_kernel: activation channels must match kernel");
    const int pad = (kv.dim(0) - 1) / 2;
    Var<T> filters = flip_swap_fg(t, kern);
    return conv2d(t, h, filters, Pad{pad, pad, pad, pad});
}

// ---------------------------------------------------------------------------
// Plain (non-tape) conveniences
// ---------------------------------------------------------------------------

template <typename T>
RawKernel<T> build_raw_kernel(const Tensor<T>& psi, int source_layer = -1) {
    Tape<T> t;
    Var<T> out = build_raw_kernel_var(t, t.constant(psi));
    return RawKernel<T>{t.value(out), source_layer,
                        fnv1a(psi.data(), psi.size() * sizeof(T))};
}

template <typename T>
LateralKernel<T> build_lateral_kernel(const Tensor<T>& psi, int source_layer = -1) {
    Tape<T> t;
    Var<T> out = lateral_kernel_var(t, t.constant(psi));
    return LateralKernel<T>{t.value(out), source_layer,
                            fnv1a(psi.data(), psi.size() * sizeof(T))};
}

template <typename T>
Tensor<T> apply_kernel(const Tensor<T>& kern, const Tensor<T>& h) {
    Tape<T> t;
    return t.value(apply_kernel_var(t, t.constant(kern), t.constant(h)));
}

// Adjoint of apply_kernel: gather_apply(K, F) = apply_kernel(flip_swap(K), F).
template <typename T>
Tensor<T> gather_apply(const Tensor<T>& kern, const Tensor<T>& f) {
    return apply_kernel(flip_swap_values(kern), f);
}

// Per-source-feature masses sum_{i,j,g} K(i,j,f,g); all 1 after normalization.
template <typename T>
Tensor<T> kernel_row_masses(const Tensor<T>& kern) {
    Tensor<T> m{Shape{kern.dim(2)}};
    for (int i = 0; i < kern.dim(0); ++i)
        for (int j = 0; j < kern.dim(1); ++j)
            for (int ff = 0; ff < kern.dim(2); ++ff)
                for (int gg = 0; gg < kern.dim(3); ++gg) m(ff) += kern(i, j, ff, gg);
    return m;
}

// The kernel slice seen from a unit impulse at (ci, cj) in feature f0:
//   out(x, y, g) = K(x - ci + d - 1, y - cj + d - 1, f0, g), zero off-support.
template <typename T>
Tensor<T> anchored_slice(const Tensor<T>& kern, int f0, int h, int w, int ci, int cj) {
    const int s = kern.dim(0), d = (s + 1) / 2;
    if (f0 < 0 || f0 >= kern.dim(2))
        throw std::invalid_argument("anchored_slice: feature out of range");
    if (ci < 0 || ci >= h || cj < 0 || cj >= w)
        throw std::invalid_argument("anchored_slice: centre outside grid");
    Tensor<T> out{Shape{h, w, kern.dim(3)}};
    for (int x = 0; x < h; ++x) {
        const int oi = x - ci + d - 1;
        if (oi < 0 || oi >= s) continue;
        for (int y = 0; y < w; ++y) {
            const int oj = y - cj + d - 1;
            if (oj < 0 || oj >= s) continue;
            for (int gg = 0; gg < kern.dim(3); ++gg) out(x, y, gg) = kern(oi, oj, f0, gg);
        }
    }
    return out;
}

// n-step propagated activation fields H_1..H_n from an impulse in feature f0.
// H_1 is the anchored kernel slice; H_t = K * H_{t-1}.
template <typename T>
std::vector<Tensor<T>> propagate_kernel(const Tensor<T>& kern, int f0, int n, int h, int w,
                                        std::optional<std::pair<int, int>> centre = {}) {
    if (n < 1) throw std::invalid_argument("propagate_kernel: need n >= 1");
    const int ci = centre ? centre->first : h / 2;
    const int cj = centre ? centre->second : w / 2;
    std::vector<Tensor<T>> fields;
    fields.reserve(static_cast<std::size_t>(n));
    fields.push_back(anchored_slice(kern, f0, h, w, ci, cj));
    for (int i = 1; i < n; ++i) fields.push_back(apply_kernel(kern, fields.back()));
    return fields;
}

// ---------------------------------------------------------------------------
// Export: binary blobs for exact round-trips, PNG/PGM montages for eyeballs
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

inline std::uint32_t crc32_ieee(const unsigned char* p, std::size_t n) {
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) {
        crc ^= p[i];
        for (int k = 0; k < 8; ++k)
            crc = (crc & 1u) ? (crc >> 1) ^ 0xEDB88320u : crc >> 1;
    }
    return ~crc;
}

inline std::uint32_t adler32(const unsigned char* p, std::size_t n) {
    std::uint32_t a = 1, b = 0;
    for (std::size_t i = 0; i < n; ++i) {
        a = (a + p[i]) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

inline void append_be32(std::string& s, std::uint32_t v) {
    s.push_back(static_cast<char>(v >> 24));
    s.push_back(static_cast<char>(v >> 16));
    s.push_back(static_cast<char>(v >> 8));
    s.push_back(static_cast<char>(v));
}

inline void png_chunk(std::ostream& os, const char* type, const std::string& data) {
    std::string head;
    append_be32(head, static_cast<std::uint32_t>(data.size()));
    const std::string body = std::string(type, 4) + data;
    std::string crc;
    append_be32(crc,
                crc32_ieee(reinterpret_cast<const unsigned char*>(body.data()), body.size()));
    os.write(head.data(), 4);
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    os.write(crc.data(), 4);
}

}  // namespace detail

// Little-endian blob: "KLAT" | version | rank | dims[rank] | f64 values.
template <typename T>
void write_kernel_binary(const std::string& path, const Tensor<T>& kern) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_kernel_binary: cannot open " + path);
    os.write("KLAT", 4);
    detail::put_u32(os, 1u);
    detail::put_u32(os, static_cast<std::uint32_t>(kern.rank()));
    for (int i = 0; i < kern.rank(); ++i)
        detail::put_u32(os, static_cast<std::uint32_t>(kern.dim(i)));
    for (std::size_t i = 0; i < kern.size(); ++i)
        detail::put_f64(os, static_cast<double>(kern.flat(i)));
    if (!os) throw std::runtime_error("write_kernel_binary: write failed for " + path);
}

template <typename T>
Tensor<T> read_kernel_binary(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_kernel_binary: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "KLAT")
        throw std::runtime_error("read_kernel_binary: bad magic in " + path);
    if (detail::get_u32(is) != 1u)
        throw std::runtime_error("read_kernel_binary: unsupported version in " + path);
    const std::uint32_t rank = detail::get_u32(is);
    if (rank < 1 || rank > 4) throw std::runtime_error("read_kernel_binary: bad rank");
    std::vector<int> dims(rank);
    for (auto& d : dims) d = static_cast<int>(detail::get_u32(is));
    Shape shape;
    shape.rank = static_cast<int>(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape.d[i] = dims[i];
    Tensor<T> out{shape};
    for (std::size_t i = 0; i < out.size(); ++i)
        out.flat(i) = static_cast<T>(detail::get_f64(is));
    if (!is) throw std::runtime_error("read_kernel_binary: truncated file " + path);
    return out;
}

// 8-bit binary PGM (P5) from a rank-2 gray image with values in [0, 1].
template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& gray) {
    if (gray.rank() != 2) throw std::invalid_argument("write_pgm: rank 2 expected");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
    os << "P5\n" << gray.dim(1) << " " << gray.dim(0) << "\n255\n";
    for (std::size_t i = 0; i < gray.size(); ++i) {
        const double v = std::clamp(static_cast<double>(gray.flat(i)), 0.0, 1.0);
        const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
        os.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!os) throw std::runtime_error("write_pgm: write failed for " + path);
}

// 8-bit grayscale PNG from a rank-2 gray image with values in [0, 1]. The
// zlib stream uses stored (uncompressed) deflate blocks, so no compression
// library is needed; montages are small enough that size does not matter.
template <typename T>
void write_png(const std::string& path, const Tensor<T>& gray) {
    if (gray.rank() != 2) throw std::invalid_argument("write_png: rank 2 expected");
    const int h = gray.dim(0), w = gray.dim(1);
    std::string raw;  // scanlines, each prefixed with filter byte 0
    raw.reserve(static_cast<std::size_t>(h) * (static_cast<std::size_t>(w) + 1));
    for (int i = 0; i < h; ++i) {
        raw.push_back('\0');
        for (int j = 0; j < w; ++j) {
            const double v = std::clamp(static_cast<double>(gray(i, j)), 0.0, 1.0);
            raw.push_back(static_cast<char>(std::lround(v * 255.0)));
        }
    }

    std::string ihdr;
    detail::append_be32(ihdr, static_cast<std::uint32_t>(w));
    detail::append_be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.append("\x08\x00\x00\x00\x00", 5);  // depth 8, gray, deflate, none, no interlace

    std::string idat;
    idat.push_back('\x78');
    idat.push_back('\x01');
    for (std::size_t off = 0; off < raw.size(); off += 65535) {
        const std::uint32_t len =
            static_cast<std::uint32_t>(std::min<std::size_t>(65535, raw.size() - off));
        const bool last = off + len == raw.size();
        idat.push_back(last ? '\1' : '\0');
        idat.push_back(static_cast<char>(len & 0xFF));
        idat.push_back(static_cast<char>(len >> 8));
        idat.push_back(static_cast<char>(~len & 0xFF));
        idat.push_back(static_cast<char>((~len >> 8) & 0xFF));
        idat.append(raw, off, len);
    }
    detail::append_be32(
        idat, detail::adler32(reinterpret_cast<const unsigned char*>(raw.data()), raw.size()));

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_png: cannot open " + path);
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    os.write(reinterpret_cast<const char*>(sig), 8);
    detail::png_chunk(os, "IHDR", ihdr);
    detail::png_chunk(os, "IDAT", idat);
    detail::png_chunk(os, "IEND", "");
    if (!os) throw std::runtime_error("write_png: write failed for " + path);
}

// F x F grid of (f, g) kernel slices with 1px separators, globally
// normalized to [0, 1]. Rows index the source feature f.
template <typename T>
Tensor<T> kernel_montage(const Tensor<T>& kern) {
    const int s0 = kern.dim(0), s1 = kern.dim(1), f = kern.dim(2), g = kern.dim(3);
    T lo = kern.flat(0), hi = kern.flat(0);
    for (std::size_t i = 1; i < kern.size(); ++i) {
        lo = std::min(lo, kern.flat(i));
        hi = std::max(hi, kern.flat(i));
    }
    const T span = hi > lo ? hi - lo : T(1);
    const int mh = f * (s0 + 1) + 1, mw = g * (s1 + 1) + 1;
    Tensor<T> m{Shape{mh, mw}};
    for (int ff = 0; ff < f; ++ff)
        for (int gg = 0; gg < g; ++gg)
            for (int i = 0; i < s0; ++i)
                for (int j = 0; j < s1; ++j)
                    m(1 + ff * (s0 + 1) + i, 1 + gg * (s1 + 1) + j) =
                        (kern(i, j, ff, gg) - lo) / span;
    return m;
}

// Steps-by-features grid of propagated activation planes, one row per step.
template <typename T>
Tensor<T> fields_montage(const std::vector<Tensor<T>>& fields) {
    if (fields.empty()) throw std::invalid_argument("fields_montage: no fields");
    const int h = fields[0].dim(0), w = fields[0].dim(1), f = fields[0].dim(2);
    T lo = fields[0](0, 0, 0), hi = lo;
    for (const auto& fd : fields)
        for (std::size_t i = 0; i < fd.size(); ++i) {
            lo = std::min(lo, fd.flat(i));
            hi = std::max(hi, fd.flat(i));
        }
    const T span = hi > lo ? hi - lo : T(1);
    const int rows = static_cast<int>(fields.size());
    Tensor<T> m{Shape{rows * (h + 1) + 1, f * (w + 1) + 1}};
    for (int r = 0; r < rows; ++r)
        for (int ff = 0; ff < f; ++ff)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    m(1 + r * (h + 1) + i, 1 + ff * (w + 1) + j) =
                        (fields[static_cast<std::size_t>(r)](i, j, ff) - lo) / span;
    return m;
}

}  // namespace kercnn
