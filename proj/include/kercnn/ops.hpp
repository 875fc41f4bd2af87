#pragma once

#include "kercnn/tape.hpp"

#include <Eigen/Core>

#include <memory>
#include <optional>

namespace kercnn {

// ---------------------------------------------------------------------------
// Differentiable ops. Conventions:
//   activations (H, W, C), filters (i, j, k, c), lateral kernels (i, j, f, g).
// conv2d correlates (no filter flip) and is backed by im2col + GEMM; the
// direct-summation reference used to validate it lives in the test suite.
// ---------------------------------------------------------------------------

struct Pad {
    int top = 0, bottom = 0, left = 0, right = 0;

    static Pad none() { return {}; }
    // TF-style SAME for stride 1: the extra cell of an even filter goes to
    // the bottom/right.
    static Pad same(int filter_size) {
        const int total = filter_size - 1;
        return {total / 2, total - total / 2, total / 2, total - total / 2};
    }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

// cols is (Ho*Wo) x (d*d*C); column q = (i*d + j)*C + c.
template <typename T>
void im2col(const Tensor<T>& x, int d, Pad p, int ho, int wo, RowMat<T>& cols) {
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    for (int oi = 0; oi < ho; ++oi) {
        for (int oj = 0; oj < wo; ++oj) {
            T* row = cols.data() + (static_cast<std::size_t>(oi) * wo + oj) * cols.cols();
            for (int i = 0; i < d; ++i) {
                const int si = oi + i - p.top;
                if (si < 0 || si >= h) {
                    std::fill(row, row + static_cast<std::size_t>(d) * c, T(0));
                    row += static_cast<std::size_t>(d) * c;
                    continue;
                }
                for (int j = 0; j < d; ++j) {
                    const int sj = oj + j - p.left;
                    if (sj < 0 || sj >= w) {
                        std::fill(row, row + c, T(0));
                    } else {
                        const T* src = &x(si, sj, 0);
                        std::copy(src, src + c, row);
                    }
                    row += c;
                }
            }
        }
    }
}

template <typename T>
void col2im_accum(const RowMat<T>& dcols, int d, Pad p, int ho, int wo, Tensor<T>& dx) {
    const int h = dx.dim(0), w = dx.dim(1), c = dx.dim(2);
    for (int oi = 0; oi < ho; ++oi) {
        for (int oj = 0; oj < wo; ++oj) {
            const T* row =
                dcols.data() + (static_cast<std::size_t>(oi) * wo + oj) * dcols.cols();
            for (int i = 0; i < d; ++i) {
                const int si = oi + i - p.top;
                if (si < 0 || si >= h) {
                    row += static_cast<std::size_t>(d) * c;
                    continue;
                }
                for (int j = 0; j < d; ++j) {
                    const int sj = oj + j - p.left;
                    if (sj >= 0 && sj < w) {
                        T* dst = &dx(si, sj, 0);
                        for (int cc = 0; cc < c; ++cc) dst[cc] += row[cc];
                    }
                    row += c;
                }
            }
        }
    }
}

// (i, j, k, c) filters to a (d*d*C) x K matrix matching im2col's column order.
template <typename T>
RowMat<T> filters_as_matrix(const Tensor<T>& w) {
    const int d = w.dim(0), k = w.dim(2), c = w.dim(3);
    RowMat<T> m(static_cast<Eigen::Index>(d) * d * c, k);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            for (int kk = 0; kk < k; ++kk)
                for (int cc = 0; cc < c; ++cc)
                    m((static_cast<Eigen::Index>(i) * d + j) * c + cc, kk) = w(i, j, kk, cc);
    return m;
}

template <typename T>
void matrix_into_filters(const RowMat<T>& m, Tensor<T>& w) {
    const int d = w.dim(0), k = w.dim(2), c = w.dim(3);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            for (int kk = 0; kk < k; ++kk)
                for (int cc = 0; cc < c; ++cc)
                    w(i, j, kk, cc) += m((static_cast<Eigen::Index>(i) * d + j) * c + cc, kk);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: x (H, W, C) * w (d, d, K, C) -> (Ho, Wo, K), stride 1.
// Ho = H + top + bottom - d + 1; filters must be square and match C.
// ---------------------------------------------------------------------------
template <typename T>
Var<T> conv2d(Tape<T>& t, Var<T> x, Var<T> w, Var<T> bias, Pad pad) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(w);
    if (xv.rank() != 3) throw std::invalid_argument("conv2d: input must be rank 3");
    if (wv.rank() != 4 || wv.dim(0) != wv.dim(1))
        throw std::invalid_argument("conv2d: filters must be square rank 4");
    if (wv.dim(3) != xv.dim(2))
        throw std::invalid_argument("conv2d: filter channels do not match input");
    if (pad.top < 0 || pad.bottom < 0 || pad.left < 0 || pad.right < 0)
        throw std::invalid_argument("conv2d: negative padding");

    const int d = wv.dim(0), k = wv.dim(2);
    const int ho = xv.dim(0) + pad.top + pad.bottom - d + 1;
    const int wo = xv.dim(1) + pad.left + pad.right - d + 1;
    if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: empty output extent");
    if (bias.valid() && (t.value(bias).rank() != 1 || t.value(bias).dim(0) != k))
        throw std::invalid_argument("conv2d: bias must be rank 1 of length K");

    auto cols = std::make_shared<RowMat<T>>(static_cast<Eigen::Index>(ho) * wo,
                                            static_cast<Eigen::Index>(d) * d * xv.dim(2));
    detail::im2col(xv, d, pad, ho, wo, *cols);
    auto wmat = std::make_shared<RowMat<T>>(detail::filters_as_matrix(wv));

    Tensor<T> out{Shape{ho, wo, k}};
    Eigen::Map<RowMat<T>> om(out.data(), cols->rows(), k);
    om.noalias() = (*cols) * (*wmat);
    if (bias.valid()) {
        const Tensor<T>& bv = t.value(bias);
        for (Eigen::Index r = 0; r < om.rows(); ++r)
            for (int kk = 0; kk < k; ++kk) om(r, kk) += bv(kk);
    }

    auto backward = [x, w, bias, cols, wmat, d, pad, ho, wo, k](Tape<T>& t, Var<T> self) {
        const Tensor<T>& g = t.grad(self);
        Eigen::Map<const RowMat<T>> gm(g.data(), cols->rows(), k);
        if (t.needs_grad(w)) {
            RowMat<T> dw = cols->transpose() * gm;
            Tensor<T>* buf = t.grad_buffer(w);
            detail::matrix_into_filters(dw, *buf);
        }
        if (bias.valid() && t.needs_grad(bias)) {
            Tensor<T>* buf = t.grad_buffer(bias);
            for (int kk = 0; kk < k; ++kk) buf->flat(static_cast<std::size_t>(kk)) += gm.col(kk).sum();
        }
        if (t.needs_grad(x)) {
            RowMat<T> dcols = gm * wmat->transpose();
            detail::col2im_accum(dcols, d, pad, ho, wo, *t.grad_buffer(x));
        }
    };
    if (bias.valid()) return t.push("conv2d", std::move(out), {x, w, bias}, backward);
    return t.push("conv2d", std::move(out), {x, w}, backward);
}

template <typename T>
Var<T> conv2d(Tape<T>& t, Var<T> x, Var<T> w, Pad pad) {
    return conv2d(t, x, w, Var<T>{}, pad);
}

// ---------------------------------------------------------------------------
// maxpool2: 2x2 windows, stride 2. ceil_mode keeps truncated edge windows
// (13 -> 7); floor mode drops the odd edge (13 -> 6). Both coincide on even
// extents. Ties go to the first element in (row, column) scan order.
// ---------------------------------------------------------------------------
template <typename T>
Var<T> maxpool2(Tape<T>& t, Var<T> x, bool ceil_mode = true) {
    const Tensor<T>& xv = t.value(x);
    if (xv.rank() != 3) throw std::invalid_argument("maxpool2: input must be rank 3");
    const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    const int ho = ceil_mode ? (h + 1) / 2 : h / 2;
    const int wo = ceil_mode ? (w + 1) / 2 : w / 2;
    if (ho < 1 || wo < 1) throw std::invalid_argument("maxpool2: empty output extent");

    Tensor<T> out{Shape{ho, wo, c}};
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    for (int oi = 0; oi < ho; ++oi) {
        for (int oj = 0; oj < wo; ++oj) {
            const int i1 = std::min(2 * oi + 2, h), j1 = std::min(2 * oj + 2, w);
            for (int cc = 0; cc < c; ++cc) {
                T best = xv(2 * oi, 2 * oj, cc);
                std::size_t where = (static_cast<std::size_t>(2 * oi) * w + 2 * oj) * c + cc;
                for (int i = 2 * oi; i < i1; ++i) {
                    for (int j = 2 * oj; j < j1; ++j) {
                        const T v = xv(i, j, cc);
                        if (v > best) {
                            best = v;
                            where = (static_cast<std::size_t>(i) * w + j) * c + cc;
                        }
                    }
                }
                out(oi, oj, cc) = best;
                (*argmax)[(static_cast<std::size_t>(oi) * wo + oj) * c + cc] = where;
            }
        }
    }

    return t.push("maxpool2", std::move(out), {x},
                  [x, argmax](Tape<T>& t, Var<T> self) {
                      const Tensor<T>& g = t.grad(self);
                      Tensor<T>* buf = t.grad_buffer(x);
                      for (std::size_t i = 0; i < g.size(); ++i)
                          buf->flat((*argmax)[i]) += g.flat(i);
                  });
}

// ---------------------------------------------------------------------------
// Pointwise ops
// ---------------------------------------------------------------------------
template <typename T>
Var<T> relu(Tape<T>& t, Var<T> x) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T> out = xv;
    for (std::size_t i = 0; i < out.size(); ++i) out.flat(i) = std::max(T(0), out.flat(i));
    return t.push("relu", std::move(out), {x}, [x](Tape<T>& t, Var<T> self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T> dx{g.shape()};
        for (std::size_t i = 0; i < g.size(); ++i)
            dx.flat(i) = y.flat(i) > T(0) ? g.flat(i) : T(0);
        t.accum(x, dx);
    });
}

template <typename T>
T sigmoid_scalar(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(Tape<T>& t, Var<T> x) {
    Tensor<T> out = t.value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out.flat(i) = sigmoid_scalar(out.flat(i));
    return t.push("sigmoid", std::move(out), {x}, [x](Tape<T>& t, Var<T> self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T> dx{g.shape()};
        for (std::size_t i = 0; i < g.size(); ++i)
            dx.flat(i) = g.flat(i) * y.flat(i) * (T(1) - y.flat(i));
        t.accum(x, dx);
    });
}

// out = a*x + b*y, elementwise on matching shapes.
template <typename T>
Var<T> axpby(Tape<T>& t, T a, Var<T> x, T b, Var<T> y) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& yv = t.value(y);
    if (xv.shape() != yv.shape()) throw std::invalid_argument("axpby: shape mismatch");
    Tensor<T> out{xv.shape()};
    for (std::size_t i = 0; i < out.size(); ++i)
        out.flat(i) = a * xv.flat(i) + b * yv.flat(i);
    return t.push("axpby", std::move(out), {x, y}, [x, y, a, b](Tape<T>& t, Var<T> self) {
        const Tensor<T>& g = t.grad(self);
        if (t.needs_grad(x)) {
            Tensor<T> dx{g.shape()};
            for (std::size_t i = 0; i < g.size(); ++i) dx.flat(i) = a * g.flat(i);
            t.accum(x, dx);
        }
        if (t.needs_grad(y)) {
            Tensor<T> dy{g.shape()};
            for (std::size_t i = 0; i < g.size(); ++i) dy.flat(i) = b * g.flat(i);
            t.accum(y, dy);
        }
    });
}

template <typename T>
Var<T> add(Tape<T>& t, Var<T> x, Var<T> y) {
    return axpby(t, T(1), x, T(1), y);
}

template <typename T>
Var<T> mul(Tape<T>& t, Var<T> x, Var<T> y) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& yv = t.value(y);
    if (xv.shape() != yv.shape()) throw std::invalid_argument("mul: shape mismatch");
    Tensor<T> out{xv.shape()};
    for (std::size_t i = 0; i < out.size(); ++i) out.flat(i) = xv.flat(i) * yv.flat(i);
    return t.push("mul", std::move(out), {x, y}, [x, y](Tape<T>& t, Var<T> self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv = t.value(x);
        const Tensor<T>& yv = t.value(y);
        if (t.needs_grad(x)) {
            Tensor<T> dx{g.shape()};
            for (std::size_t i = 0; i < g.size(); ++i) dx.flat(i) = g.flat(i) * yv.flat(i);
            t.accum(x, dx);
        }
        if (t.needs_grad(y)) {
            Tensor<T> dy{g.shape()};
            for (std::size_t i = 0; i < g.size(); ++i) dy.flat(i) = g.flat(i) * xv.flat(i);
            t.accum(y, dy);
        }
    });
}

template <typename T>
Var<T> scale(Tape<T>& t, Var<T> x, T c) {
    Tensor<T> out = t.value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out.flat(i) *= c;
    return t.push("scale", std::move(out), {x}, [x, c](Tape<T>& t, Var<T> self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T> dx{g.shape()};
        for (std::size_t i = 0; i < g.size(); ++i) dx.flat(i) = c * g.flat(i);
        t.accum(x, dx);
    });
}

// Elementwise product with a fixed mask (dropout masks and the like).
template <typename T>
Var<T> hadamard_const(Tape<T>& t, Var<T> x, Tensor<T> mask) {
    const Tensor<T>& xv = t.value(x);
    if (xv.shape() != mask.shape())
        throw std::invalid_argument("hadamard_const: shape mismatch");
    Tensor<T> out{xv.shape()};
    for (std::size_t i = 0; i < out.size(); ++i) out.flat(i) = xv.flat(i) * mask.flat(i);
    auto m = std::make_shared<Tensor<T>>(std::move(mask));
    return t.push("hadamard_const", std::move(out), {x}, [x, m](Tape<T>& t, Var<T> self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T> dx{g.shape()};
        for (std::size_t i = 0; i < g.size(); ++i) dx.flat(i) = g.flat(i) * m->flat(i);
        t.accum(x, dx);
    });
}

// ---------------------------------------------------------------------------
// flatten / dense head
// ---------------------------------------------------------------------------
template <typename T>
Var<T> flatten(Tape<T>& t, Var<T> x) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T> out = xv.reshaped(Shape{static_cast<int>(xv.size())});
    return t.push("flatten", std::move(out), {x}, [x](Tape<T>& t, Var<T> self) {
        const Tensor<T>& g = t.grad(self);
        t.accum(x, g.reshaped(t.value(x).shape()));
    });
}

// y = x . W + b with x (S), W (S, n), b (n).
template <typename T>
Var<T> dense(Tape<T>& t, Var<T> x, Var<T> w, Var<T> b) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(w);
    const Tensor<T>& bv = t.value(b);
    if (xv.rank() != 1 || wv.rank() != 2 || bv.rank() != 1)
        throw std::invalid_argument("dense: expected x (S), W (S,n), b (n)");
    const int s = xv.dim(0), n = wv.dim(1);
    if (wv.dim(0) != s || bv.dim(0) != n)
        throw std::invalid_argument("dense: dimension mismatch");

    Tensor<T> out{Shape{n}};
    for (int j = 0; j < n; ++j) {
        T acc = bv(j);
        for (int i = 0; i < s; ++i) acc += xv(i) * wv(i, j);
        out(j) = acc;
    }
    return t.push("dense", std::move(out), {x, w, b}, [x, w, b, s, n](Tape<T>& t, Var<T> self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv = t.value(x);
        const Tensor<T>& wv = t.value(w);
        if (t.needs_grad(x)) {
            Tensor<T> dx{Shape{s}};
            for (int i = 0; i < s; ++i) {
                T acc = T(0);
                for (int j = 0; j < n; ++j) acc += wv(i, j) * g(j);
                dx(i) = acc;
            }
            t.accum(x, dx);
        }
        if (t.needs_grad(w)) {
            Tensor<T>* buf = t.grad_buffer(w);
            for (int i = 0; i < s; ++i)
                for (int j = 0; j < n; ++j) (*buf)(i, j) += xv(i) * g(j);
        }
        if (t.needs_grad(b)) t.accum(b, g);
    });
}

// ---------------------------------------------------------------------------
// Reductions and loss
// ---------------------------------------------------------------------------
template <typename T>
Var<T> sum_all(Tape<T>& t, Var<T> x) {
    const Tensor<T>& xv = t.value(x);
    T acc = T(0);
    for (std::size_t i = 0; i < xv.size(); ++i) acc += xv.flat(i);
    Tensor<T> out{Shape{1}};
    out(0) = acc;
    return t.push("sum_all", std::move(out), {x}, [x](Tape<T>& t, Var<T> self) {
        const T g = t.grad(self).flat(0);
        t.accum(x, Tensor<T>(t.value(x).shape(), g));
    });
}

// Plain softmax with max subtraction; not a tape op.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    Tensor<T> p{logits.shape()};
    T m = logits.flat(0);
    for (std::size_t i = 1; i < logits.size(); ++i) m = std::max(m, logits.flat(i));
    T z = T(0);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p.flat(i) = std::exp(logits.flat(i) - m);
        z += p.flat(i);
    }
    for (std::size_t i = 0; i < p.size(); ++i) p.flat(i) /= z;
    return p;
}

// loss = log(sum_i exp(z_i)) - z_label, in log-sum-exp stable form.
template <typename T>
Var<T> cross_entropy_with_logits(Tape<T>& t, Var<T> logits, int label) {
    const Tensor<T>& zv = t.value(logits);
    if (zv.rank() != 1) throw std::invalid_argument("cross_entropy: logits must be rank 1");
    if (label < 0 || label >= zv.dim(0))
        throw std::invalid_argument("cross_entropy: label out of range");

    T m = zv(0);
    for (int i = 1; i < zv.dim(0); ++i) m = std::max(m, zv(i));
    T z = T(0);
    for (int i = 0; i < zv.dim(0); ++i) z += std::exp(zv(i) - m);
    const T lse = m + std::log(z);

    Tensor<T> out{Shape{1}};
    out(0) = lse - zv(label);
    return t.push("cross_entropy", std::move(out), {logits},
                  [logits, label, lse](Tape<T>& t, Var<T> self) {
                      const T g = t.grad(self).flat(0);
                      const Tensor<T>& zv = t.value(logits);
                      Tensor<T> dz{zv.shape()};
                      for (int i = 0; i < zv.dim(0); ++i)
                          dz(i) = g * std::exp(zv(i) - lse);
                      dz(label) -= g;
                      t.accum(logits, dz);
                  });
}

// ---------------------------------------------------------------------------
// Local response normalization (across channels):
//   out(c) = x(c) * (k + alpha * sum_{|c'-c| <= r} x(c')^2)^(-beta)
// Identity when alpha = 0, k = 1.
// ---------------------------------------------------------------------------
template <typename T>
Var<T> lrn(Tape<T>& t, Var<T> x, int radius, T alpha, T beta, T k) {
    const Tensor<T>& xv = t.value(x);
    if (xv.rank() != 3) throw std::invalid_argument("lrn: input must be rank 3");
    if (radius < 0) throw std::invalid_argument("lrn: negative radius");
    const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);

    auto den = std::make_shared<Tensor<T>>(xv.shape());
    Tensor<T> out{xv.shape()};
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            for (int cc = 0; cc < c; ++cc) {
                T s = T(0);
                const int lo = std::max(0, cc - radius), hi = std::min(c - 1, cc + radius);
                for (int q = lo; q <= hi; ++q) s += xv(i, j, q) * xv(i, j, q);
                const T d = k + alpha * s;
                (*den)(i, j, cc) = d;
                out(i, j, cc) = xv(i, j, cc) * std::pow(d, -beta);
            }
        }
    }

    return t.push("lrn", std::move(out), {x},
                  [x, den, radius, alpha, beta](Tape<T>& t, Var<T> self) {
                      const Tensor<T>& g = t.grad(self);
                      const Tensor<T>& xv = t.value(x);
                      const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
                      Tensor<T> dx{xv.shape()};
                      for (int i = 0; i < h; ++i) {
                          for (int j = 0; j < w; ++j) {
                              for (int cc = 0; cc < c; ++cc) {
                                  const T d = (*den)(i, j, cc);
                                  dx(i, j, cc) += g(i, j, cc) * std::pow(d, -beta);
                              }
                              // cross terms: out(c) depends on x(q) for q in c's window
                              for (int cc = 0; cc < c; ++cc) {
                                  const T d = (*den)(i, j, cc);
                                  const T common = g(i, j, cc) * xv(i, j, cc) * (-beta) *
                                                   std::pow(d, -beta - T(1)) * alpha * T(2);
                                  const int lo = std::max(0, cc - radius);
                                  const int hi = std::min(c - 1, cc + radius);
                                  for (int q = lo; q <= hi; ++q)
                                      dx(i, j, q) += common * xv(i, j, q);
                              }
                          }
                      }
                      t.accum(x, dx);
                  });
}

// ---------------------------------------------------------------------------
// Lateral-kernel primitives
// ---------------------------------------------------------------------------

// Correlation table of a filter bank with itself:
//   out(oi, oj, f, g) = sum_{p, c} psi(p, f, c) * psi(p - offset, g, c)
// with offset = (oi - d + 1, oj - d + 1); spatial extent (2d-1) x (2d-1).
// The centre cell of the (f, f) slice is ||psi_f||^2, and
// out(oi, oj, f, g) == out(S-1-oi, S-1-oj, g, f) holds bit-exactly.
template <typename T>
Var<T> filter_correlation(Tape<T>& t, Var<T> psi) {
    const Tensor<T>& pv = t.value(psi);
    if (pv.rank() != 4 || pv.dim(0) != pv.dim(1))
        throw std::invalid_argument("filter_correlation: filters must be square rank 4");
    const int d = pv.dim(0), f = pv.dim(2), c = pv.dim(3);
    const int s = 2 * d - 1;

    Tensor<T> out{Shape{s, s, f, f}};
    for (int oi = 0; oi < s; ++oi) {
        const int di = oi - (d - 1);
        const int pi0 = std::max(0, di), pi1 = std::min(d - 1, d - 1 + di);
        for (int oj = 0; oj < s; ++oj) {
            const int dj = oj - (d - 1);
            const int pj0 = std::max(0, dj), pj1 = std::min(d - 1, d - 1 + dj);
            for (int ff = 0; ff < f; ++ff) {
                for (int gg = 0; gg < f; ++gg) {
                    T acc = T(0);
                    for (int pi = pi0; pi <= pi1; ++pi)
                        for (int pj = pj0; pj <= pj1; ++pj)
                            for (int cc = 0; cc < c; ++cc)
                                acc += pv(pi, pj, ff, cc) * pv(pi - di, pj - dj, gg, cc);
                    out(oi, oj, ff, gg) = acc;
                }
            }
        }
    }

    return t.push("filter_correlation", std::move(out), {psi},
                  [psi, d, f, c, s](Tape<T>& t, Var<T> self) {
                      const Tensor<T>& g = t.grad(self);
                      const Tensor<T>& pv = t.value(psi);
                      Tensor<T> dp{pv.shape()};
                      for (int oi = 0; oi < s; ++oi) {
                          const int di = oi - (d - 1);
                          const int pi0 = std::max(0, di), pi1 = std::min(d - 1, d - 1 + di);
                          for (int oj = 0; oj < s; ++oj) {
                              const int dj = oj - (d - 1);
                              const int pj0 = std::max(0, dj), pj1 = std::min(d - 1, d - 1 + dj);
                              for (int ff = 0; ff < f; ++ff) {
                                  for (int gg = 0; gg < f; ++gg) {
                                      const T go = g(oi, oj, ff, gg);
                                      if (go == T(0)) continue;
                                      for (int pi = pi0; pi <= pi1; ++pi) {
                                          for (int pj = pj0; pj <= pj1; ++pj) {
                                              for (int cc = 0; cc < c; ++cc) {
                                                  dp(pi, pj, ff, cc) +=
                                                      go * pv(pi - di, pj - dj, gg, cc);
                                                  dp(pi - di, pj - dj, gg, cc) +=
                                                      go * pv(pi, pj, ff, cc);
                                              }
                                          }
                                      }
                                  }
                              }
                          }
                      }
                      t.accum(psi, dp);
                  });
}

// Per-source-feature mass: out(f) = sum_{i,j,g} K(i,j,f,g).
template <typename T>
Var<T> sum_over_ijg(Tape<T>& t, Var<T> kern) {
    const Tensor<T>& kv = t.value(kern);
    if (kv.rank() != 4) throw std::invalid_argument("sum_over_ijg: rank 4 expected");
    const int s0 = kv.dim(0), s1 = kv.dim(1), f = kv.dim(2), g = kv.dim(3);
    Tensor<T> out{Shape{f}};
    for (int i = 0; i < s0; ++i)
        for (int j = 0; j < s1; ++j)
            for (int ff = 0; ff < f; ++ff)
                for (int gg = 0; gg < g; ++gg) out(ff) += kv(i, j, ff, gg);
    return t.push("sum_over_ijg", std::move(out), {kern}, [kern](Tape<T>& t, Var<T> self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& kv = t.value(kern);
        Tensor<T> dk{kv.shape()};
        for (int i = 0; i < kv.dim(0); ++i)
            for (int j = 0; j < kv.dim(1); ++j)
                for (int ff = 0; ff < kv.dim(2); ++ff)
                    for (int gg = 0; gg < kv.dim(3); ++gg) dk(i, j, ff, gg) = go(ff);
        t.accum(kern, dk);
    });
}

// Per-target-feature mass: out(g) = sum_{i,j,f} K(i,j,f,g).
template <typename T>
Var<T> sum_over_ijf(Tape<T>& t, Var<T> kern) {
    const Tensor<T>& kv = t.value(kern);
    if (kv.rank() != 4) throw std::invalid_argument("sum_over_ijf: rank 4 expected");
    const int s0 = kv.dim(0), s1 = kv.dim(1), f = kv.dim(2), g = kv.dim(3);
    Tensor<T> out{Shape{g}};
    for (int i = 0; i < s0; ++i)
        for (int j = 0; j < s1; ++j)
            for (int ff = 0; ff < f; ++ff)
                for (int gg = 0; gg < g; ++gg) out(gg) += kv(i, j, ff, gg);
    return t.push("sum_over_ijf", std::move(out), {kern}, [kern](Tape<T>& t, Var<T> self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& kv = t.value(kern);
        Tensor<T> dk{kv.shape()};
        for (int i = 0; i < kv.dim(0); ++i)
            for (int j = 0; j < kv.dim(1); ++j)
                for (int ff = 0; ff < kv.dim(2); ++ff)
                    for (int gg = 0; gg < kv.dim(3); ++gg) dk(i, j, ff, gg) = go(gg);
        t.accum(kern, dk);
    });
}

inline constexpr double kNormalizeFloor = 1e-12;

// out(i,j,f,g) = K(i,j,f,g) / (vf(f) * vg(g) + floor)
template <typename T>
Var<T> div_fg(Tape<T>& t, Var<T> kern, Var<T> vf, Var<T> vg) {
    const Tensor<T>& kv = t.value(kern);
    const Tensor<T>& fv = t.value(vf);
    const Tensor<T>& gv = t.value(vg);
    if (kv.rank() != 4 || fv.rank() != 1 || gv.rank() != 1 || fv.dim(0) != kv.dim(2) ||
        gv.dim(0) != kv.dim(3))
        throw std::invalid_argument("div_fg: shape mismatch");

    Tensor<T> out{kv.shape()};
    for (int i = 0; i < kv.dim(0); ++i)
        for (int j = 0; j < kv.dim(1); ++j)
            for (int ff = 0; ff < kv.dim(2); ++ff)
                for (int gg = 0; gg < kv.dim(3); ++gg)
                    out(i, j, ff, gg) =
                        kv(i, j, ff, gg) /
                        (fv(ff) * gv(gg) + static_cast<T>(kNormalizeFloor));

    return t.push("div_fg", std::move(out), {kern, vf, vg},
                  [kern, vf, vg](Tape<T>& t, Var<T> self) {
                      const Tensor<T>& go = t.grad(self);
                      const Tensor<T>& kv = t.value(kern);
                      const Tensor<T>& fv = t.value(vf);
                      const Tensor<T>& gv = t.value(vg);
                      const Tensor<T>& ov = t.value(self);
                      const bool nk = t.needs_grad(kern), nf = t.needs_grad(vf),
                                 ng = t.needs_grad(vg);
                      Tensor<T> dk{kv.shape()};
                      Tensor<T> df{fv.shape()};
                      Tensor<T> dg{gv.shape()};
                      for (int i = 0; i < kv.dim(0); ++i) {
                          for (int j = 0; j < kv.dim(1); ++j) {
                              for (int ff = 0; ff < kv.dim(2); ++ff) {
                                  for (int gg = 0; gg < kv.dim(3); ++gg) {
                                      const T den =
                                          fv(ff) * gv(gg) + static_cast<T>(kNormalizeFloor);
                                      const T g1 = go(i, j, ff, gg);
                                      if (nk) dk(i, j, ff, gg) = g1 / den;
                                      if (nf) df(ff) -= g1 * ov(i, j, ff, gg) / den * gv(gg);
                                      if (ng) dg(gg) -= g1 * ov(i, j, ff, gg) / den * fv(ff);
                                  }
                              }
                          }
                      }
                      if (nk) t.accum(kern, dk);
                      if (nf) t.accum(vf, df);
                      if (ng) t.accum(vg, dg);
                  });
}

// out(i,j,f,g) = K(i,j,f,g) / (vf(f) + floor)
template <typename T>
Var<T> div_f(Tape<T>& t, Var<T> kern, Var<T> vf) {
    const Tensor<T>& kv = t.value(kern);
    const Tensor<T>& fv = t.value(vf);
    if (kv.rank() != 4 || fv.rank() != 1 || fv.dim(0) != kv.dim(2))
        throw std::invalid_argument("div_f: shape mismatch");

    Tensor<T> out{kv.shape()};
    for (int i = 0; i < kv.dim(0); ++i)
        for (int j = 0; j < kv.dim(1); ++j)
            for (int ff = 0; ff < kv.dim(2); ++ff)
                for (int gg = 0; gg < kv.dim(3); ++gg)
                    out(i, j, ff, gg) =
                        kv(i, j, ff, gg) / (fv(ff) + static_cast<T>(kNormalizeFloor));

    return t.push("div_f", std::move(out), {kern, vf}, [kern, vf](Tape<T>& t, Var<T> self) {
        const Tensor<T>& go = t.grad(self);
        const Tensor<T>& kv = t.value(kern);
        const Tensor<T>& fv = t.value(vf);
        const Tensor<T>& ov = t.value(self);
        const bool nk = t.needs_grad(kern), nf = t.needs_grad(vf);
        Tensor<T> dk{kv.shape()};
        Tensor<T> df{fv.shape()};
        for (int i = 0; i < kv.dim(0); ++i) {
            for (int j = 0; j < kv.dim(1); ++j) {
                for (int ff = 0; ff < kv.dim(2); ++ff) {
                    const T den = fv(ff) + static_cast<T>(kNormalizeFloor);
                    for (int gg = 0; gg < kv.dim(3); ++gg) {
                        const T g1 = go(i, j, ff, gg);
                        if (nk) dk(i, j, ff, gg) = g1 / den;
                        if (nf) df(ff) -= g1 * ov(i, j, ff, gg) / den;
                    }
                }
            }
        }
        if (nk) t.accum(kern, dk);
        if (nf) t.accum(vf, df);
    });
}

// out(i,j,f,g) = K(S-1-i, S-1-j, g, f): spatial point reflection plus feature
// swap. An involution; turns a lateral kernel into conv2d filter layout and
// back.
template <typename T>
Tensor<T> flip_swap_values(const Tensor<T>& k) {
    if (k.rank() != 4 || k.dim(2) != k.dim(3))
        throw std::invalid_argument("flip_swap_fg: square feature dims expected");
    const int s0 = k.dim(0), s1 = k.dim(1), f = k.dim(2);
    Tensor<T> out{k.shape()};
    for (int i = 0; i < s0; ++i)
        for (int j = 0; j < s1; ++j)
            for (int ff = 0; ff < f; ++ff)
                for (int gg = 0; gg < f; ++gg)
                    out(i, j, ff, gg) = k(s0 - 1 - i, s1 - 1 - j, gg, ff);
    return out;
}

template <typename T>
Var<T> flip_swap_fg(Tape<T>& t, Var<T> kern) {
    Tensor<T> out = flip_swap_values(t.value(kern));
    return t.push("flip_swap_fg", std::move(out), {kern}, [kern](Tape<T>& t, Var<T> self) {
        t.accum(kern, flip_swap_values(t.grad(self)));
    });
}

}  // namespace kercnn
