#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "eegdg/common.hpp"
#include "eegdg/gemm.hpp"
#include "eegdg/tensor.hpp"

namespace eegdg {
namespace ops {

// Debug hook: EEGDG_CORRUPT_BACKWARD=<op name> perturbs that op's backward
// rule so the gradient-check battery can prove it catches broken rules.
// Re-read on every use so tests can toggle it in-process.
inline std::string corrupt_backward_op() {
    const char* e = std::getenv("EEGDG_CORRUPT_BACKWARD");
    return e ? std::string(e) : std::string();
}

template <typename T>
void maybe_corrupt(const char* op, std::vector<T>& g) {
    if (g.empty()) return;
    const std::string hook = corrupt_backward_op();
    if (!hook.empty() && hook == op) {
        g[0] = g[0] * T(1.05) + T(1e-3);
    }
}

namespace detail {

template <typename T>
std::vector<T>& col_scratch() {
    thread_local std::vector<T> buf;
    return buf;
}

inline std::vector<int> tape_inputs(std::initializer_list<int> nodes) {
    std::vector<int> v;
    for (int n : nodes) {
        if (n >= 0) v.push_back(n);
    }
    return v;
}

template <typename T>
void axpy(std::vector<T>& dst, const T* src, std::size_t n, T a = T(1)) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / reduction primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add: shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (long i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];

    int an = tape ? tape->node_of(a) : -1;
    int bn = tape ? tape->node_of(b) : -1;
    if (tape && (an >= 0 || bn >= 0)) {
        int on = static_cast<int>(tape->num_nodes());
        tape->push_node(out.size(), detail::tape_inputs({an, bn}),
                        [an, bn, on](Tape<T>& tp) {
                            const auto& go = tp.grad_buf(on);
                            if (an >= 0)
                                detail::axpy(tp.grad_buf(an), go.data(), go.size());
                            if (bn >= 0)
                                detail::axpy(tp.grad_buf(bn), go.data(), go.size());
                        });
        tape->tag(out, on);
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul: shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (long i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];

    int an = tape ? tape->node_of(a) : -1;
    int bn = tape ? tape->node_of(b) : -1;
    if (tape && (an >= 0 || bn >= 0)) {
        int on = static_cast<int>(tape->num_nodes());
        auto sa = a.storage();
        auto sb = b.storage();
        tape->push_node(out.size(), detail::tape_inputs({an, bn}),
                        [an, bn, on, sa, sb](Tape<T>& tp) {
                            const auto& go = tp.grad_buf(on);
                            if (an >= 0) {
                                auto& ga = tp.grad_buf(an);
                                for (std::size_t i = 0; i < go.size(); ++i)
                                    ga[i] += go[i] * (*sb)[i];
                            }
                            if (bn >= 0) {
                                auto& gb = tp.grad_buf(bn);
                                for (std::size_t i = 0; i < go.size(); ++i)
                                    gb[i] += go[i] * (*sa)[i];
                            }
                        });
        tape->tag(out, on);
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, double c) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    const T cc = static_cast<T>(c);
    for (long i = 0; i < out.size(); ++i) po[i] = cc * pa[i];

    int an = tape ? tape->node_of(a) : -1;
    if (an >= 0) {
        int on = static_cast<int>(tape->num_nodes());
        tape->push_node(out.size(), {an}, [an, on, cc](Tape<T>& tp) {
            const auto& go = tp.grad_buf(on);
            detail::axpy(tp.grad_buf(an), go.data(), go.size(), cc);
        });
        tape->tag(out, on);
    }
    return out;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& a) {
    T acc = 0;
    const T* pa = a.data();
    for (long i = 0; i < a.size(); ++i) acc += pa[i];
    Tensor<T> out({1}, {acc});

    int an = tape ? tape->node_of(a) : -1;
    if (an >= 0) {
        int on = static_cast<int>(tape->num_nodes());
        long n = a.size();
        tape->push_node(1, {an}, [an, on, n](Tape<T>& tp) {
            T g = tp.grad_buf(on)[0];
            auto& ga = tp.grad_buf(an);
            for (long i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g;
        });
        tape->tag(out, on);
    }
    return out;
}

// Identity forward; backward multiplies the gradient by -lambda.
template <typename T>
Tensor<T> gradient_reverse(Tape<T>* tape, const Tensor<T>& a, double lambda) {
    if (lambda < 0) {
        throw std::invalid_argument(
            "gradient_reverse: lambda must be >= 0, got " +
            std::to_string(lambda));
    }
    Tensor<T> out = a.reshaped(a.shape());  // shares storage
    out.node = -1;
    out.tape_id = -1;
    int an = tape ? tape->node_of(a) : -1;
    if (an >= 0) {
        int on = static_cast<int>(tape->num_nodes());
        const T neg = static_cast<T>(-lambda);
        tape->push_node(out.size(), {an}, [an, on, neg](Tape<T>& tp) {
            const auto& go = tp.grad_buf(on);
            detail::axpy(tp.grad_buf(an), go.data(), go.size(), neg);
        });
        tape->tag(out, on);
    }
    return out;
}

template <typename T>
Tensor<T> elu(Tape<T>* tape, const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    for (long i = 0; i < out.size(); ++i) {
        T x = pa[i];
        if constexpr (std::is_same_v<T, float>) {
            po[i] = x > 0.f ? x : std::expm1f(x);
        } else {
            po[i] = x > T(0) ? x : std::expm1(x);
        }
    }
    int an = tape ? tape->node_of(a) : -1;
    if (an >= 0) {
        int on = static_cast<int>(tape->num_nodes());
        auto so = out.storage();  // elu(x) > 0 iff x > 0; slope below is out+1
        tape->push_node(out.size(), {an}, [an, on, so](Tape<T>& tp) {
            const auto& go = tp.grad_buf(on);
            auto& ga = tp.grad_buf(an);
            const T* o = so->data();
            for (std::size_t i = 0; i < go.size(); ++i) {
                ga[i] += go[i] * (o[i] > T(0) ? T(1) : o[i] + T(1));
            }
        });
        tape->tag(out, on);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear layer: x[B,D] * w[O,D]^T + b[O]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& bias) {
    if (x.shape().size() != 2 || w.shape().size() != 2) {
        throw std::invalid_argument("linear: expected x[B,D], w[O,D], got " +
                                    shape_str(x.shape()) + " and " +
                                    shape_str(w.shape()));
    }
    const int B = x.dim(0), D = x.dim(1), O = w.dim(0);
    if (w.dim(1) != D) {
        throw std::invalid_argument(
            "linear: input width " + std::to_string(D) +
            " does not match weight width " + std::to_string(w.dim(1)));
    }
    const bool has_bias = bias.defined();
    if (has_bias && (bias.shape().size() != 1 || bias.dim(0) != O)) {
        throw std::invalid_argument("linear: bias shape " +
                                    shape_str(bias.shape()) + " != [" +
                                    std::to_string(O) + "]");
    }

    Tensor<T> out({B, O});
    gemm(false, true, B, O, D, T(1), x.data(), D, w.data(), D, T(0),
         out.data(), O);
    if (has_bias) {
        T* po = out.data();
        const T* pb = bias.data();
        for (int i = 0; i < B; ++i)
            for (int o = 0; o < O; ++o) po[static_cast<long>(i) * O + o] += pb[o];
    }

    int xn = tape ? tape->node_of(x) : -1;
    int wn = tape ? tape->node_of(w) : -1;
    int bnn = (tape && has_bias) ? tape->node_of(bias) : -1;
    if (tape && (xn >= 0 || wn >= 0 || bnn >= 0)) {
        int on = static_cast<int>(tape->num_nodes());
        auto sx = x.storage();
        auto sw = w.storage();
        tape->push_node(
            out.size(), detail::tape_inputs({xn, wn, bnn}),
            [xn, wn, bnn, on, B, D, O, sx, sw](Tape<T>& tp) {
                const auto& go = tp.grad_buf(on);
                if (xn >= 0) {
                    auto& gx = tp.grad_buf(xn);
                    gemm(false, false, B, D, O, T(1), go.data(), O, sw->data(),
                         D, T(1), gx.data(), D);
                }
                if (wn >= 0) {
                    auto& gw = tp.grad_buf(wn);
                    gemm(true, false, O, D, B, T(1), go.data(), O, sx->data(),
                         D, T(1), gw.data(), D);
                }
                if (bnn >= 0) {
                    auto& gb = tp.grad_buf(bnn);
                    for (int i = 0; i < B; ++i)
                        for (int o = 0; o < O; ++o)
                            gb[static_cast<std::size_t>(o)] +=
                                go[static_cast<std::size_t>(i) * O + o];
                }
            });
        tape->tag(out, on);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

inline int conv_out_len(int in, int k, int stride, int pad, const char* op) {
    if (stride < 1) {
        throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
    }
    if (pad < 0) {
        throw std::invalid_argument(std::string(op) + ": padding must be >= 0");
    }
    if (k > in + 2 * pad) {
        throw std::invalid_argument(
            std::string(op) + ": kernel " + std::to_string(k) +
            " exceeds padded input " + std::to_string(in + 2 * pad));
    }
    return (in + 2 * pad - k) / stride + 1;
}

// col[(ci*kh + r)*kw + s][ho*wo_n + wo] = x[ci][ho*sh + r - ph][wo*sw + s - pw]
template <typename T>
void im2col2d(const T* x, int ci_n, int h, int w, int kh, int kw, int sh,
              int sw, int ph, int pw, int ho_n, int wo_n, T* col) {
    for (int ci = 0; ci < ci_n; ++ci) {
        const T* xc = x + static_cast<long>(ci) * h * w;
        for (int r = 0; r < kh; ++r) {
            for (int s = 0; s < kw; ++s) {
                T* crow = col + (static_cast<long>(ci) * kh * kw +
                                 static_cast<long>(r) * kw + s) *
                                    ho_n * wo_n;
                for (int ho = 0; ho < ho_n; ++ho) {
                    const int hi = ho * sh + r - ph;
                    T* cpos = crow + static_cast<long>(ho) * wo_n;
                    if (hi < 0 || hi >= h) {
                        std::fill(cpos, cpos + wo_n, T(0));
                        continue;
                    }
                    const T* xrow = xc + static_cast<long>(hi) * w;
                    if (sw == 1) {
                        const int base = s - pw;
                        const int wo0 = std::min(wo_n, std::max(0, -base));
                        const int wo1 = std::max(wo0, std::min(wo_n, w - base));
                        std::fill(cpos, cpos + wo0, T(0));
                        for (int wo = wo0; wo < wo1; ++wo)
                            cpos[wo] = xrow[wo + base];
                        std::fill(cpos + wo1, cpos + wo_n, T(0));
                    } else {
                        for (int wo = 0; wo < wo_n; ++wo) {
                            const int wi = wo * sw + s - pw;
                            cpos[wo] = (wi >= 0 && wi < w) ? xrow[wi] : T(0);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im2d(const T* col, int ci_n, int h, int w, int kh, int kw, int sh,
              int sw, int ph, int pw, int ho_n, int wo_n, T* gx) {
    for (int ci = 0; ci < ci_n; ++ci) {
        T* xc = gx + static_cast<long>(ci) * h * w;
        for (int r = 0; r < kh; ++r) {
            for (int s = 0; s < kw; ++s) {
                const T* crow = col + (static_cast<long>(ci) * kh * kw +
                                       static_cast<long>(r) * kw + s) *
                                          ho_n * wo_n;
                for (int ho = 0; ho < ho_n; ++ho) {
                    const int hi = ho * sh + r - ph;
                    if (hi < 0 || hi >= h) continue;
                    const T* cpos = crow + static_cast<long>(ho) * wo_n;
                    T* xrow = xc + static_cast<long>(hi) * w;
                    if (sw == 1) {
                        const int base = s - pw;
                        int wo0 = std::max(0, -base);
                        int wo1 = std::min(wo_n, w - base);
                        for (int wo = wo0; wo < wo1; ++wo)
                            xrow[wo + base] += cpos[wo];
                    } else {
                        for (int wo = 0; wo < wo_n; ++wo) {
                            const int wi = wo * sw + s - pw;
                            if (wi >= 0 && wi < w) xrow[wi] += cpos[wo];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 int stride_h, int stride_w, int pad_h, int pad_w) {
    if (x.shape().size() != 4 || w.shape().size() != 4) {
        throw std::invalid_argument(
            "conv2d: expected x[B,C,H,W], w[Co,Ci,Kh,Kw], got " +
            shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
    if (w.dim(1) != Ci) {
        throw std::invalid_argument(
            "conv2d: input has " + std::to_string(Ci) +
            " channels but weight expects C_in=" + std::to_string(w.dim(1)));
    }
    const int Ho = detail::conv_out_len(H, Kh, stride_h, pad_h, "conv2d");
    const int Wo = detail::conv_out_len(W, Kw, stride_w, pad_w, "conv2d");

    Tensor<T> out({B, Co, Ho, Wo});
    const long ck = static_cast<long>(Ci) * Kh * Kw;
    const long hw = static_cast<long>(Ho) * Wo;
    auto& col = detail::col_scratch<T>();
    col.resize(static_cast<std::size_t>(ck * hw));
    for (int b = 0; b < B; ++b) {
        detail::im2col2d(x.data() + static_cast<long>(b) * Ci * H * W, Ci, H, W,
                         Kh, Kw, stride_h, stride_w, pad_h, pad_w, Ho, Wo,
                         col.data());
        gemm(false, false, Co, static_cast<int>(hw), static_cast<int>(ck), T(1),
             w.data(), static_cast<int>(ck), col.data(), static_cast<int>(hw),
             T(0), out.data() + static_cast<long>(b) * Co * hw,
             static_cast<int>(hw));
    }

    int xn = tape ? tape->node_of(x) : -1;
    int wn = tape ? tape->node_of(w) : -1;
    if (tape && (xn >= 0 || wn >= 0)) {
        int on = static_cast<int>(tape->num_nodes());
        auto sx = x.storage();
        auto sw = w.storage();
        tape->push_node(
            out.size(), detail::tape_inputs({xn, wn}),
            [=](Tape<T>& tp) {
                const auto& go = tp.grad_buf(on);
                std::vector<T> colbuf(static_cast<std::size_t>(ck * hw));
                if (wn >= 0) {
                    auto& gw = tp.grad_buf(wn);
                    for (int b = 0; b < B; ++b) {
                        detail::im2col2d(sx->data() + static_cast<long>(b) * Ci * H * W,
                                         Ci, H, W, Kh, Kw, stride_h, stride_w,
                                         pad_h, pad_w, Ho, Wo, colbuf.data());
                        gemm(false, true, Co, static_cast<int>(ck),
                             static_cast<int>(hw), T(1),
                             go.data() + static_cast<long>(b) * Co * hw,
                             static_cast<int>(hw), colbuf.data(),
                             static_cast<int>(hw), T(1), gw.data(),
                             static_cast<int>(ck));
                    }
                    maybe_corrupt("conv2d", gw);
                }
                if (xn >= 0) {
                    auto& gx = tp.grad_buf(xn);
                    for (int b = 0; b < B; ++b) {
                        gemm(true, false, static_cast<int>(ck),
                             static_cast<int>(hw), Co, T(1), sw->data(),
                             static_cast<int>(ck),
                             go.data() + static_cast<long>(b) * Co * hw,
                             static_cast<int>(hw), T(0), colbuf.data(),
                             static_cast<int>(hw));
                        detail::col2im2d(colbuf.data(), Ci, H, W, Kh, Kw,
                                         stride_h, stride_w, pad_h, pad_w, Ho,
                                         Wo, gx.data() + static_cast<long>(b) * Ci * H * W);
                    }
                    maybe_corrupt("conv2d", gx);
                }
            });
        tape->tag(out, on);
    }
    return out;
}

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 int stride = 1, int pad_h = 0, int pad_w = 0) {
    return conv2d(tape, x, w, stride, stride, pad_h, pad_w);
}

template <typename T>
Tensor<T> conv1d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 int stride = 1, int pad = 0) {
    if (x.shape().size() != 3 || w.shape().size() != 3) {
        throw std::invalid_argument(
            "conv1d: expected x[B,C,L], w[Co,Ci,K], got " +
            shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    if (w.dim(1) != x.dim(1)) {
        throw std::invalid_argument(
            "conv1d: input has " + std::to_string(x.dim(1)) +
            " channels but weight expects C_in=" + std::to_string(w.dim(1)));
    }
    // 1-D convolution is the H==1 special case of conv2d.
    Tensor<T> x4 = x.reshaped({x.dim(0), x.dim(1), 1, x.dim(2)});
    Tensor<T> w4 = w.reshaped({w.dim(0), w.dim(1), 1, w.dim(2)});
    Tensor<T> out4 = conv2d(tape, x4, w4, 1, stride, 0, pad);
    return out4.reshaped({out4.dim(0), out4.dim(1), out4.dim(3)});
}

// Depthwise 2-D convolution: one group of `mult` filters per input channel.
// w[Ci*mult, 1, Kh, Kw]; output channel ci*mult+m convolves input channel ci.
template <typename T>
Tensor<T> depthwise_conv2d(Tape<T>* tape, const Tensor<T>& x,
                           const Tensor<T>& w, int mult, int stride_h = 1,
                           int stride_w = 1, int pad_h = 0, int pad_w = 0) {
    if (mult < 1) {
        throw std::invalid_argument(
            "depthwise_conv2d: multiplier must be >= 1, got " +
            std::to_string(mult));
    }
    if (x.shape().size() != 4 || w.shape().size() != 4 || w.dim(1) != 1) {
        throw std::invalid_argument(
            "depthwise_conv2d: expected x[B,C,H,W], w[C*mult,1,Kh,Kw], got " +
            shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Kh = w.dim(2), Kw = w.dim(3);
    if (w.dim(0) != Ci * mult) {
        throw std::invalid_argument(
            "depthwise_conv2d: weight has " + std::to_string(w.dim(0)) +
            " filters, expected C_in*mult = " + std::to_string(Ci * mult));
    }
    const int Ho = detail::conv_out_len(H, Kh, stride_h, pad_h, "depthwise_conv2d");
    const int Wo = detail::conv_out_len(W, Kw, stride_w, pad_w, "depthwise_conv2d");
    const int Cout = Ci * mult;

    Tensor<T> out({B, Cout, Ho, Wo});
    T* po = out.data();
    const T* px = x.data();
    const T* pw = w.data();
    for (int b = 0; b < B; ++b) {
        for (int co = 0; co < Cout; ++co) {
            const int ci = co / mult;
            const T* xc = px + (static_cast<long>(b) * Ci + ci) * H * W;
            const T* wk = pw + static_cast<long>(co) * Kh * Kw;
            T* oc = po + (static_cast<long>(b) * Cout + co) * Ho * Wo;
            for (int ho = 0; ho < Ho; ++ho) {
                T* orow = oc + static_cast<long>(ho) * Wo;
                std::fill(orow, orow + Wo, T(0));
                for (int r = 0; r < Kh; ++r) {
                    const int hi = ho * stride_h + r - pad_h;
                    if (hi < 0 || hi >= H) continue;
                    const T* xrow = xc + static_cast<long>(hi) * W;
                    for (int s = 0; s < Kw; ++s) {
                        const T wv = wk[r * Kw + s];
                        if (stride_w == 1) {
                            const int base = s - pad_w;
                            const int wo0 = std::max(0, -base);
                            const int wo1 = std::min(Wo, W - base);
                            for (int wo = wo0; wo < wo1; ++wo)
                                orow[wo] += wv * xrow[wo + base];
                        } else {
                            for (int wo = 0; wo < Wo; ++wo) {
                                const int wi = wo * stride_w + s - pad_w;
                                if (wi >= 0 && wi < W) orow[wo] += wv * xrow[wi];
                            }
                        }
                    }
                }
            }
        }
    }

    int xn = tape ? tape->node_of(x) : -1;
    int wn = tape ? tape->node_of(w) : -1;
    if (tape && (xn >= 0 || wn >= 0)) {
        int on = static_cast<int>(tape->num_nodes());
        auto sx = x.storage();
        auto sw = w.storage();
        tape->push_node(
            out.size(), detail::tape_inputs({xn, wn}),
            [=](Tape<T>& tp) {
                const auto& go = tp.grad_buf(on);
                if (wn >= 0) {
                    auto& gw = tp.grad_buf(wn);
                    for (int co = 0; co < Cout; ++co) {
                        const int ci = co / mult;
                        for (int r = 0; r < Kh; ++r)
                            for (int s = 0; s < Kw; ++s) {
                                T acc = 0;
                                for (int b = 0; b < B; ++b) {
                                    const T* xc = sx->data() +
                                                  (static_cast<long>(b) * Ci + ci) * H * W;
                                    const T* gc = go.data() +
                                                  (static_cast<long>(b) * Cout + co) * Ho * Wo;
                                    for (int ho = 0; ho < Ho; ++ho) {
                                        const int hi = ho * stride_h + r - pad_h;
                                        if (hi < 0 || hi >= H) continue;
                                        const T* xrow = xc + static_cast<long>(hi) * W;
                                        const T* grow = gc + static_cast<long>(ho) * Wo;
                                        for (int wo = 0; wo < Wo; ++wo) {
                                            const int wi = wo * stride_w + s - pad_w;
                                            if (wi >= 0 && wi < W)
                                                acc += grow[wo] * xrow[wi];
                                        }
                                    }
                                }
                                gw[static_cast<std::size_t>(co) * Kh * Kw +
                                   static_cast<std::size_t>(r) * Kw + s] += acc;
                            }
                    }
                    maybe_corrupt("depthwise_conv2d", gw);
                }
                if (xn >= 0) {
                    auto& gx = tp.grad_buf(xn);
                    for (int b = 0; b < B; ++b)
                        for (int co = 0; co < Cout; ++co) {
                            const int ci = co / mult;
                            T* gxc = gx.data() +
                                     (static_cast<std::size_t>(b) * Ci + ci) * H * W;
                            const T* wk = sw->data() + static_cast<long>(co) * Kh * Kw;
                            const T* gc = go.data() +
                                          (static_cast<long>(b) * Cout + co) * Ho * Wo;
                            for (int ho = 0; ho < Ho; ++ho) {
                                const T* grow = gc + static_cast<long>(ho) * Wo;
                                for (int r = 0; r < Kh; ++r) {
                                    const int hi = ho * stride_h + r - pad_h;
                                    if (hi < 0 || hi >= H) continue;
                                    T* xrow = gxc + static_cast<long>(hi) * W;
                                    for (int s = 0; s < Kw; ++s) {
                                        const T wv = wk[r * Kw + s];
                                        for (int wo = 0; wo < Wo; ++wo) {
                                            const int wi = wo * stride_w + s - pad_w;
                                            if (wi >= 0 && wi < W)
                                                xrow[wi] += wv * grow[wo];
                                        }
                                    }
                                }
                            }
                        }
                    maybe_corrupt("depthwise_conv2d", gx);
                }
            });
        tape->tag(out, on);
    }
    return out;
}

// Depthwise followed by a 1x1 pointwise convolution.
template <typename T>
Tensor<T> separable_conv2d(Tape<T>* tape, const Tensor<T>& x,
                           const Tensor<T>& w_depth, const Tensor<T>& w_point,
                           int mult, int pad_h = 0, int pad_w = 0) {
    if (w_point.shape().size() != 4 || w_point.dim(2) != 1 ||
        w_point.dim(3) != 1) {
        throw std::invalid_argument(
            "separable_conv2d: pointwise weight must be [Co,C,1,1], got " +
            shape_str(w_point.shape()));
    }
    Tensor<T> mid = depthwise_conv2d(tape, x, w_depth, mult, 1, 1, pad_h, pad_w);
    return conv2d(tape, mid, w_point, 1, 1, 0, 0);
}

// ---------------------------------------------------------------------------
// Pooling (kernel == stride, floor semantics: trailing remainder dropped)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> pool2d_impl(Tape<T>* tape, const Tensor<T>& x, int kh, int kw,
                      bool is_max, const char* op) {
    if (x.shape().size() != 4) {
        throw std::invalid_argument(std::string(op) +
                                    ": expected x[B,C,H,W], got " +
                                    shape_str(x.shape()));
    }
    if (kh < 1 || kw < 1) {
        throw std::invalid_argument(std::string(op) + ": kernel must be >= 1");
    }
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (kh > H || kw > W) {
        throw std::invalid_argument(std::string(op) + ": kernel (" +
                                    std::to_string(kh) + "," +
                                    std::to_string(kw) + ") larger than input " +
                                    shape_str(x.shape()));
    }
    const int Ho = H / kh, Wo = W / kw;

    Tensor<T> out({B, C, Ho, Wo});
    auto argmax = is_max ? std::make_shared<std::vector<int>>(
                               static_cast<std::size_t>(out.size()))
                         : nullptr;
    const T* px = x.data();
    T* po = out.data();
    const long bc = static_cast<long>(B) * C;
    for (long p = 0; p < bc; ++p) {
        const T* xp = px + p * H * W;
        T* op_ = po + p * Ho * Wo;
        for (int ho = 0; ho < Ho; ++ho)
            for (int wo = 0; wo < Wo; ++wo) {
                if (is_max) {
                    T best = xp[static_cast<long>(ho) * kh * W + wo * kw];
                    int best_idx = ho * kh * W + wo * kw;
                    for (int r = 0; r < kh; ++r)
                        for (int s = 0; s < kw; ++s) {
                            const int idx = (ho * kh + r) * W + wo * kw + s;
                            if (xp[idx] > best) {
                                best = xp[idx];
                                best_idx = idx;
                            }
                        }
                    op_[static_cast<long>(ho) * Wo + wo] = best;
                    (*argmax)[static_cast<std::size_t>(p * Ho * Wo + ho * Wo + wo)] =
                        best_idx;
                } else {
                    T acc = 0;
                    for (int r = 0; r < kh; ++r)
                        for (int s = 0; s < kw; ++s)
                            acc += xp[(ho * kh + r) * W + wo * kw + s];
                    op_[static_cast<long>(ho) * Wo + wo] =
                        acc / static_cast<T>(kh * kw);
                }
            }
    }

    int xn = tape ? tape->node_of(x) : -1;
    if (xn >= 0) {
        int on = static_cast<int>(tape->num_nodes());
        const T inv = T(1) / static_cast<T>(kh * kw);
        tape->push_node(
            out.size(), {xn},
            [=](Tape<T>& tp) {
                const auto& go = tp.grad_buf(on);
                auto& gx = tp.grad_buf(xn);
                for (long p = 0; p < bc; ++p) {
                    const T* gop = go.data() + p * Ho * Wo;
                    T* gxp = gx.data() + p * H * W;
                    for (int ho = 0; ho < Ho; ++ho)
                        for (int wo = 0; wo < Wo; ++wo) {
                            const T g = gop[static_cast<long>(ho) * Wo + wo];
                            if (is_max) {
                                gxp[(*argmax)[static_cast<std::size_t>(
                                    p * Ho * Wo + ho * Wo + wo)]] += g;
                            } else {
                                for (int r = 0; r < kh; ++r)
                                    for (int s = 0; s < kw; ++s)
                                        gxp[(ho * kh + r) * W + wo * kw + s] +=
                                            g * inv;
                            }
                        }
                }
            });
        tape->tag(out, on);
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> maxpool2d(Tape<T>* tape, const Tensor<T>& x, int kh, int kw) {
    return detail::pool2d_impl(tape, x, kh, kw, true, "maxpool2d");
}

template <typename T>
Tensor<T> avgpool2d(Tape<T>* tape, const Tensor<T>& x, int kh, int kw) {
    return detail::pool2d_impl(tape, x, kh, kw, false, "avgpool2d");
}

template <typename T>
Tensor<T> maxpool1d(Tape<T>* tape, const Tensor<T>& x, int k) {
    if (x.shape().size() != 3) {
        throw std::invalid_argument("maxpool1d: expected x[B,C,L], got " +
                                    shape_str(x.shape()));
    }
    Tensor<T> x4 = x.reshaped({x.dim(0), x.dim(1), 1, x.dim(2)});
    Tensor<T> o = detail::pool2d_impl(tape, x4, 1, k, true, "maxpool1d");
    return o.reshaped({o.dim(0), o.dim(1), o.dim(3)});
}

template <typename T>
Tensor<T> avgpool1d(Tape<T>* tape, const Tensor<T>& x, int k) {
    if (x.shape().size() != 3) {
        throw std::invalid_argument("avgpool1d: expected x[B,C,L], got " +
                                    shape_str(x.shape()));
    }
    Tensor<T> x4 = x.reshaped({x.dim(0), x.dim(1), 1, x.dim(2)});
    Tensor<T> o = detail::pool2d_impl(tape, x4, 1, k, false, "avgpool1d");
    return o.reshaped({o.dim(0), o.dim(1), o.dim(3)});
}

// ---------------------------------------------------------------------------
// Batch normalization over channel axis 1 of x[B,C,...]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training,
                     double momentum = 0.1, double eps = 1e-5) {
    if (x.shape().size() < 2) {
        throw std::invalid_argument("batch_norm: expected x[B,C,...], got " +
                                    shape_str(x.shape()));
    }
    const int B = x.dim(0), C = x.dim(1);
    const long S = x.size() / (static_cast<long>(B) * C);
    if (gamma.size() != C || beta.size() != C || running_mean.size() != C ||
        running_var.size() != C) {
        throw std::invalid_argument(
            "batch_norm: parameter length must equal channel count " +
            std::to_string(C));
    }

    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();

    if (!training) {
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T m = running_mean.data()[c];
                const T invstd = T(1) / static_cast<T>(std::sqrt(
                                     static_cast<double>(running_var.data()[c]) + eps));
                const T* xr = px + (static_cast<long>(b) * C + c) * S;
                T* orr = po + (static_cast<long>(b) * C + c) * S;
                const T g = pg[c], bt = pb[c];
                for (long i = 0; i < S; ++i) orr[i] = g * (xr[i] - m) * invstd + bt;
            }
        int xn = tape ? tape->node_of(x) : -1;
        int gn = tape ? tape->node_of(gamma) : -1;
        int bn = tape ? tape->node_of(beta) : -1;
        if (tape && (xn >= 0 || gn >= 0 || bn >= 0)) {
            int on = static_cast<int>(tape->num_nodes());
            auto sx = x.storage();
            auto sg = gamma.storage();
            auto smean = running_mean.storage();
            auto svar = running_var.storage();
            tape->push_node(
                out.size(), detail::tape_inputs({xn, gn, bn}),
                [=](Tape<T>& tp) {
                    const auto& go = tp.grad_buf(on);
                    for (int c = 0; c < C; ++c) {
                        const T m = (*smean)[static_cast<std::size_t>(c)];
                        const T invstd = T(1) / static_cast<T>(std::sqrt(
                                             static_cast<double>(
                                                 (*svar)[static_cast<std::size_t>(c)]) +
                                             eps));
                        for (int b = 0; b < B; ++b) {
                            const long off = (static_cast<long>(b) * C + c) * S;
                            for (long i = 0; i < S; ++i) {
                                const T g = go[static_cast<std::size_t>(off + i)];
                                const T xh =
                                    ((*sx)[static_cast<std::size_t>(off + i)] - m) *
                                    invstd;
                                if (xn >= 0)
                                    tp.grad_buf(xn)[static_cast<std::size_t>(off + i)] +=
                                        g * (*sg)[static_cast<std::size_t>(c)] * invstd;
                                if (gn >= 0)
                                    tp.grad_buf(gn)[static_cast<std::size_t>(c)] += g * xh;
                                if (bn >= 0)
                                    tp.grad_buf(bn)[static_cast<std::size_t>(c)] += g;
                            }
                        }
                    }
                });
            tape->tag(out, on);
        }
        return out;
    }

    // Training mode: batch statistics, running buffers updated in place.
    const long n = static_cast<long>(B) * S;
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.size()));
    std::vector<T> invstd_c(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        double s1 = 0, s2 = 0;  // double accumulators, one pass
        for (int b = 0; b < B; ++b) {
            const T* xr = px + (static_cast<long>(b) * C + c) * S;
            for (long i = 0; i < S; ++i) {
                const double v = static_cast<double>(xr[i]);
                s1 += v;
                s2 += v * v;
            }
        }
        const double mean = s1 / static_cast<double>(n);
        const double var =
            std::max(0.0, s2 / static_cast<double>(n) - mean * mean);
        const double invstd = 1.0 / std::sqrt(var + eps);
        invstd_c[static_cast<std::size_t>(c)] = static_cast<T>(invstd);

        running_mean.data()[c] = static_cast<T>(
            (1.0 - momentum) * static_cast<double>(running_mean.data()[c]) +
            momentum * mean);
        running_var.data()[c] = static_cast<T>(
            (1.0 - momentum) * static_cast<double>(running_var.data()[c]) +
            momentum * var);

        const T mT = static_cast<T>(mean);
        const T isT = static_cast<T>(invstd);
        const T g = pg[c], bt = pb[c];
        for (int b = 0; b < B; ++b) {
            const long off = (static_cast<long>(b) * C + c) * S;
            const T* xr = px + off;
            T* orr = po + off;
            T* xh = xhat->data() + off;
            for (long i = 0; i < S; ++i) {
                xh[i] = (xr[i] - mT) * isT;
                orr[i] = g * xh[i] + bt;
            }
        }
    }

    int xn = tape ? tape->node_of(x) : -1;
    int gn = tape ? tape->node_of(gamma) : -1;
    int bn = tape ? tape->node_of(beta) : -1;
    if (tape && (xn >= 0 || gn >= 0 || bn >= 0)) {
        int on = static_cast<int>(tape->num_nodes());
        auto sg = gamma.storage();
        auto sinv = std::make_shared<std::vector<T>>(std::move(invstd_c));
        tape->push_node(
            out.size(), detail::tape_inputs({xn, gn, bn}),
            [=](Tape<T>& tp) {
                const auto& go = tp.grad_buf(on);
                for (int c = 0; c < C; ++c) {
                    double sum_dy = 0, sum_dy_xh = 0;
                    for (int b = 0; b < B; ++b) {
                        const long off = (static_cast<long>(b) * C + c) * S;
                        for (long i = 0; i < S; ++i) {
                            const double g = static_cast<double>(
                                go[static_cast<std::size_t>(off + i)]);
                            sum_dy += g;
                            sum_dy_xh += g * static_cast<double>(
                                                 (*xhat)[static_cast<std::size_t>(off + i)]);
                        }
                    }
                    if (gn >= 0)
                        tp.grad_buf(gn)[static_cast<std::size_t>(c)] +=
                            static_cast<T>(sum_dy_xh);
                    if (bn >= 0)
                        tp.grad_buf(bn)[static_cast<std::size_t>(c)] +=
                            static_cast<T>(sum_dy);
                    if (xn >= 0) {
                        auto& gx = tp.grad_buf(xn);
                        const double gm = static_cast<double>(
                            (*sg)[static_cast<std::size_t>(c)]);
                        const double is = static_cast<double>(
                            (*sinv)[static_cast<std::size_t>(c)]);
                        const double invn = 1.0 / static_cast<double>(n);
                        for (int b = 0; b < B; ++b) {
                            const long off = (static_cast<long>(b) * C + c) * S;
                            for (long i = 0; i < S; ++i) {
                                const double g = static_cast<double>(
                                    go[static_cast<std::size_t>(off + i)]);
                                const double xh = static_cast<double>(
                                    (*xhat)[static_cast<std::size_t>(off + i)]);
                                gx[static_cast<std::size_t>(off + i)] += static_cast<T>(
                                    gm * is * (g - invn * sum_dy - xh * invn * sum_dy_xh));
                            }
                        }
                    }
                }
            });
        tape->tag(out, on);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dropout (inverted: scales by 1/(1-p) at train time, identity in eval)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double p, bool training,
                  Rng* rng) {
    if (p < 0.0 || p >= 1.0) {
        throw std::invalid_argument("dropout: p must be in [0,1), got " +
                                    std::to_string(p));
    }
    if (!training || p == 0.0) return x;
    if (!rng) {
        throw std::invalid_argument("dropout: rng required in training mode");
    }

    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    auto factor = std::make_shared<std::vector<T>>(
        static_cast<std::size_t>(x.size()));
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (long i = 0; i < x.size(); ++i) {
        const T f = uniform01(*rng) >= p ? keep_scale : T(0);
        (*factor)[static_cast<std::size_t>(i)] = f;
        po[i] = px[i] * f;
    }

    int xn = tape ? tape->node_of(x) : -1;
    if (xn >= 0) {
        int on = static_cast<int>(tape->num_nodes());
        tape->push_node(out.size(), {xn}, [xn, on, factor](Tape<T>& tp) {
            const auto& go = tp.grad_buf(on);
            auto& gx = tp.grad_buf(xn);
            for (std::size_t i = 0; i < go.size(); ++i)
                gx[i] += go[i] * (*factor)[i];
        });
        tape->tag(out, on);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy on logits[B,C], hard or soft targets, per-sample
// weights (pass uniform_weights(B) for a plain batch mean).
// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> uniform_weights(int n) {
    return std::vector<T>(static_cast<std::size_t>(n),
                          static_cast<T>(1.0 / static_cast<double>(n)));
}

template <typename T>
void softmax_rows(const T* logits, int rows, int cols, T* probs) {
    for (int i = 0; i < rows; ++i) {
        const T* z = logits + static_cast<long>(i) * cols;
        T* p = probs + static_cast<long>(i) * cols;
        T m = z[0];
        for (int c = 1; c < cols; ++c) m = std::max(m, z[c]);
        T zsum = 0;
        for (int c = 0; c < cols; ++c) {
            p[c] = static_cast<T>(std::exp(static_cast<double>(z[c] - m)));
            zsum += p[c];
        }
        for (int c = 0; c < cols; ++c) p[c] /= zsum;
    }
}

template <typename T>
struct CeResult {
    Tensor<T> loss;              // scalar, on tape if logits were
    std::vector<T> per_sample;   // detached per-sample losses
    std::vector<T> probs;        // detached softmax rows
};

namespace detail {

// targets: B*C row-major distribution (hard labels are one-hot rows).
template <typename T>
CeResult<T> ce_impl(Tape<T>* tape, const Tensor<T>& logits,
                    std::shared_ptr<std::vector<T>> targets,
                    const std::vector<T>& weights) {
    const int B = logits.dim(0), C = logits.dim(1);
    if (static_cast<int>(weights.size()) != B) {
        throw std::invalid_argument(
            "softmax_cross_entropy: weight count " +
            std::to_string(weights.size()) + " != batch size " +
            std::to_string(B));
    }
    CeResult<T> res;
    res.per_sample.resize(static_cast<std::size_t>(B));
    res.probs.resize(static_cast<std::size_t>(B) * C);

    const T* z = logits.data();
    T acc = 0;
    for (int i = 0; i < B; ++i) {
        const T* zi = z + static_cast<long>(i) * C;
        T m = zi[0];
        for (int c = 1; c < C; ++c) m = std::max(m, zi[c]);
        double zsum = 0;
        for (int c = 0; c < C; ++c)
            zsum += std::exp(static_cast<double>(zi[c] - m));
        const T lse = m + static_cast<T>(std::log(zsum));
        for (int c = 0; c < C; ++c)
            res.probs[static_cast<std::size_t>(i) * C + c] = static_cast<T>(
                std::exp(static_cast<double>(zi[c] - m)) / zsum);
        T li = 0;
        for (int c = 0; c < C; ++c)
            li += (*targets)[static_cast<std::size_t>(i) * C + c] * (lse - zi[c]);
        res.per_sample[static_cast<std::size_t>(i)] = li;
        acc += weights[static_cast<std::size_t>(i)] * li;
    }
    res.loss = Tensor<T>({1}, {acc});

    int zn = tape ? tape->node_of(logits) : -1;
    if (zn >= 0) {
        int on = static_cast<int>(tape->num_nodes());
        auto probs = std::make_shared<std::vector<T>>(res.probs);
        auto wts = std::make_shared<std::vector<T>>(weights);
        tape->push_node(1, {zn}, [zn, on, B, C, probs, targets, wts](Tape<T>& tp) {
            const T g0 = tp.grad_buf(on)[0];
            auto& gz = tp.grad_buf(zn);
            for (int i = 0; i < B; ++i) {
                const T gw = g0 * (*wts)[static_cast<std::size_t>(i)];
                for (int c = 0; c < C; ++c) {
                    const std::size_t idx = static_cast<std::size_t>(i) * C + c;
                    gz[idx] += gw * ((*probs)[idx] - (*targets)[idx]);
                }
            }
        });
        tape->tag(res.loss, on);
    }
    return res;
}

}  // namespace detail

template <typename T>
CeResult<T> softmax_cross_entropy(Tape<T>* tape, const Tensor<T>& logits,
                                  const std::vector<int>& labels,
                                  const std::vector<T>& weights) {
    if (logits.shape().size() != 2) {
        throw std::invalid_argument(
            "softmax_cross_entropy: expected logits[B,C], got " +
            shape_str(logits.shape()));
    }
    const int B = logits.dim(0), C = logits.dim(1);
    if (static_cast<int>(labels.size()) != B) {
        throw std::invalid_argument("softmax_cross_entropy: " +
                                    std::to_string(labels.size()) +
                                    " labels for batch of " + std::to_string(B));
    }
    auto targets =
        std::make_shared<std::vector<T>>(static_cast<std::size_t>(B) * C, T(0));
    for (int i = 0; i < B; ++i) {
        if (labels[static_cast<std::size_t>(i)] < 0 ||
            labels[static_cast<std::size_t>(i)] >= C) {
            throw std::invalid_argument(
                "softmax_cross_entropy: label " +
                std::to_string(labels[static_cast<std::size_t>(i)]) +
                " out of range [0," + std::to_string(C) + ")");
        }
        (*targets)[static_cast<std::size_t>(i) * C +
                   labels[static_cast<std::size_t>(i)]] = T(1);
    }
    return detail::ce_impl(tape, logits, std::move(targets), weights);
}

template <typename T>
CeResult<T> softmax_cross_entropy(Tape<T>* tape, const Tensor<T>& logits,
                                  const std::vector<int>& labels) {
    return softmax_cross_entropy(tape, logits, labels,
                                 uniform_weights<T>(logits.dim(0)));
}

template <typename T>
CeResult<T> softmax_cross_entropy_soft(Tape<T>* tape, const Tensor<T>& logits,
                                       const std::vector<T>& soft_targets,
                                       const std::vector<T>& weights) {
    if (logits.shape().size() != 2) {
        throw std::invalid_argument(
            "softmax_cross_entropy_soft: expected logits[B,C], got " +
            shape_str(logits.shape()));
    }
    const int B = logits.dim(0), C = logits.dim(1);
    if (static_cast<long>(soft_targets.size()) != static_cast<long>(B) * C) {
        throw std::invalid_argument(
            "softmax_cross_entropy_soft: target size " +
            std::to_string(soft_targets.size()) + " != " +
            std::to_string(static_cast<long>(B) * C));
    }
    for (int i = 0; i < B; ++i) {
        double row = 0;
        for (int c = 0; c < C; ++c) {
            const T t = soft_targets[static_cast<std::size_t>(i) * C + c];
            if (t < T(0)) {
                throw std::invalid_argument(
                    "softmax_cross_entropy_soft: negative target in row " +
                    std::to_string(i));
            }
            row += static_cast<double>(t);
        }
        if (std::abs(row - 1.0) > 1e-6) {
            throw std::invalid_argument(
                "softmax_cross_entropy_soft: target row " + std::to_string(i) +
                " sums to " + std::to_string(row) + ", expected 1");
        }
    }
    auto targets = std::make_shared<std::vector<T>>(soft_targets);
    return detail::ce_impl(tape, logits, std::move(targets), weights);
}

template <typename T>
CeResult<T> softmax_cross_entropy_soft(Tape<T>* tape, const Tensor<T>& logits,
                                       const std::vector<T>& soft_targets) {
    return softmax_cross_entropy_soft(tape, logits, soft_targets,
                                      uniform_weights<T>(logits.dim(0)));
}

}  // namespace ops
}  // namespace eegdg
