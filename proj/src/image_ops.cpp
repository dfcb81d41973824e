#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "uda/autodiff.hpp"

namespace uda::ad {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Geometry of a (possibly dilated, strided) sliding window over an NCHW input.
struct Window {
    int n, c, h, w;
    int k, stride, pad, dil;
    int ho, wo;

    [[nodiscard]] int rows() const { return c * k * k; }
    [[nodiscard]] int cols() const { return n * ho * wo; }
};

Window make_window(int n, int c, int h, int w, int k, int stride, int pad, int dil) {
    Window g{n, c, h, w, k, stride, pad, dil, 0, 0};
    g.ho = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    g.wo = (w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    if (g.ho <= 0 || g.wo <= 0) throw ShapeError("convolution window larger than input");
    return g;
}

// cols[(c*k + ki)*k + kj, n*ho*wo + oh*wo + ow] = x[n, c, oh*s - p + ki*d, ow*s - p + kj*d]
template <class T>
void im2col(const T* x, const Window& g, T* cols) {
    const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
    const std::size_t ncols = static_cast<std::size_t>(g.cols());
    for (int c = 0; c < g.c; ++c) {
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                T* row = cols + (static_cast<std::size_t>(c * g.k + ki) * g.k + kj) * ncols;
                for (int n = 0; n < g.n; ++n) {
                    const T* src = x + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
                    T* dst = row + n * plane;
                    for (int oh = 0; oh < g.ho; ++oh) {
                        const int ih = oh * g.stride - g.pad + ki * g.dil;
                        T* d = dst + static_cast<std::size_t>(oh) * g.wo;
                        if (ih < 0 || ih >= g.h) {
                            std::fill(d, d + g.wo, T(0));
                            continue;
                        }
                        const T* s = src + static_cast<std::size_t>(ih) * g.w;
                        for (int ow = 0; ow < g.wo; ++ow) {
                            const int iw = ow * g.stride - g.pad + kj * g.dil;
                            d[ow] = (iw >= 0 && iw < g.w) ? s[iw] : T(0);
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates cols back into x.
template <class T>
void col2im(const T* cols, const Window& g, T* x) {
    const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
    const std::size_t ncols = static_cast<std::size_t>(g.cols());
    for (int c = 0; c < g.c; ++c) {
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                const T* row = cols + (static_cast<std::size_t>(c * g.k + ki) * g.k + kj) * ncols;
                for (int n = 0; n < g.n; ++n) {
                    T* dst = x + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
                    const T* src = row + n * plane;
                    for (int oh = 0; oh < g.ho; ++oh) {
                        const int ih = oh * g.stride - g.pad + ki * g.dil;
                        if (ih < 0 || ih >= g.h) continue;
                        T* d = dst + static_cast<std::size_t>(ih) * g.w;
                        const T* s = src + static_cast<std::size_t>(oh) * g.wo;
                        for (int ow = 0; ow < g.wo; ++ow) {
                            const int iw = ow * g.stride - g.pad + kj * g.dil;
                            if (iw >= 0 && iw < g.w) d[iw] += s[ow];
                        }
                    }
                }
            }
        }
    }
}

// NCHW <-> (C, N*H*W) channel-major matrix.
template <class T>
void nchw_to_cm(const T* x, int n, int c, std::size_t plane, T* out) {
    const std::size_t ncols = static_cast<std::size_t>(n) * plane;
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const T* s = x + (static_cast<std::size_t>(b) * c + ch) * plane;
            std::copy(s, s + plane, out + ch * ncols + b * plane);
        }
    }
}

template <class T>
void cm_to_nchw(const T* m, int n, int c, std::size_t plane, T* out, bool accumulate) {
    const std::size_t ncols = static_cast<std::size_t>(n) * plane;
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const T* s = m + ch * ncols + b * plane;
            T* d = out + (static_cast<std::size_t>(b) * c + ch) * plane;
            if (accumulate) {
                for (std::size_t i = 0; i < plane; ++i) d[i] += s[i];
            } else {
                std::copy(s, s + plane, d);
            }
        }
    }
}

void require_rank(const Shape& s, int r, const char* what) {
    if (static_cast<int>(s.size()) != r) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
    }
}

}  // namespace

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, ConvSpec spec) {
    require_rank(x.shape(), 4, "conv2d input");
    require_rank(w.shape(), 4, "conv2d weight");
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != ci || w.dim(3) != k) {
        throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    }
    const Window g = make_window(n, ci, h, wd, k, spec.stride, spec.pad, spec.dilation);
    const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;

    Buffer<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
    im2col(x.value().ptr(), g, cols.data());
    Buffer<T> out_cm(static_cast<std::size_t>(co) * g.cols());
    MatMap<T>(out_cm.data(), co, g.cols()).noalias() =
        ConstMatMap<T>(w.value().ptr(), co, g.rows()) * ConstMatMap<T>(cols.data(), g.rows(), g.cols());
    if (bias.defined()) {
        const T* b = bias.value().ptr();
        for (int c = 0; c < co; ++c) {
            T* row = out_cm.data() + static_cast<std::size_t>(c) * g.cols();
            for (int j = 0; j < g.cols(); ++j) row[j] += b[c];
        }
    }
    Tensor<T> out({n, co, g.ho, g.wo});
    cm_to_nchw(out_cm.data(), n, co, plane, out.ptr(), false);

    std::vector<Var<T>> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    if (!any_requires_grad(inputs)) return make_result<T>(std::move(out), inputs, nullptr);
    // Input patches are only needed for the weight gradient.
    if (!w.requires_grad()) cols.clear();

    return make_result<T>(std::move(out), inputs, [g, co, plane, cols = std::move(cols)](Node<T>& self) {
        Buffer<T> dout(static_cast<std::size_t>(co) * g.cols());
        nchw_to_cm(self.grad.data(), g.n, co, plane, dout.data());
        ConstMatMap<T> dmat(dout.data(), co, g.cols());
        auto& nx = *self.inputs[0];
        auto& nw = *self.inputs[1];
        if (nw.requires_grad) {
            MatMap<T>(nw.ensure_grad().data(), co, g.rows()).noalias() +=
                dmat * ConstMatMap<T>(cols.data(), g.rows(), g.cols()).transpose();
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            auto& gb = self.inputs[2]->ensure_grad();
            for (int c = 0; c < co; ++c) gb[c] += dmat.row(c).sum();
        }
        if (nx.requires_grad) {
            Buffer<T> dcols(static_cast<std::size_t>(g.rows()) * g.cols());
            MatMap<T>(dcols.data(), g.rows(), g.cols()).noalias() =
                ConstMatMap<T>(nw.value.ptr(), co, g.rows()).transpose() * dmat;
            col2im(dcols.data(), g, nx.ensure_grad().data());
        }
    });
}

template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad) {
    require_rank(x.shape(), 4, "conv_transpose2d input");
    require_rank(w.shape(), 4, "conv_transpose2d weight");
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int co = w.dim(1), k = w.dim(2);
    if (w.dim(0) != ci || w.dim(3) != k) {
        throw ShapeError("conv_transpose2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    }
    const int ho = (h - 1) * stride - 2 * pad + k;
    const int wo = (wd - 1) * stride - 2 * pad + k;
    // The output plays the role of the input of the adjoint convolution.
    const Window g = make_window(n, co, ho, wo, k, stride, pad, 1);
    if (g.ho != h || g.wo != wd) throw ShapeError("conv_transpose2d: inconsistent geometry");
    const std::size_t in_plane = static_cast<std::size_t>(h) * wd;
    const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;

    Buffer<T> x_cm(static_cast<std::size_t>(ci) * g.cols());
    nchw_to_cm(x.value().ptr(), n, ci, in_plane, x_cm.data());
    Buffer<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
    MatMap<T>(cols.data(), g.rows(), g.cols()).noalias() =
        ConstMatMap<T>(w.value().ptr(), ci, g.rows()).transpose() * ConstMatMap<T>(x_cm.data(), ci, g.cols());
    Tensor<T> out({n, co, ho, wo});
    col2im(cols.data(), g, out.ptr());
    if (bias.defined()) {
        for (int b = 0; b < n; ++b) {
            for (int c = 0; c < co; ++c) {
                T* d = out.ptr() + (static_cast<std::size_t>(b) * co + c) * out_plane;
                const T bv = bias.value()[c];
                for (std::size_t i = 0; i < out_plane; ++i) d[i] += bv;
            }
        }
    }

    std::vector<Var<T>> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    if (!any_requires_grad(inputs)) return make_result<T>(std::move(out), inputs, nullptr);
    if (!w.requires_grad()) x_cm.clear();

    return make_result<T>(
        std::move(out), inputs, [g, ci, co, in_plane, out_plane, x_cm = std::move(x_cm)](Node<T>& self) {
            Buffer<T> dcols(static_cast<std::size_t>(g.rows()) * g.cols());
            im2col(self.grad.data(), g, dcols.data());
            ConstMatMap<T> dc(dcols.data(), g.rows(), g.cols());
            auto& nx = *self.inputs[0];
            auto& nw = *self.inputs[1];
            if (nw.requires_grad) {
                MatMap<T>(nw.ensure_grad().data(), ci, g.rows()).noalias() +=
                    ConstMatMap<T>(x_cm.data(), ci, g.cols()) * dc.transpose();
            }
            if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                auto& gb = self.inputs[2]->ensure_grad();
                for (int b = 0; b < g.n; ++b) {
                    for (int c = 0; c < co; ++c) {
                        const T* s = self.grad.data() + (static_cast<std::size_t>(b) * co + c) * out_plane;
                        T acc = T(0);
                        for (std::size_t i = 0; i < out_plane; ++i) acc += s[i];
                        gb[c] += acc;
                    }
                }
            }
            if (nx.requires_grad) {
                Buffer<T> dx_cm(static_cast<std::size_t>(ci) * g.cols());
                MatMap<T>(dx_cm.data(), ci, g.cols()).noalias() = ConstMatMap<T>(nw.value.ptr(), ci, g.rows()) * dc;
                cm_to_nchw(dx_cm.data(), g.n, ci, in_plane, nx.ensure_grad().data(), true);
            }
        });
}

template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    require_rank(x.shape(), 4, "instance_norm");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c)) {
        throw ShapeError("instance_norm: affine parameters must have C entries");
    }
    Tensor<T> xhat(x.shape());
    std::vector<T> inv_std(static_cast<std::size_t>(n) * c);
    Tensor<T> out(x.shape());
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
            const T* s = x.value().ptr() + off;
            T mu = T(0);
            for (std::size_t i = 0; i < plane; ++i) mu += s[i];
            mu /= static_cast<T>(plane);
            T var = T(0);
            for (std::size_t i = 0; i < plane; ++i) var += (s[i] - mu) * (s[i] - mu);
            var /= static_cast<T>(plane);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(b) * c + ch] = is;
            const T gm = gamma.value()[ch], bt = beta.value()[ch];
            for (std::size_t i = 0; i < plane; ++i) {
                const T xh = (s[i] - mu) * is;
                xhat.data[off + i] = xh;
                out.data[off + i] = gm * xh + bt;
            }
        }
    }
    return make_result<T>(std::move(out), {x, gamma, beta},
                          [n, c, plane, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                              auto& nx = *self.inputs[0];
                              auto& ng = *self.inputs[1];
                              auto& nb = *self.inputs[2];
                              for (int b = 0; b < n; ++b) {
                                  for (int ch = 0; ch < c; ++ch) {
                                      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
                                      const T* dy = self.grad.data() + off;
                                      const T* xh = xhat.data.data() + off;
                                      T sum_dy = T(0), sum_dy_xh = T(0);
                                      for (std::size_t i = 0; i < plane; ++i) {
                                          sum_dy += dy[i];
                                          sum_dy_xh += dy[i] * xh[i];
                                      }
                                      if (ng.requires_grad) ng.ensure_grad()[ch] += sum_dy_xh;
                                      if (nb.requires_grad) nb.ensure_grad()[ch] += sum_dy;
                                      if (nx.requires_grad) {
                                          const T gm = ng.value[ch];
                                          const T is = inv_std[static_cast<std::size_t>(b) * c + ch];
                                          const T m1 = gm * sum_dy / static_cast<T>(plane);
                                          const T m2 = gm * sum_dy_xh / static_cast<T>(plane);
                                          T* dx = nx.ensure_grad().data() + off;
                                          for (std::size_t i = 0; i < plane; ++i)
                                              dx[i] += is * (gm * dy[i] - m1 - xh[i] * m2);
                                      }
                                  }
                              }
                          });
}

template <class T>
Var<T> upsample_bilinear(const Var<T>& x, int factor) {
    require_rank(x.shape(), 4, "upsample_bilinear");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h * factor, wo = w * factor;

    struct Tap {
        int i0, i1;
        T w1;
    };
    auto taps = [factor](int out_size, int in_size) {
        std::vector<Tap> t(static_cast<std::size_t>(out_size));
        for (int o = 0; o < out_size; ++o) {
            T src = (static_cast<T>(o) + T(0.5)) / static_cast<T>(factor) - T(0.5);
            src = std::clamp(src, T(0), static_cast<T>(in_size - 1));
            const int i0 = std::min(static_cast<int>(src), in_size - 1);
            const int i1 = std::min(i0 + 1, in_size - 1);
            t[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<T>(i0)};
        }
        return t;
    };
    const auto th = taps(ho, h);
    const auto tw = taps(wo, w);

    Tensor<T> out({n, c, ho, wo});
    for (int p = 0; p < n * c; ++p) {
        const T* s = x.value().ptr() + static_cast<std::size_t>(p) * h * w;
        T* d = out.ptr() + static_cast<std::size_t>(p) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
            const Tap& ty = th[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < wo; ++ox) {
                const Tap& tx = tw[static_cast<std::size_t>(ox)];
                const T top = s[ty.i0 * w + tx.i0] * (T(1) - tx.w1) + s[ty.i0 * w + tx.i1] * tx.w1;
                const T bot = s[ty.i1 * w + tx.i0] * (T(1) - tx.w1) + s[ty.i1 * w + tx.i1] * tx.w1;
                d[oy * wo + ox] = top * (T(1) - ty.w1) + bot * ty.w1;
            }
        }
    }
    return make_result<T>(std::move(out), {x}, [n, c, h, w, ho, wo, th, tw](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (int p = 0; p < n * c; ++p) {
            T* d = g.data() + static_cast<std::size_t>(p) * h * w;
            const T* s = self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
            for (int oy = 0; oy < ho; ++oy) {
                const Tap& ty = th[static_cast<std::size_t>(oy)];
                for (int ox = 0; ox < wo; ++ox) {
                    const Tap& tx = tw[static_cast<std::size_t>(ox)];
                    const T v = s[oy * wo + ox];
                    d[ty.i0 * w + tx.i0] += v * (T(1) - ty.w1) * (T(1) - tx.w1);
                    d[ty.i0 * w + tx.i1] += v * (T(1) - ty.w1) * tx.w1;
                    d[ty.i1 * w + tx.i0] += v * ty.w1 * (T(1) - tx.w1);
                    d[ty.i1 * w + tx.i1] += v * ty.w1 * tx.w1;
                }
            }
        }
    });
}

template <class T>
Var<T> softmax_channels(const Var<T>& x) {
    require_rank(x.shape(), 4, "softmax_channels");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> out(x.shape());
    for (int b = 0; b < n; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            T mx = x.value()[base + p];
            for (int ch = 1; ch < c; ++ch) mx = std::max(mx, x.value()[base + ch * plane + p]);
            T z = T(0);
            for (int ch = 0; ch < c; ++ch) {
                const T e = std::exp(x.value()[base + ch * plane + p] - mx);
                out[base + ch * plane + p] = e;
                z += e;
            }
            for (int ch = 0; ch < c; ++ch) out[base + ch * plane + p] /= z;
        }
    }
    return make_result<T>(std::move(out), {x}, [n, c, plane](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (int b = 0; b < n; ++b) {
            const std::size_t base = static_cast<std::size_t>(b) * c * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                T dot = T(0);
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t i = base + ch * plane + p;
                    dot += self.grad[i] * self.value[i];
                }
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t i = base + ch * plane + p;
                    g[i] += self.value[i] * (self.grad[i] - dot);
                }
            }
        }
    });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
    require_rank(x.shape(), 4, "global_avg_pool");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> out({n, c});
    for (int p = 0; p < n * c; ++p) {
        T s = T(0);
        const T* src = x.value().ptr() + static_cast<std::size_t>(p) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += src[i];
        out[static_cast<std::size_t>(p)] = s / static_cast<T>(plane);
    }
    return make_result<T>(std::move(out), {x}, [n, c, plane](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (int p = 0; p < n * c; ++p) {
            const T d = self.grad[static_cast<std::size_t>(p)] / static_cast<T>(plane);
            T* dst = g.data() + static_cast<std::size_t>(p) * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] += d;
        }
    });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
    require_rank(x.shape(), 2, "linear input");
    require_rank(w.shape(), 2, "linear weight");
    const int n = x.dim(0), in = x.dim(1), out_f = w.dim(0);
    if (w.dim(1) != in)
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
    Tensor<T> out({n, out_f});
    MatMap<T>(out.ptr(), n, out_f).noalias() =
        ConstMatMap<T>(x.value().ptr(), n, in) * ConstMatMap<T>(w.value().ptr(), out_f, in).transpose();
    if (bias.defined()) {
        for (int b = 0; b < n; ++b)
            for (int o = 0; o < out_f; ++o) out[static_cast<std::size_t>(b) * out_f + o] += bias.value()[o];
    }
    std::vector<Var<T>> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<T>(std::move(out), inputs, [n, in, out_f](Node<T>& self) {
        ConstMatMap<T> dy(self.grad.data(), n, out_f);
        auto& nx = *self.inputs[0];
        auto& nw = *self.inputs[1];
        if (nx.requires_grad) {
            MatMap<T>(nx.ensure_grad().data(), n, in).noalias() += dy * ConstMatMap<T>(nw.value.ptr(), out_f, in);
        }
        if (nw.requires_grad) {
            MatMap<T>(nw.ensure_grad().data(), out_f, in).noalias() +=
                dy.transpose() * ConstMatMap<T>(nx.value.ptr(), n, in);
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            auto& gb = self.inputs[2]->ensure_grad();
            for (int o = 0; o < out_f; ++o) gb[o] += dy.col(o).sum();
        }
    });
}

#define UDA_INSTANTIATE_IMAGE_OPS(T)                                                            \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, ConvSpec);           \
    template Var<T> conv_transpose2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int); \
    template Var<T> instance_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);           \
    template Var<T> upsample_bilinear<T>(const Var<T>&, int);                                   \
    template Var<T> softmax_channels<T>(const Var<T>&);                                         \
    template Var<T> global_avg_pool<T>(const Var<T>&);                                          \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);

UDA_INSTANTIATE_IMAGE_OPS(float)
UDA_INSTANTIATE_IMAGE_OPS(double)

}  // namespace uda::ad
