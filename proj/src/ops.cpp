#include "msfseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msfseg/errors.hpp"
#include "msfseg/kernels.hpp"

namespace msf::ag {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw InputError(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
}

bool wants_grad(const Node* n) { return n && n->requires_grad; }

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.value().begin(), a.value().end());
    const auto bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (auto& p : self.parents) {
            if (!wants_grad(p.get())) continue;
            kernels::axpy(1.0, self.grad.data(), p->grad_buf(), self.numel());
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    const auto av = a.value();
    const auto bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const std::size_t n = self.numel();
        if (pa.requires_grad) {
            double* g = pa.grad_buf();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            double* g = pb.grad_buf();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pa.value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    std::vector<double> out(a.value().begin(), a.value().end());
    for (double& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
        kernels::axpy(s, self.grad.data(), self.parents[0]->grad_buf(), self.numel());
    });
}

Var add_n(const std::vector<Var>& xs) {
    require(!xs.empty(), "add_n: empty input");
    std::vector<double> out(xs[0].value().begin(), xs[0].value().end());
    for (std::size_t k = 1; k < xs.size(); ++k) {
        require_same_shape(xs[0], xs[k], "add_n");
        const auto v = xs[k].value();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    }
    return make_result(xs[0].shape(), std::move(out), xs, [](Node& self) {
        for (auto& p : self.parents)
            if (wants_grad(p.get())) kernels::axpy(1.0, self.grad.data(), p->grad_buf(), self.numel());
    });
}

Var mean_n(const std::vector<Var>& xs) {
    require(!xs.empty(), "mean_n: empty input");
    return scale(add_n(xs), 1.0 / static_cast<double>(xs.size()));
}

Var prod_n(const std::vector<Var>& xs) {
    require(!xs.empty(), "prod_n: empty input");
    std::vector<double> out(xs[0].value().begin(), xs[0].value().end());
    for (std::size_t k = 1; k < xs.size(); ++k) {
        require_same_shape(xs[0], xs[k], "prod_n");
        const auto v = xs[k].value();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= v[i];
    }
    return make_result(xs[0].shape(), std::move(out), xs, [](Node& self) {
        const std::size_t n = self.parents.size();
        const std::size_t count = self.numel();
        // Prefix/suffix products keep the gradient exact when some factor is zero.
        std::vector<double> prefix(n + 1), suffix(n + 1);
        for (std::size_t i = 0; i < count; ++i) {
            prefix[0] = 1.0;
            for (std::size_t k = 0; k < n; ++k) prefix[k + 1] = prefix[k] * self.parents[k]->value[i];
            suffix[n] = 1.0;
            for (std::size_t k = n; k-- > 0;) suffix[k] = suffix[k + 1] * self.parents[k]->value[i];
            for (std::size_t k = 0; k < n; ++k) {
                Node& p = *self.parents[k];
                if (p.requires_grad) p.grad_buf()[i] += self.grad[i] * prefix[k] * suffix[k + 1];
            }
        }
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    return make_result({1}, {s}, {a}, [](Node& self) {
        Node& p = *self.parents[0];
        double* g = p.grad_buf();
        for (std::size_t i = 0; i < p.numel(); ++i) g[i] += self.grad[0];
    });
}

Var reshape(const Var& a, Shape shape) {
    require(numel_of(shape) == a.numel(), "reshape: element count mismatch");
    std::vector<double> out(a.value().begin(), a.value().end());
    return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
        kernels::axpy(1.0, self.grad.data(), self.parents[0]->grad_buf(), self.numel());
    });
}

Var relu(const Var& x) {
    std::vector<double> out(x.numel());
    kernels::relu(x.value().data(), out.data(), out.size());
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        Node& p = *self.parents[0];
        kernels::relu_backward(p.value.data(), self.grad.data(), p.grad_buf(), self.numel());
    });
}

namespace {

void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* col) {
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    for (int ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* row = col + (static_cast<std::size_t>(ch * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    double* dst = row + static_cast<std::size_t>(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::size_t>(ch) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
                    }
                }
            }
}

void col2im_add(const double* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
                double* x) {
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    for (int ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* row = col + (static_cast<std::size_t>(ch * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = x + (static_cast<std::size_t>(ch) * h + iy) * w;
                    const double* src = row + static_cast<std::size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    require(x.rank() == 3 && w.rank() == 4, "conv2d: expects x [C,H,W] and w [O,C,k,k]");
    const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int o = w.dim(0), k = w.dim(2);
    require(w.dim(1) == c && w.dim(3) == k, "conv2d: weight " + shape_str(w.shape()) +
                                                " incompatible with input " + shape_str(x.shape()));
    require(!b.defined() || (b.rank() == 1 && b.dim(0) == o), "conv2d: bias shape");
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;
    require(ho > 0 && wo > 0, "conv2d: output would be empty");

    const std::size_t kc = static_cast<std::size_t>(c) * k * k;
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    const bool direct = (k == 1 && stride == 1 && pad == 0);
    std::vector<double> col;
    if (!direct) {
        col.resize(kc * plane);
        im2col(x.value().data(), c, h, wd, k, stride, pad, ho, wo, col.data());
    }
    const double* colp = direct ? x.value().data() : col.data();

    std::vector<double> out(static_cast<std::size_t>(o) * plane, 0.0);
    if (b.defined())
        for (int oc = 0; oc < o; ++oc)
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(oc * plane), plane, b.value()[oc]);
    kernels::gemm_nn(o, plane, kc, w.value().data(), kc, colp, plane, out.data(), plane);

    return make_result(
        {o, ho, wo}, std::move(out), {x, w, b},
        [c, h, wd, o, k, stride, pad, ho, wo, kc, plane, direct, col = std::move(col)](Node& self) {
            Node& xn = *self.parents[0];
            Node& wn = *self.parents[1];
            Node* bn = self.parents[2].get();
            const double* gy = self.grad.data();
            const double* colp = direct ? xn.value.data() : col.data();
            if (wn.requires_grad) kernels::gemm_nt(o, kc, plane, gy, plane, colp, plane, wn.grad_buf(), kc);
            if (wants_grad(bn)) {
                double* gb = bn->grad_buf();
                for (int oc = 0; oc < o; ++oc) {
                    double s = 0.0;
                    const double* row = gy + oc * plane;
                    for (std::size_t i = 0; i < plane; ++i) s += row[i];
                    gb[oc] += s;
                }
            }
            if (xn.requires_grad) {
                if (direct) {
                    kernels::gemm_tn(kc, plane, o, wn.value.data(), kc, gy, plane, xn.grad_buf(), plane);
                } else {
                    std::vector<double> dcol(kc * plane, 0.0);
                    kernels::gemm_tn(kc, plane, o, wn.value.data(), kc, gy, plane, dcol.data(), plane);
                    col2im_add(dcol.data(), c, h, wd, k, stride, pad, ho, wo, xn.grad_buf());
                }
            }
        });
}

Var conv_transpose2x2(const Var& x, const Var& w, const Var& b) {
    require(x.rank() == 3 && w.rank() == 4 && w.dim(0) == x.dim(0) && w.dim(2) == 2 && w.dim(3) == 2,
            "conv_transpose2x2: expects x [C,H,W] and w [C,O,2,2]");
    const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int o = w.dim(1);
    require(!b.defined() || (b.rank() == 1 && b.dim(0) == o), "conv_transpose2x2: bias shape");
    const std::size_t plane = static_cast<std::size_t>(h) * wd;
    const std::size_t rows = static_cast<std::size_t>(o) * 4;

    // z[(o,a,b), pixel] = Σ_c w[c,(o,a,b)] x[c,pixel]
    std::vector<double> z(rows * plane, 0.0);
    kernels::gemm_tn(rows, plane, c, w.value().data(), rows, x.value().data(), plane, z.data(), plane);

    const int oh = 2 * h, ow = 2 * wd;
    std::vector<double> out(static_cast<std::size_t>(o) * oh * ow);
    for (int oc = 0; oc < o; ++oc) {
        const double bias = b.defined() ? b.value()[oc] : 0.0;
        for (int a = 0; a < 2; ++a)
            for (int bb = 0; bb < 2; ++bb) {
                const double* zr = z.data() + (static_cast<std::size_t>(oc) * 4 + a * 2 + bb) * plane;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < wd; ++j)
                        out[(static_cast<std::size_t>(oc) * oh + 2 * i + a) * ow + 2 * j + bb] =
                            zr[static_cast<std::size_t>(i) * wd + j] + bias;
            }
    }
    return make_result({o, oh, ow}, std::move(out), {x, w, b}, [c, h, wd, o, rows, plane](Node& self) {
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        Node* bn = self.parents[2].get();
        const int oh = 2 * h, ow = 2 * wd;
        std::vector<double> dz(rows * plane);
        for (int oc = 0; oc < o; ++oc)
            for (int a = 0; a < 2; ++a)
                for (int bb = 0; bb < 2; ++bb) {
                    double* zr = dz.data() + (static_cast<std::size_t>(oc) * 4 + a * 2 + bb) * plane;
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < wd; ++j)
                            zr[static_cast<std::size_t>(i) * wd + j] =
                                self.grad[(static_cast<std::size_t>(oc) * oh + 2 * i + a) * ow + 2 * j + bb];
                }
        if (wn.requires_grad) kernels::gemm_nt(c, rows, plane, xn.value.data(), plane, dz.data(), plane, wn.grad_buf(), rows);
        if (xn.requires_grad) kernels::gemm_nn(c, plane, rows, wn.value.data(), rows, dz.data(), plane, xn.grad_buf(), plane);
        if (wants_grad(bn)) {
            double* gb = bn->grad_buf();
            const std::size_t oplane = static_cast<std::size_t>(oh) * ow;
            for (int oc = 0; oc < o; ++oc) {
                double s = 0.0;
                for (std::size_t i = 0; i < oplane; ++i) s += self.grad[oc * oplane + i];
                gb[oc] += s;
            }
        }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    require(x.rank() == 3, "group_norm: expects [C,H,W]");
    const int c = x.dim(0);
    require(groups >= 1 && c % groups == 0, "group_norm: channels not divisible by groups");
    require(gamma.numel() == static_cast<std::size_t>(c) && beta.numel() == static_cast<std::size_t>(c),
            "group_norm: affine size");
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    const int per = c / groups;
    const std::size_t gsize = plane * per;
    const auto xv = x.value();
    std::vector<double> xhat(x.numel()), inv_std(groups), out(x.numel());
    for (int g = 0; g < groups; ++g) {
        const std::size_t off = g * gsize;
        double mean = 0.0;
        for (std::size_t i = 0; i < gsize; ++i) mean += xv[off + i];
        mean /= static_cast<double>(gsize);
        double var = 0.0;
        for (std::size_t i = 0; i < gsize; ++i) {
            const double d = xv[off + i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(gsize);
        inv_std[g] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < gsize; ++i) xhat[off + i] = (xv[off + i] - mean) * inv_std[g];
    }
    for (int ch = 0; ch < c; ++ch) {
        const double ga = gamma.value()[ch], be = beta.value()[ch];
        for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] = ga * xhat[ch * plane + i] + be;
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta},
                       [c, groups, per, plane, gsize, xhat = std::move(xhat),
                        inv_std = std::move(inv_std)](Node& self) {
                           Node& xn = *self.parents[0];
                           Node& gn = *self.parents[1];
                           Node& bn = *self.parents[2];
                           const double* gy = self.grad.data();
                           if (gn.requires_grad || bn.requires_grad) {
                               for (int ch = 0; ch < c; ++ch) {
                                   double sg = 0.0, sb = 0.0;
                                   for (std::size_t i = 0; i < plane; ++i) {
                                       sg += gy[ch * plane + i] * xhat[ch * plane + i];
                                       sb += gy[ch * plane + i];
                                   }
                                   if (gn.requires_grad) gn.grad_buf()[ch] += sg;
                                   if (bn.requires_grad) bn.grad_buf()[ch] += sb;
                               }
                           }
                           if (!xn.requires_grad) return;
                           double* gx = xn.grad_buf();
                           std::vector<double> dxhat(gsize);
                           for (int g = 0; g < groups; ++g) {
                               const std::size_t off = g * gsize;
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t i = 0; i < gsize; ++i) {
                                   const int ch = g * per + static_cast<int>(i / plane);
                                   dxhat[i] = gy[off + i] * gn.value[ch];
                                   s1 += dxhat[i];
                                   s2 += dxhat[i] * xhat[off + i];
                               }
                               const double inv_n = 1.0 / static_cast<double>(gsize);
                               for (std::size_t i = 0; i < gsize; ++i)
                                   gx[off + i] += inv_std[g] * (dxhat[i] - inv_n * s1 - xhat[off + i] * inv_n * s2);
                           }
                       });
}

Var avg_pool(const Var& x, int k) {
    require(x.rank() == 3 && k >= 1 && x.dim(1) % k == 0 && x.dim(2) % k == 0,
            "avg_pool: spatial size " + shape_str(x.shape()) + " not divisible by " + std::to_string(k));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int oh = h / k, ow = w / k;
    const double norm = 1.0 / (k * k);
    const auto xv = x.value();
    std::vector<double> out(static_cast<std::size_t>(c) * oh * ow, 0.0);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                out[(static_cast<std::size_t>(ch) * oh + y / k) * ow + xx / k] +=
                    xv[(static_cast<std::size_t>(ch) * h + y) * w + xx] * norm;
    return make_result({c, oh, ow}, std::move(out), {x}, [c, h, w, k, oh, ow, norm](Node& self) {
        double* gx = self.parents[0]->grad_buf();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    gx[(static_cast<std::size_t>(ch) * h + y) * w + xx] +=
                        self.grad[(static_cast<std::size_t>(ch) * oh + y / k) * ow + xx / k] * norm;
    });
}

namespace {

struct Tap {
    int i0, i1;
    double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int in, int out) {
    std::vector<Tap> taps(out);
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - i0};
    }
    return taps;
}

}  // namespace

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
    require(x.rank() == 3 && out_h > 0 && out_w > 0, "upsample_bilinear: bad arguments");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto ty = bilinear_taps(h, out_h);
    auto tx = bilinear_taps(w, out_w);
    const auto xv = x.value();
    std::vector<double> out(static_cast<std::size_t>(c) * out_h * out_w);
    for (int ch = 0; ch < c; ++ch) {
        const double* src = xv.data() + static_cast<std::size_t>(ch) * h * w;
        for (int oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[oy];
            for (int ox = 0; ox < out_w; ++ox) {
                const Tap& b = tx[ox];
                const double top = src[a.i0 * w + b.i0] * (1 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
                const double bot = src[a.i1 * w + b.i0] * (1 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
                out[(static_cast<std::size_t>(ch) * out_h + oy) * out_w + ox] = top * (1 - a.w1) + bot * a.w1;
            }
        }
    }
    return make_result({c, out_h, out_w}, std::move(out), {x},
                       [c, h, w, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](Node& self) {
                           double* gx = self.parents[0]->grad_buf();
                           for (int ch = 0; ch < c; ++ch) {
                               double* dst = gx + static_cast<std::size_t>(ch) * h * w;
                               for (int oy = 0; oy < out_h; ++oy) {
                                   const Tap& a = ty[oy];
                                   for (int ox = 0; ox < out_w; ++ox) {
                                       const Tap& b = tx[ox];
                                       const double g = self.grad[(static_cast<std::size_t>(ch) * out_h + oy) * out_w + ox];
                                       dst[a.i0 * w + b.i0] += g * (1 - a.w1) * (1 - b.w1);
                                       dst[a.i0 * w + b.i1] += g * (1 - a.w1) * b.w1;
                                       dst[a.i1 * w + b.i0] += g * a.w1 * (1 - b.w1);
                                       dst[a.i1 * w + b.i1] += g * a.w1 * b.w1;
                                   }
                               }
                           }
                       });
}

Var upsample_nearest(const Var& x, int factor) {
    require(x.rank() == 3 && factor >= 1, "upsample_nearest: bad arguments");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int oh = h * factor, ow = w * factor;
    const auto xv = x.value();
    std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                out[(static_cast<std::size_t>(ch) * oh + y) * ow + xx] =
                    xv[(static_cast<std::size_t>(ch) * h + y / factor) * w + xx / factor];
    return make_result({c, oh, ow}, std::move(out), {x}, [c, h, w, factor, oh, ow](Node& self) {
        double* gx = self.parents[0]->grad_buf();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx)
                    gx[(static_cast<std::size_t>(ch) * h + y / factor) * w + xx / factor] +=
                        self.grad[(static_cast<std::size_t>(ch) * oh + y) * ow + xx];
    });
}

Var concat_channels(const std::vector<Var>& xs) {
    require(!xs.empty(), "concat_channels: empty input");
    const int h = xs[0].dim(1), w = xs[0].dim(2);
    int total = 0;
    for (const Var& v : xs) {
        require(v.rank() == 3 && v.dim(1) == h && v.dim(2) == w, "concat_channels: spatial mismatch");
        total += v.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total) * h * w);
    for (const Var& v : xs) out.insert(out.end(), v.value().begin(), v.value().end());
    return make_result({total, h, w}, std::move(out), xs, [](Node& self) {
        std::size_t off = 0;
        for (auto& p : self.parents) {
            if (p->requires_grad) kernels::axpy(1.0, self.grad.data() + off, p->grad_buf(), p->numel());
            off += p->numel();
        }
    });
}

Var channel_softmax(const Var& x) {
    require(x.rank() == 3, "channel_softmax: expects [C,H,W]");
    const int c = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    const auto xv = x.value();
    std::vector<double> out(x.numel());
    for (std::size_t p = 0; p < plane; ++p) {
        double mx = xv[p];
        for (int ch = 1; ch < c; ++ch) mx = std::max(mx, xv[ch * plane + p]);
        double z = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            out[ch * plane + p] = std::exp(xv[ch * plane + p] - mx);
            z += out[ch * plane + p];
        }
        for (int ch = 0; ch < c; ++ch) out[ch * plane + p] /= z;
    }
    return make_result(x.shape(), std::move(out), {x}, [c, plane](Node& self) {
        double* gx = self.parents[0]->grad_buf();
        for (std::size_t p = 0; p < plane; ++p) {
            double s = 0.0;
            for (int ch = 0; ch < c; ++ch) s += self.grad[ch * plane + p] * self.value[ch * plane + p];
            for (int ch = 0; ch < c; ++ch)
                gx[ch * plane + p] += self.value[ch * plane + p] * (self.grad[ch * plane + p] - s);
        }
    });
}

Var global_avg_pool(const Var& x) {
    require(x.rank() == 3, "global_avg_pool: expects [C,H,W]");
    const int c = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    std::vector<double> out(c, 0.0);
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += x.value()[ch * plane + i];
        out[ch] = s / static_cast<double>(plane);
    }
    return make_result({c}, std::move(out), {x}, [c, plane](Node& self) {
        double* gx = self.parents[0]->grad_buf();
        for (int ch = 0; ch < c; ++ch) {
            const double g = self.grad[ch] / static_cast<double>(plane);
            for (std::size_t i = 0; i < plane; ++i) gx[ch * plane + i] += g;
        }
    });
}

Var softmax(const Var& v) {
    require(v.rank() == 1 && v.numel() > 0, "softmax: expects a non-empty vector");
    const auto xv = v.value();
    const double mx = *std::max_element(xv.begin(), xv.end());
    std::vector<double> out(xv.size());
    double z = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) z += (out[i] = std::exp(xv[i] - mx));
    for (double& o : out) o /= z;
    return make_result(v.shape(), std::move(out), {v}, [](Node& self) {
        double s = 0.0;
        for (std::size_t i = 0; i < self.numel(); ++i) s += self.grad[i] * self.value[i];
        double* gx = self.parents[0]->grad_buf();
        for (std::size_t i = 0; i < self.numel(); ++i) gx[i] += self.value[i] * (self.grad[i] - s);
    });
}

Var channel_scale(const Var& x, const Var& w) {
    require(x.rank() == 3 && w.rank() == 1 && w.dim(0) == x.dim(0), "channel_scale: shape mismatch");
    const int c = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    std::vector<double> out(x.numel());
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] = x.value()[ch * plane + i] * w.value()[ch];
    return make_result(x.shape(), std::move(out), {x, w}, [c, plane](Node& self) {
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        for (int ch = 0; ch < c; ++ch) {
            const double* g = self.grad.data() + ch * plane;
            if (xn.requires_grad) kernels::axpy(wn.value[ch], g, xn.grad_buf() + ch * plane, plane);
            if (wn.requires_grad) wn.grad_buf()[ch] += kernels::dot(g, xn.value.data() + ch * plane, plane);
        }
    });
}

Var to_tokens(const Var& x) {
    require(x.rank() == 3, "to_tokens: expects [C,H,W]");
    const int c = x.dim(0);
    const int plane = x.dim(1) * x.dim(2);
    std::vector<double> out(x.numel());
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < plane; ++p)
            out[static_cast<std::size_t>(p) * c + ch] = x.value()[static_cast<std::size_t>(ch) * plane + p];
    return make_result({plane, c}, std::move(out), {x}, [c, plane](Node& self) {
        double* gx = self.parents[0]->grad_buf();
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < plane; ++p)
                gx[static_cast<std::size_t>(ch) * plane + p] += self.grad[static_cast<std::size_t>(p) * c + ch];
    });
}

Var from_tokens(const Var& t, int h, int w) {
    require(t.rank() == 2 && t.dim(0) == h * w, "from_tokens: row count does not match h·w");
    const int c = t.dim(1);
    const int plane = h * w;
    std::vector<double> out(t.numel());
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < plane; ++p)
            out[static_cast<std::size_t>(ch) * plane + p] = t.value()[static_cast<std::size_t>(p) * c + ch];
    return make_result({c, h, w}, std::move(out), {t}, [c, plane](Node& self) {
        double* gt = self.parents[0]->grad_buf();
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < plane; ++p)
                gt[static_cast<std::size_t>(p) * c + ch] += self.grad[static_cast<std::size_t>(ch) * plane + p];
    });
}

Var concat_rows(const std::vector<Var>& xs) {
    require(!xs.empty(), "concat_rows: empty input");
    const int cols = xs[0].dim(1);
    int rows = 0;
    for (const Var& v : xs) {
        require(v.rank() == 2 && v.dim(1) == cols, "concat_rows: column mismatch");
        rows += v.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(rows) * cols);
    for (const Var& v : xs) out.insert(out.end(), v.value().begin(), v.value().end());
    return make_result({rows, cols}, std::move(out), xs, [](Node& self) {
        std::size_t off = 0;
        for (auto& p : self.parents) {
            if (p->requires_grad) kernels::axpy(1.0, self.grad.data() + off, p->grad_buf(), p->numel());
            off += p->numel();
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(0),
            "linear: " + shape_str(x.shape()) + " · " + shape_str(w.shape()));
    const int n = x.dim(0), in = x.dim(1), outd = w.dim(1);
    require(!b.defined() || b.numel() == static_cast<std::size_t>(outd), "linear: bias size");
    std::vector<double> out(static_cast<std::size_t>(n) * outd, 0.0);
    if (b.defined())
        for (int r = 0; r < n; ++r) std::copy(b.value().begin(), b.value().end(), out.begin() + r * outd);
    kernels::gemm_nn(n, outd, in, x.value().data(), in, w.value().data(), outd, out.data(), outd);
    return make_result({n, outd}, std::move(out), {x, w, b}, [n, in, outd](Node& self) {
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        Node* bn = self.parents[2].get();
        const double* gy = self.grad.data();
        if (xn.requires_grad) kernels::gemm_nt(n, in, outd, gy, outd, wn.value.data(), outd, xn.grad_buf(), in);
        if (wn.requires_grad) kernels::gemm_tn(in, outd, n, xn.value.data(), in, gy, outd, wn.grad_buf(), outd);
        if (wants_grad(bn)) {
            double* gb = bn->grad_buf();
            for (int r = 0; r < n; ++r) kernels::axpy(1.0, gy + r * outd, gb, outd);
        }
    });
}

namespace {

// Inference-only attention that holds one block of query rows at a time, so a
// full-resolution level never materializes the m×n probability matrix.
std::vector<double> blocked_attention(const double* qv, const double* kv, const double* vv, int m, int n, int e,
                                      int heads) {
    constexpr int kBlock = 64;
    const int dh = e / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> out(static_cast<std::size_t>(m) * e, 0.0);
    std::vector<double> kt(static_cast<std::size_t>(dh) * n);
    std::vector<double> a(static_cast<std::size_t>(kBlock) * n);
    for (int hd = 0; hd < heads; ++hd) {
        for (int r = 0; r < n; ++r)
            for (int d = 0; d < dh; ++d) kt[static_cast<std::size_t>(d) * n + r] = kv[static_cast<std::size_t>(r) * e + hd * dh + d];
        for (int i0 = 0; i0 < m; i0 += kBlock) {
            const int rows = std::min(kBlock, m - i0);
            std::fill(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(rows) * n, 0.0);
            kernels::gemm_nn(rows, n, dh, qv + static_cast<std::size_t>(i0) * e + hd * dh, e, kt.data(), n, a.data(), n);
            for (int i = 0; i < rows; ++i) {
                double* row = a.data() + static_cast<std::size_t>(i) * n;
                double mx = row[0] * sc;
                for (int j = 0; j < n; ++j) mx = std::max(mx, row[j] * sc);
                double z = 0.0;
                for (int j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] * sc - mx));
                const double inv = 1.0 / z;
                for (int j = 0; j < n; ++j) row[j] *= inv;
            }
            kernels::gemm_nn(rows, dh, n, a.data(), n, vv + hd * dh, e, out.data() + static_cast<std::size_t>(i0) * e + hd * dh, e);
        }
    }
    return out;
}

}  // namespace

Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads, std::vector<double>* probs) {
    require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: expects matrices");
    const int m = q.dim(0), e = q.dim(1), n = k.dim(0);
    require(k.dim(1) == e && v.dim(1) == e, "attention: Q/K/V width mismatch");
    require(v.dim(0) == n, "attention: V rows must equal K rows");
    require(heads >= 1 && e % heads == 0, "attention: width not divisible by heads");
    const bool record = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    if (!record && !probs)
        return Var::constant({m, e}, blocked_attention(q.value().data(), k.value().data(), v.value().data(), m, n, e, heads));
    const int dh = e / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t mn = static_cast<std::size_t>(m) * n;

    std::vector<double> attn(static_cast<std::size_t>(heads) * mn, 0.0);
    std::vector<double> out(static_cast<std::size_t>(m) * e, 0.0);
    std::vector<double> kt(static_cast<std::size_t>(dh) * n);
    const double* qv = q.value().data();
    const double* kv = k.value().data();
    const double* vv = v.value().data();
    for (int hd = 0; hd < heads; ++hd) {
        for (int r = 0; r < n; ++r)
            for (int d = 0; d < dh; ++d) kt[static_cast<std::size_t>(d) * n + r] = kv[static_cast<std::size_t>(r) * e + hd * dh + d];
        double* a = attn.data() + hd * mn;
        kernels::gemm_nn(m, n, dh, qv + hd * dh, e, kt.data(), n, a, n);
        for (int i = 0; i < m; ++i) {
            double* row = a + static_cast<std::size_t>(i) * n;
            double mx = row[0] * sc;
            for (int j = 0; j < n; ++j) mx = std::max(mx, row[j] * sc);
            double z = 0.0;
            for (int j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] * sc - mx));
            const double inv = 1.0 / z;
            for (int j = 0; j < n; ++j) row[j] *= inv;
        }
        kernels::gemm_nn(m, dh, n, a, n, vv + hd * dh, e, out.data() + hd * dh, e);
    }
    if (probs) *probs = attn;

    return make_result({m, e}, std::move(out), {q, k, v},
                       [m, e, n, heads, dh, sc, mn, attn = std::move(attn)](Node& self) {
                           Node& qn = *self.parents[0];
                           Node& kn = *self.parents[1];
                           Node& vn = *self.parents[2];
                           const double* go = self.grad.data();
                           std::vector<double> vt(static_cast<std::size_t>(dh) * n);
                           std::vector<double> ds(mn);
                           for (int hd = 0; hd < heads; ++hd) {
                               const double* a = attn.data() + hd * mn;
                               if (vn.requires_grad)
                                   kernels::gemm_tn(n, dh, m, a, n, go + hd * dh, e, vn.grad_buf() + hd * dh, e);
                               if (!qn.requires_grad && !kn.requires_grad) continue;
                               for (int r = 0; r < n; ++r)
                                   for (int d = 0; d < dh; ++d)
                                       vt[static_cast<std::size_t>(d) * n + r] = vn.value[static_cast<std::size_t>(r) * e + hd * dh + d];
                               std::fill(ds.begin(), ds.end(), 0.0);
                               kernels::gemm_nn(m, n, dh, go + hd * dh, e, vt.data(), n, ds.data(), n);
                               for (int i = 0; i < m; ++i) {
                                   double* row = ds.data() + static_cast<std::size_t>(i) * n;
                                   const double* arow = a + static_cast<std::size_t>(i) * n;
                                   const double s = kernels::dot(row, arow, n);
                                   for (int j = 0; j < n; ++j) row[j] = arow[j] * (row[j] - s) * sc;
                               }
                               if (qn.requires_grad)
                                   kernels::gemm_nn(m, dh, n, ds.data(), n, kn.value.data() + hd * dh, e, qn.grad_buf() + hd * dh, e);
                               if (kn.requires_grad)
                                   kernels::gemm_tn(n, dh, m, ds.data(), n, qn.value.data() + hd * dh, e, kn.grad_buf() + hd * dh, e);
                           }
                       });
}

Var ce_dice_loss(const Var& logits, std::span<const std::uint8_t> target, double w_ce, double w_dice) {
    require(logits.rank() == 3 && logits.dim(0) == 2, "ce_dice_loss: expects [2,H,W] logits");
    const std::size_t plane = static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
    require(target.size() == plane, "ce_dice_loss: target size mismatch");
    constexpr double smooth = 1.0;
    const auto z = logits.value();
    std::vector<double> pfg(plane);
    double ce = 0.0, inter = 0.0, psum = 0.0, gsum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
        const double z0 = z[i], z1 = z[plane + i];
        const double mx = std::max(z0, z1);
        const double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
        const bool fg = target[i] != 0;
        ce += lse - (fg ? z0 : z1);
        pfg[i] = std::exp(z0 - lse);
        inter += pfg[i] * (fg ? 1.0 : 0.0);
        psum += pfg[i];
        gsum += fg ? 1.0 : 0.0;
    }
    ce /= static_cast<double>(plane);
    const double num = 2.0 * inter + smooth;
    const double den = psum + gsum + smooth;
    const double dice_loss = 1.0 - num / den;
    const double total = w_ce * ce + w_dice * dice_loss;

    std::vector<std::uint8_t> tgt(target.begin(), target.end());
    return make_result({1}, {total}, {logits},
                       [plane, w_ce, w_dice, num, den, pfg = std::move(pfg), tgt = std::move(tgt)](Node& self) {
                           double* gz = self.parents[0]->grad_buf();
                           const double g = self.grad[0];
                           const double inv_n = 1.0 / static_cast<double>(plane);
                           for (std::size_t i = 0; i < plane; ++i) {
                               const double p0 = pfg[i];
                               const double y = tgt[i] ? 1.0 : 0.0;
                               // d(ce)/dz0 = (p0 - y)/N, d(ce)/dz1 = -(p0 - y)/N
                               double dz0 = w_ce * (p0 - y) * inv_n;
                               // d(1 - num/den)/dp0 = -(2y·den - num)/den²
                               const double dp = -w_dice * (2.0 * y * den - num) / (den * den);
                               dz0 += dp * p0 * (1.0 - p0);
                               gz[i] += g * dz0;
                               gz[plane + i] -= g * dz0;
                           }
                       });
}

}  // namespace msf::ag
