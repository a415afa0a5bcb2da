#include "fabric/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "fabric/simd/kernels.hpp"

namespace fabric::nn {

namespace {

using simd::Trans;

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void need_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
    }
}

// Product of dims [from, rank).
int trailing(const Tensor& t, int from) {
    int n = 1;
    for (int i = from; i < t.rank(); ++i) n *= t.dim(i);
    return n;
}

void accumulate(Tensor& dst, const Tensor& src) {
    simd::axpy(1.0f, src.ptr(), dst.ptr(), dst.size());
}

void im2col(const float* x, int batch, int channels, int h, int w, int k, float* cols) {
    const int pad = k / 2;
    const int hw = h * w;
    const std::ptrdiff_t ncols = static_cast<std::ptrdiff_t>(batch) * hw;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* row = cols + ((static_cast<std::ptrdiff_t>(c) * k + ky) * k + kx) * ncols;
                for (int b = 0; b < batch; ++b) {
                    const float* src = x + (static_cast<std::ptrdiff_t>(b) * channels + c) * hw;
                    float* dst = row + static_cast<std::ptrdiff_t>(b) * hw;
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + ky - pad;
                        if (sy < 0 || sy >= h) {
                            std::fill_n(dst + y * w, w, 0.0f);
                            continue;
                        }
                        for (int xx = 0; xx < w; ++xx) {
                            const int sx = xx + kx - pad;
                            dst[y * w + xx] = (sx >= 0 && sx < w) ? src[sy * w + sx] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const float* cols, int batch, int channels, int h, int w, int k, float* dx) {
    const int pad = k / 2;
    const int hw = h * w;
    const std::ptrdiff_t ncols = static_cast<std::ptrdiff_t>(batch) * hw;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* row = cols + ((static_cast<std::ptrdiff_t>(c) * k + ky) * k + kx) * ncols;
                for (int b = 0; b < batch; ++b) {
                    float* dst = dx + (static_cast<std::ptrdiff_t>(b) * channels + c) * hw;
                    const float* src = row + static_cast<std::ptrdiff_t>(b) * hw;
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        for (int xx = 0; xx < w; ++xx) {
                            const int sx = xx + kx - pad;
                            if (sx >= 0 && sx < w) dst[sy * w + sx] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

Var add(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    same_shape(av, bv, "add");
    Tensor out = av;
    accumulate(out, bv);
    return g.make(std::move(out), {a, b}, [a, b](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        if (gr.requires_grad(a)) accumulate(gr.grad(a), go);
        if (gr.requires_grad(b)) accumulate(gr.grad(b), go);
    });
}

Var sub(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    same_shape(av, bv, "sub");
    Tensor out = av;
    simd::axpy(-1.0f, bv.ptr(), out.ptr(), out.size());
    return g.make(std::move(out), {a, b}, [a, b](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        if (gr.requires_grad(a)) accumulate(gr.grad(a), go);
        if (gr.requires_grad(b)) simd::axpy(-1.0f, go.ptr(), gr.grad(b).ptr(), go.size());
    });
}

Var mul(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    same_shape(av, bv, "mul");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return g.make(std::move(out), {a, b}, [a, b](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& av = gr.value(a);
        const Tensor& bv = gr.value(b);
        if (gr.requires_grad(a)) {
            Tensor& ga = gr.grad(a);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad(b);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

Var scale(Graph& g, Var a, float s) {
    Tensor out = g.value(a);
    for (auto& x : out.data()) x *= s;
    return g.make(std::move(out), {a}, [a, s](Graph& gr, int self) {
        simd::axpy(s, gr.grad(self).ptr(), gr.grad(a).ptr(), gr.grad(self).size());
    });
}

Var reshape(Graph& g, Var a, Shape shape) {
    Tensor out = g.value(a).reshaped(std::move(shape));
    return g.make(std::move(out), {a}, [a](Graph& gr, int self) { accumulate(gr.grad(a), gr.grad(self)); });
}

Var linear(Graph& g, Var x, Var w, Var b) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    need_rank(wv, 2, "linear weight");
    const int out_f = wv.dim(0);
    const int in_f = wv.dim(1);
    if (xv.rank() < 1 || xv.dim(-1) != in_f) {
        throw ShapeError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                         shape_str(wv.shape()));
    }
    if (b.valid()) require_shape(g.value(b), {out_f}, "linear bias");
    const int rows = static_cast<int>(xv.size() / static_cast<std::size_t>(in_f));
    Shape out_shape = xv.shape();
    out_shape.back() = out_f;
    Tensor out(out_shape);
    simd::gemm(Trans::no, Trans::yes, rows, out_f, in_f, xv.ptr(), in_f, wv.ptr(), in_f, out.ptr(), out_f);
    if (b.valid()) {
        const float* bp = g.value(b).ptr();
        for (int r = 0; r < rows; ++r) {
            float* o = out.ptr() + static_cast<std::ptrdiff_t>(r) * out_f;
            for (int j = 0; j < out_f; ++j) o[j] += bp[j];
        }
    }
    std::vector<Var> parents{x, w};
    if (b.valid()) parents.push_back(b);
    return g.make(std::move(out), std::move(parents), [x, w, b, rows, in_f, out_f](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        if (gr.requires_grad(x)) {
            simd::gemm(Trans::no, Trans::no, rows, in_f, out_f, go.ptr(), out_f, gr.value(w).ptr(), in_f,
                       gr.grad(x).ptr(), in_f, true);
        }
        if (gr.requires_grad(w)) {
            simd::gemm(Trans::yes, Trans::no, out_f, in_f, rows, go.ptr(), out_f, gr.value(x).ptr(), in_f,
                       gr.grad(w).ptr(), in_f, true);
        }
        if (b.valid() && gr.requires_grad(b)) {
            Tensor& gb = gr.grad(b);
            for (int r = 0; r < rows; ++r) {
                const float* o = go.ptr() + static_cast<std::ptrdiff_t>(r) * out_f;
                for (int j = 0; j < out_f; ++j) gb[static_cast<std::size_t>(j)] += o[j];
            }
        }
    });
}

Var conv2d(Graph& g, Var x, Var w, Var b) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    need_rank(xv, 4, "conv2d input");
    need_rank(wv, 4, "conv2d weight");
    const int batch = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    const int cout = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != cin || wv.dim(3) != k || k % 2 == 0) {
        throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " incompatible with weight " +
                         shape_str(wv.shape()));
    }
    if (b.valid()) require_shape(g.value(b), {cout}, "conv2d bias");
    const int hw = h * wd;
    const int kdim = cin * k * k;
    const int ncols = batch * hw;
    std::vector<float> cols(static_cast<std::size_t>(kdim) * ncols);
    im2col(xv.ptr(), batch, cin, h, wd, k, cols.data());
    std::vector<float> tmp(static_cast<std::size_t>(cout) * ncols);
    simd::gemm(Trans::no, Trans::no, cout, ncols, kdim, wv.ptr(), kdim, cols.data(), ncols, tmp.data(), ncols);
    Tensor out({batch, cout, h, wd});
    const float* bp = b.valid() ? g.value(b).ptr() : nullptr;
    for (int bi = 0; bi < batch; ++bi) {
        for (int co = 0; co < cout; ++co) {
            const float* src = tmp.data() + static_cast<std::ptrdiff_t>(co) * ncols + static_cast<std::ptrdiff_t>(bi) * hw;
            float* dst = out.ptr() + (static_cast<std::ptrdiff_t>(bi) * cout + co) * hw;
            const float bias = bp ? bp[co] : 0.0f;
            for (int p = 0; p < hw; ++p) dst[p] = src[p] + bias;
        }
    }
    std::vector<Var> parents{x, w};
    if (b.valid()) parents.push_back(b);
    return g.make(std::move(out), std::move(parents),
                  [x, w, b, batch, cin, h, wd, cout, k, hw, kdim, ncols](Graph& gr, int self) {
                      const Tensor& go = gr.grad(self);
                      std::vector<float> dtmp(static_cast<std::size_t>(cout) * ncols);
                      for (int bi = 0; bi < batch; ++bi) {
                          for (int co = 0; co < cout; ++co) {
                              const float* src = go.ptr() + (static_cast<std::ptrdiff_t>(bi) * cout + co) * hw;
                              std::copy_n(src, hw, dtmp.data() + static_cast<std::ptrdiff_t>(co) * ncols + static_cast<std::ptrdiff_t>(bi) * hw);
                          }
                      }
                      if (b.valid() && gr.requires_grad(b)) {
                          Tensor& gb = gr.grad(b);
                          for (int co = 0; co < cout; ++co) {
                              const float* row = dtmp.data() + static_cast<std::ptrdiff_t>(co) * ncols;
                              float s = 0.0f;
                              for (int j = 0; j < ncols; ++j) s += row[j];
                              gb[static_cast<std::size_t>(co)] += s;
                          }
                      }
                      const bool need_w = gr.requires_grad(w);
                      const bool need_x = gr.requires_grad(x);
                      if (need_w) {
                          std::vector<float> cols(static_cast<std::size_t>(kdim) * ncols);
                          im2col(gr.value(x).ptr(), batch, cin, h, wd, k, cols.data());
                          simd::gemm(Trans::no, Trans::yes, cout, kdim, ncols, dtmp.data(), ncols, cols.data(), ncols,
                                     gr.grad(w).ptr(), kdim, true);
                      }
                      if (need_x) {
                          std::vector<float> dcols(static_cast<std::size_t>(kdim) * ncols);
                          simd::gemm(Trans::yes, Trans::no, kdim, ncols, cout, gr.value(w).ptr(), kdim, dtmp.data(),
                                     ncols, dcols.data(), ncols);
                          col2im_add(dcols.data(), batch, cin, h, wd, k, gr.grad(x).ptr());
                      }
                  });
}

Var group_norm(Graph& g, Var x, Var gamma, Var beta, int groups, float eps) {
    const Tensor& xv = g.value(x);
    if (xv.rank() < 2) throw ShapeError("group_norm: expected [B, C, ...], got " + shape_str(xv.shape()));
    const int batch = xv.dim(0), channels = xv.dim(1);
    if (groups <= 0 || channels % groups != 0) {
        throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
    }
    require_shape(g.value(gamma), {channels}, "group_norm gamma");
    require_shape(g.value(beta), {channels}, "group_norm beta");
    const int spatial = trailing(xv, 2);
    const int cg = channels / groups;
    const int n = cg * spatial;
    auto stats = std::make_shared<std::vector<float>>(static_cast<std::size_t>(batch) * groups * 2);
    Tensor out(xv.shape());
    const float* gm = g.value(gamma).ptr();
    const float* bt = g.value(beta).ptr();
    for (int bi = 0; bi < batch; ++bi) {
        for (int gi = 0; gi < groups; ++gi) {
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(bi) * channels + gi * cg) * spatial;
            const float* src = xv.ptr() + base;
            double s = 0.0, ss = 0.0;
            for (int i = 0; i < n; ++i) s += src[i];
            const double mean = s / n;
            for (int i = 0; i < n; ++i) {
                const double d = src[i] - mean;
                ss += d * d;
            }
            const float rstd = static_cast<float>(1.0 / std::sqrt(ss / n + eps));
            const float meanf = static_cast<float>(mean);
            (*stats)[(static_cast<std::size_t>(bi) * groups + gi) * 2] = meanf;
            (*stats)[(static_cast<std::size_t>(bi) * groups + gi) * 2 + 1] = rstd;
            float* dst = out.ptr() + base;
            for (int c = 0; c < cg; ++c) {
                const float ga = gm[gi * cg + c], be = bt[gi * cg + c];
                for (int p = 0; p < spatial; ++p) {
                    const int i = c * spatial + p;
                    dst[i] = (src[i] - meanf) * rstd * ga + be;
                }
            }
        }
    }
    return g.make(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, stats, batch, channels, groups, cg, spatial, n](Graph& gr, int self) {
                      const Tensor& go = gr.grad(self);
                      const Tensor& xv = gr.value(x);
                      const float* gm = gr.value(gamma).ptr();
                      const bool need_x = gr.requires_grad(x);
                      float* dg = gr.requires_grad(gamma) ? gr.grad(gamma).ptr() : nullptr;
                      float* db = gr.requires_grad(beta) ? gr.grad(beta).ptr() : nullptr;
                      float* dx = need_x ? gr.grad(x).ptr() : nullptr;
                      std::vector<float> dxhat(static_cast<std::size_t>(n));
                      for (int bi = 0; bi < batch; ++bi) {
                          for (int gi = 0; gi < groups; ++gi) {
                              const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(bi) * channels + gi * cg) * spatial;
                              const float mean = (*stats)[(static_cast<std::size_t>(bi) * groups + gi) * 2];
                              const float rstd = (*stats)[(static_cast<std::size_t>(bi) * groups + gi) * 2 + 1];
                              const float* src = xv.ptr() + base;
                              const float* dy = go.ptr() + base;
                              double sum_d = 0.0, sum_dx = 0.0;
                              for (int c = 0; c < cg; ++c) {
                                  const int ch = gi * cg + c;
                                  double sg = 0.0, sb = 0.0;
                                  for (int p = 0; p < spatial; ++p) {
                                      const int i = c * spatial + p;
                                      const float xhat = (src[i] - mean) * rstd;
                                      sg += dy[i] * xhat;
                                      sb += dy[i];
                                      dxhat[static_cast<std::size_t>(i)] = dy[i] * gm[ch];
                                      sum_d += dxhat[static_cast<std::size_t>(i)];
                                      sum_dx += dxhat[static_cast<std::size_t>(i)] * xhat;
                                  }
                                  if (dg) dg[ch] += static_cast<float>(sg);
                                  if (db) db[ch] += static_cast<float>(sb);
                              }
                              if (dx) {
                                  const float md = static_cast<float>(sum_d / n);
                                  const float mdx = static_cast<float>(sum_dx / n);
                                  for (int i = 0; i < n; ++i) {
                                      const float xhat = (src[i] - mean) * rstd;
                                      dx[base + i] += rstd * (dxhat[static_cast<std::size_t>(i)] - md - xhat * mdx);
                                  }
                              }
                          }
                      }
                  });
}

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, float eps) {
    const Tensor& xv = g.value(x);
    const int c = xv.dim(-1);
    require_shape(g.value(gamma), {c}, "layer_norm gamma");
    require_shape(g.value(beta), {c}, "layer_norm beta");
    const int rows = static_cast<int>(xv.size() / static_cast<std::size_t>(c));
    auto stats = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows) * 2);
    Tensor out(xv.shape());
    const float* gm = g.value(gamma).ptr();
    const float* bt = g.value(beta).ptr();
    for (int r = 0; r < rows; ++r) {
        const float* src = xv.ptr() + static_cast<std::ptrdiff_t>(r) * c;
        double s = 0.0, ss = 0.0;
        for (int i = 0; i < c; ++i) s += src[i];
        const double mean = s / c;
        for (int i = 0; i < c; ++i) ss += (src[i] - mean) * (src[i] - mean);
        const float rstd = static_cast<float>(1.0 / std::sqrt(ss / c + eps));
        const float meanf = static_cast<float>(mean);
        (*stats)[static_cast<std::size_t>(r) * 2] = meanf;
        (*stats)[static_cast<std::size_t>(r) * 2 + 1] = rstd;
        float* dst = out.ptr() + static_cast<std::ptrdiff_t>(r) * c;
        for (int i = 0; i < c; ++i) dst[i] = (src[i] - meanf) * rstd * gm[i] + bt[i];
    }
    return g.make(std::move(out), {x, gamma, beta}, [x, gamma, beta, stats, rows, c](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& xv = gr.value(x);
        const float* gm = gr.value(gamma).ptr();
        float* dg = gr.requires_grad(gamma) ? gr.grad(gamma).ptr() : nullptr;
        float* db = gr.requires_grad(beta) ? gr.grad(beta).ptr() : nullptr;
        float* dx = gr.requires_grad(x) ? gr.grad(x).ptr() : nullptr;
        std::vector<float> dxhat(static_cast<std::size_t>(c));
        for (int r = 0; r < rows; ++r) {
            const float mean = (*stats)[static_cast<std::size_t>(r) * 2];
            const float rstd = (*stats)[static_cast<std::size_t>(r) * 2 + 1];
            const float* src = xv.ptr() + static_cast<std::ptrdiff_t>(r) * c;
            const float* dy = go.ptr() + static_cast<std::ptrdiff_t>(r) * c;
            double sum_d = 0.0, sum_dx = 0.0;
            for (int i = 0; i < c; ++i) {
                const float xhat = (src[i] - mean) * rstd;
                if (dg) dg[i] += dy[i] * xhat;
                if (db) db[i] += dy[i];
                dxhat[static_cast<std::size_t>(i)] = dy[i] * gm[i];
                sum_d += dxhat[static_cast<std::size_t>(i)];
                sum_dx += dxhat[static_cast<std::size_t>(i)] * xhat;
            }
            if (dx) {
                const float md = static_cast<float>(sum_d / c);
                const float mdx = static_cast<float>(sum_dx / c);
                for (int i = 0; i < c; ++i) {
                    const float xhat = (src[i] - mean) * rstd;
                    dx[static_cast<std::ptrdiff_t>(r) * c + i] += rstd * (dxhat[static_cast<std::size_t>(i)] - md - xhat * mdx);
                }
            }
        }
    });
}

Var silu(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sigmoid(xv[i]);
    return g.make(std::move(out), {x}, [x](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& xv = gr.value(x);
        Tensor& gx = gr.grad(x);
        for (std::size_t i = 0; i < go.size(); ++i) {
            const float s = sigmoid(xv[i]);
            gx[i] += go[i] * s * (1.0f + xv[i] * (1.0f - s));
        }
    });
}

Var softmax(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    const int c = xv.dim(-1);
    const int rows = static_cast<int>(xv.size() / static_cast<std::size_t>(c));
    Tensor out(xv.shape());
    for (int r = 0; r < rows; ++r) {
        const float* src = xv.ptr() + static_cast<std::ptrdiff_t>(r) * c;
        float* dst = out.ptr() + static_cast<std::ptrdiff_t>(r) * c;
        const float m = *std::max_element(src, src + c);
        float z = 0.0f;
        for (int i = 0; i < c; ++i) z += (dst[i] = std::exp(src[i] - m));
        for (int i = 0; i < c; ++i) dst[i] /= z;
    }
    return g.make(std::move(out), {x}, [x, rows, c](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& y = gr.value(Var{self});
        Tensor& gx = gr.grad(x);
        for (int r = 0; r < rows; ++r) {
            const std::ptrdiff_t o = static_cast<std::ptrdiff_t>(r) * c;
            float d = 0.0f;
            for (int i = 0; i < c; ++i) d += go[o + i] * y[o + i];
            for (int i = 0; i < c; ++i) gx[o + i] += y[o + i] * (go[o + i] - d);
        }
    });
}

Var attention(Graph& g, Var q, Var k, Var v, int heads, const Tensor* key_weights) {
    const Tensor& qv = g.value(q);
    const Tensor& kv = g.value(k);
    const Tensor& vv = g.value(v);
    need_rank(qv, 3, "attention q");
    need_rank(kv, 3, "attention k");
    same_shape(kv, vv, "attention k/v");
    const int batch = qv.dim(0), lq = qv.dim(1), d = qv.dim(2);
    const int lk = kv.dim(1);
    if (kv.dim(0) != batch || kv.dim(2) != d || heads <= 0 || d % heads != 0) {
        throw ShapeError("attention: q " + shape_str(qv.shape()) + " incompatible with k " + shape_str(kv.shape()) +
                         " for " + std::to_string(heads) + " heads");
    }
    if (key_weights) {
        require_shape(*key_weights, {batch, lk}, "attention key weights");
        for (int bi = 0; bi < batch; ++bi) {
            bool any = false;
            for (int j = 0; j < lk; ++j) {
                const float wj = (*key_weights)[static_cast<std::size_t>(bi) * lk + j];
                if (!(wj >= 0.0f) || !std::isfinite(wj)) throw std::invalid_argument("attention: key weights must be finite and >= 0");
                any = any || wj > 0.0f;
            }
            if (!any) throw std::invalid_argument("attention: all key weights are zero for a row");
        }
    }
    const int dk = d / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dk));
    auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(batch) * heads * lq * lk, 0.0f);
    std::vector<float> logw(static_cast<std::size_t>(lk), 0.0f);
    std::vector<char> active(static_cast<std::size_t>(lk), 1);
    Tensor out({batch, lq, d});
    std::vector<float> s(static_cast<std::size_t>(lk));
    for (int bi = 0; bi < batch; ++bi) {
        if (key_weights) {
            for (int j = 0; j < lk; ++j) {
                const float wj = (*key_weights)[static_cast<std::size_t>(bi) * lk + j];
                active[static_cast<std::size_t>(j)] = wj > 0.0f;
                logw[static_cast<std::size_t>(j)] = wj > 0.0f ? std::log(wj) : 0.0f;
            }
        }
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < lq; ++i) {
                const float* qi = qv.ptr() + (static_cast<std::ptrdiff_t>(bi) * lq + i) * d + h * dk;
                float m = -std::numeric_limits<float>::infinity();
                for (int j = 0; j < lk; ++j) {
                    if (!active[static_cast<std::size_t>(j)]) continue;
                    const float* kj = kv.ptr() + (static_cast<std::ptrdiff_t>(bi) * lk + j) * d + h * dk;
                    s[static_cast<std::size_t>(j)] = simd::dot(qi, kj, static_cast<std::size_t>(dk)) * sc + logw[static_cast<std::size_t>(j)];
                    m = std::max(m, s[static_cast<std::size_t>(j)]);
                }
                float z = 0.0f;
                float* p = probs->data() + ((static_cast<std::ptrdiff_t>(bi) * heads + h) * lq + i) * lk;
                for (int j = 0; j < lk; ++j) {
                    if (!active[static_cast<std::size_t>(j)]) continue;
                    p[j] = std::exp(s[static_cast<std::size_t>(j)] - m);
                    z += p[j];
                }
                float* oi = out.ptr() + (static_cast<std::ptrdiff_t>(bi) * lq + i) * d + h * dk;
                for (int j = 0; j < lk; ++j) {
                    if (!active[static_cast<std::size_t>(j)]) continue;
                    p[j] /= z;
                    const float* vj = vv.ptr() + (static_cast<std::ptrdiff_t>(bi) * lk + j) * d + h * dk;
                    simd::axpy(p[j], vj, oi, static_cast<std::size_t>(dk));
                }
            }
        }
    }
    return g.make(std::move(out), {q, k, v}, [q, k, v, probs, batch, lq, lk, d, heads, dk, sc](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& qv = gr.value(q);
        const Tensor& kv = gr.value(k);
        const Tensor& vv = gr.value(v);
        float* dq = gr.requires_grad(q) ? gr.grad(q).ptr() : nullptr;
        float* dkp = gr.requires_grad(k) ? gr.grad(k).ptr() : nullptr;
        float* dv = gr.requires_grad(v) ? gr.grad(v).ptr() : nullptr;
        std::vector<float> dp(static_cast<std::size_t>(lk));
        for (int bi = 0; bi < batch; ++bi) {
            for (int h = 0; h < heads; ++h) {
                for (int i = 0; i < lq; ++i) {
                    const float* p = probs->data() + ((static_cast<std::ptrdiff_t>(bi) * heads + h) * lq + i) * lk;
                    const std::ptrdiff_t qoff = (static_cast<std::ptrdiff_t>(bi) * lq + i) * d + h * dk;
                    const float* doi = go.ptr() + qoff;
                    float pdp = 0.0f;
                    for (int j = 0; j < lk; ++j) {
                        const std::ptrdiff_t koff = (static_cast<std::ptrdiff_t>(bi) * lk + j) * d + h * dk;
                        if (p[j] == 0.0f) {
                            dp[static_cast<std::size_t>(j)] = 0.0f;
                            continue;
                        }
                        dp[static_cast<std::size_t>(j)] = simd::dot(doi, vv.ptr() + koff, static_cast<std::size_t>(dk));
                        pdp += p[j] * dp[static_cast<std::size_t>(j)];
                        if (dv) simd::axpy(p[j], doi, dv + koff, static_cast<std::size_t>(dk));
                    }
                    for (int j = 0; j < lk; ++j) {
                        if (p[j] == 0.0f) continue;
                        const float ds = p[j] * (dp[static_cast<std::size_t>(j)] - pdp) * sc;
                        const std::ptrdiff_t koff = (static_cast<std::ptrdiff_t>(bi) * lk + j) * d + h * dk;
                        if (dq) simd::axpy(ds, kv.ptr() + koff, dq + qoff, static_cast<std::size_t>(dk));
                        if (dkp) simd::axpy(ds, qv.ptr() + qoff, dkp + koff, static_cast<std::size_t>(dk));
                    }
                }
            }
        }
    });
}

Var embedding(Graph& g, Var table, std::span<const int> ids) {
    const Tensor& tv = g.value(table);
    need_rank(tv, 2, "embedding table");
    const int vocab = tv.dim(0), dim = tv.dim(1);
    std::vector<int> idv(ids.begin(), ids.end());
    Tensor out({static_cast<int>(idv.size()), dim});
    for (std::size_t r = 0; r < idv.size(); ++r) {
        if (idv[r] < 0 || idv[r] >= vocab) throw std::out_of_range("embedding id out of range");
        std::copy_n(tv.ptr() + static_cast<std::ptrdiff_t>(idv[r]) * dim, dim, out.ptr() + static_cast<std::ptrdiff_t>(r) * dim);
    }
    return g.make(std::move(out), {table}, [table, idv, dim](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& gt = gr.grad(table);
        for (std::size_t r = 0; r < idv.size(); ++r) {
            simd::axpy(1.0f, go.ptr() + static_cast<std::ptrdiff_t>(r) * dim,
                       gt.ptr() + static_cast<std::ptrdiff_t>(idv[r]) * dim, static_cast<std::size_t>(dim));
        }
    });
}

Var avg_pool2(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    need_rank(xv, 4, "avg_pool2");
    const int bc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial size " + shape_str(xv.shape()));
    const int ho = h / 2, wo = w / 2;
    Tensor out({xv.dim(0), xv.dim(1), ho, wo});
    for (int c = 0; c < bc; ++c) {
        const float* src = xv.ptr() + static_cast<std::ptrdiff_t>(c) * h * w;
        float* dst = out.ptr() + static_cast<std::ptrdiff_t>(c) * ho * wo;
        for (int y = 0; y < ho; ++y) {
            for (int xx = 0; xx < wo; ++xx) {
                dst[y * wo + xx] = 0.25f * (src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1] +
                                            src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1]);
            }
        }
    }
    return g.make(std::move(out), {x}, [x, bc, h, w, ho, wo](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (int c = 0; c < bc; ++c) {
            const float* src = go.ptr() + static_cast<std::ptrdiff_t>(c) * ho * wo;
            float* dst = gx.ptr() + static_cast<std::ptrdiff_t>(c) * h * w;
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < w; ++xx) dst[y * w + xx] += 0.25f * src[(y / 2) * wo + xx / 2];
            }
        }
    });
}

Var upsample2(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    need_rank(xv, 4, "upsample2");
    const int bc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int ho = h * 2, wo = w * 2;
    Tensor out({xv.dim(0), xv.dim(1), ho, wo});
    for (int c = 0; c < bc; ++c) {
        const float* src = xv.ptr() + static_cast<std::ptrdiff_t>(c) * h * w;
        float* dst = out.ptr() + static_cast<std::ptrdiff_t>(c) * ho * wo;
        for (int y = 0; y < ho; ++y) {
            for (int xx = 0; xx < wo; ++xx) dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
        }
    }
    return g.make(std::move(out), {x}, [x, bc, h, w, ho, wo](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (int c = 0; c < bc; ++c) {
            const float* src = go.ptr() + static_cast<std::ptrdiff_t>(c) * ho * wo;
            float* dst = gx.ptr() + static_cast<std::ptrdiff_t>(c) * h * w;
            for (int y = 0; y < ho; ++y) {
                for (int xx = 0; xx < wo; ++xx) dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
            }
        }
    });
}

Var concat(Graph& g, Var a, Var b, int axis) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    if (axis < 0) axis += av.rank();
    if (av.rank() != bv.rank() || axis < 0 || axis >= av.rank()) {
        throw ShapeError("concat: incompatible ranks " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    }
    for (int i = 0; i < av.rank(); ++i) {
        if (i != axis && av.dim(i) != bv.dim(i)) {
            throw ShapeError("concat: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                             " differ off axis " + std::to_string(axis));
        }
    }
    int outer = 1;
    for (int i = 0; i < axis; ++i) outer *= av.dim(i);
    const int ia = trailing(av, axis), ib = trailing(bv, axis);
    Shape shape = av.shape();
    shape[static_cast<std::size_t>(axis)] += bv.dim(axis);
    Tensor out(shape);
    for (int o = 0; o < outer; ++o) {
        float* dst = out.ptr() + static_cast<std::ptrdiff_t>(o) * (ia + ib);
        std::copy_n(av.ptr() + static_cast<std::ptrdiff_t>(o) * ia, ia, dst);
        std::copy_n(bv.ptr() + static_cast<std::ptrdiff_t>(o) * ib, ib, dst + ia);
    }
    return g.make(std::move(out), {a, b}, [a, b, outer, ia, ib](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        float* ga = gr.requires_grad(a) ? gr.grad(a).ptr() : nullptr;
        float* gb = gr.requires_grad(b) ? gr.grad(b).ptr() : nullptr;
        for (int o = 0; o < outer; ++o) {
            const float* src = go.ptr() + static_cast<std::ptrdiff_t>(o) * (ia + ib);
            if (ga) simd::axpy(1.0f, src, ga + static_cast<std::ptrdiff_t>(o) * ia, static_cast<std::size_t>(ia));
            if (gb) simd::axpy(1.0f, src + ia, gb + static_cast<std::ptrdiff_t>(o) * ib, static_cast<std::size_t>(ib));
        }
    });
}

Var transpose12(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    need_rank(xv, 3, "transpose12");
    const int batch = xv.dim(0), ra = xv.dim(1), rc = xv.dim(2);
    Tensor out({batch, rc, ra});
    for (int bi = 0; bi < batch; ++bi) {
        const float* src = xv.ptr() + static_cast<std::ptrdiff_t>(bi) * ra * rc;
        float* dst = out.ptr() + static_cast<std::ptrdiff_t>(bi) * ra * rc;
        for (int i = 0; i < ra; ++i) {
            for (int j = 0; j < rc; ++j) dst[j * ra + i] = src[i * rc + j];
        }
    }
    return g.make(std::move(out), {x}, [x, batch, ra, rc](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& gx = gr.grad(x);
        for (int bi = 0; bi < batch; ++bi) {
            const float* src = go.ptr() + static_cast<std::ptrdiff_t>(bi) * ra * rc;
            float* dst = gx.ptr() + static_cast<std::ptrdiff_t>(bi) * ra * rc;
            for (int i = 0; i < ra; ++i) {
                for (int j = 0; j < rc; ++j) dst[i * rc + j] += src[j * ra + i];
            }
        }
    });
}

Var add_channel_vector(Graph& g, Var x, Var e) {
    const Tensor& xv = g.value(x);
    const Tensor& ev = g.value(e);
    if (xv.rank() < 2) throw ShapeError("add_channel_vector: input rank < 2");
    require_shape(ev, {xv.dim(0), xv.dim(1)}, "add_channel_vector vector");
    const int bc = xv.dim(0) * xv.dim(1);
    const int sp = trailing(xv, 2);
    Tensor out = xv;
    for (int i = 0; i < bc; ++i) {
        float* dst = out.ptr() + static_cast<std::ptrdiff_t>(i) * sp;
        for (int p = 0; p < sp; ++p) dst[p] += ev[static_cast<std::size_t>(i)];
    }
    return g.make(std::move(out), {x, e}, [x, e, bc, sp](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        if (gr.requires_grad(x)) accumulate(gr.grad(x), go);
        if (gr.requires_grad(e)) {
            Tensor& ge = gr.grad(e);
            for (int i = 0; i < bc; ++i) {
                const float* src = go.ptr() + static_cast<std::ptrdiff_t>(i) * sp;
                float s = 0.0f;
                for (int p = 0; p < sp; ++p) s += src[p];
                ge[static_cast<std::size_t>(i)] += s;
            }
        }
    });
}

Var mean_spatial(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    if (xv.rank() < 3) throw ShapeError("mean_spatial: expected [B, C, ...], got " + shape_str(xv.shape()));
    const int bc = xv.dim(0) * xv.dim(1);
    const int sp = trailing(xv, 2);
    Tensor out({xv.dim(0), xv.dim(1)});
    for (int i = 0; i < bc; ++i) {
        const float* src = xv.ptr() + static_cast<std::ptrdiff_t>(i) * sp;
        float s = 0.0f;
        for (int p = 0; p < sp; ++p) s += src[p];
        out[static_cast<std::size_t>(i)] = s / static_cast<float>(sp);
    }
    return g.make(std::move(out), {x}, [x, bc, sp](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& gx = gr.grad(x);
        const float inv = 1.0f / static_cast<float>(sp);
        for (int i = 0; i < bc; ++i) {
            float* dst = gx.ptr() + static_cast<std::ptrdiff_t>(i) * sp;
            for (int p = 0; p < sp; ++p) dst[p] += go[static_cast<std::size_t>(i)] * inv;
        }
    });
}

Var l2_normalize(Graph& g, Var x, float eps) {
    const Tensor& xv = g.value(x);
    need_rank(xv, 2, "l2_normalize");
    const int rows = xv.dim(0), dim = xv.dim(1);
    auto norms = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
    Tensor out(xv.shape());
    for (int r = 0; r < rows; ++r) {
        const float* src = xv.ptr() + static_cast<std::ptrdiff_t>(r) * dim;
        double ss = 0.0;
        for (int i = 0; i < dim; ++i) ss += static_cast<double>(src[i]) * src[i];
        const float n = static_cast<float>(std::sqrt(ss + eps));
        (*norms)[static_cast<std::size_t>(r)] = n;
        for (int i = 0; i < dim; ++i) out[static_cast<std::size_t>(r) * dim + i] = src[i] / n;
    }
    return g.make(std::move(out), {x}, [x, norms, rows, dim](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& y = gr.value(Var{self});
        Tensor& gx = gr.grad(x);
        for (int r = 0; r < rows; ++r) {
            const std::ptrdiff_t o = static_cast<std::ptrdiff_t>(r) * dim;
            float d = 0.0f;
            for (int i = 0; i < dim; ++i) d += y[o + i] * go[o + i];
            const float n = (*norms)[static_cast<std::size_t>(r)];
            for (int i = 0; i < dim; ++i) gx[o + i] += (go[o + i] - y[o + i] * d) / n;
        }
    });
}

Var mse_loss(Graph& g, Var pred, Var target) {
    const Tensor& pv = g.value(pred);
    const Tensor& tv = g.value(target);
    same_shape(pv, tv, "mse_loss");
    double s = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = pv[i] - tv[i];
        s += d * d;
    }
    const float n = static_cast<float>(pv.size());
    return g.make(Tensor::scalar(static_cast<float>(s / n)), {pred, target}, [pred, target, n](Graph& gr, int self) {
        const float go = gr.grad(self)[0];
        const Tensor& pv = gr.value(pred);
        const Tensor& tv = gr.value(target);
        const float c = 2.0f * go / n;
        if (gr.requires_grad(pred)) {
            Tensor& gp = gr.grad(pred);
            for (std::size_t i = 0; i < pv.size(); ++i) gp[i] += c * (pv[i] - tv[i]);
        }
        if (gr.requires_grad(target)) {
            Tensor& gt = gr.grad(target);
            for (std::size_t i = 0; i < pv.size(); ++i) gt[i] -= c * (pv[i] - tv[i]);
        }
    });
}

Var cross_entropy(Graph& g, Var logits, std::span<const int> labels) {
    const Tensor& lv = g.value(logits);
    need_rank(lv, 2, "cross_entropy logits");
    const int rows = lv.dim(0), classes = lv.dim(1);
    if (static_cast<int>(labels.size()) != rows) throw ShapeError("cross_entropy: label count mismatch");
    std::vector<int> lab(labels.begin(), labels.end());
    auto probs = std::make_shared<std::vector<float>>(lv.size());
    double loss = 0.0;
    for (int r = 0; r < rows; ++r) {
        if (lab[static_cast<std::size_t>(r)] < 0 || lab[static_cast<std::size_t>(r)] >= classes) {
            throw std::out_of_range("cross_entropy: label out of range");
        }
        const float* src = lv.ptr() + static_cast<std::ptrdiff_t>(r) * classes;
        float* p = probs->data() + static_cast<std::ptrdiff_t>(r) * classes;
        const float m = *std::max_element(src, src + classes);
        double z = 0.0;
        for (int i = 0; i < classes; ++i) z += std::exp(static_cast<double>(src[i] - m));
        for (int i = 0; i < classes; ++i) p[i] = static_cast<float>(std::exp(static_cast<double>(src[i] - m)) / z);
        loss -= static_cast<double>(src[lab[static_cast<std::size_t>(r)]] - m) - std::log(z);
    }
    return g.make(Tensor::scalar(static_cast<float>(loss / rows)), {logits},
                  [logits, probs, lab, rows, classes](Graph& gr, int self) {
                      const float go = gr.grad(self)[0] / static_cast<float>(rows);
                      Tensor& gl = gr.grad(logits);
                      for (int r = 0; r < rows; ++r) {
                          for (int i = 0; i < classes; ++i) {
                              const std::size_t idx = static_cast<std::size_t>(r) * classes + i;
                              gl[idx] += go * ((*probs)[idx] - (i == lab[static_cast<std::size_t>(r)] ? 1.0f : 0.0f));
                          }
                      }
                  });
}

Var weighted_sum(Graph& g, Var x, const Tensor& r) {
    const Tensor& xv = g.value(x);
    same_shape(xv, r, "weighted_sum");
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) s += static_cast<double>(xv[i]) * r[i];
    return g.make(Tensor::scalar(static_cast<float>(s)), {x}, [x, r](Graph& gr, int self) {
        simd::axpy(gr.grad(self)[0], r.ptr(), gr.grad(x).ptr(), r.size());
    });
}

Var sum(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    double s = 0.0;
    for (float v : xv.data()) s += v;
    return g.make(Tensor::scalar(static_cast<float>(s)), {x}, [x](Graph& gr, int self) {
        const float go = gr.grad(self)[0];
        for (auto& v : gr.grad(x).data()) v += go;
    });
}

}  // namespace fabric::nn
