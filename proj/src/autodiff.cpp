#include "apt/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace apt {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_epoch{0};

Var make_node(Tensor out, std::vector<NodePtr> parents, std::function<void(Node&)> backfn) {
    Var v;
    v.node = std::make_shared<Node>();
    v.node->val = std::move(out);
    bool need = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p && p->requires_grad) { need = true; break; }
    }
    if (need) {
        v.node->requires_grad = true;
        v.node->parents = std::move(parents);
        v.node->backfn = std::move(backfn);
    }
    return v;
}

void accum(Node& dst, const double* g, int64_t n) {
    double* d = dst.grad.data();
    for (int64_t i = 0; i < n; ++i) d[i] += g[i];
}

bool wants(const NodePtr& p) { return p && p->requires_grad; }

} // namespace

Var::Var(Tensor t, bool requires_grad) {
    node = std::make_shared<Node>();
    node->val = std::move(t);
    node->requires_grad = requires_grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Var& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined root");
    if (root.value().numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root.node->requires_grad) return;

    const uint64_t epoch = g_epoch.fetch_add(1, std::memory_order_relaxed) + 1;
    std::vector<Node*> topo;
    // iterative postorder DFS along parent edges
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.node.get(), 0);
    root.node->visit_epoch = epoch;
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx].get();
            ++idx;
            if (p && p->requires_grad && p->visit_epoch != epoch) {
                p->visit_epoch = epoch;
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(n);
            stack.pop_back();
        }
    }
    for (Node* n : topo) n->grad = Tensor::zeros(n->val.shape);
    root.node->grad.v[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backfn) n->backfn(*n);
    }
}

Var constant(Tensor t) { return Var(std::move(t), false); }

// ---------------------------------------------------------------------------
// gemm kernels
// ---------------------------------------------------------------------------

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    if (!acc) std::fill(c, c + size_t(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = a + size_t(i) * k;
        double* crow = c + size_t(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + size_t(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + size_t(i) * k;
        double* crow = c + size_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + size_t(j) * k;
            double sum = 0.0;
            for (int p = 0; p < k; ++p) sum += arow[p] * brow[p];
            if (acc)
                crow[j] += sum;
            else
                crow[j] = sum;
        }
    }
}

void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    if (!acc) std::fill(c, c + size_t(m) * n, 0.0);
    for (int p = 0; p < k; ++p) {
        const double* arow = a + size_t(p) * m;
        const double* brow = b + size_t(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + size_t(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] += b.value()[i];
    return make_node(std::move(out), {a.node, b.node}, [n](Node& self) {
        if (wants(self.parents[0])) accum(*self.parents[0], self.grad.data(), n);
        if (wants(self.parents[1])) accum(*self.parents[1], self.grad.data(), n);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] -= b.value()[i];
    return make_node(std::move(out), {a.node, b.node}, [n](Node& self) {
        if (wants(self.parents[0])) accum(*self.parents[0], self.grad.data(), n);
        if (wants(self.parents[1])) {
            double* d = self.parents[1]->grad.data();
            const double* g = self.grad.data();
            for (int64_t i = 0; i < n; ++i) d[i] -= g[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] *= b.value()[i];
    return make_node(std::move(out), {a.node, b.node}, [n](Node& self) {
        const double* g = self.grad.data();
        if (wants(self.parents[0])) {
            double* d = self.parents[0]->grad.data();
            const double* bv = self.parents[1]->val.data();
            for (int64_t i = 0; i < n; ++i) d[i] += g[i] * bv[i];
        }
        if (wants(self.parents[1])) {
            double* d = self.parents[1]->grad.data();
            const double* av = self.parents[0]->val.data();
            for (int64_t i = 0; i < n; ++i) d[i] += g[i] * av[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] *= s;
    return make_node(std::move(out), {a.node}, [n, s](Node& self) {
        if (!wants(self.parents[0])) return;
        double* d = self.parents[0]->grad.data();
        const double* g = self.grad.data();
        for (int64_t i = 0; i < n; ++i) d[i] += s * g[i];
    });
}

Var square(const Var& a) {
    Tensor out = a.value();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] *= out[i];
    return make_node(std::move(out), {a.node}, [n](Node& self) {
        if (!wants(self.parents[0])) return;
        double* d = self.parents[0]->grad.data();
        const double* g = self.grad.data();
        const double* x = self.parents[0]->val.data();
        for (int64_t i = 0; i < n; ++i) d[i] += 2.0 * x[i] * g[i];
    });
}

Var silu(const Var& a) {
    Tensor out(a.value().shape);
    const int64_t n = out.numel();
    const double* x = a.value().data();
    for (int64_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x[i]));
        out[i] = x[i] * s;
    }
    return make_node(std::move(out), {a.node}, [n](Node& self) {
        if (!wants(self.parents[0])) return;
        double* d = self.parents[0]->grad.data();
        const double* g = self.grad.data();
        const double* x = self.parents[0]->val.data();
        for (int64_t i = 0; i < n; ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            d[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
        }
    });
}

// ---------------------------------------------------------------------------
// linear / bmm
// ---------------------------------------------------------------------------

Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.ndim() < 2 || wv.ndim() != 2)
        throw std::invalid_argument("linear: need x rank >= 2 and W rank 2");
    const int in = wv.dim(0), out_dim = wv.dim(1);
    if (xv.shape.back() != in)
        throw std::invalid_argument("linear: shape mismatch, x last dim " +
                                    std::to_string(xv.shape.back()) + " vs W in " +
                                    std::to_string(in));
    const int64_t m = xv.numel() / in;
    std::vector<int> out_shape = xv.shape;
    out_shape.back() = out_dim;
    Tensor out(out_shape);
    gemm_nn(xv.data(), wv.data(), out.data(), int(m), in, out_dim, false);
    const bool has_bias = b.defined();
    if (has_bias) {
        if (b.value().numel() != out_dim) throw std::invalid_argument("linear: bias size mismatch");
        const double* bias = b.value().data();
        for (int64_t i = 0; i < m; ++i) {
            double* row = out.data() + i * out_dim;
            for (int j = 0; j < out_dim; ++j) row[j] += bias[j];
        }
    }
    std::vector<NodePtr> parents = {x.node, w.node};
    if (has_bias) parents.push_back(b.node);
    return make_node(std::move(out), std::move(parents),
                     [m, in, out_dim, has_bias](Node& self) {
        const double* g = self.grad.data();
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        if (wants(self.parents[0]))
            gemm_nt(g, wn.val.data(), xn.grad.data(), int(m), out_dim, in, true);
        if (wants(self.parents[1]))
            gemm_tn(xn.val.data(), g, wn.grad.data(), in, int(m), out_dim, true);
        if (has_bias && wants(self.parents[2])) {
            double* db = self.parents[2]->grad.data();
            for (int64_t i = 0; i < m; ++i) {
                const double* row = g + i * out_dim;
                for (int j = 0; j < out_dim; ++j) db[j] += row[j];
            }
        }
    });
}

Var bmm(const Var& a, const Var& b, bool trans_b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 3 || bv.ndim() != 3) throw std::invalid_argument("bmm: need rank-3 tensors");
    const int batches = av.dim(0), m = av.dim(1), k = av.dim(2);
    const int bk = trans_b ? bv.dim(2) : bv.dim(1);
    const int n = trans_b ? bv.dim(1) : bv.dim(2);
    if (bv.dim(0) != batches || bk != k)
        throw std::invalid_argument("bmm: shape mismatch " + shape_str(av.shape) + " vs " +
                                    shape_str(bv.shape));
    Tensor out({batches, m, n});
    for (int i = 0; i < batches; ++i) {
        const double* ap = av.data() + size_t(i) * m * k;
        const double* bp = bv.data() + size_t(i) * k * n;
        double* cp = out.data() + size_t(i) * m * n;
        if (trans_b)
            gemm_nt(ap, bp, cp, m, k, n, false);
        else
            gemm_nn(ap, bp, cp, m, k, n, false);
    }
    return make_node(std::move(out), {a.node, b.node},
                     [batches, m, k, n, trans_b](Node& self) {
        Node& an = *self.parents[0];
        Node& bn = *self.parents[1];
        for (int i = 0; i < batches; ++i) {
            const double* g = self.grad.data() + size_t(i) * m * n;
            const double* ap = an.val.data() + size_t(i) * m * k;
            const double* bp = bn.val.data() + size_t(i) * k * n;
            if (wants(self.parents[0])) {
                double* da = an.grad.data() + size_t(i) * m * k;
                if (trans_b)
                    gemm_nn(g, bp, da, m, n, k, true); // dA = dC * B
                else
                    gemm_nt(g, bp, da, m, n, k, true); // dA = dC * B^T
            }
            if (wants(self.parents[1])) {
                double* db = bn.grad.data() + size_t(i) * k * n;
                if (trans_b)
                    gemm_tn(g, ap, db, n, m, k, true); // dB = dC^T * A
                else
                    gemm_tn(ap, g, db, k, m, n, true); // dB = A^T * dC
            }
        }
    });
}

// ---------------------------------------------------------------------------
// conv2d (im2col + gemm)
// ---------------------------------------------------------------------------

namespace {

void im2col(const double* x, int ci, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, double* col) {
    for (int c = 0; c < ci; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* crow = col + size_t(((c * kh + ki) * kw + kj)) * ho * wo;
                for (int oh = 0; oh < ho; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= h) {
                        std::fill(crow + size_t(oh) * wo, crow + size_t(oh + 1) * wo, 0.0);
                        continue;
                    }
                    const double* xrow = x + size_t(c) * h * w + size_t(ih) * w;
                    for (int ow = 0; ow < wo; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        crow[size_t(oh) * wo + ow] = (iw >= 0 && iw < w) ? xrow[iw] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_acc(const double* col, int ci, int h, int w, int kh, int kw, int stride, int pad,
                int ho, int wo, double* dx) {
    for (int c = 0; c < ci; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const double* crow = col + size_t(((c * kh + ki) * kw + kj)) * ho * wo;
                for (int oh = 0; oh < ho; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= h) continue;
                    double* xrow = dx + size_t(c) * h * w + size_t(ih) * w;
                    for (int ow = 0; ow < wo; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < w) xrow[iw] += crow[size_t(oh) * wo + ow];
                    }
                }
            }
        }
    }
}

} // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.ndim() != 4 || wv.ndim() != 4)
        throw std::invalid_argument("conv2d: need NCHW input and OIHW weight");
    const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
    const int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != ci)
        throw std::invalid_argument("conv2d: channel mismatch x " + shape_str(xv.shape) +
                                    " w " + shape_str(wv.shape));
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (ww + 2 * pad - kw) / stride + 1;
    const int ck = ci * kh * kw;
    Tensor out({n, co, ho, wo});
    thread_local std::vector<double> col;
    col.assign(size_t(ck) * ho * wo, 0.0);
    const bool has_bias = b.defined();
    for (int i = 0; i < n; ++i) {
        im2col(xv.data() + size_t(i) * ci * h * ww, ci, h, ww, kh, kw, stride, pad, ho, wo,
               col.data());
        double* op = out.data() + size_t(i) * co * ho * wo;
        gemm_nn(wv.data(), col.data(), op, co, ck, ho * wo, false);
        if (has_bias) {
            const double* bias = b.value().data();
            for (int c = 0; c < co; ++c) {
                double* crow = op + size_t(c) * ho * wo;
                for (int p = 0; p < ho * wo; ++p) crow[p] += bias[c];
            }
        }
    }
    std::vector<NodePtr> parents = {x.node, w.node};
    if (has_bias) parents.push_back(b.node);
    return make_node(std::move(out), std::move(parents),
                     [n, ci, h, ww, co, kh, kw, stride, pad, ho, wo, ck, has_bias](Node& self) {
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        thread_local std::vector<double> col;
        thread_local std::vector<double> dcol;
        col.assign(size_t(ck) * ho * wo, 0.0);
        dcol.assign(size_t(ck) * ho * wo, 0.0);
        for (int i = 0; i < n; ++i) {
            const double* g = self.grad.data() + size_t(i) * co * ho * wo;
            // recompute col from saved input; cheaper than caching per node
            im2col(xn.val.data() + size_t(i) * ci * h * ww, ci, h, ww, kh, kw, stride, pad, ho,
                   wo, col.data());
            if (wants(self.parents[1]))
                gemm_nt(g, col.data(), wn.grad.data(), co, ho * wo, ck, true);
            if (has_bias && wants(self.parents[2])) {
                double* db = self.parents[2]->grad.data();
                for (int c = 0; c < co; ++c) {
                    const double* crow = g + size_t(c) * ho * wo;
                    double s = 0.0;
                    for (int p = 0; p < ho * wo; ++p) s += crow[p];
                    db[c] += s;
                }
            }
            if (wants(self.parents[0])) {
                gemm_tn(wn.val.data(), g, dcol.data(), ck, co, ho * wo, false);
                col2im_acc(dcol.data(), ci, h, ww, kh, kw, stride, pad, ho, wo,
                           xn.grad.data() + size_t(i) * ci * h * ww);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// group norm
// ---------------------------------------------------------------------------

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("group_norm: need NCHW");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (c % groups != 0) throw std::invalid_argument("group_norm: groups must divide channels");
    if (gamma.value().numel() != c || beta.value().numel() != c)
        throw std::invalid_argument("group_norm: affine size mismatch");
    const int cg = c / groups;
    const int64_t gsz = int64_t(cg) * h * w;
    Tensor out(xv.shape);
    auto mean = std::make_shared<std::vector<double>>(size_t(n) * groups);
    auto istd = std::make_shared<std::vector<double>>(size_t(n) * groups);
    const double* gm = gamma.value().data();
    const double* bt = beta.value().data();
    for (int i = 0; i < n; ++i) {
        for (int g = 0; g < groups; ++g) {
            const double* xp = xv.data() + (size_t(i) * c + size_t(g) * cg) * h * w;
            double mu = 0.0;
            for (int64_t p = 0; p < gsz; ++p) mu += xp[p];
            mu /= double(gsz);
            double var = 0.0;
            for (int64_t p = 0; p < gsz; ++p) {
                const double d = xp[p] - mu;
                var += d * d;
            }
            var /= double(gsz);
            const double is = 1.0 / std::sqrt(var + eps);
            (*mean)[size_t(i) * groups + g] = mu;
            (*istd)[size_t(i) * groups + g] = is;
            double* op = out.data() + (size_t(i) * c + size_t(g) * cg) * h * w;
            for (int cc = 0; cc < cg; ++cc) {
                const double a = gm[g * cg + cc] * is;
                const double bb = bt[g * cg + cc] - mu * a;
                const double* xr = xp + size_t(cc) * h * w;
                double* orow = op + size_t(cc) * h * w;
                for (int p = 0; p < h * w; ++p) orow[p] = xr[p] * a + bb;
            }
        }
    }
    return make_node(std::move(out), {x.node, gamma.node, beta.node},
                     [n, c, h, w, groups, cg, gsz, mean, istd](Node& self) {
        Node& xn = *self.parents[0];
        Node& gn = *self.parents[1];
        Node& bn = *self.parents[2];
        const double* gmv = gn.val.data();
        for (int i = 0; i < n; ++i) {
            for (int g = 0; g < groups; ++g) {
                const double mu = (*mean)[size_t(i) * groups + g];
                const double is = (*istd)[size_t(i) * groups + g];
                const double* xp = xn.val.data() + (size_t(i) * c + size_t(g) * cg) * h * w;
                const double* gp = self.grad.data() + (size_t(i) * c + size_t(g) * cg) * h * w;
                // per-channel affine grads
                for (int cc = 0; cc < cg; ++cc) {
                    const double* xr = xp + size_t(cc) * h * w;
                    const double* gr = gp + size_t(cc) * h * w;
                    double dg = 0.0, db = 0.0;
                    for (int p = 0; p < h * w; ++p) {
                        dg += gr[p] * (xr[p] - mu) * is;
                        db += gr[p];
                    }
                    if (wants(self.parents[1])) gn.grad.data()[g * cg + cc] += dg;
                    if (wants(self.parents[2])) bn.grad.data()[g * cg + cc] += db;
                }
                if (!wants(self.parents[0])) continue;
                // dxhat = g * gamma; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int cc = 0; cc < cg; ++cc) {
                    const double gam = gmv[g * cg + cc];
                    const double* xr = xp + size_t(cc) * h * w;
                    const double* gr = gp + size_t(cc) * h * w;
                    for (int p = 0; p < h * w; ++p) {
                        const double dxh = gr[p] * gam;
                        const double xh = (xr[p] - mu) * is;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                }
                const double m1 = sum_dxh / double(gsz);
                const double m2 = sum_dxh_xh / double(gsz);
                double* dxp = xn.grad.data() + (size_t(i) * c + size_t(g) * cg) * h * w;
                for (int cc = 0; cc < cg; ++cc) {
                    const double gam = gmv[g * cg + cc];
                    const double* xr = xp + size_t(cc) * h * w;
                    const double* gr = gp + size_t(cc) * h * w;
                    double* dxr = dxp + size_t(cc) * h * w;
                    for (int p = 0; p < h * w; ++p) {
                        const double dxh = gr[p] * gam;
                        const double xh = (xr[p] - mu) * is;
                        dxr[p] += is * (dxh - m1 - xh * m2);
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// resampling / layout
// ---------------------------------------------------------------------------

Var upsample_nearest2(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("upsample_nearest2: need NCHW");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor out({n, c, h * 2, w * 2});
    for (int i = 0; i < n * c; ++i) {
        const double* xp = xv.data() + size_t(i) * h * w;
        double* op = out.data() + size_t(i) * h * w * 4;
        for (int r = 0; r < h * 2; ++r) {
            const double* xr = xp + size_t(r / 2) * w;
            double* orow = op + size_t(r) * w * 2;
            for (int cc = 0; cc < w * 2; ++cc) orow[cc] = xr[cc / 2];
        }
    }
    return make_node(std::move(out), {x.node}, [n, c, h, w](Node& self) {
        if (!wants(self.parents[0])) return;
        double* dx = self.parents[0]->grad.data();
        const double* g = self.grad.data();
        for (int i = 0; i < n * c; ++i) {
            double* dxp = dx + size_t(i) * h * w;
            const double* gp = g + size_t(i) * h * w * 4;
            for (int r = 0; r < h * 2; ++r)
                for (int cc = 0; cc < w * 2; ++cc)
                    dxp[size_t(r / 2) * w + cc / 2] += gp[size_t(r) * w * 2 + cc];
        }
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
        av.dim(3) != bv.dim(3))
        throw std::invalid_argument("concat_channels: shape mismatch " + shape_str(av.shape) +
                                    " vs " + shape_str(bv.shape));
    const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), h = av.dim(2), w = av.dim(3);
    Tensor out({n, ca + cb, h, w});
    const size_t plane = size_t(h) * w;
    for (int i = 0; i < n; ++i) {
        std::memcpy(out.data() + size_t(i) * (ca + cb) * plane, av.data() + size_t(i) * ca * plane,
                    ca * plane * sizeof(double));
        std::memcpy(out.data() + (size_t(i) * (ca + cb) + ca) * plane,
                    bv.data() + size_t(i) * cb * plane, cb * plane * sizeof(double));
    }
    return make_node(std::move(out), {a.node, b.node}, [n, ca, cb, plane](Node& self) {
        const double* g = self.grad.data();
        for (int i = 0; i < n; ++i) {
            if (wants(self.parents[0])) {
                double* da = self.parents[0]->grad.data() + size_t(i) * ca * plane;
                const double* gp = g + size_t(i) * (ca + cb) * plane;
                for (size_t p = 0; p < ca * plane; ++p) da[p] += gp[p];
            }
            if (wants(self.parents[1])) {
                double* db = self.parents[1]->grad.data() + size_t(i) * cb * plane;
                const double* gp = g + (size_t(i) * (ca + cb) + ca) * plane;
                for (size_t p = 0; p < cb * plane; ++p) db[p] += gp[p];
            }
        }
    });
}

Var add_channel_bias(const Var& x, const Var& bias) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("add_channel_bias: need NCHW");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (bias.value().numel() != c) throw std::invalid_argument("add_channel_bias: size mismatch");
    Tensor out = xv;
    const double* bb = bias.value().data();
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc) {
            double* op = out.data() + (size_t(i) * c + cc) * h * w;
            for (int p = 0; p < h * w; ++p) op[p] += bb[cc];
        }
    return make_node(std::move(out), {x.node, bias.node}, [n, c, h, w](Node& self) {
        const double* g = self.grad.data();
        if (wants(self.parents[0])) accum(*self.parents[0], g, int64_t(n) * c * h * w);
        if (wants(self.parents[1])) {
            double* db = self.parents[1]->grad.data();
            for (int i = 0; i < n; ++i)
                for (int cc = 0; cc < c; ++cc) {
                    const double* gp = g + (size_t(i) * c + cc) * h * w;
                    double s = 0.0;
                    for (int p = 0; p < h * w; ++p) s += gp[p];
                    db[cc] += s;
                }
        }
    });
}

Var softmax_last(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.ndim() < 1) throw std::invalid_argument("softmax_last: need rank >= 1");
    const int k = xv.shape.back();
    const int64_t rows = xv.numel() / k;
    Tensor out(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * k;
        double* orow = out.data() + r * k;
        double mx = xr[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            sum += orow[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < k; ++j) orow[j] *= inv;
    }
    return make_node(std::move(out), {x.node}, [rows, k](Node& self) {
        if (!wants(self.parents[0])) return;
        double* dx = self.parents[0]->grad.data();
        const double* y = self.val.data();
        const double* g = self.grad.data();
        for (int64_t r = 0; r < rows; ++r) {
            const double* yr = y + r * k;
            const double* gr = g + r * k;
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += yr[j] * gr[j];
            double* dxr = dx + r * k;
            for (int j = 0; j < k; ++j) dxr[j] += yr[j] * (gr[j] - dot);
        }
    });
}

namespace {

// (N,C,HW) <-> (N,HW,C) style transposes, fused gather/scatter
template <bool Scatter>
void transpose_inner(const double* src, double* dst, int n, int rows, int cols) {
    // maps src[(i*rows + r)*cols + c] to dst[(i*cols + c)*rows + r]
    for (int i = 0; i < n; ++i) {
        const double* s = src + size_t(i) * rows * cols;
        double* d = dst + size_t(i) * rows * cols;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                if constexpr (Scatter)
                    d[size_t(c) * rows + r] += s[size_t(r) * cols + c];
                else
                    d[size_t(c) * rows + r] = s[size_t(r) * cols + c];
            }
    }
}

} // namespace

Var nchw_to_tokens(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("nchw_to_tokens: need NCHW");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor out({n, h * w, c});
    transpose_inner<false>(xv.data(), out.data(), n, c, h * w);
    return make_node(std::move(out), {x.node}, [n, c, h, w](Node& self) {
        if (!wants(self.parents[0])) return;
        transpose_inner<true>(self.grad.data(), self.parents[0]->grad.data(), n, h * w, c);
    });
}

Var tokens_to_nchw(const Var& x, int h, int w) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 3 || xv.dim(1) != h * w)
        throw std::invalid_argument("tokens_to_nchw: shape mismatch");
    const int n = xv.dim(0), c = xv.dim(2);
    Tensor out({n, c, h, w});
    transpose_inner<false>(xv.data(), out.data(), n, h * w, c);
    return make_node(std::move(out), {x.node}, [n, c, h, w](Node& self) {
        if (!wants(self.parents[0])) return;
        transpose_inner<true>(self.grad.data(), self.parents[0]->grad.data(), n, c, h * w);
    });
}

namespace {

// (N,Q,H*Dh) <-> (N*H,Q,Dh); Dir=false gathers into split layout
template <bool Scatter>
void head_shuffle(const double* src, double* dst, int n, int q, int heads, int dh) {
    for (int i = 0; i < n; ++i)
        for (int hh = 0; hh < heads; ++hh)
            for (int qq = 0; qq < q; ++qq) {
                const size_t split_off = (size_t(i * heads + hh) * q + qq) * dh;
                const size_t joint_off = (size_t(i) * q + qq) * size_t(heads) * dh +
                                         size_t(hh) * dh;
                for (int d = 0; d < dh; ++d) {
                    if constexpr (Scatter)
                        dst[joint_off + size_t(d)] += src[split_off + size_t(d)];
                    else
                        dst[split_off + size_t(d)] = src[joint_off + size_t(d)];
                }
            }
}

} // namespace

Var split_heads(const Var& x, int heads) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 3) throw std::invalid_argument("split_heads: need (N,Q,C)");
    const int n = xv.dim(0), q = xv.dim(1), c = xv.dim(2);
    if (c % heads != 0) throw std::invalid_argument("split_heads: heads must divide channels");
    const int dh = c / heads;
    Tensor out({n * heads, q, dh});
    head_shuffle<false>(xv.data(), out.data(), n, q, heads, dh);
    return make_node(std::move(out), {x.node}, [n, q, heads, dh](Node& self) {
        if (!wants(self.parents[0])) return;
        head_shuffle<true>(self.grad.data(), self.parents[0]->grad.data(), n, q, heads, dh);
    });
}

Var merge_heads(const Var& x, int heads) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 3 || xv.dim(0) % heads != 0)
        throw std::invalid_argument("merge_heads: shape mismatch");
    const int n = xv.dim(0) / heads, q = xv.dim(1), dh = xv.dim(2);
    Tensor out({n, q, heads * dh});
    // inverse of split: scatter-free gather into joint layout
    for (int i = 0; i < n; ++i)
        for (int hh = 0; hh < heads; ++hh)
            for (int qq = 0; qq < q; ++qq) {
                const double* s = xv.data() + (size_t(i * heads + hh) * q + qq) * dh;
                double* d = out.data() + (size_t(i) * q + qq) * size_t(heads) * dh +
                            size_t(hh) * dh;
                std::memcpy(d, s, size_t(dh) * sizeof(double));
            }
    return make_node(std::move(out), {x.node}, [n, q, heads, dh](Node& self) {
        if (!wants(self.parents[0])) return;
        double* dx = self.parents[0]->grad.data();
        const double* g = self.grad.data();
        for (int i = 0; i < n; ++i)
            for (int hh = 0; hh < heads; ++hh)
                for (int qq = 0; qq < q; ++qq) {
                    double* d = dx + (size_t(i * heads + hh) * q + qq) * dh;
                    const double* s = g + (size_t(i) * q + qq) * size_t(heads) * dh +
                                      size_t(hh) * dh;
                    for (int dd = 0; dd < dh; ++dd) d[dd] += s[dd];
                }
    });
}

Var repeat_block0(const Var& x, int n) {
    const Tensor& xv = x.value();
    if (n < 1) throw std::invalid_argument("repeat_block0: n must be >= 1");
    std::vector<int> s = xv.shape;
    s[0] *= n;
    Tensor out(s);
    const int64_t blk = xv.numel();
    for (int i = 0; i < n; ++i)
        std::memcpy(out.data() + size_t(i) * blk, xv.data(), size_t(blk) * sizeof(double));
    return make_node(std::move(out), {x.node}, [n, blk](Node& self) {
        if (!wants(self.parents[0])) return;
        double* dx = self.parents[0]->grad.data();
        const double* g = self.grad.data();
        for (int i = 0; i < n; ++i)
            for (int64_t p = 0; p < blk; ++p) dx[p] += g[size_t(i) * blk + p];
    });
}

Var sum_dim1(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("sum_dim1: need rank-4");
    const int n = xv.dim(0), h = xv.dim(1), q = xv.dim(2), s = xv.dim(3);
    Tensor out({n, q, s});
    const int64_t plane = int64_t(q) * s;
    for (int i = 0; i < n; ++i) {
        double* op = out.data() + size_t(i) * plane;
        for (int j = 0; j < h; ++j) {
            const double* xp = xv.data() + (size_t(i) * h + j) * plane;
            for (int64_t p = 0; p < plane; ++p) op[p] += xp[p];
        }
    }
    return make_node(std::move(out), {x.node}, [n, h, plane](Node& self) {
        if (!wants(self.parents[0])) return;
        double* dx = self.parents[0]->grad.data();
        const double* g = self.grad.data();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < h; ++j) {
                double* dxp = dx + (size_t(i) * h + j) * plane;
                const double* gp = g + size_t(i) * plane;
                for (int64_t p = 0; p < plane; ++p) dxp[p] += gp[p];
            }
    });
}

// ---------------------------------------------------------------------------
// reductions & statistics
// ---------------------------------------------------------------------------

Var sum_all(const Var& x) {
    const int64_t n = x.value().numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += x.value()[i];
    Tensor out({1});
    out[0] = s;
    return make_node(std::move(out), {x.node}, [n](Node& self) {
        if (!wants(self.parents[0])) return;
        const double g = self.grad[0];
        double* dx = self.parents[0]->grad.data();
        for (int64_t i = 0; i < n; ++i) dx[i] += g;
    });
}

Var mean_all(const Var& x) {
    const int64_t n = x.value().numel();
    return scale(sum_all(x), 1.0 / double(n));
}

Var mse(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "mse");
    return mean_all(square(sub(a, b)));
}

Var channel_mean(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("channel_mean: need NCHW");
    const int n = xv.dim(0), c = xv.dim(1);
    const int64_t plane = int64_t(xv.dim(2)) * xv.dim(3);
    Tensor out({n, c});
    for (int i = 0; i < n * c; ++i) {
        const double* xp = xv.data() + size_t(i) * plane;
        double s = 0.0;
        for (int64_t p = 0; p < plane; ++p) s += xp[p];
        out[i] = s / double(plane);
    }
    return make_node(std::move(out), {x.node}, [n, c, plane](Node& self) {
        if (!wants(self.parents[0])) return;
        double* dx = self.parents[0]->grad.data();
        const double* g = self.grad.data();
        for (int i = 0; i < n * c; ++i) {
            const double gv = g[i] / double(plane);
            double* dxp = dx + size_t(i) * plane;
            for (int64_t p = 0; p < plane; ++p) dxp[p] += gv;
        }
    });
}

namespace {

Var std_op(const Var& x, double eps, int64_t rows, int64_t cols, std::vector<int> out_shape) {
    const Tensor& xv = x.value();
    Tensor out(std::move(out_shape));
    auto mus = std::make_shared<std::vector<double>>(size_t(rows));
    for (int64_t i = 0; i < rows; ++i) {
        const double* xp = xv.data() + i * cols;
        double mu = 0.0;
        for (int64_t p = 0; p < cols; ++p) mu += xp[p];
        mu /= double(cols);
        double var = 0.0;
        for (int64_t p = 0; p < cols; ++p) {
            const double d = xp[p] - mu;
            var += d * d;
        }
        var /= double(cols);
        (*mus)[size_t(i)] = mu;
        out[i] = std::sqrt(var + eps);
    }
    return make_node(std::move(out), {x.node}, [rows, cols, mus](Node& self) {
        if (!wants(self.parents[0])) return;
        double* dx = self.parents[0]->grad.data();
        const double* xval = self.parents[0]->val.data();
        for (int64_t i = 0; i < rows; ++i) {
            const double sg = self.grad[i];
            if (sg == 0.0) continue;
            const double mu = (*mus)[size_t(i)];
            const double sd = self.val[i];
            const double k = sg / (double(cols) * sd);
            const double* xp = xval + i * cols;
            double* dxp = dx + i * cols;
            for (int64_t p = 0; p < cols; ++p) dxp[p] += k * (xp[p] - mu);
        }
    });
}

} // namespace

Var channel_std(const Var& x, double eps) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("channel_std: need NCHW");
    const int n = xv.dim(0), c = xv.dim(1);
    const int64_t plane = int64_t(xv.dim(2)) * xv.dim(3);
    return std_op(x, eps, int64_t(n) * c, plane, {n, c});
}

Var global_mean(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("global_mean: need NCHW");
    const int n = xv.dim(0);
    const int64_t cols = xv.numel() / n;
    Tensor out({n, 1});
    for (int i = 0; i < n; ++i) {
        const double* xp = xv.data() + size_t(i) * cols;
        double s = 0.0;
        for (int64_t p = 0; p < cols; ++p) s += xp[p];
        out[i] = s / double(cols);
    }
    return make_node(std::move(out), {x.node}, [n, cols](Node& self) {
        if (!wants(self.parents[0])) return;
        double* dx = self.parents[0]->grad.data();
        for (int i = 0; i < n; ++i) {
            const double gv = self.grad[i] / double(cols);
            double* dxp = dx + size_t(i) * cols;
            for (int64_t p = 0; p < cols; ++p) dxp[p] += gv;
        }
    });
}

Var global_std(const Var& x, double eps) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("global_std: need NCHW");
    const int n = xv.dim(0);
    return std_op(x, eps, n, xv.numel() / n, {n, 1});
}

Var reshape(const Var& x, std::vector<int> s) {
    Tensor out = x.value().reshaped(std::move(s));
    const int64_t n = out.numel();
    return make_node(std::move(out), {x.node}, [n](Node& self) {
        if (wants(self.parents[0])) accum(*self.parents[0], self.grad.data(), n);
    });
}

Var take_row(const Var& x, int row) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 2) throw std::invalid_argument("take_row: need rank-2");
    const int r = xv.dim(0), d = xv.dim(1);
    if (row < 0 || row >= r) throw std::out_of_range("take_row: row out of range");
    Tensor out({d});
    std::memcpy(out.data(), xv.data() + size_t(row) * d, size_t(d) * sizeof(double));
    return make_node(std::move(out), {x.node}, [row, d](Node& self) {
        if (!wants(self.parents[0])) return;
        double* dst = self.parents[0]->grad.data() + size_t(row) * d;
        const double* g = self.grad.data();
        for (int p = 0; p < d; ++p) dst[p] += g[p];
    });
}

Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
    const int d = int(rows[0].value().numel());
    const int s = int(rows.size());
    Tensor out({s, d});
    std::vector<NodePtr> parents;
    parents.reserve(rows.size());
    for (int i = 0; i < s; ++i) {
        if (rows[size_t(i)].value().numel() != d)
            throw std::invalid_argument("stack_rows: row width mismatch");
        std::memcpy(out.data() + size_t(i) * d, rows[size_t(i)].value().data(),
                    size_t(d) * sizeof(double));
        parents.push_back(rows[size_t(i)].node);
    }
    return make_node(std::move(out), std::move(parents), [s, d](Node& self) {
        for (int i = 0; i < s; ++i) {
            if (!wants(self.parents[size_t(i)])) continue;
            double* dst = self.parents[size_t(i)]->grad.data();
            const double* g = self.grad.data() + size_t(i) * d;
            for (int p = 0; p < d; ++p) dst[p] += g[p];
        }
    });
}

} // namespace apt
