#include "sparsebridge/autograd.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <unordered_set>

#include "sparsebridge/errors.hpp"

namespace sparsebridge::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

bool any_requires(std::initializer_list<const Var *> vars) {
    if (!g_grad_enabled) return false;
    for (const Var *v : vars)
        if ((*v)->requires_grad) return true;
    return false;
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node &)> fn, bool track) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (track) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return node;
}

void check_nchw(const Tensor &t, const char *op) {
    if (t.rank() != 4) throw InvalidArgument(std::string(op) + ": expected NCHW tensor, got " + t.shape_string());
}

// Unfold one sample [C,H,W] into [C*k*k, H*W] with zero padding k/2.
void im2col(const double *src, int c, int h, int w, int k, double *cols) {
    const int pad = k / 2;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double *row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
                const double *plane = src + static_cast<std::size_t>(ci) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    double *dst = row + static_cast<std::size_t>(y) * w;
                    if (sy < 0 || sy >= h) {
                        std::fill(dst, dst + w, 0.0);
                        continue;
                    }
                    const double *srow = plane + static_cast<std::size_t>(sy) * w;
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + kx - pad;
                        dst[x] = (sx < 0 || sx >= w) ? 0.0 : srow[sx];
                    }
                }
            }
        }
    }
}

void col2im_add(const double *cols, int c, int h, int w, int k, double *dst) {
    const int pad = k / 2;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int ci = 0; ci < c; ++ci) {
        double *plane = dst + static_cast<std::size_t>(ci) * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double *row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    const double *srow = row + static_cast<std::size_t>(y) * w;
                    double *drow = plane + static_cast<std::size_t>(sy) * w;
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + kx - pad;
                        if (sx >= 0 && sx < w) drow[sx] += srow[x];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor &Node::ensure_grad() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
}

Var constant(Tensor value) { return make_node(std::move(value), {}, nullptr, false); }

Var parameter(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return node;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var conv2d(const Var &x, const Var &w, const Var &b) {
    const Tensor &xv = x->value;
    const Tensor &wv = w->value;
    check_nchw(xv, "conv2d");
    if (wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3) || wv.dim(2) % 2 == 0)
        throw InvalidArgument("conv2d: weight " + wv.shape_string() + " incompatible with input " + xv.shape_string());
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    const int o = wv.dim(0), k = wv.dim(2);
    require(b->value.size() == static_cast<std::size_t>(o), "conv2d: bias size mismatch");
    const int ckk = c * k * k;
    const int hw = h * wd;

    Tensor out({n, o, h, wd});
    Buffer cols(k == 1 ? 0 : static_cast<std::size_t>(ckk) * hw);
    ConstMapMat wm(wv.data(), o, ckk);
    Eigen::Map<const Eigen::VectorXd> bias(b->value.data(), o);
    for (int s = 0; s < n; ++s) {
        const double *src = xv.data() + static_cast<std::size_t>(s) * c * hw;
        if (k != 1) im2col(src, c, h, wd, k, cols.data());
        ConstMapMat cm(k == 1 ? src : cols.data(), ckk, hw);
        MapMat om(out.data() + static_cast<std::size_t>(s) * o * hw, o, hw);
        om.noalias() = wm * cm;
        om.colwise() += bias;
    }

    const bool track = any_requires({&x, &w, &b});
    return make_node(
        std::move(out), {x, w, b},
        [n, c, h, wd, o, k, ckk, hw](Node &self) {
            auto &xn = self.parents[0];
            auto &wn = self.parents[1];
            auto &bn = self.parents[2];
            ConstMapMat wm(wn->value.data(), o, ckk);
            Buffer cols(k == 1 ? 0 : static_cast<std::size_t>(ckk) * hw);
            Buffer dcols(static_cast<std::size_t>(ckk) * hw);
            for (int s = 0; s < n; ++s) {
                ConstMapMat dy(self.grad.data() + static_cast<std::size_t>(s) * o * hw, o, hw);
                const double *src = xn->value.data() + static_cast<std::size_t>(s) * c * hw;
                if (wn->requires_grad) {
                    if (k != 1) im2col(src, c, h, wd, k, cols.data());
                    ConstMapMat cm(k == 1 ? src : cols.data(), ckk, hw);
                    MapMat dw(wn->ensure_grad().data(), o, ckk);
                    dw.noalias() += dy * cm.transpose();
                }
                if (bn->requires_grad) {
                    Eigen::Map<Eigen::VectorXd> db(bn->ensure_grad().data(), o);
                    db += dy.rowwise().sum();
                }
                if (xn->requires_grad) {
                    double *dx = xn->ensure_grad().data() + static_cast<std::size_t>(s) * c * hw;
                    if (k == 1) {
                        MapMat dxm(dx, c, hw);
                        dxm.noalias() += wm.transpose() * dy;
                    } else {
                        MapMat dc(dcols.data(), ckk, hw);
                        dc.noalias() = wm.transpose() * dy;
                        col2im_add(dcols.data(), c, h, wd, k, dx);
                    }
                }
            }
        },
        track);
}

Var add(const Var &a, const Var &b) {
    require(a->value.same_shape(b->value), "add: shape mismatch " + a->value.shape_string() + " vs " + b->value.shape_string());
    Tensor out = a->value;
    out += b->value;
    return make_node(
        std::move(out), {a, b},
        [](Node &self) {
            for (auto &p : self.parents)
                if (p->requires_grad) p->ensure_grad() += self.grad;
        },
        any_requires({&a, &b}));
}

Var add_channel(const Var &x, const Var &v) {
    const Tensor &xv = x->value;
    check_nchw(xv, "add_channel");
    const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    require(v->value.rank() == 2 && v->value.dim(0) == n && v->value.dim(1) == c, "add_channel: offset shape mismatch");
    Tensor out = xv;
    for (int s = 0; s < n; ++s)
        for (int ci = 0; ci < c; ++ci) {
            const double off = v->value[static_cast<std::size_t>(s) * c + ci];
            double *p = out.data() + (static_cast<std::size_t>(s) * c + ci) * hw;
            for (int i = 0; i < hw; ++i) p[i] += off;
        }
    return make_node(
        std::move(out), {x, v},
        [n, c, hw](Node &self) {
            if (self.parents[0]->requires_grad) self.parents[0]->ensure_grad() += self.grad;
            if (self.parents[1]->requires_grad) {
                Tensor &dv = self.parents[1]->ensure_grad();
                for (int s = 0; s < n; ++s)
                    for (int ci = 0; ci < c; ++ci) {
                        const double *g = self.grad.data() + (static_cast<std::size_t>(s) * c + ci) * hw;
                        double acc = 0.0;
                        for (int i = 0; i < hw; ++i) acc += g[i];
                        dv[static_cast<std::size_t>(s) * c + ci] += acc;
                    }
            }
        },
        any_requires({&x, &v}));
}

Var silu(const Var &x) {
    Tensor out = x->value;
    for (auto &v : out.values()) v = v / (1.0 + std::exp(-v));
    return make_node(
        std::move(out), {x},
        [](Node &self) {
            auto &xn = self.parents[0];
            Tensor &dx = xn->ensure_grad();
            for (std::size_t i = 0; i < dx.size(); ++i) {
                const double z = xn->value[i];
                const double sg = 1.0 / (1.0 + std::exp(-z));
                dx[i] += self.grad[i] * sg * (1.0 + z * (1.0 - sg));
            }
        },
        any_requires({&x}));
}

Var avg_pool2(const Var &x) {
    const Tensor &xv = x->value;
    check_nchw(xv, "avg_pool2");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    require(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size " + xv.shape_string());
    const int ho = h / 2, wo = w / 2;
    Tensor out({n, c, ho, wo});
    for (int p = 0; p < n * c; ++p) {
        const double *src = xv.data() + static_cast<std::size_t>(p) * h * w;
        double *dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) {
                const double *r0 = src + (2 * y) * w + 2 * xx;
                dst[y * wo + xx] = 0.25 * (r0[0] + r0[1] + r0[w] + r0[w + 1]);
            }
    }
    return make_node(
        std::move(out), {x},
        [n, c, h, w, ho, wo](Node &self) {
            Tensor &dx = self.parents[0]->ensure_grad();
            for (int p = 0; p < n * c; ++p) {
                const double *g = self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
                double *d = dx.data() + static_cast<std::size_t>(p) * h * w;
                for (int y = 0; y < ho; ++y)
                    for (int xx = 0; xx < wo; ++xx) {
                        const double q = 0.25 * g[y * wo + xx];
                        double *r0 = d + (2 * y) * w + 2 * xx;
                        r0[0] += q;
                        r0[1] += q;
                        r0[w] += q;
                        r0[w + 1] += q;
                    }
            }
        },
        any_requires({&x}));
}

Var upsample2(const Var &x) {
    const Tensor &xv = x->value;
    check_nchw(xv, "upsample2");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int ho = 2 * h, wo = 2 * w;
    Tensor out({n, c, ho, wo});
    for (int p = 0; p < n * c; ++p) {
        const double *src = xv.data() + static_cast<std::size_t>(p) * h * w;
        double *dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
    }
    return make_node(
        std::move(out), {x},
        [n, c, h, w, ho, wo](Node &self) {
            Tensor &dx = self.parents[0]->ensure_grad();
            for (int p = 0; p < n * c; ++p) {
                const double *g = self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
                double *d = dx.data() + static_cast<std::size_t>(p) * h * w;
                for (int y = 0; y < ho; ++y)
                    for (int xx = 0; xx < wo; ++xx) d[(y / 2) * w + xx / 2] += g[y * wo + xx];
            }
        },
        any_requires({&x}));
}

Var concat_channels(const Var &a, const Var &b) {
    const Tensor &av = a->value;
    const Tensor &bv = b->value;
    check_nchw(av, "concat_channels");
    check_nchw(bv, "concat_channels");
    require(av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
            "concat_channels: incompatible shapes " + av.shape_string() + " and " + bv.shape_string());
    const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), hw = av.dim(2) * av.dim(3);
    Tensor out({n, ca + cb, av.dim(2), av.dim(3)});
    for (int s = 0; s < n; ++s) {
        double *dst = out.data() + static_cast<std::size_t>(s) * (ca + cb) * hw;
        std::copy_n(av.data() + static_cast<std::size_t>(s) * ca * hw, ca * hw, dst);
        std::copy_n(bv.data() + static_cast<std::size_t>(s) * cb * hw, cb * hw, dst + ca * hw);
    }
    return make_node(
        std::move(out), {a, b},
        [n, ca, cb, hw](Node &self) {
            auto &an = self.parents[0];
            auto &bn = self.parents[1];
            for (int s = 0; s < n; ++s) {
                const double *g = self.grad.data() + static_cast<std::size_t>(s) * (ca + cb) * hw;
                if (an->requires_grad) {
                    double *d = an->ensure_grad().data() + static_cast<std::size_t>(s) * ca * hw;
                    for (int i = 0; i < ca * hw; ++i) d[i] += g[i];
                }
                if (bn->requires_grad) {
                    double *d = bn->ensure_grad().data() + static_cast<std::size_t>(s) * cb * hw;
                    for (int i = 0; i < cb * hw; ++i) d[i] += g[ca * hw + i];
                }
            }
        },
        any_requires({&a, &b}));
}

Var linear(const Var &x, const Var &w, const Var &b) {
    const Tensor &xv = x->value;
    const Tensor &wv = w->value;
    require(xv.rank() == 2 && wv.rank() == 2 && wv.dim(1) == xv.dim(1), "linear: shape mismatch " + xv.shape_string() + " x " + wv.shape_string());
    const int n = xv.dim(0), d = xv.dim(1), o = wv.dim(0);
    require(b->value.size() == static_cast<std::size_t>(o), "linear: bias size mismatch");
    Tensor out({n, o});
    ConstMapMat xm(xv.data(), n, d);
    ConstMapMat wm(wv.data(), o, d);
    MapMat om(out.data(), n, o);
    om.noalias() = xm * wm.transpose();
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), o);
    return make_node(
        std::move(out), {x, w, b},
        [n, d, o](Node &self) {
            auto &xn = self.parents[0];
            auto &wn = self.parents[1];
            auto &bn = self.parents[2];
            ConstMapMat g(self.grad.data(), n, o);
            if (xn->requires_grad) {
                MapMat dx(xn->ensure_grad().data(), n, d);
                dx.noalias() += g * ConstMapMat(wn->value.data(), o, d);
            }
            if (wn->requires_grad) {
                MapMat dw(wn->ensure_grad().data(), o, d);
                dw.noalias() += g.transpose() * ConstMapMat(xn->value.data(), n, d);
            }
            if (bn->requires_grad) {
                Eigen::Map<Eigen::RowVectorXd> db(bn->ensure_grad().data(), o);
                db += g.colwise().sum();
            }
        },
        any_requires({&x, &w, &b}));
}

Var global_avg_pool(const Var &x) {
    const Tensor &xv = x->value;
    check_nchw(xv, "global_avg_pool");
    const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor out({n, c});
    for (int p = 0; p < n * c; ++p) {
        const double *src = xv.data() + static_cast<std::size_t>(p) * hw;
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += src[i];
        out[p] = acc / hw;
    }
    return make_node(
        std::move(out), {x},
        [n, c, hw](Node &self) {
            Tensor &dx = self.parents[0]->ensure_grad();
            for (int p = 0; p < n * c; ++p) {
                const double g = self.grad[p] / hw;
                double *d = dx.data() + static_cast<std::size_t>(p) * hw;
                for (int i = 0; i < hw; ++i) d[i] += g;
            }
        },
        any_requires({&x}));
}

void backward(const Var &out, const Tensor &seed) { backward({{out, seed}}); }

void backward(const std::vector<std::pair<Var, Tensor>> &roots) {
    // Iterative post-order DFS over all roots gives a topological order.
    std::vector<Node *> order;
    std::unordered_set<Node *> visited;
    for (const auto &[root, seed] : roots) {
        require(seed.same_shape(root->value),
                "backward: seed shape " + seed.shape_string() + " != output " + root->value.shape_string());
        if (!root->requires_grad || !visited.insert(root.get()).second) continue;
        std::vector<std::pair<Node *, std::size_t>> stack{{root.get(), 0}};
        while (!stack.empty()) {
            auto &[node, next] = stack.back();
            if (next < node->parents.size()) {
                Node *p = node->parents[next++].get();
                if (p->requires_grad && p->backward_fn && visited.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    for (const auto &[root, seed] : roots)
        if (root->requires_grad) root->ensure_grad() += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node *node = *it;
        if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
    }
    // Release intermediate gradients so repeated backward passes start clean.
    for (Node *node : order)
        if (node->backward_fn) node->grad = Tensor();
}

} // namespace sparsebridge::ag
