#include "dtlsd/autograd.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <utility>

namespace dtlsd::ag {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    Tensor::shape_str(a.shape()) + " vs " +
                                    Tensor::shape_str(b.shape()));
    }
}

void check_same_tape(Var a, Var b, const char* op) {
    if (a.tape != b.tape) {
        throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
    }
}

void axpy(Tensor& dst, const Tensor& src, double s = 1.0) {
    double* d = dst.data();
    const double* x = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s * x[i];
}

}  // namespace

int Tape::check(Var v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
        throw std::invalid_argument("Tape: var does not belong to this tape");
    }
    return v.id;
}

Var Tape::leaf(Parameter& p) {
    Node n;
    n.value = p.value;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    param_leaves_.push_back(static_cast<int>(nodes_.size()) - 1);
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor v) {
    Node n;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Tensor v) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::make_node(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    for (Var p : parents) {
        check(p);
        if (nodes_[p.id].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
    n.touched = true;
    return n.grad;
}

Tensor* Tape::maybe_grad(int id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    return &grad_buf(id);
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_[check(v)];
    static const Tensor kEmpty;
    if (n.grad.size() != n.value.size()) return kEmpty;
    return n.grad;
}

void Tape::backward(Var loss) {
    const int root = check(loss);
    if (nodes_[root].value.size() != 1) {
        throw std::invalid_argument("Tape::backward: loss must be a scalar");
    }
    grad_buf(root)[0] = 1.0;
    for (int i = root; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.touched || !n.backward) continue;
        n.backward(*this, i);
    }
    for (int id : param_leaves_) {
        Node& n = nodes_[id];
        if (n.touched) axpy(n.param->grad, n.grad);
    }
}

void Tape::clear() {
    nodes_.clear();
    param_leaves_.clear();
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace {

/// y[i] = f(x[i]); backward dX += dY * dfdx(x, y).
template <typename Fwd, typename Dfdx>
Var unary_op(Var a, Fwd fwd, Dfdx dfdx, const char*) {
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
    int aid = a.id;
    return t.make_node(std::move(y), {a}, [aid, dfdx](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        Tensor* da = tp.maybe_grad(aid);
        if (!da) return;
        const Tensor& x = tp.node_value(aid);
        const Tensor& yv = tp.node_value(self);
        double* d = da->data();
        for (std::size_t i = 0; i < x.size(); ++i) d[i] += dy[i] * dfdx(x[i], yv[i]);
    });
}

}  // namespace

Var add(Var a, Var b) {
    check_same_tape(a, b, "add");
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    check_same_shape(x, y, "add");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    int aid = a.id, bid = b.id;
    return t.make_node(std::move(out), {a, b}, [aid, bid](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        if (Tensor* da = tp.maybe_grad(aid)) axpy(*da, dy);
        if (Tensor* db = tp.maybe_grad(bid)) axpy(*db, dy);
    });
}

Var sub(Var a, Var b) {
    check_same_tape(a, b, "sub");
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    check_same_shape(x, y, "sub");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
    int aid = a.id, bid = b.id;
    return t.make_node(std::move(out), {a, b}, [aid, bid](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        if (Tensor* da = tp.maybe_grad(aid)) axpy(*da, dy);
        if (Tensor* db = tp.maybe_grad(bid)) axpy(*db, dy, -1.0);
    });
}

Var mul(Var a, Var b) {
    check_same_tape(a, b, "mul");
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    check_same_shape(x, y, "mul");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    int aid = a.id, bid = b.id;
    return t.make_node(std::move(out), {a, b}, [aid, bid](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        const Tensor& xv = tp.node_value(aid);
        const Tensor& yv = tp.node_value(bid);
        if (Tensor* da = tp.maybe_grad(aid)) {
            double* d = da->data();
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * yv[i];
        }
        if (Tensor* db = tp.maybe_grad(bid)) {
            double* d = db->data();
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * xv[i];
        }
    });
}

Var scale(Var a, double s) {
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = s * x[i];
    int aid = a.id;
    return t.make_node(std::move(out), {a}, [aid, s](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        if (Tensor* da = tp.maybe_grad(aid)) axpy(*da, dy, s);
    });
}

Var add_scalar(Var a, double c) {
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + c;
    int aid = a.id;
    return t.make_node(std::move(out), {a}, [aid](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        if (Tensor* da = tp.maybe_grad(aid)) axpy(*da, dy);
    });
}

Var neg(Var a) { return scale(a, -1.0); }

Var log(Var a) {
    return unary_op(
        a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; }, "log");
}

Var exp(Var a) {
    return unary_op(
        a, [](double x) { return std::exp(x); },
        [](double, double y) { return y; }, "exp");
}

Var sigmoid(Var a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Var gelu(Var a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return unary_op(
        a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [=](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        },
        "gelu");
}

Var abs(Var a) {
    return unary_op(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }, "abs");
}

Var clamp(Var a, double lo, double hi) {
    return unary_op(
        a, [=](double x) { return std::min(std::max(x, lo), hi); },
        [=](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; }, "clamp");
}

Var logit(Var a, double eps) {
    return unary_op(
        a,
        [=](double x) {
            const double c = std::min(std::max(x, eps), 1.0 - eps);
            return std::log(c / (1.0 - c));
        },
        [=](double x, double) {
            if (x <= eps || x >= 1.0 - eps) return 0.0;
            return 1.0 / (x * (1.0 - x));
        },
        "logit");
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
    check_same_tape(a, b, "matmul");
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " +
                                    Tensor::shape_str(x.shape()) + " * " +
                                    Tensor::shape_str(y.shape()));
    }
    const std::size_t n = x.dim(0), k = x.dim(1), m = y.dim(1);
    Tensor out({n, m});
    mm_nn(x.data(), y.data(), out.data(), n, k, m, false);
    int aid = a.id, bid = b.id;
    return t.make_node(std::move(out), {a, b}, [aid, bid, n, k, m](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        const Tensor& xv = tp.node_value(aid);
        const Tensor& yv = tp.node_value(bid);
        if (Tensor* da = tp.maybe_grad(aid)) mm_nt(dy.data(), yv.data(), da->data(), n, m, k, true);
        if (Tensor* db = tp.maybe_grad(bid)) mm_tn(xv.data(), dy.data(), db->data(), k, n, m, true);
    });
}

Var matmul_nt(Var a, Var b) {
    check_same_tape(a, b, "matmul_nt");
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) {
        throw std::invalid_argument("matmul_nt: incompatible shapes " +
                                    Tensor::shape_str(x.shape()) + " * " +
                                    Tensor::shape_str(y.shape()) + "^T");
    }
    const std::size_t n = x.dim(0), k = x.dim(1), m = y.dim(0);
    Tensor out({n, m});
    mm_nt(x.data(), y.data(), out.data(), n, k, m, false);
    int aid = a.id, bid = b.id;
    return t.make_node(std::move(out), {a, b}, [aid, bid, n, k, m](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        const Tensor& xv = tp.node_value(aid);
        const Tensor& yv = tp.node_value(bid);
        // C = A B^T: dA = dC B, dB = dC^T A.
        if (Tensor* da = tp.maybe_grad(aid)) mm_nn(dy.data(), yv.data(), da->data(), n, m, k, true);
        if (Tensor* db = tp.maybe_grad(bid)) mm_tn(dy.data(), xv.data(), db->data(), m, n, k, true);
    });
}

Var linear(Var x, Var w, Var b) {
    check_same_tape(x, w, "linear");
    check_same_tape(x, b, "linear");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const Tensor& bv = t.value(b);
    if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != wv.dim(0) ||
        wv.dim(1) != bv.dim(0)) {
        throw std::invalid_argument("linear: incompatible shapes " +
                                    Tensor::shape_str(xv.shape()) + " * " +
                                    Tensor::shape_str(wv.shape()) + " + " +
                                    Tensor::shape_str(bv.shape()));
    }
    const std::size_t n = xv.dim(0), din = xv.dim(1), dout = wv.dim(1);
    Tensor out({n, dout});
    for (std::size_t i = 0; i < n; ++i) {
        double* row = out.data() + i * dout;
        for (std::size_t j = 0; j < dout; ++j) row[j] = bv[j];
    }
    mm_nn(xv.data(), wv.data(), out.data(), n, din, dout, true);
    int xid = x.id, wid = w.id, bid = b.id;
    return t.make_node(std::move(out), {x, w, b}, [xid, wid, bid, n, din, dout](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        const Tensor& xv = tp.node_value(xid);
        const Tensor& wv = tp.node_value(wid);
        if (Tensor* dx = tp.maybe_grad(xid)) mm_nt(dy.data(), wv.data(), dx->data(), n, dout, din, true);
        if (Tensor* dw = tp.maybe_grad(wid)) mm_tn(xv.data(), dy.data(), dw->data(), din, n, dout, true);
        if (Tensor* db = tp.maybe_grad(bid)) {
            double* d = db->data();
            for (std::size_t i = 0; i < n; ++i) {
                const double* row = dy.data() + i * dout;
                for (std::size_t j = 0; j < dout; ++j) d[j] += row[j];
            }
        }
    });
}

Var softmax(Var x, std::size_t axis) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    Tensor y = dtlsd::softmax(xv, axis);
    const auto& shape = xv.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t len = shape[axis];
    int xid = x.id;
    return t.make_node(std::move(y), {x}, [xid, outer, inner, len](Tape& tp, int self) {
        Tensor* dx = tp.maybe_grad(xid);
        if (!dx) return;
        const Tensor& dy = tp.grad_buf(self);
        const Tensor& yv = tp.node_value(self);
        for (std::size_t u = 0; u < outer; ++u) {
            for (std::size_t v = 0; v < inner; ++v) {
                const std::size_t base = u * len * inner + v;
                double dot = 0.0;
                for (std::size_t s = 0; s < len; ++s) {
                    dot += dy[base + s * inner] * yv[base + s * inner];
                }
                for (std::size_t s = 0; s < len; ++s) {
                    const std::size_t q = base + s * inner;
                    (*dx)[q] += yv[q] * (dy[q] - dot);
                }
            }
        }
    });
}

Var masked_softmax_rows(Var scores, std::vector<std::uint8_t> blocked) {
    Tape& t = *scores.tape;
    const Tensor& s = t.value(scores);
    if (s.rank() != 2) throw std::invalid_argument("masked_softmax_rows: need 2D scores");
    const std::size_t n = s.dim(0), m = s.dim(1);
    if (blocked.size() != n * m) {
        throw std::invalid_argument("masked_softmax_rows: mask size mismatch");
    }
    Tensor y({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = s.data() + i * m;
        const std::uint8_t* brow = blocked.data() + i * m;
        double* orow = y.data() + i * m;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j) {
            if (!brow[j]) mx = std::max(mx, row[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw std::invalid_argument("masked_softmax_rows: fully blocked row");
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (brow[j]) {
                orow[j] = 0.0;
            } else {
                orow[j] = std::exp(row[j] - mx);
                sum += orow[j];
            }
        }
        const double norm = 1.0 / sum;
        for (std::size_t j = 0; j < m; ++j) orow[j] *= norm;
    }
    int sid = scores.id;
    return t.make_node(std::move(y), {scores}, [sid, n, m](Tape& tp, int self) {
        Tensor* dx = tp.maybe_grad(sid);
        if (!dx) return;
        const Tensor& dy = tp.grad_buf(self);
        const Tensor& yv = tp.node_value(self);
        // blocked entries have y == 0, so the generic softmax backward is exact
        for (std::size_t i = 0; i < n; ++i) {
            const double* drow = dy.data() + i * m;
            const double* yrow = yv.data() + i * m;
            double* xrow = dx->data() + i * m;
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += drow[j] * yrow[j];
            for (std::size_t j = 0; j < m; ++j) xrow[j] += yrow[j] * (drow[j] - dot);
        }
    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    check_same_tape(x, gain, "layer_norm");
    check_same_tape(x, bias, "layer_norm");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& g = t.value(gain);
    const Tensor& b = t.value(bias);
    if (xv.rank() != 2 || g.rank() != 1 || b.rank() != 1 || g.dim(0) != xv.dim(1) ||
        b.dim(0) != xv.dim(1)) {
        throw std::invalid_argument("layer_norm: incompatible shapes");
    }
    const std::size_t n = xv.dim(0), d = xv.dim(1);
    Tensor y({n, d});
    Tensor xhat({n, d});
    Tensor inv_std({n});
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * is;
            xhat.at2(i, j) = h;
            y.at2(i, j) = h * g[j] + b[j];
        }
    }
    int xid = x.id, gid = gain.id, bid = bias.id;
    auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
    auto istd_p = std::make_shared<Tensor>(std::move(inv_std));
    return t.make_node(std::move(y), {x, gain, bias},
                       [xid, gid, bid, n, d, xhat_p, istd_p](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        const Tensor& g = tp.node_value(gid);
        if (Tensor* dg = tp.maybe_grad(gid)) {
            double* p = dg->data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < d; ++j) p[j] += dy.at2(i, j) * xhat_p->at2(i, j);
            }
        }
        if (Tensor* db = tp.maybe_grad(bid)) {
            double* p = db->data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < d; ++j) p[j] += dy.at2(i, j);
            }
        }
        if (Tensor* dx = tp.maybe_grad(xid)) {
            const double dn = static_cast<double>(d);
            for (std::size_t i = 0; i < n; ++i) {
                double sum_dh = 0.0, sum_dh_h = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dh = dy.at2(i, j) * g[j];
                    sum_dh += dh;
                    sum_dh_h += dh * xhat_p->at2(i, j);
                }
                const double is = (*istd_p)[i];
                for (std::size_t j = 0; j < d; ++j) {
                    const double dh = dy.at2(i, j) * g[j];
                    dx->at2(i, j) +=
                        is * (dh - sum_dh / dn - xhat_p->at2(i, j) * sum_dh_h / dn);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// shape / selection
// ---------------------------------------------------------------------------

Var reshape(Var a, std::vector<std::size_t> shape) {
    Tape& t = *a.tape;
    Tensor out = t.value(a).reshaped(shape);
    int aid = a.id;
    return t.make_node(std::move(out), {a}, [aid](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        if (Tensor* da = tp.maybe_grad(aid)) axpy(*da, dy);
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    Tape& t = *parts[0].tape;
    const std::size_t cols = t.value(parts[0]).dim(1);
    std::size_t rows = 0;
    for (Var p : parts) {
        check_same_tape(parts[0], p, "concat_rows");
        const Tensor& v = t.value(p);
        if (v.rank() != 2 || v.dim(1) != cols) {
            throw std::invalid_argument("concat_rows: column mismatch");
        }
        rows += v.dim(0);
    }
    Tensor out({rows, cols});
    std::size_t at = 0;
    std::vector<int> ids;
    std::vector<std::size_t> offsets;
    for (Var p : parts) {
        const Tensor& v = t.value(p);
        ids.push_back(p.id);
        offsets.push_back(at);
        for (std::size_t i = 0; i < v.size(); ++i) out[at * cols + i] = v[i];
        at += v.dim(0);
    }
    return t.make_node(std::move(out), parts, [ids, offsets, cols](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        for (std::size_t s = 0; s < ids.size(); ++s) {
            Tensor* dp = tp.maybe_grad(ids[s]);
            if (!dp) continue;
            const double* src = dy.data() + offsets[s] * cols;
            double* dst = dp->data();
            for (std::size_t i = 0; i < dp->size(); ++i) dst[i] += src[i];
        }
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    Tape& t = *a.tape;
    const Tensor& v = t.value(a);
    if (v.rank() != 2 || begin > end || end > v.dim(0)) {
        throw std::invalid_argument("slice_rows: bad range");
    }
    const std::size_t cols = v.dim(1);
    Tensor out({end - begin, cols});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[begin * cols + i];
    int aid = a.id;
    return t.make_node(std::move(out), {a}, [aid, begin, cols](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        if (Tensor* da = tp.maybe_grad(aid)) {
            double* dst = da->data() + begin * cols;
            for (std::size_t i = 0; i < dy.size(); ++i) dst[i] += dy[i];
        }
    });
}

Var gather_rows(Var a, std::vector<std::size_t> idx) {
    Tape& t = *a.tape;
    const Tensor& v = t.value(a);
    if (v.rank() != 2) throw std::invalid_argument("gather_rows: need 2D input");
    const std::size_t cols = v.dim(1);
    Tensor out({idx.size(), cols});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= v.dim(0)) throw std::invalid_argument("gather_rows: index out of range");
        for (std::size_t j = 0; j < cols; ++j) out.at2(i, j) = v.at2(idx[i], j);
    }
    int aid = a.id;
    return t.make_node(std::move(out), {a}, [aid, idx, cols](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        if (Tensor* da = tp.maybe_grad(aid)) {
            for (std::size_t i = 0; i < idx.size(); ++i) {
                double* dst = da->data() + idx[i] * cols;
                const double* src = dy.data() + i * cols;
                for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
            }
        }
    });
}

Var swap_endpoints(Var a, std::vector<std::uint8_t> swap) {
    Tape& t = *a.tape;
    const Tensor& v = t.value(a);
    if (v.rank() != 2 || v.dim(1) != 4) {
        throw std::invalid_argument("swap_endpoints: need [n,4] input");
    }
    if (swap.size() != v.dim(0)) {
        throw std::invalid_argument("swap_endpoints: flag count mismatch");
    }
    const std::size_t n = v.dim(0);
    Tensor out({n, 4});
    for (std::size_t i = 0; i < n; ++i) {
        const double* src = v.data() + i * 4;
        double* dst = out.data() + i * 4;
        if (swap[i]) {
            dst[0] = src[2]; dst[1] = src[3]; dst[2] = src[0]; dst[3] = src[1];
        } else {
            dst[0] = src[0]; dst[1] = src[1]; dst[2] = src[2]; dst[3] = src[3];
        }
    }
    int aid = a.id;
    return t.make_node(std::move(out), {a}, [aid, swap, n](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        if (Tensor* da = tp.maybe_grad(aid)) {
            for (std::size_t i = 0; i < n; ++i) {
                const double* g = dy.data() + i * 4;
                double* dst = da->data() + i * 4;
                if (swap[i]) {
                    dst[2] += g[0]; dst[3] += g[1]; dst[0] += g[2]; dst[1] += g[3];
                } else {
                    dst[0] += g[0]; dst[1] += g[1]; dst[2] += g[2]; dst[3] += g[3];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var sum(Var a) {
    Tape& t = *a.tape;
    const Tensor& v = t.value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i];
    int aid = a.id;
    return t.make_node(Tensor::scalar(s), {a}, [aid](Tape& tp, int self) {
        const double dy = tp.grad_buf(self)[0];
        if (Tensor* da = tp.maybe_grad(aid)) {
            double* d = da->data();
            for (std::size_t i = 0; i < da->size(); ++i) d[i] += dy;
        }
    });
}

Var mean(Var a) {
    Tape& t = *a.tape;
    const std::size_t n = t.value(a).size();
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

Var conv3x3_s2(Var x, Var k, Var b) {
    check_same_tape(x, k, "conv3x3_s2");
    check_same_tape(x, b, "conv3x3_s2");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& kv = t.value(k);
    const Tensor& bv = t.value(b);
    if (xv.rank() != 3 || kv.rank() != 4 || kv.dim(0) != 3 || kv.dim(1) != 3 ||
        kv.dim(2) != xv.dim(2) || bv.rank() != 1 || bv.dim(0) != kv.dim(3)) {
        throw std::invalid_argument("conv3x3_s2: incompatible shapes");
    }
    const std::size_t h = xv.dim(0), w = xv.dim(1), cin = xv.dim(2), cout = kv.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw std::invalid_argument("conv3x3_s2: spatial dims must be even");
    }
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor y({oh, ow, cout});
    for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
            double* out = y.data() + (i * ow + j) * cout;
            for (std::size_t co = 0; co < cout; ++co) out[co] = bv[co];
            for (int di = 0; di < 3; ++di) {
                const long ii = static_cast<long>(2 * i) + di - 1;
                if (ii < 0 || ii >= static_cast<long>(h)) continue;
                for (int dj = 0; dj < 3; ++dj) {
                    const long jj = static_cast<long>(2 * j) + dj - 1;
                    if (jj < 0 || jj >= static_cast<long>(w)) continue;
                    const double* px = xv.data() + (ii * w + jj) * cin;
                    const double* kk = kv.data() + (di * 3 + dj) * cin * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double v = px[ci];
                        const double* krow = kk + ci * cout;
                        for (std::size_t co = 0; co < cout; ++co) out[co] += v * krow[co];
                    }
                }
            }
        }
    }
    int xid = x.id, kid = k.id, bid = b.id;
    return t.make_node(std::move(y), {x, k, b},
                       [xid, kid, bid, h, w, cin, cout, oh, ow](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buf(self);
        const Tensor& xv = tp.node_value(xid);
        const Tensor& kv = tp.node_value(kid);
        Tensor* dx = tp.maybe_grad(xid);
        Tensor* dk = tp.maybe_grad(kid);
        Tensor* db = tp.maybe_grad(bid);
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                const double* dout = dy.data() + (i * ow + j) * cout;
                if (db) {
                    double* d = db->data();
                    for (std::size_t co = 0; co < cout; ++co) d[co] += dout[co];
                }
                for (int di = 0; di < 3; ++di) {
                    const long ii = static_cast<long>(2 * i) + di - 1;
                    if (ii < 0 || ii >= static_cast<long>(h)) continue;
                    for (int dj = 0; dj < 3; ++dj) {
                        const long jj = static_cast<long>(2 * j) + dj - 1;
                        if (jj < 0 || jj >= static_cast<long>(w)) continue;
                        const std::size_t pix = (ii * w + jj) * cin;
                        const std::size_t kbase = (di * 3 + dj) * cin * cout;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            double acc = 0.0;
                            const double* krow = kv.data() + kbase + ci * cout;
                            for (std::size_t co = 0; co < cout; ++co) acc += dout[co] * krow[co];
                            if (dx) (*dx)[pix + ci] += acc;
                            if (dk) {
                                const double v = xv[pix + ci];
                                double* drow = dk->data() + kbase + ci * cout;
                                for (std::size_t co = 0; co < cout; ++co) drow[co] += v * dout[co];
                            }
                        }
                    }
                }
            }
        }
    });
}

}  // namespace dtlsd::ag
