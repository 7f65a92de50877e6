#include "tora2/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

#include "tora2/nn.hpp"

namespace tora2 {

using EMat = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ECMat =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

static EMat emap(Tensor& t, int64_t r, int64_t c) { return EMat(t.data.data(), r, c); }
static ECMat emap(const Tensor& t, int64_t r, int64_t c) { return ECMat(t.data.data(), r, c); }
static EMat emap2(Tensor& t) { return EMat(t.data.data(), t.rows(), t.cols()); }
static ECMat emap2(const Tensor& t) { return ECMat(t.data.data(), t.rows(), t.cols()); }

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::param(ParamStore& ps, int pid) {
    if (ps_ != nullptr && ps_ != &ps)
        throw ValueError("tape: parameters from two stores on one tape");
    ps_ = &ps;
    auto it = param_vars_.find(pid);
    if (it != param_vars_.end()) return Var{this, it->second};
    Node n;
    n.value = ps.value(pid);
    n.needs_grad = !ps.frozen(pid);
    n.pid = pid;
    nodes_.push_back(std::move(n));
    int32_t id = static_cast<int32_t>(nodes_.size() - 1);
    param_vars_.emplace(pid, id);
    return Var{this, id};
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(check(v))];
    if (!n.has_grad) throw ValueError("tape: no gradient recorded for this variable");
    return n.grad;
}

int32_t Tape::emit(Tensor value, std::vector<int32_t> parents, BackFn back) {
    Node n;
    n.value = std::move(value);
    for (int32_t p : parents)
        if (nodes_[static_cast<size_t>(p)].needs_grad) n.needs_grad = true;
    n.parents = std::move(parents);
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int32_t>(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.has_grad) {
        n.grad = Tensor::zeros(n.value.shape);
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::backward(Var root) {
    int32_t rid = check(root);
    if (nodes_[static_cast<size_t>(rid)].value.numel() != 1)
        throw ShapeError("backward: root must be a scalar");
    grad_buf(rid).data[0] = 1.0;
    for (int32_t i = rid; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.has_grad || !n.needs_grad || !n.back) continue;
        n.back(*this, i);
    }
    if (ps_ != nullptr) {
        for (auto& [pid, vid] : param_vars_) {
            Node& n = nodes_[static_cast<size_t>(vid)];
            if (n.has_grad && n.needs_grad) ps_->accumulate_grad(pid, n.grad);
        }
    }
}

void Tape::clear() {
    nodes_.clear();
    param_vars_.clear();
    ps_ = nullptr;
}

// ---------------------------------------------------------------------------
// op helpers

namespace {

Tape& same_tape(Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw ValueError("op: operands must live on the same tape");
    return *a.tape;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

void axpy(Tensor& dst, const Tensor& src, double a = 1.0) {
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += a * src.data[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Var add(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = t.value_of(a.id);
    const Tensor& bv = t.value_of(b.id);
    require_same_shape(av, bv, "add");
    Tensor out = av;
    axpy(out, bv);
    int32_t ai = a.id, bi = b.id;
    int32_t id = t.emit(std::move(out), {ai, bi}, [ai, bi](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        if (tp.needs_grad(ai)) axpy(tp.grad_buf(ai), g);
        if (tp.needs_grad(bi)) axpy(tp.grad_buf(bi), g);
    });
    return Var{&t, id};
}

Var sub(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = t.value_of(a.id);
    const Tensor& bv = t.value_of(b.id);
    require_same_shape(av, bv, "sub");
    Tensor out = av;
    axpy(out, bv, -1.0);
    int32_t ai = a.id, bi = b.id;
    int32_t id = t.emit(std::move(out), {ai, bi}, [ai, bi](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        if (tp.needs_grad(ai)) axpy(tp.grad_buf(ai), g);
        if (tp.needs_grad(bi)) axpy(tp.grad_buf(bi), g, -1.0);
    });
    return Var{&t, id};
}

Var mul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = t.value_of(a.id);
    const Tensor& bv = t.value_of(b.id);
    require_same_shape(av, bv, "mul");
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    int32_t ai = a.id, bi = b.id;
    int32_t id = t.emit(std::move(out), {ai, bi}, [ai, bi](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& av2 = tp.value_of(ai);
        const Tensor& bv2 = tp.value_of(bi);
        if (tp.needs_grad(ai)) {
            Tensor& ga = tp.grad_buf(ai);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
        }
        if (tp.needs_grad(bi)) {
            Tensor& gb = tp.grad_buf(bi);
            for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * av2.data[i];
        }
    });
    return Var{&t, id};
}

Var scale(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = t.value_of(a.id);
    for (double& v : out.data) v *= c;
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai, c](Tape& tp, int32_t self) {
        axpy(tp.grad_buf(ai), tp.grad_of(self), c);
    });
    return Var{&t, id};
}

Var add_const(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = t.value_of(a.id);
    for (double& v : out.data) v += c;
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai](Tape& tp, int32_t self) {
        axpy(tp.grad_buf(ai), tp.grad_of(self));
    });
    return Var{&t, id};
}

Var mul_scalar_var(Var x, Var s) {
    Tape& t = same_tape(x, s);
    const Tensor& sv = t.value_of(s.id);
    if (sv.numel() != 1) throw ShapeError("mul_scalar_var: scalar must be (1,1)");
    double c = sv.data[0];
    Tensor out = t.value_of(x.id);
    for (double& v : out.data) v *= c;
    int32_t xi = x.id, si = s.id;
    int32_t id = t.emit(std::move(out), {xi, si}, [xi, si, c](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        if (tp.needs_grad(xi)) axpy(tp.grad_buf(xi), g, c);
        if (tp.needs_grad(si)) {
            const Tensor& xv = tp.value_of(xi);
            double acc = 0.0;
            for (size_t i = 0; i < g.data.size(); ++i) acc += g.data[i] * xv.data[i];
            tp.grad_buf(si).data[0] += acc;
        }
    });
    return Var{&t, id};
}

namespace {

template <typename F, typename DF>
Var unary_op(Var a, F f, DF df) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    Tensor out = av;
    for (double& v : out.data) v = f(v);
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai, df](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& xv = tp.value_of(ai);
        const Tensor& yv = tp.value_of(self);
        Tensor& ga = tp.grad_buf(ai);
        for (size_t i = 0; i < g.data.size(); ++i)
            ga.data[i] += g.data[i] * df(xv.data[i], yv.data[i]);
    });
    return Var{&t, id};
}

}  // namespace

Var tanh_op(Var a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Var silu(Var a) {
    return unary_op(
        a,
        [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Var gelu(Var a) {
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    return unary_op(
        a,
        [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x, double) {
            double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            return phi + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

Var relu(Var a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var log_op(Var a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp_op(Var a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------
// 2D linear algebra

Var matmul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = t.value_of(a.id);
    const Tensor& bv = t.value_of(b.id);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows())
        throw ShapeError("matmul: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
    int64_t n = av.rows(), k = av.cols(), m = bv.cols();
    Tensor out({n, m});
    emap2(out).noalias() = emap2(av) * emap2(bv);
    int32_t ai = a.id, bi = b.id;
    int32_t id = t.emit(std::move(out), {ai, bi}, [ai, bi, n, k, m](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& av2 = tp.value_of(ai);
        const Tensor& bv2 = tp.value_of(bi);
        if (tp.needs_grad(ai))
            emap(tp.grad_buf(ai), n, k).noalias() += emap(g, n, m) * emap(bv2, k, m).transpose();
        if (tp.needs_grad(bi))
            emap(tp.grad_buf(bi), k, m).noalias() += emap(av2, n, k).transpose() * emap(g, n, m);
    });
    return Var{&t, id};
}

Var transpose(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    if (av.ndim() != 2) throw ShapeError("transpose: expects 2D");
    int64_t n = av.rows(), m = av.cols();
    Tensor out({m, n});
    emap2(out) = emap2(av).transpose();
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai, n, m](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        emap(tp.grad_buf(ai), n, m) += emap(g, m, n).transpose();
    });
    return Var{&t, id};
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ValueError("concat_rows: empty input");
    Tape& t = *parts[0].tape;
    int64_t cols = t.value_of(parts[0].id).cols();
    int64_t rows = 0;
    std::vector<int32_t> ids;
    for (Var p : parts) {
        const Tensor& pv = t.value_of(p.id);
        if (p.tape != &t || pv.ndim() != 2 || pv.cols() != cols)
            throw ShapeError("concat_rows: column mismatch");
        rows += pv.rows();
        ids.push_back(p.id);
    }
    Tensor out({rows, cols});
    int64_t r = 0;
    for (Var p : parts) {
        const Tensor& pv = t.value_of(p.id);
        std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + r * cols);
        r += pv.rows();
    }
    int32_t id = t.emit(std::move(out), ids, [ids, cols](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        int64_t r0 = 0;
        for (int32_t pid : ids) {
            int64_t pr = tp.value_of(pid).rows();
            if (tp.needs_grad(pid)) {
                Tensor& gp = tp.grad_buf(pid);
                for (int64_t i = 0; i < pr * cols; ++i)
                    gp.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(r0 * cols + i)];
            }
            r0 += pr;
        }
    });
    return Var{&t, id};
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ValueError("concat_cols: empty input");
    Tape& t = *parts[0].tape;
    int64_t rows = t.value_of(parts[0].id).rows();
    int64_t cols = 0;
    std::vector<int32_t> ids;
    for (Var p : parts) {
        const Tensor& pv = t.value_of(p.id);
        if (p.tape != &t || pv.ndim() != 2 || pv.rows() != rows)
            throw ShapeError("concat_cols: row mismatch");
        cols += pv.cols();
        ids.push_back(p.id);
    }
    Tensor out({rows, cols});
    int64_t c0 = 0;
    for (Var p : parts) {
        const Tensor& pv = t.value_of(p.id);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < pv.cols(); ++c) out.at(r, c0 + c) = pv.at(r, c);
        c0 += pv.cols();
    }
    int32_t id = t.emit(std::move(out), ids, [ids, rows](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        int64_t c0 = 0;
        for (int32_t pid : ids) {
            int64_t pc = tp.value_of(pid).cols();
            if (tp.needs_grad(pid)) {
                Tensor& gp = tp.grad_buf(pid);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < pc; ++c) gp.at(r, c) += g.at(r, c0 + c);
            }
            c0 += pc;
        }
    });
    return Var{&t, id};
}

Var slice_rows(Var a, int64_t start, int64_t count) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    if (av.ndim() != 2 || start < 0 || count < 0 || start + count > av.rows())
        throw ShapeError("slice_rows: range out of bounds");
    int64_t cols = av.cols();
    Tensor out({count, cols});
    std::copy(av.data.begin() + start * cols, av.data.begin() + (start + count) * cols,
              out.data.begin());
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai, start, cols, count](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        Tensor& ga = tp.grad_buf(ai);
        for (int64_t i = 0; i < count * cols; ++i)
            ga.data[static_cast<size_t>(start * cols + i)] += g.data[static_cast<size_t>(i)];
    });
    return Var{&t, id};
}

Var slice_cols(Var a, int64_t start, int64_t count) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    if (av.ndim() != 2 || start < 0 || count < 0 || start + count > av.cols())
        throw ShapeError("slice_cols: range out of bounds");
    int64_t rows = av.rows();
    Tensor out({rows, count});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < count; ++c) out.at(r, c) = av.at(r, start + c);
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai, start, rows, count](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        Tensor& ga = tp.grad_buf(ai);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < count; ++c) ga.at(r, start + c) += g.at(r, c);
    });
    return Var{&t, id};
}

Var reshape(Var a, std::vector<int64_t> shape) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    if (Tensor::count(shape) != av.numel()) throw ShapeError("reshape: element count mismatch");
    Tensor out(std::move(shape), av.data);
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai](Tape& tp, int32_t self) {
        axpy(tp.grad_buf(ai), tp.grad_of(self));
    });
    return Var{&t, id};
}

Var row_broadcast_add(Var x, Var r) {
    Tape& t = same_tape(x, r);
    const Tensor& xv = t.value_of(x.id);
    const Tensor& rv = t.value_of(r.id);
    if (xv.ndim() != 2 || rv.ndim() != 2 || rv.rows() != 1 || rv.cols() != xv.cols())
        throw ShapeError("row_broadcast_add: expects x (n,d), r (1,d)");
    Tensor out = xv;
    int64_t n = xv.rows(), d = xv.cols();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) out.at(i, j) += rv.at(0, j);
    int32_t xi = x.id, ri = r.id;
    int32_t id = t.emit(std::move(out), {xi, ri}, [xi, ri, n, d](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        if (tp.needs_grad(xi)) axpy(tp.grad_buf(xi), g);
        if (tp.needs_grad(ri)) {
            Tensor& gr = tp.grad_buf(ri);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) gr.at(0, j) += g.at(i, j);
        }
    });
    return Var{&t, id};
}

Var row_broadcast_mul(Var x, Var r) {
    Tape& t = same_tape(x, r);
    const Tensor& xv = t.value_of(x.id);
    const Tensor& rv = t.value_of(r.id);
    if (xv.ndim() != 2 || rv.ndim() != 2 || rv.rows() != 1 || rv.cols() != xv.cols())
        throw ShapeError("row_broadcast_mul: expects x (n,d), r (1,d)");
    Tensor out = xv;
    int64_t n = xv.rows(), d = xv.cols();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) out.at(i, j) *= rv.at(0, j);
    int32_t xi = x.id, ri = r.id;
    int32_t id = t.emit(std::move(out), {xi, ri}, [xi, ri, n, d](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& xv2 = tp.value_of(xi);
        const Tensor& rv2 = tp.value_of(ri);
        if (tp.needs_grad(xi)) {
            Tensor& gx = tp.grad_buf(xi);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) gx.at(i, j) += g.at(i, j) * rv2.at(0, j);
        }
        if (tp.needs_grad(ri)) {
            Tensor& gr = tp.grad_buf(ri);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) gr.at(0, j) += g.at(i, j) * xv2.at(i, j);
        }
    });
    return Var{&t, id};
}

// ---------------------------------------------------------------------------
// reductions / normalization

Var sum_all(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    double s = 0.0;
    for (double v : av.data) s += v;
    int32_t ai = a.id;
    int32_t id = t.emit(Tensor::scalar(s), {ai}, [ai](Tape& tp, int32_t self) {
        double g = tp.grad_of(self).data[0];
        Tensor& ga = tp.grad_buf(ai);
        for (double& v : ga.data) v += g;
    });
    return Var{&t, id};
}

Var mean_all(Var a) {
    int64_t n = a.tape->value_of(a.id).numel();
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var mean_rows(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    if (av.ndim() != 2 || av.rows() < 1) throw ShapeError("mean_rows: expects (n,d), n >= 1");
    int64_t n = av.rows(), d = av.cols();
    Tensor out({1, d});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) out.at(0, j) += av.at(i, j);
    for (int64_t j = 0; j < d; ++j) out.at(0, j) /= static_cast<double>(n);
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai, n, d](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        Tensor& ga = tp.grad_buf(ai);
        double inv = 1.0 / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) ga.at(i, j) += g.at(0, j) * inv;
    });
    return Var{&t, id};
}

Var softmax_rows(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    if (av.ndim() != 2) throw ShapeError("softmax_rows: expects 2D");
    int64_t n = av.rows(), m = av.cols();
    Tensor out({n, m});
    for (int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < m; ++j) mx = std::max(mx, av.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < m; ++j) {
            double e = std::exp(av.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (int64_t j = 0; j < m; ++j) out.at(i, j) /= z;
    }
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai, n, m](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& y = tp.value_of(self);
        Tensor& ga = tp.grad_buf(ai);
        for (int64_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j < m; ++j) dot += g.at(i, j) * y.at(i, j);
            for (int64_t j = 0; j < m; ++j) ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
        }
    });
    return Var{&t, id};
}

Var logsumexp_rows(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    if (av.ndim() != 2) throw ShapeError("logsumexp_rows: expects 2D");
    int64_t n = av.rows(), m = av.cols();
    Tensor out({n, 1});
    for (int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < m; ++j) mx = std::max(mx, av.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < m; ++j) z += std::exp(av.at(i, j) - mx);
        out.at(i, 0) = mx + std::log(z);
    }
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai, n, m](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& x = tp.value_of(ai);
        const Tensor& lse = tp.value_of(self);
        Tensor& ga = tp.grad_buf(ai);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j)
                ga.at(i, j) += g.at(i, 0) * std::exp(x.at(i, j) - lse.at(i, 0));
    });
    return Var{&t, id};
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
    Tape& t = same_tape(x, gain);
    const Tensor& xv = t.value_of(x.id);
    const Tensor& gv = t.value_of(gain.id);
    const Tensor& bv = t.value_of(bias.id);
    if (xv.ndim() != 2 || gv.cols() != xv.cols() || bv.cols() != xv.cols())
        throw ShapeError("layer_norm: expects x (n,d), gain/bias (1,d)");
    int64_t n = xv.rows(), d = xv.cols();
    Tensor out({n, d});
    Tensor stats({n, 2});  // mean, inv_std per row; recomputed cheaply in backward from these
    for (int64_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += xv.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double c = xv.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        stats.at(i, 0) = mean;
        stats.at(i, 1) = inv;
        for (int64_t j = 0; j < d; ++j)
            out.at(i, j) = (xv.at(i, j) - mean) * inv * gv.at(0, j) + bv.at(0, j);
    }
    int32_t xi = x.id, gi = gain.id, bi = bias.id;
    auto st = std::make_shared<Tensor>(std::move(stats));
    int32_t id =
        t.emit(std::move(out), {xi, gi, bi}, [xi, gi, bi, n, d, st](Tape& tp, int32_t self) {
            const Tensor& g = tp.grad_of(self);
            const Tensor& xv2 = tp.value_of(xi);
            const Tensor& gv2 = tp.value_of(gi);
            for (int64_t i = 0; i < n; ++i) {
                double mean = st->at(i, 0), inv = st->at(i, 1);
                if (tp.needs_grad(gi) || tp.needs_grad(bi)) {
                    Tensor& gg = tp.grad_buf(gi);
                    Tensor& gb = tp.grad_buf(bi);
                    for (int64_t j = 0; j < d; ++j) {
                        double xhat = (xv2.at(i, j) - mean) * inv;
                        gg.at(0, j) += g.at(i, j) * xhat;
                        gb.at(0, j) += g.at(i, j);
                    }
                }
                if (tp.needs_grad(xi)) {
                    Tensor& gx = tp.grad_buf(xi);
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        double dy = g.at(i, j) * gv2.at(0, j);
                        double xhat = (xv2.at(i, j) - mean) * inv;
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                    double invd = 1.0 / static_cast<double>(d);
                    for (int64_t j = 0; j < d; ++j) {
                        double dy = g.at(i, j) * gv2.at(0, j);
                        double xhat = (xv2.at(i, j) - mean) * inv;
                        gx.at(i, j) += inv * (dy - invd * sum_dy - xhat * invd * sum_dy_xhat);
                    }
                }
            }
        });
    return Var{&t, id};
}

Var l2_normalize_rows(Var x, double eps) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value_of(x.id);
    if (xv.ndim() != 2) throw ShapeError("l2_normalize_rows: expects 2D");
    int64_t n = xv.rows(), d = xv.cols();
    Tensor out({n, d});
    Tensor norms({n, 1});
    for (int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) s += xv.at(i, j) * xv.at(i, j);
        double r = std::max(std::sqrt(s), eps);
        norms.at(i, 0) = r;
        for (int64_t j = 0; j < d; ++j) out.at(i, j) = xv.at(i, j) / r;
    }
    int32_t xi = x.id;
    auto nr = std::make_shared<Tensor>(std::move(norms));
    int32_t id = t.emit(std::move(out), {xi}, [xi, n, d, nr, eps](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& xv2 = tp.value_of(xi);
        Tensor& gx = tp.grad_buf(xi);
        for (int64_t i = 0; i < n; ++i) {
            double r = nr->at(i, 0);
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += xv2.at(i, j) * xv2.at(i, j);
            bool clamped = std::sqrt(s) < eps;
            if (clamped) {
                for (int64_t j = 0; j < d; ++j) gx.at(i, j) += g.at(i, j) / r;
            } else {
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) dot += g.at(i, j) * xv2.at(i, j);
                double r3 = r * r * r;
                for (int64_t j = 0; j < d; ++j)
                    gx.at(i, j) += g.at(i, j) / r - xv2.at(i, j) * dot / r3;
            }
        }
    });
    return Var{&t, id};
}

Var diag_of(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.value_of(a.id);
    if (av.ndim() != 2 || av.rows() != av.cols()) throw ShapeError("diag_of: expects square");
    int64_t n = av.rows();
    Tensor out({n, 1});
    for (int64_t i = 0; i < n; ++i) out.at(i, 0) = av.at(i, i);
    int32_t ai = a.id;
    int32_t id = t.emit(std::move(out), {ai}, [ai, n](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        Tensor& ga = tp.grad_buf(ai);
        for (int64_t i = 0; i < n; ++i) ga.at(i, i) += g.at(i, 0);
    });
    return Var{&t, id};
}

Var mse(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = t.value_of(a.id);
    const Tensor& bv = t.value_of(b.id);
    require_same_shape(av, bv, "mse");
    int64_t n = av.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = av.data[static_cast<size_t>(i)] - bv.data[static_cast<size_t>(i)];
        s += d * d;
    }
    s /= static_cast<double>(n);
    int32_t ai = a.id, bi = b.id;
    int32_t id = t.emit(Tensor::scalar(s), {ai, bi}, [ai, bi, n](Tape& tp, int32_t self) {
        double g = tp.grad_of(self).data[0] * 2.0 / static_cast<double>(n);
        const Tensor& av2 = tp.value_of(ai);
        const Tensor& bv2 = tp.value_of(bi);
        if (tp.needs_grad(ai)) {
            Tensor& ga = tp.grad_buf(ai);
            for (int64_t i = 0; i < n; ++i)
                ga.data[static_cast<size_t>(i)] +=
                    g * (av2.data[static_cast<size_t>(i)] - bv2.data[static_cast<size_t>(i)]);
        }
        if (tp.needs_grad(bi)) {
            Tensor& gb = tp.grad_buf(bi);
            for (int64_t i = 0; i < n; ++i)
                gb.data[static_cast<size_t>(i)] -=
                    g * (av2.data[static_cast<size_t>(i)] - bv2.data[static_cast<size_t>(i)]);
        }
    });
    return Var{&t, id};
}

// ---------------------------------------------------------------------------
// attention

namespace {

// softmax(q k^T * scale) into a scratch matrix
void attn_probs(const Tensor& q, const Tensor& k, double scl, Tensor& probs) {
    int64_t n = q.rows(), m = k.rows();
    emap2(probs).noalias() = emap2(q) * emap2(k).transpose() * scl;
    for (int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < m; ++j) mx = std::max(mx, probs.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < m; ++j) {
            double e = std::exp(probs.at(i, j) - mx);
            probs.at(i, j) = e;
            z += e;
        }
        for (int64_t j = 0; j < m; ++j) probs.at(i, j) /= z;
    }
}

}  // namespace

Var attention_head(Var q, Var k, Var v, double scl) {
    Tape& t = same_tape(q, k);
    same_tape(k, v);
    const Tensor& qv = t.value_of(q.id);
    const Tensor& kv = t.value_of(k.id);
    const Tensor& vv = t.value_of(v.id);
    if (qv.ndim() != 2 || kv.ndim() != 2 || vv.ndim() != 2 || qv.cols() != kv.cols() ||
        kv.rows() != vv.rows())
        throw ShapeError("attention_head: incompatible shapes");
    int64_t n = qv.rows(), m = kv.rows(), dv = vv.cols();
    Tensor probs({n, m});
    attn_probs(qv, kv, scl, probs);
    Tensor out({n, dv});
    emap2(out).noalias() = emap2(probs) * emap2(vv);
    int32_t qi = q.id, ki = k.id, vi = v.id;
    int32_t id =
        t.emit(std::move(out), {qi, ki, vi}, [qi, ki, vi, scl, n, m, dv](Tape& tp, int32_t self) {
            const Tensor& g = tp.grad_of(self);
            const Tensor& qv2 = tp.value_of(qi);
            const Tensor& kv2 = tp.value_of(ki);
            const Tensor& vv2 = tp.value_of(vi);
            Tensor probs({n, m});
            attn_probs(qv2, kv2, scl, probs);
            if (tp.needs_grad(vi))
                emap2(tp.grad_buf(vi)).noalias() += emap2(probs).transpose() * emap2(g);
            if (tp.needs_grad(qi) || tp.needs_grad(ki)) {
                Tensor dS({n, m});
                emap2(dS).noalias() = emap2(g) * emap2(vv2).transpose();  // dA
                for (int64_t i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < m; ++j) dot += dS.at(i, j) * probs.at(i, j);
                    for (int64_t j = 0; j < m; ++j)
                        dS.at(i, j) = probs.at(i, j) * (dS.at(i, j) - dot);
                }
                if (tp.needs_grad(qi))
                    emap2(tp.grad_buf(qi)).noalias() += emap2(dS) * emap2(kv2) * scl;
                if (tp.needs_grad(ki))
                    emap2(tp.grad_buf(ki)).noalias() += emap2(dS).transpose() * emap2(qv2) * scl;
            }
            (void)dv;
        });
    return Var{&t, id};
}

// ---------------------------------------------------------------------------
// gather / scatter

Var gather_rows(Var table, std::vector<int64_t> ids) {
    Tape& t = *table.tape;
    const Tensor& tv = t.value_of(table.id);
    if (tv.ndim() != 2) throw ShapeError("gather_rows: table must be 2D");
    int64_t d = tv.cols();
    for (int64_t id : ids)
        if (id < 0 || id >= tv.rows()) throw BoundsError("gather_rows: index out of range");
    Tensor out({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
        for (int64_t j = 0; j < d; ++j) out.at(static_cast<int64_t>(i), j) = tv.at(ids[i], j);
    int32_t ti = table.id;
    auto idx = std::make_shared<std::vector<int64_t>>(std::move(ids));
    int32_t nid = t.emit(std::move(out), {ti}, [ti, idx, d](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        Tensor& gt = tp.grad_buf(ti);
        for (size_t i = 0; i < idx->size(); ++i)
            for (int64_t j = 0; j < d; ++j)
                gt.at((*idx)[i], j) += g.at(static_cast<int64_t>(i), j);
    });
    return Var{&t, nid};
}

Var gather_cells(Var volume, std::vector<int64_t> cells) {
    Tape& t = *volume.tape;
    const Tensor& vv = t.value_of(volume.id);
    if (vv.ndim() != 4) throw ShapeError("gather_cells: volume must be 4D");
    int64_t c = vv.shape[3];
    int64_t ncells = vv.numel() / c;
    for (int64_t idx : cells)
        if (idx < 0 || idx >= ncells) throw BoundsError("gather_cells: cell out of range");
    Tensor out({static_cast<int64_t>(cells.size()), c});
    for (size_t i = 0; i < cells.size(); ++i)
        for (int64_t j = 0; j < c; ++j)
            out.at(static_cast<int64_t>(i), j) = vv.data[static_cast<size_t>(cells[i] * c + j)];
    int32_t vi = volume.id;
    auto idx = std::make_shared<std::vector<int64_t>>(std::move(cells));
    int32_t nid = t.emit(std::move(out), {vi}, [vi, idx, c](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        Tensor& gv = tp.grad_buf(vi);
        for (size_t i = 0; i < idx->size(); ++i)
            for (int64_t j = 0; j < c; ++j)
                gv.data[static_cast<size_t>((*idx)[i] * c + j)] += g.at(static_cast<int64_t>(i), j);
    });
    return Var{&t, nid};
}

Var scatter_add_cells(Var volume, Var rows, std::vector<int64_t> cells) {
    Tape& t = same_tape(volume, rows);
    const Tensor& vv = t.value_of(volume.id);
    const Tensor& rv = t.value_of(rows.id);
    if (vv.ndim() != 4 || rv.ndim() != 2 || rv.cols() != vv.shape[3] ||
        rv.rows() != static_cast<int64_t>(cells.size()))
        throw ShapeError("scatter_add_cells: incompatible shapes");
    int64_t c = vv.shape[3];
    int64_t ncells = vv.numel() / c;
    for (int64_t idx : cells)
        if (idx < 0 || idx >= ncells) throw BoundsError("scatter_add_cells: cell out of range");
    Tensor out = vv;
    for (size_t i = 0; i < cells.size(); ++i)
        for (int64_t j = 0; j < c; ++j)
            out.data[static_cast<size_t>(cells[i] * c + j)] += rv.at(static_cast<int64_t>(i), j);
    int32_t vi = volume.id, ri = rows.id;
    auto idx = std::make_shared<std::vector<int64_t>>(std::move(cells));
    int32_t nid = t.emit(std::move(out), {vi, ri}, [vi, ri, idx, c](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_of(self);
        if (tp.needs_grad(vi)) axpy(tp.grad_buf(vi), g);
        if (tp.needs_grad(ri)) {
            Tensor& gr = tp.grad_buf(ri);
            for (size_t i = 0; i < idx->size(); ++i)
                for (int64_t j = 0; j < c; ++j)
                    gr.at(static_cast<int64_t>(i), j) +=
                        g.data[static_cast<size_t>((*idx)[i] * c + j)];
        }
    });
    return Var{&t, nid};
}

// ---------------------------------------------------------------------------
// conv3d

namespace {

struct ConvDims {
    int64_t F, H, W, Ci, kt, kh, kw, Co, Fo, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Conv3dSpec& s) {
    ConvDims d{};
    d.F = x.shape[0];
    d.H = x.shape[1];
    d.W = x.shape[2];
    d.Ci = x.shape[3];
    d.kt = w.shape[0];
    d.kh = w.shape[1];
    d.kw = w.shape[2];
    d.Co = w.shape[4];
    if (w.shape[3] != d.Ci) throw ShapeError("conv3d: channel mismatch");
    auto out = [](int64_t in, int64_t pad, int64_t k, int64_t st) {
        int64_t o = (in + 2 * pad - k) / st + 1;
        if (o < 1 || (in + 2 * pad - k) % st != 0)
            throw ConfigError("conv3d: size " + std::to_string(in) + " not compatible with k=" +
                              std::to_string(k) + " stride=" + std::to_string(st));
        return o;
    };
    d.Fo = out(d.F, s.pad_t, d.kt, s.stride_t);
    d.Ho = out(d.H, s.pad_h, d.kh, s.stride_h);
    d.Wo = out(d.W, s.pad_w, d.kw, s.stride_w);
    return d;
}

}  // namespace

Var conv3d(Var x, Var w, Var b, const Conv3dSpec& spec) {
    Tape& t = same_tape(x, w);
    same_tape(w, b);
    const Tensor& xv = t.value_of(x.id);
    const Tensor& wv = t.value_of(w.id);
    const Tensor& bv = t.value_of(b.id);
    if (xv.ndim() != 4 || wv.ndim() != 5) throw ShapeError("conv3d: x must be 4D, w 5D");
    ConvDims d = conv_dims(xv, wv, spec);
    if (bv.numel() != d.Co) throw ShapeError("conv3d: bias size mismatch");

    Tensor out({d.Fo, d.Ho, d.Wo, d.Co});
    int64_t ocells = d.Fo * d.Ho * d.Wo;
    for (int64_t i = 0; i < ocells; ++i)
        for (int64_t co = 0; co < d.Co; ++co)
            out.data[static_cast<size_t>(i * d.Co + co)] = bv.data[static_cast<size_t>(co)];

    // One (cells x Ci) gather + GEMM per kernel offset.
    Tensor scratch({ocells, d.Ci});
    for (int64_t ot = 0; ot < d.kt; ++ot)
        for (int64_t oh = 0; oh < d.kh; ++oh)
            for (int64_t ow = 0; ow < d.kw; ++ow) {
                bool any = false;
                std::fill(scratch.data.begin(), scratch.data.end(), 0.0);
                int64_t cell = 0;
                for (int64_t fo = 0; fo < d.Fo; ++fo) {
                    int64_t fi = fo * spec.stride_t - spec.pad_t + ot;
                    for (int64_t ho = 0; ho < d.Ho; ++ho) {
                        int64_t hi = ho * spec.stride_h - spec.pad_h + oh;
                        for (int64_t wo = 0; wo < d.Wo; ++wo, ++cell) {
                            int64_t wi = wo * spec.stride_w - spec.pad_w + ow;
                            if (fi < 0 || fi >= d.F || hi < 0 || hi >= d.H || wi < 0 || wi >= d.W)
                                continue;
                            any = true;
                            const double* src =
                                &xv.data[static_cast<size_t>(((fi * d.H + hi) * d.W + wi) * d.Ci)];
                            std::copy(src, src + d.Ci,
                                      scratch.data.begin() + cell * d.Ci);
                        }
                    }
                }
                if (!any) continue;
                const double* wk =
                    &wv.data[static_cast<size_t>(((ot * d.kh + oh) * d.kw + ow) * d.Ci * d.Co)];
                ECMat wm(wk, d.Ci, d.Co);
                emap(out, ocells, d.Co).noalias() += emap2(scratch) * wm;
            }

    int32_t xi = x.id, wi_ = w.id, bi = b.id;
    int32_t id = t.emit(std::move(out), {xi, wi_, bi}, [xi, wi_, bi, d, spec](Tape& tp,
                                                                              int32_t self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& xv2 = tp.value_of(xi);
        const Tensor& wv2 = tp.value_of(wi_);
        int64_t ocells = d.Fo * d.Ho * d.Wo;
        if (tp.needs_grad(bi)) {
            Tensor& gb = tp.grad_buf(bi);
            for (int64_t i = 0; i < ocells; ++i)
                for (int64_t co = 0; co < d.Co; ++co)
                    gb.data[static_cast<size_t>(co)] += g.data[static_cast<size_t>(i * d.Co + co)];
        }
        Tensor scratch({ocells, d.Ci});
        Tensor dscratch({ocells, d.Ci});
        for (int64_t ot = 0; ot < d.kt; ++ot)
            for (int64_t oh = 0; oh < d.kh; ++oh)
                for (int64_t ow = 0; ow < d.kw; ++ow) {
                    std::fill(scratch.data.begin(), scratch.data.end(), 0.0);
                    bool any = false;
                    int64_t cell = 0;
                    for (int64_t fo = 0; fo < d.Fo; ++fo) {
                        int64_t fi = fo * spec.stride_t - spec.pad_t + ot;
                        for (int64_t ho = 0; ho < d.Ho; ++ho) {
                            int64_t hi = ho * spec.stride_h - spec.pad_h + oh;
                            for (int64_t wo = 0; wo < d.Wo; ++wo, ++cell) {
                                int64_t wi2 = wo * spec.stride_w - spec.pad_w + ow;
                                if (fi < 0 || fi >= d.F || hi < 0 || hi >= d.H || wi2 < 0 ||
                                    wi2 >= d.W)
                                    continue;
                                any = true;
                                const double* src = &xv2.data[static_cast<size_t>(
                                    ((fi * d.H + hi) * d.W + wi2) * d.Ci)];
                                std::copy(src, src + d.Ci, scratch.data.begin() + cell * d.Ci);
                            }
                        }
                    }
                    if (!any) continue;
                    int64_t woff = ((ot * d.kh + oh) * d.kw + ow) * d.Ci * d.Co;
                    if (tp.needs_grad(wi_)) {
                        Tensor& gw = tp.grad_buf(wi_);
                        EMat gwm(&gw.data[static_cast<size_t>(woff)], d.Ci, d.Co);
                        gwm.noalias() += emap2(scratch).transpose() * emap(g, ocells, d.Co);
                    }
                    if (tp.needs_grad(xi)) {
                        ECMat wm(&wv2.data[static_cast<size_t>(woff)], d.Ci, d.Co);
                        emap2(dscratch).noalias() = emap(g, ocells, d.Co) * wm.transpose();
                        Tensor& gx = tp.grad_buf(xi);
                        int64_t cell2 = 0;
                        for (int64_t fo = 0; fo < d.Fo; ++fo) {
                            int64_t fi = fo * spec.stride_t - spec.pad_t + ot;
                            for (int64_t ho = 0; ho < d.Ho; ++ho) {
                                int64_t hi = ho * spec.stride_h - spec.pad_h + oh;
                                for (int64_t wo = 0; wo < d.Wo; ++wo, ++cell2) {
                                    int64_t wi2 = wo * spec.stride_w - spec.pad_w + ow;
                                    if (fi < 0 || fi >= d.F || hi < 0 || hi >= d.H || wi2 < 0 ||
                                        wi2 >= d.W)
                                        continue;
                                    double* dst = &gx.data[static_cast<size_t>(
                                        ((fi * d.H + hi) * d.W + wi2) * d.Ci)];
                                    const double* src = &dscratch.data[static_cast<size_t>(
                                        cell2 * d.Ci)];
                                    for (int64_t cc = 0; cc < d.Ci; ++cc) dst[cc] += src[cc];
                                }
                            }
                        }
                    }
                }
    });
    return Var{&t, id};
}

}  // namespace tora2
