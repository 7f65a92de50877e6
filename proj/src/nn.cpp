#include "tora2/nn.hpp"

#include <cmath>

namespace tora2 {

int ParamStore::add(const std::string& name, Tensor init) {
    if (by_name_.count(name)) throw ValueError("param store: duplicate name " + name);
    Entry e;
    e.name = name;
    e.grad = Tensor::zeros(init.shape);
    e.m = Tensor::zeros(init.shape);
    e.v = Tensor::zeros(init.shape);
    e.value = std::move(init);
    entries_.push_back(std::move(e));
    int pid = static_cast<int>(entries_.size() - 1);
    by_name_.emplace(name, pid);
    return pid;
}

int ParamStore::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? -1 : it->second;
}

int ParamStore::require(const std::string& name) const {
    int pid = find(name);
    if (pid < 0) throw ValueError("param store: missing parameter " + name);
    return pid;
}

void ParamStore::zero_grads() {
    for (Entry& e : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
}

void ParamStore::accumulate_grad(int pid, const Tensor& g) {
    Entry& e = entries_[static_cast<size_t>(pid)];
    if (!e.grad.same_shape(g)) throw ShapeError("param store: gradient shape mismatch for " + e.name);
    for (size_t i = 0; i < g.data.size(); ++i) e.grad.data[i] += g.data[i];
}

void ParamStore::set_frozen(const std::function<bool(const std::string&)>& pred, bool frozen) {
    for (Entry& e : entries_)
        if (pred(e.name)) e.frozen = frozen;
}

int ParamStore::frozen_count() const {
    int n = 0;
    for (const Entry& e : entries_)
        if (e.frozen) ++n;
    return n;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const Entry& e : entries_) out.push_back(e.name);
    return out;
}

void AdamW::step(ParamStore& ps) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& e : ps.entries_) {
        if (e.frozen) continue;
        for (size_t i = 0; i < e.value.data.size(); ++i) {
            double g = e.grad.data[i];
            e.m.data[i] = cfg_.beta1 * e.m.data[i] + (1.0 - cfg_.beta1) * g;
            e.v.data[i] = cfg_.beta2 * e.v.data[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = e.m.data[i] / bc1;
            double vhat = e.v.data[i] / bc2;
            e.value.data[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                          cfg_.weight_decay * e.value.data[i]);
        }
    }
}

Linear Linear::create(ParamStore& ps, const std::string& name, int64_t in, int64_t out, Rng& rng,
                      double init_std, bool zero_init) {
    Linear l;
    l.in = in;
    l.out = out;
    l.w = ps.add(name + ".w", zero_init ? Tensor::zeros({in, out}) : rng.randn({in, out}, init_std));
    l.b = ps.add(name + ".b", Tensor::zeros({1, out}));
    return l;
}

Var Linear::forward(Tape& t, ParamStore& ps, Var x) const {
    return row_broadcast_add(matmul(x, t.param(ps, w)), t.param(ps, b));
}

LayerNormParams LayerNormParams::create(ParamStore& ps, const std::string& name, int64_t d) {
    LayerNormParams ln;
    ln.gain = ps.add(name + ".gain", Tensor::full({1, d}, 1.0));
    ln.bias = ps.add(name + ".bias", Tensor::zeros({1, d}));
    return ln;
}

Var LayerNormParams::forward(Tape& t, ParamStore& ps, Var x) const {
    return layer_norm_rows(x, t.param(ps, gain), t.param(ps, bias));
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& ps, const std::string& name, int64_t d,
                                              int heads, Rng& rng, double init_std,
                                              bool zero_init_out) {
    if (d % heads != 0) throw ConfigError("attention: width must divide evenly across heads");
    MultiHeadAttention a;
    a.heads = heads;
    a.d = d;
    a.q_proj = Linear::create(ps, name + ".q", d, d, rng, init_std);
    a.k_proj = Linear::create(ps, name + ".k", d, d, rng, init_std);
    a.v_proj = Linear::create(ps, name + ".v", d, d, rng, init_std);
    a.out_proj = Linear::create(ps, name + ".o", d, d, rng, init_std, zero_init_out);
    return a;
}

Var MultiHeadAttention::forward(Tape& t, ParamStore& ps, Var q_input, Var kv_input) const {
    Var q = q_proj.forward(t, ps, q_input);
    Var k = k_proj.forward(t, ps, kv_input);
    Var v = v_proj.forward(t, ps, kv_input);
    int64_t dh = d / heads;
    double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * dh, dh);
        Var kh = slice_cols(k, h * dh, dh);
        Var vh = slice_cols(v, h * dh, dh);
        outs.push_back(attention_head(qh, kh, vh, scl));
    }
    return out_proj.forward(t, ps, concat_cols(outs));
}

Mlp Mlp::create(ParamStore& ps, const std::string& name, int64_t d, int64_t hidden, int64_t out,
                Rng& rng, double init_std, bool zero_init_out) {
    Mlp m;
    m.fc1 = Linear::create(ps, name + ".fc1", d, hidden, rng, init_std);
    m.fc2 = Linear::create(ps, name + ".fc2", hidden, out, rng, init_std, zero_init_out);
    return m;
}

Var Mlp::forward(Tape& t, ParamStore& ps, Var x) const {
    return fc2.forward(t, ps, gelu(fc1.forward(t, ps, x)));
}

Tensor sinusoidal_embedding(double t, int64_t d, double max_period) {
    if (d % 2 != 0) throw ConfigError("sinusoidal embedding: width must be even");
    Tensor out({1, d});
    int64_t half = d / 2;
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(max_period) * static_cast<double>(i) /
                               static_cast<double>(half));
        out.at(0, i) = std::cos(t * freq);
        out.at(0, half + i) = std::sin(t * freq);
    }
    return out;
}

}  // namespace tora2
