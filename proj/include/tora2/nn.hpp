#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tora2/autograd.hpp"
#include "tora2/tensor.hpp"

namespace tora2 {

// Named parameter registry. Insertion order is the canonical order for
// checkpoints and optimizer sweeps, so runs stay bit-reproducible.
class ParamStore {
public:
    int add(const std::string& name, Tensor init);
    int find(const std::string& name) const;  // -1 if absent
    int require(const std::string& name) const;

    int count() const { return static_cast<int>(entries_.size()); }
    const std::string& name(int pid) const { return entries_[static_cast<size_t>(pid)].name; }
    Tensor& value(int pid) { return entries_[static_cast<size_t>(pid)].value; }
    const Tensor& value(int pid) const { return entries_[static_cast<size_t>(pid)].value; }
    Tensor& grad(int pid) { return entries_[static_cast<size_t>(pid)].grad; }
    bool frozen(int pid) const { return entries_[static_cast<size_t>(pid)].frozen; }

    void zero_grads();
    void accumulate_grad(int pid, const Tensor& g);

    // Marks every parameter whose name matches the predicate.
    void set_frozen(const std::function<bool(const std::string&)>& pred, bool frozen);
    int frozen_count() const;

    std::vector<std::string> names() const;

private:
    struct Entry {
        std::string name;
        Tensor value, grad, m, v;
        bool frozen = false;
    };
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> by_name_;
    friend class AdamW;
    friend struct CheckpointIO;
};

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}
    void step(ParamStore& ps);  // skips frozen entries
    int64_t steps_taken() const { return t_; }

private:
    AdamWConfig cfg_;
    int64_t t_ = 0;
    friend struct CheckpointIO;
};

// ---- building blocks ----
// These own parameter ids, not tensors; forward() leafs the parameters on the
// caller's tape.

struct Linear {
    int w = -1, b = -1;
    int64_t in = 0, out = 0;

    static Linear create(ParamStore& ps, const std::string& name, int64_t in, int64_t out,
                         Rng& rng, double init_std, bool zero_init = false);
    Var forward(Tape& t, ParamStore& ps, Var x) const;  // x (n,in) -> (n,out)
};

struct LayerNormParams {
    int gain = -1, bias = -1;
    static LayerNormParams create(ParamStore& ps, const std::string& name, int64_t d);
    Var forward(Tape& t, ParamStore& ps, Var x) const;
};

// Multi-head attention assembled from per-head fused attention ops.
// q_input (n,d) and kv_input (m,d); self-attention passes the same Var twice.
struct MultiHeadAttention {
    Linear q_proj, k_proj, v_proj, out_proj;
    int heads = 1;
    int64_t d = 0;

    static MultiHeadAttention create(ParamStore& ps, const std::string& name, int64_t d,
                                     int heads, Rng& rng, double init_std,
                                     bool zero_init_out = false);
    Var forward(Tape& t, ParamStore& ps, Var q_input, Var kv_input) const;
};

// Two-layer GELU MLP used for transformer feedforward and adapters.
struct Mlp {
    Linear fc1, fc2;
    static Mlp create(ParamStore& ps, const std::string& name, int64_t d, int64_t hidden,
                      int64_t out, Rng& rng, double init_std, bool zero_init_out = false);
    Var forward(Tape& t, ParamStore& ps, Var x) const;
};

// Sinusoidal embedding of a scalar position/timestep into (1, d).
Tensor sinusoidal_embedding(double t, int64_t d, double max_period = 10000.0);

}  // namespace tora2
