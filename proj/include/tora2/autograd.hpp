#pragma once

#include <array>
#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "tora2/tensor.hpp"

namespace tora2 {

class ParamStore;
class Tape;

// Lightweight handle into a Tape. Cheap to copy; only valid while the tape
// that produced it is alive and not cleared.
struct Var {
    Tape* tape = nullptr;
    int32_t id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are appended in execution order, so walking the
// tape backwards is already a topological order. Values live on the tape;
// gradients are allocated lazily during backward().
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = false);
    // Leafs a parameter exactly once per tape; backward() accumulates its
    // gradient into the store.
    Var param(ParamStore& ps, int pid);

    const Tensor& val(Var v) const { return nodes_[check(v)].value; }
    const Tensor& grad(Var v) const;
    bool has_grad(Var v) const { return nodes_[check(v)].has_grad; }

    // root must be a scalar (1x1). Seeds d(root)/d(root) = 1 and sweeps the
    // tape in reverse, then flushes parameter gradients into the store.
    void backward(Var root);

    void clear();
    size_t size() const { return nodes_.size(); }

    // --- internals used by the op implementations ---
    using BackFn = std::function<void(Tape&, int32_t)>;
    int32_t emit(Tensor value, std::vector<int32_t> parents, BackFn back);
    Tensor& grad_buf(int32_t id);
    const Tensor& value_of(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool node_has_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].has_grad; }
    const Tensor& grad_of(int32_t id) const { return nodes_[static_cast<size_t>(id)].grad; }
    bool needs_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        bool needs_grad = false;
        int pid = -1;
        std::vector<int32_t> parents;
        BackFn back;
    };

    int32_t check(Var v) const {
        if (v.tape != this || v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size())
            throw ValueError("tape: variable does not belong to this tape");
        return v.id;
    }

    std::deque<Node> nodes_;
    std::unordered_map<int, int32_t> param_vars_;
    ParamStore* ps_ = nullptr;
};

// ---- elementwise / arithmetic ----
Var add(Var a, Var b);                // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);                // elementwise
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var mul_scalar_var(Var x, Var s);     // s is (1,1); broadcasts over x
Var tanh_op(Var a);
Var silu(Var a);
Var gelu(Var a);                      // exact (erf) form
Var relu(Var a);
Var log_op(Var a);
Var exp_op(Var a);

// ---- 2D linear algebra ----
Var matmul(Var a, Var b);             // (n,k) x (k,m)
Var transpose(Var a);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var a, int64_t start, int64_t count);
Var slice_cols(Var a, int64_t start, int64_t count);
Var reshape(Var a, std::vector<int64_t> shape);
Var row_broadcast_add(Var x, Var r);  // x (n,d) + r (1,d)
Var row_broadcast_mul(Var x, Var r);  // x (n,d) * r (1,d)

// ---- reductions / normalization ----
Var sum_all(Var a);                   // -> (1,1)
Var mean_all(Var a);
Var mean_rows(Var a);                 // (n,d) -> (1,d)
Var softmax_rows(Var a);
Var logsumexp_rows(Var a);            // (n,m) -> (n,1), max-shifted
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-6);
Var l2_normalize_rows(Var x, double eps = 1e-12);  // row / max(|row|, eps)
Var diag_of(Var a);                   // (n,n) -> (n,1)
Var mse(Var a, Var b);                // mean squared error -> (1,1)

// ---- attention / structured ----
// One attention head: softmax(q k^T * scale) v. The probability matrix is
// recomputed in backward instead of being stored, which keeps tape memory
// linear in sequence length.
Var attention_head(Var q, Var k, Var v, double scale);

// ---- embeddings / gather-scatter ----
Var gather_rows(Var table, std::vector<int64_t> ids);
// volume (F,H,W,C); cells indexed by flattened (f*H + y)*W + x -> rows (n,C)
Var gather_cells(Var volume, std::vector<int64_t> cells);
// returns volume + scatter(rows) at the given cells (residual add)
Var scatter_add_cells(Var volume, Var rows, std::vector<int64_t> cells);

// ---- convolution ----
// x (F,H,W,Cin), w (kt,kh,kw,Cin,Cout), b (1,Cout). Explicit per-axis stride
// and zero padding; output dims = (in + 2*pad - k)/stride + 1.
struct Conv3dSpec {
    int64_t stride_t = 1, stride_h = 1, stride_w = 1;
    int64_t pad_t = 0, pad_h = 0, pad_w = 0;
};
Var conv3d(Var x, Var w, Var b, const Conv3dSpec& spec);

}  // namespace tora2
