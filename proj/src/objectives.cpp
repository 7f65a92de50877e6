#include "tora2/objectives.hpp"

#include <cmath>

namespace tora2 {

Var diffusion_loss(Var eps, Var eps_hat) { return mse(eps, eps_hat); }

Var contrastive_loss(Var p, Var m, double tau) {
    if (tau <= 0.0) throw ValueError("contrastive loss: tau must be positive");
    Tape& t = *p.tape;
    const Tensor& pv = t.val(p);
    const Tensor& mv = t.val(m);
    if (pv.ndim() != 2 || !pv.same_shape(mv))
        throw ShapeError("contrastive loss: p and m must both be (B, d)");
    // S_ij = p_i . m_j / tau. Loss collapses to
    //   sum_i lse(S_i,:) + sum_j lse(S_:,j) - 2 sum_i S_ii
    Var s = scale(matmul(p, transpose(m)), 1.0 / tau);
    Var row_term = sum_all(logsumexp_rows(s));
    Var col_term = sum_all(logsumexp_rows(transpose(s)));
    Var diag = scale(sum_all(diag_of(s)), 2.0);
    return sub(add(row_term, col_term), diag);
}

double contrastive_loss(const ContrastiveBatch& batch) {
    if (batch.tau <= 0.0) throw ValueError("contrastive loss: tau must be positive");
    if (batch.p.ndim() != 2 || !batch.p.same_shape(batch.m))
        throw ShapeError("contrastive loss: p and m must both be (B, d)");
    for (const Tensor* side : {&batch.p, &batch.m}) {
        for (int64_t i = 0; i < side->rows(); ++i) {
            double n = 0.0;
            for (int64_t j = 0; j < side->cols(); ++j) n += side->at(i, j) * side->at(i, j);
            if (std::fabs(std::sqrt(n) - 1.0) > 1e-6)
                throw ValueError("contrastive loss: row " + std::to_string(i) +
                                 " is not unit norm");
        }
    }
    Tape t;
    return t.val(contrastive_loss(t.leaf(batch.p), t.leaf(batch.m), batch.tau)).data[0];
}

Var total_loss(Var l_eps, Var l_cont, double lambda) {
    return add(l_eps, scale(l_cont, lambda));
}

Var pool_for_contrast(Var tokens) {
    return l2_normalize_rows(mean_rows(tokens));
}

}  // namespace tora2
