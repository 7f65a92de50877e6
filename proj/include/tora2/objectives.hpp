#pragma once

#include "tora2/autograd.hpp"
#include "tora2/tensor.hpp"

namespace tora2 {

// One aligned pair set for the alignment loss. Row i of p and row i of m are
// a positive pair; all other rows are in-batch negatives.
struct ContrastiveBatch {
    Tensor p;          // (B, d), rows unit-norm within 1e-6
    Tensor m;          // (B, d), rows unit-norm within 1e-6
    double tau = 0.07;
};

// Mean squared error between noise and prediction.
Var diffusion_loss(Var eps, Var eps_hat);

// Symmetric InfoNCE over unit-row matrices: entity->motion with negatives
// over motions plus motion->entity with negatives over entities, summed over
// the batch (no 1/B normalization). Rows are expected unit-norm already.
Var contrastive_loss(Var p, Var m, double tau);

// Validated convenience wrapper over plain tensors.
double contrastive_loss(const ContrastiveBatch& batch);

// l_eps + lambda * l_cont
Var total_loss(Var l_eps, Var l_cont, double lambda);

// (n, d) token rows -> (1, d) unit vector: mean over tokens, then L2
// normalization (epsilon-guarded if the mean cancels to zero).
Var pool_for_contrast(Var tokens);

}  // namespace tora2
