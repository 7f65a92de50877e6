#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "tora2/autograd.hpp"
#include "tora2/nn.hpp"

namespace tora2::testing {

// Central finite differences against the tape, parameter by parameter.
// Returns the worst relative error over every checked coordinate.
struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // "param[i]" of the worst coordinate
};

// Floor of 1e-6 so coordinates whose true gradient vanishes (e.g. by softmax
// shift invariance) are judged by absolute agreement instead of FD noise.
inline double rel_err(double analytic, double numeric) {
    double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
    return std::fabs(analytic - numeric) / denom;
}

// loss: builds the graph on a fresh tape and returns the scalar root.
inline GradCheckResult grad_check(ParamStore& ps,
                                  const std::function<Var(Tape&, ParamStore&)>& loss,
                                  double step = 1e-5) {
    GradCheckResult res;
    ps.zero_grads();
    {
        Tape t;
        t.backward(loss(t, ps));
    }
    auto eval = [&]() {
        Tape t;
        return t.val(loss(t, ps)).data[0];
    };
    for (int pid = 0; pid < ps.count(); ++pid) {
        if (ps.frozen(pid)) continue;
        Tensor& v = ps.value(pid);
        const Tensor& g = ps.grad(pid);
        for (size_t i = 0; i < v.data.size(); ++i) {
            double keep = v.data[i];
            v.data[i] = keep + step;
            double up = eval();
            v.data[i] = keep - step;
            double down = eval();
            v.data[i] = keep;
            double numeric = (up - down) / (2.0 * step);
            double e = rel_err(g.data[i], numeric);
            if (e > res.max_rel_err) {
                res.max_rel_err = e;
                res.worst = ps.name(pid) + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

// Same idea for a single leaf tensor input instead of store parameters.
inline double grad_check_input(Tensor x, const std::function<Var(Tape&, Var)>& loss,
                               double step = 1e-5) {
    Tensor analytic;
    {
        Tape t;
        Var xv = t.leaf(x, true);
        Var root = loss(t, xv);
        t.backward(root);
        analytic = t.grad(xv);
    }
    double worst = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double keep = x.data[i];
        auto eval = [&]() {
            Tape t;
            return t.val(loss(t, t.leaf(x))).data[0];
        };
        x.data[i] = keep + step;
        double up = eval();
        x.data[i] = keep - step;
        double down = eval();
        x.data[i] = keep;
        double numeric = (up - down) / (2.0 * step);
        worst = std::max(worst, rel_err(analytic.data[i], numeric));
    }
    return worst;
}

}  // namespace tora2::testing
