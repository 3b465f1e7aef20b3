#pragma once

#include "umad/core/ops.hpp"

#include <vector>

namespace umad::losses {

using ad::Var;

struct LossWeights {
  double lambda1 = 1.0;  // reconstruction
  double lambda2 = 0.5;  // temporal consistency
  double lambda3 = 0.1;  // flow consistency
  double lambda_eps = 1.0;
};

struct LossReport {
  double total = 0, rec = 0, temp = 0, flow = 0, eps = 0;
};

// mean over elements of rho(pred - target), rho(x) = sqrt(x^2 + eps^2)
Var charbonnier(const Var& pred, const Var& target, double eps = 1e-3);

// (1/(T-1)) sum_t mean |f_{t+1} - W(f_t, u_t)|; frames (1,3,H,W), flows
// (1,2,H,W) with flows[t] estimated from (f_t, f_{t+1})
Var temporal_consistency_loss(const std::vector<Var>& frames,
                              const std::vector<Var>& flows);

// (1/(T-1)) sum_t sum_channel mean_pixel |u_est - u_ref|
Var flow_consistency_loss(const std::vector<Var>& estimated,
                          const std::vector<Var>& reference);

// any invalid Var counts as an absent (zero) term
struct LossTerms {
  Var rec, temp, flow, eps;
};

// weighted sum; throws std::runtime_error naming the first non-finite term
Var total_loss(const LossTerms& terms, const LossWeights& w,
               LossReport* report = nullptr);

}  // namespace umad::losses
