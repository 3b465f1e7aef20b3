#include "umad/losses/losses.hpp"

#include "umad/flow/flow.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace umad::losses {

using namespace umad::ad;

Var charbonnier(const Var& pred, const Var& target, double eps) {
  require(pred.shape() == target.shape(), "charbonnier: shape mismatch");
  Var d = sub(pred, target);
  return mean(sqrt_(adds(square(d), eps * eps)));
}

Var temporal_consistency_loss(const std::vector<Var>& frames,
                              const std::vector<Var>& flows) {
  Index T = static_cast<Index>(frames.size());
  require(T >= 2, "temporal_consistency_loss: need at least two frames");
  require(static_cast<Index>(flows.size()) == T - 1,
          "temporal_consistency_loss: need T-1 flows");
  Var acc;
  for (Index t = 0; t + 1 < T; ++t) {
    Var warped = flow::warp(frames[static_cast<size_t>(t)],
                            flows[static_cast<size_t>(t)]);
    Var term = mean(abs_(sub(frames[static_cast<size_t>(t + 1)], warped)));
    acc = acc.valid() ? add(acc, term) : term;
  }
  return muls(acc, 1.0 / static_cast<double>(T - 1));
}

Var flow_consistency_loss(const std::vector<Var>& estimated,
                          const std::vector<Var>& reference) {
  require(estimated.size() == reference.size() && !estimated.empty(),
          "flow_consistency_loss: length mismatch");
  Var acc;
  for (size_t t = 0; t < estimated.size(); ++t) {
    require(estimated[t].shape() == reference[t].shape(),
            "flow_consistency_loss: shape mismatch");
    // per-channel pixel means, summed over the two flow channels
    Var term = muls(mean(abs_(sub(estimated[t], reference[t]))), 2.0);
    acc = acc.valid() ? add(acc, term) : term;
  }
  return muls(acc, 1.0 / static_cast<double>(estimated.size()));
}

Var total_loss(const LossTerms& terms, const LossWeights& w, LossReport* report) {
  auto value_of = [](const Var& v, const char* name) {
    if (!v.valid()) return 0.0;
    double x = v.scalar();
    if (!std::isfinite(x))
      throw std::runtime_error(std::string("total_loss: non-finite term ") + name);
    return x;
  };
  double rec = value_of(terms.rec, "rec");
  double temp = value_of(terms.temp, "temp");
  double flow = value_of(terms.flow, "flow");
  double eps = value_of(terms.eps, "eps");

  Var total(Tensor::scalar(0.0));
  if (terms.rec.valid()) total = add(total, muls(terms.rec, w.lambda1));
  if (terms.temp.valid()) total = add(total, muls(terms.temp, w.lambda2));
  if (terms.flow.valid()) total = add(total, muls(terms.flow, w.lambda3));
  if (terms.eps.valid()) total = add(total, muls(terms.eps, w.lambda_eps));

  if (report) {
    report->rec = rec;
    report->temp = temp;
    report->flow = flow;
    report->eps = eps;
    report->total = total.scalar();
  }
  return total;
}

}  // namespace umad::losses
