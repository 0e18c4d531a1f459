#pragma once

#include <cmath>
#include <string>

#include "wsseg/autodiff.hpp"

namespace wsseg {

// Huber kernel: quadratic inside |d| < beta, linear outside, C1 at the knee.
double smooth_l1_scalar(double d, double beta);
double smooth_l1_deriv(double d, double beta);

// Per-step loss components. total is always the plain sum of the three
// (the self-regularization entry is the value that actually entered the
// objective, i.e. already scaled by lambda).
struct LossReport {
  double cls_transformer = 0.0;
  double cls_cnn = 0.0;
  double self_reg = 0.0;
  double total = 0.0;

  std::string to_json_line(long long step, int epoch) const;
};

// Sums the components on the tape so the backward pass covers all branches.
// Invalid (id < 0) vars are treated as absent and contribute zero.
Var total_loss(Tape& tape, Var cls_t, Var cls_c, Var self_reg, LossReport& report);

}  // namespace wsseg
