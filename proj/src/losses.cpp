#include "wsseg/losses.hpp"

#include <sstream>

namespace wsseg {

double smooth_l1_scalar(double d, double beta) {
  double a = std::fabs(d);
  if (a < beta) return 0.5 * d * d / beta;
  return a - 0.5 * beta;
}

double smooth_l1_deriv(double d, double beta) {
  if (std::fabs(d) < beta) return d / beta;
  return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
}

static void append_num(std::ostringstream& os, double v) {
  char buf[32];
  snprintf(buf, sizeof(buf), "%.17g", v);
  os << buf;
}

std::string LossReport::to_json_line(long long step, int epoch) const {
  std::ostringstream os;
  os << "{\"step\":" << step << ",\"epoch\":" << epoch << ",\"cls_t\":";
  append_num(os, cls_transformer);
  os << ",\"cls_c\":";
  append_num(os, cls_cnn);
  os << ",\"selfreg\":";
  append_num(os, self_reg);
  os << ",\"total\":";
  append_num(os, total);
  os << "}";
  return os.str();
}

Var total_loss(Tape& tape, Var cls_t, Var cls_c, Var self_reg, LossReport& report) {
  report = LossReport{};
  Var acc{nullptr, -1};
  auto fold = [&](Var v, double& slot) {
    if (v.id < 0) return;
    slot = v.val().data[0];
    acc = acc.id < 0 ? v : tape.add(acc, v);
  };
  fold(cls_t, report.cls_transformer);
  fold(cls_c, report.cls_cnn);
  fold(self_reg, report.self_reg);
  if (acc.id < 0) throw std::invalid_argument("total_loss: no components");
  report.total = report.cls_transformer + report.cls_cnn + report.self_reg;
  return acc;
}

}  // namespace wsseg
