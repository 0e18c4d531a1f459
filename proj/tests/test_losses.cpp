#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "wsseg/losses.hpp"

using namespace wsseg;

namespace {

double selfreg_value(const Tensor& mt, const Tensor& mc, const Tensor& y, double beta, bool all = false) {
  Tape t;
  return t.self_regularization(t.leaf(mt, false), t.leaf(mc, false), y, beta, all).val().data[0];
}

double bce_value(const Tensor& logits, const Tensor& y) {
  Tape t;
  return t.multilabel_bce(t.leaf(logits, false), y).val().data[0];
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("smooth_l1 closed forms") {
  CHECK(smooth_l1_scalar(0.0, 1.0) == 0.0);
  CHECK(smooth_l1_scalar(1.0, 1.0) == doctest::Approx(0.5).epsilon(1e-15));   // knee
  CHECK(smooth_l1_scalar(-1.0, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(smooth_l1_scalar(0.5, 1.0) == doctest::Approx(0.125).epsilon(1e-15));
  CHECK(smooth_l1_scalar(3.0, 1.0) == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(smooth_l1_scalar(0.3, 0.2) == doctest::Approx(0.2).epsilon(1e-13));
}

TEST_CASE("smooth_l1 continuity and C1 at the knee") {
  for (double beta : {0.5, 1.0, 2.5}) {
    double below = smooth_l1_scalar(beta - 1e-9, beta);
    double above = smooth_l1_scalar(beta + 1e-9, beta);
    CHECK(std::fabs(above - below) < 1e-8);
    // numerical left/right derivatives at |d| = beta
    double h = 1e-7;
    double dl = (smooth_l1_scalar(beta, beta) - smooth_l1_scalar(beta - h, beta)) / h;
    double dr = (smooth_l1_scalar(beta + h, beta) - smooth_l1_scalar(beta, beta)) / h;
    CHECK(std::fabs(dl - dr) < 1e-6);
    CHECK(smooth_l1_deriv(beta, beta) == 1.0);
    CHECK(smooth_l1_deriv(-beta, beta) == -1.0);
  }
}

TEST_CASE("multilabel_bce midpoint, saturation, scalar oracle") {
  // zero logits, any labels: every class contributes ln 2
  Tensor zeros({1, 2}, {0.0, 0.0});
  Tensor y10({1, 2}, {1.0, 0.0});
  CHECK(bce_value(zeros, y10) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  // saturated correct single class
  Tensor big({1, 1}, {40.0});
  Tensor y1({1, 1}, {1.0});
  CHECK(bce_value(big, y1) < 1e-6);

  // hand oracle: o = [0.75, 0.5], y = [1, 0]
  Tensor lg({1, 2}, {std::log(3.0), 0.0});
  double want = -(std::log(0.75) + std::log(0.5));
  CHECK(bce_value(lg, y10) == doctest::Approx(want).epsilon(1e-12));
  CHECK(want == doctest::Approx(0.9808).epsilon(1e-4));
}

TEST_CASE("multilabel_bce at zero logits equals C*ln2 per sample regardless of labels") {
  Rng rng(101);
  for (int c : {1, 4, 7}) {
    Tensor logits = Tensor::zeros({3, c});
    Tensor y = Tensor::zeros({3, c});
    for (double& v : y.data) v = rng.coin() ? 1.0 : 0.0;
    CHECK(bce_value(logits, y) == doctest::Approx(c * std::log(2.0)).epsilon(1e-12));
  }
}

TEST_CASE("multilabel_bce rejects non-binary labels and is monotone in a positive logit") {
  Tensor logits({1, 2}, {0.0, 0.0});
  Tensor bad({1, 2}, {0.5, 0.0});
  Tape t;
  CHECK_THROWS_AS(t.multilabel_bce(t.leaf(logits, false), bad), std::invalid_argument);

  // sampled monotonicity: loss is non-increasing in the positive-class logit
  Rng rng(103);
  Tensor y({1, 1}, {1.0});
  for (int i = 0; i < 100; ++i) {
    double a = rng.uniform(-12.0, 12.0);
    double b = a + rng.uniform(0.01, 3.0);
    double la = bce_value(Tensor({1, 1}, {a}), y);
    double lb = bce_value(Tensor({1, 1}, {b}), y);
    CHECK(lb <= la + 1e-15);
  }
}

TEST_CASE("self_regularization zero at equal maps with exactly zero gradient") {
  Rng rng(107);
  Tensor m = oracle::random_tensor({2, 3, 4, 4}, rng);
  Tensor y({2, 3}, {1, 0, 1, 1, 1, 0});
  CHECK(selfreg_value(m, m, y, 1.0) == 0.0);

  Tape t;
  Var a = t.leaf(m, true);
  Var b = t.leaf(m, true);
  Var loss = t.self_regularization(a, b, y, 1.0, false);
  t.backward(loss);
  for (double g : t.grad_of(a).data) CHECK(g == 0.0);
  for (double g : t.grad_of(b).data) CHECK(g == 0.0);
}

TEST_CASE("self_regularization symmetry and constant-difference oracle") {
  Rng rng(109);
  Tensor mt = oracle::random_tensor({2, 2, 3, 3}, rng);
  Tensor mc = oracle::random_tensor({2, 2, 3, 3}, rng);
  Tensor y({2, 2}, {1, 1, 0, 1});
  CHECK(selfreg_value(mt, mc, y, 1.0) == doctest::Approx(selfreg_value(mc, mt, y, 1.0)).epsilon(1e-15));

  // constant difference 0.5 on present channels -> smooth_l1(0.5)/elem = 0.125
  Tensor base = oracle::random_tensor({1, 2, 2, 2}, rng);
  Tensor shifted = base;
  for (double& v : shifted.data) v += 0.5;
  Tensor yall({1, 2}, {1, 1});
  CHECK(selfreg_value(shifted, base, yall, 1.0) == doctest::Approx(0.125).epsilon(1e-12));
}

TEST_CASE("self_regularization masks absent channels and all-zero samples contribute zero") {
  Tensor mt({2, 2, 1, 1}, {10.0, 3.0, 7.0, 7.0});
  Tensor mc({2, 2, 1, 1}, {0.0, 3.0, 2.0, 2.0});
  // sample 0: only channel 1 present (diff 0); sample 1: nothing present
  Tensor y({2, 2}, {0, 1, 0, 0});
  CHECK(selfreg_value(mt, mc, y, 1.0) == 0.0);

  // all-channel flag brings the masked differences back in
  CHECK(selfreg_value(mt, mc, y, 1.0, true) > 1.0);
}

TEST_CASE("self_regularization gradient antisymmetry d/dMT = -d/dMC") {
  Rng rng(113);
  Tensor mt = oracle::random_tensor({1, 2, 3, 3}, rng);
  Tensor mc = oracle::random_tensor({1, 2, 3, 3}, rng);
  Tensor y({1, 2}, {1, 1});
  Tape t;
  Var a = t.leaf(mt, true);
  Var b = t.leaf(mc, true);
  t.backward(t.self_regularization(a, b, y, 0.7, false));
  Tensor ga = t.grad_of(a), gb = t.grad_of(b);
  for (size_t i = 0; i < ga.data.size(); ++i) CHECK(ga.data[i] == doctest::Approx(-gb.data[i]).epsilon(1e-15));
}

TEST_CASE("self_regularization shape mismatch raises") {
  Tape t;
  Var a = t.leaf(Tensor::zeros({1, 2, 3, 3}), false);
  Var b = t.leaf(Tensor::zeros({1, 2, 4, 4}), false);
  Tensor y({1, 2}, {1, 0});
  CHECK_THROWS_AS(t.self_regularization(a, b, y, 1.0, false), std::invalid_argument);
}

TEST_CASE("total_loss sums components exactly and routes gradients") {
  Tape t;
  Var a = t.leaf(Tensor({1}, {1.0}), false);
  Var b = t.leaf(Tensor({1}, {2.0}), false);
  Var c = t.leaf(Tensor({1}, {0.5}), false);
  LossReport rep;
  Var total = total_loss(t, a, b, c, rep);
  CHECK(rep.total == 3.5);
  CHECK(rep.total == rep.cls_transformer + rep.cls_cnn + rep.self_reg);
  CHECK(total.val().data[0] == 3.5);

  // missing component contributes zero and keeps the sum exact
  Tape t2;
  LossReport rep2;
  Var total2 = total_loss(t2, t2.leaf(Tensor({1}, {1.25}), false), Var{nullptr, -1}, Var{nullptr, -1}, rep2);
  CHECK(rep2.total == 1.25);
  CHECK(rep2.cls_cnn == 0.0);
  CHECK(total2.val().data[0] == 1.25);
}

TEST_CASE("total gradient equals sum of component gradients (finite differences)") {
  // shared upstream scalar x feeds two loss terms: f = x^2 and g = 3x
  Tensor x0({1}, {0.7});
  auto build = [](Tape& t, Var x, LossReport& rep) {
    Var f = t.sum(t.hadamard(x, x));
    Var g = t.scale(t.sum(x), 3.0);
    return total_loss(t, f, g, Var{nullptr, -1}, rep);
  };
  Tape t;
  Var x = t.leaf(x0, true);
  LossReport rep;
  t.backward(build(t, x, rep));
  double analytic = t.grad_of(x).data[0];

  Tensor xv = x0;
  std::vector<double> fd = oracle::fd_grad(xv.data, [&]() {
    Tape t2;
    LossReport r2;
    return build(t2, t2.leaf(xv, false), r2).val().data[0];
  });
  CHECK(std::fabs(analytic - fd[0]) < 1e-7);
  CHECK(analytic == doctest::Approx(2.0 * 0.7 + 3.0).epsilon(1e-12));
}

TEST_CASE("pixel_bce perfect prediction, midpoint and hand oracle") {
  // strongly correct scores per pixel
  Tensor good({1, 2, 1, 2}, {40.0, -40.0, -40.0, 40.0});  // labels [0,1]
  std::vector<int> lab{0, 1};
  Tape t;
  CHECK(t.pixel_bce(t.leaf(good, false), lab).val().data[0] < 1e-6);

  // 0.5 everywhere: ln 2 per (pixel,class) term
  Tensor mid = Tensor::zeros({1, 3, 2, 2});
  std::vector<int> lab2{0, 1, 2, 0};
  Tape t2;
  CHECK(t2.pixel_bce(t2.leaf(mid, false), lab2).val().data[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // 2x1 image, 2 classes: hand-summed oracle
  // pixel 0 true class 0 with p=0.75, pixel 1 true class 1 with p=0.5; other terms exact
  double l0 = std::log(3.0);  // sigmoid -> 0.75
  Tensor sc({1, 2, 1, 2}, {l0, -40.0, -40.0, 0.0});
  std::vector<int> lab3{0, 1};
  double expect = (-std::log(0.75) - std::log(1.0 - 1e-7)      // pixel 0: class0 true, class1 absent-correct
                   - std::log(1.0 - 1e-7) - std::log(0.5)) /   // pixel 1: class0 absent-correct, class1 true at 0.5
                  4.0;
  Tape t3;
  CHECK(t3.pixel_bce(t3.leaf(sc, false), lab3).val().data[0] == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("pixel_bce rejects out-of-range labels") {
  Tensor sc = Tensor::zeros({1, 3, 1, 2});
  Tape t;
  CHECK_THROWS_AS(t.pixel_bce(t.leaf(sc, false), std::vector<int>{0, 3}), std::invalid_argument);
  CHECK_THROWS_AS(t.pixel_bce(t.leaf(sc, false), std::vector<int>{-1, 0}), std::invalid_argument);
}

TEST_CASE("loss report serializes one json line") {
  LossReport r;
  r.cls_transformer = 1.5;
  r.cls_cnn = 0.25;
  r.self_reg = 0.125;
  r.total = 1.875;
  std::string line = r.to_json_line(7, 2);
  CHECK(line == "{\"step\":7,\"epoch\":2,\"cls_t\":1.5,\"cls_c\":0.25,\"selfreg\":0.125,\"total\":1.875}");
}

}  // TEST_SUITE
