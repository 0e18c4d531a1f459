#include <doctest.h>

#include <cmath>
#include <functional>

#include "oracles.hpp"
#include "wsseg/autodiff.hpp"
#include "wsseg/losses.hpp"

using namespace wsseg;

namespace {

// analytic gradient of `build` w.r.t. a tracked input leaf vs central FD
double input_grad_err(const Tensor& x0, const std::function<Var(Tape&, Var)>& build) {
  Tensor x = x0;
  Tape t;
  Var xin = t.leaf(x, true);
  Var loss = build(t, xin);
  t.backward(loss);
  Tensor analytic = t.grad_of(xin);

  std::vector<double> fd = oracle::fd_grad(x.data, [&]() {
    Tape t2;
    Var v = t2.leaf(x, false);
    return build(t2, v).val().data[0];
  });
  return oracle::max_rel_err(analytic.data, fd);
}

// weighted sum with fixed coefficients turns any tensor output into a scalar
Var weighted_sum(Tape& t, Var y, const Tensor& coeff) {
  Var c = t.leaf(coeff, false);
  return t.sum(t.hadamard(y, c));
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("backward of sum gives all-ones; of sum of squares gives 2w") {
  ParamBlock w("w", Tensor({3}, {3.0, -1.0, 0.5}));
  {
    Tape t;
    Var p = t.param(w);
    t.backward(t.sum(p));
    for (double g : w.grad.data) CHECK(g == 1.0);
  }
  w.zero_grad();
  {
    Tape t;
    Var p = t.param(w);
    t.backward(t.sum(t.hadamard(p, p)));
    CHECK(w.grad.data[0] == doctest::Approx(6.0).epsilon(1e-14));
    CHECK(w.grad.data[1] == doctest::Approx(-2.0).epsilon(1e-14));
    CHECK(w.grad.data[2] == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("backward accumulates: two passes equal one doubled loss") {
  Rng rng(31);
  Tensor init = oracle::random_tensor({4, 3}, rng);
  ParamBlock w1("w", init), w2("w", init);

  for (int rep = 0; rep < 2; ++rep) {
    Tape t;
    Var p = t.param(w1);
    t.backward(t.sum(t.hadamard(p, p)));
  }
  {
    Tape t;
    Var p = t.param(w2);
    t.backward(t.scale(t.sum(t.hadamard(p, p)), 2.0));
  }
  for (size_t i = 0; i < w1.grad.data.size(); ++i)
    CHECK(w1.grad.data[i] == doctest::Approx(w2.grad.data[i]).epsilon(1e-13));
}

TEST_CASE("backward on a loss disconnected from a param leaves zero grads") {
  ParamBlock w("w", Tensor({2}, {1.0, 2.0}));
  Tape t;
  (void)t.param(w);
  Var c = t.leaf(Tensor({1}, {4.0}), false);
  Var loss = t.sum(c);
  t.backward(loss);
  for (double g : w.grad.data) CHECK(g == 0.0);
}

TEST_CASE("gradient check: elementwise and reduction ops") {
  Rng rng(41);
  for (auto shape : std::vector<std::vector<int>>{{3}, {2, 4}, {2, 3, 2}}) {
    Tensor x0 = oracle::random_tensor(shape, rng);
    Tensor coeff = oracle::random_tensor(shape, rng);
    CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.relu(v), coeff);
          }) < 1e-5);
    CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.gelu(v), coeff);
          }) < 1e-5);
    CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.hadamard(v, v), coeff);
          }) < 1e-5);
    CHECK(input_grad_err(x0, [&](Tape& t, Var v) { return t.mean(t.scale(v, 3.7)); }) < 1e-5);
  }
}

TEST_CASE("gradient check: softmax on three shapes") {
  Rng rng(43);
  for (auto shape : std::vector<std::vector<int>>{{1, 5}, {3, 4}, {2, 2, 6}}) {
    Tensor x0 = oracle::random_tensor(shape, rng, -2.0, 2.0);
    Tensor coeff = oracle::random_tensor(shape, rng);
    CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.softmax_last(v), coeff);
          }) < 1e-5);
  }
}

TEST_CASE("gradient check: layer_norm inputs and affine params") {
  Rng rng(47);
  for (auto shape : std::vector<std::vector<int>>{{1, 1, 4}, {2, 3, 8}, {4, 6}}) {
    int d = shape.back();
    Tensor x0 = oracle::random_tensor(shape, rng, -2.0, 2.0);
    Tensor g0 = oracle::random_tensor({d}, rng, 0.5, 1.5);
    Tensor b0 = oracle::random_tensor({d}, rng, -0.5, 0.5);
    Tensor coeff = oracle::random_tensor(shape, rng);

    CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.layer_norm(v, t.leaf(g0, false), t.leaf(b0, false), 1e-5), coeff);
          }) < 1e-5);

    // gamma/beta via param blocks against FD
    ParamBlock gp("g", g0), bp("b", b0);
    Tape t;
    Var y = t.layer_norm(t.leaf(x0, false), t.param(gp), t.param(bp), 1e-5);
    t.backward(weighted_sum(t, y, coeff));
    Tensor gv = g0;
    std::vector<double> fd_g = oracle::fd_grad(gv.data, [&]() {
      double acc = 0.0;
      Tensor yy = layer_norm(x0, gv, b0, 1e-5);
      for (size_t i = 0; i < yy.data.size(); ++i) acc += yy.data[i] * coeff.data[i];
      return acc;
    });
    CHECK(oracle::max_rel_err(gp.grad.data, fd_g) < 1e-5);
    Tensor bv = b0;
    std::vector<double> fd_b = oracle::fd_grad(bv.data, [&]() {
      double acc = 0.0;
      Tensor yy = layer_norm(x0, g0, bv, 1e-5);
      for (size_t i = 0; i < yy.data.size(); ++i) acc += yy.data[i] * coeff.data[i];
      return acc;
    });
    CHECK(oracle::max_rel_err(bp.grad.data, fd_b) < 1e-5);
  }
}

TEST_CASE("gradient check: matmul both arguments, batched") {
  Rng rng(53);
  struct Case {
    std::vector<int> a, b;
  };
  for (const Case& c : {Case{{3, 4}, {4, 2}}, Case{{2, 3, 4}, {2, 4, 3}}, Case{{2, 2, 2, 3}, {2, 2, 3, 2}}}) {
    Tensor a0 = oracle::random_tensor(c.a, rng);
    Tensor b0 = oracle::random_tensor(c.b, rng);
    std::vector<int> oshape = c.a;
    oshape.back() = c.b.back();
    Tensor coeff = oracle::random_tensor(oshape, rng);

    CHECK(input_grad_err(a0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.matmul(v, t.leaf(b0, false)), coeff);
          }) < 1e-5);
    CHECK(input_grad_err(b0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.matmul(t.leaf(a0, false), v), coeff);
          }) < 1e-5);
  }
}

TEST_CASE("gradient check: linear") {
  Rng rng(59);
  Tensor x0 = oracle::random_tensor({2, 5, 3}, rng);
  Tensor w0 = oracle::random_tensor({3, 4}, rng);
  Tensor b0 = oracle::random_tensor({4}, rng);
  Tensor coeff = oracle::random_tensor({2, 5, 4}, rng);
  CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.linear(v, t.leaf(w0, false), t.leaf(b0, false)), coeff);
        }) < 1e-5);
  CHECK(input_grad_err(w0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.linear(t.leaf(x0, false), v, t.leaf(b0, false)), coeff);
        }) < 1e-5);
  CHECK(input_grad_err(b0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.linear(t.leaf(x0, false), t.leaf(w0, false), v), coeff);
        }) < 1e-5);
}

TEST_CASE("gradient check: conv2d input, weight and bias on three shapes") {
  Rng rng(61);
  struct Case {
    std::vector<int> xs, ws;
    int stride, pad;
  };
  for (const Case& c : {Case{{1, 2, 5, 5}, {3, 2, 3, 3}, 2, 1}, Case{{2, 1, 4, 6}, {2, 1, 2, 2}, 1, 0},
                        Case{{1, 3, 4, 4}, {2, 3, 1, 1}, 1, 0}}) {
    Tensor x0 = oracle::random_tensor(c.xs, rng);
    Tensor w0 = oracle::random_tensor(c.ws, rng);
    Tensor b0 = oracle::random_tensor({c.ws[0]}, rng);
    Tensor probe = conv2d(x0, w0, b0, c.stride, c.pad);
    Tensor coeff = oracle::random_tensor(probe.shape, rng);

    CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.conv2d(v, t.leaf(w0, false), t.leaf(b0, false), c.stride, c.pad), coeff);
          }) < 1e-5);
    CHECK(input_grad_err(w0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.conv2d(t.leaf(x0, false), v, t.leaf(b0, false), c.stride, c.pad), coeff);
          }) < 1e-5);
    CHECK(input_grad_err(b0, [&](Tape& t, Var v) {
            return weighted_sum(t, t.conv2d(t.leaf(x0, false), t.leaf(w0, false), v, c.stride, c.pad), coeff);
          }) < 1e-5);
  }
}

TEST_CASE("gradient check: shape ops route gradients exactly") {
  Rng rng(67);
  Tensor x0 = oracle::random_tensor({1, 3, 4, 4}, rng);
  Tensor coeff_tok = oracle::random_tensor({1, 4, 12}, rng);
  CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.patchify(v, 2), coeff_tok);
        }) < 1e-5);

  Tensor tok0 = oracle::random_tensor({2, 6, 8}, rng);
  Tensor coeff_grid = oracle::random_tensor({2, 8, 2, 3}, rng);
  CHECK(input_grad_err(tok0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.tokens_to_grid(v, 2, 3), coeff_grid);
        }) < 1e-5);

  Tensor coeff_heads = oracle::random_tensor({2, 4, 6, 2}, rng);
  CHECK(input_grad_err(tok0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.split_heads(v, 4), coeff_heads);
        }) < 1e-5);

  Tensor h0 = oracle::random_tensor({2, 4, 6, 2}, rng);
  Tensor coeff_merged = oracle::random_tensor({2, 6, 8}, rng);
  CHECK(input_grad_err(h0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.merge_heads(v), coeff_merged);
        }) < 1e-5);

  Tensor coeff_tr = oracle::random_tensor({2, 4, 2, 6}, rng);
  CHECK(input_grad_err(h0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.transpose_last2(v), coeff_tr);
        }) < 1e-5);
}

TEST_CASE("gradient check: global_avg_pool, bilinear_resize, concat") {
  Rng rng(71);
  Tensor x0 = oracle::random_tensor({2, 3, 4, 4}, rng);
  Tensor coeff_pool = oracle::random_tensor({2, 3}, rng);
  CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.global_avg_pool(v), coeff_pool);
        }) < 1e-5);

  Tensor coeff_up = oracle::random_tensor({2, 3, 7, 9}, rng);
  CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.bilinear_resize(v, 7, 9), coeff_up);
        }) < 1e-5);

  Tensor coeff_dn = oracle::random_tensor({2, 3, 3, 2}, rng);
  CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.bilinear_resize(v, 3, 2), coeff_dn);
        }) < 1e-5);

  Tensor other = oracle::random_tensor({2, 2, 4, 4}, rng);
  Tensor coeff_cat = oracle::random_tensor({2, 5, 4, 4}, rng);
  CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.concat_channels(v, t.leaf(other, false)), coeff_cat);
        }) < 1e-5);
  CHECK(input_grad_err(other, [&](Tape& t, Var v) {
          return weighted_sum(t, t.concat_channels(t.leaf(x0, false), v), coeff_cat);
        }) < 1e-5);
}

TEST_CASE("gradient check: add_rows and residual composition") {
  Rng rng(73);
  Tensor x0 = oracle::random_tensor({2, 3, 5}, rng);
  Tensor pos0 = oracle::random_tensor({3, 5}, rng);
  Tensor coeff = oracle::random_tensor({2, 3, 5}, rng);
  CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.add_rows(v, t.leaf(pos0, false)), coeff);
        }) < 1e-5);
  CHECK(input_grad_err(pos0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.add_rows(t.leaf(x0, false), v), coeff);
        }) < 1e-5);

  // residual: y = x + gelu(x) exercises fan-out accumulation
  CHECK(input_grad_err(x0, [&](Tape& t, Var v) {
          return weighted_sum(t, t.add(v, t.gelu(v)), coeff);
        }) < 1e-5);
}

TEST_CASE("gradient check: fused losses") {
  Rng rng(79);
  // multilabel bce kept in the smooth region
  Tensor logits0 = oracle::random_tensor({3, 4}, rng, -4.0, 4.0);
  Tensor y({3, 4}, {1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 0});
  CHECK(input_grad_err(logits0, [&](Tape& t, Var v) { return t.multilabel_bce(v, y); }) < 1e-5);

  // self-regularization away from the huber knee
  Tensor mt0 = oracle::random_tensor({2, 3, 3, 3}, rng, -0.8, 0.8);
  Tensor mc0 = oracle::random_tensor({2, 3, 3, 3}, rng, -0.8, 0.8);
  Tensor y2({2, 3}, {1, 0, 1, 0, 1, 1});
  CHECK(input_grad_err(mt0, [&](Tape& t, Var v) {
          return t.self_regularization(v, t.leaf(mc0, false), y2, 10.0, false);
        }) < 1e-5);
  CHECK(input_grad_err(mc0, [&](Tape& t, Var v) {
          return t.self_regularization(t.leaf(mt0, false), v, y2, 10.0, false);
        }) < 1e-5);

  // pixel bce
  Tensor scores0 = oracle::random_tensor({1, 3, 2, 2}, rng, -3.0, 3.0);
  std::vector<int> labels{0, 2, 1, 0};
  CHECK(input_grad_err(scores0, [&](Tape& t, Var v) { return t.pixel_bce(v, labels); }) < 1e-5);
}

TEST_CASE("gradient check: deep composition (mini attention-like stack)") {
  Rng rng(83);
  Tensor x0 = oracle::random_tensor({1, 4, 6}, rng, -0.5, 0.5);
  Tensor wq = oracle::random_tensor({6, 6}, rng, -0.4, 0.4);
  Tensor wo = oracle::random_tensor({6, 6}, rng, -0.4, 0.4);
  Tensor bz = Tensor::zeros({6});
  Tensor g = Tensor::full({6}, 1.0);
  Tensor coeff = oracle::random_tensor({1, 4, 6}, rng);

  auto build = [&](Tape& t, Var v) {
    Var h = t.layer_norm(v, t.leaf(g, false), t.leaf(bz, false), 1e-5);
    Var q = t.split_heads(t.linear(h, t.leaf(wq, false), t.leaf(bz, false)), 2);
    Var a = t.softmax_last(t.scale(t.matmul(q, t.transpose_last2(q)), 0.577));
    Var ctx = t.merge_heads(t.matmul(a, q));
    Var out = t.add(v, t.linear(ctx, t.leaf(wo, false), t.leaf(bz, false)));
    return weighted_sum(t, out, coeff);
  };
  CHECK(input_grad_err(x0, build) < 1e-5);
}

TEST_CASE("normalize_channels rescales and routes gradient through the range") {
  Tensor x({1, 2, 1, 3}, {0.0, 5.0, 10.0, 4.0, 4.0, 4.0});
  Tape t;
  Var v = t.leaf(x, true);
  Var y = t.normalize_channels(v);
  CHECK(y.val().data == std::vector<double>{0.0, 0.5, 1.0, 0.0, 0.0, 0.0});
  t.backward(t.sum(y));
  Tensor g = t.grad_of(v);
  CHECK(g.data[0] == doctest::Approx(0.1).epsilon(1e-12));  // 1/(max-min)
  CHECK(g.data[3] == 0.0);                                  // degenerate channel
}

}  // TEST_SUITE
