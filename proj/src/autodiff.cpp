#include "wsseg/autodiff.hpp"

#include <cmath>
#include <cstring>

#include "wsseg/losses.hpp"

namespace wsseg {

const Tensor& Var::val() const { return tape->val(id); }
const std::vector<int>& Var::shape() const { return tape->val(id).shape; }

int Tape::push(Tensor value, bool needs, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.back = std::move(back);
  n.needs_grad = needs;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::adj(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.adj.empty()) n.adj.assign(n.value.data.size(), 0.0);
  return n.adj;
}

void Tape::check_mine(Var v, const char* op) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument(std::string(op) + ": var does not belong to this tape");
}

Var Tape::leaf(Tensor value, bool track_grad) {
  int id = push(std::move(value), track_grad, nullptr);
  return {this, id};
}

Var Tape::param(ParamBlock& p) {
  int id = push(p.value, true, nullptr);
  nodes_[static_cast<size_t>(id)].bound = &p;
  return {this, id};
}

void Tape::backward(Var loss) {
  check_mine(loss, "backward");
  if (val(loss.id).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  for (Node& n : nodes_) n.adj.clear();
  adj(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.adj.empty() || !n.needs_grad) continue;
    if (n.back) n.back(*this);
    if (n.bound) {
      for (size_t i = 0; i < n.adj.size(); ++i) n.bound->grad.data[i] += n.adj[i];
    }
  }
}

Tensor Tape::grad_of(Var v) const {
  check_mine(v, "grad_of");
  const Node& n = nodes_[static_cast<size_t>(v.id)];
  if (n.adj.empty()) return Tensor::zeros(n.value.shape);
  return Tensor(n.value.shape, n.adj);
}

// ---- elementwise ----

Var Tape::add(Var a, Var b) {
  check_mine(a, "add");
  check_mine(b, "add");
  bool ng = needs(a.id) || needs(b.id);
  int aid = a.id, bid = b.id;
  int out = push(wsseg::add(val(aid), val(bid)), ng, nullptr);
  nodes_.back().back = [aid, bid, out](Tape& t) {
    const std::vector<double>& dy = t.adj(out);
    if (t.needs(aid)) {
      std::vector<double>& da = t.adj(aid);
      for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    }
    if (t.needs(bid)) {
      std::vector<double>& db = t.adj(bid);
      for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
    }
  };
  return {this, out};
}

Var Tape::sub(Var a, Var b) {
  check_mine(a, "sub");
  check_mine(b, "sub");
  bool ng = needs(a.id) || needs(b.id);
  int aid = a.id, bid = b.id;
  int out = push(wsseg::sub(val(aid), val(bid)), ng, nullptr);
  nodes_.back().back = [aid, bid, out](Tape& t) {
    const std::vector<double>& dy = t.adj(out);
    if (t.needs(aid)) {
      std::vector<double>& da = t.adj(aid);
      for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    }
    if (t.needs(bid)) {
      std::vector<double>& db = t.adj(bid);
      for (size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
    }
  };
  return {this, out};
}

Var Tape::scale(Var a, double s) {
  check_mine(a, "scale");
  int aid = a.id;
  int out = push(wsseg::scale(val(aid), s), needs(aid), nullptr);
  nodes_.back().back = [aid, s, out](Tape& t) {
    if (!t.needs(aid)) return;
    const std::vector<double>& dy = t.adj(out);
    std::vector<double>& da = t.adj(aid);
    for (size_t i = 0; i < dy.size(); ++i) da[i] += s * dy[i];
  };
  return {this, out};
}

Var Tape::hadamard(Var a, Var b) {
  check_mine(a, "hadamard");
  check_mine(b, "hadamard");
  bool ng = needs(a.id) || needs(b.id);
  int aid = a.id, bid = b.id;
  int out = push(wsseg::hadamard(val(aid), val(bid)), ng, nullptr);
  nodes_.back().back = [aid, bid, out](Tape& t) {
    const std::vector<double>& dy = t.adj(out);
    const std::vector<double>& av = t.val(aid).data;
    const std::vector<double>& bv = t.val(bid).data;
    if (t.needs(aid)) {
      std::vector<double>& da = t.adj(aid);
      for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
    }
    if (t.needs(bid)) {
      std::vector<double>& db = t.adj(bid);
      for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
    }
  };
  return {this, out};
}

Var Tape::add_rows(Var x, Var rows) {
  check_mine(x, "add_rows");
  check_mine(rows, "add_rows");
  bool ng = needs(x.id) || needs(rows.id);
  int xid = x.id, rid = rows.id;
  int out = push(wsseg::add_rows(val(xid), val(rid)), ng, nullptr);
  nodes_.back().back = [xid, rid, out](Tape& t) {
    const std::vector<double>& dy = t.adj(out);
    if (t.needs(xid)) {
      std::vector<double>& dx = t.adj(xid);
      for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
    if (t.needs(rid)) {
      std::vector<double>& dr = t.adj(rid);
      size_t td = dr.size();
      size_t n = dy.size() / td;
      for (size_t ni = 0; ni < n; ++ni) {
        const double* src = dy.data() + ni * td;
        for (size_t i = 0; i < td; ++i) dr[i] += src[i];
      }
    }
  };
  return {this, out};
}

Var Tape::sum(Var a) {
  check_mine(a, "sum");
  int aid = a.id;
  double s = 0.0;
  for (double v : val(aid).data) s += v;
  int out = push(Tensor({1}, {s}), needs(aid), nullptr);
  nodes_.back().back = [aid, out](Tape& t) {
    if (!t.needs(aid)) return;
    double dy = t.adj(out)[0];
    std::vector<double>& da = t.adj(aid);
    for (double& v : da) v += dy;
  };
  return {this, out};
}

Var Tape::mean(Var a) {
  Var s = sum(a);
  return scale(s, 1.0 / static_cast<double>(val(a.id).numel()));
}

// ---- linear algebra ----

Var Tape::linear(Var x, Var w, Var b) {
  check_mine(x, "linear");
  check_mine(w, "linear");
  check_mine(b, "linear");
  bool ng = needs(x.id) || needs(w.id) || needs(b.id);
  int xid = x.id, wid = w.id, bid = b.id;
  int out = push(wsseg::linear(val(xid), val(wid), val(bid)), ng, nullptr);
  nodes_.back().back = [xid, wid, bid, out](Tape& t) {
    const Tensor& xv = t.val(xid);
    const Tensor& wv = t.val(wid);
    const std::vector<double>& dy = t.adj(out);
    int k = wv.shape[0], p = wv.shape[1];
    long long rows = xv.numel() / k;
    if (t.needs(xid)) {
      std::vector<double>& dx = t.adj(xid);
#pragma omp parallel for schedule(static)
      for (long long r = 0; r < rows; ++r)
        gemm_nt_acc(dy.data() + r * p, wv.data.data(), dx.data() + r * k, 1, p, k);
    }
    if (t.needs(wid)) {
      std::vector<double>& dw = t.adj(wid);
      gemm_tn_acc(xv.data.data(), dy.data(), dw.data(), static_cast<int>(rows), k, p);
    }
    if (t.needs(bid)) {
      std::vector<double>& db = t.adj(bid);
      for (long long r = 0; r < rows; ++r) {
        const double* src = dy.data() + r * p;
        for (int j = 0; j < p; ++j) db[static_cast<size_t>(j)] += src[j];
      }
    }
  };
  return {this, out};
}

Var Tape::matmul(Var a, Var b) {
  check_mine(a, "matmul");
  check_mine(b, "matmul");
  bool ng = needs(a.id) || needs(b.id);
  int aid = a.id, bid = b.id;
  int out = push(wsseg::matmul(val(aid), val(bid)), ng, nullptr);
  nodes_.back().back = [aid, bid, out](Tape& t) {
    const Tensor& av = t.val(aid);
    const Tensor& bv = t.val(bid);
    const std::vector<double>& dy = t.adj(out);
    int m = av.shape[av.shape.size() - 2];
    int k = av.shape.back();
    int p = bv.shape.back();
    long long batches = av.numel() / (static_cast<long long>(m) * k);
    bool b_shared = bv.rank() == 2 && av.rank() > 2;
    size_t astep = static_cast<size_t>(m) * k;
    size_t bstep = b_shared ? 0 : static_cast<size_t>(k) * p;
    size_t ostep = static_cast<size_t>(m) * p;
    if (t.needs(aid)) {
      std::vector<double>& da = t.adj(aid);
#pragma omp parallel for schedule(static)
      for (long long bi = 0; bi < batches; ++bi)
        gemm_nt_acc(dy.data() + bi * ostep, bv.data.data() + bi * bstep, da.data() + bi * astep, m, p, k);
    }
    if (t.needs(bid)) {
      std::vector<double>& db = t.adj(bid);
      if (b_shared) {
        for (long long bi = 0; bi < batches; ++bi)
          gemm_tn_acc(av.data.data() + bi * astep, dy.data() + bi * ostep, db.data(), m, k, p);
      } else {
#pragma omp parallel for schedule(static)
        for (long long bi = 0; bi < batches; ++bi)
          gemm_tn_acc(av.data.data() + bi * astep, dy.data() + bi * ostep, db.data() + bi * bstep, m, k, p);
      }
    }
  };
  return {this, out};
}

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
  check_mine(x, "conv2d");
  check_mine(w, "conv2d");
  check_mine(b, "conv2d");
  bool ng = needs(x.id) || needs(w.id) || needs(b.id);
  int xid = x.id, wid = w.id, bid = b.id;
  int out = push(wsseg::conv2d(val(xid), val(wid), val(bid), stride, pad), ng, nullptr);
  nodes_.back().back = [xid, wid, bid, stride, pad, out](Tape& t) {
    const Tensor& xv = t.val(xid);
    const Tensor& wv = t.val(wid);
    const std::vector<double>& dy = t.adj(out);
    int n = xv.shape[0], cin = xv.shape[1], h = xv.shape[2], iw = xv.shape[3];
    int cout = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
    int oh = t.val(out).shape[2], ow = t.val(out).shape[3];
    int kk = cin * kh * kw;
    int plane = oh * ow;
    bool need_x = t.needs(xid);
    bool need_w = t.needs(wid);
    bool need_b = t.needs(bid);

    std::vector<std::vector<double>> dw_partial;
    if (need_w) dw_partial.assign(static_cast<size_t>(n), std::vector<double>());

    std::vector<double>* dxp = need_x ? &t.adj(xid) : nullptr;
#pragma omp parallel for schedule(static)
    for (int ni = 0; ni < n; ++ni) {
      std::vector<double> col(static_cast<size_t>(plane) * kk);
      im2col(xv.data.data() + static_cast<size_t>(ni) * cin * h * iw, cin, h, iw, kh, kw, stride, pad, oh, ow,
             col.data());
      const double* dout = dy.data() + static_cast<size_t>(ni) * cout * plane;
      if (need_w) {
        std::vector<double>& dw = dw_partial[static_cast<size_t>(ni)];
        dw.assign(static_cast<size_t>(cout) * kk, 0.0);
        // dW[c,j] += sum_i dOut[c,i] * col[i,j]
        gemm_nn_acc(dout, col.data(), dw.data(), cout, plane, kk);
      }
      if (need_x) {
        std::vector<double> dcol(static_cast<size_t>(plane) * kk, 0.0);
        // dcol[i,j] = sum_c dOut[c,i] * W[c,j]
        gemm_tn_acc(dout, wv.data.data(), dcol.data(), cout, plane, kk);
        // col2im scatter
        double* dximg = dxp->data() + static_cast<size_t>(ni) * cin * h * iw;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const double* crow = dcol.data() + (static_cast<size_t>(oy) * ow + ox) * kk;
            size_t idx = 0;
            for (int c = 0; c < cin; ++c) {
              double* dplane = dximg + static_cast<size_t>(c) * h * iw;
              for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride + ky - pad;
                for (int kx = 0; kx < kw; ++kx, ++idx) {
                  int ix = ox * stride + kx - pad;
                  if (iy >= 0 && iy < h && ix >= 0 && ix < iw) dplane[static_cast<size_t>(iy) * iw + ix] += crow[idx];
                }
              }
            }
          }
      }
    }
    // sequential reductions keep accumulation order fixed
    if (need_w) {
      std::vector<double>& dw = t.adj(wid);
      for (int ni = 0; ni < n; ++ni)
        for (size_t i = 0; i < dw.size(); ++i) dw[i] += dw_partial[static_cast<size_t>(ni)][i];
    }
    if (need_b) {
      std::vector<double>& db = t.adj(bid);
      for (int ni = 0; ni < n; ++ni)
        for (int c = 0; c < cout; ++c) {
          const double* src = dy.data() + (static_cast<size_t>(ni) * cout + c) * plane;
          double s = 0.0;
          for (int i = 0; i < plane; ++i) s += src[i];
          db[static_cast<size_t>(c)] += s;
        }
    }
  };
  return {this, out};
}

// ---- activations / normalization ----

Var Tape::relu(Var x) {
  check_mine(x, "relu");
  int xid = x.id;
  int out = push(wsseg::relu(val(xid)), needs(xid), nullptr);
  nodes_.back().back = [xid, out](Tape& t) {
    if (!t.needs(xid)) return;
    const std::vector<double>& dy = t.adj(out);
    const std::vector<double>& xv = t.val(xid).data;
    std::vector<double>& dx = t.adj(xid);
    for (size_t i = 0; i < dy.size(); ++i)
      if (xv[i] > 0.0) dx[i] += dy[i];
  };
  return {this, out};
}

Var Tape::gelu(Var x) {
  check_mine(x, "gelu");
  int xid = x.id;
  int out = push(wsseg::gelu(val(xid)), needs(xid), nullptr);
  nodes_.back().back = [xid, out](Tape& t) {
    if (!t.needs(xid)) return;
    const std::vector<double>& dy = t.adj(out);
    const std::vector<double>& xv = t.val(xid).data;
    std::vector<double>& dx = t.adj(xid);
    for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * gelu_deriv(xv[i]);
  };
  return {this, out};
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  check_mine(x, "layer_norm");
  check_mine(gamma, "layer_norm");
  check_mine(beta, "layer_norm");
  bool ng = needs(x.id) || needs(gamma.id) || needs(beta.id);
  int xid = x.id, gid = gamma.id, bid = beta.id;
  int out = push(wsseg::layer_norm(val(xid), val(gid), val(bid), eps), ng, nullptr);
  nodes_.back().back = [xid, gid, bid, eps, out](Tape& t) {
    const Tensor& xv = t.val(xid);
    const std::vector<double>& gv = t.val(gid).data;
    const std::vector<double>& dy = t.adj(out);
    int d = xv.shape.back();
    long long rows = xv.numel() / d;
    bool need_x = t.needs(xid);
    bool need_g = t.needs(gid);
    bool need_b = t.needs(bid);
    std::vector<double>* dx = need_x ? &t.adj(xid) : nullptr;
    std::vector<double>* dg = need_g ? &t.adj(gid) : nullptr;
    std::vector<double>* db = need_b ? &t.adj(bid) : nullptr;
#pragma omp parallel for schedule(static)
    for (long long r = 0; r < rows; ++r) {
      if (!need_x) continue;
      const double* xr = xv.data.data() + r * d;
      const double* dyr = dy.data() + r * d;
      double mean = 0.0;
      for (int i = 0; i < d; ++i) mean += xr[i];
      mean /= d;
      double var = 0.0;
      for (int i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
      var /= d;
      double inv = 1.0 / std::sqrt(var + eps);
      double m1 = 0.0, m2 = 0.0;  // mean(dy*g), mean(dy*g*xhat)
      for (int i = 0; i < d; ++i) {
        double dg_ = dyr[i] * gv[static_cast<size_t>(i)];
        double xh = (xr[i] - mean) * inv;
        m1 += dg_;
        m2 += dg_ * xh;
      }
      m1 /= d;
      m2 /= d;
      double* dxr = dx->data() + r * d;
      for (int i = 0; i < d; ++i) {
        double dg_ = dyr[i] * gv[static_cast<size_t>(i)];
        double xh = (xr[i] - mean) * inv;
        dxr[i] += inv * (dg_ - m1 - xh * m2);
      }
    }
    if (need_g || need_b) {
      for (long long r = 0; r < rows; ++r) {
        const double* xr = xv.data.data() + r * d;
        const double* dyr = dy.data() + r * d;
        double mean = 0.0;
        for (int i = 0; i < d; ++i) mean += xr[i];
        mean /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= d;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < d; ++i) {
          if (need_g) (*dg)[static_cast<size_t>(i)] += dyr[i] * (xr[i] - mean) * inv;
          if (need_b) (*db)[static_cast<size_t>(i)] += dyr[i];
        }
      }
    }
  };
  return {this, out};
}

Var Tape::softmax_last(Var x) {
  check_mine(x, "softmax_last");
  int xid = x.id;
  int out = push(wsseg::softmax_last(val(xid)), needs(xid), nullptr);
  nodes_.back().back = [xid, out](Tape& t) {
    if (!t.needs(xid)) return;
    const Tensor& yv = t.val(out);
    const std::vector<double>& dy = t.adj(out);
    std::vector<double>& dx = t.adj(xid);
    int d = yv.shape.back();
    long long rows = yv.numel() / d;
#pragma omp parallel for schedule(static)
    for (long long r = 0; r < rows; ++r) {
      const double* yr = yv.data.data() + r * d;
      const double* dyr = dy.data() + r * d;
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += dyr[i] * yr[i];
      double* dxr = dx.data() + r * d;
      for (int i = 0; i < d; ++i) dxr[i] += yr[i] * (dyr[i] - dot);
    }
  };
  return {this, out};
}

Var Tape::global_avg_pool(Var x) {
  check_mine(x, "global_avg_pool");
  int xid = x.id;
  int out = push(wsseg::global_avg_pool(val(xid)), needs(xid), nullptr);
  nodes_.back().back = [xid, out](Tape& t) {
    if (!t.needs(xid)) return;
    const Tensor& xv = t.val(xid);
    const std::vector<double>& dy = t.adj(out);
    std::vector<double>& dx = t.adj(xid);
    size_t plane = static_cast<size_t>(xv.shape[2]) * xv.shape[3];
    double inv = 1.0 / static_cast<double>(plane);
    for (size_t nc = 0; nc < dy.size(); ++nc) {
      double g = dy[nc] * inv;
      double* dst = dx.data() + nc * plane;
      for (size_t i = 0; i < plane; ++i) dst[i] += g;
    }
  };
  return {this, out};
}

Var Tape::bilinear_resize(Var x, int oh, int ow) {
  check_mine(x, "bilinear_resize");
  int xid = x.id;
  const Tensor& xv = val(xid);
  int h = xv.rank() == 3 ? xv.shape[1] : xv.shape[2];
  int w = xv.rank() == 3 ? xv.shape[2] : xv.shape[3];
  if (h == oh && w == ow) return x;  // identity, no node
  int out = push(wsseg::bilinear_resize(xv, oh, ow), needs(xid), nullptr);
  nodes_.back().back = [xid, oh, ow, out](Tape& t) {
    if (!t.needs(xid)) return;
    const Tensor& xv2 = t.val(xid);
    const std::vector<double>& dy = t.adj(out);
    std::vector<double>& dx = t.adj(xid);
    bool rank3 = xv2.rank() == 3;
    int n = rank3 ? 1 : xv2.shape[0];
    int c = rank3 ? xv2.shape[0] : xv2.shape[1];
    int h2 = rank3 ? xv2.shape[1] : xv2.shape[2];
    int w2 = rank3 ? xv2.shape[2] : xv2.shape[3];
    std::vector<int> y0, y1, x0, x1;
    std::vector<double> wy, wx;
    bilinear_taps(h2, oh, y0, y1, wy);
    bilinear_taps(w2, ow, x0, x1, wx);
    long long planes = static_cast<long long>(n) * c;
#pragma omp parallel for schedule(static)
    for (long long pl = 0; pl < planes; ++pl) {
      const double* dsrc = dy.data() + pl * oh * ow;
      double* dst = dx.data() + pl * h2 * w2;
      for (int oy = 0; oy < oh; ++oy) {
        double fy = wy[static_cast<size_t>(oy)];
        double* r0 = dst + static_cast<size_t>(y0[static_cast<size_t>(oy)]) * w2;
        double* r1 = dst + static_cast<size_t>(y1[static_cast<size_t>(oy)]) * w2;
        for (int ox = 0; ox < ow; ++ox) {
          double fx = wx[static_cast<size_t>(ox)];
          double g = dsrc[static_cast<size_t>(oy) * ow + ox];
          r0[x0[static_cast<size_t>(ox)]] += g * (1.0 - fy) * (1.0 - fx);
          r0[x1[static_cast<size_t>(ox)]] += g * (1.0 - fy) * fx;
          r1[x0[static_cast<size_t>(ox)]] += g * fy * (1.0 - fx);
          r1[x1[static_cast<size_t>(ox)]] += g * fy * fx;
        }
      }
    }
  };
  return {this, out};
}

// ---- pure permutations: backward is the inverse index map ----

Var Tape::patchify(Var x, int p) {
  check_mine(x, "patchify");
  int xid = x.id;
  int out = push(wsseg::patchify(val(xid), p), needs(xid), nullptr);
  nodes_.back().back = [xid, p, out](Tape& t) {
    if (!t.needs(xid)) return;
    const Tensor& xv = t.val(xid);
    const std::vector<double>& dy = t.adj(out);
    std::vector<double>& dx = t.adj(xid);
    int n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    int gw = w / p, tcount = (h / p) * gw, dim = c * p * p;
    for (int ni = 0; ni < n; ++ni)
      for (int ti = 0; ti < tcount; ++ti) {
        int py = (ti / gw) * p, px = (ti % gw) * p;
        const double* src = dy.data() + (static_cast<size_t>(ni) * tcount + ti) * dim;
        size_t idx = 0;
        for (int ci = 0; ci < c; ++ci) {
          double* plane = dx.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
          for (int dyi = 0; dyi < p; ++dyi)
            for (int dxi = 0; dxi < p; ++dxi, ++idx) plane[static_cast<size_t>(py + dyi) * w + (px + dxi)] += src[idx];
        }
      }
  };
  return {this, out};
}

Var Tape::tokens_to_grid(Var x, int h, int w) {
  check_mine(x, "tokens_to_grid");
  int xid = x.id;
  int out = push(wsseg::tokens_to_grid(val(xid), h, w), needs(xid), nullptr);
  nodes_.back().back = [xid, h, w, out](Tape& t) {
    if (!t.needs(xid)) return;
    const Tensor& xv = t.val(xid);
    const std::vector<double>& dy = t.adj(out);
    std::vector<double>& dx = t.adj(xid);
    int n = xv.shape[0], tc = xv.shape[1], d = xv.shape[2];
    for (int ni = 0; ni < n; ++ni)
      for (int ti = 0; ti < tc; ++ti) {
        double* dst = dx.data() + (static_cast<size_t>(ni) * tc + ti) * d;
        for (int di = 0; di < d; ++di)
          dst[di] += dy[((static_cast<size_t>(ni) * d + di) * h + ti / w) * w + ti % w];
      }
  };
  return {this, out};
}

Var Tape::split_heads(Var x, int heads) {
  check_mine(x, "split_heads");
  int xid = x.id;
  int out = push(wsseg::split_heads(val(xid), heads), needs(xid), nullptr);
  nodes_.back().back = [xid, heads, out](Tape& t) {
    if (!t.needs(xid)) return;
    const Tensor& xv = t.val(xid);
    const std::vector<double>& dy = t.adj(out);
    std::vector<double>& dx = t.adj(xid);
    int n = xv.shape[0], tc = xv.shape[1], d = xv.shape[2];
    int dh = d / heads;
    for (int ni = 0; ni < n; ++ni)
      for (int ti = 0; ti < tc; ++ti) {
        double* dst = dx.data() + (static_cast<size_t>(ni) * tc + ti) * d;
        for (int hi = 0; hi < heads; ++hi) {
          const double* src = dy.data() + ((static_cast<size_t>(ni) * heads + hi) * tc + ti) * dh;
          for (int k = 0; k < dh; ++k) dst[hi * dh + k] += src[k];
        }
      }
  };
  return {this, out};
}

Var Tape::merge_heads(Var x) {
  check_mine(x, "merge_heads");
  int xid = x.id;
  int out = push(wsseg::merge_heads(val(xid)), needs(xid), nullptr);
  nodes_.back().back = [xid, out](Tape& t) {
    if (!t.needs(xid)) return;
    const Tensor& xv = t.val(xid);
    const std::vector<double>& dy = t.adj(out);
    std::vector<double>& dx = t.adj(xid);
    int n = xv.shape[0], heads = xv.shape[1], tc = xv.shape[2], dh = xv.shape[3];
    int d = heads * dh;
    for (int ni = 0; ni < n; ++ni)
      for (int hi = 0; hi < heads; ++hi)
        for (int ti = 0; ti < tc; ++ti) {
          double* dst = dx.data() + ((static_cast<size_t>(ni) * heads + hi) * tc + ti) * dh;
          const double* src = dy.data() + (static_cast<size_t>(ni) * tc + ti) * d;
          for (int k = 0; k < dh; ++k) dst[k] += src[hi * dh + k];
        }
  };
  return {this, out};
}

Var Tape::transpose_last2(Var x) {
  check_mine(x, "transpose_last2");
  int xid = x.id;
  int out = push(wsseg::transpose_last2(val(xid)), needs(xid), nullptr);
  nodes_.back().back = [xid, out](Tape& t) {
    if (!t.needs(xid)) return;
    const Tensor& xv = t.val(xid);
    const std::vector<double>& dy = t.adj(out);
    std::vector<double>& dx = t.adj(xid);
    int m = xv.shape[xv.shape.size() - 2], k = xv.shape.back();
    long long batches = xv.numel() / (static_cast<long long>(m) * k);
    for (long long bi = 0; bi < batches; ++bi) {
      const double* src = dy.data() + bi * m * k;
      double* dst = dx.data() + bi * m * k;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) dst[static_cast<size_t>(i) * k + j] += src[static_cast<size_t>(j) * m + i];
    }
  };
  return {this, out};
}

Var Tape::concat_channels(Var a, Var b) {
  check_mine(a, "concat_channels");
  check_mine(b, "concat_channels");
  bool ng = needs(a.id) || needs(b.id);
  int aid = a.id, bid = b.id;
  int out = push(wsseg::concat_channels(val(aid), val(bid)), ng, nullptr);
  nodes_.back().back = [aid, bid, out](Tape& t) {
    const Tensor& av = t.val(aid);
    const Tensor& bv = t.val(bid);
    const std::vector<double>& dy = t.adj(out);
    int n = av.shape[0], ca = av.shape[1], cb = bv.shape[1];
    size_t plane = static_cast<size_t>(av.shape[2]) * av.shape[3];
    if (t.needs(aid)) {
      std::vector<double>& da = t.adj(aid);
      for (int ni = 0; ni < n; ++ni) {
        const double* src = dy.data() + static_cast<size_t>(ni) * (ca + cb) * plane;
        double* dst = da.data() + static_cast<size_t>(ni) * ca * plane;
        for (size_t i = 0; i < static_cast<size_t>(ca) * plane; ++i) dst[i] += src[i];
      }
    }
    if (t.needs(bid)) {
      std::vector<double>& db = t.adj(bid);
      for (int ni = 0; ni < n; ++ni) {
        const double* src = dy.data() + (static_cast<size_t>(ni) * (ca + cb) + ca) * plane;
        double* dst = db.data() + static_cast<size_t>(ni) * cb * plane;
        for (size_t i = 0; i < static_cast<size_t>(cb) * plane; ++i) dst[i] += src[i];
      }
    }
  };
  return {this, out};
}

Var Tape::normalize_channels(Var x) {
  check_mine(x, "normalize_channels");
  const Tensor& xv = val(x.id);
  if (xv.rank() != 4) throw std::invalid_argument("normalize_channels: input must be [N,C,H,W]");
  size_t plane = static_cast<size_t>(xv.shape[2]) * xv.shape[3];
  size_t channels = xv.data.size() / plane;
  Tensor out = Tensor::zeros(xv.shape);
  std::vector<double> inv_range(channels, 0.0);
  for (size_t ch = 0; ch < channels; ++ch) {
    const double* src = xv.data.data() + ch * plane;
    double lo = src[0], hi = src[0];
    for (size_t i = 1; i < plane; ++i) {
      lo = std::min(lo, src[i]);
      hi = std::max(hi, src[i]);
    }
    if (hi > lo) {
      double inv = 1.0 / (hi - lo);
      inv_range[ch] = inv;
      double* dst = out.data.data() + ch * plane;
      for (size_t i = 0; i < plane; ++i) dst[i] = (src[i] - lo) * inv;
    }
  }
  int xid = x.id;
  int oid = push(std::move(out), needs(xid), nullptr);
  nodes_.back().back = [xid, oid, inv_range, plane](Tape& t) {
    if (!t.needs(xid)) return;
    const std::vector<double>& dy = t.adj(oid);
    std::vector<double>& dx = t.adj(xid);
    for (size_t ch = 0; ch < inv_range.size(); ++ch) {
      double inv = inv_range[ch];
      if (inv == 0.0) continue;
      for (size_t i = 0; i < plane; ++i) dx[ch * plane + i] += dy[ch * plane + i] * inv;
    }
  };
  return {this, oid};
}

// ---- fused losses ----

namespace {
constexpr double kProbClamp = 1e-7;
}

Var Tape::multilabel_bce(Var logits, const Tensor& y) {
  check_mine(logits, "multilabel_bce");
  const Tensor& lv = val(logits.id);
  if (lv.rank() != 2 || !lv.same_shape(y))
    throw std::invalid_argument("multilabel_bce: logits/labels must both be [N,C]");
  for (double v : y.data)
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("multilabel_bce: labels must be 0 or 1");
  int n = lv.shape[0];
  double loss = 0.0;
  for (size_t i = 0; i < lv.data.size(); ++i) {
    double o = sigmoid_scalar(lv.data[i]);
    double oc = std::min(1.0 - kProbClamp, std::max(kProbClamp, o));
    loss -= y.data[i] * std::log(oc) + (1.0 - y.data[i]) * std::log(1.0 - oc);
  }
  loss /= n;
  int lid = logits.id;
  Tensor yc = y;
  int out = push(Tensor({1}, {loss}), needs(lid), nullptr);
  nodes_.back().back = [lid, yc, n, out](Tape& t) {
    if (!t.needs(lid)) return;
    double dy = t.adj(out)[0];
    const std::vector<double>& lvd = t.val(lid).data;
    std::vector<double>& dl = t.adj(lid);
    for (size_t i = 0; i < lvd.size(); ++i) {
      double o = sigmoid_scalar(lvd[i]);
      if (o <= kProbClamp || o >= 1.0 - kProbClamp) continue;  // clamp region: flat
      dl[i] += dy * (o - yc.data[i]) / n;
    }
  };
  return {this, out};
}

Var Tape::self_regularization(Var cam_t, Var cam_c, const Tensor& y, double beta, bool all_channels) {
  check_mine(cam_t, "self_regularization");
  check_mine(cam_c, "self_regularization");
  const Tensor& mt = val(cam_t.id);
  const Tensor& mc = val(cam_c.id);
  if (!mt.same_shape(mc))
    throw std::invalid_argument("self_regularization: map shape mismatch " + shape_str(mt.shape) + " vs " +
                                shape_str(mc.shape));
  if (mt.rank() != 4) throw std::invalid_argument("self_regularization: maps must be [N,C,H,W]");
  int n = mt.shape[0], c = mt.shape[1];
  if (y.rank() != 2 || y.shape[0] != n || y.shape[1] != c)
    throw std::invalid_argument("self_regularization: labels must be [N,C]");
  if (beta <= 0.0) throw std::invalid_argument("self_regularization: beta must be > 0");
  size_t plane = mt.data.size() / (static_cast<size_t>(n) * c);

  long long count = 0;
  double loss = 0.0;
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      if (!all_channels && y.data[static_cast<size_t>(ni) * c + ci] == 0.0) continue;
      const double* pt = mt.data.data() + (static_cast<size_t>(ni) * c + ci) * plane;
      const double* pc = mc.data.data() + (static_cast<size_t>(ni) * c + ci) * plane;
      for (size_t i = 0; i < plane; ++i) loss += smooth_l1_scalar(pt[i] - pc[i], beta);
      count += static_cast<long long>(plane);
    }
  double value = count > 0 ? loss / static_cast<double>(count) : 0.0;

  int tid = cam_t.id, cid = cam_c.id;
  Tensor yc = y;
  bool ng = needs(tid) || needs(cid);
  int out = push(Tensor({1}, {value}), ng, nullptr);
  nodes_.back().back = [tid, cid, yc, beta, all_channels, count, out](Tape& t) {
    if (count == 0) return;
    double dy = t.adj(out)[0];
    const Tensor& mtv = t.val(tid);
    const Tensor& mcv = t.val(cid);
    int n2 = mtv.shape[0], c2 = mtv.shape[1];
    size_t plane2 = mtv.data.size() / (static_cast<size_t>(n2) * c2);
    bool need_t = t.needs(tid), need_c = t.needs(cid);
    std::vector<double>* dt = need_t ? &t.adj(tid) : nullptr;
    std::vector<double>* dc = need_c ? &t.adj(cid) : nullptr;
    double scale = dy / static_cast<double>(count);
    for (int ni = 0; ni < n2; ++ni)
      for (int ci = 0; ci < c2; ++ci) {
        if (!all_channels && yc.data[static_cast<size_t>(ni) * c2 + ci] == 0.0) continue;
        size_t off = (static_cast<size_t>(ni) * c2 + ci) * plane2;
        for (size_t i = 0; i < plane2; ++i) {
          double g = smooth_l1_deriv(mtv.data[off + i] - mcv.data[off + i], beta) * scale;
          if (need_t) (*dt)[off + i] += g;
          if (need_c) (*dc)[off + i] -= g;
        }
      }
  };
  return {this, out};
}

Var Tape::pixel_bce(Var scores, const std::vector<int>& labels) {
  check_mine(scores, "pixel_bce");
  const Tensor& sv = val(scores.id);
  if (sv.rank() != 4) throw std::invalid_argument("pixel_bce: scores must be [N,K,H,W]");
  int n = sv.shape[0], k = sv.shape[1];
  size_t plane = static_cast<size_t>(sv.shape[2]) * sv.shape[3];
  if (labels.size() != static_cast<size_t>(n) * plane)
    throw std::invalid_argument("pixel_bce: label count mismatch");
  for (int lab : labels)
    if (lab < 0 || lab >= k) throw std::invalid_argument("pixel_bce: label out of range [0," + std::to_string(k - 1) + "]");

  double loss = 0.0;
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < k; ++ci) {
      const double* src = sv.data.data() + (static_cast<size_t>(ni) * k + ci) * plane;
      const int* lab = labels.data() + static_cast<size_t>(ni) * plane;
      for (size_t i = 0; i < plane; ++i) {
        double o = sigmoid_scalar(src[i]);
        double oc = std::min(1.0 - kProbClamp, std::max(kProbClamp, o));
        double tgt = lab[i] == ci ? 1.0 : 0.0;
        loss -= tgt * std::log(oc) + (1.0 - tgt) * std::log(1.0 - oc);
      }
    }
  double denom = static_cast<double>(n) * k * static_cast<double>(plane);
  int sid = scores.id;
  std::vector<int> labc = labels;
  int out = push(Tensor({1}, {loss / denom}), needs(sid), nullptr);
  nodes_.back().back = [sid, labc, denom, out](Tape& t) {
    if (!t.needs(sid)) return;
    double dy = t.adj(out)[0];
    const Tensor& sv2 = t.val(sid);
    std::vector<double>& ds = t.adj(sid);
    int n2 = sv2.shape[0], k2 = sv2.shape[1];
    size_t plane2 = static_cast<size_t>(sv2.shape[2]) * sv2.shape[3];
    double scale = dy / denom;
#pragma omp parallel for schedule(static)
    for (int ni = 0; ni < n2; ++ni)
      for (int ci = 0; ci < k2; ++ci) {
        const double* src = sv2.data.data() + (static_cast<size_t>(ni) * k2 + ci) * plane2;
        const int* lab = labc.data() + static_cast<size_t>(ni) * plane2;
        double* dst = ds.data() + (static_cast<size_t>(ni) * k2 + ci) * plane2;
        for (size_t i = 0; i < plane2; ++i) {
          double o = sigmoid_scalar(src[i]);
          if (o <= kProbClamp || o >= 1.0 - kProbClamp) continue;
          double tgt = lab[i] == ci ? 1.0 : 0.0;
          dst[i] += scale * (o - tgt);
        }
      }
  };
  return {this, out};
}

}  // namespace wsseg
