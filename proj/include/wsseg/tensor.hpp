#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsseg {

// Dense row-major tensor of 64-bit reals, rank 1..4.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<long long>(data.size()))
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  static long long numel_of(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("tensor: nonpositive dim");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) {
    long long n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }

  static Tensor full(std::vector<int> s, double v) {
    long long n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
  }

  long long numel() const { return static_cast<long long>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // element access for tests and light-duty code; hot paths index data directly
  double& at(std::initializer_list<int> idx) { return data[flat(idx)]; }
  double at(std::initializer_list<int> idx) const { return data[flat(idx)]; }

  size_t flat(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw std::invalid_argument("tensor: bad index rank");
    size_t off = 0;
    int i = 0;
    for (int v : idx) {
      if (v < 0 || v >= shape[static_cast<size_t>(i)]) throw std::out_of_range("tensor: index out of range");
      off = off * static_cast<size_t>(shape[static_cast<size_t>(i)]) + static_cast<size_t>(v);
      ++i;
    }
    return off;
  }

  bool all_finite() const;
};

std::string shape_str(const std::vector<int>& s);

// ---- raw gemm kernels (row-major, accumulate into C) ----
// C[M,P] += A[M,K] * B[K,P]
void gemm_nn_acc(const double* a, const double* b, double* c, int m, int k, int p);
// C[M,P] += A[M,K] * B[P,K]^T
void gemm_nt_acc(const double* a, const double* b, double* c, int m, int k, int p);
// C[K,P] += A[M,K]^T * B[M,P]
void gemm_tn_acc(const double* a, const double* b, double* c, int m, int k, int p);

// shared internals, also used by the autodiff backward passes
void im2col(const double* img, int cin, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow,
            double* col);
void conv_out_dims(const Tensor& x, const Tensor& w, int stride, int pad, int& oh, int& ow);
void bilinear_taps(int in, int out, std::vector<int>& i0, std::vector<int>& i1, std::vector<double>& w1);

// ---- elementwise / shape ops ----
// branchless polynomial exp, |rel err| < 1e-12 on [-700, 700]; vectorizes
// inside tight loops where libm exp will not
double fast_exp(double x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
double gelu_deriv(double x);
Tensor sigmoid(const Tensor& x);
double sigmoid_scalar(double x);

// ---- linear algebra ----
// a: [..,M,K], b: [..,K,P]; leading dims must match exactly (or b rank-2 applied per batch)
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [..,K] * w: [K,P] + bias[P]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- nn primitives ----
// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]; cross-correlation, no kernel flip
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// normalization over the last dim; gamma/beta: [D]
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
// softmax along the last dim, max-subtracted
Tensor softmax_last(const Tensor& x);
// x: [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);
// half-pixel bilinear resize of [N,C,H,W] (or [C,H,W]) to (oh,ow)
Tensor bilinear_resize(const Tensor& x, int oh, int ow);
// [N,C,H,W] -> [N,T,p*p*C] with T=(H/p)*(W/p), patches in raster order
Tensor patchify(const Tensor& x, int p);
// [N,T,D] -> [N,D,h,w] with T=h*w, token t -> grid (t/w, t%w)
Tensor tokens_to_grid(const Tensor& x, int h, int w);
// [N,T,D] -> [N,H,T,D/H]
Tensor split_heads(const Tensor& x, int heads);
// [N,H,T,dh] -> [N,T,H*dh]
Tensor merge_heads(const Tensor& x);
// [..,M,K] -> [..,K,M]
Tensor transpose_last2(const Tensor& x);
// concat along channel dim of [N,C,H,W]
Tensor concat_channels(const Tensor& a, const Tensor& b);
// x: [N,T,D] + pos: [T,D]
Tensor add_rows(const Tensor& x, const Tensor& pos);

}  // namespace wsseg
