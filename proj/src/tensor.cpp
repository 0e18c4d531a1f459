#include "wsseg/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace wsseg {

#ifdef __GLIBC__
// Training tapes allocate and free ~100MB of activation buffers per step.
// Keep large blocks on the freelist instead of returning them to the kernel,
// otherwise page faults dominate the step time.
namespace {
struct MallocTuning {
  MallocTuning() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  }
} malloc_tuning;
}  // namespace
#endif

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// ---- gemm kernels ----
// Loop orders keep the inner loop contiguous; four-row register blocking
// reuses each B row across rows of A. gcc/clang vectorize these with FMA.

void gemm_nn_acc(const double* a, const double* b, double* c, int m, int k, int p) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + static_cast<size_t>(i) * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    double* c0 = c + static_cast<size_t>(i) * p;
    double* c1 = c0 + p;
    double* c2 = c1 + p;
    double* c3 = c2 + p;
    for (int kk = 0; kk < k; ++kk) {
      const double* brow = b + static_cast<size_t>(kk) * p;
      double v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
      for (int j = 0; j < p; ++j) {
        double bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = b + static_cast<size_t>(kk) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_acc(const double* a, const double* b, double* c, int m, int k, int p) {
  // fixed eight-lane accumulation so the dot products vectorize without
  // needing FP reassociation; the summation order is pinned by the code
  constexpr int kLanes = 8;
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * p;
    for (int j = 0; j < p; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double lane[kLanes] = {0, 0, 0, 0, 0, 0, 0, 0};
      int kk = 0;
      for (; kk + kLanes <= k; kk += kLanes)
        for (int l = 0; l < kLanes; ++l) lane[l] += arow[kk + l] * brow[kk + l];
      double acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
      for (; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

void gemm_tn_acc(const double* a, const double* b, double* c, int m, int k, int p) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + static_cast<size_t>(i) * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    const double* b0 = b + static_cast<size_t>(i) * p;
    const double* b1 = b0 + p;
    const double* b2 = b1 + p;
    const double* b3 = b2 + p;
    for (int kk = 0; kk < k; ++kk) {
      double v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
      double* crow = c + static_cast<size_t>(kk) * p;
      for (int j = 0; j < p; ++j) crow[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      if (av == 0.0) continue;
      double* crow = c + static_cast<size_t>(kk) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---- elementwise ----

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "hadamard");
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (double& v : out.data) v *= s;
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

double fast_exp(double x) {
  // 2^k * P(r) with x = k*ln2 + r; magic-number rounding keeps it branchless
  constexpr double kMagic = 6755399441055744.0;  // 1.5 * 2^52
  constexpr double kLog2e = 1.4426950408889634074;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  x = std::min(700.0, std::max(-700.0, x));
  double shifted = x * kLog2e + kMagic;
  double k = shifted - kMagic;
  double r = (x - k * kLn2Hi) - k * kLn2Lo;
  // Taylor to r^10; remainder < 3e-13 on |r| <= ln2/2
  double p = 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  uint64_t bits;
  std::memcpy(&bits, &p, 8);
  bits += static_cast<uint64_t>(static_cast<int64_t>(k)) << 52;
  std::memcpy(&p, &bits, 8);
  return p;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double tanh_fast(double u) {
  double au = std::fabs(u);
  double e = fast_exp(-2.0 * au);
  return std::copysign((1.0 - e) / (1.0 + e), u);
}
}  // namespace

// tanh-form gelu
Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data) {
    double u = kGeluC * (v + kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + tanh_fast(u));
  }
  return out;
}

double gelu_deriv(double x) {
  double u = kGeluC * (x + kGeluA * x * x * x);
  double th = tanh_fast(u);
  double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data) v = sigmoid_scalar(v);
  return out;
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw std::invalid_argument("matmul: rank must be >= 2");
  int m = a.shape[a.shape.size() - 2];
  int k = a.shape[a.shape.size() - 1];
  int kb = b.shape[b.shape.size() - 2];
  int p = b.shape[b.shape.size() - 1];
  if (k != kb)
    throw std::invalid_argument("matmul: inner dim mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));

  std::vector<int> alead(a.shape.begin(), a.shape.end() - 2);
  std::vector<int> blead(b.shape.begin(), b.shape.end() - 2);
  bool b_shared = blead.empty() && !alead.empty();
  if (!b_shared && alead != blead)
    throw std::invalid_argument("matmul: leading dims mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));

  long long batches = 1;
  for (int d : alead) batches *= d;

  std::vector<int> oshape = alead;
  oshape.push_back(m);
  oshape.push_back(p);
  Tensor out = Tensor::zeros(oshape);

  const size_t astep = static_cast<size_t>(m) * k;
  const size_t bstep = b_shared ? 0 : static_cast<size_t>(k) * p;
  const size_t ostep = static_cast<size_t>(m) * p;
#pragma omp parallel for schedule(static)
  for (long long bi = 0; bi < batches; ++bi) {
    gemm_nn_acc(a.data.data() + bi * astep, b.data.data() + bi * bstep, out.data.data() + bi * ostep, m, k, p);
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw std::invalid_argument("linear: weight must be rank 2");
  int k = w.shape[0], p = w.shape[1];
  if (x.shape.back() != k)
    throw std::invalid_argument("linear: input dim " + shape_str(x.shape) + " vs weight " + shape_str(w.shape));
  if (b.rank() != 1 || b.shape[0] != p) throw std::invalid_argument("linear: bad bias shape");

  long long rows = x.numel() / k;
  std::vector<int> oshape = x.shape;
  oshape.back() = p;
  Tensor out = Tensor::zeros(oshape);
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < rows; ++r) {
    double* orow = out.data.data() + r * p;
    for (int j = 0; j < p; ++j) orow[j] = b.data[static_cast<size_t>(j)];
    gemm_nn_acc(x.data.data() + r * k, w.data.data(), orow, 1, k, p);
  }
  return out;
}

// ---- nn primitives ----

// col: [OH*OW, Cin*kh*kw] for one image
void im2col(const double* img, int cin, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow,
            double* col) {
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* crow = col + (static_cast<size_t>(oy) * ow + ox) * (static_cast<size_t>(cin) * kh * kw);
      size_t idx = 0;
      for (int c = 0; c < cin; ++c) {
        const double* plane = img + static_cast<size_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < kw; ++kx, ++idx) {
            int ix = ox * stride + kx - pad;
            crow[idx] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[static_cast<size_t>(iy) * w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void conv_out_dims(const Tensor& x, const Tensor& w, int stride, int pad, int& oh, int& ow) {
  if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: input/weight must be rank 4");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: negative pad");
  if (x.shape[1] != w.shape[1])
    throw std::invalid_argument("conv2d: channel mismatch input " + shape_str(x.shape) + " weight " +
                                shape_str(w.shape));
  int h = x.shape[2], ww = x.shape[3], kh = w.shape[2], kw = w.shape[3];
  if (kh > h + 2 * pad || kw > ww + 2 * pad) throw std::invalid_argument("conv2d: kernel larger than padded input");
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (ww + 2 * pad - kw) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  int oh = 0, ow = 0;
  conv_out_dims(x, w, stride, pad, oh, ow);
  int n = x.shape[0], cin = x.shape[1], h = x.shape[2], iw = x.shape[3];
  int cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  if (b.rank() != 1 || b.shape[0] != cout) throw std::invalid_argument("conv2d: bad bias shape");

  Tensor out = Tensor::zeros({n, cout, oh, ow});
  const int kk = cin * kh * kw;
  const size_t plane = static_cast<size_t>(oh) * ow;
#pragma omp parallel for schedule(static)
  for (int ni = 0; ni < n; ++ni) {
    std::vector<double> col(plane * kk);
    im2col(x.data.data() + static_cast<size_t>(ni) * cin * h * iw, cin, h, iw, kh, kw, stride, pad, oh, ow,
           col.data());
    double* dst = out.data.data() + static_cast<size_t>(ni) * cout * plane;
    for (int c = 0; c < cout; ++c) {
      double bv = b.data[static_cast<size_t>(c)];
      for (size_t i = 0; i < plane; ++i) dst[static_cast<size_t>(c) * plane + i] = bv;
    }
    // out[c, :] += W[c, :] . col[:, :]^T
    gemm_nt_acc(w.data.data(), col.data(), dst, cout, kk, static_cast<int>(plane));
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  int d = x.shape.back();
  if (gamma.rank() != 1 || gamma.shape[0] != d || beta.rank() != 1 || beta.shape[0] != d)
    throw std::invalid_argument("layer_norm: gamma/beta must be [D]");
  long long rows = x.numel() / d;
  Tensor out = x;
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * d;
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += row[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      double c = row[i] - mean;
      var += c * c;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < d; ++i) row[i] = (row[i] - mean) * inv * gamma.data[static_cast<size_t>(i)] + beta.data[static_cast<size_t>(i)];
  }
  return out;
}

Tensor softmax_last(const Tensor& x) {
  int d = x.shape.back();
  long long rows = x.numel() / d;
  Tensor out = x;
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * d;
    double mx = row[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    for (int i = 0; i < d; ++i) row[i] = fast_exp(row[i] - mx);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) sum += row[i];
    double inv = 1.0 / sum;
    for (int i = 0; i < d; ++i) row[i] *= inv;
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: input must be rank 4");
  int n = x.shape[0], c = x.shape[1];
  size_t plane = static_cast<size_t>(x.shape[2]) * x.shape[3];
  Tensor out = Tensor::zeros({n, c});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double* src = x.data.data() + (static_cast<size_t>(ni) * c + ci) * plane;
      double s = 0.0;
      for (size_t i = 0; i < plane; ++i) s += src[i];
      out.data[static_cast<size_t>(ni) * c + ci] = s / static_cast<double>(plane);
    }
  return out;
}

// half-pixel sampling positions, clamped at borders
void bilinear_taps(int in, int out, std::vector<int>& i0, std::vector<int>& i1, std::vector<double>& w1) {
  i0.resize(static_cast<size_t>(out));
  i1.resize(static_cast<size_t>(out));
  w1.resize(static_cast<size_t>(out));
  double s = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * s - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > in - 1) src = in - 1;
    int lo = static_cast<int>(std::floor(src));
    int hi = lo + 1 < in ? lo + 1 : in - 1;
    i0[static_cast<size_t>(o)] = lo;
    i1[static_cast<size_t>(o)] = hi;
    w1[static_cast<size_t>(o)] = src - lo;
  }
}

Tensor bilinear_resize(const Tensor& x, int oh, int ow) {
  if (oh < 1 || ow < 1) throw std::invalid_argument("bilinear_resize: bad output size");
  bool rank3 = x.rank() == 3;
  if (!rank3 && x.rank() != 4) throw std::invalid_argument("bilinear_resize: input must be rank 3 or 4");
  int n = rank3 ? 1 : x.shape[0];
  int c = rank3 ? x.shape[0] : x.shape[1];
  int h = rank3 ? x.shape[1] : x.shape[2];
  int w = rank3 ? x.shape[2] : x.shape[3];
  if (h == oh && w == ow) return x;

  std::vector<int> y0, y1, x0, x1;
  std::vector<double> wy, wx;
  bilinear_taps(h, oh, y0, y1, wy);
  bilinear_taps(w, ow, x0, x1, wx);

  Tensor out = rank3 ? Tensor::zeros({c, oh, ow}) : Tensor::zeros({n, c, oh, ow});
  long long planes = static_cast<long long>(n) * c;
#pragma omp parallel for schedule(static)
  for (long long pl = 0; pl < planes; ++pl) {
    const double* src = x.data.data() + pl * h * w;
    double* dst = out.data.data() + pl * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const double* r0 = src + static_cast<size_t>(y0[static_cast<size_t>(oy)]) * w;
      const double* r1 = src + static_cast<size_t>(y1[static_cast<size_t>(oy)]) * w;
      double fy = wy[static_cast<size_t>(oy)];
      for (int ox = 0; ox < ow; ++ox) {
        double fx = wx[static_cast<size_t>(ox)];
        double top = r0[x0[static_cast<size_t>(ox)]] * (1.0 - fx) + r0[x1[static_cast<size_t>(ox)]] * fx;
        double bot = r1[x0[static_cast<size_t>(ox)]] * (1.0 - fx) + r1[x1[static_cast<size_t>(ox)]] * fx;
        dst[static_cast<size_t>(oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
      }
    }
  }
  return out;
}

Tensor patchify(const Tensor& x, int p) {
  if (x.rank() != 4) throw std::invalid_argument("patchify: input must be rank 4");
  int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (p < 1 || h % p != 0 || w % p != 0)
    throw std::invalid_argument("patchify: spatial dims must be divisible by patch size");
  int gh = h / p, gw = w / p, t = gh * gw, dim = c * p * p;
  Tensor out = Tensor::zeros({n, t, dim});
  for (int ni = 0; ni < n; ++ni)
    for (int ti = 0; ti < t; ++ti) {
      int py = (ti / gw) * p, px = (ti % gw) * p;
      double* dst = out.data.data() + (static_cast<size_t>(ni) * t + ti) * dim;
      size_t idx = 0;
      for (int ci = 0; ci < c; ++ci) {
        const double* plane = x.data.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx, ++idx) dst[idx] = plane[static_cast<size_t>(py + dy) * w + (px + dx)];
      }
    }
  return out;
}

Tensor tokens_to_grid(const Tensor& x, int h, int w) {
  if (x.rank() != 3) throw std::invalid_argument("tokens_to_grid: input must be [N,T,D]");
  int n = x.shape[0], t = x.shape[1], d = x.shape[2];
  if (t != h * w) throw std::invalid_argument("tokens_to_grid: T != h*w");
  Tensor out = Tensor::zeros({n, d, h, w});
  for (int ni = 0; ni < n; ++ni)
    for (int ti = 0; ti < t; ++ti) {
      const double* src = x.data.data() + (static_cast<size_t>(ni) * t + ti) * d;
      for (int di = 0; di < d; ++di)
        out.data[((static_cast<size_t>(ni) * d + di) * h + ti / w) * w + ti % w] = src[di];
    }
  return out;
}

Tensor split_heads(const Tensor& x, int heads) {
  if (x.rank() != 3) throw std::invalid_argument("split_heads: input must be [N,T,D]");
  int n = x.shape[0], t = x.shape[1], d = x.shape[2];
  if (heads < 1 || d % heads != 0) throw std::invalid_argument("split_heads: D not divisible by heads");
  int dh = d / heads;
  Tensor out = Tensor::zeros({n, heads, t, dh});
  for (int ni = 0; ni < n; ++ni)
    for (int ti = 0; ti < t; ++ti) {
      const double* src = x.data.data() + (static_cast<size_t>(ni) * t + ti) * d;
      for (int hi = 0; hi < heads; ++hi) {
        double* dst = out.data.data() + ((static_cast<size_t>(ni) * heads + hi) * t + ti) * dh;
        for (int k = 0; k < dh; ++k) dst[k] = src[hi * dh + k];
      }
    }
  return out;
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("merge_heads: input must be [N,H,T,dh]");
  int n = x.shape[0], heads = x.shape[1], t = x.shape[2], dh = x.shape[3];
  int d = heads * dh;
  Tensor out = Tensor::zeros({n, t, d});
  for (int ni = 0; ni < n; ++ni)
    for (int hi = 0; hi < heads; ++hi)
      for (int ti = 0; ti < t; ++ti) {
        const double* src = x.data.data() + ((static_cast<size_t>(ni) * heads + hi) * t + ti) * dh;
        double* dst = out.data.data() + (static_cast<size_t>(ni) * t + ti) * d;
        for (int k = 0; k < dh; ++k) dst[hi * dh + k] = src[k];
      }
  return out;
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw std::invalid_argument("transpose_last2: rank must be >= 2");
  int m = x.shape[x.shape.size() - 2], k = x.shape.back();
  long long batches = x.numel() / (static_cast<long long>(m) * k);
  std::vector<int> oshape = x.shape;
  std::swap(oshape[oshape.size() - 2], oshape[oshape.size() - 1]);
  Tensor out = Tensor::zeros(oshape);
  for (long long bi = 0; bi < batches; ++bi) {
    const double* src = x.data.data() + bi * m * k;
    double* dst = out.data.data() + bi * m * k;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j) dst[static_cast<size_t>(j) * m + i] = src[static_cast<size_t>(i) * k + j];
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4) throw std::invalid_argument("concat_channels: inputs must be rank 4");
  if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3])
    throw std::invalid_argument("concat_channels: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  int n = a.shape[0], ca = a.shape[1], cb = b.shape[1];
  size_t plane = static_cast<size_t>(a.shape[2]) * a.shape[3];
  Tensor out = Tensor::zeros({n, ca + cb, a.shape[2], a.shape[3]});
  for (int ni = 0; ni < n; ++ni) {
    std::memcpy(out.data.data() + static_cast<size_t>(ni) * (ca + cb) * plane,
                a.data.data() + static_cast<size_t>(ni) * ca * plane, sizeof(double) * ca * plane);
    std::memcpy(out.data.data() + (static_cast<size_t>(ni) * (ca + cb) + ca) * plane,
                b.data.data() + static_cast<size_t>(ni) * cb * plane, sizeof(double) * cb * plane);
  }
  return out;
}

Tensor add_rows(const Tensor& x, const Tensor& pos) {
  if (x.rank() != 3 || pos.rank() != 2 || x.shape[1] != pos.shape[0] || x.shape[2] != pos.shape[1])
    throw std::invalid_argument("add_rows: x must be [N,T,D], pos [T,D]");
  Tensor out = x;
  size_t td = pos.data.size();
  for (int ni = 0; ni < x.shape[0]; ++ni) {
    double* dst = out.data.data() + static_cast<size_t>(ni) * td;
    for (size_t i = 0; i < td; ++i) dst[i] += pos.data[i];
  }
  return out;
}

}  // namespace wsseg
