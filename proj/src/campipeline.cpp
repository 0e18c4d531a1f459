#include "wsseg/campipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace wsseg {

void PipelineConfig::validate() const {
  if (tau_bg <= 0.0 || tau_bg >= 1.0) throw std::invalid_argument("pipeline config: tau-bg must be in (0,1)");
  if (walk_steps < 0) throw std::invalid_argument("pipeline config: walk-steps must be >= 0");
  if (walk_alpha <= 0.0 || walk_alpha >= 1.0)
    throw std::invalid_argument("pipeline config: walk-alpha must be in (0,1)");
  if (sigma_color <= 0.0) throw std::invalid_argument("pipeline config: sigma-color must be > 0");
  if (crf_iters < 0) throw std::invalid_argument("pipeline config: crf-iters must be >= 0");
  if (theta_spatial <= 0.0 || theta_color <= 0.0)
    throw std::invalid_argument("pipeline config: theta-spatial/theta-color must be > 0");
  if (w_smooth < 0.0) throw std::invalid_argument("pipeline config: w-smooth must be >= 0");
}

std::string PipelineConfig::to_json() const {
  nlohmann::json j;
  j["tau_bg"] = tau_bg;
  j["walk_steps"] = walk_steps;
  j["walk_alpha"] = walk_alpha;
  j["sigma_color"] = sigma_color;
  j["crf_iters"] = crf_iters;
  j["theta_spatial"] = theta_spatial;
  j["theta_color"] = theta_color;
  j["w_smooth"] = w_smooth;
  return j.dump(2);
}

std::string cam_source_name(CamSource s) {
  switch (s) {
    case CamSource::kAuto: return "auto";
    case CamSource::kVit: return "vit";
    case CamSource::kCnn: return "cnn";
    case CamSource::kFused: return "fused";
  }
  throw std::logic_error("cam_source_name: bad value");
}

CamSource parse_cam_source(const std::string& s) {
  if (s == "auto") return CamSource::kAuto;
  if (s == "vit") return CamSource::kVit;
  if (s == "cnn") return CamSource::kCnn;
  if (s == "fused") return CamSource::kFused;
  throw std::invalid_argument("unknown cam source: " + s + " (expected auto|vit|cnn|fused)");
}

CamSource resolve_cam_source(CamSource requested, const DualModel& model) {
  if (requested != CamSource::kAuto) return requested;
  if (model.ablation == Ablation::kDual && model.has_vit() && model.has_cnn()) return CamSource::kFused;
  return model.has_vit() ? CamSource::kVit : CamSource::kCnn;
}

// ---- cam ops ----

Cam normalize_cam(const Cam& cam) {
  if (cam.maps.rank() != 3) throw std::invalid_argument("normalize_cam: maps must be [C,H,W]");
  int c = cam.maps.shape[0];
  if (static_cast<int>(cam.present.size()) != c)
    throw std::invalid_argument("normalize_cam: present vector size mismatch");
  size_t plane = static_cast<size_t>(cam.maps.shape[1]) * cam.maps.shape[2];
  Cam out = cam;
  for (int ci = 0; ci < c; ++ci) {
    double* ch = out.maps.data.data() + static_cast<size_t>(ci) * plane;
    if (!cam.present[static_cast<size_t>(ci)]) {
      std::fill(ch, ch + plane, 0.0);
      continue;
    }
    double lo = ch[0], hi = ch[0];
    for (size_t i = 1; i < plane; ++i) {
      lo = std::min(lo, ch[i]);
      hi = std::max(hi, ch[i]);
    }
    if (hi <= lo) {
      std::fill(ch, ch + plane, 0.0);
      continue;
    }
    double inv = 1.0 / (hi - lo);
    for (size_t i = 0; i < plane; ++i) ch[i] = (ch[i] - lo) * inv;
  }
  return out;
}

PseudoMask threshold_to_mask(const Cam& cam, double tau_bg) {
  if (tau_bg <= 0.0 || tau_bg >= 1.0) throw std::invalid_argument("threshold_to_mask: tau-bg must be in (0,1)");
  int c = cam.maps.shape[0], h = cam.maps.shape[1], w = cam.maps.shape[2];
  size_t plane = static_cast<size_t>(h) * w;
  PseudoMask m;
  m.h = h;
  m.w = w;
  m.labels.assign(plane, 0);
  m.confidence.assign(plane, 0.0);
  for (size_t i = 0; i < plane; ++i) {
    double best = -1.0;
    int best_c = -1;
    for (int ci = 0; ci < c; ++ci) {
      if (!cam.present[static_cast<size_t>(ci)]) continue;
      double v = cam.maps.data[static_cast<size_t>(ci) * plane + i];
      if (v > best) {
        best = v;
        best_c = ci;
      }
    }
    if (best_c >= 0) {
      m.confidence[i] = best;
      if (best >= tau_bg) m.labels[i] = best_c + 1;
    }
  }
  return m;
}

AffinityGraph build_affinity(const Tensor& image, double sigma_color) {
  if (sigma_color <= 0.0) throw std::invalid_argument("build_affinity: sigma-color must be > 0");
  if (image.rank() != 3 || image.shape[0] != 3) throw std::invalid_argument("build_affinity: image must be [3,H,W]");
  int h = image.shape[1], w = image.shape[2];
  size_t plane = static_cast<size_t>(h) * w;
  AffinityGraph g;
  g.h = h;
  g.w = w;
  g.offsets.assign(plane + 1, 0);

  const double inv2s2 = 1.0 / (2.0 * sigma_color * sigma_color);
  const int dy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
  const int dx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};

  g.cols.reserve(plane * 8);
  g.weights.reserve(plane * 8);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t p = static_cast<size_t>(y) * w + x;
      double rowsum = 0.0;
      size_t row_begin = g.cols.size();
      for (int k = 0; k < 8; ++k) {
        int ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        size_t q = static_cast<size_t>(ny) * w + nx;
        double d2 = 0.0;
        for (int c = 0; c < 3; ++c) {
          double d = image.data[static_cast<size_t>(c) * plane + p] - image.data[static_cast<size_t>(c) * plane + q];
          d2 += d * d;
        }
        double wgt = fast_exp(-d2 * inv2s2);
        g.cols.push_back(static_cast<int>(q));
        g.weights.push_back(wgt);
        rowsum += wgt;
      }
      double inv = 1.0 / rowsum;  // >= 3 neighbours, all weights > 0
      for (size_t i = row_begin; i < g.weights.size(); ++i) g.weights[i] *= inv;
      g.offsets[p + 1] = static_cast<int>(g.cols.size());
    }
  return g;
}

Cam random_walk_refine(const Cam& cam, const AffinityGraph& graph, int steps, double alpha) {
  if (steps < 1) throw std::invalid_argument("random_walk_refine: steps must be >= 1");
  if (alpha <= 0.0 || alpha >= 1.0) throw std::invalid_argument("random_walk_refine: alpha must be in (0,1)");
  if (cam.maps.rank() != 3 || cam.maps.shape[1] != graph.h || cam.maps.shape[2] != graph.w)
    throw std::invalid_argument("random_walk_refine: cam grid " + shape_str(cam.maps.shape) +
                                " does not match graph " + std::to_string(graph.h) + "x" + std::to_string(graph.w));
  int c = cam.maps.shape[0];
  size_t plane = static_cast<size_t>(graph.h) * graph.w;
  Cam out = cam;
  std::vector<double> cur(plane), next(plane);
  for (int ci = 0; ci < c; ++ci) {
    if (!cam.present[static_cast<size_t>(ci)]) continue;
    const double* s0 = cam.maps.data.data() + static_cast<size_t>(ci) * plane;
    std::copy(s0, s0 + plane, cur.begin());
    for (int it = 0; it < steps; ++it) {
      for (size_t p = 0; p < plane; ++p) {
        double acc = 0.0;
        for (int e = graph.offsets[p]; e < graph.offsets[p + 1]; ++e)
          acc += graph.weights[static_cast<size_t>(e)] * cur[static_cast<size_t>(graph.cols[static_cast<size_t>(e)])];
        next[p] = alpha * acc + (1.0 - alpha) * s0[p];
      }
      std::swap(cur, next);
    }
    std::copy(cur.begin(), cur.end(), out.maps.data.data() + static_cast<size_t>(ci) * plane);
  }
  return out;
}

Tensor crf_refine(const Tensor& probs, const Tensor& image, int iters, double theta_spatial, double theta_color,
                  double w_smooth) {
  if (probs.rank() != 3) throw std::invalid_argument("crf_refine: probs must be [K,H,W]");
  if (image.rank() != 3 || image.shape[1] != probs.shape[1] || image.shape[2] != probs.shape[2])
    throw std::invalid_argument("crf_refine: image/probs spatial mismatch");
  if (theta_spatial <= 0.0 || theta_color <= 0.0) throw std::invalid_argument("crf_refine: thetas must be > 0");
  int k = probs.shape[0], h = probs.shape[1], w = probs.shape[2];
  if (k > 16) throw std::invalid_argument("crf_refine: at most 16 classes supported");
  size_t plane = static_cast<size_t>(h) * w;
  for (size_t p = 0; p < plane; ++p) {
    double sum = 0.0;
    for (int ci = 0; ci < k; ++ci) {
      double v = probs.data[static_cast<size_t>(ci) * plane + p];
      if (v < 0.0) throw std::invalid_argument("crf_refine: negative probability");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-6) throw std::invalid_argument("crf_refine: per-pixel probabilities must sum to 1");
  }
  if (iters == 0) return probs;

  int r = static_cast<int>(std::ceil(2.0 * theta_spatial));
  int win = 2 * r + 1;
  const double inv2ts2 = 1.0 / (2.0 * theta_spatial * theta_spatial);
  const double inv2tc2 = 1.0 / (2.0 * theta_color * theta_color);

  std::vector<double> spatial_k(static_cast<size_t>(win) * win);
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      spatial_k[static_cast<size_t>(dy + r) * win + (dx + r)] = std::exp(-(dy * dy + dx * dx) * inv2ts2);

  // the pairwise kernel is class- and iteration-independent; build it once
  std::vector<float> kern(plane * static_cast<size_t>(win) * win, 0.0f);
#pragma omp parallel for schedule(static)
  for (long long p = 0; p < static_cast<long long>(plane); ++p) {
    int y = static_cast<int>(p) / w, x = static_cast<int>(p) % w;
    float* kp = kern.data() + static_cast<size_t>(p) * win * win;
    for (int dy = -r; dy <= r; ++dy) {
      int ny = y + dy;
      if (ny < 0 || ny >= h) continue;
      for (int dx = -r; dx <= r; ++dx) {
        int nx = x + dx;
        if (nx < 0 || nx >= w || (dy == 0 && dx == 0)) continue;
        size_t q = static_cast<size_t>(ny) * w + nx;
        double d2 = 0.0;
        for (int c = 0; c < 3; ++c) {
          double d = image.data[static_cast<size_t>(c) * plane + p] - image.data[static_cast<size_t>(c) * plane + q];
          d2 += d * d;
        }
        kp[static_cast<size_t>(dy + r) * win + (dx + r)] =
            static_cast<float>(spatial_k[static_cast<size_t>(dy + r) * win + (dx + r)] * fast_exp(-d2 * inv2tc2));
      }
    }
  }

  std::vector<double> log_unary(probs.data.size());
  for (size_t i = 0; i < probs.data.size(); ++i) log_unary[i] = std::log(std::max(probs.data[i], 1e-300));

  Tensor q = probs;
  Tensor qn = Tensor::zeros(probs.shape);
  for (int it = 0; it < iters; ++it) {
#pragma omp parallel for schedule(static)
    for (long long p = 0; p < static_cast<long long>(plane); ++p) {
      int y = static_cast<int>(p) / w, x = static_cast<int>(p) % w;
      const float* kp = kern.data() + static_cast<size_t>(p) * win * win;
      double logits[16];
      double mx = -1e300;
      for (int ci = 0; ci < k; ++ci) {
        const double* qc = q.data.data() + static_cast<size_t>(ci) * plane;
        double msg = 0.0;
        for (int dy = -r; dy <= r; ++dy) {
          int ny = y + dy;
          if (ny < 0 || ny >= h) continue;
          const float* krow = kp + static_cast<size_t>(dy + r) * win;
          const double* qrow = qc + static_cast<size_t>(ny) * w;
          for (int dx = -r; dx <= r; ++dx) {
            int nx = x + dx;
            if (nx < 0 || nx >= w) continue;
            msg += krow[dx + r] * qrow[nx];
          }
        }
        double lg = log_unary[static_cast<size_t>(ci) * plane + p] + w_smooth * msg;
        logits[ci] = lg;
        mx = std::max(mx, lg);
      }
      double sum = 0.0;
      for (int ci = 0; ci < k; ++ci) {
        logits[ci] = std::exp(logits[ci] - mx);
        sum += logits[ci];
      }
      double inv = 1.0 / sum;
      for (int ci = 0; ci < k; ++ci) qn.data[static_cast<size_t>(ci) * plane + p] = logits[ci] * inv;
    }
    std::swap(q, qn);
  }
  return q;
}

Tensor cam_to_probs(const Cam& cam, double tau_bg) {
  if (tau_bg <= 0.0 || tau_bg >= 1.0) throw std::invalid_argument("cam_to_probs: tau-bg must be in (0,1)");
  int c = cam.maps.shape[0], h = cam.maps.shape[1], w = cam.maps.shape[2];
  size_t plane = static_cast<size_t>(h) * w;
  Tensor probs = Tensor::zeros({1 + c, h, w});
  double bg_scale = tau_bg / (1.0 - tau_bg);
  for (size_t p = 0; p < plane; ++p) {
    double mx = 0.0;
    for (int ci = 0; ci < c; ++ci)
      if (cam.present[static_cast<size_t>(ci)])
        mx = std::max(mx, cam.maps.data[static_cast<size_t>(ci) * plane + p]);
    double bg = std::clamp((1.0 - mx) * bg_scale, 0.0, 1.0);
    double sum = bg;
    for (int ci = 0; ci < c; ++ci) {
      double v = cam.present[static_cast<size_t>(ci)]
                     ? std::max(0.0, cam.maps.data[static_cast<size_t>(ci) * plane + p])
                     : 0.0;
      probs.data[(1 + static_cast<size_t>(ci)) * plane + p] = v;
      sum += v;
    }
    probs.data[p] = bg;
    if (sum <= 0.0) {
      probs.data[p] = 1.0;  // no evidence anywhere: all background
      continue;
    }
    double inv = 1.0 / sum;
    for (int ci = 0; ci <= c; ++ci) probs.data[static_cast<size_t>(ci) * plane + p] *= inv;
  }
  return probs;
}

PseudoMask synthesize_pseudomask(const DualModel& model, const Tensor& image, const std::vector<int>& present,
                                 const std::string& id, const PipelineConfig& cfg, CamSource source) {
  cfg.validate();
  int s = model.config.image_size;
  if (image.rank() != 3 || image.shape[1] != s || image.shape[2] != s)
    throw std::invalid_argument("synthesize_pseudomask: image geometry mismatch for " + id);

  Tensor batch = Tensor::zeros({1, 3, s, s});
  std::copy(image.data.begin(), image.data.end(), batch.data.begin());
  CamSource src = resolve_cam_source(source, model);
  Tensor cam_b;
  switch (src) {
    case CamSource::kVit:
    case CamSource::kCnn: {
      if (src == CamSource::kCnn && model.has_vit()) {
        DualModel& mm = const_cast<DualModel&>(model);
        Tape t;
        cam_b = cnn_forward(t, mm, t.leaf(batch, false), eval_binder(t)).cam.val();
      } else {
        cam_b = infer_cam(model, batch);
      }
      break;
    }
    case CamSource::kFused:
      cam_b = infer_cam_fused(model, batch);
      break;
    case CamSource::kAuto:
      throw std::logic_error("synthesize_pseudomask: unresolved cam source");
  }

  int c = model.config.num_classes;
  Cam cam{Tensor({c, model.config.grid(), model.config.grid()},
                 std::vector<double>(cam_b.data.begin(), cam_b.data.end())),
          present, id};
  cam = normalize_cam(cam);
  cam.maps = bilinear_resize(cam.maps, s, s);

  if (cfg.walk_steps > 0) {
    AffinityGraph g = build_affinity(image, cfg.sigma_color);
    cam = random_walk_refine(cam, g, cfg.walk_steps, cfg.walk_alpha);
  }

  Tensor probs = cam_to_probs(cam, cfg.tau_bg);
  if (cfg.crf_iters > 0)
    probs = crf_refine(probs, image, cfg.crf_iters, cfg.theta_spatial, cfg.theta_color, cfg.w_smooth);

  size_t plane = static_cast<size_t>(s) * s;
  PseudoMask m;
  m.h = s;
  m.w = s;
  m.labels.assign(plane, 0);
  m.confidence.assign(plane, 0.0);
  for (size_t p = 0; p < plane; ++p) {
    int best = 0;
    double bv = probs.data[p];
    for (int ci = 1; ci <= c; ++ci) {
      double v = probs.data[static_cast<size_t>(ci) * plane + p];
      if (v > bv) {
        bv = v;
        best = ci;
      }
    }
    m.labels[p] = best;
    m.confidence[p] = bv;
  }
  return m;
}

int synthesize_pseudomasks(const DualModel& model, const Dataset& ds, const std::string& split,
                           const PipelineConfig& cfg, CamSource source, const std::string& out_dir, bool quiet) {
  cfg.validate();
  fs::create_directories(out_dir);
  CamSource src = resolve_cam_source(source, model);
  const auto& ids = ds.split(split);
  int done = 0;
  for (const auto& id : ids) {
    Tensor img = ds.load_image(id);
    std::vector<double> y = ds.labels(id);
    std::vector<int> present(y.begin(), y.end());
    PseudoMask m = synthesize_pseudomask(model, img, present, id, cfg, src);
    write_pgm((fs::path(out_dir) / (id + ".pgm")).string(), m);
    ++done;
    if (!quiet && done % 200 == 0) std::cerr << "[make-masks] " << done << "/" << ids.size() << "\n";
  }
  nlohmann::json side = nlohmann::json::parse(cfg.to_json());
  side["cam_source"] = cam_source_name(src);
  side["split"] = split;
  std::ofstream f(fs::path(out_dir) / "config.json", std::ios::trunc);
  f << side.dump(2) << "\n";
  if (!f) throw std::runtime_error("synthesize_pseudomasks: cannot write sidecar config in " + out_dir);
  return done;
}

}  // namespace wsseg
