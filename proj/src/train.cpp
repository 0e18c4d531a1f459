#include "wsseg/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace wsseg {

void TrainConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("train config: lr must be > 0");
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("train config: beta1/beta2 must be in (0,1)");
  if (eps <= 0.0) throw std::invalid_argument("train config: eps must be > 0");
  if (weight_decay < 0.0) throw std::invalid_argument("train config: weight-decay must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train config: batch-size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (selfreg_beta <= 0.0) throw std::invalid_argument("train config: selfreg-beta must be > 0");
  if (selfreg_lambda < 0.0) throw std::invalid_argument("train config: selfreg-lambda must be >= 0");
  if (cnn_lr_scale < 0.0) throw std::invalid_argument("train config: cnn-lr-scale must be >= 0");
}

void adam_step(ParamBlock& p, const TrainConfig& cfg, long long t, double lr_scale) {
  if (t < 1) throw std::invalid_argument("adam_step: step index must be >= 1");
  double lr = cfg.lr * lr_scale;
  double decay = 1.0 - lr * cfg.weight_decay;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (size_t i = 0; i < p.value.data.size(); ++i) {
    double g = p.grad.data[i];
    double m = cfg.beta1 * p.adam_m.data[i] + (1.0 - cfg.beta1) * g;
    double v = cfg.beta2 * p.adam_v.data[i] + (1.0 - cfg.beta2) * g * g;
    p.adam_m.data[i] = m;
    p.adam_v.data[i] = v;
    double val = p.value.data[i] * decay;
    p.value.data[i] = val - lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
  }
}

// ---- augmentation ----

void flip_h_inplace(Tensor& img) {
  int c = img.shape[0], h = img.shape[1], w = img.shape[2];
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y) {
      double* row = img.data.data() + (static_cast<size_t>(ci) * h + y) * w;
      for (int x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
    }
}

void flip_h_inplace(LabelMask& mask) {
  for (int y = 0; y < mask.h; ++y) {
    int* row = mask.labels.data() + static_cast<size_t>(y) * mask.w;
    for (int x = 0; x < mask.w / 2; ++x) std::swap(row[x], row[mask.w - 1 - x]);
  }
}

// one clockwise quarter turn of a square plane
template <typename T>
static void rot90_plane_cw(const T* src, T* dst, int s) {
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) dst[static_cast<size_t>(x) * s + (s - 1 - y)] = src[static_cast<size_t>(y) * s + x];
}

void rot90_inplace(Tensor& img, int quarter_turns) {
  int c = img.shape[0], h = img.shape[1], w = img.shape[2];
  if (h != w) throw std::invalid_argument("rot90: image must be square");
  quarter_turns = ((quarter_turns % 4) + 4) % 4;
  std::vector<double> tmp(static_cast<size_t>(h) * w);
  for (int ci = 0; ci < c; ++ci) {
    double* plane = img.data.data() + static_cast<size_t>(ci) * h * w;
    for (int q = 0; q < quarter_turns; ++q) {
      rot90_plane_cw(plane, tmp.data(), h);
      std::copy(tmp.begin(), tmp.end(), plane);
    }
  }
}

void rot90_inplace(LabelMask& mask, int quarter_turns) {
  if (mask.h != mask.w) throw std::invalid_argument("rot90: mask must be square");
  quarter_turns = ((quarter_turns % 4) + 4) % 4;
  std::vector<int> tmp(mask.labels.size());
  for (int q = 0; q < quarter_turns; ++q) {
    rot90_plane_cw(mask.labels.data(), tmp.data(), mask.h);
    mask.labels = tmp;
  }
}

SampleRecord augment(const SampleRecord& s, bool flip_enabled, bool rotation_enabled, Rng& rng) {
  if (s.image.rank() != 3 || s.image.shape[1] != s.image.shape[2])
    throw std::invalid_argument("augment: image must be square [3,H,W]");
  SampleRecord out = s;
  if (flip_enabled && rng.coin()) {
    flip_h_inplace(out.image);
    if (out.gt_mask) flip_h_inplace(*out.gt_mask);
  }
  if (rotation_enabled) {
    int q = rng.uniform_int(4);
    if (q != 0) {
      rot90_inplace(out.image, q);
      if (out.gt_mask) rot90_inplace(*out.gt_mask, q);
    }
  }
  return out;
}

// ---- stage-1 loop ----

TrainStats train_stage1(DualModel& model, const StageOneData& data, const TrainConfig& cfg,
                        const std::string& out_dir, bool quiet) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train_stage1: empty dataset");
  if (data.image_size() != model.config.image_size || data.num_classes() != model.config.num_classes)
    throw std::invalid_argument("train_stage1: dataset geometry does not match model config");

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "train_log.jsonl", std::ios::trunc);
  if (!log) throw std::runtime_error("train_stage1: cannot open training log in " + out_dir);

  Rng rng(cfg.seed);
  int n = static_cast<int>(data.size());
  int c = model.config.num_classes;
  int s = model.config.image_size;
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  bool use_selfreg = model.ablation == Ablation::kDualSelfReg && cfg.selfreg_lambda > 0.0;
  TrainStats stats;
  long long step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_total = 0.0;
    int epoch_steps = 0;

    for (int start = 0; start < n; start += cfg.batch_size) {
      int b = std::min(cfg.batch_size, n - start);
      Tensor images = Tensor::zeros({b, 3, s, s});
      Tensor labels = Tensor::zeros({b, c});
      for (int i = 0; i < b; ++i) {
        const TrainSample& ts = data.at(static_cast<size_t>(order[static_cast<size_t>(start + i)]));
        SampleRecord rec{ts.id, ts.image, ts.labels, std::nullopt};
        SampleRecord aug = augment(rec, cfg.augment_flip, cfg.augment_rotation, rng);
        std::copy(aug.image.data.begin(), aug.image.data.end(),
                  images.data.begin() + static_cast<size_t>(i) * 3 * s * s);
        std::copy(aug.labels.begin(), aug.labels.end(), labels.data.begin() + static_cast<size_t>(i) * c);
      }

      Tape tape;
      Var x = tape.leaf(std::move(images), false);
      ParamBind bind = train_binder(tape);

      Var cls_t{nullptr, -1}, cls_c{nullptr, -1}, sr{nullptr, -1};
      BranchOut vit_out{}, cnn_out{};
      if (model.has_vit()) {
        vit_out = vit_forward(tape, model, x, bind);
        cls_t = tape.multilabel_bce(vit_out.logits, labels);
      }
      if (model.has_cnn()) {
        cnn_out = cnn_forward(tape, model, x, bind);
        cls_c = tape.multilabel_bce(cnn_out.logits, labels);
      }
      if (use_selfreg) {
        Var mt = vit_out.cam, mc = cnn_out.cam;
        if (cfg.selfreg_normalized) {
          mt = tape.normalize_channels(mt);
          mc = tape.normalize_channels(mc);
        }
        sr = tape.self_regularization(mt, mc, labels, cfg.selfreg_beta, cfg.selfreg_all_channels);
        if (cfg.selfreg_lambda != 1.0) sr = tape.scale(sr, cfg.selfreg_lambda);
      }

      LossReport report;
      Var total = total_loss(tape, cls_t, cls_c, sr, report);

      model.for_each_param([](ParamBlock& p) { p.zero_grad(); });
      tape.backward(total);
      ++step;
      model.for_each_cnn_param([&cfg, step](ParamBlock& p) { adam_step(p, cfg, step, cfg.cnn_lr_scale); });
      model.for_each_vit_param([&cfg, step](ParamBlock& p) { adam_step(p, cfg, step); });

      log << report.to_json_line(step, epoch) << "\n";
      epoch_total += report.total;
      epoch_steps++;
    }

    save_dual_model((fs::path(out_dir) / ("ckpt-epoch" + std::to_string(epoch) + ".bin")).string(), model);
    stats.epoch_avg_total.push_back(epoch_total / epoch_steps);
    if (!quiet)
      std::cerr << "[train-cam] epoch " << epoch << "/" << cfg.epochs << " avg_total=" << epoch_total / epoch_steps
                << "\n";
  }
  stats.steps = step;
  if (!log) throw std::runtime_error("train_stage1: log write failed");
  return stats;
}

}  // namespace wsseg
