#pragma once

#include <string>
#include <vector>

#include "wsseg/dataspace.hpp"
#include "wsseg/losses.hpp"
#include "wsseg/model.hpp"
#include "wsseg/rng.hpp"

namespace wsseg {

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  int batch_size = 16;
  int epochs = 40;
  uint64_t seed = 1;
  double selfreg_lambda = 1.0;
  double selfreg_beta = 1.0;
  bool selfreg_all_channels = false;
  bool selfreg_normalized = false;
  double cnn_lr_scale = 1.0;
  bool augment_rotation = true;
  bool augment_flip = true;

  void validate() const;
};

// Standard Adam with bias correction and decoupled weight decay, applied as
// value <- value*(1 - lr*wd) before the update. t is the 1-based step index.
void adam_step(ParamBlock& p, const TrainConfig& cfg, long long t, double lr_scale = 1.0);

// grid-aligned geometric augmentation; square images
void flip_h_inplace(Tensor& img);
void flip_h_inplace(LabelMask& mask);
void rot90_inplace(Tensor& img, int quarter_turns);
void rot90_inplace(LabelMask& mask, int quarter_turns);

// coin flip for horizontal mirror, then a uniform draw from {0,90,180,270};
// image-level labels are untouched, the gt mask (if any) moves with the image
SampleRecord augment(const SampleRecord& s, bool flip_enabled, bool rotation_enabled, Rng& rng);

struct TrainStats {
  std::vector<double> epoch_avg_total;
  long long steps = 0;
};

// Stage-1 loop: forward both branches, Eq.-style classification loss on
// each, self-regularization between the CAMs, Adam update. Writes
// train_log.jsonl and ckpt-epoch{E}.bin under out_dir.
TrainStats train_stage1(DualModel& model, const StageOneData& data, const TrainConfig& cfg,
                        const std::string& out_dir, bool quiet);

}  // namespace wsseg
