#pragma once

#include <string>
#include <vector>

#include "wsseg/campipeline.hpp"
#include "wsseg/dataspace.hpp"
#include "wsseg/model.hpp"
#include "wsseg/train.hpp"

namespace wsseg {

struct SegConfig {
  int image_size = 64;
  int num_classes = 4;               // foreground classes; the net emits 1+C channels
  std::vector<int> widths = {16, 32, 64};

  int out_channels() const { return num_classes + 1; }
  void validate() const;
  std::string to_json() const;
  static SegConfig from_json(const std::string& s);
};

// Encoder to stride 8, mirrored bilinear-upsample+conv decoder with skip
// connections, 1x1 head to (1+C) channels at full resolution.
struct SegModel {
  SegConfig config;
  ConvParams enc1, enc2, enc3;
  ConvParams dec3, dec2, dec1;
  ConvParams head;

  void for_each_param(const std::function<void(ParamBlock&)>& fn);
  static SegModel init(const SegConfig& cfg, Rng& rng);
};

Var seg_forward(Tape& t, SegModel& m, Var images, const ParamBind& bind);

// per-pixel argmax over the sigmoid scores of all 1+C channels
LabelMask predict_mask(const SegModel& m, const Tensor& image);

struct SegTrainSample {
  std::string id;
  Tensor image;
  LabelMask mask;
};

// pairs split images with masks from mask_dir (or GT masks in oracle mode);
// errors name the first sample whose mask file is missing
std::vector<SegTrainSample> load_seg_data(const Dataset& ds, const std::string& split, const std::string& mask_dir,
                                          bool oracle_masks);

TrainStats train_stage2(SegModel& model, const std::vector<SegTrainSample>& data, const TrainConfig& cfg,
                        const std::string& out_dir, bool quiet);

void save_seg_model(const std::string& path, const SegModel& m);
SegModel load_seg_model(const std::string& path);

// predicts every image of a split and writes <id>.pgm files
int predict_split(const SegModel& m, const Dataset& ds, const std::string& split, const std::string& out_dir);

}  // namespace wsseg
