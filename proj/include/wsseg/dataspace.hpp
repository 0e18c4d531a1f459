#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wsseg/rng.hpp"
#include "wsseg/tensor.hpp"

namespace wsseg {

// Per-pixel label grid; values in {0 = background, 1..C}. The confidence
// grid is filled by mask synthesis / prediction and empty on ground truth.
struct LabelMask {
  int h = 0, w = 0;
  std::vector<int> labels;
  std::vector<double> confidence;
};

struct SampleRecord {
  std::string id;
  Tensor image;                       // [3,H,W] in [0,1]
  std::vector<double> labels;         // multi-hot, length C
  std::optional<LabelMask> gt_mask;   // evaluation only
};

struct DatasetManifest {
  int version = 1;
  int num_classes = 4;
  std::vector<std::string> class_names;
  int image_size = 64;
  uint64_t seed = 0;
  std::map<std::string, std::vector<std::string>> splits;   // train/val/test -> ids
  std::map<std::string, std::vector<int>> labels;            // id -> multi-hot

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& s);
};

struct GenConfig {
  int n_train = 2000;
  int n_val = 200;
  int n_test = 200;
  int num_classes = 4;
  int image_size = 64;
  uint64_t seed = 7;
  void validate() const;
};

// Writes images/ (PPM), masks_gt/ (PGM) and manifest.json under out_dir.
DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& out_dir);

// ---- image / mask files ----
void write_ppm(const std::string& path, const Tensor& img);   // [3,H,W] in [0,1], 8-bit P6
Tensor read_ppm(const std::string& path);
void write_pgm(const std::string& path, const LabelMask& mask);  // 8-bit P5, pixel = label index
LabelMask read_pgm(const std::string& path);

// ---- dataset access ----
class Dataset {
 public:
  static Dataset open(const std::string& dir);
  const DatasetManifest& manifest() const { return man_; }
  const std::vector<std::string>& split(const std::string& name) const;
  Tensor load_image(const std::string& id) const;
  LabelMask load_gt_mask(const std::string& id) const;
  std::vector<double> labels(const std::string& id) const;
  std::string dir() const { return dir_; }
  std::string image_path(const std::string& id) const;
  std::string gt_mask_path(const std::string& id) const;

 private:
  std::string dir_;
  DatasetManifest man_;
};

// Stage-1 training view: images and image-level labels only; ground-truth
// masks are not reachable through this type.
struct TrainSample {
  std::string id;
  Tensor image;
  std::vector<double> labels;
};

class StageOneData {
 public:
  static StageOneData load(const Dataset& ds, const std::string& split);
  size_t size() const { return samples_.size(); }
  const TrainSample& at(size_t i) const { return samples_[i]; }
  int num_classes() const { return num_classes_; }
  int image_size() const { return image_size_; }

 private:
  std::vector<TrainSample> samples_;
  int num_classes_ = 0;
  int image_size_ = 0;
};

// ---- metrics ----
struct IouResult {
  std::vector<double> per_class;  // size 1+C; NaN where the class is absent from both
  double mean = 0.0;
};

IouResult miou(const LabelMask& pred, const LabelMask& gt, int num_classes);

struct EvalReport {
  std::vector<double> per_class_iou;  // NaN = excluded
  double miou_value = 0.0;
  int n_images = 0;
  std::string to_json() const;  // {"per_class_iou":[...],"miou":...,"n_images":...}
};

// Dataset-level IoU: intersections/unions accumulated globally across the
// split, then averaged over classes seen in pred or gt.
EvalReport evaluate_masks(const std::string& mask_dir, const Dataset& ds, const std::string& split);

}  // namespace wsseg
