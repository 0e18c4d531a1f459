#pragma once

#include <string>
#include <vector>

#include "wsseg/dataspace.hpp"
#include "wsseg/model.hpp"
#include "wsseg/tensor.hpp"

namespace wsseg {

using PseudoMask = LabelMask;

// Per-class score maps for one image plus the set of classes known present.
struct Cam {
  Tensor maps;               // [C,H,W]
  std::vector<int> present;  // multi-hot, length C
  std::string image_ref;
};

// Row-stochastic 8-neighbour transition matrix over pixel nodes, weights
// from color similarity.
struct AffinityGraph {
  int h = 0, w = 0;
  std::vector<int> offsets;      // size h*w+1
  std::vector<int> cols;
  std::vector<double> weights;   // row sums 1
};

struct PipelineConfig {
  double tau_bg = 0.3;
  int walk_steps = 10;
  double walk_alpha = 0.85;
  double sigma_color = 0.1;
  int crf_iters = 5;
  double theta_spatial = 3.0;
  double theta_color = 0.1;
  double w_smooth = 3.0;

  void validate() const;
  std::string to_json() const;
};

enum class CamSource { kAuto, kVit, kCnn, kFused };
std::string cam_source_name(CamSource s);
CamSource parse_cam_source(const std::string& s);

// per-present-channel (x-min)/(max-min); absent channels zeroed; a constant
// channel maps to all zeros
Cam normalize_cam(const Cam& cam);

// argmax over present classes where the max clears tau_bg, else background;
// ties go to the lowest class index; confidence carries the max score
PseudoMask threshold_to_mask(const Cam& cam, double tau_bg);

AffinityGraph build_affinity(const Tensor& image, double sigma_color);

// restart walk: s <- alpha*T*s + (1-alpha)*s0, per present channel; the cam
// must already live at the graph resolution
Cam random_walk_refine(const Cam& cam, const AffinityGraph& graph, int steps, double alpha);

// truncated-window mean-field smoothing of a per-pixel class distribution
Tensor crf_refine(const Tensor& probs, const Tensor& image, int iters, double theta_spatial, double theta_color,
                  double w_smooth);

// foreground scores -> (1+C) per-pixel distribution; the background score is
// scaled so the argmax decision boundary sits at tau_bg
Tensor cam_to_probs(const Cam& cam, double tau_bg);

// full per-image ladder: infer -> normalize -> upsample -> walk -> probs ->
// crf -> argmax
PseudoMask synthesize_pseudomask(const DualModel& model, const Tensor& image, const std::vector<int>& present,
                                 const std::string& id, const PipelineConfig& cfg, CamSource source);

// runs the ladder over a split and writes <id>.pgm files plus a sidecar
// config.json into out_dir; returns the number of masks written
int synthesize_pseudomasks(const DualModel& model, const Dataset& ds, const std::string& split,
                           const PipelineConfig& cfg, CamSource source, const std::string& out_dir, bool quiet);

// resolves kAuto against a model: fused for dual models trained without the
// self-regularization coupling, otherwise the plain inference rule
CamSource resolve_cam_source(CamSource requested, const DualModel& model);

}  // namespace wsseg
