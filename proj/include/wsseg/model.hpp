#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "wsseg/autodiff.hpp"
#include "wsseg/rng.hpp"
#include "wsseg/tensor.hpp"

namespace wsseg {

// Which branches a stage-1 model carries / trains.
enum class Ablation { kTransformerOnly, kCnnOnly, kDual, kDualSelfReg };

std::string ablation_name(Ablation a);
Ablation parse_ablation(const std::string& s);

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 64;
  int num_heads = 4;
  int num_blocks = 4;
  int num_classes = 4;
  int mlp_hidden = 128;
  std::vector<int> cnn_widths = {16, 32, 64};
  double ln_eps = 1e-5;

  // common CAM grid; the CNN reaches it with three stride-2 stages, the ViT
  // token grid is resized to it
  int grid() const { return image_size / 8; }
  int vit_grid() const { return image_size / patch_size; }
  int tokens() const { return vit_grid() * vit_grid(); }

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& j);
};

struct ConvParams {
  ParamBlock w, b;
};

struct LnParams {
  ParamBlock g, b;
};

struct VitBlock {
  LnParams ln1;
  ParamBlock q_w, q_b, k_w, k_b, v_w, v_b, proj_w, proj_b;
  LnParams ln2;
  ParamBlock fc1_w, fc1_b, fc2_w, fc2_b;
  LnParams ln3;
};

struct CnnBranch {
  std::vector<ConvParams> stages;
  ConvParams head;
};

struct VitBranch {
  ParamBlock patch_w, patch_b, pos;
  std::vector<VitBlock> blocks;
  ConvParams head;
};

struct DualModel {
  ModelConfig config;
  Ablation ablation = Ablation::kDualSelfReg;
  std::optional<CnnBranch> cnn;
  std::optional<VitBranch> vit;

  bool has_cnn() const { return cnn.has_value(); }
  bool has_vit() const { return vit.has_value(); }

  // visits every ParamBlock in a fixed order (cnn stages, cnn head, vit
  // patch/pos, vit blocks, vit head); checkpointing and Adam rely on it
  void for_each_param(const std::function<void(ParamBlock&)>& fn);
  void for_each_cnn_param(const std::function<void(ParamBlock&)>& fn);
  void for_each_vit_param(const std::function<void(ParamBlock&)>& fn);

  static DualModel init(const ModelConfig& cfg, Ablation ablation, Rng& rng);
};

struct BranchOut {
  Var cam;     // [N,C,Hg,Wg]
  Var logits;  // [N,C], global average of cam
};

// binds a ParamBlock onto the tape; training binds with gradients,
// inference binds a plain constant leaf
using ParamBind = std::function<Var(ParamBlock&)>;
ParamBind train_binder(Tape& t);
ParamBind eval_binder(Tape& t);

BranchOut cnn_forward(Tape& t, DualModel& m, Var images, const ParamBind& bind);
BranchOut vit_forward(Tape& t, DualModel& m, Var images, const ParamBind& bind);
Var vit_block_forward(Tape& t, VitBlock& blk, Var x, int num_heads, double ln_eps, const ParamBind& bind);

// Inference-phase CAM: the transformer branch only; the CNN branch is not
// evaluated (falls back to the CNN CAM only when no ViT branch exists).
Tensor infer_cam(const DualModel& m, const Tensor& images);

// Mean of both branches' CAMs; pseudo-mask source for dual models trained
// without the self-regularization coupling.
Tensor infer_cam_fused(const DualModel& m, const Tensor& images);

void save_dual_model(const std::string& path, const DualModel& m);
DualModel load_dual_model(const std::string& path);

}  // namespace wsseg
