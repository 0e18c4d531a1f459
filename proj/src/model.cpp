#include "wsseg/model.hpp"

#include <cmath>
#include <map>

#include <json.hpp>

#include "wsseg/checkpoint.hpp"

namespace wsseg {

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kTransformerOnly: return "transformer-only";
    case Ablation::kCnnOnly: return "cnn-only";
    case Ablation::kDual: return "dual";
    case Ablation::kDualSelfReg: return "dual-selfreg";
  }
  throw std::logic_error("ablation_name: bad value");
}

Ablation parse_ablation(const std::string& s) {
  if (s == "transformer-only") return Ablation::kTransformerOnly;
  if (s == "cnn-only") return Ablation::kCnnOnly;
  if (s == "dual") return Ablation::kDual;
  if (s == "dual-selfreg") return Ablation::kDualSelfReg;
  throw std::invalid_argument("unknown ablation: " + s +
                              " (expected transformer-only|cnn-only|dual|dual-selfreg)");
}

void ModelConfig::validate() const {
  if (image_size < 8 || image_size % 8 != 0)
    throw std::invalid_argument("model config: image-size must be a positive multiple of 8");
  if (patch_size < 1 || image_size % patch_size != 0)
    throw std::invalid_argument("model config: image-size must be divisible by patch-size");
  if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0)
    throw std::invalid_argument("model config: embed-dim must be divisible by num-heads");
  if (num_blocks < 1) throw std::invalid_argument("model config: num-blocks must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("model config: num-classes must be >= 1");
  if (mlp_hidden < 1) throw std::invalid_argument("model config: mlp-hidden must be >= 1");
  if (cnn_widths.size() != 3) throw std::invalid_argument("model config: cnn-widths must list 3 stage widths");
  for (int w : cnn_widths)
    if (w < 1) throw std::invalid_argument("model config: cnn-widths must be positive");
  if (ln_eps <= 0.0) throw std::invalid_argument("model config: ln-eps must be > 0");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["image_size"] = image_size;
  j["patch_size"] = patch_size;
  j["embed_dim"] = embed_dim;
  j["num_heads"] = num_heads;
  j["num_blocks"] = num_blocks;
  j["num_classes"] = num_classes;
  j["mlp_hidden"] = mlp_hidden;
  j["cnn_widths"] = cnn_widths;
  j["ln_eps"] = ln_eps;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s);
  ModelConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.num_blocks = j.at("num_blocks").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.cnn_widths = j.at("cnn_widths").get<std::vector<int>>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.validate();
  return c;
}

// ---- init ----

static Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  double std = std::sqrt(2.0 / fan_in);
  for (double& v : t.data) v = rng.normal(0.0, std);
  return t;
}

static Tensor head_normal(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.normal(0.0, 0.1);  // variance 0.01
  return t;
}

static ConvParams init_conv(const std::string& name, int cout, int cin, int k, Rng& rng) {
  return ConvParams{ParamBlock(name + ".w", he_normal({cout, cin, k, k}, cin * k * k, rng)),
                    ParamBlock(name + ".b", Tensor::zeros({cout}))};
}

static ConvParams init_cam_head(const std::string& name, int cout, int cin, Rng& rng) {
  return ConvParams{ParamBlock(name + ".w", head_normal({cout, cin, 1, 1}, rng)),
                    ParamBlock(name + ".b", Tensor::zeros({cout}))};
}

static LnParams init_ln(const std::string& name, int d) {
  return LnParams{ParamBlock(name + ".g", Tensor::full({d}, 1.0)), ParamBlock(name + ".b", Tensor::zeros({d}))};
}

static ParamBlock init_linear_w(const std::string& name, int in, int out, Rng& rng) {
  return ParamBlock(name, he_normal({in, out}, in, rng));
}

DualModel DualModel::init(const ModelConfig& cfg, Ablation ablation, Rng& rng) {
  cfg.validate();
  DualModel m;
  m.config = cfg;
  m.ablation = ablation;
  int c = cfg.num_classes;

  if (ablation != Ablation::kTransformerOnly) {
    CnnBranch br;
    int cin = 3;
    for (size_t i = 0; i < cfg.cnn_widths.size(); ++i) {
      br.stages.push_back(init_conv("cnn.conv" + std::to_string(i + 1), cfg.cnn_widths[i], cin, 3, rng));
      cin = cfg.cnn_widths[i];
    }
    br.head = init_cam_head("cnn.head", c, cin, rng);
    m.cnn = std::move(br);
  }

  if (ablation != Ablation::kCnnOnly) {
    VitBranch br{
        ParamBlock("vit.patch.w", he_normal({cfg.patch_size * cfg.patch_size * 3, cfg.embed_dim},
                                            cfg.patch_size * cfg.patch_size * 3, rng)),
        ParamBlock("vit.patch.b", Tensor::zeros({cfg.embed_dim})),
        ParamBlock("vit.pos", Tensor::zeros({cfg.tokens(), cfg.embed_dim})),
        {},
        {}};
    int d = cfg.embed_dim;
    for (int bi = 0; bi < cfg.num_blocks; ++bi) {
      std::string p = "vit.block" + std::to_string(bi) + ".";
      VitBlock blk{
          init_ln(p + "ln1", d),
          init_linear_w(p + "q.w", d, d, rng), ParamBlock(p + "q.b", Tensor::zeros({d})),
          init_linear_w(p + "k.w", d, d, rng), ParamBlock(p + "k.b", Tensor::zeros({d})),
          init_linear_w(p + "v.w", d, d, rng), ParamBlock(p + "v.b", Tensor::zeros({d})),
          init_linear_w(p + "proj.w", d, d, rng), ParamBlock(p + "proj.b", Tensor::zeros({d})),
          init_ln(p + "ln2", d),
          init_linear_w(p + "fc1.w", d, cfg.mlp_hidden, rng), ParamBlock(p + "fc1.b", Tensor::zeros({cfg.mlp_hidden})),
          init_linear_w(p + "fc2.w", cfg.mlp_hidden, d, rng), ParamBlock(p + "fc2.b", Tensor::zeros({d})),
          init_ln(p + "ln3", d)};
      br.blocks.push_back(std::move(blk));
    }
    br.head = init_cam_head("vit.head", c, d, rng);
    m.vit = std::move(br);
  }
  return m;
}

// ---- param walkers ----

static void walk_conv(ConvParams& c, const std::function<void(ParamBlock&)>& fn) {
  fn(c.w);
  fn(c.b);
}

static void walk_ln(LnParams& l, const std::function<void(ParamBlock&)>& fn) {
  fn(l.g);
  fn(l.b);
}

void DualModel::for_each_cnn_param(const std::function<void(ParamBlock&)>& fn) {
  if (!cnn) return;
  for (auto& s : cnn->stages) walk_conv(s, fn);
  walk_conv(cnn->head, fn);
}

void DualModel::for_each_vit_param(const std::function<void(ParamBlock&)>& fn) {
  if (!vit) return;
  fn(vit->patch_w);
  fn(vit->patch_b);
  fn(vit->pos);
  for (auto& b : vit->blocks) {
    walk_ln(b.ln1, fn);
    fn(b.q_w);
    fn(b.q_b);
    fn(b.k_w);
    fn(b.k_b);
    fn(b.v_w);
    fn(b.v_b);
    fn(b.proj_w);
    fn(b.proj_b);
    walk_ln(b.ln2, fn);
    fn(b.fc1_w);
    fn(b.fc1_b);
    fn(b.fc2_w);
    fn(b.fc2_b);
    walk_ln(b.ln3, fn);
  }
  walk_conv(vit->head, fn);
}

void DualModel::for_each_param(const std::function<void(ParamBlock&)>& fn) {
  for_each_cnn_param(fn);
  for_each_vit_param(fn);
}

// ---- forwards ----

ParamBind train_binder(Tape& t) {
  return [&t](ParamBlock& p) { return t.param(p); };
}

ParamBind eval_binder(Tape& t) {
  return [&t](ParamBlock& p) { return t.leaf(p.value, false); };
}

BranchOut cnn_forward(Tape& t, DualModel& m, Var images, const ParamBind& bind) {
  if (!m.cnn) throw std::invalid_argument("cnn_forward: model has no CNN branch");
  const Tensor& iv = images.val();
  if (iv.rank() != 4 || iv.shape[1] != 3 || iv.shape[2] != m.config.image_size || iv.shape[3] != m.config.image_size)
    throw std::invalid_argument("cnn_forward: images must be [N,3," + std::to_string(m.config.image_size) + "," +
                                std::to_string(m.config.image_size) + "], got " + shape_str(iv.shape));
  Var x = images;
  for (auto& stage : m.cnn->stages) x = t.relu(t.conv2d(x, bind(stage.w), bind(stage.b), 2, 1));
  Var cam = t.conv2d(x, bind(m.cnn->head.w), bind(m.cnn->head.b), 1, 0);
  cam = t.bilinear_resize(cam, m.config.grid(), m.config.grid());
  return BranchOut{cam, t.global_avg_pool(cam)};
}

Var vit_block_forward(Tape& t, VitBlock& blk, Var x, int num_heads, double ln_eps, const ParamBind& bind) {
  int d = x.shape().back();
  int dh = d / num_heads;

  Var h = t.layer_norm(x, bind(blk.ln1.g), bind(blk.ln1.b), ln_eps);
  Var q = t.split_heads(t.linear(h, bind(blk.q_w), bind(blk.q_b)), num_heads);
  Var k = t.split_heads(t.linear(h, bind(blk.k_w), bind(blk.k_b)), num_heads);
  Var v = t.split_heads(t.linear(h, bind(blk.v_w), bind(blk.v_b)), num_heads);
  Var scores = t.scale(t.matmul(q, t.transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var ctx = t.merge_heads(t.matmul(t.softmax_last(scores), v));
  Var attn_out = t.linear(ctx, bind(blk.proj_w), bind(blk.proj_b));
  x = t.add(x, attn_out);

  Var h2 = t.layer_norm(x, bind(blk.ln2.g), bind(blk.ln2.b), ln_eps);
  Var mlp = t.linear(t.gelu(t.linear(h2, bind(blk.fc1_w), bind(blk.fc1_b))), bind(blk.fc2_w), bind(blk.fc2_b));
  x = t.add(x, mlp);

  return t.layer_norm(x, bind(blk.ln3.g), bind(blk.ln3.b), ln_eps);
}

BranchOut vit_forward(Tape& t, DualModel& m, Var images, const ParamBind& bind) {
  if (!m.vit) throw std::invalid_argument("vit_forward: model has no transformer branch");
  const ModelConfig& cfg = m.config;
  const Tensor& iv = images.val();
  if (iv.rank() != 4 || iv.shape[1] != 3 || iv.shape[2] != cfg.image_size || iv.shape[3] != cfg.image_size)
    throw std::invalid_argument("vit_forward: images must be [N,3," + std::to_string(cfg.image_size) + "," +
                                std::to_string(cfg.image_size) + "], got " + shape_str(iv.shape));

  Var tokens = t.patchify(images, cfg.patch_size);
  Var emb = t.linear(tokens, bind(m.vit->patch_w), bind(m.vit->patch_b));
  emb = t.add_rows(emb, bind(m.vit->pos));
  for (auto& blk : m.vit->blocks) emb = vit_block_forward(t, blk, emb, cfg.num_heads, cfg.ln_eps, bind);

  Var grid = t.tokens_to_grid(emb, cfg.vit_grid(), cfg.vit_grid());
  Var cam = t.conv2d(grid, bind(m.vit->head.w), bind(m.vit->head.b), 1, 0);
  cam = t.bilinear_resize(cam, cfg.grid(), cfg.grid());
  return BranchOut{cam, t.global_avg_pool(cam)};
}

Tensor infer_cam(const DualModel& m, const Tensor& images) {
  // eval path never mutates the model; the cast only feeds leaf bindings
  DualModel& mm = const_cast<DualModel&>(m);
  Tape t;
  Var x = t.leaf(images, false);
  BranchOut out = mm.has_vit() ? vit_forward(t, mm, x, eval_binder(t)) : cnn_forward(t, mm, x, eval_binder(t));
  return out.cam.val();
}

Tensor infer_cam_fused(const DualModel& m, const Tensor& images) {
  DualModel& mm = const_cast<DualModel&>(m);
  if (!mm.has_vit() || !mm.has_cnn()) return infer_cam(m, images);
  Tape t;
  Var x = t.leaf(images, false);
  BranchOut vo = vit_forward(t, mm, x, eval_binder(t));
  BranchOut co = cnn_forward(t, mm, x, eval_binder(t));
  return scale(add(vo.cam.val(), co.cam.val()), 0.5);
}

// ---- checkpoint ----

void save_dual_model(const std::string& path, const DualModel& m) {
  DualModel& mm = const_cast<DualModel&>(m);
  std::vector<CheckpointEntry> entries;
  mm.for_each_param([&entries](ParamBlock& p) {
    entries.push_back(CheckpointEntry{p.name, p.value.shape, p.value.data});
  });
  nlohmann::json meta;
  meta["kind"] = "dual";
  meta["ablation"] = ablation_name(m.ablation);
  meta["model_config"] = nlohmann::json::parse(m.config.to_json());
  save_checkpoint(path, meta.dump(), entries);
}

DualModel load_dual_model(const std::string& path) {
  std::vector<CheckpointEntry> entries;
  nlohmann::json meta = nlohmann::json::parse(load_checkpoint(path, entries));
  if (meta.value("kind", "") != "dual") throw std::runtime_error("checkpoint: not a stage-1 model: " + path);

  ModelConfig cfg = ModelConfig::from_json(meta.at("model_config").dump());
  Ablation ab = parse_ablation(meta.at("ablation").get<std::string>());
  Rng scratch(0);
  DualModel m = DualModel::init(cfg, ab, scratch);

  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  m.for_each_param([&by_name, &path](ParamBlock& p) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing tensor " + p.name + " in " + path);
    if (it->second->shape != p.value.shape) throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.value.data = it->second->data;
    by_name.erase(it);
  });
  if (!by_name.empty()) throw std::runtime_error("checkpoint: unexpected tensor " + by_name.begin()->first);
  return m;
}

}  // namespace wsseg
