#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "wsseg/campipeline.hpp"
#include "wsseg/dataspace.hpp"
#include "wsseg/model.hpp"
#include "wsseg/runconfig.hpp"
#include "wsseg/segmentation.hpp"
#include "wsseg/train.hpp"

namespace fs = std::filesystem;
using namespace wsseg;

namespace {

// defaults < --config file < explicitly passed flags
struct ConfigLayer {
  CLI::App* cmd;
  std::string config_path;
  std::vector<std::function<void(RunConfig&)>> overrides;

  explicit ConfigLayer(CLI::App* c) : cmd(c) {
    cmd->add_option("--config", config_path, "JSON config file; flags mirror its keys");
  }

  template <typename T>
  void opt(const std::string& flag, const std::string& desc, std::function<void(RunConfig&, const T&)> set) {
    auto store = std::make_shared<T>();
    CLI::Option* o = cmd->add_option(flag, *store, desc);
    overrides.push_back([o, store, set](RunConfig& c) {
      if (o->count() > 0) set(c, *store);
    });
  }

  void flag(const std::string& name, const std::string& desc, std::function<void(RunConfig&, bool)> set) {
    auto store = std::make_shared<bool>(false);
    CLI::Option* o = cmd->add_flag(name, *store, desc);
    overrides.push_back([o, store, set](RunConfig& c) {
      if (o->count() > 0) set(c, *store);
    });
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& f : overrides) f(cfg);
    return cfg;
  }
};

void add_seed_opt(ConfigLayer& layer) {
  layer.opt<uint64_t>("--seed", "RNG seed", [](RunConfig& c, const uint64_t& v) {
    c.seed = v;
    c.train.seed = v;
  });
}

void add_model_opts(ConfigLayer& layer) {
  layer.opt<int>("--image-size", "square image size", [](RunConfig& c, const int& v) { c.model.image_size = v; });
  layer.opt<int>("--patch-size", "ViT patch size", [](RunConfig& c, const int& v) { c.model.patch_size = v; });
  layer.opt<int>("--embed-dim", "ViT embedding dim", [](RunConfig& c, const int& v) { c.model.embed_dim = v; });
  layer.opt<int>("--num-heads", "attention heads", [](RunConfig& c, const int& v) { c.model.num_heads = v; });
  layer.opt<int>("--num-blocks", "transformer blocks", [](RunConfig& c, const int& v) { c.model.num_blocks = v; });
  layer.opt<int>("--mlp-hidden", "transformer MLP width", [](RunConfig& c, const int& v) { c.model.mlp_hidden = v; });
  layer.opt<std::vector<int>>("--cnn-widths", "CNN stage widths (3 values)",
                              [](RunConfig& c, const std::vector<int>& v) { c.model.cnn_widths = v; });
}

void add_train_opts(ConfigLayer& layer) {
  layer.opt<double>("--lr", "learning rate", [](RunConfig& c, const double& v) { c.train.lr = v; });
  layer.opt<double>("--beta1", "Adam beta1", [](RunConfig& c, const double& v) { c.train.beta1 = v; });
  layer.opt<double>("--beta2", "Adam beta2", [](RunConfig& c, const double& v) { c.train.beta2 = v; });
  layer.opt<double>("--eps", "Adam epsilon", [](RunConfig& c, const double& v) { c.train.eps = v; });
  layer.opt<double>("--weight-decay", "decoupled weight decay",
                    [](RunConfig& c, const double& v) { c.train.weight_decay = v; });
  layer.opt<int>("--batch-size", "batch size", [](RunConfig& c, const int& v) { c.train.batch_size = v; });
  layer.opt<int>("--epochs", "training epochs", [](RunConfig& c, const int& v) { c.train.epochs = v; });
  layer.flag("--no-augment-flip", "disable horizontal flip augmentation",
             [](RunConfig& c, bool v) { c.train.augment_flip = !v; });
  layer.flag("--no-augment-rotation", "disable 90-degree rotation augmentation",
             [](RunConfig& c, bool v) { c.train.augment_rotation = !v; });
}

void add_pipeline_opts(ConfigLayer& layer) {
  layer.opt<double>("--tau-bg", "background threshold", [](RunConfig& c, const double& v) { c.pipeline.tau_bg = v; });
  layer.opt<int>("--walk-steps", "random walk iterations",
                 [](RunConfig& c, const int& v) { c.pipeline.walk_steps = v; });
  layer.opt<double>("--walk-alpha", "random walk restart weight",
                    [](RunConfig& c, const double& v) { c.pipeline.walk_alpha = v; });
  layer.opt<double>("--sigma-color", "affinity color bandwidth",
                    [](RunConfig& c, const double& v) { c.pipeline.sigma_color = v; });
  layer.opt<int>("--crf-iters", "mean-field iterations", [](RunConfig& c, const int& v) { c.pipeline.crf_iters = v; });
  layer.opt<double>("--theta-spatial", "CRF spatial bandwidth",
                    [](RunConfig& c, const double& v) { c.pipeline.theta_spatial = v; });
  layer.opt<double>("--theta-color", "CRF color bandwidth",
                    [](RunConfig& c, const double& v) { c.pipeline.theta_color = v; });
  layer.opt<double>("--w-smooth", "CRF pairwise weight", [](RunConfig& c, const double& v) { c.pipeline.w_smooth = v; });
}

// output dirs must be writable before any compute starts
void ensure_writable_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::invalid_argument("output dir not writable: " + dir + " (" + ec.message() + ")");
  fs::path probe = fs::path(dir) / ".write-probe";
  std::ofstream f(probe);
  if (!f) throw std::invalid_argument("output dir not writable: " + dir);
  f.close();
  fs::remove(probe, ec);
}

void emit(const nlohmann::json& summary) { std::cout << summary.dump() << std::endl; }

// model geometry always follows the dataset manifest
void align_model_to_manifest(RunConfig& cfg, const Dataset& ds) {
  const DatasetManifest& man = ds.manifest();
  if (cfg.model.image_size != 64 && cfg.model.image_size != man.image_size)
    throw std::invalid_argument("image-size " + std::to_string(cfg.model.image_size) +
                                " conflicts with dataset image size " + std::to_string(man.image_size));
  cfg.model.image_size = man.image_size;
  cfg.model.num_classes = man.num_classes;
}

// ---- subcommands ----

int cmd_gen_data(const RunConfig& cfg, const std::string& out, bool quiet) {
  GenConfig g;
  g.n_train = cfg.n_train;
  g.n_val = cfg.n_val;
  g.n_test = cfg.n_test;
  g.num_classes = cfg.model.num_classes;
  g.image_size = cfg.model.image_size;
  g.seed = cfg.seed;
  g.validate();
  ensure_writable_dir(out);
  if (!quiet) std::cerr << "[gen-data] writing " << g.n_train + g.n_val + g.n_test << " samples to " << out << "\n";
  DatasetManifest man = generate_dataset(g, out);

  nlohmann::json j;
  j["command"] = "gen-data";
  j["out"] = out;
  j["n_train"] = g.n_train;
  j["n_val"] = g.n_val;
  j["n_test"] = g.n_test;
  j["num_classes"] = man.num_classes;
  j["image_size"] = man.image_size;
  j["seed"] = man.seed;
  emit(j);
  return 0;
}

int cmd_train_cam(RunConfig cfg, const std::string& data_dir, const std::string& out, const std::string& ablate,
                  const std::string& split, bool quiet) {
  Ablation ab = parse_ablation(ablate);
  Dataset ds = Dataset::open(data_dir);
  align_model_to_manifest(cfg, ds);
  cfg.validate();
  ensure_writable_dir(out);

  StageOneData data = StageOneData::load(ds, split);
  Rng rng(cfg.train.seed);
  DualModel model = DualModel::init(cfg.model, ab, rng);
  TrainStats stats = train_stage1(model, data, cfg.train, out, quiet);

  std::string ckpt = (fs::path(out) / ("ckpt-epoch" + std::to_string(cfg.train.epochs) + ".bin")).string();
  nlohmann::json j;
  j["command"] = "train-cam";
  j["ablation"] = ablation_name(ab);
  j["epochs"] = cfg.train.epochs;
  j["steps"] = stats.steps;
  j["final_avg_total"] = stats.epoch_avg_total.back();
  j["checkpoint"] = ckpt;
  j["log"] = (fs::path(out) / "train_log.jsonl").string();
  emit(j);
  return 0;
}

int cmd_make_masks(RunConfig cfg, const std::string& data_dir, const std::string& ckpt, const std::string& out,
                   const std::string& split, const std::string& stage, const std::string& source, bool quiet) {
  PipelineConfig pl = cfg.pipeline;
  if (stage == "cam") {
    pl.walk_steps = 0;
    pl.crf_iters = 0;
  } else if (stage == "rw") {
    pl.crf_iters = 0;
  } else if (stage != "rw+crf") {
    throw std::invalid_argument("unknown stage: " + stage + " (expected cam|rw|rw+crf)");
  }
  pl.validate();
  CamSource src = parse_cam_source(source);
  Dataset ds = Dataset::open(data_dir);
  DualModel model = load_dual_model(ckpt);
  if (model.config.image_size != ds.manifest().image_size ||
      model.config.num_classes != ds.manifest().num_classes)
    throw std::invalid_argument("checkpoint geometry does not match dataset");
  ensure_writable_dir(out);

  int n = synthesize_pseudomasks(model, ds, split, pl, src, out, quiet);
  nlohmann::json j;
  j["command"] = "make-masks";
  j["n_masks"] = n;
  j["stage"] = stage;
  j["cam_source"] = cam_source_name(resolve_cam_source(src, model));
  j["split"] = split;
  j["out"] = out;
  emit(j);
  return 0;
}

int cmd_train_seg(RunConfig cfg, const std::string& data_dir, const std::string& mask_dir, bool oracle,
                  const std::string& out, const std::string& split, const std::vector<std::string>& predict_splits,
                  bool quiet) {
  if (oracle == mask_dir.empty())
    throw std::invalid_argument("train-seg needs exactly one of --masks <dir> or --oracle-masks");
  Dataset ds = Dataset::open(data_dir);
  align_model_to_manifest(cfg, ds);
  cfg.train.validate();
  ensure_writable_dir(out);

  SegConfig sc;
  sc.image_size = ds.manifest().image_size;
  sc.num_classes = ds.manifest().num_classes;
  sc.validate();

  std::vector<SegTrainSample> data = load_seg_data(ds, split, mask_dir, oracle);
  Rng rng(cfg.train.seed);
  SegModel model = SegModel::init(sc, rng);
  TrainStats stats = train_stage2(model, data, cfg.train, out, quiet);

  nlohmann::json preds = nlohmann::json::object();
  for (const auto& ps : predict_splits) {
    std::string pdir = (fs::path(out) / ("predictions_" + ps)).string();
    predict_split(model, ds, ps, pdir);
    preds[ps] = pdir;
  }

  nlohmann::json j;
  j["command"] = "train-seg";
  j["oracle_masks"] = oracle;
  j["epochs"] = cfg.train.epochs;
  j["steps"] = stats.steps;
  j["final_avg_loss"] = stats.epoch_avg_total.back();
  j["checkpoint"] = (fs::path(out) / ("ckpt-epoch" + std::to_string(cfg.train.epochs) + ".bin")).string();
  j["predictions"] = preds;
  emit(j);
  return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& mask_dir, const std::string& split,
             const std::string& out) {
  Dataset ds = Dataset::open(data_dir);
  EvalReport rep = evaluate_masks(mask_dir, ds, split);
  std::string js = rep.to_json();
  if (!out.empty()) {
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw std::invalid_argument("cannot write report to " + out);
    f << js << "\n";
  }
  std::cout << js << std::endl;
  return 0;
}

int cmd_viz(RunConfig cfg, const std::string& data_dir, const std::string& ckpt, const std::string& out,
            std::vector<std::string> ids, const std::string& split, int limit, const std::string& source,
            bool quiet) {
  Dataset ds = Dataset::open(data_dir);
  DualModel model = load_dual_model(ckpt);
  ensure_writable_dir(out);
  if (ids.empty()) {
    const auto& sp = ds.split(split);
    for (int i = 0; i < std::min<int>(limit, static_cast<int>(sp.size())); ++i) ids.push_back(sp[static_cast<size_t>(i)]);
  }
  CamSource src = resolve_cam_source(parse_cam_source(source), model);

  int s = model.config.image_size;
  int c = model.config.num_classes;
  int files = 0;
  for (const auto& id : ids) {
    Tensor img = ds.load_image(id);
    std::vector<double> y = ds.labels(id);
    std::vector<int> present(y.begin(), y.end());

    Tensor batch = Tensor::zeros({1, 3, s, s});
    std::copy(img.data.begin(), img.data.end(), batch.data.begin());
    Tensor cam_raw = src == CamSource::kFused ? infer_cam_fused(model, batch) : infer_cam(model, batch);
    Cam cam{Tensor({c, model.config.grid(), model.config.grid()},
                   std::vector<double>(cam_raw.data.begin(), cam_raw.data.end())),
            present, id};
    cam = normalize_cam(cam);
    Tensor up = bilinear_resize(cam.maps, s, s);

    size_t plane = static_cast<size_t>(s) * s;
    for (int ci = 0; ci < c; ++ci) {
      if (!present[static_cast<size_t>(ci)]) continue;
      Tensor heat = Tensor::zeros({3, s, s});
      for (size_t p = 0; p < plane; ++p) {
        double v = up.data[static_cast<size_t>(ci) * plane + p];
        heat.data[p] = v;                       // R
        heat.data[plane + p] = 0.15;            // G
        heat.data[2 * plane + p] = 1.0 - v;     // B
      }
      write_ppm((fs::path(out) / ("heatmap_" + id + "_" + ds.manifest().class_names[static_cast<size_t>(ci)] + ".ppm"))
                    .string(),
                heat);
      ++files;
    }

    static const double palette[5][3] = {
        {0, 0, 0}, {0.9, 0.15, 0.15}, {0.15, 0.8, 0.15}, {0.2, 0.3, 0.95}, {0.95, 0.85, 0.1}};
    Cam up_cam{up, present, id};
    PseudoMask mask = threshold_to_mask(up_cam, cfg.pipeline.tau_bg);
    Tensor overlay = img;
    for (size_t p = 0; p < plane; ++p) {
      int lab = mask.labels[p];
      if (lab == 0) continue;
      for (int ch = 0; ch < 3; ++ch)
        overlay.data[static_cast<size_t>(ch) * plane + p] =
            0.45 * overlay.data[static_cast<size_t>(ch) * plane + p] + 0.55 * palette[lab][ch];
    }
    write_ppm((fs::path(out) / ("overlay_" + id + ".ppm")).string(), overlay);
    ++files;
    if (!quiet) std::cerr << "[viz] " << id << "\n";
  }

  nlohmann::json j;
  j["command"] = "viz";
  j["n_files"] = files;
  j["out"] = out;
  emit(j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-branch weakly supervised semantic segmentation pipeline"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
  ConfigLayer gen_layer(gen);
  std::string gen_out;
  bool gen_quiet = false;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_flag("--quiet", gen_quiet, "suppress progress output");
  add_seed_opt(gen_layer);
  gen_layer.opt<int>("--n-train", "training samples", [](RunConfig& c, const int& v) { c.n_train = v; });
  gen_layer.opt<int>("--n-val", "validation samples", [](RunConfig& c, const int& v) { c.n_val = v; });
  gen_layer.opt<int>("--n-test", "test samples", [](RunConfig& c, const int& v) { c.n_test = v; });
  gen_layer.opt<int>("--num-classes", "shape classes (<=4)",
                     [](RunConfig& c, const int& v) { c.model.num_classes = v; });
  gen_layer.opt<int>("--image-size", "square image size", [](RunConfig& c, const int& v) { c.model.image_size = v; });

  // train-cam
  auto* tc = app.add_subcommand("train-cam", "stage 1: train the dual CAM network on image-level labels");
  ConfigLayer tc_layer(tc);
  std::string tc_data, tc_out, tc_ablate = "dual-selfreg", tc_split = "train";
  bool tc_quiet = false;
  tc->add_option("--data", tc_data, "dataset directory")->required();
  tc->add_option("--out", tc_out, "run output directory")->required();
  tc->add_option("--ablate", tc_ablate, "transformer-only|cnn-only|dual|dual-selfreg");
  tc->add_option("--split", tc_split, "training split");
  tc->add_flag("--quiet", tc_quiet, "suppress progress output");
  add_seed_opt(tc_layer);
  add_model_opts(tc_layer);
  add_train_opts(tc_layer);
  tc_layer.opt<double>("--selfreg-lambda", "weight of the self-regularization term",
                       [](RunConfig& c, const double& v) { c.train.selfreg_lambda = v; });
  tc_layer.opt<double>("--selfreg-beta", "Huber knee",
                       [](RunConfig& c, const double& v) { c.train.selfreg_beta = v; });
  tc_layer.flag("--selfreg-all-channels", "regularize absent-class channels too",
                [](RunConfig& c, bool v) { c.train.selfreg_all_channels = v; });
  tc_layer.flag("--selfreg-normalized", "apply the self-regularization on min-max normalized CAMs",
                [](RunConfig& c, bool v) { c.train.selfreg_normalized = v; });
  tc_layer.opt<double>("--cnn-lr-scale", "CNN branch learning-rate multiplier",
                       [](RunConfig& c, const double& v) { c.train.cnn_lr_scale = v; });

  // make-masks
  auto* mm = app.add_subcommand("make-masks", "synthesize pseudo-masks from a trained stage-1 model");
  ConfigLayer mm_layer(mm);
  std::string mm_data, mm_ckpt, mm_out, mm_split = "train", mm_stage = "rw+crf", mm_source = "auto";
  bool mm_quiet = false;
  mm->add_option("--data", mm_data, "dataset directory")->required();
  mm->add_option("--ckpt", mm_ckpt, "stage-1 checkpoint")->required();
  mm->add_option("--out", mm_out, "pseudo-mask output directory")->required();
  mm->add_option("--split", mm_split, "split to process");
  mm->add_option("--stages", mm_stage, "refinement ladder stage: cam|rw|rw+crf");
  mm->add_option("--cam-source", mm_source, "auto|vit|cnn|fused");
  mm->add_flag("--quiet", mm_quiet, "suppress progress output");
  add_pipeline_opts(mm_layer);

  // train-seg
  auto* tsg = app.add_subcommand("train-seg", "stage 2: train the segmentation network on pseudo-masks");
  ConfigLayer tsg_layer(tsg);
  std::string tsg_data, tsg_masks, tsg_out, tsg_split = "train", tsg_predict = "val";
  bool tsg_oracle = false, tsg_quiet = false;
  tsg->add_option("--data", tsg_data, "dataset directory")->required();
  tsg->add_option("--masks", tsg_masks, "pseudo-mask directory");
  tsg->add_flag("--oracle-masks", tsg_oracle, "sanity mode: train on ground-truth masks");
  tsg->add_option("--out", tsg_out, "run output directory")->required();
  tsg->add_option("--split", tsg_split, "training split");
  tsg->add_option("--predict", tsg_predict, "comma-separated splits to predict after training (empty to skip)");
  tsg->add_flag("--quiet", tsg_quiet, "suppress progress output");
  add_seed_opt(tsg_layer);
  add_train_opts(tsg_layer);

  // eval
  auto* ev = app.add_subcommand("eval", "dataset-level mIoU of a mask directory against ground truth");
  std::string ev_data, ev_masks, ev_split = "train", ev_out;
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--masks", ev_masks, "mask directory (pseudo-masks or predictions)")->required();
  ev->add_option("--split", ev_split, "split to evaluate");
  ev->add_option("--out", ev_out, "also write the JSON report here");
  bool ev_quiet = false;
  ev->add_flag("--quiet", ev_quiet, "accepted for symmetry");

  // viz
  auto* vz = app.add_subcommand("viz", "render CAM heatmaps and mask overlays");
  ConfigLayer vz_layer(vz);
  std::string vz_data, vz_ckpt, vz_out, vz_ids, vz_split = "val", vz_source = "auto";
  int vz_limit = 4;
  bool vz_quiet = false;
  vz->add_option("--data", vz_data, "dataset directory")->required();
  vz->add_option("--ckpt", vz_ckpt, "stage-1 checkpoint")->required();
  vz->add_option("--out", vz_out, "output directory")->required();
  vz->add_option("--ids", vz_ids, "comma-separated sample ids (default: first --limit of --split)");
  vz->add_option("--split", vz_split, "split to draw from");
  vz->add_option("--limit", vz_limit, "number of samples when --ids is not given");
  vz->add_option("--cam-source", vz_source, "auto|vit|cnn|fused");
  vz->add_flag("--quiet", vz_quiet, "suppress progress output");
  vz_layer.opt<double>("--tau-bg", "background threshold for the overlay",
                       [](RunConfig& c, const double& v) { c.pipeline.tau_bg = v; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_layer.resolve(), gen_out, gen_quiet);
    if (tc->parsed()) return cmd_train_cam(tc_layer.resolve(), tc_data, tc_out, tc_ablate, tc_split, tc_quiet);
    if (mm->parsed())
      return cmd_make_masks(mm_layer.resolve(), mm_data, mm_ckpt, mm_out, mm_split, mm_stage, mm_source, mm_quiet);
    if (tsg->parsed()) {
      std::vector<std::string> preds;
      std::stringstream ss(tsg_predict);
      std::string tok;
      while (std::getline(ss, tok, ','))
        if (!tok.empty()) preds.push_back(tok);
      return cmd_train_seg(tsg_layer.resolve(), tsg_data, tsg_masks, tsg_oracle, tsg_out, tsg_split, preds,
                           tsg_quiet);
    }
    if (ev->parsed()) return cmd_eval(ev_data, ev_masks, ev_split, ev_out);
    if (vz->parsed()) {
      std::vector<std::string> ids;
      std::stringstream ss(vz_ids);
      std::string tok;
      while (std::getline(ss, tok, ','))
        if (!tok.empty()) ids.push_back(tok);
      return cmd_viz(vz_layer.resolve(), vz_data, vz_ckpt, vz_out, ids, vz_split, vz_limit, vz_source, vz_quiet);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
