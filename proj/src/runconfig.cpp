#include "wsseg/runconfig.hpp"

#include <fstream>

#include <json.hpp>

namespace wsseg {

void RunConfig::validate() const {
  model.validate();
  train.validate();
  pipeline.validate();
  if (n_train < 1 || n_val < 1 || n_test < 1)
    throw std::invalid_argument("config: n-train/n-val/n-test must be >= 1");
}

void apply_config_json(RunConfig& cfg, const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const nlohmann::json& v = it.value();
    try {
      if (k == "image-size") cfg.model.image_size = v.get<int>();
      else if (k == "patch-size") cfg.model.patch_size = v.get<int>();
      else if (k == "embed-dim") cfg.model.embed_dim = v.get<int>();
      else if (k == "num-heads") cfg.model.num_heads = v.get<int>();
      else if (k == "num-blocks") cfg.model.num_blocks = v.get<int>();
      else if (k == "num-classes") cfg.model.num_classes = v.get<int>();
      else if (k == "mlp-hidden") cfg.model.mlp_hidden = v.get<int>();
      else if (k == "cnn-widths") cfg.model.cnn_widths = v.get<std::vector<int>>();
      else if (k == "ln-eps") cfg.model.ln_eps = v.get<double>();
      else if (k == "lr") cfg.train.lr = v.get<double>();
      else if (k == "beta1") cfg.train.beta1 = v.get<double>();
      else if (k == "beta2") cfg.train.beta2 = v.get<double>();
      else if (k == "eps") cfg.train.eps = v.get<double>();
      else if (k == "weight-decay") cfg.train.weight_decay = v.get<double>();
      else if (k == "batch-size") cfg.train.batch_size = v.get<int>();
      else if (k == "epochs") cfg.train.epochs = v.get<int>();
      else if (k == "seed") { cfg.seed = v.get<uint64_t>(); cfg.train.seed = cfg.seed; }
      else if (k == "selfreg-lambda") cfg.train.selfreg_lambda = v.get<double>();
      else if (k == "selfreg-beta") cfg.train.selfreg_beta = v.get<double>();
      else if (k == "selfreg-all-channels") cfg.train.selfreg_all_channels = v.get<bool>();
      else if (k == "selfreg-normalized") cfg.train.selfreg_normalized = v.get<bool>();
      else if (k == "cnn-lr-scale") cfg.train.cnn_lr_scale = v.get<double>();
      else if (k == "augment-flip") cfg.train.augment_flip = v.get<bool>();
      else if (k == "augment-rotation") cfg.train.augment_rotation = v.get<bool>();
      else if (k == "tau-bg") cfg.pipeline.tau_bg = v.get<double>();
      else if (k == "walk-steps") cfg.pipeline.walk_steps = v.get<int>();
      else if (k == "walk-alpha") cfg.pipeline.walk_alpha = v.get<double>();
      else if (k == "sigma-color") cfg.pipeline.sigma_color = v.get<double>();
      else if (k == "crf-iters") cfg.pipeline.crf_iters = v.get<int>();
      else if (k == "theta-spatial") cfg.pipeline.theta_spatial = v.get<double>();
      else if (k == "theta-color") cfg.pipeline.theta_color = v.get<double>();
      else if (k == "w-smooth") cfg.pipeline.w_smooth = v.get<double>();
      else if (k == "n-train") cfg.n_train = v.get<int>();
      else if (k == "n-val") cfg.n_val = v.get<int>();
      else if (k == "n-test") cfg.n_test = v.get<int>();
      else throw std::invalid_argument("config: unknown key \"" + k + "\"");
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument("config: bad value type for key \"" + k + "\"");
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  apply_config_json(cfg, all);
}

}  // namespace wsseg
