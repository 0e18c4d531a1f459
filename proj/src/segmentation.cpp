#include "wsseg/segmentation.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <json.hpp>

#include "wsseg/checkpoint.hpp"

namespace fs = std::filesystem;

namespace wsseg {

void SegConfig::validate() const {
  if (image_size < 8 || image_size % 8 != 0)
    throw std::invalid_argument("seg config: image-size must be a positive multiple of 8");
  if (num_classes < 1) throw std::invalid_argument("seg config: num-classes must be >= 1");
  if (widths.size() != 3) throw std::invalid_argument("seg config: widths must list 3 encoder stages");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("seg config: widths must be positive");
}

std::string SegConfig::to_json() const {
  nlohmann::json j;
  j["image_size"] = image_size;
  j["num_classes"] = num_classes;
  j["widths"] = widths;
  return j.dump();
}

SegConfig SegConfig::from_json(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s);
  SegConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.validate();
  return c;
}

static Tensor he_conv(int cout, int cin, int k, Rng& rng) {
  Tensor t = Tensor::zeros({cout, cin, k, k});
  double std = std::sqrt(2.0 / (cin * k * k));
  for (double& v : t.data) v = rng.normal(0.0, std);
  return t;
}

static ConvParams conv_block(const std::string& name, int cout, int cin, int k, Rng& rng) {
  return ConvParams{ParamBlock(name + ".w", he_conv(cout, cin, k, rng)), ParamBlock(name + ".b", Tensor::zeros({cout}))};
}

SegModel SegModel::init(const SegConfig& cfg, Rng& rng) {
  cfg.validate();
  SegModel m;
  m.config = cfg;
  int w1 = cfg.widths[0], w2 = cfg.widths[1], w3 = cfg.widths[2];
  m.enc1 = conv_block("seg.enc1", w1, 3, 3, rng);
  m.enc2 = conv_block("seg.enc2", w2, w1, 3, rng);
  m.enc3 = conv_block("seg.enc3", w3, w2, 3, rng);
  m.dec3 = conv_block("seg.dec3", w2, w3 + w2, 3, rng);  // up(enc3) ++ enc2
  m.dec2 = conv_block("seg.dec2", w1, w2 + w1, 3, rng);  // up(dec3) ++ enc1
  m.dec1 = conv_block("seg.dec1", w1, w1, 3, rng);       // up(dec2) at full res
  // small-scale head keeps the initial per-pixel scores near zero
  Tensor hw = Tensor::zeros({cfg.out_channels(), w1, 1, 1});
  for (double& v : hw.data) v = rng.normal(0.0, 0.1);
  m.head = ConvParams{ParamBlock("seg.head.w", std::move(hw)), ParamBlock("seg.head.b", Tensor::zeros({cfg.out_channels()}))};
  return m;
}

void SegModel::for_each_param(const std::function<void(ParamBlock&)>& fn) {
  for (ConvParams* c : {&enc1, &enc2, &enc3, &dec3, &dec2, &dec1, &head}) {
    fn(c->w);
    fn(c->b);
  }
}

Var seg_forward(Tape& t, SegModel& m, Var images, const ParamBind& bind) {
  const Tensor& iv = images.val();
  int s = m.config.image_size;
  if (iv.rank() != 4 || iv.shape[1] != 3 || iv.shape[2] != s || iv.shape[3] != s)
    throw std::invalid_argument("seg_forward: images must be [N,3," + std::to_string(s) + "," + std::to_string(s) +
                                "], got " + shape_str(iv.shape));

  Var e1 = t.relu(t.conv2d(images, bind(m.enc1.w), bind(m.enc1.b), 2, 1));  // s/2
  Var e2 = t.relu(t.conv2d(e1, bind(m.enc2.w), bind(m.enc2.b), 2, 1));      // s/4
  Var e3 = t.relu(t.conv2d(e2, bind(m.enc3.w), bind(m.enc3.b), 2, 1));      // s/8

  Var u3 = t.concat_channels(t.bilinear_resize(e3, s / 4, s / 4), e2);
  Var d3 = t.relu(t.conv2d(u3, bind(m.dec3.w), bind(m.dec3.b), 1, 1));

  Var u2 = t.concat_channels(t.bilinear_resize(d3, s / 2, s / 2), e1);
  Var d2 = t.relu(t.conv2d(u2, bind(m.dec2.w), bind(m.dec2.b), 1, 1));

  Var d1 = t.relu(t.conv2d(t.bilinear_resize(d2, s, s), bind(m.dec1.w), bind(m.dec1.b), 1, 1));
  return t.conv2d(d1, bind(m.head.w), bind(m.head.b), 1, 0);
}

LabelMask predict_mask(const SegModel& m, const Tensor& image) {
  SegModel& mm = const_cast<SegModel&>(m);
  int s = m.config.image_size;
  Tensor batch = Tensor::zeros({1, 3, s, s});
  if (image.rank() != 3 || image.shape[1] != s || image.shape[2] != s)
    throw std::invalid_argument("predict_mask: image geometry mismatch");
  std::copy(image.data.begin(), image.data.end(), batch.data.begin());
  Tape t;
  Tensor scores = seg_forward(t, mm, t.leaf(std::move(batch), false), eval_binder(t)).val();

  int k = m.config.out_channels();
  size_t plane = static_cast<size_t>(s) * s;
  LabelMask out;
  out.h = s;
  out.w = s;
  out.labels.assign(plane, 0);
  out.confidence.assign(plane, 0.0);
  for (size_t p = 0; p < plane; ++p) {
    int best = 0;
    double bv = scores.data[p];
    for (int ci = 1; ci < k; ++ci) {
      double v = scores.data[static_cast<size_t>(ci) * plane + p];
      if (v > bv) {
        bv = v;
        best = ci;
      }
    }
    out.labels[p] = best;
    out.confidence[p] = sigmoid_scalar(bv);
  }
  return out;
}

std::vector<SegTrainSample> load_seg_data(const Dataset& ds, const std::string& split, const std::string& mask_dir,
                                          bool oracle_masks) {
  std::vector<SegTrainSample> out;
  for (const auto& id : ds.split(split)) {
    LabelMask mask;
    if (oracle_masks) {
      mask = ds.load_gt_mask(id);
    } else {
      fs::path mp = fs::path(mask_dir) / (id + ".pgm");
      if (!fs::exists(mp))
        throw std::invalid_argument("train_stage2: missing pseudo-mask for sample " + id + " under " + mask_dir);
      mask = read_pgm(mp.string());
    }
    for (int v : mask.labels)
      if (v < 0 || v > ds.manifest().num_classes)
        throw std::invalid_argument("train_stage2: mask label out of range for sample " + id);
    out.push_back(SegTrainSample{id, ds.load_image(id), std::move(mask)});
  }
  return out;
}

TrainStats train_stage2(SegModel& model, const std::vector<SegTrainSample>& data, const TrainConfig& cfg,
                        const std::string& out_dir, bool quiet) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_stage2: empty dataset");
  int s = model.config.image_size;

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "train_log.jsonl", std::ios::trunc);
  if (!log) throw std::runtime_error("train_stage2: cannot open training log in " + out_dir);

  Rng rng(cfg.seed);
  int n = static_cast<int>(data.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  TrainStats stats;
  long long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_total = 0.0;
    int epoch_steps = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      int b = std::min(cfg.batch_size, n - start);
      Tensor images = Tensor::zeros({b, 3, s, s});
      std::vector<int> labels(static_cast<size_t>(b) * s * s);
      for (int i = 0; i < b; ++i) {
        const SegTrainSample& ts = data[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
        SampleRecord rec{ts.id, ts.image, {}, ts.mask};
        SampleRecord aug = augment(rec, cfg.augment_flip, cfg.augment_rotation, rng);
        std::copy(aug.image.data.begin(), aug.image.data.end(),
                  images.data.begin() + static_cast<size_t>(i) * 3 * s * s);
        std::copy(aug.gt_mask->labels.begin(), aug.gt_mask->labels.end(),
                  labels.begin() + static_cast<size_t>(i) * s * s);
      }

      Tape tape;
      Var x = tape.leaf(std::move(images), false);
      Var scores = seg_forward(tape, model, x, train_binder(tape));
      Var loss = tape.pixel_bce(scores, labels);

      model.for_each_param([](ParamBlock& p) { p.zero_grad(); });
      tape.backward(loss);
      ++step;
      model.for_each_param([&cfg, step](ParamBlock& p) { adam_step(p, cfg, step); });

      double lv = loss.val().data[0];
      log << "{\"step\":" << step << ",\"epoch\":" << epoch << ",\"pixel_bce\":" << lv << "}\n";
      epoch_total += lv;
      epoch_steps++;
    }
    save_seg_model((fs::path(out_dir) / ("ckpt-epoch" + std::to_string(epoch) + ".bin")).string(), model);
    stats.epoch_avg_total.push_back(epoch_total / epoch_steps);
    if (!quiet)
      std::cerr << "[train-seg] epoch " << epoch << "/" << cfg.epochs << " avg_loss=" << epoch_total / epoch_steps
                << "\n";
  }
  stats.steps = step;
  return stats;
}

void save_seg_model(const std::string& path, const SegModel& m) {
  SegModel& mm = const_cast<SegModel&>(m);
  std::vector<CheckpointEntry> entries;
  mm.for_each_param([&entries](ParamBlock& p) {
    entries.push_back(CheckpointEntry{p.name, p.value.shape, p.value.data});
  });
  nlohmann::json meta;
  meta["kind"] = "seg";
  meta["seg_config"] = nlohmann::json::parse(m.config.to_json());
  save_checkpoint(path, meta.dump(), entries);
}

SegModel load_seg_model(const std::string& path) {
  std::vector<CheckpointEntry> entries;
  nlohmann::json meta = nlohmann::json::parse(load_checkpoint(path, entries));
  if (meta.value("kind", "") != "seg") throw std::runtime_error("checkpoint: not a stage-2 model: " + path);
  SegConfig cfg = SegConfig::from_json(meta.at("seg_config").dump());
  Rng scratch(0);
  SegModel m = SegModel::init(cfg, scratch);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  m.for_each_param([&by_name, &path](ParamBlock& p) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing tensor " + p.name + " in " + path);
    if (it->second->shape != p.value.shape) throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.value.data = it->second->data;
  });
  return m;
}

int predict_split(const SegModel& m, const Dataset& ds, const std::string& split, const std::string& out_dir) {
  fs::create_directories(out_dir);
  int done = 0;
  for (const auto& id : ds.split(split)) {
    LabelMask mask = predict_mask(m, ds.load_image(id));
    write_pgm((fs::path(out_dir) / (id + ".pgm")).string(), mask);
    ++done;
  }
  return done;
}

}  // namespace wsseg
