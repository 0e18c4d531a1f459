#include "wsseg/dataspace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace wsseg {

// ---- manifest ----

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["version"] = version;
  j["num_classes"] = num_classes;
  j["class_names"] = class_names;
  j["image_size"] = image_size;
  j["seed"] = seed;
  j["splits"] = splits;
  j["labels"] = labels;
  return j.dump(2);
}

DatasetManifest DatasetManifest::from_json(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s);
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  if (m.version != 1) throw std::runtime_error("manifest: unsupported version");
  m.num_classes = j.at("num_classes").get<int>();
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  m.image_size = j.at("image_size").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  m.splits = j.at("splits").get<std::map<std::string, std::vector<std::string>>>();
  m.labels = j.at("labels").get<std::map<std::string, std::vector<int>>>();
  return m;
}

void GenConfig::validate() const {
  if (n_train < 1 || n_val < 1 || n_test < 1)
    throw std::invalid_argument("gen config: split sizes must be >= 1");
  if (num_classes < 1 || num_classes > 4)
    throw std::invalid_argument("gen config: num-classes must be in [1,4] (shape kinds available)");
  if (image_size < 32 || image_size % 8 != 0)
    throw std::invalid_argument("gen config: image-size must be a multiple of 8 and >= 32");
}

// ---- ppm / pgm ----

static uint8_t quant8(double v) {
  double q = std::round(v * 255.0);
  if (q < 0.0) q = 0.0;
  if (q > 255.0) q = 255.0;
  return static_cast<uint8_t>(q);
}

void write_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.shape[0] != 3) throw std::invalid_argument("write_ppm: image must be [3,H,W]");
  int h = img.shape[1], w = img.shape[2];
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<size_t>(x) * 3 + c] = quant8(img.data[(static_cast<size_t>(c) * h + y) * w + x]);
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("write_ppm: write failed " + path);
}

static void read_pnm_header(std::ifstream& f, const std::string& path, const char* magic, int& w, int& h) {
  std::string tk;
  auto next_token = [&]() -> std::string {
    std::string t;
    int ch;
    while ((ch = f.get()) != EOF) {
      if (ch == '#') {
        while ((ch = f.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(ch));
    }
    return t;
  };
  if (next_token() != magic) throw std::runtime_error(path + ": not a " + magic + " file");
  w = std::stoi(next_token());
  h = std::stoi(next_token());
  int maxval = std::stoi(next_token());
  if (w < 1 || h < 1 || maxval != 255) throw std::runtime_error(path + ": unsupported PNM header");
}

Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  int w = 0, h = 0;
  read_pnm_header(f, path, "P6", w, h);
  std::vector<uint8_t> raw(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw std::runtime_error("read_ppm: truncated " + path);
  Tensor img = Tensor::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.data[(static_cast<size_t>(c) * h + y) * w + x] =
            raw[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
  return img;
}

void write_pgm(const std::string& path, const LabelMask& mask) {
  if (mask.h < 1 || mask.w < 1 || mask.labels.size() != static_cast<size_t>(mask.h) * mask.w)
    throw std::invalid_argument("write_pgm: malformed mask");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  std::vector<uint8_t> buf(mask.labels.size());
  for (size_t i = 0; i < buf.size(); ++i) {
    int v = mask.labels[i];
    if (v < 0 || v > 255) throw std::invalid_argument("write_pgm: label out of byte range");
    buf[i] = static_cast<uint8_t>(v);
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("write_pgm: write failed " + path);
}

LabelMask read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pgm: cannot open " + path);
  int w = 0, h = 0;
  read_pnm_header(f, path, "P5", w, h);
  std::vector<uint8_t> raw(static_cast<size_t>(w) * h);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw std::runtime_error("read_pgm: truncated " + path);
  LabelMask m;
  m.h = h;
  m.w = w;
  m.labels.assign(raw.begin(), raw.end());
  return m;
}

// ---- generator ----

namespace {

const char* kClassNames[4] = {"circle", "square", "triangle", "cross"};

bool in_shape(int cls, double x, double y, double cx, double cy, double r) {
  double dx = x - cx, dy = y - cy;
  switch (cls) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::fabs(dx) <= 0.82 * r && std::fabs(dy) <= 0.82 * r;
    case 2: {  // triangle, apex up
      if (dy < -r || dy > r) return false;
      double half = (dy + r) / (2.0 * r) * r;
      return std::fabs(dx) <= half;
    }
    case 3:  // cross
      return (std::fabs(dx) <= 0.34 * r && std::fabs(dy) <= r) || (std::fabs(dy) <= 0.34 * r && std::fabs(dx) <= r);
    default:
      return false;
  }
}

struct PlacedShape {
  int cls = 0;
  double cx = 0, cy = 0, r = 0;
  double color[3] = {0, 0, 0};
};

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  h = h - std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

// Each class draws its fill from a characteristic hue band, the way natural
// object classes correlate with color statistics; location, size, exact hue,
// saturation and brightness stay random per sample.
constexpr double kClassHue[4] = {0.00, 0.33, 0.62, 0.14};  // red, green, blue, yellow

void sample_fill_color(int cls, Rng& rng, double* rgb) {
  double h = kClassHue[cls] + rng.uniform(-0.05, 0.05);
  double s = rng.uniform(0.55, 0.95);
  double v = rng.uniform(0.45, 0.95);
  hsv_to_rgb(h, s, v, rgb);
}

// one full sample; returns false if shapes could not be placed
bool draw_sample(const GenConfig& cfg, Rng& rng, Tensor& img, LabelMask& mask, std::vector<int>& label_vec) {
  int s = cfg.image_size;
  int c_count = cfg.num_classes;

  // pick 1..3 distinct classes
  int k = 1 + rng.uniform_int(std::min(3, c_count));
  std::vector<int> classes(static_cast<size_t>(c_count));
  for (int i = 0; i < c_count; ++i) classes[static_cast<size_t>(i)] = i;
  rng.shuffle(classes);
  classes.resize(static_cast<size_t>(k));

  // low-saturation background so class hues stay informative
  double base[3];
  hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.22), rng.uniform(0.25, 0.8), base);
  double amp = rng.uniform(0.03, 0.10);
  double fx = rng.uniform(0.5, 2.5), fy = rng.uniform(0.5, 2.5), phase = rng.uniform(0.0, 2.0 * M_PI);

  std::vector<PlacedShape> placed;
  for (int cls : classes) {
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      PlacedShape sh;
      sh.cls = cls;
      sh.r = rng.uniform(0.14, 0.23) * s;
      sh.cx = rng.uniform(sh.r + 1.0, s - sh.r - 2.0);
      sh.cy = rng.uniform(sh.r + 1.0, s - sh.r - 2.0);
      // fill color kept visibly apart from the background base
      for (int t = 0; t < 50; ++t) {
        double d2 = 0.0;
        for (int c = 0; c < 3; ++c) {
          sh.color[c] = rng.uniform(0.05, 0.95);
          double d = sh.color[c] - base[c];
          d2 += d * d;
        }
        if (d2 >= 0.09) break;
      }
      bool overlap = false;
      for (const auto& other : placed) {
        double dx = sh.cx - other.cx, dy = sh.cy - other.cy;
        double min_d = sh.r + other.r + 2.0;
        if (dx * dx + dy * dy < min_d * min_d) {
          overlap = true;
          break;
        }
      }
      if (!overlap) {
        placed.push_back(sh);
        ok = true;
      }
    }
    if (!ok) return false;
  }

  img = Tensor::zeros({3, s, s});
  mask.h = s;
  mask.w = s;
  mask.labels.assign(static_cast<size_t>(s) * s, 0);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double tex = amp * std::sin(2.0 * M_PI * (fx * x / s + fy * y / s) + phase);
      int owner = -1;
      for (size_t si = 0; si < placed.size(); ++si)
        if (in_shape(placed[si].cls, x, y, placed[si].cx, placed[si].cy, placed[si].r)) {
          owner = static_cast<int>(si);
          break;
        }
      for (int c = 0; c < 3; ++c) {
        double v = owner < 0 ? base[c] + tex : placed[static_cast<size_t>(owner)].color[c];
        v += rng.uniform(-0.03, 0.03);
        img.data[(static_cast<size_t>(c) * s + y) * s + x] = std::clamp(v, 0.0, 1.0);
      }
      if (owner >= 0) mask.labels[static_cast<size_t>(y) * s + x] = placed[static_cast<size_t>(owner)].cls + 1;
    }

  label_vec.assign(static_cast<size_t>(c_count), 0);
  for (int cls : classes) label_vec[static_cast<size_t>(cls)] = 1;
  return true;
}

}  // namespace

DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "masks_gt");

  DatasetManifest man;
  man.num_classes = cfg.num_classes;
  for (int i = 0; i < cfg.num_classes; ++i) man.class_names.push_back(kClassNames[i]);
  man.image_size = cfg.image_size;
  man.seed = cfg.seed;

  Rng rng(cfg.seed);
  const struct {
    const char* name;
    int n;
  } splits[3] = {{"train", cfg.n_train}, {"val", cfg.n_val}, {"test", cfg.n_test}};

  int serial = 0;
  for (const auto& sp : splits) {
    std::vector<std::string> ids;
    for (int i = 0; i < sp.n; ++i) {
      char buf[32];
      snprintf(buf, sizeof(buf), "img-%05d", serial++);
      std::string id(buf);

      Tensor img;
      LabelMask mask;
      std::vector<int> labels;
      while (!draw_sample(cfg, rng, img, mask, labels)) {
      }
      write_ppm((fs::path(out_dir) / "images" / (id + ".ppm")).string(), img);
      write_pgm((fs::path(out_dir) / "masks_gt" / (id + ".pgm")).string(), mask);
      man.labels[id] = labels;
      ids.push_back(id);
    }
    man.splits[sp.name] = ids;
  }

  std::ofstream f(fs::path(out_dir) / "manifest.json", std::ios::trunc);
  if (!f) throw std::runtime_error("generate_dataset: cannot write manifest in " + out_dir);
  f << man.to_json() << "\n";
  return man;
}

// ---- dataset access ----

Dataset Dataset::open(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  if (!f) throw std::invalid_argument("dataset: no manifest.json under " + dir);
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Dataset ds;
  ds.dir_ = dir;
  ds.man_ = DatasetManifest::from_json(all);
  return ds;
}

const std::vector<std::string>& Dataset::split(const std::string& name) const {
  auto it = man_.splits.find(name);
  if (it == man_.splits.end()) throw std::invalid_argument("dataset: no split named " + name);
  return it->second;
}

std::string Dataset::image_path(const std::string& id) const {
  return (fs::path(dir_) / "images" / (id + ".ppm")).string();
}

std::string Dataset::gt_mask_path(const std::string& id) const {
  return (fs::path(dir_) / "masks_gt" / (id + ".pgm")).string();
}

Tensor Dataset::load_image(const std::string& id) const { return read_ppm(image_path(id)); }

LabelMask Dataset::load_gt_mask(const std::string& id) const { return read_pgm(gt_mask_path(id)); }

std::vector<double> Dataset::labels(const std::string& id) const {
  auto it = man_.labels.find(id);
  if (it == man_.labels.end()) throw std::invalid_argument("dataset: no labels for id " + id);
  std::vector<double> y(it->second.begin(), it->second.end());
  return y;
}

StageOneData StageOneData::load(const Dataset& ds, const std::string& split) {
  StageOneData d;
  d.num_classes_ = ds.manifest().num_classes;
  d.image_size_ = ds.manifest().image_size;
  for (const auto& id : ds.split(split))
    d.samples_.push_back(TrainSample{id, ds.load_image(id), ds.labels(id)});
  return d;
}

// ---- metrics ----

namespace {

struct IouAccum {
  std::vector<long long> inter, pred, gt;
  explicit IouAccum(int k) : inter(static_cast<size_t>(k), 0), pred(static_cast<size_t>(k), 0), gt(static_cast<size_t>(k), 0) {}

  void add(const LabelMask& p, const LabelMask& g) {
    if (p.h != g.h || p.w != g.w)
      throw std::invalid_argument("miou: shape mismatch between prediction and ground truth");
    int k = static_cast<int>(inter.size());
    for (size_t i = 0; i < p.labels.size(); ++i) {
      int pv = p.labels[i], gv = g.labels[i];
      if (pv < 0 || pv >= k || gv < 0 || gv >= k) throw std::invalid_argument("miou: label out of range");
      pred[static_cast<size_t>(pv)]++;
      gt[static_cast<size_t>(gv)]++;
      if (pv == gv) inter[static_cast<size_t>(pv)]++;
    }
  }

  IouResult result() const {
    IouResult r;
    double sum = 0.0;
    int n = 0;
    for (size_t c = 0; c < inter.size(); ++c) {
      long long uni = pred[c] + gt[c] - inter[c];
      if (uni == 0) {
        r.per_class.push_back(std::nan(""));
        continue;
      }
      double iou = static_cast<double>(inter[c]) / static_cast<double>(uni);
      r.per_class.push_back(iou);
      sum += iou;
      n++;
    }
    r.mean = n > 0 ? sum / n : 0.0;
    return r;
  }
};

}  // namespace

IouResult miou(const LabelMask& pred, const LabelMask& gt, int num_classes) {
  IouAccum acc(num_classes + 1);
  acc.add(pred, gt);
  return acc.result();
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  nlohmann::json arr = nlohmann::json::array();
  for (double v : per_class_iou) {
    if (std::isnan(v))
      arr.push_back(nullptr);
    else
      arr.push_back(v);
  }
  j["per_class_iou"] = arr;
  j["miou"] = miou_value;
  j["n_images"] = n_images;
  return j.dump();
}

EvalReport evaluate_masks(const std::string& mask_dir, const Dataset& ds, const std::string& split) {
  const auto& ids = ds.split(split);
  IouAccum acc(ds.manifest().num_classes + 1);
  for (const auto& id : ids) {
    fs::path mp = fs::path(mask_dir) / (id + ".pgm");
    if (!fs::exists(mp)) throw std::invalid_argument("evaluate_masks: missing mask for " + id + " in " + mask_dir);
    LabelMask pred = read_pgm(mp.string());
    LabelMask gt = ds.load_gt_mask(id);
    acc.add(pred, gt);
  }
  IouResult r = acc.result();
  EvalReport rep;
  rep.per_class_iou = r.per_class;
  rep.miou_value = r.mean;
  rep.n_images = static_cast<int>(ids.size());
  return rep;
}

}  // namespace wsseg
