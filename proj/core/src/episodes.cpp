#include "dcama/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "dcama/dtc.hpp"

namespace dcama {

namespace {

using json = nlohmann::ordered_json;

constexpr double kPi = 3.14159265358979323846;

struct ClassStyle {
  float r, g, b;        // base foreground color
  double grating_freq;  // cycles per pixel
  double grating_dir;
  int family;           // 0 ellipse, 1 rectangle, 2 triangle
};

void hsv_to_rgb(double h, double s, double v, float& r, float& g, float& b) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double rr = 0, gg = 0, bb = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: rr = c; gg = x; break;
    case 1: rr = x; gg = c; break;
    case 2: gg = c; bb = x; break;
    case 3: gg = x; bb = c; break;
    case 4: rr = x; bb = c; break;
    default: rr = c; bb = x; break;
  }
  const double m = v - c;
  r = static_cast<float>(rr + m);
  g = static_cast<float>(gg + m);
  b = static_cast<float>(bb + m);
}

struct Pose {
  double cx, cy, rx, ry, rot, phase;
};

bool inside_shape(int family, const Pose& p, double x, double y) {
  const double dx = x - p.cx, dy = y - p.cy;
  const double u = dx * std::cos(p.rot) + dy * std::sin(p.rot);
  const double v = -dx * std::sin(p.rot) + dy * std::cos(p.rot);
  switch (family) {
    case 0:
      return (u * u) / (p.rx * p.rx) + (v * v) / (p.ry * p.ry) <= 1.0;
    case 1:
      return std::abs(u) <= p.rx && std::abs(v) <= p.ry;
    default:
      // isoceles triangle, apex up in the rotated frame
      return v >= -p.ry && v <= p.ry && std::abs(u) <= p.rx * (v + p.ry) / (2.0 * p.ry);
  }
}

SamplePair render_sample(const ClassStyle& style, const Pose& pose, int h, int w, Rng& rng) {
  SamplePair s;
  s.image = Tensor({h, w, 3});
  s.mask = Tensor({h, w, 1});
  // shared background family: dark desaturated gradient plus speckle; kept
  // well separated from the bright foreground palettes
  const double g0 = 0.15 + 0.15 * rng.uniform();
  const double gx = rng.uniform(-0.08, 0.08) / w;
  const double gy = rng.uniform(-0.08, 0.08) / h;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const bool fg = inside_shape(style.family, pose, x, y);
      s.mask.at(y, x, 0) = fg ? 1.0f : 0.0f;
      float r, g, b;
      if (fg) {
        const double carrier =
            std::sin(2.0 * kPi * style.grating_freq *
                         (x * std::cos(style.grating_dir) + y * std::sin(style.grating_dir)) +
                     pose.phase);
        const double gain = 0.82 + 0.18 * carrier;
        r = static_cast<float>(style.r * gain);
        g = static_cast<float>(style.g * gain);
        b = static_cast<float>(style.b * gain);
      } else {
        const double base = g0 + gx * x + gy * y;
        r = g = b = static_cast<float>(base);
      }
      for (int c = 0; c < 3; ++c) {
        float v = (c == 0 ? r : c == 1 ? g : b) + static_cast<float>(rng.uniform(-0.02, 0.02));
        s.image.at(y, x, c) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return s;
}

double foreground_fraction(const Tensor& mask) {
  std::int64_t fg = 0;
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    if (mask[i] > 0.5f) ++fg;
  return static_cast<double>(fg) / static_cast<double>(mask.numel());
}

}  // namespace

ToyDataset generate_toy_dataset(const ToyDatasetConfig& cfg, std::uint64_t seed) {
  if (cfg.num_classes < 2) throw DimensionError("toy dataset needs at least 2 classes");
  if (cfg.images_per_class < 6) throw DimensionError("toy dataset needs >= 6 images per class");
  if (cfg.height < 32 || cfg.width < 32)
    throw DimensionError("toy dataset image size too small for the shape generator");

  ToyDataset ds;
  ds.cfg = cfg;
  ds.seed = seed;
  Rng rng(derive_seed(seed, "toy-dataset"));

  const int minside = std::min(cfg.height, cfg.width);
  for (int c = 0; c < cfg.num_classes; ++c) {
    ClassStyle style;
    style.family = c % 3;
    // golden-ratio hue shuffle: consecutive class ids land far apart on the
    // wheel, so contiguous fold splits see the full palette on both sides
    const double hue = std::fmod(c * 0.61803398875 + 0.05 * rng.uniform(), 1.0);
    hsv_to_rgb(hue, 0.7, 0.85 + 0.1 * rng.uniform(), style.r, style.g, style.b);
    style.grating_freq = rng.uniform(0.05, 0.15);
    style.grating_dir = rng.uniform(0.0, kPi);

    std::vector<SamplePair> samples;
    for (int i = 0; i < cfg.images_per_class; ++i) {
      SamplePair sample;
      bool ok = false;
      for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        Pose pose;
        pose.cx = cfg.width * rng.uniform(0.32, 0.68);
        pose.cy = cfg.height * rng.uniform(0.32, 0.68);
        pose.rx = minside * rng.uniform(0.18, 0.32);
        pose.ry = minside * rng.uniform(0.18, 0.32);
        pose.rot = rng.uniform(0.0, kPi);
        pose.phase = rng.uniform(0.0, 2.0 * kPi);
        sample = render_sample(style, pose, cfg.height, cfg.width, rng);
        const double frac = foreground_fraction(sample.mask);
        ok = frac >= 0.05 && frac <= 0.8;
      }
      if (!ok) throw NumericError("toy dataset generator failed to satisfy mask constraints");
      samples.push_back(std::move(sample));
    }
    ds.by_class.push_back(std::move(samples));
  }
  return ds;
}

std::vector<FoldSplit> make_folds(std::vector<int> class_ids, int k) {
  if (k < 1) throw DimensionError("make_folds: k must be >= 1");
  if (class_ids.empty() || static_cast<int>(class_ids.size()) % k != 0)
    throw DimensionError("make_folds: " + std::to_string(class_ids.size()) +
                         " classes are not divisible into " + std::to_string(k) + " folds");
  std::sort(class_ids.begin(), class_ids.end());
  const int per_fold = static_cast<int>(class_ids.size()) / k;
  std::vector<FoldSplit> folds;
  for (int j = 0; j < k; ++j) {
    FoldSplit f;
    f.fold_index = j;
    for (int i = 0; i < static_cast<int>(class_ids.size()); ++i) {
      if (i / per_fold == j)
        f.test_classes.push_back(class_ids[static_cast<std::size_t>(i)]);
      else
        f.train_classes.push_back(class_ids[static_cast<std::size_t>(i)]);
    }
    folds.push_back(std::move(f));
  }
  return folds;
}

EpisodeSpec sample_episode_spec(const ToyDataset& ds, const FoldSplit& fold, int shots, Rng& rng,
                                bool from_test) {
  if (shots < 1) throw DimensionError("sample_episode: shots must be >= 1");
  const auto& classes = from_test ? fold.test_classes : fold.train_classes;
  if (classes.empty()) throw DimensionError("sample_episode: fold has no classes on this side");
  const int cls = classes[static_cast<std::size_t>(rng.index(classes.size()))];
  if (cls < 0 || cls >= ds.num_classes())
    throw DimensionError("sample_episode: class " + std::to_string(cls) + " not in dataset");
  const auto& pool = ds.by_class[static_cast<std::size_t>(cls)];
  if (static_cast<int>(pool.size()) < shots + 1)
    throw DimensionError("sample_episode: class " + std::to_string(cls) + " has " +
                         std::to_string(pool.size()) + " images, needs " +
                         std::to_string(shots + 1));
  std::vector<int> picks = rng.sample_without_replacement(static_cast<int>(pool.size()), shots + 1);
  EpisodeSpec spec;
  spec.class_id = cls;
  spec.query_index = picks[0];
  spec.support_indices.assign(picks.begin() + 1, picks.end());
  return spec;
}

Episode materialize_episode(const ToyDataset& ds, const EpisodeSpec& spec) {
  const auto& pool = ds.by_class.at(static_cast<std::size_t>(spec.class_id));
  Episode e;
  e.class_id = spec.class_id;
  e.query_index = spec.query_index;
  e.query = pool.at(static_cast<std::size_t>(spec.query_index));
  e.support_indices = spec.support_indices;
  for (int idx : spec.support_indices) e.support.push_back(pool.at(static_cast<std::size_t>(idx)));
  return e;
}

Episode sample_episode(const ToyDataset& ds, const FoldSplit& fold, int shots, Rng& rng,
                       bool from_test) {
  return materialize_episode(ds, sample_episode_spec(ds, fold, shots, rng, from_test));
}

void save_dataset(const std::filesystem::path& dir, const ToyDataset& ds) {
  std::filesystem::create_directories(dir);
  json m;
  m["version"] = 1;
  m["seed"] = ds.seed;
  m["num_classes"] = ds.cfg.num_classes;
  m["images_per_class"] = ds.cfg.images_per_class;
  m["height"] = ds.cfg.height;
  m["width"] = ds.cfg.width;
  json entries = json::array();
  char name[64];
  for (int c = 0; c < ds.num_classes(); ++c) {
    for (int i = 0; i < static_cast<int>(ds.by_class[static_cast<std::size_t>(c)].size()); ++i) {
      std::snprintf(name, sizeof(name), "c%02d_i%02d", c, i);
      const std::string stem = name;
      save_dtc(dir / (stem + "_img.dtc"), ds.by_class[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)].image);
      save_dtc(dir / (stem + "_mask.dtc"), ds.by_class[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)].mask);
      json e;
      e["class"] = c;
      e["index"] = i;
      e["image"] = stem + "_img.dtc";
      e["mask"] = stem + "_mask.dtc";
      entries.push_back(e);
    }
  }
  m["entries"] = entries;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write dataset manifest in " + dir.string());
  out << m.dump(2) << "\n";
}

ToyDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing dataset manifest in " + dir.string());
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw IoError("malformed dataset manifest: " + std::string(e.what()));
  }
  if (!m.contains("version") || m["version"].get<int>() != 1)
    throw IoError("dataset manifest version mismatch in " + dir.string() +
                  " (expected version 1)");
  ToyDataset ds;
  ds.seed = m["seed"].get<std::uint64_t>();
  ds.cfg.num_classes = m["num_classes"].get<int>();
  ds.cfg.images_per_class = m["images_per_class"].get<int>();
  ds.cfg.height = m["height"].get<int>();
  ds.cfg.width = m["width"].get<int>();
  ds.by_class.assign(static_cast<std::size_t>(ds.cfg.num_classes), {});
  for (const auto& e : m["entries"]) {
    const int c = e["class"].get<int>();
    if (c < 0 || c >= ds.cfg.num_classes) throw IoError("dataset entry with out-of-range class");
    SamplePair s;
    s.image = load_dtc_f32(dir / e["image"].get<std::string>());
    s.mask = load_dtc_f32(dir / e["mask"].get<std::string>());
    if (s.mask.rank() != 3 || s.mask.dim(2) != 1 || s.image.rank() != 3)
      throw IoError("dataset entry " + e["image"].get<std::string>() + " has unexpected shape");
    ds.by_class[static_cast<std::size_t>(c)].push_back(std::move(s));
  }
  for (int c = 0; c < ds.cfg.num_classes; ++c)
    if (static_cast<int>(ds.by_class[static_cast<std::size_t>(c)].size()) !=
        ds.cfg.images_per_class)
      throw IoError("dataset class " + std::to_string(c) + " has wrong image count");
  return ds;
}

}  // namespace dcama
