#include "dcama/backbone.hpp"

#include <fstream>

#include <json.hpp>

#include "dcama/dtc.hpp"
#include "dcama/rng.hpp"
#include "dcama/tensor_ops.hpp"

namespace dcama {

namespace {

using json = nlohmann::ordered_json;

Tensor seeded_conv_weight(int kh, int kw, int cin, int cout, Rng& rng) {
  Tensor w({kh, kw, cin, cout});
  const double limit = std::sqrt(6.0 / (kh * kw * cin));
  for (std::int64_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<float>(rng.uniform(-limit, limit));
  return w;
}

}  // namespace

void BackboneConfig::validate() const {
  for (int den : {4, 8, 16, 32}) {
    if (!channels.count(den) || channels.at(den) < 1)
      throw DimensionError("backbone config: missing channel width for scale " + scale_name(den));
    if (!layers.count(den) || layers.at(den) < 1)
      throw DimensionError("backbone config: missing layer count for scale " + scale_name(den));
    if (channels.at(den) % 2 != 0)
      throw DimensionError("backbone config: channel width at " + scale_name(den) +
                           " must be even for positional encoding");
  }
}

std::map<int, std::pair<int, int>> feature_shapes(int h, int w) {
  std::map<int, std::pair<int, int>> out;
  auto half = [](int v) { return (v + 1) / 2; };
  int ch = half(h), cw = half(w);  // 1/2 stage
  for (int den : {4, 8, 16, 32}) {
    ch = half(ch);
    cw = half(cw);
    out[den] = {ch, cw};
  }
  return out;
}

MultiScaleFeatures extract_features(const Tensor& image, const BackboneConfig& cfg) {
  cfg.validate();
  if (image.rank() != 3 || image.dim(2) != 3)
    throw DimensionError("extract_features: expected [H,W,3] image, got " +
                         shape_str(image.shape()));
  const int h = image.dim(0), w = image.dim(1);
  if (h % 16 != 0 || w % 16 != 0)
    throw DimensionError("extract_features: input size " + std::to_string(h) + "x" +
                         std::to_string(w) + " not divisible by 16");

  Rng rng(derive_seed(cfg.seed, "backbone-stub"));
  const int stem_c = std::max(2, cfg.channels.at(4) / 2);

  // 1/2 stem, then one stride-2 stage per scale with L_i-1 stride-1 layers
  Tensor zero_bias({stem_c});
  Tensor x = relu(conv2d(image, seeded_conv_weight(3, 3, 3, stem_c, rng), zero_bias, 2, 1));

  MultiScaleFeatures out;
  int prev_c = stem_c;
  for (int den : {4, 8, 16, 32}) {
    const int c = cfg.channels.at(den);
    Tensor bias({c});
    x = relu(conv2d(x, seeded_conv_weight(3, 3, prev_c, c, rng), bias, 2, 1));
    out[den].push_back(scale(x, cfg.feature_gain));
    for (int l = 1; l < cfg.layers.at(den); ++l) {
      x = relu(conv2d(x, seeded_conv_weight(3, 3, c, c, rng), bias, 1, 1));
      out[den].push_back(scale(x, cfg.feature_gain));
    }
    prev_c = c;
  }
  return out;
}

void export_features(const std::filesystem::path& manifest_path, const MultiScaleFeatures& f,
                     const std::string& image_id) {
  const auto dir = manifest_path.parent_path();
  json m;
  m["version"] = 1;
  m["image_id"] = image_id;
  json scales = json::object();
  for (const auto& [den, layers] : f) {
    json files = json::array();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string name =
          image_id + "_s" + std::to_string(den) + "_l" + std::to_string(l) + ".dtc";
      save_dtc(dir / name, layers[l]);
      files.push_back(name);
    }
    scales[scale_name(den)] = files;
  }
  m["scales"] = scales;
  std::ofstream out(manifest_path);
  if (!out) throw IoError("cannot write feature manifest " + manifest_path.string());
  out << m.dump(2) << "\n";
}

MultiScaleFeatures import_features(const std::filesystem::path& manifest_path,
                                   std::string* image_id) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("missing feature manifest " + manifest_path.string());
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw IoError("malformed feature manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!m.contains("scales")) throw IoError("feature manifest lacks \"scales\"");
  if (image_id && m.contains("image_id")) *image_id = m["image_id"].get<std::string>();

  const auto dir = manifest_path.parent_path();
  MultiScaleFeatures out;
  for (const auto& [key, files] : m["scales"].items()) {
    const int den = parse_scale(key);
    for (const auto& fname : files) {
      Tensor t = load_dtc_f32(dir / fname.get<std::string>());
      if (t.rank() != 3)
        throw IoError("feature file " + fname.get<std::string>() + " is not a [h,w,c] map");
      auto& layers = out[den];
      if (!layers.empty() && !layers.front().same_shape(t))
        throw IoError("inconsistent feature shapes at scale " + key + ": " +
                      shape_str(layers.front().shape()) + " vs " + shape_str(t.shape()));
      layers.push_back(std::move(t));
    }
  }
  return out;
}

void validate_features(const MultiScaleFeatures& f, const BackboneConfig& cfg, int input_h,
                       int input_w) {
  const auto expect = feature_shapes(input_h, input_w);
  for (int den : {4, 8, 16, 32}) {
    auto it = f.find(den);
    if (it == f.end() || it->second.empty())
      throw IoError("features missing scale " + scale_name(den));
    const auto& layers = it->second;
    if (static_cast<int>(layers.size()) != cfg.layers.at(den))
      throw IoError("scale " + scale_name(den) + " has " + std::to_string(layers.size()) +
                    " layers, config expects " + std::to_string(cfg.layers.at(den)));
    for (const auto& t : layers) {
      if (t.dim(2) != cfg.channels.at(den))
        throw IoError("scale " + scale_name(den) + " has " + std::to_string(t.dim(2)) +
                      " channels, config expects " + std::to_string(cfg.channels.at(den)));
      if (t.dim(0) != expect.at(den).first || t.dim(1) != expect.at(den).second)
        throw IoError("scale " + scale_name(den) + " spatial size " + shape_str(t.shape()) +
                      " does not match input " + std::to_string(input_h) + "x" +
                      std::to_string(input_w));
    }
  }
}

}  // namespace dcama
