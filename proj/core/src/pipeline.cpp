#include "dcama/pipeline.hpp"

#include <algorithm>
#include <array>
#include <fstream>

#include <json.hpp>

#include "dcama/dtc.hpp"

namespace dcama {

namespace {
using json = nlohmann::ordered_json;
}

void ModelConfig::validate() const {
  backbone.validate();
  if (input_h % 16 != 0 || input_w % 16 != 0)
    throw DimensionError("model config: input size must be divisible by 16");
  if (attended_scales.empty()) throw DimensionError("model config: no attended scales");
  for (int den : attended_scales) {
    if (den == 4)
      throw DimensionError("model config: the 1/4 scale is not cross-attended");
    if (den != 8 && den != 16 && den != 32)
      throw DimensionError("model config: unknown attended scale " + scale_name(den));
  }
  if (!std::is_sorted(attended_scales.begin(), attended_scales.end()))
    throw DimensionError("model config: attended scales must be sorted ascending");
  for (int den : skip_scales)
    if (den != 4 && den != 8 && den != 16)
      throw DimensionError("model config: unsupported skip scale " + scale_name(den));
  if (head_count < 1 || d_model % head_count != 0)
    throw DimensionError("model config: d_model must be divisible by head_count");
  if (fusion_widths.empty()) throw DimensionError("model config: empty fusion width schedule");
  if (mixer_widths.size() != 3 || mixer_widths.back() != 2)
    throw DimensionError("model config: mixer schedule must have 3 blocks ending at 2 channels");
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return model_config_to_json(a) == model_config_to_json(b);
}

std::string model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["input_h"] = cfg.input_h;
  j["input_w"] = cfg.input_w;
  j["attended_scales"] = cfg.attended_scales;
  j["skip_scales"] = cfg.skip_scales;
  j["d_model"] = cfg.d_model;
  j["head_count"] = cfg.head_count;
  j["fusion_widths"] = cfg.fusion_widths;
  j["mixer_widths"] = cfg.mixer_widths;
  json bb;
  bb["seed"] = cfg.backbone.seed;
  bb["feature_gain"] = cfg.backbone.feature_gain;
  json ch = json::object(), ly = json::object();
  for (const auto& [den, c] : cfg.backbone.channels) ch[scale_name(den)] = c;
  for (const auto& [den, l] : cfg.backbone.layers) ly[scale_name(den)] = l;
  bb["channels"] = ch;
  bb["layers"] = ly;
  j["backbone"] = bb;
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed model config: ") + e.what());
  }
  ModelConfig cfg;
  try {
    if (j.contains("input_h")) cfg.input_h = j["input_h"].get<int>();
    if (j.contains("input_w")) cfg.input_w = j["input_w"].get<int>();
    if (j.contains("attended_scales")) cfg.attended_scales = j["attended_scales"].get<std::vector<int>>();
    if (j.contains("skip_scales")) cfg.skip_scales = j["skip_scales"].get<std::vector<int>>();
    if (j.contains("d_model")) cfg.d_model = j["d_model"].get<int>();
    if (j.contains("head_count")) cfg.head_count = j["head_count"].get<int>();
    if (j.contains("fusion_widths")) cfg.fusion_widths = j["fusion_widths"].get<std::vector<int>>();
    if (j.contains("mixer_widths")) cfg.mixer_widths = j["mixer_widths"].get<std::vector<int>>();
    if (j.contains("backbone")) {
      const auto& bb = j["backbone"];
      if (bb.contains("seed")) cfg.backbone.seed = bb["seed"].get<std::uint64_t>();
      if (bb.contains("feature_gain")) cfg.backbone.feature_gain = bb["feature_gain"].get<float>();
      if (bb.contains("channels")) {
        cfg.backbone.channels.clear();
        for (const auto& [k, v] : bb["channels"].items())
          cfg.backbone.channels[parse_scale(k)] = v.get<int>();
      }
      if (bb.contains("layers")) {
        cfg.backbone.layers.clear();
        for (const auto& [k, v] : bb["layers"].items())
          cfg.backbone.layers[parse_scale(k)] = v.get<int>();
      }
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("bad model config field: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ModelConfig load_model_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("missing model config " + file.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return model_config_from_json(text);
}

int mixer_input_channels(const ModelConfig& cfg) {
  int c = cfg.fusion_channels();
  for (int den : cfg.skip_scales) c += 2 * cfg.backbone.channels.at(den);
  return c;
}

namespace {

Tensor uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.uniform(-limit, limit));
  return t;
}

ConvParam init_conv(int kh, int kw, int cin, int cout, Rng& rng) {
  // He-style bound for the ReLU chains
  const double limit = std::sqrt(6.0 / (kh * kw * cin));
  return {uniform_tensor({kh, kw, cin, cout}, limit, rng), Tensor({cout})};
}

}  // namespace

ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "model-init"));
  ModelWeights w;
  for (int den : cfg.attended_scales) {
    const int c = cfg.backbone.channels.at(den);
    const int layers = cfg.backbone.layers.at(den);
    const double limit = std::sqrt(6.0 / (c + cfg.d_model));
    for (int l = 0; l < layers; ++l) {
      AttentionParams p;
      p.wq = uniform_tensor({c, cfg.d_model}, limit, rng);
      p.bq = Tensor({cfg.d_model});
      // Wk starts as a copy of Wq so the initial scores are a random
      // projection of the feature similarity (q^T W W^T k) instead of an
      // arbitrary bilinear form; the two matrices train independently.
      p.wk = p.wq;
      p.bk = Tensor({cfg.d_model});
      p.head_count = cfg.head_count;
      w.attention[den].push_back(std::move(p));
    }
    FusionParamsT<float> f;
    int prev = layers;
    for (int width : cfg.fusion_widths) {
      f.raise_blocks.push_back(init_conv(3, 3, prev, width, rng));
      prev = width;
    }
    for (int i = 0; i < 3; ++i)
      f.post_blocks.push_back(init_conv(3, 3, cfg.fusion_channels(), cfg.fusion_channels(), rng));
    w.fusion[den] = std::move(f);
  }
  const int mixer_in = mixer_input_channels(cfg);
  const int m0 = cfg.mixer_widths[0], m1 = cfg.mixer_widths[1], m2 = cfg.mixer_widths[2];
  w.mixer.push_back(init_conv(3, 3, mixer_in, m0, rng));
  w.mixer.push_back(init_conv(3, 3, m0, m0, rng));
  w.mixer.push_back(init_conv(3, 3, m0, m1, rng));
  w.mixer.push_back(init_conv(3, 3, m1, m1, rng));
  w.mixer.push_back(init_conv(3, 3, m1, m1, rng));
  // classifier conv starts at zero: untrained logits are exactly neutral and
  // early gradients are not fighting random decoder noise
  w.mixer.push_back({Tensor({3, 3, m1, m2}), Tensor({m2})});
  return w;
}

InferenceResult infer(const ModelWeights& w, const EpisodeFeatures& ep, const ModelConfig& cfg,
                      const ForwardOptions& opt) {
  Graph<float> g;
  WeightNodes<float> wn = insert_weights(g, w, /*trainable=*/false);
  ForwardNodes<float> fwd = forward_graph(g, wn, ep, cfg, opt);
  InferenceResult out;
  out.prob = g.value(fwd.prob_fg);
  out.logits = g.value(fwd.logits);
  for (const auto& [den, id] : fwd.aggregated) out.aggregated[den] = g.value(id);
  out.attention = std::move(fwd.attention);
  return out;
}

OtsuResult otsu_threshold(std::span<const float> values) {
  if (values.empty()) throw DimensionError("otsu_threshold: empty input");
  float lo = values[0], hi = values[0];
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  OtsuResult res;
  if (lo == hi) {
    res.degenerate = true;
    res.threshold = lo;
    return res;
  }
  constexpr int kBins = 256;
  std::array<std::int64_t, kBins> hist{};
  const double width = (static_cast<double>(hi) - lo) / kBins;
  auto bin_of = [&](float v) {
    int b = static_cast<int>((static_cast<double>(v) - lo) / width);
    return std::clamp(b, 0, kBins - 1);
  };
  for (float v : values) hist[static_cast<std::size_t>(bin_of(v))]++;

  const auto total = static_cast<double>(values.size());
  double sum_all = 0;
  for (int b = 0; b < kBins; ++b) sum_all += static_cast<double>(b) * hist[static_cast<std::size_t>(b)];

  double best = -1.0;
  double w0 = 0, sum0 = 0;
  for (int t = 0; t < kBins - 1; ++t) {
    w0 += static_cast<double>(hist[static_cast<std::size_t>(t)]);
    sum0 += static_cast<double>(t) * hist[static_cast<std::size_t>(t)];
    const double w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double mu0 = sum0 / w0;
    const double mu1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      res.bin = t;
    }
  }
  res.threshold = static_cast<float>(lo + (res.bin + 1) * width);
  return res;
}

IntermediateMask intermediate_mask_eval(const Tensor& aggregated, int out_h, int out_w) {
  if (aggregated.rank() != 3 || aggregated.dim(2) < 1)
    throw DimensionError("intermediate_mask_eval: expected [h,w,L] input");
  Tensor layer_sum = sum_channels(aggregated);
  OtsuResult otsu = otsu_threshold(layer_sum.values());

  IntermediateMask out;
  out.degenerate = otsu.degenerate;
  if (otsu.degenerate) {
    out.mask = Tensor({out_h, out_w});  // all background
    return out;
  }

  const int h = layer_sum.dim(0), w = layer_sum.dim(1);
  float lo = layer_sum[0], hi = layer_sum[0];
  for (std::int64_t i = 0; i < layer_sum.numel(); ++i) {
    lo = std::min(lo, layer_sum[i]);
    hi = std::max(hi, layer_sum[i]);
  }
  const double width = (static_cast<double>(hi) - lo) / 256.0;
  Tensor binary({h, w, 1});
  for (std::int64_t i = 0; i < layer_sum.numel(); ++i) {
    int b = static_cast<int>((static_cast<double>(layer_sum[i]) - lo) / width);
    b = std::clamp(b, 0, 255);
    binary[i] = b > otsu.bin ? 1.0f : 0.0f;
  }
  Tensor resized = bilinear_resize(binary, out_h, out_w);
  out.mask = Tensor({out_h, out_w});
  for (std::int64_t i = 0; i < out.mask.numel(); ++i) out.mask[i] = resized[i] >= 0.5f ? 1.0f : 0.0f;
  return out;
}

void save_checkpoint(const std::filesystem::path& dir, const ModelWeights& w,
                     const ModelConfig& cfg, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["seed"] = seed;
  manifest["config"] = json::parse(model_config_to_json(cfg));
  json tensors = json::object();
  json attention_index = json::array();
  for_each_param<float>(w, [&](const std::string& name, const Tensor& t) {
    const std::string file = name + ".dtc";
    save_dtc(dir / file, t);
    tensors[name] = file;
    if (name.rfind("attn.", 0) == 0) {
      // attn.s<den>.l<idx>.<role>
      const auto s_end = name.find('.', 5);
      const auto l_end = name.find('.', s_end + 1);
      json e;
      e["scale"] = scale_name(std::stoi(name.substr(6, s_end - 6)));
      e["layer"] = std::stoi(name.substr(s_end + 2, l_end - s_end - 2));
      e["role"] = name.substr(l_end + 1);
      e["tensor"] = name;
      attention_index.push_back(e);
    }
  });
  manifest["tensors"] = tensors;
  manifest["attention_index"] = attention_index;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing checkpoint manifest in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (!manifest.contains("version") || manifest["version"].get<int>() != 1)
    throw IoError("unsupported checkpoint version in " + dir.string());
  Checkpoint ck;
  ck.seed = manifest["seed"].get<std::uint64_t>();
  ck.config = model_config_from_json(manifest["config"].dump());
  ck.weights = init_weights(ck.config, ck.seed);  // shapes; values overwritten below
  const auto& tensors = manifest["tensors"];
  for_each_param<float>(ck.weights, [&](const std::string& name, Tensor& t) {
    if (!tensors.contains(name)) throw IoError("checkpoint lacks tensor \"" + name + "\"");
    Tensor loaded = load_dtc_f32(dir / tensors[name].get<std::string>());
    if (!loaded.same_shape(t))
      throw IoError("checkpoint tensor \"" + name + "\" has shape " +
                    shape_str(loaded.shape()) + ", expected " + shape_str(t.shape()));
    t = std::move(loaded);
  });
  return ck;
}

}  // namespace dcama
