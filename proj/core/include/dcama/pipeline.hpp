#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dcama/attention.hpp"
#include "dcama/backbone.hpp"
#include "dcama/graph.hpp"
#include "dcama/rng.hpp"
#include "dcama/tensor.hpp"
#include "dcama/tensor_ops.hpp"

namespace dcama {

// Architecture hyperparameters. The 1/4 scale is never cross-attended; the
// fusion pyramid raises each scale's aggregated masks to fusion channel width
// and merges coarse-to-fine; the mixer narrows down to 2 output channels with
// two interleaved upsamplings.
struct ModelConfig {
  int input_h = 96;
  int input_w = 96;
  std::vector<int> attended_scales = {8, 16, 32};
  std::vector<int> skip_scales = {4, 8};
  int d_model = 64;
  int head_count = 4;
  std::vector<int> fusion_widths = {64, 96, 128};
  std::vector<int> mixer_widths = {64, 32, 2};
  BackboneConfig backbone;

  int fusion_channels() const { return fusion_widths.back(); }
  void validate() const;
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);
ModelConfig load_model_config(const std::filesystem::path& file);

template <class T>
struct ConvParamT {
  BasicTensor<T> w;  // [kh,kw,cin,cout]
  BasicTensor<T> b;  // [cout]
};
using ConvParam = ConvParamT<float>;

template <class T>
struct FusionParamsT {
  std::vector<ConvParamT<T>> raise_blocks;  // L_i -> ... -> fusion_channels
  std::vector<ConvParamT<T>> post_blocks;   // constant fusion_channels
};

template <class T>
struct ModelWeightsT {
  std::map<int, std::vector<AttentionParamsT<T>>> attention;  // scale -> per layer
  std::map<int, FusionParamsT<T>> fusion;
  std::vector<ConvParamT<T>> mixer;  // two convs per mixer block

  template <class U>
  ModelWeightsT<U> cast() const {
    ModelWeightsT<U> out;
    for (const auto& [den, layers] : attention) {
      for (const auto& p : layers) {
        AttentionParamsT<U> q;
        q.wq = p.wq.template cast<U>();
        q.bq = p.bq.template cast<U>();
        q.wk = p.wk.template cast<U>();
        q.bk = p.bk.template cast<U>();
        q.head_count = p.head_count;
        out.attention[den].push_back(std::move(q));
      }
    }
    for (const auto& [den, f] : fusion) {
      FusionParamsT<U> g;
      for (const auto& c : f.raise_blocks)
        g.raise_blocks.push_back({c.w.template cast<U>(), c.b.template cast<U>()});
      for (const auto& c : f.post_blocks)
        g.post_blocks.push_back({c.w.template cast<U>(), c.b.template cast<U>()});
      out.fusion[den] = std::move(g);
    }
    for (const auto& c : mixer) out.mixer.push_back({c.w.template cast<U>(), c.b.template cast<U>()});
    return out;
  }
};
using ModelWeights = ModelWeightsT<float>;

// Stable traversal of every trainable tensor; defines parameter names and the
// optimizer/checkpoint ordering.
template <class T>
void for_each_param(ModelWeightsT<T>& w,
                    const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  for (auto& [den, layers] : w.attention) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string base = "attn.s" + std::to_string(den) + ".l" + std::to_string(l) + ".";
      fn(base + "Wq", layers[l].wq);
      fn(base + "bq", layers[l].bq);
      fn(base + "Wk", layers[l].wk);
      fn(base + "bk", layers[l].bk);
    }
  }
  for (auto& [den, f] : w.fusion) {
    const std::string base = "fusion.s" + std::to_string(den) + ".";
    for (std::size_t i = 0; i < f.raise_blocks.size(); ++i) {
      fn(base + "raise" + std::to_string(i) + ".w", f.raise_blocks[i].w);
      fn(base + "raise" + std::to_string(i) + ".b", f.raise_blocks[i].b);
    }
    for (std::size_t i = 0; i < f.post_blocks.size(); ++i) {
      fn(base + "post" + std::to_string(i) + ".w", f.post_blocks[i].w);
      fn(base + "post" + std::to_string(i) + ".b", f.post_blocks[i].b);
    }
  }
  for (std::size_t i = 0; i < w.mixer.size(); ++i) {
    fn("mixer." + std::to_string(i) + ".w", w.mixer[i].w);
    fn("mixer." + std::to_string(i) + ".b", w.mixer[i].b);
  }
}

template <class T>
void for_each_param(const ModelWeightsT<T>& w,
                    const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) {
  for_each_param<T>(const_cast<ModelWeightsT<T>&>(w),
                    [&](const std::string& name, BasicTensor<T>& t) { fn(name, t); });
}

// number of skip channels entering the mixer (query + pooled support per skip scale)
int mixer_input_channels(const ModelConfig& cfg);

ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed);

// ---- graph-side forward pass -------------------------------------------------

template <class T>
struct EpisodeFeaturesT {
  MultiScaleFeaturesT<T> query;
  std::vector<MultiScaleFeaturesT<T>> supports;
  std::vector<BasicTensor<T>> support_masks;  // [H,W,1], values in [0,1]
  int input_h = 0;
  int input_w = 0;

  template <class U>
  EpisodeFeaturesT<U> cast() const {
    EpisodeFeaturesT<U> out;
    out.input_h = input_h;
    out.input_w = input_w;
    for (const auto& [den, layers] : query)
      for (const auto& t : layers) out.query[den].push_back(t.template cast<U>());
    for (const auto& s : supports) {
      MultiScaleFeaturesT<U> m;
      for (const auto& [den, layers] : s)
        for (const auto& t : layers) m[den].push_back(t.template cast<U>());
      out.supports.push_back(std::move(m));
    }
    for (const auto& m : support_masks) out.support_masks.push_back(m.template cast<U>());
    return out;
  }
};
using EpisodeFeatures = EpisodeFeaturesT<float>;

struct ForwardOptions {
  bool zero_background = false;
  bool record_attention = false;
};

template <class T>
struct ConvNodes {
  typename Graph<T>::Id w, b;
};
template <class T>
struct FusionNodes {
  std::vector<ConvNodes<T>> raise_blocks, post_blocks;
};
template <class T>
struct WeightNodes {
  std::map<int, std::vector<AttnParamNodes<T>>> attention;
  std::map<int, FusionNodes<T>> fusion;
  std::vector<ConvNodes<T>> mixer;
};

template <class T>
WeightNodes<T> insert_weights(Graph<T>& g, const ModelWeightsT<T>& w, bool trainable) {
  WeightNodes<T> out;
  for (const auto& [den, layers] : w.attention) {
    for (const auto& p : layers) {
      p.validate();
      AttnParamNodes<T> n;
      n.wq = g.leaf(p.wq, trainable);
      n.bq = g.leaf(p.bq, trainable);
      n.wk = g.leaf(p.wk, trainable);
      n.bk = g.leaf(p.bk, trainable);
      n.head_count = p.head_count;
      out.attention[den].push_back(n);
    }
  }
  for (const auto& [den, f] : w.fusion) {
    FusionNodes<T> n;
    for (const auto& c : f.raise_blocks)
      n.raise_blocks.push_back({g.leaf(c.w, trainable), g.leaf(c.b, trainable)});
    for (const auto& c : f.post_blocks)
      n.post_blocks.push_back({g.leaf(c.w, trainable), g.leaf(c.b, trainable)});
    out.fusion[den] = std::move(n);
  }
  for (const auto& c : w.mixer)
    out.mixer.push_back({g.leaf(c.w, trainable), g.leaf(c.b, trainable)});
  return out;
}

// Bilinear mask downsampling; soft values are kept (no re-binarization).
template <class T>
BasicTensor<T> downsample_mask(const BasicTensor<T>& m, int oh, int ow) {
  detail::require_rank(m, 3, "downsample_mask");
  for (std::int64_t i = 0; i < m.numel(); ++i)
    if (m[i] < T(-1e-6) || m[i] > T(1) + T(1e-6))
      throw DimensionError("downsample_mask: mask values must lie in [0,1]");
  return bilinear_resize(m, oh, ow);
}

// Table-3-style ablation: zero support features where the (soft) mask is below
// 0.5, broadcast over channels.
template <class T>
BasicTensor<T> zero_background_support(const BasicTensor<T>& features,
                                       const BasicTensor<T>& mask_at_scale) {
  if (features.dim(0) != mask_at_scale.dim(0) || features.dim(1) != mask_at_scale.dim(1))
    throw DimensionError("zero_background_support: feature/mask shape mismatch");
  BasicTensor<T> out = features;
  const int h = features.dim(0), w = features.dim(1), c = features.dim(2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask_at_scale.at(y, x, 0) < T(0.5))
        for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = T(0);
  return out;
}

template <class T>
struct ForwardNodes {
  typename Graph<T>::Id logits = -1;   // [H,W,2]
  typename Graph<T>::Id prob_fg = -1;  // [H,W]
  std::map<int, typename Graph<T>::Id> aggregated;  // scale -> [h_i,w_i,L_i]
  std::vector<AttentionRecordT<T>> attention;
};

// One multi-layer DCAMA block: independent per-layer aggregation,
// channel-concatenated in layer order.
template <class T>
typename Graph<T>::Id multilayer_dcama_block(Graph<T>& g, int scale_den,
                                             const std::vector<BasicTensor<T>>& query_layers,
                                             const std::vector<std::vector<BasicTensor<T>>>& support_layers,
                                             const std::vector<BasicTensor<T>>& masks_at_scale,
                                             const std::vector<AttnParamNodes<T>>& params,
                                             std::vector<AttentionRecordT<T>>* recorded = nullptr) {
  if (query_layers.empty()) throw DimensionError("multilayer_dcama_block: no query layers");
  if (params.size() != query_layers.size())
    throw DimensionError("multilayer_dcama_block: layer/parameter count mismatch at scale " +
                         scale_name(scale_den));
  std::vector<typename Graph<T>::Id> per_layer;
  for (std::size_t l = 0; l < query_layers.size(); ++l) {
    std::vector<BasicTensor<T>> feats;
    feats.reserve(support_layers.size());
    for (const auto& s : support_layers) {
      if (l >= s.size())
        throw DimensionError("multilayer_dcama_block: support lacks layer " + std::to_string(l) +
                             " at scale " + scale_name(scale_den));
      feats.push_back(s[l]);
    }
    per_layer.push_back(dcama_unit<T>(g, query_layers[l], feats, masks_at_scale, params[l],
                                      scale_den, recorded, static_cast<int>(l)));
  }
  return g.concat_channels(std::span<const typename Graph<T>::Id>(per_layer));
}

// Coarse-to-fine fusion: per scale, raise blocks on the aggregated masks, add
// the upsampled coarser accumulation, then constant-width blocks.
template <class T>
typename Graph<T>::Id pyramid_fusion(Graph<T>& g,
                                     const std::map<int, typename Graph<T>::Id>& aggregated,
                                     const std::map<int, FusionNodes<T>>& fusion) {
  typename Graph<T>::Id acc = -1;
  for (auto it = aggregated.rbegin(); it != aggregated.rend(); ++it) {  // coarsest first
    const auto& [den, masks] = *it;
    auto fit = fusion.find(den);
    if (fit == fusion.end())
      throw DimensionError("pyramid_fusion: missing fusion weights for scale " + scale_name(den));
    typename Graph<T>::Id x = masks;
    for (const auto& cp : fit->second.raise_blocks) x = g.relu(g.conv2d(x, cp.w, cp.b, 1, 1));
    if (acc != -1) {
      const auto& shape = g.value(x).shape();
      x = g.add(x, g.bilinear_resize(acc, shape[0], shape[1]));
    }
    for (const auto& cp : fit->second.post_blocks) x = g.relu(g.conv2d(x, cp.w, cp.b, 1, 1));
    acc = x;
  }
  if (acc == -1) throw DimensionError("pyramid_fusion: no attended scales");
  return acc;
}

// Mask-feature mixer: skip concatenation at the 1/4 scale, then three
// two-conv blocks with upsamplings after the first and second; the final conv
// is linear and emits the 2-channel logits.
template <class T>
typename Graph<T>::Id mask_feature_mixer(Graph<T>& g, typename Graph<T>::Id fused,
                                         const std::vector<typename Graph<T>::Id>& skips,
                                         const std::vector<ConvNodes<T>>& mixer, int out_h,
                                         int out_w) {
  if (mixer.size() != 6) throw DimensionError("mask_feature_mixer: expected 6 conv parameter sets");
  const int h4 = out_h / 4, w4 = out_w / 4;
  std::vector<typename Graph<T>::Id> parts;
  parts.push_back(g.bilinear_resize(fused, h4, w4));
  for (auto s : skips) parts.push_back(g.bilinear_resize(s, h4, w4));
  typename Graph<T>::Id x = g.concat_channels(std::span<const typename Graph<T>::Id>(parts));

  x = g.relu(g.conv2d(x, mixer[0].w, mixer[0].b, 1, 1));
  x = g.relu(g.conv2d(x, mixer[1].w, mixer[1].b, 1, 1));
  x = g.bilinear_resize(x, out_h / 2, out_w / 2);
  x = g.relu(g.conv2d(x, mixer[2].w, mixer[2].b, 1, 1));
  x = g.relu(g.conv2d(x, mixer[3].w, mixer[3].b, 1, 1));
  x = g.bilinear_resize(x, out_h, out_w);
  x = g.relu(g.conv2d(x, mixer[4].w, mixer[4].b, 1, 1));
  return g.conv2d(x, mixer[5].w, mixer[5].b, 1, 1);  // logits stay linear
}

template <class T>
void validate_episode_features(const EpisodeFeaturesT<T>& ep, const ModelConfig& cfg) {
  if (ep.supports.empty()) throw DimensionError("forward: episode has no supports");
  if (ep.supports.size() != ep.support_masks.size())
    throw DimensionError("forward: support feature/mask count mismatch");
  if (ep.input_h < 16 || ep.input_h % 4 != 0 || ep.input_w % 4 != 0)
    throw DimensionError("forward: input size must be a positive multiple of 4");
  for (int den : cfg.attended_scales) {
    auto qit = ep.query.find(den);
    if (qit == ep.query.end() || qit->second.empty())
      throw DimensionError("forward: query features missing scale " + scale_name(den));
    if (static_cast<int>(qit->second.size()) != cfg.backbone.layers.at(den))
      throw DimensionError("forward: query layer count at " + scale_name(den) +
                           " does not match config");
    for (const auto& s : ep.supports) {
      auto sit = s.find(den);
      if (sit == s.end() || sit->second.size() != qit->second.size())
        throw DimensionError("forward: support features missing scale " + scale_name(den));
    }
  }
  for (int den : cfg.skip_scales) {
    if (!ep.query.count(den) || ep.query.at(den).empty())
      throw DimensionError("forward: query skip features missing scale " + scale_name(den));
    for (const auto& s : ep.supports)
      if (!s.count(den) || s.at(den).empty())
        throw DimensionError("forward: support skip features missing scale " + scale_name(den));
  }
  for (const auto& m : ep.support_masks)
    if (m.rank() != 3 || m.dim(0) != ep.input_h || m.dim(1) != ep.input_w || m.dim(2) != 1)
      throw DimensionError("forward: support mask shape " + shape_str(m.shape()) +
                           " does not match input size");
}

// Full forward pass. Deterministic in (features, weights, options); the
// generic n-shot path is the only path, so n=1 runs exactly the code a
// dedicated 1-shot implementation would.
template <class T>
ForwardNodes<T> forward_graph(Graph<T>& g, const WeightNodes<T>& wn,
                              const EpisodeFeaturesT<T>& ep, const ModelConfig& cfg,
                              const ForwardOptions& opt = {}) {
  cfg.validate();
  validate_episode_features(ep, cfg);
  const int n = static_cast<int>(ep.supports.size());

  ForwardNodes<T> fwd;
  std::vector<AttentionRecordT<T>>* rec = opt.record_attention ? &fwd.attention : nullptr;

  for (int den : cfg.attended_scales) {
    const auto& query_layers = ep.query.at(den);
    const int h = query_layers[0].dim(0), w = query_layers[0].dim(1);

    std::vector<BasicTensor<T>> masks_at_scale;
    masks_at_scale.reserve(static_cast<std::size_t>(n));
    for (const auto& m : ep.support_masks) masks_at_scale.push_back(downsample_mask(m, h, w));

    std::vector<std::vector<BasicTensor<T>>> support_layers;
    support_layers.reserve(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
      std::vector<BasicTensor<T>> layers = ep.supports[static_cast<std::size_t>(j)].at(den);
      if (opt.zero_background)
        for (auto& f : layers)
          f = zero_background_support(f, masks_at_scale[static_cast<std::size_t>(j)]);
      support_layers.push_back(std::move(layers));
    }

    auto pit = wn.attention.find(den);
    if (pit == wn.attention.end())
      throw DimensionError("forward: no attention parameters for scale " + scale_name(den));
    fwd.aggregated[den] = multilayer_dcama_block<T>(g, den, query_layers, support_layers,
                                                    masks_at_scale, pit->second, rec);
  }

  typename Graph<T>::Id fused = pyramid_fusion<T>(g, fwd.aggregated, wn.fusion);

  // skip connections: last-layer query features and max-pooled support features
  std::vector<typename Graph<T>::Id> skips;
  for (int den : cfg.skip_scales) {
    skips.push_back(g.constant(ep.query.at(den).back()));
    std::vector<BasicTensor<T>> pooled;
    pooled.reserve(static_cast<std::size_t>(n));
    for (const auto& s : ep.supports) pooled.push_back(s.at(den).back());
    skips.push_back(g.constant(max_over_set(std::span<const BasicTensor<T>>(pooled))));
  }

  fwd.logits = mask_feature_mixer<T>(g, fused, skips, wn.mixer, ep.input_h, ep.input_w);

  const int hw = ep.input_h * ep.input_w;
  auto sm = g.softmax_rows(g.reshape(fwd.logits, {hw, 2}));
  fwd.prob_fg = g.reshape(g.slice_channels(sm, 1, 1), {ep.input_h, ep.input_w});
  return fwd;
}

// Eager inference wrapper.
struct InferenceResult {
  Tensor prob;    // [H,W] foreground probability
  Tensor logits;  // [H,W,2]
  std::map<int, Tensor> aggregated;
  std::vector<AttentionRecord> attention;
};

InferenceResult infer(const ModelWeights& w, const EpisodeFeatures& ep, const ModelConfig& cfg,
                      const ForwardOptions& opt = {});

// ---- intermediate-mask analysis ------------------------------------------------

struct OtsuResult {
  int bin = -1;        // chosen split: bins <= bin are background
  float threshold = 0; // value-space edge of that split
  bool degenerate = false;
};

// 256-bin Otsu over [min,max]; degenerate (constant) input is flagged.
OtsuResult otsu_threshold(std::span<const float> values);

struct IntermediateMask {
  Tensor mask;  // [H,W] of 0/1
  bool degenerate = false;
};

// Layer-sum -> Otsu binarization -> bilinear resize -> re-binarize at 0.5.
// Constant sums yield an all-background mask with the degenerate flag set.
IntermediateMask intermediate_mask_eval(const Tensor& aggregated, int out_h, int out_w);

// ---- checkpoints ----------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const ModelWeights& w,
                     const ModelConfig& cfg, std::uint64_t seed);

struct Checkpoint {
  ModelWeights weights;
  ModelConfig config;
  std::uint64_t seed = 0;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace dcama
