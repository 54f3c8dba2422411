#pragma once

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "dcama/graph.hpp"
#include "dcama/tensor.hpp"
#include "dcama/tensor_ops.hpp"

namespace dcama {

// Flattened feature map(s): one row per pixel token, raster order, support
// images concatenated in list order.
template <class T>
struct TokenMatrixT {
  BasicTensor<T> tokens;  // [num_tokens, dim]
  int scale_den = 0;      // feature scale denominator (8 for 1/8, ...)
  int image_h = 0;
  int image_w = 0;
  int image_count = 1;

  int tokens_per_image() const { return image_h * image_w; }
};
using TokenMatrix = TokenMatrixT<float>;

// Projection parameters of one DCAMA unit. V is the raw support mask and
// carries no parameters.
template <class T>
struct AttentionParamsT {
  BasicTensor<T> wq;  // [c, d_model]
  BasicTensor<T> bq;  // [d_model]
  BasicTensor<T> wk;  // [c, d_model]
  BasicTensor<T> bk;  // [d_model]
  int head_count = 1;

  int d_model() const { return wq.dim(1); }
  int d_head() const { return d_model() / head_count; }
  void validate() const {
    if (head_count < 1 || d_model() % head_count != 0)
      throw DimensionError("d_model " + std::to_string(d_model()) +
                           " not divisible by head_count " + std::to_string(head_count));
  }
};
using AttentionParams = AttentionParamsT<float>;

// Sinusoidal positional encoding over the flattened token index:
// PE[pos,2i] = sin(pos / 10000^(2i/dim)), PE[pos,2i+1] = cos(...).
template <class T>
BasicTensor<T> positional_encoding(int num_tokens, int dim) {
  if (dim % 2 != 0) throw DimensionError("positional_encoding: dim must be even");
  if (num_tokens < 1 || dim < 2) throw DimensionError("positional_encoding: empty output");
  BasicTensor<T> pe({num_tokens, dim});
  for (int i = 0; 2 * i < dim; ++i) {
    const double inv_freq = std::pow(10000.0, -2.0 * i / dim);
    for (int pos = 0; pos < num_tokens; ++pos) {
      const double angle = pos * inv_freq;
      pe.at(pos, 2 * i) = static_cast<T>(std::sin(angle));
      pe.at(pos, 2 * i + 1) = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

// Positions restart at 0 for each image, so query and every support share one
// positional grid.
template <class T>
BasicTensor<T> tiled_positional_encoding(int tokens_per_image, int dim, int image_count) {
  BasicTensor<T> pe = positional_encoding<T>(tokens_per_image, dim);
  if (image_count == 1) return pe;
  BasicTensor<T> out({tokens_per_image * image_count, dim});
  for (int img = 0; img < image_count; ++img)
    std::copy_n(pe.data(), pe.numel(), out.data() + static_cast<std::int64_t>(img) * pe.numel());
  return out;
}

// [h,w,c] -> tokens [h*w, c] in raster order; the inverse is a reshape.
template <class T>
TokenMatrixT<T> flatten_features(const BasicTensor<T>& f, int scale_den = 0) {
  detail::require_rank(f, 3, "flatten_features");
  TokenMatrixT<T> tm;
  tm.tokens = f.reshaped({f.dim(0) * f.dim(1), f.dim(2)});
  tm.scale_den = scale_den;
  tm.image_h = f.dim(0);
  tm.image_w = f.dim(1);
  tm.image_count = 1;
  return tm;
}

// n-shot token assembly: supports concatenated in list order, raster order
// within each image; the mask tokens become V.
template <class T>
std::pair<TokenMatrixT<T>, BasicTensor<T>> assemble_support_tokens(
    std::span<const BasicTensor<T>> features, std::span<const BasicTensor<T>> masks,
    int scale_den = 0) {
  if (features.empty()) throw DimensionError("assemble_support_tokens: empty support list");
  if (features.size() != masks.size())
    throw DimensionError("assemble_support_tokens: feature/mask count mismatch");
  const int h = features[0].dim(0), w = features[0].dim(1), c = features[0].dim(2);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].rank() != 3 || features[i].dim(0) != h || features[i].dim(1) != w ||
        features[i].dim(2) != c)
      throw DimensionError("assemble_support_tokens: support feature " + std::to_string(i) +
                           " has shape " + shape_str(features[i].shape()));
    if (masks[i].rank() != 3 || masks[i].dim(0) != h || masks[i].dim(1) != w ||
        masks[i].dim(2) != 1)
      throw DimensionError("assemble_support_tokens: support mask " + std::to_string(i) +
                           " has shape " + shape_str(masks[i].shape()));
  }
  const int n = static_cast<int>(features.size());
  TokenMatrixT<T> fs;
  fs.tokens = BasicTensor<T>({n * h * w, c});
  fs.scale_den = scale_den;
  fs.image_h = h;
  fs.image_w = w;
  fs.image_count = n;
  BasicTensor<T> v({n * h * w, 1});
  for (int i = 0; i < n; ++i) {
    std::copy_n(features[static_cast<std::size_t>(i)].data(),
                static_cast<std::int64_t>(h) * w * c,
                fs.tokens.data() + static_cast<std::int64_t>(i) * h * w * c);
    std::copy_n(masks[static_cast<std::size_t>(i)].data(), static_cast<std::int64_t>(h) * w,
                v.data() + static_cast<std::int64_t>(i) * h * w);
  }
  return {std::move(fs), std::move(v)};
}

// Eager Attn(Q,K,V) = softmax(QK^T / sqrt(d)) V for a single head.
template <class T>
BasicTensor<T> scaled_dot_product_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                            const BasicTensor<T>& v) {
  detail::require_rank(q, 2, "scaled_dot_product_attention");
  detail::require_rank(k, 2, "scaled_dot_product_attention");
  if (k.dim(0) < 1) throw DimensionError("scaled_dot_product_attention: zero support tokens");
  if (q.dim(1) != k.dim(1))
    throw DimensionError("scaled_dot_product_attention: q dim " + std::to_string(q.dim(1)) +
                         " != k dim " + std::to_string(k.dim(1)));
  if (v.dim(0) != k.dim(0))
    throw DimensionError("scaled_dot_product_attention: v rows != k rows");
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  BasicTensor<T> scores = scale(matmul_nt(q, k), inv_sqrt_d);
  return matmul_acc64(softmax_rows(scores), v);
}

// One recorded attention map plus where it came from.
template <class T>
struct AttentionRecordT {
  int scale_den = 0;
  int layer = 0;
  int head = 0;
  int image_h = 0, image_w = 0, image_count = 1;  // support token geometry
  BasicTensor<T> weights;                         // [m_q, m_s]
};
using AttentionRecord = AttentionRecordT<float>;

template <class T>
struct AttnParamNodes {
  typename Graph<T>::Id wq, bq, wk, bk;
  int head_count = 1;
};

// Graph-side DCAMA attention: positional encoding on Q/K token sides, linear
// projections, per-head scaled dot-product attention against the unprojected
// mask values, and an arithmetic mean over heads (no output projection).
template <class T>
typename Graph<T>::Id multi_head_dcama(Graph<T>& g, const TokenMatrixT<T>& fq,
                                       const TokenMatrixT<T>& fs, const BasicTensor<T>& v,
                                       const AttnParamNodes<T>& params,
                                       std::vector<AttentionRecordT<T>>* recorded = nullptr,
                                       int record_scale = 0, int record_layer = 0) {
  using Id = typename Graph<T>::Id;
  const int c = fq.tokens.dim(1);
  const int d_model = g.value(params.wq).dim(1);
  const int heads = params.head_count;
  if (fs.tokens.dim(1) != c)
    throw DimensionError("multi_head_dcama: query/support channel mismatch");
  if (g.value(params.wq).dim(0) != c || g.value(params.wk).dim(0) != c)
    throw DimensionError("multi_head_dcama: projection expects " +
                         std::to_string(g.value(params.wq).dim(0)) + " channels, features have " +
                         std::to_string(c));
  if (heads < 1 || d_model % heads != 0)
    throw DimensionError("multi_head_dcama: d_model not divisible by head count");
  if (fs.tokens.dim(0) < 1) throw DimensionError("multi_head_dcama: zero support tokens");
  for (std::int64_t i = 0; i < v.numel(); ++i)
    if (v[i] < T(-1e-6) || v[i] > T(1) + T(1e-6))
      throw DimensionError("multi_head_dcama: mask values must lie in [0,1]");
  const int d_head = d_model / heads;

  BasicTensor<T> fq_pe =
      add(fq.tokens, tiled_positional_encoding<T>(fq.tokens_per_image(), c, fq.image_count));
  BasicTensor<T> fs_pe =
      add(fs.tokens, tiled_positional_encoding<T>(fs.tokens_per_image(), c, fs.image_count));

  Id q = g.add_rowvec(g.matmul(g.constant(std::move(fq_pe)), params.wq), params.bq);
  Id k = g.add_rowvec(g.matmul(g.constant(std::move(fs_pe)), params.wk), params.bk);
  Id v_id = g.constant(v);

  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_head)));
  Id mean = -1;
  for (int h = 0; h < heads; ++h) {
    Id qh = g.slice_channels(q, h * d_head, d_head);
    Id kh = g.slice_channels(k, h * d_head, d_head);
    Id weights = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), inv_sqrt_d));
    if (recorded) {
      AttentionRecordT<T> rec;
      rec.scale_den = record_scale;
      rec.layer = record_layer;
      rec.head = h;
      rec.image_h = fs.image_h;
      rec.image_w = fs.image_w;
      rec.image_count = fs.image_count;
      rec.weights = g.value(weights);
      recorded->push_back(std::move(rec));
    }
    Id out_h = g.matmul_stable(weights, v_id);
    mean = (h == 0) ? out_h : g.add(mean, out_h);
  }
  return g.scale(mean, static_cast<T>(1) / static_cast<T>(heads));
}

// One DCAMA unit: flatten the query map, assemble the support tokens and mask
// values, attend, and reshape the aggregated mask back to [h,w,1]. The
// aggregation itself has no n-dependent parameters.
template <class T>
typename Graph<T>::Id dcama_unit(Graph<T>& g, const BasicTensor<T>& query_features,
                                 std::span<const BasicTensor<T>> support_features,
                                 std::span<const BasicTensor<T>> support_masks,
                                 const AttnParamNodes<T>& params, int scale_den = 0,
                                 std::vector<AttentionRecordT<T>>* recorded = nullptr,
                                 int record_layer = 0) {
  const int h = query_features.dim(0), w = query_features.dim(1);
  if (!support_features.empty() &&
      (support_features[0].dim(0) != h || support_features[0].dim(1) != w))
    throw DimensionError("dcama_unit: query and support feature shapes differ at this scale");
  TokenMatrixT<T> fq = flatten_features(query_features, scale_den);
  auto [fs, v] = assemble_support_tokens(support_features, support_masks, scale_den);
  auto out = multi_head_dcama(g, fq, fs, v, params, recorded, scale_den, record_layer);
  return g.reshape(out, {h, w, 1});
}

}  // namespace dcama
