#include <doctest.h>

#include <cmath>
#include <vector>

#include "dcama/attention.hpp"
#include "dcama/gradcheck.hpp"
#include "dcama/rng.hpp"

using namespace dcama;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

Tensor64 random_tensor64(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor64 t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Independent oracle for the whole DCAMA attention unit: plain double loops,
// no shared code with the implementation beyond the tensor container.
std::vector<double> naive_multi_head(const std::vector<std::vector<double>>& fq,
                                     const std::vector<std::vector<double>>& fs,
                                     const std::vector<double>& v,
                                     const std::vector<std::vector<double>>& wq,
                                     const std::vector<double>& bq,
                                     const std::vector<std::vector<double>>& wk,
                                     const std::vector<double>& bk, int heads,
                                     int tokens_per_image) {
  const int mq = static_cast<int>(fq.size());
  const int ms = static_cast<int>(fs.size());
  const int c = static_cast<int>(fq[0].size());
  const int dm = static_cast<int>(bq.size());
  const int dh = dm / heads;

  auto pe_at = [&](int token, int col) {
    const int pos = token % tokens_per_image;
    const int pair = col / 2;
    const double angle = pos * std::pow(10000.0, -2.0 * pair / c);
    return col % 2 == 0 ? std::sin(angle) : std::cos(angle);
  };
  auto project = [&](const std::vector<std::vector<double>>& tokens,
                     const std::vector<std::vector<double>>& w, const std::vector<double>& b) {
    std::vector<std::vector<double>> out(tokens.size(), std::vector<double>(dm, 0.0));
    for (std::size_t t = 0; t < tokens.size(); ++t)
      for (int j = 0; j < dm; ++j) {
        double acc = b[static_cast<std::size_t>(j)];
        for (int i = 0; i < c; ++i)
          acc += (tokens[t][static_cast<std::size_t>(i)] + pe_at(static_cast<int>(t), i)) *
                 w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        out[t][static_cast<std::size_t>(j)] = acc;
      }
    return out;
  };

  const auto q = project(fq, wq, bq);
  const auto k = project(fs, wk, bk);

  std::vector<double> result(static_cast<std::size_t>(mq), 0.0);
  for (int h = 0; h < heads; ++h) {
    for (int p = 0; p < mq; ++p) {
      std::vector<double> scores(static_cast<std::size_t>(ms));
      double mx = -1e300;
      for (int j = 0; j < ms; ++j) {
        double dot = 0;
        for (int d = 0; d < dh; ++d)
          dot += q[static_cast<std::size_t>(p)][static_cast<std::size_t>(h * dh + d)] *
                 k[static_cast<std::size_t>(j)][static_cast<std::size_t>(h * dh + d)];
        scores[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
      }
      double denom = 0;
      for (int j = 0; j < ms; ++j) denom += std::exp(scores[static_cast<std::size_t>(j)] - mx);
      double out = 0;
      for (int j = 0; j < ms; ++j)
        out += std::exp(scores[static_cast<std::size_t>(j)] - mx) / denom *
               v[static_cast<std::size_t>(j)];
      result[static_cast<std::size_t>(p)] += out / heads;
    }
  }
  return result;
}

}  // namespace

TEST_CASE("positional encoding formula and bounds") {
  Tensor pe = positional_encoding<float>(3, 4);
  CHECK(pe.at(0, 0) == 0.0f);  // sin 0
  CHECK(pe.at(0, 1) == 1.0f);  // cos 0
  CHECK(pe.at(0, 2) == 0.0f);
  CHECK(pe.at(0, 3) == 1.0f);

  // direct scalar evaluation at position 1
  CHECK(pe.at(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(pe.at(1, 1) == doctest::Approx(std::cos(1.0)));
  CHECK(pe.at(1, 2) == doctest::Approx(std::sin(0.01)));
  CHECK(pe.at(1, 3) == doctest::Approx(std::cos(0.01)));

  Tensor wide = positional_encoding<float>(50, 16);
  for (std::int64_t i = 0; i < wide.numel(); ++i) {
    CHECK(wide[i] >= -1.0f);
    CHECK(wide[i] <= 1.0f);
  }

  CHECK_THROWS_AS(positional_encoding<float>(4, 3), DimensionError);
}

TEST_CASE("flatten_features raster order and round trip") {
  Rng rng(73);
  Tensor f = random_tensor({3, 4, 2}, rng);
  TokenMatrix tm = flatten_features(f, 8);
  CHECK(tm.tokens.shape() == Shape{12, 2});
  CHECK(tm.image_count == 1);
  // token of pixel (r, col) is r*w + col
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 4; ++col)
      for (int c = 0; c < 2; ++c) CHECK(tm.tokens.at(r * 4 + col, c) == f.at(r, col, c));
  CHECK(tm.tokens.reshaped(f.shape()) == f);

  Tensor single = random_tensor({1, 1, 5}, rng);
  CHECK(flatten_features(single).tokens.shape() == Shape{1, 5});
}

TEST_CASE("scaled_dot_product_attention singleton, identical keys, scalar case") {
  Rng rng(79);
  Tensor q = random_tensor({5, 3}, rng);

  // one support token: softmax of a singleton is 1
  Tensor k1 = random_tensor({1, 3}, rng);
  Tensor v1({1, 1}, {0.42f});
  Tensor out1 = scaled_dot_product_attention(q, k1, v1);
  for (int i = 0; i < 5; ++i) CHECK(out1.at(i, 0) == doctest::Approx(0.42f));

  // identical keys: uniform weights, output is the mean of v
  Tensor krow = random_tensor({1, 3}, rng);
  Tensor k({4, 3});
  for (int j = 0; j < 4; ++j)
    for (int c = 0; c < 3; ++c) k.at(j, c) = krow.at(0, c);
  Tensor v({4, 1}, {0.1f, 0.2f, 0.3f, 0.8f});
  Tensor outm = scaled_dot_product_attention(q, k, v);
  for (int i = 0; i < 5; ++i) CHECK(outm.at(i, 0) == doctest::Approx(0.35f).epsilon(1e-5));

  // d=1 hand-computed value: weights = softmax([2, -2]) = [e^2, e^-2]/Z
  Tensor qs({1, 1}, {2.0f});
  Tensor ks({2, 1}, {1.0f, -1.0f});
  Tensor vs({2, 1}, {1.0f, 0.0f});
  CHECK(scaled_dot_product_attention(qs, ks, vs).item() ==
        doctest::Approx(0.98201379).epsilon(1e-5));

  CHECK_THROWS_AS(scaled_dot_product_attention(q, random_tensor({4, 2}, rng), v),
                  DimensionError);
}

TEST_CASE("attention weights are row-stochastic and outputs stay in [0,1]") {
  Rng rng(83);
  for (int trial = 0; trial < 30; ++trial) {
    const int mq = 1 + rng.index(12), ms = 1 + rng.index(24), d = 1 + rng.index(8);
    Tensor q = random_tensor({mq, d}, rng, -3.0f, 3.0f);
    Tensor k = random_tensor({ms, d}, rng, -3.0f, 3.0f);
    const float inv = 1.0f / std::sqrt(static_cast<float>(d));
    Tensor weights = softmax_rows(scale(matmul_nt(q, k), inv));
    for (int i = 0; i < mq; ++i) {
      double sum = 0;
      for (int j = 0; j < ms; ++j) sum += weights.at(i, j);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
    Tensor v = random_tensor({ms, 1}, rng, 0.0f, 1.0f);
    Tensor out = scaled_dot_product_attention(q, k, v);
    for (int i = 0; i < mq; ++i) {
      CHECK(out.at(i, 0) >= -1e-6f);
      CHECK(out.at(i, 0) <= 1.0f + 1e-6f);
    }
  }
}

TEST_CASE("joint permutation of support tokens leaves attention unchanged") {
  Rng rng(89);
  const int mq = 7, ms = 13, d = 5;
  Tensor q = random_tensor({mq, d}, rng);
  Tensor k = random_tensor({ms, d}, rng);
  Tensor v = random_tensor({ms, 1}, rng, 0.0f, 1.0f);
  Tensor base = scaled_dot_product_attention(q, k, v);

  std::vector<int> perm = rng.sample_without_replacement(ms, ms);
  Tensor kp({ms, d}), vp({ms, 1});
  for (int j = 0; j < ms; ++j) {
    for (int c = 0; c < d; ++c) kp.at(j, c) = k.at(perm[static_cast<std::size_t>(j)], c);
    vp.at(j, 0) = v.at(perm[static_cast<std::size_t>(j)], 0);
  }
  Tensor permuted = scaled_dot_product_attention(q, kp, vp);
  CHECK(max_abs_diff(base, permuted) < 1e-5f);
}

TEST_CASE("assemble_support_tokens layout and n-shot counts") {
  Rng rng(97);
  const int h = 2, w = 3, c = 4;
  Tensor f0 = random_tensor({h, w, c}, rng);
  Tensor m0 = random_tensor({h, w, 1}, rng, 0.0f, 1.0f);

  std::vector<Tensor> fs1{f0}, ms1{m0};
  auto [t1, v1] = assemble_support_tokens<float>(fs1, ms1, 8);
  CHECK(t1.tokens == flatten_features(f0).tokens);
  CHECK(v1 == m0.reshaped({h * w, 1}));
  CHECK(t1.image_count == 1);

  std::vector<Tensor> fs2{f0, f0}, ms2{m0, m0};
  auto [t2, v2] = assemble_support_tokens<float>(fs2, ms2, 8);
  CHECK(t2.tokens.dim(0) == 2 * h * w);
  for (int i = 0; i < h * w; ++i) {
    CHECK(v2.at(i, 0) == v2.at(h * w + i, 0));
    for (int ch = 0; ch < c; ++ch) CHECK(t2.tokens.at(i, ch) == t2.tokens.at(h * w + i, ch));
  }

  for (int n = 1; n <= 5; ++n) {
    std::vector<Tensor> fs(static_cast<std::size_t>(n), f0), ms(static_cast<std::size_t>(n), m0);
    auto [tn, vn] = assemble_support_tokens<float>(fs, ms);
    CHECK(tn.tokens.dim(0) == n * h * w);
    CHECK(vn.dim(0) == n * h * w);
  }

  std::vector<Tensor> bad{f0, random_tensor({h + 1, w, c}, rng)}, badm{m0, m0};
  CHECK_THROWS_AS(assemble_support_tokens<float>(bad, badm), DimensionError);
  std::vector<Tensor> none;
  CHECK_THROWS_AS(assemble_support_tokens<float>(none, none), DimensionError);
}

TEST_CASE("multi_head_dcama equals the naive per-head oracle") {
  Rng rng(101);
  const int h = 2, w = 3, c = 6, d_model = 8, heads = 2, n = 2;
  Tensor64 fq_map = random_tensor64({h, w, c}, rng);
  std::vector<Tensor64> fs_maps, masks;
  for (int j = 0; j < n; ++j) {
    fs_maps.push_back(random_tensor64({h, w, c}, rng));
    masks.push_back(random_tensor64({h, w, 1}, rng, 0.0, 1.0));
  }
  AttentionParamsT<double> params;
  params.wq = random_tensor64({c, d_model}, rng, -0.5, 0.5);
  params.bq = random_tensor64({d_model}, rng, -0.2, 0.2);
  params.wk = random_tensor64({c, d_model}, rng, -0.5, 0.5);
  params.bk = random_tensor64({d_model}, rng, -0.2, 0.2);
  params.head_count = heads;

  Graph<double> g;
  AttnParamNodes<double> nodes{g.leaf(params.wq), g.leaf(params.bq), g.leaf(params.wk),
                               g.leaf(params.bk), heads};
  TokenMatrixT<double> fq = flatten_features(fq_map);
  auto [fs, v] = assemble_support_tokens<double>(fs_maps, masks);
  auto out_id = multi_head_dcama<double>(g, fq, fs, v, nodes);
  const Tensor64& out = g.value(out_id);

  // oracle inputs as plain nested vectors
  auto to_rows = [](const Tensor64& t) {
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(t.dim(0)),
                                          std::vector<double>(static_cast<std::size_t>(t.dim(1))));
    for (int i = 0; i < t.dim(0); ++i)
      for (int j = 0; j < t.dim(1); ++j) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = t.at(i, j);
    return rows;
  };
  std::vector<double> vvec(static_cast<std::size_t>(v.dim(0)));
  for (int i = 0; i < v.dim(0); ++i) vvec[static_cast<std::size_t>(i)] = v.at(i, 0);

  std::vector<double> expect =
      naive_multi_head(to_rows(fq.tokens), to_rows(fs.tokens), vvec, to_rows(params.wq),
                       std::vector<double>(params.bq.values().begin(), params.bq.values().end()),
                       to_rows(params.wk),
                       std::vector<double>(params.bk.values().begin(), params.bk.values().end()),
                       heads, h * w);
  REQUIRE(out.dim(0) == static_cast<int>(expect.size()));
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(out.at(static_cast<int>(i), 0) == doctest::Approx(expect[i]).epsilon(1e-10));
}

TEST_CASE("multi_head_dcama with head_count=1 equals plain attention after projection") {
  Rng rng(103);
  const int h = 2, w = 2, c = 4, d_model = 4;
  Tensor fq_map = random_tensor({h, w, c}, rng);
  Tensor fs_map = random_tensor({h, w, c}, rng);
  Tensor mask = random_tensor({h, w, 1}, rng, 0.0f, 1.0f);

  AttentionParams params;
  params.wq = random_tensor({c, d_model}, rng);
  params.bq = random_tensor({d_model}, rng);
  params.wk = random_tensor({c, d_model}, rng);
  params.bk = random_tensor({d_model}, rng);
  params.head_count = 1;

  Graph<float> g;
  AttnParamNodes<float> nodes{g.leaf(params.wq), g.leaf(params.bq), g.leaf(params.wk),
                              g.leaf(params.bk), 1};
  TokenMatrix fq = flatten_features(fq_map);
  std::vector<Tensor> fs_maps{fs_map}, masks{mask};
  auto [fs, v] = assemble_support_tokens<float>(fs_maps, masks);
  auto out = g.value(multi_head_dcama<float>(g, fq, fs, v, nodes));

  Tensor pe = positional_encoding<float>(h * w, c);
  Tensor q = add_rowvec(matmul(add(fq.tokens, pe), params.wq), params.bq);
  Tensor k = add_rowvec(matmul(add(fs.tokens, pe), params.wk), params.bk);
  Tensor expect = scaled_dot_product_attention(q, k, v);
  CHECK(max_abs_diff(out, expect) < 1e-6f);
}

TEST_CASE("dcama_unit: all-ones and all-zeros masks, duplication invariance") {
  Rng rng(107);
  const int h = 3, w = 3, c = 4, d_model = 8, heads = 4;
  AttentionParams params;
  params.wq = random_tensor({c, d_model}, rng);
  params.bq = random_tensor({d_model}, rng);
  params.wk = random_tensor({c, d_model}, rng);
  params.bk = random_tensor({d_model}, rng);
  params.head_count = heads;

  Tensor fq = random_tensor({h, w, c}, rng);
  Tensor fs = random_tensor({h, w, c}, rng);

  auto run = [&](const std::vector<Tensor>& feats, const std::vector<Tensor>& masks) {
    Graph<float> g;
    AttnParamNodes<float> nodes{g.leaf(params.wq), g.leaf(params.bq), g.leaf(params.wk),
                                g.leaf(params.bk), heads};
    return g.value(dcama_unit<float>(g, fq, feats, masks, nodes));
  };

  Tensor ones = Tensor::full({h, w, 1}, 1.0f);
  Tensor out_ones = run({fs}, {ones});
  for (std::int64_t i = 0; i < out_ones.numel(); ++i)
    CHECK(out_ones[i] == doctest::Approx(1.0f).epsilon(1e-6));

  Tensor zeros({h, w, 1});
  Tensor out_zeros = run({fs}, {zeros});
  for (std::int64_t i = 0; i < out_zeros.numel(); ++i)
    CHECK(std::abs(out_zeros[i]) < 1e-6f);

  Tensor soft = random_tensor({h, w, 1}, rng, 0.0f, 1.0f);
  Tensor base = run({fs}, {soft});
  CHECK(base.shape() == Shape{h, w, 1});
  for (int k = 2; k <= 4; ++k) {
    std::vector<Tensor> feats(static_cast<std::size_t>(k), fs);
    std::vector<Tensor> masks(static_cast<std::size_t>(k), soft);
    CHECK(max_abs_diff(base, run(feats, masks)) < 1e-5f);
  }
}

TEST_CASE("identical per-head projections make the head mean equal one head") {
  Rng rng(111);
  const int h = 2, w = 3, c = 4, d_head = 3, heads = 2;
  // both head slices of Wq/Wk are the same block, so every head computes the
  // same attention and the mean must equal a single-head run
  Tensor block_q = random_tensor({c, d_head}, rng);
  Tensor block_k = random_tensor({c, d_head}, rng);
  Tensor wq({c, heads * d_head}), wk({c, heads * d_head});
  for (int i = 0; i < c; ++i)
    for (int hd = 0; hd < heads; ++hd)
      for (int j = 0; j < d_head; ++j) {
        wq.at(i, hd * d_head + j) = block_q.at(i, j);
        wk.at(i, hd * d_head + j) = block_k.at(i, j);
      }
  Tensor fq_map = random_tensor({h, w, c}, rng);
  Tensor fs_map = random_tensor({h, w, c}, rng);
  Tensor mask = random_tensor({h, w, 1}, rng, 0.0f, 1.0f);
  std::vector<Tensor> feats{fs_map}, masks{mask};

  auto run = [&](const Tensor& q, const Tensor& k, int head_count) {
    Graph<float> g;
    AttnParamNodes<float> nodes{g.leaf(q), g.leaf(Tensor({q.dim(1)})), g.leaf(k),
                                g.leaf(Tensor({k.dim(1)})), head_count};
    return g.value(dcama_unit<float>(g, fq_map, feats, masks, nodes));
  };
  Tensor multi = run(wq, wk, heads);
  Tensor single = run(block_q, block_k, 1);
  CHECK(max_abs_diff(multi, single) < 1e-6f);
}

TEST_CASE("dcama unit analytic gradients match finite differences") {
  GradCheckReport rep = dcama_unit_grad_check(3);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(rep.coords_checked > 0);
}

TEST_CASE("the same params process any shot count (n-agnosticism)") {
  Rng rng(109);
  const int h = 2, w = 4, c = 4;
  AttentionParams params;
  params.wq = random_tensor({c, 8}, rng);
  params.bq = random_tensor({8}, rng);
  params.wk = random_tensor({c, 8}, rng);
  params.bk = random_tensor({8}, rng);
  params.head_count = 2;

  Tensor fq = random_tensor({h, w, c}, rng);
  for (int n = 1; n <= 5; ++n) {
    std::vector<Tensor> feats, masks;
    for (int j = 0; j < n; ++j) {
      feats.push_back(random_tensor({h, w, c}, rng));
      masks.push_back(random_tensor({h, w, 1}, rng, 0.0f, 1.0f));
    }
    Graph<float> g;
    AttnParamNodes<float> nodes{g.leaf(params.wq), g.leaf(params.bq), g.leaf(params.wk),
                                g.leaf(params.bk), params.head_count};
    Tensor out = g.value(dcama_unit<float>(g, fq, feats, masks, nodes));
    CHECK(out.shape() == Shape{h, w, 1});
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      CHECK(out[i] >= -1e-6f);
      CHECK(out[i] <= 1.0f + 1e-6f);
    }
  }
}
