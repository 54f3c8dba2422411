#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "dcama/graph.hpp"
#include "dcama/pipeline.hpp"
#include "dcama/rng.hpp"

namespace dcama {

// Relative error convention shared by all gradient checks.
inline double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Central-difference check of an arbitrary scalar-valued graph function
// against its recorded gradient. `f` must be deterministic; a double
// evaluation guards against hidden state. Returns the max relative error
// over all elements of x.
template <class T>
T grad_check(const std::function<typename Graph<T>::Id(Graph<T>&, typename Graph<T>::Id)>& f,
             const BasicTensor<T>& x, T eps) {
  auto eval = [&](const BasicTensor<T>& point) {
    Graph<T> g;
    auto in = g.leaf(point, false);
    return g.value(f(g, in)).item();
  };
  const T base1 = eval(x);
  const T base2 = eval(x);
  if (base1 != base2) throw NumericError("grad_check: function is not deterministic");

  Graph<T> g;
  auto in = g.leaf(x, true);
  auto out = f(g, in);
  if (g.value(out).numel() != 1) throw DimensionError("grad_check: f must return a scalar");
  g.backward(out);
  BasicTensor<T> analytic = g.grad(in);

  T worst = 0;
  BasicTensor<T> probe = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T saved = probe[i];
    probe[i] = saved + eps;
    const T up = eval(probe);
    probe[i] = saved - eps;
    const T down = eval(probe);
    probe[i] = saved;
    const double numeric = (static_cast<double>(up) - down) / (2.0 * static_cast<double>(eps));
    worst = std::max(worst, static_cast<T>(grad_rel_error(analytic[i], numeric)));
  }
  return worst;
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  int coords_checked = 0;
  std::string worst_tensor;
};

// Finite-difference check of d(bce(forward))/d(weights) for the full pipeline
// in 64-bit mode. Checks the largest-magnitude analytic coordinates of every
// parameter tensor (FD over every coordinate of a full model is not feasible).
inline GradCheckReport pipeline_grad_check(const ModelWeightsT<double>& weights,
                                           const EpisodeFeaturesT<double>& features,
                                           const BasicTensor<double>& query_mask,
                                           const ModelConfig& cfg, int coords_per_tensor = 4,
                                           double eps = 1e-5) {
  auto loss_of = [&](const ModelWeightsT<double>& w) {
    Graph<double> g;
    auto wn = insert_weights(g, w, false);
    auto fwd = forward_graph(g, wn, features, cfg);
    auto target = g.constant(query_mask.reshaped({features.input_h, features.input_w}));
    return g.value(g.bce_mean(fwd.prob_fg, target)).item();
  };

  Graph<double> g;
  auto wn = insert_weights(g, weights, true);
  auto fwd = forward_graph(g, wn, features, cfg);
  auto target = g.constant(query_mask.reshaped({features.input_h, features.input_w}));
  auto loss = g.bce_mean(fwd.prob_fg, target);
  g.backward(loss);

  // gradients in for_each_param order
  std::vector<BasicTensor<double>> grads;
  for (const auto& [den, layers] : wn.attention)
    for (const auto& n : layers) {
      grads.push_back(g.grad(n.wq));
      grads.push_back(g.grad(n.bq));
      grads.push_back(g.grad(n.wk));
      grads.push_back(g.grad(n.bk));
    }
  for (const auto& [den, f] : wn.fusion) {
    for (const auto& c : f.raise_blocks) {
      grads.push_back(g.grad(c.w));
      grads.push_back(g.grad(c.b));
    }
    for (const auto& c : f.post_blocks) {
      grads.push_back(g.grad(c.w));
      grads.push_back(g.grad(c.b));
    }
  }
  for (const auto& c : wn.mixer) {
    grads.push_back(g.grad(c.w));
    grads.push_back(g.grad(c.b));
  }

  GradCheckReport report;
  ModelWeightsT<double> probe = weights;
  std::vector<std::pair<std::string, BasicTensor<double>*>> tensors;
  for_each_param<double>(probe, [&](const std::string& name, BasicTensor<double>& t) {
    tensors.emplace_back(name, &t);
  });
  if (tensors.size() != grads.size())
    throw DimensionError("pipeline_grad_check: gradient count mismatch");

  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    const BasicTensor<double>& grad = grads[ti];
    BasicTensor<double>& tensor = *tensors[ti].second;
    // largest-|gradient| coordinates are the numerically meaningful probes
    std::vector<std::int64_t> order(static_cast<std::size_t>(grad.numel()));
    for (std::int64_t i = 0; i < grad.numel(); ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
      if (std::abs(grad[a]) != std::abs(grad[b])) return std::abs(grad[a]) > std::abs(grad[b]);
      return a < b;
    });
    const int count = std::min<std::int64_t>(coords_per_tensor, grad.numel());
    for (int c = 0; c < count; ++c) {
      const std::int64_t i = order[static_cast<std::size_t>(c)];
      const double saved = tensor[i];
      const double h = eps * std::max(1.0, std::abs(saved));
      tensor[i] = saved + h;
      const double up = loss_of(probe);
      tensor[i] = saved - h;
      const double down = loss_of(probe);
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = grad_rel_error(grad[i], numeric);
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_tensor = tensors[ti].first;
      }
      ++report.coords_checked;
    }
  }
  return report;
}

// Exhaustive finite-difference check of an isolated DCAMA unit's projection
// parameters (64-bit). Returns the max relative error over every coordinate
// of Wq, bq, Wk, bk.
inline GradCheckReport dcama_unit_grad_check(std::uint64_t seed, int h = 3, int w = 4, int c = 6,
                                             int d_model = 8, int heads = 2, int shots = 2,
                                             double eps = 1e-6) {
  Rng rng(derive_seed(seed, "unit-gradcheck"));
  auto rand_tensor = [&](Shape shape, double lo, double hi) {
    BasicTensor<double> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
  };

  BasicTensor<double> fq = rand_tensor({h, w, c}, -1.0, 1.0);
  std::vector<BasicTensor<double>> fs, ms;
  for (int j = 0; j < shots; ++j) {
    fs.push_back(rand_tensor({h, w, c}, -1.0, 1.0));
    ms.push_back(rand_tensor({h, w, 1}, 0.0, 1.0));
  }
  // a fixed weighting makes the scalar loss sensitive to every output pixel
  BasicTensor<double> pixel_weights = rand_tensor({h, w, 1}, 0.5, 1.5);

  AttentionParamsT<double> params;
  params.wq = rand_tensor({c, d_model}, -0.5, 0.5);
  params.bq = rand_tensor({d_model}, -0.1, 0.1);
  params.wk = rand_tensor({c, d_model}, -0.5, 0.5);
  params.bk = rand_tensor({d_model}, -0.1, 0.1);
  params.head_count = heads;

  auto loss_of = [&](const AttentionParamsT<double>& p) {
    Graph<double> g;
    AttnParamNodes<double> nodes{g.leaf(p.wq), g.leaf(p.bq), g.leaf(p.wk), g.leaf(p.bk), heads};
    auto out = dcama_unit<double>(g, fq, fs, ms, nodes);
    return g.value(g.sum(g.mul(out, g.constant(pixel_weights)))).item();
  };

  Graph<double> g;
  AttnParamNodes<double> nodes{g.leaf(params.wq, true), g.leaf(params.bq, true),
                               g.leaf(params.wk, true), g.leaf(params.bk, true), heads};
  auto out = dcama_unit<double>(g, fq, fs, ms, nodes);
  auto loss = g.sum(g.mul(out, g.constant(pixel_weights)));
  g.backward(loss);

  GradCheckReport report;
  const std::vector<std::pair<typename Graph<double>::Id, BasicTensor<double>*>> checks = {
      {nodes.wq, &params.wq}, {nodes.bq, &params.bq}, {nodes.wk, &params.wk}, {nodes.bk, &params.bk}};
  const char* names[] = {"Wq", "bq", "Wk", "bk"};
  for (std::size_t t = 0; t < checks.size(); ++t) {
    const BasicTensor<double>& grad = g.grad(checks[t].first);
    BasicTensor<double>& tensor = *checks[t].second;
    for (std::int64_t i = 0; i < tensor.numel(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + eps;
      const double up = loss_of(params);
      tensor[i] = saved - eps;
      const double down = loss_of(params);
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      // the key bias shifts every score row uniformly, so softmax makes its
      // true gradient exactly zero; when analytic and numeric both sit at the
      // finite-difference noise floor they agree as zeros
      const bool both_zero = std::abs(grad[i]) <= 1e-8 && std::abs(numeric) <= 1e-8;
      const double err = both_zero ? 0.0 : grad_rel_error(grad[i], numeric);
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_tensor = names[t];
      }
      ++report.coords_checked;
    }
  }
  return report;
}

}  // namespace dcama
