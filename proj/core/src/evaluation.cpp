#include "dcama/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "dcama/dtc.hpp"

namespace dcama {

namespace {
using json = nlohmann::ordered_json;

void require_binary_pair(const Tensor& pred, const Tensor& gt, const char* op) {
  if (!pred.same_shape(gt))
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(pred.shape()) +
                         " vs " + shape_str(gt.shape()));
}

}  // namespace

double iou(const Tensor& pred, const Tensor& gt) {
  require_binary_pair(pred, gt, "iou");
  std::int64_t inter = 0, uni = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] > 0.5f, g = gt[i] > 0.5f;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

void MetricAccumulator::add(const Tensor& pred, const Tensor& gt, int class_id) {
  require_binary_pair(pred, gt, "MetricAccumulator::add");
  std::int64_t inter = 0, uni = 0, bg_inter = 0, bg_uni = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] > 0.5f, g = gt[i] > 0.5f;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
    bg_inter += (!p && !g) ? 1 : 0;
    bg_uni += (!p || !g) ? 1 : 0;
  }
  ClassCounts& c = per_class_[class_id];
  c.inter += inter;
  c.uni += uni;
  c.episode_iou_sum += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  c.episodes += 1;
  fg_inter_ += inter;
  fg_union_ += uni;
  bg_inter_ += bg_inter;
  bg_union_ += bg_uni;
  episodes_ += 1;
}

void MetricAccumulator::merge(const MetricAccumulator& other) {
  for (const auto& [cls, c] : other.per_class_) {
    ClassCounts& mine = per_class_[cls];
    mine.inter += c.inter;
    mine.uni += c.uni;
    mine.episode_iou_sum += c.episode_iou_sum;
    mine.episodes += c.episodes;
  }
  fg_inter_ += other.fg_inter_;
  fg_union_ += other.fg_union_;
  bg_inter_ += other.bg_inter_;
  bg_union_ += other.bg_union_;
  episodes_ += other.episodes_;
}

double miou_finalize(const MetricAccumulator& acc, const std::vector<int>& class_set,
                     MiouMode mode, std::vector<int>* skipped) {
  double sum = 0.0;
  int counted = 0;
  for (int cls : class_set) {
    auto it = acc.per_class().find(cls);
    if (it == acc.per_class().end() || it->second.uni == 0 || it->second.episodes == 0) {
      if (skipped) skipped->push_back(cls);
      continue;
    }
    const auto& c = it->second;
    if (mode == MiouMode::kAccumulateCounts)
      sum += static_cast<double>(c.inter) / static_cast<double>(c.uni);
    else
      sum += c.episode_iou_sum / static_cast<double>(c.episodes);
    ++counted;
  }
  if (counted == 0) return 0.0;
  return sum / counted;
}

double fb_iou(const MetricAccumulator& acc) {
  if (acc.episodes() == 0) throw DimensionError("fb_iou: empty accumulator");
  const double fg = acc.fg_union() == 0
                        ? 1.0
                        : static_cast<double>(acc.fg_intersection()) / acc.fg_union();
  const double bg = acc.bg_union() == 0
                        ? 1.0
                        : static_cast<double>(acc.bg_intersection()) / acc.bg_union();
  return 0.5 * (fg + bg);
}

double bce_loss(const Tensor& prob, const Tensor& target) {
  require_binary_pair(prob, target, "bce_loss");
  constexpr double eps = 1e-7;
  double acc = 0.0;
  for (std::int64_t i = 0; i < prob.numel(); ++i) {
    const double p = std::clamp(static_cast<double>(prob[i]), eps, 1.0 - eps);
    const double y = target[i] > 0.5f ? 1.0 : 0.0;
    acc -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return acc / static_cast<double>(prob.numel());
}

EpisodeFeatures episode_features(const Episode& episode, const BackboneConfig& backbone) {
  if (episode.support.empty()) throw DimensionError("episode_features: no supports");
  EpisodeFeatures f;
  f.input_h = episode.query.image.dim(0);
  f.input_w = episode.query.image.dim(1);
  f.query = extract_features(episode.query.image, backbone);
  for (const auto& s : episode.support) {
    f.supports.push_back(extract_features(s.image, backbone));
    f.support_masks.push_back(s.mask);
  }
  return f;
}

Tensor predict_mask(const Tensor& prob) {
  Tensor out(prob.shape());
  for (std::int64_t i = 0; i < prob.numel(); ++i) out[i] = prob[i] > 0.5f ? 1.0f : 0.0f;
  return out;
}

Tensor ensemble_predict(EnsembleStrategy strategy, std::span<const Tensor> prob_maps) {
  if (prob_maps.empty()) throw DimensionError("ensemble_predict: empty map list");
  for (const auto& m : prob_maps)
    if (!m.same_shape(prob_maps[0]))
      throw DimensionError("ensemble_predict: probability map shapes differ");
  const int n = static_cast<int>(prob_maps.size());
  Tensor out(prob_maps[0].shape());
  if (strategy == EnsembleStrategy::kVote) {
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      int votes = 0;
      for (const auto& m : prob_maps) votes += m[i] > 0.5f ? 1 : 0;
      out[i] = 2 * votes > n ? 1.0f : 0.0f;  // tie -> background
    }
  } else {
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      double mean = 0.0;
      for (const auto& m : prob_maps) mean += static_cast<double>(m[i]);
      mean /= n;
      out[i] = mean > 0.5 ? 1.0f : 0.0f;
    }
  }
  return out;
}

// ---- training ----------------------------------------------------------------

namespace {

ModelWeights zeros_like(const ModelWeights& w) {
  ModelWeights z = w;
  for_each_param<float>(z, [](const std::string&, Tensor& t) { t = Tensor(t.shape()); });
  return z;
}

}  // namespace

TrainState make_train_state(const ModelConfig& cfg, std::uint64_t seed) {
  TrainState st;
  st.weights = init_weights(cfg, seed);
  st.velocity = zeros_like(st.weights);
  return st;
}

void sgd_update(Tensor& w, Tensor& v, const Tensor& g, const TrainHyper& hyper) {
  if (!g.same_shape(w) || !v.same_shape(w))
    throw DimensionError("sgd_update: weight/velocity/gradient shapes differ");
  for (std::int64_t i = 0; i < w.numel(); ++i) {
    v[i] = hyper.momentum * v[i] + (g[i] + hyper.weight_decay * w[i]);
    w[i] -= hyper.lr * v[i];
  }
}

float train_step(TrainState& state, const EpisodeFeatures& features, const Tensor& query_mask,
                 const ModelConfig& cfg, const ForwardOptions& opt) {
  if (query_mask.rank() != 3 || query_mask.dim(0) != features.input_h ||
      query_mask.dim(1) != features.input_w)
    throw DimensionError("train_step: query mask shape " + shape_str(query_mask.shape()));

  Graph<float> g;
  WeightNodes<float> wn = insert_weights(g, state.weights, /*trainable=*/true);
  ForwardNodes<float> fwd = forward_graph(g, wn, features, cfg, opt);
  auto target = g.constant(query_mask.reshaped({features.input_h, features.input_w}));
  auto loss = g.bce_mean(fwd.prob_fg, target);
  const float loss_value = g.value(loss).item();
  g.backward(loss);

  // collect gradients in traversal order, mirroring for_each_param
  std::vector<const Tensor*> grads;
  auto collect = [&](const AttnParamNodes<float>& n) {
    grads.push_back(&g.grad(n.wq));
    grads.push_back(&g.grad(n.bq));
    grads.push_back(&g.grad(n.wk));
    grads.push_back(&g.grad(n.bk));
  };
  for (const auto& [den, layers] : wn.attention)
    for (const auto& n : layers) collect(n);
  for (const auto& [den, f] : wn.fusion) {
    for (const auto& c : f.raise_blocks) {
      grads.push_back(&g.grad(c.w));
      grads.push_back(&g.grad(c.b));
    }
    for (const auto& c : f.post_blocks) {
      grads.push_back(&g.grad(c.w));
      grads.push_back(&g.grad(c.b));
    }
  }
  for (const auto& c : wn.mixer) {
    grads.push_back(&g.grad(c.w));
    grads.push_back(&g.grad(c.b));
  }

  for (const Tensor* t : grads)
    if (!t->all_finite())
      throw NumericError("train_step: non-finite gradient at step " +
                         std::to_string(state.step));

  std::vector<Tensor*> params, velocity;
  for_each_param<float>(state.weights, [&](const std::string&, Tensor& t) { params.push_back(&t); });
  for_each_param<float>(state.velocity,
                        [&](const std::string&, Tensor& t) { velocity.push_back(&t); });
  if (params.size() != grads.size() || velocity.size() != grads.size())
    throw DimensionError("train_step: parameter/gradient count mismatch");

  for (std::size_t p = 0; p < params.size(); ++p)
    sgd_update(*params[p], *velocity[p], *grads[p], state.hyper);
  state.step += 1;
  return loss_value;
}

TrainRunResult train_toy(const ToyDataset& ds, const ModelConfig& cfg, const TrainRunConfig& run,
                         const TrainState* resume, std::uint64_t resume_sampler_state) {
  if (run.steps < 1) throw DimensionError("train_toy: steps must be >= 1");
  std::vector<int> class_ids(static_cast<std::size_t>(ds.num_classes()));
  for (int i = 0; i < ds.num_classes(); ++i) class_ids[static_cast<std::size_t>(i)] = i;
  const auto folds = make_folds(class_ids, run.folds);
  if (run.fold < 0 || run.fold >= run.folds)
    throw DimensionError("train_toy: fold index out of range");
  const FoldSplit& fold = folds[static_cast<std::size_t>(run.fold)];
  if (fold.train_classes.empty()) throw DimensionError("train_toy: fold has no train classes");

  TrainRunResult out;
  Rng sampler(derive_seed(run.seed, "train-episodes"));
  if (resume) {
    out.state = *resume;
    sampler.set_state(resume_sampler_state);
  } else {
    out.state = make_train_state(cfg, derive_seed(run.seed, "weights"));
    out.state.hyper = run.hyper;
  }

  for (int step = 0; step < run.steps; ++step) {
    Episode ep = sample_episode(ds, fold, run.shots, sampler, /*from_test=*/false);
    EpisodeFeatures feats = episode_features(ep, cfg.backbone);
    try {
      out.losses.push_back(train_step(out.state, feats, ep.query.mask, cfg));
    } catch (const NumericError&) {
      out.diverged = true;  // the failed step left the state untouched
      break;
    }
  }
  out.sampler_state = sampler.state();
  return out;
}

void save_train_state(const std::filesystem::path& dir, const TrainState& state,
                      const ModelConfig& cfg, std::uint64_t seed, std::uint64_t sampler_state) {
  save_checkpoint(dir, state.weights, cfg, seed);
  for_each_param<float>(state.velocity, [&](const std::string& name, const Tensor& t) {
    save_dtc(dir / ("velocity." + name + ".dtc"), t);
  });
  json j;
  j["step"] = state.step;
  j["lr"] = state.hyper.lr;
  j["momentum"] = state.hyper.momentum;
  j["weight_decay"] = state.hyper.weight_decay;
  j["sampler_state"] = sampler_state;
  std::ofstream out(dir / "train_state.json");
  if (!out) throw IoError("cannot write train state in " + dir.string());
  out << j.dump(2) << "\n";
}

LoadedTrainState load_train_state(const std::filesystem::path& dir) {
  Checkpoint ck = load_checkpoint(dir);
  LoadedTrainState out;
  out.config = ck.config;
  out.seed = ck.seed;
  out.state.weights = std::move(ck.weights);
  out.state.velocity = zeros_like(out.state.weights);
  std::ifstream in(dir / "train_state.json");
  if (!in) throw IoError("missing train_state.json in " + dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed train state: " + std::string(e.what()));
  }
  out.state.step = j["step"].get<std::int64_t>();
  out.state.hyper.lr = j["lr"].get<float>();
  out.state.hyper.momentum = j["momentum"].get<float>();
  out.state.hyper.weight_decay = j["weight_decay"].get<float>();
  out.sampler_state = j["sampler_state"].get<std::uint64_t>();
  for_each_param<float>(out.state.velocity, [&](const std::string& name, Tensor& t) {
    t = load_dtc_f32(dir / ("velocity." + name + ".dtc"));
  });
  return out;
}

// ---- attention export -----------------------------------------------------------

Tensor export_attention_summary(std::span<const AttentionRecord> records, int query_r,
                                int query_c, int input_h, int input_w, int out_h, int out_w) {
  if (records.empty())
    throw DimensionError("export_attention_summary: no recorded attention maps; run forward "
                         "with record_attention");
  const int n = records[0].image_count;
  Tensor out({n, out_h, out_w});
  for (const auto& rec : records) {
    if (rec.image_count != n)
      throw DimensionError("export_attention_summary: inconsistent support counts");
    const int h = rec.image_h, w = rec.image_w;
    const int qr = std::min(h - 1, query_r * h / input_h);
    const int qc = std::min(w - 1, query_c * w / input_w);
    const int q_token = qr * w + qc;
    if (q_token >= rec.weights.dim(0))
      throw DimensionError("export_attention_summary: query pixel outside the grid");
    for (int img = 0; img < n; ++img) {
      Tensor slice({h, w, 1});
      for (int i = 0; i < h * w; ++i) slice[i] = rec.weights.at(q_token, img * h * w + i);
      Tensor up = bilinear_resize(slice, out_h, out_w);
      for (int i = 0; i < out_h * out_w; ++i)
        out[static_cast<std::int64_t>(img) * out_h * out_w + i] += up[i];
    }
  }
  const float inv = 1.0f / static_cast<float>(records.size());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= inv;
  return out;
}

// ---- evaluation harness ------------------------------------------------------------

namespace {

struct EpisodeOutcome {
  Tensor pred;
  Tensor gt;
  int class_id = -1;
  std::map<int, Tensor> intermediate;  // scale -> resized binary mask
};

EpisodeOutcome evaluate_episode(const ToyDataset& ds, const EpisodeSpec& spec,
                                const ModelWeights& weights, const ModelConfig& cfg,
                                const EvalConfig& eval) {
  Episode ep = materialize_episode(ds, spec);
  EpisodeFeatures feats = episode_features(ep, cfg.backbone);
  ForwardOptions opt;
  opt.zero_background = eval.zero_background;

  EpisodeOutcome out;
  out.class_id = ep.class_id;
  out.gt = ep.query.mask.reshaped({feats.input_h, feats.input_w});

  if (eval.strategy == "onepass") {
    InferenceResult res = infer(weights, feats, cfg, opt);
    out.pred = predict_mask(res.prob);
    if (eval.intermediate_masks)
      for (const auto& [den, agg] : res.aggregated)
        out.intermediate[den] = intermediate_mask_eval(agg, feats.input_h, feats.input_w).mask;
    return out;
  }

  // ensemble strategies: n separate 1-shot passes
  std::vector<Tensor> maps;
  for (std::size_t j = 0; j < feats.supports.size(); ++j) {
    EpisodeFeatures single;
    single.input_h = feats.input_h;
    single.input_w = feats.input_w;
    single.query = feats.query;
    single.supports.push_back(feats.supports[j]);
    single.support_masks.push_back(feats.support_masks[j]);
    maps.push_back(infer(weights, single, cfg, opt).prob);
  }
  const EnsembleStrategy strat =
      eval.strategy == "vote" ? EnsembleStrategy::kVote : EnsembleStrategy::kAverage;
  out.pred = ensemble_predict(strat, maps);
  return out;
}

}  // namespace

std::int64_t kv_token_count(const ModelConfig& cfg, int shots) {
  const auto shapes = feature_shapes(cfg.input_h, cfg.input_w);
  std::int64_t per_shot = 0;
  for (int den : cfg.attended_scales)
    per_shot += static_cast<std::int64_t>(shapes.at(den).first) * shapes.at(den).second;
  return per_shot * shots;
}

MetricReport run_evaluation(const ToyDataset& ds, const ModelWeights& weights,
                            const ModelConfig& cfg, const EvalConfig& eval) {
  if (eval.episodes < 1) throw DimensionError("run_evaluation: episodes must be >= 1");
  if (eval.strategy != "onepass" && eval.strategy != "vote" && eval.strategy != "average")
    throw DimensionError("run_evaluation: unknown strategy \"" + eval.strategy + "\"");

  std::vector<int> class_ids(static_cast<std::size_t>(ds.num_classes()));
  for (int i = 0; i < ds.num_classes(); ++i) class_ids[static_cast<std::size_t>(i)] = i;
  const auto folds = make_folds(class_ids, eval.folds);
  if (eval.fold < 0 || eval.fold >= eval.folds)
    throw DimensionError("run_evaluation: fold index out of range");
  const FoldSplit& fold = folds[static_cast<std::size_t>(eval.fold)];

  Rng sampler(derive_seed(eval.seed, "episodes"));
  std::vector<EpisodeSpec> specs;
  specs.reserve(static_cast<std::size_t>(eval.episodes));
  for (int i = 0; i < eval.episodes; ++i)
    specs.push_back(sample_episode_spec(ds, fold, eval.shots, sampler, /*from_test=*/true));

  const int workers = std::max(1, eval.workers);
  std::vector<MetricAccumulator> accs(static_cast<std::size_t>(workers));
  std::vector<std::map<int, MetricAccumulator>> inter_accs(static_cast<std::size_t>(workers));

  auto work = [&](int wid) {
    for (std::size_t i = static_cast<std::size_t>(wid); i < specs.size();
         i += static_cast<std::size_t>(workers)) {
      EpisodeOutcome o = evaluate_episode(ds, specs[i], weights, cfg, eval);
      accs[static_cast<std::size_t>(wid)].add(o.pred, o.gt, o.class_id);
      for (const auto& [den, mask] : o.intermediate)
        inter_accs[static_cast<std::size_t>(wid)][den].add(mask, o.gt, o.class_id);
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int wkr = 0; wkr < workers; ++wkr) pool.emplace_back(work, wkr);
    for (auto& t : pool) t.join();
  }

  MetricAccumulator acc;
  for (const auto& a : accs) acc.merge(a);
  std::map<int, MetricAccumulator> inter;
  for (auto& im : inter_accs)
    for (auto& [den, a] : im) inter[den].merge(a);

  MetricReport rep;
  rep.fold = eval.fold;
  rep.shots = eval.shots;
  rep.episodes = eval.episodes;
  rep.seed = eval.seed;
  rep.strategy = eval.strategy;
  rep.ablation = eval.zero_background ? "zero-background" : "none";
  rep.miou = miou_finalize(acc, fold.test_classes, MiouMode::kAccumulateCounts);
  rep.miou_episode_mean = miou_finalize(acc, fold.test_classes, MiouMode::kEpisodeMean);
  rep.fb_iou = fb_iou(acc);
  for (int cls : fold.test_classes) {
    auto it = acc.per_class().find(cls);
    if (it != acc.per_class().end() && it->second.uni > 0)
      rep.per_class[cls] =
          static_cast<double>(it->second.inter) / static_cast<double>(it->second.uni);
  }
  for (const auto& [den, a] : inter)
    rep.intermediate_miou[den] = miou_finalize(a, fold.test_classes, MiouMode::kAccumulateCounts);
  return rep;
}

std::string metric_report_to_json(const MetricReport& r) {
  json j;
  j["fold"] = r.fold;
  j["shots"] = r.shots;
  j["episodes"] = r.episodes;
  j["seed"] = r.seed;
  j["strategy"] = r.strategy;
  j["ablation"] = r.ablation;
  j["miou"] = r.miou;
  j["fb_iou"] = r.fb_iou;
  j["miou_episode_mean"] = r.miou_episode_mean;
  json pc = json::object();
  for (const auto& [cls, v] : r.per_class) pc[std::to_string(cls)] = v;
  j["per_class"] = pc;
  if (!r.intermediate_miou.empty()) {
    json im = json::object();
    for (const auto& [den, v] : r.intermediate_miou) im[scale_name(den)] = v;
    j["intermediate_miou"] = im;
  }
  return j.dump(2) + "\n";
}

std::vector<BenchRow> bench_nshot(const ToyDataset& ds, const ModelWeights& weights,
                                  const ModelConfig& cfg, int max_shots, int episodes_per_n,
                                  std::uint64_t seed) {
  if (max_shots < 1 || episodes_per_n < 1)
    throw DimensionError("bench_nshot: shots and episodes must be >= 1");
  std::vector<int> class_ids(static_cast<std::size_t>(ds.num_classes()));
  for (int i = 0; i < ds.num_classes(); ++i) class_ids[static_cast<std::size_t>(i)] = i;
  FoldSplit whole;  // benchmark over the full class set
  whole.test_classes = class_ids;

  // Shot counts are interleaved round-robin so clock drift hits every n
  // equally; the first rounds warm caches and are excluded from the stats.
  const int warmup = 2;
  std::vector<Rng> samplers;
  std::vector<std::vector<double>> times_ms(static_cast<std::size_t>(max_shots));
  std::vector<std::int64_t> peaks(static_cast<std::size_t>(max_shots), 0);
  for (int n = 1; n <= max_shots; ++n)
    samplers.emplace_back(derive_seed(seed, "bench-n" + std::to_string(n)));

  for (int e = 0; e < episodes_per_n + warmup; ++e) {
    for (int n = 1; n <= max_shots; ++n) {
      EpisodeSpec spec =
          sample_episode_spec(ds, whole, n, samplers[static_cast<std::size_t>(n - 1)], true);
      Episode ep = materialize_episode(ds, spec);
      memory::reset_peak();
      const auto t0 = std::chrono::steady_clock::now();
      EpisodeFeatures feats = episode_features(ep, cfg.backbone);
      InferenceResult res = infer(weights, feats, cfg, {});
      const auto t1 = std::chrono::steady_clock::now();
      (void)res;
      if (e < warmup) continue;
      times_ms[static_cast<std::size_t>(n - 1)].push_back(
          std::chrono::duration<double, std::milli>(t1 - t0).count());
      peaks[static_cast<std::size_t>(n - 1)] =
          std::max(peaks[static_cast<std::size_t>(n - 1)], memory::peak_bytes());
    }
  }

  std::vector<BenchRow> rows;
  for (int n = 1; n <= max_shots; ++n) {
    auto& times = times_ms[static_cast<std::size_t>(n - 1)];
    std::sort(times.begin(), times.end());
    BenchRow row;
    row.shots = n;
    row.episodes = episodes_per_n;
    row.median_ms = times[times.size() / 2];
    double mean = 0;
    for (double t : times) mean += t;
    row.mean_ms = mean / static_cast<double>(times.size());
    row.peak_bytes = peaks[static_cast<std::size_t>(n - 1)];
    row.kv_tokens = kv_token_count(cfg, n);
    rows.push_back(row);
  }
  return rows;
}

std::string bench_rows_to_csv(std::span<const BenchRow> rows) {
  std::ostringstream out;
  out << "shots,episodes,median_ms,mean_ms,peak_bytes,kv_tokens\n";
  for (const auto& r : rows) {
    out << r.shots << "," << r.episodes << "," << r.median_ms << "," << r.mean_ms << ","
        << r.peak_bytes << "," << r.kv_tokens << "\n";
  }
  return out.str();
}

}  // namespace dcama
