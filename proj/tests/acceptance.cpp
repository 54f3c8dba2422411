// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Returns nonzero if any fails.
//
// Usage: acceptance [--cli PATH] [--scratch DIR]
//   --cli      path to the dcama CLI binary (needed for the determinism check)
//   --scratch  working directory for generated artifacts (default: temp dir)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dcama/evaluation.hpp"
#include "dcama/gradcheck.hpp"

using namespace dcama;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Outcome> outcomes;

void record(int id, bool pass, const std::string& detail) {
  outcomes.push_back({id, pass, detail});
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(Shape shape, Rng& rng, float lo, float hi) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- shared fixtures -------------------------------------------------------

struct Fixture {
  ModelConfig cfg;                 // paper-shaped default: 96x96, heads 4, d_model 64
  ToyDataset dataset;              // seed-42 dataset for the generic criteria
  ModelWeights random_weights;     // seeded init
  // criterion 7 artifacts, reused by 3/4/8/9
  ToyDataset train_dataset;        // seed-1 dataset
  ModelWeights trained;
  ModelWeights untrained;
  double bce_ratio = 1.0;
  double miou_trained = 0.0;
  double miou_untrained = 0.0;
  double train_seconds = 0.0;
  float first_loss = 0.0f;
  std::vector<float> losses;
};

EpisodeFeatures features_for(const Episode& ep, const ModelConfig& cfg) {
  return episode_features(ep, cfg.backbone);
}

// ---- criteria --------------------------------------------------------------

void criterion_1_row_stochastic() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int mq = 1 + rng.index(24);
    const int ms = 1 + rng.index(64);
    const int d = 1 + rng.index(16);
    Tensor q = random_tensor({mq, d}, rng, -3.0f, 3.0f);
    Tensor k = random_tensor({ms, d}, rng, -3.0f, 3.0f);
    const float inv = 1.0f / std::sqrt(static_cast<float>(d));
    Tensor weights = softmax_rows(scale(matmul_nt(q, k), inv));
    for (int i = 0; i < mq; ++i) {
      double sum = 0.0;
      for (int j = 0; j < ms; ++j) sum += weights.at(i, j);
      worst = std::max(worst, std::abs(sum - 1.0));
    }
  }
  const double secs = seconds_since(t0);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "1000 instances, worst |row sum - 1| = %.2e (tol 1e-6), %.1f s (limit 10)",
                worst, secs);
  record(1, worst < 1e-6 && secs < 10.0, buf);
}

void criterion_2_mask_range(const Fixture& fx) {
  float lo = 1.0f, hi = 0.0f;
  std::vector<int> classes(static_cast<std::size_t>(fx.dataset.num_classes()));
  for (int i = 0; i < fx.dataset.num_classes(); ++i) classes[static_cast<std::size_t>(i)] = i;
  auto folds = make_folds(classes, 2);
  Rng rng(2002);
  for (int n : {1, 2, 5}) {
    Episode ep = sample_episode(fx.dataset, folds[0], n, rng);
    InferenceResult res = infer(fx.random_weights, features_for(ep, fx.cfg), fx.cfg);
    for (const auto& [den, agg] : res.aggregated)
      for (std::int64_t i = 0; i < agg.numel(); ++i) {
        lo = std::min(lo, agg[i]);
        hi = std::max(hi, agg[i]);
      }
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "aggregated masks over n={1,2,5}, all scales: range [%.3g, %.3g] (tol 1e-6 slack)",
                lo, hi);
  record(2, lo >= -1e-6f && hi <= 1.0f + 1e-6f, buf);
}

void criterion_3_invariance(const Fixture& fx) {
  std::vector<int> classes(static_cast<std::size_t>(fx.train_dataset.num_classes()));
  for (int i = 0; i < fx.train_dataset.num_classes(); ++i)
    classes[static_cast<std::size_t>(i)] = i;
  auto folds = make_folds(classes, 2);
  Rng rng(3003);
  Episode ep = sample_episode(fx.train_dataset, folds[0], 3, rng);
  EpisodeFeatures feats = features_for(ep, fx.cfg);
  InferenceResult base = infer(fx.trained, feats, fx.cfg);

  EpisodeFeatures permuted = feats;
  std::rotate(permuted.supports.begin(), permuted.supports.begin() + 1, permuted.supports.end());
  std::rotate(permuted.support_masks.begin(), permuted.support_masks.begin() + 1,
              permuted.support_masks.end());
  const float perm_diff = max_abs_diff(base.prob, infer(fx.trained, permuted, fx.cfg).prob);

  Episode ep1 = sample_episode(fx.train_dataset, folds[0], 1, rng);
  EpisodeFeatures one = features_for(ep1, fx.cfg);
  InferenceResult one_res = infer(fx.trained, one, fx.cfg);
  float dup_diff = 0.0f;
  for (int k : {2, 3}) {
    EpisodeFeatures dup = one;
    for (int j = 1; j < k; ++j) {
      dup.supports.push_back(one.supports[0]);
      dup.support_masks.push_back(one.support_masks[0]);
    }
    dup_diff = std::max(dup_diff, max_abs_diff(one_res.prob, infer(fx.trained, dup, fx.cfg).prob));
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "permutation max-diff %.2e, duplication max-diff %.2e (tol 1e-5)", perm_diff,
                dup_diff);
  record(3, perm_diff < 1e-5f && dup_diff < 1e-5f, buf);
}

void criterion_4_one_shot_consistency(const Fixture& fx) {
  std::vector<int> classes(static_cast<std::size_t>(fx.train_dataset.num_classes()));
  for (int i = 0; i < fx.train_dataset.num_classes(); ++i)
    classes[static_cast<std::size_t>(i)] = i;
  auto folds = make_folds(classes, 2);
  Rng rng(4004);
  Episode ep = sample_episode(fx.train_dataset, folds[0], 1, rng);
  EpisodeFeatures feats = features_for(ep, fx.cfg);

  // the generic n-shot path is the only forward path; two runs at n=1 must be
  // bit-identical
  InferenceResult a = infer(fx.trained, feats, fx.cfg);
  InferenceResult b = infer(fx.trained, feats, fx.cfg);
  const bool forward_bitexact = a.prob == b.prob && a.logits == b.logits;

  // and the n-shot token assembly at n=1 must equal a dedicated 1-shot
  // attention computation, bit for bit
  const int den = 8;
  const AttentionParams& p = fx.trained.attention.at(den)[0];
  const Tensor& fq_map = feats.query.at(den)[0];
  const Tensor& fs_map = feats.supports[0].at(den)[0];
  const int h = fq_map.dim(0), w = fq_map.dim(1), c = fq_map.dim(2);
  Tensor mask = downsample_mask(feats.support_masks[0], h, w);

  Graph<float> g;
  AttnParamNodes<float> nodes{g.leaf(p.wq), g.leaf(p.bq), g.leaf(p.wk), g.leaf(p.bk),
                              p.head_count};
  std::vector<Tensor> fs_list{fs_map}, mask_list{mask};
  Tensor production = g.value(dcama_unit<float>(g, fq_map, fs_list, mask_list, nodes, den));

  // dedicated 1-shot path: direct flatten, no n-shot assembly machinery
  Tensor pe = positional_encoding<float>(h * w, c);
  Tensor q = add_rowvec(matmul(add(fq_map.reshaped({h * w, c}), pe), p.wq), p.bq);
  Tensor k = add_rowvec(matmul(add(fs_map.reshaped({h * w, c}), pe), p.wk), p.bk);
  Tensor v = mask.reshaped({h * w, 1});
  const int dh = p.d_head();
  Tensor mean;
  for (int head = 0; head < p.head_count; ++head) {
    Tensor qh = slice_channels(q, head * dh, dh);
    Tensor kh = slice_channels(k, head * dh, dh);
    Tensor att = matmul_acc64(
        softmax_rows(scale(matmul_nt(qh, kh), 1.0f / std::sqrt(static_cast<float>(dh)))), v);
    mean = head == 0 ? att : add(mean, att);
  }
  Tensor dedicated = scale(mean, 1.0f / static_cast<float>(p.head_count)).reshaped({h, w, 1});

  const bool unit_bitexact = production == dedicated;
  record(4, forward_bitexact && unit_bitexact,
         std::string("forward(n=1) twice bit-identical: ") +
             (forward_bitexact ? "yes" : "NO") +
             "; n-shot path vs dedicated 1-shot unit bit-identical: " +
             (unit_bitexact ? "yes" : "NO"));
}

void criterion_5_gradients(const Fixture& fx) {
  const auto t0 = std::chrono::steady_clock::now();

  // (a) bce(forward) on a 48x48 toy episode, 64-bit
  ToyDatasetConfig small;
  small.num_classes = 2;
  small.images_per_class = 6;
  small.height = small.width = 48;
  ToyDataset ds = generate_toy_dataset(small, derive_seed(5, "gradcheck-data"));
  ModelConfig cfg = fx.cfg;
  cfg.input_h = cfg.input_w = 48;
  auto folds = make_folds({0, 1}, 1);
  Rng rng(derive_seed(5, "gradcheck-episode"));
  Episode ep = sample_episode(ds, folds[0], 1, rng);
  EpisodeFeaturesT<double> feats = episode_features(ep, cfg.backbone).cast<double>();
  ModelWeightsT<double> weights = init_weights(cfg, derive_seed(5, "weights")).cast<double>();
  GradCheckReport pipeline =
      pipeline_grad_check(weights, feats, ep.query.mask.cast<double>(), cfg, 4);

  // (b) isolated DCAMA unit, every projection coordinate
  GradCheckReport unit = dcama_unit_grad_check(5);

  const double secs = seconds_since(t0);
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "pipeline max rel err %.2e (%d coords), unit max rel err %.2e (%d coords), "
                "%.0f s (limit 300)",
                pipeline.max_rel_error, pipeline.coords_checked, unit.max_rel_error,
                unit.coords_checked, secs);
  record(5, pipeline.max_rel_error < 1e-4 && unit.max_rel_error < 1e-4 && secs < 300.0, buf);
}

void criterion_6_metric_oracle() {
  Rng rng(6006);
  MetricAccumulator acc;
  std::map<int, std::pair<std::int64_t, std::int64_t>> naive;  // class -> inter, union
  std::int64_t fgi = 0, fgu = 0, bgi = 0, bgu = 0;
  std::vector<int> classes{0, 1, 2, 3};
  for (int e = 0; e < 100; ++e) {
    const int cls = classes[static_cast<std::size_t>(rng.index(classes.size()))];
    Tensor pred({16, 16});
    Tensor gt({16, 16});
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
      pred[i] = rng.uniform() < 0.45 ? 1.0f : 0.0f;
      gt[i] = rng.uniform() < 0.45 ? 1.0f : 0.0f;
    }
    acc.add(pred, gt, cls);
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
      const bool p = pred[i] > 0.5f, g = gt[i] > 0.5f;
      naive[cls].first += (p && g) ? 1 : 0;
      naive[cls].second += (p || g) ? 1 : 0;
      fgi += (p && g) ? 1 : 0;
      fgu += (p || g) ? 1 : 0;
      bgi += (!p && !g) ? 1 : 0;
      bgu += (!p || !g) ? 1 : 0;
    }
  }
  double naive_miou = 0.0;
  for (int cls : classes)
    naive_miou += static_cast<double>(naive[cls].first) / static_cast<double>(naive[cls].second);
  naive_miou /= static_cast<double>(classes.size());
  const double naive_fb =
      0.5 * (static_cast<double>(fgi) / fgu + static_cast<double>(bgi) / bgu);

  const double impl_miou = miou_finalize(acc, classes);
  const double impl_fb = fb_iou(acc);
  bool counts_exact = acc.fg_intersection() == fgi && acc.fg_union() == fgu &&
                      acc.bg_intersection() == bgi && acc.bg_union() == bgu;
  for (int cls : classes)
    counts_exact = counts_exact && acc.per_class().at(cls).inter == naive[cls].first &&
                   acc.per_class().at(cls).uni == naive[cls].second;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "100 random 16x16 episodes: counts exact %s, miou %.6f==%.6f, fb %.6f==%.6f",
                counts_exact ? "yes" : "NO", impl_miou, naive_miou, impl_fb, naive_fb);
  record(6, counts_exact && impl_miou == naive_miou && impl_fb == naive_fb, buf);
}

void criterion_7_training(Fixture& fx) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t seed = 1;

  fx.train_dataset = generate_toy_dataset(ToyDatasetConfig{}, derive_seed(seed, "dataset"));
  std::vector<int> classes(10);
  for (int i = 0; i < 10; ++i) classes[static_cast<std::size_t>(i)] = i;
  auto folds = make_folds(classes, 2);
  const FoldSplit& fold = folds[0];

  fx.untrained = init_weights(fx.cfg, derive_seed(seed, "weights"));

  // training BCE probe: a fixed set of train-fold episodes
  Rng probe_rng(derive_seed(seed, "probe"));
  std::vector<EpisodeSpec> probe;
  for (int i = 0; i < 10; ++i)
    probe.push_back(sample_episode_spec(fx.train_dataset, fold, 1, probe_rng, false));
  auto probe_bce = [&](const ModelWeights& w) {
    double total = 0.0;
    for (const auto& spec : probe) {
      Episode ep = materialize_episode(fx.train_dataset, spec);
      EpisodeFeatures f = features_for(ep, fx.cfg);
      total += bce_loss(infer(w, f, fx.cfg).prob,
                        ep.query.mask.reshaped({fx.cfg.input_h, fx.cfg.input_w}));
    }
    return total / static_cast<double>(probe.size());
  };
  const double bce0 = probe_bce(fx.untrained);

  TrainRunConfig trc;  // 200 steps, lr 1e-3, momentum 0.9, wd 1e-4
  trc.seed = seed;
  TrainRunResult run = train_toy(fx.train_dataset, fx.cfg, trc);
  fx.trained = run.state.weights;
  fx.losses = run.losses;
  fx.first_loss = run.losses.empty() ? 0.0f : run.losses.front();
  const double bce200 = probe_bce(fx.trained);
  fx.bce_ratio = bce200 / bce0;

  EvalConfig ec;
  ec.fold = 0;
  ec.folds = 2;
  ec.shots = 1;
  ec.episodes = 60;
  ec.seed = seed;
  fx.miou_trained = run_evaluation(fx.train_dataset, fx.trained, fx.cfg, ec).miou;
  fx.miou_untrained = run_evaluation(fx.train_dataset, fx.untrained, fx.cfg, ec).miou;
  fx.train_seconds = seconds_since(t0);

  char buf[220];
  std::snprintf(buf, sizeof(buf),
                "200 steps (lr 1e-3, mom 0.9, wd 1e-4): BCE %.4f -> %.4f (ratio %.3f, limit "
                "0.50); held-out mIoU %.3f vs untrained %.3f (gap %.3f, need 0.15); %.0f s "
                "(limit 600)",
                bce0, bce200, fx.bce_ratio, fx.miou_trained, fx.miou_untrained,
                fx.miou_trained - fx.miou_untrained, fx.train_seconds);
  record(7,
         !run.diverged && fx.bce_ratio <= 0.5 &&
             fx.miou_trained - fx.miou_untrained >= 0.15 && fx.train_seconds < 600.0,
         buf);
}

void criterion_8_strategies(const Fixture& fx) {
  EvalConfig base;
  base.fold = 0;
  base.folds = 2;
  base.shots = 3;
  base.episodes = 30;
  base.seed = 8008;

  std::map<std::string, MetricReport> reports;
  bool valid = true;
  for (const char* strat : {"onepass", "vote", "average"}) {
    EvalConfig ec = base;
    ec.strategy = strat;
    MetricReport rep = run_evaluation(fx.train_dataset, fx.trained, fx.cfg, ec);
    valid = valid && rep.episodes == base.episodes && rep.miou >= 0.0 && rep.miou <= 1.0 &&
            rep.fb_iou >= 0.0 && rep.fb_iou <= 1.0 &&
            !metric_report_to_json(rep).empty();
    reports[strat] = rep;
  }

  // degenerate case: n identical supports must make all three agree exactly
  std::vector<int> classes(10);
  for (int i = 0; i < 10; ++i) classes[static_cast<std::size_t>(i)] = i;
  auto folds = make_folds(classes, 2);
  Rng rng(8009);
  Episode ep = sample_episode(fx.train_dataset, folds[0], 1, rng);
  EpisodeFeatures one = features_for(ep, fx.cfg);
  EpisodeFeatures same = one;
  for (int j = 1; j < 3; ++j) {
    same.supports.push_back(one.supports[0]);
    same.support_masks.push_back(one.support_masks[0]);
  }
  Tensor onepass_pred = predict_mask(infer(fx.trained, same, fx.cfg).prob);
  std::vector<Tensor> maps(3, infer(fx.trained, one, fx.cfg).prob);
  Tensor vote_pred = ensemble_predict(EnsembleStrategy::kVote, maps);
  Tensor avg_pred = ensemble_predict(EnsembleStrategy::kAverage, maps);
  const bool agree = onepass_pred == vote_pred && vote_pred == avg_pred;

  char buf[220];
  std::snprintf(buf, sizeof(buf),
                "reports valid; mIoU onepass %.3f / vote %.3f / average %.3f (informational; "
                "paper reports 74.9 vs 74.0/74.0); identical-support agreement: %s",
                reports["onepass"].miou, reports["vote"].miou, reports["average"].miou,
                agree ? "exact" : "NO");
  record(8, valid && agree, buf);
}

void criterion_9_background_ablation(const Fixture& fx) {
  std::vector<int> classes(10);
  for (int i = 0; i < 10; ++i) classes[static_cast<std::size_t>(i)] = i;
  auto folds = make_folds(classes, 2);
  Rng rng(9009);
  Episode ep = sample_episode(fx.train_dataset, folds[0], 1, rng);
  EpisodeFeatures feats = features_for(ep, fx.cfg);

  InferenceResult full = infer(fx.trained, feats, fx.cfg);
  ForwardOptions opt;
  opt.zero_background = true;
  InferenceResult ablated = infer(fx.trained, feats, fx.cfg, opt);
  const float diff = max_abs_diff(full.prob, ablated.prob);

  EvalConfig ec;
  ec.fold = 0;
  ec.folds = 2;
  ec.shots = 1;
  ec.episodes = 20;
  ec.seed = 9010;
  ec.zero_background = true;
  MetricReport rep = run_evaluation(fx.train_dataset, fx.trained, fx.cfg, ec);
  EvalConfig full_ec = ec;
  full_ec.zero_background = false;
  MetricReport full_rep = run_evaluation(fx.train_dataset, fx.trained, fx.cfg, full_ec);

  char buf[220];
  std::snprintf(buf, sizeof(buf),
                "ablated forward differs (max-norm %.3g > 0), report tagged \"%s\"; mIoU full "
                "%.3f vs ablated %.3f (informational; paper reports a 2.0%% drop)",
                diff, rep.ablation.c_str(), full_rep.miou, rep.miou);
  record(9, diff > 0.0f && rep.ablation == "zero-background" && rep.episodes == 20, buf);
}

void criterion_10_scaling(const Fixture& fx) {
  // token counts: exactly linear by construction
  const std::int64_t per_shot = kv_token_count(fx.cfg, 1);
  bool linear = true;
  for (int n = 1; n <= 5; ++n) linear = linear && kv_token_count(fx.cfg, n) == per_shot * n;

  auto rows = bench_nshot(fx.dataset, fx.random_weights, fx.cfg, 5, 24, 1010);
  bool monotone = true;
  for (std::size_t i = 1; i < rows.size(); ++i)
    monotone = monotone && rows[i].median_ms >= rows[i - 1].median_ms;

  // least-squares line over (n, median)
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : rows) {
    sx += r.shots;
    sy += r.median_ms;
    sxx += static_cast<double>(r.shots) * r.shots;
    sxy += r.shots * r.median_ms;
  }
  const double npts = static_cast<double>(rows.size());
  const double slope = (npts * sxy - sx * sy) / (npts * sxx - sx * sx);
  const double intercept = (sy - slope * sx) / npts;
  double max_resid = 0;
  for (const auto& r : rows)
    max_resid = std::max(max_resid, std::abs(r.median_ms - (intercept + slope * r.shots)));

  char buf[240];
  std::snprintf(buf, sizeof(buf),
                "kv tokens linear: %s; medians %.0f/%.0f/%.0f/%.0f/%.0f ms monotone: %s; "
                "fit slope %.2f ms/shot, max residual %.2f (limit 2x slope)",
                linear ? "yes" : "NO", rows[0].median_ms, rows[1].median_ms, rows[2].median_ms,
                rows[3].median_ms, rows[4].median_ms, monotone ? "yes" : "NO", slope, max_resid);
  record(10, linear && monotone && slope > 0 && max_resid <= 2.0 * slope, buf);
}

void criterion_11_determinism(const std::string& cli, const fs::path& scratch) {
  if (cli.empty()) {
    record(11, false, "no --cli path given; cannot exercise the command-line surface");
    return;
  }
  const fs::path dir = scratch / "determinism";
  fs::create_directories(dir);
  const std::string ds = (dir / "ds").string();
  const std::string rep1 = (dir / "rep1.json").string();
  const std::string rep2 = (dir / "rep2.json").string();

  auto shell = [&](const std::string& cmd) { return std::system(cmd.c_str()); };
  int rc = shell(cli + " gen-dataset --out " + ds + " --seed 42 > /dev/null");
  rc |= shell(cli + " eval --dataset " + ds + " --out " + rep1 +
              " --fold 0 --shots 1 --episodes 20 --seed 42 > /dev/null");
  rc |= shell(cli + " eval --dataset " + ds + " --out " + rep2 +
              " --fold 0 --shots 1 --episodes 20 --seed 42 > /dev/null");
  const std::string a = read_file(rep1), b = read_file(rep2);
  const bool identical = rc == 0 && !a.empty() && a == b;
  record(11, identical,
         std::string("cmd_eval twice with seed 42: ") +
             (identical ? "byte-identical reports" : "reports differ or command failed"));
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  fs::path scratch = fs::temp_directory_path() / "dcama_acceptance";
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--cli") cli = argv[i + 1];
    if (flag == "--scratch") scratch = argv[i + 1];
  }
  fs::create_directories(scratch);

  Fixture fx;
  fx.dataset = generate_toy_dataset(ToyDatasetConfig{}, derive_seed(42, "dataset"));
  fx.random_weights = init_weights(fx.cfg, derive_seed(42, "weights"));

  criterion_1_row_stochastic();
  criterion_2_mask_range(fx);
  criterion_7_training(fx);  // computed early; 3/4/8/9 reuse the trained model
  criterion_3_invariance(fx);
  criterion_4_one_shot_consistency(fx);
  criterion_5_gradients(fx);
  criterion_6_metric_oracle();
  criterion_8_strategies(fx);
  criterion_9_background_ablation(fx);
  criterion_10_scaling(fx);
  criterion_11_determinism(cli, scratch);

  std::sort(outcomes.begin(), outcomes.end(),
            [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
  int failures = 0;
  for (const auto& o : outcomes) {
    std::printf("[%s] criterion %2d: %s\n", o.pass ? "PASS" : "FAIL", o.id, o.detail.c_str());
    failures += o.pass ? 0 : 1;
  }
  std::printf("%d/%d acceptance criteria passed\n", static_cast<int>(outcomes.size()) - failures,
              static_cast<int>(outcomes.size()));
  return failures == 0 ? 0 : 1;
}
