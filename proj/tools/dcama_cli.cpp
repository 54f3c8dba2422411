// dcama: few-shot segmentation by attention-weighted mask aggregation.
// Subcommands cover dataset generation, episodic evaluation, toy training,
// gradient checks, n-shot benchmarking, and attention-map export. Every
// subcommand is reproducible from (inputs, seed).

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dcama/dtc.hpp"
#include "dcama/evaluation.hpp"
#include "dcama/gradcheck.hpp"
#include "dcama/pipeline.hpp"

using namespace dcama;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitBadInput = 2;
constexpr int kExitNumeric = 3;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("DCAMA_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      throw IoError("DCAMA_SEED is not a number: " + std::string(env));
    }
  }
  return 42;
}

struct WeightChoice {
  std::string checkpoint;    // optional checkpoint directory
  std::string config_file;   // optional explicit model config
};

// precedence: checkpoint config > --model-config > defaults; a checkpoint
// plus an explicit config is ambiguous and rejected
std::pair<ModelWeights, ModelConfig> resolve_weights(const WeightChoice& wc, std::uint64_t seed,
                                                     const ToyDataset* ds) {
  if (!wc.checkpoint.empty() && !wc.config_file.empty())
    throw IoError("--weights already carries a config; drop --model-config");
  ModelConfig cfg;
  ModelWeights weights;
  if (!wc.checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(wc.checkpoint);
    cfg = ck.config;
    weights = std::move(ck.weights);
  } else {
    if (!wc.config_file.empty()) cfg = load_model_config(wc.config_file);
    if (ds) {
      cfg.input_h = ds->cfg.height;
      cfg.input_w = ds->cfg.width;
    }
    weights = init_weights(cfg, derive_seed(seed, "weights"));
  }
  if (ds && (cfg.input_h != ds->cfg.height || cfg.input_w != ds->cfg.width))
    throw IoError("model input size " + std::to_string(cfg.input_h) + "x" +
                  std::to_string(cfg.input_w) + " does not match dataset " +
                  std::to_string(ds->cfg.height) + "x" + std::to_string(ds->cfg.width));
  return {std::move(weights), std::move(cfg)};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

int run(int argc, char** argv) {
  CLI::App app{"DCAMA few-shot segmentation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // lets --seed appear after the subcommand name
  std::uint64_t seed = default_seed();
  app.add_option("--seed", seed, "master seed (env DCAMA_SEED, default 42)")
      ->capture_default_str();

  // ---- gen-dataset ----
  auto* gen = app.add_subcommand("gen-dataset", "generate a procedural toy dataset");
  std::string gen_out;
  ToyDatasetConfig dcfg;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--classes", dcfg.num_classes, "number of classes")->capture_default_str();
  gen->add_option("--images-per-class", dcfg.images_per_class, "images per class")
      ->capture_default_str();
  gen->add_option("--size", dcfg.height, "square image size")->capture_default_str();

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "episodic evaluation on a fold's test classes");
  std::string eval_ds, eval_out;
  WeightChoice eval_wc;
  EvalConfig ec;
  eval->add_option("--dataset", eval_ds, "dataset directory")->required();
  eval->add_option("--out", eval_out, "metric report JSON path")->required();
  eval->add_option("--weights", eval_wc.checkpoint, "checkpoint directory (default: seeded init)");
  eval->add_option("--model-config", eval_wc.config_file, "model config JSON");
  eval->add_option("--fold", ec.fold, "fold index")->capture_default_str();
  eval->add_option("--folds", ec.folds, "fold count")->capture_default_str();
  eval->add_option("--shots", ec.shots, "support images per episode")->capture_default_str();
  eval->add_option("--episodes", ec.episodes, "episode count")->capture_default_str();
  eval->add_option("--strategy", ec.strategy, "onepass | vote | average")->capture_default_str();
  eval->add_flag("--zero-background", ec.zero_background,
                 "zero background pixels of support features (ablation)");
  eval->add_flag("--intermediate-masks", ec.intermediate_masks,
                 "also score Otsu-binarized intermediate masks per scale");
  eval->add_option("--workers", ec.workers, "episode-level worker threads")
      ->capture_default_str();

  // ---- train-toy ----
  auto* train = app.add_subcommand("train-toy", "episodic SGD on a fold's train classes");
  std::string train_ds, train_out, train_resume, train_config;
  TrainRunConfig trc;
  train->add_option("--dataset", train_ds, "dataset directory")->required();
  train->add_option("--out", train_out, "checkpoint output directory")->required();
  train->add_option("--resume", train_resume, "checkpoint directory to continue from");
  train->add_option("--model-config", train_config, "model config JSON");
  train->add_option("--fold", trc.fold, "fold index")->capture_default_str();
  train->add_option("--folds", trc.folds, "fold count")->capture_default_str();
  train->add_option("--steps", trc.steps, "SGD steps to run")->capture_default_str();
  train->add_option("--shots", trc.shots, "support images per training episode")
      ->capture_default_str();
  auto* lr_opt = train->add_option("--lr", trc.hyper.lr, "learning rate")->capture_default_str();
  auto* mom_opt =
      train->add_option("--momentum", trc.hyper.momentum, "momentum")->capture_default_str();
  auto* wd_opt = train->add_option("--weight-decay", trc.hyper.weight_decay, "weight decay")
                     ->capture_default_str();

  // ---- bench-nshot ----
  auto* bench = app.add_subcommand("bench-nshot", "per-episode latency and memory for n=1..N");
  std::string bench_ds, bench_out;
  WeightChoice bench_wc;
  int bench_max_shots = 5, bench_episodes = 20;
  bench->add_option("--dataset", bench_ds, "dataset directory")->required();
  bench->add_option("--out", bench_out, "timing CSV path")->required();
  bench->add_option("--weights", bench_wc.checkpoint, "checkpoint directory");
  bench->add_option("--model-config", bench_wc.config_file, "model config JSON");
  bench->add_option("--max-shots", bench_max_shots, "largest n")->capture_default_str();
  bench->add_option("--episodes", bench_episodes, "episodes per n (median reported)")
      ->capture_default_str();

  // ---- gradcheck ----
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string grad_mode = "all";
  int grad_coords = 4;
  grad->add_option("--mode", grad_mode, "unit | pipeline | all")->capture_default_str();
  grad->add_option("--coords-per-tensor", grad_coords,
                   "coordinates probed per tensor in pipeline mode")
      ->capture_default_str();

  // ---- export-attention ----
  auto* exp = app.add_subcommand("export-attention",
                                 "attention heatmap of one query pixel as a DTC tensor");
  std::string exp_ds, exp_out, exp_pixel = "0,0";
  WeightChoice exp_wc;
  int exp_fold = 0, exp_folds = 2, exp_shots = 1;
  exp->add_option("--dataset", exp_ds, "dataset directory")->required();
  exp->add_option("--out", exp_out, "output DTC path")->required();
  exp->add_option("--pixel", exp_pixel, "query pixel as row,col")->capture_default_str();
  exp->add_option("--weights", exp_wc.checkpoint, "checkpoint directory");
  exp->add_option("--model-config", exp_wc.config_file, "model config JSON");
  exp->add_option("--fold", exp_fold, "fold index")->capture_default_str();
  exp->add_option("--folds", exp_folds, "fold count")->capture_default_str();
  exp->add_option("--shots", exp_shots, "support images")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitBadInput;
  }

  if (*gen) {
    dcfg.width = dcfg.height;
    ToyDataset ds = generate_toy_dataset(dcfg, derive_seed(seed, "dataset"));
    save_dataset(gen_out, ds);
    std::cout << "wrote " << dcfg.num_classes << " classes x " << dcfg.images_per_class
              << " images to " << gen_out << "\n";
    return kExitOk;
  }

  if (*eval) {
    ToyDataset ds = load_dataset(eval_ds);
    auto [weights, cfg] = resolve_weights(eval_wc, seed, &ds);
    ec.seed = seed;
    MetricReport report = run_evaluation(ds, weights, cfg, ec);
    write_text(eval_out, metric_report_to_json(report));
    std::cout << "fold " << report.fold << " shots " << report.shots << " strategy "
              << report.strategy << ": miou " << report.miou << " fb_iou " << report.fb_iou
              << " -> " << eval_out << "\n";
    return kExitOk;
  }

  if (*train) {
    ToyDataset ds = load_dataset(train_ds);
    trc.seed = seed;
    ModelConfig cfg;
    TrainState resumed;
    std::uint64_t sampler_state = 0;
    bool has_resume = false;
    if (!train_resume.empty()) {
      if (!train_config.empty())
        throw IoError("--resume already carries a config; drop --model-config");
      LoadedTrainState ls = load_train_state(train_resume);
      cfg = ls.config;
      resumed = std::move(ls.state);
      // saved hyperparameters stay in force unless a flag overrides them
      if (lr_opt->count()) resumed.hyper.lr = trc.hyper.lr;
      if (mom_opt->count()) resumed.hyper.momentum = trc.hyper.momentum;
      if (wd_opt->count()) resumed.hyper.weight_decay = trc.hyper.weight_decay;
      sampler_state = ls.sampler_state;
      trc.seed = ls.seed;
      has_resume = true;
    } else if (!train_config.empty()) {
      cfg = load_model_config(train_config);
    }
    cfg.input_h = ds.cfg.height;
    cfg.input_w = ds.cfg.width;

    TrainRunResult res =
        train_toy(ds, cfg, trc, has_resume ? &resumed : nullptr, sampler_state);
    save_train_state(train_out, res.state, cfg, trc.seed, res.sampler_state);

    std::string csv = "step,loss\n";
    const std::int64_t base = res.state.step - static_cast<std::int64_t>(res.losses.size());
    for (std::size_t i = 0; i < res.losses.size(); ++i)
      csv += std::to_string(base + static_cast<std::int64_t>(i)) + "," +
             std::to_string(res.losses[i]) + "\n";
    write_text(std::filesystem::path(train_out) / "loss.csv", csv);

    if (res.diverged) {
      std::cerr << "training diverged at step " << res.state.step
                << "; last good checkpoint written to " << train_out << "\n";
      return kExitNumeric;
    }
    std::cout << "trained " << res.losses.size() << " steps; checkpoint in " << train_out
              << " (first loss " << (res.losses.empty() ? 0.0f : res.losses.front())
              << ", last " << (res.losses.empty() ? 0.0f : res.losses.back()) << ")\n";
    return kExitOk;
  }

  if (*bench) {
    ToyDataset ds = load_dataset(bench_ds);
    auto [weights, cfg] = resolve_weights(bench_wc, seed, &ds);
    auto rows = bench_nshot(ds, weights, cfg, bench_max_shots, bench_episodes, seed);
    write_text(bench_out, bench_rows_to_csv(rows));
    for (const auto& r : rows)
      std::cout << "n=" << r.shots << "  median " << r.median_ms << " ms  peak "
                << r.peak_bytes / (1024.0 * 1024.0) << " MiB  kv tokens " << r.kv_tokens << "\n";
    return kExitOk;
  }

  if (*grad) {
    bool ok = true;
    if (grad_mode == "unit" || grad_mode == "all") {
      GradCheckReport rep = dcama_unit_grad_check(seed);
      std::cout << "dcama unit: max relative error " << rep.max_rel_error << " over "
                << rep.coords_checked << " coordinates (worst: " << rep.worst_tensor << ")\n";
      ok = ok && rep.max_rel_error < 1e-4;
    }
    if (grad_mode == "pipeline" || grad_mode == "all") {
      ToyDatasetConfig small;
      small.num_classes = 2;
      small.images_per_class = 6;
      small.height = small.width = 48;
      ToyDataset ds = generate_toy_dataset(small, derive_seed(seed, "gradcheck-data"));
      ModelConfig cfg;
      cfg.input_h = cfg.input_w = 48;
      std::vector<int> ids{0, 1};
      auto folds = make_folds(ids, 1);
      Rng rng(derive_seed(seed, "gradcheck-episode"));
      Episode ep = sample_episode(ds, folds[0], 1, rng);
      EpisodeFeaturesT<double> feats = episode_features(ep, cfg.backbone).cast<double>();
      ModelWeightsT<double> weights =
          init_weights(cfg, derive_seed(seed, "weights")).cast<double>();
      GradCheckReport rep = pipeline_grad_check(
          weights, feats, ep.query.mask.cast<double>(), cfg, grad_coords);
      std::cout << "pipeline bce(forward): max relative error " << rep.max_rel_error << " over "
                << rep.coords_checked << " coordinates (worst: " << rep.worst_tensor << ")\n";
      ok = ok && rep.max_rel_error < 1e-4;
    }
    if (grad_mode != "unit" && grad_mode != "pipeline" && grad_mode != "all")
      throw IoError("unknown gradcheck mode \"" + grad_mode + "\"");
    std::cout << (ok ? "gradcheck passed (< 1e-4)\n" : "gradcheck FAILED (>= 1e-4)\n");
    return ok ? kExitOk : kExitNumeric;
  }

  if (*exp) {
    ToyDataset ds = load_dataset(exp_ds);
    auto [weights, cfg] = resolve_weights(exp_wc, seed, &ds);
    const auto comma = exp_pixel.find(',');
    if (comma == std::string::npos)
      throw IoError("--pixel expects row,col, got \"" + exp_pixel + "\"");
    const int pr = std::stoi(exp_pixel.substr(0, comma));
    const int pc = std::stoi(exp_pixel.substr(comma + 1));
    if (pr < 0 || pr >= cfg.input_h || pc < 0 || pc >= cfg.input_w)
      throw IoError("--pixel outside the " + std::to_string(cfg.input_h) + "x" +
                    std::to_string(cfg.input_w) + " image");

    std::vector<int> ids(static_cast<std::size_t>(ds.num_classes()));
    for (int i = 0; i < ds.num_classes(); ++i) ids[static_cast<std::size_t>(i)] = i;
    auto folds = make_folds(ids, exp_folds);
    Rng rng(derive_seed(seed, "episodes"));
    Episode ep = sample_episode(ds, folds.at(static_cast<std::size_t>(exp_fold)), exp_shots, rng);
    EpisodeFeatures feats = episode_features(ep, cfg.backbone);
    ForwardOptions opt;
    opt.record_attention = true;
    InferenceResult res = infer(weights, feats, cfg, opt);
    Tensor heat = export_attention_summary(res.attention, pr, pc, cfg.input_h, cfg.input_w,
                                           cfg.input_h, cfg.input_w);
    save_dtc(exp_out, heat);
    std::cout << "wrote " << shape_str(heat.shape()) << " heatmap for pixel (" << pr << "," << pc
              << ") of a class-" << ep.class_id << " episode to " << exp_out << "\n";
    return kExitOk;
  }

  return kExitBadInput;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  }
}
