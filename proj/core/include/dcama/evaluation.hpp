#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dcama/episodes.hpp"
#include "dcama/pipeline.hpp"

namespace dcama {

// ---- metrics -------------------------------------------------------------------

// Foreground IoU of two binary masks (values are 0/1, compared at 0.5).
// Defined as 1 when both masks are empty.
double iou(const Tensor& pred, const Tensor& gt);

// Integer intersection/union counts; mergeable across workers (counts commute).
class MetricAccumulator {
 public:
  struct ClassCounts {
    std::int64_t inter = 0;
    std::int64_t uni = 0;
    double episode_iou_sum = 0.0;
    std::int64_t episodes = 0;
  };

  void add(const Tensor& pred, const Tensor& gt, int class_id);
  void merge(const MetricAccumulator& other);

  std::int64_t episodes() const { return episodes_; }
  const std::map<int, ClassCounts>& per_class() const { return per_class_; }
  std::int64_t fg_intersection() const { return fg_inter_; }
  std::int64_t fg_union() const { return fg_union_; }
  std::int64_t bg_intersection() const { return bg_inter_; }
  std::int64_t bg_union() const { return bg_union_; }

 private:
  std::map<int, ClassCounts> per_class_;
  std::int64_t fg_inter_ = 0, fg_union_ = 0, bg_inter_ = 0, bg_union_ = 0;
  std::int64_t episodes_ = 0;
};

enum class MiouMode {
  kAccumulateCounts,  // per class: sum(inter)/sum(union) across episodes, then mean
  kEpisodeMean,       // per class: mean of per-episode IoUs, then mean
};

// Classes of `class_set` never seen (or with zero union) are excluded and
// reported through `skipped`.
double miou_finalize(const MetricAccumulator& acc, const std::vector<int>& class_set,
                     MiouMode mode = MiouMode::kAccumulateCounts,
                     std::vector<int>* skipped = nullptr);

// Mean of class-agnostic foreground and background IoUs accumulated over all
// episodes.
double fb_iou(const MetricAccumulator& acc);

// Mean binary cross-entropy with probability clamp at 1e-7 (eager form; the
// differentiable form lives on the graph).
double bce_loss(const Tensor& prob, const Tensor& target);

// ---- episode glue ----------------------------------------------------------------

EpisodeFeatures episode_features(const Episode& episode, const BackboneConfig& backbone);

Tensor predict_mask(const Tensor& prob);  // prob > 0.5

// ---- n-shot ensembles (Table-4-style baselines) -----------------------------------

enum class EnsembleStrategy { kVote, kAverage };

// vote: per-pixel majority of thresholded maps, ties go to background;
// average: mean probability thresholded at 0.5.
Tensor ensemble_predict(EnsembleStrategy strategy, std::span<const Tensor> prob_maps);

// ---- training ----------------------------------------------------------------------

struct TrainHyper {
  float lr = 1e-3f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
};

struct TrainState {
  ModelWeights weights;
  ModelWeights velocity;  // momentum buffers, same shapes as weights
  std::int64_t step = 0;
  TrainHyper hyper;
};

TrainState make_train_state(const ModelConfig& cfg, std::uint64_t seed);

// SGD with momentum and decoupled-from-nothing weight decay, elementwise:
//   v <- momentum*v + (g + weight_decay*w);  w <- w - lr*v
void sgd_update(Tensor& w, Tensor& v, const Tensor& g, const TrainHyper& hyper);

// One SGD step on one episode; the loss is imposed only on the final output.
// Non-finite gradients abort the step.
float train_step(TrainState& state, const EpisodeFeatures& features, const Tensor& query_mask,
                 const ModelConfig& cfg, const ForwardOptions& opt = {});

struct TrainRunConfig {
  int fold = 0;
  int folds = 2;
  int steps = 200;
  int shots = 1;
  std::uint64_t seed = 42;
  TrainHyper hyper;
};

struct TrainRunResult {
  TrainState state;
  std::vector<float> losses;        // one entry per executed step
  std::uint64_t sampler_state = 0;  // episode sampler state after the run
  bool diverged = false;            // a step hit non-finite numbers; state is last-good
};

// Episodic SGD over the fold's train classes. Pass `resume` (with the saved
// sampler state) to continue a run bit-exactly.
TrainRunResult train_toy(const ToyDataset& ds, const ModelConfig& cfg,
                         const TrainRunConfig& run, const TrainState* resume = nullptr,
                         std::uint64_t resume_sampler_state = 0);

// Checkpoint plus optimizer state and the episode sampler state, for bit-exact
// resumption.
void save_train_state(const std::filesystem::path& dir, const TrainState& state,
                      const ModelConfig& cfg, std::uint64_t seed, std::uint64_t sampler_state);

struct LoadedTrainState {
  TrainState state;
  ModelConfig config;
  std::uint64_t seed = 0;
  std::uint64_t sampler_state = 0;
};

LoadedTrainState load_train_state(const std::filesystem::path& dir);

// ---- attention-map export -----------------------------------------------------------

// Mean over all recorded (scale, layer, head) attention rows of one query
// pixel, each reshaped to the support grid and bilinearly upsampled before
// averaging. Output is [n, out_h, out_w], one map per support image.
Tensor export_attention_summary(std::span<const AttentionRecord> records, int query_r,
                                int query_c, int input_h, int input_w, int out_h, int out_w);

// ---- evaluation harness ----------------------------------------------------------------

struct EvalConfig {
  int fold = 0;
  int folds = 2;
  int shots = 1;
  int episodes = 100;
  std::uint64_t seed = 42;
  std::string strategy = "onepass";  // onepass | vote | average
  bool zero_background = false;
  bool intermediate_masks = false;
  int workers = 1;
};

struct MetricReport {
  int fold = 0;
  int shots = 1;
  int episodes = 0;
  std::uint64_t seed = 0;
  std::string strategy = "onepass";
  std::string ablation = "none";
  double miou = 0.0;
  double fb_iou = 0.0;
  double miou_episode_mean = 0.0;
  std::map<int, double> per_class;
  std::map<int, double> intermediate_miou;  // scale -> mIoU; filled on request
};

std::string metric_report_to_json(const MetricReport& report);

MetricReport run_evaluation(const ToyDataset& ds, const ModelWeights& weights,
                            const ModelConfig& cfg, const EvalConfig& eval);

// ---- n-shot scaling benchmark ------------------------------------------------------------

struct BenchRow {
  int shots = 1;
  int episodes = 0;
  double median_ms = 0.0;
  double mean_ms = 0.0;
  std::int64_t peak_bytes = 0;
  std::int64_t kv_tokens = 0;
};

// K/V token count for one episode at n shots: n * sum over attended scales of
// h_i * w_i.
std::int64_t kv_token_count(const ModelConfig& cfg, int shots);

std::vector<BenchRow> bench_nshot(const ToyDataset& ds, const ModelWeights& weights,
                                  const ModelConfig& cfg, int max_shots, int episodes_per_n,
                                  std::uint64_t seed);

std::string bench_rows_to_csv(std::span<const BenchRow> rows);

}  // namespace dcama
