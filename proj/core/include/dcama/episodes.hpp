#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dcama/rng.hpp"
#include "dcama/tensor.hpp"

namespace dcama {

struct SamplePair {
  Tensor image;  // [H,W,3] in [0,1]
  Tensor mask;   // [H,W,1] of exact 0/1
};

struct ToyDatasetConfig {
  int num_classes = 10;
  int images_per_class = 8;
  int height = 96;
  int width = 96;
};

// Procedural stand-in for a few-shot segmentation benchmark: each class is a
// shape family with its own texture; instances vary in pose and size. Masks
// are exact by construction and every mask has foreground fraction in
// [0.05, 0.8].
struct ToyDataset {
  ToyDatasetConfig cfg;
  std::uint64_t seed = 0;
  std::vector<std::vector<SamplePair>> by_class;

  int num_classes() const { return static_cast<int>(by_class.size()); }
};

ToyDataset generate_toy_dataset(const ToyDatasetConfig& cfg, std::uint64_t seed);

// One few-shot task: n support pairs and a query from the same class, with
// the query image absent from the support set.
struct Episode {
  std::vector<SamplePair> support;
  SamplePair query;
  int class_id = -1;
  std::vector<int> support_indices;  // dataset image indices, for audits
  int query_index = -1;

  int shots() const { return static_cast<int>(support.size()); }
};

struct FoldSplit {
  int fold_index = 0;
  std::vector<int> train_classes;
  std::vector<int> test_classes;
};

// Contiguous class slices over the sorted ids: fold j tests slice j and
// trains on the rest.
std::vector<FoldSplit> make_folds(std::vector<int> class_ids, int k);

// Compact episode descriptor; consumes the same rng draws as sample_episode.
struct EpisodeSpec {
  int class_id = -1;
  int query_index = -1;
  std::vector<int> support_indices;
};

EpisodeSpec sample_episode_spec(const ToyDataset& ds, const FoldSplit& fold, int shots, Rng& rng,
                                bool from_test = true);
Episode materialize_episode(const ToyDataset& ds, const EpisodeSpec& spec);

// Uniform class choice over the fold's test (or train) classes, then uniform
// image choice without replacement; the first draw is the query.
Episode sample_episode(const ToyDataset& ds, const FoldSplit& fold, int shots, Rng& rng,
                       bool from_test = true);

// Dataset directory: manifest.json + one DTC pair per sample. Round trips are
// bit-exact.
void save_dataset(const std::filesystem::path& dir, const ToyDataset& ds);
ToyDataset load_dataset(const std::filesystem::path& dir);

}  // namespace dcama
