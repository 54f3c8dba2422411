#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dcama/tensor.hpp"

namespace dcama {

// scale denominators: 4 means the 1/4 scale
inline std::string scale_name(int den) { return "1/" + std::to_string(den); }
inline int parse_scale(const std::string& s) {
  if (s.size() < 3 || s[0] != '1' || s[1] != '/') throw IoError("bad scale name \"" + s + "\"");
  return std::stoi(s.substr(2));
}

// scale denominator -> per-layer feature maps [h_i, w_i, c_i]
template <class T>
using MultiScaleFeaturesT = std::map<int, std::vector<BasicTensor<T>>>;
using MultiScaleFeatures = MultiScaleFeaturesT<float>;

// Deterministic frozen stand-in for the pretrained feature extractor: a
// seeded stride-2 conv/ReLU pyramid. Never trained. The output gain keeps
// feature magnitudes comparable to the unit-amplitude positional encoding so
// attention scores are content-driven.
struct BackboneConfig {
  std::uint64_t seed = 1;
  std::map<int, int> channels = {{4, 16}, {8, 32}, {16, 64}, {32, 128}};
  std::map<int, int> layers = {{4, 1}, {8, 2}, {16, 2}, {32, 1}};
  float feature_gain = 4.0f;

  void validate() const;
};

// Input H and W must be divisible by 16; the 1/32 maps use ceil division
// (exact for inputs divisible by 32). Pure function of (image, seed).
MultiScaleFeatures extract_features(const Tensor& image, const BackboneConfig& cfg);

// per-scale spatial sizes for a given input size, matching extract_features
std::map<int, std::pair<int, int>> feature_shapes(int h, int w);

// Feature manifest JSON: {"version", "image_id", "scales": {scale -> [DTC files]}}.
void export_features(const std::filesystem::path& manifest_path, const MultiScaleFeatures& f,
                     const std::string& image_id);
MultiScaleFeatures import_features(const std::filesystem::path& manifest_path,
                                   std::string* image_id = nullptr);

// Checks layer counts and channel widths against the config, and spatial
// sizes against the expected table for (input_h, input_w).
void validate_features(const MultiScaleFeatures& f, const BackboneConfig& cfg, int input_h,
                       int input_w);

template <class T>
MultiScaleFeaturesT<T> cast_features(const MultiScaleFeatures& f) {
  MultiScaleFeaturesT<T> out;
  for (const auto& [den, layers] : f) {
    auto& dst = out[den];
    dst.reserve(layers.size());
    for (const auto& t : layers) dst.push_back(t.template cast<T>());
  }
  return out;
}

}  // namespace dcama
