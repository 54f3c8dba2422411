#pragma once

#include <filesystem>
#include <string>

#include "dcama/tensor.hpp"

namespace dcama {

// DTC tensor container: a JSON text manifest
//   {"dtype":"f32","shape":[..],"order":"row-major","byte_order":"little","data":"<file>"}
// beside a raw little-endian buffer file. Round trips are bit-exact.

void save_dtc(const std::filesystem::path& manifest_path, const Tensor& t);
void save_dtc(const std::filesystem::path& manifest_path, const Tensor64& t);

// dtype of a manifest without loading the buffer ("f32" or "f64")
std::string dtc_dtype(const std::filesystem::path& manifest_path);

Tensor load_dtc_f32(const std::filesystem::path& manifest_path);
Tensor64 load_dtc_f64(const std::filesystem::path& manifest_path);

template <class T>
BasicTensor<T> load_dtc(const std::filesystem::path& manifest_path);

template <>
inline BasicTensor<float> load_dtc<float>(const std::filesystem::path& p) {
  return load_dtc_f32(p);
}
template <>
inline BasicTensor<double> load_dtc<double>(const std::filesystem::path& p) {
  return load_dtc_f64(p);
}

}  // namespace dcama
