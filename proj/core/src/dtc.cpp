#include "dcama/dtc.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "DTC buffers are little-endian; big-endian hosts are unsupported");

namespace dcama {

namespace {

using json = nlohmann::ordered_json;

template <class T>
const char* dtype_name();
template <>
const char* dtype_name<float>() {
  return "f32";
}
template <>
const char* dtype_name<double>() {
  return "f64";
}

template <class T>
void save_impl(const std::filesystem::path& manifest_path, const BasicTensor<T>& t) {
  const std::filesystem::path data_path = manifest_path.string() + ".bin";
  json m;
  m["dtype"] = dtype_name<T>();
  m["shape"] = t.shape();
  m["order"] = "row-major";
  m["byte_order"] = "little";
  m["data"] = data_path.filename().string();
  {
    std::ofstream f(manifest_path);
    if (!f) throw IoError("cannot write DTC manifest " + manifest_path.string());
    f << m.dump(2) << "\n";
  }
  std::ofstream f(data_path, std::ios::binary);
  if (!f) throw IoError("cannot write DTC buffer " + data_path.string());
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(sizeof(T) * static_cast<std::size_t>(t.numel())));
  if (!f) throw IoError("short write to DTC buffer " + data_path.string());
}

json read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw IoError("missing DTC manifest " + manifest_path.string());
  json m;
  try {
    f >> m;
  } catch (const json::exception& e) {
    throw IoError("malformed DTC manifest " + manifest_path.string() + ": " + e.what());
  }
  for (const char* key : {"dtype", "shape", "order", "byte_order", "data"})
    if (!m.contains(key))
      throw IoError("DTC manifest " + manifest_path.string() + " lacks field \"" + key + "\"");
  if (m["order"] != "row-major" || m["byte_order"] != "little")
    throw IoError("unsupported DTC layout in " + manifest_path.string());
  return m;
}

template <class T>
BasicTensor<T> load_impl(const std::filesystem::path& manifest_path) {
  json m = read_manifest(manifest_path);
  if (m["dtype"] != dtype_name<T>())
    throw IoError("DTC dtype mismatch in " + manifest_path.string() + ": expected " +
                  dtype_name<T>() + ", found " + m["dtype"].get<std::string>());
  Shape shape = m["shape"].get<Shape>();
  BasicTensor<T> t(shape);
  const std::filesystem::path data_path =
      manifest_path.parent_path() / m["data"].get<std::string>();
  std::ifstream f(data_path, std::ios::binary);
  if (!f) throw IoError("missing DTC buffer " + data_path.string());
  const std::size_t bytes = sizeof(T) * static_cast<std::size_t>(t.numel());
  f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(f.gcount()) != bytes)
    throw IoError("DTC buffer " + data_path.string() + " is shorter than its shape " +
                  shape_str(shape));
  return t;
}

}  // namespace

void save_dtc(const std::filesystem::path& p, const Tensor& t) { save_impl(p, t); }
void save_dtc(const std::filesystem::path& p, const Tensor64& t) { save_impl(p, t); }

std::string dtc_dtype(const std::filesystem::path& p) {
  return read_manifest(p)["dtype"].get<std::string>();
}

Tensor load_dtc_f32(const std::filesystem::path& p) { return load_impl<float>(p); }
Tensor64 load_dtc_f64(const std::filesystem::path& p) { return load_impl<double>(p); }

}  // namespace dcama
