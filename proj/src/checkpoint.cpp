#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "wsseg/training.hpp"

namespace wsseg {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'W', 'S', 'S', 'G', 'C', 'K', 'P', 'T'};
constexpr size_t kHeaderSize = 8 + 4 + 8 + 8;

uint64_t fnv1a64(const uint8_t* data, size_t n) {
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
  uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

template <typename T>
T get(const uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

json tensor_to_json(const Tensor& t) {
  std::vector<uint8_t> bytes(t.data.size() * sizeof(double));
  if (!bytes.empty()) std::memcpy(bytes.data(), t.data.data(), bytes.size());
  return {{"shape", t.shape}, {"data", json::binary(std::move(bytes))}};
}

Tensor tensor_from_json(const json& j, const std::string& name) {
  Shape shape = j.at("shape").get<Shape>();
  const auto& bytes = j.at("data").get_binary();
  if (bytes.size() != static_cast<size_t>(shape_numel(shape)) * sizeof(double))
    throw CheckpointError("tensor " + name + " has " + std::to_string(bytes.size()) + " bytes for shape " +
                          shape_str(shape));
  Tensor t(shape);
  if (!bytes.empty()) std::memcpy(t.data.data(), bytes.data(), bytes.size());
  return t;
}

json map_to_json(const std::map<std::string, Tensor>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = tensor_to_json(v);
  return j;
}

std::map<std::string, Tensor> map_from_json(const json& j) {
  std::map<std::string, Tensor> m;
  for (auto it = j.begin(); it != j.end(); ++it) m.emplace(it.key(), tensor_from_json(it.value(), it.key()));
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json j = {{"params", map_to_json(ck.params)},
            {"best_params", map_to_json(ck.best_params)},
            {"optimizer", {{"step", ck.optimizer.step}, {"m", map_to_json(ck.optimizer.m)},
                           {"v", map_to_json(ck.optimizer.v)}}},
            {"epoch", ck.epoch},
            {"best_metric", ck.best_metric},
            {"best_epoch", ck.best_epoch},
            {"config", ck.config_json},
            {"rng", ck.rng_state},
            {"class_names", ck.class_names}};
  const std::vector<uint8_t> payload = json::to_cbor(j);
  std::vector<uint8_t> out(kMagic, kMagic + 8);
  put<uint32_t>(out, Checkpoint::kFormatVersion);
  put<uint64_t>(out, payload.size());
  put<uint64_t>(out, fnv1a64(payload.data(), payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  const std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < kHeaderSize || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw CheckpointError(path + ": not a checkpoint file");
  const auto version = get<uint32_t>(bytes.data() + 8);
  if (version != Checkpoint::kFormatVersion)
    throw CheckpointError(path + ": unsupported format version " + std::to_string(version));
  const auto length = get<uint64_t>(bytes.data() + 12);
  const auto hash = get<uint64_t>(bytes.data() + 20);
  if (bytes.size() - kHeaderSize != length)
    throw CheckpointError(path + ": truncated or padded payload (" + std::to_string(bytes.size() - kHeaderSize) +
                          " of " + std::to_string(length) + " bytes)");
  if (fnv1a64(bytes.data() + kHeaderSize, length) != hash) throw CheckpointError(path + ": checksum mismatch");

  try {
    const json j = json::from_cbor(bytes.begin() + kHeaderSize, bytes.end());
    Checkpoint ck;
    ck.params = map_from_json(j.at("params"));
    ck.best_params = map_from_json(j.at("best_params"));
    ck.optimizer.step = j.at("optimizer").at("step").get<int64_t>();
    ck.optimizer.m = map_from_json(j.at("optimizer").at("m"));
    ck.optimizer.v = map_from_json(j.at("optimizer").at("v"));
    ck.epoch = j.at("epoch").get<int64_t>();
    ck.best_metric = j.at("best_metric").get<double>();
    ck.best_epoch = j.at("best_epoch").get<int64_t>();
    ck.config_json = j.at("config").get<std::string>();
    ck.rng_state = j.at("rng").get<std::string>();
    ck.class_names = j.at("class_names").get<std::vector<std::string>>();
    return ck;
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": malformed payload: " + e.what());
  }
}

}  // namespace wsseg
