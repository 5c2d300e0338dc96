#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fstm/tensor.hpp"

// Container file: one JSON header line terminated by '\n', followed by a raw
// little-endian row-major payload of `dims` elements ("f32" or "f64").
namespace fstm::io {

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kFormatName = "fstm-container";

struct ContainerHeader {
  std::string kind;          // "timeseries", "dfnc", "labels", "attribution", ...
  Shape dims;
  std::string dtype = "f32";
  std::string atlas;
  std::vector<double> labels;
  std::string provenance;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  static ContainerHeader from_json(const nlohmann::json& j);
};

// Writes atomically (temporary file then rename).
void write_container(const std::string& path, const ContainerHeader& header,
                     const Tensor& data);
std::pair<ContainerHeader, Tensor> read_container(const std::string& path);
ContainerHeader read_header(const std::string& path);

// Multiple named tensors sharing one payload (used for checkpoints). Offsets
// and dims are recorded under extra["tensors"].
void write_tensor_set(const std::string& path, ContainerHeader header,
                      const std::vector<std::pair<std::string, Tensor>>& tensors);
std::pair<ContainerHeader, std::vector<std::pair<std::string, Tensor>>>
read_tensor_set(const std::string& path);

// Binary PPM heatmap of a square [N, N] map with a diverging blue-white-red
// scale symmetric about zero; `scale` pixels per cell.
void write_heatmap_ppm(const std::string& path, const Tensor& map, std::size_t scale = 8);

}  // namespace fstm::io
