#include "fstm/container.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "fstm/error.hpp"

namespace fstm::io {

using nlohmann::json;

json ContainerHeader::to_json() const {
  json j;
  j["format"] = kFormatName;
  j["version"] = kFormatVersion;
  j["kind"] = kind;
  j["dims"] = dims;
  j["dtype"] = dtype;
  j["atlas"] = atlas;
  j["labels"] = labels;
  j["provenance"] = provenance;
  if (!extra.empty()) j["extra"] = extra;
  return j;
}

ContainerHeader ContainerHeader::from_json(const json& j) {
  ContainerHeader h;
  try {
    require(j.value("format", "") == kFormatName, ErrorKind::format,
            "container: not an fstm container");
    const int version = j.at("version").get<int>();
    require(version == kFormatVersion, ErrorKind::format,
            "container: unsupported format version " + std::to_string(version));
    h.kind = j.value("kind", "");
    h.dims = j.at("dims").get<Shape>();
    h.dtype = j.value("dtype", "f32");
    h.atlas = j.value("atlas", "");
    h.labels = j.value("labels", std::vector<double>{});
    h.provenance = j.value("provenance", "");
    if (j.contains("extra")) h.extra = j["extra"];
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("container header: ") + e.what());
  }
  require(h.dtype == "f32" || h.dtype == "f64", ErrorKind::format,
          "container: unsupported dtype '" + h.dtype + "'");
  return h;
}

namespace {

template <class T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U u;
    std::memcpy(&u, &v, sizeof u);
    u = sizeof(T) == 4 ? __builtin_bswap32(static_cast<std::uint32_t>(u))
                       : static_cast<U>(__builtin_bswap64(u));
    std::memcpy(&v, &u, sizeof u);
    return v;
  }
}

std::size_t elem_size(const std::string& dtype) { return dtype == "f64" ? 8 : 4; }

std::string encode_payload(std::span<const double> values, const std::string& dtype) {
  std::string out(values.size() * elem_size(dtype), '\0');
  char* p = out.data();
  for (double v : values) {
    if (dtype == "f64") {
      const double le = to_le(v);
      std::memcpy(p, &le, 8);
      p += 8;
    } else {
      const float le = to_le(static_cast<float>(v));
      std::memcpy(p, &le, 4);
      p += 4;
    }
  }
  return out;
}

void decode_payload(const char* p, std::span<double> out, const std::string& dtype) {
  for (auto& v : out) {
    if (dtype == "f64") {
      double d;
      std::memcpy(&d, p, 8);
      v = to_le(d);
      p += 8;
    } else {
      float f;
      std::memcpy(&f, p, 4);
      v = static_cast<double>(to_le(f));
      p += 4;
    }
  }
}

void write_file(const std::string& path, const json& header, const std::string& payload) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::io, "cannot open " + tmp + " for writing");
    const std::string line = header.dump() + "\n";
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    require(out.good(), ErrorKind::io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(ErrorKind::io, "cannot move " + tmp + " to " + path + ": " + ec.message());
  }
}

struct RawFile {
  json header;
  std::string payload;
};

RawFile read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::format,
          "container: missing header in " + path);
  RawFile f;
  try {
    f.header = json::parse(line);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, "container: bad header in " + path + ": " + e.what());
  }
  f.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return f;
}

}  // namespace

void write_container(const std::string& path, const ContainerHeader& header,
                     const Tensor& data) {
  require(header.dims == data.shape(), ErrorKind::shape,
          "container: header dims " + shape_str(header.dims) + " do not match data " +
              shape_str(data.shape()));
  ContainerHeader h = header;
  if (h.dtype.empty()) h.dtype = "f32";
  require(h.dtype == "f32" || h.dtype == "f64", ErrorKind::format,
          "container: unsupported dtype '" + h.dtype + "'");
  write_file(path, h.to_json(), encode_payload(data.data(), h.dtype));
}

ContainerHeader read_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::format,
          "container: missing header in " + path);
  try {
    return ContainerHeader::from_json(json::parse(line));
  } catch (const json::exception& e) {
    fail(ErrorKind::format, "container: bad header in " + path + ": " + e.what());
  }
}

std::pair<ContainerHeader, Tensor> read_container(const std::string& path) {
  RawFile f = read_file(path);
  ContainerHeader h = ContainerHeader::from_json(f.header);
  Tensor t(h.dims);
  require(f.payload.size() == t.size() * elem_size(h.dtype), ErrorKind::format,
          "container: payload of " + path + " has " + std::to_string(f.payload.size()) +
              " bytes, expected " + std::to_string(t.size() * elem_size(h.dtype)));
  decode_payload(f.payload.data(), t.data(), h.dtype);
  return {std::move(h), std::move(t)};
}

void write_tensor_set(const std::string& path, ContainerHeader header,
                      const std::vector<std::pair<std::string, Tensor>>& tensors) {
  json index = json::array();
  std::size_t offset = 0;
  std::vector<double> flat;
  for (const auto& [name, t] : tensors) {
    index.push_back({{"name", name}, {"dims", t.shape()}, {"offset", offset}});
    offset += t.size();
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  }
  header.dims = {offset};
  header.extra["tensors"] = index;
  write_file(path, header.to_json(), encode_payload(flat, header.dtype));
}

std::pair<ContainerHeader, std::vector<std::pair<std::string, Tensor>>>
read_tensor_set(const std::string& path) {
  auto [h, flat] = read_container(path);
  require(h.extra.contains("tensors"), ErrorKind::format,
          "container: " + path + " has no tensor index");
  std::vector<std::pair<std::string, Tensor>> out;
  try {
    for (const auto& e : h.extra["tensors"]) {
      const auto dims = e.at("dims").get<Shape>();
      const auto off = e.at("offset").get<std::size_t>();
      const std::size_t n = numel(dims);
      require(off + n <= flat.size(), ErrorKind::format,
              "container: tensor extends past payload");
      std::vector<double> vals(flat.data().begin() + static_cast<std::ptrdiff_t>(off),
                               flat.data().begin() + static_cast<std::ptrdiff_t>(off + n));
      out.emplace_back(e.at("name").get<std::string>(), Tensor(dims, std::move(vals)));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("container tensor index: ") + e.what());
  }
  return {std::move(h), std::move(out)};
}

void write_heatmap_ppm(const std::string& path, const Tensor& map, std::size_t scale) {
  require(map.rank() == 2 && map.dim(0) == map.dim(1), ErrorKind::shape,
          "heatmap: expected a square [N, N] map");
  require(scale >= 1, ErrorKind::invalid_argument, "heatmap: scale must be >= 1");
  const std::size_t n = map.dim(0), side = n * scale;
  double peak = 0.0;
  for (double v : map.data()) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) peak = 1.0;
  std::string pixels(side * side * 3, '\0');
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double v = std::clamp(map[(y / scale) * n + x / scale] / peak, -1.0, 1.0);
      // white at 0, red for positive, blue for negative
      const auto fade = static_cast<unsigned char>(std::lround(255.0 * (1.0 - std::abs(v))));
      unsigned char r = 255, g = fade, b = 255;
      if (v >= 0) b = fade; else r = fade;
      const std::size_t o = (y * side + x) * 3;
      pixels[o] = static_cast<char>(r);
      pixels[o + 1] = static_cast<char>(g);
      pixels[o + 2] = static_cast<char>(b);
    }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::io, "cannot open " + path + " for writing");
  out << "P6\n" << side << ' ' << side << "\n255\n";
  out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  require(out.good(), ErrorKind::io, "write failed for " + path);
}

}  // namespace fstm::io
