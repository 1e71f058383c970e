#include "pdinterp/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace pdinterp {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

using nlohmann::json;

json extent_json(const Extent3& e) { return json::array({e.z, e.y, e.x}); }

Extent3 extent_from(const json& j) {
  return {j.at(0).get<Index>(), j.at(1).get<Index>(), j.at(2).get<Index>()};
}

LayerKind kind_from(const std::string& name) {
  for (LayerKind k : {LayerKind::kConv, LayerKind::kRelu, LayerKind::kMaxPool,
                      LayerKind::kBatchNorm, LayerKind::kDense}) {
    if (layer_kind_name(k) == name) return k;
  }
  throw FormatError("checkpoint names unknown layer kind '" + name + "'");
}

json header_json(const NetworkSpec& spec, const NetworkParams<float>& params) {
  json layers = json::array();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    json j{{"kind", std::string(layer_kind_name(l.kind))}};
    switch (l.kind) {
      case LayerKind::kConv:
        j["in_channels"] = l.conv.in_channels;
        j["out_channels"] = l.conv.out_channels;
        j["kernel"] = extent_json(l.conv.kernel);
        j["stride"] = extent_json(l.conv.stride);
        break;
      case LayerKind::kMaxPool:
        j["window"] = extent_json(l.pool.window);
        j["stride"] = extent_json(l.pool.stride);
        break;
      case LayerKind::kBatchNorm:
        j["channels"] = l.channels;
        j["has_running_stats"] = params.layers[i].has_running_stats;
        break;
      case LayerKind::kDense:
        j["in_features"] = l.in_features;
        j["out_features"] = l.out_features;
        break;
      case LayerKind::kRelu:
        break;
    }
    json shapes = json::array();
    for (const auto& t : params.layers[i].tensors) shapes.push_back(t.shape());
    j["tensors"] = shapes;
    layers.push_back(j);
  }
  return json{{"name", spec.name},
              {"grid", std::string(grid_name(spec.grid))},
              {"input", extent_json(spec.input)},
              {"epoch", params.epoch},
              {"layers", layers}};
}

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("checkpoint truncated in preamble");
  std::uint32_t v;
  std::memcpy(&v, in.data() + pos, 4);
  pos += 4;
  return v;
}

}  // namespace

std::string checkpoint_bytes(const NetworkSpec& spec, const NetworkParams<float>& params) {
  check_params(spec, params);
  const std::string header = header_json(spec, params).dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (const auto& layer : params.layers) {
    for (const auto& t : layer.tensors) {
      out.append(reinterpret_cast<const char*>(t.raw()),
                 static_cast<std::size_t>(t.size()) * sizeof(float));
    }
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("not a checkpoint file (magic bytes mismatch)");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  const std::uint32_t version = get_u32(bytes, pos);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                      " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t header_len = get_u32(bytes, pos);
  if (pos + header_len > bytes.size()) throw FormatError("checkpoint truncated in header");
  json header;
  try {
    header = json::parse(bytes.substr(pos, header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  pos += header_len;

  Checkpoint ck;
  try {
    ck.spec.name = header.at("name").get<std::string>();
    ck.spec.grid = parse_grid(header.at("grid").get<std::string>());
    ck.spec.input = extent_from(header.at("input"));
    ck.params.epoch = header.at("epoch").get<std::int64_t>();
    for (const json& j : header.at("layers")) {
      LayerSpec l;
      l.kind = kind_from(j.at("kind").get<std::string>());
      LayerParams<float> lp;
      switch (l.kind) {
        case LayerKind::kConv:
          l.conv = ConvSpec{j.at("in_channels").get<Index>(), j.at("out_channels").get<Index>(),
                            extent_from(j.at("kernel")), extent_from(j.at("stride"))};
          break;
        case LayerKind::kMaxPool:
          l.pool = PoolSpec{extent_from(j.at("window")), extent_from(j.at("stride"))};
          break;
        case LayerKind::kBatchNorm:
          l.channels = j.at("channels").get<Index>();
          lp.has_running_stats = j.at("has_running_stats").get<bool>();
          break;
        case LayerKind::kDense:
          l.in_features = j.at("in_features").get<Index>();
          l.out_features = j.at("out_features").get<Index>();
          break;
        case LayerKind::kRelu:
          break;
      }
      for (const json& s : j.at("tensors")) {
        Shape shape = s.get<Shape>();
        Tensor<float> t(shape);
        const std::size_t n = static_cast<std::size_t>(t.size()) * sizeof(float);
        if (pos + n > bytes.size()) throw FormatError("checkpoint truncated in parameter data");
        std::memcpy(t.raw(), bytes.data() + pos, n);
        pos += n;
        lp.tensors.push_back(std::move(t));
      }
      ck.spec.layers.push_back(l);
      ck.params.layers.push_back(std::move(lp));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is incomplete: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint declares an invalid tensor: ") + e.what());
  }
  if (pos != bytes.size()) {
    throw FormatError("checkpoint has " + std::to_string(bytes.size() - pos) +
                      " unexpected trailing bytes");
  }
  try {
    validate_network(ck.spec);
    check_params(ck.spec, ck.params);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint describes an inconsistent network: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const NetworkSpec& spec, const NetworkParams<float>& params,
                     const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(spec, params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace pdinterp
