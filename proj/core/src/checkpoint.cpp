#include "tense/checkpoint.hpp"

#include <fstream>

#include "tense/io.hpp"

namespace tense {

using nlohmann::json;

namespace {

constexpr int kCheckpointVersion = 1;

std::string kind_str(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

template <typename T>
T get(const json& j, const std::string& key, const std::string& path, T fallback) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw FormatError(path + key, "wrong type");
  }
}

template <typename T>
T require(const json& j, const std::string& key, const std::string& path) {
  if (!j.contains(key)) throw FormatError(path + key, "missing");
  return get<T>(j, key, path, T{});
}

}  // namespace

json spec_to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const auto& L : spec.layers) {
    json l{{"kind", kind_str(L.kind)}};
    if (L.kind == LayerKind::Dense || L.kind == LayerKind::Conv2d) {
      l["name"] = L.name;
      l["units"] = L.units;
      l["bias"] = L.bias;
    }
    if (L.kind == LayerKind::Conv2d) {
      l["kernel"] = L.kernel;
      l["stride"] = L.stride;
      l["padding"] = L.padding;
    }
    layers.push_back(l);
  }
  json rps = json::array();
  for (const auto& rp : spec.read_points)
    rps.push_back({{"name", rp.name},
                   {"layer", rp.layer},
                   {"point", rp.point == ReadPoint::Pre ? "pre" : "post"}});
  return {{"input_shape", spec.input_shape}, {"layers", layers}, {"read_points", rps}};
}

ModelSpec spec_from_json(const json& j, const std::string& prefix) {
  if (!j.is_object()) throw FormatError(prefix.empty() ? "spec" : prefix, "expected an object");
  ModelSpec spec;
  spec.input_shape = require<Shape>(j, "input_shape", prefix);
  if (!j.contains("layers") || !j["layers"].is_array())
    throw FormatError(prefix + "layers", "expected an array");
  for (std::size_t i = 0; i < j["layers"].size(); ++i) {
    const json& l = j["layers"][i];
    const std::string path = prefix + "layers[" + std::to_string(i) + "].";
    if (!l.is_object()) throw FormatError(path.substr(0, path.size() - 1), "expected an object");
    LayerSpec L;
    const auto kind = require<std::string>(l, "kind", path);
    if (kind == "dense") L.kind = LayerKind::Dense;
    else if (kind == "conv2d") L.kind = LayerKind::Conv2d;
    else if (kind == "relu") L.kind = LayerKind::Relu;
    else if (kind == "batchnorm") L.kind = LayerKind::BatchNorm;
    else if (kind == "flatten") L.kind = LayerKind::Flatten;
    else throw FormatError(path + "kind", "unknown layer kind '" + kind + "'");
    if (L.kind == LayerKind::Dense || L.kind == LayerKind::Conv2d) {
      L.name = require<std::string>(l, "name", path);
      L.units = require<std::size_t>(l, "units", path);
      L.bias = get<bool>(l, "bias", path, true);
    }
    if (L.kind == LayerKind::Conv2d) {
      L.kernel = require<std::size_t>(l, "kernel", path);
      L.stride = get<std::size_t>(l, "stride", path, 1);
      L.padding = get<std::size_t>(l, "padding", path, 0);
    }
    spec.layers.push_back(L);
  }
  if (j.contains("read_points")) {
    if (!j["read_points"].is_array()) throw FormatError(prefix + "read_points", "expected an array");
    for (std::size_t i = 0; i < j["read_points"].size(); ++i) {
      const json& r = j["read_points"][i];
      const std::string path = prefix + "read_points[" + std::to_string(i) + "].";
      ReadPointSpec rp;
      rp.layer = require<std::string>(r, "layer", path);
      rp.name = get<std::string>(r, "name", path, rp.layer);
      const auto point = get<std::string>(r, "point", path, "pre");
      if (point != "pre" && point != "post") throw FormatError(path + "point", "expected pre or post");
      rp.point = point == "pre" ? ReadPoint::Pre : ReadPoint::Post;
      spec.read_points.push_back(rp);
    }
  }
  try {
    analyze_spec(spec);
  } catch (const InvalidArgument& e) {
    throw FormatError(prefix + "layers", e.what());
  }
  return spec;
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json tensors = json::object();
  for (const auto& [name, t] : model.params) {
    const std::string file = name + ".tnsr";
    write_tensor(dir / file, t);
    tensors[name] = {{"file", file}, {"shape", t.shape()}};
  }
  json manifest{{"format", "tense-checkpoint"},
                {"version", kCheckpointVersion},
                {"spec", spec_to_json(model.spec)},
                {"seed", model.seed},
                {"metadata", model.metadata},
                {"tensors", tensors}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Model load_checkpoint(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  if (!std::filesystem::exists(mpath)) throw FormatError("manifest.json", "missing in " + dir.string());
  json m;
  try {
    std::ifstream in(mpath);
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("manifest.json", std::string("unparseable: ") + e.what());
  }
  if (!m.is_object()) throw FormatError("manifest.json", "expected an object");
  if (get<int>(m, "version", "", -1) != kCheckpointVersion)
    throw FormatError("version", "unsupported checkpoint version");
  if (!m.contains("spec")) throw FormatError("spec", "missing");

  Model model = build_model(spec_from_json(m["spec"], "spec."), get<std::uint64_t>(m, "seed", "", 0));
  if (m.contains("metadata")) {
    try {
      model.metadata = m["metadata"].get<std::map<std::string, std::string, std::less<>>>();
    } catch (const json::exception&) {
      throw FormatError("metadata", "expected string values");
    }
  }
  if (!m.contains("tensors") || !m["tensors"].is_object()) throw FormatError("tensors", "missing");
  const json& tensors = m["tensors"];
  if (tensors.size() != model.params.size())
    throw FormatError("tensors", "expected " + std::to_string(model.params.size()) +
                                     " parameters, found " + std::to_string(tensors.size()));
  for (auto& [name, expected] : model.params) {
    if (!tensors.contains(name)) throw FormatError("tensors." + name, "missing");
    const auto file = get<std::string>(tensors[name], "file", "tensors." + name + ".", "");
    if (file.empty() || file.find("..") != std::string::npos)
      throw FormatError("tensors." + name + ".file", "invalid file name");
    Tensor t = read_tensor(dir / file);
    if (t.shape() != expected.shape())
      throw FormatError("tensors." + name, "shape " + shape_str(t.shape()) + " but spec needs " +
                                               shape_str(expected.shape()));
    expected = std::move(t);
  }
  return model;
}

}  // namespace tense
