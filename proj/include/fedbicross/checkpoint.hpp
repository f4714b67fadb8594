#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "fedbicross/dataset.hpp"
#include "fedbicross/errors.hpp"
#include "fedbicross/model.hpp"

namespace fedbicross {

// Atomic file write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& contents) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + " (" + ec.message() + ")");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

namespace detail {

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batch_norm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::Flatten: return "flatten";
  }
  return "unknown";
}

inline LayerKind layer_kind_from(const std::string& s) {
  if (s == "dense") return LayerKind::Dense;
  if (s == "conv2d") return LayerKind::Conv2d;
  if (s == "batch_norm") return LayerKind::BatchNorm;
  if (s == "relu") return LayerKind::ReLU;
  if (s == "tanh") return LayerKind::Tanh;
  if (s == "flatten") return LayerKind::Flatten;
  throw IoError("model container: unknown layer kind '" + s + "'");
}

}  // namespace detail

// Model container: architecture descriptor + flat parameter vector + BN
// states, as JSON. Doubles round-trip exactly.
inline nlohmann::json model_to_json(const Model& model) {
  nlohmann::json j;
  j["format"] = "fedbicross-model-v1";
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.arch().layers) {
    nlohmann::json lj;
    lj["kind"] = detail::layer_kind_name(l.kind);
    if (l.kind == LayerKind::Dense) {
      lj["in"] = l.in;
      lj["out"] = l.out;
    } else if (l.kind == LayerKind::Conv2d) {
      lj["in"] = l.in;
      lj["out"] = l.out;
      lj["kernel"] = l.kernel;
      lj["pad"] = l.pad;
    } else if (l.kind == LayerKind::BatchNorm) {
      lj["features"] = l.in;
    }
    layers.push_back(lj);
  }
  j["architecture"] = {{"input_shape", model.arch().input_shape},
                       {"num_classes", model.arch().num_classes},
                       {"layers", layers}};
  j["parameters"] = model.parameters();
  nlohmann::json bn = nlohmann::json::array();
  for (const auto& st : model.bn_states())
    bn.push_back({{"running_mean", st.running_mean}, {"running_var", st.running_var}});
  j["bn_states"] = bn;
  return j;
}

inline Model model_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "fedbicross-model-v1")
    throw IoError("model container: missing or unsupported format tag");
  Architecture arch;
  const auto& aj = j.at("architecture");
  arch.input_shape = aj.at("input_shape").get<std::vector<std::size_t>>();
  arch.num_classes = aj.at("num_classes").get<std::size_t>();
  for (const auto& lj : aj.at("layers")) {
    LayerSpec l;
    l.kind = detail::layer_kind_from(lj.at("kind").get<std::string>());
    if (l.kind == LayerKind::Dense) {
      l.in = lj.at("in").get<std::size_t>();
      l.out = lj.at("out").get<std::size_t>();
    } else if (l.kind == LayerKind::Conv2d) {
      l.in = lj.at("in").get<std::size_t>();
      l.out = lj.at("out").get<std::size_t>();
      l.kernel = lj.at("kernel").get<std::size_t>();
      l.pad = lj.at("pad").get<std::size_t>();
    } else if (l.kind == LayerKind::BatchNorm) {
      l.in = l.out = lj.at("features").get<std::size_t>();
    }
    arch.layers.push_back(l);
  }
  Model model(arch);
  model.set_parameters(j.at("parameters").get<std::vector<double>>());
  std::vector<BatchNormState> bn;
  for (const auto& st : j.at("bn_states"))
    bn.push_back({st.at("running_mean").get<std::vector<double>>(),
                  st.at("running_var").get<std::vector<double>>()});
  model.set_bn_states(std::move(bn));
  return model;
}

inline void save_model(const Model& model, const std::filesystem::path& path) {
  write_file_atomic(path, model_to_json(model).dump(2) + "\n");
}

inline Model load_model(const std::filesystem::path& path) {
  return model_from_json(nlohmann::json::parse(read_file(path)));
}

// Dataset snapshot in the same container style, for reproducibility dumps.
inline nlohmann::json dataset_to_json(const Dataset& d) {
  return {{"format", "fedbicross-dataset-v1"},
          {"shape", d.inputs.shape},
          {"inputs", d.inputs.data},
          {"labels", d.labels},
          {"num_classes", d.num_classes}};
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "fedbicross-dataset-v1")
    throw IoError("dataset container: missing or unsupported format tag");
  Dataset d;
  d.inputs = Tensor(j.at("shape").get<std::vector<std::size_t>>(),
                    j.at("inputs").get<std::vector<double>>());
  d.labels = j.at("labels").get<std::vector<std::size_t>>();
  d.num_classes = j.at("num_classes").get<std::size_t>();
  return d;
}

}  // namespace fedbicross
