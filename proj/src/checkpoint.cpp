#include "iavae/checkpoint.hpp"

#include <fstream>
#include <stdexcept>
#include <string>

namespace iavae {

namespace {

nlohmann::ordered_json tensor_json(const std::string& name, const ad::Tensor& t) {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["shape"] = t.shape().dims();
  j["values"] = t.values();
  return j;
}

ad::Tensor tensor_from(const nlohmann::json& j) {
  const auto dims = j.at("shape").get<std::vector<std::size_t>>();
  if (dims.empty() || dims.size() > 2)
    throw std::runtime_error("checkpoint: unsupported tensor rank " + std::to_string(dims.size()));
  const ad::Shape shape(dims);
  const auto values = j.at("values").get<std::vector<double>>();
  if (values.size() != shape.numel())
    throw std::runtime_error("checkpoint: tensor " + j.value("name", std::string("?")) + " has " +
                             std::to_string(values.size()) + " values for shape " + shape.to_string());
  return ad::Tensor(shape, values);
}

}  // namespace

nlohmann::ordered_json checkpoint_json(const InferenceModel& model, std::uint64_t seed) {
  nlohmann::ordered_json doc;
  doc["mode"] = mode_name(model.mode());
  const EncoderArch& a = model.encoder.arch;
  doc["architecture"] = {{"input_dim", a.input_dim},
                         {"hidden_width", a.hidden_width},
                         {"latent_dim", a.latent_dim},
                         {"activation", a.activation}};
  nlohmann::ordered_json blocks = nlohmann::ordered_json::array();
  for (const ParamBlock& b : model.encoder.blocks) blocks.push_back(tensor_json(b.name, b.values));
  doc["blocks"] = blocks;
  doc["seed"] = seed;
  if (model.hypernet) {
    const HypernetParams& psi = *model.hypernet;
    nlohmann::ordered_json h;
    h["weight"] = tensor_json("W", psi.weight);
    h["bias"] = tensor_json("b", psi.bias);
    nlohmann::ordered_json emb = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < psi.block_embeddings.size(); ++l)
      emb.push_back(tensor_json("e_" + std::to_string(l), psi.block_embeddings[l]));
    h["embeddings"] = emb;
    doc["hypernet"] = h;
  }
  return doc;
}

InferenceModel model_from_json(const nlohmann::json& doc) {
  InferenceModel model;
  const auto& a = doc.at("architecture");
  model.encoder.arch.input_dim = a.at("input_dim").get<std::size_t>();
  model.encoder.arch.hidden_width = a.at("hidden_width").get<std::size_t>();
  model.encoder.arch.latent_dim = a.at("latent_dim").get<std::size_t>();
  model.encoder.arch.activation = a.value("activation", std::string("relu"));
  if (model.encoder.arch.activation != "relu")
    throw std::runtime_error("checkpoint: unsupported activation " + model.encoder.arch.activation);
  std::size_t index = 0;
  for (const auto& b : doc.at("blocks"))
    model.encoder.blocks.push_back({index++, b.at("name").get<std::string>(), tensor_from(b)});
  try {
    model.encoder.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("checkpoint: ") + e.what());
  }
  if (doc.contains("hypernet")) {
    const auto& h = doc.at("hypernet");
    HypernetParams psi;
    psi.weight = tensor_from(h.at("weight"));
    psi.bias = tensor_from(h.at("bias"));
    for (const auto& e : h.at("embeddings")) psi.block_embeddings.push_back(tensor_from(e));
    try {
      psi.check_layout(model.encoder);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(std::string("checkpoint: ") + e.what());
    }
    model.hypernet = std::move(psi);
  }
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const InferenceModel& model, std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << checkpoint_json(model, seed).dump(1) << '\n';
}

namespace {

nlohmann::json read_doc(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace

InferenceModel load_checkpoint(const std::filesystem::path& path) { return model_from_json(read_doc(path)); }

std::uint64_t load_checkpoint_seed(const std::filesystem::path& path) {
  const nlohmann::json doc = read_doc(path);
  if (!doc.contains("seed") || !doc.at("seed").is_number_unsigned())
    throw std::runtime_error(path.string() + ": missing seed");
  return doc.at("seed").get<std::uint64_t>();
}

}  // namespace iavae
