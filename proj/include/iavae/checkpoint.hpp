#pragma once

// JSON checkpoints:
//   {mode, architecture, blocks: [{name, shape, values}], seed,
//    hypernet?: {weight, bias, embeddings: [{name, shape, values}]}}
// Doubles are written in shortest round-trip form, so save/load is exact.

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "iavae/vae.hpp"

namespace iavae {

nlohmann::ordered_json checkpoint_json(const InferenceModel& model, std::uint64_t seed);
InferenceModel model_from_json(const nlohmann::json& doc);

void save_checkpoint(const std::filesystem::path& path, const InferenceModel& model, std::uint64_t seed);
InferenceModel load_checkpoint(const std::filesystem::path& path);
std::uint64_t load_checkpoint_seed(const std::filesystem::path& path);

}  // namespace iavae
