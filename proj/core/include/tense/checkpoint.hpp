#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "tense/model.hpp"

namespace tense {

nlohmann::json spec_to_json(const ModelSpec& spec);
/// Throws FormatError whose field is a path such as "layers[2].kernel".
ModelSpec spec_from_json(const nlohmann::json& j, const std::string& prefix = "");

/// Writes dir/manifest.json and one .tnsr file per parameter.
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

}  // namespace tense
