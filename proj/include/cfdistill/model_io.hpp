#pragma once

#include <filesystem>
#include <memory>

#include <json.hpp>

#include "cfdistill/cf_core.hpp"

namespace cfdistill {

nlohmann::json idm_to_json(const IdmParams& p);
IdmParams idm_from_json(const nlohmann::json& j);
void save_idm(const std::filesystem::path& path, const IdmParams& p);

/// Loads either an MLP checkpoint or an IDM parameter file, by its "format".
std::unique_ptr<CarFollowingModel> load_model(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace cfdistill
