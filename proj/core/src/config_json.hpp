#pragma once

// Internal (not installed): JSON forms of the config sections, shared by the
// config file/override machinery and the checkpoint header.

#include <json.hpp>

#include "ctxlm/config.hpp"

namespace ctxlm::detail {

nlohmann::json to_json(const ModelConfig& m);
nlohmann::json to_json(const TrainConfig& t);
void merge_model(ModelConfig& m, const nlohmann::json& j);
void merge_train(TrainConfig& t, const nlohmann::json& j);

}  // namespace ctxlm::detail
