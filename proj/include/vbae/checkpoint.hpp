#pragma once

#include <string>

#include <json.hpp>

#include "vbae/model.hpp"

namespace vbae::checkpoint {

nlohmann::json config_to_json(const model::VbaeConfig& cfg);
// Strict: unknown keys are rejected.
model::VbaeConfig config_from_json(const nlohmann::json& j);

// Versioned JSON dump: model config, data dimensions, batch-norm state and
// every named parameter block (shape + row-major values). Doubles are stored
// as raw bit patterns so the round-trip is exact.
std::string checkpoint_to_json(const model::VbaeModel& m);
model::VbaeModel checkpoint_from_json(const std::string& text);

void save_checkpoint(const model::VbaeModel& m, const std::string& path);
model::VbaeModel load_checkpoint(const std::string& path);

}  // namespace vbae::checkpoint
