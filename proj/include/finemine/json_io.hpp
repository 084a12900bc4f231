#pragma once

// JSON mapping for config types. Readers start from the given defaults,
// override present keys, and reject unknown keys with a path-qualified
// ValidationError.

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "finemine/synth_data.hpp"
#include "finemine/tinymodel.hpp"

namespace finemine::json_io {

using json = nlohmann::ordered_json;

void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view path);

// Typed lookups that convert nlohmann type errors into ValidationError.
bool read_bool(const json& j, std::string_view key, std::string_view path, bool fallback);
long long read_int(const json& j, std::string_view key, std::string_view path, long long fallback);
std::uint64_t read_seed(const json& j, std::string_view key, std::string_view path, std::uint64_t fallback);
double read_real(const json& j, std::string_view key, std::string_view path, double fallback);
std::string read_string(const json& j, std::string_view key, std::string_view path, const std::string& fallback);

json to_json(const synth::GenSpec& spec);
synth::GenSpec gen_spec_from_json(const json& j, std::string_view path, const synth::GenSpec& defaults = {});

json to_json(const nn::AugmentFlags& flags);
nn::AugmentFlags augment_from_json(const json& j, std::string_view path, const nn::AugmentFlags& defaults = {});

json to_json(const nn::TrainConfig& cfg);
nn::TrainConfig train_config_from_json(const json& j, std::string_view path, const nn::TrainConfig& defaults = {});

}  // namespace finemine::json_io
