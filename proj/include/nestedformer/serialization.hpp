// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include "nestedformer/data.hpp"
#include "nestedformer/model.hpp"
#include "nestedformer/training.hpp"

// JSON mappings for every configuration type. Readers start from defaults,
// fill only the keys present and reject unknown keys with a ConfigError that
// names the field.
namespace nf {

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const AttentionConfig& c);
void from_json(const nlohmann::json& j, AttentionConfig& c);
void to_json(nlohmann::json& j, const DecoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const PhantomSpec& c);
void from_json(const nlohmann::json& j, PhantomSpec& c);
void to_json(nlohmann::json& j, const AdamWConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Parses with field-path error messages ("model.encoder.kind: ...").
ModelConfig parse_model_config(const nlohmann::json& j);
TrainConfig parse_train_config(const nlohmann::json& j);
PhantomSpec parse_phantom_spec(const nlohmann::json& j);

nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace nf
