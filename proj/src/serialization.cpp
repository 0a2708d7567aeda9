// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/serialization.hpp"

#include <fstream>
#include <set>

namespace nf {

using nlohmann::json;

namespace {

// Reads the keys of one JSON object, remembering which were consumed.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  template <typename F>
  void with(const char* key, F&& f) {
    seen_.insert(key);
    if (j_.contains(key)) f(j_.at(key), field(key));
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(field(item.key().c_str()) + ": unknown field");
    }
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "" : path_ + ": "; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_encoder(const json& j, EncoderConfig& c, const std::string& path) {
  Fields f(j, path);
  f.get("stage_channels", c.stage_channels);
  f.get("gpb_per_stage", c.gpb_per_stage);
  f.get("mlp_ratio", c.mlp_ratio);
  f.get("in_channels", c.in_channels);
  f.with("kind", [&](const json& v, const std::string& p) {
    if (!v.is_string()) throw ConfigError(p + ": expected a string");
    try {
      c.kind = encoder_kind_from_string(v.get<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(p + ": " + e.what());
    }
  });
  f.finish();
}

void read_attention(const json& j, AttentionConfig& c, const std::string& path) {
  Fields f(j, path);
  f.get("heads", c.heads);
  f.get("dim", c.dim);
  f.get("window", c.window);
  f.get("qkv_dim", c.qkv_dim);
  f.get("ffn_ratio", c.ffn_ratio);
  f.with("cma_residual", [&](const json& v, const std::string& p) {
    if (!v.is_string()) throw ConfigError(p + ": expected a string");
    c.cma_residual = cma_residual_from_string(v.get<std::string>());
  });
  f.finish();
}

void read_decoder(const json& j, DecoderConfig& c, const std::string& path) {
  Fields f(j, path);
  f.get("level_channels", c.level_channels);
  f.get("out_classes", c.out_classes);
  f.finish();
}

void read_model(const json& j, ModelConfig& c, const std::string& path) {
  Fields f(j, path);
  f.get("modalities", c.modalities);
  f.get("classes", c.classes);
  f.get("extents", c.extents);
  f.with("encoder", [&](const json& v, const std::string& p) { read_encoder(v, c.encoder, p); });
  f.with("attention", [&](const json& v, const std::string& p) { read_attention(v, c.attention, p); });
  f.with("decoder", [&](const json& v, const std::string& p) { read_decoder(v, c.decoder, p); });
  f.get("tokens", c.tokens);
  f.get("tsa_layers", c.tsa_layers);
  f.get("use_tsa", c.use_tsa);
  f.get("use_cma", c.use_cma);
  f.get("use_msg", c.use_msg);
  f.get("seed", c.seed);
  f.finish();
  c.decoder.out_classes = c.classes;
}

void read_phantom(const json& j, PhantomSpec& c, const std::string& path) {
  Fields f(j, path);
  f.get("extents", c.extents);
  f.get("modalities", c.modalities);
  f.get("classes", c.classes);
  f.get("objects_per_class", c.objects_per_class);
  f.get("radius_min", c.radius_min);
  f.get("radius_max", c.radius_max);
  f.get("visibility", c.visibility);
  f.get("noise_sigma", c.noise_sigma);
  f.get("seed", c.seed);
  f.get("max_attempts", c.max_attempts);
  f.finish();
}

void read_train(const json& j, TrainConfig& c, const std::string& path) {
  Fields f(j, path);
  f.get("lr", c.optim.lr);
  f.get("weight_decay", c.optim.weight_decay);
  f.get("beta1", c.optim.beta1);
  f.get("beta2", c.optim.beta2);
  f.get("eps", c.optim.eps);
  f.get("steps", c.steps);
  f.get("batch_size", c.batch_size);
  f.get("seed", c.seed);
  f.get("lambda_dice", c.lambda_dice);
  f.get("lambda_ce", c.lambda_ce);
  f.get("val_interval", c.val_interval);
  f.get("checkpoint_interval", c.checkpoint_interval);
  f.get("normalize_inputs", c.normalize_inputs);
  f.get("record_wall_time", c.record_wall_time);
  f.finish();
}

}  // namespace

void to_json(json& j, const EncoderConfig& c) {
  j = json{{"stage_channels", c.stage_channels},
           {"gpb_per_stage", c.gpb_per_stage},
           {"mlp_ratio", c.mlp_ratio},
           {"in_channels", c.in_channels},
           {"kind", to_string(c.kind)}};
}
void from_json(const json& j, EncoderConfig& c) { read_encoder(j, c, "encoder"); }

void to_json(json& j, const AttentionConfig& c) {
  j = json{{"heads", c.heads},     {"dim", c.dim},           {"window", c.window},
           {"qkv_dim", c.qkv_dim}, {"ffn_ratio", c.ffn_ratio}, {"cma_residual", to_string(c.cma_residual)}};
}
void from_json(const json& j, AttentionConfig& c) { read_attention(j, c, "attention"); }

void to_json(json& j, const DecoderConfig& c) {
  j = json{{"level_channels", c.level_channels}, {"out_classes", c.out_classes}};
}
void from_json(const json& j, DecoderConfig& c) { read_decoder(j, c, "decoder"); }

void to_json(json& j, const ModelConfig& c) {
  DecoderConfig dec = c.decoder;
  dec.out_classes = c.classes;
  j = json{{"modalities", c.modalities}, {"classes", c.classes},       {"extents", c.extents},
           {"encoder", c.encoder},       {"attention", c.attention},   {"decoder", dec},
           {"tokens", c.tokens},         {"tsa_layers", c.tsa_layers}, {"use_tsa", c.use_tsa},
           {"use_cma", c.use_cma},       {"use_msg", c.use_msg},       {"seed", c.seed}};
}
void from_json(const json& j, ModelConfig& c) { read_model(j, c, ""); }

void to_json(json& j, const PhantomSpec& c) {
  j = json{{"extents", c.extents},
           {"modalities", c.modalities},
           {"classes", c.classes},
           {"objects_per_class", c.objects_per_class},
           {"radius_min", c.radius_min},
           {"radius_max", c.radius_max},
           {"visibility", c.resolved_visibility()},
           {"noise_sigma", c.noise_sigma},
           {"seed", c.seed},
           {"max_attempts", c.max_attempts}};
}
void from_json(const json& j, PhantomSpec& c) { read_phantom(j, c, ""); }

void to_json(json& j, const AdamWConfig& c) {
  j = json{{"lr", c.lr}, {"weight_decay", c.weight_decay}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

void to_json(json& j, const TrainConfig& c) {
  j = c.optim;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["lambda_dice"] = c.lambda_dice;
  j["lambda_ce"] = c.lambda_ce;
  j["val_interval"] = c.val_interval;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["normalize_inputs"] = c.normalize_inputs;
  j["record_wall_time"] = c.record_wall_time;
}
void from_json(const json& j, TrainConfig& c) { read_train(j, c, ""); }

ModelConfig parse_model_config(const json& j) {
  ModelConfig c;
  read_model(j, c, "model");
  return c;
}

TrainConfig parse_train_config(const json& j) {
  TrainConfig c;
  read_train(j, c, "train");
  return c;
}

PhantomSpec parse_phantom_spec(const json& j) {
  PhantomSpec c;
  read_phantom(j, c, "phantom");
  return c;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace nf
