// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/model.hpp"

#include <random>

namespace nf {

void ModelConfig::validate() const {
  if (modalities == 0) throw ConfigError("model.modalities must be at least 1");
  if (classes < 2) throw ConfigError("model.classes must be at least 2");
  for (auto e : extents) {
    if (e == 0 || e % 16 != 0) throw ConfigError("model.extents must be positive multiples of 16");
  }
  encoder.validate();
  attention.validate();
  decoder.validate();
  if (encoder.stage_channels[kPyramidLevels - 1] != attention.dim) {
    throw ConfigError("attention.dim (" + std::to_string(attention.dim) + ") must equal the last encoder stage width (" +
                      std::to_string(encoder.stage_channels[kPyramidLevels - 1]) + ")");
  }
  if (use_cma && tokens == 0) throw ConfigError("model.tokens must be at least 1");
  if (use_tsa) {
    if (tsa_layers == 0) throw ConfigError("model.tsa_layers must be at least 1 when use_tsa is set");
    const Grid g = bottleneck_grid();
    if (g.z % attention.window[0] || g.y % attention.window[1] || g.x % attention.window[2]) {
      throw ConfigError("attention.window does not divide the bottleneck grid " + to_string(g));
    }
  }
}

Grid ModelConfig::bottleneck_grid() const { return Grid{extents[0] / 16, extents[1] / 16, extents[2] / 16}; }

ModelConfig ModelConfig::brats() { return ModelConfig{}; }

ModelConfig ModelConfig::toy(std::size_t modalities, std::size_t classes, std::array<std::size_t, 3> extents,
                             std::size_t width) {
  ModelConfig cfg;
  cfg.modalities = modalities;
  cfg.classes = classes;
  cfg.extents = extents;
  const std::size_t half = std::max<std::size_t>(1, width / 2);
  cfg.encoder.stage_channels = {half, width, width, width, width};
  cfg.encoder.gpb_per_stage = 1;
  cfg.encoder.mlp_ratio = 2;
  cfg.attention.heads = 2;
  cfg.attention.dim = width;
  cfg.attention.qkv_dim = width;
  cfg.attention.ffn_ratio = 2;
  const Grid g = cfg.bottleneck_grid();
  cfg.attention.window = {g.z % 2 ? 1u : 2u, g.y % 2 ? 1u : 2u, g.x % 2 ? 1u : 2u};
  cfg.decoder.level_channels = {width, width, half, half};
  cfg.tokens = 4;
  return cfg;
}

NestedFormer::NestedFormer(const ModelConfig& cfg) : cfg_(cfg), store_(std::make_unique<ParamStore>()) {
  cfg_.decoder.out_classes = cfg_.classes;
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  ParamFactory root(*store_, rng);

  for (std::size_t m = 0; m < cfg_.modalities; ++m) encoders_.emplace_back(root.sub("encoder" + std::to_string(m)), cfg_.encoder);

  NmafaOptions opts;
  opts.use_tsa = cfg_.use_tsa;
  opts.use_cma = cfg_.use_cma;
  opts.tsa_layers = cfg_.tsa_layers;
  opts.tokens = cfg_.tokens;
  nmafa_ = std::make_unique<Nmafa>(root.sub("fusion"), cfg_.modalities, cfg_.attention, cfg_.bottleneck_grid(), opts);

  const auto& sc = cfg_.encoder.stage_channels;
  if (cfg_.use_msg) {
    msg_.emplace(root.sub("gating"), cfg_.attention.dim, cfg_.modalities);
  } else {
    for (std::size_t l = kSkipLevels; l >= 1; --l) {
      concat_skips_.emplace_back(root.sub("skip" + std::to_string(l)), cfg_.modalities, sc[l - 1]);
    }
  }
  decoder_ = std::make_unique<Decoder>(root.sub("decoder"), cfg_.decoder, cfg_.attention.dim,
                                       std::array<std::size_t, kSkipLevels>{sc[0], sc[1], sc[2], sc[3]});
  store_->round_to_storage();
}

std::vector<Var> modality_inputs(const MultiModalVolume& x) {
  std::vector<Var> out;
  out.reserve(x.modalities);
  for (std::size_t m = 0; m < x.modalities; ++m) {
    const auto src = x.modality(m);
    Tensor t(Shape{x.extents[0], x.extents[1], x.extents[2], 1});
    for (std::size_t i = 0; i < src.size(); ++i) t[i] = src[i];
    out.emplace_back(std::move(t));
  }
  return out;
}

Var NestedFormer::forward(const MultiModalVolume& x) const {
  if (x.modalities != cfg_.modalities) {
    throw ContractError("forward: model expects " + std::to_string(cfg_.modalities) + " modalities, got " +
                        std::to_string(x.modalities));
  }
  return forward(modality_inputs(x));
}

Var NestedFormer::forward(const std::vector<Var>& modalities) const {
  if (modalities.size() != cfg_.modalities) {
    throw ContractError("forward: model expects " + std::to_string(cfg_.modalities) + " modalities, got " +
                        std::to_string(modalities.size()));
  }
  const Shape expect{cfg_.extents[0], cfg_.extents[1], cfg_.extents[2], cfg_.encoder.in_channels};
  std::vector<FeaturePyramid> pyramids;
  pyramids.reserve(modalities.size());
  for (std::size_t m = 0; m < modalities.size(); ++m) {
    if (modalities[m].shape() != expect) {
      throw DimensionError("forward: modality " + std::to_string(m) + " has shape " + to_string(modalities[m].shape()) +
                           ", expected " + to_string(expect));
    }
    pyramids.push_back(encoders_[m].encode(modalities[m]));
  }

  std::vector<Var> deepest;
  for (const auto& p : pyramids) deepest.push_back(p.level(kPyramidLevels));
  const TokenSeq fused = nmafa_->forward(deepest);

  std::vector<Var> skips;
  for (std::size_t l = kSkipLevels; l >= 1; --l) {
    std::vector<Var> features;
    for (const auto& p : pyramids) features.push_back(p.level(l));
    if (msg_) {
      skips.push_back(msg_filter(msg_->importance(fused, l), features));
    } else {
      skips.push_back(concat_skips_[kSkipLevels - l].forward(features));
    }
  }
  return decoder_->decode(fold_tokens(fused), skips);
}

namespace {

std::string prefix_of(const std::string& name, std::size_t parts) {
  std::size_t pos = 0;
  for (std::size_t i = 0; i < parts; ++i) {
    pos = name.find('.', pos);
    if (pos == std::string::npos) return name;
    if (i + 1 < parts) ++pos;
  }
  return name.substr(0, pos);
}

void accumulate(std::vector<std::pair<std::string, std::size_t>>& groups, const std::string& key, std::size_t n) {
  for (auto& [k, v] : groups) {
    if (k == key) {
      v += n;
      return;
    }
  }
  groups.emplace_back(key, n);
}

}  // namespace

ParamBreakdown NestedFormer::count_params() const {
  ParamBreakdown out;
  for (const auto& p : store_->entries()) {
    const std::size_t n = p.var.value().size();
    out.total += n;
    std::string top = prefix_of(p.name, 1);
    if (top.rfind("encoder", 0) == 0) top = "encoders";
    if (top.rfind("skip", 0) == 0) top = "skip_merge";
    accumulate(out.modules, top, n);
    accumulate(out.details, prefix_of(p.name, 2), n);
  }
  return out;
}

AttentionMode attention_mode_from_string(const std::string& name) {
  if (name == "full") return AttentionMode::full;
  if (name == "tsa") return AttentionMode::tsa;
  throw ConfigError("attention mode must be 'full' or 'tsa', got '" + name + "'");
}

std::uint64_t attention_cost(const Grid& grid, const std::array<std::size_t, 3>& window, AttentionMode mode) {
  const std::uint64_t n = grid.volume();
  if (mode == AttentionMode::full) return n * n;
  for (auto w : window) {
    if (w == 0) throw ConfigError("window entries must be positive");
  }
  if (grid.z % window[0] || grid.y % window[1] || grid.x % window[2]) {
    throw ConfigError("window does not divide grid " + to_string(grid));
  }
  const std::uint64_t wv = window[0] * window[1] * window[2];
  return n * grid.z + n * (grid.y * grid.x) + n * wv;
}

double estimate_flops(const ModelConfig& raw) {
  ModelConfig cfg = raw;
  cfg.decoder.out_classes = cfg.classes;
  cfg.validate();
  const auto& sc = cfg.encoder.stage_channels;
  auto voxels = [&](std::size_t level) {
    const double s = static_cast<double>(1u << (level - 1));
    return (cfg.extents[0] / s) * (cfg.extents[1] / s) * (cfg.extents[2] / s);
  };
  double macs = 0.0;

  // Encoders.
  for (std::size_t l = 1; l <= kPyramidLevels; ++l) {
    const double v = voxels(l);
    const double c = static_cast<double>(sc[l - 1]);
    const double cin = l == 1 ? static_cast<double>(cfg.encoder.in_channels) : static_cast<double>(sc[l - 2]);
    macs += v * (l == 1 ? 1.0 : 8.0) * cin * c;
    const double hidden = c * static_cast<double>(cfg.encoder.mlp_ratio);
    for (std::size_t b = 0; b < cfg.encoder.gpb_per_stage; ++b) {
      switch (cfg.encoder.kind) {
        case EncoderKind::gpb: macs += c * c + 2.0 * v * c * hidden; break;
        case EncoderKind::pb: macs += 27.0 * v * c + 2.0 * v * c * hidden; break;
        case EncoderKind::cnn: macs += 2.0 * 27.0 * v * c * c; break;
      }
    }
  }
  macs *= static_cast<double>(cfg.modalities);

  // Fusion.
  const Grid g = cfg.bottleneck_grid();
  const double n = static_cast<double>(g.volume());
  const double c = static_cast<double>(cfg.attention.dim);
  const double qkv = static_cast<double>(cfg.attention.qkv_dim);
  const double m = static_cast<double>(cfg.modalities);
  const double ffn = 2.0 * n * c * c * static_cast<double>(cfg.attention.ffn_ratio);
  macs += n * m * c * c;
  if (cfg.use_tsa) {
    const double scores = static_cast<double>(attention_cost(g, cfg.attention.window, AttentionMode::tsa));
    macs += static_cast<double>(cfg.tsa_layers) * (3.0 * (3.0 * n * c * qkv + n * qkv * c) + 2.0 * scores * qkv + ffn);
  }
  if (cfg.use_cma) {
    const double p = static_cast<double>(cfg.tokens);
    macs += m * (n * c * c + n * c * p + p * n * c);
    macs += n * c * qkv + 2.0 * m * p * c * qkv + 2.0 * n * m * p * qkv + n * qkv * c + ffn;
  }

  // Skip merge and decoder.
  for (std::size_t l = 1; l <= kSkipLevels; ++l) {
    const double v = voxels(l);
    const double cl = static_cast<double>(sc[l - 1]);
    macs += cfg.use_msg ? n * c * m + v * cl * m : v * m * cl * cl;
  }
  double cin = c;
  for (std::size_t i = 0; i < kSkipLevels; ++i) {
    const std::size_t level = kSkipLevels - i;
    const double cout = static_cast<double>(cfg.decoder.level_channels[i]);
    macs += voxels(level) * 27.0 * (cin + static_cast<double>(sc[level - 1])) * cout;
    cin = cout;
  }
  macs += voxels(1) * cin * static_cast<double>(cfg.classes);
  return 2.0 * macs;
}

}  // namespace nf
