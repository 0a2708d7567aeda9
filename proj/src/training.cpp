// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "nestedformer/checkpoint.hpp"
#include "nestedformer/metrics.hpp"

namespace nf {

void TrainConfig::validate() const {
  optim.validate();
  if (steps == 0) throw ConfigError("train.steps must be at least 1");
  if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
  if (lambda_dice < 0.0 || lambda_ce < 0.0) throw ConfigError("train.lambda_dice and train.lambda_ce must be nonnegative");
  if (lambda_dice + lambda_ce <= 0.0) throw ConfigError("train: at least one loss weight must be positive");
}

std::string to_jsonl(const StepRecord& r) {
  const nlohmann::json j{{"step", r.step},       {"loss", r.loss}, {"dice_loss", r.dice_loss},
                         {"ce_loss", r.ce_loss}, {"lr", r.lr},     {"wall_ms", r.wall_ms}};
  return j.dump();
}

std::vector<std::size_t> sample_order(std::size_t dataset_size, std::size_t samples, std::uint64_t seed) {
  if (dataset_size == 0) throw ValidationError("training set is empty");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order;
  order.reserve(samples + dataset_size);
  std::vector<std::size_t> epoch(dataset_size);
  while (order.size() < samples) {
    for (std::size_t i = 0; i < dataset_size; ++i) epoch[i] = i;
    std::shuffle(epoch.begin(), epoch.end(), rng);
    order.insert(order.end(), epoch.begin(), epoch.end());
  }
  order.resize(samples);
  return order;
}

namespace {

struct PreparedCase {
  std::vector<Var> inputs;
  const SegmentationMask* mask;
};

std::ofstream open_log(const std::filesystem::path& path, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  return out;
}

}  // namespace

TrainResult train(NestedFormer& model, OptimState& state, const TrainConfig& cfg, const Dataset& train_set,
                  const Dataset* val_set, const TrainOutputs& outputs) {
  cfg.validate();
  if (train_set.empty()) throw ValidationError("training set is empty");
  const ModelConfig& mc = model.config();
  std::vector<PreparedCase> cases;
  for (const auto& c : train_set) {
    if (c.volume.modalities != mc.modalities || c.volume.extents != mc.extents) {
      throw ValidationError("case " + c.id + " does not match the model's modality count or extents");
    }
    if (c.mask.classes != mc.classes) throw ValidationError("case " + c.id + " has a different class count than the model");
    cases.push_back({modality_inputs(cfg.normalize_inputs ? normalize(c.volume) : c.volume), &c.mask});
  }

  ParamStore& params = model.params();
  if (state.m.empty()) state = OptimState::for_params(params);
  const std::uint64_t first_step = state.step;
  const auto order = sample_order(cases.size(), (first_step + cfg.steps) * cfg.batch_size, cfg.seed);

  std::ofstream log_file, val_file;
  if (outputs.dir) {
    std::filesystem::create_directories(*outputs.dir);
    log_file = open_log(*outputs.dir / "train_log.jsonl", first_step > 0);
    if (val_set && cfg.val_interval) val_file = open_log(*outputs.dir / "validation.jsonl", first_step > 0);
  }

  TrainResult result;
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t step = first_step + s + 1;
    StepRecord rec;
    rec.step = step;
    rec.lr = cfg.optim.lr;
    params.zero_grad();
    try {
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const PreparedCase& pc = cases[order[(step - 1) * cfg.batch_size + b]];
        Tape tape;
        LossTerms terms;
        {
          TapeScope scope(tape);
          const Var logits = model.forward(pc.inputs);
          terms = combined_loss(logits, *pc.mask, cfg.lambda_dice, cfg.lambda_ce);
          terms.total = ops::scale(terms.total, inv_batch);
        }
        const double loss = terms.total.value().item();
        if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
        backward(terms.total, tape);
        rec.loss += loss;
        rec.dice_loss += terms.dice * inv_batch;
        rec.ce_loss += terms.ce * inv_batch;
      }
      adamw_step(params, state, cfg.optim);
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      break;
    }
    params.round_to_storage();
    if (cfg.record_wall_time) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    result.log.push_back(rec);
    if (log_file.is_open()) log_file << to_jsonl(rec) << '\n' << std::flush;
    if (outputs.on_step) outputs.on_step(rec);

    if (val_set && !val_set->empty() && cfg.val_interval && step % cfg.val_interval == 0) {
      const ValidationRecord v{step, evaluate(model, *val_set, cfg.normalize_inputs).mean_dice};
      result.validation.push_back(v);
      if (val_file.is_open()) val_file << nlohmann::json{{"step", v.step}, {"dice", v.dice}}.dump() << '\n' << std::flush;
    }
    if (outputs.dir && cfg.checkpoint_interval && step % cfg.checkpoint_interval == 0) {
      const auto path = *outputs.dir / ("checkpoint_" + std::to_string(step) + ".nfck");
      save_checkpoint(path, model, &state);
      result.last_checkpoint = path;
    }
  }

  if (outputs.dir) {
    // After an abort the parameters still hold the last good step.
    const auto path = *outputs.dir / (result.aborted ? "last_good.nfck" : "final.nfck");
    save_checkpoint(path, model, &state);
    result.last_checkpoint = path;
  }
  return result;
}

ModelConfig AblationVariant::apply(ModelConfig cfg) const {
  cfg.encoder.kind = encoder;
  cfg.use_tsa = use_tsa;
  cfg.use_cma = use_cma;
  cfg.use_msg = use_msg;
  return cfg;
}

const std::vector<AblationVariant>& ablation_registry() {
  static const std::vector<AblationVariant> registry{
      {"baseline1", "CNN encoders, concatenation fusion, concatenated skips", EncoderKind::cnn, false, false, false},
      {"baseline2", "GPB encoders, concatenation fusion, concatenated skips", EncoderKind::gpb, false, false, false},
      {"tsa", "baseline2 with the spatial attention layers", EncoderKind::gpb, true, false, false},
      {"tsa_cma", "tsa with cross-modal attention", EncoderKind::gpb, true, true, false},
      {"pb_swap", "full model with average-pool Poolformer encoders", EncoderKind::pb, true, true, true},
      {"full", "GPB encoders, spatial and cross-modal attention, gated skips", EncoderKind::gpb, true, true, true},
  };
  return registry;
}

const AblationVariant& find_ablation(const std::string& name) {
  for (const auto& v : ablation_registry()) {
    if (v.name == name) return v;
  }
  throw ConfigError("unknown ablation variant '" + name + "'");
}

}  // namespace nf
