// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "nestedformer/checkpoint.hpp"
#include "nestedformer/diagnostics.hpp"
#include "nestedformer/metrics.hpp"
#include "nestedformer/parallel.hpp"
#include "nestedformer/serialization.hpp"

namespace nf {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::array<std::size_t, 3> parse_triple(const std::string& text, const char* flag) {
  std::array<std::size_t, 3> out{};
  std::stringstream ss(text);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i >= 3) throw ValidationError(std::string(flag) + ": expected three comma-separated integers, got '" + text + "'");
    try {
      std::size_t used = 0;
      const long v = std::stol(part, &used);
      if (used != part.size() || v <= 0) throw std::invalid_argument(part);
      out[i++] = static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      throw ValidationError(std::string(flag) + ": '" + part + "' is not a positive integer");
    }
  }
  if (i != 3) throw ValidationError(std::string(flag) + ": expected three comma-separated integers, got '" + text + "'");
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stoull(part));
    } catch (const std::logic_error&) {
      throw ValidationError("--seeds: '" + part + "' is not an integer");
    }
  }
  if (out.empty()) throw ValidationError("--seeds: at least one seed is required");
  return out;
}

std::array<double, 3> parse_fractions(const std::string& text) {
  std::array<double, 3> out{};
  std::stringstream ss(text);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i >= 3) throw ValidationError("--split: expected three fractions");
    try {
      out[i++] = std::stod(part);
    } catch (const std::logic_error&) {
      throw ValidationError("--split: '" + part + "' is not a number");
    }
  }
  if (i != 3) throw ValidationError("--split: expected three fractions");
  return out;
}

// Records what a run is about to do. Written before any heavy work.
class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args, fs::path out)
      : out_(std::move(out)), j_{{"command", std::move(command)}, {"args", args}, {"tool_version", kToolVersion}} {
    j_["artifacts"] = json::array();
  }
  json& config() { return j_["config"]; }
  void seed(std::uint64_t s) { j_["seed"] = s; }
  void artifact(const fs::path& p) { j_["artifacts"].push_back(p.string()); }
  void write() const {
    fs::create_directories(out_);
    std::ofstream f(out_ / "manifest.json");
    if (!f) throw ValidationError("cannot write '" + (out_ / "manifest.json").string() + "'");
    f << j_.dump(2) << '\n';
  }

 private:
  fs::path out_;
  json j_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write '" + path.string() + "'");
  f << text;
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

void check_dataset_matches(const Dataset& data, const ModelConfig& cfg) {
  for (const auto& c : data) {
    if (c.volume.modalities != cfg.modalities) {
      throw ValidationError("case " + c.id + " has " + std::to_string(c.volume.modalities) +
                            " modalities; model.modalities is " + std::to_string(cfg.modalities));
    }
    if (c.volume.extents != cfg.extents) throw ValidationError("case " + c.id + " extents differ from model.extents");
    if (c.mask.classes != cfg.classes) {
      throw ValidationError("case " + c.id + " has " + std::to_string(c.mask.classes) + " classes; model.classes is " +
                            std::to_string(cfg.classes));
    }
  }
}

ModelConfig default_model_for(const Dataset& data, std::size_t width) {
  const auto& c = data.at(0);
  return ModelConfig::toy(c.volume.modalities, c.mask.classes, c.volume.extents, width);
}

Dataset select(const Dataset& data, const std::vector<std::size_t>& idx) {
  Dataset out;
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"NestedFormer: multi-modal volumetric segmentation on the CPU", "nestedformer"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "Worker threads for generation and evaluation (default NF_THREADS or 1)");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic multi-modal phantom dataset");
  std::string gen_spec, gen_out;
  std::size_t gen_count = 4;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--spec", gen_spec, "Phantom spec JSON (defaults when omitted)");
  gen->add_option("--count", gen_count, "Number of cases")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Base seed (overrides the spec)");
  gen->add_option("--out", gen_out, "Output dataset directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
  std::string tr_model, tr_train, tr_data, tr_val, tr_out, tr_resume, tr_variant;
  std::optional<std::size_t> tr_steps, tr_width;
  std::optional<double> tr_lr;
  std::optional<std::uint64_t> tr_seed;
  bool tr_force = false, tr_no_wall = false;
  tr->add_option("--model", tr_model, "Model config JSON (toy config sized from the data when omitted)");
  tr->add_option("--train", tr_train, "Training config JSON");
  tr->add_option("--data", tr_data, "Training dataset directory")->required();
  tr->add_option("--val", tr_val, "Validation dataset directory");
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--resume", tr_resume, "Checkpoint to continue from");
  tr->add_option("--variant", tr_variant, "Ablation variant applied to the model config");
  tr->add_option("--steps", tr_steps, "Optimizer steps");
  tr->add_option("--lr", tr_lr, "Learning rate");
  tr->add_option("--seed", tr_seed, "Seed for initialisation and sample order");
  tr->add_option("--width", tr_width, "Channel width of the default toy config");
  tr->add_flag("--force-config", tr_force, "Accept a resume checkpoint whose config differs");
  tr->add_flag("--no-wall-time", tr_no_wall, "Log wall_ms as 0 so repeated runs produce identical logs");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  std::string ev_ckpt, ev_data, ev_out;
  bool ev_raw = false;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "Output directory")->required();
  ev->add_flag("--raw-inputs", ev_raw, "Skip per-modality intensity normalisation");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks of every block");
  std::string gc_scale = "toy", gc_out;
  std::uint64_t gc_seed = 7;
  double gc_tol = 1e-4;
  gc->add_option("--scale", gc_scale, "Problem scale")->capture_default_str();
  gc->add_option("--seed", gc_seed, "Seed")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "Maximum relative error")->capture_default_str();
  gc->add_option("--out", gc_out, "Directory for gradcheck.csv and the manifest");

  // bench-attn
  auto* ba = app.add_subcommand("bench-attn", "Compare full and restricted attention cost");
  std::vector<std::string> ba_grids;
  std::string ba_window = "2,2,2", ba_out;
  std::size_t ba_dim = 32, ba_heads = 4, ba_repeats = 3;
  ba->add_option("--grid", ba_grids, "Token grid z,y,x (repeatable; default 8,8,8)");
  ba->add_option("--window", ba_window, "Window z,y,x")->capture_default_str();
  ba->add_option("--dim", ba_dim, "Projection width")->capture_default_str();
  ba->add_option("--heads", ba_heads, "Attention heads")->capture_default_str();
  ba->add_option("--repeats", ba_repeats, "Timing repeats (best is reported)")->capture_default_str();
  ba->add_option("--out", ba_out, "Directory for bench_attn.csv and the manifest");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train every ablation variant and rank validation Dice");
  std::string ab_data, ab_spec, ab_model, ab_train, ab_out, ab_seeds = "0,1,2", ab_split = "0.8,0.2,0";
  std::vector<std::string> ab_variants;
  std::size_t ab_cases = 20;
  std::optional<std::size_t> ab_steps;
  ab->add_option("--data", ab_data, "Dataset directory (generated from --spec when omitted)");
  ab->add_option("--spec", ab_spec, "Phantom spec JSON used when --data is omitted");
  ab->add_option("--cases", ab_cases, "Generated case count")->capture_default_str();
  ab->add_option("--model", ab_model, "Base model config JSON");
  ab->add_option("--train", ab_train, "Training config JSON");
  ab->add_option("--variants", ab_variants, "Variants to run (default: all)");
  ab->add_option("--seeds", ab_seeds, "Comma-separated seeds")->capture_default_str();
  ab->add_option("--split", ab_split, "train,val,test fractions")->capture_default_str();
  ab->add_option("--steps", ab_steps, "Optimizer steps per run");
  ab->add_option("--out", ab_out, "Output directory")->required();

  // report
  auto* rp = app.add_subcommand("report", "Merge JSONL logs and CSV reports into plot-ready CSV");
  std::vector<std::string> rp_inputs;
  std::string rp_out;
  rp->add_option("--input", rp_inputs, "JSONL or CSV files")->required();
  rp->add_option("--out", rp_out, "Output directory")->required();

  std::vector<const char*> argv{"nestedformer"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  threads = resolve_threads(threads);

  try {
    if (gen->parsed()) {
      PhantomSpec spec = gen_spec.empty() ? PhantomSpec{} : parse_phantom_spec(read_json_file(gen_spec));
      if (gen_seed) spec.seed = *gen_seed;
      spec.validate();
      if (gen_count == 0) throw ValidationError("--count must be at least 1");
      Manifest m("gen", args, gen_out);
      m.config() = {{"phantom", spec}, {"count", gen_count}};
      m.seed(spec.seed);
      for (std::size_t i = 0; i < gen_count; ++i) {
        std::ostringstream name;
        name << "case_" << std::setw(4) << std::setfill('0') << i;
        m.artifact(fs::path(gen_out) / name.str());
      }
      m.write();
      const Dataset data = generate_dataset(spec, gen_count, threads);
      write_dataset(gen_out, data, spec);
      out << "wrote " << data.size() << " cases to " << gen_out << '\n';
      return 0;
    }

    if (tr->parsed()) {
      const Dataset train_set = read_dataset(tr_data);
      const Dataset val_set = tr_val.empty() ? Dataset{} : read_dataset(tr_val);
      ModelConfig mc = tr_model.empty() ? default_model_for(train_set, tr_width.value_or(16))
                                        : parse_model_config(read_json_file(tr_model));
      TrainConfig tc = tr_train.empty() ? TrainConfig{} : parse_train_config(read_json_file(tr_train));
      if (!tr_variant.empty()) mc = find_ablation(tr_variant).apply(mc);
      if (tr_steps) tc.steps = *tr_steps;
      if (tr_lr) tc.optim.lr = *tr_lr;
      if (tr_seed) {
        tc.seed = *tr_seed;
        mc.seed = *tr_seed;
      }
      if (tr_no_wall) tc.record_wall_time = false;
      mc.decoder.out_classes = mc.classes;
      mc.validate();
      tc.validate();
      check_dataset_matches(train_set, mc);
      if (!val_set.empty()) check_dataset_matches(val_set, mc);

      std::optional<LoadedCheckpoint> resumed;
      if (!tr_resume.empty()) {
        resumed.emplace(load_checkpoint(tr_resume, &mc, tr_force));
        mc = resumed->model.config();
      }

      Manifest m("train", args, tr_out);
      m.config() = {{"model", mc}, {"train", tc}, {"data", tr_data}, {"val", tr_val}, {"resume", tr_resume}};
      m.seed(tc.seed);
      m.artifact(fs::path(tr_out) / "train_log.jsonl");
      m.artifact(fs::path(tr_out) / "final.nfck");
      m.write();

      NestedFormer model = resumed ? std::move(resumed->model) : NestedFormer(mc);
      OptimState state = resumed && resumed->optim ? *resumed->optim : OptimState{};
      TrainOutputs outputs;
      outputs.dir = fs::path(tr_out);
      const TrainResult result = train(model, state, tc, train_set, val_set.empty() ? nullptr : &val_set, outputs);
      if (result.aborted) {
        err << "training aborted: " << result.abort_reason << "; last good state in "
            << (result.last_checkpoint ? result.last_checkpoint->string() : std::string("(none)")) << '\n';
        return 2;
      }
      out << "trained " << result.log.size() << " steps, final loss " << fixed(result.log.back().loss, 6) << '\n';
      return 0;
    }

    if (ev->parsed()) {
      Manifest m("eval", args, ev_out);
      m.config() = {{"checkpoint", ev_ckpt}, {"data", ev_data}, {"normalize_inputs", !ev_raw}};
      m.seed(0);
      m.artifact(fs::path(ev_out) / "metrics.csv");
      m.artifact(fs::path(ev_out) / "metrics.json");
      if (!fs::exists(ev_ckpt)) throw ValidationError("checkpoint '" + ev_ckpt + "' not found");
      const Dataset data = read_dataset(ev_data);
      LoadedCheckpoint ck = load_checkpoint(ev_ckpt);
      check_dataset_matches(data, ck.model.config());
      m.config()["model"] = ck.model.config();
      m.write();
      const EvalReport report = evaluate(ck.model, data, !ev_raw, threads);
      write_report_csv(fs::path(ev_out) / "metrics.csv", report);
      write_text(fs::path(ev_out) / "metrics.json", report_json(report).dump(2) + "\n");
      out << "mean dice " << fixed(report.mean_dice, 4) << ", mean hd95 "
          << (std::isfinite(report.mean_hd95) ? fixed(report.mean_hd95, 3) : std::string("undefined")) << '\n';
      return 0;
    }

    if (gc->parsed()) {
      if (!gc_out.empty()) {
        Manifest m("gradcheck", args, gc_out);
        m.config() = {{"scale", gc_scale}, {"tolerance", gc_tol}};
        m.seed(gc_seed);
        m.artifact(fs::path(gc_out) / "gradcheck.csv");
        m.write();
      }
      out << std::left << std::setw(20) << "block" << std::setw(34) << "shape" << std::setw(14) << "max_rel_err"
          << std::setw(9) << "entries" << "result\n";
      std::ostringstream csv;
      csv << "block,shape,max_rel_error,entries,seconds,result\n";
      bool all = true;
      const auto rows = run_gradcheck_suite(gc_scale, gc_seed, gc_tol, [&](const GradCheckRow& r) {
        std::ostringstream e;
        e << std::scientific << std::setprecision(2) << r.result.max_rel_error;
        out << std::left << std::setw(20) << r.block << std::setw(34) << r.shape << std::setw(14) << e.str()
            << std::setw(9) << r.result.entries << (r.pass ? "pass" : "FAIL") << '\n';
        csv << r.block << ',' << '"' << r.shape << '"' << ',' << r.result.max_rel_error << ',' << r.result.entries << ','
            << r.seconds << ',' << (r.pass ? "pass" : "fail") << '\n';
        all = all && r.pass;
      });
      if (!gc_out.empty()) write_text(fs::path(gc_out) / "gradcheck.csv", csv.str());
      out << rows.size() << " checks, " << (all ? "all pass" : "failures present") << '\n';
      return all ? 0 : 2;
    }

    if (ba->parsed()) {
      if (ba_grids.empty()) ba_grids.push_back("8,8,8");
      const auto window = parse_triple(ba_window, "--window");
      std::vector<Grid> grids;
      for (const auto& g : ba_grids) {
        const auto t = parse_triple(g, "--grid");
        grids.push_back(Grid{t[0], t[1], t[2]});
        attention_cost(grids.back(), window, AttentionMode::tsa);  // validates divisibility
      }
      if (!ba_out.empty()) {
        Manifest m("bench-attn", args, ba_out);
        m.config() = {{"grids", ba_grids}, {"window", window}, {"dim", ba_dim}, {"heads", ba_heads}, {"repeats", ba_repeats}};
        m.seed(0);
        m.artifact(fs::path(ba_out) / "bench_attn.csv");
        m.write();
      }
      std::ostringstream csv;
      csv << attention_bench_csv_header() << '\n';
      for (const auto& g : grids) csv << to_csv_row(bench_attention(g, window, ba_dim, ba_heads, ba_repeats)) << '\n';
      out << csv.str();
      if (!ba_out.empty()) write_text(fs::path(ba_out) / "bench_attn.csv", csv.str());
      return 0;
    }

    if (ab->parsed()) {
      const auto seeds = parse_seeds(ab_seeds);
      const auto fractions = parse_fractions(ab_split);
      PhantomSpec spec = ab_spec.empty() ? PhantomSpec{} : parse_phantom_spec(read_json_file(ab_spec));
      if (ab_variants.empty()) {
        for (const auto& v : ablation_registry()) ab_variants.push_back(v.name);
      }
      for (const auto& v : ab_variants) find_ablation(v);
      Dataset data;
      if (ab_data.empty()) {
        spec.validate();
        if (ab_cases == 0) throw ValidationError("--cases must be at least 1");
      } else {
        data = read_dataset(ab_data);
      }
      TrainConfig tc = ab_train.empty() ? TrainConfig{} : parse_train_config(read_json_file(ab_train));
      if (ab_steps) tc.steps = *ab_steps;
      tc.record_wall_time = false;
      tc.validate();

      Manifest m("ablate", args, ab_out);
      m.config() = {{"data", ab_data}, {"phantom", spec}, {"cases", ab_data.empty() ? ab_cases : data.size()},
                    {"train", tc},     {"variants", ab_variants}, {"seeds", seeds}, {"split", fractions}};
      m.seed(spec.seed);
      m.artifact(fs::path(ab_out) / "ablation_runs.csv");
      m.artifact(fs::path(ab_out) / "ablation_ranked.csv");
      if (ab_data.empty()) data = generate_dataset(spec, ab_cases, threads);
      ModelConfig base = ab_model.empty() ? default_model_for(data, 16) : parse_model_config(read_json_file(ab_model));
      base.decoder.out_classes = base.classes;
      base.validate();
      check_dataset_matches(data, base);
      m.config()["model"] = base;
      m.write();

      const DatasetSplit split = split_dataset(data.size(), fractions, spec.seed);
      for (const auto& w : split.warnings) err << "warning: " << w << '\n';
      AblationOptions opts;
      opts.base = base;
      opts.train = tc;
      opts.train_set = select(data, split.train);
      opts.val_set = select(data, split.val);
      opts.seeds = seeds;
      opts.variants = ab_variants;
      std::ostringstream runs_csv;
      runs_csv << "variant,seed,val_dice,final_loss,seconds\n";
      const auto runs = run_ablation(opts, [&](const AblationRun& r) {
        out << r.variant << " seed " << r.seed << ": val dice " << fixed(r.val_dice, 4) << '\n';
        runs_csv << r.variant << ',' << r.seed << ',' << r.val_dice << ',' << r.final_loss << ',' << r.seconds << '\n';
      });
      write_text(fs::path(ab_out) / "ablation_runs.csv", runs_csv.str());
      auto summary = summarize_ablation(runs);
      std::sort(summary.begin(), summary.end(), [](const auto& a, const auto& b) { return a.rank < b.rank; });
      std::ostringstream ranked;
      ranked << "rank,variant,mean_val_dice\n";
      for (const auto& s : summary) ranked << s.rank << ',' << s.variant << ',' << s.mean_dice << '\n';
      write_text(fs::path(ab_out) / "ablation_ranked.csv", ranked.str());
      out << ranked.str();
      return 0;
    }

    if (rp->parsed()) {
      Manifest m("report", args, rp_out);
      m.config() = {{"inputs", rp_inputs}};
      m.seed(0);
      for (const auto& in : rp_inputs) {
        if (!fs::exists(in)) throw ValidationError("input '" + in + "' not found");
      }
      std::vector<std::pair<fs::path, std::string>> files;
      std::ostringstream merged;
      bool have_csv = false;
      for (const auto& in : rp_inputs) {
        const fs::path p(in);
        std::ifstream f(p);
        std::string line;
        if (p.extension() == ".jsonl") {
          std::ostringstream csv;
          bool header = false;
          std::vector<std::string> keys;
          std::size_t line_no = 0;
          while (std::getline(f, line)) {
            ++line_no;
            if (line.empty()) continue;
            json j;
            try {
              j = json::parse(line);
            } catch (const json::parse_error&) {
              throw FormatError(p.string() + ":" + std::to_string(line_no) + ": not a JSON object");
            }
            if (!j.is_object()) throw FormatError(p.string() + ":" + std::to_string(line_no) + ": not a JSON object");
            if (!header) {
              for (const auto& item : j.items()) keys.push_back(item.key());
              std::sort(keys.begin(), keys.end(), [](const std::string& a, const std::string& b) {
                return (a == "step") != (b == "step") ? a == "step" : a < b;
              });
              for (std::size_t i = 0; i < keys.size(); ++i) csv << (i ? "," : "") << keys[i];
              csv << '\n';
              header = true;
            }
            for (std::size_t i = 0; i < keys.size(); ++i) {
              csv << (i ? "," : "");
              if (j.contains(keys[i])) csv << j.at(keys[i]).dump();
            }
            csv << '\n';
          }
          files.emplace_back(fs::path(rp_out) / (p.stem().string() + "_plot.csv"), csv.str());
        } else if (p.extension() == ".csv") {
          bool first = true;
          while (std::getline(f, line)) {
            if (first) {
              if (!have_csv) merged << "source," << line << '\n';
              have_csv = true;
              first = false;
              continue;
            }
            if (!line.empty()) merged << p.parent_path().filename().string() << '/' << p.filename().string() << ',' << line << '\n';
          }
        } else {
          throw ValidationError("report: unsupported input '" + in + "' (expected .jsonl or .csv)");
        }
      }
      if (have_csv) files.emplace_back(fs::path(rp_out) / "merged_metrics.csv", merged.str());
      for (const auto& [path, text] : files) m.artifact(path);
      m.write();
      for (const auto& [path, text] : files) {
        write_text(path, text);
        out << "wrote " << path.string() << '\n';
      }
      return 0;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace nf
