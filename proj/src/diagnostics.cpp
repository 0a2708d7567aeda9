// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/diagnostics.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include "nestedformer/metrics.hpp"

namespace nf {

namespace {

using Clock = std::chrono::steady_clock;
using Fn = std::function<Var()>;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// sum(g() * R) for a fixed random R of the output's shape.
Fn weighted(Fn g, std::mt19937_64& rng) {
  Shape shape;
  {
    NoGradScope no_grad;
    shape = g().shape();
  }
  const Var r(uniform(shape, rng));
  return [g = std::move(g), r] { return ops::sum(ops::mul(g(), r)); };
}

struct Probe {
  ParamStore store;
  std::mt19937_64 rng;
  ParamFactory pf;
  std::vector<Var> inputs;
  std::vector<Var> extra;  // parameters owned outside `store`

  explicit Probe(std::uint64_t seed) : rng(seed), pf(store, rng) {}

  Var input(Shape shape) {
    inputs.push_back(Var::parameter(uniform(std::move(shape), rng)));
    return inputs.back();
  }
  // Moves every parameter away from the zero-bias, unit-gain initial point.
  void jitter() {
    std::uniform_real_distribution<double> dist(-0.3, 0.3);
    for (const auto& p : store.entries()) {
      Var v = p.var;
      for (auto& x : v.mutable_value().values()) x += dist(rng);
    }
  }
};

class Suite {
 public:
  Suite(std::uint64_t seed, double tolerance, const std::function<void(const GradCheckRow&)>& on_row)
      : seed_(seed), tolerance_(tolerance), on_row_(on_row) {}

  void run(const std::string& block, const std::string& shape, const std::function<Fn(Probe&)>& build) {
    const auto t0 = Clock::now();
    Probe c(seed_ + 7919 * rows_.size());
    const Fn f = build(c);
    std::vector<Var> params = c.store.vars();
    params.insert(params.end(), c.extra.begin(), c.extra.end());
    params.insert(params.end(), c.inputs.begin(), c.inputs.end());
    GradCheckRow row{block, shape, grad_check(f, params), false, 0.0};
    row.pass = row.result.max_rel_error < tolerance_;
    row.seconds = seconds_since(t0);
    if (on_row_) on_row_(row);
    rows_.push_back(std::move(row));
  }

  std::vector<GradCheckRow> take() { return std::move(rows_); }

 private:
  std::uint64_t seed_;
  double tolerance_;
  const std::function<void(const GradCheckRow&)>& on_row_;
  std::vector<GradCheckRow> rows_;
};

AttentionConfig toy_attention(std::size_t dim, std::array<std::size_t, 3> window) {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.dim = dim;
  cfg.qkv_dim = dim;
  cfg.ffn_ratio = 2;
  cfg.window = window;
  return cfg;
}

std::string window_label(const Grid& g, const std::array<std::size_t, 3>& w, std::size_t c) {
  return to_string(g) + "x" + std::to_string(c) + " w" + std::to_string(w[0]) + std::to_string(w[1]) + std::to_string(w[2]);
}

template <typename Block>
Fn encoder_case(Probe& c, const Shape& s, std::shared_ptr<Block> block) {
  c.jitter();
  const Var x = c.input(s);
  return weighted([block, x] { return block->forward(x); }, c.rng);
}

SegmentationMask random_mask(std::mt19937_64& rng, std::size_t classes, std::array<std::size_t, 3> ext) {
  SegmentationMask m(classes, ext);
  std::uniform_int_distribution<int> dist(0, static_cast<int>(classes) - 1);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(dist(rng));
  return m;
}

}  // namespace

std::vector<GradCheckRow> run_gradcheck_suite(const std::string& scale, std::uint64_t seed, double tolerance,
                                              const std::function<void(const GradCheckRow&)>& on_row) {
  if (scale != "toy") throw ConfigError("gradcheck --scale: only 'toy' is supported, got '" + scale + "'");
  Suite suite(seed, tolerance, on_row);

  const std::vector<Shape> volumes{{2, 2, 2, 3}, {1, 2, 3, 4}, {2, 3, 2, 2}};
  for (const auto& s : volumes) {
    suite.run("gpb", to_string(s), [&](Probe& c) {
      return encoder_case(c, s, std::make_shared<GlobalPoolformerBlock>(c.pf, s[3], 2));
    });
  }
  for (const auto& s : volumes) {
    suite.run("pb", to_string(s), [&](Probe& c) {
      return encoder_case(c, s, std::make_shared<PoolformerBlock>(c.pf, s[3], 2));
    });
  }
  for (const auto& s : volumes) {
    suite.run("conv_block", to_string(s), [&](Probe& c) {
      return encoder_case(c, s, std::make_shared<ConvBlock>(c.pf, s[3]));
    });
  }

  struct GridCase {
    Grid grid;
    std::array<std::size_t, 3> window;
    std::size_t dim;
  };
  const std::vector<GridCase> grids{{{2, 2, 2}, {2, 2, 2}, 4}, {{2, 2, 3}, {1, 2, 1}, 4}, {{3, 2, 2}, {1, 1, 2}, 6}};
  for (const auto& gc : grids) {
    const std::string label = window_label(gc.grid, gc.window, gc.dim);
    const AttentionConfig cfg = toy_attention(gc.dim, gc.window);
    suite.run("axial_attention", label, [&](Probe& c) {
      auto block = std::make_shared<AxialAttention>(c.pf, cfg, gc.grid);
      c.jitter();
      const TokenSeq seq{c.input({gc.grid.volume(), gc.dim}), gc.grid};
      return weighted([block, seq] { return block->forward(seq); }, c.rng);
    });
    suite.run("planar_attention", label, [&](Probe& c) {
      auto block = std::make_shared<PlanarAttention>(c.pf, cfg, gc.grid);
      c.jitter();
      const TokenSeq seq{c.input({gc.grid.volume(), gc.dim}), gc.grid};
      return weighted([block, seq] { return block->forward(seq); }, c.rng);
    });
    suite.run("window_attention", label, [&](Probe& c) {
      auto block = std::make_shared<WindowAttention>(c.pf, cfg);
      c.jitter();
      const TokenSeq seq{c.input({gc.grid.volume(), gc.dim}), gc.grid};
      return weighted([block, seq] { return block->forward(seq); }, c.rng);
    });
    suite.run("tsa_block", label, [&](Probe& c) {
      auto block = std::make_shared<TsaBlock>(c.pf, cfg, gc.grid);
      c.jitter();
      const TokenSeq seq{c.input({gc.grid.volume(), gc.dim}), gc.grid};
      return weighted([block, seq] { return block->forward(seq).tokens; }, c.rng);
    });
  }

  const std::vector<std::pair<Shape, std::size_t>> learner_cases{{{2, 2, 2, 4}, 2}, {{1, 2, 3, 3}, 3}, {{2, 2, 1, 5}, 4}};
  for (const auto& [s, p] : learner_cases) {
    suite.run("token_learner", to_string(s) + " P" + std::to_string(p), [&](Probe& c) {
      auto block = std::make_shared<TokenLearner>(c.pf, s[3], p);
      c.jitter();
      const Var x = c.input(s);
      return weighted([block, x] { return block->forward(x); }, c.rng);
    });
  }

  struct CmaCase {
    Grid grid;
    std::size_t bank;
    std::size_t dim;
    CmaResidual residual;
  };
  const std::vector<CmaCase> cma_cases{{{2, 2, 2}, 4, 4, CmaResidual::query_stream},
                                       {{1, 2, 3}, 6, 4, CmaResidual::query_stream},
                                       {{2, 1, 2}, 3, 6, CmaResidual::embedded_tokens}};
  for (const auto& cc : cma_cases) {
    suite.run("cma_block", to_string(cc.grid) + "x" + std::to_string(cc.dim) + " bank" + std::to_string(cc.bank) + " " +
                               to_string(cc.residual),
              [&](Probe& c) {
                AttentionConfig cfg = toy_attention(cc.dim, {1, 1, 1});
                cfg.cma_residual = cc.residual;
                auto block = std::make_shared<CmaBlock>(c.pf, cfg);
                c.jitter();
                const TokenSeq q{c.input({cc.grid.volume(), cc.dim}), cc.grid};
                const TokenSeq bank{c.input({cc.bank, cc.dim}), std::nullopt};
                const TokenSeq emb{c.input({cc.grid.volume(), cc.dim}), cc.grid};
                return weighted([block, q, bank, emb] { return block->forward(q, bank, &emb).tokens; }, c.rng);
              });
  }

  struct MsgCase {
    Grid grid;
    std::size_t level;
    std::size_t modalities;
    std::size_t channels;
  };
  const std::vector<MsgCase> msg_cases{{{1, 1, 1}, 4, 2, 3}, {{1, 1, 2}, 4, 3, 2}, {{1, 1, 1}, 3, 2, 2}};
  for (const auto& mc : msg_cases) {
    suite.run("msg_gate_filter",
              to_string(mc.grid) + " l" + std::to_string(mc.level) + " M" + std::to_string(mc.modalities),
              [&](Probe& c) {
                const std::size_t dim = 4;
                auto gate = std::make_shared<ModalitySensitiveGating>(c.pf, dim, mc.modalities);
                c.jitter();
                const TokenSeq fused{c.input({mc.grid.volume(), dim}), mc.grid};
                const std::size_t up = std::size_t{1} << (kSkipLevels + 1 - mc.level);
                std::vector<Var> features;
                for (std::size_t m = 0; m < mc.modalities; ++m) {
                  features.push_back(c.input({mc.grid.z * up, mc.grid.y * up, mc.grid.x * up, mc.channels}));
                }
                return weighted(
                    [gate, fused, features, level = mc.level] {
                      return msg_filter(gate->importance(fused, level), features);
                    },
                    c.rng);
              });
  }

  struct DecoderCase {
    Grid grid;
    std::size_t bottleneck;
    std::array<std::size_t, kSkipLevels> skips;
    std::array<std::size_t, kSkipLevels> widths;
  };
  const std::vector<DecoderCase> decoder_cases{{{1, 1, 1}, 3, {1, 1, 2, 2}, {2, 2, 2, 2}},
                                               {{1, 1, 1}, 2, {2, 1, 1, 1}, {3, 2, 2, 1}},
                                               {{1, 1, 1}, 4, {1, 2, 1, 2}, {2, 3, 1, 2}}};
  for (const auto& dc : decoder_cases) {
    suite.run("decoder", "bottleneck " + to_string(dc.grid) + "x" + std::to_string(dc.bottleneck) + " -> 16^3",
              [&](Probe& c) {
                DecoderConfig cfg;
                cfg.level_channels = dc.widths;
                cfg.out_classes = 2;
                auto dec = std::make_shared<Decoder>(c.pf, cfg, dc.bottleneck, dc.skips);
                c.jitter();
                const Var bottleneck = c.input({dc.grid.z, dc.grid.y, dc.grid.x, dc.bottleneck});
                std::vector<Var> skips;
                for (std::size_t level = kSkipLevels; level >= 1; --level) {
                  const std::size_t up = std::size_t{1} << (kSkipLevels + 1 - level);
                  Shape s{dc.grid.z * up, dc.grid.y * up, dc.grid.x * up, dc.skips[level - 1]};
                  // Only the coarse skips join the checked inputs; the finer ones are constants.
                  if (level >= 3) {
                    skips.push_back(c.input(s));
                  } else {
                    skips.emplace_back(uniform(s, c.rng));
                  }
                }
                return weighted([dec, bottleneck, skips] { return dec->decode(bottleneck, skips); }, c.rng);
              });
  }

  const std::vector<Shape> logit_shapes{{2, 2, 2, 3}, {3, 2, 1, 2}, {2, 2, 4, 4}};
  for (const auto& s : logit_shapes) {
    suite.run("soft_dice_loss", to_string(s), [&](Probe& c) {
      const Var logits = c.input(s);
      const auto mask = random_mask(c.rng, s[3], {s[0], s[1], s[2]});
      return Fn([logits, mask] { return soft_dice_loss(logits, mask); });
    });
    suite.run("cross_entropy_loss", to_string(s), [&](Probe& c) {
      const Var logits = c.input(s);
      const auto mask = random_mask(c.rng, s[3], {s[0], s[1], s[2]});
      return Fn([logits, mask] { return cross_entropy_loss(logits, mask); });
    });
  }

  struct NmafaCase {
    Grid grid;
    std::size_t modalities;
    std::size_t tokens;
  };
  const std::vector<NmafaCase> nmafa_cases{{{2, 2, 2}, 2, 2}, {{1, 2, 2}, 2, 3}, {{2, 2, 1}, 3, 2}};
  for (const auto& nc : nmafa_cases) {
    suite.run("nmafa", to_string(nc.grid) + " M" + std::to_string(nc.modalities) + " P" + std::to_string(nc.tokens),
              [&](Probe& c) {
                const std::size_t dim = 4;
                const AttentionConfig cfg = toy_attention(dim, {nc.grid.z, nc.grid.y, nc.grid.x});
                NmafaOptions opts;
                opts.tsa_layers = 1;
                opts.tokens = nc.tokens;
                auto block = std::make_shared<Nmafa>(c.pf, nc.modalities, cfg, nc.grid, opts);
                c.jitter();
                std::vector<Var> features;
                for (std::size_t m = 0; m < nc.modalities; ++m) {
                  features.push_back(c.input({nc.grid.z, nc.grid.y, nc.grid.x, dim}));
                }
                return weighted([block, features] { return block->forward(features).tokens; }, c.rng);
              });
  }

  // Whole model through the combined loss. Checking every entry is too slow,
  // so each top-level module contributes its two smallest tensors.
  suite.run("end_to_end", "M2 16^3 width 8 loss", [&](Probe& c) {
    auto model = std::make_shared<NestedFormer>(ModelConfig::toy(2, 3, {16, 16, 16}, 8));
    std::uniform_real_distribution<double> dist(-0.05, 0.05);
    std::map<std::string, std::vector<NamedParam>> by_module;
    for (const auto& p : model->params().entries()) {
      Var v = p.var;
      for (auto& x : v.mutable_value().values()) x += dist(c.rng);
      by_module[p.name.substr(0, p.name.find('.'))].push_back(p);
    }
    for (auto& [module, params] : by_module) {
      std::stable_sort(params.begin(), params.end(),
                       [](const NamedParam& a, const NamedParam& b) { return a.var.value().size() < b.var.value().size(); });
      for (std::size_t i = 0; i < std::min<std::size_t>(2, params.size()); ++i) c.extra.push_back(params[i].var);
    }
    std::vector<Var> inputs;
    for (std::size_t m = 0; m < 2; ++m) inputs.push_back(Var(uniform({16, 16, 16, 1}, c.rng)));
    auto mask = std::make_shared<SegmentationMask>(random_mask(c.rng, 3, {16, 16, 16}));
    return Fn([model, inputs, mask] { return combined_loss(model->forward(inputs), *mask, 1.0, 1.0).total; });
  });
  return suite.take();
}

AttentionBench bench_attention(const Grid& grid, const std::array<std::size_t, 3>& window, std::size_t dim,
                               std::size_t heads, std::size_t repeats, std::uint64_t seed) {
  if (heads == 0 || dim % heads != 0) throw ConfigError("bench-attn: dim must be a positive multiple of heads");
  AttentionBench out;
  out.grid = grid;
  out.window = window;
  out.full_closed = attention_cost(grid, window, AttentionMode::full);
  out.tsa_closed = attention_cost(grid, window, AttentionMode::tsa);

  std::mt19937_64 rng(seed);
  const std::size_t n = grid.volume();
  const Var q(uniform({n, dim}, rng)), k(uniform({n, dim}, rng)), v(uniform({n, dim}, rng));
  ops::AttentionLayout full;
  full.queries.emplace_back(n);
  for (std::size_t i = 0; i < n; ++i) full.queries[0][i] = static_cast<std::uint32_t>(i);
  full.keys = full.queries;
  const std::array<ops::AttentionLayout, 3> tsa{axial_layout(grid), planar_layout(grid), window_layout(grid, window)};

  NoGradScope no_grad;
  out.full_ms = out.tsa_ms = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
    {
      ops::LogitCounterScope counter;
      const auto t0 = Clock::now();
      const Var y = ops::grouped_attention(q, k, v, heads, full);
      out.full_ms = std::min(out.full_ms, 1e3 * seconds_since(t0));
      out.full_counted = counter.count() / heads;
    }
    {
      ops::LogitCounterScope counter;
      const auto t0 = Clock::now();
      Var y = ops::grouped_attention(q, k, v, heads, tsa[0]);
      y = ops::add(y, ops::grouped_attention(q, k, v, heads, tsa[1]));
      y = ops::add(y, ops::grouped_attention(q, k, v, heads, tsa[2]));
      out.tsa_ms = std::min(out.tsa_ms, 1e3 * seconds_since(t0));
      out.tsa_counted = counter.count() / heads;
    }
  }
  return out;
}

std::string attention_bench_csv_header() {
  return "grid_z,grid_y,grid_x,window,tokens,full,tsa,ratio,full_counted,tsa_counted,full_ms,tsa_ms";
}

std::string to_csv_row(const AttentionBench& b) {
  std::ostringstream ss;
  ss << b.grid.z << ',' << b.grid.y << ',' << b.grid.x << ',' << b.window[0] << 'x' << b.window[1] << 'x' << b.window[2]
     << ',' << b.grid.volume() << ',' << b.full_closed << ',' << b.tsa_closed << ','
     << static_cast<double>(b.full_closed) / static_cast<double>(b.tsa_closed) << ',' << b.full_counted << ','
     << b.tsa_counted << ',' << b.full_ms << ',' << b.tsa_ms;
  return ss.str();
}

std::vector<AblationRun> run_ablation(const AblationOptions& opts, const std::function<void(const AblationRun&)>& on_run) {
  if (opts.train_set.empty() || opts.val_set.empty()) throw ValidationError("ablation needs training and validation cases");
  std::vector<AblationRun> runs;
  for (const auto& name : opts.variants) {
    const AblationVariant& variant = find_ablation(name);
    for (const auto seed : opts.seeds) {
      const auto t0 = Clock::now();
      ModelConfig mc = variant.apply(opts.base);
      mc.seed = seed;
      TrainConfig tc = opts.train;
      tc.seed = seed;
      tc.val_interval = 0;
      NestedFormer model(mc);
      OptimState state;
      const TrainResult result = train(model, state, tc, opts.train_set);
      AblationRun run;
      run.variant = name;
      run.seed = seed;
      run.final_loss = result.log.empty() ? 0.0 : result.log.back().loss;
      run.val_dice = evaluate(model, opts.val_set, tc.normalize_inputs).mean_dice;
      run.seconds = seconds_since(t0);
      if (on_run) on_run(run);
      runs.push_back(run);
    }
  }
  return runs;
}

std::vector<AblationSummary> summarize_ablation(const std::vector<AblationRun>& runs) {
  std::vector<AblationSummary> out;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& r : runs) {
    auto it = acc.find(r.variant);
    if (it == acc.end()) {
      out.push_back({r.variant, 0.0, 0});
      it = acc.emplace(r.variant, std::make_pair(0.0, std::size_t{0})).first;
    }
    it->second.first += r.val_dice;
    it->second.second += 1;
  }
  for (auto& s : out) s.mean_dice = acc[s.variant].first / static_cast<double>(acc[s.variant].second);
  std::vector<AblationSummary> ranked = out;
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.mean_dice > b.mean_dice; });
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    for (auto& s : out) {
      if (s.variant == ranked[i].variant) s.rank = i + 1;
    }
  }
  return out;
}

}  // namespace nf
