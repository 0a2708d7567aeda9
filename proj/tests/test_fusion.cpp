// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "nestedformer/fusion.hpp"
#include "nestedformer/grad_check.hpp"
#include "oracles.hpp"

using namespace nf;
using nf::testing::random_tensor;
using nf::testing::random_var;

namespace {

void set(const Var& v, double value) { v.node()->value.fill(value); }

void jitter(const ParamStore& store, std::mt19937_64& rng) {
  for (const auto& p : store.entries()) p.var.node()->value.add_(random_tensor(p.var.shape(), rng, -0.3, 0.3));
}

AttentionConfig small(std::array<std::size_t, 3> window = {2, 2, 2}) {
  AttentionConfig c;
  c.heads = 2;
  c.dim = 8;
  c.qkv_dim = 8;
  c.ffn_ratio = 2;
  c.window = window;
  return c;
}

Var probe(const Var& y, std::uint64_t seed = 5) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(y, Var(random_tensor(y.shape(), rng))));
}

// out(v(x)) row by row: what attention returns when each query sees one value.
Tensor value_passthrough(const AttentionBranch& b, const Tensor& x) {
  return ops::linear(ops::matmul(Var(x), b.v.weight), b.out.weight, &b.out.bias).value();
}

}  // namespace

TEST_CASE("restricted attention equals masked full attention on every small grid") {
  std::uint64_t seed = 0;
  for (std::size_t z = 1; z <= 3; ++z)
    for (std::size_t y = 1; y <= 3; ++y)
      for (std::size_t x = 1; x <= 3; ++x) {
        const Grid g{z, y, x};
        for (std::size_t wz : {std::size_t(1), z})
          for (std::size_t wy : {std::size_t(1), y})
            for (std::size_t wx : {std::size_t(1), x}) {
              CAPTURE(to_string(g));
              CAPTURE(wz * 100 + wy * 10 + wx);
              CHECK(nf::testing::attention_oracle_error(g, {wz, wy, wx}, ++seed) < 1e-10);
            }
      }
  // A window strictly inside the grid.
  CHECK(nf::testing::attention_oracle_error({2, 3, 2}, {2, 1, 2}, 101) < 1e-10);
  CHECK(nf::testing::attention_oracle_error({3, 2, 2}, {1, 2, 1}, 102) < 1e-10);
}

TEST_CASE("relative position table") {
  CHECK(relative_table_size({2, 2, 2}) == 27);
  CHECK(relative_table_size({1, 2, 3}) == 15);
  const auto idx = relative_position_index({2, 2, 2});
  CHECK(idx.size() == 64);
  // Zero offset sits at the table centre for every token.
  for (std::size_t i = 0; i < 8; ++i) CHECK(idx[i * 8 + i] == 13);
}

TEST_CASE("patch embedding") {
  std::mt19937_64 rng(1);
  const Grid g{2, 2, 1};
  SUBCASE("one modality is a pointwise linear map plus encoding") {
    ParamStore store;
    PatchEmbedding emb(ParamFactory(store, rng), 1, 8, g);
    const Var f = random_var({2, 2, 1, 8}, rng);
    const TokenSeq seq = emb.forward({f});
    CHECK(seq.length() == 4);
    CHECK(seq.grid == g);
    const Tensor ref =
        ops::add(ops::linear(ops::reshape(f, {4, 8}), emb.proj.weight, &emb.proj.bias), Var(sinusoidal_encoding(g, 8)))
            .value();
    CHECK(max_abs_diff(seq.tokens.value(), ref) < 1e-15);
  }
  SUBCASE("zero features give the encoding") {
    ParamStore store;
    PatchEmbedding emb(ParamFactory(store, rng), 2, 8, g);
    const Var zero(Tensor({2, 2, 1, 8}));
    CHECK(bit_equal(emb.forward({zero, zero}).tokens.value(), sinusoidal_encoding(g, 8)));
    CHECK_THROWS_AS(emb.forward({zero}), DimensionError);
    CHECK_THROWS_AS(emb.forward({zero, Var(Tensor({2, 2, 2, 8}))}), DimensionError);
  }
}

TEST_CASE("branch degenerate cases") {
  std::mt19937_64 rng(2);
  ParamStore store;
  ParamFactory pf(store, rng);
  const AttentionConfig cfg = small({1, 1, 1});

  SUBCASE("depth one: axial attention is the value path") {
    const Grid g{1, 2, 3};
    AxialAttention ax(pf.sub("ax"), cfg, g);
    const TokenSeq seq{random_var({6, 8}, rng), g};
    Tensor x = seq.tokens.value();
    for (std::size_t k = 0; k < 6; ++k)
      for (std::size_t c = 0; c < 8; ++c) x[k * 8 + c] += ax.position.value()[c];
    CHECK(max_abs_diff(ax.forward(seq).value(), value_passthrough(ax, x)) < 1e-14);
  }
  SUBCASE("identical tokens in a column give identical outputs") {
    const Grid g{3, 1, 2};
    AxialAttention ax(pf.sub("ax"), cfg, g);
    set(ax.position, 0.0);
    Tensor t = random_tensor({6, 8}, rng);
    for (std::size_t c = 0; c < 8; ++c) t[2 * 8 + c] = t[0 * 8 + c];  // tokens 0 and 2 share column x=0
    const Tensor out = ax.forward({Var(t), g}).value();
    for (std::size_t c = 0; c < 8; ++c) CHECK(out[c] == out[16 + c]);
  }
  SUBCASE("single-position slices and uniform slices") {
    PlanarAttention one(pf.sub("one"), cfg, {3, 1, 1});
    const TokenSeq s1{random_var({3, 8}, rng), Grid{3, 1, 1}};
    Tensor x = s1.tokens.value();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += one.position.value()[i % 8];
    CHECK(max_abs_diff(one.forward(s1).value(), value_passthrough(one, x)) < 1e-14);

    PlanarAttention pl(pf.sub("pl"), cfg, {2, 2, 2});
    set(pl.position, 0.0);
    Tensor u({8, 8});
    for (std::size_t k = 0; k < 8; ++k)
      for (std::size_t c = 0; c < 8; ++c) u[k * 8 + c] = (k < 4 ? 0.5 : -1.0) + 0.1 * double(c);
    const Tensor out = pl.forward({Var(u), Grid{2, 2, 2}}).value();
    for (std::size_t k = 1; k < 4; ++k)
      for (std::size_t c = 0; c < 8; ++c) CHECK(out[k * 8 + c] == doctest::Approx(out[c]).epsilon(1e-14));
  }
  SUBCASE("unit window is the value path; zero bias table drops the bias") {
    WindowAttention w1(pf.sub("w1"), cfg);
    const TokenSeq seq{random_var({8, 8}, rng), Grid{2, 2, 2}};
    CHECK(max_abs_diff(w1.forward(seq).value(), value_passthrough(w1, seq.tokens.value())) < 1e-14);

    WindowAttention w2(pf.sub("w2"), small());
    set(w2.relative_bias, 0.0);
    const Var q = ops::matmul(seq.tokens, w2.q.weight), k = ops::matmul(seq.tokens, w2.k.weight),
              v = ops::matmul(seq.tokens, w2.v.weight);
    const Tensor plain = ops::linear(ops::grouped_attention(q, k, v, 2, window_layout({2, 2, 2}, {2, 2, 2})),
                                     w2.out.weight, &w2.out.bias)
                             .value();
    CHECK(max_abs_diff(w2.forward(seq).value(), plain) < 1e-15);
  }
  SUBCASE("errors") {
    WindowAttention w(pf.sub("w"), small());
    CHECK_THROWS_AS(w.forward({random_var({6, 8}, rng), Grid{3, 2, 1}}), DimensionError);
    CHECK_THROWS_AS(w.forward({random_var({6, 8}, rng), std::nullopt}), ContractError);
  }
}

TEST_CASE("tsa block") {
  std::mt19937_64 rng(3);
  ParamStore store;
  const Grid g{2, 2, 2};
  TsaBlock block(ParamFactory(store, rng, "tsa"), small(), g);
  jitter(store, rng);
  const TokenSeq seq{random_var({8, 8}, rng, true), g};

  SUBCASE("branches are summed independently") {
    const TokenSeq n{block.norm1(seq.tokens), g};
    const Var parts =
        ops::add(ops::add(block.axial.forward(n), block.planar.forward(n)), block.window.forward(n));
    CHECK(bit_equal(block.mix(n).value(), parts.value()));
  }
  SUBCASE("gradient at 2x2x2, C=8, 2 heads") {
    std::vector<Var> params = store.vars();
    params.push_back(seq.tokens);
    CHECK(grad_check([&] { return probe(block.forward(seq).tokens); }, params).max_rel_error < 1e-4);
  }
  SUBCASE("zero output projections and FFN give the identity") {
    for (const AttentionBranch* b : {static_cast<const AttentionBranch*>(&block.axial),
                                     static_cast<const AttentionBranch*>(&block.planar),
                                     static_cast<const AttentionBranch*>(&block.window)}) {
      set(b->out.weight, 0.0);
      set(b->out.bias, 0.0);
    }
    set(block.ffn.fc2.weight, 0.0);
    set(block.ffn.fc2.bias, 0.0);
    CHECK(bit_equal(block.forward(seq).tokens.value(), seq.tokens.value()));
  }
  CHECK_THROWS_AS(TsaBlock(ParamFactory(store, rng, "bad"), small({2, 2, 2}), Grid{3, 2, 2}), DimensionError);
}

TEST_CASE("token learner") {
  std::mt19937_64 rng(4);
  ParamStore store;
  const Var f = random_var({2, 3, 2, 8}, rng);

  SUBCASE("constant logits pool to the spatial mean") {
    TokenLearner tl(ParamFactory(store, rng, "a"), 8, 1);
    set(tl.fc2.weight, 0.0);
    const Tensor tok = tl.forward(f).value();
    const Tensor mean = ops::global_pool(f).value();
    CHECK(tok.shape() == Shape{1, 8});
    CHECK(max_abs_diff(tok.reshaped({8}), mean) < 1e-15);
  }
  SUBCASE("a dominant position selects its feature") {
    TokenLearner tl(ParamFactory(store, rng, "b"), 8, 3);
    set(tl.fc1.weight, 0.0);
    for (std::size_t c = 0; c < 8; ++c) tl.fc1.weight.node()->value[c * 8 + c] = 1.0;
    set(tl.fc2.weight, 0.0);
    tl.fc2.weight.node()->value[0] = 10.0;  // channel 0 -> token 0
    Tensor x = f.value();
    x[5 * 8] = 10.0;  // position 5 dominates channel 0
    const Tensor tok = tl.forward(Var(x)).value();
    for (std::size_t c = 0; c < 8; ++c) CHECK(tok[c] == doctest::Approx(x[5 * 8 + c]).epsilon(1e-12));
  }
  SUBCASE("shape is P x C for any grid") {
    TokenLearner tl(ParamFactory(store, rng, "c"), 8, 5);
    CHECK(tl.forward(random_var({1, 1, 1, 8}, rng)).shape() == Shape{5, 8});
    CHECK(tl.forward(random_var({4, 2, 2, 8}, rng)).shape() == Shape{5, 8});
  }
}

TEST_CASE("spatial concat") {
  std::mt19937_64 rng(5);
  const Var a = random_var({32, 4}, rng), b = random_var({32, 4}, rng);
  CHECK(bit_equal(spatial_concat({a}).tokens.value(), a.value()));
  const TokenSeq s = spatial_concat({a, b});
  CHECK(s.length() == 64);
  CHECK(!s.grid.has_value());
  CHECK(std::equal(a.value().data(), a.value().data() + 128, s.tokens.value().data()));
  CHECK(std::equal(b.value().data(), b.value().data() + 128, s.tokens.value().data() + 128));
  CHECK_THROWS_AS(spatial_concat({a, random_var({31, 4}, rng)}), DimensionError);
}

TEST_CASE("cross-modality attention") {
  std::mt19937_64 rng(6);
  ParamStore store;
  CmaBlock cma(ParamFactory(store, rng, "cma"), small());
  jitter(store, rng);
  const TokenSeq queries{random_var({8, 8}, rng, true), Grid{2, 2, 2}};

  SUBCASE("modality order does not matter") {
    const Var m0 = random_var({2, 8}, rng), m1 = random_var({2, 8}, rng);
    const Tensor ab = cma.forward(queries, spatial_concat({m0, m1})).tokens.value();
    const Tensor ba = cma.forward(queries, spatial_concat({m1, m0})).tokens.value();
    // Same terms, summed in another order.
    CHECK(max_abs_diff(ab, ba) < 1e-14);
  }
  SUBCASE("identical keys and a single key reduce to the value path") {
    set(cma.ffn.fc2.weight, 0.0);
    set(cma.ffn.fc2.bias, 0.0);
    const Tensor row = random_tensor({1, 8}, rng);
    Tensor same({4, 8});
    for (std::size_t i = 0; i < 4; ++i) std::copy_n(row.data(), 8, same.data() + i * 8);
    const Var vrow = ops::linear(ops::matmul(cma.norm_kv(Var(row)), cma.v.weight), cma.out.weight, &cma.out.bias);
    for (const Tensor& bank : {same, row}) {
      const Tensor out = cma.forward(queries, {Var(bank), std::nullopt}).tokens.value();
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t c = 0; c < 8; ++c) {
          CHECK(out[i * 8 + c] == doctest::Approx(queries.tokens.value()[i * 8 + c] + vrow.value()[c]).epsilon(1e-13));
        }
    }
  }
  SUBCASE("gradient at N=8, MP=4, C=8") {
    const TokenSeq bank{random_var({4, 8}, rng, true), std::nullopt};
    std::vector<Var> params = store.vars();
    params.push_back(queries.tokens);
    params.push_back(bank.tokens);
    CHECK(grad_check([&] { return probe(cma.forward(queries, bank).tokens); }, params).max_rel_error < 1e-4);
  }
  SUBCASE("residual source") {
    AttentionConfig cfg = small();
    cfg.cma_residual = CmaResidual::embedded_tokens;
    CmaBlock alt(ParamFactory(store, rng, "alt"), cfg);
    const TokenSeq bank{random_var({4, 8}, rng), std::nullopt};
    CHECK_THROWS_AS(alt.forward(queries, bank), ContractError);
    const TokenSeq emb{random_var({8, 8}, rng), Grid{2, 2, 2}};
    set(alt.ffn.fc2.weight, 0.0);
    set(alt.ffn.fc2.bias, 0.0);
    // Without the FFN the two residual choices differ by exactly emb - queries.
    const Tensor from_emb = alt.forward(queries, bank, &emb).tokens.value();
    const Tensor from_q = alt.forward(queries, bank, &queries).tokens.value();
    double worst = 0.0;
    for (std::size_t i = 0; i < 64; ++i) {
      worst = std::max(worst, std::abs((from_emb[i] - from_q[i]) - (emb.tokens.value()[i] - queries.tokens.value()[i])));
    }
    CHECK(worst < 1e-14);
    CHECK(cma_residual_from_string("embedded_tokens") == CmaResidual::embedded_tokens);
    CHECK_THROWS_AS(cma_residual_from_string("both"), ConfigError);
  }
  CHECK_THROWS_AS(cma.forward(queries, {random_var({4, 6}, rng), std::nullopt}), DimensionError);
}

TEST_CASE("nmafa") {
  std::mt19937_64 rng(7);
  ParamStore store;
  const Grid g{2, 2, 2};
  NmafaOptions opts;
  opts.tokens = 2;
  Nmafa fusion(ParamFactory(store, rng, "fusion"), 2, small(), g, opts);
  jitter(store, rng);
  const std::vector<Var> feats{random_var({2, 2, 2, 8}, rng, true), random_var({2, 2, 2, 8}, rng, true)};

  const TokenSeq out = fusion.forward(feats);
  CHECK(out.length() == 8);
  CHECK(out.channels() == 8);
  CHECK(bit_equal(out.tokens.value(), fusion.forward(feats).tokens.value()));

  SUBCASE("gradient") {
    std::vector<Var> params = store.vars();
    params.insert(params.end(), feats.begin(), feats.end());
    CHECK(grad_check([&] { return probe(fusion.forward(feats).tokens); }, params).max_rel_error < 1e-4);
  }
  SUBCASE("zeroed sublayers reduce to the embedding") {
    for (const auto& p : store.entries()) {
      const std::string& n = p.name;
      const bool sublayer_out = n.find(".out.") != std::string::npos || n.find(".ffn.fc2.") != std::string::npos;
      if (sublayer_out) set(p.var, 0.0);
    }
    CHECK(bit_equal(fusion.forward(feats).tokens.value(), fusion.embed.forward(feats).tokens.value()));
  }
  SUBCASE("switches remove their parameters") {
    ParamStore bare;
    NmafaOptions off;
    off.use_cma = false;
    off.use_tsa = false;
    Nmafa plain(ParamFactory(bare, rng, "fusion"), 2, small(), g, off);
    CHECK(plain.tsa.empty());
    CHECK(!plain.cma.has_value());
    CHECK(bare.element_count() == plain.embed.proj.weight.value().size() + plain.embed.proj.bias.value().size());
  }
}
