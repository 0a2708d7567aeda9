// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "nestedformer/metrics.hpp"
#include "oracles.hpp"

using namespace nf;
using nf::testing::random_mask;
using nf::testing::TempDir;

namespace {

SegmentationMask shifted(const SegmentationMask& m, std::array<std::size_t, 3> by, std::array<std::size_t, 3> extents) {
  SegmentationMask out(m.classes, extents);
  for (std::size_t z = 0; z < m.extents[0]; ++z)
    for (std::size_t y = 0; y < m.extents[1]; ++y)
      for (std::size_t x = 0; x < m.extents[2]; ++x) {
        out.labels[out.index(z + by[0], y + by[1], x + by[2])] = m.labels[m.index(z, y, x)];
      }
  return out;
}

}  // namespace

TEST_CASE("metrics agree with all-pairs references") {
  std::mt19937_64 rng(1);
  double worst_dice = 0.0, worst_hd = 0.0;
  std::size_t infinite = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const double density = 0.02 + 0.3 * (trial % 10) / 10.0;
    const SegmentationMask p = random_mask(rng, {8, 8, 8}, 3, density);
    const SegmentationMask g = random_mask(rng, {8, 8, 8}, 3, density);
    for (std::uint8_t c = 1; c < 3; ++c) {
      worst_dice = std::max(worst_dice, std::abs(dice_score(p, g, c) - nf::testing::brute_dice(p, g, c)));
      const double fast = hd95(p, g, c), slow = nf::testing::brute_hd95(p, g, c);
      if (std::isinf(slow)) {
        infinite += std::isinf(fast);
      } else {
        worst_hd = std::max(worst_hd, std::abs(fast - slow));
      }
      CHECK(std::isinf(fast) == std::isinf(slow));
      CHECK(hd95(p, g, c) == hd95(g, p, c));
      CHECK(dice_score(p, g, c) == dice_score(g, p, c));
      CHECK(hd95(p, g, c) <= hausdorff(p, g, c));
      CHECK(hausdorff(p, g, c) == doctest::Approx(nf::testing::brute_hausdorff(p, g, c)).epsilon(1e-12));
    }
  }
  CHECK(worst_dice <= 1e-9);
  CHECK(worst_hd <= 1e-9);
}

TEST_CASE("anisotropic spacing") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    SegmentationMask p = random_mask(rng, {6, 7, 8}, 2, 0.2);
    SegmentationMask g = random_mask(rng, {6, 7, 8}, 2, 0.2);
    const std::array<double, 3> spacing{2.5, 1.0, 0.7};
    CHECK(hd95(p, g, 1, spacing) == doctest::Approx(nf::testing::brute_hd95(p, g, 1, spacing)).epsilon(1e-12));
  }
}

TEST_CASE("translation invariance") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const SegmentationMask p = random_mask(rng, {8, 8, 8}, 2, 0.2);
    const SegmentationMask g = random_mask(rng, {8, 8, 8}, 2, 0.2);
    const std::array<std::size_t, 3> by{1, 3, 2};
    const SegmentationMask ps = shifted(p, by, {12, 12, 12}), gs = shifted(g, by, {12, 12, 12});
    CHECK(dice_score(ps, gs, 1) == dice_score(p, g, 1));
    // A mask touching the border loses boundary voxels once padded, so
    // compare against the padded reference.
    CHECK(hd95(ps, gs, 1) == doctest::Approx(nf::testing::brute_hd95(ps, gs, 1)).epsilon(1e-12));
  }
}

TEST_CASE("worked examples") {
  SegmentationMask p(2, {4, 4, 4}), g(2, {4, 4, 4});
  p.labels[p.index(1, 1, 1)] = 1;
  p.labels[p.index(1, 1, 2)] = 1;
  g.labels[g.index(1, 1, 1)] = 1;
  CHECK(dice_score(p, g, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  SegmentationMask a(2, {1, 1, 8}), b(2, {1, 1, 8});
  a.labels[0] = 1;
  b.labels[3] = 1;
  CHECK(hd95(a, b, 1) == 3.0);
  CHECK(hausdorff(a, b, 1) == 3.0);
  CHECK(hd95(a, b, 1, {1.0, 1.0, 0.5}) == 1.5);

  SegmentationMask empty(2, {4, 4, 4});
  CHECK(dice_score(empty, empty, 1) == 1.0);
  CHECK(hd95(empty, empty, 1) == 0.0);
  CHECK(dice_score(p, empty, 1) == 0.0);
  CHECK(hd95(p, empty, 1) == kUndefinedDistance);
  CHECK(hd95(empty, p, 1) == kUndefinedDistance);
  CHECK(hd95(p, p, 1) == 0.0);

  CHECK(percentile_linear({4.0, 1.0, 2.0, 3.0}, 0.5) == 2.5);
  CHECK(percentile_linear({7.0}, 0.95) == 7.0);
}

TEST_CASE("distance transform") {
  std::mt19937_64 rng(4);
  const std::array<std::size_t, 3> e{5, 6, 7};
  std::vector<std::uint8_t> seed(5 * 6 * 7, 0);
  std::bernoulli_distribution on(0.05);
  for (auto& s : seed) s = on(rng);
  seed[17] = 1;
  const std::array<double, 3> spacing{1.5, 1.0, 0.5};
  const std::vector<double> dt = squared_distance_transform(seed, e, spacing);
  double worst = 0.0;
  for (std::size_t i = 0; i < seed.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < seed.size(); ++j) {
      if (!seed[j]) continue;
      const double dz = (double(i / 42) - double(j / 42)) * spacing[0];
      const double dy = (double(i / 7 % 6) - double(j / 7 % 6)) * spacing[1];
      const double dx = (double(i % 7) - double(j % 7)) * spacing[2];
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    worst = std::max(worst, std::abs(best - dt[i]));
  }
  CHECK(worst <= 1e-9);
  const std::vector<double> none = squared_distance_transform(std::vector<std::uint8_t>(8, 0), {2, 2, 2}, {1, 1, 1});
  for (double d : none) CHECK(std::isinf(d));
}

TEST_CASE("evaluation report") {
  std::mt19937_64 rng(5);
  Dataset data;
  std::vector<SegmentationMask> preds;
  for (int i = 0; i < 3; ++i) {
    Case c;
    c.id = "case_000" + std::to_string(i);
    c.mask = random_mask(rng, {6, 6, 6}, 3, 0.2);
    c.volume = MultiModalVolume(1, {6, 6, 6});
    data.push_back(c);
    preds.push_back(c.mask);
  }
  SUBCASE("perfect predictions") {
    const EvalReport r = evaluate_masks(preds, data);
    CHECK(r.mean_dice == 1.0);
    CHECK(r.mean_hd95 == 0.0);
    CHECK(r.rows.size() == 6);
  }
  SUBCASE("csv layout") {
    preds[1] = SegmentationMask(3, {6, 6, 6});
    const EvalReport r = evaluate_masks(preds, data, 2);
    TempDir dir("metrics");
    write_report_csv(dir / "m.csv", r);
    const std::string csv = nf::testing::read_file(dir / "m.csv");
    CHECK(csv.rfind("case,class,dice,hd95\ncase_0000,1,1,0\ncase_0000,2,1,0\ncase_0001,1,0,undefined\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 6 + 2);
    CHECK(csv.find("mean,1,") != std::string::npos);
    CHECK(r.classes[0].hd95_defined == 2);
    CHECK(r.classes[0].mean_hd95 == 0.0);
    CHECK(r.classes[0].mean_dice == doctest::Approx(2.0 / 3.0));
    CHECK(report_json(r)["classes"].size() == 2);
  }
  SUBCASE("threads do not change the report") {
    const EvalReport a = evaluate_masks(preds, data, 1), b = evaluate_masks(preds, data, 3);
    CHECK(a.mean_dice == b.mean_dice);
  }
  SUBCASE("argmax") {
    Tensor logits({1, 1, 2, 3});
    logits[1] = 2.0;
    logits[5] = 1.0;
    const SegmentationMask m = argmax_labels(logits, {1, 1, 2});
    CHECK(m.labels == std::vector<std::uint8_t>{1, 2});
  }
}
