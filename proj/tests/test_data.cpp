// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "nestedformer/data.hpp"
#include "nestedformer/serialization.hpp"
#include "oracles.hpp"

using namespace nf;
using nf::testing::read_file;
using nf::testing::TempDir;

namespace {

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

std::uint32_t le32(const std::string& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b[at + i])) << (8 * i);
  return v;
}

}  // namespace

TEST_CASE("volume and mask files") {
  TempDir dir("io");
  std::mt19937_64 rng(1);
  MultiModalVolume v(3, {2, 3, 4});
  v.spacing = {1.0f, 0.5f, 2.25f};
  std::normal_distribution<float> n;
  for (auto& f : v.data) f = n(rng);
  v.data[5] = -0.0f;
  v.data[6] = std::numeric_limits<float>::denorm_min();

  write_mmv(dir / "v.mmv", v);
  const std::string bytes = read_file(dir / "v.mmv");
  CHECK(bytes.size() == 4 + 16 + 12 + 4 * v.data.size());
  CHECK(bytes.substr(0, 4) == "MMV1");
  CHECK(le32(bytes, 4) == 3);
  CHECK(le32(bytes, 8) == 2);
  CHECK(le32(bytes, 16) == 4);

  const MultiModalVolume back = read_mmv(dir / "v.mmv");
  CHECK(back.modalities == 3);
  CHECK(back.extents == v.extents);
  CHECK(back.spacing == v.spacing);
  CHECK(std::memcmp(back.data.data(), v.data.data(), v.data.size() * 4) == 0);
  write_mmv(dir / "again.mmv", back);
  CHECK(read_file(dir / "again.mmv") == bytes);

  SegmentationMask m = nf::testing::random_mask(rng, {3, 5, 2}, 4, 0.3);
  write_mask(dir / "m.msk", m);
  const std::string mbytes = read_file(dir / "m.msk");
  CHECK(mbytes.size() == 4 + 16 + 30);
  const SegmentationMask mback = read_mask(dir / "m.msk");
  CHECK(mback.labels == m.labels);
  CHECK(mback.classes == 4);

  SUBCASE("malformed files") {
    write_bytes(dir / "x.mmv", "MMV2" + bytes.substr(4));
    CHECK_THROWS_WITH_AS(read_mmv(dir / "x.mmv"), doctest::Contains("bad magic"), FormatError);
    write_bytes(dir / "x.mmv", bytes.substr(0, bytes.size() - 1));
    CHECK_THROWS_WITH_AS(read_mmv(dir / "x.mmv"), doctest::Contains("truncated"), FormatError);
    write_bytes(dir / "x.mmv", bytes + "z");
    CHECK_THROWS_WITH_AS(read_mmv(dir / "x.mmv"), doctest::Contains("trailing"), FormatError);
    write_bytes(dir / "x.mmv", bytes.substr(0, 10));
    CHECK_THROWS_AS(read_mmv(dir / "x.mmv"), FormatError);
    std::string zero = bytes;
    zero[4] = 0;
    write_bytes(dir / "x.mmv", zero);
    CHECK_THROWS_AS(read_mmv(dir / "x.mmv"), FormatError);
    CHECK_THROWS_AS(read_mmv(dir / "missing.mmv"), ValidationError);

    std::string bad_label = mbytes;
    bad_label.back() = 4;
    write_bytes(dir / "x.msk", bad_label);
    CHECK_THROWS_AS(read_mask(dir / "x.msk"), ValidationError);
    write_bytes(dir / "x.msk", "MMV1" + mbytes.substr(4));
    CHECK_THROWS_AS(read_mask(dir / "x.msk"), FormatError);
    write_bytes(dir / "x.msk", mbytes.substr(0, mbytes.size() - 2));
    CHECK_THROWS_AS(read_mask(dir / "x.msk"), FormatError);
  }
  SUBCASE("invalid in-memory data") {
    MultiModalVolume nan = v;
    nan.data[0] = std::nanf("");
    CHECK_THROWS_AS(write_mmv(dir / "nan.mmv", nan), ValidationError);
    MultiModalVolume short_data = v;
    short_data.data.pop_back();
    CHECK_THROWS_AS(short_data.validate(), ValidationError);
    CHECK_THROWS_AS(v.modality(3), ContractError);
  }
}

TEST_CASE("phantom generation") {
  PhantomSpec spec;
  spec.extents = {16, 32, 16};
  spec.modalities = 3;
  spec.classes = 4;
  spec.objects_per_class = 2;
  spec.radius_min = 2.0;
  spec.radius_max = 4.0;
  spec.seed = 5;

  SUBCASE("noise-free intensities are the visibility table") {
    spec.noise_sigma = 0.0;
    const Phantom p = generate_phantom(spec);
    const auto vis = spec.resolved_visibility();
    for (std::size_t m = 0; m < 3; ++m) {
      const auto mod = p.volume.modality(m);
      for (std::size_t i = 0; i < mod.size(); ++i) CHECK(mod[i] == float(vis[m][p.mask.labels[i]]));
    }
  }
  SUBCASE("objects rasterize to the mask") {
    const Phantom p = generate_phantom(spec);
    CHECK(p.objects.size() == 6);
    std::vector<std::size_t> hist(4, 0);
    for (auto l : p.mask.labels) ++hist[l];
    CHECK(hist == nf::testing::rasterized_histogram(p.objects, spec.extents, 4));
    for (std::size_t c = 1; c < 4; ++c) CHECK(hist[c] > 0);
    for (const auto& o : p.objects)
      for (int a = 0; a < 3; ++a) {
        CHECK(o.center[a] - o.radii[a] >= 0.0);
        CHECK(o.center[a] + o.radii[a] <= double(spec.extents[a]) - 1.0);
      }
  }
  SUBCASE("deterministic per seed") {
    const Phantom a = generate_phantom(spec), b = generate_phantom(spec);
    CHECK(a.volume.data == b.volume.data);
    CHECK(a.mask.labels == b.mask.labels);
    spec.seed = 6;
    CHECK(generate_phantom(spec).mask.labels != a.mask.labels);
  }
  SUBCASE("default visibility is complementary") {
    const auto vis = spec.resolved_visibility();
    for (std::size_t m = 0; m < 3; ++m)
      for (std::size_t c = 1; c < 4; ++c) CHECK((vis[m][c] != 0.0) == ((c - 1) % 3 == m));
  }
  SUBCASE("noise statistics") {
    spec.noise_sigma = 0.5;
    spec.extents = {32, 32, 32};
    const Phantom p = generate_phantom(spec);
    const auto vis = spec.resolved_visibility();
    double sum = 0.0, sq = 0.0;
    const auto mod = p.volume.modality(0);
    for (std::size_t i = 0; i < mod.size(); ++i) {
      const double r = mod[i] - vis[0][p.mask.labels[i]];
      sum += r;
      sq += r * r;
    }
    const double n = double(mod.size());
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::sqrt(sq / n) == doctest::Approx(0.5).epsilon(0.02));
  }
  SUBCASE("invalid specifications") {
    PhantomSpec bad = spec;
    bad.extents = {16, 20, 16};
    CHECK_THROWS_AS(generate_phantom(bad), ValidationError);
    bad = spec;
    bad.visibility = {{0, 1, 1, 1}, {0, 1, 1, 1}, {0, 1, 1, 1}};
    CHECK_THROWS_AS(generate_phantom(bad), ValidationError);
    bad = spec;
    bad.visibility = {{0, 1, 0, 0}, {0, 1, 0, 0}, {0, 1, 0, 0}};
    CHECK_THROWS_AS(generate_phantom(bad), ValidationError);
    bad = spec;
    bad.radius_min = bad.radius_max = 7.5;
    bad.objects_per_class = 30;
    bad.max_attempts = 50;
    CHECK_THROWS_AS(generate_phantom(bad), GenerationError);
  }
}

TEST_CASE("normalisation") {
  MultiModalVolume v(2, {1, 1, 4});
  v.data = {0.0f, 1.0f, 2.0f, 3.0f, 5.0f, 5.0f, 0.0f, 5.0f};
  const MultiModalVolume n = normalize(v);
  CHECK(n.data[0] == 0.0f);
  const double sd = std::sqrt(2.0 / 3.0);
  CHECK(n.data[1] == doctest::Approx(-1.0 / sd).epsilon(1e-6));
  CHECK(n.data[2] == 0.0f);
  CHECK(n.data[3] == doctest::Approx(1.0 / sd).epsilon(1e-6));
  for (std::size_t i = 4; i < 8; ++i) CHECK(n.data[i] == 0.0f);
}

TEST_CASE("dataset splits") {
  const DatasetSplit s = split_dataset(20, {0.6, 0.2, 0.2}, 3);
  CHECK(s.train.size() == 12);
  CHECK(s.val.size() == 4);
  CHECK(s.test.size() == 4);
  std::vector<std::size_t> all = s.train;
  all.insert(all.end(), s.val.begin(), s.val.end());
  all.insert(all.end(), s.test.begin(), s.test.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 20; ++i) CHECK(all[i] == i);
  CHECK(s.warnings.empty());
  CHECK(split_dataset(20, {0.6, 0.2, 0.2}, 3).train == s.train);

  const DatasetSplit tiny = split_dataset(2, {0.8, 0.1, 0.1}, 0);
  CHECK(tiny.train.size() == 2);
  CHECK(tiny.warnings.size() == 2);
  CHECK_THROWS_AS(split_dataset(10, {0.5, 0.5, 0.5}, 0), ValidationError);
  CHECK_THROWS_AS(split_dataset(10, {1.2, -0.2, 0.0}, 0), ValidationError);
}

TEST_CASE("dataset directories") {
  TempDir dir("dataset");
  PhantomSpec spec;
  spec.extents = {16, 16, 16};
  spec.radius_min = 2.0;
  spec.radius_max = 4.0;
  spec.seed = 40;
  const Dataset d = generate_dataset(spec, 3, 2);
  CHECK(d[2].id == "case_0002");
  spec.seed = 42;
  CHECK(generate_phantom(spec).mask.labels == d[2].mask.labels);
  spec.seed = 40;

  write_dataset(dir / "d", d, spec);
  const Dataset back = read_dataset(dir / "d");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == d[i].id);
    CHECK(back[i].volume.data == d[i].volume.data);
    CHECK(back[i].mask.labels == d[i].mask.labels);
  }
  const auto meta = read_json_file(dir / "d" / "case_0001" / "meta.json");
  CHECK(meta["seed"] == 41);
  CHECK(parse_phantom_spec(meta["spec"]).seed == 41);

  CHECK_THROWS_AS(read_dataset(dir / "none"), ValidationError);
  std::filesystem::create_directories(dir / "empty");
  CHECK_THROWS_AS(read_dataset(dir / "empty"), ValidationError);
}
