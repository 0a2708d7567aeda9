// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "nestedformer/parallel.hpp"
#include "nestedformer/serialization.hpp"

namespace nf {

MultiModalVolume::MultiModalVolume(std::size_t m, std::array<std::size_t, 3> ext)
    : modalities(m), extents(ext), data(m * ext[0] * ext[1] * ext[2], 0.0f) {}

std::span<float> MultiModalVolume::modality(std::size_t i) {
  if (i >= modalities) throw ContractError("modality index out of range");
  return std::span<float>(data).subspan(i * voxels(), voxels());
}

std::span<const float> MultiModalVolume::modality(std::size_t i) const {
  if (i >= modalities) throw ContractError("modality index out of range");
  return std::span<const float>(data).subspan(i * voxels(), voxels());
}

void MultiModalVolume::validate() const {
  if (modalities == 0) throw ValidationError("volume must have at least one modality");
  if (voxels() == 0) throw ValidationError("volume extents must be positive");
  if (data.size() != modalities * voxels()) throw ValidationError("volume data size does not match header");
  for (float v : data) {
    if (!std::isfinite(v)) throw ValidationError("volume contains non-finite intensities");
  }
}

SegmentationMask::SegmentationMask(std::size_t n_classes, std::array<std::size_t, 3> ext)
    : classes(n_classes), extents(ext), labels(ext[0] * ext[1] * ext[2], 0) {}

void SegmentationMask::validate() const {
  if (classes == 0 || classes > 256) throw ValidationError("mask class count must be in 1..256");
  if (labels.size() != voxels()) throw ValidationError("mask label count does not match extents");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw ValidationError("mask label " + std::to_string(labels[i]) + " at voxel " + std::to_string(i) +
                            " is not below class count " + std::to_string(classes));
    }
  }
}

Tensor SegmentationMask::one_hot() const {
  Tensor t(Shape{voxels(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i * classes + labels[i]] = 1.0;
  return t;
}

bool Ellipsoid::contains(std::size_t z, std::size_t y, std::size_t x) const {
  const double p[3] = {static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - center[a]) / radii[a];
    s += d * d;
  }
  return s <= 1.0;
}

std::vector<std::vector<double>> PhantomSpec::resolved_visibility() const {
  if (!visibility.empty()) return visibility;
  std::vector<std::vector<double>> vis(modalities, std::vector<double>(classes, 0.0));
  for (std::size_t c = 1; c < classes; ++c) vis[(c - 1) % modalities][c] = 1.0;
  return vis;
}

void PhantomSpec::validate() const {
  for (auto e : extents) {
    if (e == 0 || e % 16 != 0) throw ValidationError("phantom extents must be positive multiples of 16");
  }
  if (modalities == 0) throw ValidationError("phantom.modalities must be at least 1");
  if (classes < 2 || classes > 256) throw ValidationError("phantom.classes must be in 2..256");
  if (radius_min <= 0.0 || radius_max < radius_min) throw ValidationError("phantom radius range is invalid");
  if (noise_sigma < 0.0) throw ValidationError("phantom.noise_sigma must be >= 0");
  const auto vis = resolved_visibility();
  if (vis.size() != modalities) throw ValidationError("phantom.visibility needs one row per modality");
  bool some_hidden = false;
  for (const auto& row : vis) {
    if (row.size() != classes) throw ValidationError("phantom.visibility rows need one entry per class");
  }
  for (std::size_t c = 1; c < classes; ++c) {
    bool seen = false;
    for (std::size_t i = 0; i < modalities; ++i) {
      if (vis[i][c] != 0.0) seen = true;
      else some_hidden = true;
    }
    if (!seen) throw ValidationError("phantom.visibility: class " + std::to_string(c) + " is invisible in every modality");
  }
  if (!some_hidden) {
    throw ValidationError("phantom.visibility: at least one class must be invisible in at least one modality");
  }
}

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const auto vis = spec.resolved_visibility();
  std::mt19937_64 rng(spec.seed);
  Phantom out;
  out.mask = SegmentationMask(spec.classes, spec.extents);
  out.volume = MultiModalVolume(spec.modalities, spec.extents);
  const auto& ext = spec.extents;
  std::uniform_real_distribution<double> radius(spec.radius_min, spec.radius_max);

  for (std::size_t c = 1; c < spec.classes; ++c) {
    for (std::size_t n = 0; n < spec.objects_per_class; ++n) {
      bool placed = false;
      for (std::size_t attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
        Ellipsoid e;
        e.label = static_cast<std::uint8_t>(c);
        bool fits = true;
        for (int a = 0; a < 3; ++a) {
          e.radii[a] = radius(rng);
          const double lo = e.radii[a], hi = static_cast<double>(ext[a]) - 1.0 - e.radii[a];
          if (hi < lo) {
            fits = false;
            break;
          }
          e.center[a] = std::uniform_real_distribution<double>(lo, hi)(rng);
        }
        if (!fits) continue;
        std::size_t lo[3], hi[3];
        for (int a = 0; a < 3; ++a) {
          lo[a] = static_cast<std::size_t>(std::max(0.0, std::floor(e.center[a] - e.radii[a])));
          hi[a] = static_cast<std::size_t>(std::min(static_cast<double>(ext[a] - 1), std::ceil(e.center[a] + e.radii[a])));
        }
        std::vector<std::size_t> cells;
        bool overlap = false;
        for (std::size_t z = lo[0]; z <= hi[0] && !overlap; ++z)
          for (std::size_t y = lo[1]; y <= hi[1] && !overlap; ++y)
            for (std::size_t x = lo[2]; x <= hi[2]; ++x) {
              if (!e.contains(z, y, x)) continue;
              const std::size_t i = out.mask.index(z, y, x);
              if (out.mask.labels[i] != 0) {
                overlap = true;
                break;
              }
              cells.push_back(i);
            }
        if (overlap || cells.empty()) continue;
        for (auto i : cells) out.mask.labels[i] = e.label;
        out.objects.push_back(e);
        placed = true;
      }
      if (!placed) {
        throw GenerationError("phantom: could not place object " + std::to_string(n) + " of class " +
                              std::to_string(c) + " after " + std::to_string(spec.max_attempts) + " attempts");
      }
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t m = 0; m < spec.modalities; ++m) {
    auto dst = out.volume.modality(m);
    for (std::size_t i = 0; i < dst.size(); ++i) {
      double v = vis[m][out.mask.labels[i]];
      if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(rng);
      dst[i] = static_cast<float>(v);
    }
  }
  return out;
}

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::string& buf, float f) { put_u32(buf, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

  void expect_magic(const char* magic) {
    if (bytes_.size() < 4 || bytes_.compare(0, 4, magic) != 0) {
      throw FormatError(what_ + ": bad magic, expected '" + std::string(magic) + "'");
    }
    pos_ = 4;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  const char* take(std::size_t n) {
    need(n);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  void expect_end() const {
    if (pos_ != bytes_.size()) throw FormatError(what_ + ": trailing bytes after payload");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated file");
  }
  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

std::uint32_t checked_u32(std::size_t v, const char* field) {
  if (v > 0xFFFFFFFFu) throw ValidationError(std::string(field) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void write_mmv(const std::filesystem::path& path, const MultiModalVolume& v) {
  if (v.modalities == 0) throw ValidationError("write_mmv: volume has zero modalities");
  v.validate();
  std::string buf = "MMV1";
  put_u32(buf, checked_u32(v.modalities, "M"));
  for (auto e : v.extents) put_u32(buf, checked_u32(e, "extent"));
  for (auto s : v.spacing) put_f32(buf, s);
  buf.reserve(buf.size() + v.data.size() * 4);
  for (float f : v.data) put_f32(buf, f);
  spill(path, buf);
}

MultiModalVolume read_mmv(const std::filesystem::path& path) {
  Reader r(slurp(path), "MMV1 '" + path.string() + "'");
  r.expect_magic("MMV1");
  MultiModalVolume v;
  v.modalities = r.u32();
  for (auto& e : v.extents) e = r.u32();
  for (auto& s : v.spacing) s = r.f32();
  if (v.modalities == 0 || v.voxels() == 0) throw FormatError("MMV1 '" + path.string() + "': empty volume in header");
  const std::size_t n = v.modalities * v.voxels();
  const char* payload = r.take(n * 4);
  v.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[i * 4 + b])) << (8 * b);
    v.data[i] = std::bit_cast<float>(bits);
  }
  r.expect_end();
  return v;
}

void write_mask(const std::filesystem::path& path, const SegmentationMask& m) {
  m.validate();
  std::string buf = "MSK1";
  put_u32(buf, checked_u32(m.classes, "N_c"));
  for (auto e : m.extents) put_u32(buf, checked_u32(e, "extent"));
  buf.append(reinterpret_cast<const char*>(m.labels.data()), m.labels.size());
  spill(path, buf);
}

SegmentationMask read_mask(const std::filesystem::path& path) {
  Reader r(slurp(path), "MSK1 '" + path.string() + "'");
  r.expect_magic("MSK1");
  SegmentationMask m;
  m.classes = r.u32();
  for (auto& e : m.extents) e = r.u32();
  if (m.voxels() == 0) throw FormatError("MSK1 '" + path.string() + "': empty mask in header");
  const char* payload = r.take(m.voxels());
  m.labels.assign(reinterpret_cast<const std::uint8_t*>(payload), reinterpret_cast<const std::uint8_t*>(payload) + m.voxels());
  r.expect_end();
  m.validate();
  return m;
}

MultiModalVolume normalize(const MultiModalVolume& v) {
  MultiModalVolume out = v;
  for (std::size_t m = 0; m < v.modalities; ++m) {
    auto src = v.modality(m);
    auto dst = out.modality(m);
    double sum = 0.0;
    std::size_t count = 0;
    for (float f : src) {
      if (f != 0.0f) {
        sum += f;
        ++count;
      }
    }
    if (count == 0) continue;
    const double mu = sum / static_cast<double>(count);
    double var = 0.0;
    for (float f : src) {
      if (f != 0.0f) var += (f - mu) * (f - mu);
    }
    var /= static_cast<double>(count);
    if (var <= 0.0) {
      std::fill(dst.begin(), dst.end(), 0.0f);
      continue;
    }
    const double sd = std::sqrt(var);
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i] != 0.0f) dst[i] = static_cast<float>((src[i] - mu) / sd);
    }
  }
  return out;
}

DatasetSplit split_dataset(std::size_t count, const std::array<double, 3>& fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ValidationError("split fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplit out;
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(count)));
  const auto n_val = std::min(count - std::min(n_train, count),
                              static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(count))));
  const std::size_t a = std::min(n_train, count), b = a + n_val;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(a));
  out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(a), order.begin() + static_cast<std::ptrdiff_t>(b));
  out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(b), order.end());
  const char* names[3] = {"train", "val", "test"};
  const std::vector<std::size_t>* parts[3] = {&out.train, &out.val, &out.test};
  for (int i = 0; i < 3; ++i) {
    if (fractions[i] > 0.0 && parts[i]->empty()) {
      out.warnings.push_back(std::string(names[i]) + " split is empty at fraction " + std::to_string(fractions[i]) +
                             " for " + std::to_string(count) + " cases");
    }
  }
  return out;
}

namespace {

std::string case_name(std::size_t i) {
  std::ostringstream ss;
  ss << "case_" << std::setw(4) << std::setfill('0') << i;
  return ss.str();
}

}  // namespace

Dataset generate_dataset(const PhantomSpec& spec, std::size_t count, std::size_t threads) {
  spec.validate();
  Dataset out(count);
  parallel_for(count, threads, [&](std::size_t i) {
    PhantomSpec s = spec;
    s.seed = spec.seed + i;
    Phantom p = generate_phantom(s);
    out[i] = Case{case_name(i), std::move(p.volume), std::move(p.mask)};
  });
  return out;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& cases, const PhantomSpec& spec) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto case_dir = dir / cases[i].id;
    std::filesystem::create_directories(case_dir);
    write_mmv(case_dir / "volume.mmv", cases[i].volume);
    write_mask(case_dir / "mask.msk", cases[i].mask);
    PhantomSpec s = spec;
    s.seed = spec.seed + i;
    nlohmann::json meta{{"index", i}, {"seed", s.seed}, {"spec", s}};
    std::ofstream(case_dir / "meta.json") << meta.dump(2) << "\n";
  }
}

Dataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("dataset directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> entries;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_directory() && e.path().filename().string().rfind("case_", 0) == 0) entries.push_back(e.path());
  }
  std::sort(entries.begin(), entries.end());
  if (entries.empty()) throw ValidationError("dataset directory '" + dir.string() + "' contains no case_* entries");
  Dataset out;
  for (const auto& p : entries) {
    Case c;
    c.id = p.filename().string();
    c.volume = read_mmv(p / "volume.mmv");
    c.mask = read_mask(p / "mask.msk");
    if (c.mask.extents != c.volume.extents) throw ValidationError(c.id + ": mask and volume extents differ");
    for (int a = 0; a < 3; ++a) c.mask.spacing[a] = c.volume.spacing[a];
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace nf
