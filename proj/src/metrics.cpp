// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "nestedformer/parallel.hpp"

namespace nf {

namespace {

void check_pair(const SegmentationMask& a, const SegmentationMask& b, const char* op) {
  if (a.extents != b.extents) {
    throw DimensionError(std::string(op) + ": mask extents differ");
  }
}

}  // namespace

double dice_score(const SegmentationMask& pred, const SegmentationMask& gt, std::uint8_t cls) {
  check_pair(pred, gt, "dice_score");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool a = pred.labels[i] == cls, b = gt.labels[i] == cls;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::array<std::size_t, 3>> boundary_voxels(const SegmentationMask& mask, std::uint8_t cls) {
  const auto& e = mask.extents;
  std::vector<std::array<std::size_t, 3>> out;
  for (std::size_t z = 0; z < e[0]; ++z)
    for (std::size_t y = 0; y < e[1]; ++y)
      for (std::size_t x = 0; x < e[2]; ++x) {
        if (mask.labels[mask.index(z, y, x)] != cls) continue;
        const bool border = z == 0 || y == 0 || x == 0 || z + 1 == e[0] || y + 1 == e[1] || x + 1 == e[2];
        const bool exposed = border || mask.labels[mask.index(z - 1, y, x)] != cls ||
                             mask.labels[mask.index(z + 1, y, x)] != cls || mask.labels[mask.index(z, y - 1, x)] != cls ||
                             mask.labels[mask.index(z, y + 1, x)] != cls || mask.labels[mask.index(z, y, x - 1)] != cls ||
                             mask.labels[mask.index(z, y, x + 1)] != cls;
        if (exposed) out.push_back({z, y, x});
      }
  return out;
}

double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

// Lower envelope of parabolas (squared distance along one line) with sample
// spacing h.
void edt_1d(const double* f, double* d, std::size_t n, std::size_t stride, double h, std::vector<std::size_t>& v,
            std::vector<double>& z, std::vector<double>& buf) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  buf.resize(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = f[i * stride];
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (std::isfinite(buf[q])) {
      first = q;
      break;
    }
  }
  if (first == n) {
    for (std::size_t i = 0; i < n; ++i) d[i * stride] = inf;
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!std::isfinite(buf[q])) continue;
    const double xq = static_cast<double>(q) * h;
    for (;;) {
      const double xv = static_cast<double>(v[k]) * h;
      const double s = ((buf[q] + xq * xq) - (buf[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      if (s <= z[k]) {
        // k == 0 and the new parabola dominates everywhere.
        v[0] = q;
        z[0] = -inf;
        z[1] = inf;
        break;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = inf;
      break;
    }
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double xq = static_cast<double>(q) * h;
    while (z[k + 1] < xq) ++k;
    const double dx = xq - static_cast<double>(v[k]) * h;
    d[q * stride] = dx * dx + buf[v[k]];
  }
}

}  // namespace

std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& seed,
                                               const std::array<std::size_t, 3>& e,
                                               const std::array<double, 3>& spacing) {
  const std::size_t n = e[0] * e[1] * e[2];
  if (seed.size() != n) throw DimensionError("distance transform: seed size does not match extents");
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = seed[i] ? 0.0 : std::numeric_limits<double>::infinity();
  std::vector<std::size_t> v;
  std::vector<double> z, buf;
  // x lines
  for (std::size_t zz = 0; zz < e[0]; ++zz)
    for (std::size_t y = 0; y < e[1]; ++y) {
      const std::size_t off = (zz * e[1] + y) * e[2];
      edt_1d(a.data() + off, b.data() + off, e[2], 1, spacing[2], v, z, buf);
    }
  // y lines
  for (std::size_t zz = 0; zz < e[0]; ++zz)
    for (std::size_t x = 0; x < e[2]; ++x) {
      const std::size_t off = zz * e[1] * e[2] + x;
      edt_1d(b.data() + off, a.data() + off, e[1], e[2], spacing[1], v, z, buf);
    }
  // z lines
  for (std::size_t y = 0; y < e[1]; ++y)
    for (std::size_t x = 0; x < e[2]; ++x) {
      const std::size_t off = y * e[2] + x;
      edt_1d(a.data() + off, b.data() + off, e[0], e[1] * e[2], spacing[0], v, z, buf);
    }
  return b;
}

namespace {

// Distances from each boundary voxel of `from` to the nearest boundary voxel of `to`.
std::vector<double> directed_distances(const SegmentationMask& from_mask, const std::vector<std::array<std::size_t, 3>>& from,
                                       const std::vector<std::array<std::size_t, 3>>& to,
                                       const std::array<double, 3>& spacing) {
  std::vector<std::uint8_t> seed(from_mask.voxels(), 0);
  for (const auto& p : to) seed[from_mask.index(p[0], p[1], p[2])] = 1;
  const auto dt = squared_distance_transform(seed, from_mask.extents, spacing);
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) out.push_back(std::sqrt(dt[from_mask.index(p[0], p[1], p[2])]));
  return out;
}

template <typename Reduce>
double surface_distance(const SegmentationMask& pred, const SegmentationMask& gt, std::uint8_t cls,
                        const std::array<double, 3>& spacing, Reduce reduce) {
  check_pair(pred, gt, "hd95");
  const auto bp = boundary_voxels(pred, cls);
  const auto bg = boundary_voxels(gt, cls);
  if (bp.empty() && bg.empty()) return 0.0;
  if (bp.empty() || bg.empty()) return kUndefinedDistance;
  return std::max(reduce(directed_distances(pred, bp, bg, spacing)), reduce(directed_distances(gt, bg, bp, spacing)));
}

}  // namespace

double hd95(const SegmentationMask& pred, const SegmentationMask& gt, std::uint8_t cls,
            const std::array<double, 3>& spacing) {
  return surface_distance(pred, gt, cls, spacing, [](std::vector<double> d) { return percentile_linear(std::move(d), 0.95); });
}

double hausdorff(const SegmentationMask& pred, const SegmentationMask& gt, std::uint8_t cls,
                 const std::array<double, 3>& spacing) {
  return surface_distance(pred, gt, cls, spacing,
                          [](const std::vector<double>& d) { return *std::max_element(d.begin(), d.end()); });
}

SegmentationMask argmax_labels(const Tensor& logits, const std::array<std::size_t, 3>& extents) {
  const std::size_t nc = logits.cols();
  SegmentationMask m(nc, extents);
  if (logits.rows() != m.voxels()) throw DimensionError("argmax_labels: logits do not cover the extents");
  for (std::size_t i = 0; i < m.voxels(); ++i) {
    const double* row = logits.data() + i * nc;
    m.labels[i] = static_cast<std::uint8_t>(std::max_element(row, row + nc) - row);
  }
  return m;
}

EvalReport evaluate_masks(const std::vector<SegmentationMask>& predictions, const Dataset& dataset, std::size_t threads) {
  if (dataset.empty()) throw ValidationError("evaluate: dataset is empty");
  if (predictions.size() != dataset.size()) throw ContractError("evaluate: one prediction per case is required");
  const std::size_t nc = dataset[0].mask.classes;
  std::vector<std::vector<CaseMetrics>> per_case(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    const auto& gt = dataset[i].mask;
    std::array<double, 3> spacing{gt.spacing[0], gt.spacing[1], gt.spacing[2]};
    for (std::size_t c = 1; c < nc; ++c) {
      const auto cls = static_cast<std::uint8_t>(c);
      per_case[i].push_back({dataset[i].id, cls, dice_score(predictions[i], gt, cls), hd95(predictions[i], gt, cls, spacing)});
    }
  });

  EvalReport report;
  for (auto& rows : per_case) report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  std::size_t hd_classes = 0;
  for (std::size_t c = 1; c < nc; ++c) {
    ClassSummary s;
    s.cls = static_cast<std::uint8_t>(c);
    double dice_sum = 0.0, hd_sum = 0.0;
    for (const auto& r : report.rows) {
      if (r.cls != c) continue;
      dice_sum += r.dice;
      if (std::isfinite(r.hd95)) {
        hd_sum += r.hd95;
        ++s.hd95_defined;
      }
    }
    s.mean_dice = dice_sum / static_cast<double>(dataset.size());
    s.mean_hd95 = s.hd95_defined ? hd_sum / static_cast<double>(s.hd95_defined) : kUndefinedDistance;
    report.mean_dice += s.mean_dice;
    if (s.hd95_defined) {
      report.mean_hd95 += s.mean_hd95;
      ++hd_classes;
    }
    report.classes.push_back(s);
  }
  if (nc > 1) report.mean_dice /= static_cast<double>(nc - 1);
  report.mean_hd95 = hd_classes ? report.mean_hd95 / static_cast<double>(hd_classes) : kUndefinedDistance;
  return report;
}

EvalReport evaluate(const NestedFormer& model, const Dataset& dataset, bool normalize_inputs, std::size_t threads) {
  if (dataset.empty()) throw ValidationError("evaluate: dataset is empty");
  std::vector<SegmentationMask> preds(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    NoGradScope no_grad;
    const auto& vol = dataset[i].volume;
    const Var logits = model.forward(normalize_inputs ? normalize(vol) : vol);
    preds[i] = argmax_labels(logits.value(), vol.extents);
  });
  return evaluate_masks(preds, dataset, threads);
}

namespace {

std::string format_distance(double d) {
  if (!std::isfinite(d)) return "undefined";
  std::ostringstream ss;
  ss << std::setprecision(10) << d;
  return ss.str();
}

std::string format_value(double d) {
  std::ostringstream ss;
  ss << std::setprecision(10) << d;
  return ss.str();
}

nlohmann::json distance_json(double d) { return std::isfinite(d) ? nlohmann::json(d) : nlohmann::json("undefined"); }

}  // namespace

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << "case,class,dice,hd95\n";
  for (const auto& r : report.rows) {
    out << r.case_id << ',' << static_cast<int>(r.cls) << ',' << format_value(r.dice) << ',' << format_distance(r.hd95)
        << '\n';
  }
  for (const auto& s : report.classes) {
    out << "mean," << static_cast<int>(s.cls) << ',' << format_value(s.mean_dice) << ',' << format_distance(s.mean_hd95)
        << '\n';
  }
}

nlohmann::json report_json(const EvalReport& report) {
  nlohmann::json j;
  j["mean_dice"] = report.mean_dice;
  j["mean_hd95"] = distance_json(report.mean_hd95);
  j["classes"] = nlohmann::json::array();
  for (const auto& s : report.classes) {
    j["classes"].push_back({{"class", s.cls},
                            {"mean_dice", s.mean_dice},
                            {"mean_hd95", distance_json(s.mean_hd95)},
                            {"hd95_defined_cases", s.hd95_defined}});
  }
  j["cases"] = nlohmann::json::array();
  for (const auto& r : report.rows) {
    j["cases"].push_back({{"case", r.case_id}, {"class", r.cls}, {"dice", r.dice}, {"hd95", distance_json(r.hd95)}});
  }
  return j;
}

}  // namespace nf
