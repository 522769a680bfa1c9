// Evaluation metrics: MSE, PSNR, 3D SSIM with Gaussian windows, Pearson
// correlation, global and voxel-wise delta-Pearson of change maps,
// voxel-wise error maps and correlation histograms, plus the report CSV.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "volforecast/volume.hpp"

namespace volf {

inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("pearson: need at least 2 samples");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0, sbb = 0, sab = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;  // zero variance: undefined
  return sab / std::sqrt(saa * sbb);
}

inline double masked_mse(const Volume& pred, const Volume& target, const std::vector<uint8_t>& mask) {
  if (pred.dims != target.dims) throw std::invalid_argument("mse: dim mismatch");
  if (mask.size() != pred.data.size()) throw std::invalid_argument("mse: mask length mismatch");
  double acc = 0;
  int64_t count = 0;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const double d = static_cast<double>(pred.data[i]) - target.data[i];
    acc += d * d;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("mse: empty mask");
  return acc / static_cast<double>(count);
}

struct PsnrValue {
  double db = 0.0;
  bool infinite = false;  // perfect reconstruction sentinel
};

inline PsnrValue psnr(const Volume& pred, const Volume& target, const std::vector<uint8_t>& mask,
                      double peak = 1.0) {
  const double mse = masked_mse(pred, target, mask);
  if (mse == 0.0) return {std::numeric_limits<double>::infinity(), true};
  return {10.0 * std::log10(peak * peak / mse), false};
}

// Mean local SSIM over voxels whose (truncated, renormalized) Gaussian
// window center lies in-mask. Window: sigma 1.5, extent up to 11^3, shrunk
// to the largest odd size fitting the volume.
inline double ssim3d(const Volume& pred, const Volume& target, const std::vector<uint8_t>& mask,
                     double peak = 1.0, double sigma = 1.5, int max_window = 11) {
  if (pred.dims != target.dims) throw std::invalid_argument("ssim3d: dim mismatch");
  if (mask.size() != pred.data.size()) throw std::invalid_argument("ssim3d: mask length mismatch");
  const int min_dim = std::min({pred.dims[0], pred.dims[1], pred.dims[2]});
  int win = std::min(max_window, min_dim);
  if (win % 2 == 0) --win;
  if (win < 1) throw std::invalid_argument("ssim3d: volume too small");
  const int r = win / 2;
  std::vector<double> w1d(static_cast<size_t>(win));
  for (int i = -r; i <= r; ++i) w1d[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const int nx = pred.dims[0], ny = pred.dims[1], nz = pred.dims[2];
  double total = 0;
  int64_t count = 0;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        if (!mask[pred.index(x, y, z)]) continue;
        double sw = 0, sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dz = -r; dz <= r; ++dz) {
          const int zz = z + dz;
          if (zz < 0 || zz >= nz) continue;
          for (int dy = -r; dy <= r; ++dy) {
            const int yy = y + dy;
            if (yy < 0 || yy >= ny) continue;
            const double wzy = w1d[static_cast<size_t>(dz + r)] * w1d[static_cast<size_t>(dy + r)];
            for (int dx = -r; dx <= r; ++dx) {
              const int xx = x + dx;
              if (xx < 0 || xx >= nx) continue;
              const double w = wzy * w1d[static_cast<size_t>(dx + r)];
              const double av = pred.at(xx, yy, zz);
              const double bv = target.at(xx, yy, zz);
              sw += w;
              sa += w * av;
              sb += w * bv;
              saa += w * av * av;
              sbb += w * bv * bv;
              sab += w * av * bv;
            }
          }
        }
        const double mu_a = sa / sw, mu_b = sb / sw;
        const double var_a = std::max(0.0, saa / sw - mu_a * mu_a);
        const double var_b = std::max(0.0, sbb / sw - mu_b * mu_b);
        const double cov = sab / sw - mu_a * mu_b;
        const double s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                         ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        total += s;
        ++count;
      }
  if (count == 0) throw std::invalid_argument("ssim3d: empty mask");
  return total / static_cast<double>(count);
}

// In-mask change vectors for one participant.
struct ChangeMap {
  std::string participant_id;
  std::vector<double> delta_true;  // x_{t+24} - x_t
  std::vector<double> delta_pred;  // xhat_{t+24} - x_t
};

inline ChangeMap make_change_map(const Volume& pred, const LongitudinalPair& pair,
                                 const std::vector<uint8_t>& mask) {
  ChangeMap cm;
  cm.participant_id = pair.participant_id;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    cm.delta_true.push_back(static_cast<double>(pair.target.data[i]) - pair.source.data[i]);
    cm.delta_pred.push_back(static_cast<double>(pred.data[i]) - pair.source.data[i]);
  }
  return cm;
}

struct DeltaPearsonGlobal {
  std::optional<double> mean_r;                  // over participants with defined r
  std::vector<std::optional<double>> per_participant;
  int n_undefined = 0;
};

inline DeltaPearsonGlobal delta_pearson_global(const std::vector<Volume>& preds,
                                               const std::vector<LongitudinalPair>& pairs,
                                               const std::vector<uint8_t>& mask) {
  if (preds.size() != pairs.size() || preds.empty())
    throw std::invalid_argument("delta_pearson_global: empty or mismatched inputs");
  DeltaPearsonGlobal out;
  double acc = 0;
  int defined = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    ChangeMap cm = make_change_map(preds[i], pairs[i], mask);
    auto r = pearson(cm.delta_pred, cm.delta_true);
    out.per_participant.push_back(r);
    if (r) {
      acc += *r;
      ++defined;
    } else {
      ++out.n_undefined;
    }
  }
  if (defined > 0) out.mean_r = acc / defined;
  return out;
}

constexpr float kUndefinedCorrelationSentinel = -2.0f;  // outside [-1,1]

struct DeltaPearsonVoxelwise {
  double mean_r = 0, sd_r = 0;
  int n_defined = 0, n_undefined = 0;
  Volume r_map;  // sentinel at excluded voxels
};

// Per in-mask voxel: r across participants between predicted and true
// changes; zero-variance voxels are excluded from the mean and marked.
inline DeltaPearsonVoxelwise delta_pearson_voxelwise(const std::vector<Volume>& preds,
                                                     const std::vector<LongitudinalPair>& pairs,
                                                     const std::vector<uint8_t>& mask) {
  if (preds.size() != pairs.size() || preds.size() < 2)
    throw std::invalid_argument("delta_pearson_voxelwise: need at least 2 participants");
  DeltaPearsonVoxelwise out;
  out.r_map.dims = pairs[0].source.dims;
  out.r_map.voxel_size_mm = pairs[0].source.voxel_size_mm;
  out.r_map.data.assign(static_cast<size_t>(out.r_map.numel()), kUndefinedCorrelationSentinel);
  const size_t P = preds.size();
  std::vector<double> dp(P), dt(P), rs;
  for (size_t v = 0; v < mask.size(); ++v) {
    if (!mask[v]) continue;
    for (size_t i = 0; i < P; ++i) {
      dp[i] = static_cast<double>(preds[i].data[v]) - pairs[i].source.data[v];
      dt[i] = static_cast<double>(pairs[i].target.data[v]) - pairs[i].source.data[v];
    }
    auto r = pearson(dp, dt);
    if (r) {
      out.r_map.data[v] = static_cast<float>(*r);
      rs.push_back(*r);
    } else {
      ++out.n_undefined;
    }
  }
  out.n_defined = static_cast<int>(rs.size());
  if (!rs.empty()) {
    double m = 0;
    for (double r : rs) m += r;
    m /= rs.size();
    double var = 0;
    for (double r : rs) var += (r - m) * (r - m);
    out.mean_r = m;
    out.sd_r = rs.size() > 1 ? std::sqrt(var / (rs.size() - 1)) : 0.0;
  }
  return out;
}

// Per-voxel mean over participants of squared prediction error.
inline Volume error_map(const std::vector<Volume>& preds,
                        const std::vector<LongitudinalPair>& pairs) {
  if (preds.size() != pairs.size() || preds.empty())
    throw std::invalid_argument("error_map: empty or mismatched inputs");
  Volume out;
  out.dims = pairs[0].target.dims;
  out.voxel_size_mm = pairs[0].target.voxel_size_mm;
  std::vector<double> acc(static_cast<size_t>(out.numel()), 0.0);
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].dims != out.dims || pairs[i].target.dims != out.dims)
      throw std::invalid_argument("error_map: dim mismatch");
    for (size_t v = 0; v < acc.size(); ++v) {
      const double d = static_cast<double>(preds[i].data[v]) - pairs[i].target.data[v];
      acc[v] += d * d;
    }
  }
  out.data.resize(acc.size());
  for (size_t v = 0; v < acc.size(); ++v)
    out.data[v] = static_cast<float>(acc[v] / static_cast<double>(preds.size()));
  return out;
}

// Per in-mask voxel: r across participants between predicted and true
// intensities (not changes); undefined voxels are skipped.
inline std::vector<double> intensity_voxelwise_correlations(
    const std::vector<Volume>& preds, const std::vector<LongitudinalPair>& pairs,
    const std::vector<uint8_t>& mask) {
  if (preds.size() != pairs.size() || preds.size() < 2)
    throw std::invalid_argument("intensity correlations: need at least 2 participants");
  std::vector<double> rs;
  const size_t P = preds.size();
  std::vector<double> a(P), b(P);
  for (size_t v = 0; v < mask.size(); ++v) {
    if (!mask[v]) continue;
    for (size_t i = 0; i < P; ++i) {
      a[i] = preds[i].data[v];
      b[i] = pairs[i].target.data[v];
    }
    if (auto r = pearson(a, b)) rs.push_back(*r);
  }
  return rs;
}

struct HistogramBin {
  double lo = 0, hi = 0;
  int64_t count = 0;
};

// Equal-width bins over [-1, 1]; values clamp into the edge bins.
inline std::vector<HistogramBin> correlation_histogram(const std::vector<double>& values, int bins) {
  if (bins < 1) throw std::invalid_argument("correlation_histogram: bins must be >= 1");
  std::vector<HistogramBin> h(static_cast<size_t>(bins));
  const double width = 2.0 / bins;
  for (int i = 0; i < bins; ++i) {
    h[static_cast<size_t>(i)].lo = -1.0 + i * width;
    h[static_cast<size_t>(i)].hi = -1.0 + (i + 1) * width;
  }
  for (double v : values) {
    int i = static_cast<int>(std::floor((v + 1.0) / width));
    i = std::clamp(i, 0, bins - 1);
    ++h[static_cast<size_t>(i)].count;
  }
  return h;
}

// --- report -----------------------------------------------------------------

struct ParticipantMetrics {
  std::string id;
  double mse = 0;        // in-mask
  PsnrValue psnr_db;
  double ssim = 0;       // masked
  std::optional<double> delta_pearson;
};

struct MetricsReport {
  std::string model, train_set, test_set;
  std::vector<ParticipantMetrics> per_participant;
  // aggregates (participant means unless noted)
  double mean_mse = 0;
  double psnr_mean = 0, psnr_sd = 0;  // over participants with finite PSNR
  int n_psnr_infinite = 0;
  double psnr_pooled = 0;  // 10 log10(peak^2 / mean in-mask MSE); differs from psnr_mean
  bool psnr_pooled_infinite = false;
  double ssim_mean = 0;
  double ssim_unmasked_mean = 0;
  std::optional<double> dpearson_global;
  double dpearson_voxel_mean = 0, dpearson_voxel_sd = 0;
  int n_undefined = 0;  // undefined global delta-Pearson participants
  Volume error_map_vol;
  Volume r_map_vol;
  std::vector<HistogramBin> intensity_r_hist;
  std::vector<HistogramBin> delta_r_hist;
};

inline MetricsReport compute_metrics_report(const std::vector<Volume>& preds,
                                            const std::vector<LongitudinalPair>& pairs,
                                            const std::vector<uint8_t>& mask,
                                            const std::string& model_label = "model",
                                            const std::string& train_label = "train",
                                            const std::string& test_label = "test",
                                            int hist_bins = 40) {
  if (preds.size() != pairs.size() || preds.empty())
    throw std::invalid_argument("metrics report: empty or mismatched inputs");
  MetricsReport rep;
  rep.model = model_label;
  rep.train_set = train_label;
  rep.test_set = test_label;
  std::vector<uint8_t> all_ones(mask.size(), 1);

  auto dp_global = delta_pearson_global(preds, pairs, mask);
  rep.dpearson_global = dp_global.mean_r;
  rep.n_undefined = dp_global.n_undefined;

  double acc_mse = 0, acc_ssim = 0, acc_ssim_u = 0;
  std::vector<double> finite_psnr;
  for (size_t i = 0; i < preds.size(); ++i) {
    ParticipantMetrics pm;
    pm.id = pairs[i].participant_id;
    pm.mse = masked_mse(preds[i], pairs[i].target, mask);
    pm.psnr_db = psnr(preds[i], pairs[i].target, mask);
    pm.ssim = ssim3d(preds[i], pairs[i].target, mask);
    pm.delta_pearson = dp_global.per_participant[i];
    acc_mse += pm.mse;
    acc_ssim += pm.ssim;
    acc_ssim_u += ssim3d(preds[i], pairs[i].target, all_ones);
    if (pm.psnr_db.infinite)
      ++rep.n_psnr_infinite;
    else
      finite_psnr.push_back(pm.psnr_db.db);
    rep.per_participant.push_back(std::move(pm));
  }
  const double n = static_cast<double>(preds.size());
  rep.mean_mse = acc_mse / n;
  rep.ssim_mean = acc_ssim / n;
  rep.ssim_unmasked_mean = acc_ssim_u / n;
  if (!finite_psnr.empty()) {
    double m = 0;
    for (double p : finite_psnr) m += p;
    m /= finite_psnr.size();
    double var = 0;
    for (double p : finite_psnr) var += (p - m) * (p - m);
    rep.psnr_mean = m;
    rep.psnr_sd = finite_psnr.size() > 1 ? std::sqrt(var / (finite_psnr.size() - 1)) : 0.0;
  }
  if (rep.mean_mse == 0.0)
    rep.psnr_pooled_infinite = true;
  else
    rep.psnr_pooled = 10.0 * std::log10(1.0 / rep.mean_mse);

  rep.error_map_vol = error_map(preds, pairs);
  if (preds.size() >= 2) {
    auto dv = delta_pearson_voxelwise(preds, pairs, mask);
    rep.dpearson_voxel_mean = dv.mean_r;
    rep.dpearson_voxel_sd = dv.sd_r;
    rep.r_map_vol = dv.r_map;
    std::vector<double> rs;
    for (size_t v = 0; v < mask.size(); ++v)
      if (mask[v] && dv.r_map.data[v] != kUndefinedCorrelationSentinel)
        rs.push_back(dv.r_map.data[v]);
    rep.delta_r_hist = correlation_histogram(rs, hist_bins);
    rep.intensity_r_hist =
        correlation_histogram(intensity_voxelwise_correlations(preds, pairs, mask), hist_bins);
  }
  return rep;
}

// --- CSV --------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline const char* kReportCsvHeader =
    "model,train_set,test_set,mse_e4,psnr_mean,psnr_sd,ssim,dpearson_global,"
    "dpearson_voxel_mean,dpearson_voxel_sd,n_undefined,mse_raw,psnr_pooled,ssim_unmasked,"
    "n_participants";

inline std::string report_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  os << r.model << ',' << r.train_set << ',' << r.test_set << ','
     << format_double(r.mean_mse * 1e4) << ',' << format_double(r.psnr_mean) << ','
     << format_double(r.psnr_sd) << ',' << format_double(r.ssim_mean) << ','
     << format_double(r.dpearson_global ? *r.dpearson_global : nan) << ','
     << format_double(r.dpearson_voxel_mean) << ',' << format_double(r.dpearson_voxel_sd) << ','
     << r.n_undefined << ',' << format_double(r.mean_mse) << ','
     << format_double(r.psnr_pooled_infinite ? nan : r.psnr_pooled) << ','
     << format_double(r.ssim_unmasked_mean) << ',' << r.per_participant.size();
  return os.str();
}

inline void save_report_csv(const MetricsReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write report: " + path);
  os << kReportCsvHeader << '\n' << report_csv_row(r) << '\n';
}

// Merges per-run report CSVs into one comparison table (Table-1 shape:
// one row per model x training set, MSE in 1e-4 units, PSNR mean +/- sd).
inline void merge_report_csvs(const std::vector<std::string>& inputs, const std::string& out_path) {
  std::vector<std::string> rows;
  for (const auto& in : inputs) {
    std::ifstream is(in);
    if (!is) throw std::runtime_error("cannot open report: " + in);
    std::string header;
    if (!std::getline(is, header) || header != kReportCsvHeader)
      throw std::runtime_error("unexpected report header in " + in);
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) rows.push_back(line);
  }
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot write merged report: " + out_path);
  os << kReportCsvHeader << '\n';
  for (const auto& r : rows) os << r << '\n';
}

inline void save_histogram_csv(const std::vector<HistogramBin>& hist, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write histogram: " + path);
  os << "bin_lo,bin_hi,count\n";
  for (const auto& b : hist)
    os << format_double(b.lo) << ',' << format_double(b.hi) << ',' << b.count << '\n';
}

inline void save_per_participant_csv(const MetricsReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write per-participant csv: " + path);
  os << "participant_id,mse,psnr_db,psnr_infinite,ssim,delta_pearson,delta_pearson_defined\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& pm : r.per_participant)
    os << pm.id << ',' << format_double(pm.mse) << ','
       << format_double(pm.psnr_db.infinite ? nan : pm.psnr_db.db) << ','
       << (pm.psnr_db.infinite ? 1 : 0) << ',' << format_double(pm.ssim) << ','
       << format_double(pm.delta_pearson ? *pm.delta_pearson : nan) << ','
       << (pm.delta_pearson ? 1 : 0) << '\n';
}

}  // namespace volf
