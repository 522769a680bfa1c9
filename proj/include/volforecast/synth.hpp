// Synthetic longitudinal atrophy cohort with a known generative oracle.
// Baselines are smooth Gaussian-blob mixtures; follow-ups decay voxelwise
// at a participant-specific rate field concentrated in dense tissue, with
// observation noise on top. The oracle applies the noiseless decay.
#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "volforecast/volume.hpp"

namespace volf {

struct CohortSpec {
  int n_participants = 2;
  std::array<int, 3> dims{16, 16, 16};
  int n_blobs = 6;
  std::array<double, 2> blob_radius_range{2.0, 4.0};  // voxels (Gaussian sigma)
  double per_participant_rate_sd = 5e-4;
  double global_rate_mean = 0.002;  // mean in-mask atrophy rate per month
  double noise_sd = 0.01;
  std::vector<int> visit_months{0, 24, 48};
  double rate_shape_exp = 4.0;      // contrast of the density-dependent rate field
  double shift_rate_scale = 1.0;    // cohort-level offset for external-cohort simulation
  uint64_t seed = 0;

  void validate() const {
    if (n_participants < 2) throw std::invalid_argument("cohort: n_participants must be >= 2");
    for (int d : dims)
      if (d <= 0) throw std::invalid_argument("cohort: dims must be positive");
    if (n_blobs < 1 || noise_sd < 0 || global_rate_mean < 0 || visit_months.empty())
      throw std::invalid_argument("cohort: invalid spec");
  }
};

struct Blob {
  double cx, cy, cz, sigma, amplitude;
};

struct ParticipantTruth {
  std::string id;
  std::vector<Blob> blobs;
  double rate = 0;            // participant atrophy rate (per month, in-mask mean)
  double rate_shape_exp = 4;  // copied from the spec
  double rate_norm = 1;       // mean of clean_density^exp over supra-threshold voxels
  std::array<int, 3> dims{};

  // Noise-free baseline density implied by the blob mixture.
  Volume clean_baseline() const {
    Volume v;
    v.dims = dims;
    v.voxel_size_mm = {4.f, 4.f, 4.f};
    v.data.resize(static_cast<size_t>(v.numel()));
    for (int z = 0; z < dims[2]; ++z)
      for (int y = 0; y < dims[1]; ++y)
        for (int x = 0; x < dims[0]; ++x) {
          double s = 0;
          for (const auto& b : blobs) {
            const double dx = x - b.cx, dy = y - b.cy, dz = z - b.cz;
            s += b.amplitude * std::exp(-0.5 * (dx * dx + dy * dy + dz * dz) / (b.sigma * b.sigma));
          }
          v.data[v.index(x, y, z)] = static_cast<float>(std::clamp(s, 0.0, 1.0));
        }
    return v;
  }

  // Voxelwise atrophy rate per month: rate * clean^exp / norm.
  std::vector<double> rate_field() const {
    Volume clean = clean_baseline();
    std::vector<double> r(clean.data.size());
    for (size_t i = 0; i < r.size(); ++i)
      r[i] = rate * std::pow(static_cast<double>(clean.data[i]), rate_shape_exp) / rate_norm;
    return r;
  }
};

namespace detail {
inline uint64_t fnv1a(const std::string& s, uint64_t seed) {
  uint64_t h = 1469598103934665603ull ^ seed;
  for (char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}
inline double normal(std::mt19937_64& rng) {
  // Box-Muller; fixed transform keeps output stable across standard libraries
  double u1 = uniform01(rng), u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}
}  // namespace detail

inline ParticipantTruth make_participant_truth(const CohortSpec& spec, const std::string& id) {
  std::mt19937_64 rng(detail::fnv1a(id, spec.seed));
  ParticipantTruth t;
  t.id = id;
  t.dims = spec.dims;
  t.rate_shape_exp = spec.rate_shape_exp;
  for (int b = 0; b < spec.n_blobs; ++b) {
    Blob blob;
    blob.cx = detail::uniform01(rng) * (spec.dims[0] - 1);
    blob.cy = detail::uniform01(rng) * (spec.dims[1] - 1);
    blob.cz = detail::uniform01(rng) * (spec.dims[2] - 1);
    blob.sigma = spec.blob_radius_range[0] +
                 detail::uniform01(rng) * (spec.blob_radius_range[1] - spec.blob_radius_range[0]);
    blob.amplitude = 0.4 + 0.5 * detail::uniform01(rng);
    t.blobs.push_back(blob);
  }
  const double mean_rate = spec.global_rate_mean * spec.shift_rate_scale;
  t.rate = std::max(0.0, mean_rate + spec.per_participant_rate_sd * detail::normal(rng));
  // normalize the shape so the mean in-tissue rate equals t.rate
  Volume clean = t.clean_baseline();
  double acc = 0;
  int64_t n = 0;
  for (float v : clean.data) {
    if (v <= 0.05f) continue;
    acc += std::pow(static_cast<double>(v), spec.rate_shape_exp);
    ++n;
  }
  t.rate_norm = n > 0 ? std::max(acc / static_cast<double>(n), 1e-12) : 1.0;
  return t;
}

// All visits for one participant; noise is observation-level and iid per
// visit, so dynamics stay noiseless and the oracle stays exact.
inline std::vector<std::pair<int, Volume>> generate_participant_scans(const CohortSpec& spec,
                                                                      const ParticipantTruth& t) {
  std::mt19937_64 noise_rng(detail::fnv1a(t.id + "/noise", spec.seed));
  Volume clean = t.clean_baseline();
  const std::vector<double> r = t.rate_field();
  std::vector<std::pair<int, Volume>> scans;
  for (int m : spec.visit_months) {
    Volume v = clean;
    for (size_t i = 0; i < v.data.size(); ++i) {
      double val = clean.data[i] * std::exp(-r[i] * m);
      if (spec.noise_sd > 0) val += spec.noise_sd * detail::normal(noise_rng);
      v.data[i] = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
    scans.emplace_back(m, std::move(v));
  }
  return scans;
}

struct GeneratedCohort {
  std::vector<ManifestEntry> manifest;
  std::vector<ParticipantTruth> truths;
};

inline std::string participant_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "p%04d", i);
  return buf;
}

// Writes VOL1 volumes + manifest.csv to out_dir and the truth sidecar to
// out_dir/truth/ (oracle bookkeeping only; training reads the manifest).
inline GeneratedCohort generate_cohort(const CohortSpec& spec, const std::string& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "vols");
  fs::create_directories(fs::path(out_dir) / "truth");
  GeneratedCohort cohort;
  nlohmann::json truths_json = nlohmann::json::array();
  for (int i = 0; i < spec.n_participants; ++i) {
    ParticipantTruth t = make_participant_truth(spec, participant_name(i));
    auto scans = generate_participant_scans(spec, t);
    for (auto& [month, vol] : scans) {
      const std::string rel = "vols/" + t.id + "_m" + std::to_string(month) + ".vol";
      save_volume(vol, (fs::path(out_dir) / rel).string());
      cohort.manifest.push_back({t.id, month, rel});
    }
    nlohmann::json tj;
    tj["id"] = t.id;
    tj["rate"] = t.rate;
    tj["rate_shape_exp"] = t.rate_shape_exp;
    tj["rate_norm"] = t.rate_norm;
    tj["dims"] = t.dims;
    for (const auto& b : t.blobs)
      tj["blobs"].push_back({{"cx", b.cx}, {"cy", b.cy}, {"cz", b.cz},
                             {"sigma", b.sigma}, {"amplitude", b.amplitude}});
    truths_json.push_back(tj);
    cohort.truths.push_back(std::move(t));
  }
  save_manifest(cohort.manifest, (fs::path(out_dir) / "manifest.csv").string());
  std::ofstream os(fs::path(out_dir) / "truth" / "truths.json");
  os << truths_json.dump(1) << '\n';
  return cohort;
}

inline std::vector<ParticipantTruth> load_truths(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open truths: " + path);
  nlohmann::json j;
  is >> j;
  std::vector<ParticipantTruth> out;
  for (const auto& tj : j) {
    ParticipantTruth t;
    t.id = tj.at("id").get<std::string>();
    t.rate = tj.at("rate").get<double>();
    t.rate_shape_exp = tj.at("rate_shape_exp").get<double>();
    t.rate_norm = tj.at("rate_norm").get<double>();
    t.dims = tj.at("dims").get<std::array<int, 3>>();
    for (const auto& bj : tj.at("blobs"))
      t.blobs.push_back({bj.at("cx").get<double>(), bj.at("cy").get<double>(),
                         bj.at("cz").get<double>(), bj.at("sigma").get<double>(),
                         bj.at("amplitude").get<double>()});
    out.push_back(std::move(t));
  }
  return out;
}

// Applies the noiseless generative decay from t1 to t1+horizon to `source`.
inline Volume oracle_predict(const ParticipantTruth& truth, const Volume& source,
                             const std::string& participant_id, int /*t1*/, int horizon) {
  if (truth.id != participant_id)
    throw std::invalid_argument("oracle_predict: participant id mismatch");
  if (source.dims != truth.dims) throw std::invalid_argument("oracle_predict: dim mismatch");
  const std::vector<double> r = truth.rate_field();
  Volume out = source;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<float>(
        std::clamp(static_cast<double>(source.data[i]) * std::exp(-r[i] * horizon), 0.0, 1.0));
  return out;
}

}  // namespace volf
