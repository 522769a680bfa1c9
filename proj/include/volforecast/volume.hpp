// Volume data model, VOL1 file IO, cohort manifests, mask computation,
// longitudinal pairing, participant-level splitting and temporal
// extrapolation of follow-up scans.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "volforecast/tensor.hpp"

namespace volf {

enum class VolumeIoErrorKind { BadMagic, DimOverflow, Truncated, OpenFailed, WriteFailed };

struct VolumeIoError : std::runtime_error {
  VolumeIoErrorKind kind;
  VolumeIoError(VolumeIoErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// 3D gray-matter-density grid. Row-major with x fastest:
// index = x + nx*(y + ny*z). Values are float32 in [0,1].
struct Volume {
  std::array<int, 3> dims{0, 0, 0};            // nx, ny, nz
  std::array<float, 3> voxel_size_mm{1, 1, 1};
  std::vector<float> data;
  std::vector<uint8_t> mask;  // empty or data.size() entries of 0/1

  int64_t numel() const { return static_cast<int64_t>(dims[0]) * dims[1] * dims[2]; }
  int64_t index(int x, int y, int z) const {
    return x + static_cast<int64_t>(dims[0]) * (y + static_cast<int64_t>(dims[1]) * z);
  }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }
  bool has_mask() const { return !mask.empty(); }

  void validate() const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
      throw std::invalid_argument("volume dims must be positive");
    if (static_cast<int64_t>(data.size()) != numel())
      throw std::invalid_argument("volume data length does not match dims");
    if (!mask.empty() && mask.size() != data.size())
      throw std::invalid_argument("volume mask length does not match dims");
    for (float v : data)
      if (!std::isfinite(v)) throw std::invalid_argument("volume contains non-finite values");
  }
};

struct LongitudinalPair {
  std::string participant_id;
  int t1 = 0;  // months
  Volume source;
  Volume target;  // at t1 + 24
};

struct CohortSplit {
  std::vector<std::string> train_ids, val_ids, test_ids;
};

enum class PairStyle { Big, Small };

// --- VOL1 file format --------------------------------------------------
// bytes 0-3   magic "VOL1"
// 3 x u32 LE  dims (nx, ny, nz)
// 3 x f32 LE  voxel size in mm
// u8          mask-present flag
// nx*ny*nz x f32 LE  densities
// [flag=1] nx*ny*nz x u8 mask bytes (0/1)

namespace detail {
template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(sizeof(T) == 4);
  // host is little-endian on every supported target
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace detail

inline void save_volume(const Volume& v, const std::string& path) {
  v.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw VolumeIoError(VolumeIoErrorKind::OpenFailed, "cannot open for writing: " + path);
  os.write("VOL1", 4);
  for (int d : v.dims) detail::write_le<uint32_t>(os, static_cast<uint32_t>(d));
  for (float s : v.voxel_size_mm) detail::write_le<float>(os, s);
  const uint8_t flag = v.has_mask() ? 1 : 0;
  os.write(reinterpret_cast<const char*>(&flag), 1);
  os.write(reinterpret_cast<const char*>(v.data.data()),
           static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  if (flag)
    os.write(reinterpret_cast<const char*>(v.mask.data()),
             static_cast<std::streamsize>(v.mask.size()));
  if (!os) throw VolumeIoError(VolumeIoErrorKind::WriteFailed, "write failed: " + path);
}

inline Volume load_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw VolumeIoError(VolumeIoErrorKind::OpenFailed, "cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VOL1", 4) != 0)
    throw VolumeIoError(VolumeIoErrorKind::BadMagic, "bad magic in " + path);
  Volume v;
  int64_t n = 1;
  for (int i = 0; i < 3; ++i) {
    const uint32_t d = detail::read_le<uint32_t>(is);
    if (d == 0 || d > (1u << 20)) throw VolumeIoError(VolumeIoErrorKind::DimOverflow, "bad dim in " + path);
    v.dims[i] = static_cast<int>(d);
    n *= d;
    if (n > (int64_t(1) << 32)) throw VolumeIoError(VolumeIoErrorKind::DimOverflow, "dim overflow in " + path);
  }
  for (int i = 0; i < 3; ++i) v.voxel_size_mm[i] = detail::read_le<float>(is);
  uint8_t flag = 0;
  is.read(reinterpret_cast<char*>(&flag), 1);
  if (!is) throw VolumeIoError(VolumeIoErrorKind::Truncated, "truncated header in " + path);
  v.data.resize(static_cast<size_t>(n));
  is.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (is.gcount() != static_cast<std::streamsize>(n * sizeof(float)))
    throw VolumeIoError(VolumeIoErrorKind::Truncated, "truncated payload in " + path);
  if (flag) {
    v.mask.resize(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(v.mask.data()), static_cast<std::streamsize>(n));
    if (is.gcount() != static_cast<std::streamsize>(n))
      throw VolumeIoError(VolumeIoErrorKind::Truncated, "truncated mask in " + path);
  }
  return v;
}

// --- cohort manifest: CSV with columns participant_id,month,path --------

struct ManifestEntry {
  std::string participant_id;
  int month = 0;
  std::string path;
};

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest: " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("participant_id", 0) == 0) continue;  // header
    }
    std::stringstream ss(line);
    ManifestEntry e;
    std::string month_s;
    if (!std::getline(ss, e.participant_id, ',') || !std::getline(ss, month_s, ',') ||
        !std::getline(ss, e.path))
      throw std::runtime_error("malformed manifest line: " + line);
    e.month = std::stoi(month_s);
    entries.push_back(std::move(e));
  }
  return entries;
}

inline void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest: " + path);
  os << "participant_id,month,path\n";
  for (const auto& e : entries) os << e.participant_id << ',' << e.month << ',' << e.path << '\n';
}

// --- mask, pairing, split, extrapolation ---------------------------------

// In-mask iff the mean density across training baselines exceeds threshold.
inline std::vector<uint8_t> compute_mask(const std::vector<Volume>& training_baselines,
                                         double threshold) {
  if (training_baselines.empty()) throw std::invalid_argument("compute_mask: empty volume list");
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("compute_mask: threshold must be in (0,1)");
  const auto dims = training_baselines.front().dims;
  const int64_t n = training_baselines.front().numel();
  std::vector<double> acc(static_cast<size_t>(n), 0.0);
  for (const auto& v : training_baselines) {
    if (v.dims != dims) throw std::invalid_argument("compute_mask: dim mismatch");
    for (int64_t i = 0; i < n; ++i) acc[i] += v.data[i];
  }
  std::vector<uint8_t> mask(static_cast<size_t>(n));
  const double inv = 1.0 / static_cast<double>(training_baselines.size());
  for (int64_t i = 0; i < n; ++i) mask[i] = acc[i] * inv > threshold ? 1 : 0;
  return mask;
}

// Emits every source/target pair separated by exactly 24 months.
// Big: all starting timepoints; Small: baseline (month 0) to month 24 only.
// Output is sorted by (participant, t1).
inline std::vector<LongitudinalPair> build_pairs(
    const std::map<std::string, std::vector<std::pair<int, Volume>>>& scans, PairStyle style) {
  std::vector<LongitudinalPair> pairs;
  for (const auto& [id, visits] : scans) {
    std::map<int, const Volume*> by_month;
    for (const auto& [month, vol] : visits) {
      if (month < 0) throw std::invalid_argument("build_pairs: negative month");
      if (!by_month.emplace(month, &vol).second)
        throw std::invalid_argument("build_pairs: duplicate (participant, month)");
    }
    for (const auto& [m, vol] : by_month) {
      if (style == PairStyle::Small && m != 0) continue;
      auto it = by_month.find(m + 24);
      if (it == by_month.end()) continue;
      LongitudinalPair p;
      p.participant_id = id;
      p.t1 = m;
      p.source = *vol;
      p.target = *it->second;
      if (p.source.dims != p.target.dims)
        throw std::invalid_argument("build_pairs: source/target dim mismatch for " + id);
      pairs.push_back(std::move(p));
    }
  }
  return pairs;  // std::map iteration already yields (participant, t1) order
}

// Deterministic seeded partition into train/val/test by participant.
inline CohortSplit split_by_participant(std::vector<std::string> ids, int n_val, int n_test,
                                        uint64_t seed) {
  if (n_val < 0 || n_test < 0 || n_val + n_test >= static_cast<int>(ids.size()))
    throw std::invalid_argument("split_by_participant: insufficient participants");
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  for (size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng() % i]);
  CohortSplit split;
  split.val_ids.assign(ids.begin(), ids.begin() + n_val);
  split.test_ids.assign(ids.begin() + n_val, ids.begin() + n_val + n_test);
  split.train_ids.assign(ids.begin() + n_val + n_test, ids.end());
  std::sort(split.val_ids.begin(), split.val_ids.end());
  std::sort(split.test_ids.begin(), split.test_ids.end());
  std::sort(split.train_ids.begin(), split.train_ids.end());
  return split;
}

// Linear per-voxel extrapolation of a follow-up scan to a later month,
// clamped to the density range [0,1].
inline Volume extrapolate_follow_up(const Volume& x0, const Volume& x_follow, int from_month = 18,
                                    int to_month = 24) {
  if (x0.dims != x_follow.dims) throw std::invalid_argument("extrapolate: dim mismatch");
  if (from_month <= 0) throw std::invalid_argument("extrapolate: from_month must be positive");
  Volume out = x0;
  const double f = static_cast<double>(to_month) / static_cast<double>(from_month);
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double v = x0.data[i] + f * (static_cast<double>(x_follow.data[i]) - x0.data[i]);
    out.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

// --- tensor bridge --------------------------------------------------------
// Volume (x fastest) maps onto [1,1,nz,ny,nx]; memory order is identical.

template <typename T = float>
Tensor<T> volume_to_tensor(const Volume& v, bool requires_grad = false) {
  std::vector<T> data(v.data.begin(), v.data.end());
  return Tensor<T>({1, 1, v.dims[2], v.dims[1], v.dims[0]}, std::move(data), requires_grad);
}

template <typename T = float>
Volume tensor_to_volume(const Tensor<T>& t, const Volume& like) {
  if (t.numel() != like.numel()) throw std::invalid_argument("tensor_to_volume: size mismatch");
  Volume out;
  out.dims = like.dims;
  out.voxel_size_mm = like.voxel_size_mm;
  out.data.assign(t.values().begin(), t.values().end());
  return out;
}

}  // namespace volf
