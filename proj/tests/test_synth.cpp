#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "test_util.hpp"
#include "volforecast/metrics.hpp"
#include "volforecast/synth.hpp"
#include "volforecast/train.hpp"

using volf::CohortSpec;
using volf::ParticipantTruth;
using volf::Volume;
using testutil::ScratchDir;

namespace {

CohortSpec small_spec() {
  CohortSpec s;
  s.n_participants = 4;
  s.dims = {12, 12, 12};
  s.seed = 7;
  return s;
}

}  // namespace

TEST_CASE("cohort generation is byte-for-byte deterministic", "[synth]") {
  ScratchDir dir("synthdet");
  const CohortSpec spec = small_spec();
  auto a = volf::generate_cohort(spec, dir.str("a"));
  auto b = volf::generate_cohort(spec, dir.str("b"));
  REQUIRE(a.manifest.size() == b.manifest.size());
  CHECK(testutil::read_file_bytes(dir.str("a/manifest.csv")) ==
        testutil::read_file_bytes(dir.str("b/manifest.csv")));
  for (size_t i = 0; i < a.manifest.size(); ++i) {
    CHECK(a.manifest[i].path == b.manifest[i].path);
    CHECK(testutil::read_file_bytes(dir.str("a/" + a.manifest[i].path)) ==
          testutil::read_file_bytes(dir.str("b/" + b.manifest[i].path)));
  }
}

TEST_CASE("truth sidecar round trips through json", "[synth]") {
  ScratchDir dir("truths");
  const CohortSpec spec = small_spec();
  auto cohort = volf::generate_cohort(spec, dir.str("c"));
  auto loaded = volf::load_truths(dir.str("c/truth/truths.json"));
  REQUIRE(loaded.size() == cohort.truths.size());
  for (size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].id == cohort.truths[i].id);
    CHECK(loaded[i].rate == Catch::Approx(cohort.truths[i].rate).margin(1e-15));
    CHECK(loaded[i].rate_norm == Catch::Approx(cohort.truths[i].rate_norm).margin(1e-15));
    REQUIRE(loaded[i].blobs.size() == cohort.truths[i].blobs.size());
    CHECK(loaded[i].blobs[0].sigma ==
          Catch::Approx(cohort.truths[i].blobs[0].sigma).margin(1e-15));
  }
}

TEST_CASE("zero rate and zero noise freeze the volume in time", "[synth]") {
  CohortSpec spec = small_spec();
  spec.noise_sd = 0;
  spec.global_rate_mean = 0;
  spec.per_participant_rate_sd = 0;
  ParticipantTruth t = volf::make_participant_truth(spec, "p0000");
  CHECK(t.rate == 0.0);
  auto scans = volf::generate_participant_scans(spec, t);
  REQUIRE(scans.size() == 3);
  for (size_t s = 1; s < scans.size(); ++s)
    CHECK(scans[s].second.data == scans[0].second.data);
}

TEST_CASE("uniform rate field gives the closed-form decay", "[synth]") {
  // one blob of amplitude 0.5 at a grid point; with shape exponent 0 the
  // rate field is t.rate everywhere, so the center decays as 0.5 e^{-r m}
  CohortSpec spec;
  spec.n_participants = 2;
  spec.dims = {9, 9, 9};
  spec.noise_sd = 0;
  spec.rate_shape_exp = 0;
  ParticipantTruth t;
  t.id = "hand";
  t.dims = spec.dims;
  t.rate = 0.002;
  t.rate_shape_exp = 0;
  t.rate_norm = 1.0;
  t.blobs.push_back({4.0, 4.0, 4.0, 2.0, 0.5});
  spec.visit_months = {0, 24};
  auto scans = volf::generate_participant_scans(spec, t);
  REQUIRE(scans.size() == 2);
  const Volume& base = scans[0].second;
  const Volume& m24 = scans[1].second;
  CHECK(base.at(4, 4, 4) == Catch::Approx(0.5).margin(1e-6));
  CHECK(m24.at(4, 4, 4) == Catch::Approx(0.5 * std::exp(-0.048)).margin(1e-6));
  // off-center voxels shrink by the same factor
  CHECK(m24.at(2, 4, 4) ==
        Catch::Approx(base.at(2, 4, 4) * std::exp(-0.048)).margin(1e-6));
}

TEST_CASE("noiseless atrophy is monotone non-increasing per voxel", "[synth]") {
  CohortSpec spec = small_spec();
  spec.noise_sd = 0;
  ParticipantTruth t = volf::make_participant_truth(spec, "p0001");
  auto scans = volf::generate_participant_scans(spec, t);
  for (size_t s = 1; s < scans.size(); ++s)
    for (size_t v = 0; v < scans[s].second.data.size(); ++v)
      CHECK(scans[s].second.data[v] <= scans[s - 1].second.data[v]);
}

TEST_CASE("oracle reproduces the noiseless follow-up exactly", "[synth]") {
  CohortSpec spec = small_spec();
  spec.noise_sd = 0;
  spec.visit_months = {0, 24};
  ParticipantTruth t = volf::make_participant_truth(spec, "p0002");
  auto scans = volf::generate_participant_scans(spec, t);
  Volume pred = volf::oracle_predict(t, scans[0].second, t.id, 0, 24);
  CHECK(pred.data == scans[1].second.data);
  CHECK_THROWS_AS(volf::oracle_predict(t, scans[0].second, "wrong", 0, 24),
                  std::invalid_argument);
}

TEST_CASE("rate-shifted cohorts differ but keep an exact oracle", "[synth]") {
  CohortSpec spec = small_spec();
  spec.noise_sd = 0;
  spec.visit_months = {0, 24};
  CohortSpec shifted = spec;
  shifted.shift_rate_scale = 1.25;

  ParticipantTruth t0 = volf::make_participant_truth(spec, "p0000");
  ParticipantTruth t1 = volf::make_participant_truth(shifted, "p0000");
  CHECK(t1.rate > t0.rate);

  auto base_scans = volf::generate_participant_scans(spec, t0);
  auto shift_scans = volf::generate_participant_scans(shifted, t1);
  CHECK(base_scans[0].second.data == shift_scans[0].second.data);  // same baseline
  CHECK(base_scans[1].second.data != shift_scans[1].second.data);  // faster decay

  Volume pred = volf::oracle_predict(t1, shift_scans[0].second, t1.id, 0, 24);
  CHECK(pred.data == shift_scans[1].second.data);
}

TEST_CASE("oracle delta-pearson is high on a noisy cohort", "[synth]") {
  ScratchDir dir("oracle");
  CohortSpec spec;
  spec.n_participants = 20;
  spec.dims = {16, 16, 16};
  spec.seed = 42;
  auto cohort = volf::generate_cohort(spec, dir.str("c"));

  volf::CohortScans scans = volf::load_cohort_scans(dir.str("c/manifest.csv"));
  auto pairs = volf::build_pairs(scans, volf::PairStyle::Small);
  REQUIRE(pairs.size() == 20);

  std::vector<Volume> baselines;
  for (const auto& p : pairs) baselines.push_back(p.source);
  auto mask = volf::compute_mask(baselines, 0.05);

  std::vector<Volume> preds;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& truth = cohort.truths[i];
    REQUIRE(truth.id == pairs[i].participant_id);
    preds.push_back(volf::oracle_predict(truth, pairs[i].source, truth.id, 0, 24));
  }
  auto dp = volf::delta_pearson_global(preds, pairs, mask);
  REQUIRE(dp.mean_r.has_value());
  CHECK(*dp.mean_r >= 0.9);
}
