// Training loop (seeded shuffling, early stopping on validation MSE,
// best-checkpoint saving) and test-set evaluation producing the full
// metrics report. Configs are JSON; every run writes run_record.json.
#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <random>

#include <json.hpp>

#include "volforecast/losses.hpp"
#include "volforecast/metrics.hpp"
#include "volforecast/models.hpp"
#include "volforecast/volume.hpp"

namespace volf {

struct TrainConfig {
  ModelSpec model;
  PairStyle dataset_style = PairStyle::Big;
  std::string data_dir;       // directory containing manifest.csv + volumes
  std::string output_dir;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  int batch_size = 1;         // fixed at 1
  int max_steps = 1000;
  int patience = 10;          // evaluations without improvement
  int eval_every = 100;       // steps
  int n_val = 40;
  int n_test = 140;
  uint64_t seed = 0;
  LossWeights loss_weights;   // applied to OdeUNet only
  double mask_threshold = 0.05;

  void validate() const {
    if (batch_size != 1) throw std::invalid_argument("config: batch_size is fixed at 1");
    if (max_steps > 0 && max_steps < eval_every)
      throw std::invalid_argument("config: max_steps must be >= eval_every");
    if (patience < 1) throw std::invalid_argument("config: patience must be >= 1");
  }
};

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  const std::string arch = j.value("arch", "unet");
  c.model.arch = arch_from_tag(arch);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.base_channels = m.value("base_channels", c.model.base_channels);
    c.model.depth = m.value("depth", c.model.depth);
    c.model.patch_size = m.value("patch_size", c.model.patch_size);
    c.model.embed_dim = m.value("embed_dim", c.model.embed_dim);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.transformer_layers = m.value("transformer_layers", c.model.transformer_layers);
    c.model.time_embed_dim = m.value("time_embed_dim", c.model.time_embed_dim);
    c.model.ode_steps = m.value("ode_steps", c.model.ode_steps);
  }
  const std::string style = j.value("dataset_style", "big");
  if (style == "big" || style == "Big")
    c.dataset_style = PairStyle::Big;
  else if (style == "small" || style == "Small")
    c.dataset_style = PairStyle::Small;
  else
    throw std::invalid_argument("config: dataset_style must be big|small");
  c.data_dir = j.at("data_dir").get<std::string>();
  c.output_dir = j.at("output_dir").get<std::string>();
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.patience = j.value("patience", c.patience);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.n_val = j.value("n_val", c.n_val);
  c.n_test = j.value("n_test", c.n_test);
  c.seed = j.value("seed", static_cast<uint64_t>(0));
  c.loss_weights.lambda_feat = j.value("lambda_feat", c.loss_weights.lambda_feat);
  c.loss_weights.lambda_ode = j.value("lambda_ode", c.loss_weights.lambda_ode);
  c.mask_threshold = j.value("mask_threshold", c.mask_threshold);
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["arch"] = arch_tag(c.model.arch);
  j["model"] = {{"base_channels", c.model.base_channels},
                {"depth", c.model.depth},
                {"patch_size", c.model.patch_size},
                {"embed_dim", c.model.embed_dim},
                {"heads", c.model.heads},
                {"transformer_layers", c.model.transformer_layers},
                {"time_embed_dim", c.model.time_embed_dim},
                {"ode_steps", c.model.ode_steps}};
  j["dataset_style"] = c.dataset_style == PairStyle::Big ? "big" : "small";
  j["data_dir"] = c.data_dir;
  j["output_dir"] = c.output_dir;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["max_steps"] = c.max_steps;
  j["patience"] = c.patience;
  j["eval_every"] = c.eval_every;
  j["n_val"] = c.n_val;
  j["n_test"] = c.n_test;
  j["seed"] = c.seed;
  j["lambda_feat"] = c.loss_weights.lambda_feat;
  j["lambda_ode"] = c.loss_weights.lambda_ode;
  j["mask_threshold"] = c.mask_threshold;
  return j;
}

using CohortScans = std::map<std::string, std::vector<std::pair<int, Volume>>>;

inline CohortScans load_cohort_scans(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const fs::path base = fs::path(manifest_path).parent_path();
  CohortScans scans;
  for (const auto& e : load_manifest(manifest_path)) {
    fs::path p = e.path;
    if (p.is_relative()) p = base / p;
    scans[e.participant_id].emplace_back(e.month, load_volume(p.string()));
  }
  for (auto& [id, visits] : scans)
    std::sort(visits.begin(), visits.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
  return scans;
}

struct TrainAbortError : std::runtime_error {
  int step_index;
  TrainAbortError(int step, const std::string& msg) : std::runtime_error(msg), step_index(step) {}
};

struct TrainResult {
  std::string checkpoint_path;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_step = 0;
  int steps_run = 0;
  int evaluations = 0;
  double wall_seconds = 0;
};

namespace detail {

inline double validation_mse(Model<float>& model, const std::vector<LongitudinalPair>& val_pairs,
                             const std::vector<uint8_t>& mask) {
  double acc = 0;
  for (const auto& p : val_pairs) {
    Volume pred = predict(model, p.source, p.t1, 24);
    acc += masked_mse(pred, p.target, mask);
  }
  return acc / static_cast<double>(val_pairs.size());
}

inline void assert_disjoint_split(const CohortSplit& s) {
  std::set<std::string> seen;
  for (const auto* ids : {&s.train_ids, &s.val_ids, &s.test_ids})
    for (const auto& id : *ids)
      if (!seen.insert(id).second)
        throw std::runtime_error("leakage guard: participant '" + id + "' appears in two splits");
}

}  // namespace detail

// Splits the cohort, trains with early stopping, saves the best-validation
// checkpoint plus mask.vol, test_manifest.csv, train_log.csv and
// run_record.json under config.output_dir.
inline TrainResult train(const TrainConfig& config) {
  namespace fs = std::filesystem;
  config.validate();
  const auto t_start = std::chrono::steady_clock::now();
  fs::create_directories(config.output_dir);

  CohortScans scans = load_cohort_scans((fs::path(config.data_dir) / "manifest.csv").string());
  std::vector<std::string> ids;
  for (const auto& [id, _] : scans) ids.push_back(id);
  CohortSplit split = split_by_participant(ids, config.n_val, config.n_test, config.seed);
  detail::assert_disjoint_split(split);

  auto subset = [&](const std::vector<std::string>& sel) {
    CohortScans out;
    for (const auto& id : sel) out[id] = scans.at(id);
    return out;
  };
  CohortScans train_scans = subset(split.train_ids);
  std::vector<LongitudinalPair> train_pairs = build_pairs(train_scans, config.dataset_style);
  // validation and test always use baseline-to-month-24 pairs
  std::vector<LongitudinalPair> val_pairs = build_pairs(subset(split.val_ids), PairStyle::Small);
  if (train_pairs.empty()) throw std::runtime_error("train: empty training set");

  std::vector<Volume> train_baselines;
  for (const auto& id : split.train_ids) train_baselines.push_back(scans.at(id).front().second);
  std::vector<uint8_t> mask = compute_mask(train_baselines, config.mask_threshold);
  {
    Volume mask_vol = train_baselines.front();
    for (size_t i = 0; i < mask.size(); ++i) mask_vol.data[i] = mask[i] ? 1.f : 0.f;
    mask_vol.mask = mask;
    save_volume(mask_vol, (fs::path(config.output_dir) / "mask.vol").string());
  }
  {
    // test manifest for the evaluate stage
    std::vector<ManifestEntry> test_entries;
    std::set<std::string> test_set(split.test_ids.begin(), split.test_ids.end());
    for (const auto& e : load_manifest((fs::path(config.data_dir) / "manifest.csv").string()))
      if (test_set.count(e.participant_id)) {
        ManifestEntry abs = e;
        fs::path p = e.path;
        if (p.is_relative()) p = fs::path(config.data_dir) / p;
        abs.path = fs::absolute(p).string();
        test_entries.push_back(abs);
      }
    save_manifest(test_entries, (fs::path(config.output_dir) / "test_manifest.csv").string());
  }

  const Volume& ref = train_pairs.front().source;
  const std::array<int, 3> dims_dhw{ref.dims[2], ref.dims[1], ref.dims[0]};
  auto model = build_model<float>(config.model, dims_dhw, config.seed);
  const LossWeights weights =
      config.model.arch == Arch::OdeUNet ? config.loss_weights : LossWeights{0.0, 0.0};
  AdamOptions adam{config.lr, 0.9, 0.999, 1e-8, config.weight_decay};

  TrainResult result;
  result.checkpoint_path = (fs::path(config.output_dir) / "best.ckpt").string();
  std::ofstream log((fs::path(config.output_dir) / "train_log.csv").string());
  log << "step,mse,feat,ode,total\n";

  std::vector<size_t> order(train_pairs.size());
  int stale_evals = 0;
  bool stopped_early = false;
  for (int step = 1; step <= config.max_steps; ++step) {
    const size_t pos = static_cast<size_t>(step - 1) % train_pairs.size();
    if (pos == 0) {
      // one permutation per epoch, derived from (seed, epoch)
      const uint64_t epoch = static_cast<uint64_t>(step - 1) / train_pairs.size();
      std::iota(order.begin(), order.end(), size_t{0});
      std::mt19937_64 rng(config.seed * 0x9e3779b97f4a7c15ull + epoch + 1);
      for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    }
    const LongitudinalPair& pair = train_pairs[order[pos]];
    Tensor<float> x = volume_to_tensor<float>(pair.source);
    Tensor<float> y = volume_to_tensor<float>(pair.target);
    Tensor<float> pred = model->forward(x, pair.t1, 24.0);
    auto loss = total_loss(pred, y, *model, x, pair.t1, weights);
    const float total = loss.total.item();
    if (!std::isfinite(total))
      throw TrainAbortError(step, "non-finite loss at step " + std::to_string(step));
    log << step << ',' << loss.mse << ',' << loss.feat << ',' << loss.ode << ',' << total << '\n';
    loss.total.backward();
    adam_step(model->parameters(), adam);
    zero_grads(model->parameters());

    if (step % config.eval_every == 0 && !val_pairs.empty()) {
      const double val = detail::validation_mse(*model, val_pairs, mask);
      ++result.evaluations;
      if (val < result.best_val_loss) {
        result.best_val_loss = val;
        result.best_step = step;
        stale_evals = 0;
        save_checkpoint(*model, result.checkpoint_path, /*with_optimizer_state=*/true);
      } else if (++stale_evals >= config.patience) {
        result.steps_run = step;
        stopped_early = true;
        break;
      }
    }
    result.steps_run = step;
  }
  (void)stopped_early;
  if (result.best_step == 0) {
    // no evaluation improved (or none ran): persist the current parameters
    save_checkpoint(*model, result.checkpoint_path, /*with_optimizer_state=*/true);
    if (!val_pairs.empty() && config.max_steps > 0)
      result.best_val_loss = detail::validation_mse(*model, val_pairs, mask);
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  nlohmann::json record;
  record["config"] = train_config_to_json(config);
  record["revision"] = "unversioned";
  record["best_val_loss"] = result.best_val_loss;
  record["best_step"] = result.best_step;
  record["steps_run"] = result.steps_run;
  record["evaluations"] = result.evaluations;
  record["wall_seconds"] = result.wall_seconds;
  record["checkpoint"] = result.checkpoint_path;
  record["mask"] = (fs::path(config.output_dir) / "mask.vol").string();
  record["test_manifest"] = (fs::path(config.output_dir) / "test_manifest.csv").string();
  std::ofstream rec((fs::path(config.output_dir) / "run_record.json").string());
  rec << record.dump(1) << '\n';
  return result;
}

// Evaluation of an arbitrary predictor over baseline-to-month-24 pairs.
inline MetricsReport evaluate_predictor(
    const std::function<Volume(const LongitudinalPair&)>& predictor,
    const std::vector<LongitudinalPair>& pairs, const std::vector<uint8_t>& mask,
    const std::string& model_label, const std::string& train_label,
    const std::string& test_label) {
  if (pairs.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::vector<Volume> preds;
  preds.reserve(pairs.size());
  for (const auto& p : pairs) preds.push_back(predictor(p));
  return compute_metrics_report(preds, pairs, mask, model_label, train_label, test_label);
}

// Loads a checkpoint, predicts every test pair and writes the report CSV,
// per-participant CSV, voxel maps and histograms next to `report_path`.
inline MetricsReport evaluate(const std::string& checkpoint_path,
                              const std::string& test_manifest_path,
                              const std::vector<uint8_t>& mask, const std::string& report_path,
                              const std::string& model_label = "", const std::string& train_label = "train",
                              const std::string& test_label = "test", ModelSpec spec_hint = {}) {
  namespace fs = std::filesystem;
  CohortScans scans = load_cohort_scans(test_manifest_path);
  std::vector<LongitudinalPair> pairs = build_pairs(scans, PairStyle::Small);
  if (pairs.empty()) throw std::runtime_error("evaluate: empty test set");
  const Volume& ref = pairs.front().source;
  if (mask.size() != ref.data.size()) throw std::runtime_error("evaluate: mask/volume dim mismatch");
  auto model = load_model(checkpoint_path, {ref.dims[2], ref.dims[1], ref.dims[0]}, spec_hint);
  MetricsReport rep = evaluate_predictor(
      [&](const LongitudinalPair& p) { return predict(*model, p.source, p.t1, 24); }, pairs, mask,
      model_label.empty() ? arch_tag(model->spec.arch) : model_label, train_label, test_label);
  save_report_csv(rep, report_path);
  const fs::path base = fs::path(report_path).parent_path();
  const std::string stem = fs::path(report_path).stem().string();
  save_per_participant_csv(rep, (base / (stem + "_participants.csv")).string());
  save_volume(rep.error_map_vol, (base / (stem + "_error_map.vol")).string());
  if (rep.r_map_vol.numel() > 0)
    save_volume(rep.r_map_vol, (base / (stem + "_rmap.vol")).string());
  if (!rep.intensity_r_hist.empty())
    save_histogram_csv(rep.intensity_r_hist, (base / (stem + "_hist_intensity_r.csv")).string());
  if (!rep.delta_r_hist.empty())
    save_histogram_csv(rep.delta_r_hist, (base / (stem + "_hist_delta_r.csv")).string());
  return rep;
}

// Reads a mask from a VOL1 file: the stored mask when present, otherwise
// data > 0.5.
inline std::vector<uint8_t> load_mask_volume(const std::string& path) {
  Volume v = load_volume(path);
  if (v.has_mask()) return v.mask;
  std::vector<uint8_t> mask(v.data.size());
  for (size_t i = 0; i < mask.size(); ++i) mask[i] = v.data[i] > 0.5f ? 1 : 0;
  return mask;
}

}  // namespace volf
