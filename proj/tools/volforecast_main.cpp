// volforecast: simulate / train / predict / evaluate / report front-end.
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "volforecast/metrics.hpp"
#include "volforecast/models.hpp"
#include "volforecast/synth.hpp"
#include "volforecast/train.hpp"
#include "volforecast/volume.hpp"

namespace {

// exit codes used by predict (and reused elsewhere):
// 2 = file/format error, 3 = shape or argument error, 4 = checkpoint error
constexpr int kExitFormat = 2;
constexpr int kExitShape = 3;
constexpr int kExitCheckpoint = 4;

volf::CohortSpec cohort_spec_from_json(const nlohmann::json& j) {
  volf::CohortSpec s;
  s.n_participants = j.value("n_participants", s.n_participants);
  if (j.contains("dims")) s.dims = j.at("dims").get<std::array<int, 3>>();
  s.n_blobs = j.value("n_blobs", s.n_blobs);
  if (j.contains("blob_radius_range"))
    s.blob_radius_range = j.at("blob_radius_range").get<std::array<double, 2>>();
  s.per_participant_rate_sd = j.value("per_participant_rate_sd", s.per_participant_rate_sd);
  s.global_rate_mean = j.value("global_rate_mean", s.global_rate_mean);
  s.noise_sd = j.value("noise_sd", s.noise_sd);
  if (j.contains("visit_months")) s.visit_months = j.at("visit_months").get<std::vector<int>>();
  s.rate_shape_exp = j.value("rate_shape_exp", s.rate_shape_exp);
  s.shift_rate_scale = j.value("shift_rate_scale", s.shift_rate_scale);
  s.seed = j.value("seed", s.seed);
  return s;
}

nlohmann::json load_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  is >> j;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Longitudinal volumetric forecasting"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic atrophy cohort");
  std::string sim_spec, sim_out;
  sim->add_option("--spec", sim_spec, "Cohort spec JSON")->required();
  sim->add_option("--out", sim_out, "Output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_config;
  tr->add_option("--config", tr_config, "Training config JSON")->required();

  // predict
  auto* pr = app.add_subcommand("predict", "Predict a follow-up volume");
  std::string pr_ckpt, pr_in, pr_out;
  int pr_t1 = 0, pr_horizon = 24;
  pr->add_option("--ckpt", pr_ckpt)->required();
  pr->add_option("--in", pr_in)->required();
  pr->add_option("--t1", pr_t1);
  pr->add_option("--horizon", pr_horizon);
  pr->add_option("--out", pr_out)->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on a test manifest");
  std::string ev_ckpt, ev_manifest, ev_mask, ev_report;
  std::string ev_model_label, ev_train_label = "train", ev_test_label = "test";
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--mask", ev_mask)->required();
  ev->add_option("--report", ev_report)->required();
  ev->add_option("--model-label", ev_model_label);
  ev->add_option("--train-label", ev_train_label);
  ev->add_option("--test-label", ev_test_label);

  // report
  auto* rp = app.add_subcommand("report", "Merge run reports into one comparison table");
  std::vector<std::string> rp_inputs;
  std::string rp_out;
  rp->add_option("--inputs", rp_inputs)->required()->expected(-1);
  rp->add_option("--out", rp_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim) {
      volf::CohortSpec spec = cohort_spec_from_json(load_json(sim_spec));
      volf::generate_cohort(spec, sim_out);
      return 0;
    }
    if (*tr) {
      volf::TrainConfig config = volf::train_config_from_json(load_json(tr_config));
      volf::TrainResult r = volf::train(config);
      std::cout << "best_val_loss=" << volf::format_double(r.best_val_loss)
                << " best_step=" << r.best_step << " steps=" << r.steps_run << "\n";
      return 0;
    }
    if (*pr) {
      if (pr_horizon < 0) {
        std::cerr << "predict: horizon must be non-negative\n";
        return kExitShape;
      }
      volf::Volume in;
      try {
        in = volf::load_volume(pr_in);
      } catch (const volf::VolumeIoError& e) {
        std::cerr << "predict: " << e.what() << "\n";
        return kExitFormat;
      }
      std::unique_ptr<volf::Model<float>> model;
      try {
        model = volf::load_model(pr_ckpt, {in.dims[2], in.dims[1], in.dims[0]});
      } catch (const volf::CheckpointError& e) {
        std::cerr << "predict: " << e.what() << "\n";
        return kExitCheckpoint;
      } catch (const std::invalid_argument& e) {
        std::cerr << "predict: " << e.what() << "\n";
        return kExitShape;
      }
      volf::Volume out = volf::predict(*model, in, pr_t1, pr_horizon);
      volf::save_volume(out, pr_out);
      return 0;
    }
    if (*ev) {
      std::vector<uint8_t> mask = volf::load_mask_volume(ev_mask);
      volf::evaluate(ev_ckpt, ev_manifest, mask, ev_report, ev_model_label, ev_train_label,
                     ev_test_label);
      return 0;
    }
    if (*rp) {
      volf::merge_report_csvs(rp_inputs, rp_out);
      return 0;
    }
  } catch (const volf::VolumeIoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const volf::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitShape;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
