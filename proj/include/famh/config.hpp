#pragma once
// Run configuration: one JSON document mirroring every module config, with a
// strict schema (unknown keys rejected) and defaults that match the reference
// training setup. The digest of the canonical serialization is stamped into
// checkpoints and output files.

#include <filesystem>
#include <string>
#include <vector>

#include "famh/ingest.hpp"
#include "famh/model.hpp"
#include "famh/preprocess.hpp"
#include "famh/spectral.hpp"
#include "famh/train.hpp"

namespace famh::config {

struct DataPaths {
  std::string raw_dir = "data/raw";
  std::string processed_dir = "data/processed";
  std::string checkpoint = "out/pretrain.famc";
  std::string out_dir = "out";
};

struct ScheduleSettings {
  double base_lr = 1e-3;
  int warmup_epochs = 1;
  int restart_period_epochs = 1;
  double eta_min = 0.0;
  int pretrain_epochs = 20;
  int finetune_epochs = 70;
};

struct SynthSettings {
  int n_recordings = 8;
  double duration_s = 7200.0;
  double rate_hz = 100.0;
  ingest::SyntheticConfig generator;  // seed field unused; seeds.synthesis applies
};

struct RunConfig {
  train::Seeds seeds;
  DataPaths paths;
  train::DataOptions data;
  preprocess::PreprocessConfig preprocess;
  spectral::SpectralConfig spectral;
  model::ModelConfig model;
  spectral::LossWeights loss;
  double mask_rate = 0.6;
  ScheduleSettings schedule;
  SynthSettings synth;
  std::vector<std::string> class_names;
  int pca_components = 2;

  RunConfig();

  void validate() const;
  uint64_t digest() const;
  std::string to_json_string() const;  // canonical (sorted keys, 2-space indent)

  train::ScheduleConfig pretrain_schedule() const;
  train::ScheduleConfig finetune_schedule() const;
};

// Defaults overlaid with the file (when non-empty) and then with
// `--set key=value` overrides; unknown keys and type mismatches are rejected.
RunConfig load_config(const std::filesystem::path& file,
                      const std::vector<std::string>& overrides);

RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides);

}  // namespace famh::config
