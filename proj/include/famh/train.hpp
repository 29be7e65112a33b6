#pragma once
// Optimizer, learning-rate schedules, class weighting, checkpoints, and the
// pretraining / finetuning loops.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "famh/autodiff.hpp"
#include "famh/common.hpp"
#include "famh/ingest.hpp"
#include "famh/model.hpp"
#include "famh/spectral.hpp"

namespace famh::train {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  uint64_t step = 0;
  std::vector<ad::Tensor<T>> m, v;

  template <class Params>
  static AdamState like(Params& params) {
    AdamState st;
    model::for_each_tensor(params, [&st](const std::string&, const ad::Tensor<T>& t) {
      st.m.emplace_back(t.rows, t.cols);
      st.v.emplace_back(t.rows, t.cols);
    });
    return st;
  }
};

// Standard bias-corrected Adam over an ordered parameter list.
template <class T>
void adam_step(std::vector<ad::Tensor<T>*>& params, const std::vector<ad::Tensor<T>>& grads,
               AdamState<T>& state, double lr, const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    raise(Err::shape_mismatch, "optimizer state does not match parameter list");
  ++state.step;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T corr1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T corr2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  for (size_t i = 0; i < params.size(); ++i) {
    ad::Tensor<T>& p = *params[i];
    const ad::Tensor<T>& g = grads[i];
    if (!p.same_shape(g) || !p.same_shape(state.m[i]))
      raise(Err::shape_mismatch, "gradient shape does not match parameter");
    ad::Tensor<T>& m = state.m[i];
    ad::Tensor<T>& v = state.v[i];
    for (size_t j = 0; j < p.size(); ++j) {
      m.v[j] = b1 * m.v[j] + (T(1) - b1) * g.v[j];
      v.v[j] = b2 * v.v[j] + (T(1) - b2) * g.v[j] * g.v[j];
      T mhat = m.v[j] / corr1;
      T vhat = v.v[j] / corr2;
      p.v[j] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(cfg.eps));
    }
  }
}

enum class ScheduleMode { pretrain_cosine_restart, finetune_flat };

struct ScheduleConfig {
  double base_lr = 1e-3;
  int warmup_epochs = 1;
  int restart_period_epochs = 1;
  double eta_min = 0.0;
  ScheduleMode mode = ScheduleMode::pretrain_cosine_restart;

  void validate() const {
    // zero is allowed as a no-update diagnostic
    if (base_lr < 0) raise(Err::config_error, "schedule.base_lr must be non-negative");
    if (eta_min < 0) raise(Err::config_error, "schedule.eta_min must be non-negative");
    if (warmup_epochs < 0 || restart_period_epochs < 1)
      raise(Err::config_error, "schedule epochs must be positive");
  }
};

// Linear warmup over the first epoch, then cosine annealing restarting at the
// base rate every period. Finetune mode is a flat base rate.
double lr_at(uint64_t step, uint64_t steps_per_epoch, const ScheduleConfig& cfg);

// Inverse-prevalence weights normalized to mean 1 over the classes present;
// absent classes get weight 0.
std::vector<double> class_weights(std::span<const int> labels, int n_classes, int missing);

// Pure value of the weighted cross-entropy (mean over rows whose label is not
// `missing`).
template <class T>
T weighted_ce(const ad::Tensor<T>& logits, const std::vector<int>& labels,
              const std::vector<T>& class_w, int missing) {
  ad::Tape<T> tape;
  int node = tape.ce_loss(tape.leaf(logits), labels, class_w, missing);
  return tape.value(node).v[0];
}

// ---- checkpoints ----
// magic FAMC, version u16=1, config digest u64, step u64, tensor count u32,
// then records of (name u32+bytes, rank u32=2, rows u64, cols u64, f32 data).
// Optimizer moments are appended with the same scheme under adam.m./adam.v.

void save_checkpoint(const model::MaeParams<float>& params, const AdamState<float>* opt,
                     uint64_t step, uint64_t config_digest, const std::filesystem::path& path);

struct LoadedCheckpoint {
  uint64_t config_digest = 0;
  uint64_t step = 0;
  std::map<std::string, ad::Tensor<float>> tensors;

  bool has_optimizer_state() const;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Fills params (and optionally optimizer state) from a loaded checkpoint;
// every expected tensor must exist with the exact shape.
void restore_params(const LoadedCheckpoint& ck, model::MaeParams<float>& params,
                    AdamState<float>* opt);

// ---- training loops ----

struct Seeds {
  uint64_t masking = 1;
  uint64_t windowing = 2;
  uint64_t init = 3;
  uint64_t synthesis = 4;
};

struct DataOptions {
  int recordings_per_batch = 8;
  int windows_per_recording = 32;
  double pretrain_val_fraction = 0.1;   // split by recording id
  double finetune_val_fraction = 0.2;
  double pretrain_fraction = 1.0;       // nested subsets of the training ids
  double finetune_fraction = 1.0;
  int finetune_batch_windows = 256;
  int finetune_max_batches_per_epoch = 0;  // 0 = all
  int workers = 1;                          // prefetch threads
};

struct PretrainOptions {
  model::ModelConfig model;
  spectral::SpectralConfig spectral;
  spectral::LossWeights loss;
  double mask_rate = 0.6;
  ScheduleConfig schedule;
  AdamConfig adam;
  DataOptions data;
  Seeds seeds;
  int epochs = 20;
  uint64_t config_digest = 0;
  std::filesystem::path checkpoint_out;  // saved every epoch when non-empty
  std::filesystem::path resume_from;     // optional
};

struct PretrainEpochLog {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_mse = 0.0, val_mse = 0.0;
  double train_lmm = 0.0, val_lmm = 0.0;
  double val_lmv = 0.0;
};

struct PretrainResult {
  model::MaeParams<float> params;
  AdamState<float> opt;
  std::vector<PretrainEpochLog> log;
  uint64_t step = 0;
  std::vector<std::string> train_ids, val_ids;
};

PretrainResult pretrain(const ingest::RecordingStore& store, const PretrainOptions& opt);

struct FinetuneOptions {
  model::ModelConfig model;
  ScheduleConfig schedule{1e-3, 0, 1, 0.0, ScheduleMode::finetune_flat};
  AdamConfig adam;
  DataOptions data;
  Seeds seeds;
  int epochs = 70;
  uint64_t config_digest = 0;
};

struct FinetuneEpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_ce = 0.0;
  double val_balanced_accuracy = 0.0;
  double val_kappa = 0.0;
};

struct FinetuneResult {
  model::MaeParams<float> params;  // encoder identical to the input, head trained
  std::vector<FinetuneEpochLog> log;
  std::vector<double> class_weights;
  std::vector<std::string> train_ids, val_ids;
};

// Linear probe: the encoder stays frozen (its outputs are computed once and
// cached), only the classification head is optimized.
FinetuneResult finetune(const ingest::RecordingStore& store,
                        const model::MaeParams<float>& pretrained, const FinetuneOptions& opt);

// Deterministic by-recording split: shuffled by seed, first ceil(f*N) ids
// become validation (at least one of each side when N >= 2).
std::pair<std::vector<std::string>, std::vector<std::string>> split_ids(
    std::vector<std::string> ids, double val_fraction, uint64_t seed);

}  // namespace famh::train
