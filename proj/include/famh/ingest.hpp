#pragma once
// Recording types, CSV/binary IO, windowing, patchification, label handling,
// the synthetic generator, and batch assembly.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "famh/autodiff.hpp"
#include "famh/common.hpp"

namespace famh::ingest {

using Sample = std::array<float, 3>;
using Segment = std::pair<size_t, size_t>;  // [start, end)

struct RawRecording {
  std::string id;
  double sample_rate_hz = 0.0;
  std::vector<Sample> samples;
};

struct Recording30 {
  std::string id;
  std::vector<Sample> samples;  // 30 Hz
  std::vector<Segment> wear_segments;
};

struct Window {
  int patch_len = 300;
  int patch_count = 300;
  std::vector<float> data;  // 3 rows x (patch_count * patch_len), row-major
  std::string source_id;
  size_t start_index = 0;

  size_t samples() const { return static_cast<size_t>(patch_len) * patch_count; }
};

struct WindowGeometry {
  int patch_len = 300;    // 10 s at 30 Hz
  int patch_count = 300;  // 50 min per window

  size_t window_samples() const {
    return static_cast<size_t>(patch_len) * static_cast<size_t>(patch_count);
  }
  // 50-minute windows, 5 minutes of overlap
  size_t pretrain_stride() const { return window_samples() * 9 / 10; }
  // 50-minute windows, 45 minutes of overlap
  size_t finetune_stride() const { return window_samples() / 10; }
};

// ---- recording IO ----

RawRecording load_recording_csv(const std::filesystem::path& path);
void save_recording_csv(const RawRecording& rec, const std::filesystem::path& path);

// magic FAMH, version u16=1, sample_rate f32, n u64, then n x 3 f32 (x,y,z)
RawRecording load_recording_bin(const std::filesystem::path& path);
void save_recording_bin(const RawRecording& rec, const std::filesystem::path& path);

void save_recording30_bin(const Recording30& rec, const std::filesystem::path& path);
Recording30 load_recording30_bin(const std::filesystem::path& path);

// ---- windowing ----

Window make_window(const Recording30& rec, size_t start, const WindowGeometry& geo);

// Window start offsets for one wear segment: random origin, then fixed
// stride. Short segments yield as many stride placements as fit and are
// padded back to `count` by resampling with replacement.
std::vector<size_t> pretrain_offsets(Segment segment, const WindowGeometry& geo, int count,
                                     Rng& rng);

std::vector<Window> window_pretrain(const Recording30& rec, Segment segment,
                                    const WindowGeometry& geo, int count, uint64_t seed);

// Dense stride-5-minute placements per wear segment, last window aligned to
// the segment end when a remainder exists.
std::vector<size_t> finetune_offsets(Segment segment, const WindowGeometry& geo);
std::vector<Window> window_finetune(const Recording30& rec, const WindowGeometry& geo);

// ---- patchification ----

// L rows of 3*patch_len values, axis-major within a row.
ad::Tensor<float> patchify(const Window& w);
ad::Tensor<float> patchify_signal(const std::vector<float>& data, int patch_len);
std::vector<float> unpatchify(const ad::Tensor<float>& patches, int patch_len);

// ---- labels ----

struct LabelInterval {
  double start_s = 0.0;
  double end_s = 0.0;  // half-open
  std::string label;
};

struct LabelTrack {
  int n_classes = 0;
  std::vector<int16_t> labels;  // per 30 Hz sample; value n_classes marks missing

  int missing() const { return n_classes; }
};

LabelTrack labels_from_intervals(const std::vector<LabelInterval>& intervals, size_t n_samples,
                                 const std::vector<std::string>& class_names);

std::vector<LabelInterval> load_labels_csv(const std::filesystem::path& path);
void save_labels_csv(const std::vector<LabelInterval>& intervals,
                     const std::filesystem::path& path);

// Majority vote over each patch's samples; ties and missing-majority map to
// the missing index.
std::vector<int> map_labels(const LabelTrack& track, const Window& w);

// ---- synthetic recordings ----

struct SyntheticClass {
  std::string name;
  double fundamental_hz = 0.0;
  std::vector<double> harmonics_g;  // amplitude per harmonic of the fundamental
  double noise_std_g = 0.02;
  double drift_rate = 0.01;  // gravity orientation random-walk, rad/sqrt(s)
};

struct SyntheticConfig {
  std::vector<SyntheticClass> classes;
  std::vector<std::vector<double>> transition;  // row-stochastic
  std::vector<double> dwell_mean_s;
  uint64_t seed = 0;

  void validate() const;
};

struct SyntheticRecording {
  RawRecording raw;
  std::vector<LabelInterval> intervals;
  LabelTrack track30;  // aligned to the 30 Hz grid
};

// Markov class sequence with whole-second dwells; per-class signal is a
// drifting gravity vector plus a harmonic series plus white noise.
SyntheticRecording generate_synthetic(const SyntheticConfig& cfg, double duration_s,
                                      double rate_hz);

// ---- batch assembly ----

struct BatchPlan {
  struct Entry {
    std::string recording_id;
    std::vector<size_t> offsets;
  };
  std::vector<Entry> entries;

  size_t window_count() const {
    size_t n = 0;
    for (const auto& e : entries) n += e.offsets.size();
    return n;
  }
};

class RecordingStore {
 public:
  void add(Recording30 rec, std::optional<LabelTrack> labels = std::nullopt);
  const Recording30& get(const std::string& id) const;
  const LabelTrack* labels(const std::string& id) const;
  std::vector<std::string> ids() const;
  size_t size() const { return recordings_.size(); }

 private:
  std::map<std::string, Recording30> recordings_;
  std::map<std::string, LabelTrack> labels_;
};

std::vector<Window> assemble_batch(const BatchPlan& plan, const RecordingStore& store,
                                   const WindowGeometry& geo);

// One plan entry per recording: a random eligible wear segment, then
// pretrain_offsets within it.
BatchPlan make_pretrain_plan(const RecordingStore& store, const std::vector<std::string>& ids,
                             const WindowGeometry& geo, int windows_per_recording, uint64_t seed);

}  // namespace famh::ingest
