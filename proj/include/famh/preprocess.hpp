#pragma once
// Low-pass filtering + resampling to 30 Hz, stationary and non-wear
// detection, and unit-sphere gain/offset autocalibration.

#include <array>
#include <cstdint>
#include <vector>

#include "famh/common.hpp"
#include "famh/ingest.hpp"

namespace famh::preprocess {

struct PreprocessConfig {
  double cutoff_hz = 15.0;
  double target_rate_hz = 30.0;
  double stationary_window_s = 10.0;
  double stationary_threshold_g = 0.013;
  double nonwear_min_minutes = 90.0;
  double min_wear_hours_pretrain = 24.0;
  double min_wear_hours_finetune = 1.0;
  int calib_max_iter = 1000;
  double calib_tol = 1e-9;
  double calib_coverage_g = 0.3;
  int calib_min_points = 10;

  void validate() const {
    if (!(cutoff_hz > 0) || !(target_rate_hz > 0))
      raise(Err::config_error, "preprocess rates must be positive");
    if (cutoff_hz > target_rate_hz / 2)
      raise(Err::config_error, "preprocess.cutoff_hz must not exceed target Nyquist");
    if (!(stationary_window_s > 0) || !(stationary_threshold_g > 0) ||
        !(nonwear_min_minutes > 0))
      raise(Err::config_error, "preprocess thresholds must be positive");
  }
};

// Zero-phase 4th-order Butterworth low pass (applied forward and backward),
// then linear interpolation onto the uniform target grid.
std::vector<ingest::Sample> lowpass_resample(const ingest::RawRecording& rec,
                                             const PreprocessConfig& cfg);

// Per-sample flag: centered moving std below threshold on all three axes.
// Windows shrink at the edges.
std::vector<uint8_t> stationary_mask(const std::vector<ingest::Sample>& samples,
                                     const PreprocessConfig& cfg);

// Drops stationary runs longer than the non-wear threshold, then keeps the
// remaining contiguous runs of at least min_wear_hours.
std::vector<ingest::Segment> detect_wear_segments(const std::vector<uint8_t>& mask,
                                                  const PreprocessConfig& cfg,
                                                  double min_wear_hours);

struct CalibrationResult {
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> offset{0.0, 0.0, 0.0};
  int iterations = 0;
  double residual = 0.0;  // RMS of (|corrected| - 1) over stationary points
  std::vector<double> residual_trace;
};

CalibrationResult autocalibrate(const std::vector<ingest::Sample>& samples,
                                const std::vector<uint8_t>& mask, const PreprocessConfig& cfg);

// x' = gain * x + offset, per axis.
void apply_calibration(std::vector<ingest::Sample>& samples, const CalibrationResult& result);

}  // namespace famh::preprocess
