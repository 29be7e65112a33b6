#include "famh/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace famh::preprocess {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Biquad {
  double b0, b1, b2;  // numerator
  double a1, a2;      // denominator (a0 normalized to 1)
};

// Butterworth low-pass as cascaded second-order sections via the bilinear
// transform. Each section's numerator is scaled for exactly unit DC gain.
std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double fs_hz) {
  const double warped = std::tan(kPi * cutoff_hz / fs_hz);
  std::vector<Biquad> sections;
  for (int k = 1; 2 * k <= order; ++k) {
    double angle = kPi * (2.0 * k + order - 1.0) / (2.0 * order);
    double sre = warped * std::cos(angle);
    double sim = warped * std::sin(angle);
    // z = (1 + s) / (1 - s)
    double den = (1.0 - sre) * (1.0 - sre) + sim * sim;
    double zre = (1.0 - sre * sre - sim * sim) / den;
    double zim = 2.0 * sim / den;
    double a1 = -2.0 * zre;
    double a2 = zre * zre + zim * zim;
    double g = (1.0 + a1 + a2) / 4.0;
    sections.push_back({g, 2.0 * g, g, a1, a2});
  }
  return sections;
}

// Transposed direct form II with steady-state initial conditions so a
// constant input produces a constant output from the first sample.
void filter_inplace(const Biquad& s, std::vector<double>& x) {
  const double dc = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  double z2 = (s.b2 - s.a2 * dc) * x[0];
  double z1 = (s.b1 + (s.b2 - s.a2 * dc) - s.a1 * dc) * x[0];
  for (double& v : x) {
    double y = s.b0 * v + z1;
    z1 = s.b1 * v - s.a1 * y + z2;
    z2 = s.b2 * v - s.a2 * y;
    v = y;
  }
}

void filtfilt(const std::vector<Biquad>& sections, std::vector<double>& x, int pad) {
  const size_t n = x.size();
  std::vector<double> ext;
  ext.reserve(n + static_cast<size_t>(2 * pad));
  // odd reflection about each endpoint
  for (int i = pad; i >= 1; --i)
    ext.push_back(2.0 * x.front() - x[static_cast<size_t>(std::min<size_t>(i, n - 1))]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (int i = 1; i <= pad; ++i)
    ext.push_back(2.0 * x.back() - x[n - 1 - std::min<size_t>(static_cast<size_t>(i), n - 1)]);

  for (const auto& s : sections) filter_inplace(s, ext);
  std::reverse(ext.begin(), ext.end());
  for (const auto& s : sections) filter_inplace(s, ext);
  std::reverse(ext.begin(), ext.end());

  std::copy(ext.begin() + pad, ext.begin() + pad + static_cast<long>(n), x.begin());
}

}  // namespace

std::vector<ingest::Sample> lowpass_resample(const ingest::RawRecording& rec,
                                             const PreprocessConfig& cfg) {
  cfg.validate();
  if (rec.sample_rate_hz < 2.0 * cfg.cutoff_hz)
    raise(Err::rate_too_low, rec.id + ": sample rate " + std::to_string(rec.sample_rate_hz) +
                                 " Hz below 2x cutoff");
  const size_t n = rec.samples.size();
  if (n == 0) raise(Err::empty_file, rec.id + ": no samples");

  const int order = 4;
  const int pad = 3 * order;
  auto sections = butterworth_lowpass(order, cfg.cutoff_hz, rec.sample_rate_hz);

  std::vector<std::vector<double>> filtered(3, std::vector<double>(n));
  for (int axis = 0; axis < 3; ++axis) {
    for (size_t i = 0; i < n; ++i)
      filtered[static_cast<size_t>(axis)][i] =
          static_cast<double>(rec.samples[i][static_cast<size_t>(axis)]);
    if (n > static_cast<size_t>(pad))
      filtfilt(sections, filtered[static_cast<size_t>(axis)], pad);
    else
      filtfilt(sections, filtered[static_cast<size_t>(axis)], static_cast<int>(n) - 1);
  }

  const double ratio = rec.sample_rate_hz / cfg.target_rate_hz;
  const size_t out_n = static_cast<size_t>(
      std::floor(static_cast<double>(n) * cfg.target_rate_hz / rec.sample_rate_hz));
  std::vector<ingest::Sample> out(out_n);
  for (size_t k = 0; k < out_n; ++k) {
    double p = static_cast<double>(k) * ratio;
    size_t i0 = static_cast<size_t>(p);
    if (i0 >= n - 1) {
      for (int axis = 0; axis < 3; ++axis)
        out[k][static_cast<size_t>(axis)] =
            static_cast<float>(filtered[static_cast<size_t>(axis)][n - 1]);
      continue;
    }
    double w = p - static_cast<double>(i0);
    for (int axis = 0; axis < 3; ++axis) {
      const auto& f = filtered[static_cast<size_t>(axis)];
      out[k][static_cast<size_t>(axis)] = static_cast<float>((1.0 - w) * f[i0] + w * f[i0 + 1]);
    }
  }
  return out;
}

std::vector<uint8_t> stationary_mask(const std::vector<ingest::Sample>& samples,
                                     const PreprocessConfig& cfg) {
  const size_t n = samples.size();
  const size_t win = static_cast<size_t>(std::lround(cfg.stationary_window_s * 30.0));
  if (n < win) raise(Err::too_short, "recording shorter than one stationary window");
  const size_t half = win / 2;

  // prefix sums per axis for O(n) windowed variance
  std::vector<std::vector<double>> s1(3, std::vector<double>(n + 1, 0.0));
  std::vector<std::vector<double>> s2(3, std::vector<double>(n + 1, 0.0));
  for (size_t i = 0; i < n; ++i)
    for (size_t axis = 0; axis < 3; ++axis) {
      double v = static_cast<double>(samples[i][axis]);
      s1[axis][i + 1] = s1[axis][i] + v;
      s2[axis][i + 1] = s2[axis][i] + v * v;
    }

  const double thr2 = cfg.stationary_threshold_g * cfg.stationary_threshold_g;
  std::vector<uint8_t> mask(n, 0);
  for (size_t i = 0; i < n; ++i) {
    size_t lo = i >= half ? i - half : 0;
    size_t hi = std::min(n - 1, i + half);
    double m = static_cast<double>(hi - lo + 1);
    bool stationary = true;
    for (size_t axis = 0; axis < 3 && stationary; ++axis) {
      double sum = s1[axis][hi + 1] - s1[axis][lo];
      double sq = s2[axis][hi + 1] - s2[axis][lo];
      double var = m > 1.0 ? std::max(0.0, (sq - sum * sum / m) / (m - 1.0)) : 0.0;
      stationary = var < thr2;
    }
    mask[i] = stationary ? 1 : 0;
  }
  return mask;
}

std::vector<ingest::Segment> detect_wear_segments(const std::vector<uint8_t>& mask,
                                                  const PreprocessConfig& cfg,
                                                  double min_wear_hours) {
  const size_t n = mask.size();
  const size_t nonwear_min =
      static_cast<size_t>(std::lround(cfg.nonwear_min_minutes * 60.0 * 30.0));
  const size_t wear_min = static_cast<size_t>(std::lround(min_wear_hours * 3600.0 * 30.0));

  // stationary runs strictly longer than the threshold become non-wear
  std::vector<uint8_t> wear(n, 1);
  size_t i = 0;
  while (i < n) {
    if (!mask[i]) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < n && mask[j]) ++j;
    if (j - i > nonwear_min) std::fill(wear.begin() + i, wear.begin() + j, uint8_t(0));
    i = j;
  }

  std::vector<ingest::Segment> out;
  i = 0;
  while (i < n) {
    if (!wear[i]) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < n && wear[j]) ++j;
    if (j - i >= wear_min) out.push_back({i, j});
    i = j;
  }
  return out;
}

CalibrationResult autocalibrate(const std::vector<ingest::Sample>& samples,
                                const std::vector<uint8_t>& mask, const PreprocessConfig& cfg) {
  if (mask.size() != samples.size())
    raise(Err::shape_mismatch, "mask length does not match samples");

  // collapse each maximal stationary run to its mean vector
  std::vector<std::array<double, 3>> points;
  size_t i = 0;
  while (i < mask.size()) {
    if (!mask[i]) {
      ++i;
      continue;
    }
    size_t j = i;
    std::array<double, 3> acc{0.0, 0.0, 0.0};
    while (j < mask.size() && mask[j]) {
      for (size_t axis = 0; axis < 3; ++axis) acc[axis] += static_cast<double>(samples[j][axis]);
      ++j;
    }
    double m = static_cast<double>(j - i);
    points.push_back({acc[0] / m, acc[1] / m, acc[2] / m});
    i = j;
  }

  if (points.size() < static_cast<size_t>(cfg.calib_min_points))
    raise(Err::calibration_insufficient_coverage,
          "only " + std::to_string(points.size()) + " stationary points, need " +
              std::to_string(cfg.calib_min_points));
  for (size_t axis = 0; axis < 3; ++axis) {
    bool has_neg = false, has_pos = false;
    for (const auto& p : points) {
      has_neg = has_neg || p[axis] <= -cfg.calib_coverage_g;
      has_pos = has_pos || p[axis] >= cfg.calib_coverage_g;
    }
    if (!has_neg || !has_pos)
      raise(Err::calibration_insufficient_coverage,
            "axis " + std::to_string(axis) + " lacks +/-" +
                std::to_string(cfg.calib_coverage_g) + " g coverage");
  }

  CalibrationResult res;
  const size_t np = points.size();
  std::vector<std::array<double, 3>> cur(np), target(np);
  std::vector<double> weights(np, 1.0);
  double prev = std::numeric_limits<double>::infinity();

  for (int it = 1; it <= cfg.calib_max_iter; ++it) {
    double sq = 0.0;
    for (size_t p = 0; p < np; ++p) {
      double norm = 0.0;
      for (size_t axis = 0; axis < 3; ++axis) {
        cur[p][axis] = res.gain[axis] * points[p][axis] + res.offset[axis];
        norm += cur[p][axis] * cur[p][axis];
      }
      norm = std::sqrt(norm);
      double r = norm - 1.0;
      sq += r * r;
      double inv = norm > 0.0 ? 1.0 / norm : 0.0;
      for (size_t axis = 0; axis < 3; ++axis) target[p][axis] = cur[p][axis] * inv;
    }
    double residual = std::sqrt(sq / static_cast<double>(np));
    res.residual_trace.push_back(residual);
    res.iterations = it;
    res.residual = residual;
    if (std::abs(prev - residual) < cfg.calib_tol) {
      for (size_t axis = 0; axis < 3; ++axis)
        if (res.gain[axis] <= 0.5 || res.gain[axis] >= 2.0)
          raise(Err::calibration_no_convergence,
                "gain out of range on axis " + std::to_string(axis));
      return res;
    }
    prev = residual;

    // weighted least squares per axis: target ~= alpha * cur + beta,
    // composed into the cumulative gain/offset
    for (size_t axis = 0; axis < 3; ++axis) {
      double sw = 0, swx = 0, swy = 0, swxx = 0, swxy = 0;
      for (size_t p = 0; p < np; ++p) {
        double w = weights[p];
        double x = cur[p][axis];
        double y = target[p][axis];
        sw += w;
        swx += w * x;
        swy += w * y;
        swxx += w * x * x;
        swxy += w * x * y;
      }
      double det = sw * swxx - swx * swx;
      if (std::abs(det) < 1e-12)
        raise(Err::calibration_no_convergence, "degenerate axis " + std::to_string(axis));
      double alpha = (sw * swxy - swx * swy) / det;
      double beta = (swxx * swy - swx * swxy) / det;
      res.gain[axis] *= alpha;
      res.offset[axis] = res.offset[axis] * alpha + beta;
    }

    // downweight points far from the sphere
    for (size_t p = 0; p < np; ++p) {
      double d2 = 0.0;
      for (size_t axis = 0; axis < 3; ++axis) {
        double d = cur[p][axis] - target[p][axis];
        d2 += d * d;
      }
      weights[p] = std::min(1.0 / std::max(std::sqrt(d2), 1e-8), 100.0);
    }
  }
  raise(Err::calibration_no_convergence,
        "no convergence after " + std::to_string(cfg.calib_max_iter) + " iterations");
}

void apply_calibration(std::vector<ingest::Sample>& samples, const CalibrationResult& result) {
  for (auto& s : samples)
    for (size_t axis = 0; axis < 3; ++axis)
      s[axis] = static_cast<float>(result.gain[axis] * static_cast<double>(s[axis]) +
                                   result.offset[axis]);
}

}  // namespace famh::preprocess
