#include <cmath>

#include "doctest.h"
#include "famh/preprocess.hpp"
#include "oracles.hpp"

using namespace famh;
using namespace famh::preprocess;
using famh::ingest::RawRecording;
using famh::ingest::Sample;

namespace {

RawRecording sine_recording(double freq_hz, double rate_hz, double seconds, double amp = 1.0) {
  RawRecording rec;
  rec.id = "sine";
  rec.sample_rate_hz = rate_hz;
  size_t n = static_cast<size_t>(seconds * rate_hz);
  rec.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    double t = static_cast<double>(i) / rate_hz;
    float v = static_cast<float>(amp * std::sin(2.0 * oracle::kPi * freq_hz * t));
    rec.samples[i] = {v, 0.0f, 1.0f};
  }
  return rec;
}

// least-squares amplitude of a sinusoid at freq in x-axis samples
double fit_amplitude(const std::vector<Sample>& samples, double freq_hz, double rate_hz) {
  size_t lo = samples.size() / 10;
  size_t hi = samples.size() - lo;
  double sa = 0, sb = 0;
  size_t n = 0;
  for (size_t i = lo; i < hi; ++i) {
    double t = static_cast<double>(i) / rate_hz;
    sa += samples[i][0] * std::sin(2.0 * oracle::kPi * freq_hz * t);
    sb += samples[i][0] * std::cos(2.0 * oracle::kPi * freq_hz * t);
    ++n;
  }
  return 2.0 * std::sqrt(sa * sa + sb * sb) / static_cast<double>(n);
}

bool throws_code(Err want, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code() == want;
  }
  return false;
}

// points spread over the unit sphere (golden spiral)
std::vector<std::array<double, 3>> sphere_points(size_t n) {
  std::vector<std::array<double, 3>> pts(n);
  const double golden = oracle::kPi * (3.0 - std::sqrt(5.0));
  for (size_t i = 0; i < n; ++i) {
    double z = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    double r = std::sqrt(1.0 - z * z);
    double a = golden * static_cast<double>(i);
    pts[i] = {r * std::cos(a), r * std::sin(a), z};
  }
  return pts;
}

// Builds a 30 Hz sample stream + mask in which every stationary run collapses
// to one of the given points; raw values invert the given gain/offset.
struct CalibScenario {
  std::vector<Sample> samples;
  std::vector<uint8_t> mask;
};

CalibScenario scenario_from_points(const std::vector<std::array<double, 3>>& sphere,
                                   std::array<double, 3> gain, std::array<double, 3> offset) {
  CalibScenario sc;
  for (const auto& p : sphere) {
    for (int k = 0; k < 10; ++k) {
      Sample s;
      for (size_t axis = 0; axis < 3; ++axis)
        s[axis] = static_cast<float>((p[axis] - offset[axis]) / gain[axis]);
      sc.samples.push_back(s);
      sc.mask.push_back(1);
    }
    sc.samples.push_back({5.0f, 5.0f, 5.0f});  // separator, non-stationary
    sc.mask.push_back(0);
  }
  return sc;
}

}  // namespace

TEST_SUITE("preprocess") {

TEST_CASE("lowpass_resample preserves DC exactly") {
  PreprocessConfig cfg;
  RawRecording rec;
  rec.id = "dc";
  rec.sample_rate_hz = 100.0;
  rec.samples.assign(100 * 60, {0.0f, 0.0f, 1.0f});
  auto out = lowpass_resample(rec, cfg);
  CHECK(out.size() == 1800);  // 60 s at 30 Hz
  for (const auto& s : out) {
    CHECK(std::abs(s[0]) < 1e-6);
    CHECK(std::abs(s[1]) < 1e-6);
    CHECK(std::abs(s[2] - 1.0) < 1e-6);
  }
}

TEST_CASE("lowpass_resample passes 1 Hz and rejects 20 Hz") {
  PreprocessConfig cfg;
  auto pass = lowpass_resample(sine_recording(1.0, 100.0, 30.0), cfg);
  CHECK(fit_amplitude(pass, 1.0, 30.0) == doctest::Approx(1.0).epsilon(0.01));

  // 20 Hz folds to 10 Hz on the 30 Hz grid; fit the sinusoid there
  auto stop = lowpass_resample(sine_recording(20.0, 100.0, 30.0), cfg);
  CHECK(fit_amplitude(stop, 10.0, 30.0) < 0.1);
}

TEST_CASE("lowpass_resample rejects too-low sample rates") {
  PreprocessConfig cfg;
  CHECK(throws_code(Err::rate_too_low,
                    [&] { lowpass_resample(sine_recording(1.0, 25.0, 10.0), cfg); }));
}

TEST_CASE("stationary mask: constants, noise, transition timing") {
  PreprocessConfig cfg;
  std::vector<Sample> still(30 * 60, {0.1f, -0.2f, 0.97f});
  auto m1 = stationary_mask(still, cfg);
  for (uint8_t v : m1) CHECK(v == 1);

  Rng rng(9);
  std::vector<Sample> noisy(30 * 60);
  for (auto& s : noisy)
    s = {static_cast<float>(rng.gaussian(0, 0.1)), static_cast<float>(rng.gaussian(0, 0.1)),
         static_cast<float>(1.0 + rng.gaussian(0, 0.1))};
  auto m2 = stationary_mask(noisy, cfg);
  for (uint8_t v : m2) CHECK(v == 0);

  // 20 min constant then 20 min of 2 Hz 0.5 g oscillation: flip within 5 s
  size_t half = 20 * 60 * 30;
  std::vector<Sample> mix(2 * half, {0.0f, 0.0f, 1.0f});
  for (size_t i = half; i < 2 * half; ++i) {
    double t = static_cast<double>(i) / 30.0;
    mix[i][0] = static_cast<float>(0.5 * std::sin(2.0 * oracle::kPi * 2.0 * t));
  }
  auto m3 = stationary_mask(mix, cfg);
  CHECK(m3[half - 5 * 30 - 1] == 1);
  CHECK(m3[half + 5 * 30] == 0);

  // monotone in the threshold: raising it never unmarks a stationary sample
  PreprocessConfig looser = cfg;
  looser.stationary_threshold_g = 0.05;
  auto m4 = stationary_mask(mix, looser);
  for (size_t i = 0; i < m3.size(); ++i)
    if (m3[i]) CHECK(m4[i] == 1);

  std::vector<Sample> shortie(10, {0, 0, 1});
  CHECK(throws_code(Err::too_short, [&] { stationary_mask(shortie, cfg); }));
}

TEST_CASE("wear segment detection drops long stationary runs only") {
  PreprocessConfig cfg;
  auto hours = [](double h) { return static_cast<size_t>(h * 3600 * 30); };
  auto minutes = [](double m) { return static_cast<size_t>(m * 60 * 30); };

  // 26 h all moving, 24 h minimum: one segment covering everything
  std::vector<uint8_t> moving(hours(26), 0);
  auto segs = detect_wear_segments(moving, cfg, 24.0);
  REQUIRE(segs.size() == 1);
  CHECK(segs[0].first == 0);
  CHECK(segs[0].second == moving.size());

  // 2 h active + 100 min stationary + 2 h active, 1 h minimum: two segments
  std::vector<uint8_t> gap;
  gap.insert(gap.end(), hours(2), 0);
  gap.insert(gap.end(), minutes(100), 1);
  gap.insert(gap.end(), hours(2), 0);
  segs = detect_wear_segments(gap, cfg, 1.0);
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].second - segs[0].first == hours(2));
  CHECK(segs[1].second - segs[1].first == hours(2));

  // 80 min stationary is kept as wear: one ~5.3 h segment
  std::vector<uint8_t> keep;
  keep.insert(keep.end(), hours(2), 0);
  keep.insert(keep.end(), minutes(80), 1);
  keep.insert(keep.end(), hours(2), 0);
  segs = detect_wear_segments(keep, cfg, 1.0);
  REQUIRE(segs.size() == 1);
  CHECK(segs[0].second - segs[0].first == keep.size());

  // appending a short non-stationary tail only extends the last segment
  std::vector<uint8_t> extended = keep;
  extended.insert(extended.end(), minutes(10), 0);
  auto segs2 = detect_wear_segments(extended, cfg, 1.0);
  REQUIRE(segs2.size() == 1);
  CHECK(segs2[0].first == segs[0].first);
  CHECK(segs2[0].second == extended.size());
}

TEST_CASE("autocalibrate: fixed point, recovery, coverage, idempotence") {
  PreprocessConfig cfg;
  auto sphere = sphere_points(30);

  // points already on the sphere: identity within 1e-6
  auto clean = scenario_from_points(sphere, {1, 1, 1}, {0, 0, 0});
  auto res = autocalibrate(clean.samples, clean.mask, cfg);
  for (size_t a = 0; a < 3; ++a) {
    CHECK(std::abs(res.gain[a] - 1.0) < 1e-6);
    CHECK(std::abs(res.offset[a]) < 1e-6);
  }

  // known distortion is recovered within 1e-3
  std::array<double, 3> gain{1.05, 0.97, 1.02};
  std::array<double, 3> offset{0.02, -0.01, 0.03};
  auto skewed = scenario_from_points(sphere, gain, offset);
  res = autocalibrate(skewed.samples, skewed.mask, cfg);
  for (size_t a = 0; a < 3; ++a) {
    CHECK(std::abs(res.gain[a] - gain[a]) < 1e-3);
    CHECK(std::abs(res.offset[a] - offset[a]) < 1e-3);
  }

  // residual trace never increases
  for (size_t i = 1; i < res.residual_trace.size(); ++i)
    CHECK(res.residual_trace[i] <= res.residual_trace[i - 1] + 1e-12);

  // idempotence: running on corrected samples returns identity
  auto corrected = skewed.samples;
  apply_calibration(corrected, res);
  auto res2 = autocalibrate(corrected, skewed.mask, cfg);
  for (size_t a = 0; a < 3; ++a) {
    CHECK(std::abs(res2.gain[a] - 1.0) < 1e-3);
    CHECK(std::abs(res2.offset[a]) < 1e-3);
  }

  // all points around +z: insufficient coverage
  std::vector<std::array<double, 3>> polar(30, {0.01, 0.02, 0.999});
  auto bad = scenario_from_points(polar, {1, 1, 1}, {0, 0, 0});
  CHECK(throws_code(Err::calibration_insufficient_coverage,
                    [&] { autocalibrate(bad.samples, bad.mask, cfg); }));

  // too few stationary points
  auto few = scenario_from_points(sphere_points(5), {1, 1, 1}, {0, 0, 0});
  CHECK(throws_code(Err::calibration_insufficient_coverage,
                    [&] { autocalibrate(few.samples, few.mask, cfg); }));
}

TEST_CASE("apply_calibration arithmetic and inverse") {
  CalibrationResult res;
  res.gain = {2.0, 1.0, 1.0};
  res.offset = {0.1, 0.0, 0.0};
  std::vector<Sample> s = {{0.5f, 0.25f, -1.0f}};
  auto copy = s;
  apply_calibration(copy, res);
  CHECK(copy[0][0] == doctest::Approx(1.1));
  CHECK(copy[0][1] == doctest::Approx(0.25));
  CHECK(copy[0][2] == doctest::Approx(-1.0));

  CalibrationResult identity;
  auto same = s;
  apply_calibration(same, identity);
  CHECK(same[0] == s[0]);

  // apply then invert recovers the original within 1e-7
  Rng rng(4);
  std::vector<Sample> many(100);
  for (auto& v : many)
    v = {static_cast<float>(rng.uniform(-1, 1)), static_cast<float>(rng.uniform(-1, 1)),
         static_cast<float>(rng.uniform(-1, 1))};
  auto fwd = many;
  CalibrationResult skew;
  skew.gain = {1.05, 0.97, 1.02};
  skew.offset = {0.02, -0.01, 0.03};
  apply_calibration(fwd, skew);
  for (size_t i = 0; i < many.size(); ++i)
    for (size_t a = 0; a < 3; ++a) {
      double inv = (static_cast<double>(fwd[i][a]) - skew.offset[a]) / skew.gain[a];
      CHECK(std::abs(inv - static_cast<double>(many[i][a])) < 1e-7);
    }
}

}  // TEST_SUITE
