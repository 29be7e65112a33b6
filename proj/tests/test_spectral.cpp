#include <cmath>
#include <numeric>

#include "doctest.h"
#include "famh/spectral.hpp"
#include "oracles.hpp"

using namespace famh;
using namespace famh::spectral;

namespace {

SpectralConfig cfg_n(int n_fft) {
  SpectralConfig cfg;
  cfg.n_fft = n_fft;
  return cfg;
}

bool throws_code(Err want, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code() == want;
  }
  return false;
}

}  // namespace

TEST_SUITE("spectral") {

TEST_CASE("hann window closed form and endpoints") {
  auto w = hann_window<double>(4);
  REQUIRE(w.size() == 4);
  CHECK(w[0] == doctest::Approx(0.0));
  CHECK(w[1] == doctest::Approx(0.5));
  CHECK(w[2] == doctest::Approx(1.0));
  CHECK(w[3] == doctest::Approx(0.5));
  for (int n : {2, 16, 32, 64, 128}) CHECK(hann_window<double>(n)[0] == 0.0);
  CHECK(throws_code(Err::bad_length, [] { hann_window<double>(3); }));
  CHECK(throws_code(Err::bad_length, [] { hann_window<double>(0); }));
}

TEST_CASE("hann overlap-add at hop n/2 sums to one") {
  for (int n : {16, 32, 64, 128}) {
    auto w = hann_window<double>(n);
    int hop = n / 2;
    int total = 6 * n;
    std::vector<double> acc(static_cast<size_t>(total), 0.0);
    for (int start = -n; start < total; start += hop)
      for (int k = 0; k < n; ++k) {
        int t = start + k;
        if (t >= 0 && t < total) acc[static_cast<size_t>(t)] += w[static_cast<size_t>(k)];
      }
    for (int t = n; t < total - n; ++t) CHECK(acc[static_cast<size_t>(t)] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("stft geometry: 300 samples, n_fft 32 gives 19 frames x 17 bins") {
  std::vector<double> x(300, 0.25);
  auto sg = stft_magnitude<double>(x, cfg_n(32));
  CHECK(sg.frames == 19);
  CHECK(sg.bins == 17);
}

TEST_CASE("stft of zero signal is zero") {
  std::vector<double> x(128, 0.0);
  auto sg = stft_magnitude<double>(x, cfg_n(32));
  for (double m : sg.mag) CHECK(m == 0.0);
}

TEST_CASE("stft matches naive windowed DFT oracle on random signals") {
  Rng rng(12345);
  for (int n_fft : {16, 32, 64, 128}) {
    for (int rep = 0; rep < 12; ++rep) {
      size_t len = 16 + rng.below(497);
      auto x = oracle::random_signal(rng, len);
      auto sg = stft_magnitude<double>(x, cfg_n(n_fft));
      int bins = 0, frames = 0;
      auto ref = oracle::naive_stft_mag(x, n_fft, &bins, &frames);
      REQUIRE(sg.bins == bins);
      REQUIRE(sg.frames == frames);
      for (size_t i = 0; i < ref.size(); ++i)
        CHECK(oracle::rel_err(sg.mag[i], ref[i], 1e-9) < 1e-9);
    }
  }
}

TEST_CASE("log mean magnitude: zero signal clamps to ln(eps)") {
  std::vector<double> x(300, 0.0);
  auto u = log_mean_magnitude<double>(x, cfg_n(32));
  for (double v : u) CHECK(v == doctest::Approx(std::log(0.1)).epsilon(1e-12));
  CHECK(u[0] == doctest::Approx(-2.302585093).epsilon(1e-9));
}

TEST_CASE("log mean magnitude is sign-blind") {
  Rng rng(7);
  auto x = oracle::random_signal(rng, 300);
  std::vector<double> neg(x.size());
  for (size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
  auto u1 = log_mean_magnitude<double>(x, cfg_n(32));
  auto u2 = log_mean_magnitude<double>(neg, cfg_n(32));
  for (size_t i = 0; i < u1.size(); ++i) CHECK(u1[i] == doctest::Approx(u2[i]).epsilon(1e-12));
}

TEST_CASE("log mean magnitude matches oracle for bin-centered cosine") {
  // bin 4 of a 32-point FFT at 30 Hz: 4 cycles per 32 samples
  std::vector<double> x(300);
  for (size_t t = 0; t < x.size(); ++t) x[t] = std::cos(2.0 * oracle::kPi * 4.0 * t / 32.0);
  auto u = log_mean_magnitude<double>(x, cfg_n(32));
  auto ref = oracle::naive_log_mean_mag(x, 32, 0.1);
  REQUIRE(u.size() == ref.size());
  for (size_t i = 0; i < u.size(); ++i) CHECK(oracle::rel_err(u[i], ref[i]) < 1e-9);
}

TEST_CASE("log var magnitude: zero signal clamps, oracle match, modulation raises variance") {
  std::vector<double> zero(300, 0.0);
  auto v0 = log_var_magnitude<double>(zero, cfg_n(32));
  for (double v : v0) CHECK(v == doctest::Approx(std::log(0.1)).epsilon(1e-12));

  Rng rng(11);
  auto x = oracle::random_signal(rng, 300);
  auto v = log_var_magnitude<double>(x, cfg_n(32));
  auto ref = oracle::naive_log_var_mag(x, 32, 0.1, true);
  for (size_t i = 0; i < v.size(); ++i) CHECK(oracle::rel_err(v[i], ref[i]) < 1e-9);

  // stationary tone vs amplitude-modulated tone at the same bin
  const double f_cyc = 4.0 / 32.0;  // bin 4
  std::vector<double> flat(320), am(320);
  for (size_t t = 0; t < flat.size(); ++t) {
    double carrier = std::sin(2.0 * oracle::kPi * f_cyc * t);
    flat[t] = 2.0 * carrier;
    am[t] = (2.0 + 1.8 * std::sin(2.0 * oracle::kPi * t / 320.0)) * carrier;
  }
  SpectralConfig cfg = cfg_n(32);
  cfg.epsilon = 1e-6;  // keep the variance floor out of the comparison
  auto vf = log_var_magnitude<double>(flat, cfg);
  auto va = log_var_magnitude<double>(am, cfg);
  CHECK(va[4] > vf[4]);

  std::vector<double> tiny(8, 1.0);  // single frame with n_fft 16
  CHECK(throws_code(Err::too_few_frames, [&] { log_var_magnitude<double>(tiny, cfg_n(16)); }));
}

TEST_CASE("mse patch loss closed forms") {
  std::vector<double> a(10, 0.0), b(10, 3.0);
  CHECK(mse_patch_loss<double>(a, a) == 0.0);
  CHECK(mse_patch_loss<double>(a, b) == doctest::Approx(9.0));
  std::vector<double> c(9, 0.0);
  CHECK(throws_code(Err::shape_mismatch, [&] { mse_patch_loss<double>(a, c); }));

  Rng rng(3);
  auto x = oracle::random_signal(rng, 77);
  auto y = oracle::random_signal(rng, 77);
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  CHECK(mse_patch_loss<double>(x, y) == doctest::Approx(acc / 77.0).epsilon(1e-12));
}

TEST_CASE("lmm loss: identity, sign-blindness, oracle") {
  Rng rng(21);
  auto x = oracle::random_signal(rng, 300);
  CHECK(lmm_loss<double>(x, x, cfg_n(32)) == 0.0);

  std::vector<double> neg(x.size());
  for (size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
  CHECK(lmm_loss<double>(x, neg, cfg_n(32)) == 0.0);

  auto y = oracle::random_signal(rng, 300);
  auto ux = oracle::naive_log_mean_mag(x, 32, 0.1);
  auto uy = oracle::naive_log_mean_mag(y, 32, 0.1);
  double ref = 0.0;
  for (size_t i = 0; i < ux.size(); ++i) ref += (ux[i] - uy[i]) * (ux[i] - uy[i]);
  ref /= static_cast<double>(ux.size());
  CHECK(oracle::rel_err(lmm_loss<double>(x, y, cfg_n(32)), ref) < 1e-9);
}

TEST_CASE("lmv loss: identity, time reversal, oracle") {
  Rng rng(22);
  // T = (frames-1)*hop + 1 makes reversal map frame centers onto frame centers
  const int hop = 16;
  const size_t T = 4 * hop + 1;
  auto x = oracle::random_signal(rng, T);
  CHECK(lmv_loss<double>(x, x, cfg_n(32)) == 0.0);

  std::vector<double> rev(x.rbegin(), x.rend());
  // frame magnitude multisets agree bin by bin
  auto sa = stft_magnitude<double>(x, cfg_n(32));
  auto sb = stft_magnitude<double>(rev, cfg_n(32));
  REQUIRE(sa.frames == sb.frames);
  for (int b = 0; b < sa.bins; ++b) {
    std::vector<double> ma, mb;
    for (int f = 0; f < sa.frames; ++f) {
      ma.push_back(sa.at(b, f));
      mb.push_back(sb.at(b, f));
    }
    std::sort(ma.begin(), ma.end());
    std::sort(mb.begin(), mb.end());
    for (size_t i = 0; i < ma.size(); ++i) CHECK(ma[i] == doctest::Approx(mb[i]).epsilon(1e-10));
  }
  CHECK(lmv_loss<double>(x, rev, cfg_n(32)) < 1e-18);

  auto y = oracle::random_signal(rng, T);
  auto vx = oracle::naive_log_var_mag(x, 32, 0.1, true);
  auto vy = oracle::naive_log_var_mag(y, 32, 0.1, true);
  double ref = 0.0;
  for (size_t i = 0; i < vx.size(); ++i) ref += (vx[i] - vy[i]) * (vx[i] - vy[i]);
  ref /= static_cast<double>(vx.size());
  CHECK(oracle::rel_err(lmv_loss<double>(x, y, cfg_n(32)), ref) < 1e-9);
}

TEST_CASE("combined loss reduces to components and is linear in weights") {
  Rng rng(31);
  auto x = oracle::random_signal(rng, 300);
  auto y = oracle::random_signal(rng, 300);
  SpectralConfig cfg = cfg_n(32);

  LossWeights only_lmm{1.0, 0.0, 0.0};
  CHECK(combined_loss<double>(x, y, only_lmm, cfg) ==
        doctest::Approx(lmm_loss<double>(x, y, cfg)).epsilon(1e-12));

  LossWeights only_mse{0.0, 1.0, 0.0};
  CHECK(combined_loss<double>(x, x, only_mse, cfg) == 0.0);

  LossWeights mix{1.0, 0.1, 0.0};
  double expect = lmm_loss<double>(x, y, cfg) + 0.1 * mse_patch_loss<double>(x, y);
  CHECK(combined_loss<double>(x, y, mix, cfg) == doctest::Approx(expect).epsilon(1e-12));

  // doubling w_lmm doubles the LMM contribution
  LossWeights w1{1.0, 0.25, 0.5}, w2{2.0, 0.25, 0.5};
  double base = combined_loss<double>(x, y, LossWeights{0.0, 0.25, 0.5}, cfg);
  double d1 = combined_loss<double>(x, y, w1, cfg) - base;
  double d2 = combined_loss<double>(x, y, w2, cfg) - base;
  CHECK(d2 == doctest::Approx(2.0 * d1).epsilon(1e-9));

  LossWeights zero{0.0, 0.0, 0.0};
  CHECK(throws_code(Err::all_zero_weights, [&] { combined_loss<double>(x, y, zero, cfg); }));
}

TEST_CASE("masked aggregate: reductions and exact masking semantics") {
  Rng rng(41);
  const int L = 6, P = 64;
  const size_t row = 3 * P;
  std::vector<double> X(L * row), Xr(L * row);
  for (auto& v : X) v = rng.uniform(-1, 1);
  for (auto& v : Xr) v = rng.uniform(-1, 1);
  SpectralConfig cfg = cfg_n(16);
  LossWeights w{1.0, 0.1, 0.0};

  // single masked patch equals the sum of its three axis losses
  std::vector<uint8_t> one(L, 0);
  one[2] = 1;
  double got = masked_aggregate<double>(X.data(), Xr.data(), L, P, one, w, cfg);
  double expect = 0.0;
  for (int axis = 0; axis < 3; ++axis) {
    std::span<const double> xi(X.data() + 2 * row + axis * P, P);
    std::span<const double> ri(Xr.data() + 2 * row + axis * P, P);
    expect += combined_loss<double>(xi, ri, w, cfg);
  }
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));

  // identical reconstruction gives zero for any mask
  std::vector<uint8_t> all(L, 1);
  CHECK(masked_aggregate<double>(X.data(), X.data(), L, P, all, w, cfg) == 0.0);

  // perturbing unmasked patches leaves the value bit-for-bit unchanged
  std::vector<uint8_t> mask(L, 0);
  mask[0] = mask[3] = 1;
  double before = masked_aggregate<double>(X.data(), Xr.data(), L, P, mask, w, cfg);
  auto perturbed = Xr;
  for (int i = 0; i < L; ++i) {
    if (mask[static_cast<size_t>(i)]) continue;
    for (size_t c = 0; c < row; ++c) perturbed[static_cast<size_t>(i) * row + c] += rng.uniform(-5, 5);
  }
  double after = masked_aggregate<double>(X.data(), perturbed.data(), L, P, mask, w, cfg);
  CHECK(before == after);

  std::vector<uint8_t> empty(L, 0);
  CHECK(throws_code(Err::empty_mask,
                    [&] { masked_aggregate<double>(X.data(), Xr.data(), L, P, empty, w, cfg); }));
}

TEST_CASE("clamp direction and variance estimator config switches") {
  // literal min-clamp: a loud signal caps every bin at ln(eps) with zero grad
  SpectralConfig literal = cfg_n(16);
  literal.clamp_low = false;
  std::vector<double> loud(96);
  for (size_t t = 0; t < loud.size(); ++t) loud[t] = 3.0 * std::sin(2.0 * oracle::kPi * 4.0 * t / 16.0);
  auto u = log_mean_magnitude<double>(loud, literal);
  for (double v : u) CHECK(v <= std::log(0.1) + 1e-12);
  CHECK(u[4] == doctest::Approx(std::log(0.1)).epsilon(1e-12));  // tone bin capped

  std::vector<double> g(loud.size(), 0.0);
  Rng rng(71);
  auto target = oracle::random_signal(rng, loud.size());
  combined_loss_grad<double>(target, loud, LossWeights{1, 0, 0}, literal, g, 1.0);
  auto fn = [&](std::span<const double> v) {
    return combined_loss<double>(target, v, LossWeights{1, 0, 0}, literal);
  };
  for (size_t i = 0; i < loud.size(); i += 7) {
    double fd = oracle::central_diff(fn, loud, i, 1e-5);
    CHECK(oracle::rel_err(g[i], fd, 1e-5) < 1e-4);
  }

  // unbiased variance differs from biased by frames/(frames-1) inside the log
  SpectralConfig biased = cfg_n(16);
  SpectralConfig unbiased = cfg_n(16);
  unbiased.biased_variance = false;
  unbiased.epsilon = biased.epsilon = 1e-12;  // keep the clamp out of the way
  auto x = oracle::random_signal(rng, 96);
  auto vb = log_var_magnitude<double>(x, biased);
  auto vu = log_var_magnitude<double>(x, unbiased);
  const int frames = spectral::frame_count(96, 8);
  double shift = std::log(static_cast<double>(frames) / (frames - 1));
  for (size_t b = 0; b < vb.size(); ++b)
    CHECK(vu[b] - vb[b] == doctest::Approx(shift).epsilon(1e-10));

  // a requested LMV term on a single-frame patch raises rather than vanishing
  std::vector<double> tiny(8, 0.5);
  CHECK(throws_code(Err::too_few_frames, [&] {
    combined_loss<double>(tiny, tiny, LossWeights{0, 0, 1}, cfg_n(16));
  }));
}

TEST_CASE("loss gradients match central finite differences") {
  Rng rng(51);
  const size_t len = 32;
  SpectralConfig cfg = cfg_n(16);
  auto x = oracle::random_signal(rng, len);

  auto check_grad = [&](const LossWeights& w) {
    auto xr = oracle::random_signal(rng, len);
    std::vector<double> g(len, 0.0);
    combined_loss_grad<double>(x, xr, w, cfg, g, 1.0);
    auto fn = [&](std::span<const double> v) {
      return combined_loss<double>(x, v, w, cfg);
    };
    for (size_t i = 0; i < len; i += 3) {
      double fd = oracle::central_diff(fn, xr, i, 1e-5);
      CHECK(oracle::rel_err(g[i], fd, 1e-6) < 1e-4);
    }
  };
  check_grad(LossWeights{1.0, 0.0, 0.0});
  check_grad(LossWeights{0.0, 1.0, 0.0});
  check_grad(LossWeights{0.0, 0.0, 1.0});
  check_grad(LossWeights{1.0, 0.1, 0.3});
}

TEST_CASE("masked aggregate gradient matches finite differences and is zero off-mask") {
  Rng rng(61);
  const int L = 4, P = 32;
  const size_t row = 3 * P;
  std::vector<double> X(L * row), Xr(L * row);
  for (auto& v : X) v = rng.uniform(-1, 1);
  for (auto& v : Xr) v = rng.uniform(-1, 1);
  std::vector<uint8_t> mask = {1, 0, 1, 0};
  SpectralConfig cfg = cfg_n(16);
  LossWeights w{1.0, 0.05, 0.0};

  std::vector<double> g(Xr.size(), 0.0);
  masked_aggregate_grad<double>(X.data(), Xr.data(), L, P, mask, w, cfg, g.data(), 1.0);

  auto fn = [&](std::span<const double> v) {
    return masked_aggregate<double>(X.data(), v.data(), L, P, mask, w, cfg);
  };
  for (size_t i = 0; i < Xr.size(); i += 17) {
    double fd = oracle::central_diff(fn, Xr, i, 1e-5);
    CHECK(oracle::rel_err(g[i], fd, 1e-6) < 1e-4);
  }
  // unmasked rows receive exactly zero gradient
  for (int i = 0; i < L; ++i) {
    if (mask[static_cast<size_t>(i)]) continue;
    for (size_t c = 0; c < row; ++c) CHECK(g[static_cast<size_t>(i) * row + c] == 0.0);
  }
}

}  // TEST_SUITE
