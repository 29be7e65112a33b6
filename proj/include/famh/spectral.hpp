#pragma once
// STFT machinery and the reconstruction-loss family: MSE, log-mean-magnitude
// (LMM), log-magnitude-variance (LMV), weighted combinations, and the masked
// per-window aggregate. Templated on the scalar type: float in training paths,
// double in tests and oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "famh/common.hpp"

namespace famh::spectral {

struct SpectralConfig {
  int n_fft = 32;          // one of 16, 32, 64, 128
  double epsilon = 0.1;
  bool clamp_low = true;   // log(max(., eps)); false gives the literal log(min(., eps))
  bool biased_variance = true;

  int hop() const { return n_fft / 2; }
  int bins() const { return n_fft / 2 + 1; }

  void validate() const {
    if (n_fft != 16 && n_fft != 32 && n_fft != 64 && n_fft != 128)
      raise(Err::config_error, "spectral.n_fft must be one of 16, 32, 64, 128");
    if (!(epsilon > 0.0)) raise(Err::config_error, "spectral.epsilon must be positive");
  }
};

struct LossWeights {
  double w_lmm = 1.0;
  double w_mse = 0.0;
  double w_lmv = 0.0;

  void validate() const {
    if (w_lmm < 0 || w_mse < 0 || w_lmv < 0)
      raise(Err::config_error, "loss weights must be non-negative");
    if (w_lmm == 0 && w_mse == 0 && w_lmv == 0)
      raise(Err::all_zero_weights, "all loss weights are zero");
  }
};

// Unweighted component values, aggregated the same way as the loss itself.
struct LossComponents {
  double lmm = 0.0;
  double mse = 0.0;
  double lmv = 0.0;
};

// Periodic Hann: w[k] = 0.5*(1 - cos(2*pi*k/n)). Sums to 1 under overlap-add
// at hop n/2.
template <class T>
std::vector<T> hann_window(int n) {
  if (n < 2 || (n % 2) != 0) raise(Err::bad_length, "hann window length must be even and >= 2");
  std::vector<T> w(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k)
    w[static_cast<size_t>(k)] =
        static_cast<T>(0.5 * (1.0 - std::cos(2.0 * 3.14159265358979323846 * k / n)));
  return w;
}

// Radix-2 DIT FFT for power-of-two sizes with precomputed twiddles.
template <class T>
struct FftPlan {
  int n = 0;
  std::vector<T> cos_full, sin_full;  // cos/sin(2*pi*j/n) for j in [0, n)

  explicit FftPlan(int size) : n(size) {
    if (n < 2 || (n & (n - 1)) != 0) raise(Err::bad_length, "fft size must be a power of two");
    cos_full.resize(static_cast<size_t>(n));
    sin_full.resize(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
      double a = 2.0 * 3.14159265358979323846 * j / n;
      cos_full[static_cast<size_t>(j)] = static_cast<T>(std::cos(a));
      sin_full[static_cast<size_t>(j)] = static_cast<T>(std::sin(a));
    }
  }

  void forward(T* re, T* im) const {
    // bit-reversal permutation
    for (int i = 1, j = 0; i < n; ++i) {
      int bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j |= bit;
      if (i < j) {
        std::swap(re[i], re[j]);
        std::swap(im[i], im[j]);
      }
    }
    for (int len = 2; len <= n; len <<= 1) {
      int half = len >> 1;
      int step = n / len;
      for (int base = 0; base < n; base += len) {
        for (int k = 0; k < half; ++k) {
          int tw = k * step;
          T wr = cos_full[static_cast<size_t>(tw)];
          T wi = -sin_full[static_cast<size_t>(tw)];  // e^{-2*pi*i*k/len}
          int a = base + k;
          int b = a + half;
          T vr = re[b] * wr - im[b] * wi;
          T vi = re[b] * wi + im[b] * wr;
          re[b] = re[a] - vr;
          im[b] = im[a] - vi;
          re[a] += vr;
          im[a] += vi;
        }
      }
    }
  }
};

// Magnitude spectrogram, bins x frames row-major.
template <class T>
struct Spectrogram {
  int bins = 0;
  int frames = 0;
  std::vector<T> mag;

  T& at(int b, int f) { return mag[static_cast<size_t>(b) * frames + f]; }
  T at(int b, int f) const { return mag[static_cast<size_t>(b) * frames + f]; }
};

// Complex frames kept around for gradient work; same layout as Spectrogram.
template <class T>
struct StftWorkspace {
  int bins = 0;
  int frames = 0;
  std::vector<T> re, im;
};

inline int frame_count(size_t signal_len, int hop) {
  return static_cast<int>((signal_len + static_cast<size_t>(hop) - 1) / static_cast<size_t>(hop));
}

// Frame m covers samples [m*hop - n_fft/2, m*hop + n_fft/2); out-of-range
// samples are zero, so the m-th window is centered on sample m*hop.
template <class T>
Spectrogram<T> stft_magnitude(std::span<const T> x, const SpectralConfig& cfg,
                              StftWorkspace<T>* ws = nullptr) {
  if (x.empty()) raise(Err::bad_length, "stft input must be non-empty");
  const int n = cfg.n_fft;
  const int hop = cfg.hop();
  const int bins = cfg.bins();
  const int frames = frame_count(x.size(), hop);
  const auto win = hann_window<T>(n);
  FftPlan<T> plan(n);

  Spectrogram<T> out;
  out.bins = bins;
  out.frames = frames;
  out.mag.assign(static_cast<size_t>(bins) * frames, T(0));
  if (ws != nullptr) {
    ws->bins = bins;
    ws->frames = frames;
    ws->re.assign(out.mag.size(), T(0));
    ws->im.assign(out.mag.size(), T(0));
  }

  std::vector<T> re(static_cast<size_t>(n)), im(static_cast<size_t>(n));
  const long long len = static_cast<long long>(x.size());
  for (int f = 0; f < frames; ++f) {
    const long long start = static_cast<long long>(f) * hop - n / 2;
    for (int k = 0; k < n; ++k) {
      long long idx = start + k;
      T v = (idx >= 0 && idx < len) ? x[static_cast<size_t>(idx)] : T(0);
      re[static_cast<size_t>(k)] = v * win[static_cast<size_t>(k)];
      im[static_cast<size_t>(k)] = T(0);
    }
    plan.forward(re.data(), im.data());
    for (int b = 0; b < bins; ++b) {
      T r = re[static_cast<size_t>(b)];
      T i = im[static_cast<size_t>(b)];
      T m = std::sqrt(r * r + i * i);
      out.mag[static_cast<size_t>(b) * frames + f] = m;
      if (ws != nullptr) {
        ws->re[static_cast<size_t>(b) * frames + f] = r;
        ws->im[static_cast<size_t>(b) * frames + f] = i;
      }
    }
  }
  return out;
}

template <class T>
T clamp_log(T v, const SpectralConfig& cfg) {
  T eps = static_cast<T>(cfg.epsilon);
  T c = cfg.clamp_low ? std::max(v, eps) : std::min(v, eps);
  return std::log(c);
}

// d log(clamp(v))/dv; zero on the clamped side.
template <class T>
T clamp_log_grad(T v, const SpectralConfig& cfg) {
  T eps = static_cast<T>(cfg.epsilon);
  if (cfg.clamp_low) return v > eps ? T(1) / v : T(0);
  return v < eps ? T(1) / v : T(0);
}

// U(x): per-bin log of the frame-mean magnitude.
template <class T>
std::vector<T> log_mean_magnitude_of(const Spectrogram<T>& sg, const SpectralConfig& cfg) {
  std::vector<T> u(static_cast<size_t>(sg.bins));
  for (int b = 0; b < sg.bins; ++b) {
    T s = 0;
    for (int f = 0; f < sg.frames; ++f) s += sg.at(b, f);
    u[static_cast<size_t>(b)] = clamp_log(s / static_cast<T>(sg.frames), cfg);
  }
  return u;
}

template <class T>
std::vector<T> log_mean_magnitude(std::span<const T> x, const SpectralConfig& cfg) {
  return log_mean_magnitude_of(stft_magnitude(x, cfg), cfg);
}

// V(x): per-bin log of the frame variance of the magnitude.
template <class T>
std::vector<T> log_var_magnitude_of(const Spectrogram<T>& sg, const SpectralConfig& cfg) {
  if (sg.frames < 2) raise(Err::too_few_frames, "variance needs at least 2 frames");
  std::vector<T> v(static_cast<size_t>(sg.bins));
  const T denom = static_cast<T>(cfg.biased_variance ? sg.frames : sg.frames - 1);
  for (int b = 0; b < sg.bins; ++b) {
    T s = 0;
    for (int f = 0; f < sg.frames; ++f) s += sg.at(b, f);
    T mean = s / static_cast<T>(sg.frames);
    T acc = 0;
    for (int f = 0; f < sg.frames; ++f) {
      T d = sg.at(b, f) - mean;
      acc += d * d;
    }
    v[static_cast<size_t>(b)] = clamp_log(acc / denom, cfg);
  }
  return v;
}

template <class T>
std::vector<T> log_var_magnitude(std::span<const T> x, const SpectralConfig& cfg) {
  return log_var_magnitude_of(stft_magnitude(x, cfg), cfg);
}

template <class T>
T mse_vec(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size() || a.empty()) raise(Err::shape_mismatch, "mse inputs differ in length");
  T acc = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    T d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<T>(a.size());
}

// Plain time-domain MSE over one patch-axis vector.
template <class T>
T mse_patch_loss(std::span<const T> x, std::span<const T> xr) {
  return mse_vec(x, xr);
}

template <class T>
T lmm_loss(std::span<const T> x, std::span<const T> xr, const SpectralConfig& cfg) {
  if (x.size() != xr.size()) raise(Err::shape_mismatch, "lmm inputs differ in length");
  auto ux = log_mean_magnitude(x, cfg);
  auto uxr = log_mean_magnitude(xr, cfg);
  return mse_vec<T>(ux, uxr);
}

template <class T>
T lmv_loss(std::span<const T> x, std::span<const T> xr, const SpectralConfig& cfg) {
  if (x.size() != xr.size()) raise(Err::shape_mismatch, "lmv inputs differ in length");
  auto vx = log_var_magnitude(x, cfg);
  auto vxr = log_var_magnitude(xr, cfg);
  return mse_vec<T>(vx, vxr);
}

// w_lmm*LMM + w_mse*MSE + w_lmv*LMV for one patch-axis pair. Components not
// requested by a weight are skipped unless want_all asks for them (logging).
template <class T>
T combined_loss(std::span<const T> x, std::span<const T> xr, const LossWeights& w,
                const SpectralConfig& cfg, LossComponents* comps = nullptr,
                bool want_all = false) {
  w.validate();
  if (x.size() != xr.size()) raise(Err::shape_mismatch, "combined loss inputs differ in length");
  T total = 0;
  LossComponents c;
  if (w.w_mse > 0 || want_all) {
    c.mse = static_cast<double>(mse_vec(x, xr));
    total += static_cast<T>(w.w_mse) * static_cast<T>(c.mse);
  }
  const bool need_spec = w.w_lmm > 0 || w.w_lmv > 0 || want_all;
  if (need_spec) {
    auto sgx = stft_magnitude(x, cfg);
    auto sgr = stft_magnitude(xr, cfg);
    if (w.w_lmm > 0 || want_all) {
      auto ux = log_mean_magnitude_of(sgx, cfg);
      auto ur = log_mean_magnitude_of(sgr, cfg);
      c.lmm = static_cast<double>(mse_vec<T>(ux, ur));
      total += static_cast<T>(w.w_lmm) * static_cast<T>(c.lmm);
    }
    if (w.w_lmv > 0 && sgx.frames < 2)
      raise(Err::too_few_frames, "variance needs at least 2 frames");
    if (w.w_lmv > 0 || (want_all && sgx.frames >= 2)) {
      auto vx = log_var_magnitude_of(sgx, cfg);
      auto vr = log_var_magnitude_of(sgr, cfg);
      c.lmv = static_cast<double>(mse_vec<T>(vx, vr));
      total += static_cast<T>(w.w_lmv) * static_cast<T>(c.lmv);
    }
  }
  if (comps != nullptr) *comps = c;
  return total;
}

// Accumulates upstream * d(combined_loss)/d(xr) into gxr. Returns the loss.
template <class T>
T combined_loss_grad(std::span<const T> x, std::span<const T> xr, const LossWeights& w,
                     const SpectralConfig& cfg, std::span<T> gxr, T upstream) {
  w.validate();
  if (x.size() != xr.size() || gxr.size() != xr.size())
    raise(Err::shape_mismatch, "combined loss grad shapes differ");
  const size_t len = x.size();
  T total = 0;

  if (w.w_mse > 0) {
    T c = 0;
    T k = upstream * static_cast<T>(w.w_mse) * T(2) / static_cast<T>(len);
    for (size_t i = 0; i < len; ++i) {
      T d = xr[i] - x[i];
      c += d * d;
      gxr[i] += k * d;
    }
    total += static_cast<T>(w.w_mse) * (c / static_cast<T>(len));
  }

  if (w.w_lmm > 0 || w.w_lmv > 0) {
    StftWorkspace<T> ws;
    auto sgr = stft_magnitude(xr, cfg, &ws);
    auto sgx = stft_magnitude(x, cfg);
    const int bins = sgr.bins;
    const int frames = sgr.frames;
    // per-bin frame means of the reconstruction magnitudes
    std::vector<T> mean_r(static_cast<size_t>(bins), T(0));
    for (int b = 0; b < bins; ++b) {
      T s = 0;
      for (int f = 0; f < frames; ++f) s += sgr.at(b, f);
      mean_r[static_cast<size_t>(b)] = s / static_cast<T>(frames);
    }

    // dL/dmag for every (bin, frame), summed over LMM and LMV parts
    std::vector<T> dmag(static_cast<size_t>(bins) * frames, T(0));

    if (w.w_lmm > 0) {
      auto ux = log_mean_magnitude_of(sgx, cfg);
      std::vector<T> ur(static_cast<size_t>(bins));
      for (int b = 0; b < bins; ++b) ur[static_cast<size_t>(b)] = clamp_log(mean_r[static_cast<size_t>(b)], cfg);
      T lmm = mse_vec<T>(ux, ur);
      total += static_cast<T>(w.w_lmm) * lmm;
      for (int b = 0; b < bins; ++b) {
        T du = upstream * static_cast<T>(w.w_lmm) * T(2) *
               (ur[static_cast<size_t>(b)] - ux[static_cast<size_t>(b)]) / static_cast<T>(bins);
        T dmean = du * clamp_log_grad(mean_r[static_cast<size_t>(b)], cfg);
        T per_frame = dmean / static_cast<T>(frames);
        for (int f = 0; f < frames; ++f) dmag[static_cast<size_t>(b) * frames + f] += per_frame;
      }
    }

    if (w.w_lmv > 0) {
      if (frames < 2) raise(Err::too_few_frames, "variance needs at least 2 frames");
      auto vx = log_var_magnitude_of(sgx, cfg);
      const T denom = static_cast<T>(cfg.biased_variance ? frames : frames - 1);
      std::vector<T> var_r(static_cast<size_t>(bins));
      for (int b = 0; b < bins; ++b) {
        T acc = 0;
        for (int f = 0; f < frames; ++f) {
          T d = sgr.at(b, f) - mean_r[static_cast<size_t>(b)];
          acc += d * d;
        }
        var_r[static_cast<size_t>(b)] = acc / denom;
      }
      std::vector<T> vr(static_cast<size_t>(bins));
      for (int b = 0; b < bins; ++b) vr[static_cast<size_t>(b)] = clamp_log(var_r[static_cast<size_t>(b)], cfg);
      T lmv = mse_vec<T>(vx, vr);
      total += static_cast<T>(w.w_lmv) * lmv;
      for (int b = 0; b < bins; ++b) {
        T dv = upstream * static_cast<T>(w.w_lmv) * T(2) *
               (vr[static_cast<size_t>(b)] - vx[static_cast<size_t>(b)]) / static_cast<T>(bins);
        T dvar = dv * clamp_log_grad(var_r[static_cast<size_t>(b)], cfg);
        T k = dvar * T(2) / denom;
        for (int f = 0; f < frames; ++f)
          dmag[static_cast<size_t>(b) * frames + f] +=
              k * (sgr.at(b, f) - mean_r[static_cast<size_t>(b)]);
      }
    }

    // scatter dmag -> d(re,im) -> dx through the windowed DFT
    const int n = cfg.n_fft;
    const int hop = cfg.hop();
    const auto win = hann_window<T>(n);
    FftPlan<T> plan(n);  // reuse its twiddle tables for cos/sin(2*pi*b*k/n)
    const long long sig_len = static_cast<long long>(len);
    for (int f = 0; f < frames; ++f) {
      const long long start = static_cast<long long>(f) * hop - n / 2;
      for (int k = 0; k < n; ++k) {
        long long t = start + k;
        if (t < 0 || t >= sig_len) continue;
        T acc = 0;
        for (int b = 0; b < bins; ++b) {
          size_t idx = static_cast<size_t>(b) * frames + f;
          T m = sgr.mag[idx];
          if (m <= T(0)) continue;
          T g = dmag[idx];
          if (g == T(0)) continue;
          T dre = g * ws.re[idx] / m;
          T dim = g * ws.im[idx] / m;
          int j = (b * k) % n;
          acc += dre * plan.cos_full[static_cast<size_t>(j)] - dim * plan.sin_full[static_cast<size_t>(j)];
        }
        gxr[static_cast<size_t>(t)] += win[static_cast<size_t>(k)] * acc;
      }
    }
  }
  return total;
}

// Eq-style masked aggregate over a window stored as L patch rows of
// 3*patch_len values (axis-major: x samples, then y, then z).
// loss = (1/sum M) * sum_i M_i * sum_axis combined(x_i_axis, xr_i_axis)
template <class T>
T masked_aggregate(const T* X, const T* Xr, int patch_count, int patch_len,
                   std::span<const uint8_t> mask, const LossWeights& w,
                   const SpectralConfig& cfg, LossComponents* comps = nullptr,
                   bool want_all = false) {
  w.validate();
  if (static_cast<int>(mask.size()) != patch_count)
    raise(Err::shape_mismatch, "mask length does not match patch count");
  int n_masked = 0;
  for (uint8_t m : mask) n_masked += m ? 1 : 0;
  if (n_masked == 0) raise(Err::empty_mask, "masked aggregate needs at least one masked patch");

  const size_t row = static_cast<size_t>(3) * patch_len;
  T total = 0;
  LossComponents agg;
  for (int i = 0; i < patch_count; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    for (int axis = 0; axis < 3; ++axis) {
      std::span<const T> xi(X + static_cast<size_t>(i) * row + static_cast<size_t>(axis) * patch_len,
                            static_cast<size_t>(patch_len));
      std::span<const T> ri(Xr + static_cast<size_t>(i) * row + static_cast<size_t>(axis) * patch_len,
                            static_cast<size_t>(patch_len));
      LossComponents c;
      total += combined_loss(xi, ri, w, cfg, comps != nullptr ? &c : nullptr, want_all);
      if (comps != nullptr) {
        agg.lmm += c.lmm;
        agg.mse += c.mse;
        agg.lmv += c.lmv;
      }
    }
  }
  if (comps != nullptr) {
    comps->lmm = agg.lmm / n_masked;
    comps->mse = agg.mse / n_masked;
    comps->lmv = agg.lmv / n_masked;
  }
  return total / static_cast<T>(n_masked);
}

// Accumulates upstream * d(masked_aggregate)/d(Xr) into gXr. Rows of unmasked
// patches are never touched.
template <class T>
T masked_aggregate_grad(const T* X, const T* Xr, int patch_count, int patch_len,
                        std::span<const uint8_t> mask, const LossWeights& w,
                        const SpectralConfig& cfg, T* gXr, T upstream) {
  w.validate();
  if (static_cast<int>(mask.size()) != patch_count)
    raise(Err::shape_mismatch, "mask length does not match patch count");
  int n_masked = 0;
  for (uint8_t m : mask) n_masked += m ? 1 : 0;
  if (n_masked == 0) raise(Err::empty_mask, "masked aggregate needs at least one masked patch");

  const size_t row = static_cast<size_t>(3) * patch_len;
  const T scale = upstream / static_cast<T>(n_masked);
  T total = 0;
  for (int i = 0; i < patch_count; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    for (int axis = 0; axis < 3; ++axis) {
      size_t off = static_cast<size_t>(i) * row + static_cast<size_t>(axis) * patch_len;
      std::span<const T> xi(X + off, static_cast<size_t>(patch_len));
      std::span<const T> ri(Xr + off, static_cast<size_t>(patch_len));
      std::span<T> gi(gXr + off, static_cast<size_t>(patch_len));
      total += combined_loss_grad(xi, ri, w, cfg, gi, scale);
    }
  }
  return total / static_cast<T>(n_masked);
}

}  // namespace famh::spectral
