#pragma once
// Encoder-only transformer masked autoencoder: linear patch embedding, mask
// token substitution, rotary-embedding attention blocks with SwiGLU and
// pre-norm RMS normalization, plus reconstruction and classification heads.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "famh/autodiff.hpp"
#include "famh/common.hpp"

namespace famh::model {

struct ModelConfig {
  int n_blocks = 12;
  int embed_dim = 256;
  int n_heads = 8;
  int n_classes = 6;
  int patch_len = 300;     // samples per patch at 30 Hz
  int patch_count = 300;   // patches per window
  double rmsnorm_eps = 1e-6;
  double rope_base = 10000.0;

  int patch_dim() const { return 3 * patch_len; }
  int ffn_hidden() const {
    return static_cast<int>(std::lround(8.0 * embed_dim / 3.0));
  }
  int head_dim() const { return embed_dim / n_heads; }
  size_t window_samples() const {
    return static_cast<size_t>(patch_len) * static_cast<size_t>(patch_count);
  }

  void validate() const {
    if (n_blocks < 0) raise(Err::config_error, "model.n_blocks must be >= 0");
    if (embed_dim <= 0 || n_heads <= 0 || embed_dim % n_heads != 0)
      raise(Err::config_error, "model.embed_dim must be divisible by model.n_heads");
    if (head_dim() % 2 != 0) raise(Err::odd_dim, "per-head dimension must be even");
    if (n_classes <= 0) raise(Err::config_error, "model.n_classes must be positive");
    if (patch_len <= 0 || patch_count <= 0)
      raise(Err::config_error, "patch geometry must be positive");
  }
};

template <class T>
struct BlockParams {
  ad::Tensor<T> norm_attn, wq, wk, wv, wo;
  ad::Tensor<T> norm_ffn, w_gate, w_up, w_down;
};

template <class T>
struct MaeParams {
  ad::Tensor<T> w_embed, b_embed;      // patch_dim x d, 1 x d
  ad::Tensor<T> mask_token;            // 1 x d
  std::vector<BlockParams<T>> blocks;
  ad::Tensor<T> final_norm;            // 1 x d
  ad::Tensor<T> w_recon, b_recon;      // d x patch_dim, 1 x patch_dim
  ad::Tensor<T> w_cls, b_cls;          // d x C, 1 x C
};

// Visits every learnable tensor in a fixed order. The order defines the
// optimizer-state and checkpoint layout.
template <class T, class Fn>
void for_each_tensor(MaeParams<T>& p, Fn&& fn) {
  fn("embed.w", p.w_embed);
  fn("embed.b", p.b_embed);
  fn("mask_token", p.mask_token);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    std::string prefix = "block" + std::to_string(i) + ".";
    fn(prefix + "norm_attn", b.norm_attn);
    fn(prefix + "wq", b.wq);
    fn(prefix + "wk", b.wk);
    fn(prefix + "wv", b.wv);
    fn(prefix + "wo", b.wo);
    fn(prefix + "norm_ffn", b.norm_ffn);
    fn(prefix + "w_gate", b.w_gate);
    fn(prefix + "w_up", b.w_up);
    fn(prefix + "w_down", b.w_down);
  }
  fn("final_norm", p.final_norm);
  fn("recon.w", p.w_recon);
  fn("recon.b", p.b_recon);
  fn("cls.w", p.w_cls);
  fn("cls.b", p.b_cls);
}

template <class T, class Fn>
void for_each_tensor(const MaeParams<T>& p, Fn&& fn) {
  for_each_tensor(const_cast<MaeParams<T>&>(p),
                  [&fn](const std::string& name, ad::Tensor<T>& t) {
                    fn(name, const_cast<const ad::Tensor<T>&>(t));
                  });
}

template <class T>
MaeParams<T> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  const size_t d = static_cast<size_t>(cfg.embed_dim);
  const size_t pd = static_cast<size_t>(cfg.patch_dim());
  const size_t h = static_cast<size_t>(cfg.ffn_hidden());
  const size_t C = static_cast<size_t>(cfg.n_classes);

  MaeParams<T> p;
  p.w_embed = ad::Tensor<T>(pd, d);
  p.b_embed = ad::Tensor<T>(1, d);
  p.mask_token = ad::Tensor<T>(1, d);
  p.blocks.resize(static_cast<size_t>(cfg.n_blocks));
  for (auto& b : p.blocks) {
    b.norm_attn = ad::Tensor<T>(1, d, T(1));
    b.wq = ad::Tensor<T>(d, d);
    b.wk = ad::Tensor<T>(d, d);
    b.wv = ad::Tensor<T>(d, d);
    b.wo = ad::Tensor<T>(d, d);
    b.norm_ffn = ad::Tensor<T>(1, d, T(1));
    b.w_gate = ad::Tensor<T>(d, h);
    b.w_up = ad::Tensor<T>(d, h);
    b.w_down = ad::Tensor<T>(h, d);
  }
  p.final_norm = ad::Tensor<T>(1, d, T(1));
  p.w_recon = ad::Tensor<T>(d, pd);
  p.b_recon = ad::Tensor<T>(1, pd);
  p.w_cls = ad::Tensor<T>(d, C);
  p.b_cls = ad::Tensor<T>(1, C);

  // matrices and mask token normal(0, 0.02); biases zero; norm gains one
  Rng rng(mix_seed(seed, "model-init"));
  auto fill = [&rng](ad::Tensor<T>& t) {
    for (auto& v : t.v) v = static_cast<T>(rng.gaussian(0.0, 0.02));
  };
  fill(p.w_embed);
  fill(p.mask_token);
  for (auto& b : p.blocks) {
    fill(b.wq);
    fill(b.wk);
    fill(b.wv);
    fill(b.wo);
    fill(b.w_gate);
    fill(b.w_up);
    fill(b.w_down);
  }
  fill(p.w_recon);
  fill(p.w_cls);
  return p;
}

inline size_t count_parameters(const ModelConfig& cfg) {
  auto params = init_params<float>(cfg, 0);
  size_t total = 0;
  for_each_tensor(params, [&total](const std::string&, const ad::Tensor<float>& t) {
    total += t.size();
  });
  return total;
}

// Tape handles for one attached parameter set.
struct TapeHandles {
  int w_embed = -1, b_embed = -1, mask_token = -1;
  struct Block {
    int norm_attn, wq, wk, wv, wo, norm_ffn, w_gate, w_up, w_down;
  };
  std::vector<Block> blocks;
  int final_norm = -1;
  int w_recon = -1, b_recon = -1;
  int w_cls = -1, b_cls = -1;
};

enum class Trainable { none, all, head_only };

template <class T>
TapeHandles attach(ad::Tape<T>& tape, const MaeParams<T>& p, Trainable mode) {
  const bool all = mode == Trainable::all;
  const bool head = mode == Trainable::head_only || all;
  TapeHandles h;
  h.w_embed = tape.leaf(p.w_embed, all);
  h.b_embed = tape.leaf(p.b_embed, all);
  h.mask_token = tape.leaf(p.mask_token, all);
  for (const auto& b : p.blocks) {
    typename TapeHandles::Block bh;
    bh.norm_attn = tape.leaf(b.norm_attn, all);
    bh.wq = tape.leaf(b.wq, all);
    bh.wk = tape.leaf(b.wk, all);
    bh.wv = tape.leaf(b.wv, all);
    bh.wo = tape.leaf(b.wo, all);
    bh.norm_ffn = tape.leaf(b.norm_ffn, all);
    bh.w_gate = tape.leaf(b.w_gate, all);
    bh.w_up = tape.leaf(b.w_up, all);
    bh.w_down = tape.leaf(b.w_down, all);
    h.blocks.push_back(bh);
  }
  h.final_norm = tape.leaf(p.final_norm, all);
  h.w_recon = tape.leaf(p.w_recon, all);
  h.b_recon = tape.leaf(p.b_recon, all);
  h.w_cls = tape.leaf(p.w_cls, head);
  h.b_cls = tape.leaf(p.b_cls, head);
  return h;
}

// Gathers gradients in for_each_tensor order; absent gradients come back as
// zero tensors of the right shape.
template <class T>
std::vector<ad::Tensor<T>> collect_grads(const ad::Tape<T>& tape, const TapeHandles& h,
                                         const MaeParams<T>& p) {
  std::vector<int> ids = {h.w_embed, h.b_embed, h.mask_token};
  for (const auto& b : h.blocks)
    for (int id : {b.norm_attn, b.wq, b.wk, b.wv, b.wo, b.norm_ffn, b.w_gate, b.w_up, b.w_down})
      ids.push_back(id);
  ids.push_back(h.final_norm);
  ids.push_back(h.w_recon);
  ids.push_back(h.b_recon);
  ids.push_back(h.w_cls);
  ids.push_back(h.b_cls);

  std::vector<const ad::Tensor<T>*> shapes;
  for_each_tensor(p, [&shapes](const std::string&, const ad::Tensor<T>& t) {
    shapes.push_back(&t);
  });

  std::vector<ad::Tensor<T>> out;
  out.reserve(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto& g = tape.grad(ids[i]);
    if (g.size() == 0)
      out.emplace_back(shapes[i]->rows, shapes[i]->cols);
    else
      out.push_back(g);
  }
  return out;
}

// Linear patch embedding: token_i = W_e * flatten(patch_i) + b_e.
template <class T>
int embed_patches(ad::Tape<T>& tape, const TapeHandles& h, int patches) {
  return tape.add_row(tape.matmul(patches, h.w_embed), h.b_embed);
}

// Draws exactly ceil(rate * L) mask positions uniformly without replacement.
inline std::vector<uint8_t> sample_mask(int patch_count, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) raise(Err::config_error, "mask rate must be in [0, 1)");
  const int L = patch_count;
  const int k = static_cast<int>(std::ceil(rate * L));
  std::vector<int> idx(static_cast<size_t>(L));
  for (int i = 0; i < L; ++i) idx[static_cast<size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(L - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  std::vector<uint8_t> mask(static_cast<size_t>(L), 0);
  for (int i = 0; i < k; ++i) mask[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
  return mask;
}

template <class T>
int apply_mask(ad::Tape<T>& tape, const TapeHandles& h, int tokens,
               const std::vector<uint8_t>& mask) {
  return tape.mask_rows(tokens, h.mask_token, mask);
}

// One pre-norm block: x += Attn(RMSNorm(x)); x += SwiGLU(RMSNorm(x)).
template <class T>
int encoder_block(ad::Tape<T>& tape, const typename TapeHandles::Block& b,
                  const ModelConfig& cfg, int x, const std::vector<long long>& positions) {
  T eps = static_cast<T>(cfg.rmsnorm_eps);
  T base = static_cast<T>(cfg.rope_base);

  int hn = tape.rmsnorm(x, b.norm_attn, eps);
  int q = tape.rope(tape.matmul(hn, b.wq), cfg.n_heads, positions, base);
  int k = tape.rope(tape.matmul(hn, b.wk), cfg.n_heads, positions, base);
  int v = tape.matmul(hn, b.wv);
  int scores = tape.mh_scores(q, k, cfg.n_heads);
  int attn = tape.mh_mix(tape.softmax(scores), v, cfg.n_heads);
  x = tape.add(x, tape.matmul(attn, b.wo));

  int fn = tape.rmsnorm(x, b.norm_ffn, eps);
  int gated = tape.mul(tape.silu(tape.matmul(fn, b.w_gate)), tape.matmul(fn, b.w_up));
  return tape.add(x, tape.matmul(gated, b.w_down));
}

template <class T>
int encoder_forward(ad::Tape<T>& tape, const TapeHandles& h, const ModelConfig& cfg, int tokens,
                    const std::vector<long long>& positions) {
  int x = tokens;
  for (const auto& b : h.blocks) x = encoder_block(tape, b, cfg, x, positions);
  return tape.rmsnorm(x, h.final_norm, static_cast<T>(cfg.rmsnorm_eps));
}

template <class T>
int reconstruction_head(ad::Tape<T>& tape, const TapeHandles& h, int tokens) {
  return tape.add_row(tape.matmul(tokens, h.w_recon), h.b_recon);
}

template <class T>
int classification_head(ad::Tape<T>& tape, const TapeHandles& h, int tokens) {
  return tape.add_row(tape.matmul(tokens, h.w_cls), h.b_cls);
}

inline std::vector<long long> default_positions(int patch_count) {
  std::vector<long long> pos(static_cast<size_t>(patch_count));
  for (int i = 0; i < patch_count; ++i) pos[static_cast<size_t>(i)] = i;
  return pos;
}

// Full pretraining pass for one window (patch rows of 3*patch_len values).
// Returns the reconstruction node; the caller attaches the loss.
template <class T>
int forward_reconstruct(ad::Tape<T>& tape, const TapeHandles& h, const ModelConfig& cfg,
                        const ad::Tensor<T>& patches, const std::vector<uint8_t>& mask) {
  if (patches.cols != static_cast<size_t>(cfg.patch_dim()))
    raise(Err::shape_mismatch, "patch width does not match model patch_dim");
  int x = tape.leaf(patches);
  int tokens = embed_patches(tape, h, x);
  int masked = apply_mask(tape, h, tokens, mask);
  int encoded = encoder_forward(tape, h, cfg, masked,
                                default_positions(static_cast<int>(patches.rows)));
  return reconstruction_head(tape, h, encoded);
}

// Finetuning/inference pass: no masking, per-patch logits.
template <class T>
int forward_classify(ad::Tape<T>& tape, const TapeHandles& h, const ModelConfig& cfg,
                     const ad::Tensor<T>& patches) {
  if (patches.cols != static_cast<size_t>(cfg.patch_dim()))
    raise(Err::shape_mismatch, "patch width does not match model patch_dim");
  int x = tape.leaf(patches);
  int tokens = embed_patches(tape, h, x);
  int encoded = encoder_forward(tape, h, cfg, tokens,
                                default_positions(static_cast<int>(patches.rows)));
  return classification_head(tape, h, encoded);
}

// Encoder output only (used for embedding export).
template <class T>
int forward_encode(ad::Tape<T>& tape, const TapeHandles& h, const ModelConfig& cfg,
                   const ad::Tensor<T>& patches) {
  int x = tape.leaf(patches);
  int tokens = embed_patches(tape, h, x);
  return encoder_forward(tape, h, cfg, tokens,
                         default_positions(static_cast<int>(patches.rows)));
}

}  // namespace famh::model
