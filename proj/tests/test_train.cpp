#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "famh/train.hpp"
#include "oracles.hpp"

using namespace famh;
using namespace famh::train;
using famh::ad::Tensor;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "famh_train_tests";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

model::ModelConfig tiny_model() {
  model::ModelConfig cfg;
  cfg.n_blocks = 1;
  cfg.embed_dim = 8;
  cfg.n_heads = 2;
  cfg.n_classes = 3;
  cfg.patch_len = 32;
  cfg.patch_count = 4;
  return cfg;
}

// 30 Hz store with three labeled synthetic recordings
ingest::RecordingStore tiny_store(int n_recordings = 3, double seconds = 120.0) {
  ingest::RecordingStore store;
  for (int r = 0; r < n_recordings; ++r) {
    ingest::SyntheticConfig cfg;
    cfg.classes = {
        {"rest", 0.0, {}, 0.01, 0.0},
        {"slow", 1.5, {0.4}, 0.01, 0.0},
        {"fast", 4.0, {0.6, 0.2}, 0.01, 0.0},
    };
    cfg.transition = {{0.0, 0.5, 0.5}, {0.5, 0.0, 0.5}, {0.5, 0.5, 0.0}};
    cfg.dwell_mean_s = {8.0, 8.0, 8.0};
    cfg.seed = 1000 + static_cast<uint64_t>(r);
    auto synth = ingest::generate_synthetic(cfg, seconds, 30.0);
    ingest::Recording30 rec;
    rec.id = "rec" + std::to_string(r);
    rec.samples = std::move(synth.raw.samples);
    rec.wear_segments = {{0, rec.samples.size()}};
    store.add(std::move(rec), std::move(synth.track30));
  }
  return store;
}

PretrainOptions tiny_pretrain_options(int epochs) {
  PretrainOptions opt;
  opt.model = tiny_model();
  opt.spectral.n_fft = 16;
  opt.loss = {1.0, 0.0, 0.0};
  opt.mask_rate = 0.5;
  opt.schedule.base_lr = 1e-3;
  opt.data.recordings_per_batch = 2;
  opt.data.windows_per_recording = 4;
  opt.data.pretrain_val_fraction = 0.34;  // 1 of 3 recordings
  opt.epochs = epochs;
  return opt;
}

bool params_equal(const model::MaeParams<float>& a, const model::MaeParams<float>& b) {
  bool equal = true;
  std::vector<const Tensor<float>*> ta, tb;
  model::for_each_tensor(a, [&](const std::string&, const Tensor<float>& t) { ta.push_back(&t); });
  model::for_each_tensor(b, [&](const std::string&, const Tensor<float>& t) { tb.push_back(&t); });
  for (size_t i = 0; i < ta.size(); ++i) equal = equal && (ta[i]->v == tb[i]->v);
  return equal;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("adam: zero gradients leave parameters alone, first step is lr-sized") {
  Tensor<float> p(2, 3, 1.0f);
  std::vector<Tensor<float>*> params = {&p};
  AdamState<float> st;
  st.m = {Tensor<float>(2, 3)};
  st.v = {Tensor<float>(2, 3)};
  AdamConfig cfg;

  std::vector<Tensor<float>> zero = {Tensor<float>(2, 3)};
  adam_step(params, zero, st, 0.01, cfg);
  for (float v : p.v) CHECK(v == 1.0f);

  // the very first step moves by ~lr against the gradient sign
  AdamState<float> fresh;
  fresh.m = {Tensor<float>(2, 3)};
  fresh.v = {Tensor<float>(2, 3)};
  Tensor<float> g(2, 3);
  g.v = {0.5f, -2.0f, 1e-3f, 3.0f, -0.25f, 0.75f};
  Tensor<float> before = p;
  adam_step(params, {g}, fresh, 0.01, cfg);
  for (size_t i = 0; i < p.size(); ++i) {
    double delta = static_cast<double>(p.v[i]) - static_cast<double>(before.v[i]);
    CHECK(std::abs(delta) == doctest::Approx(0.01).epsilon(1e-3));
    CHECK(delta * g.v[i] < 0.0);
  }
}

TEST_CASE("adam is deterministic across engines") {
  Rng rng(2);
  auto run = [&](uint64_t seed) {
    Rng local(seed);
    Tensor<float> p(4, 4);
    for (auto& v : p.v) v = static_cast<float>(local.uniform(-1, 1));
    std::vector<Tensor<float>*> params = {&p};
    AdamState<float> st;
    st.m = {Tensor<float>(4, 4)};
    st.v = {Tensor<float>(4, 4)};
    AdamConfig cfg;
    for (int it = 0; it < 10; ++it) {
      Tensor<float> g(4, 4);
      Rng gr(mix_seed(seed, "grad", static_cast<uint64_t>(it)));
      for (auto& v : g.v) v = static_cast<float>(gr.uniform(-1, 1));
      adam_step(params, {g}, st, 1e-2, cfg);
    }
    return p;
  };
  auto a = run(42);
  auto b = run(42);
  CHECK(a.v == b.v);
}

TEST_CASE("lr schedule: warmup, restarts, cosine midpoint, flat finetune") {
  ScheduleConfig cfg;  // pretrain defaults: base 1e-3, 1 warmup epoch, restart every epoch
  const uint64_t spe = 100;

  CHECK(lr_at(0, spe, cfg) == 0.0);
  CHECK(lr_at(50, spe, cfg) == doctest::Approx(5e-4));
  // first step of epoch 2 restarts at the base rate
  CHECK(lr_at(spe, spe, cfg) == doctest::Approx(1e-3));
  // midpoint of epoch 2
  CHECK(lr_at(spe + 50, spe, cfg) == doctest::Approx(5e-4));
  // every restart boundary equals base
  for (uint64_t e = 1; e < 5; ++e) CHECK(lr_at(e * spe, spe, cfg) == doctest::Approx(1e-3));
  // continuous within an epoch
  for (uint64_t s = spe; s < 2 * spe - 1; ++s)
    CHECK(std::abs(lr_at(s + 1, spe, cfg) - lr_at(s, spe, cfg)) < 2e-5);

  ScheduleConfig flat;
  flat.mode = ScheduleMode::finetune_flat;
  for (uint64_t s : {0ull, 7ull, 1000ull}) CHECK(lr_at(s, spe, flat) == doctest::Approx(1e-3));
}

TEST_CASE("class weights: balance, ratios, absent classes") {
  std::vector<int> balanced = {0, 1, 2, 0, 1, 2};
  auto w = class_weights(balanced, 3, 3);
  for (double v : w) CHECK(v == doctest::Approx(1.0));

  std::vector<int> skewed;
  skewed.insert(skewed.end(), 90, 0);
  skewed.insert(skewed.end(), 10, 1);
  w = class_weights(skewed, 2, 2);
  CHECK(w[1] / w[0] == doctest::Approx(9.0));
  CHECK((w[0] + w[1]) / 2.0 == doctest::Approx(1.0));

  // missing labels are excluded from the counts
  std::vector<int> with_missing = skewed;
  with_missing.insert(with_missing.end(), 50, 2);  // 2 == missing here
  auto w2 = class_weights(with_missing, 2, 2);
  CHECK(w2[0] == doctest::Approx(w[0]));
  CHECK(w2[1] == doctest::Approx(w[1]));

  // absent class gets zero weight
  auto w3 = class_weights(std::vector<int>{0, 0, 1, 1}, 3, 3);
  CHECK(w3[2] == 0.0);
  CHECK((w3[0] + w3[1]) / 2.0 == doctest::Approx(1.0));

  bool threw = false;
  try {
    class_weights(std::vector<int>{2, 2}, 2, 2);
  } catch (const Error& e) {
    threw = e.code() == Err::no_labels;
  }
  CHECK(threw);
}

TEST_CASE("weighted cross-entropy identities") {
  // uniform logits, unit weights: ln C per labeled patch
  Tensor<double> logits(4, 6, 0.0);
  std::vector<int> labels = {0, 3, 5, 2};
  std::vector<double> ones(6, 1.0);
  CHECK(weighted_ce(logits, labels, ones, 6) == doctest::Approx(std::log(6.0)).epsilon(1e-12));
  CHECK(weighted_ce(logits, labels, ones, 6) == doctest::Approx(1.791759).epsilon(1e-6));

  // equal weights match unweighted cross-entropy on random logits
  Rng rng(5);
  Tensor<double> z(8, 4);
  for (auto& v : z.v) v = rng.uniform(-2, 2);
  std::vector<int> ys = {0, 1, 2, 3, 0, 1, 2, 3};
  double manual = 0.0;
  for (size_t i = 0; i < 8; ++i) {
    double mx = *std::max_element(z.row(i), z.row(i) + 4);
    double sum = 0;
    for (int c = 0; c < 4; ++c) sum += std::exp(z.at(i, static_cast<size_t>(c)) - mx);
    manual -= z.at(i, static_cast<size_t>(ys[i])) - mx - std::log(sum);
  }
  manual /= 8.0;
  CHECK(std::abs(weighted_ce(z, ys, std::vector<double>(4, 1.0), 4) - manual) < 1e-9);

  // a missing-labeled row contributes nothing: removing it changes nothing
  Tensor<double> z2(3, 4);
  Rng rng2(6);
  for (auto& v : z2.v) v = rng2.uniform(-1, 1);
  std::vector<int> with_g = {1, 4, 2};  // middle row missing
  Tensor<double> z3(2, 4);
  for (size_t j = 0; j < 4; ++j) {
    z3.at(0, j) = z2.at(0, j);
    z3.at(1, j) = z2.at(2, j);
  }
  std::vector<int> no_g = {1, 2};
  CHECK(weighted_ce(z2, with_g, std::vector<double>(4, 1.0), 4) ==
        doctest::Approx(weighted_ce(z3, no_g, std::vector<double>(4, 1.0), 4)).epsilon(1e-12));

  // a huge correct-class margin drives the loss to zero
  Tensor<double> sure(1, 3, 0.0);
  sure.at(0, 1) = 60.0;
  CHECK(weighted_ce(sure, std::vector<int>{1}, std::vector<double>(3, 1.0), 3) < 1e-12);
}

TEST_CASE("checkpoint round trip and shape guard") {
  auto cfg = tiny_model();
  auto params = model::init_params<float>(cfg, 7);
  auto st = AdamState<float>::like(params);
  for (auto& t : st.m)
    for (auto& v : t.v) v = 0.25f;
  st.step = 17;

  auto path = temp_dir() / "ck.famc";
  save_checkpoint(params, &st, 17, 0xabcdef, path);
  auto ck = load_checkpoint(path);
  CHECK(ck.config_digest == 0xabcdef);
  CHECK(ck.step == 17);
  CHECK(ck.has_optimizer_state());

  auto restored = model::init_params<float>(cfg, 999);
  auto st2 = AdamState<float>::like(restored);
  restore_params(ck, restored, &st2);
  CHECK(params_equal(params, restored));
  CHECK(st2.step == 17);
  CHECK(st2.m[0].v == st.m[0].v);

  // loading into a different architecture fails with a shape error
  auto other_cfg = tiny_model();
  other_cfg.embed_dim = 16;
  other_cfg.n_heads = 2;
  auto wrong = model::init_params<float>(other_cfg, 1);
  bool threw = false;
  try {
    restore_params(ck, wrong, nullptr);
  } catch (const Error& e) {
    threw = e.code() == Err::shape_mismatch;
  }
  CHECK(threw);

  auto garbled = temp_dir() / "bad.famc";
  write_file_atomic(garbled, "NOTACKPT");
  threw = false;
  try {
    load_checkpoint(garbled);
  } catch (const Error& e) {
    threw = e.code() == Err::bad_magic;
  }
  CHECK(threw);
}

TEST_CASE("pretrain completes, logs one row per epoch, and is deterministic") {
  auto store = tiny_store();
  auto opt = tiny_pretrain_options(2);
  auto res1 = pretrain(store, opt);
  CHECK(res1.log.size() == 2);
  CHECK(res1.step == 2);  // 2 train recordings in one batch, 1 batch per epoch... times 2 epochs
  CHECK(res1.log[0].epoch == 1);
  CHECK(res1.log[1].epoch == 2);
  CHECK(res1.log[1].val_lmm > 0.0);

  auto res2 = pretrain(store, opt);
  CHECK(params_equal(res1.params, res2.params));
  for (size_t i = 0; i < res1.log.size(); ++i) {
    CHECK(res1.log[i].val_lmm == res2.log[i].val_lmm);
    CHECK(res1.log[i].train_lmm == res2.log[i].train_lmm);
  }
}

TEST_CASE("prefetch workers do not change training results") {
  auto store = tiny_store();
  auto opt1 = tiny_pretrain_options(2);
  opt1.data.workers = 1;
  auto opt2 = tiny_pretrain_options(2);
  opt2.data.workers = 3;
  auto r1 = pretrain(store, opt1);
  auto r2 = pretrain(store, opt2);
  CHECK(params_equal(r1.params, r2.params));
  for (size_t i = 0; i < r1.log.size(); ++i) CHECK(r1.log[i].val_lmm == r2.log[i].val_lmm);

  FinetuneOptions f1;
  f1.model = opt1.model;
  f1.epochs = 2;
  f1.data.finetune_val_fraction = 0.34;
  FinetuneOptions f2 = f1;
  f2.data.workers = 3;
  auto fa = finetune(store, r1.params, f1);
  auto fb = finetune(store, r1.params, f2);
  CHECK(fa.params.w_cls.v == fb.params.w_cls.v);
  CHECK(fa.log.back().val_balanced_accuracy == fb.log.back().val_balanced_accuracy);
}

TEST_CASE("a diverging run aborts with the last good state checkpointed") {
  auto store = tiny_store();
  auto opt = tiny_pretrain_options(4);
  opt.schedule.base_lr = 1e35;  // guarantees overflow within a few steps
  opt.checkpoint_out = temp_dir() / "nan_abort.famc";
  std::filesystem::remove(opt.checkpoint_out);

  bool threw = false;
  try {
    pretrain(store, opt);
  } catch (const Error& e) {
    threw = e.code() == Err::nan_gradient;
  }
  CHECK(threw);
  REQUIRE(std::filesystem::exists(opt.checkpoint_out));
  auto ck = load_checkpoint(opt.checkpoint_out);
  auto restored = model::init_params<float>(opt.model, 1);
  restore_params(ck, restored, nullptr);  // shapes intact, payload loadable
  bool finite = true;
  model::for_each_tensor(restored, [&](const std::string&, const ad::Tensor<float>& t) {
    finite = finite && t.all_finite();
  });
  CHECK(finite);
}

TEST_CASE("pretrain with zero learning rate leaves parameters at init") {
  auto store = tiny_store();
  auto opt = tiny_pretrain_options(1);
  opt.schedule.base_lr = 0.0;
  opt.schedule.eta_min = 0.0;
  auto res = pretrain(store, opt);
  auto init = model::init_params<float>(opt.model, opt.seeds.init);
  CHECK(params_equal(res.params, init));
}

TEST_CASE("checkpoint resume reproduces the straight-through run bit-exactly") {
  auto store = tiny_store();
  auto path = temp_dir() / "resume.famc";

  auto first = tiny_pretrain_options(1);
  first.checkpoint_out = path;
  pretrain(store, first);

  auto resumed = tiny_pretrain_options(2);
  resumed.resume_from = path;
  auto split_run = pretrain(store, resumed);

  auto straight = pretrain(store, tiny_pretrain_options(2));
  CHECK(params_equal(split_run.params, straight.params));
  CHECK(split_run.step == straight.step);
  CHECK(split_run.log.back().val_lmm == straight.log.back().val_lmm);
}

TEST_CASE("finetune trains only the head and logs metrics") {
  auto store = tiny_store(4, 180.0);
  auto pre_opt = tiny_pretrain_options(1);
  pre_opt.data.pretrain_val_fraction = 0.25;
  auto pre = pretrain(store, pre_opt);

  FinetuneOptions opt;
  opt.model = pre_opt.model;
  opt.epochs = 3;
  opt.data.finetune_val_fraction = 0.25;
  opt.data.finetune_batch_windows = 64;
  auto res = finetune(store, pre.params, opt);
  CHECK(res.log.size() == 3);
  CHECK(res.log[0].lr == doctest::Approx(1e-3));

  // encoder, embedding, and mask token stay bit-identical
  auto frozen_check = [&](const model::MaeParams<float>& a, const model::MaeParams<float>& b) {
    CHECK(a.w_embed.v == b.w_embed.v);
    CHECK(a.mask_token.v == b.mask_token.v);
    CHECK(a.final_norm.v == b.final_norm.v);
    CHECK(a.w_recon.v == b.w_recon.v);
    for (size_t i = 0; i < a.blocks.size(); ++i) {
      CHECK(a.blocks[i].wq.v == b.blocks[i].wq.v);
      CHECK(a.blocks[i].w_gate.v == b.blocks[i].w_gate.v);
    }
  };
  frozen_check(pre.params, res.params);
  // and the head must have moved
  CHECK(res.params.w_cls.v != pre.params.w_cls.v);

  // zero epochs leave the head at its initialization
  FinetuneOptions zero = opt;
  zero.epochs = 0;
  auto res0 = finetune(store, pre.params, zero);
  CHECK(res0.params.w_cls.v == pre.params.w_cls.v);
  CHECK(res0.params.b_cls.v == pre.params.b_cls.v);
}

TEST_CASE("reduced training fractions form nested subsets") {
  auto store = tiny_store(8, 60.0);
  auto ids_at = [&](double fraction) {
    auto opt = tiny_pretrain_options(1);
    opt.data.pretrain_fraction = fraction;
    opt.data.pretrain_val_fraction = 0.125;
    opt.schedule.base_lr = 0.0;  // only the split matters here
    return pretrain(store, opt).train_ids;
  };
  auto full = ids_at(1.0);
  auto half = ids_at(0.5);
  auto quarter = ids_at(0.25);
  CHECK(full.size() == 7);
  CHECK(half.size() == 4);  // ceil(0.5 * 7)
  CHECK(quarter.size() == 2);
  for (const auto& id : quarter)
    CHECK(std::find(half.begin(), half.end(), id) != half.end());
  for (const auto& id : half)
    CHECK(std::find(full.begin(), full.end(), id) != full.end());
}

TEST_CASE("split_ids is deterministic with sane sizes") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("r" + std::to_string(i));
  auto [train1, val1] = split_ids(ids, 0.2, 99);
  auto [train2, val2] = split_ids(ids, 0.2, 99);
  CHECK(train1 == train2);
  CHECK(val1 == val2);
  CHECK(val1.size() == 2);
  CHECK(train1.size() == 8);

  auto [t3, v3] = split_ids({"only"}, 0.5, 1);
  CHECK(t3.size() == 1);
  CHECK(v3.empty());
}

}  // TEST_SUITE
