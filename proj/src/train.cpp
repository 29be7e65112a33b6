#include "famh/train.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <future>

#include "famh/metrics.hpp"

namespace famh::train {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<std::string> shuffled(std::vector<std::string> ids, uint64_t seed) {
  Rng rng(seed);
  for (size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[rng.below(i)]);
  return ids;
}

std::vector<std::string> take_fraction(std::vector<std::string> ids, double fraction,
                                       uint64_t seed) {
  if (fraction >= 1.0) return ids;
  if (!(fraction > 0.0)) raise(Err::config_error, "training fraction must be in (0, 1]");
  auto order = shuffled(std::move(ids), seed);
  size_t keep = std::max<size_t>(1, static_cast<size_t>(std::ceil(fraction * order.size())));
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<ad::Tensor<float>*> param_pointers(model::MaeParams<float>& params) {
  std::vector<ad::Tensor<float>*> out;
  model::for_each_tensor(params, [&out](const std::string&, ad::Tensor<float>& t) {
    out.push_back(&t);
  });
  return out;
}

void ensure_finite_grads(const std::vector<ad::Tensor<float>>& grads,
                         const model::MaeParams<float>& params, const AdamState<float>& opt,
                         uint64_t step, uint64_t digest, const std::filesystem::path& out) {
  for (const auto& g : grads)
    if (!g.all_finite()) {
      if (!out.empty()) {
        save_checkpoint(params, &opt, step, digest, out);
        logf(LogLevel::error, "non-finite gradient at step %llu, checkpoint saved to %s",
             static_cast<unsigned long long>(step), out.string().c_str());
      }
      raise(Err::nan_gradient, "non-finite gradient at step " + std::to_string(step));
    }
}

}  // namespace

double lr_at(uint64_t step, uint64_t steps_per_epoch, const ScheduleConfig& cfg) {
  cfg.validate();
  if (cfg.mode == ScheduleMode::finetune_flat) return cfg.base_lr;
  if (steps_per_epoch == 0) raise(Err::config_error, "steps_per_epoch must be positive");
  const uint64_t warm = static_cast<uint64_t>(cfg.warmup_epochs) * steps_per_epoch;
  if (step < warm)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  const uint64_t period = static_cast<uint64_t>(cfg.restart_period_epochs) * steps_per_epoch;
  const uint64_t in_period = (step - warm) % period;
  const double frac = static_cast<double>(in_period) / static_cast<double>(period);
  return cfg.eta_min + 0.5 * (cfg.base_lr - cfg.eta_min) * (1.0 + std::cos(kPi * frac));
}

std::vector<double> class_weights(std::span<const int> labels, int n_classes, int missing) {
  std::vector<int64_t> counts(static_cast<size_t>(n_classes), 0);
  int64_t labeled = 0;
  for (int y : labels) {
    if (y == missing) continue;
    if (y < 0 || y >= n_classes) raise(Err::shape_mismatch, "label index out of range");
    ++counts[static_cast<size_t>(y)];
    ++labeled;
  }
  if (labeled == 0) raise(Err::no_labels, "no labeled samples for class weighting");

  std::vector<double> w(static_cast<size_t>(n_classes), 0.0);
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    if (counts[static_cast<size_t>(c)] == 0) {
      logf(LogLevel::info, "class %d absent from training labels, weight set to 0", c);
      continue;
    }
    w[static_cast<size_t>(c)] =
        static_cast<double>(labeled) / static_cast<double>(counts[static_cast<size_t>(c)]);
    sum += w[static_cast<size_t>(c)];
    ++present;
  }
  // normalize to mean 1 over the classes that are present
  const double scale = static_cast<double>(present) / sum;
  for (double& v : w) v *= scale;
  return w;
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_ids(
    std::vector<std::string> ids, double val_fraction, uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  if (ids.size() < 2) return {ids, {}};
  auto order = shuffled(std::move(ids), seed);
  size_t n_val = static_cast<size_t>(std::llround(val_fraction * static_cast<double>(order.size())));
  n_val = std::clamp<size_t>(n_val, 1, order.size() - 1);
  std::vector<std::string> val(order.begin(), order.begin() + static_cast<long>(n_val));
  std::vector<std::string> train(order.begin() + static_cast<long>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train, val};
}

namespace {

struct BatchComponents {
  double mse = 0.0, lmm = 0.0, lmv = 0.0;
  size_t windows = 0;

  void absorb(const spectral::LossComponents& c) {
    mse += c.mse;
    lmm += c.lmm;
    lmv += c.lmv;
    ++windows;
  }
};

// Average loss components over windows against frozen parameters.
BatchComponents eval_components(const model::MaeParams<float>& params,
                                const PretrainOptions& opt,
                                const std::vector<ingest::Window>& windows, uint64_t mask_seed) {
  BatchComponents agg;
  for (size_t wi = 0; wi < windows.size(); ++wi) {
    auto patches = ingest::patchify(windows[wi]);
    Rng mrng(mix_seed(mask_seed, "val-mask", wi));
    auto mask = model::sample_mask(opt.model.patch_count, opt.mask_rate, mrng);
    ad::Tape<float> tape;
    auto h = model::attach(tape, params, model::Trainable::none);
    int recon = model::forward_reconstruct(tape, h, opt.model, patches, mask);
    spectral::LossComponents comps;
    tape.spectral_loss(recon, patches, mask, opt.loss, opt.spectral, opt.model.patch_len, &comps,
                       true);
    agg.absorb(comps);
  }
  return agg;
}

}  // namespace

PretrainResult pretrain(const ingest::RecordingStore& store, const PretrainOptions& opt) {
  opt.model.validate();
  opt.spectral.validate();
  opt.loss.validate();
  opt.schedule.validate();
  if (!(opt.mask_rate > 0.0) || opt.mask_rate >= 1.0)
    raise(Err::config_error, "pretraining needs a mask rate in (0, 1)");
  if (opt.epochs < 1) raise(Err::config_error, "pretraining needs at least one epoch");

  const ingest::WindowGeometry geo{opt.model.patch_len, opt.model.patch_count};
  auto [train_ids, val_ids] =
      split_ids(store.ids(), opt.data.pretrain_val_fraction,
                mix_seed(opt.seeds.windowing, "pretrain-split"));
  train_ids = take_fraction(std::move(train_ids), opt.data.pretrain_fraction,
                            mix_seed(opt.seeds.windowing, "pretrain-subset"));
  if (train_ids.empty()) raise(Err::config_error, "no training recordings");

  PretrainResult res;
  res.train_ids = train_ids;
  res.val_ids = val_ids;
  res.params = model::init_params<float>(opt.model, opt.seeds.init);
  res.opt = AdamState<float>::like(res.params);

  const size_t rpb = static_cast<size_t>(opt.data.recordings_per_batch);
  const size_t n_batches = (train_ids.size() + rpb - 1) / rpb;
  const uint64_t steps_per_epoch = n_batches;

  uint64_t step = 0;
  int start_epoch = 0;
  if (!opt.resume_from.empty()) {
    auto ck = load_checkpoint(opt.resume_from);
    if (ck.config_digest != opt.config_digest)
      logf(LogLevel::info, "resuming from a checkpoint with a different config digest");
    restore_params(ck, res.params, ck.has_optimizer_state() ? &res.opt : nullptr);
    step = ck.step;
    if (step % steps_per_epoch != 0)
      raise(Err::config_error, "checkpoint step is not an epoch boundary for this data layout");
    start_epoch = static_cast<int>(step / steps_per_epoch);
  }

  // fixed validation windows and masks keep the per-epoch numbers comparable
  std::vector<ingest::Window> val_windows;
  if (val_ids.empty())
    logf(LogLevel::info, "no validation recordings; validation loss columns stay zero");
  if (!val_ids.empty()) {
    auto val_plan = ingest::make_pretrain_plan(store, val_ids, geo, opt.data.windows_per_recording,
                                               mix_seed(opt.seeds.windowing, "val-plan"));
    val_windows = ingest::assemble_batch(val_plan, store, geo);
  }

  auto ptrs = param_pointers(res.params);

  for (int epoch = start_epoch; epoch < opt.epochs; ++epoch) {
    auto order = shuffled(train_ids, mix_seed(opt.seeds.windowing, "order", epoch));
    std::vector<ingest::BatchPlan> plans(n_batches);
    for (size_t b = 0; b < n_batches; ++b) {
      std::vector<std::string> chunk(
          order.begin() + static_cast<long>(b * rpb),
          order.begin() + static_cast<long>(std::min(order.size(), (b + 1) * rpb)));
      plans[b] = ingest::make_pretrain_plan(store, chunk, geo, opt.data.windows_per_recording,
                                            mix_seed(opt.seeds.windowing, "plan", epoch, b));
    }

    // bounded prefetch of batch assembly; results consumed in plan order
    std::deque<std::future<std::vector<ingest::Window>>> queue;
    size_t next_launch = 0;
    auto pump = [&] {
      while (opt.data.workers > 1 && next_launch < n_batches &&
             queue.size() < static_cast<size_t>(opt.data.workers)) {
        size_t idx = next_launch++;
        queue.push_back(std::async(std::launch::async, [&store, &plans, idx, geo] {
          return ingest::assemble_batch(plans[idx], store, geo);
        }));
      }
    };

    const double lr_epoch = lr_at(step, steps_per_epoch, opt.schedule);
    BatchComponents train_comps;

    for (size_t b = 0; b < n_batches; ++b) {
      pump();
      std::vector<ingest::Window> windows;
      if (opt.data.workers > 1) {
        windows = queue.front().get();
        queue.pop_front();
        pump();
      } else {
        windows = ingest::assemble_batch(plans[b], store, geo);
      }

      const double lr = lr_at(step, steps_per_epoch, opt.schedule);
      ad::Tape<float> tape;
      auto handles = model::attach(tape, res.params, model::Trainable::all);
      int total = -1;
      for (size_t wi = 0; wi < windows.size(); ++wi) {
        auto patches = ingest::patchify(windows[wi]);
        Rng mrng(mix_seed(opt.seeds.masking, "mask", step, wi));
        auto mask = model::sample_mask(opt.model.patch_count, opt.mask_rate, mrng);
        int recon = model::forward_reconstruct(tape, handles, opt.model, patches, mask);
        spectral::LossComponents comps;
        int lnode = tape.spectral_loss(recon, patches, mask, opt.loss, opt.spectral,
                                       opt.model.patch_len, &comps, true);
        train_comps.absorb(comps);
        total = total < 0 ? lnode : tape.add(total, lnode);
      }
      int mean = tape.scale(total, 1.0f / static_cast<float>(windows.size()));
      if (!std::isfinite(static_cast<double>(tape.value(mean).v[0]))) {
        if (!opt.checkpoint_out.empty())
          save_checkpoint(res.params, &res.opt, step, opt.config_digest, opt.checkpoint_out);
        raise(Err::nan_gradient, "non-finite loss at step " + std::to_string(step));
      }
      tape.backward(mean);
      auto grads = model::collect_grads(tape, handles, res.params);
      ensure_finite_grads(grads, res.params, res.opt, step, opt.config_digest,
                          opt.checkpoint_out);
      adam_step(ptrs, grads, res.opt, lr, opt.adam);
      ++step;
    }

    PretrainEpochLog row;
    row.epoch = epoch + 1;
    row.lr = lr_epoch;
    row.train_mse = train_comps.windows ? train_comps.mse / train_comps.windows : 0.0;
    row.train_lmm = train_comps.windows ? train_comps.lmm / train_comps.windows : 0.0;
    if (!val_windows.empty()) {
      auto vc = eval_components(res.params, opt, val_windows, opt.seeds.masking);
      row.val_mse = vc.mse / vc.windows;
      row.val_lmm = vc.lmm / vc.windows;
      row.val_lmv = vc.lmv / vc.windows;
    }
    res.log.push_back(row);
    logf(LogLevel::info, "pretrain epoch %d lr %.3g val_lmm %.6g val_mse %.6g", row.epoch, row.lr,
         row.val_lmm, row.val_mse);
    if (!opt.checkpoint_out.empty())
      save_checkpoint(res.params, &res.opt, step, opt.config_digest, opt.checkpoint_out);
  }
  res.step = step;
  return res;
}

namespace {

struct CachedWindow {
  ad::Tensor<float> tokens;  // L x d encoder outputs, frozen
  std::vector<int> labels;
  bool any_labeled = false;
};

std::vector<CachedWindow> encode_windows(const ingest::RecordingStore& store,
                                         const std::vector<std::string>& ids,
                                         const model::MaeParams<float>& params,
                                         const model::ModelConfig& cfg, int workers) {
  const ingest::WindowGeometry geo{cfg.patch_len, cfg.patch_count};
  struct Job {
    const ingest::Recording30* rec;
    const ingest::LabelTrack* track;
    size_t offset;
  };
  std::vector<Job> jobs;
  for (const auto& id : ids) {
    const auto& rec = store.get(id);
    const auto* track = store.labels(id);
    if (track == nullptr) {
      logf(LogLevel::info, "recording %s has no labels, skipped for finetuning", id.c_str());
      continue;
    }
    for (const auto& seg : rec.wear_segments)
      for (size_t off : ingest::finetune_offsets(seg, geo)) jobs.push_back({&rec, track, off});
  }

  std::vector<CachedWindow> out(jobs.size());
  auto encode_range = [&](size_t lo, size_t hi) {
    for (size_t j = lo; j < hi; ++j) {
      ingest::Window w = ingest::make_window(*jobs[j].rec, jobs[j].offset, geo);
      auto patches = ingest::patchify(w);
      ad::Tape<float> tape;
      auto h = model::attach(tape, params, model::Trainable::none);
      int enc = model::forward_encode(tape, h, cfg, patches);
      CachedWindow cw;
      cw.tokens = tape.value(enc);
      cw.labels = ingest::map_labels(*jobs[j].track, w);
      for (int y : cw.labels) cw.any_labeled = cw.any_labeled || y != cfg.n_classes;
      out[j] = std::move(cw);
    }
  };
  if (workers > 1 && jobs.size() > 1) {
    size_t n_threads = std::min<size_t>(static_cast<size_t>(workers), jobs.size());
    std::vector<std::future<void>> futs;
    size_t chunk = (jobs.size() + n_threads - 1) / n_threads;
    for (size_t t = 0; t < n_threads; ++t) {
      size_t lo = t * chunk;
      size_t hi = std::min(jobs.size(), lo + chunk);
      if (lo >= hi) break;
      futs.push_back(std::async(std::launch::async, encode_range, lo, hi));
    }
    for (auto& f : futs) f.get();
  } else {
    encode_range(0, jobs.size());
  }

  // drop windows with no labeled patch at all
  std::vector<CachedWindow> kept;
  kept.reserve(out.size());
  for (auto& cw : out)
    if (cw.any_labeled) kept.push_back(std::move(cw));
  return kept;
}

}  // namespace

FinetuneResult finetune(const ingest::RecordingStore& store,
                        const model::MaeParams<float>& pretrained, const FinetuneOptions& opt) {
  opt.model.validate();
  opt.schedule.validate();

  auto [train_ids, val_ids] = split_ids(store.ids(), opt.data.finetune_val_fraction,
                                        mix_seed(opt.seeds.windowing, "finetune-split"));
  train_ids = take_fraction(std::move(train_ids), opt.data.finetune_fraction,
                            mix_seed(opt.seeds.windowing, "finetune-subset"));
  if (train_ids.empty()) raise(Err::config_error, "no finetuning recordings");

  // the encoder is frozen, so its outputs are computed once
  auto train_cache = encode_windows(store, train_ids, pretrained, opt.model, opt.data.workers);
  auto val_cache = encode_windows(store, val_ids, pretrained, opt.model, opt.data.workers);
  if (train_cache.empty()) raise(Err::no_labels, "no labeled training windows");

  std::vector<int> all_labels;
  for (const auto& cw : train_cache)
    all_labels.insert(all_labels.end(), cw.labels.begin(), cw.labels.end());
  auto cw_double = class_weights(all_labels, opt.model.n_classes, opt.model.n_classes);
  std::vector<float> cw(cw_double.begin(), cw_double.end());

  FinetuneResult res;
  res.params = pretrained;
  res.class_weights = cw_double;
  res.train_ids = train_ids;
  res.val_ids = val_ids;

  std::vector<ad::Tensor<float>*> head = {&res.params.w_cls, &res.params.b_cls};
  AdamState<float> opt_state;
  opt_state.m = {ad::Tensor<float>(res.params.w_cls.rows, res.params.w_cls.cols),
                 ad::Tensor<float>(res.params.b_cls.rows, res.params.b_cls.cols)};
  opt_state.v = opt_state.m;

  const size_t d = static_cast<size_t>(opt.model.embed_dim);
  const int missing = opt.model.n_classes;
  const size_t batch_windows = std::max(1, opt.data.finetune_batch_windows);
  uint64_t step = 0;

  auto evaluate = [&](const std::vector<CachedWindow>& cache, double* ba, double* kappa) {
    std::vector<int> preds, truths;
    for (const auto& cwin : cache) {
      for (size_t i = 0; i < cwin.tokens.rows; ++i) {
        std::vector<float> logits(static_cast<size_t>(opt.model.n_classes));
        for (int c = 0; c < opt.model.n_classes; ++c) {
          float acc = res.params.b_cls.v[static_cast<size_t>(c)];
          for (size_t j = 0; j < d; ++j)
            acc += cwin.tokens.at(i, j) * res.params.w_cls.at(j, static_cast<size_t>(c));
          logits[static_cast<size_t>(c)] = acc;
        }
        preds.push_back(eval::argmax_logits<float>(logits));
        truths.push_back(cwin.labels[i]);
      }
    }
    *ba = 0.0;
    *kappa = 0.0;
    if (preds.empty()) return;
    auto cm = eval::confusion(preds, truths, opt.model.n_classes, missing);
    if (cm.total() == 0) return;
    *ba = eval::balanced_accuracy(cm);
    try {
      *kappa = eval::cohens_kappa(cm);
    } catch (const Error&) {
      *kappa = 0.0;
    }
  };

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<size_t> order(train_cache.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(opt.seeds.windowing, "finetune-order", epoch));
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    size_t n_batches = (order.size() + batch_windows - 1) / batch_windows;
    if (opt.data.finetune_max_batches_per_epoch > 0)
      n_batches = std::min<size_t>(
          n_batches, static_cast<size_t>(opt.data.finetune_max_batches_per_epoch));

    double ce_sum = 0.0;
    size_t ce_batches = 0;
    const double lr = lr_at(step, std::max<size_t>(n_batches, 1), opt.schedule);

    for (size_t b = 0; b < n_batches; ++b) {
      size_t lo = b * batch_windows;
      size_t hi = std::min(order.size(), lo + batch_windows);
      size_t rows = 0;
      for (size_t i = lo; i < hi; ++i) rows += train_cache[order[i]].tokens.rows;

      ad::Tensor<float> tokens(rows, d);
      std::vector<int> labels;
      labels.reserve(rows);
      size_t r = 0;
      for (size_t i = lo; i < hi; ++i) {
        const auto& cwin = train_cache[order[i]];
        std::copy(cwin.tokens.v.begin(), cwin.tokens.v.end(), tokens.row(r));
        labels.insert(labels.end(), cwin.labels.begin(), cwin.labels.end());
        r += cwin.tokens.rows;
      }

      ad::Tape<float> tape;
      int tok = tape.leaf(std::move(tokens));
      int wc = tape.leaf(res.params.w_cls, true);
      int bc = tape.leaf(res.params.b_cls, true);
      int logits = tape.add_row(tape.matmul(tok, wc), bc);
      int loss = tape.ce_loss(logits, labels, cw, missing);
      double loss_val = static_cast<double>(tape.value(loss).v[0]);
      if (!std::isfinite(loss_val))
        raise(Err::nan_gradient, "non-finite finetune loss at step " + std::to_string(step));
      tape.backward(loss);
      std::vector<ad::Tensor<float>> grads = {tape.grad(wc), tape.grad(bc)};
      for (const auto& g : grads)
        if (!g.all_finite())
          raise(Err::nan_gradient, "non-finite finetune gradient at step " + std::to_string(step));
      adam_step(head, grads, opt_state, lr, opt.adam);
      ce_sum += loss_val;
      ++ce_batches;
      ++step;
    }

    FinetuneEpochLog row;
    row.epoch = epoch + 1;
    row.lr = lr;
    row.train_ce = ce_batches ? ce_sum / static_cast<double>(ce_batches) : 0.0;
    evaluate(val_cache, &row.val_balanced_accuracy, &row.val_kappa);
    res.log.push_back(row);
    logf(LogLevel::info, "finetune epoch %d ce %.6g val_ba %.4f val_kappa %.4f", row.epoch,
         row.train_ce, row.val_balanced_accuracy, row.val_kappa);
  }
  return res;
}

}  // namespace famh::train
