#include "famh/commands.hpp"

#include <algorithm>
#include <cstdio>

#include <json.hpp>

#include "famh/metrics.hpp"
#include "famh/preprocess.hpp"
#include "famh/train.hpp"

namespace famh::commands {

namespace fs = std::filesystem;
using nlohmann::json;

std::string digest_hex(uint64_t digest) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string recording_id(const fs::path& p) { return p.stem().string(); }

std::vector<fs::path> list_recordings(const fs::path& dir) {
  if (!fs::exists(dir)) raise(Err::io_error, "directory does not exist: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path& p = entry.path();
    if (p.extension() == ".famh") out.push_back(p);
    else if (p.extension() == ".csv" && p.string().find(".labels.csv") == std::string::npos)
      out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

void cmd_synth(const config::RunConfig& cfg) {
  const fs::path out = cfg.paths.raw_dir;
  fs::create_directories(out);
  for (const auto& sc : cfg.synth.generator.classes) {
    if (std::find(cfg.class_names.begin(), cfg.class_names.end(), sc.name) ==
        cfg.class_names.end())
      raise(Err::config_error, "synthetic class '" + sc.name + "' is not in class_names");
  }
  for (int i = 0; i < cfg.synth.n_recordings; ++i) {
    ingest::SyntheticConfig sc = cfg.synth.generator;
    sc.seed = mix_seed(cfg.seeds.synthesis, "recording", static_cast<uint64_t>(i));
    auto synth = ingest::generate_synthetic(sc, cfg.synth.duration_s, cfg.synth.rate_hz);
    char name[32];
    std::snprintf(name, sizeof(name), "synth%03d", i);
    synth.raw.id = name;
    ingest::save_recording_bin(synth.raw, out / (std::string(name) + ".famh"));
    ingest::save_labels_csv(synth.intervals, out / (std::string(name) + ".labels.csv"));
    logf(LogLevel::info, "synthesized %s (%zu samples)", name, synth.raw.samples.size());
  }
}

void cmd_preprocess(const config::RunConfig& cfg) {
  const fs::path in = cfg.paths.raw_dir;
  const fs::path out = cfg.paths.processed_dir;
  fs::create_directories(out);

  json segments_doc;
  segments_doc["config_digest"] = digest_hex(cfg.digest());
  json recs = json::object();

  int total = 0, kept = 0, calib_failed = 0, short_pretrain = 0, short_finetune = 0;
  json details = json::object();

  for (const fs::path& path : list_recordings(in)) {
    ++total;
    ingest::RawRecording raw = path.extension() == ".famh" ? ingest::load_recording_bin(path)
                                                           : ingest::load_recording_csv(path);
    const std::string id = recording_id(path);
    raw.id = id;

    auto samples = preprocess::lowpass_resample(raw, cfg.preprocess);
    std::vector<uint8_t> mask;
    preprocess::CalibrationResult calib;
    try {
      mask = preprocess::stationary_mask(samples, cfg.preprocess);
      calib = preprocess::autocalibrate(samples, mask, cfg.preprocess);
    } catch (const Error& e) {
      // recordings that cannot be calibrated are dropped outright
      ++calib_failed;
      details[id] = std::string("excluded: ") + e.what();
      logf(LogLevel::info, "excluding %s: %s", id.c_str(), e.what());
      continue;
    }
    preprocess::apply_calibration(samples, calib);

    auto segments = preprocess::detect_wear_segments(mask, cfg.preprocess, 0.0);
    auto span_hours = [](const ingest::Segment& s) {
      return static_cast<double>(s.second - s.first) / (3600.0 * 30.0);
    };
    bool ok_pre = false, ok_fine = false;
    for (const auto& s : segments) {
      ok_pre = ok_pre || span_hours(s) >= cfg.preprocess.min_wear_hours_pretrain;
      ok_fine = ok_fine || span_hours(s) >= cfg.preprocess.min_wear_hours_finetune;
    }
    if (!ok_pre) ++short_pretrain;
    if (!ok_fine) ++short_finetune;

    ingest::Recording30 rec;
    rec.id = id;
    rec.samples = std::move(samples);
    rec.wear_segments = segments;
    ingest::save_recording30_bin(rec, out / (id + ".famh"));

    fs::path labels_src = in / (id + ".labels.csv");
    if (fs::exists(labels_src))
      write_file_atomic(out / (id + ".labels.csv"), read_file(labels_src));

    json seg_list = json::array();
    for (const auto& s : segments) seg_list.push_back({s.first, s.second});
    recs[id] = {{"segments", seg_list},
                {"samples", rec.samples.size()},
                {"calibration",
                 {{"gain", calib.gain},
                  {"offset", calib.offset},
                  {"iterations", calib.iterations},
                  {"residual", calib.residual}}}};
    ++kept;
  }

  segments_doc["recordings"] = recs;
  write_file_atomic(out / "segments.json", segments_doc.dump(2) + "\n");

  json excl;
  excl["config_digest"] = digest_hex(cfg.digest());
  excl["total"] = total;
  excl["kept"] = kept;
  excl["calibration_failed"] = calib_failed;
  excl["insufficient_wear_pretrain"] = short_pretrain;
  excl["insufficient_wear_finetune"] = short_finetune;
  excl["details"] = details;
  write_file_atomic(out / "exclusions.json", excl.dump(2) + "\n");
  logf(LogLevel::info, "preprocess kept %d of %d recordings (%d calibration failures)", kept,
       total, calib_failed);
}

ingest::RecordingStore load_processed(const config::RunConfig& cfg, double min_wear_hours) {
  const fs::path dir = cfg.paths.processed_dir;
  const fs::path seg_path = dir / "segments.json";
  json doc;
  try {
    doc = json::parse(read_file(seg_path));
  } catch (const json::exception& e) {
    raise(Err::io_error, "cannot parse " + seg_path.string() + ": " + e.what());
  }

  const size_t min_samples = static_cast<size_t>(min_wear_hours * 3600.0 * 30.0);
  ingest::RecordingStore store;
  for (const auto& [id, meta] : doc.at("recordings").items()) {
    auto rec = ingest::load_recording30_bin(dir / (id + ".famh"));
    rec.id = id;
    rec.wear_segments.clear();
    for (const auto& seg : meta.at("segments")) {
      size_t a = seg.at(0).get<size_t>();
      size_t b = seg.at(1).get<size_t>();
      if (b - a >= min_samples) rec.wear_segments.push_back({a, b});
    }
    if (rec.wear_segments.empty()) {
      logf(LogLevel::debug, "skipping %s: no wear segment of %.3f h", id.c_str(),
           min_wear_hours);
      continue;
    }
    fs::path labels_path = dir / (id + ".labels.csv");
    if (fs::exists(labels_path)) {
      auto intervals = ingest::load_labels_csv(labels_path);
      auto track =
          ingest::labels_from_intervals(intervals, rec.samples.size(), cfg.class_names);
      store.add(std::move(rec), std::move(track));
    } else {
      store.add(std::move(rec));
    }
  }
  if (store.size() == 0)
    raise(Err::no_usable_segment, "no recording in " + dir.string() + " has " +
                                      std::to_string(min_wear_hours) + " h of wear");
  return store;
}

namespace {

train::PretrainOptions pretrain_options(const config::RunConfig& cfg) {
  train::PretrainOptions opt;
  opt.model = cfg.model;
  opt.spectral = cfg.spectral;
  opt.loss = cfg.loss;
  opt.mask_rate = cfg.mask_rate;
  opt.schedule = cfg.pretrain_schedule();
  opt.data = cfg.data;
  opt.seeds = cfg.seeds;
  opt.epochs = cfg.schedule.pretrain_epochs;
  opt.config_digest = cfg.digest();
  opt.checkpoint_out = cfg.paths.checkpoint;
  return opt;
}

}  // namespace

void cmd_pretrain(const config::RunConfig& cfg, const std::filesystem::path& resume) {
  auto store = load_processed(cfg, cfg.preprocess.min_wear_hours_pretrain);
  auto opt = pretrain_options(cfg);
  opt.resume_from = resume;
  auto res = train::pretrain(store, opt);

  std::string csv = "# config_digest=" + digest_hex(cfg.digest()) + "\n";
  csv += "epoch,lr,train_mse,val_mse,train_lmm,val_lmm,val_lmv\n";
  for (const auto& row : res.log) {
    csv += std::to_string(row.epoch) + "," + fmt(row.lr) + "," + fmt(row.train_mse) + "," +
           fmt(row.val_mse) + "," + fmt(row.train_lmm) + "," + fmt(row.val_lmm) + "," +
           fmt(row.val_lmv) + "\n";
  }
  fs::path out_dir = cfg.paths.out_dir;
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "pretrain_log.csv", csv);
  if (opt.checkpoint_out.empty())
    train::save_checkpoint(res.params, &res.opt, res.step, cfg.digest(),
                           out_dir / "pretrain.famc");
  logf(LogLevel::info, "pretraining finished after %llu steps",
       static_cast<unsigned long long>(res.step));
}

void cmd_finetune(const config::RunConfig& cfg, const std::filesystem::path& checkpoint) {
  auto store = load_processed(cfg, cfg.preprocess.min_wear_hours_finetune);
  auto params = model::init_params<float>(cfg.model, cfg.seeds.init);
  auto ck = train::load_checkpoint(checkpoint);
  train::restore_params(ck, params, nullptr);

  train::FinetuneOptions opt;
  opt.model = cfg.model;
  opt.schedule = cfg.finetune_schedule();
  opt.data = cfg.data;
  opt.seeds = cfg.seeds;
  opt.epochs = cfg.schedule.finetune_epochs;
  opt.config_digest = cfg.digest();
  auto res = train::finetune(store, params, opt);

  fs::path out_dir = cfg.paths.out_dir;
  fs::create_directories(out_dir);
  train::save_checkpoint(res.params, nullptr, static_cast<uint64_t>(opt.epochs), cfg.digest(),
                         out_dir / "finetune.famc");

  json doc;
  doc["config_digest"] = digest_hex(cfg.digest());
  doc["class_weights"] = res.class_weights;
  doc["train_recordings"] = res.train_ids;
  doc["val_recordings"] = res.val_ids;
  json epochs = json::array();
  for (const auto& row : res.log)
    epochs.push_back({{"epoch", row.epoch},
                      {"lr", row.lr},
                      {"train_ce", row.train_ce},
                      {"balanced_accuracy", row.val_balanced_accuracy},
                      {"kappa", row.val_kappa}});
  doc["epochs"] = epochs;
  write_file_atomic(out_dir / "finetune_metrics.json", doc.dump(2) + "\n");
}

namespace {

// Patch predictions and truths over non-overlapping windows of the given ids.
void predict_patches(const config::RunConfig& cfg, const model::MaeParams<float>& params,
                     const ingest::RecordingStore& store, const std::vector<std::string>& ids,
                     std::vector<int>* preds, std::vector<int>* truths) {
  ingest::WindowGeometry geo{cfg.model.patch_len, cfg.model.patch_count};
  const size_t W = geo.window_samples();
  for (const auto& id : ids) {
    const auto& rec = store.get(id);
    const auto* track = store.labels(id);
    for (const auto& seg : rec.wear_segments) {
      for (size_t off = seg.first; off + W <= seg.second; off += W) {
        auto w = ingest::make_window(rec, off, geo);
        auto patches = ingest::patchify(w);
        ad::Tape<float> tape;
        auto h = model::attach(tape, params, model::Trainable::none);
        int logits = model::forward_classify(tape, h, cfg.model, patches);
        const auto& z = tape.value(logits);
        auto labs = track != nullptr
                        ? ingest::map_labels(*track, w)
                        : std::vector<int>(static_cast<size_t>(cfg.model.patch_count),
                                           cfg.model.n_classes);
        for (size_t i = 0; i < z.rows; ++i) {
          preds->push_back(eval::argmax_logits<float>({z.row(i), z.cols}));
          truths->push_back(labs[i]);
        }
      }
    }
  }
}

}  // namespace

void cmd_evaluate(const config::RunConfig& cfg, const std::filesystem::path& checkpoint) {
  auto store = load_processed(cfg, cfg.preprocess.min_wear_hours_finetune);
  auto params = model::init_params<float>(cfg.model, cfg.seeds.init);
  auto ck = train::load_checkpoint(checkpoint);
  train::restore_params(ck, params, nullptr);

  // evaluate the finetune validation partition (same seeded split)
  auto [train_ids, val_ids] =
      train::split_ids(store.ids(), cfg.data.finetune_val_fraction,
                       mix_seed(cfg.seeds.windowing, "finetune-split"));
  const auto& eval_ids = val_ids.empty() ? train_ids : val_ids;

  std::vector<int> preds, truths;
  predict_patches(cfg, params, store, eval_ids, &preds, &truths);
  auto cm = eval::confusion(preds, truths, cfg.model.n_classes, cfg.model.n_classes);
  double ba = eval::balanced_accuracy(cm);
  double kappa = eval::cohens_kappa(cm);

  fs::path out_dir = cfg.paths.out_dir;
  fs::create_directories(out_dir);

  json doc;
  doc["config_digest"] = digest_hex(cfg.digest());
  doc["balanced_accuracy"] = ba;
  doc["kappa"] = kappa;
  doc["n_patches"] = cm.total();
  doc["class_names"] = cfg.class_names;
  doc["evaluated_recordings"] = eval_ids;
  json rows = json::array();
  for (int t = 0; t < cm.n_classes; ++t) {
    json row = json::array();
    for (int p = 0; p < cm.n_classes; ++p) row.push_back(cm.at(t, p));
    rows.push_back(row);
  }
  doc["confusion"] = rows;
  write_file_atomic(out_dir / "metrics.json", doc.dump(2) + "\n");

  std::string csv = "# config_digest=" + digest_hex(cfg.digest()) + "\n";
  csv += "true\\pred";
  for (const auto& name : cfg.class_names) csv += "," + name;
  csv += "\n";
  for (int t = 0; t < cm.n_classes; ++t) {
    csv += cfg.class_names[static_cast<size_t>(t)];
    for (int p = 0; p < cm.n_classes; ++p) csv += "," + std::to_string(cm.at(t, p));
    csv += "\n";
  }
  write_file_atomic(out_dir / "confusion.csv", csv);
  logf(LogLevel::info, "evaluate: balanced accuracy %.4f kappa %.4f over %lld patches", ba,
       kappa, static_cast<long long>(cm.total()));
}

void cmd_embed(const config::RunConfig& cfg, const std::filesystem::path& checkpoint) {
  auto store = load_processed(cfg, cfg.preprocess.min_wear_hours_finetune);
  auto params = model::init_params<float>(cfg.model, cfg.seeds.init);
  auto ck = train::load_checkpoint(checkpoint);
  train::restore_params(ck, params, nullptr);

  auto set = eval::export_embeddings(params, cfg.model, store, store.ids());
  fs::path out_dir = cfg.paths.out_dir;
  fs::create_directories(out_dir);

  const std::string digest_line = "# config_digest=" + digest_hex(cfg.digest()) + "\n";
  {
    std::string csv = digest_line + "label";
    for (size_t j = 0; j < set.embeddings.cols; ++j) csv += ",e" + std::to_string(j);
    csv += "\n";
    char buf[40];
    for (size_t i = 0; i < set.embeddings.rows; ++i) {
      csv += std::to_string(set.labels[i]);
      for (size_t j = 0; j < set.embeddings.cols; ++j) {
        std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(set.embeddings.at(i, j)));
        csv += buf;
      }
      csv += "\n";
    }
    write_file_atomic(out_dir / "embeddings.csv", csv);
  }

  ad::Tensor<double> data(set.embeddings.rows, set.embeddings.cols);
  for (size_t i = 0; i < data.size(); ++i) data.v[i] = static_cast<double>(set.embeddings.v[i]);
  auto pca = eval::pca_project(data, cfg.pca_components);
  {
    std::string csv = digest_line + "# explained_variance_ratio=";
    for (size_t c = 0; c < pca.explained_ratio.size(); ++c)
      csv += (c ? "," : "") + std::to_string(pca.explained_ratio[c]);
    csv += "\nlabel";
    for (size_t c = 0; c < pca.projected.cols; ++c) csv += ",pc" + std::to_string(c + 1);
    csv += "\n";
    char buf[40];
    for (size_t i = 0; i < pca.projected.rows; ++i) {
      csv += std::to_string(set.labels[i]);
      for (size_t c = 0; c < pca.projected.cols; ++c) {
        std::snprintf(buf, sizeof(buf), ",%.9g", pca.projected.at(i, c));
        csv += buf;
      }
      csv += "\n";
    }
    write_file_atomic(out_dir / "pca.csv", csv);
  }
  logf(LogLevel::info, "exported %zu embeddings of dim %zu", set.embeddings.rows,
       set.embeddings.cols);
}

}  // namespace famh::commands
