#include "famh/config.hpp"

#include <json.hpp>

namespace famh::config {

using nlohmann::json;

RunConfig::RunConfig() {
  class_names = {"bicycling", "walking", "mixed", "vehicle", "sit-stand", "sleep"};
  // synthetic signatures: distinct fundamentals and amplitudes per class,
  // quiet near-gravity sleep so stationary detection has something to find
  synth.generator.classes = {
      {"bicycling", 1.3, {0.45, 0.25, 0.10}, 0.030, 0.020},
      {"walking", 2.0, {0.50, 0.20, 0.10}, 0.030, 0.020},
      {"mixed", 1.0, {0.25, 0.15}, 0.060, 0.050},
      {"vehicle", 8.0, {0.08}, 0.050, 0.005},
      {"sit-stand", 0.3, {0.12}, 0.010, 0.010},
      {"sleep", 0.0, {}, 0.003, 0.001},
  };
  synth.generator.transition = {
      {0.0, 0.2, 0.2, 0.2, 0.2, 0.2}, {0.2, 0.0, 0.2, 0.2, 0.2, 0.2},
      {0.2, 0.2, 0.0, 0.2, 0.2, 0.2}, {0.2, 0.2, 0.2, 0.0, 0.2, 0.2},
      {0.2, 0.2, 0.2, 0.2, 0.0, 0.2}, {0.2, 0.2, 0.2, 0.2, 0.2, 0.0},
  };
  synth.generator.dwell_mean_s = {120.0, 180.0, 150.0, 300.0, 240.0, 600.0};
}

namespace {

json to_json(const RunConfig& c) {
  json j;
  j["seeds"] = {{"masking", c.seeds.masking},
                {"windowing", c.seeds.windowing},
                {"init", c.seeds.init},
                {"synthesis", c.seeds.synthesis}};
  j["paths"] = {{"raw_dir", c.paths.raw_dir},
                {"processed_dir", c.paths.processed_dir},
                {"checkpoint", c.paths.checkpoint},
                {"out_dir", c.paths.out_dir}};
  j["data"] = {{"recordings_per_batch", c.data.recordings_per_batch},
               {"windows_per_recording", c.data.windows_per_recording},
               {"pretrain_val_fraction", c.data.pretrain_val_fraction},
               {"finetune_val_fraction", c.data.finetune_val_fraction},
               {"pretrain_fraction", c.data.pretrain_fraction},
               {"finetune_fraction", c.data.finetune_fraction},
               {"finetune_batch_windows", c.data.finetune_batch_windows},
               {"finetune_max_batches_per_epoch", c.data.finetune_max_batches_per_epoch},
               {"workers", c.data.workers}};
  j["preprocess"] = {{"cutoff_hz", c.preprocess.cutoff_hz},
                     {"target_rate_hz", c.preprocess.target_rate_hz},
                     {"stationary_window_s", c.preprocess.stationary_window_s},
                     {"stationary_threshold_g", c.preprocess.stationary_threshold_g},
                     {"nonwear_min_minutes", c.preprocess.nonwear_min_minutes},
                     {"min_wear_hours_pretrain", c.preprocess.min_wear_hours_pretrain},
                     {"min_wear_hours_finetune", c.preprocess.min_wear_hours_finetune},
                     {"calib_max_iter", c.preprocess.calib_max_iter},
                     {"calib_tol", c.preprocess.calib_tol},
                     {"calib_coverage_g", c.preprocess.calib_coverage_g},
                     {"calib_min_points", c.preprocess.calib_min_points}};
  j["spectral"] = {{"n_fft", c.spectral.n_fft},
                   {"epsilon", c.spectral.epsilon},
                   {"clamp_low", c.spectral.clamp_low},
                   {"biased_variance", c.spectral.biased_variance}};
  j["model"] = {{"n_blocks", c.model.n_blocks},
                {"embed_dim", c.model.embed_dim},
                {"n_heads", c.model.n_heads},
                {"n_classes", c.model.n_classes},
                {"patch_len", c.model.patch_len},
                {"patch_count", c.model.patch_count},
                {"rmsnorm_eps", c.model.rmsnorm_eps},
                {"rope_base", c.model.rope_base}};
  j["loss"] = {{"w_lmm", c.loss.w_lmm}, {"w_mse", c.loss.w_mse}, {"w_lmv", c.loss.w_lmv}};
  j["masking"] = {{"rate", c.mask_rate}};
  j["schedule"] = {{"base_lr", c.schedule.base_lr},
                   {"warmup_epochs", c.schedule.warmup_epochs},
                   {"restart_period_epochs", c.schedule.restart_period_epochs},
                   {"eta_min", c.schedule.eta_min},
                   {"pretrain_epochs", c.schedule.pretrain_epochs},
                   {"finetune_epochs", c.schedule.finetune_epochs}};
  json classes = json::array();
  for (const auto& sc : c.synth.generator.classes)
    classes.push_back({{"name", sc.name},
                       {"fundamental_hz", sc.fundamental_hz},
                       {"harmonics_g", sc.harmonics_g},
                       {"noise_std_g", sc.noise_std_g},
                       {"drift_rate", sc.drift_rate}});
  j["synth"] = {{"n_recordings", c.synth.n_recordings},
                {"duration_s", c.synth.duration_s},
                {"rate_hz", c.synth.rate_hz},
                {"classes", classes},
                {"transition", c.synth.generator.transition},
                {"dwell_mean_s", c.synth.generator.dwell_mean_s}};
  j["class_names"] = c.class_names;
  j["pca_components"] = c.pca_components;
  return j;
}

RunConfig from_json(const json& j) {
  RunConfig c;
  const auto& seeds = j.at("seeds");
  c.seeds.masking = seeds.at("masking").get<uint64_t>();
  c.seeds.windowing = seeds.at("windowing").get<uint64_t>();
  c.seeds.init = seeds.at("init").get<uint64_t>();
  c.seeds.synthesis = seeds.at("synthesis").get<uint64_t>();

  const auto& paths = j.at("paths");
  c.paths.raw_dir = paths.at("raw_dir").get<std::string>();
  c.paths.processed_dir = paths.at("processed_dir").get<std::string>();
  c.paths.checkpoint = paths.at("checkpoint").get<std::string>();
  c.paths.out_dir = paths.at("out_dir").get<std::string>();

  const auto& data = j.at("data");
  c.data.recordings_per_batch = data.at("recordings_per_batch").get<int>();
  c.data.windows_per_recording = data.at("windows_per_recording").get<int>();
  c.data.pretrain_val_fraction = data.at("pretrain_val_fraction").get<double>();
  c.data.finetune_val_fraction = data.at("finetune_val_fraction").get<double>();
  c.data.pretrain_fraction = data.at("pretrain_fraction").get<double>();
  c.data.finetune_fraction = data.at("finetune_fraction").get<double>();
  c.data.finetune_batch_windows = data.at("finetune_batch_windows").get<int>();
  c.data.finetune_max_batches_per_epoch = data.at("finetune_max_batches_per_epoch").get<int>();
  c.data.workers = data.at("workers").get<int>();

  const auto& pp = j.at("preprocess");
  c.preprocess.cutoff_hz = pp.at("cutoff_hz").get<double>();
  c.preprocess.target_rate_hz = pp.at("target_rate_hz").get<double>();
  c.preprocess.stationary_window_s = pp.at("stationary_window_s").get<double>();
  c.preprocess.stationary_threshold_g = pp.at("stationary_threshold_g").get<double>();
  c.preprocess.nonwear_min_minutes = pp.at("nonwear_min_minutes").get<double>();
  c.preprocess.min_wear_hours_pretrain = pp.at("min_wear_hours_pretrain").get<double>();
  c.preprocess.min_wear_hours_finetune = pp.at("min_wear_hours_finetune").get<double>();
  c.preprocess.calib_max_iter = pp.at("calib_max_iter").get<int>();
  c.preprocess.calib_tol = pp.at("calib_tol").get<double>();
  c.preprocess.calib_coverage_g = pp.at("calib_coverage_g").get<double>();
  c.preprocess.calib_min_points = pp.at("calib_min_points").get<int>();

  const auto& sp = j.at("spectral");
  c.spectral.n_fft = sp.at("n_fft").get<int>();
  c.spectral.epsilon = sp.at("epsilon").get<double>();
  c.spectral.clamp_low = sp.at("clamp_low").get<bool>();
  c.spectral.biased_variance = sp.at("biased_variance").get<bool>();

  const auto& m = j.at("model");
  c.model.n_blocks = m.at("n_blocks").get<int>();
  c.model.embed_dim = m.at("embed_dim").get<int>();
  c.model.n_heads = m.at("n_heads").get<int>();
  c.model.n_classes = m.at("n_classes").get<int>();
  c.model.patch_len = m.at("patch_len").get<int>();
  c.model.patch_count = m.at("patch_count").get<int>();
  c.model.rmsnorm_eps = m.at("rmsnorm_eps").get<double>();
  c.model.rope_base = m.at("rope_base").get<double>();

  const auto& loss = j.at("loss");
  c.loss.w_lmm = loss.at("w_lmm").get<double>();
  c.loss.w_mse = loss.at("w_mse").get<double>();
  c.loss.w_lmv = loss.at("w_lmv").get<double>();

  c.mask_rate = j.at("masking").at("rate").get<double>();

  const auto& sch = j.at("schedule");
  c.schedule.base_lr = sch.at("base_lr").get<double>();
  c.schedule.warmup_epochs = sch.at("warmup_epochs").get<int>();
  c.schedule.restart_period_epochs = sch.at("restart_period_epochs").get<int>();
  c.schedule.eta_min = sch.at("eta_min").get<double>();
  c.schedule.pretrain_epochs = sch.at("pretrain_epochs").get<int>();
  c.schedule.finetune_epochs = sch.at("finetune_epochs").get<int>();

  const auto& sy = j.at("synth");
  c.synth.n_recordings = sy.at("n_recordings").get<int>();
  c.synth.duration_s = sy.at("duration_s").get<double>();
  c.synth.rate_hz = sy.at("rate_hz").get<double>();
  c.synth.generator.classes.clear();
  for (const auto& cls : sy.at("classes")) {
    ingest::SyntheticClass sc;
    sc.name = cls.at("name").get<std::string>();
    sc.fundamental_hz = cls.at("fundamental_hz").get<double>();
    sc.harmonics_g = cls.at("harmonics_g").get<std::vector<double>>();
    sc.noise_std_g = cls.at("noise_std_g").get<double>();
    sc.drift_rate = cls.at("drift_rate").get<double>();
    c.synth.generator.classes.push_back(std::move(sc));
  }
  c.synth.generator.transition = sy.at("transition").get<std::vector<std::vector<double>>>();
  c.synth.generator.dwell_mean_s = sy.at("dwell_mean_s").get<std::vector<double>>();

  c.class_names = j.at("class_names").get<std::vector<std::string>>();
  c.pca_components = j.at("pca_components").get<int>();
  return c;
}

bool same_category(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  if (a.is_string() && b.is_string()) return true;
  if (a.is_boolean() && b.is_boolean()) return true;
  if (a.is_array() && b.is_array()) return true;
  if (a.is_object() && b.is_object()) return true;
  return false;
}

void merge_strict(json& base, const json& overlay, const std::string& prefix) {
  if (!overlay.is_object())
    raise(Err::config_error,
          "config node '" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be an object");
  for (const auto& [key, value] : overlay.items()) {
    std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) raise(Err::config_error, "unknown config key '" + path + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, path);
      continue;
    }
    if (!same_category(slot, value))
      raise(Err::config_error, "config key '" + path + "' has the wrong type");
    slot = value;
  }
}

void apply_override(json& base, const std::string& assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    raise(Err::config_error, "--set expects key=value, got '" + assignment + "'");
  std::string key = assignment.substr(0, eq);
  std::string raw = assignment.substr(eq + 1);

  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // plain string
  }

  json* node = &base;
  std::string consumed;
  size_t pos = 0;
  while (true) {
    size_t dot = key.find('.', pos);
    std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    consumed = consumed.empty() ? part : consumed + "." + part;
    if (!node->contains(part)) raise(Err::config_error, "unknown config key '" + consumed + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  if (node->is_object()) raise(Err::config_error, "config key '" + key + "' is a section");
  if (!same_category(*node, value))
    raise(Err::config_error, "config key '" + key + "' has the wrong type");
  *node = value;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  spectral.validate();
  loss.validate();
  preprocess.validate();
  if (mask_rate < 0.0 || mask_rate >= 1.0)
    raise(Err::config_error, "masking.rate must be in [0, 1)");
  if (static_cast<int>(class_names.size()) != model.n_classes)
    raise(Err::config_error, "class_names length must equal model.n_classes");
  if (data.recordings_per_batch < 1 || data.windows_per_recording < 1)
    raise(Err::config_error, "batch geometry must be positive");
  if (data.workers < 1) raise(Err::config_error, "data.workers must be >= 1");
  if (schedule.pretrain_epochs < 1 || schedule.finetune_epochs < 0)
    raise(Err::config_error, "schedule epochs out of range");
  if (pca_components < 1) raise(Err::config_error, "pca_components must be >= 1");
  synth.generator.validate();
}

std::string RunConfig::to_json_string() const { return to_json(*this).dump(2) + "\n"; }

uint64_t RunConfig::digest() const {
  std::string canon = to_json(*this).dump();
  uint64_t h = 1469598103934665603ull;
  for (char ch : canon) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  return h;
}

train::ScheduleConfig RunConfig::pretrain_schedule() const {
  train::ScheduleConfig s;
  s.base_lr = schedule.base_lr;
  s.warmup_epochs = schedule.warmup_epochs;
  s.restart_period_epochs = schedule.restart_period_epochs;
  s.eta_min = schedule.eta_min;
  s.mode = train::ScheduleMode::pretrain_cosine_restart;
  return s;
}

train::ScheduleConfig RunConfig::finetune_schedule() const {
  train::ScheduleConfig s;
  s.base_lr = schedule.base_lr;
  s.mode = train::ScheduleMode::finetune_flat;
  return s;
}

RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides) {
  json base = to_json(RunConfig());
  if (!json_text.empty()) {
    json overlay;
    try {
      overlay = json::parse(json_text);
    } catch (const json::exception& e) {
      raise(Err::config_error, std::string("config is not valid JSON: ") + e.what());
    }
    merge_strict(base, overlay, "");
  }
  for (const auto& assignment : overrides) apply_override(base, assignment);

  RunConfig cfg;
  try {
    cfg = from_json(base);
  } catch (const json::exception& e) {
    raise(Err::config_error, std::string("config field error: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& file,
                      const std::vector<std::string>& overrides) {
  std::string text;
  if (!file.empty()) text = read_file(file);
  return parse_config(text, overrides);
}

}  // namespace famh::config
