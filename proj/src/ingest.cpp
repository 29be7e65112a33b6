#include "famh/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <sstream>

namespace famh::ingest {

namespace {

constexpr double kPi = 3.14159265358979323846;

double parse_double(std::string_view field, size_t line_no) {
  double out = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || !std::isfinite(out))
    raise(Err::parse_error, "line " + std::to_string(line_no) + ": bad numeric field '" +
                                std::string(field) + "'");
  return out;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  size_t pos = 0;
  while (true) {
    size_t comma = line.find(',', pos);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, comma - pos));
    pos = comma + 1;
  }
  return out;
}

std::string_view trim_cr(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  return s;
}

void append_u16(std::string& buf, uint16_t v) { buf.append(reinterpret_cast<const char*>(&v), 2); }
void append_u64(std::string& buf, uint64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
void append_f32(std::string& buf, float v) { buf.append(reinterpret_cast<const char*>(&v), 4); }

struct BinReader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n, const char* what) {
    if (pos + n > buf.size())
      raise(Err::truncated_file, std::string("truncated while reading ") + what);
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v;
    std::memcpy(&v, buf.data() + pos, 2);
    pos += 2;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  float f32(const char* what) {
    need(4, what);
    float v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
};

}  // namespace

RawRecording load_recording_csv(const std::filesystem::path& path) {
  std::string contents = read_file(path);
  RawRecording rec;
  rec.id = path.stem().string();

  std::istringstream in(contents);
  std::string line;
  size_t line_no = 0;

  if (!std::getline(in, line)) raise(Err::empty_file, "empty file: " + path.string());
  ++line_no;
  if (trim_cr(line) != "t,x,y,z")
    raise(Err::parse_error, "line 1: expected header 't,x,y,z', got '" + line + "'");

  std::vector<double> times;
  while (std::getline(in, line)) {
    ++line_no;
    auto stripped = trim_cr(line);
    if (stripped.empty()) continue;
    auto fields = split_csv(stripped);
    if (fields.size() != 4)
      raise(Err::parse_error, "line " + std::to_string(line_no) + ": expected 4 fields, got " +
                                  std::to_string(fields.size()));
    double t = parse_double(fields[0], line_no);
    if (!times.empty() && t < times.back())
      raise(Err::non_monotone_time, "line " + std::to_string(line_no) + ": timestamp decreases");
    times.push_back(t);
    rec.samples.push_back({static_cast<float>(parse_double(fields[1], line_no)),
                           static_cast<float>(parse_double(fields[2], line_no)),
                           static_cast<float>(parse_double(fields[3], line_no))});
  }

  if (rec.samples.empty()) raise(Err::empty_file, "no data rows: " + path.string());
  if (rec.samples.size() < 2)
    raise(Err::parse_error, "need at least 2 samples to infer the sample rate");

  std::vector<double> deltas(times.size() - 1);
  for (size_t i = 0; i + 1 < times.size(); ++i) deltas[i] = times[i + 1] - times[i];
  std::nth_element(deltas.begin(), deltas.begin() + deltas.size() / 2, deltas.end());
  double median = deltas[deltas.size() / 2];
  if (!(median > 0.0)) raise(Err::parse_error, "cannot infer sample rate from timestamps");
  rec.sample_rate_hz = 1.0 / median;
  return rec;
}

void save_recording_csv(const RawRecording& rec, const std::filesystem::path& path) {
  std::string out = "t,x,y,z\n";
  char buf[128];
  for (size_t i = 0; i < rec.samples.size(); ++i) {
    double t = static_cast<double>(i) / rec.sample_rate_hz;
    std::snprintf(buf, sizeof(buf), "%.12g,%.9g,%.9g,%.9g\n", t, rec.samples[i][0],
                  rec.samples[i][1], rec.samples[i][2]);
    out += buf;
  }
  write_file_atomic(path, out);
}

RawRecording load_recording_bin(const std::filesystem::path& path) {
  std::string contents = read_file(path);
  if (contents.size() < 4 || contents.compare(0, 4, "FAMH") != 0)
    raise(Err::bad_magic, "not a FAMH recording: " + path.string());
  BinReader r{contents, 4};
  uint16_t version = r.u16("version");
  if (version != 1)
    raise(Err::unsupported_version, "recording version " + std::to_string(version));
  RawRecording rec;
  rec.id = path.stem().string();
  rec.sample_rate_hz = static_cast<double>(r.f32("sample rate"));
  uint64_t n = r.u64("sample count");
  r.need(n * 12, "sample payload");
  rec.samples.resize(n);
  std::memcpy(rec.samples.data(), contents.data() + r.pos, n * 12);
  return rec;
}

void save_recording_bin(const RawRecording& rec, const std::filesystem::path& path) {
  std::string buf = "FAMH";
  append_u16(buf, 1);
  append_f32(buf, static_cast<float>(rec.sample_rate_hz));
  append_u64(buf, rec.samples.size());
  buf.append(reinterpret_cast<const char*>(rec.samples.data()), rec.samples.size() * 12);
  write_file_atomic(path, buf);
}

void save_recording30_bin(const Recording30& rec, const std::filesystem::path& path) {
  RawRecording raw;
  raw.id = rec.id;
  raw.sample_rate_hz = 30.0;
  raw.samples = rec.samples;
  save_recording_bin(raw, path);
}

Recording30 load_recording30_bin(const std::filesystem::path& path) {
  RawRecording raw = load_recording_bin(path);
  Recording30 rec;
  rec.id = raw.id;
  rec.samples = std::move(raw.samples);
  return rec;
}

Window make_window(const Recording30& rec, size_t start, const WindowGeometry& geo) {
  const size_t n = geo.window_samples();
  if (start + n > rec.samples.size())
    raise(Err::bad_offset, rec.id + ": window at " + std::to_string(start) + " overruns " +
                               std::to_string(rec.samples.size()) + " samples");
  Window w;
  w.patch_len = geo.patch_len;
  w.patch_count = geo.patch_count;
  w.source_id = rec.id;
  w.start_index = start;
  w.data.resize(3 * n);
  for (size_t i = 0; i < n; ++i) {
    const Sample& s = rec.samples[start + i];
    w.data[i] = s[0];
    w.data[n + i] = s[1];
    w.data[2 * n + i] = s[2];
  }
  return w;
}

std::vector<size_t> pretrain_offsets(Segment segment, const WindowGeometry& geo, int count,
                                     Rng& rng) {
  const size_t span = segment.second - segment.first;
  const size_t W = geo.window_samples();
  const size_t S = geo.pretrain_stride();
  if (span < W)
    raise(Err::segment_too_short, "segment has " + std::to_string(span) +
                                      " samples, a window needs " + std::to_string(W));
  const size_t max_fit = (span - W) / S + 1;
  const size_t n_fit = std::min<size_t>(static_cast<size_t>(count), max_fit);
  const size_t slack = span - (W + (n_fit - 1) * S);
  const size_t origin = segment.first + rng.below(slack + 1);

  std::vector<size_t> offsets;
  offsets.reserve(static_cast<size_t>(count));
  for (size_t i = 0; i < n_fit; ++i) offsets.push_back(origin + i * S);
  // short segments: pad by resampling with replacement
  while (offsets.size() < static_cast<size_t>(count))
    offsets.push_back(offsets[rng.below(n_fit)]);
  return offsets;
}

std::vector<Window> window_pretrain(const Recording30& rec, Segment segment,
                                    const WindowGeometry& geo, int count, uint64_t seed) {
  Rng rng(seed);
  auto offsets = pretrain_offsets(segment, geo, count, rng);
  std::vector<Window> out;
  out.reserve(offsets.size());
  for (size_t off : offsets) out.push_back(make_window(rec, off, geo));
  return out;
}

std::vector<size_t> finetune_offsets(Segment segment, const WindowGeometry& geo) {
  const size_t span = segment.second - segment.first;
  const size_t W = geo.window_samples();
  const size_t S = geo.finetune_stride();
  std::vector<size_t> offsets;
  if (span < W) return offsets;
  for (size_t off = segment.first; off + W <= segment.second; off += S) offsets.push_back(off);
  if (offsets.back() != segment.second - W) offsets.push_back(segment.second - W);
  return offsets;
}

std::vector<Window> window_finetune(const Recording30& rec, const WindowGeometry& geo) {
  std::vector<Window> out;
  for (const Segment& seg : rec.wear_segments)
    for (size_t off : finetune_offsets(seg, geo)) out.push_back(make_window(rec, off, geo));
  if (out.empty()) raise(Err::no_usable_segment, rec.id + ": no wear segment fits one window");
  return out;
}

ad::Tensor<float> patchify_signal(const std::vector<float>& data, int patch_len) {
  if (data.size() % 3 != 0) raise(Err::shape_mismatch, "signal is not tri-axial");
  const size_t n = data.size() / 3;
  if (n % static_cast<size_t>(patch_len) != 0)
    raise(Err::indivisible_length, "window length " + std::to_string(n) +
                                       " is not divisible by patch length " +
                                       std::to_string(patch_len));
  const size_t L = n / static_cast<size_t>(patch_len);
  const size_t P = static_cast<size_t>(patch_len);
  ad::Tensor<float> patches(L, 3 * P);
  for (size_t i = 0; i < L; ++i)
    for (size_t axis = 0; axis < 3; ++axis)
      std::memcpy(patches.row(i) + axis * P, data.data() + axis * n + i * P, P * sizeof(float));
  return patches;
}

ad::Tensor<float> patchify(const Window& w) { return patchify_signal(w.data, w.patch_len); }

std::vector<float> unpatchify(const ad::Tensor<float>& patches, int patch_len) {
  const size_t P = static_cast<size_t>(patch_len);
  if (patches.cols != 3 * P) raise(Err::shape_mismatch, "patch rows must hold 3*patch_len values");
  const size_t L = patches.rows;
  const size_t n = L * P;
  std::vector<float> data(3 * n);
  for (size_t i = 0; i < L; ++i)
    for (size_t axis = 0; axis < 3; ++axis)
      std::memcpy(data.data() + axis * n + i * P, patches.row(i) + axis * P, P * sizeof(float));
  return data;
}

LabelTrack labels_from_intervals(const std::vector<LabelInterval>& intervals, size_t n_samples,
                                 const std::vector<std::string>& class_names) {
  LabelTrack track;
  track.n_classes = static_cast<int>(class_names.size());
  track.labels.assign(n_samples, static_cast<int16_t>(track.n_classes));
  for (const auto& iv : intervals) {
    auto it = std::find(class_names.begin(), class_names.end(), iv.label);
    if (it == class_names.end()) raise(Err::parse_error, "unknown label '" + iv.label + "'");
    int16_t cls = static_cast<int16_t>(it - class_names.begin());
    size_t lo = static_cast<size_t>(std::max(0.0, std::ceil(iv.start_s * 30.0)));
    size_t hi = std::min(n_samples,
                         static_cast<size_t>(std::max(0.0, std::ceil(iv.end_s * 30.0) + 1.0)));
    for (size_t k = lo; k < hi && k < n_samples; ++k) {
      double ts = static_cast<double>(k) / 30.0;
      if (ts >= iv.start_s && ts < iv.end_s) track.labels[k] = cls;
    }
  }
  return track;
}

std::vector<LabelInterval> load_labels_csv(const std::filesystem::path& path) {
  std::string contents = read_file(path);
  std::istringstream in(contents);
  std::string line;
  size_t line_no = 0;
  if (!std::getline(in, line)) raise(Err::empty_file, "empty label file: " + path.string());
  ++line_no;
  if (trim_cr(line) != "start_s,end_s,label")
    raise(Err::parse_error, "line 1: expected header 'start_s,end_s,label'");
  std::vector<LabelInterval> out;
  while (std::getline(in, line)) {
    ++line_no;
    auto stripped = trim_cr(line);
    if (stripped.empty()) continue;
    auto fields = split_csv(stripped);
    if (fields.size() != 3)
      raise(Err::parse_error, "line " + std::to_string(line_no) + ": expected 3 fields");
    LabelInterval iv;
    iv.start_s = parse_double(fields[0], line_no);
    iv.end_s = parse_double(fields[1], line_no);
    iv.label = std::string(fields[2]);
    if (iv.end_s < iv.start_s)
      raise(Err::parse_error,
            "line " + std::to_string(line_no) + ": interval ends before it starts");
    out.push_back(std::move(iv));
  }
  return out;
}

void save_labels_csv(const std::vector<LabelInterval>& intervals,
                     const std::filesystem::path& path) {
  std::string out = "start_s,end_s,label\n";
  char buf[128];
  for (const auto& iv : intervals) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,", iv.start_s, iv.end_s);
    out += buf;
    out += iv.label;
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::vector<int> map_labels(const LabelTrack& track, const Window& w) {
  const size_t need = w.start_index + w.samples();
  if (need > track.labels.size())
    raise(Err::coverage_error, "label track has " + std::to_string(track.labels.size()) +
                                   " samples, window needs " + std::to_string(need));
  const int g = track.missing();
  std::vector<int> out(static_cast<size_t>(w.patch_count), g);
  std::vector<int> counts(static_cast<size_t>(track.n_classes) + 1, 0);
  for (int i = 0; i < w.patch_count; ++i) {
    std::fill(counts.begin(), counts.end(), 0);
    size_t base = w.start_index + static_cast<size_t>(i) * w.patch_len;
    for (int k = 0; k < w.patch_len; ++k) ++counts[static_cast<size_t>(track.labels[base + k])];
    int best = g;
    int best_count = -1;
    bool tie = false;
    for (int c = 0; c <= track.n_classes; ++c) {
      if (counts[static_cast<size_t>(c)] > best_count) {
        best_count = counts[static_cast<size_t>(c)];
        best = c;
        tie = false;
      } else if (counts[static_cast<size_t>(c)] == best_count) {
        tie = true;
      }
    }
    out[static_cast<size_t>(i)] = (tie || best == g) ? g : best;
  }
  return out;
}

void SyntheticConfig::validate() const {
  const size_t n = classes.size();
  if (n == 0) raise(Err::invalid_config, "synthetic config needs at least one class");
  if (transition.size() != n || dwell_mean_s.size() != n)
    raise(Err::invalid_config, "transition matrix and dwell means must match class count");
  for (size_t i = 0; i < n; ++i) {
    if (transition[i].size() != n) raise(Err::invalid_config, "transition matrix is not square");
    double row_sum = 0.0;
    for (double p : transition[i]) {
      if (p < 0.0) raise(Err::invalid_config, "negative transition probability");
      row_sum += p;
    }
    if (std::abs(row_sum - 1.0) > 1e-9)
      raise(Err::invalid_config,
            "transition row " + std::to_string(i) + " sums to " + std::to_string(row_sum));
    if (!(dwell_mean_s[i] > 0.0)) raise(Err::invalid_config, "dwell means must be positive");
  }
}

SyntheticRecording generate_synthetic(const SyntheticConfig& cfg, double duration_s,
                                      double rate_hz) {
  cfg.validate();
  if (!(duration_s > 0.0) || !(rate_hz > 0.0))
    raise(Err::invalid_config, "duration and rate must be positive");

  Rng rng(mix_seed(cfg.seed, "synth"));
  const size_t n_classes = cfg.classes.size();

  // whole-second dwells so label and signal switch on both the source and
  // the 30 Hz grids
  std::vector<LabelInterval> intervals;
  size_t state = rng.below(n_classes);
  double t = 0.0;
  while (t < duration_s) {
    double u = rng.uniform01();
    double dwell = std::max(1.0, std::round(-cfg.dwell_mean_s[state] * std::log(1.0 - u)));
    double end = std::min(duration_s, t + dwell);
    intervals.push_back({t, end, cfg.classes[state].name});
    t = end;
    double r = rng.uniform01();
    double acc = 0.0;
    size_t next = n_classes - 1;
    for (size_t j = 0; j < n_classes; ++j) {
      acc += cfg.transition[state][j];
      if (r < acc) {
        next = j;
        break;
      }
    }
    state = next;
  }

  SyntheticRecording out;
  out.raw.sample_rate_hz = rate_hz;
  const size_t n_raw = static_cast<size_t>(std::floor(duration_s * rate_hz));
  out.raw.samples.resize(n_raw);

  // each dwell starts at a fresh orientation (as if the wearer repositioned),
  // then the gravity vector drifts at the class rate
  auto fresh_orientation = [&rng](double* azimuth, double* polar) {
    *azimuth = rng.uniform(0.0, 2.0 * kPi);
    *polar = std::clamp(std::acos(rng.uniform(-1.0, 1.0)), 0.05, kPi - 0.05);
  };
  double azimuth = 0.0, polar = 0.0;
  fresh_orientation(&azimuth, &polar);
  const double dt = 1.0 / rate_hz;
  const double axis_phase[3] = {0.0, 2.0 * kPi / 3.0, 4.0 * kPi / 3.0};

  size_t iv = 0;
  for (size_t i = 0; i < n_raw; ++i) {
    double ts = static_cast<double>(i) / rate_hz;
    while (iv + 1 < intervals.size() && ts >= intervals[iv].end_s) {
      ++iv;
      fresh_orientation(&azimuth, &polar);
    }
    size_t cls = 0;
    for (size_t c = 0; c < n_classes; ++c)
      if (cfg.classes[c].name == intervals[iv].label) cls = c;
    const SyntheticClass& sc = cfg.classes[cls];

    double step = sc.drift_rate * std::sqrt(dt);
    azimuth += rng.gaussian(0.0, step);
    polar += rng.gaussian(0.0, step);
    polar = std::clamp(polar, 0.05, kPi - 0.05);

    double g[3] = {std::sin(polar) * std::cos(azimuth), std::sin(polar) * std::sin(azimuth),
                   std::cos(polar)};
    for (int axis = 0; axis < 3; ++axis) {
      double v = g[axis];
      for (size_t h = 0; h < sc.harmonics_g.size(); ++h) {
        double f = sc.fundamental_hz * static_cast<double>(h + 1);
        v += sc.harmonics_g[h] * std::sin(2.0 * kPi * f * ts + axis_phase[axis]);
      }
      v += rng.gaussian(0.0, sc.noise_std_g);
      out.raw.samples[i][axis] = static_cast<float>(v);
    }
  }

  out.intervals = intervals;
  std::vector<std::string> names;
  for (const auto& c : cfg.classes) names.push_back(c.name);
  out.track30 = labels_from_intervals(intervals,
                                      static_cast<size_t>(std::floor(duration_s * 30.0)), names);
  return out;
}

void RecordingStore::add(Recording30 rec, std::optional<LabelTrack> labels) {
  std::string id = rec.id;
  if (labels.has_value()) labels_[id] = std::move(*labels);
  recordings_[std::move(id)] = std::move(rec);
}

const Recording30& RecordingStore::get(const std::string& id) const {
  auto it = recordings_.find(id);
  if (it == recordings_.end()) raise(Err::missing_recording, "unknown recording '" + id + "'");
  return it->second;
}

const LabelTrack* RecordingStore::labels(const std::string& id) const {
  auto it = labels_.find(id);
  return it == labels_.end() ? nullptr : &it->second;
}

std::vector<std::string> RecordingStore::ids() const {
  std::vector<std::string> out;
  out.reserve(recordings_.size());
  for (const auto& [id, rec] : recordings_) out.push_back(id);
  return out;
}

std::vector<Window> assemble_batch(const BatchPlan& plan, const RecordingStore& store,
                                   const WindowGeometry& geo) {
  std::vector<Window> out;
  out.reserve(plan.window_count());
  for (const auto& entry : plan.entries) {
    const Recording30& rec = store.get(entry.recording_id);
    for (size_t off : entry.offsets) out.push_back(make_window(rec, off, geo));
  }
  return out;
}

BatchPlan make_pretrain_plan(const RecordingStore& store, const std::vector<std::string>& ids,
                             const WindowGeometry& geo, int windows_per_recording,
                             uint64_t seed) {
  const size_t W = geo.window_samples();
  const size_t S = geo.pretrain_stride();
  const size_t full_span = W + (static_cast<size_t>(windows_per_recording) - 1) * S;

  BatchPlan plan;
  for (const auto& id : ids) {
    const Recording30& rec = store.get(id);
    std::vector<Segment> eligible, fallback;
    for (const Segment& seg : rec.wear_segments) {
      size_t span = seg.second - seg.first;
      if (span >= full_span) eligible.push_back(seg);
      if (span >= W) fallback.push_back(seg);
    }
    if (eligible.empty()) eligible = fallback;
    if (eligible.empty()) raise(Err::no_usable_segment, id + ": no wear segment fits one window");
    Rng rng(mix_seed(seed, "plan:" + id));
    const Segment seg = eligible[rng.below(eligible.size())];
    BatchPlan::Entry entry;
    entry.recording_id = id;
    entry.offsets = pretrain_offsets(seg, geo, windows_per_recording, rng);
    plan.entries.push_back(std::move(entry));
  }
  return plan;
}

}  // namespace famh::ingest
