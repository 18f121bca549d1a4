#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "c2t/error.hpp"
#include "c2t/numerics/tensor.hpp"
#include "c2t/tokenizers/tokenizers.hpp"

namespace c2t::signals {

enum class Source { eeg, ima };
enum class Split { train, dev, test };

inline std::string to_string(Source s) { return s == Source::eeg ? "eeg" : "ima"; }
inline Source parse_source(const std::string& s) {
  if (s == "eeg") return Source::eeg;
  if (s == "ima") return Source::ima;
  raise(ErrorKind::FormatError, "unknown source '" + s + "' (expected eeg or ima)");
}
inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "train";
}

/// Channel-major samples: all of channel 0, then channel 1, ...
struct RawRecording {
  std::size_t channels = 0;
  double sample_rate_hz = 0.0;
  std::vector<float> samples;
  Source source = Source::eeg;

  std::size_t frames() const { return channels ? samples.size() / channels : 0; }
  double duration_ms() const { return static_cast<double>(frames()) * 1000.0 / sample_rate_hz; }
  float at(std::size_t ch, std::size_t t) const { return samples[ch * frames() + t]; }

  void check() const {
    if (channels == 0) raise(ErrorKind::DataError, "recording has no channels");
    if (!(sample_rate_hz > 0.0) || !std::isfinite(sample_rate_hz))
      raise(ErrorKind::DataError, "sample rate must be positive");
    if (samples.empty() || samples.size() % channels != 0)
      raise(ErrorKind::DataError, "sample count is not a positive multiple of the channel count");
    for (float v : samples)
      if (!std::isfinite(v)) raise(ErrorKind::DataError, "non-finite sample");
  }

  bool operator==(const RawRecording&) const = default;
};

/// One word's timing plus optional eye-tracking durations (FFD, TRT, GD,
/// SFD, GPT), all in milliseconds.
struct WordEvent {
  std::string word;
  double t_start_ms = 0.0;
  double t_end_ms = 0.0;
  std::optional<double> ffd_ms{}, trt_ms{}, gd_ms{}, sfd_ms{}, gpt_ms{};

  bool operator==(const WordEvent&) const = default;
};

struct Trial {
  std::string id;
  RawRecording recording;
  std::string text;
  std::vector<WordEvent> word_events;
  // False when the manifest line carried no word_events field at all.
  bool has_word_events = false;

  bool operator==(const Trial&) const = default;
};

struct Dataset {
  std::vector<Trial> trials;
  Split split = Split::train;
  std::string provenance;

  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Manifest I/O

namespace detail {

inline void check_event(const WordEvent& e, const std::string& trial) {
  if (!(e.t_start_ms <= e.t_end_ms))
    raise(ErrorKind::FormatError, trial + ": word event '" + e.word + "' ends before it starts");
  for (const auto& f : {e.ffd_ms, e.trt_ms, e.gd_ms, e.sfd_ms, e.gpt_ms})
    if (f && *f < 0.0) raise(ErrorKind::FormatError, trial + ": negative eye-tracking duration");
}

inline nlohmann::json event_to_json(const WordEvent& e) {
  nlohmann::json j{{"word", e.word}, {"t_start_ms", e.t_start_ms}, {"t_end_ms", e.t_end_ms}};
  if (e.ffd_ms) j["ffd_ms"] = *e.ffd_ms;
  if (e.trt_ms) j["trt_ms"] = *e.trt_ms;
  if (e.gd_ms) j["gd_ms"] = *e.gd_ms;
  if (e.sfd_ms) j["sfd_ms"] = *e.sfd_ms;
  if (e.gpt_ms) j["gpt_ms"] = *e.gpt_ms;
  return j;
}

inline WordEvent event_from_json(const nlohmann::json& j) {
  WordEvent e;
  e.word = j.at("word").get<std::string>();
  e.t_start_ms = j.at("t_start_ms").get<double>();
  e.t_end_ms = j.at("t_end_ms").get<double>();
  auto opt = [&](const char* key, std::optional<double>& dst) {
    if (j.contains(key) && !j[key].is_null()) dst = j[key].get<double>();
  };
  opt("ffd_ms", e.ffd_ms);
  opt("trt_ms", e.trt_ms);
  opt("gd_ms", e.gd_ms);
  opt("sfd_ms", e.sfd_ms);
  opt("gpt_ms", e.gpt_ms);
  return e;
}

inline std::vector<float> read_f32_le(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) raise(ErrorKind::IoError, "cannot open signal file " + path.string());
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes % 4 != 0) raise(ErrorKind::FormatError, path.string() + ": size is not a multiple of 4 bytes");
  is.seekg(0);
  std::vector<unsigned char> raw(bytes);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes)))
    raise(ErrorKind::IoError, "failed reading " + path.string());
  std::vector<float> out(bytes / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(raw[4 * i]) | (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    std::memcpy(&out[i], &u, 4);
  }
  return out;
}

inline void write_f32_le(const std::filesystem::path& path, const std::vector<float>& values) {
  std::vector<unsigned char> raw(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &values[i], 4);
    for (int b = 0; b < 4; ++b) raw[4 * i + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os || !os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    raise(ErrorKind::IoError, "failed writing " + path.string());
}

}  // namespace detail

/// Reads a JSON-lines manifest; signal paths resolve relative to the
/// manifest's directory. Trials keep manifest order.
inline Dataset load_dataset(const std::filesystem::path& manifest_path, Split split = Split::train) {
  std::ifstream is(manifest_path);
  if (!is) raise(ErrorKind::IoError, "cannot open manifest " + manifest_path.string());
  const auto base = manifest_path.parent_path();
  Dataset ds;
  ds.split = split;
  ds.provenance = manifest_path.string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = manifest_path.filename().string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorKind::FormatError, where + ": " + e.what());
    }
    Trial trial;
    try {
      trial.id = j.at("id").get<std::string>();
      trial.text = j.at("text").get<std::string>();
      const auto channels = j.at("channels").get<std::int64_t>();
      if (channels <= 0) raise(ErrorKind::FormatError, where + ": channels must be positive");
      trial.recording.channels = static_cast<std::size_t>(channels);
      trial.recording.sample_rate_hz = j.at("sample_rate_hz").get<double>();
      trial.recording.source = parse_source(j.at("source").get<std::string>());
      if (j.contains("word_events")) {
        trial.has_word_events = true;
        for (const auto& e : j["word_events"]) trial.word_events.push_back(detail::event_from_json(e));
      }
      trial.recording.samples = detail::read_f32_le(base / j.at("signal_file").get<std::string>());
      const std::size_t n = trial.recording.samples.size();
      if (n == 0 || n % trial.recording.channels != 0)
        raise(ErrorKind::FormatError, where + ": payload of " + std::to_string(n) + " floats does not split into " +
                                          std::to_string(channels) + " channels");
      if (j.contains("samples") && j["samples"].get<std::int64_t>() * channels != static_cast<std::int64_t>(n))
        raise(ErrorKind::FormatError, where + ": declared " + std::to_string(channels) + " x " +
                                          std::to_string(j["samples"].get<std::int64_t>()) +
                                          " samples but payload holds " + std::to_string(n) + " floats");
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorKind::FormatError, where + ": " + e.what());
    }
    for (float v : trial.recording.samples)
      if (!std::isfinite(v)) raise(ErrorKind::DataError, where + ": non-finite sample in " + trial.id);
    if (!(trial.recording.sample_rate_hz > 0.0))
      raise(ErrorKind::FormatError, where + ": sample_rate_hz must be positive");
    try {
      tok::normalize(trial.text);
    } catch (const Error&) {
      raise(ErrorKind::DataError, where + ": text is empty after normalization");
    }
    for (const auto& e : trial.word_events) detail::check_event(e, trial.id);
    if (!ds.trials.empty() && ds.trials.front().recording.source != trial.recording.source)
      raise(ErrorKind::DataError, where + ": dataset mixes eeg and ima recordings");
    ds.trials.push_back(std::move(trial));
  }
  return ds;
}

/// Writes `<dir>/manifest.jsonl` plus one payload per trial under
/// `<dir>/signals/`. Returns the manifest path.
inline std::filesystem::path save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "signals");
  const auto manifest = dir / "manifest.jsonl";
  std::ofstream os(manifest);
  if (!os) raise(ErrorKind::IoError, "cannot write " + manifest.string());
  for (std::size_t i = 0; i < ds.trials.size(); ++i) {
    const auto& t = ds.trials[i];
    t.recording.check();
    const std::string rel = "signals/" + std::to_string(i) + ".f32";
    detail::write_f32_le(dir / rel, t.recording.samples);
    nlohmann::json j{{"id", t.id},
                     {"text", t.text},
                     {"signal_file", rel},
                     {"channels", t.recording.channels},
                     {"samples", t.recording.frames()},
                     {"sample_rate_hz", t.recording.sample_rate_hz},
                     {"source", to_string(t.recording.source)}};
    if (t.has_word_events) {
      j["word_events"] = nlohmann::json::array();
      for (const auto& e : t.word_events) j["word_events"].push_back(detail::event_to_json(e));
    }
    os << j.dump() << '\n';
  }
  if (!os) raise(ErrorKind::IoError, "failed writing " + manifest.string());
  return manifest;
}

// ---------------------------------------------------------------------------
// Validation

struct TrialReport {
  std::string id;
  std::size_t words = 0;
  std::size_t words_with_events = 0;
  double word_coverage = 0.0;
  double duration_ms = 0.0;
  double ms_per_char = 0.0;
  std::size_t channels = 0;
  bool word_events_missing = false;
};

struct ValidationReport {
  std::vector<TrialReport> trials;
  bool channel_count_inconsistent = false;
  bool mixed_sources = false;
  double mean_word_coverage = 0.0;
  std::size_t trials_without_events = 0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"trials", nlohmann::json::array()},
                     {"channel_count_inconsistent", channel_count_inconsistent},
                     {"mixed_sources", mixed_sources},
                     {"mean_word_coverage", mean_word_coverage},
                     {"trials_without_events", trials_without_events}};
    for (const auto& t : trials)
      j["trials"].push_back({{"id", t.id},
                             {"words", t.words},
                             {"words_with_events", t.words_with_events},
                             {"word_coverage", t.word_coverage},
                             {"duration_ms", t.duration_ms},
                             {"ms_per_char", t.ms_per_char},
                             {"channels", t.channels},
                             {"word_events_missing", t.word_events_missing}});
    return j;
  }
};

/// Word coverage aligns events to the normalized words in order; an event
/// whose word does not appear later in the sentence is ignored.
inline ValidationReport validate_dataset(const Dataset& ds) {
  ValidationReport rep;
  double coverage_sum = 0.0;
  for (const auto& trial : ds.trials) {
    TrialReport tr;
    tr.id = trial.id;
    tr.channels = trial.recording.channels;
    tr.duration_ms = trial.recording.duration_ms();
    tr.word_events_missing = !trial.has_word_events || trial.word_events.empty();
    std::vector<std::string> words;
    std::string norm;
    try {
      norm = tok::normalize(trial.text);
      words = tok::split_words(norm);
    } catch (const Error&) {
    }
    tr.words = words.size();
    tr.ms_per_char = norm.empty() ? 0.0 : tr.duration_ms / static_cast<double>(norm.size());
    std::vector<bool> covered(words.size(), false);
    std::size_t cursor = 0;
    for (const auto& e : trial.word_events) {
      std::string w;
      try {
        w = tok::normalize(e.word);
      } catch (const Error&) {
        continue;
      }
      for (std::size_t k = cursor; k < words.size(); ++k)
        if (words[k] == w) {
          covered[k] = true;
          cursor = k + 1;
          break;
        }
    }
    tr.words_with_events = static_cast<std::size_t>(std::count(covered.begin(), covered.end(), true));
    tr.word_coverage = words.empty() ? 0.0 : static_cast<double>(tr.words_with_events) / static_cast<double>(words.size());
    coverage_sum += tr.word_coverage;
    if (tr.word_events_missing) ++rep.trials_without_events;
    if (!rep.trials.empty() && rep.trials.front().channels != tr.channels) rep.channel_count_inconsistent = true;
    if (!ds.trials.empty() && ds.trials.front().recording.source != trial.recording.source) rep.mixed_sources = true;
    rep.trials.push_back(std::move(tr));
  }
  if (!ds.trials.empty()) rep.mean_word_coverage = coverage_sum / static_cast<double>(ds.trials.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Windowing and normalization

/// Samples [round(t0 * rate / 1000), round(t1 * rate / 1000)).
inline RawRecording slice_trial(const Trial& trial, double t0_ms, double t1_ms) {
  const auto& rec = trial.recording;
  const double dur = rec.duration_ms();
  if (!(t0_ms >= 0.0 && t0_ms < t1_ms && t1_ms <= dur + 1e-9))
    raise(ErrorKind::RangeError, "slice [" + std::to_string(t0_ms) + ", " + std::to_string(t1_ms) +
                                     ") outside recording of " + std::to_string(dur) + " ms");
  const auto idx = [&](double t) {
    return std::min(rec.frames(), static_cast<std::size_t>(std::llround(t * rec.sample_rate_hz / 1000.0)));
  };
  const std::size_t i0 = idx(t0_ms), i1 = idx(t1_ms);
  if (i1 <= i0) raise(ErrorKind::RangeError, "slice covers no samples");
  RawRecording out;
  out.channels = rec.channels;
  out.sample_rate_hz = rec.sample_rate_hz;
  out.source = rec.source;
  const std::size_t T = rec.frames();
  for (std::size_t c = 0; c < rec.channels; ++c)
    out.samples.insert(out.samples.end(), rec.samples.begin() + static_cast<std::ptrdiff_t>(c * T + i0),
                       rec.samples.begin() + static_cast<std::ptrdiff_t>(c * T + i1));
  return out;
}

/// Time-major [T, C] tensor for the encoders, optionally z-scored per channel.
inline nn::Tensor to_frames(const RawRecording& rec, bool zscore = true) {
  const std::size_t T = rec.frames(), C = rec.channels;
  nn::Tensor out = nn::Tensor::zeros({T, C});
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    if (zscore) {
      for (std::size_t t = 0; t < T; ++t) mean += rec.samples[c * T + t];
      mean /= static_cast<double>(T);
      for (std::size_t t = 0; t < T; ++t) {
        const double d = rec.samples[c * T + t] - mean;
        var += d * d;
      }
      var /= static_cast<double>(T);
    }
    const double inv = zscore ? 1.0 / std::sqrt(var + 1e-8) : 1.0;
    for (std::size_t t = 0; t < T; ++t)
      out.data[t * C + c] = static_cast<float>((rec.samples[c * T + t] - mean) * inv);
  }
  return out;
}

}  // namespace c2t::signals
