#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "c2t/signals/signals.hpp"
#include "c2t/signals/synth.hpp"

using namespace c2t;
using namespace c2t::signals;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("c2t_signals_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_floats(const fs::path& p, std::size_t n, float value = 0.5f) {
  std::vector<float> v(n, value);
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * 4));
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an exception";
  return ErrorKind::InvalidInput;
}

SynthConfig small_config() {
  SynthConfig c;
  c.channels = 4;
  c.sentences = {"the cat sat", "a dog", "hi there"};
  return c;
}

}  // namespace

TEST(Manifest, LoadsThreeLines) {
  auto dir = fresh_dir("three");
  std::ofstream m(dir / "manifest.jsonl");
  for (int i = 0; i < 3; ++i) {
    write_floats(dir / ("s" + std::to_string(i) + ".f32"), 2 * 5);
    m << R"({"id":"t)" << i << R"(","text":"the cat","signal_file":"s)" << i
      << R"(.f32","channels":2,"sample_rate_hz":512,"source":"eeg"})" << "\n";
  }
  m.close();
  auto ds = load_dataset(dir / "manifest.jsonl");
  ASSERT_EQ(ds.trials.size(), 3u);
  EXPECT_EQ(ds.trials[1].id, "t1");
  EXPECT_EQ(ds.trials[2].recording.frames(), 5u);
  EXPECT_FALSE(ds.trials[0].has_word_events);
}

TEST(Manifest, ChannelMismatchIsFormatError) {
  auto dir = fresh_dir("mismatch");
  write_floats(dir / "s.f32", 7 * 13);
  std::ofstream(dir / "manifest.jsonl")
      << R"({"id":"x","text":"hi","signal_file":"s.f32","channels":8,"sample_rate_hz":256,"source":"eeg"})" << "\n";
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "manifest.jsonl"); }), ErrorKind::FormatError);
}

TEST(Manifest, DeclaredSampleCountChecked) {
  // 7 x 16 floats happen to split into 8 channels of 14; the explicit
  // sample count catches it.
  auto dir = fresh_dir("declared");
  write_floats(dir / "s.f32", 7 * 16);
  std::ofstream(dir / "manifest.jsonl") << R"({"id":"x","text":"hi","signal_file":"s.f32","channels":8,)"
                                        << R"("samples":16,"sample_rate_hz":256,"source":"eeg"})" << "\n";
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "manifest.jsonl"); }), ErrorKind::FormatError);
}

TEST(Manifest, Errors) {
  auto dir = fresh_dir("errors");
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "absent.jsonl"); }), ErrorKind::IoError);

  std::ofstream(dir / "missing.jsonl")
      << R"({"id":"x","text":"hi","signal_file":"nope.f32","channels":1,"sample_rate_hz":256,"source":"eeg"})" << "\n";
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "missing.jsonl"); }), ErrorKind::IoError);

  write_floats(dir / "nan.f32", 4, NAN);
  std::ofstream(dir / "nan.jsonl")
      << R"({"id":"x","text":"hi","signal_file":"nan.f32","channels":1,"sample_rate_hz":256,"source":"eeg"})" << "\n";
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "nan.jsonl"); }), ErrorKind::DataError);

  write_floats(dir / "ok.f32", 4);
  std::ofstream(dir / "bad.jsonl") << "{not json\n";
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "bad.jsonl"); }), ErrorKind::FormatError);

  std::ofstream(dir / "mixed.jsonl")
      << R"({"id":"a","text":"hi","signal_file":"ok.f32","channels":1,"sample_rate_hz":256,"source":"eeg"})" << "\n"
      << R"({"id":"b","text":"hi","signal_file":"ok.f32","channels":1,"sample_rate_hz":256,"source":"ima"})" << "\n";
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "mixed.jsonl"); }), ErrorKind::DataError);
}

TEST(Manifest, GapsAndEyeTrackingFieldsLoad) {
  auto dir = fresh_dir("gaps");
  write_floats(dir / "s.f32", 10);
  std::ofstream(dir / "manifest.jsonl")
      << R"({"id":"a","text":"the cat sat","signal_file":"s.f32","channels":1,"sample_rate_hz":100,"source":"eeg",)"
      << R"("word_events":[{"word":"cat","t_start_ms":10,"t_end_ms":40,"ffd_ms":120,"gpt_ms":300}]})" << "\n"
      << R"({"id":"b","text":"no events","signal_file":"s.f32","channels":1,"sample_rate_hz":100,"source":"eeg"})"
      << "\n";
  auto ds = load_dataset(dir / "manifest.jsonl");
  ASSERT_EQ(ds.trials.size(), 2u);
  EXPECT_EQ(ds.trials[0].word_events[0].ffd_ms, 120.0);
  EXPECT_FALSE(ds.trials[0].word_events[0].trt_ms.has_value());
  auto rep = validate_dataset(ds);
  EXPECT_NEAR(rep.trials[0].word_coverage, 1.0 / 3.0, 1e-12);
  EXPECT_TRUE(rep.trials[1].word_events_missing);
  EXPECT_EQ(rep.trials_without_events, 1u);
}

TEST(Manifest, SaveLoadRoundTripIsBitExact) {
  auto cfg = small_config();
  auto ds = generate_synthetic(cfg, 5);
  ds.trials[0].word_events[0].ffd_ms = 123.456789012345;
  ds.trials[1].has_word_events = false;
  ds.trials[1].word_events.clear();
  auto dir = fresh_dir("roundtrip");
  auto back = load_dataset(save_dataset(ds, dir));
  ASSERT_EQ(back.trials.size(), ds.trials.size());
  for (std::size_t i = 0; i < ds.trials.size(); ++i) EXPECT_EQ(back.trials[i], ds.trials[i]) << i;
}

TEST(Validate, Coverage) {
  Dataset ds;
  Trial t;
  t.id = "x";
  t.text = "one two three four five six seven eight nine ten";
  t.recording = {1, 100.0, std::vector<float>(50, 0.f), Source::eeg};
  t.has_word_events = true;
  for (const char* w : {"one", "three", "five", "seven", "nine"}) t.word_events.push_back({w, 0, 1});
  ds.trials.push_back(t);
  EXPECT_DOUBLE_EQ(validate_dataset(ds).trials[0].word_coverage, 0.5);
  EXPECT_DOUBLE_EQ(validate_dataset(ds).trials[0].ms_per_char, 500.0 / 48.0);

  auto other = t;
  other.recording = {2, 100.0, std::vector<float>(100, 0.f), Source::eeg};
  ds.trials.push_back(other);
  EXPECT_TRUE(validate_dataset(ds).channel_count_inconsistent);
  EXPECT_EQ(validate_dataset(ds).trials.size(), 2u);
}

TEST(Synth, LengthArithmetic) {
  SynthConfig c;
  c.channels = 4;
  c.d_min = c.d_max = 10;
  c.sentences = {"ab"};
  auto ds = generate_synthetic(c, 1);
  ASSERT_EQ(ds.trials.size(), 1u);
  EXPECT_EQ(ds.trials[0].recording.channels, 4u);
  EXPECT_EQ(ds.trials[0].recording.frames(), 20u);
}

TEST(Synth, SameSeedIsByteIdentical) {
  auto c = small_config();
  c.random_text = true;
  c.sentences.clear();
  c.num_trials = 10;
  auto a = generate_synthetic(c, 99), b = generate_synthetic(c, 99);
  EXPECT_EQ(a, b);
  auto da = fresh_dir("det_a"), db = fresh_dir("det_b");
  save_dataset(a, da);
  save_dataset(b, db);
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  EXPECT_EQ(slurp(da / "manifest.jsonl"), slurp(db / "manifest.jsonl"));
  EXPECT_EQ(slurp(da / "signals/3.f32"), slurp(db / "signals/3.f32"));
  EXPECT_NE(generate_synthetic(c, 100), a);
}

TEST(Synth, NoiseOffIsTemplateConcatenation) {
  SynthConfig c;
  c.channels = 3;
  c.snr_db = 0;
  c.add_noise = false;
  c.d_min = c.d_max = 8;
  c.sentences = {"ab", "ba"};
  auto ds = generate_synthetic(c, 3);
  const auto& ab = ds.trials[0].recording;
  const auto& ba = ds.trials[1].recording;
  // Same templates, same durations: "ba" is "ab" with its halves swapped.
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t t = 0; t < 8; ++t) {
      EXPECT_EQ(ab.at(ch, t), ba.at(ch, t + 8));
      EXPECT_EQ(ab.at(ch, t + 8), ba.at(ch, t));
    }
}

TEST(Synth, SnrIsRespected) {
  SynthConfig c;
  c.channels = 4;
  c.snr_db = 10;
  c.sentences = {"the quick brown fox jumps over the lazy dog"};
  auto noisy = generate_synthetic(c, 4);
  c.add_noise = false;
  auto clean = generate_synthetic(c, 4);
  double ps = 0, pn = 0;
  const auto& a = noisy.trials[0].recording.samples;
  const auto& b = clean.trials[0].recording.samples;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ps += double(b[i]) * b[i];
    pn += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  }
  EXPECT_NEAR(10 * std::log10(ps / pn), 10.0, 0.5);
}

TEST(Synth, AlwaysFullCoverage) {
  auto c = small_config();
  c.random_text = true;
  c.sentences.clear();
  c.num_trials = 50;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto rep = validate_dataset(generate_synthetic(c, seed));
    EXPECT_DOUBLE_EQ(rep.mean_word_coverage, 1.0);
    EXPECT_FALSE(rep.channel_count_inconsistent);
  }
}

TEST(Synth, WordEventsAreExact) {
  SynthConfig c;
  c.channels = 1;
  c.sample_rate_hz = 1000;
  c.d_min = c.d_max = 5;
  c.sentences = {"ab cd"};
  auto ev = generate_synthetic(c, 1).trials[0].word_events;
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_EQ(ev[0].word, "ab");
  EXPECT_DOUBLE_EQ(ev[0].t_start_ms, 0.0);
  EXPECT_DOUBLE_EQ(ev[0].t_end_ms, 10.0);
  EXPECT_DOUBLE_EQ(ev[1].t_start_ms, 15.0);
  EXPECT_DOUBLE_EQ(ev[1].t_end_ms, 25.0);
}

TEST(Synth, ConfigErrors) {
  SynthConfig c;
  EXPECT_EQ(kind_of([&] { generate_synthetic(c, 1); }), ErrorKind::InvalidConfig);
  c.sentences = {"a"};
  c.channels = 0;
  EXPECT_EQ(kind_of([&] { generate_synthetic(c, 1); }), ErrorKind::InvalidConfig);
}

TEST(Slice, Contract) {
  Trial t;
  t.recording.channels = 2;
  t.recording.sample_rate_hz = 512;
  for (int i = 0; i < 2 * 1024; ++i) t.recording.samples.push_back(static_cast<float>(i));
  EXPECT_EQ(slice_trial(t, 0, 1000).frames(), 512u);
  EXPECT_EQ(slice_trial(t, 0, t.recording.duration_ms()), t.recording);
  EXPECT_EQ(kind_of([&] { slice_trial(t, 100, 100); }), ErrorKind::RangeError);
  EXPECT_EQ(kind_of([&] { slice_trial(t, -1, 100); }), ErrorKind::RangeError);
  EXPECT_EQ(kind_of([&] { slice_trial(t, 0, 2001); }), ErrorKind::RangeError);
}

TEST(Slice, AdjacentSlicesConcatenate) {
  Trial t;
  t.recording.channels = 3;
  t.recording.sample_rate_hz = 250;
  for (int i = 0; i < 3 * 333; ++i) t.recording.samples.push_back(static_cast<float>(i));
  const double dur = t.recording.duration_ms();
  const std::vector<double> cuts{0.0, 17.3, 401.0, 999.9, dur};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    std::vector<float> joined;
    for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
      auto s = slice_trial(t, cuts[k], cuts[k + 1]);
      for (std::size_t i = 0; i < s.frames(); ++i) joined.push_back(s.at(ch, i));
    }
    ASSERT_EQ(joined.size(), 333u);
    for (std::size_t i = 0; i < 333; ++i) EXPECT_EQ(joined[i], t.recording.at(ch, i));
  }
}

TEST(Frames, ZScorePerChannel) {
  RawRecording r{2, 100.0, {1, 2, 3, 4, 10, 10, 10, 10}, Source::eeg};
  auto x = to_frames(r, true);
  EXPECT_EQ(x.shape, (nn::Shape{4, 2}));
  double m = 0;
  for (std::size_t t = 0; t < 4; ++t) m += x.at(t, 0);
  EXPECT_NEAR(m, 0.0, 1e-6);
  EXPECT_NEAR(x.at(3, 0), 1.5 / std::sqrt(1.25), 1e-5);
  EXPECT_NEAR(x.at(0, 1), 0.0, 1e-6);
  auto raw = to_frames(r, false);
  EXPECT_EQ(raw.at(2, 0), 3.0f);
}

TEST(Split, TailBecomesDev) {
  auto c = small_config();
  c.num_trials = 10;
  auto [tr, dev] = split_dataset(generate_synthetic(c, 1), 0.2);
  EXPECT_EQ(tr.trials.size(), 8u);
  EXPECT_EQ(dev.trials.size(), 2u);
  EXPECT_EQ(dev.split, Split::dev);
  EXPECT_EQ(dev.trials[0].id, "syn-1-8");
}

TEST(Synth, BuiltinLexiconCoversEveryWord) {
  const auto& lex = signals::builtin_lexicon();
  tok::Tokenizer tk(tok::VocabKind::phoneme, lex);
  for (const auto& w : signals::builtin_words()) {
    EXPECT_NE(lex->find(w), nullptr) << w;
    EXPECT_FALSE(tk.encode(w).oov) << w;
  }
  EXPECT_EQ(lex->duplicates, 0u);
  EXPECT_EQ(tk.reference("the cat"), "dh'ah k'ae't");
}
