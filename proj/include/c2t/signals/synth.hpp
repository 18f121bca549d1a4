#pragma once

// Synthetic sentence recordings: every character owns a fixed multichannel
// waveform template that is time-stretched to a random duration and
// concatenated, then Gaussian noise is added at a target SNR.

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "c2t/error.hpp"
#include "c2t/rng.hpp"
#include "c2t/signals/signals.hpp"
#include "c2t/tokenizers/tokenizers.hpp"

namespace c2t::signals {

struct SynthConfig {
  std::size_t channels = 8;
  double sample_rate_hz = 256.0;
  double snr_db = 20.0;
  bool add_noise = true;
  std::size_t d_min = 6;  // samples per character
  std::size_t d_max = 10;
  Source source = Source::eeg;
  // Fixed sentences, cycled when num_trials exceeds their count.
  std::vector<std::string> sentences;
  // Random sentences drawn from the built-in word list when `sentences` is empty.
  bool random_text = false;
  std::size_t num_trials = 0;  // 0: one trial per listed sentence
  std::size_t words_min = 2;
  std::size_t words_max = 4;
  std::size_t sines_per_template = 3;

  static SynthConfig ima_profile() {
    SynthConfig c;
    c.channels = 16;
    c.sample_rate_hz = 512.0;
    c.source = Source::ima;
    return c;
  }

  void check() const {
    if (channels < 1) raise(ErrorKind::InvalidConfig, "synth: channels must be >= 1");
    if (!(sample_rate_hz > 0.0)) raise(ErrorKind::InvalidConfig, "synth: sample_rate_hz must be > 0");
    if (!(snr_db >= 0.0)) raise(ErrorKind::InvalidConfig, "synth: snr must be >= 0");
    if (d_min < 1 || d_max < d_min) raise(ErrorKind::InvalidConfig, "synth: need 1 <= d_min <= d_max");
    if (sentences.empty() && !random_text) raise(ErrorKind::InvalidConfig, "synth: empty sentence list");
    if (random_text && (num_trials == 0 || words_min < 1 || words_max < words_min))
      raise(ErrorKind::InvalidConfig, "synth: random text needs num_trials >= 1 and 1 <= words_min <= words_max");
    if (sines_per_template < 1) raise(ErrorKind::InvalidConfig, "synth: sines_per_template must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"channels", c.channels},     {"sample_rate_hz", c.sample_rate_hz},
       {"snr_db", c.snr_db},         {"add_noise", c.add_noise},
       {"d_min", c.d_min},           {"d_max", c.d_max},
       {"source", to_string(c.source)}, {"sentences", c.sentences},
       {"random_text", c.random_text}, {"num_trials", c.num_trials},
       {"words_min", c.words_min},   {"words_max", c.words_max},
       {"sines_per_template", c.sines_per_template}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.channels = j.value("channels", c.channels);
  c.sample_rate_hz = j.value("sample_rate_hz", c.sample_rate_hz);
  c.snr_db = j.value("snr_db", c.snr_db);
  c.add_noise = j.value("add_noise", c.add_noise);
  c.d_min = j.value("d_min", c.d_min);
  c.d_max = j.value("d_max", c.d_max);
  if (j.contains("source")) c.source = parse_source(j["source"].get<std::string>());
  c.sentences = j.value("sentences", c.sentences);
  c.random_text = j.value("random_text", c.random_text);
  c.num_trials = j.value("num_trials", c.num_trials);
  c.words_min = j.value("words_min", c.words_min);
  c.words_max = j.value("words_max", c.words_max);
  c.sines_per_template = j.value("sines_per_template", c.sines_per_template);
}

inline const std::vector<std::string>& builtin_words() {
  static const std::vector<std::string> w{
      "the",   "cat",   "sat",   "on",    "mat",   "dog",   "ran",   "home",  "a",     "big",
      "red",   "sun",   "was",   "hot",   "we",    "saw",   "it",    "go",    "now",   "new",
      "old",   "man",   "who",   "did",   "not",   "see",   "my",    "boat",  "blue",  "sky",
      "fox",   "jumps", "over",  "lazy",  "quick", "brown", "she",   "likes", "green", "tea",
      "king",  "queen", "book",  "read",  "late",  "at",    "night", "cold",  "wind",  "blew",
      "zebra", "grass", "eats",  "very",  "quiet", "room",  "he",    "can't", "find",  "keys",
      "water", "flows", "down",  "hill",  "small", "bird",  "sings", "each",  "day",   "they",
      "built", "wall",  "of",    "stone", "six",   "jars",  "with",  "wax",   "over",  "map"};
  return w;
}

/// ARPAbet pronunciations for every builtin word, so phoneme runs on
/// synthetic data never fall back to letter names.
inline const std::shared_ptr<const tok::Lexicon>& builtin_lexicon() {
  static const auto lex = [] {
    std::istringstream is(R"(the DH AH
cat K AE T
sat S AE T
on AA N
mat M AE T
dog D AO G
ran R AE N
home HH OW M
a AH
big B IH G
red R EH D
sun S AH N
was W AA Z
hot HH AA T
we W IY
saw S AO
it IH T
go G OW
now N AW
new N UW
old OW L D
man M AE N
who HH UW
did D IH D
not N AA T
see S IY
my M AY
boat B OW T
blue B L UW
sky S K AY
fox F AA K S
jumps JH AH M P S
over OW V ER
lazy L EY Z IY
quick K W IH K
brown B R AW N
she SH IY
likes L AY K S
green G R IY N
tea T IY
king K IH NG
queen K W IY N
book B UH K
read R IY D
late L EY T
at AE T
night N AY T
cold K OW L D
wind W IH N D
blew B L UW
zebra Z IY B R AH
grass G R AE S
eats IY T S
very V EH R IY
quiet K W AY AH T
room R UW M
he HH IY
can't K AE N T
find F AY N D
keys K IY Z
water W AO T ER
flows F L OW Z
down D AW N
hill HH IH L
small S M AO L
bird B ER D
sings S IH NG Z
each IY CH
day D EY
they DH EY
built B IH L T
wall W AO L
of AH V
stone S T OW N
six S IH K S
jars JH AA R Z
with W IH DH
wax W AE K S
map M AE P
)");
    return std::make_shared<const tok::Lexicon>(tok::parse_lexicon(is));
  }();
  return lex;
}

namespace detail {

struct Template {
  // [channel][sine] -> (amplitude, cycles over the template, phase)
  std::vector<std::vector<std::array<double, 3>>> sines;

  double value(std::size_t ch, double u) const {
    double v = 0.0;
    for (const auto& s : sines[ch]) v += s[0] * std::sin(2.0 * std::numbers::pi * s[1] * u + s[2]);
    return v * std::sin(std::numbers::pi * u);
  }
};

inline std::map<char, Template> make_templates(const SynthConfig& cfg, Rng rng) {
  std::map<char, Template> out;
  std::string alphabet = "abcdefghijklmnopqrstuvwxyz '";
  for (char ch : alphabet) {
    Template t;
    t.sines.resize(cfg.channels);
    for (auto& chan : t.sines)
      for (std::size_t k = 0; k < cfg.sines_per_template; ++k)
        chan.push_back({rng.uniform(0.5, 1.5), rng.uniform(0.25, 2.5), rng.uniform(0.0, 2.0 * std::numbers::pi)});
    out.emplace(ch, std::move(t));
  }
  return out;
}

}  // namespace detail

inline std::string random_sentence(Rng& rng, std::size_t words_min, std::size_t words_max) {
  const auto& words = builtin_words();
  const std::size_t n = words_min + rng.below(words_max - words_min + 1);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + words[rng.below(words.size())];
  return s;
}

/// Deterministic in (config, seed). Templates depend only on the seed, so
/// two datasets drawn with the same seed share the character code.
inline Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.check();
  Rng root(seed);
  const auto templates = detail::make_templates(cfg, root.fork(1));
  Rng text_rng = root.fork(2);
  const std::size_t n = cfg.num_trials ? cfg.num_trials : cfg.sentences.size();

  Dataset ds;
  ds.split = Split::train;
  ds.provenance = "synthetic seed=" + std::to_string(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = root.fork(1000 + i);
    const std::string raw = cfg.sentences.empty() ? random_sentence(text_rng, cfg.words_min, cfg.words_max)
                                                  : cfg.sentences[i % cfg.sentences.size()];
    const std::string text = tok::normalize(raw);

    std::vector<std::size_t> durations(text.size());
    std::size_t total = 0;
    for (auto& d : durations) {
      d = cfg.d_min + rng.below(cfg.d_max - cfg.d_min + 1);
      total += d;
    }

    Trial trial;
    trial.id = "syn-" + std::to_string(seed) + "-" + std::to_string(i);
    trial.text = text;
    trial.has_word_events = true;
    auto& rec = trial.recording;
    rec.channels = cfg.channels;
    rec.sample_rate_hz = cfg.sample_rate_hz;
    rec.source = cfg.source;
    rec.samples.assign(cfg.channels * total, 0.0f);

    std::vector<double> clean(cfg.channels * total);
    std::size_t pos = 0;
    std::size_t word_start = 0;
    std::string word;
    const double ms = 1000.0 / cfg.sample_rate_hz;
    auto close_word = [&](std::size_t end) {
      if (word.empty()) return;
      trial.word_events.push_back({word, static_cast<double>(word_start) * ms, static_cast<double>(end) * ms});
      word.clear();
    };
    for (std::size_t c = 0; c < text.size(); ++c) {
      const char ch = text[c];
      if (ch == ' ') {
        close_word(pos);
      } else {
        if (word.empty()) word_start = pos;
        word += ch;
      }
      const auto& tpl = templates.at(ch);
      const std::size_t d = durations[c];
      for (std::size_t k = 0; k < d; ++k) {
        const double u = (static_cast<double>(k) + 0.5) / static_cast<double>(d);
        for (std::size_t chn = 0; chn < cfg.channels; ++chn) clean[chn * total + pos + k] = tpl.value(chn, u);
      }
      pos += d;
    }
    close_word(pos);

    double noise_sd = 0.0;
    if (cfg.add_noise) {
      double power = 0.0;
      for (double v : clean) power += v * v;
      power /= static_cast<double>(clean.size());
      noise_sd = std::sqrt(power / std::pow(10.0, cfg.snr_db / 10.0));
    }
    for (std::size_t k = 0; k < clean.size(); ++k)
      rec.samples[k] = static_cast<float>(clean[k] + (noise_sd > 0.0 ? noise_sd * rng.normal() : 0.0));
    ds.trials.push_back(std::move(trial));
  }
  return ds;
}

/// Trials [0, n - n_dev) stay in the first set, the tail becomes dev.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double dev_fraction) {
  if (!(dev_fraction >= 0.0 && dev_fraction < 1.0)) raise(ErrorKind::InvalidConfig, "dev_fraction must be in [0, 1)");
  const auto n_dev = static_cast<std::size_t>(std::llround(dev_fraction * static_cast<double>(ds.trials.size())));
  Dataset train, dev;
  train.split = ds.split;
  dev.split = Split::dev;
  train.provenance = dev.provenance = ds.provenance;
  const std::size_t cut = ds.trials.size() - n_dev;
  train.trials.assign(ds.trials.begin(), ds.trials.begin() + static_cast<std::ptrdiff_t>(cut));
  dev.trials.assign(ds.trials.begin() + static_cast<std::ptrdiff_t>(cut), ds.trials.end());
  return {std::move(train), std::move(dev)};
}

}  // namespace c2t::signals
