#pragma once

// Experiment grid: technique x tokenization x modality cells, each an
// optional pretraining stage, CTC fine-tuning and dev-set decoding, rendered
// as a scenario/technique by modality results table.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "c2t/encoders/encoders.hpp"
#include "c2t/error.hpp"
#include "c2t/metrics/metrics.hpp"
#include "c2t/numerics/checkpoint.hpp"
#include "c2t/pretrain/pretrain.hpp"
#include "c2t/signals/signals.hpp"
#include "c2t/signals/synth.hpp"
#include "c2t/tokenizers/tokenizers.hpp"
#include "c2t/trainer/trainer.hpp"

namespace c2t::harness {

namespace fs = std::filesystem;

enum class Technique { ctc, data2vec, wav2vec2, bendr, eeg_conformer };

inline const std::vector<Technique>& all_techniques() {
  static const std::vector<Technique> t{Technique::ctc, Technique::data2vec, Technique::wav2vec2, Technique::bendr,
                                        Technique::eeg_conformer};
  return t;
}

inline std::string to_string(Technique t) {
  switch (t) {
    case Technique::ctc: return "ctc";
    case Technique::data2vec: return "data2vec";
    case Technique::wav2vec2: return "wav2vec2";
    case Technique::bendr: return "bendr";
    case Technique::eeg_conformer: return "eeg_conformer";
  }
  return "?";
}

inline Technique parse_technique(const std::string& s) {
  for (Technique t : all_techniques())
    if (to_string(t) == s) return t;
  raise(ErrorKind::ConfigError, "unknown technique '" + s + "'");
}

inline std::string display_name(Technique t) {
  switch (t) {
    case Technique::ctc: return "CTC";
    case Technique::data2vec: return "Data2Vec";
    case Technique::wav2vec2: return "Wav2Vec2";
    case Technique::bendr: return "Bendr";
    case Technique::eeg_conformer: return "EEG-Conformer";
  }
  return "?";
}

inline std::string scenario(Technique t) {
  switch (t) {
    case Technique::ctc: return "CTC";
    case Technique::data2vec:
    case Technique::wav2vec2: return "Generic Algorithms";
    default: return "Brain Encoders";
  }
}

inline enc::Family family_of(Technique t) {
  if (t == Technique::bendr) return enc::Family::bendr;
  if (t == Technique::eeg_conformer) return enc::Family::eeg_conformer;
  return enc::Family::conformer;
}

inline std::optional<pre::Objective> objective_of(Technique t) {
  if (t == Technique::data2vec) return pre::Objective::data2vec;
  if (t == Technique::wav2vec2) return pre::Objective::wav2vec2;
  return std::nullopt;
}

inline std::string display_name(tok::VocabKind k) { return k == tok::VocabKind::phoneme ? "Phoneme" : "Character"; }
inline std::string display_name(signals::Source s) { return s == signals::Source::eeg ? "EEG" : "IMA"; }

// ---------------------------------------------------------------------------
// Spec

/// Where a modality's trials come from: a manifest on disk, else a synthetic
/// configuration.
struct DataSpec {
  std::string manifest;
  signals::SynthConfig synth;
};

/// Per-cell configuration patch. Unset selectors match every cell; `train`
/// and `encoder` are JSON objects merged over the grid defaults.
struct CellOverride {
  std::optional<Technique> technique;
  std::optional<tok::VocabKind> tokenization;
  std::optional<signals::Source> modality;
  nlohmann::json train = nlohmann::json::object();
  nlohmann::json encoder = nlohmann::json::object();
  // Multiplies every initial parameter before fine-tuning (fault injection).
  double init_scale = 1.0;
};

struct GridSpec {
  std::vector<Technique> techniques = all_techniques();
  std::vector<tok::VocabKind> tokenizations{tok::VocabKind::phoneme, tok::VocabKind::character};
  std::vector<signals::Source> modalities{signals::Source::eeg, signals::Source::ima};
  std::vector<std::uint64_t> seeds{0};
  std::map<signals::Source, DataSpec> data;
  std::uint64_t data_seed = 0;
  double dev_fraction = 0.2;
  std::string lexicon;  // empty: built-in lexicon of the synthetic word list
  enc::EncoderConfig encoder;
  train::TrainConfig train;
  pre::PretrainConfig pretrain;
  std::size_t beam_width = 8;
  std::vector<CellOverride> overrides;
  std::size_t jobs = 1;

  void check() const {
    auto fail = [](const std::string& m) { raise(ErrorKind::InvalidConfig, m); };
    if (techniques.empty() || tokenizations.empty() || modalities.empty() || seeds.empty())
      fail("grid needs at least one technique, tokenization, modality and seed");
    if (!(dev_fraction > 0.0 && dev_fraction < 1.0)) fail("dev_fraction must be in (0, 1)");
    if (beam_width < 1) fail("beam_width must be >= 1");
    if (jobs < 1) fail("jobs must be >= 1");
    train.check();
    pretrain.check();
  }
};

inline signals::SynthConfig default_synth(signals::Source s) {
  auto c = s == signals::Source::eeg ? signals::SynthConfig{} : signals::SynthConfig::ima_profile();
  c.random_text = true;
  c.num_trials = 300;
  c.words_min = 1;
  c.words_max = 2;
  return c;
}

/// Desk-scale grid: every cell of the full table trains to a non-trivial
/// score in a few minutes on one core.
inline GridSpec default_grid() {
  GridSpec g;
  for (auto s : {signals::Source::eeg, signals::Source::ima}) g.data[s] = DataSpec{"", default_synth(s)};
  g.encoder.blocks = 2;
  g.encoder.model_dim = 48;
  g.encoder.heads = 4;
  g.encoder.conv_kernel = 7;
  g.encoder.ff_mult = 2;
  g.train.lr = 2e-3;
  g.train.batch_size = 4;
  g.train.epochs = 12;
  g.pretrain.steps = 100;
  g.pretrain.mask_prob = 0.2;
  g.pretrain.span_length = 3;
  g.pretrain.distractors = 5;
  g.pretrain.entries = 16;
  g.pretrain.top_k = 2;
  g.pretrain.schedule.lr = 2e-3;
  return g;
}

inline void to_json(nlohmann::json& j, const CellOverride& o) {
  j = nlohmann::json::object();
  if (o.technique) j["technique"] = to_string(*o.technique);
  if (o.tokenization) j["tokenization"] = std::string(tok::to_string(*o.tokenization));
  if (o.modality) j["modality"] = signals::to_string(*o.modality);
  j["train"] = o.train;
  j["encoder"] = o.encoder;
  j["init_scale"] = o.init_scale;
}

inline void from_json(const nlohmann::json& j, CellOverride& o) {
  if (j.contains("technique")) o.technique = parse_technique(j.at("technique").get<std::string>());
  if (j.contains("tokenization")) o.tokenization = tok::parse_vocab_kind(j.at("tokenization").get<std::string>());
  if (j.contains("modality")) o.modality = signals::parse_source(j.at("modality").get<std::string>());
  o.train = j.value("train", nlohmann::json::object());
  o.encoder = j.value("encoder", nlohmann::json::object());
  o.init_scale = j.value("init_scale", 1.0);
}

inline void to_json(nlohmann::json& j, const GridSpec& g) {
  j = nlohmann::json::object();
  for (auto t : g.techniques) j["techniques"].push_back(to_string(t));
  for (auto k : g.tokenizations) j["tokenizations"].push_back(std::string(tok::to_string(k)));
  for (auto m : g.modalities) j["modalities"].push_back(signals::to_string(m));
  j["seeds"] = g.seeds;
  j["data"] = nlohmann::json::object();
  for (const auto& [s, d] : g.data) {
    auto& e = j["data"][signals::to_string(s)];
    if (!d.manifest.empty()) e["manifest"] = d.manifest;
    else e["synth"] = d.synth;
  }
  j["data_seed"] = g.data_seed;
  j["dev_fraction"] = g.dev_fraction;
  j["lexicon"] = g.lexicon;
  j["encoder"] = g.encoder;
  j["train"] = g.train;
  j["pretrain"] = g.pretrain;
  j["beam_width"] = g.beam_width;
  j["overrides"] = g.overrides;
  j["jobs"] = g.jobs;
}

/// Fields absent from `j` keep their default_grid() values.
inline GridSpec grid_from_json(const nlohmann::json& j) {
  GridSpec g = default_grid();
  try {
    if (j.contains("techniques")) {
      g.techniques.clear();
      for (const auto& s : j.at("techniques")) g.techniques.push_back(parse_technique(s.get<std::string>()));
    }
    if (j.contains("tokenizations")) {
      g.tokenizations.clear();
      for (const auto& s : j.at("tokenizations")) g.tokenizations.push_back(tok::parse_vocab_kind(s.get<std::string>()));
    }
    if (j.contains("modalities")) {
      g.modalities.clear();
      for (const auto& s : j.at("modalities")) g.modalities.push_back(signals::parse_source(s.get<std::string>()));
    }
    g.seeds = j.value("seeds", g.seeds);
    if (j.contains("data"))
      for (const auto& [key, e] : j.at("data").items()) {
        const auto s = signals::parse_source(key);
        DataSpec d{"", default_synth(s)};
        d.manifest = e.value("manifest", std::string{});
        if (e.contains("synth")) {
          d.synth = default_synth(s);
          from_json(e.at("synth"), d.synth);
        }
        g.data[s] = d;
      }
    g.data_seed = j.value("data_seed", g.data_seed);
    g.dev_fraction = j.value("dev_fraction", g.dev_fraction);
    g.lexicon = j.value("lexicon", g.lexicon);
    if (j.contains("encoder")) from_json(j.at("encoder"), g.encoder);
    if (j.contains("train")) from_json(j.at("train"), g.train);
    if (j.contains("pretrain")) from_json(j.at("pretrain"), g.pretrain);
    g.beam_width = j.value("beam_width", g.beam_width);
    if (j.contains("overrides")) g.overrides = j.at("overrides").get<std::vector<CellOverride>>();
    g.jobs = j.value("jobs", g.jobs);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::ConfigError, std::string("grid spec: ") + e.what());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Results

struct CellKey {
  Technique technique = Technique::ctc;
  tok::VocabKind tokenization = tok::VocabKind::character;
  signals::Source modality = signals::Source::eeg;
  std::uint64_t seed = 0;

  std::string id() const {
    return to_string(technique) + "-" + std::string(tok::to_string(tokenization)) + "-" +
           signals::to_string(modality) + "-s" + std::to_string(seed);
  }
  bool operator==(const CellKey&) const = default;
};

struct RunResult {
  CellKey key;
  train::RunStatus status = train::RunStatus::ok;
  std::optional<metrics::MetricsReport> greedy;  // empty for FAILED cells
  std::optional<metrics::MetricsReport> beam;
  std::vector<train::DiagnosticFlag> flags;
  std::string error;         // exception text when the cell threw
  std::string error_kind;
  std::string artifacts;     // directory relative to the grid output, empty when not written
  double wall_seconds = 0.0;
  std::size_t steps = 0;
  std::size_t pretrain_steps = 0;

  /// Distinct flag kinds in order of first appearance, ';'-separated;
  /// exceptions appear as `error:<Kind>`.
  std::string flag_summary() const {
    std::vector<std::string> seen;
    for (const auto& f : flags) {
      auto s = train::to_string(f.kind);
      if (std::find(seen.begin(), seen.end(), s) == seen.end()) seen.push_back(s);
    }
    if (!error_kind.empty()) seen.push_back("error:" + error_kind);
    std::string out;
    for (const auto& s : seen) out += (out.empty() ? "" : ";") + s;
    return out;
  }
};

struct GridResult {
  std::vector<RunResult> results;  // technique, tokenization, modality, seed order
  std::string table;               // markdown
  bool synthetic_ima = false;
};

// ---------------------------------------------------------------------------
// One cell

struct PreparedData {
  signals::Dataset train, dev;
  bool synthetic = false;
};

inline signals::Dataset load_or_synthesize(const DataSpec& d, std::uint64_t seed) {
  return d.manifest.empty() ? signals::generate_synthetic(d.synth, seed) : signals::load_dataset(d.manifest);
}

inline PreparedData prepare_data(const GridSpec& spec, signals::Source modality) {
  DataSpec d{"", default_synth(modality)};
  if (auto it = spec.data.find(modality); it != spec.data.end()) d = it->second;
  if (d.manifest.empty()) d.synth.source = modality;
  PreparedData out;
  out.synthetic = d.manifest.empty();
  auto ds = load_or_synthesize(d, spec.data_seed);
  if (ds.trials.empty()) raise(ErrorKind::DataError, signals::to_string(modality) + " dataset has no trials");
  for (const auto& t : ds.trials)
    if (t.recording.source != modality)
      raise(ErrorKind::DataError, "trial " + t.id + " is " + signals::to_string(t.recording.source) +
                                      " data in the " + signals::to_string(modality) + " column");
  auto [tr, dev] = signals::split_dataset(ds, spec.dev_fraction);
  if (tr.trials.empty() || dev.trials.empty())
    raise(ErrorKind::DataError, signals::to_string(modality) + " dataset too small for a train/dev split");
  out.train = std::move(tr);
  out.dev = std::move(dev);
  return out;
}

inline bool matches(const CellOverride& o, const CellKey& k) {
  return (!o.technique || *o.technique == k.technique) && (!o.tokenization || *o.tokenization == k.tokenization) &&
         (!o.modality || *o.modality == k.modality);
}

struct CellPlan {
  enc::EncoderConfig encoder;
  train::TrainConfig train;
  double init_scale = 1.0;
};

inline CellPlan plan_cell(const GridSpec& spec, const CellKey& key, const PreparedData& data,
                          const tok::Tokenizer& tk) {
  nlohmann::json e = spec.encoder, t = spec.train;
  double scale = 1.0;
  for (const auto& o : spec.overrides)
    if (matches(o, key)) {
      e.merge_patch(o.encoder);
      t.merge_patch(o.train);
      scale *= o.init_scale;
    }
  CellPlan p{e.get<enc::EncoderConfig>(), t.get<train::TrainConfig>(), scale};
  p.encoder.family = family_of(key.technique);
  p.encoder.in_channels = data.train.trials.front().recording.channels;
  p.encoder.vocab_size = tk.vocab_size();
  p.train.seed = key.seed;
  p.train.beam_width = 1;
  return p;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) raise(ErrorKind::IoError, "cannot write " + path.string());
  os << text;
}

/// Runs one cell. Errors inside the cell become a FAILED result.
inline RunResult run_cell(const GridSpec& spec, const CellKey& key, const PreparedData& data,
                          const tok::Tokenizer& tk, const std::optional<fs::path>& cell_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult r;
  r.key = key;
  auto finish = [&] {
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  };
  try {
    const auto plan = plan_cell(spec, key, data, tk);
    std::optional<enc::EncoderParams> initial;
    if (auto obj = objective_of(key.technique)) {
      auto pcfg = spec.pretrain;
      pcfg.objective = *obj;
      auto pr = pre::pretrain_run(data.train, plan.encoder, pcfg, key.seed);
      r.pretrain_steps = pr.steps;
      for (const auto& f : pr.flags)
        if (train::is_fatal(f.kind) || pr.status == train::RunStatus::failed) r.flags.push_back(f);
      if (pr.status == train::RunStatus::failed) {
        r.status = train::RunStatus::failed;
        return finish();
      }
      initial = pre::strip_pretrain(std::move(pr.params));
    }
    if (plan.init_scale != 1.0) {
      if (!initial) initial = enc::init_params(plan.encoder, plan.train.seed);
      for (auto& [_, p] : initial->tensors)
        for (auto& v : p.value.data) v = static_cast<float>(v * plan.init_scale);
    }
    auto fit = train::fit(data.train, data.dev, tk, plan.encoder, plan.train, std::move(initial));
    r.steps = fit.steps;
    r.flags.insert(r.flags.end(), fit.flags.begin(), fit.flags.end());
    r.status = fit.status;
    std::optional<train::Evaluation> greedy, beam;
    if (r.status == train::RunStatus::ok) {
      const auto dev = train::make_examples(data.dev, tk, plan.encoder.zscore);
      greedy = train::evaluate_examples(dev, tk, plan.encoder, fit.params, 1);
      beam = train::evaluate_examples(dev, tk, plan.encoder, fit.params, spec.beam_width);
      r.greedy = greedy->report;
      r.beam = beam->report;
    }
    if (cell_dir) {
      fs::create_directories(*cell_dir);
      std::ofstream trace(*cell_dir / "trace.csv", std::ios::binary);
      train::write_trace_csv(trace, fit.trace);
      std::ofstream flags(*cell_dir / "flags.csv", std::ios::binary);
      train::write_flag_log(flags, r.flags);
      std::ostringstream ep;
      ep << "epoch,train_loss,dev_cer,dev_wer\n";
      char buf[128];
      for (const auto& e : fit.epochs) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss, e.dev_cer, e.dev_wer);
        ep << buf;
      }
      write_text(*cell_dir / "epochs.csv", ep.str());
      if (greedy) {
        std::ostringstream hy;
        hy << "reference\tgreedy\tbeam\n";
        for (std::size_t i = 0; i < greedy->references.size(); ++i)
          hy << greedy->references[i] << '\t' << greedy->hypotheses[i] << '\t' << beam->hypotheses[i] << '\n';
        write_text(*cell_dir / "hypotheses.tsv", hy.str());
        nn::save_params(*cell_dir / "checkpoint.c2t", fit.params.tensors);
      }
    }
  } catch (const Error& e) {
    r.status = train::RunStatus::failed;
    r.greedy.reset();
    r.beam.reset();
    r.error = e.what();
    r.error_kind = std::string(c2t::to_string(e.kind()));
    if (cell_dir) {
      fs::create_directories(*cell_dir);
      std::ofstream flags(*cell_dir / "flags.csv", std::ios::binary);
      train::write_flag_log(flags, r.flags);
      write_text(*cell_dir / "error.txt", r.error + "\n");
    }
  }
  return finish();
}

// ---------------------------------------------------------------------------
// Rendering

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

/// One row per cell and seed, plus a `mean` row per cell when there are
/// several seeds. Metrics come from greedy decoding; FAILED rows leave them
/// empty.
inline std::string results_csv(const std::vector<RunResult>& results) {
  std::ostringstream os;
  os << "technique,tokenization,modality,seed,bleu,rouge1_f,wer,cer,status,flags\n";
  auto row = [&](const CellKey& k, const std::string& seed, const std::optional<metrics::MetricsReport>& m,
                 const std::string& status, const std::string& flags) {
    os << to_string(k.technique) << ',' << tok::to_string(k.tokenization) << ',' << signals::to_string(k.modality)
       << ',' << seed << ',';
    if (m) os << fmt("%.6f", m->bleu) << ',' << fmt("%.6f", m->rouge1_f) << ',' << fmt("%.6f", m->wer) << ','
              << fmt("%.6f", m->cer);
    else os << ",,,";
    os << ',' << status << ',' << flags << '\n';
  };
  for (std::size_t i = 0; i < results.size();) {
    std::size_t j = i;
    auto same_cell = [&](const RunResult& r) {
      const auto& a = r.key;
      const auto& b = results[i].key;
      return a.technique == b.technique && a.tokenization == b.tokenization && a.modality == b.modality;
    };
    while (j < results.size() && same_cell(results[j])) {
      const auto& r = results[j];
      row(r.key, std::to_string(r.key.seed), r.greedy, train::to_string(r.status), r.flag_summary());
      ++j;
    }
    if (j - i > 1) {
      metrics::MetricsReport mean;
      std::size_t ok = 0;
      std::string flags;
      for (std::size_t k = i; k < j; ++k) {
        const auto& r = results[k];
        if (r.greedy) {
          mean.bleu += r.greedy->bleu;
          mean.rouge1_f += r.greedy->rouge1_f;
          mean.wer += r.greedy->wer;
          mean.cer += r.greedy->cer;
          ++ok;
        }
      }
      std::optional<metrics::MetricsReport> m;
      if (ok) {
        const double n = static_cast<double>(ok);
        mean.bleu /= n, mean.rouge1_f /= n, mean.wer /= n, mean.cer /= n;
        m = mean;
      }
      row(results[i].key, "mean", m, ok == j - i ? "OK" : (ok ? "PARTIAL" : "FAILED"),
          std::to_string(ok) + "/" + std::to_string(j - i) + " ok");
    }
    i = j;
  }
  return os.str();
}

/// Markdown table: Scenario | Technique | one
/// "(BLEU, ROUGE)" column per modality.
inline std::string render_table(const GridSpec& spec, const std::vector<RunResult>& results, bool synthetic_ima) {
  std::vector<signals::Source> cols;
  for (auto m : {signals::Source::eeg, signals::Source::ima})
    if (std::find(spec.modalities.begin(), spec.modalities.end(), m) != spec.modalities.end()) cols.push_back(m);
  std::ostringstream os;
  os << "| Scenario | Technique |";
  for (auto m : cols) os << ' ' << display_name(m) << " (BLEU, ROUGE) |";
  os << "\n|---|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
  os << '\n';
  std::string last_scenario;
  for (Technique t : all_techniques()) {
    if (std::find(spec.techniques.begin(), spec.techniques.end(), t) == spec.techniques.end()) continue;
    for (auto k : {tok::VocabKind::phoneme, tok::VocabKind::character}) {
      if (std::find(spec.tokenizations.begin(), spec.tokenizations.end(), k) == spec.tokenizations.end()) continue;
      const std::string sc = scenario(t);
      os << "| " << (sc == last_scenario ? "" : sc) << " | " << display_name(t) << '+' << display_name(k) << " |";
      last_scenario = sc;
      for (auto m : cols) {
        double bleu = 0, rouge = 0;
        std::size_t ok = 0, n = 0;
        std::string flags;
        for (const auto& r : results) {
          if (r.key.technique != t || r.key.tokenization != k || r.key.modality != m) continue;
          ++n;
          if (r.greedy) {
            bleu += r.greedy->bleu;
            rouge += r.greedy->rouge1_f;
            ++ok;
          } else if (flags.empty()) {
            flags = r.flag_summary();
          }
        }
        os << ' ';
        if (n == 0) os << "-";
        else if (ok == 0) os << "FAILED" << (flags.empty() ? "" : " (" + flags + ")");
        else {
          os << '(' << fmt("%.3f", bleu / double(ok)) << ", " << fmt("%.3f", rouge / double(ok)) << ')';
          if (ok < n) os << " [" << (n - ok) << '/' << n << " FAILED]";
        }
        os << " |";
      }
      os << '\n';
    }
  }
  os << "\nGreedy CTC decoding on the dev split; ROUGE is ROUGE-1 F1. ";
  if (spec.seeds.size() > 1) os << "Cells show the mean over " << spec.seeds.size() << " seeds.";
  else os << "Seed " << spec.seeds.front() << '.';
  if (synthetic_ima) os << "\nIMA column: synthetic IMA-profile recordings, not human intracortical data.";
  os << '\n';
  return os.str();
}

inline nlohmann::json to_json(const RunResult& r) {
  nlohmann::json j = {{"technique", to_string(r.key.technique)},
                      {"tokenization", std::string(tok::to_string(r.key.tokenization))},
                      {"modality", signals::to_string(r.key.modality)},
                      {"seed", r.key.seed},
                      {"status", train::to_string(r.status)},
                      {"flags", r.flag_summary()},
                      {"steps", r.steps},
                      {"pretrain_steps", r.pretrain_steps},
                      {"wall_seconds", r.wall_seconds},
                      {"artifacts", r.artifacts}};
  j["greedy"] = r.greedy ? r.greedy->to_json() : nlohmann::json(nullptr);
  j["beam"] = r.beam ? r.beam->to_json() : nlohmann::json(nullptr);
  if (!r.error.empty()) j["error"] = r.error;
  nlohmann::json fl = nlohmann::json::array();
  for (const auto& f : r.flags) fl.push_back({{"step", f.step}, {"flag", train::to_string(f.kind)}, {"payload", f.payload}});
  j["flag_log"] = fl;
  return j;
}

// ---------------------------------------------------------------------------
// Grid

inline std::vector<CellKey> cells_of(const GridSpec& spec) {
  std::vector<CellKey> keys;
  for (Technique t : spec.techniques)
    for (auto k : spec.tokenizations)
      for (auto m : spec.modalities)
        for (auto s : spec.seeds) keys.push_back({t, k, m, s});
  return keys;
}

using CellDone = std::function<void(const RunResult&)>;

/// Runs every cell (spec.jobs at a time) and, when out_dir is given, writes
/// results.csv, results.md, results.json and per-cell artifacts under
/// cells/<id>/. Output depends only on the spec, never on scheduling.
inline GridResult run_grid(const GridSpec& spec, const std::optional<fs::path>& out_dir = std::nullopt,
                           const CellDone& on_done = {}) {
  spec.check();
  std::map<signals::Source, PreparedData> data;
  for (auto m : spec.modalities)
    if (!data.count(m)) data.emplace(m, prepare_data(spec, m));
  auto lexicon = spec.lexicon.empty() ? signals::builtin_lexicon()
                                      : std::make_shared<const tok::Lexicon>(tok::load_lexicon(spec.lexicon));
  const tok::Tokenizer chars(tok::VocabKind::character), phones(tok::VocabKind::phoneme, lexicon);

  const auto keys = cells_of(spec);
  GridResult out;
  out.results.resize(keys.size());
  if (out_dir) fs::create_directories(*out_dir);
  std::atomic<std::size_t> next{0};
  std::mutex done_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < keys.size();) {
      const auto& k = keys[i];
      std::optional<fs::path> dir;
      if (out_dir) dir = *out_dir / "cells" / k.id();
      auto r = run_cell(spec, k, data.at(k.modality), k.tokenization == tok::VocabKind::phoneme ? phones : chars, dir);
      if (dir) r.artifacts = (fs::path("cells") / k.id()).generic_string();
      out.results[i] = std::move(r);
      if (on_done) {
        std::lock_guard lock(done_mu);
        on_done(out.results[i]);
      }
    }
  };
  const std::size_t n = std::min(spec.jobs, keys.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  out.synthetic_ima = data.count(signals::Source::ima) && data.at(signals::Source::ima).synthetic;
  out.table = render_table(spec, out.results, out.synthetic_ima);
  if (out_dir) {
    write_text(*out_dir / "results.csv", results_csv(out.results));
    write_text(*out_dir / "results.md", out.table);
    nlohmann::json j = {{"spec", spec}, {"cells", nlohmann::json::array()}};
    for (const auto& r : out.results) j["cells"].push_back(to_json(r));
    write_text(*out_dir / "results.json", j.dump(2) + "\n");
  }
  return out;
}

}  // namespace c2t::harness
