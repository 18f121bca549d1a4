// c2t command-line front end.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 run failure
// (I/O, data, numerical errors, or a training run that ended FAILED).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "c2t/harness/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace c2t;

namespace {

constexpr int kUsage = 1;
constexpr int kRunFailure = 2;

struct RunFailed {
  std::string message;
};

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) raise(ErrorKind::IoError, "cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    raise(ErrorKind::ConfigError, path + ": " + e.what());
  }
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) raise(ErrorKind::IoError, "cannot open " + path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_stream(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream os(path, std::ios::binary);
  if (!os) raise(ErrorKind::IoError, "cannot write " + path.string());
  body(os);
}

// Settings shared by `pretrain`, `train` and `decode`. Missing fields take
// the grid defaults.
struct RunSpec {
  harness::DataSpec data{"", harness::default_synth(signals::Source::eeg)};
  std::uint64_t data_seed = 0;
  double dev_fraction = 0.2;
  tok::VocabKind tokenization = tok::VocabKind::character;
  std::string lexicon;
  enc::EncoderConfig encoder = harness::default_grid().encoder;
  train::TrainConfig train = harness::default_grid().train;
  pre::PretrainConfig pretrain = harness::default_grid().pretrain;
  std::string init_checkpoint;
};

RunSpec run_spec_from(const json& j) {
  RunSpec r;
  try {
    if (j.contains("data")) {
      const auto& d = j.at("data");
      r.data.manifest = d.value("manifest", std::string{});
      if (d.contains("synth")) from_json(d.at("synth"), r.data.synth);
    }
    r.data_seed = j.value("data_seed", r.data_seed);
    r.dev_fraction = j.value("dev_fraction", r.dev_fraction);
    if (j.contains("tokenization")) r.tokenization = tok::parse_vocab_kind(j.at("tokenization").get<std::string>());
    r.lexicon = j.value("lexicon", r.lexicon);
    if (j.contains("encoder")) from_json(j.at("encoder"), r.encoder);
    if (j.contains("train")) from_json(j.at("train"), r.train);
    if (j.contains("pretrain")) from_json(j.at("pretrain"), r.pretrain);
    r.init_checkpoint = j.value("init_checkpoint", r.init_checkpoint);
  } catch (const json::exception& e) {
    raise(ErrorKind::ConfigError, std::string("run config: ") + e.what());
  }
  return r;
}

json to_json(const RunSpec& r) {
  json d = json::object();
  if (!r.data.manifest.empty()) d["manifest"] = r.data.manifest;
  else d["synth"] = r.data.synth;
  return {{"data", d},
          {"data_seed", r.data_seed},
          {"dev_fraction", r.dev_fraction},
          {"tokenization", std::string(tok::to_string(r.tokenization))},
          {"lexicon", r.lexicon},
          {"encoder", r.encoder},
          {"train", r.train},
          {"pretrain", r.pretrain},
          {"init_checkpoint", r.init_checkpoint}};
}

tok::Tokenizer make_tokenizer(const RunSpec& r) {
  if (r.tokenization == tok::VocabKind::character) return tok::Tokenizer(tok::VocabKind::character);
  auto lex = r.lexicon.empty() ? signals::builtin_lexicon()
                               : std::make_shared<const tok::Lexicon>(tok::load_lexicon(r.lexicon));
  return tok::Tokenizer(tok::VocabKind::phoneme, lex);
}

// Fills the encoder fields that follow from the data and tokenizer.
void bind_encoder(RunSpec& r, const signals::Dataset& ds, const tok::Tokenizer& tk) {
  if (ds.trials.empty()) raise(ErrorKind::DataError, "dataset has no trials");
  r.encoder.in_channels = ds.trials.front().recording.channels;
  r.encoder.vocab_size = tk.vocab_size();
}

void write_logs(const fs::path& dir, const std::vector<train::TraceRow>& trace,
                const std::vector<train::DiagnosticFlag>& flags) {
  write_stream(dir / "trace.csv", [&](std::ostream& os) { train::write_trace_csv(os, trace); });
  write_stream(dir / "flags.csv", [&](std::ostream& os) { train::write_flag_log(os, flags); });
}

std::string flag_list(const std::vector<train::DiagnosticFlag>& flags) {
  std::vector<train::FlagKind> kinds;
  for (const auto& f : flags)
    if (std::find(kinds.begin(), kinds.end(), f.kind) == kinds.end()) kinds.push_back(f.kind);
  return train::flags_cell(kinds);
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_generate(const std::string& config, std::optional<std::uint64_t> seed, const fs::path& out) {
  signals::SynthConfig cfg;
  if (!config.empty()) {
    try {
      from_json(read_json(config), cfg);
    } catch (const json::exception& e) {
      raise(ErrorKind::ConfigError, std::string("synth config: ") + e.what());
    }
  }
  const auto ds = signals::generate_synthetic(cfg, seed.value_or(0));
  const auto manifest = signals::save_dataset(ds, out);
  std::cout << json{{"manifest", manifest.string()}, {"trials", ds.trials.size()}}.dump() << '\n';
  return 0;
}

int cmd_validate(const std::string& manifest) {
  const auto ds = signals::load_dataset(manifest);
  const auto rep = signals::validate_dataset(ds);
  std::cout << rep.to_json().dump(2) << '\n';
  return 0;
}

int cmd_pretrain(RunSpec r, const fs::path& out) {
  const auto ds = harness::load_or_synthesize(r.data, r.data_seed);
  const auto tk = make_tokenizer(r);
  bind_encoder(r, ds, tk);
  fs::create_directories(out);
  const auto res = pre::pretrain_run(ds, r.encoder, r.pretrain, r.train.seed);
  write_logs(out, res.trace, res.flags);
  nn::save_params(out / "checkpoint.c2t", res.params.tensors);
  harness::write_text(out / "config.json", to_json(r).dump(2) + "\n");
  const json summary{{"objective", pre::to_string(r.pretrain.objective)},
                     {"status", train::to_string(res.status)},
                     {"steps", res.steps},
                     {"masked_frames", res.masked_frames},
                     {"total_frames", res.total_frames},
                     {"first_loss", res.trace.empty() ? 0.0 : res.trace.front().loss},
                     {"last_loss", res.trace.empty() ? 0.0 : res.trace.back().loss},
                     {"flags", flag_list(res.flags)}};
  harness::write_text(out / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << '\n';
  if (res.status == train::RunStatus::failed) throw RunFailed{"pretraining FAILED: " + flag_list(res.flags)};
  return 0;
}

int cmd_train(RunSpec r, const fs::path& out) {
  const auto ds = harness::load_or_synthesize(r.data, r.data_seed);
  const auto tk = make_tokenizer(r);
  bind_encoder(r, ds, tk);
  auto [tr, dev] = signals::split_dataset(ds, r.dev_fraction);
  std::optional<enc::EncoderParams> initial;
  if (!r.init_checkpoint.empty())
    initial = pre::strip_pretrain(enc::EncoderParams{nn::load_params<float>(r.init_checkpoint), r.train.seed});
  fs::create_directories(out);
  const auto res = train::fit(tr, dev, tk, r.encoder, r.train, std::move(initial), [](const train::EpochRecord& e) {
    std::fprintf(stderr, "epoch %zu loss %.4f dev_cer %.4f dev_wer %.4f\n", e.epoch, e.train_loss, e.dev_cer,
                 e.dev_wer);
  });
  write_logs(out, res.trace, res.flags);
  harness::write_text(out / "config.json", to_json(r).dump(2) + "\n");
  json summary{{"status", train::to_string(res.status)},
               {"steps", res.steps},
               {"skipped_trials", res.skipped_trials},
               {"best_epoch", res.best_epoch},
               {"flags", flag_list(res.flags)}};
  if (res.status == train::RunStatus::ok) {
    nn::save_params(out / "checkpoint.c2t", res.params.tensors);
    summary["dev"] = res.dev.report.to_json();
  } else {
    summary["dev"] = nullptr;
  }
  harness::write_text(out / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << '\n';
  if (res.status == train::RunStatus::failed) throw RunFailed{"training FAILED: " + flag_list(res.flags)};
  return 0;
}

int cmd_decode(RunSpec r, const std::string& checkpoint, const std::string& manifest, std::size_t beam,
               const fs::path& out) {
  if (!manifest.empty()) r.data = harness::DataSpec{manifest, {}};
  const auto ds = harness::load_or_synthesize(r.data, r.data_seed);
  const auto tk = make_tokenizer(r);
  bind_encoder(r, ds, tk);
  enc::EncoderParams params{nn::load_params<float>(checkpoint), 0};
  params = pre::strip_pretrain(std::move(params));
  enc::check_params(r.encoder, params.tensors);
  const auto examples = train::make_examples(ds, tk, r.encoder.zscore);
  const auto ev = train::evaluate_examples(examples, tk, r.encoder, params, beam);
  fs::create_directories(out);
  write_stream(out / "hypotheses.tsv", [&](std::ostream& os) {
    os << "id\treference\thypothesis\n";
    for (std::size_t i = 0; i < ev.hypotheses.size(); ++i)
      os << ds.trials[i].id << '\t' << ev.references[i] << '\t' << ev.hypotheses[i] << '\n';
  });
  auto report = ev.report.to_json();
  report["beam_width"] = beam;
  harness::write_text(out / "metrics.json", report.dump(2) + "\n");
  std::cout << report.dump() << '\n';
  return 0;
}

int cmd_score(const std::string& hyp_path, const std::string& ref_path) {
  const auto hyps = read_lines(hyp_path), refs = read_lines(ref_path);
  if (hyps.size() != refs.size())
    raise(ErrorKind::InvalidInput, "hypothesis file has " + std::to_string(hyps.size()) +
                                       " lines but reference file has " + std::to_string(refs.size()));
  std::cout << metrics::evaluate(hyps, refs).to_json().dump(2) << '\n';
  return 0;
}

int cmd_grid(const std::string& config, std::optional<std::uint64_t> seed, std::optional<std::size_t> jobs,
             const fs::path& out) {
  auto spec = config.empty() ? harness::default_grid() : harness::grid_from_json(read_json(config));
  if (seed) spec.seeds = {*seed};
  if (jobs) spec.jobs = *jobs;
  const auto res = harness::run_grid(spec, out, [](const harness::RunResult& r) {
    std::fprintf(stderr, "%-40s %-6s %6.1fs %s\n", r.key.id().c_str(), train::to_string(r.status).c_str(),
                 r.wall_seconds, r.flag_summary().c_str());
  });
  std::cout << res.table;
  return 0;
}

int cmd_inspect(const std::string& path) {
  const auto records = nn::load_records(path);
  json j = {{"path", path}, {"tensors", json::array()}};
  std::size_t total = 0;
  for (const auto& r : records) {
    double sq = 0.0;
    bool finite = true;
    for (float v : r.tensor.data) {
      sq += double(v) * v;
      finite = finite && std::isfinite(v);
    }
    total += r.tensor.data.size();
    j["tensors"].push_back(
        {{"name", r.name}, {"shape", r.tensor.shape}, {"l2", std::sqrt(sq)}, {"finite", finite}});
  }
  j["parameters"] = total;
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain-signal to text toolkit: synthetic data, CTC training, pretraining, scoring and the grid."};
  app.require_subcommand(1);
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON configuration file");
    sub->add_option("--seed", seed, "Random seed");
    sub->add_option("--out-dir", out_dir, "Output directory");
  };

  auto* generate = app.add_subcommand("generate", "Write a synthetic dataset (manifest + signals)");
  common(generate);
  generate->add_option("--out", out_dir, "Alias for --out-dir");

  std::string manifest;
  auto* validate = app.add_subcommand("validate", "Load a manifest and print its validation report");
  validate->add_option("manifest", manifest, "manifest.jsonl")->required();

  auto* pretrain = app.add_subcommand("pretrain", "Self-supervised pretraining (wav2vec2 or data2vec)");
  common(pretrain);
  std::string objective;
  pretrain->add_option("--objective", objective, "wav2vec2 | data2vec (overrides the config)");

  auto* trainc = app.add_subcommand("train", "Supervised CTC training with dev evaluation");
  common(trainc);
  std::string init;
  trainc->add_option("--init", init, "Initial checkpoint, e.g. from pretrain");

  auto* decode = app.add_subcommand("decode", "Decode a dataset with a trained checkpoint");
  common(decode);
  std::string checkpoint;
  std::size_t beam = 1;
  decode->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  decode->add_option("--data", manifest, "Manifest to decode (default: the config's data)");
  decode->add_option("--beam", beam, "Beam width; 1 decodes greedily")->check(CLI::PositiveNumber);

  auto* score = app.add_subcommand("score", "Score hypotheses against references (one sentence per line)");
  std::string hyp, ref;
  score->add_option("hypotheses", hyp, "Hypothesis file")->required();
  score->add_option("references", ref, "Reference file")->required();

  auto* grid = app.add_subcommand("grid", "Run the technique x tokenization x modality grid");
  common(grid);
  std::optional<std::size_t> jobs;
  grid->add_option("--jobs", jobs, "Cells run concurrently")->check(CLI::PositiveNumber);

  auto* inspect = app.add_subcommand("inspect-checkpoint", "List tensors in a checkpoint");
  std::string ck;
  inspect->add_option("checkpoint", ck, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    auto spec = [&] {
      auto r = config.empty() ? run_spec_from(json::object()) : run_spec_from(read_json(config));
      if (seed) r.train.seed = *seed;
      return r;
    };
    if (generate->parsed()) return cmd_generate(config, seed, out_dir);
    if (validate->parsed()) return cmd_validate(manifest);
    if (pretrain->parsed()) {
      auto r = spec();
      if (!objective.empty()) r.pretrain.objective = pre::parse_objective(objective);
      return cmd_pretrain(r, out_dir);
    }
    if (trainc->parsed()) {
      auto r = spec();
      if (!init.empty()) r.init_checkpoint = init;
      return cmd_train(r, out_dir);
    }
    if (decode->parsed()) return cmd_decode(spec(), checkpoint, manifest, beam, out_dir);
    if (score->parsed()) return cmd_score(hyp, ref);
    if (grid->parsed()) return cmd_grid(config, seed, jobs, out_dir);
    if (inspect->parsed()) return cmd_inspect(ck);
  } catch (const RunFailed& f) {
    std::cerr << f.message << '\n';
    return kRunFailure;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    const bool usage = e.kind() == ErrorKind::ConfigError || e.kind() == ErrorKind::InvalidConfig;
    return usage ? kUsage : kRunFailure;
  }
  return kUsage;
}
