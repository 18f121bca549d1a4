#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "c2t/harness/harness.hpp"

namespace fs = std::filesystem;
using namespace c2t;
using namespace c2t::harness;

namespace {

// Cheap settings: a handful of trials, one epoch, a few pretraining steps.
GridSpec tiny_grid() {
  GridSpec g = default_grid();
  for (auto& [_, d] : g.data) d.synth.num_trials = 10;
  g.encoder.model_dim = 16;
  g.encoder.blocks = 1;
  g.encoder.heads = 2;
  g.train.epochs = 1;
  g.pretrain.steps = 4;
  g.beam_width = 2;
  return g;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("c2t_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::size_t count_lines(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

}  // namespace

TEST(Harness, NamesRoundTrip) {
  for (Technique t : all_techniques()) EXPECT_EQ(parse_technique(to_string(t)), t);
  EXPECT_THROW(parse_technique("lstm"), Error);
  EXPECT_EQ(scenario(Technique::wav2vec2), "Generic Algorithms");
  EXPECT_EQ(scenario(Technique::bendr), "Brain Encoders");
  EXPECT_EQ(family_of(Technique::data2vec), enc::Family::conformer);
  EXPECT_FALSE(objective_of(Technique::eeg_conformer).has_value());
}

TEST(Harness, SingleCellWritesArtifacts) {
  auto g = tiny_grid();
  g.techniques = {Technique::ctc};
  g.tokenizations = {tok::VocabKind::character};
  g.modalities = {signals::Source::eeg};
  const auto dir = scratch("single");
  const auto res = run_grid(g, dir);
  ASSERT_EQ(res.results.size(), 1u);
  const auto& r = res.results[0];
  EXPECT_EQ(r.status, train::RunStatus::ok) << r.error;
  ASSERT_TRUE(r.greedy && r.beam);
  EXPECT_GE(r.greedy->bleu, 0.0);
  EXPECT_LE(r.greedy->bleu, 1.0);
  for (auto f : {"results.csv", "results.md", "results.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  for (auto f : {"trace.csv", "flags.csv", "epochs.csv", "hypotheses.tsv", "checkpoint.c2t"})
    EXPECT_TRUE(fs::exists(dir / r.artifacts / f)) << f;
  const auto csv = slurp(dir / "results.csv");
  EXPECT_EQ(csv.rfind("technique,tokenization,modality,seed,bleu,rouge1_f,wer,cer,status,flags\n", 0), 0u);
  EXPECT_EQ(count_lines(csv), 2u);
  const auto j = nlohmann::json::parse(slurp(dir / "results.json"));
  EXPECT_EQ(j.at("cells").size(), 1u);
  EXPECT_EQ(j.at("cells")[0].at("status"), "OK");
}

TEST(Harness, FullTableShape) {
  auto g = tiny_grid();
  g.train.epochs = 1;
  g.pretrain.steps = 2;
  const auto res = run_grid(g);
  EXPECT_EQ(res.results.size(), 20u);
  EXPECT_TRUE(res.synthetic_ima);
  // header + separator + 10 technique rows
  std::istringstream is(res.table);
  std::vector<std::string> rows;
  for (std::string line; std::getline(is, line);)
    if (!line.empty() && line[0] == '|') rows.push_back(line);
  ASSERT_EQ(rows.size(), 12u);
  EXPECT_EQ(rows[0], "| Scenario | Technique | EEG (BLEU, ROUGE) | IMA (BLEU, ROUGE) |");
  EXPECT_NE(rows[2].find("| CTC | CTC+Phoneme |"), std::string::npos);
  EXPECT_NE(rows[3].find("|  | CTC+Character |"), std::string::npos);
  EXPECT_NE(rows[4].find("| Generic Algorithms | Data2Vec+Phoneme |"), std::string::npos);
  EXPECT_NE(rows[8].find("| Brain Encoders | Bendr+Phoneme |"), std::string::npos);
  EXPECT_NE(rows[11].find("EEG-Conformer+Character"), std::string::npos);
  for (std::size_t i = 2; i < rows.size(); ++i) EXPECT_EQ(std::count(rows[i].begin(), rows[i].end(), '|'), 5) << rows[i];
  EXPECT_NE(res.table.find("synthetic IMA-profile"), std::string::npos);
}

TEST(Harness, CsvIsByteReproducibleAcrossJobCounts) {
  auto g = tiny_grid();
  g.techniques = {Technique::ctc, Technique::wav2vec2};
  g.modalities = {signals::Source::eeg};
  g.seeds = {0, 1};
  const auto a = scratch("rep_a"), b = scratch("rep_b");
  run_grid(g, a);
  g.jobs = 3;
  run_grid(g, b);
  const auto ca = slurp(a / "results.csv");
  EXPECT_EQ(ca, slurp(b / "results.csv"));
  EXPECT_EQ(slurp(a / "results.md"), slurp(b / "results.md"));
  // 2 techniques x 2 tokenizations, 2 seeds + mean each
  EXPECT_EQ(count_lines(ca), 1u + 4u * 3u);
  EXPECT_NE(ca.find(",mean,"), std::string::npos);
}

TEST(Harness, FailingCellDoesNotStopGrid) {
  auto g = tiny_grid();
  g.techniques = {Technique::ctc, Technique::bendr};
  g.tokenizations = {tok::VocabKind::character};
  g.modalities = {signals::Source::eeg};
  CellOverride o;
  o.technique = Technique::ctc;
  o.init_scale = 1e6;
  o.train = {{"clip_enabled", false}};
  g.overrides = {o};
  const auto dir = scratch("fail");
  const auto res = run_grid(g, dir);
  ASSERT_EQ(res.results.size(), 2u);
  const auto& bad = res.results[0];
  EXPECT_EQ(bad.status, train::RunStatus::failed);
  EXPECT_FALSE(bad.greedy.has_value());
  EXPECT_FALSE(bad.flag_summary().empty());
  EXPECT_EQ(res.results[1].status, train::RunStatus::ok) << res.results[1].error;
  EXPECT_NE(res.table.find("FAILED ("), std::string::npos);
  const auto csv = slurp(dir / "results.csv");
  EXPECT_NE(csv.find("ctc,character,eeg,0,,,,,FAILED,"), std::string::npos) << csv;
  EXPECT_NE(csv.find("bendr,character,eeg,0,0."), std::string::npos) << csv;
  EXPECT_TRUE(fs::exists(dir / bad.artifacts / "flags.csv"));
}

TEST(Harness, ThrowingCellIsFailedWithErrorKind) {
  auto g = tiny_grid();
  g.techniques = {Technique::ctc};
  g.tokenizations = {tok::VocabKind::character};
  g.modalities = {signals::Source::eeg};
  CellOverride o;
  o.train = {{"clip_norm", 0.0}};
  g.overrides = {o};
  const auto dir = scratch("throw");
  const auto res = run_grid(g, dir);
  const auto& r = res.results.at(0);
  EXPECT_EQ(r.status, train::RunStatus::failed);
  EXPECT_EQ(r.flag_summary(), "error:InvalidConfig");
  EXPECT_NE(slurp(dir / r.artifacts / "error.txt").find("clip_norm"), std::string::npos);
}

TEST(Harness, OverrideSelectsOnlyMatchingCells) {
  auto g = tiny_grid();
  CellOverride o;
  o.modality = signals::Source::ima;
  o.train = {{"lr", 1e-4}};
  g.overrides = {o};
  const auto data = prepare_data(g, signals::Source::ima);
  const tok::Tokenizer tk(tok::VocabKind::character);
  const auto ima = plan_cell(g, {Technique::bendr, tok::VocabKind::character, signals::Source::ima, 3}, data, tk);
  const auto eeg = plan_cell(g, {Technique::bendr, tok::VocabKind::character, signals::Source::eeg, 3}, data, tk);
  EXPECT_DOUBLE_EQ(ima.train.lr, 1e-4);
  EXPECT_DOUBLE_EQ(eeg.train.lr, g.train.lr);
  EXPECT_EQ(ima.train.seed, 3u);
  EXPECT_EQ(ima.encoder.family, enc::Family::bendr);
  EXPECT_EQ(ima.encoder.in_channels, 16u);
  EXPECT_EQ(ima.encoder.vocab_size, tk.vocab_size());
}

TEST(Harness, SpecJsonRoundTrip) {
  auto g = tiny_grid();
  g.seeds = {4, 5};
  g.techniques = {Technique::bendr};
  CellOverride o;
  o.tokenization = tok::VocabKind::phoneme;
  o.init_scale = 2.0;
  g.overrides = {o};
  const nlohmann::json j = g;
  const auto back = grid_from_json(j);
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.seeds, g.seeds);
  ASSERT_EQ(back.overrides.size(), 1u);
  EXPECT_EQ(*back.overrides[0].tokenization, tok::VocabKind::phoneme);
}

TEST(Harness, BadSpecRejected) {
  EXPECT_THROW(grid_from_json({{"techniques", {"rnn"}}}), Error);
  EXPECT_THROW(grid_from_json({{"seeds", "zero"}}), Error);
  auto g = default_grid();
  g.seeds.clear();
  EXPECT_THROW(g.check(), Error);
}

TEST(Harness, ModalityMismatchIsDataError) {
  const auto dir = scratch("mismatch");
  fs::create_directories(dir);
  auto cfg = default_synth(signals::Source::eeg);
  cfg.num_trials = 6;
  const auto ds = signals::generate_synthetic(cfg, 0);
  const auto manifest = signals::save_dataset(ds, dir);
  auto g = tiny_grid();
  g.data[signals::Source::ima] = DataSpec{manifest.string(), {}};
  g.data[signals::Source::eeg] = DataSpec{manifest.string(), {}};
  try {
    prepare_data(g, signals::Source::ima);
    FAIL() << "expected DataError";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DataError);
  }
  EXPECT_NO_THROW(prepare_data(g, signals::Source::eeg));
}
