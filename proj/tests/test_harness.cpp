#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"

using namespace mugstan;
using namespace testing_util;
using nlohmann::json;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mugstan_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json tiny_feature_doc() {
  return json::parse(R"({
    "seed": 3,
    "model": {
      "visual": {"width": 16, "heads": 2, "layers": 2, "mlp_ratio": 2},
      "text": {"width": 16, "heads": 2, "layers": 1, "joint_dim": 16, "mlp_ratio": 2},
      "stan": {"layers": 1, "heads": 2, "dropout": 0.0}
    },
    "data": {"source": "synthetic",
             "synth": {"mode": "feature", "n_pairs": 8, "frames": 3, "tokens": 4, "patches": 2, "d_in": 8,
                       "distribution": {"up": 1.0}}},
    "optim": {"steps": 4, "batch_size": 4}
  })");
}

json embedding_doc() {
  return json::parse(R"({
    "seed": 5,
    "data": {"source": "synthetic",
             "synth": {"mode": "embedding", "n_pairs": 24, "frames": 6, "tokens": 6, "dim": 16}}
  })");
}

MetricsRecord sample_record(const std::string& name, std::int64_t seed) {
  MetricsRecord r;
  r.name = name;
  r.seed = seed;
  r.r1 = 12.5;
  r.r5 = 50;
  r.r10 = 1.0 / 3.0;
  r.mdr = 2.5;
  r.meanr = 3.125;
  r.final_loss = 0.1 + 0.2;
  r.wall_clock_s = 0;
  r.config_hash = "00ff00ff00ff00ff";
  return r;
}

}  // namespace

// ---------------------------------------------------------------- retrieval

TEST(Retrieval, RanksMatchSortingOracle) {
  Rng rng(90);
  for (std::size_t n : {1, 2, 7, 32}) {
    auto scores = randn<double>({n, n}, rng);
    const auto ranks = diagonal_ranks(scores);
    EXPECT_EQ(ranks, oracle::sorted_ranks(to_mat(scores))) << n;
  }
}

TEST(Retrieval, TiesResolveTowardsLowerIndex) {
  Rng rng(91);
  auto scores = Td::zeros({20, 20});
  for (auto& v : scores.mutable_data()) v = static_cast<double>(rng.uniform_int(3));
  EXPECT_EQ(diagonal_ranks(scores), oracle::sorted_ranks(to_mat(scores)));
  const auto flat = diagonal_ranks(Td::zeros({4, 4}));
  EXPECT_EQ(flat, (std::vector<std::size_t>{1, 2, 3, 4}));
}

TEST(Retrieval, MetricsFromKnownRanks) {
  const auto m = metrics_from_ranks({1, 2, 6, 11});
  EXPECT_DOUBLE_EQ(m.r1, 25.0);
  EXPECT_DOUBLE_EQ(m.r5, 50.0);
  EXPECT_DOUBLE_EQ(m.r10, 75.0);
  EXPECT_DOUBLE_EQ(m.mdr, 4.0);
  EXPECT_DOUBLE_EQ(m.meanr, 5.0);
  EXPECT_DOUBLE_EQ(median_rank({3, 1, 2}), 2.0);
  EXPECT_THROW(median_rank({}), ContractError);
}

TEST(Retrieval, SinglePairIsPerfect) {
  const auto m = retrieval_metrics(Td({1, 1}, {-0.7}));
  EXPECT_EQ(m.r1, 100.0);
  EXPECT_EQ(m.mdr, 1.0);
  EXPECT_EQ(m.meanr, 1.0);
}

TEST(Retrieval, RandomScoresGiveChanceRecall) {
  Rng rng(92);
  const std::size_t n = 20, trials = 400;
  double r1 = 0, r5 = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto m = retrieval_metrics(randn<double>({n, n}, rng));
    r1 += m.r1 / trials;
    r5 += m.r5 / trials;
  }
  EXPECT_NEAR(r1, 100.0 / n, 1.0);
  EXPECT_NEAR(r5, 500.0 / n, 2.0);
}

TEST(Retrieval, NonSquareIsContractError) {
  EXPECT_THROW(diagonal_ranks(Td::zeros({2, 3})), ContractError);
}

// ---------------------------------------------------------------- report

TEST(Report, CsvHeaderIsFixed) {
  const auto csv = records_to_csv({sample_record("mug", 1)});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "name,seed,r1,r5,r10,mdr,meanr,final_loss,wall_clock_s,config_hash");
}

TEST(Report, JsonRoundTripIsExact) {
  auto a = sample_record("mug", 1);
  a.loss_curve = {3.5, 1.0 / 7.0};
  const std::vector<MetricsRecord> recs{a, sample_record("mean, pool", -1)};
  EXPECT_EQ(records_from_json(records_to_json(recs)), recs);
}

TEST(Report, CsvQuotesAwkwardNames) {
  const auto csv = records_to_csv({sample_record("a,\"b\"", 2)});
  EXPECT_NE(csv.find("\"a,\"\"b\"\"\",2,"), std::string::npos) << csv;
}

TEST(Report, ExportsAreByteIdentical) {
  const auto dir = scratch("report");
  const std::vector<MetricsRecord> recs{sample_record("x", 1), sample_record("y", 2)};
  const auto p1 = export_report(recs, dir / "one");
  const auto p2 = export_report(recs, dir / "two");
  EXPECT_EQ(slurp(p1.json), slurp(p2.json));
  EXPECT_EQ(slurp(p1.csv), slurp(p2.csv));
  EXPECT_EQ(records_from_json(slurp(p1.json)), recs);
}

TEST(Report, UnwritableDestinationIsIoError) {
  const auto dir = scratch("report_blocked");
  std::ofstream(dir / "file") << "x";
  EXPECT_THROW(export_report({sample_record("x", 1)}, dir / "file" / "sub" / "out"), IoError);
}

TEST(Report, EmptyRecordsAreRejected) {
  EXPECT_THROW(export_report({}, scratch("report_empty") / "out"), ContractError);
}

// ---------------------------------------------------------------- config

TEST(Config, UnknownKeysAreRejectedWithTheirPath) {
  auto doc = embedding_doc();
  doc["modle"] = json::object();
  try {
    parse_run_config(doc);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("modle"), std::string::npos) << e.what();
  }
  doc = embedding_doc();
  doc["model"]["mug"]["temperature"] = 3;
  EXPECT_THROW(parse_run_config(doc), ConfigError);
  doc = embedding_doc();
  doc["model"]["mug"]["selection"] = "argmax";
  EXPECT_THROW(parse_run_config(doc), ConfigError);
}

TEST(Config, DefaultsAndOverrides) {
  const auto rc = parse_run_config(embedding_doc());
  EXPECT_EQ(rc.seed, 5u);
  EXPECT_EQ(rc.data.synth.seed, 5u);
  EXPECT_EQ(rc.model.mug.tau, 100.0);
  EXPECT_EQ(rc.model.mug.granularity, Granularity::FrameToken);
  const auto over = parse_run_config(embedding_doc(), 11);
  EXPECT_EQ(over.seed, 11u);
  EXPECT_EQ(over.data.synth.seed, 11u);
  EXPECT_EQ(over.source["seed"], 11);
}

TEST(Config, FeatureModeFitsEncoderGeometry) {
  const auto rc = parse_run_config(tiny_feature_doc());
  EXPECT_EQ(rc.model.visual.d_in, 8u);
  EXPECT_EQ(rc.model.visual.patches, 2u);
  EXPECT_EQ(rc.model.text.max_tokens, 4u);
  EXPECT_EQ(rc.model.text.vocab, rc.data.synth.vocab_size());
  auto doc = tiny_feature_doc();
  doc["model"]["visual"]["d_in"] = 5;
  EXPECT_THROW(parse_run_config(doc), ConfigError);
}

TEST(Config, InvalidValuesAreConfigErrors) {
  auto doc = embedding_doc();
  doc["optim"] = {{"batch_size", 1}};
  EXPECT_THROW(parse_run_config(doc), ConfigError);
  doc = embedding_doc();
  doc["eval"] = {{"workers", 0}};
  EXPECT_THROW(parse_run_config(doc), ConfigError);
  doc = embedding_doc();
  doc["data"] = {{"source", "file"}, {"path", "/nonexistent/corpus.mgsv"}};
  EXPECT_THROW(parse_run_config(doc), ConfigError);
  doc = embedding_doc();
  doc["model"]["mug"]["tau"] = 0;
  EXPECT_THROW(parse_run_config(doc), ConfigError);
}

TEST(Config, HashIsStableAndSensitive) {
  const auto a = config_hash(parse_run_config(embedding_doc()).source);
  const auto b = config_hash(parse_run_config(json::parse(embedding_doc().dump())).source);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 16u);
  EXPECT_NE(a, config_hash(parse_run_config(embedding_doc(), 6).source));
  EXPECT_EQ(config_hash(json::parse(R"({"a":1,"b":2})")), config_hash(json::parse(R"({"b":2,"a":1})")));
}

TEST(Config, FileErrors) {
  const auto dir = scratch("config");
  EXPECT_THROW(load_run_config(dir / "missing.json"), IoError);
  std::ofstream(dir / "bad.json") << "{\"seed\": 3,,}";
  try {
    load_run_config(dir / "bad.json");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
}

// ---------------------------------------------------------------- optimiser and checkpoints

TEST(AdamW, FirstStepMovesBySignOfGradient) {
  auto w = Td({3}, {1.0, -2.0, 0.5}, true);
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW<double> opt({{"g", 0.01, {{"w", w}}}}, cfg);
  Tape<double> tape;
  Td loss;
  {
    Tape<double>::Scope scope(tape);
    loss = sum_all(mul(w, Td({3}, {3.0, -1.0, 0.0})));
  }
  tape.backward(loss);
  opt.step();
  EXPECT_NEAR(w.data()[0], 1.0 - 0.01 * (1.0 + 0.1 * 1.0), 1e-9);
  EXPECT_NEAR(w.data()[1], -2.0 - 0.01 * (-1.0 + 0.1 * -2.0), 1e-9);
  EXPECT_NEAR(w.data()[2], 0.5 - 0.01 * 0.1 * 0.5, 1e-12);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, ZeroLearningRateLeavesParametersAlone) {
  auto w = Td({2}, {1.0, 2.0}, true);
  AdamW<double> opt({{"g", 0.0, {{"w", w}}}});
  Tape<double> tape;
  Td loss;
  {
    Tape<double>::Scope scope(tape);
    loss = sum_all(mul(w, w));
  }
  tape.backward(loss);
  opt.step();
  EXPECT_EQ(w.data()[0], 1.0);
  EXPECT_EQ(w.data()[1], 2.0);
  EXPECT_THROW(AdamW<double>({{"g", -1.0, {}}}), ConfigError);
}

TEST(Checkpoint, RoundTripRestoresModel) {
  const auto rc = parse_run_config(tiny_feature_doc());
  MugStanModel<double> a(rc.model, 1), b(rc.model, 2);
  const auto dir = scratch("ckpt");
  save_checkpoint(dir / "m.mgsk", a.state(), rc.source);
  restore_tensors(read_checkpoint(dir / "m.mgsk"), b.state());
  const auto sa = a.state(), sb = b.state();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(max_abs_diff(sa[i].second, sb[i].second), 0.0) << sa[i].first;
  EXPECT_EQ(read_json_file(dir / "m.mgsk.json")["seed"], 3);
}

TEST(Checkpoint, CorruptInputsAreParseErrors) {
  NamedTensors<double> t{{"a", Td({2}, {1, 2})}, {"b", Td({1, 1}, {3})}};
  const auto bytes = encode_checkpoint(t);
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    EXPECT_THROW(decode_checkpoint(std::span<const std::uint8_t>(bytes.data(), n)), ParseError) << n;
  }
  auto extra = bytes;
  extra.push_back(1);
  EXPECT_THROW(decode_checkpoint(extra), ParseError);
  NamedTensors<double> dup{{"a", Td({1}, {1})}, {"a", Td({1}, {2})}};
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(dup)), ParseError);
}

TEST(Checkpoint, RestoreChecksNamesAndShapes) {
  NamedTensors<double> stored{{"a", Td({2}, {1, 2})}};
  const auto map = decode_checkpoint(encode_checkpoint(stored));
  NamedTensors<double> missing{{"b", Td::zeros({2})}};
  EXPECT_THROW(restore_tensors(map, missing), ContractError);
  NamedTensors<double> wrong{{"a", Td::zeros({3})}};
  EXPECT_THROW(restore_tensors(map, wrong), DimensionError);
}

// ---------------------------------------------------------------- training

TEST(Training, ZeroLearningRateKeepsParametersAndLoss) {
  auto doc = tiny_feature_doc();
  doc["optim"] = {{"steps", 3}, {"batch_size", 8}, {"lr_backbone", 0.0}, {"lr_stan", 0.0}};
  const auto rc = parse_run_config(doc);
  const auto corpus = load_corpus<double>(rc);
  MugStanModel<double> model(rc.model, rc.seed);
  NamedTensors<double> before;
  for (const auto& [n, t] : model.state()) before.emplace_back(n, t.clone());
  const auto res = train(rc, model, corpus);
  ASSERT_EQ(res.losses.size(), 3u);
  EXPECT_NEAR(res.losses[1], res.losses[0], 1e-9);
  EXPECT_NEAR(res.losses[2], res.losses[0], 1e-9);
  const auto after = model.state();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(max_abs_diff(after[i].second, before[i].second), 0.0);
}

TEST(Training, SameSeedGivesIdenticalLosses) {
  const auto rc = parse_run_config(tiny_feature_doc());
  const auto corpus = load_corpus<double>(rc);
  MugStanModel<double> a(rc.model, rc.seed), b(rc.model, rc.seed);
  EXPECT_EQ(train(rc, a, corpus).losses, train(rc, b, corpus).losses);
}

TEST(Training, TwoPairBatchLearns) {
  auto doc = tiny_feature_doc();
  doc["data"]["synth"]["n_pairs"] = 2;
  doc["optim"] = {{"steps", 30}, {"batch_size", 2}};
  const auto rc = parse_run_config(doc);
  const auto corpus = load_corpus<double>(rc);
  MugStanModel<double> model(rc.model, rc.seed);
  const double start = corpus_loss(model, corpus, rc.eval);
  train(rc, model, corpus);
  EXPECT_LT(corpus_loss(model, corpus, rc.eval), start);
}

TEST(Training, WritesLogAndCheckpoint) {
  auto doc = tiny_feature_doc();
  const auto dir = scratch("train_out");
  doc["output"] = {{"dir", dir.string()}};
  const auto rc = parse_run_config(doc);
  const auto corpus = load_corpus<double>(rc);
  MugStanModel<double> model(rc.model, rc.seed);
  const auto res = train(rc, model, corpus, {true});
  ASSERT_TRUE(res.checkpoint);
  std::ifstream log(dir / "train_log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = json::parse(line);
    EXPECT_EQ(j["step"], lines);
    EXPECT_EQ(j["loss"].get<double>(), res.losses[lines]);
    ++lines;
  }
  EXPECT_EQ(lines, 4u);
  MugStanModel<double> restored(rc.model, 99);
  restore_tensors(read_checkpoint(*res.checkpoint), restored.state());
  EXPECT_EQ(max_abs_diff(corpus_scores(model, corpus, rc.eval), corpus_scores(restored, corpus, rc.eval)), 0.0);
}

TEST(Training, DivergenceKeepsLastGoodCheckpoint) {
  auto doc = tiny_feature_doc();
  const auto dir = scratch("diverge");
  doc["output"] = {{"dir", dir.string()}};
  doc["optim"] = {{"steps", 10}, {"batch_size", 4}, {"lr_backbone", 1e200}, {"lr_stan", 1e200}, {"checkpoint_every", 1}};
  const auto rc = parse_run_config(doc);
  const auto corpus = load_corpus<double>(rc);
  MugStanModel<double> model(rc.model, rc.seed);
  try {
    train(rc, model, corpus, {true});
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.checkpoint(), dir / "checkpoint.mgsk");
    const auto stored = read_checkpoint(e.checkpoint());
    EXPECT_FALSE(stored.empty());
    for (const auto& [name, t] : stored)
      for (double v : t.data()) ASSERT_TRUE(std::isfinite(v)) << name;
  }
}

TEST(Training, EmbeddingCorpusCannotBeTrained) {
  const auto rc = parse_run_config(embedding_doc());
  const auto corpus = load_corpus<double>(rc);
  ModelConfig mc;
  mc.visual.layers = 4;
  MugStanModel<double> model(mc, 1);
  EXPECT_THROW(train(rc, model, corpus), ConfigError);
}

// ---------------------------------------------------------------- runs and ablations

TEST(Run, EmbeddingModeMugRetrievesAlignedCorpus) {
  const auto rc = parse_run_config(embedding_doc());
  const auto m = run_once<double>(rc, "mug");
  EXPECT_EQ(m.name, "mug");
  EXPECT_EQ(m.seed, 5);
  EXPECT_GT(m.r1, 90.0);
  EXPECT_EQ(m.config_hash, config_hash(rc.source));
}

TEST(Run, FileCorpusMatchesInMemoryCorpus) {
  const auto rc = parse_run_config(embedding_doc());
  const auto corpus = load_corpus<double>(rc);
  const auto dir = scratch("file_corpus");
  std::vector<EmbeddingPair<double>> rounded = corpus.embeddings;
  for (auto& p : rounded) {
    p.video.values = p.video.values.clone();
    p.text.values = p.text.values.clone();
    for (auto* t : {&p.video.values, &p.text.values})
      for (auto& v : t->mutable_data()) v = static_cast<float>(v);
  }
  write_embeddings(dir / "c.mgsv", rounded);
  auto doc = embedding_doc();
  doc["data"] = {{"source", "file"}, {"path", (dir / "c.mgsv").string()}};
  const auto from_file = run_once<double>(parse_run_config(doc), "file");
  Corpus<double> mem;
  mem.embeddings = rounded;
  const auto in_memory = eval_retrieval(rc.model, mem, rc.eval);
  EXPECT_EQ(from_file.r1, in_memory.r1);
  EXPECT_EQ(from_file.meanr, in_memory.meanr);
}

TEST(Ablation, EmptyVariantListIsRejected) {
  EXPECT_THROW(run_ablation<double>(parse_run_config(embedding_doc())), ContractError);
}

TEST(Ablation, FullTopKMatchesSoftmaxRowForRow) {
  auto doc = embedding_doc();
  doc["ablation"] = json::parse(R"({
    "variants": [
      {"name": "softmax", "model": {"mug": {"selection": "softmax"}}},
      {"name": "topk_all", "model": {"mug": {"selection": "top_k", "top_k": 6}}},
      {"name": "mean_pool", "model": {"head": "mean_pool"}}
    ],
    "seeds": [1, 2]
  })");
  const auto res = run_ablation<double>(parse_run_config(doc));
  ASSERT_EQ(res.rows.size(), 6u);
  ASSERT_EQ(res.summary.size(), 3u);
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(res.rows[s].r1, res.rows[2 + s].r1);
    EXPECT_EQ(res.rows[s].meanr, res.rows[2 + s].meanr);
    EXPECT_EQ(res.rows[s].seed, res.rows[2 + s].seed);
  }
  EXPECT_EQ(res.summary[0].seed, -1);
  EXPECT_NEAR(res.summary[0].r1, 0.5 * (res.rows[0].r1 + res.rows[1].r1), 1e-12);
  EXPECT_GE(res.summary[0].r1, res.summary[2].r1);
}
