#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "mugstan/mugstan.hpp"

using namespace mugstan;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kDiverged = 3, kCheckFailed = 4 };

struct Common {
  fs::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<fs::path> out;

  RunConfig load() const {
    auto rc = load_run_config(config, seed);
    if (workers) {
      if (*workers == 0) throw ConfigError("--workers must be at least 1");
      rc.eval.workers = *workers;
    }
    if (out) rc.output_dir = *out;
    return rc;
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--workers", c.workers, "evaluation threads; 1 is bitwise deterministic");
  cmd->add_option("--out", c.out, "overrides output.dir");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void print_metrics(const MetricsRecord& m) {
  std::printf("%-24s seed %-4lld R@1 %6.2f  R@5 %6.2f  R@10 %6.2f  MdR %5.1f  MeanR %6.2f\n", m.name.c_str(),
              static_cast<long long>(m.seed), m.r1, m.r5, m.r10, m.mdr, m.meanr);
}

/// Model restored from a checkpoint when one is given, fresh from the seed otherwise.
MugStanModel<double> make_model(const RunConfig& rc, const std::optional<fs::path>& checkpoint) {
  MugStanModel<double> model(rc.model, rc.seed);
  if (checkpoint) restore_tensors(read_checkpoint(*checkpoint), model.state());
  return model;
}

/// Feature-mode pairs passed through the model; embedding corpora are returned as-is.
std::vector<EmbeddingPair<double>> embed_corpus(const RunConfig& rc, const Corpus<double>& corpus,
                                                const std::optional<fs::path>& checkpoint) {
  if (!corpus.feature_mode()) return corpus.embeddings;
  auto model = make_model(rc, checkpoint);
  Tape<double>::Pause pause;
  std::vector<EmbeddingPair<double>> out;
  const std::size_t n = corpus.synthetic.size(), step = std::max<std::size_t>(1, rc.eval.encode_batch);
  for (std::size_t s = 0; s < n; s += step) {
    std::vector<std::size_t> idx(std::min(step, n - s));
    std::iota(idx.begin(), idx.end(), s);
    const auto videos = model.encode_videos(detail::stack_feature_frames(corpus.synthetic, idx), false);
    const auto texts = model.encode_texts(detail::gather_ids(corpus.synthetic, idx));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& v = videos.values;
      out.push_back({FrameSequence<double>{reshape(slice(v, 0, b, 1), {v.dim(1), v.dim(2)})}, texts.sequence(b)});
    }
  }
  return out;
}

int cmd_gen_synth(const Common& c, const std::optional<fs::path>& file) {
  const auto rc = c.load();
  if (rc.data.mode != DataMode::Synthetic) throw ConfigError("gen-synth needs data.source = synthetic");
  const auto pairs = generate_corpus<double>(rc.data.synth);
  nlohmann::json manifest;
  manifest["seed"] = rc.data.synth.seed;
  manifest["mode"] = rc.data.synth.mode == SynthMode::Feature ? "feature" : "embedding";
  manifest["config_hash"] = config_hash(rc.source);
  std::array<std::size_t, 3> counts{};
  for (const auto& p : pairs) {
    ++counts[static_cast<int>(p.category)];
    nlohmann::json row{{"category", category_name(p.category)}, {"aligned", p.aligned_mask}};
    if (!p.token_ids.empty()) row["token_ids"] = p.token_ids;
    manifest["pairs"].push_back(row);
  }
  for (auto cat : {Category::Up, Category::Middle, Category::Bottom})
    manifest["counts"][category_name(cat)] = counts[static_cast<int>(cat)];

  if (rc.data.synth.mode == SynthMode::Embedding) {
    const auto path = file.value_or(rc.output_dir / "corpus.mgsv");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::vector<EmbeddingPair<double>> e;
    for (const auto& p : pairs) e.push_back(p.embedding());
    write_embeddings(path, e, manifest);
    std::printf("wrote %zu pairs to %s\n", pairs.size(), path.string().c_str());
  } else {
    // Raw frames are regenerated from the seed; only the layout is written.
    const auto path = file.value_or(rc.output_dir / "corpus.json");
    write_json(path, manifest);
    std::printf("wrote layout of %zu feature-mode pairs to %s\n", pairs.size(), path.string().c_str());
  }
  std::printf("categories: up %zu, middle %zu, bottom %zu\n", counts[0], counts[1], counts[2]);
  return kOk;
}

int cmd_train(const Common& c) {
  const auto rc = c.load();
  const auto start = std::chrono::steady_clock::now();
  const auto corpus = load_corpus<double>(rc);
  MugStanModel<double> model(rc.model, rc.seed);
  const double before = corpus_loss(model, corpus, rc.eval);
  const auto res = train(rc, model, corpus, {.write_outputs = true});
  const double after = corpus_loss(model, corpus, rc.eval);
  auto m = eval_retrieval(model, corpus, rc.eval);
  m.name = "train";
  m.seed = static_cast<std::int64_t>(rc.seed);
  m.loss_curve = res.losses;
  m.final_loss = res.losses.empty() ? 0.0 : res.losses.back();
  m.config_hash = config_hash(rc.source);
  m.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto paths = export_report({m}, rc.output_dir / "metrics");
  std::printf("steps %zu  corpus L_co %.4f -> %.4f  logit scale %.2f\n", res.steps, before, after,
              model.logit_scale_value());
  print_metrics(m);
  std::printf("checkpoint %s\nreport %s\n", res.checkpoint->string().c_str(), paths.json.string().c_str());
  return kOk;
}

int cmd_eval(const Common& c, const std::optional<fs::path>& checkpoint) {
  const auto rc = c.load();
  const auto start = std::chrono::steady_clock::now();
  const auto corpus = load_corpus<double>(rc);
  MetricsRecord m;
  if (corpus.feature_mode()) {
    auto model = make_model(rc, checkpoint);
    m = eval_retrieval(model, corpus, rc.eval);
  } else {
    m = eval_retrieval(rc.model, corpus, rc.eval);
  }
  m.name = "eval";
  m.seed = static_cast<std::int64_t>(rc.seed);
  m.config_hash = config_hash(rc.source);
  m.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto paths = export_report({m}, rc.output_dir / "eval");
  print_metrics(m);
  std::printf("report %s\n", paths.json.string().c_str());
  return kOk;
}

int cmd_audit(const Common& c, const std::optional<fs::path>& checkpoint) {
  const auto rc = c.load();
  const auto corpus = load_corpus<double>(rc);
  const auto pairs = embed_corpus(rc, corpus, checkpoint);
  const auto report = audit_corpus(pairs, rc.eval.audit_scale, rc.eval.audit_threshold);
  auto j = report.to_json();
  if (!corpus.synthetic.empty()) {
    std::size_t agree = 0;
    for (std::size_t i = 0; i < corpus.synthetic.size(); ++i)
      agree += report.pairs[i].category == corpus.synthetic[i].category;
    j["ground_truth_agreement"] = static_cast<double>(agree) / corpus.synthetic.size();
  }
  const auto path = rc.output_dir / "audit.json";
  write_json(path, j);
  std::printf("up %.3f  middle %.3f  bottom %.3f  (%zu pairs)\n", report.fractions[0], report.fractions[1],
              report.fractions[2], report.pairs.size());
  if (j.contains("ground_truth_agreement"))
    std::printf("agreement with generated categories %.3f\n", j["ground_truth_agreement"].get<double>());
  std::printf("report %s\n", path.string().c_str());
  return kOk;
}

int cmd_ablate(const Common& c) {
  const auto rc = c.load();
  const auto res = run_ablation<double>(rc);
  for (const auto& r : res.rows) print_metrics(r);
  std::printf("-- mean over seeds\n");
  for (const auto& r : res.summary) print_metrics(r);
  const auto rows = export_report(res.rows, rc.output_dir / "ablation");
  const auto summary = export_report(res.summary, rc.output_dir / "ablation_summary");
  std::printf("reports %s %s\n", rows.csv.string().c_str(), summary.csv.string().c_str());
  return kOk;
}

int cmd_gradcheck(const Common& c, std::size_t samples, double step, double tolerance, std::size_t batch,
                  Stencil stencil) {
  const auto rc = c.load();
  const auto corpus = load_corpus<double>(rc);
  const std::size_t n = std::min(batch, corpus.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng pick(rc.seed ^ 0x6C11ULL);
  GradCheckResult res;
  if (corpus.feature_mode()) {
    MugStanModel<double> model(rc.model, rc.seed);
    const auto frames = detail::stack_feature_frames(corpus.synthetic, idx);
    const auto ids = detail::gather_ids(corpus.synthetic, idx);
    auto loss = [&] {
      const auto v = model.encode_videos(frames, false);
      return contrastive_loss(model.similarity(v, model.encode_texts(ids)), model.logit_scale()).l_co;
    };
    res = grad_check_params<double>(loss, model.state(), step, samples, pick, stencil);
  } else {
    // Parameter-free head: check the loss against the input embeddings.
    std::vector<FrameSequence<double>> v;
    std::vector<TokenSequence<double>> t;
    for (auto i : idx) {
      v.push_back(corpus.embeddings[i].video);
      t.push_back(corpus.embeddings[i].text);
    }
    auto fb = stack_frames(v);
    auto tb = stack_texts(t);
    const auto scale = rc.model.logit_scale_init;
    auto loss = [&] {
      const auto s = rc.model.head == SimilarityHead::Mug
                         ? pairwise_mug_matrix(fb, tb, rc.model.mug)
                         : pooled_similarity_matrix(fb, tb,
                                                    rc.model.head == SimilarityHead::MeanPool ? Pooling::MeanPool
                                                                                              : Pooling::ClsPool);
      return contrastive_loss(s, scale).l_co;
    };
    res = grad_check_params<double>(loss,{{"frames", fb.values}, {"tokens", tb.values}}, step, samples, pick,
                                    stencil);
  }
  std::printf("max relative error %.3g over %zu coordinates (worst %s), tolerance %.3g\n", res.max_rel_error,
              res.checked, res.worst.c_str(), tolerance);
  return res.max_rel_error < tolerance ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mug-STAN toy-scale training, evaluation and diagnostics"};
  app.require_subcommand(1);
  Common common;
  std::optional<fs::path> file, checkpoint;
  std::size_t samples = 40, batch = 4;
  double step = 1e-3, tolerance = 1e-3;
  Stencil stencil = Stencil::FivePoint;

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic corpus");
  add_common(gen, common);
  gen->add_option("--file", file, "output file (default <out>/corpus.mgsv or corpus.json)");

  auto* tr = app.add_subcommand("train", "train on a feature-mode corpus; writes checkpoint, log and metrics");
  add_common(tr, common);

  auto* ev = app.add_subcommand("eval-retrieval", "text-to-video retrieval metrics");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "trained weights (feature mode)")->check(CLI::ExistingFile);

  auto* au = app.add_subcommand("audit", "per-frame alignment audit and category fractions");
  add_common(au, common);
  au->add_option("--checkpoint", checkpoint, "trained weights (feature mode)")->check(CLI::ExistingFile);

  auto* ab = app.add_subcommand("ablate", "run every ablation variant over the seed set");
  add_common(ab, common);

  auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  add_common(gc, common);
  gc->add_option("--samples", samples, "coordinates to check")->check(CLI::PositiveNumber);
  gc->add_option("--step", step, "central-difference step")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", tolerance, "maximum accepted relative error")->check(CLI::PositiveNumber);
  gc->add_option("--stencil", stencil, "central or five-point")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, Stencil>{{"central", Stencil::Central}, {"five-point", Stencil::FivePoint}}));
  gc->add_option("--batch", batch, "pairs in the checked batch")->check(CLI::Range(2, 1 << 20));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_synth(common, file);
    if (*tr) return cmd_train(common);
    if (*ev) return cmd_eval(common, checkpoint);
    if (*au) return cmd_audit(common, checkpoint);
    if (*ab) return cmd_ablate(common);
    if (*gc) return cmd_gradcheck(common, samples, step, tolerance, batch, stencil);
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    if (!e.checkpoint().empty()) std::fprintf(stderr, "last good checkpoint: %s\n", e.checkpoint().string().c_str());
    return kDiverged;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
