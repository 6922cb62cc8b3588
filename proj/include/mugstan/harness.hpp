#pragma once

// Training, retrieval evaluation and ablation runs driven by a RunConfig.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mugstan/checkpoint.hpp"
#include "mugstan/config.hpp"
#include "mugstan/objectives.hpp"
#include "mugstan/report.hpp"

namespace mugstan {

/// Raised when training produces a non-finite value. The last good parameters
/// have been written to `checkpoint` when an output directory was configured.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::size_t step, std::filesystem::path checkpoint)
      : NumericError(what), step_(step), checkpoint_(std::move(checkpoint)) {}
  std::size_t step() const noexcept { return step_; }
  const std::filesystem::path& checkpoint() const noexcept { return checkpoint_; }

 private:
  std::size_t step_;
  std::filesystem::path checkpoint_;
};

template <class T>
struct Corpus {
  std::vector<SynthPair<T>> synthetic;       // feature or embedding mode synthetic pairs
  std::vector<EmbeddingPair<T>> embeddings;  // embedding-space pairs (synthetic or from file)

  bool feature_mode() const { return embeddings.empty(); }
  std::size_t size() const { return feature_mode() ? synthetic.size() : embeddings.size(); }
};

template <class T>
Corpus<T> load_corpus(const RunConfig& rc) {
  Corpus<T> c;
  if (rc.data.mode == DataMode::File) {
    c.embeddings = load_embeddings<T>(rc.data.path);
    if (c.embeddings.empty()) throw ContractError("corpus file " + rc.data.path.string() + " has no pairs");
    return c;
  }
  c.synthetic = generate_corpus<T>(rc.data.synth);
  if (rc.data.synth.mode == SynthMode::Embedding) {
    for (const auto& p : c.synthetic) c.embeddings.push_back(p.embedding());
  }
  return c;
}

namespace detail {

template <class T>
Tensor<T> stack_feature_frames(const std::vector<SynthPair<T>>& pairs, const std::vector<std::size_t>& idx) {
  std::vector<Tensor<T>> parts;
  parts.reserve(idx.size());
  for (auto i : idx) {
    const auto& f = pairs[i].frames;
    if (!f.defined()) throw ContractError("pair " + std::to_string(i) + " has no raw frames");
    Shape s = f.shape();
    s.insert(s.begin(), 1);
    parts.push_back(reshape(f, s));
  }
  return concat<T>(parts, 0);
}

template <class T>
std::vector<std::vector<std::size_t>> gather_ids(const std::vector<SynthPair<T>>& pairs,
                                                 const std::vector<std::size_t>& idx) {
  std::vector<std::vector<std::size_t>> out;
  for (auto i : idx) out.push_back(pairs[i].token_ids);
  return out;
}

inline std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

/// Scores for an embedding-space corpus under a parameter-free head.
template <class T>
Tensor<T> embedding_scores(const ModelConfig& mc, const std::vector<EmbeddingPair<T>>& pairs, PairwiseOptions opt) {
  std::vector<FrameSequence<T>> v;
  std::vector<TokenSequence<T>> c;
  for (const auto& p : pairs) {
    v.push_back(p.video);
    c.push_back(p.text);
  }
  const auto fv = stack_frames(v);
  const auto tc = stack_texts(c);
  switch (mc.head) {
    case SimilarityHead::Mug: return pairwise_mug_matrix(fv, tc, mc.mug, opt);
    case SimilarityHead::MeanPool: return pooled_similarity_matrix(fv, tc, Pooling::MeanPool);
    case SimilarityHead::ClsPool: return pooled_similarity_matrix(fv, tc, Pooling::ClsPool);
  }
  throw ConfigError("unknown similarity head");
}

}  // namespace detail

/// Full text x video score matrix of a feature-mode corpus, computed without recording.
template <class T>
Tensor<T> corpus_scores(MugStanModel<T>& model, const Corpus<T>& corpus, const EvalConfig& ec) {
  typename Tape<T>::Pause pause;
  const std::size_t n = corpus.synthetic.size();
  if (n == 0) throw ContractError("evaluation on an empty corpus");
  const std::size_t step = std::max<std::size_t>(1, ec.encode_batch);
  std::vector<Tensor<T>> vparts;
  TextBatch<T> texts;
  std::vector<Tensor<T>> tparts;
  for (std::size_t s = 0; s < n; s += step) {
    std::vector<std::size_t> idx(std::min(step, n - s));
    std::iota(idx.begin(), idx.end(), s);
    vparts.push_back(model.encode_videos(detail::stack_feature_frames(corpus.synthetic, idx), false).values);
    auto tb = model.encode_texts(detail::gather_ids(corpus.synthetic, idx));
    tparts.push_back(tb.values);
    texts.valid.insert(texts.valid.end(), tb.valid.begin(), tb.valid.end());
    texts.summary_index.insert(texts.summary_index.end(), tb.summary_index.begin(), tb.summary_index.end());
  }
  FrameBatch<T> videos;
  videos.values = vparts.size() == 1 ? vparts.front() : concat<T>(vparts, 0);
  texts.values = tparts.size() == 1 ? tparts.front() : concat<T>(tparts, 0);
  return model.similarity(videos, texts, {ec.chunk, ec.workers});
}

/// Mean contrastive loss over the whole corpus as one batch, at the model's current logit scale.
template <class T>
double corpus_loss(MugStanModel<T>& model, const Corpus<T>& corpus, const EvalConfig& ec) {
  typename Tape<T>::Pause pause;
  const auto scores = corpus_scores(model, corpus, ec);
  return contrastive_loss(scores, model.logit_scale()).total();
}

template <class T>
MetricsRecord eval_retrieval(MugStanModel<T>& model, const Corpus<T>& corpus, const EvalConfig& ec) {
  return retrieval_metrics(corpus_scores(model, corpus, ec));
}

/// Embedding-space corpora are scored directly by the configured head.
template <class T>
MetricsRecord eval_retrieval(const ModelConfig& mc, const Corpus<T>& corpus, const EvalConfig& ec) {
  if (corpus.embeddings.empty()) throw ContractError("embedding evaluation on an empty corpus");
  return retrieval_metrics(detail::embedding_scores(mc, corpus.embeddings, {ec.chunk, ec.workers}));
}

struct TrainOptions {
  bool write_outputs = false;  // checkpoints and the metrics log under rc.output_dir
};

template <class T>
struct TrainResult {
  std::vector<double> losses;  // per-step batch L_co
  std::size_t steps = 0;
  std::optional<std::filesystem::path> checkpoint;
};

/// Minimises the contrastive loss over Mug similarity matrices of random
/// batches. Deterministic in (config, seed).
template <class T>
TrainResult<T> train(const RunConfig& rc, MugStanModel<T>& model, const Corpus<T>& corpus, TrainOptions opt = {}) {
  if (!corpus.feature_mode()) throw ConfigError("training needs a feature-mode corpus");
  const std::size_t n = corpus.synthetic.size();
  const std::size_t B = std::min(rc.optim.batch_size, n);
  if (B < 2) throw ContractError("contrastive training needs at least two pairs");

  AdamWConfig ac;
  ac.weight_decay = rc.optim.weight_decay;
  AdamW<T> optimizer(model.parameter_groups(rc.optim.lr_backbone, rc.optim.lr_stan), ac);
  Rng batch_rng(rc.seed ^ 0xB47C4ULL);
  auto order = detail::iota_n(n);
  std::size_t cursor = n;

  const auto ckpt_path = rc.output_dir / "checkpoint.mgsk";
  std::ofstream log;
  if (opt.write_outputs) {
    std::filesystem::create_directories(rc.output_dir);
    log.open(rc.output_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot write " + (rc.output_dir / "train_log.jsonl").string());
  }
  auto snapshot = [&] {
    NamedTensors<T> s;
    for (const auto& [name, t] : model.state()) s.emplace_back(name, t.clone());
    return s;
  };
  auto last_good = snapshot();

  TrainResult<T> res;
  for (std::size_t step = 0; step < rc.optim.steps; ++step) {
    if (cursor + B > n) {
      batch_rng.shuffle(order.begin(), order.end());
      cursor = 0;
    }
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor + B));
    cursor += B;
    try {
      optimizer.zero_grad();
      Tape<T> tape;
      Tensor<T> loss;
      {
        typename Tape<T>::Scope scope(tape);
        const auto videos = model.encode_videos(detail::stack_feature_frames(corpus.synthetic, idx), true);
        const auto texts = model.encode_texts(detail::gather_ids(corpus.synthetic, idx));
        loss = contrastive_loss(model.similarity(videos, texts), model.logit_scale()).l_co;
      }
      tape.backward(loss);
      optimizer.step();
      model.clamp_logit_scale();
      res.losses.push_back(static_cast<double>(loss.item()));
    } catch (const NumericError& e) {
      std::filesystem::path kept;
      if (opt.write_outputs) {
        save_checkpoint(ckpt_path, last_good, rc.source);
        kept = ckpt_path;
      }
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e.what(), step, kept);
    }
    res.steps = step + 1;
    if (opt.write_outputs) {
      log << nlohmann::json{{"step", step}, {"loss", res.losses.back()}, {"logit_scale", model.logit_scale_value()}}.dump()
          << '\n';
    }
    const bool periodic = rc.optim.checkpoint_every > 0 && (step + 1) % rc.optim.checkpoint_every == 0;
    if (periodic) {
      last_good = snapshot();
      if (opt.write_outputs) save_checkpoint(ckpt_path, last_good, rc.source);
    }
  }
  if (opt.write_outputs) {
    save_checkpoint(ckpt_path, model.state(), rc.source);
    res.checkpoint = ckpt_path;
  }
  return res;
}

/// One training run (feature mode) or one direct evaluation (embedding mode).
template <class T>
MetricsRecord run_once(const RunConfig& rc, const std::string& name, TrainOptions opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  const auto corpus = load_corpus<T>(rc);
  MetricsRecord m;
  std::vector<double> losses;
  if (corpus.feature_mode()) {
    MugStanModel<T> model(rc.model, rc.seed);
    losses = train(rc, model, corpus, opt).losses;
    m = eval_retrieval(model, corpus, rc.eval);
  } else {
    m = eval_retrieval(rc.model, corpus, rc.eval);
  }
  m.name = name;
  m.seed = static_cast<std::int64_t>(rc.seed);
  m.loss_curve = losses;
  m.final_loss = losses.empty() ? 0.0 : losses.back();
  m.config_hash = config_hash(rc.source);
  m.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

struct AblationResult {
  std::vector<MetricsRecord> rows;     // variant-major, one per (variant, seed)
  std::vector<MetricsRecord> summary;  // per-variant means, seed = -1
};

/// Runs every variant on the same corpus and seed set. A variant's "model"
/// object is merged over the base model section.
template <class T>
AblationResult run_ablation(const RunConfig& rc) {
  if (rc.variants.empty()) throw ContractError("ablation: empty variant list");
  const auto seeds = rc.ablation_seeds.empty() ? std::vector<std::uint64_t>{rc.seed} : rc.ablation_seeds;
  AblationResult out;
  for (const auto& v : rc.variants) {
    MetricsRecord mean;
    mean.name = v.name;
    mean.seed = -1;
    for (auto seed : seeds) {
      auto doc = rc.source;
      doc["model"] = merged(doc.value("model", nlohmann::json::object()), v.model_patch);
      doc.erase("ablation");
      const auto vrc = parse_run_config(doc, seed);
      auto row = run_once<T>(vrc, v.name);
      const double w = 1.0 / static_cast<double>(seeds.size());
      mean.r1 += w * row.r1;
      mean.r5 += w * row.r5;
      mean.r10 += w * row.r10;
      mean.mdr += w * row.mdr;
      mean.meanr += w * row.meanr;
      mean.final_loss += w * row.final_loss;
      mean.wall_clock_s += w * row.wall_clock_s;
      mean.config_hash = row.config_hash;
      out.rows.push_back(std::move(row));
    }
    out.summary.push_back(std::move(mean));
  }
  return out;
}

}  // namespace mugstan
