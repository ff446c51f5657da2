#pragma once

// End-to-end question answering: embeddings → graph → GCN → memory →
// compression → attention streams → heads, plus corpus-level training,
// evaluation and ablation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgavqa/compression.hpp"
#include "mgavqa/errors.hpp"
#include "mgavqa/eval.hpp"
#include "mgavqa/fusion.hpp"
#include "mgavqa/graph.hpp"
#include "mgavqa/ingest.hpp"
#include "mgavqa/memory.hpp"
#include "mgavqa/numerics.hpp"

namespace mgavqa::pipeline {

struct Toggles {
  bool use_graph = true;
  bool use_memory = true;
  bool use_compression = true;
  bool use_fusion = true;

  friend bool operator==(const Toggles&, const Toggles&) = default;
};

inline constexpr const char* kSyntheticEmbeddings = "synthetic";

struct PipelineConfig {
  std::size_t d = 64;
  std::uint64_t seed = 7;
  graph::GraphParams graph;
  memory::MemoryParams memory;
  compression::CompressionParams compression;
  Toggles toggles;
  /// "synthetic", an MGAV file used for every document, or a directory holding
  /// <doc id>.mgav per document.
  std::string embeddings = kSyntheticEmbeddings;
  /// Multiplier applied to every embedding at pipeline entry; 0 selects √d.
  /// Unit vectors under softmax(·/√d) attention give nearly flat weights, so
  /// the default rescales them to norm √d.
  double embedding_scale = 0;
  std::size_t workers = 0;  // 0 = hardware concurrency
  fusion::TrainOptions train;

  double scale() const { return embedding_scale > 0 ? embedding_scale : std::sqrt(static_cast<double>(d)); }

  void validate() const {
    if (d < 2) throw ConfigError("config: d must be >= 2");
    if (embedding_scale < 0 || !std::isfinite(embedding_scale)) throw ConfigError("config: embedding_scale must be >= 0");
    try {
      graph.validate();
      memory.validate();
      compression.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    if (train.steps > 0 && !(train.lr > 0)) throw ConfigError("config: train.lr must be positive");
  }
};

// ---------------------------------------------------------------------------
// Config JSON

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, const char* section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string("config: ") + section + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return it.key() == a; }) == allowed.end()) {
      throw ConfigError(std::string("config: unknown key ") + section + "." + it.key());
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const char* section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + section + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  PipelineConfig c;
  detail::check_keys(j, "$", {"d", "seed", "embeddings", "embedding_scale", "workers", "graph", "memory",
                               "compression", "toggles", "train"});
  read(j, "d", c.d, "$");
  read(j, "seed", c.seed, "$");
  read(j, "embeddings", c.embeddings, "$");
  read(j, "embedding_scale", c.embedding_scale, "$");
  read(j, "workers", c.workers, "$");
  if (j.contains("graph")) {
    const auto& g = j["graph"];
    detail::check_keys(g, "graph", {"tau", "delta", "alpha", "beta", "gamma", "sigma_h", "sigma_v", "positional_norm"});
    read(g, "tau", c.graph.tau, "graph");
    read(g, "delta", c.graph.delta, "graph");
    read(g, "alpha", c.graph.alpha, "graph");
    read(g, "beta", c.graph.beta, "graph");
    read(g, "gamma", c.graph.gamma, "graph");
    read(g, "sigma_h", c.graph.sigma_h, "graph");
    read(g, "sigma_v", c.graph.sigma_v, "graph");
    read(g, "positional_norm", c.graph.positional_norm, "graph");
  }
  if (j.contains("memory")) {
    const auto& m = j["memory"];
    detail::check_keys(m, "memory", {"K_d", "K_i", "lambda", "hops", "kmeans_iters"});
    read(m, "K_d", c.memory.K_d, "memory");
    read(m, "K_i", c.memory.K_i, "memory");
    read(m, "lambda", c.memory.lambda, "memory");
    read(m, "hops", c.memory.hops, "memory");
    read(m, "kmeans_iters", c.memory.kmeans_iters, "memory");
  }
  if (j.contains("compression")) {
    const auto& m = j["compression"];
    detail::check_keys(m, "compression", {"omega", "rho_min", "rho_max", "k_max", "indicators"});
    read(m, "omega", c.compression.omega, "compression");
    read(m, "rho_min", c.compression.rho_min, "compression");
    read(m, "rho_max", c.compression.rho_max, "compression");
    read(m, "k_max", c.compression.k_max, "compression");
    read(m, "indicators", c.compression.indicators, "compression");
  }
  if (j.contains("toggles")) {
    const auto& t = j["toggles"];
    detail::check_keys(t, "toggles", {"use_graph", "use_memory", "use_compression", "use_fusion"});
    read(t, "use_graph", c.toggles.use_graph, "toggles");
    read(t, "use_memory", c.toggles.use_memory, "toggles");
    read(t, "use_compression", c.toggles.use_compression, "toggles");
    read(t, "use_fusion", c.toggles.use_fusion, "toggles");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::check_keys(t, "train", {"lr", "steps", "weight_decay", "batch_size", "optimizer"});
    read(t, "lr", c.train.lr, "train");
    read(t, "steps", c.train.steps, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    std::string opt = "adamw";
    read(t, "optimizer", opt, "train");
    if (opt == "adamw") {
      c.train.optimizer = fusion::Optimizer::kAdamW;
    } else if (opt == "sgd") {
      c.train.optimizer = fusion::Optimizer::kSgd;
    } else {
      throw ConfigError("config: train.optimizer must be adamw or sgd");
    }
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  try {
    return config_from_json(nlohmann::json::parse(ingest::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline nlohmann::json toggles_to_json(const Toggles& t) {
  return {{"use_graph", t.use_graph}, {"use_memory", t.use_memory}, {"use_compression", t.use_compression},
          {"use_fusion", t.use_fusion}};
}

// ---------------------------------------------------------------------------
// Stage plumbing

template <class F>
auto run_stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

/// Runs f(i) for i in [0, n) on up to `workers` threads. Each index is handled
/// exactly once; the lowest-index failure is rethrown after all threads join.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Embeddings

/// Unscaled embedding table for one document.
inline ingest::EmbeddingTable resolve_embeddings(const Document& doc, const PipelineConfig& cfg) {
  if (cfg.embeddings == kSyntheticEmbeddings) {
    ingest::EmbeddingTable t(cfg.d);
    for (const auto& s : doc.spans) t.insert(ingest::span_key(s.id), ingest::synthetic_embed(s.text, cfg.d, cfg.seed));
    for (const auto& q : doc.questions) {
      t.insert(ingest::question_key(q.id), ingest::synthetic_embed(q.text, cfg.d, cfg.seed));
    }
    return t;
  }
  std::filesystem::path path = cfg.embeddings;
  if (std::filesystem::is_directory(path)) {
    if (doc.id.empty()) throw ConfigError("embeddings: a per-document directory needs document ids");
    path /= doc.id + ".mgav";
  }
  if (!std::filesystem::exists(path)) throw ConfigError("embeddings: no such file " + path.string());
  return ingest::read_embedding_file(path, cfg.d);
}

/// "vis:<k>" rows in ascending k.
inline Matrix visual_tokens(const ingest::EmbeddingTable& t) {
  std::vector<std::pair<std::size_t, const Vector*>> rows;
  for (const auto& [key, v] : t.entries()) {
    if (key.rfind("vis:", 0) != 0) continue;
    try {
      std::size_t used = 0;
      const auto k = std::stoull(key.substr(4), &used);
      if (used == key.size() - 4) rows.emplace_back(static_cast<std::size_t>(k), &v);
    } catch (const std::exception&) {
      throw KeyedError(key, "visual token key must be vis:<index>");
    }
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  Matrix m(rows.size(), t.dim());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].second->begin(), rows[r].second->end(), m.row(r).begin());
  return m;
}

// ---------------------------------------------------------------------------
// Per-document state

struct DocumentContext {
  const Document* doc = nullptr;
  ingest::EmbeddingTable table;
  Matrix text;         // scaled span text embeddings, N × d
  graph::SpatialGraph graph;
  Matrix spatial;      // F_spatial: GCN output, or raw node features with the graph off
  Matrix span_states;  // answer-head span representation: F_spatial + node features
  memory::MemoryState memory;
  Matrix visual;       // visual tokens subject to compression
  bool visual_from_patches = false;
  Matrix a_ss;         // question-independent spatial↔spatial stream
};

inline DocumentContext prepare_document(const Document& doc, const PipelineConfig& cfg) {
  cfg.validate();
  DocumentContext ctx;
  ctx.doc = &doc;
  const double scale = cfg.scale();
  run_stage("ingest", [&] {
    if (doc.spans.empty()) throw InvalidArgument("document " + doc.id + " has no spans");
    ctx.table = resolve_embeddings(doc, cfg);
    ctx.text = Matrix(doc.spans.size(), cfg.d);
    for (std::size_t i = 0; i < doc.spans.size(); ++i) {
      const auto& v = ctx.table.at(ingest::span_key(doc.spans[i].id));
      for (std::size_t k = 0; k < cfg.d; ++k) ctx.text(i, k) = scale * v[k];
    }
    ctx.visual = visual_tokens(ctx.table);
    ctx.visual_from_patches = ctx.visual.rows() > 0;
    if (ctx.visual_from_patches) {
      for (double& x : ctx.visual.values()) x *= scale;
    } else {
      ctx.visual = ctx.text;
    }
  });
  run_stage("graph", [&] {
    auto gp = cfg.graph;
    gp.positional_norm *= scale;
    ctx.graph = graph::build_graph(doc, ctx.text, gp);
    if (cfg.toggles.use_graph) {
      ctx.spatial = graph::gcn_forward(ctx.graph, graph::init_gcn_layers(cfg.d, cfg.seed));
    } else {
      ctx.spatial = ctx.graph.node_embeddings;
    }
    ctx.span_states = ctx.spatial;
    for (std::size_t i = 0; i < ctx.span_states.rows(); ++i) axpy(1.0, ctx.graph.node_embeddings.row(i), ctx.span_states.row(i));
  });
  run_stage("memory", [&] {
    auto mp = cfg.memory;
    mp.seed = cfg.seed;
    ctx.memory = memory::populate(doc.spans, ctx.text, ctx.spatial, mp);
  });
  run_stage("fusion", [&] { ctx.a_ss = fusion::cross_attention_stream(ctx.spatial, ctx.spatial); });
  return ctx;
}

// ---------------------------------------------------------------------------
// Per-question features

struct QuestionFeatures {
  Vector q;
  std::size_t hops = 1;
  std::optional<memory::ChainReadout> chain;
  Vector m_integrated;
  compression::CompressionResult compression;
  fusion::PooledStreams pooled;
};

inline Vector question_embedding(const DocumentContext& ctx, const Question& q, const PipelineConfig& cfg) {
  Vector v;
  if (const Vector* found = ctx.table.find(ingest::question_key(q.id)); found && ctx.doc->find_question(q.id) &&
                                                                       ctx.doc->find_question(q.id)->text == q.text) {
    v = *found;
  } else if (cfg.embeddings == kSyntheticEmbeddings) {
    v = ingest::synthetic_embed(q.text, cfg.d, cfg.seed);
  } else {
    throw KeyedError(ingest::question_key(q.id), "missing question embedding");
  }
  for (double& x : v) x *= cfg.scale();
  return v;
}

inline QuestionFeatures question_features(const DocumentContext& ctx, const Question& question, const PipelineConfig& cfg) {
  QuestionFeatures f;
  const std::size_t d = cfg.d;
  run_stage("ingest", [&] { f.q = question_embedding(ctx, question, cfg); });
  run_stage("memory", [&] {
    const bool multi_hop = compression::count_indicators(question.text, cfg.compression.indicators) > 0;
    f.hops = multi_hop ? cfg.memory.hops : 1;
    if (cfg.toggles.use_memory) {
      f.chain = memory::iterative_retrieve(f.q, ctx.memory, ctx.spatial, f.hops);
      f.m_integrated = f.chain->output;
    } else {
      f.m_integrated.assign(d, 0.0);
    }
  });
  run_stage("compression", [&] {
    if (cfg.toggles.use_compression) {
      f.compression = compression::compress_tokens(f.q, ctx.visual, question.text, cfg.compression);
    } else {
      f.compression.k = ctx.visual.rows();
      f.compression.rho_used = 1.0;
      f.compression.kept_indices.resize(ctx.visual.rows());
      for (std::size_t i = 0; i < ctx.visual.rows(); ++i) f.compression.kept_indices[i] = i;
    }
  });
  run_stage("fusion", [&] {
    Matrix f_text(ctx.text.rows() + 1, d);
    std::copy(f.q.begin(), f.q.end(), f_text.row(0).begin());
    for (std::size_t i = 0; i < ctx.text.rows(); ++i) std::copy(ctx.text.row(i).begin(), ctx.text.row(i).end(), f_text.row(i + 1).begin());
    const Matrix a_tt = fusion::cross_attention_stream(f_text, f_text);
    const Matrix a_ts = fusion::cross_attention_stream(f_text, ctx.spatial);
    const Matrix a_st = fusion::cross_attention_stream(ctx.spatial, f_text);
    const Matrix t_comp = compression::gather_rows(ctx.visual, f.compression.kept_indices);
    f.pooled = fusion::pool_streams(a_tt, a_ts, a_st, ctx.a_ss, f.m_integrated, t_comp, d);
  });
  return f;
}

// ---------------------------------------------------------------------------
// Answering

struct Prediction {
  std::string doc_id;
  long long question_id = 0;
  long long span_id = 0;
  std::string answer_text;
  double prob = 0;
  std::array<double, 4> bbox_pred{};
  BBox span_bbox;
  nlohmann::json trace;

  eval::PredictionRecord record() const {
    return {doc_id, question_id, span_id, answer_text, span_bbox, prob, bbox_pred};
  }
};

namespace detail {

inline nlohmann::json topk_weights(const std::vector<double>& w, const std::vector<std::string>& keys, std::size_t k) {
  const auto idx = compression::select_top_k(w, k);
  std::vector<std::size_t> order(idx.begin(), idx.end());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
  auto out = nlohmann::json::array();
  for (std::size_t i : order) out.push_back({{"key", keys[i]}, {"w", w[i]}});
  return out;
}

inline constexpr std::size_t kTraceTopK = 10;

}  // namespace detail

inline nlohmann::json build_trace(const DocumentContext& ctx, const Question& question, const QuestionFeatures& f,
                                  const PipelineConfig& cfg, const Prediction& p) {
  using nlohmann::json;
  const Document& doc = *ctx.doc;
  json t;
  t["doc_id"] = doc.id;
  t["question_id"] = question.id;
  t["question"] = question.text;
  t["toggles"] = toggles_to_json(cfg.toggles);
  t["graph"] = {{"num_nodes", ctx.graph.num_nodes()},
                {"gcn_applied", cfg.toggles.use_graph},
                {"edges", graph::edges_to_json(ctx.graph)}};

  json mem = {{"enabled", cfg.toggles.use_memory}, {"hops", f.hops}};
  auto direct_ids = json::array();
  for (const auto& e : ctx.memory.direct) direct_ids.push_back(e.span_id);
  mem["direct_ids"] = direct_ids;
  mem["indirect_size"] = ctx.memory.indirect.rows();
  mem["weights_topk"] = json::array();
  mem["chain"] = json::array();
  if (f.chain) {
    const auto mem_keys = memory::memory_keys(ctx.memory);
    std::vector<std::string> node_keys;
    for (const auto& s : doc.spans) node_keys.push_back("node:" + std::to_string(s.id));
    for (std::size_t h = 0; h < f.chain->hop_weights.size(); ++h) {
      const bool over_memory = h == 0;
      const auto top = detail::topk_weights(f.chain->hop_weights[h], over_memory ? mem_keys : node_keys, detail::kTraceTopK);
      if (over_memory) mem["weights_topk"] = top;
      mem["chain"].push_back({{"hop", h + 1}, {"target", over_memory ? "memory" : "graph"}, {"weights_topk", top}});
    }
  }
  t["memory"] = mem;

  t["compression"] = {{"enabled", cfg.toggles.use_compression},
                      {"n", ctx.visual.rows()},
                      {"source", ctx.visual_from_patches ? "patches" : "spans"},
                      {"rho", f.compression.rho_used},
                      {"k", f.compression.k},
                      {"kept", f.compression.kept_indices}};

  json norms = json::object();
  for (std::size_t s = 0; s < fusion::kNumStreams; ++s) norms[fusion::kStreamNames[s]] = f.pooled.norms[s];
  t["streams"] = {{"norms", norms}, {"empty", f.pooled.empty_streams}};

  t["answer"] = {{"span_id", p.span_id},
                 {"text", p.answer_text},
                 {"prob", p.prob},
                 {"bbox_pred", p.bbox_pred},
                 {"span_bbox", ingest::bbox_to_json(p.span_bbox)},
                 {"source", cfg.toggles.use_fusion ? "fusion" : "direct_memory"}};
  return t;
}

inline Prediction answer_question(const DocumentContext& ctx, const Question& question, const PipelineConfig& cfg,
                                  const fusion::FusionWeights& w, bool with_trace = true) {
  if (w.dim() != cfg.d) throw ConfigError("weights have d = " + std::to_string(w.dim()) + " but config d = " + std::to_string(cfg.d));
  const Document& doc = *ctx.doc;
  const QuestionFeatures f = question_features(ctx, question, cfg);
  Prediction p;
  p.doc_id = doc.id;
  p.question_id = question.id;
  run_stage("heads", [&] {
    std::size_t idx = 0;
    if (cfg.toggles.use_fusion) {
      const Vector fused = fusion::project(w, f.pooled.concat);
      const Vector probs = fusion::predict_answer(fused, ctx.span_states, w);
      idx = fusion::argmax(probs);
      p.prob = probs[idx];
      p.bbox_pred = fusion::predict_bbox(fused, w);
    } else {
      if (ctx.memory.direct.empty()) throw EmptyMemoryError("direct memory is empty");
      const long long top = ctx.memory.direct.front().span_id;
      while (doc.spans[idx].id != top) ++idx;
      p.prob = 1.0;
      for (std::size_t k = 0; k < 4; ++k) p.bbox_pred[k] = sigmoid(w.b_b[k]);
    }
    p.span_id = doc.spans[idx].id;
    p.answer_text = doc.spans[idx].text;
    p.span_bbox = doc.spans[idx].bbox;
  });
  if (with_trace) p.trace = build_trace(ctx, question, f, cfg, p);
  return p;
}

inline Prediction answer_question(const Document& doc, const Question& question, const PipelineConfig& cfg,
                                  const fusion::FusionWeights& w) {
  return answer_question(prepare_document(doc, cfg), question, cfg, w);
}

// ---------------------------------------------------------------------------
// Corpus operations

/// Index of the span a gold answer refers to: exact box match first, then
/// normalized text match. nullopt when the question has no usable gold.
inline std::optional<std::size_t> gold_span_index(const Document& doc, const Question& q) {
  if (!q.answer) return std::nullopt;
  if (q.answer_bbox) {
    for (std::size_t i = 0; i < doc.spans.size(); ++i)
      if (doc.spans[i].bbox == *q.answer_bbox) return i;
  }
  const auto gold = eval::normalize_answer(*q.answer);
  for (std::size_t i = 0; i < doc.spans.size(); ++i)
    if (eval::normalize_answer(doc.spans[i].text) == gold) return i;
  return std::nullopt;
}

struct TrainingSet {
  std::vector<fusion::TrainingExample> examples;
  std::size_t skipped = 0;  // questions without a locatable gold span
};

inline TrainingSet build_training_set(const std::vector<Document>& docs, const PipelineConfig& cfg) {
  std::vector<TrainingSet> per_doc(docs.size());
  parallel_for(docs.size(), cfg.workers, [&](std::size_t i) {
    const Document& doc = docs[i];
    const DocumentContext ctx = prepare_document(doc, cfg);
    for (const auto& q : doc.questions) {
      const auto gold = gold_span_index(doc, q);
      if (!gold) {
        ++per_doc[i].skipped;
        continue;
      }
      const auto f = question_features(ctx, q, cfg);
      const BBox& b = q.answer_bbox ? *q.answer_bbox : doc.spans[*gold].bbox;
      per_doc[i].examples.push_back(
          {f.pooled.concat, ctx.span_states, *gold, {b.x / doc.width, b.y / doc.height, b.w / doc.width, b.h / doc.height}});
    }
  });
  TrainingSet out;
  for (auto& s : per_doc) {
    out.skipped += s.skipped;
    std::move(s.examples.begin(), s.examples.end(), std::back_inserter(out.examples));
  }
  return out;
}

struct FitResult {
  fusion::FusionWeights weights;
  std::vector<double> loss_history;
  std::size_t examples = 0;
  std::size_t skipped = 0;
};

/// Fits the heads on frozen pipeline features, starting from the
/// memory-identity initialization.
inline FitResult fit(const std::vector<Document>& train_docs, const PipelineConfig& cfg) {
  cfg.validate();
  const TrainingSet set = build_training_set(train_docs, cfg);
  if (set.examples.empty()) throw StageError("train", "no training questions with gold answers");
  auto opt = cfg.train;
  opt.seed = cfg.seed;
  auto init = fusion::init_fusion_weights(cfg.d, cfg.seed);
  // Start the box head at the mean training box; from sigmoid(0) = 0.5 the
  // optimizer would spend most of its steps just moving the biases.
  std::array<double, 4> mean{};
  for (const auto& ex : set.examples)
    for (std::size_t k = 0; k < 4; ++k) mean[k] += ex.gold_bbox[k] / static_cast<double>(set.examples.size());
  for (std::size_t k = 0; k < 4; ++k) {
    const double m = std::clamp(mean[k], 1e-6, 1.0 - 1e-6);
    init.b_b[k] = std::log(m / (1.0 - m));
  }
  auto res = fusion::train_heads(set.examples, init, opt);
  return {std::move(res.weights), std::move(res.loss_history), set.examples.size(), set.skipped};
}

/// Answers every question of every document; results ordered by document then question.
inline std::vector<Prediction> predict_corpus(const std::vector<Document>& docs, const PipelineConfig& cfg,
                                              const fusion::FusionWeights& w, bool with_trace = false) {
  std::vector<std::vector<Prediction>> per_doc(docs.size());
  parallel_for(docs.size(), cfg.workers, [&](std::size_t i) {
    const DocumentContext ctx = prepare_document(docs[i], cfg);
    for (const auto& q : docs[i].questions) per_doc[i].push_back(answer_question(ctx, q, cfg, w, with_trace));
  });
  std::vector<Prediction> out;
  for (auto& v : per_doc) std::move(v.begin(), v.end(), std::back_inserter(out));
  return out;
}

inline eval::EvalReport evaluate(const std::vector<Document>& docs, const PipelineConfig& cfg,
                                 const fusion::FusionWeights& w) {
  std::vector<eval::PredictionRecord> records;
  for (const auto& p : predict_corpus(docs, cfg, w)) records.push_back(p.record());
  return eval::evaluate_run(records, docs);
}

struct AblationRow {
  std::string name;
  Toggles toggles;
  eval::EvalReport report;
};

/// The full configuration plus each single module switched off, all scored with
/// the same weights fitted under the full configuration.
inline std::vector<Toggles> ablation_configs() {
  std::vector<Toggles> out(5);
  out[1].use_graph = false;
  out[2].use_memory = false;
  out[3].use_compression = false;
  out[4].use_fusion = false;
  return out;
}

inline std::vector<AblationRow> ablate(const std::vector<Document>& eval_docs, const PipelineConfig& cfg,
                                       const fusion::FusionWeights& w) {
  static constexpr std::array<const char*, 5> kNames = {"full", "no_graph", "no_memory", "no_compression", "no_fusion"};
  const auto configs = ablation_configs();
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    PipelineConfig c = cfg;
    c.toggles = configs[i];
    rows.push_back({kNames[i], configs[i], evaluate(eval_docs, c, w)});
  }
  return rows;
}

inline nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows) {
  auto out = nlohmann::json::array();
  for (const auto& r : rows) {
    auto j = toggles_to_json(r.toggles);
    j["config"] = r.name;
    j["anls"] = r.report.anls;
    j["map_iou_50_95"] = r.report.map_iou;
    j["count"] = r.report.count;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace mgavqa::pipeline
