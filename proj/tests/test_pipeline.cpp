#include <atomic>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "mgavqa/mgavqa.hpp"

using namespace mgavqa;
using namespace mgavqa::pipeline;
using nlohmann::json;

namespace {

const std::vector<Document>& corpus() {
  static const auto docs = [] {
    synthgen::SynthConfig c;
    c.n_docs = 24;
    return synthgen::generate_corpus(c);
  }();
  return docs;
}

std::vector<Document> slice(std::size_t from, std::size_t to) {
  return {corpus().begin() + static_cast<std::ptrdiff_t>(from), corpus().begin() + static_cast<std::ptrdiff_t>(to)};
}

PipelineConfig quick_config() {
  PipelineConfig c;
  c.workers = 1;
  c.train.steps = 60;
  c.train.lr = 1e-2;
  return c;
}

const fusion::FusionWeights& fitted() {
  static const auto w = fit(slice(0, 16), quick_config()).weights;
  return w;
}

}  // namespace

TEST(Config, DefaultsAndJson) {
  const PipelineConfig c;
  EXPECT_EQ(c.d, 64u);
  EXPECT_DOUBLE_EQ(c.scale(), 8.0);
  const auto j = json::parse(R"({"d": 16, "seed": 3, "graph": {"tau": 50},
      "toggles": {"use_memory": false}, "train": {"optimizer": "sgd", "steps": 5}})");
  const auto p = config_from_json(j);
  EXPECT_EQ(p.d, 16u);
  EXPECT_EQ(p.seed, 3u);
  EXPECT_EQ(p.graph.tau, 50.0);
  EXPECT_FALSE(p.toggles.use_memory);
  EXPECT_TRUE(p.toggles.use_graph);
  EXPECT_EQ(p.train.optimizer, fusion::Optimizer::kSgd);
}

TEST(Config, Rejections) {
  for (const char* bad : {R"({"dd": 3})", R"({"graph": {"tauu": 1}})", R"({"d": 1})", R"({"d": "x"})",
                          R"({"train": {"optimizer": "adam"}})", R"({"memory": {"lambda": 2}})",
                          R"({"graph": {"alpha": 0.9}})", R"({"train": {"lr": 0}})", R"([])"}) {
    EXPECT_THROW(config_from_json(json::parse(bad)), ConfigError) << bad;
  }
}

TEST(Stages, ErrorsNameTheStage) {
  try {
    run_stage("memory", [] { throw EmptyMemoryError("x"); });
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "memory");
  }
  Document empty;
  empty.id = "e";
  empty.width = empty.height = 10;
  try {
    prepare_document(empty, quick_config());
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "ingest");
  }
}

TEST(ParallelFor, EachIndexOnceAndLowestErrorWins) {
  std::vector<std::atomic<int>> hits(100);
  parallel_for(100, 4, [&](std::size_t i) { ++hits[i]; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  try {
    parallel_for(50, 3, [](std::size_t i) {
      if (i == 7 || i == 30) throw std::runtime_error(std::to_string(i));
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "7");
  }
}

TEST(VisualTokens, NumericOrderAndBadKeys) {
  ingest::EmbeddingTable t(2);
  t.insert("vis:10", {10, 10});
  t.insert("vis:2", {2, 2});
  t.insert("5", {5, 5});
  const auto m = visual_tokens(t);
  ASSERT_EQ(m.rows(), 2u);
  EXPECT_EQ(m(0, 0), 2.0);
  EXPECT_EQ(m(1, 0), 10.0);
  t.insert("vis:x", {0, 0});
  EXPECT_THROW(visual_tokens(t), KeyedError);
}

TEST(Answer, ExtractiveAndDeterministic) {
  const auto cfg = quick_config();
  const auto& doc = corpus()[20];
  const auto ctx = prepare_document(doc, cfg);
  for (const auto& q : doc.questions) {
    const auto a = answer_question(ctx, q, cfg, fitted());
    const auto b = answer_question(doc, q, cfg, fitted());
    EXPECT_EQ(a.span_id, b.span_id);
    EXPECT_EQ(a.prob, b.prob);
    EXPECT_EQ(a.trace.dump(), b.trace.dump());
    const TextSpan* s = doc.find_span(a.span_id);
    ASSERT_NE(s, nullptr);
    EXPECT_EQ(a.answer_text, s->text);
    EXPECT_EQ(a.span_bbox, s->bbox);
    EXPECT_GE(a.prob, 0.0);
    EXPECT_LE(a.prob, 1.0);
    for (double v : a.bbox_pred) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Answer, WeightDimensionMismatch) {
  const auto& doc = corpus()[0];
  EXPECT_THROW(answer_question(doc, doc.questions[0], quick_config(), fusion::init_fusion_weights(8, 1)), ConfigError);
}

TEST(Answer, TraceShape) {
  const auto cfg = quick_config();
  const auto& doc = corpus()[21];
  Question multi = doc.questions[0];
  multi.text += " and also the total";
  const auto p = answer_question(doc, multi, cfg, fitted());
  const auto& t = p.trace;
  for (const char* k : {"doc_id", "question_id", "question", "toggles", "graph", "memory", "compression", "streams", "answer"})
    EXPECT_TRUE(t.contains(k)) << k;
  EXPECT_EQ(t["graph"]["num_nodes"], doc.spans.size());
  EXPECT_EQ(t["memory"]["hops"], 2);
  EXPECT_EQ(t["memory"]["chain"].size(), 2u);
  EXPECT_EQ(t["memory"]["chain"][1]["target"], "graph");
  EXPECT_EQ(t["compression"]["k"], t["compression"]["kept"].size());
  EXPECT_EQ(t["streams"]["norms"].size(), 6u);
  EXPECT_EQ(t["answer"]["span_id"], p.span_id);
  double w = 0;
  for (const auto& e : t["memory"]["weights_topk"]) w += e["w"].get<double>();
  EXPECT_LE(w, 1.0 + 1e-9);
}

TEST(Toggles, EachConfigurationRunsAndSubstitutes) {
  const auto& doc = corpus()[22];
  const auto& q = doc.questions[0];
  for (const auto& toggles : ablation_configs()) {
    PipelineConfig cfg = quick_config();
    cfg.toggles = toggles;
    const auto ctx = prepare_document(doc, cfg);
    const auto p = answer_question(ctx, q, cfg, fitted());
    EXPECT_FALSE(p.answer_text.empty());
    if (!toggles.use_graph) {
      EXPECT_EQ(ctx.spatial, ctx.graph.node_embeddings);
    }
    if (!toggles.use_memory) {
      EXPECT_EQ(p.trace["streams"]["norms"]["memory"], 0.0);
      EXPECT_TRUE(p.trace["memory"]["chain"].empty());
    }
    if (!toggles.use_compression) {
      EXPECT_EQ(p.trace["compression"]["k"], doc.spans.size());
    }
    if (!toggles.use_fusion) {
      EXPECT_EQ(p.span_id, ctx.memory.direct.front().span_id);
      EXPECT_EQ(p.prob, 1.0);
      EXPECT_EQ(p.trace["answer"]["source"], "direct_memory");
    }
  }
}

TEST(Embeddings, FileBackedMatchesSynthetic) {
  auto cfg = quick_config();
  const auto& doc = corpus()[23];
  const auto table = resolve_embeddings(doc, cfg);
  const auto dir = std::filesystem::temp_directory_path() / "mgavqa_emb_test";
  std::filesystem::create_directories(dir);
  // float32 narrowing makes the file-backed values differ from synthetic ones
  // by rounding only, so answers agree.
  ingest::write_file(dir / (doc.id + ".mgav"), ingest::write_embedding_file(table));
  auto file_cfg = cfg;
  file_cfg.embeddings = dir.string();
  for (const auto& q : doc.questions) {
    EXPECT_EQ(answer_question(doc, q, file_cfg, fitted()).span_id, answer_question(doc, q, cfg, fitted()).span_id);
  }
  Question unseen{99, "never embedded", std::nullopt, std::nullopt};
  EXPECT_THROW(answer_question(doc, unseen, file_cfg, fitted()), StageError);

  auto wrong_dim = file_cfg;
  wrong_dim.d = 32;
  EXPECT_THROW(prepare_document(doc, wrong_dim), StageError);
  auto missing = file_cfg;
  missing.embeddings = (dir / "nope.mgav").string();
  EXPECT_THROW(prepare_document(doc, missing), StageError);
  std::filesystem::remove_all(dir);
}

TEST(Embeddings, VisualTokensFromFile) {
  auto cfg = quick_config();
  const auto& doc = corpus()[23];
  auto table = resolve_embeddings(doc, cfg);
  const auto patches = ingest::multiscale_patches(doc.width, doc.height);
  for (std::size_t k = 0; k < patches.size(); ++k) table.insert(ingest::visual_key(k), ingest::synthetic_embed("patch " + std::to_string(k), cfg.d, 1));
  const auto path = std::filesystem::temp_directory_path() / "mgavqa_vis_test.mgav";
  ingest::write_file(path, ingest::write_embedding_file(table));
  cfg.embeddings = path.string();
  const auto ctx = prepare_document(doc, cfg);
  EXPECT_TRUE(ctx.visual_from_patches);
  EXPECT_EQ(ctx.visual.rows(), patches.size());
  const auto p = answer_question(ctx, doc.questions[0], cfg, fitted());
  EXPECT_EQ(p.trace["compression"]["source"], "patches");
  EXPECT_EQ(p.trace["compression"]["n"], patches.size());
  std::filesystem::remove(path);
}

TEST(Corpus, GoldSpanIndex) {
  const auto& doc = corpus()[0];
  for (const auto& q : doc.questions) {
    const auto i = gold_span_index(doc, q);
    ASSERT_TRUE(i);
    EXPECT_EQ(doc.spans[*i].bbox, *q.answer_bbox);
  }
  Question by_text{5, "x", doc.spans[2].text, std::nullopt};
  EXPECT_EQ(gold_span_index(doc, by_text), std::optional<std::size_t>(2));
  EXPECT_FALSE(gold_span_index(doc, Question{6, "x", std::nullopt, std::nullopt}));
}

TEST(Corpus, FitImprovesLoss) {
  const auto res = fit(slice(0, 8), quick_config());
  EXPECT_EQ(res.loss_history.size(), 61u);
  EXPECT_LT(res.loss_history.back(), res.loss_history.front());
  EXPECT_GT(res.examples, 0u);
  EXPECT_EQ(res.skipped, 0u);
}

TEST(Corpus, EvaluationIndependentOfWorkers) {
  auto cfg = quick_config();
  const auto docs = slice(16, 24);
  const auto one = eval::report_to_json(evaluate(docs, cfg, fitted())).dump();
  cfg.workers = 3;
  EXPECT_EQ(eval::report_to_json(evaluate(docs, cfg, fitted())).dump(), one);
}

TEST(Corpus, AblationRows) {
  const auto rows = ablate(slice(20, 24), quick_config(), fitted());
  ASSERT_EQ(rows.size(), 5u);
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.name);
  EXPECT_EQ(names, (std::set<std::string>{"full", "no_graph", "no_memory", "no_compression", "no_fusion"}));
  const auto j = ablation_to_json(rows);
  EXPECT_EQ(j[0]["config"], "full");
  EXPECT_FALSE(j[1]["use_graph"].get<bool>());
}
