#include <filesystem>

#include <gtest/gtest.h>

#include "mgavqa/graph.hpp"
#include "mgavqa/synthgen.hpp"

using namespace mgavqa;
using namespace mgavqa::synthgen;

namespace {

SynthConfig small(std::size_t n) {
  SynthConfig c;
  c.n_docs = n;
  return c;
}

}  // namespace

TEST(Synth, DeterministicBytes) {
  const auto a = generate_corpus(small(30));
  const auto b = generate_corpus(small(30));
  ASSERT_EQ(a.size(), 30u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(ingest::serialize_document(a[i]), ingest::serialize_document(b[i]));
  auto other = small(30);
  other.seed = 8;
  EXPECT_NE(ingest::serialize_document(generate_corpus(other)[0]), ingest::serialize_document(a[0]));
}

TEST(Synth, GoldAnswerMatchesExactlyOneSpan) {
  for (const auto& doc : generate_corpus(small(100))) {
    ASSERT_FALSE(doc.questions.empty());
    for (const auto& q : doc.questions) {
      ASSERT_TRUE(q.answer && q.answer_bbox);
      int box_matches = 0, text_matches = 0;
      for (const auto& s : doc.spans) {
        box_matches += s.bbox == *q.answer_bbox;
        text_matches += s.text == *q.answer;
      }
      EXPECT_EQ(box_matches, 1) << doc.id;
      EXPECT_GE(text_matches, 1) << doc.id;
    }
  }
}

TEST(Synth, LayoutInvariants) {
  const auto cfg = small(100);
  const graph::GraphParams gp;
  const double min_alignment = std::exp(-(cfg.jitter * cfg.jitter) / (2 * gp.sigma_h * gp.sigma_h)) - 1e-12;
  for (const auto& doc : generate_corpus(cfg)) {
    EXPECT_GE(doc.questions.size(), cfg.keys_min);
    EXPECT_LE(doc.questions.size(), cfg.keys_max);
    ASSERT_EQ(doc.spans.size(), 1 + 2 * doc.questions.size());
    for (const auto& s : doc.spans) {
      EXPECT_GE(s.bbox.x, 0);
      EXPECT_GE(s.bbox.y, 0);
      EXPECT_LE(s.bbox.right(), doc.width);
      EXPECT_LE(s.bbox.bottom(), doc.height);
      EXPECT_GE(s.ocr_conf, 0.85);
      EXPECT_LE(s.ocr_conf, 1.0);
    }
    for (std::size_t k = 0; k < doc.questions.size(); ++k) {
      const auto& key = doc.spans[1 + 2 * k];
      const auto& value = doc.spans[2 + 2 * k];
      EXPECT_EQ(doc.questions[k].text, "What is the " + key.text.substr(0, key.text.size() - 1) + "?");
      EXPECT_LE(std::abs(key.bbox.y - value.bbox.y), cfg.jitter);
      EXPECT_LE(graph::rect_gap(key.bbox, value.bbox), gp.tau);
      EXPECT_GE(graph::alignment_score(key.bbox, value.bbox, gp), min_alignment);
      EXPECT_GT(value.bbox.x, key.bbox.right());
    }
  }
}

TEST(Synth, SplitAndCounts) {
  const auto cfg = small(250);
  EXPECT_EQ(train_count(cfg), 200u);
  const auto s = split_corpus(generate_corpus(cfg), train_count(cfg));
  EXPECT_EQ(s.train.size(), 200u);
  EXPECT_EQ(s.eval.size(), 50u);
  EXPECT_EQ(s.train.front().id, "doc_0000");
  EXPECT_EQ(s.eval.front().id, "doc_0200");
}

TEST(Synth, WriteAndLoadCorpus) {
  const auto dir = std::filesystem::temp_directory_path() / "mgavqa_synth_test";
  std::filesystem::remove_all(dir);
  const auto cfg = small(10);
  const auto docs = generate_corpus(cfg);
  const auto manifest = write_corpus(dir, docs, cfg);
  EXPECT_EQ(manifest["train"].size(), 8u);
  EXPECT_EQ(manifest["eval"].size(), 2u);
  for (const auto& p : {dir, dir / kManifestName}) {
    const auto s = load_corpus(p);
    ASSERT_EQ(s.train.size(), 8u);
    ASSERT_EQ(s.eval.size(), 2u);
    EXPECT_EQ(ingest::serialize_document(s.eval[1]), ingest::serialize_document(docs[9]));
  }
  std::filesystem::remove_all(dir);
}

TEST(Synth, OverflowIsConfigError) {
  auto cfg = small(1);
  cfg.keys_max = 16;
  cfg.keys_min = 16;
  EXPECT_THROW(generate_corpus(cfg), ConfigError);
  cfg = small(1);
  cfg.width = 300;
  EXPECT_THROW(generate_corpus(cfg), ConfigError);
  cfg = small(0);
  EXPECT_THROW(generate_corpus(cfg), ConfigError);
  cfg = small(1);
  cfg.keys_min = 5;
  cfg.keys_max = 4;
  EXPECT_THROW(generate_corpus(cfg), ConfigError);
}

TEST(Synth, QuestionSuiteCoversEveryKey) {
  const auto docs = generate_corpus(small(20));
  const auto suite = question_suite(docs);
  std::size_t total = 0;
  for (const auto& d : docs) total += d.questions.size();
  EXPECT_EQ(suite.size(), total);
  EXPECT_EQ(suite[0].text, docs[0].questions[0].text);
}
